//! Output files: metrics CSV, JSON summaries, manifests and checkpoints.

use std::io;
use std::path::Path;

use fedcycle_core::heuristics::{MetricsRow, RunResult, StopReason};
use fedcycle_core::partition::Split;
use serde::Serialize;
use serde_json::ser::{Formatter, PrettyFormatter};
use serde_json::{json, Value};

use crate::CliError;

pub const METRICS_HEADER: &str = "global_epoch,phase,institution,learning_rate,train_acc,val_acc,val_loss";

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        let inst = r.institution.map(|i| i.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.global_epoch,
            r.phase.letter(),
            inst,
            r.learning_rate,
            r.train_accuracy,
            r.validation_accuracy,
            r.validation_loss
        ));
    }
    out
}

pub fn summary(result: &RunResult) -> Value {
    let mut v = json!({
        "heuristic": result.kind.name(),
        "kind": result.kind,
        "seed": result.seed,
        "train_accuracy": result.train_accuracy,
        "validation_accuracy": result.validation_accuracy,
        "test_accuracy": result.test.top1,
        "epochs": result.rows.iter().map(|r| r.global_epoch + 1).max().unwrap_or(0),
        "optimizer_steps": result.optimizer_steps,
        "transfers": result.transfers.len(),
        "transfer_bytes": result.transfers.iter().map(|t| t.bytes).sum::<usize>(),
        "stop": match result.stop { StopReason::Schedule => "schedule", StopReason::EpochLimit => "epoch-limit" },
    });
    if result.test.k > 1 {
        v["top_k"] = json!(result.test.k);
        v["test_topk_accuracy"] = json!(result.test.topk);
    }
    v
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; zero for a single value.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Self { mean, std }
    }
}

pub fn aggregate(results: &[RunResult]) -> Value {
    let stat = |f: fn(&RunResult) -> f64| MeanStd::of(&results.iter().map(f).collect::<Vec<_>>());
    json!({
        "heuristic": results[0].kind.name(),
        "kind": results[0].kind,
        "seeds": results.iter().map(|r| r.seed).collect::<Vec<_>>(),
        "runs": results.len(),
        "train_accuracy": stat(|r| r.train_accuracy),
        "validation_accuracy": stat(|r| r.validation_accuracy),
        "test_accuracy": stat(|r| r.test.top1),
    })
}

pub fn manifest(split: &Split) -> Value {
    serde_json::to_value(split.manifest()).expect("manifest is plain data")
}

/// Pretty JSON whose floats carry 17 significant digits.
struct Exact(PrettyFormatter<'static>);

impl Formatter for Exact {
    fn write_f64<W: ?Sized + io::Write>(&mut self, w: &mut W, value: f64) -> io::Result<()> {
        if value.is_finite() {
            write!(w, "{value:.16e}")
        } else {
            w.write_all(b"null")
        }
    }
    fn begin_array<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_array(w)
    }
    fn end_array<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array(w)
    }
    fn begin_array_value<W: ?Sized + io::Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_array_value(w, first)
    }
    fn end_array_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array_value(w)
    }
    fn begin_object<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object(w)
    }
    fn end_object<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object(w)
    }
    fn begin_object_key<W: ?Sized + io::Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_object_key(w, first)
    }
    fn begin_object_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object_value(w)
    }
    fn end_object_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object_value(w)
    }
}

pub fn to_json(value: &Value) -> String {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, Exact(PrettyFormatter::new()));
    value.serialize(&mut ser).expect("serializing a Value cannot fail");
    buf.push(b'\n');
    String::from_utf8(buf).expect("json is utf-8")
}

pub fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|e| CliError::Output(format!("cannot write {}: {e}", path.display())))
}
