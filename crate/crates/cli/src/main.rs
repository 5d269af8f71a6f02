mod config;
mod report;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fedcycle_core::heuristics::{run, HeuristicError, HeuristicKind, RunResult, TransportKind};
use fedcycle_core::nn::{default_mlp, grad_check, Batch, LayerKind, Matrix, ModelState, OptimizerKind};
use fedcycle_core::par;
use fedcycle_core::transport::{inspect, read_packet_file, serialize, write_packet_file};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use config::ExperimentFile;
use report::MeanStd;

const GRADCHECK_LIMIT: f64 = 1e-4;

#[derive(Debug)]
pub enum CliError {
    /// Missing or unreadable input file.
    Input(String),
    Config(String),
    Runtime(String),
    Output(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Input(_) | CliError::Config(_) => 2,
            CliError::Runtime(_) | CliError::Output(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Input(m) | CliError::Output(m) => write!(f, "{m}"),
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Runtime(m) => write!(f, "run failed: {m}"),
        }
    }
}

#[derive(Parser)]
#[command(name = "fedcycle", version, about = "Simulate collaborative training across data silos")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the configured heuristic once per seed.
    Run {
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Run the heuristic over the first m institutions for each m.
    Sweep {
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Check backpropagation against finite differences on the default network.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write the split manifest for each seed without training.
    Partition {
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Print the header of a weight packet.
    Inspect { packet: PathBuf },
}

#[derive(Args, Clone, Default)]
struct Overrides {
    /// Run this seed only.
    #[arg(long)]
    seed_override: Option<u64>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long, value_enum)]
    transport: Option<TransportArg>,
    /// Epochs per visit for cyclical weight transfer.
    #[arg(long)]
    freq: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum TransportArg {
    Memory,
    Socket,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run { config, overrides } => cmd_run(&config, &overrides),
        Command::Sweep { config, overrides } => cmd_sweep(&config, &overrides),
        Command::Gradcheck { seed } => cmd_gradcheck(seed),
        Command::Partition { config, overrides } => cmd_partition(&config, &overrides),
        Command::Inspect { packet } => cmd_inspect(&packet),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("fedcycle: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

/// Loads the file and applies flags, then `FEDCYCLE_SEED`.
fn load(path: &Path, o: &Overrides) -> Result<(ExperimentFile, PathBuf), CliError> {
    let mut file = ExperimentFile::load(path)?;
    if let Some(seed) = o.seed_override {
        file.seeds = vec![seed];
    }
    if let Ok(raw) = std::env::var("FEDCYCLE_SEED") {
        let seed = raw
            .trim()
            .parse()
            .map_err(|_| CliError::Config(format!("FEDCYCLE_SEED: expected an unsigned integer, got {raw:?}")))?;
        file.seeds = vec![seed];
    }
    if let Some(t) = o.transport {
        file.training.transport = match t {
            TransportArg::Memory => TransportKind::Memory,
            TransportArg::Socket => TransportKind::Socket,
        };
    }
    if let Some(freq) = o.freq {
        match &mut file.heuristic {
            HeuristicKind::CyclicalWeightTransfer { frequency } => *frequency = freq,
            other => {
                return Err(CliError::Config(format!("--freq applies to cyclical-weight-transfer, not {}", other.name())))
            }
        }
    }
    let out = o.output_dir.clone().or_else(|| file.output_dir.clone()).unwrap_or_else(|| PathBuf::from("fedcycle-out"));
    std::fs::create_dir_all(&out).map_err(|e| CliError::Output(format!("cannot create {}: {e}", out.display())))?;
    Ok((file, out))
}

fn module_of(e: &HeuristicError) -> &'static str {
    match e {
        HeuristicError::InvalidArgument(_) => "heuristics",
        HeuristicError::Nn(_) => "nn-core",
        HeuristicError::Data(_) => "data",
        HeuristicError::Partition(_) => "partition",
        HeuristicError::Schedule(_) => "schedule",
        HeuristicError::Transport(_) => "transport",
    }
}

fn runtime(seed: u64, e: HeuristicError) -> CliError {
    CliError::Runtime(format!("{} (seed {seed}): {e}", module_of(&e)))
}

fn run_seed(file: &ExperimentFile, out: &Path, seed: u64) -> Result<RunResult, CliError> {
    let split = file.split(seed)?;
    let cfg = file.config(seed);
    let result = run(&cfg, &split, file.heuristic).map_err(|e| runtime(seed, e))?;

    report::write(&out.join(format!("metrics_seed{seed}.csv")), report::metrics_csv(&result.rows))?;
    report::write(&out.join(format!("summary_seed{seed}.json")), report::to_json(&report::summary(&result)))?;
    report::write(&out.join(format!("manifest_seed{seed}.json")), report::to_json(&report::manifest(&split)))?;

    let epochs = result.rows.iter().map(|r| r.global_epoch + 1).max().unwrap_or(0) as u32;
    let origin = result.rows.last().and_then(|r| r.institution).unwrap_or(0) as u16;
    for (i, model) in result.models.iter().enumerate() {
        let name = if result.models.len() == 1 {
            format!("model_seed{seed}.fwt")
        } else {
            format!("model_seed{seed}_member{i}.fwt")
        };
        let from = if result.models.len() == 1 { origin } else { i as u16 };
        let bytes = serialize(model, epochs, from, cfg.transfer_carries_optimizer_state)
            .map_err(|e| CliError::Runtime(format!("transport (seed {seed}): {e}")))?;
        let path = out.join(name);
        write_packet_file(&path, &bytes).map_err(|e| CliError::Output(format!("cannot write {}: {e}", path.display())))?;
    }
    Ok(result)
}

fn cmd_run(path: &Path, o: &Overrides) -> Result<ExitCode, CliError> {
    let (file, out) = load(path, o)?;
    let results = par::map(&file.seeds, |&seed| run_seed(&file, &out, seed)).into_iter().collect::<Result<Vec<_>, _>>()?;
    for r in &results {
        println!(
            "seed {:>4}  {}  train {:.4}  val {:.4}  test {:.4}  epochs {}",
            r.seed,
            r.kind.name(),
            r.train_accuracy,
            r.validation_accuracy,
            r.test.top1,
            r.rows.iter().map(|x| x.global_epoch + 1).max().unwrap_or(0)
        );
    }
    let agg = report::aggregate(&results);
    report::write(&out.join("aggregate.json"), report::to_json(&agg))?;
    let test = MeanStd::of(&results.iter().map(|r| r.test.top1).collect::<Vec<_>>());
    println!("test accuracy {:.2} ± {:.2} % over {} seed(s); outputs in {}", 100.0 * test.mean, 100.0 * test.std, results.len(), out.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_sweep(path: &Path, o: &Overrides) -> Result<ExitCode, CliError> {
    let (file, out) = load(path, o)?;
    let k = file.plan(0)?.k();
    let ms: Vec<usize> = file.sweep.as_ref().and_then(|s| s.m.clone()).unwrap_or_else(|| (1..=k).collect());
    let splits = file.seeds.iter().map(|&s| file.split(s)).collect::<Result<Vec<_>, _>>()?;
    let jobs: Vec<(usize, usize)> = ms.iter().flat_map(|&m| (0..splits.len()).map(move |j| (m, j))).collect();
    let results = par::map(&jobs, |&(m, j)| {
        let seed = file.seeds[j];
        let sub = splits[j].first(m).map_err(|e| CliError::Runtime(format!("partition (seed {seed}): {e}")))?;
        run(&file.config(seed), &sub, file.heuristic).map_err(|e| runtime(seed, e))
    })
    .into_iter()
    .collect::<Result<Vec<_>, _>>()?;

    let mut csv = String::from("m,seed,train_acc,val_acc,test_acc,epochs\n");
    for (&(m, _), r) in jobs.iter().zip(&results) {
        let epochs = r.rows.iter().map(|x| x.global_epoch + 1).max().unwrap_or(0);
        csv.push_str(&format!("{m},{},{},{},{},{epochs}\n", r.seed, r.train_accuracy, r.validation_accuracy, r.test.top1));
    }
    report::write(&out.join("sweep.csv"), csv)?;

    let mut rows = Vec::new();
    println!("{:>3}  {:>14}  {:>14}", "m", "val acc %", "test acc %");
    for &m in &ms {
        let of_m: Vec<&RunResult> = jobs.iter().zip(&results).filter(|((mm, _), _)| *mm == m).map(|(_, r)| r).collect();
        let val = MeanStd::of(&of_m.iter().map(|r| r.validation_accuracy).collect::<Vec<_>>());
        let test = MeanStd::of(&of_m.iter().map(|r| r.test.top1).collect::<Vec<_>>());
        println!("{m:>3}  {:>6.2} ± {:<5.2}  {:>6.2} ± {:<5.2}", 100.0 * val.mean, 100.0 * val.std, 100.0 * test.mean, 100.0 * test.std);
        rows.push(json!({ "m": m, "runs": of_m.len(), "validation_accuracy": val, "test_accuracy": test }));
    }
    let summary = json!({
        "heuristic": file.heuristic.name(),
        "kind": file.heuristic,
        "seeds": file.seeds,
        "rows": rows,
    });
    report::write(&out.join("sweep_summary.json"), report::to_json(&summary))?;
    Ok(ExitCode::SUCCESS)
}

/// Smallest |pre-activation| feeding any ReLU; finite differences are only
/// meaningful away from the kink.
fn kink_margin(model: &ModelState, x: &Matrix, rng: &mut ChaCha8Rng) -> Result<f64, CliError> {
    let fwd = model.forward(x, rng).map_err(|e| CliError::Runtime(format!("nn-core: {e}")))?;
    Ok(model
        .specs()
        .iter()
        .enumerate()
        .filter(|(_, s)| s.kind == LayerKind::Relu)
        .flat_map(|(i, _)| fwd.layer_input(i).as_slice().iter().map(|z| z.abs()).collect::<Vec<_>>())
        .fold(f64::INFINITY, f64::min))
}

fn cmd_gradcheck(seed: u64) -> Result<ExitCode, CliError> {
    let nn = |e: fedcycle_core::nn::NnError| CliError::Runtime(format!("nn-core: {e}"));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for classes in [2, 3] {
        let (d, n) = (4, 16);
        let model = ModelState::new(default_mlp(d, classes), OptimizerKind::SgdMomentum, &mut rng).map_err(nn)?;
        let x = loop {
            let x = Matrix::from_vec(n, d, (0..n * d).map(|_| rng.random_range(-2.0..2.0)).collect()).map_err(nn)?;
            if kink_margin(&model, &x, &mut rng)? > 1e-3 {
                break x;
            }
        };
        let labels = (0..n).map(|_| rng.random_range(0..classes)).collect();
        let batch = Batch::new(x, labels).map_err(nn)?;
        worst = worst.max(grad_check(&model, &batch, 1e-5, 0.0).map_err(nn)?);
    }
    println!("max relative error: {worst:.3e}");
    if worst > GRADCHECK_LIMIT {
        eprintln!("fedcycle: gradient check failed (limit {GRADCHECK_LIMIT:e})");
        return Ok(ExitCode::from(1));
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_partition(path: &Path, o: &Overrides) -> Result<ExitCode, CliError> {
    let (file, out) = load(path, o)?;
    for &seed in &file.seeds {
        let split = file.split(seed)?;
        let target = out.join(format!("manifest_seed{seed}.json"));
        report::write(&target, report::to_json(&report::manifest(&split)))?;
        println!("{}", target.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_inspect(path: &Path) -> Result<ExitCode, CliError> {
    let bytes = read_packet_file(path).map_err(|e| CliError::Input(format!("cannot read packet {}: {e}", path.display())))?;
    let meta = inspect(&bytes).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    println!("format_version: {}", meta.format_version);
    println!("arch_hash: {:#018x}", meta.arch_hash);
    println!("global_epoch: {}", meta.global_epoch);
    println!("origin_institution: {}", meta.origin_institution);
    let opt = match meta.opt_state {
        None => "none",
        Some(OptimizerKind::SgdMomentum) => "sgd-momentum",
        Some(OptimizerKind::Adam) => "adam",
    };
    println!("optimizer_state: {opt}");
    println!("tensors: {}", meta.tensors);
    Ok(ExitCode::SUCCESS)
}
