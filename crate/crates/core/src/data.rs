//! Patient-grouped labelled datasets: synthetic generators, CSV I/O,
//! per-cohort normalisation and feature jitter.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::{Rng, RngCore};
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{Batch, Matrix};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("feature {index} has zero variance")]
    DegenerateFeature { index: usize },
    #[error("invalid dataset: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub patient_id: String,
    pub features: Vec<f64>,
    pub label: usize,
}

/// Ordered samples sharing one feature width.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: Vec<Sample>,
    num_classes: usize,
    feature_dim: usize,
}

impl Dataset {
    /// Full-collection constructor: every class in `0..num_classes` must occur.
    pub fn new(samples: Vec<Sample>, num_classes: usize) -> Result<Self, DataError> {
        let ds = Self::cohort(samples, num_classes)?;
        let counts = ds.class_counts();
        if let Some(missing) = counts.iter().position(|&c| c == 0) {
            return Err(DataError::Invalid(format!("class {missing} has no samples")));
        }
        Ok(ds)
    }

    /// Subset constructor; classes may be absent (small cohorts).
    pub fn cohort(samples: Vec<Sample>, num_classes: usize) -> Result<Self, DataError> {
        if num_classes < 2 {
            return Err(DataError::Invalid("at least two classes are required".into()));
        }
        let feature_dim = samples.first().map_or(0, |s| s.features.len());
        for (i, s) in samples.iter().enumerate() {
            if s.features.len() != feature_dim {
                return Err(DataError::Invalid(format!(
                    "sample {i} has {} features, expected {feature_dim}",
                    s.features.len()
                )));
            }
            if s.features.iter().any(|v| !v.is_finite()) {
                return Err(DataError::Invalid(format!("sample {i} has a non-finite feature")));
            }
            if s.label >= num_classes {
                return Err(DataError::Invalid(format!(
                    "sample {i} has label {} but there are {num_classes} classes",
                    s.label
                )));
            }
        }
        Ok(Self { samples, num_classes, feature_dim })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }

    /// Distinct patient ids in order of first appearance.
    pub fn patient_ids(&self) -> Vec<&str> {
        let mut seen = std::collections::HashSet::new();
        self.samples
            .iter()
            .filter(|s| seen.insert(s.patient_id.as_str()))
            .map(|s| s.patient_id.as_str())
            .collect()
    }

    /// Sample indices grouped by patient, patients in order of first appearance.
    pub fn patient_groups(&self) -> Vec<(&str, Vec<usize>)> {
        let mut order: Vec<(&str, Vec<usize>)> = Vec::new();
        let mut slot: HashMap<&str, usize> = HashMap::new();
        for (i, s) in self.samples.iter().enumerate() {
            let k = *slot.entry(s.patient_id.as_str()).or_insert_with(|| {
                order.push((s.patient_id.as_str(), Vec::new()));
                order.len() - 1
            });
            order[k].1.push(i);
        }
        order
    }

    pub fn features(&self) -> Matrix {
        let data = self.samples.iter().flat_map(|s| s.features.iter().copied()).collect();
        Matrix::from_vec(self.samples.len(), self.feature_dim, data).expect("validated on construction")
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    /// Whole dataset as one batch.
    pub fn to_batch(&self) -> Result<Batch, DataError> {
        Batch::new(self.features(), self.labels()).map_err(|e| DataError::Invalid(e.to_string()))
    }

    /// Concatenates cohorts in order.
    pub fn concat<'a>(parts: impl IntoIterator<Item = &'a Dataset>, num_classes: usize) -> Result<Dataset, DataError> {
        let samples = parts.into_iter().flat_map(|d| d.samples.iter().cloned()).collect();
        Dataset::cohort(samples, num_classes)
    }

    pub fn export_csv(&self, path: &Path) -> Result<(), DataError> {
        fs::write(path, self.to_csv_string()).map_err(|source| DataError::Io { path: path.to_path_buf(), source })
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("patient_id,label");
        for j in 0..self.feature_dim {
            let _ = write!(out, ",f{j}");
        }
        out.push('\n');
        for s in &self.samples {
            let _ = write!(out, "{},{}", s.patient_id, s.label);
            for v in &s.features {
                // `Display` for f64 is the shortest decimal that round-trips.
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }
}

/// Reads `patient_id,label,f0,...` rows. With `num_classes = None` the class
/// count is `max label + 1` and every class must occur.
pub fn load_csv(path: &Path, num_classes: Option<usize>) -> Result<Dataset, DataError> {
    let text = fs::read_to_string(path).map_err(|source| DataError::Io { path: path.to_path_buf(), source })?;
    parse_csv(&text, num_classes)
}

pub fn parse_csv(text: &str, num_classes: Option<usize>) -> Result<Dataset, DataError> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim_end_matches('\r')));
    let (_, header) = lines.next().ok_or(DataError::Parse { line: 1, message: "missing header".into() })?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols.len() < 3 || cols[0] != "patient_id" || cols[1] != "label" {
        return Err(DataError::Parse { line: 1, message: "header must start with patient_id,label,f0".into() });
    }
    for (j, c) in cols[2..].iter().enumerate() {
        if *c != format!("f{j}") {
            return Err(DataError::Parse { line: 1, message: format!("expected column f{j}, found {c:?}") });
        }
    }
    let dim = cols.len() - 2;
    let mut samples = Vec::new();
    for (line, row) in lines {
        if row.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = row.split(',').collect();
        if fields.len() != dim + 2 {
            return Err(DataError::Parse {
                line,
                message: format!("expected {} fields, found {}", dim + 2, fields.len()),
            });
        }
        let patient_id = fields[0].trim();
        if patient_id.is_empty() {
            return Err(DataError::Parse { line, message: "empty patient_id".into() });
        }
        let label: usize = fields[1]
            .trim()
            .parse()
            .map_err(|_| DataError::Parse { line, message: format!("label {:?} is not a class index", fields[1]) })?;
        if let Some(c) = num_classes {
            if label >= c {
                return Err(DataError::Parse { line, message: format!("unknown label {label} (expected < {c})") });
            }
        }
        let mut features = Vec::with_capacity(dim);
        for (j, f) in fields[2..].iter().enumerate() {
            let v: f64 = f
                .trim()
                .parse()
                .map_err(|_| DataError::Parse { line, message: format!("f{j} value {f:?} is not a number") })?;
            if !v.is_finite() {
                return Err(DataError::Parse { line, message: format!("f{j} is not finite") });
            }
            features.push(v);
        }
        samples.push(Sample { patient_id: patient_id.to_string(), features, label });
    }
    let classes = match num_classes {
        Some(c) => c,
        None => samples.iter().map(|s| s.label + 1).max().unwrap_or(0).max(2),
    };
    Dataset::new(samples, classes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SyntheticKind {
    /// Concentric shells: class `c` sits at radius `1 + c`.
    Rings,
    /// Gaussian clusters with centres on a circle of radius 2.
    Blobs,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub kind: SyntheticKind,
    pub n_patients: usize,
    #[serde(default = "default_samples_per_patient")]
    pub samples_per_patient: usize,
    #[serde(default = "default_num_classes")]
    pub num_classes: usize,
    #[serde(default)]
    pub noise_rate: f64,
    #[serde(default = "default_feature_dim")]
    pub feature_dim: usize,
    /// Scale of the offset shared by all samples of one patient.
    #[serde(default = "default_patient_spread")]
    pub patient_spread: f64,
    /// Per-sample jitter around the patient's position.
    #[serde(default = "default_sample_spread")]
    pub sample_spread: f64,
}

fn default_samples_per_patient() -> usize {
    2
}
fn default_num_classes() -> usize {
    2
}
fn default_feature_dim() -> usize {
    2
}
fn default_patient_spread() -> f64 {
    0.2
}
fn default_sample_spread() -> f64 {
    0.1
}

impl SyntheticSpec {
    pub fn new(kind: SyntheticKind, n_patients: usize) -> Self {
        Self {
            kind,
            n_patients,
            samples_per_patient: default_samples_per_patient(),
            num_classes: default_num_classes(),
            noise_rate: 0.0,
            feature_dim: default_feature_dim(),
            patient_spread: default_patient_spread(),
            sample_spread: default_sample_spread(),
        }
    }
}

/// Generates a patient-grouped dataset.
///
/// Patient `i` carries label `i mod C`, so per-class counts differ by at most
/// one patient. Samples are emitted patient by patient and share a
/// patient-level position. Label noise picks exactly
/// `round(noise_rate · N)` samples and draws their features from a different
/// class than the one they are labelled with.
pub fn gen_synthetic<R: RngCore + ?Sized>(spec: &SyntheticSpec, rng: &mut R) -> Result<Dataset, DataError> {
    if !(0.0..0.5).contains(&spec.noise_rate) {
        return Err(DataError::InvalidArgument(format!("noise_rate {} outside [0, 0.5)", spec.noise_rate)));
    }
    if spec.num_classes < 2 {
        return Err(DataError::InvalidArgument("num_classes must be at least 2".into()));
    }
    if spec.n_patients < spec.num_classes {
        return Err(DataError::InvalidArgument(format!(
            "{} patients cannot cover {} classes",
            spec.n_patients, spec.num_classes
        )));
    }
    if spec.samples_per_patient == 0 || spec.feature_dim == 0 {
        return Err(DataError::InvalidArgument("samples_per_patient and feature_dim must be positive".into()));
    }
    if spec.kind == SyntheticKind::Rings && spec.feature_dim < 2 {
        return Err(DataError::InvalidArgument("rings need at least two features".into()));
    }
    if !(spec.patient_spread >= 0.0 && spec.sample_spread >= 0.0) {
        return Err(DataError::InvalidArgument("spreads must be non-negative".into()));
    }

    let c = spec.num_classes;
    let d = spec.feature_dim;
    let total = spec.n_patients * spec.samples_per_patient;
    let n_flip = (spec.noise_rate * total as f64).round() as usize;
    let mut flipped = vec![false; total];
    for i in index::sample(rng, total, n_flip) {
        flipped[i] = true;
    }

    let mut samples = Vec::with_capacity(total);
    for p in 0..spec.n_patients {
        let label = p % c;
        let patient_id = format!("p{p:06}");
        // Patient-level draws shared by all of this patient's samples.
        let direction = unit_vector(d, rng);
        let radial = spec.patient_spread * gauss(rng);
        let offset: Vec<f64> =
            (0..d).map(|_| spec.patient_spread * gauss(rng)).collect();
        for s in 0..spec.samples_per_patient {
            let latent = if flipped[p * spec.samples_per_patient + s] {
                let other = rng.random_range(0..c - 1);
                if other >= label {
                    other + 1
                } else {
                    other
                }
            } else {
                label
            };
            let features: Vec<f64> = match spec.kind {
                SyntheticKind::Rings => {
                    let r = 1.0 + latent as f64 + radial;
                    direction
                        .iter()
                        .map(|u| r * u + spec.sample_spread * gauss(rng))
                        .collect()
                }
                SyntheticKind::Blobs => {
                    let centre = blob_centre(latent, c, d);
                    centre
                        .iter()
                        .zip(&offset)
                        .map(|(m, o)| m + o + spec.sample_spread * gauss(rng))
                        .collect()
                }
            };
            samples.push(Sample { patient_id: patient_id.clone(), features, label });
        }
    }
    Dataset::new(samples, c)
}

fn gauss<R: RngCore + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

fn unit_vector<R: RngCore + ?Sized>(d: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| gauss(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn blob_centre(class: usize, classes: usize, d: usize) -> Vec<f64> {
    let mut centre = vec![0.0; d];
    let angle = std::f64::consts::TAU * class as f64 / classes as f64;
    if d == 1 {
        centre[0] = 4.0 * class as f64 - 2.0 * (classes - 1) as f64;
    } else {
        centre[0] = 2.0 * angle.cos();
        centre[1] = 2.0 * angle.sin();
    }
    centre
}

/// Per-feature mean and population standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn compute(ds: &Dataset) -> Result<Self, DataError> {
        if ds.is_empty() {
            return Err(DataError::InvalidArgument("cannot normalise an empty cohort".into()));
        }
        let n = ds.len() as f64;
        let d = ds.feature_dim();
        let mut mean = vec![0.0; d];
        for s in ds.samples() {
            for (m, v) in mean.iter_mut().zip(&s.features) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for s in ds.samples() {
            for ((acc, v), m) in var.iter_mut().zip(&s.features).zip(&mean) {
                *acc += (v - m) * (v - m);
            }
        }
        let std: Vec<f64> = var.into_iter().map(|v| (v / n).sqrt()).collect();
        let stats = Self { mean, std };
        stats.check()?;
        Ok(stats)
    }

    fn check(&self) -> Result<(), DataError> {
        for (index, (&s, &m)) in self.std.iter().zip(&self.mean).enumerate() {
            if !(s.is_finite() && s > 1e-12 * (1.0 + m.abs())) {
                return Err(DataError::DegenerateFeature { index });
            }
        }
        Ok(())
    }
}

/// Standardises a cohort. Without `stats` the cohort's own statistics are
/// used; with `stats` those are applied instead.
pub fn normalize(cohort: &Dataset, stats: Option<&NormStats>) -> Result<(Dataset, NormStats), DataError> {
    let stats = match stats {
        Some(s) => {
            if s.mean.len() != cohort.feature_dim() || s.std.len() != cohort.feature_dim() {
                return Err(DataError::InvalidArgument(format!(
                    "stats cover {} features, cohort has {}",
                    s.mean.len(),
                    cohort.feature_dim()
                )));
            }
            s.check()?;
            s.clone()
        }
        None => NormStats::compute(cohort)?,
    };
    let samples = cohort
        .samples()
        .iter()
        .map(|s| Sample {
            patient_id: s.patient_id.clone(),
            features: s.features.iter().zip(&stats.mean).zip(&stats.std).map(|((v, m), sd)| (v - m) / sd).collect(),
            label: s.label,
        })
        .collect();
    Ok((Dataset { samples, num_classes: cohort.num_classes, feature_dim: cohort.feature_dim }, stats))
}

/// Adds `N(0, sigma²)` to every feature; labels are untouched.
pub fn augment<R: RngCore + ?Sized>(batch: &Batch, sigma: f64, rng: &mut R) -> Result<Batch, DataError> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(DataError::InvalidArgument(format!("sigma must be non-negative, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(batch.clone());
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| DataError::InvalidArgument(e.to_string()))?;
    let mut features = batch.features.clone();
    for v in features.as_mut_slice() {
        *v += normal.sample(rng);
    }
    Ok(Batch { features, labels: batch.labels.clone() })
}
