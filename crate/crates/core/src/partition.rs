//! Patient-level stratified division into institutions, validation and test.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, Dataset};

#[derive(Debug, Error)]
pub enum PartitionError {
    #[error("invalid split plan: {0}")]
    InvalidArgument(String),
    #[error("not enough patients: {}", .0.join("; "))]
    Capacity(Vec<String>),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Patient counts per cohort. Institutions are listed individually so unequal
/// sizes are expressible even though the usual plan is uniform.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitPlan {
    pub institution_sizes: Vec<usize>,
    pub patients_validation: usize,
    pub patients_test: usize,
    pub seed: u64,
}

impl SplitPlan {
    pub fn uniform(
        k: usize,
        patients_per_institution: usize,
        patients_validation: usize,
        patients_test: usize,
        seed: u64,
    ) -> Result<Self, PartitionError> {
        let plan = Self {
            institution_sizes: vec![patients_per_institution; k],
            patients_validation,
            patients_test,
            seed,
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn k(&self) -> usize {
        self.institution_sizes.len()
    }

    pub fn validate(&self) -> Result<(), PartitionError> {
        if self.institution_sizes.is_empty() {
            return Err(PartitionError::InvalidArgument("at least one institution is required".into()));
        }
        if self.institution_sizes.contains(&0) || self.patients_validation == 0 || self.patients_test == 0 {
            return Err(PartitionError::InvalidArgument("every cohort needs at least one patient".into()));
        }
        Ok(())
    }

    /// Cohort sizes in allocation order: institutions, validation, test.
    fn cohort_sizes(&self) -> Vec<usize> {
        let mut sizes = self.institution_sizes.clone();
        sizes.extend([self.patients_validation, self.patients_test]);
        sizes
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub institutions: Vec<Dataset>,
    pub validation: Dataset,
    pub test: Dataset,
}

/// Cohort → patient ids, for audit and reproduction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub institutions: Vec<Vec<String>>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

impl Split {
    pub fn k(&self) -> usize {
        self.institutions.len()
    }

    pub fn manifest(&self) -> SplitManifest {
        let ids = |d: &Dataset| d.patient_ids().into_iter().map(String::from).collect::<Vec<_>>();
        SplitManifest {
            institutions: self.institutions.iter().map(ids).collect(),
            validation: ids(&self.validation),
            test: ids(&self.test),
        }
    }

    /// The first `m` institutions with the same validation and test cohorts.
    pub fn first(&self, m: usize) -> Result<Split, PartitionError> {
        if m == 0 || m > self.k() {
            return Err(PartitionError::InvalidArgument(format!("cannot take {m} of {} institutions", self.k())));
        }
        Ok(Split {
            institutions: self.institutions[..m].to_vec(),
            validation: self.validation.clone(),
            test: self.test.clone(),
        })
    }

    /// Applies `f` to every cohort.
    pub fn map_cohorts<E>(&self, mut f: impl FnMut(&Dataset) -> Result<Dataset, E>) -> Result<Split, E> {
        Ok(Split {
            institutions: self.institutions.iter().map(&mut f).collect::<Result<_, _>>()?,
            validation: f(&self.validation)?,
            test: f(&self.test)?,
        })
    }
}

/// Label used to stratify a patient: the majority label among its samples,
/// ties going to the lowest class index.
fn patient_label(ds: &Dataset, indices: &[usize]) -> usize {
    let mut counts = vec![0usize; ds.num_classes()];
    for &i in indices {
        counts[ds.samples()[i].label] += 1;
    }
    let best = *counts.iter().max().expect("at least two classes");
    counts.iter().position(|&c| c == best).expect("max exists")
}

/// Samples whole patients without replacement into `k` institutions plus
/// validation and test, with equal class representation in every cohort.
///
/// A cohort of `p` patients gets `p / C` patients of each class; the `p % C`
/// leftovers rotate across classes from cohort to cohort.
pub fn stratified_split(dataset: &Dataset, plan: &SplitPlan) -> Result<Split, PartitionError> {
    plan.validate()?;
    let classes = dataset.num_classes();
    let groups = dataset.patient_groups();

    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (g, (_, idx)) in groups.iter().enumerate() {
        by_class[patient_label(dataset, idx)].push(g);
    }

    let sizes = plan.cohort_sizes();
    let mut quota = vec![vec![0usize; classes]; sizes.len()];
    let mut offset = 0;
    for (j, &p) in sizes.iter().enumerate() {
        for (c, q) in quota[j].iter_mut().enumerate() {
            *q = p / classes;
            let extra = (c + classes - offset % classes) % classes;
            if extra < p % classes {
                *q += 1;
            }
        }
        offset += p % classes;
    }

    let shortfalls: Vec<String> = (0..classes)
        .filter_map(|c| {
            let need: usize = quota.iter().map(|q| q[c]).sum();
            let have = by_class[c].len();
            (need > have).then(|| format!("class {c} needs {need} patients but has {have} (short {})", need - have))
        })
        .collect();
    if !shortfalls.is_empty() {
        return Err(PartitionError::Capacity(shortfalls));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    for list in &mut by_class {
        list.shuffle(&mut rng);
    }

    let mut cursor = vec![0usize; classes];
    let mut cohorts = Vec::with_capacity(sizes.len());
    for q in &quota {
        let mut chosen: Vec<usize> = Vec::new();
        for c in 0..classes {
            chosen.extend_from_slice(&by_class[c][cursor[c]..cursor[c] + q[c]]);
            cursor[c] += q[c];
        }
        // Keep the source ordering inside a cohort.
        chosen.sort_unstable();
        let samples = chosen
            .iter()
            .flat_map(|&g| groups[g].1.iter().map(|&i| dataset.samples()[i].clone()))
            .collect();
        cohorts.push(Dataset::cohort(samples, classes)?);
    }

    let test = cohorts.pop().expect("test cohort");
    let validation = cohorts.pop().expect("validation cohort");
    Ok(Split { institutions: cohorts, validation, test })
}

/// Concatenation of the institutional cohorts; validation and test excluded.
pub fn pool(split: &Split) -> Dataset {
    let classes = split.validation.num_classes();
    Dataset::concat(&split.institutions, classes).expect("cohorts share shape")
}

/// True when no patient id occurs in two cohorts.
pub fn cohorts_disjoint(split: &Split) -> bool {
    let mut seen = HashSet::new();
    split
        .institutions
        .iter()
        .chain([&split.validation, &split.test])
        .all(|d| d.patient_ids().into_iter().all(|p| seen.insert(p.to_string())))
}
