use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ClassificationSample, DatasetError, DetectionSample, Result};

/// What `split_dataset` needs to know about a sample.
pub trait Splittable: Clone {
    fn path(&self) -> &str;
    /// Stratum for stratified splitting; `None` means a plain shuffle.
    fn stratum(&self) -> Option<usize>;
    fn labels(&self) -> Vec<&str>;
}

impl Splittable for ClassificationSample {
    fn path(&self) -> &str {
        &self.image_path
    }

    fn stratum(&self) -> Option<usize> {
        Some(self.class_id)
    }

    fn labels(&self) -> Vec<&str> {
        vec![&self.class_name]
    }
}

impl Splittable for DetectionSample {
    fn path(&self) -> &str {
        &self.image_path
    }

    fn stratum(&self) -> Option<usize> {
        None
    }

    fn labels(&self) -> Vec<&str> {
        self.objects.iter().map(|o| o.class_name.as_str()).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit<T> {
    pub train: Vec<T>,
    pub valid: Vec<T>,
    pub test: Vec<T>,
    pub class_names: Vec<String>,
    pub seed: u64,
}

/// On-disk form of a split: paths only.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub class_names: Vec<String>,
    pub train: Vec<String>,
    pub valid: Vec<String>,
    pub test: Vec<String>,
}

impl<T: Splittable> DatasetSplit<T> {
    pub fn manifest(&self) -> SplitManifest {
        let paths = |v: &[T]| v.iter().map(|s| s.path().to_string()).collect();
        SplitManifest {
            seed: self.seed,
            class_names: self.class_names.clone(),
            train: paths(&self.train),
            valid: paths(&self.valid),
            test: paths(&self.test),
        }
    }
}

fn validate_fractions(f: [f64; 3]) -> Result<()> {
    let ok = f.iter().all(|v| v.is_finite() && *v >= 0.0) && (f.iter().sum::<f64>() - 1.0).abs() <= 1e-9;
    if ok {
        Ok(())
    } else {
        Err(DatasetError::BadFractions(f))
    }
}

/// Cut points for a group of `n` after rounding cumulative fractions.
fn cut_points(n: usize, f: [f64; 3]) -> (usize, usize) {
    let a = ((n as f64 * f[0]).round() as usize).min(n);
    let b = if f[2] == 0.0 {
        n
    } else {
        ((n as f64 * (f[0] + f[1])).round() as usize).clamp(a, n)
    };
    (a, b)
}

/// Seeded shuffle followed by a contiguous partition into train/valid/test.
///
/// Samples with a stratum are split per stratum so each class keeps the
/// requested proportions; parts are concatenated in stratum order.
pub fn split_dataset<T: Splittable>(samples: &[T], fractions: [f64; 3], seed: u64) -> Result<DatasetSplit<T>> {
    validate_fractions(fractions)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut groups: BTreeMap<Option<usize>, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        groups.entry(s.stratum()).or_default().push(i);
    }
    let (mut train, mut valid, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for idx in groups.values_mut() {
        idx.shuffle(&mut rng);
        let (a, b) = cut_points(idx.len(), fractions);
        train.extend(idx[..a].iter().map(|&i| samples[i].clone()));
        valid.extend(idx[a..b].iter().map(|&i| samples[i].clone()));
        test.extend(idx[b..].iter().map(|&i| samples[i].clone()));
    }
    let class_names = class_names_of(samples);
    Ok(DatasetSplit { train, valid, test, class_names, seed })
}

fn class_names_of<T: Splittable>(samples: &[T]) -> Vec<String> {
    let mut by_stratum: BTreeMap<usize, String> = BTreeMap::new();
    let mut plain: BTreeSet<String> = BTreeSet::new();
    for s in samples {
        match s.stratum() {
            Some(k) => {
                if let Some(l) = s.labels().first() {
                    by_stratum.entry(k).or_insert_with(|| l.to_string());
                }
            }
            None => plain.extend(s.labels().into_iter().map(str::to_string)),
        }
    }
    by_stratum.into_values().chain(plain).collect()
}

/// Exactly `n_per_class` samples of every class, chosen by seeded shuffle.
/// Output is grouped by class id; within a class, in shuffled order.
pub fn balanced_subsample(
    samples: &[ClassificationSample],
    n_per_class: usize,
    seed: u64,
) -> Result<Vec<ClassificationSample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut groups: BTreeMap<usize, Vec<&ClassificationSample>> = BTreeMap::new();
    for s in samples {
        groups.entry(s.class_id).or_default().push(s);
    }
    let mut out = Vec::with_capacity(groups.len() * n_per_class);
    for group in groups.values_mut() {
        if group.len() < n_per_class {
            return Err(DatasetError::InsufficientClassCount {
                class: group[0].class_name.clone(),
                have: group.len(),
                want: n_per_class,
            });
        }
        group.shuffle(&mut rng);
        out.extend(group[..n_per_class].iter().map(|s| (*s).clone()));
    }
    Ok(out)
}
