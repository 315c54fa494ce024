use serde::{Deserialize, Serialize};

use super::{CascadeError, Result};

/// Smallest weighted error used for the vote weight, so a perfect stump
/// still gets a finite alpha.
pub const MIN_ERROR: f64 = 1e-10;

/// Decision stump over one feature. Polarity `+1` votes positive when the
/// value is `>= threshold`; polarity `-1` votes positive when it is below.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stump {
    pub feature_index: usize,
    pub threshold: f64,
    pub polarity: i8,
    pub alpha: f64,
    pub weighted_error: f64,
}

impl Stump {
    #[inline]
    pub fn vote(&self, value: f64) -> f64 {
        let above = value >= self.threshold;
        if above == (self.polarity > 0) {
            1.0
        } else {
            -1.0
        }
    }
}

pub fn alpha_for(error: f64) -> f64 {
    let e = error.max(MIN_ERROR);
    0.5 * ((1.0 - e) / e).ln()
}

/// Dense feature values stored feature-major, with each column's sample
/// order sorted by value once up front.
#[derive(Clone, Debug)]
pub struct FeatureMatrix {
    n_samples: usize,
    n_features: usize,
    values: Vec<f64>,
    order: Vec<u32>,
}

impl FeatureMatrix {
    /// `values[f * n_samples + i]` is feature `f` on sample `i`.
    pub fn from_feature_major(n_samples: usize, n_features: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n_samples * n_features {
            return Err(CascadeError::InvalidInput(format!(
                "expected {} values, got {}",
                n_samples * n_features,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(CascadeError::InvalidInput("non-finite feature value".into()));
        }
        let mut order = Vec::with_capacity(values.len());
        let mut idx: Vec<u32> = Vec::with_capacity(n_samples);
        for f in 0..n_features {
            let col = &values[f * n_samples..(f + 1) * n_samples];
            idx.clear();
            idx.extend(0..n_samples as u32);
            idx.sort_by(|&a, &b| col[a as usize].total_cmp(&col[b as usize]).then(a.cmp(&b)));
            order.extend_from_slice(&idx);
        }
        Ok(Self { n_samples, n_features, values, order })
    }

    /// Builds from one row of feature values per sample.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let nf = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != nf) {
            return Err(CascadeError::InvalidInput("ragged feature rows".into()));
        }
        let mut values = vec![0.0; n * nf];
        for (i, row) in rows.iter().enumerate() {
            for (f, v) in row.iter().enumerate() {
                values[f * n + i] = *v;
            }
        }
        Self::from_feature_major(n, nf, values)
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    #[inline]
    pub fn value(&self, sample: usize, feature: usize) -> f64 {
        self.values[feature * self.n_samples + sample]
    }
}

fn midpoint(a: f64, b: f64) -> f64 {
    let m = a + (b - a) / 2.0;
    if a < m {
        m
    } else {
        b
    }
}

/// Fits the stump minimizing weighted 0-1 error with one sorted sweep per
/// feature. Candidate thresholds per feature run from below the minimum,
/// through midpoints between distinct values, to above the maximum. Ties go
/// to the lowest feature index, then the lowest threshold, then polarity +1.
pub fn train_stump(m: &FeatureMatrix, labels: &[i8], weights: &[f64]) -> Result<Stump> {
    let n = m.n_samples;
    if labels.len() != n || weights.len() != n || m.n_features == 0 {
        return Err(CascadeError::InvalidInput("labels/weights do not match the feature matrix".into()));
    }
    if labels.iter().any(|&l| l != 1 && l != -1) {
        return Err(CascadeError::InvalidInput("labels must be +1 or -1".into()));
    }
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(CascadeError::InvalidWeights("weights must be finite and >= 0".into()));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(CascadeError::InvalidWeights(format!("weights sum to {total}, not 1")));
    }
    let (mut t_pos, mut t_neg) = (0.0, 0.0);
    for (l, w) in labels.iter().zip(weights) {
        if *l > 0 {
            t_pos += w;
        } else {
            t_neg += w;
        }
    }
    if t_pos == 0.0 || t_neg == 0.0 {
        return Err(CascadeError::DegenerateWeights);
    }

    // (error, feature, threshold, polarity)
    let mut best: Option<(f64, usize, f64, i8)> = None;
    let mut consider = |err: f64, f: usize, thr: f64, pol: i8| {
        if best.is_none_or(|b| err < b.0) {
            best = Some((err, f, thr, pol));
        }
    };
    for f in 0..m.n_features {
        let col = &m.values[f * n..(f + 1) * n];
        let ord = &m.order[f * n..(f + 1) * n];
        // weights strictly below the candidate threshold
        let (mut s_pos, mut s_neg) = (0.0, 0.0);
        let mut prev: Option<f64> = None;
        for r in 0..=n {
            let cur = ord.get(r).map(|&i| col[i as usize]);
            let thr = match (prev, cur) {
                (None, Some(v)) => Some(v - 1.0),
                (Some(p), Some(v)) if p < v => Some(midpoint(p, v)),
                (Some(p), None) => Some(p + 1.0),
                _ => None,
            };
            if let Some(thr) = thr {
                consider(s_pos + (t_neg - s_neg), f, thr, 1);
                consider(s_neg + (t_pos - s_pos), f, thr, -1);
            }
            if let Some(v) = cur {
                let i = ord[r] as usize;
                if labels[i] > 0 {
                    s_pos += weights[i];
                } else {
                    s_neg += weights[i];
                }
                prev = Some(v);
            }
        }
    }
    let (error, feature_index, threshold, polarity) = best.expect("at least one candidate");
    let error = error.max(0.0);
    if error >= 0.5 - 1e-12 {
        return Err(CascadeError::DegenerateSplit { error });
    }
    Ok(Stump { feature_index, threshold, polarity, alpha: alpha_for(error), weighted_error: error })
}
