//! Classification and detection metrics.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cascade::Detection;
use crate::imaging::BBox;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("{truths} truths but {preds} predictions")]
    LengthMismatch { truths: usize, preds: usize },
    #[error("class id {id} out of range for {num_classes} classes")]
    IdOutOfRange { id: usize, num_classes: usize },
    #[error("confusion matrix is empty")]
    EmptyMatrix,
    #[error("IoU threshold {0} outside (0, 1]")]
    InvalidThreshold(f64),
    #[error("{images} detection lists for {truths} ground-truth lists")]
    ImageCountMismatch { images: usize, truths: usize },
    #[error("{names} class names for {k} classes")]
    ClassNames { names: usize, k: usize },
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Rows are true classes, columns predicted classes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub class_names: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.num_classes()).map(|k| self.counts[k][k]).sum()
    }

    pub fn row_sum(&self, k: usize) -> u64 {
        self.counts[k].iter().sum()
    }

    pub fn with_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.num_classes() {
            return Err(EvalError::ClassNames { names: names.len(), k: self.num_classes() });
        }
        self.class_names = names;
        Ok(self)
    }

    /// `true,pred,count` rows, nonzero cells only.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("true,pred,count\n");
        for (t, row) in self.counts.iter().enumerate() {
            for (p, &c) in row.iter().enumerate() {
                if c > 0 {
                    let _ = writeln!(s, "{},{},{c}", self.class_names[t], self.class_names[p]);
                }
            }
        }
        s
    }
}

pub fn confusion_matrix(truths: &[usize], preds: &[usize], num_classes: usize) -> Result<ConfusionMatrix> {
    if truths.len() != preds.len() {
        return Err(EvalError::LengthMismatch { truths: truths.len(), preds: preds.len() });
    }
    let mut counts = vec![vec![0u64; num_classes]; num_classes];
    for (&t, &p) in truths.iter().zip(preds) {
        for id in [t, p] {
            if id >= num_classes {
                return Err(EvalError::IdOutOfRange { id, num_classes });
            }
        }
        counts[t][p] += 1;
    }
    let class_names = (0..num_classes).map(|k| k.to_string()).collect();
    Ok(ConfusionMatrix { class_names, counts })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMetrics {
    pub overall: f64,
    /// `None` for classes with no samples.
    pub per_class: Vec<Option<f64>>,
}

pub fn accuracy_metrics(cm: &ConfusionMatrix) -> Result<AccuracyMetrics> {
    let total = cm.total();
    if total == 0 {
        return Err(EvalError::EmptyMatrix);
    }
    let per_class = (0..cm.num_classes())
        .map(|k| {
            let row = cm.row_sum(k);
            (row > 0).then(|| cm.counts[k][k] as f64 / row as f64)
        })
        .collect();
    Ok(AccuracyMetrics { overall: cm.trace() as f64 / total as f64, per_class })
}

/// JSON-ready classification report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub class_names: Vec<String>,
    pub counts: Vec<Vec<u64>>,
    pub overall: f64,
    pub per_class: Vec<Option<f64>>,
}

impl ClassificationReport {
    pub fn new(cm: &ConfusionMatrix) -> Result<Self> {
        let m = accuracy_metrics(cm)?;
        Ok(Self { class_names: cm.class_names.clone(), counts: cm.counts.clone(), overall: m.overall, per_class: m.per_class })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data serializes")
    }

    /// Fixed-width table with per-class accuracy in the last column.
    pub fn to_text(&self) -> String {
        let width = self.class_names.iter().map(|n| n.len()).max().unwrap_or(0).max(8);
        let mut s = format!("{:>width$}", "true\\pred");
        for n in &self.class_names {
            let _ = write!(s, " {n:>width$}");
        }
        let _ = writeln!(s, " {:>width$}", "accuracy");
        for (name, (row, acc)) in self.class_names.iter().zip(self.counts.iter().zip(&self.per_class)) {
            let _ = write!(s, "{name:>width$}");
            for c in row {
                let _ = write!(s, " {c:>width$}");
            }
            let acc = acc.map_or_else(|| "undefined".to_string(), |a| format!("{:.2}%", 100.0 * a));
            let _ = writeln!(s, " {acc:>width$}");
        }
        let _ = writeln!(s, "overall accuracy: {:.2}%", 100.0 * self.overall);
        s
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    a.iou(b)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Match {
    pub image: usize,
    pub detection: usize,
    pub truth: usize,
    pub iou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionPr {
    /// 1.0 when there are no detections.
    pub precision: f64,
    /// 1.0 when there are no ground-truth boxes.
    pub recall: f64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub matches: Vec<Match>,
}

/// Greedy matching per image: detections in descending score order (ties by
/// index) each take the unmatched truth with the highest IoU at or above the
/// threshold.
pub fn detection_pr(dets: &[Vec<Detection>], gts: &[Vec<BBox>], iou_threshold: f64) -> Result<DetectionPr> {
    if !(iou_threshold > 0.0 && iou_threshold <= 1.0) {
        return Err(EvalError::InvalidThreshold(iou_threshold));
    }
    if dets.len() != gts.len() {
        return Err(EvalError::ImageCountMismatch { images: dets.len(), truths: gts.len() });
    }
    let mut matches = Vec::new();
    let (mut n_det, mut n_gt) = (0, 0);
    for (image, (d, g)) in dets.iter().zip(gts).enumerate() {
        n_det += d.len();
        n_gt += g.len();
        let mut order: Vec<usize> = (0..d.len()).collect();
        order.sort_by(|&a, &b| d[b].score.total_cmp(&d[a].score).then(a.cmp(&b)));
        let mut taken = vec![false; g.len()];
        for i in order {
            let best = g
                .iter()
                .enumerate()
                .filter(|(j, _)| !taken[*j])
                .map(|(j, t)| (j, d[i].bbox.iou(t)))
                .filter(|(_, v)| *v >= iou_threshold)
                .fold(None, |acc: Option<(usize, f64)>, c| match acc {
                    Some(a) if a.1 >= c.1 => Some(a),
                    _ => Some(c),
                });
            if let Some((j, v)) = best {
                taken[j] = true;
                matches.push(Match { image, detection: i, truth: j, iou: v });
            }
        }
    }
    let tp = matches.len();
    Ok(DetectionPr {
        precision: if n_det == 0 { 1.0 } else { tp as f64 / n_det as f64 },
        recall: if n_gt == 0 { 1.0 } else { tp as f64 / n_gt as f64 },
        true_positives: tp,
        false_positives: n_det - tp,
        false_negatives: n_gt - tp,
        matches,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn bb(x: f64, y: f64, w: f64, h: f64) -> BBox {
        BBox::new(x, y, w, h).unwrap()
    }

    fn det(b: BBox, score: f64) -> Detection {
        Detection { bbox: b, score }
    }

    #[test]
    fn hand_tally() {
        let cm = confusion_matrix(&[0, 1, 2], &[1, 1, 2], 3).unwrap();
        assert_eq!(cm.counts[0][1], 1);
        assert_eq!((cm.counts[0][0], cm.counts[1][1], cm.counts[2][2]), (0, 1, 1));
        let m = accuracy_metrics(&cm).unwrap();
        assert!((m.overall - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(m.per_class, vec![Some(0.0), Some(1.0), Some(1.0)]);
        let perfect = confusion_matrix(&[0, 1, 1, 2], &[0, 1, 1, 2], 3).unwrap();
        assert_eq!(accuracy_metrics(&perfect).unwrap().overall, 1.0);
        assert_eq!(perfect.counts, vec![vec![1, 0, 0], vec![0, 2, 0], vec![0, 0, 1]]);
    }

    #[test]
    fn edge_cases() {
        let empty = confusion_matrix(&[], &[], 3).unwrap();
        assert_eq!(empty.total(), 0);
        assert_eq!(accuracy_metrics(&empty), Err(EvalError::EmptyMatrix));
        assert!(matches!(confusion_matrix(&[0], &[], 2), Err(EvalError::LengthMismatch { .. })));
        assert_eq!(confusion_matrix(&[0], &[2], 2), Err(EvalError::IdOutOfRange { id: 2, num_classes: 2 }));
        let m = accuracy_metrics(&confusion_matrix(&[0, 0], &[0, 1], 3).unwrap()).unwrap();
        assert_eq!(m.per_class[2], None);
    }

    #[test]
    fn reported_per_class_rates_regenerate() {
        // rows of 150 with 143, 140 and 134 correct give the quoted rates
        let counts = vec![vec![143, 4, 3], vec![6, 140, 4], vec![9, 7, 134]];
        let cm = ConfusionMatrix { class_names: vec!["bad".into(), "raw".into(), "ripe".into()], counts };
        let m = accuracy_metrics(&cm).unwrap();
        let pct: Vec<f64> = m.per_class.iter().map(|v| (v.unwrap() * 1000.0).round() / 10.0).collect();
        assert_eq!(pct, vec![95.3, 93.3, 89.3]);
    }

    #[test]
    fn uniform_guessing_is_one_in_k() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let n = 10_000;
        let truths: Vec<usize> = (0..n).map(|_| rng.random_range(0..4)).collect();
        let preds: Vec<usize> = (0..n).map(|_| rng.random_range(0..4)).collect();
        let m = accuracy_metrics(&confusion_matrix(&truths, &preds, 4).unwrap()).unwrap();
        assert!((m.overall - 0.25).abs() < 0.05, "{}", m.overall);
    }

    #[test]
    fn report_formats() {
        let cm = confusion_matrix(&[0, 1, 1], &[0, 1, 0], 2).unwrap().with_names(vec!["ripe".into(), "raw".into()]).unwrap();
        assert_eq!(cm.to_csv(), "true,pred,count\nripe,ripe,1\nraw,ripe,1\nraw,raw,1\n");
        let r = ClassificationReport::new(&cm).unwrap();
        let v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(v["overall"], serde_json::json!(2.0 / 3.0));
        assert_eq!(v["counts"], serde_json::json!([[1, 0], [1, 1]]));
        let text = r.to_text();
        assert!(text.contains("50.00%") && text.contains("overall accuracy: 66.67%"), "{text}");
        assert!(cm.clone().with_names(vec![]).is_err());
    }

    #[test]
    fn iou_by_hand() {
        assert!((iou(&bb(0.0, 0.0, 2.0, 2.0), &bb(1.0, 1.0, 2.0, 2.0)) - 1.0 / 7.0).abs() < 1e-15);
        assert_eq!(iou(&bb(0.0, 0.0, 2.0, 2.0), &bb(5.0, 5.0, 1.0, 1.0)), 0.0);
        assert_eq!(iou(&bb(1.0, 2.0, 3.0, 4.0), &bb(1.0, 2.0, 3.0, 4.0)), 1.0);
    }

    #[test]
    fn matching_by_hand() {
        let g = bb(10.0, 10.0, 20.0, 20.0);
        let exact = detection_pr(&[vec![det(g, 1.0)]], &[vec![g]], 0.5).unwrap();
        assert_eq!((exact.precision, exact.recall), (1.0, 1.0));
        let none = detection_pr(&[vec![]], &[vec![g]], 0.5).unwrap();
        assert_eq!((none.precision, none.recall, none.false_negatives), (1.0, 0.0, 1));
        let two = detection_pr(&[vec![det(bb(11.0, 10.0, 20.0, 20.0), 0.5), det(g, 0.9)]], &[vec![g]], 0.5).unwrap();
        assert_eq!((two.true_positives, two.false_positives, two.precision), (1, 1, 0.5));
        // the higher-scoring detection takes the truth
        assert_eq!(two.matches[0].detection, 1);
        assert!(detection_pr(&[vec![]], &[vec![]], 0.0).is_err());
        assert!(detection_pr(&[vec![]], &[], 0.5).is_err());
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (0.0..40.0, 0.0..40.0, 1.0..20.0, 1.0..20.0).prop_map(|(x, y, w, h)| bb(x, y, w, h))
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let (ab, ba) = (iou(&a, &b), iou(&b, &a));
            prop_assert_eq!(ab, ba);
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(iou(&a, &a), 1.0);
        }

        #[test]
        fn counts_add_up(pairs in proptest::collection::vec((0usize..4, 0usize..4), 0..60)) {
            let (t, p): (Vec<_>, Vec<_>) = pairs.iter().copied().unzip();
            let cm = confusion_matrix(&t, &p, 4).unwrap();
            prop_assert_eq!(cm.total(), pairs.len() as u64);
            for k in 0..4 {
                prop_assert_eq!(cm.row_sum(k), t.iter().filter(|&&v| v == k).count() as u64);
            }
            if !pairs.is_empty() {
                let m = accuracy_metrics(&cm).unwrap();
                prop_assert_eq!(m.overall, cm.trace() as f64 / cm.total() as f64);
            }
        }

        #[test]
        fn pr_monotone_in_threshold(
            d in proptest::collection::vec((arb_box(), 0.0..1.0f64), 0..8),
            g in proptest::collection::vec(arb_box(), 0..6),
            t1 in 0.05..1.0f64,
            t2 in 0.05..1.0f64,
        ) {
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let dets = vec![d.into_iter().map(|(b, s)| det(b, s)).collect::<Vec<_>>()];
            let gts = vec![g];
            let a = detection_pr(&dets, &gts, lo).unwrap();
            let b = detection_pr(&dets, &gts, hi).unwrap();
            prop_assert!(b.precision <= a.precision && b.recall <= a.recall);
        }
    }
}
