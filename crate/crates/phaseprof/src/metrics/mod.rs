//! The dual evaluation protocol: binary cloud-mask metrics and
//! multi-class phase metrics, both computed from confusion matrices
//! accumulated only at labeled (masked) voxels.
//!
//! Zero denominators yield 0 with a degenerate flag rather than NaN; a
//! kappa whose chance agreement is exactly 1 is reported as an error.

pub mod report;

pub use report::{render_report, render_strip, NamedReport, StripData};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::colloc::{NUM_CLASSES, SENTINEL};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("class value {0} outside 0..={} ", NUM_CLASSES - 1)]
    ClassOutOfRange(u8),
    #[error("confusion matrix holds no observations")]
    EmptyMatrix,
    #[error("expected a {expected}x{expected} matrix, got {got}x{got}")]
    WrongSize { expected: usize, got: usize },
    #[error("kappa undefined: chance agreement equals 1")]
    KappaUndefined,
    #[error("no masked, labeled voxel to evaluate")]
    EmptyMask,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// Square count matrix; rows are truth, columns are prediction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn add(&mut self, truth: usize, pred: usize) {
        self.counts[truth * self.classes + pred] += 1;
    }

    pub fn count(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_total(&self, truth: usize) -> u64 {
        (0..self.classes).map(|p| self.count(truth, p)).sum()
    }

    pub fn col_total(&self, pred: usize) -> u64 {
        (0..self.classes).map(|t| self.count(t, pred)).sum()
    }

    /// Elementwise sum; confusion accumulation is associative, so partial
    /// matrices from parallel workers merge into a deterministic result.
    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.classes, other.classes);
        for (a, b) in self.counts.iter_mut().zip(other.counts.iter()) {
            *a += b;
        }
    }

    /// Builds the matrix from raw class sequences, counting only entries
    /// where `keep` is true.
    pub fn from_pairs(
        classes: usize,
        truth: &[u8],
        pred: &[u8],
        keep: impl Fn(usize) -> bool,
    ) -> Result<Self> {
        if truth.len() != pred.len() {
            return Err(MetricsError::ShapeMismatch(format!(
                "truth has {} entries, prediction {}",
                truth.len(),
                pred.len()
            )));
        }
        let mut cm = ConfusionMatrix::new(classes);
        for (i, (&t, &p)) in truth.iter().zip(pred.iter()).enumerate() {
            if !keep(i) {
                continue;
            }
            if t as usize >= classes {
                return Err(MetricsError::ClassOutOfRange(t));
            }
            if p as usize >= classes {
                return Err(MetricsError::ClassOutOfRange(p));
            }
            cm.add(t as usize, p as usize);
        }
        Ok(cm)
    }
}

/// Collapses a phase code to cloud presence: 0 stays clear, 1..=3 cloud.
pub fn binarize(class: u8) -> Result<u8> {
    match class {
        0 => Ok(0),
        1..=3 => Ok(1),
        other => Err(MetricsError::ClassOutOfRange(other)),
    }
}

fn ratio(num: u64, den: u64, degenerate: &mut bool) -> f64 {
    if den == 0 {
        *degenerate = true;
        0.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub iou: f64,
    /// Set when any denominator was zero.
    pub degenerate: bool,
}

/// Binary cloud-presence metrics from a 2x2 matrix (positive class:
/// cloud = index 1). IoU is computed on the cloud class.
pub fn mask_metrics(cm: &ConfusionMatrix) -> Result<MaskMetrics> {
    if cm.classes != 2 {
        return Err(MetricsError::WrongSize {
            expected: 2,
            got: cm.classes,
        });
    }
    let total = cm.total();
    if total == 0 {
        return Err(MetricsError::EmptyMatrix);
    }
    let (tn, fp, fn_, tp) = (cm.count(0, 0), cm.count(0, 1), cm.count(1, 0), cm.count(1, 1));
    let mut degenerate = false;
    let accuracy = (tp + tn) as f64 / total as f64;
    let precision = ratio(tp, tp + fp, &mut degenerate);
    let recall = ratio(tp, tp + fn_, &mut degenerate);
    let f1 = if precision + recall == 0.0 {
        degenerate = true;
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    let iou = ratio(tp, tp + fp + fn_, &mut degenerate);
    Ok(MaskMetrics {
        accuracy,
        precision,
        recall,
        f1,
        iou,
        degenerate,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// True when the class appears in neither truth nor prediction; such
    /// classes are left out of the macro means.
    pub absent: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseMetrics {
    pub balanced_accuracy: f64,
    pub kappa: f64,
    pub precision_macro: f64,
    pub recall_macro: f64,
    pub f1_macro: f64,
    pub per_class: Vec<ClassMetrics>,
    pub degenerate: bool,
}

/// Multi-class phase metrics from a CxC matrix.
///
/// Balanced accuracy is the mean per-class recall; kappa is
/// `(P_o - P_e) / (1 - P_e)` with `P_o` the diagonal fraction and `P_e`
/// the chance agreement from row/column marginals. Classes absent from
/// both truth and prediction are skipped from macro means (with the
/// degenerate flag set); a single-cell matrix makes kappa undefined.
pub fn phase_metrics(cm: &ConfusionMatrix) -> Result<PhaseMetrics> {
    let c = cm.classes;
    let total = cm.total();
    if total == 0 {
        return Err(MetricsError::EmptyMatrix);
    }
    let mut degenerate = false;
    let mut per_class = Vec::with_capacity(c);
    for i in 0..c {
        let tp = cm.count(i, i);
        let row = cm.row_total(i);
        let col = cm.col_total(i);
        if row == 0 && col == 0 {
            degenerate = true;
            per_class.push(ClassMetrics {
                precision: 0.0,
                recall: 0.0,
                f1: 0.0,
                absent: true,
            });
            continue;
        }
        let mut class_degenerate = false;
        let precision = ratio(tp, col, &mut class_degenerate);
        let recall = ratio(tp, row, &mut class_degenerate);
        let f1 = if precision + recall == 0.0 {
            class_degenerate = true;
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        degenerate |= class_degenerate;
        per_class.push(ClassMetrics {
            precision,
            recall,
            f1,
            absent: false,
        });
    }
    let present: Vec<&ClassMetrics> = per_class.iter().filter(|m| !m.absent).collect();
    let n = present.len() as f64;
    let recall_macro = present.iter().map(|m| m.recall).sum::<f64>() / n;
    let precision_macro = present.iter().map(|m| m.precision).sum::<f64>() / n;
    let f1_macro = present.iter().map(|m| m.f1).sum::<f64>() / n;
    let p_o = (0..c).map(|i| cm.count(i, i)).sum::<u64>() as f64 / total as f64;
    let p_e = (0..c)
        .map(|i| cm.row_total(i) as f64 * cm.col_total(i) as f64)
        .sum::<f64>()
        / (total as f64 * total as f64);
    if p_e >= 1.0 {
        return Err(MetricsError::KappaUndefined);
    }
    let kappa = (p_o - p_e) / (1.0 - p_e);
    Ok(PhaseMetrics {
        balanced_accuracy: recall_macro,
        kappa,
        precision_macro,
        recall_macro,
        f1_macro,
        per_class,
        degenerate,
    })
}

/// Both metric sets for one model run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mask: MaskMetrics,
    pub phase: PhaseMetrics,
    pub voxels: u64,
}

impl MetricsReport {
    pub fn degenerate(&self) -> bool {
        self.mask.degenerate || self.phase.degenerate
    }
}

/// Per-voxel argmax over the class axis of `[B,N,D,H,W]` probabilities;
/// ties resolve to the lowest class index.
pub fn argmax_classes(probs: &[f64], shape: &[usize]) -> Vec<u8> {
    let (b, n, rest) = (shape[0], shape[1], shape[2] * shape[3] * shape[4]);
    let mut out = vec![0u8; b * rest];
    for bi in 0..b {
        for v in 0..rest {
            let mut best = 0usize;
            let mut best_p = probs[(bi * n) * rest + v];
            for cl in 1..n {
                let p = probs[(bi * n + cl) * rest + v];
                if p > best_p {
                    best_p = p;
                    best = cl;
                }
            }
            out[bi * rest + v] = best as u8;
        }
    }
    out
}

/// Builds both confusion matrices over the masked, non-sentinel voxels of
/// a batch: `pred`/`labels` are `[B,D,H,W]` class volumes, `mask` is
/// `[B,H,W]`.
pub fn accumulate(
    pred: &[u8],
    labels: &[u8],
    mask: &[bool],
    dims: (usize, usize, usize, usize),
    mask_cm: &mut ConfusionMatrix,
    phase_cm: &mut ConfusionMatrix,
) -> Result<u64> {
    let (b, d, h, w) = dims;
    if pred.len() != b * d * h * w || labels.len() != pred.len() || mask.len() != b * h * w {
        return Err(MetricsError::ShapeMismatch(format!(
            "dims {dims:?} vs pred {} labels {} mask {}",
            pred.len(),
            labels.len(),
            mask.len()
        )));
    }
    let mut seen = 0u64;
    for bi in 0..b {
        for di in 0..d {
            for p in 0..h * w {
                if !mask[bi * h * w + p] {
                    continue;
                }
                let truth = labels[(bi * d + di) * h * w + p];
                if truth == SENTINEL {
                    continue;
                }
                let guess = pred[(bi * d + di) * h * w + p];
                if truth > 3 {
                    return Err(MetricsError::ClassOutOfRange(truth));
                }
                if guess > 3 {
                    return Err(MetricsError::ClassOutOfRange(guess));
                }
                phase_cm.add(truth as usize, guess as usize);
                mask_cm.add(binarize(truth)? as usize, binarize(guess)? as usize);
                seen += 1;
            }
        }
    }
    Ok(seen)
}

/// Full evaluation of predicted class volumes against sparse labels.
pub fn evaluate_classes(
    pred: &[u8],
    labels: &[u8],
    mask: &[bool],
    dims: (usize, usize, usize, usize),
) -> Result<MetricsReport> {
    let mut mask_cm = ConfusionMatrix::new(2);
    let mut phase_cm = ConfusionMatrix::new(NUM_CLASSES);
    let voxels = accumulate(pred, labels, mask, dims, &mut mask_cm, &mut phase_cm)?;
    if voxels == 0 {
        return Err(MetricsError::EmptyMask);
    }
    Ok(MetricsReport {
        mask: mask_metrics(&mask_cm)?,
        phase: phase_metrics(&phase_cm)?,
        voxels,
    })
}

/// Evaluation straight from `[B,N,D,H,W]` probabilities.
pub fn evaluate(
    probs: &[f64],
    shape: &[usize],
    labels: &[u8],
    mask: &[bool],
) -> Result<MetricsReport> {
    if shape.len() != 5 {
        return Err(MetricsError::ShapeMismatch(format!(
            "expected rank-5 probabilities, got {shape:?}"
        )));
    }
    let pred = argmax_classes(probs, shape);
    evaluate_classes(
        &pred,
        labels,
        mask,
        (shape[0], shape[2], shape[3], shape[4]),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binarize_maps_cloud_codes() {
        assert_eq!(binarize(0).unwrap(), 0);
        assert_eq!(binarize(1).unwrap(), 1);
        assert_eq!(binarize(2).unwrap(), 1);
        assert_eq!(binarize(3).unwrap(), 1);
        assert!(binarize(4).is_err());
        // idempotent on its own output
        assert_eq!(binarize(binarize(3).unwrap()).unwrap(), 1);
    }

    fn cm2(tn: u64, fp: u64, fn_: u64, tp: u64) -> ConfusionMatrix {
        let mut cm = ConfusionMatrix::new(2);
        for _ in 0..tn {
            cm.add(0, 0);
        }
        for _ in 0..fp {
            cm.add(0, 1);
        }
        for _ in 0..fn_ {
            cm.add(1, 0);
        }
        for _ in 0..tp {
            cm.add(1, 1);
        }
        cm
    }

    #[test]
    fn mask_metrics_fixed_case() {
        // TP=3, FP=1, FN=2, TN=4
        let m = mask_metrics(&cm2(4, 1, 2, 3)).unwrap();
        assert!((m.precision - 0.75).abs() < 1e-15);
        assert!((m.recall - 0.6).abs() < 1e-15);
        assert!((m.f1 - 2.0 * 0.75 * 0.6 / 1.35).abs() < 1e-12);
        assert!((m.iou - 0.5).abs() < 1e-15);
        assert!((m.accuracy - 0.7).abs() < 1e-15);
        assert!(!m.degenerate);
    }

    #[test]
    fn mask_metrics_perfect_prediction() {
        let m = mask_metrics(&cm2(5, 0, 0, 7)).unwrap();
        assert_eq!(
            (m.accuracy, m.precision, m.recall, m.f1, m.iou),
            (1.0, 1.0, 1.0, 1.0, 1.0)
        );
    }

    #[test]
    fn mask_metrics_zero_denominators_flag() {
        // nothing predicted positive, nothing truly positive
        let m = mask_metrics(&cm2(5, 0, 0, 0)).unwrap();
        assert!(m.degenerate);
        assert_eq!((m.precision, m.recall, m.f1, m.iou), (0.0, 0.0, 0.0, 0.0));
        assert!(mask_metrics(&ConfusionMatrix::new(2)).is_err());
    }

    #[test]
    fn f1_is_harmonic_mean_of_emitted_values() {
        let m = mask_metrics(&cm2(10, 3, 7, 21)).unwrap();
        let hm = 2.0 / (1.0 / m.precision + 1.0 / m.recall);
        assert!((m.f1 - hm).abs() < 1e-12);
    }

    #[test]
    fn kappa_fixed_case() {
        // rows (50, 50), cols (80, 20), trace 70: P_o=0.7, P_e=0.5
        let mut cm = ConfusionMatrix::new(2);
        for _ in 0..50 {
            cm.add(0, 0);
        }
        for _ in 0..30 {
            cm.add(1, 0);
        }
        for _ in 0..20 {
            cm.add(1, 1);
        }
        let m = phase_metrics(&cm).unwrap();
        assert!((m.kappa - 0.4).abs() < 1e-12);
    }

    #[test]
    fn diagonal_matrix_scores_ones() {
        let mut cm = ConfusionMatrix::new(4);
        for c in 0..4 {
            for _ in 0..(c + 2) {
                cm.add(c, c);
            }
        }
        let m = phase_metrics(&cm).unwrap();
        assert_eq!(m.balanced_accuracy, 1.0);
        assert_eq!(m.kappa, 1.0);
        assert_eq!(m.precision_macro, 1.0);
        assert_eq!(m.f1_macro, 1.0);
        assert!(!m.degenerate);
    }

    #[test]
    fn single_cell_matrix_makes_kappa_undefined() {
        let mut cm = ConfusionMatrix::new(4);
        for _ in 0..9 {
            cm.add(0, 0);
        }
        assert!(matches!(
            phase_metrics(&cm),
            Err(MetricsError::KappaUndefined)
        ));
    }

    #[test]
    fn absent_classes_are_skipped_from_macros() {
        let mut cm = ConfusionMatrix::new(4);
        cm.add(0, 0);
        cm.add(0, 0);
        cm.add(1, 0);
        cm.add(1, 1);
        // classes 2 and 3 absent everywhere
        let m = phase_metrics(&cm).unwrap();
        assert!(m.degenerate);
        assert!(m.per_class[2].absent && m.per_class[3].absent);
        let expect_recall = (1.0 + 0.5) / 2.0;
        assert!((m.recall_macro - expect_recall).abs() < 1e-12);
        assert_eq!(m.balanced_accuracy, m.recall_macro);
    }

    #[test]
    fn consistent_class_permutation_preserves_summary_metrics() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let mut cm = ConfusionMatrix::new(4);
            for t in 0..4 {
                for p in 0..4 {
                    let n = rng.gen_range(1..20u64);
                    for _ in 0..n {
                        cm.add(t, p);
                    }
                }
            }
            let perm = [2usize, 0, 3, 1];
            let mut pcm = ConfusionMatrix::new(4);
            for t in 0..4 {
                for p in 0..4 {
                    for _ in 0..cm.count(t, p) {
                        pcm.add(perm[t], perm[p]);
                    }
                }
            }
            let a = phase_metrics(&cm).unwrap();
            let b = phase_metrics(&pcm).unwrap();
            assert!((a.balanced_accuracy - b.balanced_accuracy).abs() < 1e-12);
            assert!((a.kappa - b.kappa).abs() < 1e-12);
            assert!((a.precision_macro - b.precision_macro).abs() < 1e-12);
            assert!((a.f1_macro - b.f1_macro).abs() < 1e-12);
        }
    }

    #[test]
    fn evaluate_perfect_prediction_is_all_ones() {
        let labels = vec![0u8, 1, 2, 3, 0, 2, 3, 1];
        let mask = vec![true, true, true, true];
        let report =
            evaluate_classes(&labels, &labels, &mask, (1, 2, 2, 2)).unwrap();
        assert_eq!(report.mask.f1, 1.0);
        assert_eq!(report.mask.iou, 1.0);
        assert_eq!(report.phase.kappa, 1.0);
        assert_eq!(report.phase.balanced_accuracy, 1.0);
        assert_eq!(report.voxels, 8);
    }

    #[test]
    fn constant_clear_prediction_on_cloudy_truth_zeroes_positive_metrics() {
        let labels = vec![1u8; 8];
        let pred = vec![0u8; 8];
        let mask = vec![true; 4];
        let report = evaluate_classes(&pred, &labels, &mask, (1, 2, 2, 2)).unwrap();
        assert_eq!(report.mask.recall, 0.0);
        assert_eq!(report.mask.f1, 0.0);
        assert_eq!(report.mask.iou, 0.0);
        assert!(report.mask.degenerate);
    }

    #[test]
    fn evaluate_matches_hand_tabulated_counts() {
        // 1 batch, 2 layers, 2x1 pixels; second pixel unmasked
        let labels = vec![
            0, 255, // layer 0: pixel0 clear, pixel1 sentinel
            2, 3, // layer 1
        ];
        let pred = vec![1, 0, 2, 0];
        let mask = vec![true, false];
        let mut mask_cm = ConfusionMatrix::new(2);
        let mut phase_cm = ConfusionMatrix::new(4);
        let seen = accumulate(&pred, &labels, &mask, (1, 2, 2, 1), &mut mask_cm, &mut phase_cm)
            .unwrap();
        assert_eq!(seen, 2);
        assert_eq!(phase_cm.count(0, 1), 1);
        assert_eq!(phase_cm.count(2, 2), 1);
        assert_eq!(mask_cm.count(0, 1), 1);
        assert_eq!(mask_cm.count(1, 1), 1);
    }

    #[test]
    fn metrics_ignore_values_at_unmasked_voxels() {
        let labels = vec![1u8, 2, 3, 0];
        let mask = vec![true, false];
        let pred_a = vec![1u8, 0, 3, 0];
        let mut pred_b = pred_a.clone();
        pred_b[1] = 3; // unmasked voxel perturbed
        pred_b[3] = 1;
        let a = evaluate_classes(&pred_a, &labels, &mask, (1, 2, 1, 2)).unwrap();
        let b = evaluate_classes(&pred_b, &labels, &mask, (1, 2, 1, 2)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn argmax_ties_resolve_to_lowest_class() {
        let probs = vec![0.25, 0.25, 0.25, 0.25];
        let classes = argmax_classes(&probs, &[1, 4, 1, 1, 1]);
        assert_eq!(classes, vec![0]);
    }

    #[test]
    fn empty_mask_is_an_error() {
        let labels = vec![1u8, 2];
        let pred = vec![1u8, 2];
        let mask = vec![false];
        assert!(matches!(
            evaluate_classes(&pred, &labels, &mask, (1, 2, 1, 1)),
            Err(MetricsError::EmptyMask)
        ));
    }
}
