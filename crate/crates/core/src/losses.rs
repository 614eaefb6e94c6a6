//! Training objectives and the maximum-softmax baseline score.
//!
//! Every loss takes batches of probabilities (softmax rows) or inlier scores
//! (independent sigmoids) and returns the batch value together with its
//! gradient with respect to those same inputs. [`crate::model::Model::backward`]
//! applies the softmax/sigmoid Jacobians.
//!
//! Logarithms are floored at [`LOG_FLOOR`]; every floored evaluation bumps the
//! returned `warnings` count.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::argmax;

pub const LOG_FLOOR: f64 = 1e-12;

/// A batch loss and its gradient with respect to the batch inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Loss {
    pub value: f64,
    pub grad: Array2<f64>,
    pub warnings: usize,
}

impl Loss {
    fn zero(shape: (usize, usize)) -> Self {
        Self {
            value: 0.0,
            grad: Array2::zeros(shape),
            warnings: 0,
        }
    }
}

/// `ln(max(p, floor))` and `d/dp` of it, counting floored calls.
#[inline]
fn floored_ln(p: f64, warnings: &mut usize) -> (f64, f64) {
    if p < LOG_FLOOR {
        *warnings += 1;
        (LOG_FLOOR.ln(), 1.0 / LOG_FLOOR)
    } else {
        (p.ln(), 1.0 / p)
    }
}

fn check_labels(labels: &[usize], rows: usize, n_classes: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::contract(format!(
            "{} labels for a batch of {rows}",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= n_classes) {
        return Err(Error::contract(format!(
            "label {bad} outside 0..{n_classes}"
        )));
    }
    Ok(())
}

/// Mean cross-entropy `-ln p_y` over a labeled batch.
pub fn labeled_cls_loss(probs: ArrayView2<'_, f64>, labels: &[usize]) -> Result<Loss> {
    let (b, k) = probs.dim();
    check_labels(labels, b, k)?;
    let mut out = Loss::zero((b, k));
    if b == 0 {
        return Ok(out);
    }
    let inv_b = 1.0 / b as f64;
    for (i, &y) in labels.iter().enumerate() {
        let (ln, d) = floored_ln(probs[[i, y]], &mut out.warnings);
        out.value -= ln * inv_b;
        out.grad[[i, y]] = -d * inv_b;
    }
    Ok(out)
}

/// Hard pseudo-labels from the weak view.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelBatch {
    pub labels: Vec<usize>,
    pub confidence: Vec<f64>,
    /// `confidence >= tau`, possibly narrowed further by a filter strategy.
    pub mask: Vec<bool>,
}

impl PseudoLabelBatch {
    pub fn from_probs(weak_probs: ArrayView2<'_, f64>, tau: f64) -> Self {
        let mut labels = Vec::with_capacity(weak_probs.nrows());
        let mut confidence = Vec::with_capacity(weak_probs.nrows());
        for row in weak_probs.rows() {
            let row = row.to_vec();
            let y = argmax(&row);
            labels.push(y);
            confidence.push(row[y]);
        }
        let mask = confidence.iter().map(|&c| c >= tau).collect();
        Self {
            labels,
            confidence,
            mask,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_selected(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// `(1/B) * sum_i mask_i * -ln strong_i[y_i]`. The divisor is the full batch
/// size, not the number of selected samples.
pub fn unlabeled_cls_loss(
    pseudo: &PseudoLabelBatch,
    strong_probs: ArrayView2<'_, f64>,
) -> Result<(Loss, usize)> {
    let (b, k) = strong_probs.dim();
    if pseudo.len() != b {
        return Err(Error::contract(format!(
            "{} pseudo-labels for {b} strong views",
            pseudo.len()
        )));
    }
    check_labels(&pseudo.labels, b, k)?;
    let mut out = Loss::zero((b, k));
    if b == 0 {
        return Ok((out, 0));
    }
    let inv_b = 1.0 / b as f64;
    let mut selected = 0;
    for i in 0..b {
        if !pseudo.mask[i] {
            continue;
        }
        selected += 1;
        let y = pseudo.labels[i];
        let (ln, d) = floored_ln(strong_probs[[i, y]], &mut out.warnings);
        out.value -= ln * inv_b;
        out.grad[[i, y]] = -d * inv_b;
    }
    Ok((out, selected))
}

/// One-vs-all binary cross-entropy: the true class is a positive for its own
/// detector and a negative for the other `K = |C| - 1`, whose terms are
/// averaged.
pub fn labeled_det_loss(scores: ArrayView2<'_, f64>, labels: &[usize]) -> Result<Loss> {
    let (b, k) = scores.dim();
    if k < 2 {
        return Err(Error::config("one-vs-all loss needs at least two classes"));
    }
    check_labels(labels, b, k)?;
    let mut out = Loss::zero((b, k));
    if b == 0 {
        return Ok(out);
    }
    let inv_b = 1.0 / b as f64;
    let inv_neg = 1.0 / (k - 1) as f64;
    for (i, &y) in labels.iter().enumerate() {
        for c in 0..k {
            let p = scores[[i, c]];
            if c == y {
                let (ln, d) = floored_ln(p, &mut out.warnings);
                out.value -= ln * inv_b;
                out.grad[[i, c]] = -d * inv_b;
            } else {
                let (ln, d) = floored_ln(1.0 - p, &mut out.warnings);
                out.value -= ln * inv_neg * inv_b;
                out.grad[[i, c]] = d * inv_neg * inv_b;
            }
        }
    }
    Ok(out)
}

/// Classes each sample was mined as a negative for.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PseudoNegatives {
    pub classes: Vec<Vec<usize>>,
}

impl PseudoNegatives {
    /// `S_i = { k : weak p_k < theta }`.
    pub fn select(weak_scores: ArrayView2<'_, f64>, theta: f64) -> Result<Self> {
        if !(theta > 0.0 && theta < 1.0) {
            return Err(Error::config(format!("theta must lie in (0, 1), got {theta}")));
        }
        let classes = weak_scores
            .rows()
            .into_iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .filter(|(_, &p)| p < theta)
                    .map(|(k, _)| k)
                    .collect()
            })
            .collect();
        Ok(Self { classes })
    }

    pub fn n_pairs(&self) -> usize {
        self.classes.iter().map(Vec::len).sum()
    }
}

/// Pseudo-negative mining loss. Selection comes from the weak view, the log
/// terms from the strong view. Each sample with a non-empty selection
/// contributes `-(1/|S_i|) sum_{k in S_i} ln(1 - strong p_k)`; the batch value
/// is the mean over those samples only.
pub fn pseudo_negative_loss(
    weak_scores: ArrayView2<'_, f64>,
    strong_scores: ArrayView2<'_, f64>,
    theta: f64,
) -> Result<(Loss, PseudoNegatives)> {
    if weak_scores.dim() != strong_scores.dim() {
        return Err(Error::contract("weak and strong score batches differ in shape"));
    }
    let negatives = PseudoNegatives::select(weak_scores, theta)?;
    let loss = pseudo_negative_loss_for(&negatives, strong_scores)?;
    Ok((loss, negatives))
}

/// [`pseudo_negative_loss`] with a precomputed selection.
pub fn pseudo_negative_loss_for(
    negatives: &PseudoNegatives,
    strong_scores: ArrayView2<'_, f64>,
) -> Result<Loss> {
    let (b, k) = strong_scores.dim();
    if negatives.classes.len() != b {
        return Err(Error::contract("selection and batch differ in length"));
    }
    let mut out = Loss::zero((b, k));
    let contributing = negatives.classes.iter().filter(|s| !s.is_empty()).count();
    if contributing == 0 {
        return Ok(out);
    }
    let inv_n = 1.0 / contributing as f64;
    for (i, set) in negatives.classes.iter().enumerate() {
        if set.is_empty() {
            continue;
        }
        let w = inv_n / set.len() as f64;
        for &c in set {
            let (ln, d) = floored_ln(1.0 - strong_scores[[i, c]], &mut out.warnings);
            out.value -= ln * w;
            out.grad[[i, c]] = d * w;
        }
    }
    Ok(out)
}

/// Confident classifier pseudo-labels used as one-vs-all positives, with the
/// same form as [`labeled_det_loss`], averaged over the selected samples.
pub fn pseudo_positive_loss(
    pseudo: &PseudoLabelBatch,
    strong_scores: ArrayView2<'_, f64>,
) -> Result<Loss> {
    let (b, k) = strong_scores.dim();
    if pseudo.len() != b {
        return Err(Error::contract("pseudo-labels and batch differ in length"));
    }
    let rows: Vec<usize> = (0..b).filter(|&i| pseudo.mask[i]).collect();
    let mut out = Loss::zero((b, k));
    if rows.is_empty() {
        return Ok(out);
    }
    let sub = strong_scores.select(ndarray::Axis(0), &rows);
    let labels: Vec<usize> = rows.iter().map(|&i| pseudo.labels[i]).collect();
    let inner = labeled_det_loss(sub.view(), &labels)?;
    for (j, &i) in rows.iter().enumerate() {
        out.grad.row_mut(i).assign(&inner.grad.row(j));
    }
    out.value = inner.value;
    out.warnings = inner.warnings;
    Ok(out)
}

/// Consistency between two augmentations: mean over the batch of the squared
/// L2 distance between their score vectors. Returns gradients for both views.
pub fn oc_loss(
    view1: ArrayView2<'_, f64>,
    view2: ArrayView2<'_, f64>,
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    if view1.dim() != view2.dim() {
        return Err(Error::contract("consistency views differ in shape"));
    }
    let b = view1.nrows();
    if b == 0 {
        return Ok((0.0, view1.to_owned(), view2.to_owned()));
    }
    let diff = &view1 - &view2;
    let value = diff.iter().map(|d| d * d).sum::<f64>() / b as f64;
    let g1 = diff.mapv(|d| 2.0 * d / b as f64);
    let g2 = -&g1;
    Ok((value, g1, g2))
}

/// Mean binary entropy of the inlier scores over the included samples and all
/// classes. `include = None` uses every sample. Logs are floored silently.
pub fn em_loss(scores: ArrayView2<'_, f64>, include: Option<&[bool]>) -> Result<Loss> {
    let (b, k) = scores.dim();
    if let Some(m) = include {
        if m.len() != b {
            return Err(Error::contract("entropy mask and batch differ in length"));
        }
    }
    let rows: Vec<usize> = (0..b).filter(|&i| include.is_none_or(|m| m[i])).collect();
    let mut out = Loss::zero((b, k));
    if rows.is_empty() || k == 0 {
        return Ok(out);
    }
    let norm = 1.0 / (rows.len() * k) as f64;
    for &i in &rows {
        for c in 0..k {
            let p = scores[[i, c]];
            // saturation is the goal here, so flooring is not reported
            let ln_p = p.max(LOG_FLOOR).ln();
            let ln_q = (1.0 - p).max(LOG_FLOOR).ln();
            out.value -= (p * ln_p + (1.0 - p) * ln_q) * norm;
            // d/dp of -p ln p - (1-p) ln(1-p)
            out.grad[[i, c]] = (ln_q - ln_p) * norm;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub det_u: f64,
    pub oc_u: f64,
    pub em_u: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            det_u: 1.0,
            oc_u: 0.5,
            em_u: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("det_u", self.det_u), ("oc_u", self.oc_u), ("em_u", self.em_u)] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::config(format!("loss weight {name} = {w} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

/// Values of the six loss components on one batch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub cls_l: f64,
    pub cls_u: f64,
    pub det_l: f64,
    pub det_u: f64,
    pub oc: f64,
    pub em: f64,
}

impl LossComponents {
    pub fn classification(&self) -> f64 {
        self.cls_l + self.cls_u
    }

    pub fn detection(&self, w: &LossWeights) -> f64 {
        self.det_l + w.det_u * self.det_u + w.oc_u * self.oc + w.em_u * self.em
    }
}

/// `L_cls + [detector_active] * L_det`.
pub fn total_loss(parts: &LossComponents, weights: &LossWeights, detector_active: bool) -> f64 {
    let cls = parts.classification();
    if detector_active {
        cls + parts.detection(weights)
    } else {
        cls
    }
}

/// Baseline out-of-distribution score: `1 - max softmax`.
pub fn msp_ood_score(probs: &[f64]) -> f64 {
    1.0 - probs.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}
