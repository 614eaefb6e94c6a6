//! Test metrics, unlabeled-selection diagnostics and the evaluator that the
//! trainer calls at each evaluation point.
//!
//! AUROC treats outliers as positives and ranks them by OOD score; ties earn
//! half credit. Missing quantities are `None` (serialized as `null`), never 0.

use serde::{Deserialize, Serialize};

use crate::data::{make_test_split, HiddenTruth, Membership, OpenSetDataset, TestSplit};
use crate::error::{Error, Result};
use crate::losses::{msp_ood_score, LossComponents};
use crate::model::{Model, Prediction};
use crate::trainer::{EvalHook, EvalOutcome, EvalPoint, FilterStrategy, TrainConfig};

/// Where test-time OOD scores come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OodScoreSource {
    /// `1 - p_yhat` from the one-vs-all detector.
    Detector,
    /// `1 - max softmax`.
    Msp,
}

impl std::str::FromStr for OodScoreSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "detector" => Ok(Self::Detector),
            "msp" => Ok(Self::Msp),
            _ => Err(Error::config(format!("unknown ood_score {s:?} (detector|msp)"))),
        }
    }
}

impl std::fmt::Display for OodScoreSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Detector => "detector",
            Self::Msp => "msp",
        })
    }
}

/// One evaluation point. Loss fields are means over the iterations since the
/// previous point; counts are sums over the same window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub iteration: u64,
    pub lr: f64,
    pub loss_cls_l: f64,
    pub loss_cls_u: f64,
    pub loss_det_l: f64,
    pub loss_det_u: f64,
    pub loss_oc: f64,
    pub loss_em: f64,
    pub loss_total: f64,
    pub accuracy: Option<f64>,
    pub auroc_seen: Option<f64>,
    pub auroc_unseen: Option<f64>,
    pub auroc_avg: Option<f64>,
    pub utilization_unlabeled: f64,
    pub utilization_ood: Option<f64>,
    pub pseudo_inlier_precision: Option<f64>,
    pub inlier_recall: Option<f64>,
    pub pseudo_neg_precision: Option<f64>,
    pub pseudo_label_precision: Option<f64>,
    pub n_selected: u64,
    pub n_pseudo_neg_pairs: u64,
    pub numeric_warning_count: u64,
    pub detector_threshold: f64,
}

impl MetricsRecord {
    /// Field names in emission order; also the CSV header.
    pub const FIELDS: [&'static str; 23] = [
        "iteration",
        "lr",
        "loss_cls_l",
        "loss_cls_u",
        "loss_det_l",
        "loss_det_u",
        "loss_oc",
        "loss_em",
        "loss_total",
        "accuracy",
        "auroc_seen",
        "auroc_unseen",
        "auroc_avg",
        "utilization_unlabeled",
        "utilization_ood",
        "pseudo_inlier_precision",
        "inlier_recall",
        "pseudo_neg_precision",
        "pseudo_label_precision",
        "n_selected",
        "n_pseudo_neg_pairs",
        "numeric_warning_count",
        "detector_threshold",
    ];

    /// CSV cells in [`Self::FIELDS`] order; absent values are empty.
    pub fn csv_cells(&self) -> Vec<String> {
        let o = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        vec![
            self.iteration.to_string(),
            self.lr.to_string(),
            self.loss_cls_l.to_string(),
            self.loss_cls_u.to_string(),
            self.loss_det_l.to_string(),
            self.loss_det_u.to_string(),
            self.loss_oc.to_string(),
            self.loss_em.to_string(),
            self.loss_total.to_string(),
            o(self.accuracy),
            o(self.auroc_seen),
            o(self.auroc_unseen),
            o(self.auroc_avg),
            self.utilization_unlabeled.to_string(),
            o(self.utilization_ood),
            o(self.pseudo_inlier_precision),
            o(self.inlier_recall),
            o(self.pseudo_neg_precision),
            o(self.pseudo_label_precision),
            self.n_selected.to_string(),
            self.n_pseudo_neg_pairs.to_string(),
            self.numeric_warning_count.to_string(),
            self.detector_threshold.to_string(),
        ]
    }

    pub fn losses(&self) -> LossComponents {
        LossComponents {
            cls_l: self.loss_cls_l,
            cls_u: self.loss_cls_u,
            det_l: self.loss_det_l,
            det_u: self.loss_det_u,
            oc: self.loss_oc,
            em: self.loss_em,
        }
    }
}

/// The per-evaluation history of one run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub records: Vec<MetricsRecord>,
}

impl RunMetrics {
    pub fn last(&self) -> Option<&MetricsRecord> {
        self.records.last()
    }

    pub fn at(&self, iteration: u64) -> Option<&MetricsRecord> {
        self.records.iter().find(|r| r.iteration == iteration)
    }
}

/// Mann–Whitney AUROC in `O(n log n)`: the probability that a positive
/// outscores a negative, ties counting one half. `None` if either side is
/// empty.
///
/// Computed from doubled integer rank sums so the result is bit-identical to
/// [`auroc_pairwise`].
pub fn auroc(pos: &[f64], neg: &[f64]) -> Option<f64> {
    if pos.is_empty() || neg.is_empty() {
        return None;
    }
    let mut all: Vec<(f64, bool)> = pos
        .iter()
        .map(|&s| (s, true))
        .chain(neg.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Twice the sum of 1-based mid-ranks of the positives.
    let mut rank2: u128 = 0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let n_pos = all[i..=j].iter().filter(|e| e.1).count() as u128;
        rank2 += n_pos * ((i + 1) + (j + 1)) as u128;
        i = j + 1;
    }
    let p = pos.len() as u128;
    let u2 = rank2 - p * (p + 1);
    Some(u2 as f64 / (2 * p * neg.len() as u128) as f64)
}

/// Brute-force pair count; the reference for [`auroc`].
pub fn auroc_pairwise(pos: &[f64], neg: &[f64]) -> Option<f64> {
    if pos.is_empty() || neg.is_empty() {
        return None;
    }
    let mut c2: u128 = 0;
    for &p in pos {
        for &n in neg {
            if p > n {
                c2 += 2;
            } else if p == n {
                c2 += 1;
            }
        }
    }
    Some(c2 as f64 / (2 * pos.len() as u128 * neg.len() as u128) as f64)
}

/// Fraction of inlier-tagged points whose predicted class is the truth.
pub fn inlier_accuracy(predictions: &[Prediction], test: &TestSplit) -> Option<f64> {
    let inliers = test.indices(Membership::Inlier);
    if inliers.is_empty() {
        return None;
    }
    let correct = inliers
        .iter()
        .filter(|&&i| predictions[i].class == test.truth[i])
        .count();
    Some(correct as f64 / inliers.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionReport {
    pub auroc_seen: Option<f64>,
    pub auroc_unseen: Option<f64>,
    pub auroc_avg: Option<f64>,
}

/// Seen and unseen outliers are each ranked against the same inlier set.
pub fn detection_report(ood_scores: &[f64], test: &TestSplit) -> DetectionReport {
    let pick = |tag| -> Vec<f64> { test.indices(tag).into_iter().map(|i| ood_scores[i]).collect() };
    let inliers = pick(Membership::Inlier);
    let auroc_seen = auroc(&pick(Membership::SeenOut), &inliers);
    let auroc_unseen = auroc(&pick(Membership::UnseenOut), &inliers);
    let auroc_avg = match (auroc_seen, auroc_unseen) {
        (Some(a), Some(b)) => Some((a + b) / 2.0),
        _ => None,
    };
    DetectionReport {
        auroc_seen,
        auroc_unseen,
        auroc_avg,
    }
}

/// OOD score of every test point under the chosen source.
pub fn ood_scores(model: &Model, test: &TestSplit, source: OodScoreSource) -> Result<(Vec<Prediction>, Vec<f64>)> {
    let preds = model.predict_batch(test.x.view())?;
    let scores = match source {
        OodScoreSource::Detector => preds.iter().map(|p| p.ood_score).collect(),
        OodScoreSource::Msp => model
            .classifier_probs(test.x.view())?
            .rows()
            .into_iter()
            .map(|r| msp_ood_score(r.as_slice().unwrap()))
            .collect(),
    };
    Ok((preds, scores))
}

/// Latest selection decision for one unlabeled point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionEntry {
    /// Entered the unlabeled classification loss.
    pub selected: bool,
    /// Passed the classifier confidence threshold.
    pub confident: bool,
    pub pseudo_label: usize,
    /// Detector inlier score for the pseudo-label, when it was computed.
    pub detector_score: Option<f64>,
    /// Classes the point was mined as a negative for.
    pub negatives: Vec<usize>,
}

/// Per-unlabeled-point record of the most recent selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionLog {
    pub entries: Vec<Option<SelectionEntry>>,
}

impl SelectionLog {
    pub fn new(n_unlabeled: usize) -> Self {
        Self {
            entries: vec![None; n_unlabeled],
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn record(&mut self, index: usize, entry: SelectionEntry) {
        self.entries[index] = Some(entry);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Diagnostics {
    pub utilization_unlabeled: f64,
    pub utilization_ood: Option<f64>,
    /// Share of selected points that are inliers (class ignored).
    pub pseudo_inlier_precision: Option<f64>,
    pub inlier_recall: Option<f64>,
    /// Share of (point, class) negative pairs where the point is not of that class.
    pub pseudo_neg_precision: Option<f64>,
    /// Share of selected points whose pseudo-label is their true class.
    pub pseudo_label_precision: Option<f64>,
}

pub fn training_diagnostics(log: &SelectionLog, truth: &HiddenTruth<'_>) -> Result<Diagnostics> {
    if log.len() != truth.unlabeled_truth.len() {
        return Err(Error::contract(format!(
            "selection log covers {} points, truth {}",
            log.len(),
            truth.unlabeled_truth.len()
        )));
    }
    let m = log.len();
    let (mut selected, mut sel_inlier, mut sel_ood, mut sel_correct) = (0usize, 0usize, 0usize, 0usize);
    let (mut pairs, mut pairs_correct) = (0usize, 0usize);
    let n_inlier = (0..m).filter(|&i| truth.is_inlier(i)).count();
    for (i, e) in log.entries.iter().enumerate() {
        let Some(e) = e else { continue };
        let y = truth.unlabeled_truth[i];
        if e.selected {
            selected += 1;
            if truth.is_inlier(i) {
                sel_inlier += 1;
            } else {
                sel_ood += 1;
            }
            if e.pseudo_label == y {
                sel_correct += 1;
            }
        }
        pairs += e.negatives.len();
        pairs_correct += e.negatives.iter().filter(|&&k| k != y).count();
    }
    let ratio = |a: usize, b: usize| (b > 0).then(|| a as f64 / b as f64);
    Ok(Diagnostics {
        utilization_unlabeled: if m == 0 { 0.0 } else { selected as f64 / m as f64 },
        utilization_ood: ratio(sel_ood, m - n_inlier),
        pseudo_inlier_precision: ratio(sel_inlier, selected),
        inlier_recall: ratio(sel_inlier, n_inlier),
        pseudo_neg_precision: ratio(pairs_correct, pairs),
        pseudo_label_precision: ratio(sel_correct, selected),
    })
}

/// Threshold on the detector score of the pseudo-label that admits the same
/// fraction of true inliers as the confidence mask does. Points without a
/// logged detector score are ignored.
pub fn recall_matched_threshold(log: &SelectionLog, truth: &HiddenTruth<'_>) -> Option<f64> {
    let mut scores = Vec::new();
    let (mut n_inlier, mut confident) = (0usize, 0usize);
    for (i, e) in log.entries.iter().enumerate() {
        let Some(e) = e else { continue };
        let Some(s) = e.detector_score else { continue };
        if !truth.is_inlier(i) {
            continue;
        }
        n_inlier += 1;
        confident += e.confident as usize;
        scores.push(s);
    }
    if n_inlier == 0 {
        return None;
    }
    if confident == 0 {
        // above every sigmoid output, so nothing passes
        return Some(2.0);
    }
    scores.sort_by(|a, b| b.total_cmp(a));
    Some(scores[confident - 1])
}

/// The evaluator: the only holder of test and unlabeled ground truth.
pub struct Evaluator<'a> {
    test: TestSplit,
    truth: HiddenTruth<'a>,
    source: OodScoreSource,
}

impl<'a> Evaluator<'a> {
    pub fn new(dataset: &'a OpenSetDataset, source: OodScoreSource) -> Self {
        Self {
            test: make_test_split(dataset),
            truth: dataset.hidden_truth(),
            source,
        }
    }

    pub fn for_config(dataset: &'a OpenSetDataset, config: &TrainConfig) -> Self {
        Self::new(dataset, config.ood_score)
    }

    pub fn test_split(&self) -> &TestSplit {
        &self.test
    }

    pub fn report(&self, model: &Model) -> Result<(Option<f64>, DetectionReport)> {
        let (preds, scores) = ood_scores(model, &self.test, self.source)?;
        Ok((inlier_accuracy(&preds, &self.test), detection_report(&scores, &self.test)))
    }
}

impl EvalHook for Evaluator<'_> {
    fn evaluate(&mut self, point: &EvalPoint<'_>) -> Result<EvalOutcome> {
        let (accuracy, det) = self.report(point.model)?;
        let diag = training_diagnostics(point.log, &self.truth)?;
        let w = &point.window;
        let losses = w.mean_losses();
        let record = MetricsRecord {
            iteration: point.iteration,
            lr: point.lr,
            loss_cls_l: losses.cls_l,
            loss_cls_u: losses.cls_u,
            loss_det_l: losses.det_l,
            loss_det_u: losses.det_u,
            loss_oc: losses.oc,
            loss_em: losses.em,
            loss_total: w.mean_total(),
            accuracy,
            auroc_seen: det.auroc_seen,
            auroc_unseen: det.auroc_unseen,
            auroc_avg: det.auroc_avg,
            utilization_unlabeled: diag.utilization_unlabeled,
            utilization_ood: diag.utilization_ood,
            pseudo_inlier_precision: diag.pseudo_inlier_precision,
            inlier_recall: diag.inlier_recall,
            pseudo_neg_precision: diag.pseudo_neg_precision,
            pseudo_label_precision: diag.pseudo_label_precision,
            n_selected: w.n_selected,
            n_pseudo_neg_pairs: w.n_pseudo_neg_pairs,
            numeric_warning_count: w.warnings,
            detector_threshold: point.detector_threshold,
        };
        let detector_threshold = if point.filter == FilterStrategy::DetectorTuned {
            recall_matched_threshold(point.log, &self.truth)
        } else {
            None
        };
        Ok(EvalOutcome {
            record,
            detector_threshold,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn auroc_fixtures() {
        assert_eq!(auroc(&[0.9, 0.8], &[0.7, 0.1]), Some(1.0));
        assert_eq!(auroc(&[0.5; 3], &[0.5; 4]), Some(0.5));
        assert_eq!(auroc(&[0.9, 0.4], &[0.6, 0.1]), Some(0.75));
        assert_eq!(auroc(&[], &[0.1]), None);
        assert_eq!(auroc(&[0.1], &[]), None);
    }

    fn tagged(tags: Vec<Membership>, truth: Vec<usize>) -> TestSplit {
        TestSplit {
            x: ndarray::Array2::zeros((tags.len(), 1)),
            truth,
            tags,
        }
    }

    #[test]
    fn accuracy_counts_inliers_only() {
        use Membership::*;
        // 10-point fixture: 6 inliers, 4 of them predicted correctly
        let tags = vec![Inlier, Inlier, SeenOut, Inlier, UnseenOut, Inlier, Inlier, SeenOut, Inlier, UnseenOut];
        let truth = vec![0, 1, 2, 1, 3, 0, 1, 2, 0, 3];
        let classes = [0, 0, 0, 1, 0, 1, 1, 1, 0, 1];
        let preds: Vec<Prediction> = classes.iter().map(|&c| Prediction { class: c, ood_score: 0.0 }).collect();
        assert_eq!(inlier_accuracy(&preds, &tagged(tags, truth)), Some(4.0 / 6.0));
        let outliers = tagged(vec![SeenOut; 2], vec![2, 2]);
        assert_eq!(inlier_accuracy(&preds[..2], &outliers), None);
    }

    #[test]
    fn accuracy_base_rate() {
        let tags = vec![Membership::Inlier; 8];
        let truth = vec![0, 1, 2, 3, 0, 1, 2, 3];
        let preds = vec![Prediction { class: 2, ood_score: 0.0 }; 8];
        assert_eq!(inlier_accuracy(&preds, &tagged(tags, truth)), Some(0.25));
    }

    #[test]
    fn detection_report_groups() {
        use Membership::*;
        let split = tagged(vec![Inlier, Inlier, SeenOut, SeenOut, UnseenOut], vec![0, 1, 2, 2, 3]);
        let r = detection_report(&[0.1, 0.6, 0.9, 0.4, 0.7], &split);
        assert_eq!(r.auroc_seen, auroc_pairwise(&[0.9, 0.4], &[0.1, 0.6]));
        assert_eq!(r.auroc_seen, Some(0.75));
        assert_eq!(r.auroc_unseen, Some(1.0));
        assert_eq!(r.auroc_avg, Some(0.875));
        let no_unseen = tagged(vec![Inlier, SeenOut], vec![0, 2]);
        let r = detection_report(&[0.1, 0.9], &no_unseen);
        assert_eq!((r.auroc_seen, r.auroc_unseen, r.auroc_avg), (Some(1.0), None, None));
    }

    fn entry(selected: bool, label: usize, negatives: Vec<usize>) -> Option<SelectionEntry> {
        Some(SelectionEntry {
            selected,
            confident: selected,
            pseudo_label: label,
            detector_score: None,
            negatives,
        })
    }

    #[test]
    fn diagnostics_hand_count() {
        // 10 points, 4 true inliers (classes 0/1), 3 selected of which 2 inliers
        let truth_v = vec![0, 1, 0, 1, 5, 5, 6, 6, 5, 6];
        let truth = HiddenTruth {
            n_classes: 2,
            unlabeled_truth: &truth_v,
        };
        let mut log = SelectionLog::new(10);
        log.entries[0] = entry(true, 0, vec![1]);
        log.entries[1] = entry(true, 0, vec![1]);
        log.entries[4] = entry(true, 1, vec![0, 1]);
        log.entries[5] = entry(false, 1, vec![]);
        let d = training_diagnostics(&log, &truth).unwrap();
        assert_eq!(d.utilization_unlabeled, 0.3);
        assert_eq!(d.pseudo_inlier_precision, Some(2.0 / 3.0));
        assert_eq!(d.inlier_recall, Some(0.5));
        assert_eq!(d.utilization_ood, Some(1.0 / 6.0));
        assert_eq!(d.pseudo_label_precision, Some(1.0 / 3.0));
        // pairs: (0,1) ok, (1,1) wrong, (4,0) ok, (4,1) ok
        assert_eq!(d.pseudo_neg_precision, Some(0.75));
    }

    #[test]
    fn diagnostics_empty_selection() {
        let truth_v = vec![0, 1, 3];
        let truth = HiddenTruth {
            n_classes: 2,
            unlabeled_truth: &truth_v,
        };
        let d = training_diagnostics(&SelectionLog::new(3), &truth).unwrap();
        assert_eq!(d.utilization_unlabeled, 0.0);
        assert_eq!(d.pseudo_inlier_precision, None);
        assert_eq!(d.inlier_recall, Some(0.0));
        assert!(training_diagnostics(&SelectionLog::new(4), &truth).is_err());
    }

    #[test]
    fn tuned_threshold_matches_recall() {
        let truth_v = vec![0, 0, 1, 1, 4];
        let truth = HiddenTruth {
            n_classes: 2,
            unlabeled_truth: &truth_v,
        };
        let mut log = SelectionLog::new(5);
        let scores = [0.9, 0.2, 0.6, 0.4, 0.99];
        let confident = [true, false, true, false, true];
        for i in 0..5 {
            log.entries[i] = Some(SelectionEntry {
                selected: confident[i],
                confident: confident[i],
                pseudo_label: 0,
                detector_score: Some(scores[i]),
                negatives: vec![],
            });
        }
        // 2 of 4 inliers are confident -> admit the top-2 inlier scores
        let thr = recall_matched_threshold(&log, &truth).unwrap();
        assert_eq!(thr, 0.6);
        let admitted = (0..4).filter(|&i| scores[i] >= thr).count();
        assert_eq!(admitted, 2);
    }

    fn tied_scores() -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec((0u8..12).prop_map(|v| v as f64 / 4.0), 1..60)
    }

    proptest! {
        #[test]
        fn rank_auroc_equals_pair_count(pos in tied_scores(), neg in tied_scores()) {
            prop_assert_eq!(auroc(&pos, &neg), auroc_pairwise(&pos, &neg));
        }

        #[test]
        fn auroc_is_rank_invariant(pos in tied_scores(), neg in tied_scores()) {
            let f = |v: &Vec<f64>| -> Vec<f64> { v.iter().map(|x| (3.0 * x).exp() - 7.0).collect() };
            prop_assert_eq!(auroc(&pos, &neg), auroc(&f(&pos), &f(&neg)));
        }

        #[test]
        fn auroc_in_unit_interval(pos in tied_scores(), neg in tied_scores()) {
            let a = auroc(&pos, &neg).unwrap();
            prop_assert!((0.0..=1.0).contains(&a));
        }
    }
}
