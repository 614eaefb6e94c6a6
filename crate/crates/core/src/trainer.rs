//! The training loop.
//!
//! Each iteration draws a labeled batch (weak view) and an unlabeled batch
//! (one weak and two strong views). The classifier always trains on labeled
//! cross-entropy plus confident pseudo-labels; after `warmup` iterations the
//! one-vs-all detector joins with its labeled loss, pseudo-negative mining,
//! open-set consistency and entropy minimization. One plain SGD step per
//! iteration follows a cosine schedule.
//!
//! The trainer sees only a [`TrainingView`]. Metrics come from an
//! [`EvalHook`] that holds the ground truth; the only thing it hands back is
//! an optional detector threshold.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::artifacts::write_atomic;
use crate::data::{rng_stream, AugmentConfig, Batch, BatchSampler, OpenSetDataset, TrainingView, STREAM_INIT};
use crate::error::{Error, Result};
use crate::eval::{Evaluator, MetricsRecord, OodScoreSource, RunMetrics, SelectionEntry, SelectionLog};
use crate::losses::{
    em_loss, labeled_cls_loss, labeled_det_loss, oc_loss, pseudo_negative_loss_for, pseudo_positive_loss,
    total_loss, unlabeled_cls_loss, LossComponents, LossWeights, PseudoLabelBatch, PseudoNegatives,
};
use crate::model::{Branches, HeadMode, Model, ModelConfig, ModelForward, ModelGrads};
use crate::nn::{cosine_lr, Differentiable};

macro_rules! string_enum {
    ($(#[$m:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$m])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
        #[serde(rename_all = "snake_case")]
        pub enum $name { $($variant),+ }

        impl FromStr for $name {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok(Self::$variant),)+
                    _ => Err(Error::config(format!(
                        concat!("unknown ", stringify!($name), " {:?} (expected one of: ", $($text, " "),+, ")"),
                        s
                    ))),
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $(Self::$variant => $text),+ })
            }
        }
    };
}

string_enum! {
    /// Which unlabeled points enter the classifier's pseudo-label loss.
    FilterStrategy {
        Off => "off",
        Confidence => "confidence",
        Detector => "detector",
        DetectorTuned => "detector_tuned",
    }
}

string_enum! {
    /// How unlabeled data trains the detector.
    PlMode {
        None => "none",
        Standard => "standard",
        PseudoNegative => "pseudo_negative",
    }
}

string_enum! {
    /// Which unlabeled points the entropy term covers.
    EmScope {
        All => "all",
        Confident => "confident",
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub tau: f64,
    pub theta: f64,
    pub lambda_det_u: f64,
    pub lambda_oc_u: f64,
    pub lambda_em_u: f64,
    pub eta0: f64,
    pub iterations: u64,
    /// Detector losses are active for iterations `t > warmup`.
    pub warmup: u64,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    pub head_mode: HeadMode,
    pub filter: FilterStrategy,
    pub pl_mode: PlMode,
    pub em_scope: EmScope,
    /// Cut-off on the pseudo-label's detector score for the `detector` filter
    /// and the starting point of `detector_tuned`.
    pub detector_threshold: f64,
    pub ood_score: OodScoreSource,
    pub seed: u64,
    pub eval_every: u64,
    pub feat_dim: usize,
    pub proj_dim: usize,
    pub weak_sigma: f64,
    pub strong_sigma: f64,
    pub dropout: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            tau: 0.95,
            theta: 0.01,
            lambda_det_u: 1.0,
            lambda_oc_u: 0.5,
            lambda_em_u: 0.1,
            eta0: 0.03,
            iterations: 20_000,
            warmup: 12_500,
            batch_labeled: 64,
            batch_unlabeled: 64,
            head_mode: HeadMode::Separate,
            filter: FilterStrategy::Confidence,
            pl_mode: PlMode::PseudoNegative,
            em_scope: EmScope::All,
            detector_threshold: 0.5,
            ood_score: OodScoreSource::Detector,
            seed: 0,
            eval_every: 1000,
            feat_dim: 5,
            proj_dim: 64,
            weak_sigma: AugmentConfig::default().weak_sigma,
            strong_sigma: AugmentConfig::default().strong_sigma,
            dropout: AugmentConfig::default().dropout,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let open_unit = |name: &str, v: f64| {
            if v > 0.0 && v < 1.0 {
                Ok(())
            } else {
                Err(Error::config(format!("{name} must lie in (0, 1), got {v}")))
            }
        };
        open_unit("tau", self.tau)?;
        open_unit("theta", self.theta)?;
        self.loss_weights().validate()?;
        if !(self.eta0 >= 0.0 && self.eta0.is_finite()) {
            return Err(Error::config("eta0 must be finite and >= 0"));
        }
        if self.iterations == 0 || self.warmup > self.iterations {
            return Err(Error::config(format!(
                "need 0 <= warmup ({}) <= iterations ({}) and iterations > 0",
                self.warmup, self.iterations
            )));
        }
        if self.eval_every == 0 || self.batch_labeled == 0 || self.batch_unlabeled == 0 {
            return Err(Error::config("eval_every and batch sizes must be positive"));
        }
        if self.feat_dim == 0 || self.proj_dim == 0 {
            return Err(Error::config("layer widths must be positive"));
        }
        if !self.detector_threshold.is_finite() {
            return Err(Error::config("detector_threshold must be finite"));
        }
        self.augment().validate()
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            det_u: self.lambda_det_u,
            oc_u: self.lambda_oc_u,
            em_u: self.lambda_em_u,
        }
    }

    pub fn augment(&self) -> AugmentConfig {
        AugmentConfig {
            weak_sigma: self.weak_sigma,
            strong_sigma: self.strong_sigma,
            dropout: self.dropout,
        }
    }

    pub fn model_config(&self, input_dim: usize, n_classes: usize) -> ModelConfig {
        ModelConfig::new(input_dim, self.feat_dim, self.proj_dim, n_classes, self.head_mode)
    }

    /// The model a run with this config starts from.
    pub fn initial_model(&self, input_dim: usize, n_classes: usize) -> Result<Model> {
        Model::init_with_rng(&self.model_config(input_dim, n_classes), &mut rng_stream(self.seed, STREAM_INIT))
    }

    fn is_eval_point(&self, t: u64) -> bool {
        t.is_multiple_of(self.eval_every) || t == self.iterations
    }
}

/// Everything one iteration's objective produced.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub parts: LossComponents,
    pub total: f64,
    pub warnings: u64,
    pub grads: Option<ModelGrads>,
    /// Pseudo-labels with the filter applied to the mask.
    pub pseudo: PseudoLabelBatch,
    /// Plain confidence mask, before any filter.
    pub confident: Vec<bool>,
    /// Weak-view detector scores, when computed.
    pub weak_scores: Option<Array2<f64>>,
    pub negatives: Option<PseudoNegatives>,
    /// Discrete state (relu patterns, masks, selections), when requested.
    pub regime: Vec<bool>,
}

/// Loss and gradient of one iteration on a fixed batch. Pseudo-labels,
/// masks and pseudo-negative sets are treated as constants.
pub fn compute_step(
    model: &Model,
    batch: &Batch,
    config: &TrainConfig,
    detector_active: bool,
    detector_threshold: f64,
    want_grads: bool,
    want_regime: bool,
) -> Result<StepOutcome> {
    let w = config.loss_weights();
    let uses_detector_filter = matches!(config.filter, FilterStrategy::Detector | FilterStrategy::DetectorTuned);
    let mut warnings = 0usize;
    let mut regime = Vec::new();
    let pattern = |fwd: &ModelForward, regime: &mut Vec<bool>| {
        if want_regime {
            model.relu_pattern(fwd, regime);
        }
    };

    let lab = model.forward_batch(
        batch.labeled_x.view(),
        Branches {
            classifier: true,
            detector: detector_active,
        },
    )?;
    pattern(&lab, &mut regime);
    let cls_l = labeled_cls_loss(lab.classifier_probs().view(), &batch.labeled_y)?;
    warnings += cls_l.warnings;

    let weak_det = uses_detector_filter
        || (detector_active && (config.pl_mode == PlMode::PseudoNegative || w.em_u > 0.0));
    let weak = model.forward_batch(
        batch.weak.view(),
        Branches {
            classifier: true,
            detector: weak_det,
        },
    )?;
    pattern(&weak, &mut regime);
    let mut pseudo = PseudoLabelBatch::from_probs(weak.classifier_probs().view(), config.tau);
    let confident = pseudo.mask.clone();
    match config.filter {
        FilterStrategy::Off => pseudo.mask.iter_mut().for_each(|m| *m = false),
        FilterStrategy::Confidence => {}
        FilterStrategy::Detector | FilterStrategy::DetectorTuned => {
            let scores = weak.detector_scores();
            for (i, m) in pseudo.mask.iter_mut().enumerate() {
                let passes = scores[[i, pseudo.labels[i]]] >= detector_threshold;
                *m = passes && (*m || config.filter == FilterStrategy::DetectorTuned);
            }
        }
    }
    if want_regime {
        regime.extend(&confident);
        regime.extend(&pseudo.mask);
        let k = model.n_classes();
        regime.extend(pseudo.labels.iter().flat_map(|&y| (0..k).map(move |c| c == y)));
    }

    let need_s1_cls = pseudo.mask.iter().any(|&m| m);
    let need_s1_det = detector_active && (config.pl_mode != PlMode::None || w.oc_u > 0.0);
    let strong1 = if need_s1_cls || need_s1_det {
        let f = model.forward_batch(
            batch.strong1.view(),
            Branches {
                classifier: need_s1_cls,
                detector: need_s1_det,
            },
        )?;
        pattern(&f, &mut regime);
        Some(f)
    } else {
        None
    };
    let strong2 = if detector_active && w.oc_u > 0.0 {
        let f = model.forward_batch(batch.strong2.view(), Branches::DETECTOR)?;
        pattern(&f, &mut regime);
        Some(f)
    } else {
        None
    };

    let mut parts = LossComponents {
        cls_l: cls_l.value,
        ..LossComponents::default()
    };
    let cls_u = match &strong1 {
        Some(s1) if need_s1_cls => {
            let (l, _) = unlabeled_cls_loss(&pseudo, s1.classifier_probs().view())?;
            warnings += l.warnings;
            parts.cls_u = l.value;
            Some(l.grad)
        }
        _ => None,
    };

    let mut det_l_grad = None;
    let mut weak_det_grad = None;
    let mut s1_det_grad: Option<Array2<f64>> = None;
    let mut s2_det_grad = None;
    let mut negatives = None;
    if detector_active {
        let det_l = labeled_det_loss(lab.detector_scores().view(), &batch.labeled_y)?;
        warnings += det_l.warnings;
        parts.det_l = det_l.value;
        det_l_grad = Some(det_l.grad);

        let mut add_s1 = |g: Array2<f64>| match &mut s1_det_grad {
            Some(acc) => *acc += &g,
            None => s1_det_grad = Some(g),
        };
        match config.pl_mode {
            PlMode::None => {}
            PlMode::PseudoNegative => {
                let neg = PseudoNegatives::select(weak.detector_scores().view(), config.theta)?;
                let l = pseudo_negative_loss_for(&neg, strong1.as_ref().unwrap().detector_scores().view())?;
                warnings += l.warnings;
                parts.det_u = l.value;
                if want_regime {
                    let k = model.n_classes();
                    for set in &neg.classes {
                        regime.extend((0..k).map(|c| set.contains(&c)));
                    }
                }
                add_s1(l.grad * w.det_u);
                negatives = Some(neg);
            }
            PlMode::Standard => {
                let positives = PseudoLabelBatch {
                    mask: confident.clone(),
                    ..pseudo.clone()
                };
                let l = pseudo_positive_loss(&positives, strong1.as_ref().unwrap().detector_scores().view())?;
                warnings += l.warnings;
                parts.det_u = l.value;
                add_s1(l.grad * w.det_u);
            }
        }
        if let Some(s2) = &strong2 {
            let (v, g1, g2) = oc_loss(
                strong1.as_ref().unwrap().detector_scores().view(),
                s2.detector_scores().view(),
            )?;
            parts.oc = v;
            add_s1(g1 * w.oc_u);
            s2_det_grad = Some(g2 * w.oc_u);
        }
        if w.em_u > 0.0 {
            let include = (config.em_scope == EmScope::Confident).then_some(confident.as_slice());
            let l = em_loss(weak.detector_scores().view(), include)?;
            warnings += l.warnings;
            parts.em = l.value;
            weak_det_grad = Some(l.grad * w.em_u);
        }
    }
    let total = total_loss(&parts, &w, detector_active);

    let grads = if want_grads {
        let mut g = model.zero_grads();
        model.backward(&lab, Some(cls_l.grad.view()), view_of(&det_l_grad), &mut g)?;
        if weak_det_grad.is_some() {
            model.backward(&weak, None, view_of(&weak_det_grad), &mut g)?;
        }
        if let Some(s1) = &strong1 {
            model.backward(s1, view_of(&cls_u), view_of(&s1_det_grad), &mut g)?;
        }
        if let Some(s2) = &strong2 {
            model.backward(s2, None, view_of(&s2_det_grad), &mut g)?;
        }
        Some(g)
    } else {
        None
    };

    Ok(StepOutcome {
        parts,
        total,
        warnings: warnings as u64,
        grads,
        pseudo,
        confident,
        weak_scores: weak.det_scores,
        negatives,
        regime,
    })
}

fn view_of(a: &Option<Array2<f64>>) -> Option<ndarray::ArrayView2<'_, f64>> {
    a.as_ref().map(|x| x.view())
}

/// The full objective on one fixed batch as a function of the flat
/// parameters, for gradient checking.
pub struct StepObjective<'a> {
    pub template: Model,
    pub batch: &'a Batch,
    pub config: &'a TrainConfig,
    pub detector_active: bool,
    pub detector_threshold: f64,
}

impl StepObjective<'_> {
    fn eval(&self, params: &[f64], grads: bool, regime: bool) -> StepOutcome {
        let mut m = self.template.clone();
        m.assign_flat(params).expect("parameter vector matches the model");
        compute_step(&m, self.batch, self.config, self.detector_active, self.detector_threshold, grads, regime)
            .expect("objective evaluation")
    }
}

impl Differentiable for StepObjective<'_> {
    fn value(&self, params: &[f64]) -> f64 {
        self.eval(params, false, false).total
    }

    fn gradient(&self, params: &[f64]) -> Vec<f64> {
        self.eval(params, true, false).grads.unwrap().flatten()
    }

    fn regime(&self, params: &[f64]) -> Vec<bool> {
        self.eval(params, false, true).regime
    }
}

/// Loss sums and counts since the last evaluation point.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct WindowStats {
    pub steps: u64,
    pub sums: LossComponents,
    pub total: f64,
    pub n_selected: u64,
    pub n_pseudo_neg_pairs: u64,
    pub warnings: u64,
}

impl WindowStats {
    fn add(&mut self, out: &StepOutcome) {
        self.steps += 1;
        let s = &mut self.sums;
        s.cls_l += out.parts.cls_l;
        s.cls_u += out.parts.cls_u;
        s.det_l += out.parts.det_l;
        s.det_u += out.parts.det_u;
        s.oc += out.parts.oc;
        s.em += out.parts.em;
        self.total += out.total;
        self.n_selected += out.pseudo.n_selected() as u64;
        self.n_pseudo_neg_pairs += out.negatives.as_ref().map_or(0, |n| n.n_pairs() as u64);
        self.warnings += out.warnings;
    }

    pub fn mean_losses(&self) -> LossComponents {
        let n = self.steps.max(1) as f64;
        let s = &self.sums;
        LossComponents {
            cls_l: s.cls_l / n,
            cls_u: s.cls_u / n,
            det_l: s.det_l / n,
            det_u: s.det_u / n,
            oc: s.oc / n,
            em: s.em / n,
        }
    }

    pub fn mean_total(&self) -> f64 {
        self.total / self.steps.max(1) as f64
    }
}

/// What an evaluation hook gets to see.
pub struct EvalPoint<'a> {
    pub iteration: u64,
    pub lr: f64,
    pub model: &'a Model,
    pub log: &'a SelectionLog,
    pub window: &'a WindowStats,
    pub detector_threshold: f64,
    pub filter: FilterStrategy,
}

pub struct EvalOutcome {
    pub record: MetricsRecord,
    /// Replacement threshold for the `detector_tuned` filter.
    pub detector_threshold: Option<f64>,
}

pub trait EvalHook {
    fn evaluate(&mut self, point: &EvalPoint<'_>) -> Result<EvalOutcome>;
}

/// Complete resumable state of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub config: TrainConfig,
    pub data_fingerprint: String,
    pub iteration: u64,
    pub model: Model,
    pub sampler: BatchSampler,
    pub log: SelectionLog,
    pub window: WindowStats,
    pub detector_threshold: f64,
    pub metrics: RunMetrics,
    /// Losses of the very first iteration.
    pub first_step: Option<LossComponents>,
}

/// SHA-256 over the training view, so a checkpoint cannot resume on other data.
pub fn data_fingerprint(view: &TrainingView<'_>) -> String {
    let mut h = Sha256::new();
    h.update((view.dim() as u64).to_le_bytes());
    for v in view.labeled_x.iter().chain(view.unlabeled_x.iter()) {
        h.update(v.to_le_bytes());
    }
    for &y in view.labeled_y {
        h.update((y as u64).to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub struct Trainer<'a> {
    view: TrainingView<'a>,
    aug: AugmentConfig,
    state: TrainState,
}

pub struct TrainOutput {
    pub model: Model,
    pub metrics: RunMetrics,
    pub first_step: Option<LossComponents>,
}

impl<'a> Trainer<'a> {
    pub fn new(view: TrainingView<'a>, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = config.initial_model(view.dim(), view.n_classes)?;
        let sampler = BatchSampler::new(&view, config.batch_labeled, config.batch_unlabeled, config.seed)?;
        Ok(Self {
            aug: config.augment(),
            state: TrainState {
                config: config.clone(),
                data_fingerprint: data_fingerprint(&view),
                iteration: 0,
                model,
                sampler,
                log: SelectionLog::new(view.n_unlabeled()),
                window: WindowStats::default(),
                detector_threshold: config.detector_threshold,
                metrics: RunMetrics::default(),
                first_step: None,
            },
            view,
        })
    }

    pub fn resume(view: TrainingView<'a>, state: TrainState) -> Result<Self> {
        state.config.validate()?;
        if state.data_fingerprint != data_fingerprint(&view) {
            return Err(Error::config("checkpoint was written for a different dataset"));
        }
        if state.log.len() != view.n_unlabeled() || state.model.input_dim() != view.dim() {
            return Err(Error::config("checkpoint does not fit this dataset"));
        }
        Ok(Self {
            aug: state.config.augment(),
            state,
            view,
        })
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn iteration(&self) -> u64 {
        self.state.iteration
    }

    pub fn is_done(&self) -> bool {
        self.state.iteration >= self.state.config.iterations
    }

    pub fn step(&mut self, hook: &mut dyn EvalHook) -> Result<()> {
        let st = &mut self.state;
        let cfg = &st.config;
        let t = st.iteration + 1;
        let batch = st.sampler.next(&self.view, &self.aug);
        let active = t > cfg.warmup;
        let out = compute_step(&st.model, &batch, cfg, active, st.detector_threshold, true, false)?;
        if !out.total.is_finite() {
            return Err(Error::Numeric(format!(
                "iteration {t}: non-finite loss {}; components {:?}; {} clamped logs",
                out.total, out.parts, out.warnings
            )));
        }
        let lr = cosine_lr(cfg.eta0, t, cfg.iterations)?;
        st.model.sgd_step(out.grads.as_ref().unwrap(), lr)?;

        let k = st.model.n_classes();
        for (r, &idx) in batch.unlabeled_idx.iter().enumerate() {
            let y = out.pseudo.labels[r];
            st.log.record(
                idx,
                SelectionEntry {
                    selected: out.pseudo.mask[r],
                    confident: out.confident[r],
                    pseudo_label: y,
                    detector_score: out.weak_scores.as_ref().map(|s| s[[r, y]]),
                    negatives: out.negatives.as_ref().map(|n| n.classes[r].clone()).unwrap_or_default(),
                },
            );
        }
        debug_assert!(out.pseudo.labels.iter().all(|&y| y < k));
        st.window.add(&out);
        st.first_step.get_or_insert(out.parts);
        st.iteration = t;

        if cfg.is_eval_point(t) {
            let outcome = hook.evaluate(&EvalPoint {
                iteration: t,
                lr,
                model: &st.model,
                log: &st.log,
                window: &st.window,
                detector_threshold: st.detector_threshold,
                filter: cfg.filter,
            })?;
            st.metrics.records.push(outcome.record);
            if let Some(thr) = outcome.detector_threshold {
                st.detector_threshold = thr;
            }
            st.window = WindowStats::default();
        }
        Ok(())
    }

    /// Trains up to iteration `stop` (capped at the configured total).
    pub fn run_until(&mut self, stop: u64, hook: &mut dyn EvalHook) -> Result<()> {
        while self.state.iteration < stop.min(self.state.config.iterations) {
            self.step(hook)?;
        }
        Ok(())
    }

    pub fn run(&mut self, hook: &mut dyn EvalHook) -> Result<()> {
        self.run_until(u64::MAX, hook)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        save_checkpoint(&self.state, path)
    }

    pub fn finish(self) -> TrainOutput {
        TrainOutput {
            model: self.state.model,
            metrics: self.state.metrics,
            first_step: self.state.first_step,
        }
    }
}

/// Trains on `dataset` from scratch, evaluating against its hidden truth.
pub fn train_ssb(dataset: &OpenSetDataset, config: &TrainConfig) -> Result<TrainOutput> {
    let mut evaluator = Evaluator::for_config(dataset, config);
    let mut trainer = Trainer::new(dataset.training_view(), config)?;
    trainer.run(&mut evaluator)?;
    Ok(trainer.finish())
}

const CKPT_MAGIC: &[u8; 8] = b"SSBCKPT\n";
pub const CKPT_VERSION: u32 = 1;
const CKPT_HEADER: usize = 8 + 4 + 8 + 32;

/// Layout: magic, format version (u32 LE), payload length (u64 LE), SHA-256
/// of the payload, JSON payload. Written atomically.
pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let payload = serde_json::to_vec(state).map_err(|e| Error::Checkpoint {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let mut bytes = Vec::with_capacity(CKPT_HEADER + payload.len());
    bytes.extend_from_slice(CKPT_MAGIC);
    bytes.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&Sha256::digest(&payload));
    bytes.extend_from_slice(&payload);
    write_atomic(path, &bytes)
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes).map_err(|message| Error::Checkpoint {
        path: path.to_path_buf(),
        message,
    })
}

fn decode_checkpoint(bytes: &[u8]) -> std::result::Result<TrainState, String> {
    if bytes.len() < CKPT_HEADER {
        return Err("truncated header".into());
    }
    if &bytes[..8] != CKPT_MAGIC {
        return Err("not a checkpoint file".into());
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CKPT_VERSION {
        return Err(format!("format version {version}, expected {CKPT_VERSION}"));
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
    let payload = &bytes[CKPT_HEADER..];
    if payload.len() as u64 != len {
        return Err(format!("payload is {} bytes, header says {len}", payload.len()));
    }
    if Sha256::digest(payload).as_slice() != &bytes[20..52] {
        return Err("checksum mismatch".into());
    }
    serde_json::from_slice(payload).map_err(|e| format!("malformed payload: {e}"))
}
