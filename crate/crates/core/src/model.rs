//! The two-branch network: a shared encoder `f`, projection heads `h_c` and
//! `h_d`, a softmax inlier classifier `g_c` and a bank of one-vs-all detectors
//! `g_d` (one sigmoid logit per inlier class).
//!
//! Classifier path: `g_c(h_c(f(x)))`. Detector path: `g_d(h_d(f(x)))`.
//! With [`HeadMode::None`] both heads read `f(x)` directly; with
//! [`HeadMode::Shared`] a single projection feeds both.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{sgd_step, Activation, GradientBundle, Mlp, MlpSpec, Tape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadMode {
    None,
    Shared,
    Separate,
}

impl FromStr for HeadMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(HeadMode::None),
            "shared" => Ok(HeadMode::Shared),
            "separate" => Ok(HeadMode::Separate),
            other => Err(Error::config(format!("unknown head mode `{other}`"))),
        }
    }
}

impl fmt::Display for HeadMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HeadMode::None => "none",
            HeadMode::Shared => "shared",
            HeadMode::Separate => "separate",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub feat_dim: usize,
    pub proj_dim: usize,
    /// Width of the detector projection when it differs from `proj_dim`.
    /// Only meaningful for separate heads.
    pub det_proj_dim: Option<usize>,
    pub n_classes: usize,
    pub head_mode: HeadMode,
    /// Number of relu layers in the encoder.
    pub encoder_layers: usize,
    /// Number of layers in each projection head (relu between, identity last).
    pub proj_layers: usize,
}

impl ModelConfig {
    pub fn new(
        input_dim: usize,
        feat_dim: usize,
        proj_dim: usize,
        n_classes: usize,
        head_mode: HeadMode,
    ) -> Self {
        Self {
            input_dim,
            feat_dim,
            proj_dim,
            det_proj_dim: None,
            n_classes,
            head_mode,
            encoder_layers: 2,
            proj_layers: 2,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.feat_dim == 0 || self.proj_dim == 0 {
            return Err(Error::config("model dimensions must be positive"));
        }
        if self.n_classes < 2 {
            return Err(Error::config("need at least two inlier classes"));
        }
        if self.encoder_layers == 0 || self.proj_layers == 0 {
            return Err(Error::config("encoder and projection heads need at least one layer"));
        }
        if let Some(d) = self.det_proj_dim {
            if d == 0 {
                return Err(Error::config("detector projection width must be positive"));
            }
            if self.head_mode == HeadMode::Shared && d != self.proj_dim {
                return Err(Error::config(format!(
                    "shared projection head cannot have widths {} and {d}",
                    self.proj_dim
                )));
            }
        }
        Ok(())
    }

    fn encoder_spec(&self) -> Result<MlpSpec> {
        let mut dims = vec![self.input_dim];
        dims.extend(std::iter::repeat_n(self.feat_dim, self.encoder_layers));
        MlpSpec::new(dims, vec![Activation::Relu; self.encoder_layers])
    }

    fn proj_spec(&self, width: usize) -> Result<MlpSpec> {
        let mut dims = vec![self.feat_dim];
        dims.extend(std::iter::repeat_n(width, self.proj_layers));
        MlpSpec::relu_stack(dims)
    }

    fn det_width(&self) -> usize {
        self.det_proj_dim.unwrap_or(self.proj_dim)
    }
}

/// All trainable parameters plus the head wiring.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    head_mode: HeadMode,
    encoder: Mlp,
    /// Present unless `head_mode == None`; doubles as the detector projection
    /// when shared.
    proj_cls: Option<Mlp>,
    /// Present only for separate heads.
    proj_det: Option<Mlp>,
    cls_head: Mlp,
    det_head: Mlp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierOutput {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

/// Per-class inlier scores; each is an independent sigmoid.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorOutput {
    pub inlier_scores: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub class: usize,
    /// `1 - p_class` from the predicted class's one-vs-all detector.
    pub ood_score: f64,
}

impl Prediction {
    pub fn is_outlier(&self, threshold: f64) -> bool {
        self.ood_score > threshold
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Branches {
    pub classifier: bool,
    pub detector: bool,
}

impl Branches {
    pub const BOTH: Branches = Branches {
        classifier: true,
        detector: true,
    };
    pub const CLASSIFIER: Branches = Branches {
        classifier: true,
        detector: false,
    };
    pub const DETECTOR: Branches = Branches {
        classifier: false,
        detector: true,
    };
}

/// Everything a batched forward pass produced, including the tapes needed to
/// backpropagate into any subset of the branches.
#[derive(Debug, Clone)]
pub struct ModelForward {
    encoder: Tape,
    proj_cls: Option<Tape>,
    proj_det: Option<Tape>,
    cls_head: Option<Tape>,
    det_head: Option<Tape>,
    pub cls_probs: Option<Array2<f64>>,
    pub cls_logits: Option<Array2<f64>>,
    pub det_scores: Option<Array2<f64>>,
}

impl ModelForward {
    pub fn batch_size(&self) -> usize {
        self.encoder.batch_size()
    }

    pub fn classifier_probs(&self) -> &Array2<f64> {
        self.cls_probs.as_ref().expect("classifier branch was not evaluated")
    }

    pub fn detector_scores(&self) -> &Array2<f64> {
        self.det_scores.as_ref().expect("detector branch was not evaluated")
    }
}

/// Gradients for every parameter group of a [`Model`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub encoder: GradientBundle,
    pub proj_cls: Option<GradientBundle>,
    pub proj_det: Option<GradientBundle>,
    pub cls_head: GradientBundle,
    pub det_head: GradientBundle,
}

impl ModelGrads {
    pub fn scale(&mut self, factor: f64) {
        for g in self.groups_mut() {
            g.scale(factor);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.groups().iter().all(|g| g.is_finite())
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for g in self.groups() {
            g.flatten_into(&mut out);
        }
        out
    }

    fn groups(&self) -> Vec<&GradientBundle> {
        let mut v = vec![&self.encoder];
        v.extend(self.proj_cls.as_ref());
        v.extend(self.proj_det.as_ref());
        v.push(&self.cls_head);
        v.push(&self.det_head);
        v
    }

    fn groups_mut(&mut self) -> Vec<&mut GradientBundle> {
        let mut v = vec![&mut self.encoder];
        v.extend(self.proj_cls.as_mut());
        v.extend(self.proj_det.as_mut());
        v.push(&mut self.cls_head);
        v.push(&mut self.det_head);
        v
    }
}

pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    out
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Index of the largest entry; the lowest index wins exact ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

impl Model {
    /// Random initialization, deterministic in `seed`.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::init_with_rng(config, &mut rng)
    }

    pub fn init_with_rng(config: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let encoder = Mlp::init(config.encoder_spec()?, rng);
        let (proj_cls, proj_det) = match config.head_mode {
            HeadMode::None => (None, None),
            HeadMode::Shared => (Some(Mlp::init(config.proj_spec(config.proj_dim)?, rng)), None),
            HeadMode::Separate => (
                Some(Mlp::init(config.proj_spec(config.proj_dim)?, rng)),
                Some(Mlp::init(config.proj_spec(config.det_width())?, rng)),
            ),
        };
        let (cls_in, det_in) = match config.head_mode {
            HeadMode::None => (config.feat_dim, config.feat_dim),
            HeadMode::Shared => (config.proj_dim, config.proj_dim),
            HeadMode::Separate => (config.proj_dim, config.det_width()),
        };
        let cls_head = Mlp::init(MlpSpec::relu_stack(vec![cls_in, config.n_classes])?, rng);
        let det_head = Mlp::init(MlpSpec::relu_stack(vec![det_in, config.n_classes])?, rng);
        Ok(Self {
            head_mode: config.head_mode,
            encoder,
            proj_cls,
            proj_det,
            cls_head,
            det_head,
        })
    }

    /// Assembles a model from explicit parts, checking that the wiring
    /// implied by `head_mode` is dimensionally consistent.
    pub fn from_parts(
        head_mode: HeadMode,
        encoder: Mlp,
        proj_cls: Option<Mlp>,
        proj_det: Option<Mlp>,
        cls_head: Mlp,
        det_head: Mlp,
    ) -> Result<Self> {
        let feat = encoder.spec().output_dim();
        let expect_in = |m: &Mlp, dim: usize, what: &str| -> Result<()> {
            if m.spec().input_dim() != dim {
                return Err(Error::config(format!(
                    "{what} expects input {}, gets {dim}",
                    m.spec().input_dim()
                )));
            }
            Ok(())
        };
        let (cls_in, det_in) = match (head_mode, &proj_cls, &proj_det) {
            (HeadMode::None, None, None) => (feat, feat),
            (HeadMode::Shared, Some(p), None) => {
                expect_in(p, feat, "projection head")?;
                (p.spec().output_dim(), p.spec().output_dim())
            }
            (HeadMode::Separate, Some(pc), Some(pd)) => {
                expect_in(pc, feat, "classifier projection")?;
                expect_in(pd, feat, "detector projection")?;
                (pc.spec().output_dim(), pd.spec().output_dim())
            }
            _ => {
                return Err(Error::config(format!(
                    "projection heads do not match head mode `{head_mode}`"
                )))
            }
        };
        expect_in(&cls_head, cls_in, "classifier head")?;
        expect_in(&det_head, det_in, "detector head")?;
        if cls_head.spec().output_dim() != det_head.spec().output_dim() {
            return Err(Error::config("classifier and detector disagree on the class count"));
        }
        if cls_head.spec().output_dim() < 2 {
            return Err(Error::config("need at least two inlier classes"));
        }
        Ok(Self {
            head_mode,
            encoder,
            proj_cls,
            proj_det,
            cls_head,
            det_head,
        })
    }

    pub fn head_mode(&self) -> HeadMode {
        self.head_mode
    }

    pub fn n_classes(&self) -> usize {
        self.cls_head.spec().output_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.spec().input_dim()
    }

    pub fn encoder(&self) -> &Mlp {
        &self.encoder
    }

    pub fn proj_cls(&self) -> Option<&Mlp> {
        self.proj_cls.as_ref()
    }

    /// The projection feeding the detector head (the shared one in shared mode).
    pub fn proj_det(&self) -> Option<&Mlp> {
        match self.head_mode {
            HeadMode::Shared => self.proj_cls.as_ref(),
            _ => self.proj_det.as_ref(),
        }
    }

    pub fn proj_cls_mut(&mut self) -> Option<&mut Mlp> {
        self.proj_cls.as_mut()
    }

    pub fn proj_det_mut(&mut self) -> Option<&mut Mlp> {
        match self.head_mode {
            HeadMode::Shared => self.proj_cls.as_mut(),
            _ => self.proj_det.as_mut(),
        }
    }

    pub fn cls_head(&self) -> &Mlp {
        &self.cls_head
    }

    pub fn det_head(&self) -> &Mlp {
        &self.det_head
    }

    pub fn det_head_mut(&mut self) -> &mut Mlp {
        &mut self.det_head
    }

    pub fn cls_head_mut(&mut self) -> &mut Mlp {
        &mut self.cls_head
    }

    fn parts(&self) -> Vec<&Mlp> {
        let mut v = vec![&self.encoder];
        v.extend(self.proj_cls.as_ref());
        v.extend(self.proj_det.as_ref());
        v.push(&self.cls_head);
        v.push(&self.det_head);
        v
    }

    fn parts_mut(&mut self) -> Vec<&mut Mlp> {
        let mut v = vec![&mut self.encoder];
        v.extend(self.proj_cls.as_mut());
        v.extend(self.proj_det.as_mut());
        v.push(&mut self.cls_head);
        v.push(&mut self.det_head);
        v
    }

    /// Number of distinct trainable scalars (a shared head counts once).
    pub fn param_count(&self) -> usize {
        self.parts().iter().map(|m| m.param_count()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for m in self.parts() {
            m.flatten_into(&mut out);
        }
        out
    }

    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::contract(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                flat.len()
            )));
        }
        let mut rest = flat;
        for m in self.parts_mut() {
            rest = m.assign_flat(rest)?;
        }
        Ok(())
    }

    /// Detector-only parameters: `h_d` (when it is not shared) and `g_d`.
    pub fn detector_params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        if let Some(p) = &self.proj_det {
            p.flatten_into(&mut out);
        }
        self.det_head.flatten_into(&mut out);
        out
    }

    /// Classifier-only parameters: `h_c` (when it is not shared) and `g_c`.
    pub fn classifier_params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        if self.head_mode == HeadMode::Separate {
            if let Some(p) = &self.proj_cls {
                p.flatten_into(&mut out);
            }
        }
        self.cls_head.flatten_into(&mut out);
        out
    }

    pub fn zero_grads(&self) -> ModelGrads {
        ModelGrads {
            encoder: GradientBundle::zeros_like(&self.encoder),
            proj_cls: self.proj_cls.as_ref().map(GradientBundle::zeros_like),
            proj_det: self.proj_det.as_ref().map(GradientBundle::zeros_like),
            cls_head: GradientBundle::zeros_like(&self.cls_head),
            det_head: GradientBundle::zeros_like(&self.det_head),
        }
    }

    pub fn forward_batch(&self, x: ArrayView2<'_, f64>, branches: Branches) -> Result<ModelForward> {
        let (feat, encoder) = self.encoder.forward_batch(x)?;
        let mut out = ModelForward {
            encoder,
            proj_cls: None,
            proj_det: None,
            cls_head: None,
            det_head: None,
            cls_probs: None,
            cls_logits: None,
            det_scores: None,
        };
        let cls_proj_needed = branches.classifier
            || (branches.detector && self.head_mode == HeadMode::Shared);
        let cls_in = match (&self.proj_cls, cls_proj_needed) {
            (Some(p), true) => {
                let (h, tape) = p.forward_batch(feat.view())?;
                out.proj_cls = Some(tape);
                Some(h)
            }
            _ => None,
        };
        let det_in = match (&self.proj_det, branches.detector) {
            (Some(p), true) => {
                let (h, tape) = p.forward_batch(feat.view())?;
                out.proj_det = Some(tape);
                Some(h)
            }
            _ => None,
        };
        if branches.classifier {
            let input = match self.head_mode {
                HeadMode::None => feat.view(),
                _ => cls_in.as_ref().expect("classifier projection").view(),
            };
            let (logits, tape) = self.cls_head.forward_batch(input)?;
            out.cls_probs = Some(softmax_rows(&logits));
            out.cls_logits = Some(logits);
            out.cls_head = Some(tape);
        }
        if branches.detector {
            let input = match self.head_mode {
                HeadMode::None => feat.view(),
                HeadMode::Shared => cls_in.as_ref().expect("shared projection").view(),
                HeadMode::Separate => det_in.as_ref().expect("detector projection").view(),
            };
            let (logits, tape) = self.det_head.forward_batch(input)?;
            out.det_scores = Some(logits.mapv(sigmoid));
            out.det_head = Some(tape);
        }
        Ok(out)
    }

    /// Accumulates into `grads` the gradient of
    /// `sum(d_cls_probs * probs) + sum(d_det_scores * scores)`.
    ///
    /// Inputs are gradients with respect to the softmax probabilities and the
    /// sigmoid scores; the Jacobians of both squashing functions are applied
    /// here. Encoder gradients from the two branches are summed.
    pub fn backward(
        &self,
        fwd: &ModelForward,
        d_cls_probs: Option<ArrayView2<'_, f64>>,
        d_det_scores: Option<ArrayView2<'_, f64>>,
        grads: &mut ModelGrads,
    ) -> Result<()> {
        let n = fwd.batch_size();
        let mut d_feat: Option<Array2<f64>> = None;
        let mut d_shared_proj: Option<Array2<f64>> = None;
        let add = |acc: &mut Option<Array2<f64>>, g: Array2<f64>| match acc {
            Some(a) => *a += &g,
            None => *acc = Some(g),
        };

        if let Some(dp) = d_cls_probs {
            let probs = fwd
                .cls_probs
                .as_ref()
                .ok_or_else(|| Error::contract("classifier branch was not evaluated"))?;
            check_shape(dp, probs)?;
            // softmax Jacobian: dz = p * (g - <g, p>)
            let mut dz = Array2::zeros(probs.dim());
            for ((mut dz_row, g), p) in dz.rows_mut().into_iter().zip(dp.rows()).zip(probs.rows()) {
                let dot = g.dot(&p);
                for k in 0..p.len() {
                    dz_row[k] = p[k] * (g[k] - dot);
                }
            }
            let d_in = self.cls_head.backward_accumulate(
                fwd.cls_head.as_ref().unwrap(),
                dz.view(),
                &mut grads.cls_head,
            )?;
            match self.head_mode {
                HeadMode::None => add(&mut d_feat, d_in),
                HeadMode::Shared => add(&mut d_shared_proj, d_in),
                HeadMode::Separate => {
                    let proj = self.proj_cls.as_ref().unwrap();
                    let g = proj.backward_accumulate(
                        fwd.proj_cls.as_ref().unwrap(),
                        d_in.view(),
                        grads.proj_cls.as_mut().unwrap(),
                    )?;
                    add(&mut d_feat, g);
                }
            }
        }

        if let Some(ds) = d_det_scores {
            let scores = fwd
                .det_scores
                .as_ref()
                .ok_or_else(|| Error::contract("detector branch was not evaluated"))?;
            check_shape(ds, scores)?;
            let mut dz = ds.to_owned();
            dz.zip_mut_with(scores, |g, &p| *g *= p * (1.0 - p));
            let d_in = self.det_head.backward_accumulate(
                fwd.det_head.as_ref().unwrap(),
                dz.view(),
                &mut grads.det_head,
            )?;
            match self.head_mode {
                HeadMode::None => add(&mut d_feat, d_in),
                HeadMode::Shared => add(&mut d_shared_proj, d_in),
                HeadMode::Separate => {
                    let proj = self.proj_det.as_ref().unwrap();
                    let g = proj.backward_accumulate(
                        fwd.proj_det.as_ref().unwrap(),
                        d_in.view(),
                        grads.proj_det.as_mut().unwrap(),
                    )?;
                    add(&mut d_feat, g);
                }
            }
        }

        if let Some(d) = d_shared_proj {
            let proj = self.proj_cls.as_ref().unwrap();
            let g = proj.backward_accumulate(
                fwd.proj_cls.as_ref().unwrap(),
                d.view(),
                grads.proj_cls.as_mut().unwrap(),
            )?;
            add(&mut d_feat, g);
        }
        if let Some(d) = d_feat {
            debug_assert_eq!(d.nrows(), n);
            self.encoder
                .backward_accumulate(&fwd.encoder, d.view(), &mut grads.encoder)?;
        }
        Ok(())
    }

    /// Single-sample forward through both branches.
    pub fn forward_all(&self, x: &[f64]) -> Result<(ClassifierOutput, DetectorOutput, ModelForward)> {
        let view = ArrayView2::from_shape((1, x.len()), x)
            .map_err(|e| Error::config(e.to_string()))?;
        let fwd = self.forward_batch(view, Branches::BOTH)?;
        let cls = ClassifierOutput {
            logits: fwd.cls_logits.as_ref().unwrap().row(0).to_vec(),
            probs: fwd.classifier_probs().row(0).to_vec(),
        };
        let det = DetectorOutput {
            inlier_scores: fwd.detector_scores().row(0).to_vec(),
        };
        Ok((cls, det, fwd))
    }

    pub fn predict(&self, x: &[f64]) -> Result<Prediction> {
        let (cls, det, _) = self.forward_all(x)?;
        Ok(predict_from(&cls.probs, &det.inlier_scores))
    }

    pub fn predict_batch(&self, x: ArrayView2<'_, f64>) -> Result<Vec<Prediction>> {
        let fwd = self.forward_batch(x, Branches::BOTH)?;
        Ok(fwd
            .classifier_probs()
            .rows()
            .into_iter()
            .zip(fwd.detector_scores().rows())
            .map(|(p, s)| predict_from(p.as_slice().unwrap(), s.as_slice().unwrap()))
            .collect())
    }

    /// Classifier probabilities for a batch (for baseline scoring).
    pub fn classifier_probs(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let fwd = self.forward_batch(x, Branches::CLASSIFIER)?;
        Ok(fwd.cls_probs.unwrap())
    }

    /// Smallest |pre-activation| of any relu unit touched by `fwd`.
    pub fn relu_margin(&self, fwd: &ModelForward) -> f64 {
        let mut m = fwd.encoder.relu_margin(self.encoder.spec());
        if let (Some(t), Some(p)) = (&fwd.proj_cls, &self.proj_cls) {
            m = m.min(t.relu_margin(p.spec()));
        }
        if let (Some(t), Some(p)) = (&fwd.proj_det, &self.proj_det) {
            m = m.min(t.relu_margin(p.spec()));
        }
        m
    }

    pub fn relu_pattern(&self, fwd: &ModelForward, out: &mut Vec<bool>) {
        fwd.encoder.relu_pattern(self.encoder.spec(), out);
        if let (Some(t), Some(p)) = (&fwd.proj_cls, &self.proj_cls) {
            t.relu_pattern(p.spec(), out);
        }
        if let (Some(t), Some(p)) = (&fwd.proj_det, &self.proj_det) {
            t.relu_pattern(p.spec(), out);
        }
    }

    /// Plain SGD on every parameter group. Nothing is modified when any
    /// gradient is non-finite.
    pub fn sgd_step(&mut self, grads: &ModelGrads, lr: f64) -> Result<()> {
        if !grads.is_finite() {
            return Err(Error::Numeric("non-finite gradient".into()));
        }
        sgd_step(&mut self.encoder, &grads.encoder, lr)?;
        if let (Some(p), Some(g)) = (self.proj_cls.as_mut(), grads.proj_cls.as_ref()) {
            sgd_step(p, g, lr)?;
        }
        if let (Some(p), Some(g)) = (self.proj_det.as_mut(), grads.proj_det.as_ref()) {
            sgd_step(p, g, lr)?;
        }
        sgd_step(&mut self.cls_head, &grads.cls_head, lr)?;
        sgd_step(&mut self.det_head, &grads.det_head, lr)?;
        Ok(())
    }
}

fn check_shape(grad: ArrayView2<'_, f64>, values: &Array2<f64>) -> Result<()> {
    if grad.dim() != values.dim() {
        return Err(Error::contract(format!(
            "gradient is {:?}, outputs are {:?}",
            grad.dim(),
            values.dim()
        )));
    }
    Ok(())
}

/// Classify with the softmax head, then score with that class's detector.
pub fn predict_from(probs: &[f64], inlier_scores: &[f64]) -> Prediction {
    let class = argmax(probs);
    Prediction {
        class,
        ood_score: 1.0 - inlier_scores[class],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{grad_check, Differentiable, LayerParams};
    use ndarray::{Array1, Array2};
    use rand::Rng;

    fn cfg(mode: HeadMode) -> ModelConfig {
        ModelConfig::new(5, 8, 6, 3, mode)
    }

    #[test]
    fn init_is_deterministic() {
        for mode in [HeadMode::None, HeadMode::Shared, HeadMode::Separate] {
            let a = Model::init(&cfg(mode), 42).unwrap();
            let b = Model::init(&cfg(mode), 42).unwrap();
            assert_eq!(a, b);
            let bits = |m: &Model| m.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a), bits(&b));
        }
    }

    #[test]
    fn parameter_count_matches_hand_sum() {
        // encoder 2->32->32, two 32->64->64 projections, two 64->4 heads
        let m = Model::init(&ModelConfig::new(2, 32, 64, 4, HeadMode::Separate), 0).unwrap();
        let encoder = (2 * 32 + 32) + (32 * 32 + 32);
        let proj = (32 * 64 + 64) + (64 * 64 + 64);
        let head = 64 * 4 + 4;
        assert_eq!(m.param_count(), encoder + 2 * proj + 2 * head);
        assert_eq!(m.param_count(), 14216);
        assert_eq!(m.flatten().len(), 14216);

        let shared = Model::init(&ModelConfig::new(2, 32, 64, 4, HeadMode::Shared), 0).unwrap();
        assert_eq!(shared.param_count(), encoder + proj + 2 * head);
        let none = Model::init(&ModelConfig::new(2, 32, 64, 4, HeadMode::None), 0).unwrap();
        assert_eq!(none.param_count(), encoder + 2 * (32 * 4 + 4));
    }

    #[test]
    fn invalid_configs() {
        let mut c = cfg(HeadMode::Shared);
        c.det_proj_dim = Some(7);
        assert!(matches!(Model::init(&c, 0), Err(Error::Config(_))));
        c.head_mode = HeadMode::Separate;
        assert!(Model::init(&c, 0).is_ok());
        let mut c = cfg(HeadMode::None);
        c.n_classes = 1;
        assert!(Model::init(&c, 0).is_err());
    }

    #[test]
    fn separate_heads_are_independent() {
        let mut m = Model::init(&cfg(HeadMode::Separate), 1).unwrap();
        let det_before = m.proj_det().unwrap().clone();
        for l in m.proj_cls_mut().unwrap().layers_mut() {
            l.weights.fill(9.0);
        }
        assert_eq!(m.proj_det().unwrap(), &det_before);

        let mut shared = Model::init(&cfg(HeadMode::Shared), 1).unwrap();
        for l in shared.proj_cls_mut().unwrap().layers_mut() {
            l.weights.fill(9.0);
        }
        assert_eq!(shared.proj_det().unwrap(), shared.proj_cls().unwrap());
    }

    #[test]
    fn zero_heads_give_neutral_outputs() {
        let mut m = Model::init(&ModelConfig::new(5, 8, 6, 4, HeadMode::Separate), 3).unwrap();
        for l in m.det_head_mut().layers_mut() {
            l.weights.fill(0.0);
            l.bias.fill(0.0);
        }
        for l in m.cls_head_mut().layers_mut() {
            l.weights.fill(0.0);
            l.bias.fill(0.0);
        }
        let (cls, det, _) = m.forward_all(&[0.1, 0.2, -0.3, 0.4, 1.0]).unwrap();
        assert_eq!(det.inlier_scores, vec![0.5; 4]);
        assert_eq!(cls.probs, vec![0.25; 4]);
    }

    #[test]
    fn identity_projections_reproduce_headless_path() {
        let none = Model::init(&ModelConfig::new(4, 6, 6, 3, HeadMode::None), 8).unwrap();
        let identity = || {
            let spec = MlpSpec::relu_stack(vec![6, 6, 6]).unwrap();
            let eye = LayerParams {
                weights: Array2::eye(6),
                bias: Array1::zeros(6),
            };
            Mlp::from_layers(spec, vec![eye.clone(), eye]).unwrap()
        };
        let sep = Model::from_parts(
            HeadMode::Separate,
            none.encoder().clone(),
            Some(identity()),
            Some(identity()),
            none.cls_head().clone(),
            none.det_head().clone(),
        )
        .unwrap();
        let x = [0.3, -1.0, 2.0, 0.7];
        let (a_cls, a_det, _) = none.forward_all(&x).unwrap();
        let (b_cls, b_det, _) = sep.forward_all(&x).unwrap();
        assert_eq!(a_cls.logits, b_cls.logits);
        assert_eq!(a_det.inlier_scores, b_det.inlier_scores);
    }

    #[test]
    fn from_parts_rejects_bad_wiring() {
        let m = Model::init(&cfg(HeadMode::Separate), 0).unwrap();
        let r = Model::from_parts(
            HeadMode::None,
            m.encoder().clone(),
            m.proj_cls().cloned(),
            None,
            m.cls_head().clone(),
            m.det_head().clone(),
        );
        assert!(r.is_err());
    }

    #[test]
    fn prediction_rule() {
        let p = predict_from(&[0.7, 0.2, 0.1], &[0.9, 0.3, 0.4]);
        assert_eq!(p.class, 0);
        assert_close!(p.ood_score, 0.1, 1e-15);
        assert_eq!(predict_from(&[0.5, 0.5], &[0.2, 0.9]).class, 0);
        assert!(!p.is_outlier(0.5));
    }

    #[test]
    fn ood_scores_in_open_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for seed in 0..20 {
            let m = Model::init(&cfg(HeadMode::Separate), seed).unwrap();
            let x: Vec<f64> = (0..5).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let p = m.predict(&x).unwrap();
            assert!(p.ood_score > 0.0 && p.ood_score < 1.0);
            assert!(p.class < 3);
        }
    }

    #[test]
    fn probabilities_sum_to_one() {
        let m = Model::init(&cfg(HeadMode::Shared), 4).unwrap();
        let (cls, _, _) = m.forward_all(&[1.0, 2.0, 3.0, -1.0, 0.0]).unwrap();
        assert_close!(cls.probs.iter().sum::<f64>(), 1.0, 1e-9);
        assert!(cls.probs.iter().all(|&p| p > 0.0 && p < 1.0));
    }

    /// Linear functional of the classifier probs and detector scores on a
    /// fixed batch; enough to exercise every backward path.
    struct Probe {
        model: Model,
        x: Array2<f64>,
        wc: Option<Array2<f64>>,
        wd: Option<Array2<f64>>,
    }

    impl Probe {
        fn at(&self, p: &[f64]) -> Model {
            let mut m = self.model.clone();
            m.assign_flat(p).unwrap();
            m
        }
    }

    impl Differentiable for Probe {
        fn value(&self, p: &[f64]) -> f64 {
            let m = self.at(p);
            let f = m.forward_batch(self.x.view(), Branches::BOTH).unwrap();
            let mut v = 0.0;
            if let Some(w) = &self.wc {
                v += (w * f.classifier_probs()).sum();
            }
            if let Some(w) = &self.wd {
                v += (w * f.detector_scores()).sum();
            }
            v
        }

        fn gradient(&self, p: &[f64]) -> Vec<f64> {
            let m = self.at(p);
            let f = m.forward_batch(self.x.view(), Branches::BOTH).unwrap();
            let mut g = m.zero_grads();
            m.backward(
                &f,
                self.wc.as_ref().map(|w| w.view()),
                self.wd.as_ref().map(|w| w.view()),
                &mut g,
            )
            .unwrap();
            g.flatten()
        }

        fn regime(&self, p: &[f64]) -> Vec<bool> {
            let m = self.at(p);
            let f = m.forward_batch(self.x.view(), Branches::BOTH).unwrap();
            let mut out = Vec::new();
            m.relu_pattern(&f, &mut out);
            out
        }
    }

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn joint_backprop_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for mode in [HeadMode::None, HeadMode::Shared, HeadMode::Separate] {
            let model = Model::init(&cfg(mode), 5).unwrap();
            let probe = Probe {
                x: random(4, 5, &mut rng),
                wc: Some(random(4, 3, &mut rng)),
                wd: Some(random(4, 3, &mut rng)),
                model,
            };
            let params = probe.model.flatten();
            let r = grad_check(&probe, &params, 60, 1e-6, &mut rng);
            assert_eq!(r.probes, 60);
            assert!(r.max_relative_error < 1e-5, "{mode}: {r:?}");
        }
    }

    #[test]
    fn separate_heads_isolate_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = Model::init(&cfg(HeadMode::Separate), 6).unwrap();
        let x = random(5, 5, &mut rng);
        let f = m.forward_batch(x.view(), Branches::BOTH).unwrap();

        let mut g = m.zero_grads();
        m.backward(&f, None, Some(random(5, 3, &mut rng).view()), &mut g).unwrap();
        assert!(g.cls_head.flatten_is_zero());
        assert!(g.proj_cls.as_ref().unwrap().flatten_is_zero());
        assert!(!g.det_head.flatten_is_zero());

        let mut g = m.zero_grads();
        m.backward(&f, Some(random(5, 3, &mut rng).view()), None, &mut g).unwrap();
        assert!(g.det_head.flatten_is_zero());
        assert!(g.proj_det.as_ref().unwrap().flatten_is_zero());
        assert!(!g.encoder.flatten_is_zero());
    }

    #[test]
    fn headless_encoder_gradient_is_sum_of_branches() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = Model::init(&cfg(HeadMode::None), 7).unwrap();
        let x = random(3, 5, &mut rng);
        let (wc, wd) = (random(3, 3, &mut rng), random(3, 3, &mut rng));
        let f = m.forward_batch(x.view(), Branches::BOTH).unwrap();
        let mut both = m.zero_grads();
        m.backward(&f, Some(wc.view()), Some(wd.view()), &mut both).unwrap();
        let mut c = m.zero_grads();
        m.backward(&f, Some(wc.view()), None, &mut c).unwrap();
        let mut d = m.zero_grads();
        m.backward(&f, None, Some(wd.view()), &mut d).unwrap();
        let mut sum = c.encoder.clone();
        sum.add_assign(&d.encoder);
        let (a, b) = (flat(&both.encoder), flat(&sum));
        for (x, y) in a.iter().zip(&b) {
            assert_close!(*x, *y, 1e-12);
        }
    }

    fn flat(g: &GradientBundle) -> Vec<f64> {
        let mut v = Vec::new();
        g.flatten_into(&mut v);
        v
    }

    trait IsZero {
        fn flatten_is_zero(&self) -> bool;
    }

    impl IsZero for GradientBundle {
        fn flatten_is_zero(&self) -> bool {
            flat(self).iter().all(|&v| v == 0.0)
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn argmax_invariant_under_monotone_transform(
                logits in proptest::collection::vec(-10.0f64..10.0, 2..8),
                scale in 0.1f64..5.0,
                shift in -3.0f64..3.0,
            ) {
                let a = argmax(&logits);
                let t: Vec<f64> = logits.iter().map(|&z| (scale * z + shift).exp()).collect();
                prop_assert_eq!(a, argmax(&t));
                let cubed: Vec<f64> = logits.iter().map(|&z| z * z * z).collect();
                prop_assert_eq!(a, argmax(&cubed));
            }
        }
    }
}
