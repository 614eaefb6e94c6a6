//! Dense-network numerics: affine + activation stacks with exact backprop,
//! plain SGD, a cosine learning-rate schedule and a finite-difference
//! gradient verifier.
//!
//! Everything runs in `f64`. Batches are row-major `(batch, dim)` matrices;
//! a single sample is a batch of one.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Shape of a layer stack: `layer_dims[i] -> layer_dims[i + 1]` followed by
/// `activations[i]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    layer_dims: Vec<usize>,
    activations: Vec<Activation>,
}

impl MlpSpec {
    pub fn new(layer_dims: Vec<usize>, activations: Vec<Activation>) -> Result<Self> {
        if layer_dims.len() < 2 {
            return Err(Error::config("an MLP needs at least one layer"));
        }
        if activations.len() != layer_dims.len() - 1 {
            return Err(Error::config(format!(
                "{} activations given for {} layers",
                activations.len(),
                layer_dims.len() - 1
            )));
        }
        if layer_dims.contains(&0) {
            return Err(Error::config("layer dimensions must be positive"));
        }
        Ok(Self {
            layer_dims,
            activations,
        })
    }

    /// Hidden layers use relu, the last layer is identity.
    pub fn relu_stack(layer_dims: Vec<usize>) -> Result<Self> {
        let n = layer_dims.len().saturating_sub(1);
        let activations = (0..n)
            .map(|i| {
                if i + 1 == n {
                    Activation::Identity
                } else {
                    Activation::Relu
                }
            })
            .collect();
        Self::new(layer_dims, activations)
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn n_layers(&self) -> usize {
        self.activations.len()
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }
}

/// Weights are `(out_dim, in_dim)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl LayerParams {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            weights: Array2::zeros((out_dim, in_dim)),
            bias: Array1::zeros(out_dim),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.nrows()
    }

    fn is_finite(&self) -> bool {
        self.weights.iter().chain(self.bias.iter()).all(|v| v.is_finite())
    }
}

/// Per-layer gradients, shape-congruent with the parameters of one [`Mlp`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub layers: Vec<LayerParams>,
}

impl GradientBundle {
    pub fn zeros_like(mlp: &Mlp) -> Self {
        Self {
            layers: mlp
                .layers
                .iter()
                .map(|l| LayerParams::zeros(l.in_dim(), l.out_dim()))
                .collect(),
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for l in &mut self.layers {
            l.weights *= factor;
            l.bias *= factor;
        }
    }

    pub fn add_assign(&mut self, other: &GradientBundle) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights += &b.weights;
            a.bias += &b.bias;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(LayerParams::is_finite)
    }

    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        for l in &self.layers {
            out.extend(l.weights.iter());
            out.extend(l.bias.iter());
        }
    }
}

/// Cached activations from a forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    generation: u64,
    dims: Vec<usize>,
    /// Input to each layer.
    inputs: Vec<Array2<f64>>,
    /// Pre-activation of each layer.
    pre: Vec<Array2<f64>>,
}

impl Tape {
    pub fn batch_size(&self) -> usize {
        self.inputs[0].nrows()
    }

    /// Smallest |pre-activation| over every relu unit in the batch.
    pub fn relu_margin(&self, spec: &MlpSpec) -> f64 {
        let mut margin = f64::INFINITY;
        for (z, act) in self.pre.iter().zip(spec.activations()) {
            if *act == Activation::Relu {
                for v in z.iter() {
                    margin = margin.min(v.abs());
                }
            }
        }
        margin
    }

    /// On/off pattern of every relu unit.
    pub fn relu_pattern(&self, spec: &MlpSpec, out: &mut Vec<bool>) {
        for (z, act) in self.pre.iter().zip(spec.activations()) {
            if *act == Activation::Relu {
                out.extend(z.iter().map(|&v| v > 0.0));
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Mlp {
    spec: MlpSpec,
    layers: Vec<LayerParams>,
    /// Bumped on every parameter update so stale tapes are detected.
    #[serde(skip)]
    generation: u64,
}

impl PartialEq for Mlp {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec && self.layers == other.layers
    }
}

impl Mlp {
    /// Glorot-uniform weights, zero biases.
    pub fn init<R: Rng + ?Sized>(spec: MlpSpec, rng: &mut R) -> Self {
        let layers = spec
            .layer_dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let dist = Uniform::new_inclusive(-limit, limit);
                let weights = Array2::from_shape_fn((fan_out, fan_in), |_| dist.sample(rng));
                LayerParams {
                    weights,
                    bias: Array1::zeros(fan_out),
                }
            })
            .collect();
        Self {
            spec,
            layers,
            generation: 0,
        }
    }

    pub fn zeros(spec: MlpSpec) -> Self {
        let layers = spec
            .layer_dims
            .windows(2)
            .map(|w| LayerParams::zeros(w[0], w[1]))
            .collect();
        Self {
            spec,
            layers,
            generation: 0,
        }
    }

    pub fn from_layers(spec: MlpSpec, layers: Vec<LayerParams>) -> Result<Self> {
        if layers.len() != spec.n_layers() {
            return Err(Error::config(format!(
                "spec has {} layers, got {}",
                spec.n_layers(),
                layers.len()
            )));
        }
        for (i, (l, w)) in layers.iter().zip(spec.layer_dims.windows(2)).enumerate() {
            if l.in_dim() != w[0] || l.out_dim() != w[1] || l.bias.len() != w[1] {
                return Err(Error::config(format!(
                    "layer {i}: expected {}x{} weights, got {}x{} (bias {})",
                    w[1],
                    w[0],
                    l.out_dim(),
                    l.in_dim(),
                    l.bias.len()
                )));
            }
            if !l.is_finite() {
                return Err(Error::Numeric(format!("layer {i} has non-finite entries")));
            }
        }
        Ok(Self {
            spec,
            layers,
            generation: 0,
        })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[LayerParams] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [LayerParams] {
        self.generation += 1;
        &mut self.layers
    }

    pub fn param_count(&self) -> usize {
        self.spec.param_count()
    }

    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        for l in &self.layers {
            out.extend(l.weights.iter());
            out.extend(l.bias.iter());
        }
    }

    /// Overwrites all parameters from `flat`, returning the unread tail.
    pub fn assign_flat<'a>(&mut self, mut flat: &'a [f64]) -> Result<&'a [f64]> {
        if flat.len() < self.param_count() {
            return Err(Error::contract("flat parameter vector too short"));
        }
        self.generation += 1;
        for l in &mut self.layers {
            for w in l.weights.iter_mut().chain(l.bias.iter_mut()) {
                *w = flat[0];
                flat = &flat[1..];
            }
        }
        Ok(flat)
    }

    /// Single-sample forward pass.
    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, Tape)> {
        let view = ArrayView2::from_shape((1, x.len()), x)
            .map_err(|e| Error::contract(e.to_string()))?;
        let (out, tape) = self.forward_batch(view)?;
        Ok((out.into_raw_vec_and_offset().0, tape))
    }

    pub fn forward_batch(&self, x: ArrayView2<'_, f64>) -> Result<(Array2<f64>, Tape)> {
        if x.ncols() != self.spec.input_dim() {
            return Err(Error::config(format!(
                "input has dimension {}, network expects {}",
                x.ncols(),
                self.spec.input_dim()
            )));
        }
        let n = self.layers.len();
        let mut inputs = Vec::with_capacity(n);
        let mut pre = Vec::with_capacity(n);
        let mut h = x.to_owned();
        for (layer, act) in self.layers.iter().zip(&self.spec.activations) {
            let mut z = h.dot(&layer.weights.t());
            z += &layer.bias;
            let out = z.mapv(|v| act.apply(v));
            inputs.push(h);
            pre.push(z);
            h = out;
        }
        let tape = Tape {
            generation: self.generation,
            dims: self.spec.layer_dims.clone(),
            inputs,
            pre,
        };
        Ok((h, tape))
    }

    /// Gradients of `sum(output * upstream)` with respect to the parameters
    /// and the input.
    pub fn backward(
        &self,
        tape: &Tape,
        upstream: ArrayView2<'_, f64>,
    ) -> Result<(GradientBundle, Array2<f64>)> {
        let mut grads = GradientBundle::zeros_like(self);
        let dx = self.backward_accumulate(tape, upstream, &mut grads)?;
        Ok((grads, dx))
    }

    /// Like [`Mlp::backward`] but adds into `grads`.
    pub fn backward_accumulate(
        &self,
        tape: &Tape,
        upstream: ArrayView2<'_, f64>,
        grads: &mut GradientBundle,
    ) -> Result<Array2<f64>> {
        if tape.generation != self.generation || tape.dims != self.spec.layer_dims {
            return Err(Error::contract(
                "tape was recorded against different parameters",
            ));
        }
        if upstream.nrows() != tape.batch_size() || upstream.ncols() != self.spec.output_dim() {
            return Err(Error::contract(format!(
                "upstream gradient is {}x{}, expected {}x{}",
                upstream.nrows(),
                upstream.ncols(),
                tape.batch_size(),
                self.spec.output_dim()
            )));
        }
        if grads.layers.len() != self.layers.len() {
            return Err(Error::contract("gradient bundle does not match network"));
        }
        let mut d_out = upstream.to_owned();
        for i in (0..self.layers.len()).rev() {
            let act = self.spec.activations[i];
            let mut dz = d_out;
            if act != Activation::Identity {
                dz.zip_mut_with(&tape.pre[i], |d, &z| *d *= act.derivative(z));
            }
            let g = &mut grads.layers[i];
            ndarray::linalg::general_mat_mul(1.0, &dz.t(), &tape.inputs[i], 1.0, &mut g.weights);
            g.bias += &dz.sum_axis(Axis(0));
            d_out = dz.dot(&self.layers[i].weights);
        }
        Ok(d_out)
    }
}

/// `p <- p - lr * g` for every parameter. Fails without touching `params` when
/// any gradient is non-finite.
pub fn sgd_step(params: &mut Mlp, grads: &GradientBundle, lr: f64) -> Result<()> {
    if !(lr >= 0.0) || !lr.is_finite() {
        return Err(Error::config(format!("learning rate {lr} is not a non-negative number")));
    }
    if grads.layers.len() != params.layers.len()
        || grads
            .layers
            .iter()
            .zip(&params.layers)
            .any(|(g, p)| g.weights.dim() != p.weights.dim() || g.bias.len() != p.bias.len())
    {
        return Err(Error::contract("gradient shapes do not match parameters"));
    }
    if !grads.is_finite() {
        return Err(Error::Numeric("non-finite gradient".into()));
    }
    for (p, g) in params.layers_mut().iter_mut().zip(&grads.layers) {
        p.weights.scaled_add(-lr, &g.weights);
        p.bias.scaled_add(-lr, &g.bias);
    }
    Ok(())
}

/// `eta0 * cos(7 pi step / (16 total_steps))`.
pub fn cosine_lr(eta0: f64, step: u64, total_steps: u64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::contract("total_steps must be positive"));
    }
    if step > total_steps {
        return Err(Error::contract(format!(
            "step {step} is past the end of the schedule ({total_steps})"
        )));
    }
    let progress = step as f64 / total_steps as f64;
    Ok(eta0 * (7.0 * std::f64::consts::PI * progress / 16.0).cos())
}

/// A scalar function of a flat parameter vector with an analytic gradient.
pub trait Differentiable {
    fn value(&self, params: &[f64]) -> f64;

    fn gradient(&self, params: &[f64]) -> Vec<f64>;

    /// Discrete state that must not change across a finite-difference probe
    /// (relu on/off pattern, selection masks). Probes whose endpoints land in
    /// a different regime are redrawn.
    fn regime(&self, _params: &[f64]) -> Vec<bool> {
        Vec::new()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub probes: usize,
    pub rejected_probes: usize,
}

/// Compares the analytic directional derivative `g . d` with
/// `(L(p + eps d) - L(p - eps d)) / 2 eps` over random unit directions.
///
/// Relative error is `|a - n| / max(|a| + |n|, 1e-8)`, so a flat function
/// reports zero rather than 0/0.
pub fn grad_check<F: Differentiable + ?Sized, R: Rng + ?Sized>(
    f: &F,
    params: &[f64],
    n_probes: usize,
    eps: f64,
    rng: &mut R,
) -> GradCheckReport {
    let grad = f.gradient(params);
    let base_regime = f.regime(params);
    let mut worst: f64 = 0.0;
    let mut done = 0;
    let mut rejected = 0;
    let mut plus = vec![0.0; params.len()];
    let mut minus = vec![0.0; params.len()];
    while done < n_probes {
        let mut dir: Vec<f64> = (0..params.len())
            .map(|_| StandardNormal.sample(rng))
            .collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        dir.iter_mut().for_each(|v| *v /= norm);
        for i in 0..params.len() {
            plus[i] = params[i] + eps * dir[i];
            minus[i] = params[i] - eps * dir[i];
        }
        if !base_regime.is_empty()
            && (f.regime(&plus) != base_regime || f.regime(&minus) != base_regime)
        {
            rejected += 1;
            // A function sitting exactly on a kink would loop forever.
            if rejected > 100 * n_probes.max(1) {
                break;
            }
            continue;
        }
        let numeric = (f.value(&plus) - f.value(&minus)) / (2.0 * eps);
        let analytic: f64 = grad.iter().zip(&dir).map(|(g, d)| g * d).sum();
        let rel = (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8);
        worst = worst.max(rel);
        done += 1;
    }
    GradCheckReport {
        max_relative_error: worst,
        probes: done,
        rejected_probes: rejected,
    }
}
