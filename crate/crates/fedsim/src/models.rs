//! Differentiable models and their optimizer.
//!
//! Linear and MLP classifiers with softmax cross-entropy loss, exact
//! reverse-mode gradients, and mini-batch SGD with momentum and L2 decay.
//! Everything is double precision and deterministic for a fixed seed.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// One named tensor: flat values plus shape metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl TensorEntry {
    pub fn element_count(&self) -> usize {
        self.values.len()
    }
}

/// Ordered, named collection of real-valued tensors.
///
/// This is the unit of exchange between server and clients, and of
/// aggregation on the server. Gradients, velocities, and control variates
/// share the same representation.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelParams {
    entries: Vec<TensorEntry>,
}

/// Gradients are shaped exactly like the parameters they refer to.
pub type Gradient = ModelParams;

impl ModelParams {
    pub fn new(entries: Vec<TensorEntry>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for e in &entries {
            if !seen.insert(e.name.clone()) {
                return Err(Error::IncompatibleParams(format!(
                    "duplicate tensor name `{}`",
                    e.name
                )));
            }
            let expected: usize = e.shape.iter().product();
            if expected != e.values.len() {
                return Err(Error::IncompatibleParams(format!(
                    "tensor `{}`: shape {:?} implies {} values, got {}",
                    e.name,
                    e.shape,
                    expected,
                    e.values.len()
                )));
            }
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[TensorEntry] {
        &self.entries
    }

    /// Total number of scalar parameters.
    pub fn num_params(&self) -> usize {
        self.entries.iter().map(|e| e.values.len()).sum()
    }

    /// Compatible means identical names, order, and shapes.
    pub fn compatible_with(&self, other: &ModelParams) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|(a, b)| a.name == b.name && a.shape == b.shape)
    }

    pub fn ensure_compatible(&self, other: &ModelParams) -> Result<()> {
        if self.compatible_with(other) {
            Ok(())
        } else {
            Err(Error::IncompatibleParams(
                "tensor names, order, or shapes differ".into(),
            ))
        }
    }

    pub fn zeros_like(&self) -> ModelParams {
        ModelParams {
            entries: self
                .entries
                .iter()
                .map(|e| TensorEntry {
                    name: e.name.clone(),
                    shape: e.shape.clone(),
                    values: vec![0.0; e.values.len()],
                })
                .collect(),
        }
    }

    /// self *= a
    pub fn scale(&mut self, a: f64) {
        for e in &mut self.entries {
            for v in &mut e.values {
                *v *= a;
            }
        }
    }

    /// self += a * other
    pub fn scaled_add(&mut self, a: f64, other: &ModelParams) -> Result<()> {
        self.ensure_compatible(other)?;
        for (e, o) in self.entries.iter_mut().zip(&other.entries) {
            for (v, w) in e.values.iter_mut().zip(&o.values) {
                *v += a * w;
            }
        }
        Ok(())
    }

    /// self - other
    pub fn sub(&self, other: &ModelParams) -> Result<ModelParams> {
        self.ensure_compatible(other)?;
        let mut out = self.clone();
        out.scaled_add(-1.0, other)?;
        Ok(out)
    }

    /// Elementwise combine into a new collection with the same layout.
    pub fn zip_map(
        &self,
        other: &ModelParams,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<ModelParams> {
        self.ensure_compatible(other)?;
        let entries = self
            .entries
            .iter()
            .zip(&other.entries)
            .map(|(a, b)| TensorEntry {
                name: a.name.clone(),
                shape: a.shape.clone(),
                values: a
                    .values
                    .iter()
                    .zip(&b.values)
                    .map(|(&x, &y)| f(x, y))
                    .collect(),
            })
            .collect();
        Ok(ModelParams { entries })
    }

    pub fn squared_distance(&self, other: &ModelParams) -> Result<f64> {
        self.ensure_compatible(other)?;
        let mut acc = 0.0;
        for (e, o) in self.entries.iter().zip(&other.entries) {
            for (v, w) in e.values.iter().zip(&o.values) {
                let d = v - w;
                acc += d * d;
            }
        }
        Ok(acc)
    }

    /// All scalar values in entry order.
    pub fn flat_values(&self) -> impl Iterator<Item = f64> + '_ {
        self.entries.iter().flat_map(|e| e.values.iter().copied())
    }

    pub fn flat_get(&self, mut index: usize) -> f64 {
        for e in &self.entries {
            if index < e.values.len() {
                return e.values[index];
            }
            index -= e.values.len();
        }
        panic!("flat index out of range");
    }

    pub fn flat_set(&mut self, mut index: usize, value: f64) {
        for e in &mut self.entries {
            if index < e.values.len() {
                e.values[index] = value;
                return;
            }
            index -= e.values.len();
        }
        panic!("flat index out of range");
    }

    fn tensor_view(&self, index: usize) -> ArrayView2<'_, f64> {
        let e = &self.entries[index];
        ArrayView2::from_shape((e.shape[0], e.shape[1]), &e.values)
            .expect("weight entry has matrix shape")
    }
}

/// Maximum absolute difference over all coordinates of two compatible
/// collections. Handy for trajectory-equality checks.
pub fn max_abs_diff(a: &ModelParams, b: &ModelParams) -> Result<f64> {
    a.ensure_compatible(b)?;
    Ok(a.flat_values()
        .zip(b.flat_values())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Linear,
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

/// Feed-forward classifier shape: sizes run input, hidden..., output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelArchitecture {
    pub kind: ModelKind,
    pub layer_sizes: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
}

impl ModelArchitecture {
    pub fn new(kind: ModelKind, layer_sizes: Vec<usize>, activation: Activation) -> Result<Self> {
        let arch = Self {
            kind,
            layer_sizes,
            activation,
        };
        arch.validate()?;
        Ok(arch)
    }

    pub fn linear(input: usize, output: usize) -> Self {
        Self::new(ModelKind::Linear, vec![input, output], Activation::Relu)
            .expect("two positive sizes")
    }

    pub fn mlp(layer_sizes: Vec<usize>, activation: Activation) -> Result<Self> {
        Self::new(ModelKind::Mlp, layer_sizes, activation)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 {
            return Err(Error::config(
                "model.layer_sizes",
                "need at least input and output sizes",
            ));
        }
        if self.layer_sizes.contains(&0) {
            return Err(Error::config("model.layer_sizes", "sizes must be positive"));
        }
        if self.kind == ModelKind::Linear && self.layer_sizes.len() != 2 {
            return Err(Error::config(
                "model.layer_sizes",
                "a linear model has exactly [input, output] sizes",
            ));
        }
        Ok(())
    }

    pub fn input_size(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_size(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    fn layer_count(&self) -> usize {
        self.layer_sizes.len() - 1
    }
}

/// First-order optimizer settings for local training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerSpec {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub momentum: f64,
}

impl Default for OptimizerSpec {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            weight_decay: 0.0,
            momentum: 0.0,
        }
    }
}

impl OptimizerSpec {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate.is_nan() || self.learning_rate < 0.0 {
            return Err(Error::config(
                "optimizer.learning_rate",
                "must be non-negative",
            ));
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return Err(Error::config(
                "optimizer.weight_decay",
                "must be non-negative",
            ));
        }
        if self.momentum.is_nan() || self.momentum < 0.0 || self.momentum >= 1.0 {
            return Err(Error::config("optimizer.momentum", "must be in [0, 1)"));
        }
        Ok(())
    }
}

/// Extra loss term folded into `loss_and_grad`.
///
/// Returns the loss add-on and a gradient add-on shaped like the params.
pub trait Regularizer {
    fn loss_and_grad(&self, params: &ModelParams) -> (f64, ModelParams);
}

/// Quadratic pull toward a reference point:
/// (c/2)·‖θ − ref‖² with gradient c·(θ − ref).
pub struct ProximalTerm {
    pub reference: ModelParams,
    pub coefficient: f64,
}

impl Regularizer for ProximalTerm {
    fn loss_and_grad(&self, params: &ModelParams) -> (f64, ModelParams) {
        let mut grad = params
            .sub(&self.reference)
            .expect("proximal reference matches params");
        let loss = 0.5 * self.coefficient * grad.flat_values().map(|d| d * d).sum::<f64>();
        grad.scale(self.coefficient);
        (loss, grad)
    }
}

/// Glorot-uniform weights, zero biases. Deterministic per seed.
pub fn init_params(arch: &ModelArchitecture, seed: u64) -> Result<ModelParams> {
    arch.validate()?;
    let mut rng = rng::stream(seed, "model-init");
    let mut entries = Vec::new();
    for l in 0..arch.layer_count() {
        let fan_in = arch.layer_sizes[l];
        let fan_out = arch.layer_sizes[l + 1];
        let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let values: Vec<f64> = (0..fan_in * fan_out)
            .map(|_| rng.gen_range(-s..s))
            .collect();
        entries.push(TensorEntry {
            name: format!("layer{l}.weight"),
            shape: vec![fan_out, fan_in],
            values,
        });
        entries.push(TensorEntry {
            name: format!("layer{l}.bias"),
            shape: vec![fan_out],
            values: vec![0.0; fan_out],
        });
    }
    ModelParams::new(entries)
}

fn check_forward_shapes(
    arch: &ModelArchitecture,
    params: &ModelParams,
    x: &ArrayView2<f64>,
) -> Result<()> {
    if x.ncols() != arch.input_size() {
        return Err(Error::IncompatibleParams(format!(
            "input has {} features, architecture expects {}",
            x.ncols(),
            arch.input_size()
        )));
    }
    if params.entries.len() != 2 * arch.layer_count() {
        return Err(Error::IncompatibleParams(format!(
            "architecture implies {} tensors, params hold {}",
            2 * arch.layer_count(),
            params.entries.len()
        )));
    }
    Ok(())
}

fn apply_activation(z: &mut Array2<f64>, act: Activation) {
    match act {
        Activation::Relu => z.mapv_inplace(|v| if v > 0.0 { v } else { 0.0 }),
        Activation::Tanh => z.mapv_inplace(f64::tanh),
    }
}

/// Activations per layer, input first; last element holds the logits.
fn forward_cached(
    arch: &ModelArchitecture,
    params: &ModelParams,
    x: &ArrayView2<f64>,
) -> Result<Vec<Array2<f64>>> {
    check_forward_shapes(arch, params, x)?;
    let mut acts: Vec<Array2<f64>> = vec![x.to_owned()];
    for l in 0..arch.layer_count() {
        let w = params.tensor_view(2 * l);
        let b = &params.entries[2 * l + 1].values;
        let bias = Array1::from_vec(b.clone());
        let mut z = acts.last().unwrap().dot(&w.t()) + &bias;
        if l + 1 < arch.layer_count() {
            apply_activation(&mut z, arch.activation);
        }
        acts.push(z);
    }
    Ok(acts)
}

/// Batch of logits, one row per sample.
pub fn forward(
    arch: &ModelArchitecture,
    params: &ModelParams,
    x: &ArrayView2<f64>,
) -> Result<Array2<f64>> {
    Ok(forward_cached(arch, params, x)?.pop().unwrap())
}

/// Row-wise softmax with a log-sum-exp shift; also returns per-row logsumexp.
fn softmax_rows(logits: &Array2<f64>) -> (Array2<f64>, Vec<f64>) {
    let mut probs = logits.clone();
    let mut lse = Vec::with_capacity(logits.nrows());
    for mut row in probs.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
        let log_sum = max + sum.ln();
        lse.push(log_sum);
        row.mapv_inplace(|v| (v - max).exp() / sum);
    }
    (probs, lse)
}

/// Mean cross-entropy over the batch and its exact gradient.
///
/// `extra` contributes an additional loss term and gradient (e.g. a
/// proximal penalty); the core stays agnostic of where it comes from.
pub fn loss_and_grad(
    arch: &ModelArchitecture,
    params: &ModelParams,
    x: &ArrayView2<f64>,
    y: &[usize],
    extra: Option<&dyn Regularizer>,
) -> Result<(f64, Gradient)> {
    if x.nrows() != y.len() {
        return Err(Error::Precondition(format!(
            "{} feature rows but {} labels",
            x.nrows(),
            y.len()
        )));
    }
    if x.nrows() == 0 {
        return Err(Error::Precondition("empty batch".into()));
    }
    let n_classes = arch.output_size();
    if let Some(&bad) = y.iter().find(|&&l| l >= n_classes) {
        return Err(Error::Precondition(format!(
            "label {bad} out of range for {n_classes} classes"
        )));
    }

    let acts = forward_cached(arch, params, x)?;
    let logits = acts.last().unwrap();
    let batch = x.nrows() as f64;
    let (probs, lse) = softmax_rows(logits);

    let mut loss = 0.0;
    for (i, &label) in y.iter().enumerate() {
        loss += lse[i] - logits[[i, label]];
    }
    loss /= batch;

    // dZ at the output: (softmax - onehot) / batch
    let mut dz = probs;
    for (i, &label) in y.iter().enumerate() {
        dz[[i, label]] -= 1.0;
    }
    dz.mapv_inplace(|v| v / batch);

    let mut grad_entries = vec![None; params.entries.len()];
    for l in (0..arch.layer_count()).rev() {
        let a_prev = &acts[l];
        let gw = dz.t().dot(a_prev);
        let gb = dz.sum_axis(Axis(0));
        grad_entries[2 * l] = Some(TensorEntry {
            name: params.entries[2 * l].name.clone(),
            shape: params.entries[2 * l].shape.clone(),
            values: gw.into_iter().collect(),
        });
        grad_entries[2 * l + 1] = Some(TensorEntry {
            name: params.entries[2 * l + 1].name.clone(),
            shape: params.entries[2 * l + 1].shape.clone(),
            values: gb.into_iter().collect(),
        });
        if l > 0 {
            let w = params.tensor_view(2 * l);
            let mut da = dz.dot(&w);
            match arch.activation {
                Activation::Relu => {
                    // a == z on the active side of relu
                    da.zip_mut_with(&acts[l], |g, &a| {
                        if a <= 0.0 {
                            *g = 0.0;
                        }
                    });
                }
                Activation::Tanh => {
                    da.zip_mut_with(&acts[l], |g, &a| *g *= 1.0 - a * a);
                }
            }
            dz = da;
        }
    }
    let mut grad = ModelParams::new(grad_entries.into_iter().map(Option::unwrap).collect())?;

    if let Some(reg) = extra {
        let (extra_loss, extra_grad) = reg.loss_and_grad(params);
        loss += extra_loss;
        grad.scaled_add(1.0, &extra_grad)?;
    }
    Ok((loss, grad))
}

/// One SGD step with momentum and L2 decay:
/// v ← m·v + g + wd·θ, then θ ← θ − lr·v.
pub fn sgd_step(
    params: &mut ModelParams,
    grad: &Gradient,
    opt: &OptimizerSpec,
    velocity: &mut ModelParams,
) -> Result<()> {
    params.ensure_compatible(grad)?;
    params.ensure_compatible(velocity)?;
    for ((p, g), v) in params
        .entries
        .iter_mut()
        .zip(&grad.entries)
        .zip(&mut velocity.entries)
    {
        for ((pv, gv), vv) in p.values.iter_mut().zip(&g.values).zip(&mut v.values) {
            *vv = opt.momentum * *vv + gv + opt.weight_decay * *pv;
            *pv -= opt.learning_rate * *vv;
        }
    }
    Ok(())
}

/// Argmax over logits; ties break to the lowest class index.
pub fn predict(
    arch: &ModelArchitecture,
    params: &ModelParams,
    x: &ArrayView2<f64>,
) -> Result<Vec<usize>> {
    let logits = forward(arch, params, x)?;
    Ok(logits
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            let mut best_v = row[0];
            for (i, &v) in row.iter().enumerate().skip(1) {
                if v > best_v {
                    best = i;
                    best_v = v;
                }
            }
            best
        })
        .collect())
}
