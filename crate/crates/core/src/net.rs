//! Network representation and noisy forward execution.
//!
//! Fully-connected layers run through the homodyne matrix-vector models,
//! convolutional layers through patching plus the homodyne GEMM; noise is
//! injected into the pre-activation and the nonlinearity is applied
//! afterwards in exact (electronic-domain) arithmetic. Pooling, flattening
//! and the optional bias add are exact bookkeeping and charge no photons.

use ndarray::{Array1, Array3, ArrayView1, Axis};
use rayon::prelude::*;

use crate::conv::{conv_mac_count, conv_via_gemm, PatchGeometry};
use crate::error::{Error, Result};
use crate::noise::{homodyne_mv_gaussian, homodyne_mv_poisson, NoiseConfig, NoiseMode, PhotonBudget};
use crate::rng::Stream;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    ReLU,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(&self, v: f64) -> f64 {
        match self {
            Activation::ReLU => v.max(0.0),
            Activation::Identity => v,
        }
    }

    /// Derivative evaluated at a pre-activation value (ReLU′(0) := 0).
    #[inline]
    pub fn derivative(&self, pre: f64) -> f64 {
        match self {
            Activation::ReLU => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Shape of a value flowing between layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Flat(usize),
    Image { w: usize, h: usize, c: usize },
}

impl Shape {
    pub fn len(&self) -> usize {
        match *self {
            Shape::Flat(n) => n,
            Shape::Image { w, h, c } => w * h * c,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One layer of the network.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    FullyConnected {
        /// N′×N weight matrix.
        weights: ndarray::Array2<f64>,
        /// Optional per-output bias, added exactly (electronic domain).
        bias: Option<Array1<f64>>,
        activation: Activation,
    },
    Conv2D {
        /// K_x×K_y×C′×C kernel.
        kernel: ndarray::Array4<f64>,
        /// Optional per-output-channel bias.
        bias: Option<Array1<f64>>,
        stride: (usize, usize),
        activation: Activation,
    },
    MaxPool {
        window: (usize, usize),
        stride: (usize, usize),
    },
    Flatten,
}

impl LayerSpec {
    /// Layers that run on the optical GEMM and therefore draw noise.
    pub fn is_noisy(&self) -> bool {
        matches!(self, LayerSpec::FullyConnected { .. } | LayerSpec::Conv2D { .. })
    }

    /// Output shape for a given input shape, validating compatibility.
    pub fn output_shape(&self, input: &Shape, layer: usize) -> Result<Shape> {
        let chain_err = |reason: String| Error::ShapeChain { layer, reason };
        match self {
            LayerSpec::FullyConnected { weights, bias, .. } => {
                let n = input.len();
                if weights.ncols() != n {
                    return Err(chain_err(format!(
                        "weights expect {} inputs, got {n}",
                        weights.ncols()
                    )));
                }
                if let Some(b) = bias {
                    if b.len() != weights.nrows() {
                        return Err(chain_err(format!(
                            "bias length {} != {} outputs",
                            b.len(),
                            weights.nrows()
                        )));
                    }
                }
                if !matches!(input, Shape::Flat(_)) {
                    return Err(chain_err(
                        "fully-connected layer needs a flat input (insert Flatten)".into(),
                    ));
                }
                Ok(Shape::Flat(weights.nrows()))
            }
            LayerSpec::Conv2D { kernel, bias, stride, .. } => {
                let (k_x, k_y, c_out, c_in) = kernel.dim();
                let Shape::Image { w, h, c } = *input else {
                    return Err(chain_err("conv layer needs an image input".into()));
                };
                if c != c_in {
                    return Err(chain_err(format!(
                        "kernel expects {c_in} channels, input has {c}"
                    )));
                }
                if let Some(b) = bias {
                    if b.len() != c_out {
                        return Err(chain_err(format!(
                            "bias length {} != {c_out} output channels",
                            b.len()
                        )));
                    }
                }
                let geom = PatchGeometry::new((w, h, c), (k_x, k_y), *stride)
                    .map_err(|e| chain_err(e.to_string()))?;
                Ok(Shape::Image { w: geom.w_out, h: geom.h_out, c: c_out })
            }
            LayerSpec::MaxPool { window, stride } => {
                let Shape::Image { w, h, c } = *input else {
                    return Err(chain_err("max-pool layer needs an image input".into()));
                };
                if stride.0 == 0 || stride.1 == 0 || window.0 == 0 || window.1 == 0 {
                    return Err(chain_err("pool window and stride must be >= 1".into()));
                }
                if window.0 > w || window.1 > h {
                    return Err(chain_err(format!(
                        "pool window {}x{} larger than image {w}x{h}",
                        window.0, window.1
                    )));
                }
                Ok(Shape::Image {
                    w: (w - window.0) / stride.0 + 1,
                    h: (h - window.1) / stride.1 + 1,
                    c,
                })
            }
            LayerSpec::Flatten => Ok(Shape::Flat(input.len())),
        }
    }

    /// MACs executed by this layer for the given input shape (0 for exact
    /// bookkeeping layers).
    pub fn mac_count(&self, input: &Shape) -> u64 {
        match self {
            LayerSpec::FullyConnected { weights, .. } => {
                (weights.nrows() * weights.ncols()) as u64
            }
            LayerSpec::Conv2D { kernel, stride, .. } => {
                let (k_x, k_y, c_out, _) = kernel.dim();
                let Shape::Image { w, h, c } = *input else { return 0 };
                match PatchGeometry::new((w, h, c), (k_x, k_y), *stride) {
                    Ok(geom) => conv_mac_count(&geom, c_out),
                    Err(_) => 0,
                }
            }
            _ => 0,
        }
    }
}

/// Ordered layer stack with declared input shape and class count.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    pub layers: Vec<LayerSpec>,
    pub input_shape: Shape,
    pub class_count: usize,
}

impl NetworkSpec {
    /// Validate the whole shape chain; returns the output shape after each
    /// layer. The final output must be flat with `class_count` entries.
    pub fn validate(&self) -> Result<Vec<Shape>> {
        let mut shape = self.input_shape;
        let mut shapes = Vec::with_capacity(self.layers.len());
        for (idx, layer) in self.layers.iter().enumerate() {
            shape = layer.output_shape(&shape, idx)?;
            shapes.push(shape);
        }
        match shape {
            Shape::Flat(n) if n == self.class_count => Ok(shapes),
            other => Err(Error::ShapeChain {
                layer: self.layers.len(),
                reason: format!(
                    "final output {other:?} does not match class count {}",
                    self.class_count
                ),
            }),
        }
    }

    pub fn noisy_layer_count(&self) -> usize {
        self.layers.iter().filter(|l| l.is_noisy()).count()
    }

    /// MACs per layer for one forward pass.
    pub fn mac_counts(&self) -> Result<Vec<u64>> {
        let mut shape = self.input_shape;
        let mut counts = Vec::with_capacity(self.layers.len());
        for (idx, layer) in self.layers.iter().enumerate() {
            counts.push(layer.mac_count(&shape));
            shape = layer.output_shape(&shape, idx)?;
        }
        Ok(counts)
    }
}

/// Per-noisy-layer photon allocation. `None` marks a layer that runs in
/// exact arithmetic. With `ablation_layer` set, only that noisy layer keeps
/// its budget and every other layer is exact — the single-layer noise
/// experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNoisePolicy {
    budgets: Vec<Option<PhotonBudget>>,
    ablation_layer: Option<usize>,
}

impl LayerNoisePolicy {
    pub fn new(budgets: Vec<Option<PhotonBudget>>, ablation_layer: Option<usize>) -> Self {
        LayerNoisePolicy { budgets, ablation_layer }
    }

    /// Same budget in every noisy layer.
    pub fn uniform(budget: PhotonBudget, noisy_layers: usize) -> Self {
        LayerNoisePolicy { budgets: vec![Some(budget); noisy_layers], ablation_layer: None }
    }

    pub fn noiseless(noisy_layers: usize) -> Self {
        LayerNoisePolicy { budgets: vec![None; noisy_layers], ablation_layer: None }
    }

    /// Budget only in noisy layer `layer` (0-based among noisy layers).
    pub fn ablated(budget: PhotonBudget, layer: usize, noisy_layers: usize) -> Self {
        LayerNoisePolicy {
            budgets: vec![Some(budget); noisy_layers],
            ablation_layer: Some(layer),
        }
    }

    pub fn check_length(&self, net: &NetworkSpec) -> Result<()> {
        let expected = net.noisy_layer_count();
        if self.budgets.len() != expected {
            return Err(Error::PolicyLength { given: self.budgets.len(), expected });
        }
        if let Some(a) = self.ablation_layer {
            if a >= expected {
                return Err(Error::InvalidParameter(format!(
                    "ablation layer {a} out of range ({expected} noisy layers)"
                )));
            }
        }
        Ok(())
    }

    /// Effective budget for the `idx`-th noisy layer; `None` means exact.
    pub fn effective(&self, idx: usize) -> Option<PhotonBudget> {
        match self.ablation_layer {
            Some(a) if a != idx => None,
            _ => self.budgets.get(idx).copied().flatten(),
        }
    }
}

/// A value flowing through the network.
#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Flat(Array1<f64>),
    Image(Array3<f64>),
}

impl Value {
    pub fn shape(&self) -> Shape {
        match self {
            Value::Flat(v) => Shape::Flat(v.len()),
            Value::Image(img) => {
                let (w, h, c) = img.dim();
                Shape::Image { w, h, c }
            }
        }
    }

    /// Flatten to the frozen (x, y, c)-row-major order.
    fn into_flat(self) -> Array1<f64> {
        match self {
            Value::Flat(v) => v,
            Value::Image(img) => {
                let len = img.len();
                img.into_shape_with_order(len).expect("contiguous image")
            }
        }
    }
}

/// Max-pool an image, also reporting for every output cell the flat input
/// index (x·H·C-order) that won, for gradient routing. Ties go to the
/// first window position in (x, y) scan order.
pub fn max_pool_with_argmax(
    image: &Array3<f64>,
    window: (usize, usize),
    stride: (usize, usize),
) -> (Array3<f64>, Array3<usize>) {
    let (w, h, c) = image.dim();
    let w_out = (w - window.0) / stride.0 + 1;
    let h_out = (h - window.1) / stride.1 + 1;
    let mut out = Array3::zeros((w_out, h_out, c));
    let mut arg = Array3::zeros((w_out, h_out, c));
    for ox in 0..w_out {
        for oy in 0..h_out {
            for ch in 0..c {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0usize;
                for i in 0..window.0 {
                    for j in 0..window.1 {
                        let (x, y) = (ox * stride.0 + i, oy * stride.1 + j);
                        let v = image[[x, y, ch]];
                        if v > best {
                            best = v;
                            best_idx = (x * h + y) * c + ch;
                        }
                    }
                }
                out[[ox, oy, ch]] = best;
                arg[[ox, oy, ch]] = best_idx;
            }
        }
    }
    (out, arg)
}

fn dispatch_mv(
    weights: &ndarray::Array2<f64>,
    x: ArrayView1<f64>,
    budget: Option<PhotonBudget>,
    cfg: &NoiseConfig,
    stream: &Stream,
) -> Result<(Array1<f64>, f64)> {
    match (budget, cfg.mode) {
        (None, _) | (_, NoiseMode::Noiseless) => Ok((weights.dot(&x), 0.0)),
        (Some(b), NoiseMode::GaussianSql) => {
            let out = homodyne_mv_gaussian(weights.view(), x, b, stream, cfg.row_norm_approx)?;
            Ok((out.values, out.photons_consumed))
        }
        (Some(b), NoiseMode::PoissonExact) => {
            let out = homodyne_mv_poisson(weights.view(), x, b, stream)?;
            Ok((out.values, out.photons_consumed))
        }
    }
}

/// Run one input through the network. Noise enters each optical layer's
/// pre-activation; the per-layer budget comes from the policy. Returns the
/// logits and the total optical photons consumed.
pub fn forward(
    net: &NetworkSpec,
    input: &Value,
    policy: &LayerNoisePolicy,
    cfg: &NoiseConfig,
    stream: &Stream,
) -> Result<(Array1<f64>, f64)> {
    net.validate()?;
    policy.check_length(net)?;
    if input.shape() != net.input_shape {
        return Err(Error::ShapeChain {
            layer: 0,
            reason: format!(
                "input shape {:?} does not match declared {:?}",
                input.shape(),
                net.input_shape
            ),
        });
    }

    let mut value = input.clone();
    let mut photons = 0.0f64;
    let mut noisy_idx = 0usize;

    for (pos, layer) in net.layers.iter().enumerate() {
        let layer_stream = stream.fork(pos as u64);
        value = match layer {
            LayerSpec::FullyConnected { weights, bias, activation } => {
                let x = value.into_flat();
                let budget = policy.effective(noisy_idx);
                noisy_idx += 1;
                let (mut y, used) = dispatch_mv(weights, x.view(), budget, cfg, &layer_stream)?;
                photons += used;
                if let Some(b) = bias {
                    y += b;
                }
                y.mapv_inplace(|v| activation.apply(v));
                Value::Flat(y)
            }
            LayerSpec::Conv2D { kernel, bias, stride, activation } => {
                let Value::Image(img) = value else {
                    return Err(Error::ShapeChain {
                        layer: pos,
                        reason: "conv layer needs an image input".into(),
                    });
                };
                let budget = policy.effective(noisy_idx);
                noisy_idx += 1;
                let layer_cfg = match budget {
                    Some(_) => *cfg,
                    None => NoiseConfig::noiseless(),
                };
                let budget = budget.unwrap_or(PhotonBudget::new(0.0, 0.0)?);
                let (mut y, used) =
                    conv_via_gemm(kernel.view(), img.view(), *stride, &layer_cfg, budget, &layer_stream)?;
                photons += used;
                if let Some(b) = bias {
                    for k in 0..b.len() {
                        y.index_axis_mut(Axis(2), k).mapv_inplace(|v| v + b[k]);
                    }
                }
                y.mapv_inplace(|v| activation.apply(v));
                Value::Image(y)
            }
            LayerSpec::MaxPool { window, stride } => {
                let Value::Image(img) = value else {
                    return Err(Error::ShapeChain {
                        layer: pos,
                        reason: "max-pool layer needs an image input".into(),
                    });
                };
                let (pooled, _) = max_pool_with_argmax(&img, *window, *stride);
                Value::Image(pooled)
            }
            LayerSpec::Flatten => Value::Flat(value.into_flat()),
        };
    }

    match value {
        Value::Flat(logits) => Ok((logits, photons)),
        Value::Image(_) => Err(Error::ShapeChain {
            layer: net.layers.len(),
            reason: "network must end in a flat logits vector".into(),
        }),
    }
}

/// Index of the largest logit; ties break to the lowest index.
pub fn classify(logits: &[f64]) -> Result<usize> {
    if logits.is_empty() {
        return Err(Error::EmptyLogits);
    }
    let mut best = 0usize;
    for (i, v) in logits.iter().enumerate().skip(1) {
        if *v > logits[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Rank of a class under (value desc, index asc) ordering; rank 0 is the
/// top prediction. Top-k correctness is `rank < k`.
pub fn class_rank(logits: &[f64], label: usize) -> usize {
    let v = logits[label];
    logits
        .iter()
        .enumerate()
        .filter(|(i, x)| **x > v || (**x == v && *i < label))
        .count()
}

/// Monte Carlo classification-error estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorEstimate {
    pub error_rate: f64,
    /// Half-width of the normal-approximation 95% interval on the error.
    pub ci95: f64,
    pub errors: u64,
    pub evaluations: u64,
}

/// Estimate the top-k error rate over `trials` independent noise draws per
/// dataset sample. Work is distributed over (sample, trial) pairs with
/// derived streams, so the result is independent of scheduling.
pub fn monte_carlo_error_rate(
    net: &NetworkSpec,
    dataset: &[(Value, usize)],
    policy: &LayerNoisePolicy,
    cfg: &NoiseConfig,
    trials: u64,
    top_k: usize,
    stream: &Stream,
) -> Result<ErrorEstimate> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if trials == 0 || top_k == 0 {
        return Err(Error::InvalidParameter("trials and top_k must be >= 1".into()));
    }
    net.validate()?;
    policy.check_length(net)?;

    let total = dataset.len() as u64 * trials;
    let errors: u64 = (0..total)
        .into_par_iter()
        .map(|idx| {
            let sample = (idx / trials) as usize;
            let trial = idx % trials;
            let run = stream.fork(sample as u64).fork(trial);
            let (input, label) = &dataset[sample];
            let (logits, _) = forward(net, input, policy, cfg, &run)?;
            Ok(u64::from(class_rank(logits.as_slice().unwrap(), *label) >= top_k))
        })
        .try_reduce(|| 0u64, |a, b| Ok(a + b))?;

    let p = errors as f64 / total as f64;
    Ok(ErrorEstimate {
        error_rate: p,
        ci95: 1.96 * (p * (1.0 - p) / total as f64).sqrt(),
        errors,
        evaluations: total,
    })
}

/// Optical photons consumed by one forward inference under this policy.
pub fn photons_per_forward(net: &NetworkSpec, policy: &LayerNoisePolicy) -> Result<f64> {
    policy.check_length(net)?;
    let macs = net.mac_counts()?;
    let mut noisy_idx = 0usize;
    let mut photons = 0.0;
    for (layer, macs) in net.layers.iter().zip(macs) {
        if layer.is_noisy() {
            if let Some(b) = policy.effective(noisy_idx) {
                photons += b.total() * macs as f64;
            }
            noisy_idx += 1;
        }
    }
    Ok(photons)
}
