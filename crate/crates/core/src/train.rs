//! Backpropagation and gradient descent with every large matrix product
//! routed through the (optionally noisy) homodyne GEMM engine.
//!
//! A batched forward pass records a tape (layer inputs and noisy
//! pre-activations); backward replays it, computing ∇_W L = G·Xᵀ and
//! ∇_X L = Wᵀ·G per layer as matrix-matrix products, with the activation
//! derivative applied as an exact elementwise mask on the observed
//! pre-activations. Convolution gradients are computed in patch space and
//! folded back to kernel/image space by the im2col transpose.
//!
//! Which of the three products (forward, weight gradient, input gradient)
//! actually draws noise is configurable per product.

use ndarray::{Array1, Array2, Array3, Array4, Axis};

use crate::conv::{fold_patches, im2col, kernel_to_matrix, matrix_to_kernel, PatchGeometry};
use crate::error::{Error, Result};
use crate::net::{max_pool_with_argmax, LayerSpec, NetworkSpec, Value};
use crate::noise::{noisy_gemm, NoiseConfig, PhotonBudget};
use crate::rng::Stream;

/// Which training products run on the noisy GEMM (when a budget is set).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProductNoise {
    pub forward: bool,
    pub grad_weight: bool,
    pub grad_input: bool,
}

impl Default for ProductNoise {
    fn default() -> Self {
        ProductNoise { forward: true, grad_weight: true, grad_input: true }
    }
}

/// Stream labels for the three products of one layer.
const FWD: u64 = 0;
const GRAD_W: u64 = 1;
const GRAD_X: u64 = 2;

/// A batch of values: columns of a N×B matrix, or one image per sample.
#[derive(Debug, Clone, PartialEq)]
pub enum BatchValue {
    Flat(Array2<f64>),
    Images(Vec<Array3<f64>>),
}

impl BatchValue {
    pub fn batch_size(&self) -> usize {
        match self {
            BatchValue::Flat(m) => m.ncols(),
            BatchValue::Images(v) => v.len(),
        }
    }

    fn into_flat(self) -> Array2<f64> {
        match self {
            BatchValue::Flat(m) => m,
            BatchValue::Images(imgs) => {
                let b = imgs.len();
                let n = imgs[0].len();
                let mut out = Array2::zeros((n, b));
                for (s, img) in imgs.into_iter().enumerate() {
                    let flat = img.into_shape_with_order(n).expect("contiguous image");
                    out.column_mut(s).assign(&flat);
                }
                out
            }
        }
    }

    /// Assemble a batch from single-sample values (all same shape).
    pub fn from_values(values: &[&Value]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyDataset);
        }
        match values[0] {
            Value::Flat(first) => {
                let n = first.len();
                let mut m = Array2::zeros((n, values.len()));
                for (s, v) in values.iter().enumerate() {
                    let Value::Flat(col) = v else {
                        return Err(Error::DimensionMismatch("mixed batch value kinds".into()));
                    };
                    m.column_mut(s).assign(col);
                }
                Ok(BatchValue::Flat(m))
            }
            Value::Image(_) => {
                let mut imgs = Vec::with_capacity(values.len());
                for v in values {
                    let Value::Image(img) = v else {
                        return Err(Error::DimensionMismatch("mixed batch value kinds".into()));
                    };
                    imgs.push(img.clone());
                }
                Ok(BatchValue::Images(imgs))
            }
        }
    }
}

/// Cached forward state for one layer.
#[derive(Debug, Clone)]
pub enum TapeEntry {
    Fc {
        /// Layer input X (N×B), the post-activation of the previous layer.
        input: Array2<f64>,
        /// Observed (noisy) pre-activation Y = WX + b.
        pre: Array2<f64>,
    },
    Conv {
        /// Patch matrices of the whole batch, concatenated column-wise:
        /// (K_xK_yC) × (B·W′H′).
        patches: Array2<f64>,
        geometry: PatchGeometry,
        /// Observed pre-activation in matrix form: C′ × (B·W′H′).
        pre: Array2<f64>,
    },
    Pool {
        argmax: Vec<Array3<usize>>,
        input_dim: (usize, usize, usize),
    },
    Flatten {
        input_dim: (usize, usize, usize),
    },
}

/// Forward record of one batch: per-layer entries plus the logits.
#[derive(Debug, Clone)]
pub struct Tape {
    pub entries: Vec<TapeEntry>,
    /// Logits, N_out×B.
    pub logits: Array2<f64>,
    pub photons: f64,
    batch_size: usize,
}

fn product_cfg(cfg: &NoiseConfig, enabled: bool) -> NoiseConfig {
    if enabled {
        *cfg
    } else {
        NoiseConfig::noiseless()
    }
}

fn zero_budget() -> PhotonBudget {
    PhotonBudget::new(0.0, 0.0).expect("zero budget is valid")
}

/// Batched forward pass recording the tape. The per-layer stream layout
/// matches [`crate::net::forward`], so a batch of one draws the same noise
/// as the matrix-vector inference path under an equal stream.
pub fn forward_batch(
    net: &NetworkSpec,
    input: &BatchValue,
    budget: Option<PhotonBudget>,
    cfg: &NoiseConfig,
    products: ProductNoise,
    stream: &Stream,
) -> Result<Tape> {
    net.validate()?;
    let batch = input.batch_size();
    if batch == 0 {
        return Err(Error::EmptyDataset);
    }
    let fwd_cfg = product_cfg(cfg, products.forward);
    let budget = if products.forward { budget } else { None };

    let mut value = input.clone();
    let mut entries = Vec::with_capacity(net.layers.len());
    let mut photons = 0.0f64;

    for (pos, layer) in net.layers.iter().enumerate() {
        let layer_stream = stream.fork(pos as u64);
        value = match layer {
            LayerSpec::FullyConnected { weights, bias, activation } => {
                let x = value.into_flat();
                let product = match budget {
                    Some(b) => noisy_gemm(weights.view(), x.view(), b, &fwd_cfg, &layer_stream)?,
                    None => noisy_gemm(
                        weights.view(),
                        x.view(),
                        zero_budget(),
                        &NoiseConfig::noiseless(),
                        &layer_stream,
                    )?,
                };
                photons += product.photons_consumed;
                let mut pre = product.values;
                if let Some(b) = bias {
                    for mut col in pre.axis_iter_mut(Axis(1)) {
                        col += b;
                    }
                }
                let out = pre.mapv(|v| activation.apply(v));
                entries.push(TapeEntry::Fc { input: x, pre });
                BatchValue::Flat(out)
            }
            LayerSpec::Conv2D { kernel, bias, stride, activation } => {
                let BatchValue::Images(imgs) = value else {
                    return Err(Error::ShapeChain {
                        layer: pos,
                        reason: "conv layer needs image inputs".into(),
                    });
                };
                let (k_x, k_y, c_out, _) = kernel.dim();
                let per_sample: Vec<_> = imgs
                    .iter()
                    .map(|img| im2col(img.view(), k_x, k_y, stride.0, stride.1))
                    .collect::<Result<_>>()?;
                let geometry = per_sample[0].geometry;
                let positions = geometry.positions();
                let mut patches = Array2::zeros((geometry.patch_len(), batch * positions));
                for (s, p) in per_sample.iter().enumerate() {
                    patches
                        .slice_mut(ndarray::s![.., s * positions..(s + 1) * positions])
                        .assign(&p.data);
                }
                let k_mat = kernel_to_matrix(kernel.view());
                let product = match budget {
                    Some(b) => noisy_gemm(k_mat.view(), patches.view(), b, &fwd_cfg, &layer_stream)?,
                    None => noisy_gemm(
                        k_mat.view(),
                        patches.view(),
                        zero_budget(),
                        &NoiseConfig::noiseless(),
                        &layer_stream,
                    )?,
                };
                photons += product.photons_consumed;
                let mut pre = product.values;
                if let Some(b) = bias {
                    for k in 0..c_out {
                        pre.row_mut(k).mapv_inplace(|v| v + b[k]);
                    }
                }
                // Unpack activations to per-sample images for the next layer.
                let mut outs = Vec::with_capacity(batch);
                for s in 0..batch {
                    let mut img = Array3::zeros((geometry.w_out, geometry.h_out, c_out));
                    for ox in 0..geometry.w_out {
                        for oy in 0..geometry.h_out {
                            let p = s * positions + ox * geometry.h_out + oy;
                            for k in 0..c_out {
                                img[[ox, oy, k]] = activation.apply(pre[[k, p]]);
                            }
                        }
                    }
                    outs.push(img);
                }
                entries.push(TapeEntry::Conv { patches, geometry, pre });
                BatchValue::Images(outs)
            }
            LayerSpec::MaxPool { window, stride } => {
                let BatchValue::Images(imgs) = value else {
                    return Err(Error::ShapeChain {
                        layer: pos,
                        reason: "max-pool layer needs image inputs".into(),
                    });
                };
                let input_dim = imgs[0].dim();
                let mut outs = Vec::with_capacity(batch);
                let mut args = Vec::with_capacity(batch);
                for img in &imgs {
                    let (out, arg) = max_pool_with_argmax(img, *window, *stride);
                    outs.push(out);
                    args.push(arg);
                }
                entries.push(TapeEntry::Pool { argmax: args, input_dim });
                BatchValue::Images(outs)
            }
            LayerSpec::Flatten => {
                let input_dim = match &value {
                    BatchValue::Images(imgs) => imgs[0].dim(),
                    BatchValue::Flat(m) => (m.nrows(), 1, 1),
                };
                entries.push(TapeEntry::Flatten { input_dim });
                BatchValue::Flat(value.into_flat())
            }
        };
    }

    let logits = value.into_flat();
    Ok(Tape { entries, logits, photons, batch_size: batch })
}

/// Per-layer weight gradients, shaped exactly like their weights.
#[derive(Debug, Clone)]
pub enum LayerGrad {
    Fc { weights: Array2<f64>, bias: Option<Array1<f64>> },
    Conv { kernel: Array4<f64>, bias: Option<Array1<f64>> },
    /// Bookkeeping layers carry no parameters.
    None,
}

#[derive(Debug, Clone)]
pub struct GradientSet {
    pub layers: Vec<LayerGrad>,
    pub photons: f64,
}

/// Gradient carrier flowing backwards between layers.
enum GradValue {
    Flat(Array2<f64>),
    Images(Vec<Array3<f64>>),
}

impl GradValue {
    fn into_flat(self) -> Array2<f64> {
        match self {
            GradValue::Flat(m) => m,
            GradValue::Images(imgs) => BatchValue::Images(imgs).into_flat(),
        }
    }
}

/// Backpropagate `grad_logits` (N_out×B) through the taped forward pass.
/// Both gradient products of each trainable layer run through the homodyne
/// GEMM, noisy per the `products` switches when a budget is given.
pub fn backward(
    net: &NetworkSpec,
    tape: &Tape,
    grad_logits: Array2<f64>,
    budget: Option<PhotonBudget>,
    cfg: &NoiseConfig,
    products: ProductNoise,
    stream: &Stream,
) -> Result<GradientSet> {
    if tape.entries.len() != net.layers.len() {
        return Err(Error::MissingTape(tape.entries.len()));
    }
    if grad_logits.dim() != tape.logits.dim() {
        return Err(Error::DimensionMismatch(format!(
            "grad_logits is {:?}, logits were {:?}",
            grad_logits.dim(),
            tape.logits.dim()
        )));
    }
    let batch = tape.batch_size;
    let gw_cfg = product_cfg(cfg, products.grad_weight);
    let gx_cfg = product_cfg(cfg, products.grad_input);
    let gw_budget = if products.grad_weight { budget } else { None };
    let gx_budget = if products.grad_input { budget } else { None };

    let gemm = |a: ndarray::ArrayView2<f64>,
                b: ndarray::ArrayView2<f64>,
                budget: Option<PhotonBudget>,
                cfg: &NoiseConfig,
                s: &Stream|
     -> Result<(Array2<f64>, f64)> {
        let out = match budget {
            Some(bud) => noisy_gemm(a, b, bud, cfg, s)?,
            None => noisy_gemm(a, b, zero_budget(), &NoiseConfig::noiseless(), s)?,
        };
        Ok((out.values, out.photons_consumed))
    };

    let mut grads = vec![LayerGrad::None; net.layers.len()];
    let mut photons = 0.0f64;
    let mut upstream = GradValue::Flat(grad_logits);

    for (pos, layer) in net.layers.iter().enumerate().rev() {
        let layer_stream = stream.fork(pos as u64);
        upstream = match (layer, &tape.entries[pos]) {
            (
                LayerSpec::FullyConnected { weights, bias, activation },
                TapeEntry::Fc { input, pre },
            ) => {
                let g_out = upstream.into_flat();
                // dL/dY: activation mask on the observed pre-activation.
                let mut g = g_out;
                g.zip_mut_with(pre, |gv, pv| *gv *= activation.derivative(*pv));

                let (gw, used) =
                    gemm(g.view(), input.t(), gw_budget, &gw_cfg, &layer_stream.fork(GRAD_W))?;
                photons += used;
                let gb = bias.as_ref().map(|_| g.sum_axis(Axis(1)));
                let (gx, used) =
                    gemm(weights.t(), g.view(), gx_budget, &gx_cfg, &layer_stream.fork(GRAD_X))?;
                photons += used;
                grads[pos] = LayerGrad::Fc { weights: gw, bias: gb };
                GradValue::Flat(gx)
            }
            (
                LayerSpec::Conv2D { kernel, bias, stride: _, activation },
                TapeEntry::Conv { patches, geometry, pre },
            ) => {
                let GradValue::Images(imgs) = upstream else {
                    return Err(Error::ShapeChain {
                        layer: pos,
                        reason: "conv backward needs image gradients".into(),
                    });
                };
                let (k_x, k_y, c_out, c_in) = kernel.dim();
                let positions = geometry.positions();
                // Pack incoming gradient to matrix form matching `pre`.
                let mut g = Array2::zeros((c_out, batch * positions));
                for (s, img) in imgs.iter().enumerate() {
                    for ox in 0..geometry.w_out {
                        for oy in 0..geometry.h_out {
                            let p = s * positions + ox * geometry.h_out + oy;
                            for k in 0..c_out {
                                g[[k, p]] = img[[ox, oy, k]];
                            }
                        }
                    }
                }
                g.zip_mut_with(pre, |gv, pv| *gv *= activation.derivative(*pv));

                let (gk_mat, used) =
                    gemm(g.view(), patches.t(), gw_budget, &gw_cfg, &layer_stream.fork(GRAD_W))?;
                photons += used;
                let gb = bias.as_ref().map(|_| g.sum_axis(Axis(1)));
                let k_mat = kernel_to_matrix(kernel.view());
                let (gx_patches, used) =
                    gemm(k_mat.t(), g.view(), gx_budget, &gx_cfg, &layer_stream.fork(GRAD_X))?;
                photons += used;

                let mut gx_imgs = Vec::with_capacity(batch);
                for s in 0..batch {
                    let cols = gx_patches
                        .slice(ndarray::s![.., s * positions..(s + 1) * positions]);
                    gx_imgs.push(fold_patches(cols, geometry));
                }
                grads[pos] = LayerGrad::Conv {
                    kernel: matrix_to_kernel(gk_mat.view(), k_x, k_y, c_in),
                    bias: gb,
                };
                GradValue::Images(gx_imgs)
            }
            (LayerSpec::MaxPool { .. }, TapeEntry::Pool { argmax, input_dim }) => {
                let GradValue::Images(imgs) = upstream else {
                    return Err(Error::ShapeChain {
                        layer: pos,
                        reason: "pool backward needs image gradients".into(),
                    });
                };
                let (w, h, c) = *input_dim;
                let mut outs = Vec::with_capacity(batch);
                for (img, arg) in imgs.iter().zip(argmax) {
                    let mut gx = Array3::zeros((w, h, c));
                    for ((idx, g), flat) in img.indexed_iter().map(|(i, g)| ((i, *g), ())) {
                        let _ = flat;
                        let src = arg[[idx.0, idx.1, idx.2]];
                        let (x, rest) = (src / (h * c), src % (h * c));
                        let (y, ch) = (rest / c, rest % c);
                        gx[[x, y, ch]] += g;
                    }
                    outs.push(gx);
                }
                GradValue::Images(outs)
            }
            (LayerSpec::Flatten, TapeEntry::Flatten { input_dim }) => {
                let g = upstream.into_flat();
                let (w, h, c) = *input_dim;
                let mut outs = Vec::with_capacity(batch);
                for s in 0..batch {
                    let col = g.column(s).to_owned();
                    outs.push(col.into_shape_with_order((w, h, c)).map_err(|_| {
                        Error::ShapeChain {
                            layer: pos,
                            reason: "flatten backward shape mismatch".into(),
                        }
                    })?);
                }
                GradValue::Images(outs)
            }
            _ => return Err(Error::MissingTape(pos)),
        };
    }

    Ok(GradientSet { layers: grads, photons })
}

/// Plain gradient-descent update: w ← w − lr·g, in place.
pub fn sgd_step(net: &mut NetworkSpec, grads: &GradientSet, learning_rate: f64) -> Result<()> {
    if !(learning_rate > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "learning rate must be > 0, got {learning_rate}"
        )));
    }
    if grads.layers.len() != net.layers.len() {
        return Err(Error::DimensionMismatch("gradient/layer count mismatch".into()));
    }
    for (layer, grad) in net.layers.iter_mut().zip(&grads.layers) {
        match (layer, grad) {
            (
                LayerSpec::FullyConnected { weights, bias, .. },
                LayerGrad::Fc { weights: gw, bias: gb },
            ) => {
                if weights.dim() != gw.dim() {
                    return Err(Error::DimensionMismatch("weight gradient shape".into()));
                }
                weights.zip_mut_with(gw, |w, g| *w -= learning_rate * g);
                if let (Some(b), Some(gb)) = (bias.as_mut(), gb.as_ref()) {
                    b.zip_mut_with(gb, |b, g| *b -= learning_rate * g);
                }
            }
            (
                LayerSpec::Conv2D { kernel, bias, .. },
                LayerGrad::Conv { kernel: gk, bias: gb },
            ) => {
                if kernel.dim() != gk.dim() {
                    return Err(Error::DimensionMismatch("kernel gradient shape".into()));
                }
                kernel.zip_mut_with(gk, |w, g| *w -= learning_rate * g);
                if let (Some(b), Some(gb)) = (bias.as_mut(), gb.as_ref()) {
                    b.zip_mut_with(gb, |b, g| *b -= learning_rate * g);
                }
            }
            (_, LayerGrad::None) => {}
            _ => return Err(Error::DimensionMismatch("gradient kind mismatch".into())),
        }
    }
    Ok(())
}

/// Softmax cross-entropy over logits (N_out×B): mean loss and dL/dlogits.
pub fn softmax_cross_entropy(logits: &Array2<f64>, labels: &[usize]) -> Result<(f64, Array2<f64>)> {
    let (classes, batch) = logits.dim();
    if labels.len() != batch {
        return Err(Error::DimensionMismatch(format!(
            "{} labels for a batch of {batch}",
            labels.len()
        )));
    }
    let mut grad = Array2::zeros((classes, batch));
    let mut loss = 0.0f64;
    for (s, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(Error::InvalidParameter(format!(
                "label {label} out of range for {classes} classes"
            )));
        }
        let col = logits.column(s);
        let m = col.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut z = 0.0;
        for v in col.iter() {
            z += (v - m).exp();
        }
        let log_z = z.ln() + m;
        loss += log_z - col[label];
        for k in 0..classes {
            let p = (col[k] - log_z).exp();
            grad[[k, s]] = (p - f64::from(u8::from(k == label))) / batch as f64;
        }
    }
    Ok((loss / batch as f64, grad))
}

/// Learning-rate schedule: lr(epoch) = base · decay^epoch.
#[derive(Debug, Clone, Copy)]
pub struct LrSchedule {
    pub base: f64,
    pub decay: f64,
}

impl LrSchedule {
    pub fn constant(base: f64) -> Self {
        LrSchedule { base, decay: 1.0 }
    }

    pub fn at(&self, epoch: usize) -> f64 {
        self.base * self.decay.powi(epoch as i32)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: LrSchedule,
    pub momentum: f64,
    /// Photons/MAC for every optical product; `None` trains noiselessly.
    pub budget: Option<PhotonBudget>,
    pub noise: NoiseConfig,
    pub products: ProductNoise,
    pub seed: u64,
}

/// One history row per epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
    /// Optical photons consumed since the start of training.
    pub photons_cumulative: f64,
}

fn scale_grads(grads: &mut GradientSet, velocity: &mut Option<GradientSet>, momentum: f64) {
    // v ← μ·v + g, and the step uses v.
    let Some(vel) = velocity else {
        *velocity = Some(grads.clone());
        return;
    };
    for (v, g) in vel.layers.iter_mut().zip(grads.layers.iter_mut()) {
        match (v, g) {
            (LayerGrad::Fc { weights: vw, bias: vb }, LayerGrad::Fc { weights: gw, bias: gb }) => {
                vw.zip_mut_with(gw, |v, g| *v = momentum * *v + *g);
                gw.assign(vw);
                if let (Some(vb), Some(gb)) = (vb.as_mut(), gb.as_mut()) {
                    vb.zip_mut_with(gb, |v, g| *v = momentum * *v + *g);
                    gb.assign(vb);
                }
            }
            (
                LayerGrad::Conv { kernel: vw, bias: vb },
                LayerGrad::Conv { kernel: gw, bias: gb },
            ) => {
                vw.zip_mut_with(gw, |v, g| *v = momentum * *v + *g);
                gw.assign(vw);
                if let (Some(vb), Some(gb)) = (vb.as_mut(), gb.as_mut()) {
                    vb.zip_mut_with(gb, |v, g| *v = momentum * *v + *g);
                    gb.assign(vb);
                }
            }
            _ => {}
        }
    }
}

/// Mini-batch training loop. Forward runs on data batches as matrix-matrix
/// products; the loss is exact softmax cross-entropy (electronic domain,
/// no photon cost); shuffling and every noise draw derive from the seed,
/// so identical options give identical final weights.
pub fn train_loop(
    net: &mut NetworkSpec,
    train: &[(Value, usize)],
    test: Option<&[(Value, usize)]>,
    opts: &TrainOptions,
) -> Result<Vec<EpochStats>> {
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if opts.batch_size == 0 {
        return Err(Error::InvalidParameter("batch size must be >= 1".into()));
    }
    net.validate()?;

    let root = Stream::new(opts.seed);
    let mut history = Vec::with_capacity(opts.epochs);
    let mut velocity: Option<GradientSet> = None;
    let mut photons_cum = 0.0f64;
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 0..opts.epochs {
        // Deterministic Fisher-Yates shuffle per epoch.
        let mut shuffle = root.fork(1_000_000 + epoch as u64);
        for i in (1..order.len()).rev() {
            let j = (shuffle.next_u64() % (i as u64 + 1)) as usize;
            order.swap(i, j);
        }

        let lr = opts.lr.at(epoch);
        let mut loss_sum = 0.0f64;
        let mut correct = 0u64;
        let mut batches = 0usize;

        for (step, chunk) in order.chunks(opts.batch_size).enumerate() {
            let values: Vec<&Value> = chunk.iter().map(|&i| &train[i].0).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| train[i].1).collect();
            let batch = BatchValue::from_values(&values)?;

            let step_stream = root.fork(epoch as u64).fork(step as u64);
            let tape = forward_batch(
                net,
                &batch,
                opts.budget,
                &opts.noise,
                opts.products,
                &step_stream.fork(FWD),
            )?;
            photons_cum += tape.photons;

            let (loss, grad_logits) = softmax_cross_entropy(&tape.logits, &labels)?;
            loss_sum += loss;
            batches += 1;
            for (s, &label) in labels.iter().enumerate() {
                let col = tape.logits.column(s);
                let pred = crate::net::classify(col.as_slice().unwrap_or(&col.to_vec()))?;
                correct += u64::from(pred == label);
            }

            let mut grads = backward(
                net,
                &tape,
                grad_logits,
                opts.budget,
                &opts.noise,
                opts.products,
                &step_stream.fork(1),
            )?;
            photons_cum += grads.photons;

            if opts.momentum > 0.0 {
                scale_grads(&mut grads, &mut velocity, opts.momentum);
            }
            sgd_step(net, &grads, lr)?;
        }

        let test_accuracy = match test {
            Some(data) if !data.is_empty() => {
                let policy = crate::net::LayerNoisePolicy::noiseless(net.noisy_layer_count());
                let est = crate::net::monte_carlo_error_rate(
                    net,
                    data,
                    &policy,
                    &NoiseConfig::noiseless(),
                    1,
                    1,
                    &root.fork(2_000_000 + epoch as u64),
                )?;
                Some(1.0 - est.error_rate)
            }
            _ => None,
        };

        history.push(EpochStats {
            epoch,
            mean_loss: loss_sum / batches as f64,
            train_accuracy: correct as f64 / train.len() as f64,
            test_accuracy,
            photons_cumulative: photons_cum,
        });
    }

    Ok(history)
}
