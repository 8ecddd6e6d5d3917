//! Shot-noise models for homodyne matrix products.
//!
//! A matrix product evaluated by homodyne detection carries quantum shot
//! noise: each detector accumulates a Poisson-distributed photocharge on
//! its sum (+) and difference (−) ports, and the differenced signal
//! recovers the logical product plus zero-mean noise whose size is set by
//! the number of photons spent per multiply-accumulate.
//!
//! Two stochastic backends implement the same contract:
//!
//! * [`homodyne_mm_poisson`] / [`homodyne_mv_poisson`] — the exact physics:
//!   per-detector Poisson draws of the two port intensities. Serves as the
//!   brute-force oracle for the analytic model.
//! * [`homodyne_mm_gaussian`] / [`homodyne_mv_gaussian`] — the
//!   standard-quantum-limit Gaussian model: the exact product plus additive
//!   Gaussian noise with the closed-form standard deviation, either with
//!   exact per-row/per-column norms or with the global-norm approximation.
//!
//! Both are unbiased (the expected output is the exact logical product) and
//! agree in distribution in the many-photons-per-detector limit.
//!
//! Conventions: the "weight" operand is the left matrix A, the "data"
//! operand the right matrix B (or the vector x). Logical values are mapped
//! to field amplitudes by the scaling factors ξ, chosen so the configured
//! photons/MAC are spent exactly on the actual signal norms.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::rng::Stream;

/// Photons-per-MAC allocation, split between the data signal and the
/// weight signal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhotonBudget {
    n_mac_input: f64,
    n_mac_weight: f64,
}

impl PhotonBudget {
    pub fn new(n_mac_input: f64, n_mac_weight: f64) -> Result<Self> {
        if !n_mac_input.is_finite() || !n_mac_weight.is_finite() {
            return Err(Error::NonFinite("photon budget"));
        }
        if n_mac_input < 0.0 || n_mac_weight < 0.0 {
            return Err(Error::InvalidParameter(format!(
                "photon budget must be nonnegative, got ({n_mac_input}, {n_mac_weight})"
            )));
        }
        Ok(PhotonBudget { n_mac_input, n_mac_weight })
    }

    /// Split a total budget equally between data and weights (the
    /// SNR-optimal allocation for a fixed total).
    pub fn equal_split(total: f64) -> Result<Self> {
        PhotonBudget::new(total / 2.0, total / 2.0)
    }

    pub fn n_mac_input(&self) -> f64 {
        self.n_mac_input
    }

    pub fn n_mac_weight(&self) -> f64 {
        self.n_mac_weight
    }

    pub fn total(&self) -> f64 {
        self.n_mac_input + self.n_mac_weight
    }

    fn require_realizable(&self) -> Result<()> {
        if self.n_mac_input == 0.0 || self.n_mac_weight == 0.0 {
            return Err(Error::ZeroBudget {
                input: self.n_mac_input,
                weight: self.n_mac_weight,
            });
        }
        Ok(())
    }
}

/// Conversion between logical values and photon-normalized field
/// amplitudes: data amplitudes are ξ_x·x, weight amplitudes ξ_w·A, and the
/// post-detection rescale α = 1/(2ξ_w) recovers the logical product in the
/// classical limit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalingFactors {
    pub xi_x: f64,
    pub xi_w: f64,
    pub alpha: f64,
}

impl ScalingFactors {
    /// Rescale a raw differenced photocharge to logical units. The α step
    /// lands in next-layer amplitude units; the ξ_x division completes the
    /// map back to logical values so the expectation is the exact product.
    #[inline]
    fn to_logical(&self, raw: f64) -> f64 {
        raw * self.alpha / self.xi_x
    }
}

/// Scaling factors for a general m×k · k×n product: the data side spends
/// `budget.n_mac_input` photons per MAC over n·k symbols, the weight side
/// `budget.n_mac_weight` over m·k.
fn mm_scaling(
    weight_norm: f64,
    data_norm: f64,
    m: usize,
    n: usize,
    k: usize,
    budget: PhotonBudget,
) -> Result<ScalingFactors> {
    budget.require_realizable()?;
    if data_norm == 0.0 {
        return Err(Error::ZeroNormSignal { signal: "data", n_mac: budget.n_mac_input });
    }
    if weight_norm == 0.0 {
        return Err(Error::ZeroNormSignal { signal: "weight", n_mac: budget.n_mac_weight });
    }
    let xi_x = ((n * k) as f64 * budget.n_mac_input).sqrt() / data_norm;
    let xi_w = ((m * k) as f64 * budget.n_mac_weight).sqrt() / weight_norm;
    Ok(ScalingFactors { xi_x, xi_w, alpha: 1.0 / (2.0 * xi_w) })
}

/// Invert the photons-per-MAC definition for a matrix-vector product:
/// given the actual signal norms and dimensions, return the amplitude
/// scales that realize the budget exactly.
pub fn scaling_factors(
    x_norm: f64,
    w_norm: f64,
    n_in: usize,
    n_out: usize,
    budget: PhotonBudget,
) -> Result<ScalingFactors> {
    if n_in == 0 || n_out == 0 {
        return Err(Error::InvalidParameter("dimensions must be >= 1".into()));
    }
    if !x_norm.is_finite() || !w_norm.is_finite() {
        return Err(Error::NonFinite("signal norm"));
    }
    mm_scaling(w_norm, x_norm, n_out, 1, n_in, budget)
}

/// Vector with the optical photons consumed producing it.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisyVector {
    pub values: Array1<f64>,
    pub photons_consumed: f64,
}

/// Matrix with the optical photons consumed producing it.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisyMatrix {
    pub values: Array2<f64>,
    pub photons_consumed: f64,
}

/// Stochastic backend selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseMode {
    /// Exact arithmetic, zero photons charged.
    Noiseless,
    /// Gaussian standard-quantum-limit model.
    GaussianSql,
    /// Exact per-detector Poisson photocurrents (the oracle).
    PoissonExact,
}

/// Backend selector plus the seed policy. Identical (mode, seed, inputs)
/// give bit-identical outputs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseConfig {
    pub mode: NoiseMode,
    pub seed: u64,
    /// Replace per-row/per-column norms by ‖·‖/√dim in the Gaussian model.
    pub row_norm_approx: bool,
}

impl NoiseConfig {
    pub fn noiseless() -> Self {
        NoiseConfig { mode: NoiseMode::Noiseless, seed: 0, row_norm_approx: false }
    }

    pub fn gaussian(seed: u64) -> Self {
        NoiseConfig { mode: NoiseMode::GaussianSql, seed, row_norm_approx: false }
    }

    pub fn poisson(seed: u64) -> Self {
        NoiseConfig { mode: NoiseMode::PoissonExact, seed, row_norm_approx: false }
    }
}

fn check_finite_2d(m: ArrayView2<f64>, what: &'static str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

fn check_finite_1d(v: ArrayView1<f64>, what: &'static str) -> Result<()> {
    if v.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

fn check_inner_dims(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<()> {
    if a.ncols() != b.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "cannot multiply {}x{} by {}x{}",
            a.nrows(),
            a.ncols(),
            b.nrows(),
            b.ncols()
        )));
    }
    Ok(())
}

fn frobenius_sq(m: ArrayView2<f64>) -> f64 {
    m.iter().map(|v| v * v).sum()
}

/// Matrix-matrix product under the Gaussian SQL model: C = AB + w·σ with
/// per-entry σ² = ¼(‖A_i‖²/ξ_x² + ‖B_j‖²/ξ_w²), exact norms unless
/// `row_norm_approx` replaces ‖A_i‖² → ‖A‖²/m and ‖B_j‖² → ‖B‖²/n.
pub fn homodyne_mm_gaussian(
    a: ArrayView2<f64>,
    b: ArrayView2<f64>,
    budget: PhotonBudget,
    stream: &Stream,
    row_norm_approx: bool,
) -> Result<NoisyMatrix> {
    check_inner_dims(a, b)?;
    check_finite_2d(a, "weight matrix")?;
    check_finite_2d(b, "data matrix")?;
    let (m, k, n) = (a.nrows(), a.ncols(), b.ncols());

    let a_sq = frobenius_sq(a);
    let b_sq = frobenius_sq(b);
    let sf = mm_scaling(a_sq.sqrt(), b_sq.sqrt(), m, n, k, budget)?;
    let inv_xi_x_sq = 1.0 / (sf.xi_x * sf.xi_x);
    let inv_xi_w_sq = 1.0 / (sf.xi_w * sf.xi_w);

    let row_sq: Vec<f64> = a.axis_iter(Axis(0)).map(|r| r.dot(&r)).collect();
    let col_sq: Vec<f64> = b.axis_iter(Axis(1)).map(|c| c.dot(&c)).collect();

    let mut values = a.dot(&b);
    for ((i, j), v) in values.indexed_iter_mut() {
        let a_term = if row_norm_approx { a_sq / m as f64 } else { row_sq[i] };
        let b_term = if row_norm_approx { b_sq / n as f64 } else { col_sq[j] };
        let std = (0.25 * (a_term * inv_xi_x_sq + b_term * inv_xi_w_sq)).sqrt();
        let mut entry = stream.fork2(i as u64, j as u64);
        *v += std * entry.normal();
    }

    Ok(NoisyMatrix {
        values,
        photons_consumed: budget.total() * (m * n * k) as f64,
    })
}

/// Matrix-matrix product by exact per-detector Poisson photocurrents.
///
/// Detector (i, j) interferes row Ā_i against column B̄_j; its two ports
/// accumulate Poisson charges with means Σ_l ½(Ā_il ± B̄_lj)², and the
/// differenced, rescaled charge is the logical output. Port intensities
/// are evaluated by direct summation so they are nonnegative by
/// construction in floating point as well as on paper.
pub fn homodyne_mm_poisson(
    a: ArrayView2<f64>,
    b: ArrayView2<f64>,
    budget: PhotonBudget,
    stream: &Stream,
) -> Result<NoisyMatrix> {
    check_inner_dims(a, b)?;
    check_finite_2d(a, "weight matrix")?;
    check_finite_2d(b, "data matrix")?;
    let (m, k, n) = (a.nrows(), a.ncols(), b.ncols());

    let sf = mm_scaling(frobenius_sq(a).sqrt(), frobenius_sq(b).sqrt(), m, n, k, budget)?;

    let mut values = Array2::zeros((m, n));
    for i in 0..m {
        for j in 0..n {
            let mut lam_plus = 0.0f64;
            let mut lam_minus = 0.0f64;
            for l in 0..k {
                let wt = sf.xi_w * a[[i, l]];
                let dt = sf.xi_x * b[[l, j]];
                lam_plus += 0.5 * (wt + dt) * (wt + dt);
                lam_minus += 0.5 * (wt - dt) * (wt - dt);
            }
            debug_assert!(lam_plus >= 0.0 && lam_minus >= 0.0);
            let mut entry = stream.fork2(i as u64, j as u64);
            let q_plus = entry.poisson(lam_plus);
            let q_minus = entry.poisson(lam_minus);
            values[[i, j]] = sf.to_logical(q_plus - q_minus);
        }
    }

    Ok(NoisyMatrix {
        values,
        photons_consumed: budget.total() * (m * n * k) as f64,
    })
}

fn as_column(x: ArrayView1<f64>) -> ArrayView2<f64> {
    x.insert_axis(Axis(1))
}

/// Matrix-vector product under the Gaussian SQL model (pre-activation).
pub fn homodyne_mv_gaussian(
    weights: ArrayView2<f64>,
    x: ArrayView1<f64>,
    budget: PhotonBudget,
    stream: &Stream,
    row_norm_approx: bool,
) -> Result<NoisyVector> {
    check_finite_1d(x, "data vector")?;
    let out = homodyne_mm_gaussian(weights, as_column(x), budget, stream, row_norm_approx)?;
    Ok(NoisyVector {
        values: out.values.index_axis_move(Axis(1), 0),
        photons_consumed: out.photons_consumed,
    })
}

/// Matrix-vector product by exact Poisson photocurrents (the oracle for
/// the Gaussian matrix-vector model).
pub fn homodyne_mv_poisson(
    weights: ArrayView2<f64>,
    x: ArrayView1<f64>,
    budget: PhotonBudget,
    stream: &Stream,
) -> Result<NoisyVector> {
    check_finite_1d(x, "data vector")?;
    let out = homodyne_mm_poisson(weights, as_column(x), budget, stream)?;
    Ok(NoisyVector {
        values: out.values.index_axis_move(Axis(1), 0),
        photons_consumed: out.photons_consumed,
    })
}

/// Dispatch a matrix product through the configured backend. `Noiseless`
/// charges zero photons and ignores the budget.
pub fn noisy_gemm(
    a: ArrayView2<f64>,
    b: ArrayView2<f64>,
    budget: PhotonBudget,
    cfg: &NoiseConfig,
    stream: &Stream,
) -> Result<NoisyMatrix> {
    match cfg.mode {
        NoiseMode::Noiseless => {
            check_inner_dims(a, b)?;
            check_finite_2d(a, "weight matrix")?;
            check_finite_2d(b, "data matrix")?;
            Ok(NoisyMatrix { values: a.dot(&b), photons_consumed: 0.0 })
        }
        NoiseMode::GaussianSql => {
            homodyne_mm_gaussian(a, b, budget, stream, cfg.row_norm_approx)
        }
        NoiseMode::PoissonExact => homodyne_mm_poisson(a, b, budget, stream),
    }
}

/// Per-entry noise variance of an m×k · k×n product under the global-norm
/// model, as a function of the budget split:
/// ‖A‖²‖B‖²/(4mnk) · (1/n_weight + 1/n_input).
pub fn noise_variance_for_split(
    a_norm: f64,
    b_norm: f64,
    m: usize,
    n: usize,
    k: usize,
    split: PhotonBudget,
) -> Result<f64> {
    split.require_realizable()?;
    let scale = a_norm * a_norm * b_norm * b_norm / (4.0 * (m * n * k) as f64);
    Ok(scale * (1.0 / split.n_mac_weight + 1.0 / split.n_mac_input))
}
