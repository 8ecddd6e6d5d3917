//! Statistical equivalence checks between the exact Poisson photocurrent
//! oracle and the Gaussian SQL model.
//!
//! For a random matrix-vector instance the suite estimates, over many
//! independent trials of [`crate::noise::homodyne_mv_poisson`]:
//!
//! * per-entry sample means against the exact product (in standard-error
//!   units, using the predicted noise level);
//! * per-entry sample variance against the exact-norm closed-form
//!   prediction σ² = ¼(‖A_i‖²/ξ_x² + ‖x‖²/ξ_w²);
//! * the two-sample Kolmogorov–Smirnov distance between standardized
//!   Poisson-oracle and Gaussian-model samples of one output entry, which
//!   probes the full distribution in the many-photons-per-detector limit.

use ndarray::{Array1, Array2};

use crate::error::Result;
use crate::noise::{homodyne_mv_gaussian, homodyne_mv_poisson, PhotonBudget};
use crate::rng::Stream;

/// One oracle-vs-model comparison instance.
#[derive(Debug, Clone, Copy)]
pub struct OracleCase {
    /// Inner (fan-in) dimension N.
    pub n: usize,
    /// Output rows N′.
    pub n_out: usize,
    /// Total photons/MAC, split equally.
    pub n_mac: f64,
    pub trials: usize,
    /// Compute the KS distance for this case.
    pub with_ks: bool,
}

/// Outcome of one case, with the raw statistics for reporting.
#[derive(Debug, Clone)]
pub struct OracleCheckReport {
    pub case: OracleCase,
    /// max over entries of |mean − exact| / (σ/√trials).
    pub max_mean_z: f64,
    /// max over entries of |var/σ² − 1|.
    pub max_var_rel_err: f64,
    /// Two-sample KS distance on standardized entry-0 samples.
    pub ks_distance: Option<f64>,
}

impl OracleCheckReport {
    pub fn mean_ok(&self) -> bool {
        self.max_mean_z <= 3.0
    }

    pub fn var_ok(&self) -> bool {
        self.max_var_rel_err <= 0.05
    }

    pub fn ks_ok(&self) -> bool {
        self.ks_distance.is_none_or(|d| d < 0.02)
    }

    pub fn passed(&self) -> bool {
        self.mean_ok() && self.var_ok() && self.ks_ok()
    }
}

/// Two-sample Kolmogorov–Smirnov distance sup|F₁ − F₂|.
pub fn ks_distance(a: &mut [f64], b: &mut [f64]) -> f64 {
    a.sort_by(|x, y| x.partial_cmp(y).unwrap());
    b.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let mut d = 0.0f64;
    let (mut i, mut j) = (0usize, 0usize);
    while i < a.len() && j < b.len() {
        if a[i] <= b[j] {
            i += 1;
        } else {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

/// Exact-norm noise standard deviation per output entry for the predicted
/// comparison: σ_i = ½√(‖A_i‖²/ξ_x² + ‖x‖²/ξ_w²).
fn predicted_stds(
    weights: &Array2<f64>,
    x: &Array1<f64>,
    budget: PhotonBudget,
) -> Result<Vec<f64>> {
    let (n_out, n) = weights.dim();
    let x_norm = x.dot(x).sqrt();
    let w_norm = weights.iter().map(|v| v * v).sum::<f64>().sqrt();
    let sf = crate::noise::scaling_factors(x_norm, w_norm, n, n_out, budget)?;
    Ok(weights
        .rows()
        .into_iter()
        .map(|row| {
            let row_sq = row.dot(&row);
            (0.25 * (row_sq / (sf.xi_x * sf.xi_x) + x_norm * x_norm / (sf.xi_w * sf.xi_w))).sqrt()
        })
        .collect())
}

/// Run one oracle-vs-model case with unit-norm random data.
pub fn run_case(case: OracleCase, seed: u64) -> Result<OracleCheckReport> {
    let mut gen = Stream::new(seed).fork(0);
    let weights = Array2::from_shape_fn((case.n_out, case.n), |_| gen.normal());
    let mut x = Array1::from_shape_fn(case.n, |_| gen.normal());
    let norm = x.dot(&x).sqrt();
    x.mapv_inplace(|v| v / norm);

    let budget = PhotonBudget::equal_split(case.n_mac)?;
    let exact = weights.dot(&x);
    let stds = predicted_stds(&weights, &x, budget)?;

    let trial_base = Stream::new(seed).fork(1);
    let mut sum = vec![0.0f64; case.n_out];
    let mut sum_sq = vec![0.0f64; case.n_out];
    let mut poisson_entry0 = Vec::with_capacity(case.trials);
    let mut gaussian_entry0 = Vec::with_capacity(case.trials);

    for t in 0..case.trials {
        let run = trial_base.fork(t as u64);
        let y = homodyne_mv_poisson(weights.view(), x.view(), budget, &run)?;
        for i in 0..case.n_out {
            let v = y.values[i];
            sum[i] += v;
            sum_sq[i] += v * v;
        }
        if case.with_ks {
            poisson_entry0.push((y.values[0] - exact[0]) / stds[0]);
            // Independent substream for the Gaussian side.
            let g = homodyne_mv_gaussian(weights.view(), x.view(), budget, &run.fork(u64::MAX), false)?;
            gaussian_entry0.push((g.values[0] - exact[0]) / stds[0]);
        }
    }

    let trials = case.trials as f64;
    let mut max_mean_z = 0.0f64;
    let mut max_var_rel_err = 0.0f64;
    for i in 0..case.n_out {
        let mean = sum[i] / trials;
        let var = sum_sq[i] / trials - mean * mean;
        let se = stds[i] / trials.sqrt();
        max_mean_z = max_mean_z.max((mean - exact[i]).abs() / se);
        max_var_rel_err = max_var_rel_err.max((var / (stds[i] * stds[i]) - 1.0).abs());
    }

    let ks = case
        .with_ks
        .then(|| ks_distance(&mut poisson_entry0, &mut gaussian_entry0));

    Ok(OracleCheckReport { case, max_mean_z, max_var_rel_err, ks_distance: ks })
}

/// The standard instance grid: fan-in N ∈ {10, 100, 1000} crossed with
/// n_mac ∈ {1, 10}, KS enabled at N = 1000.
pub fn standard_cases(trials: usize, instances: usize) -> Vec<OracleCase> {
    let dims = [10usize, 100, 1000];
    let budgets = [1.0f64, 10.0];
    (0..instances)
        .map(|i| {
            let n = dims[i % dims.len()];
            OracleCase {
                n,
                n_out: 4,
                n_mac: budgets[(i / dims.len()) % budgets.len()],
                trials,
                with_ks: n == 1000,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ks_distance_identical_samples_is_small() {
        let mut s = Stream::new(8);
        let mut a: Vec<f64> = (0..4000).map(|_| s.normal()).collect();
        let mut b: Vec<f64> = (0..4000).map(|_| s.normal()).collect();
        let d = ks_distance(&mut a, &mut b);
        assert!(d < 0.04, "{d}");
    }

    #[test]
    fn ks_distance_detects_shift() {
        let mut s = Stream::new(9);
        let mut a: Vec<f64> = (0..2000).map(|_| s.normal()).collect();
        let mut b: Vec<f64> = (0..2000).map(|_| s.normal() + 1.0).collect();
        let d = ks_distance(&mut a, &mut b);
        assert!(d > 0.3, "{d}");
    }

    #[test]
    fn small_case_passes() {
        let report = run_case(
            OracleCase { n: 100, n_out: 4, n_mac: 10.0, trials: 2000, with_ks: false },
            31,
        )
        .unwrap();
        assert!(report.max_mean_z < 4.0, "{}", report.max_mean_z);
        // 2000 trials: variance SE ~3%, allow a loose band here.
        assert!(report.max_var_rel_err < 0.12, "{}", report.max_var_rel_err);
    }

    #[test]
    fn ks_case_in_gaussian_limit() {
        let report = run_case(
            OracleCase { n: 1000, n_out: 2, n_mac: 10.0, trials: 3000, with_ks: true },
            77,
        )
        .unwrap();
        let d = report.ks_distance.unwrap();
        assert!(d < 0.04, "{d}");
    }
}
