//! Closed-form energy accounting for the optical GEMM accelerator:
//! transmit/receive energy per MAC, convolution amortization coefficients,
//! photon-to-joule conversion, optical inefficiency factors, Landauer
//! floors for digital multipliers, and extraction of the standard quantum
//! limit from simulated error-vs-photons curves.

use crate::error::{Error, Result};

/// CODATA 2018 exact defined values.
pub mod constants {
    /// Planck constant, J·s.
    pub const PLANCK: f64 = 6.626_070_15e-34;
    /// Speed of light in vacuum, m/s.
    pub const LIGHT_SPEED: f64 = 299_792_458.0;
    /// Boltzmann constant, J/K.
    pub const BOLTZMANN: f64 = 1.380_649e-23;
}

/// Homodyne readout arrangement. The single-detector scheme discards half
/// the light and sends twice as many pulses, doubling the transmit-side
/// energy; the receive electronics are unchanged.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Detection {
    DualDetector,
    SingleDetector,
}

/// Per-symbol energy parameters of the optical GEMM unit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyParams {
    /// Transmitter energy per symbol (optical + driving + serialization +
    /// DAC), joules.
    pub e_in: f64,
    /// Receiver energy per symbol (detector + ADC), joules.
    pub e_out: f64,
    /// Operating wavelength, meters.
    pub wavelength: f64,
    /// Detector efficiency.
    pub eta_d: f64,
    /// Coupling efficiency.
    pub eta_c: f64,
    /// Source (laser) efficiency.
    pub eta_s: f64,
    /// Modulator launch efficiency.
    pub beta_mod: f64,
    pub detection: Detection,
}

impl EnergyParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.e_in >= 0.0 && self.e_out >= 0.0) {
            return Err(Error::InvalidParameter("symbol energies must be >= 0".into()));
        }
        if !(self.wavelength > 0.0) {
            return Err(Error::InvalidParameter("wavelength must be > 0".into()));
        }
        for (name, v) in [
            ("eta_d", self.eta_d),
            ("eta_c", self.eta_c),
            ("eta_s", self.eta_s),
            ("beta_mod", self.beta_mod),
        ] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::InvalidParameter(format!("{name} must be in (0, 1], got {v}")));
            }
        }
        Ok(())
    }

    fn transmit_factor(&self) -> f64 {
        match self.detection {
            Detection::DualDetector => 1.0,
            Detection::SingleDetector => 2.0,
        }
    }
}

impl Default for EnergyParams {
    /// Ideal dual-detector unit at 1.55 µm with 100 pJ symbols (the
    /// paper-style conservative assumption).
    fn default() -> Self {
        EnergyParams {
            e_in: 100e-12,
            e_out: 100e-12,
            wavelength: 1.55e-6,
            eta_d: 1.0,
            eta_c: 1.0,
            eta_s: 1.0,
            beta_mod: 1.0,
            detection: Detection::DualDetector,
        }
    }
}

/// Total and per-MAC I/O energy of an m×k · k×n GEMM:
/// E_tot = (mk + nk)·E_in + mn·E_out, E_mac = E_tot/(mnk).
pub fn gemm_energy(m: usize, n: usize, k: usize, params: &EnergyParams) -> (f64, f64) {
    let tf = params.transmit_factor();
    let e_tot = tf * ((m * k + n * k) as f64) * params.e_in + (m * n) as f64 * params.e_out;
    let e_mac = tf * (1.0 / n as f64 + 1.0 / m as f64) * params.e_in
        + (1.0 / k as f64) * params.e_out;
    (e_tot, e_mac)
}

/// Convolution geometry for energy accounting. Padding is carried here so
/// the standard benchmark layers (which pad) can be expressed; the
/// simulator itself runs valid-only convolution on pre-padded inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvDims {
    pub w: usize,
    pub h: usize,
    pub c: usize,
    pub k_x: usize,
    pub k_y: usize,
    pub c_out: usize,
    pub s_x: usize,
    pub s_y: usize,
    pub pad_x: usize,
    pub pad_y: usize,
}

impl ConvDims {
    pub fn new(
        (w, h, c): (usize, usize, usize),
        (k_x, k_y, c_out): (usize, usize, usize),
        (s_x, s_y): (usize, usize),
    ) -> Result<Self> {
        ConvDims::padded((w, h, c), (k_x, k_y, c_out), (s_x, s_y), (0, 0))
    }

    pub fn padded(
        (w, h, c): (usize, usize, usize),
        (k_x, k_y, c_out): (usize, usize, usize),
        (s_x, s_y): (usize, usize),
        (pad_x, pad_y): (usize, usize),
    ) -> Result<Self> {
        if s_x == 0 || s_y == 0 {
            return Err(Error::InvalidStride);
        }
        if k_x == 0 || k_y == 0 || k_x > w + 2 * pad_x || k_y > h + 2 * pad_y {
            return Err(Error::KernelLargerThanImage { kx: k_x, ky: k_y, w, h });
        }
        Ok(ConvDims { w, h, c, k_x, k_y, c_out, s_x, s_y, pad_x, pad_y })
    }

    pub fn w_out(&self) -> usize {
        (self.w + 2 * self.pad_x - self.k_x) / self.s_x + 1
    }

    pub fn h_out(&self) -> usize {
        (self.h + 2 * self.pad_y - self.k_y) / self.s_y + 1
    }
}

/// Amortization coefficients and MAC count of a convolution:
/// c_in = (1/C′ + 1/W′H′)⁻¹, c_out = K_x·K_y·C, MACs = W′H′·K_xK_y·C′·C.
pub fn conv_coefficients(dims: &ConvDims) -> (f64, f64, u64) {
    let spatial = (dims.w_out() * dims.h_out()) as f64;
    let c_in = 1.0 / (1.0 / dims.c_out as f64 + 1.0 / spatial);
    let c_out = (dims.k_x * dims.k_y * dims.c) as f64;
    let macs =
        (dims.w_out() * dims.h_out() * dims.k_x * dims.k_y * dims.c_out * dims.c) as u64;
    (c_in, c_out, macs)
}

/// I/O energy per MAC of a convolution run as GEMM:
/// E_mac = E_in/c_in + E_out/c_out (transmit side doubled for the
/// single-detector scheme).
pub fn conv_energy_per_mac(dims: &ConvDims, params: &EnergyParams) -> f64 {
    let (c_in, c_out, _) = conv_coefficients(dims);
    params.transmit_factor() * params.e_in / c_in + params.e_out / c_out
}

/// Optical energy of `n_mac` photons at the given wavelength: n·hc/λ.
pub fn photon_energy(n_mac: f64, wavelength: f64) -> f64 {
    n_mac * constants::PLANCK * constants::LIGHT_SPEED / wavelength
}

/// Real-device SQL uplift (η_d·η_c·η_s·β_mod)⁻¹ ≥ 1.
pub fn inefficiency_factor(params: &EnergyParams) -> f64 {
    1.0 / (params.eta_d * params.eta_c * params.eta_s * params.beta_mod)
}

/// Integer multiplier families with published gate/transistor counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MultiplierKind {
    WallaceBooth,
    SerialParallel,
    Braun,
    RippleCarryAdder,
    Vedic,
}

impl MultiplierKind {
    pub const ALL: [MultiplierKind; 5] = [
        MultiplierKind::WallaceBooth,
        MultiplierKind::SerialParallel,
        MultiplierKind::Braun,
        MultiplierKind::RippleCarryAdder,
        MultiplierKind::Vedic,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            MultiplierKind::WallaceBooth => "Wallace and Booth",
            MultiplierKind::SerialParallel => "Serial Parallel",
            MultiplierKind::Braun => "Braun Multiplier",
            MultiplierKind::RippleCarryAdder => "Ripple Carry Adder Based",
            MultiplierKind::Vedic => "Vedic Multiplier",
        }
    }
}

pub const BIT_WIDTHS: [u32; 4] = [8, 16, 32, 64];

/// (kind, [gate counts], [transistor counts]) for 8/16/32/64-bit widths.
const GATE_TABLE: [(MultiplierKind, [u64; 4], [u64; 4]); 5] = [
    (MultiplierKind::WallaceBooth, [33, 221, 1077, 4709], [168, 1080, 5208, 22680]),
    (MultiplierKind::SerialParallel, [384, 1536, 6144, 24576], [1920, 7680, 30720, 122880]),
    (MultiplierKind::Braun, [344, 1456, 5984, 24256], [1728, 7296, 29952, 121344]),
    (MultiplierKind::RippleCarryAdder, [96, 384, 1536, 6144], [480, 1920, 7680, 30720]),
    (MultiplierKind::Vedic, [49, 281, 1321, 5705], [252, 1428, 6660, 28644]),
];

/// Gate and transistor count for a multiplier family at a bit width.
pub fn gate_count(kind: MultiplierKind, bits: u32) -> Result<(u64, u64)> {
    let col = BIT_WIDTHS
        .iter()
        .position(|b| *b == bits)
        .ok_or(Error::UnknownMultiplier { kind: kind.name(), bits })?;
    let row = GATE_TABLE
        .iter()
        .find(|(k, _, _)| *k == kind)
        .ok_or(Error::UnknownMultiplier { kind: kind.name(), bits })?;
    Ok((row.1[col], row.2[col]))
}

/// Landauer floor for one multiply: gate count times kT·ln2.
pub fn landauer_limit(kind: MultiplierKind, bits: u32, temperature: f64) -> Result<(u64, f64)> {
    if !(temperature > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "temperature must be > 0 K, got {temperature}"
        )));
    }
    let (gates, _) = gate_count(kind, bits)?;
    Ok((gates, gates as f64 * constants::BOLTZMANN * temperature * std::f64::consts::LN_2))
}

/// One published benchmark convolution row: display dims as printed plus
/// the pre-padded dims that make valid convolution reproduce the printed
/// output size.
#[derive(Debug, Clone, Copy)]
pub struct BenchmarkConvRow {
    pub name: &'static str,
    pub input: (usize, usize, usize),
    pub output: (usize, usize, usize),
    pub kernel: (usize, usize, usize, usize),
    pub stride: usize,
    pub pad: usize,
}

impl BenchmarkConvRow {
    pub fn dims(&self) -> ConvDims {
        ConvDims::padded(
            self.input,
            (self.kernel.0, self.kernel.1, self.kernel.2),
            (self.stride, self.stride),
            (self.pad, self.pad),
        )
        .expect("benchmark rows are valid")
    }
}

/// The five AlexNet convolution layers (kernel dims K_x×K_y×C′×C).
pub fn alexnet_conv_rows() -> [BenchmarkConvRow; 5] {
    [
        BenchmarkConvRow {
            name: "CONV1",
            input: (227, 227, 3),
            output: (55, 55, 96),
            kernel: (11, 11, 96, 3),
            stride: 4,
            pad: 0,
        },
        BenchmarkConvRow {
            name: "CONV2",
            input: (27, 27, 96),
            output: (27, 27, 256),
            kernel: (5, 5, 256, 96),
            stride: 1,
            pad: 2,
        },
        BenchmarkConvRow {
            name: "CONV3",
            input: (13, 13, 256),
            output: (13, 13, 384),
            kernel: (3, 3, 384, 256),
            stride: 1,
            pad: 1,
        },
        BenchmarkConvRow {
            name: "CONV4",
            input: (13, 13, 384),
            output: (13, 13, 384),
            kernel: (3, 3, 384, 384),
            stride: 1,
            pad: 1,
        },
        BenchmarkConvRow {
            name: "CONV5",
            input: (13, 13, 384),
            output: (13, 13, 256),
            kernel: (3, 3, 256, 384),
            stride: 1,
            pad: 1,
        },
    ]
}

/// MAC-weighted harmonic mean of an amortization coefficient: total MACs
/// divided by total symbols, Σm / Σ(m/c).
pub fn mac_weighted_coefficient(rows: &[(u64, f64)]) -> f64 {
    let total: f64 = rows.iter().map(|(m, _)| *m as f64).sum();
    let symbols: f64 = rows.iter().map(|(m, c)| *m as f64 / c).sum();
    total / symbols
}

/// One point of an error-vs-photons sweep curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub n_mac: f64,
    pub error_rate: f64,
}

/// Result of a standard-quantum-limit extraction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SqlExtraction {
    /// Photons/MAC at the threshold crossing.
    pub n_mac: f64,
    /// (low, high) photons/MAC from the error-bar band thresholds.
    pub n_mac_bars: (f64, f64),
    /// The curve already satisfied the threshold at its smallest point.
    pub already_below: bool,
}

impl SqlExtraction {
    pub fn e_mac(&self, wavelength: f64) -> f64 {
        photon_energy(self.n_mac, wavelength)
    }

    pub fn e_mac_bars(&self, wavelength: f64) -> (f64, f64) {
        (photon_energy(self.n_mac_bars.0, wavelength), photon_energy(self.n_mac_bars.1, wavelength))
    }
}

/// Locate the smallest n_mac above which the curve stays at or below
/// `factor`·canonical. Scans for the last point above the cutoff and
/// interpolates to the next point, linearly in error against log(n_mac).
/// Returns (n_mac, already_below).
fn cross_threshold(points: &[CurvePoint], cutoff: f64, clamp: bool) -> Result<(f64, bool)> {
    let above = points.iter().rposition(|p| p.error_rate > cutoff);
    match above {
        None => Ok((points[0].n_mac, true)),
        Some(i) if i + 1 == points.len() => {
            if clamp {
                Ok((points[i].n_mac, false))
            } else {
                Err(Error::NoCrossing)
            }
        }
        Some(i) => {
            let (a, b) = (points[i], points[i + 1]);
            let frac = (a.error_rate - cutoff) / (a.error_rate - b.error_rate);
            let log_n = a.n_mac.ln() + frac * (b.n_mac.ln() - a.n_mac.ln());
            Ok((log_n.exp(), false))
        }
    }
}

/// Extract the standard quantum limit: the photons/MAC where the error
/// curve crosses `threshold`·canonical_error, with error bars at the
/// `band` thresholds. Bars clamp to the sweep endpoints; the central
/// threshold itself must be crossed within the sweep.
pub fn sql_extract(
    points: &[CurvePoint],
    canonical_error: f64,
    threshold: f64,
    band: (f64, f64),
) -> Result<SqlExtraction> {
    if points.len() < 2 {
        return Err(Error::CurveTooShort(points.len()));
    }
    if !(canonical_error > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "canonical error must be > 0, got {canonical_error}"
        )));
    }
    if points.windows(2).any(|w| w[0].n_mac >= w[1].n_mac) {
        return Err(Error::InvalidParameter(
            "sweep points must be strictly ascending in n_mac".into(),
        ));
    }

    let (n_mac, already_below) = cross_threshold(points, threshold * canonical_error, false)?;
    // The looser band edge crosses earlier (lower n), the tighter later.
    let (n_lo, _) = cross_threshold(points, band.1 * canonical_error, true)?;
    let (n_hi, _) = cross_threshold(points, band.0 * canonical_error, true)?;
    Ok(SqlExtraction { n_mac, n_mac_bars: (n_lo, n_hi), already_below })
}
