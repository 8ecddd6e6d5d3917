use thiserror::Error;

/// Errors raised by the simulator core.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// A photon budget was requested on an all-zero signal; the scaling
    /// factor inversion divides by the signal norm, so this configuration
    /// is unphysical rather than silently zero.
    #[error("zero-norm {signal} signal cannot carry a photon budget of {n_mac} photons/MAC")]
    ZeroNormSignal { signal: &'static str, n_mac: f64 },

    /// A noisy operation was invoked with a zero photon-budget component.
    /// Zero photons on one arm makes the logical rescale unbounded; use
    /// Noiseless mode for the zero-photon limit.
    #[error("photon budget component is zero (input {input}, weight {weight}); use Noiseless mode instead")]
    ZeroBudget { input: f64, weight: f64 },

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("kernel {kx}x{ky} does not fit in image {w}x{h}")]
    KernelLargerThanImage { kx: usize, ky: usize, w: usize, h: usize },

    #[error("invalid stride: strides must be >= 1")]
    InvalidStride,

    #[error("shape chain violation at layer {layer}: {reason}")]
    ShapeChain { layer: usize, reason: String },

    #[error("cannot classify empty logits")]
    EmptyLogits,

    #[error("empty dataset")]
    EmptyDataset,

    #[error("noise policy lists {given} budgets but the network has {expected} noisy layers")]
    PolicyLength { given: usize, expected: usize },

    #[error("missing forward tape for layer {0}")]
    MissingTape(usize),

    #[error("no gate-count entry for {kind} at {bits} bits")]
    UnknownMultiplier { kind: &'static str, bits: u32 },

    #[error("sweep curve never rises above the threshold within its range")]
    NoCrossing,

    #[error("sweep curve needs at least two points, got {0}")]
    CurveTooShort(usize),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

pub type Result<T> = std::result::Result<T, Error>;
