//! Convolution as GEMM via patching, plus the direct-loop oracle.
//!
//! Images are `Array3<f64>` indexed `[x][y][channel]` (W×H×C); kernels are
//! `Array4<f64>` indexed `[i][j][out_channel][in_channel]` (K_x×K_y×C′×C).
//! Only valid (no-pad) convolution is supported; padded variants are
//! expressed by pre-padding the input.
//!
//! Patch layout is frozen for weight-file compatibility:
//!
//! * patch-matrix row `r = (c·K_x + i)·K_y + j` — channel slowest, then the
//!   x offset, then the y offset;
//! * patch-matrix column `p = ox·H′ + oy` for output position (ox, oy).
//!
//! [`kernel_to_matrix`] uses the same row order, so `K·X` evaluates the
//! convolution exactly; [`conv_direct`] is the independent check of that
//! correspondence.

use ndarray::{Array2, Array3, ArrayView2, ArrayView3, ArrayView4};

use crate::error::{Error, Result};
use crate::noise::{noisy_gemm, NoiseConfig, PhotonBudget};
use crate::rng::Stream;

/// Geometry of a patch extraction, kept alongside the matrix so gradients
/// can be folded back to image space.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGeometry {
    pub w: usize,
    pub h: usize,
    pub c: usize,
    pub k_x: usize,
    pub k_y: usize,
    pub s_x: usize,
    pub s_y: usize,
    pub w_out: usize,
    pub h_out: usize,
}

impl PatchGeometry {
    pub fn new(
        (w, h, c): (usize, usize, usize),
        (k_x, k_y): (usize, usize),
        (s_x, s_y): (usize, usize),
    ) -> Result<Self> {
        if s_x == 0 || s_y == 0 {
            return Err(Error::InvalidStride);
        }
        if k_x == 0 || k_y == 0 || k_x > w || k_y > h {
            return Err(Error::KernelLargerThanImage { kx: k_x, ky: k_y, w, h });
        }
        Ok(PatchGeometry {
            w,
            h,
            c,
            k_x,
            k_y,
            s_x,
            s_y,
            w_out: (w - k_x) / s_x + 1,
            h_out: (h - k_y) / s_y + 1,
        })
    }

    /// Rows of the patch matrix: K_x·K_y·C.
    pub fn patch_len(&self) -> usize {
        self.k_x * self.k_y * self.c
    }

    /// Columns of the patch matrix: W′·H′.
    pub fn positions(&self) -> usize {
        self.w_out * self.h_out
    }
}

/// Image patches rearranged into a dense (K_x·K_y·C) × (W′·H′) matrix.
/// Overlapping patches duplicate data; that redundancy is the price of
/// running the convolution as a single GEMM.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchMatrix {
    pub data: Array2<f64>,
    pub geometry: PatchGeometry,
}

/// Extract all stride-spaced patches of an image into a patch matrix.
pub fn im2col(
    image: ArrayView3<f64>,
    k_x: usize,
    k_y: usize,
    s_x: usize,
    s_y: usize,
) -> Result<PatchMatrix> {
    let (w, h, c) = image.dim();
    let geom = PatchGeometry::new((w, h, c), (k_x, k_y), (s_x, s_y))?;
    let mut data = Array2::zeros((geom.patch_len(), geom.positions()));
    for ox in 0..geom.w_out {
        for oy in 0..geom.h_out {
            let p = ox * geom.h_out + oy;
            for ch in 0..c {
                for i in 0..k_x {
                    for j in 0..k_y {
                        let r = (ch * k_x + i) * k_y + j;
                        data[[r, p]] = image[[ox * s_x + i, oy * s_y + j, ch]];
                    }
                }
            }
        }
    }
    Ok(PatchMatrix { data, geometry: geom })
}

/// Fold a patch-space matrix back to image space, summing contributions of
/// overlapping patches. This is the transpose of [`im2col`], used to push
/// gradients from patch space back to the input image.
pub fn fold_patches(patches: ArrayView2<f64>, geom: &PatchGeometry) -> Array3<f64> {
    debug_assert_eq!(patches.dim(), (geom.patch_len(), geom.positions()));
    let mut image = Array3::zeros((geom.w, geom.h, geom.c));
    for ox in 0..geom.w_out {
        for oy in 0..geom.h_out {
            let p = ox * geom.h_out + oy;
            for ch in 0..geom.c {
                for i in 0..geom.k_x {
                    for j in 0..geom.k_y {
                        let r = (ch * geom.k_x + i) * geom.k_y + j;
                        image[[ox * geom.s_x + i, oy * geom.s_y + j, ch]] += patches[[r, p]];
                    }
                }
            }
        }
    }
    image
}

/// Rearrange a K_x×K_y×C′×C kernel into the dense C′ × (K_x·K_y·C) matrix
/// whose row order matches the patch-matrix column layout.
pub fn kernel_to_matrix(kernel: ArrayView4<f64>) -> Array2<f64> {
    let (k_x, k_y, c_out, c_in) = kernel.dim();
    let mut m = Array2::zeros((c_out, k_x * k_y * c_in));
    for k in 0..c_out {
        for ch in 0..c_in {
            for i in 0..k_x {
                for j in 0..k_y {
                    m[[k, (ch * k_x + i) * k_y + j]] = kernel[[i, j, k, ch]];
                }
            }
        }
    }
    m
}

/// Inverse of [`kernel_to_matrix`]: fold a C′ × (K_x·K_y·C) matrix (e.g. a
/// patch-space weight gradient) back into kernel shape.
pub fn matrix_to_kernel(
    m: ArrayView2<f64>,
    k_x: usize,
    k_y: usize,
    c_in: usize,
) -> ndarray::Array4<f64> {
    let c_out = m.nrows();
    debug_assert_eq!(m.ncols(), k_x * k_y * c_in);
    let mut kernel = ndarray::Array4::zeros((k_x, k_y, c_out, c_in));
    for k in 0..c_out {
        for ch in 0..c_in {
            for i in 0..k_x {
                for j in 0..k_y {
                    kernel[[i, j, k, ch]] = m[[k, (ch * k_x + i) * k_y + j]];
                }
            }
        }
    }
    kernel
}

/// Exact strided convolution by direct summation:
/// y\[ox\]\[oy\]\[k\] = Σ_{i,j,l} K\[i\]\[j\]\[k\]\[l\] · x\[s_x·ox+i\]\[s_y·oy+j\]\[l\].
/// Deliberately naive — this is the oracle that certifies the patch layout.
pub fn conv_direct(
    kernel: ArrayView4<f64>,
    image: ArrayView3<f64>,
    s_x: usize,
    s_y: usize,
) -> Result<Array3<f64>> {
    let (k_x, k_y, c_out, c_in) = kernel.dim();
    let (w, h, c) = image.dim();
    if c != c_in {
        return Err(Error::DimensionMismatch(format!(
            "kernel expects {c_in} input channels, image has {c}"
        )));
    }
    let geom = PatchGeometry::new((w, h, c), (k_x, k_y), (s_x, s_y))?;
    let mut out = Array3::zeros((geom.w_out, geom.h_out, c_out));
    for ox in 0..geom.w_out {
        for oy in 0..geom.h_out {
            for k in 0..c_out {
                let mut acc = 0.0f64;
                for i in 0..k_x {
                    for j in 0..k_y {
                        for l in 0..c_in {
                            acc += kernel[[i, j, k, l]]
                                * image[[ox * s_x + i, oy * s_y + j, l]];
                        }
                    }
                }
                out[[ox, oy, k]] = acc;
            }
        }
    }
    Ok(out)
}

/// Convolution evaluated as one (optionally noisy) GEMM over the patch
/// matrix; returns the W′×H′×C′ output and the optical photons consumed
/// (budget.total() · W′H′·K_xK_y·C′·C when noise is enabled).
pub fn conv_via_gemm(
    kernel: ArrayView4<f64>,
    image: ArrayView3<f64>,
    strides: (usize, usize),
    noise: &NoiseConfig,
    budget: PhotonBudget,
    stream: &Stream,
) -> Result<(Array3<f64>, f64)> {
    let (_, _, c_out, c_in) = kernel.dim();
    if image.dim().2 != c_in {
        return Err(Error::DimensionMismatch(format!(
            "kernel expects {c_in} input channels, image has {}",
            image.dim().2
        )));
    }
    let patches = im2col(image, kernel.dim().0, kernel.dim().1, strides.0, strides.1)?;
    let k_mat = kernel_to_matrix(kernel);
    let product = noisy_gemm(k_mat.view(), patches.data.view(), budget, noise, stream)?;

    let geom = patches.geometry;
    let mut out = Array3::zeros((geom.w_out, geom.h_out, c_out));
    for ox in 0..geom.w_out {
        for oy in 0..geom.h_out {
            for k in 0..c_out {
                out[[ox, oy, k]] = product.values[[k, ox * geom.h_out + oy]];
            }
        }
    }
    Ok((out, product.photons_consumed))
}

/// MACs in a convolution with this geometry and C′ output channels:
/// W′·H′·K_x·K_y·C′·C.
pub fn conv_mac_count(geom: &PatchGeometry, c_out: usize) -> u64 {
    (geom.positions() * geom.patch_len() * c_out) as u64
}
