//! L1-regularized MSE and its analytic gradient.
//!
//! For SMoE gating with `w_j = π_j K_j / D` and `y = Σ m_j w_j`:
//! `∂y/∂m_j = w_j`, `∂y/∂π_j = (K_j / D)(m_j - y)` and, through the exponent
//! `e_j = -½|B_j d_j|²`, `∂y/∂e_j = w_j (m_j - y)`. For the RBF sum `∂y/∂m_j = K_j` and
//! `∂y/∂e_j = m_j K_j`; π does not enter the data term.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::model::{Mode, MixtureModel, PointEval};

/// Pixels per accumulation chunk. Chunk partials are always combined in chunk order, so
/// results do not depend on how many workers evaluated them.
const CHUNK: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub mse: f64,
    pub l1: f64,
    pub sample_count: usize,
}

impl LossReport {
    pub fn psnr(&self) -> f64 {
        crate::metrics::psnr_from_mse(self.mse)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct KernelGrad {
    pub mu: [f64; 2],
    pub b: [f64; 3],
    pub pi: f64,
    pub m: f64,
}

/// Per-kernel gradients, same order as the model's kernel list.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGradients {
    pub kernels: Vec<KernelGrad>,
}

impl ParamGradients {
    pub fn len(&self) -> usize {
        self.kernels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kernels.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.kernels.iter().all(|g| {
            g.mu.iter().chain(&g.b).all(|v| v.is_finite()) && g.pi.is_finite() && g.m.is_finite()
        })
    }
}

/// The sparsity term `λ Σ π_j`, optionally on `|π_j|`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct L1Penalty {
    pub lambda: f64,
    pub absolute: bool,
}

impl L1Penalty {
    pub fn signed(lambda: f64) -> Self {
        Self {
            lambda,
            absolute: false,
        }
    }

    fn value(&self, model: &MixtureModel) -> f64 {
        let s: f64 = if self.absolute {
            model.kernels.iter().map(|k| k.pi.abs()).sum()
        } else {
            model.pi_sum()
        };
        self.lambda * s
    }

    fn derivative(&self, pi: f64) -> f64 {
        if self.absolute {
            self.lambda * pi.signum()
        } else {
            self.lambda
        }
    }
}

fn sample_indices(image: &GrayImage, region: Option<&[bool]>) -> Result<Vec<usize>> {
    match region {
        None => Ok((0..image.len()).collect()),
        Some(mask) => {
            if mask.len() != image.len() {
                return Err(Error::DimensionMismatch(format!(
                    "region mask has {} entries for {} pixels",
                    mask.len(),
                    image.len()
                )));
            }
            let idx: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
            if idx.is_empty() {
                return Err(Error::invalid("region selects no pixels"));
            }
            Ok(idx)
        }
    }
}

fn check_domain(model: &MixtureModel, image: &GrayImage) -> Result<()> {
    model.validate()?;
    if model.domain.image_width != image.width() || model.domain.image_height != image.height() {
        return Err(Error::DimensionMismatch(format!(
            "model domain {}x{} vs image {}x{}",
            model.domain.image_width,
            model.domain.image_height,
            image.width(),
            image.height()
        )));
    }
    Ok(())
}

/// Sum of squared residuals and, optionally, the un-normalized data-term gradient
/// `Σ_x 2 r(x) ∂y/∂θ` laid out as 7 values per kernel.
fn chunk_partial(
    model: &MixtureModel,
    image: &GrayImage,
    pixels: &[usize],
    with_grad: bool,
) -> Result<(f64, Vec<f64>)> {
    let n = model.len();
    let mut ev = PointEval::new(n);
    let mut sse = 0.0;
    let mut acc = if with_grad { vec![0.0; 7 * n] } else { Vec::new() };
    let w = image.width();
    for &p in pixels {
        let (row, col) = (p / w, p % w);
        let x = model.domain.pixel_center(row, col);
        let v = ev.eval(model, x).map_err(|e| match e {
            Error::DegenerateGate {
                x, y, denominator, ..
            } => Error::DegenerateGate {
                x,
                y,
                denominator,
                pixel: Some(p),
            },
            e => e,
        })?;
        let r = v.y - image.data()[p];
        sse += r * r;
        if !with_grad {
            continue;
        }
        let s = 2.0 * r;
        for (j, k) in model.kernels.iter().enumerate() {
            let resp = ev.resp[j];
            if resp == 0.0 {
                continue;
            }
            let a = &mut acc[7 * j..7 * j + 7];
            let de = match model.mode {
                Mode::SmoeGating => {
                    let ratio = resp / v.denom;
                    let gate = k.pi * ratio;
                    let q = s * ratio * (k.m - v.y);
                    a[5] += q;
                    a[6] += s * gate;
                    q * k.pi
                }
                Mode::RbfSum => {
                    a[6] += s * resp;
                    s * k.m * resp
                }
            };
            let d0 = x[0] - k.mu[0];
            let d1 = x[1] - k.mu[1];
            let u0 = k.b[0] * d0;
            let u1 = k.b[1] * d0 + k.b[2] * d1;
            a[0] += de * (k.b[0] * u0 + k.b[1] * u1);
            a[1] += de * (k.b[2] * u1);
            a[2] -= de * u0 * d0;
            a[3] -= de * u1 * d0;
            a[4] -= de * u1 * d1;
        }
    }
    Ok((sse, acc))
}

pub(crate) fn evaluate(
    model: &MixtureModel,
    image: &GrayImage,
    region: Option<&[bool]>,
    penalty: L1Penalty,
    with_grad: bool,
) -> Result<(LossReport, Option<ParamGradients>)> {
    check_domain(model, image)?;
    let idx = sample_indices(image, region)?;
    let partials: Vec<Result<(f64, Vec<f64>)>> = if idx.len() > CHUNK {
        idx.par_chunks(CHUNK)
            .map(|c| chunk_partial(model, image, c, with_grad))
            .collect()
    } else {
        vec![chunk_partial(model, image, &idx, with_grad)]
    };
    let n = model.len();
    let mut sse = 0.0;
    let mut acc = if with_grad { vec![0.0; 7 * n] } else { Vec::new() };
    for part in partials {
        let (s, a) = part?;
        sse += s;
        for (t, v) in acc.iter_mut().zip(&a) {
            *t += v;
        }
    }
    let count = idx.len();
    let mse = sse / count as f64;
    let l1 = penalty.value(model);
    let report = LossReport {
        total: mse + l1,
        mse,
        l1,
        sample_count: count,
    };
    let grads = with_grad.then(|| {
        let inv = 1.0 / count as f64;
        let kernels = model
            .kernels
            .iter()
            .zip(acc.chunks_exact(7))
            .map(|(k, a)| KernelGrad {
                mu: [a[0] * inv, a[1] * inv],
                b: [a[2] * inv, a[3] * inv, a[4] * inv],
                pi: a[5] * inv + penalty.derivative(k.pi),
                m: a[6] * inv,
            })
            .collect();
        ParamGradients { kernels }
    });
    Ok((report, grads))
}

/// `mean((y - y_p)²) + λ Σ π_j` over the pixels selected by `region` (all pixels when `None`).
pub fn compute_loss(
    model: &MixtureModel,
    image: &GrayImage,
    region: Option<&[bool]>,
    lambda: f64,
) -> Result<LossReport> {
    Ok(evaluate(model, image, region, L1Penalty::signed(lambda), false)?.0)
}

/// Loss together with its exact gradient with respect to every kernel parameter.
pub fn compute_gradients(
    model: &MixtureModel,
    image: &GrayImage,
    region: Option<&[bool]>,
    lambda: f64,
) -> Result<(LossReport, ParamGradients)> {
    let (report, grads) = evaluate(model, image, region, L1Penalty::signed(lambda), true)?;
    Ok((report, grads.expect("gradients requested")))
}
