//! Kernel, mixture model and the two regression functions (softmax-gated SMoE and plain RBF sum).
//!
//! Coordinates are continuous: pixel `(row, col)` of an image described by a [`Domain`] sits at
//! `((col + 0.5) / coord_scale, (row + 0.5) / coord_scale)`. Global models use the image width as
//! `coord_scale`; local block models use the block side.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::GrayImage;

/// Exponent gap (relative to the per-point maximum for gates, absolute for RBF sums) below which
/// a kernel's response is treated as exactly zero. `exp(-40)` is below `f64` resolution of any
/// sum it would join.
pub(crate) const EXP_CUTOFF: f64 = 40.0;

/// Smallest gate denominator magnitude accepted before reporting a degenerate gate.
pub const GATE_DENOMINATOR_GUARD: f64 = 1e-12;

/// One expert/gate unit. `b` holds the lower-triangular factor `[[b11, 0], [b21, b22]]` with
/// `Σ⁻¹ = BᵀB`, stored as `[b11, b21, b22]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Kernel {
    pub mu: [f64; 2],
    pub b: [f64; 3],
    pub pi: f64,
    pub m: f64,
}

impl Kernel {
    /// Radial kernel with standard deviation `sigma` (in model units) on both axes.
    pub fn radial(mu: [f64; 2], sigma: f64, pi: f64, m: f64) -> Self {
        Self {
            mu,
            b: [1.0 / sigma, 0.0, 1.0 / sigma],
            pi,
            m,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.mu.iter().chain(&self.b).all(|v| v.is_finite())
            && self.pi.is_finite()
            && self.m.is_finite()
    }

    /// `B (x - μ)`.
    #[inline]
    pub fn whiten(&self, x: [f64; 2]) -> [f64; 2] {
        let d0 = x[0] - self.mu[0];
        let d1 = x[1] - self.mu[1];
        [self.b[0] * d0, self.b[1] * d0 + self.b[2] * d1]
    }

    /// Squared Mahalanobis distance `(x-μ)ᵀ BᵀB (x-μ)`.
    #[inline]
    pub fn mahalanobis_sq(&self, x: [f64; 2]) -> f64 {
        let u = self.whiten(x);
        u[0] * u[0] + u[1] * u[1]
    }

    /// `Σ⁻¹ = BᵀB` as `[[a, b], [b, c]]`.
    pub fn precision(&self) -> [[f64; 2]; 2] {
        let [b11, b21, b22] = self.b;
        [
            [b11 * b11 + b21 * b21, b21 * b22],
            [b21 * b22, b22 * b22],
        ]
    }

    /// Covariance `Σ = (BᵀB)⁻¹`.
    pub fn covariance(&self) -> [[f64; 2]; 2] {
        let [[a, b], [_, c]] = self.precision();
        let det = a * c - b * b;
        [[c / det, -b / det], [-b / det, a / det]]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// `y(x) = Σ m_j w_j(x)` with softmax gates.
    #[serde(rename = "smoe")]
    SmoeGating,
    /// `y(x) = Σ m_j K_j(x)`.
    #[serde(rename = "rbf")]
    RbfSum,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    pub image_width: usize,
    pub image_height: usize,
    /// Pixels per model unit.
    pub coord_scale: f64,
}

impl Domain {
    /// Global convention: coordinates are pixel positions divided by the image width.
    pub fn for_image(width: usize, height: usize) -> Self {
        Self {
            image_width: width,
            image_height: height,
            coord_scale: width as f64,
        }
    }

    #[inline]
    pub fn pixel_center(&self, row: usize, col: usize) -> [f64; 2] {
        [
            (col as f64 + 0.5) / self.coord_scale,
            (row as f64 + 0.5) / self.coord_scale,
        ]
    }

    /// Maps a model coordinate back to the pixel containing it, clamped to the image.
    pub fn pixel_at(&self, x: [f64; 2]) -> (usize, usize) {
        let col = (x[0] * self.coord_scale).floor();
        let row = (x[1] * self.coord_scale).floor();
        (
            row.clamp(0.0, (self.image_height - 1) as f64) as usize,
            col.clamp(0.0, (self.image_width - 1) as f64) as usize,
        )
    }

    /// Extent of the domain in model units: `(width, height)`.
    pub fn extent(&self) -> [f64; 2] {
        [
            self.image_width as f64 / self.coord_scale,
            self.image_height as f64 / self.coord_scale,
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureModel {
    pub kernels: Vec<Kernel>,
    pub mode: Mode,
    pub domain: Domain,
}

/// Softmax gate values at one point, one per kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct GateVector {
    pub values: Vec<f64>,
}

impl GateVector {
    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }
}

fn check_point(x: [f64; 2]) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::invalid(format!("non-finite coordinate {x:?}")))
    }
}

/// `exp(-½ (x-μ)ᵀ BᵀB (x-μ))`.
pub fn kernel_response(k: &Kernel, x: [f64; 2]) -> Result<f64> {
    if !k.is_finite() {
        return Err(Error::invalid(format!("non-finite kernel {k:?}")));
    }
    check_point(x)?;
    Ok((-0.5 * k.mahalanobis_sq(x)).exp())
}

/// Per-point evaluation with reusable scratch space. Used by rendering, the loss and the
/// gradients so all three see identical numbers.
pub(crate) struct PointEval {
    /// Exponents `e_j = -½ Mahalanobis²`, then (after evaluation) the shifted responses.
    pub(crate) expo: Vec<f64>,
    pub(crate) resp: Vec<f64>,
}

pub(crate) struct PointValue {
    pub(crate) y: f64,
    /// Gate denominator `Σ π_i exp(e_i - e_max)` (SMoE only; 1 for RBF).
    pub(crate) denom: f64,
}

impl PointEval {
    pub(crate) fn new(n: usize) -> Self {
        Self {
            expo: vec![0.0; n],
            resp: vec![0.0; n],
        }
    }

    /// Evaluates the regression at `x`. Afterwards `resp[j]` holds `exp(e_j - e_max)` for SMoE
    /// (so the gate is `π_j resp[j] / denom`) or `exp(e_j)` for RBF.
    pub(crate) fn eval(&mut self, model: &MixtureModel, x: [f64; 2]) -> Result<PointValue> {
        let n = model.kernels.len();
        if self.expo.len() != n {
            self.expo.resize(n, 0.0);
            self.resp.resize(n, 0.0);
        }
        let mut e_max = f64::NEG_INFINITY;
        for (e, k) in self.expo.iter_mut().zip(&model.kernels) {
            *e = -0.5 * k.mahalanobis_sq(x);
            e_max = e_max.max(*e);
        }
        match model.mode {
            Mode::SmoeGating => {
                let mut denom = 0.0;
                for ((r, e), k) in self.resp.iter_mut().zip(&self.expo).zip(&model.kernels) {
                    let shifted = *e - e_max;
                    *r = if shifted < -EXP_CUTOFF { 0.0 } else { shifted.exp() };
                    denom += k.pi * *r;
                }
                if !(denom.abs() >= GATE_DENOMINATOR_GUARD) {
                    return Err(Error::DegenerateGate {
                        x: x[0],
                        y: x[1],
                        denominator: denom,
                        pixel: None,
                    });
                }
                // Per-gate division keeps a lone gate at exactly 1.
                let mut y = 0.0;
                for (r, k) in self.resp.iter().zip(&model.kernels) {
                    if *r != 0.0 {
                        y += k.m * (k.pi * *r / denom);
                    }
                }
                Ok(PointValue { y, denom })
            }
            Mode::RbfSum => {
                let mut y = 0.0;
                for ((r, e), k) in self.resp.iter_mut().zip(&self.expo).zip(&model.kernels) {
                    *r = if *e < -EXP_CUTOFF { 0.0 } else { e.exp() };
                    y += k.m * *r;
                }
                Ok(PointValue { y, denom: 1.0 })
            }
        }
    }
}

impl MixtureModel {
    pub fn new(kernels: Vec<Kernel>, mode: Mode, domain: Domain) -> Result<Self> {
        let model = Self {
            kernels,
            mode,
            domain,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn len(&self) -> usize {
        self.kernels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kernels.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernels.is_empty() {
            return Err(Error::EmptyModel);
        }
        if !(self.domain.coord_scale > 0.0 && self.domain.coord_scale.is_finite()) {
            return Err(Error::invalid(format!(
                "coord_scale must be positive, got {}",
                self.domain.coord_scale
            )));
        }
        if self.domain.image_width == 0 || self.domain.image_height == 0 {
            return Err(Error::invalid("domain dimensions must be positive"));
        }
        if let Some(i) = self.kernels.iter().position(|k| !k.is_finite()) {
            return Err(Error::invalid(format!("kernel {i} has non-finite parameters")));
        }
        Ok(())
    }

    pub fn pi_sum(&self) -> f64 {
        self.kernels.iter().map(|k| k.pi).sum()
    }

    /// Softmax gates at `x` (SMoE mode only).
    pub fn eval_gates(&self, x: [f64; 2]) -> Result<GateVector> {
        if self.mode != Mode::SmoeGating {
            return Err(Error::invalid("gates are only defined in SMoE gating mode"));
        }
        self.validate()?;
        check_point(x)?;
        let mut ev = PointEval::new(self.len());
        let v = ev.eval(self, x)?;
        let values = ev
            .resp
            .iter()
            .zip(&self.kernels)
            .map(|(r, k)| k.pi * r / v.denom)
            .collect();
        Ok(GateVector { values })
    }

    /// Regression value at `x`; not clamped.
    pub fn eval_point(&self, x: [f64; 2]) -> Result<f64> {
        self.validate()?;
        check_point(x)?;
        Ok(PointEval::new(self.len()).eval(self, x)?.y)
    }

    /// Samples the model at every pixel center of an `out_width x out_height` raster spanning the
    /// model's domain. The result is clamped to `[0, 1]`.
    pub fn render(&self, out_width: usize, out_height: usize) -> Result<GrayImage> {
        if out_width == 0 || out_height == 0 {
            return Err(Error::invalid("render dimensions must be positive"));
        }
        self.validate()?;
        let sx = self.domain.image_width as f64 / out_width as f64 / self.domain.coord_scale;
        let sy = self.domain.image_height as f64 / out_height as f64 / self.domain.coord_scale;
        let mut data = vec![0.0; out_width * out_height];
        let rows: Vec<Result<()>> = data
            .par_chunks_mut(out_width)
            .enumerate()
            .map(|(r, row)| {
                let mut ev = PointEval::new(self.len());
                let y = (r as f64 + 0.5) * sy;
                for (c, out) in row.iter_mut().enumerate() {
                    let x = [(c as f64 + 0.5) * sx, y];
                    match ev.eval(self, x) {
                        Ok(v) => *out = v.y.clamp(0.0, 1.0),
                        Err(Error::DegenerateGate {
                            x, y, denominator, ..
                        }) => {
                            return Err(Error::DegenerateGate {
                                x,
                                y,
                                denominator,
                                pixel: Some(r * out_width + c),
                            })
                        }
                        Err(e) => return Err(e),
                    }
                }
                Ok(())
            })
            .collect();
        rows.into_iter().collect::<Result<()>>()?;
        GrayImage::new(out_width, out_height, data)
    }

    /// Renders at the model's native resolution.
    pub fn render_native(&self) -> Result<GrayImage> {
        self.render(self.domain.image_width, self.domain.image_height)
    }
}
