//! PSNR and SSIM with peak value 1.0.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::GrayImage;

/// Reported PSNR when the error is zero (or below it).
pub const PSNR_CAP_DB: f64 = 99.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QualityScore {
    pub psnr_db: f64,
    pub ssim: f64,
}

/// `10 log10(1 / mse)`, capped at [`PSNR_CAP_DB`].
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP_DB;
    }
    (10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB)
}

fn same_dims(a: &GrayImage, b: &GrayImage) -> Result<()> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(Error::DimensionMismatch(format!(
            "{}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    Ok(())
}

pub fn mse(a: &GrayImage, b: &GrayImage) -> Result<f64> {
    same_dims(a, b)?;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(sum / a.len() as f64)
}

pub fn psnr(a: &GrayImage, b: &GrayImage) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Valid-region separable filtering: output is `(w - 10) x (h - 10)`.
fn filter_valid(src: &[f64], w: usize, h: usize, win: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = w - SSIM_WINDOW + 1;
    let oh = h - SSIM_WINDOW + 1;
    let mut horiz = vec![0.0; ow * h];
    for r in 0..h {
        for c in 0..ow {
            let row = &src[r * w + c..r * w + c + SSIM_WINDOW];
            horiz[r * ow + c] = row.iter().zip(win).map(|(v, k)| v * k).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = (0..SSIM_WINDOW).map(|i| horiz[(r + i) * ow + c] * win[i]).sum();
        }
    }
    out
}

/// Mean SSIM over all positions where the 11x11 Gaussian window (σ = 1.5) fits.
pub fn ssim(a: &GrayImage, b: &GrayImage) -> Result<f64> {
    same_dims(a, b)?;
    let (w, h) = (a.width(), a.height());
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {w}x{h}"
        )));
    }
    let win = gaussian_window();
    let x = a.data();
    let y = b.data();
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(u, v)| u * v).collect();
    let mu_x = filter_valid(x, w, h, &win);
    let mu_y = filter_valid(y, w, h, &win);
    let e_xx = filter_valid(&xx, w, h, &win);
    let e_yy = filter_valid(&yy, w, h, &win);
    let e_xy = filter_valid(&xy, w, h, &win);
    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    let mut total = 0.0;
    for i in 0..mu_x.len() {
        let (mx, my) = (mu_x[i], mu_y[i]);
        let vx = e_xx[i] - mx * mx;
        let vy = e_yy[i] - my * my;
        let cov = e_xy[i] - mx * my;
        total += ((2.0 * mx * my + c1) * (2.0 * cov + c2))
            / ((mx * mx + my * my + c1) * (vx + vy + c2));
    }
    Ok((total / mu_x.len() as f64).clamp(-1.0, 1.0))
}

pub fn quality(reference: &GrayImage, reconstruction: &GrayImage) -> Result<QualityScore> {
    Ok(QualityScore {
        psnr_db: psnr(reference, reconstruction)?,
        ssim: ssim(reference, reconstruction)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noisy(seed: u64, w: usize, h: usize) -> GrayImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        GrayImage::from_fn(w, h, |r, c| {
            0.5 + 0.3 * ((r as f64) * 0.2).sin() * ((c as f64) * 0.13).cos()
                + rng.random_range(-0.15..0.15)
        })
        .unwrap()
    }

    /// Direct per-window evaluation with no separable filtering and no shared intermediates.
    fn ssim_reference(a: &GrayImage, b: &GrayImage) -> f64 {
        let n = 11;
        let mut g = vec![vec![0.0; n]; n];
        let mut s = 0.0;
        for (i, row) in g.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                let di = i as f64 - 5.0;
                let dj = j as f64 - 5.0;
                *v = (-(di * di + dj * dj) / (2.0 * 1.5 * 1.5)).exp();
                s += *v;
            }
        }
        let mut acc = 0.0;
        let mut count = 0;
        for r0 in 0..=a.height() - n {
            for c0 in 0..=a.width() - n {
                let (mut mx, mut my) = (0.0, 0.0);
                for i in 0..n {
                    for j in 0..n {
                        let wgt = g[i][j] / s;
                        mx += wgt * a.get(r0 + i, c0 + j);
                        my += wgt * b.get(r0 + i, c0 + j);
                    }
                }
                let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
                for i in 0..n {
                    for j in 0..n {
                        let wgt = g[i][j] / s;
                        let dx = a.get(r0 + i, c0 + j) - mx;
                        let dy = b.get(r0 + i, c0 + j) - my;
                        vx += wgt * dx * dx;
                        vy += wgt * dy * dy;
                        cov += wgt * dx * dy;
                    }
                }
                let c1 = 0.0001;
                let c2 = 0.0009;
                acc += ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                    / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
        acc / count as f64
    }

    #[test]
    fn psnr_closed_forms() {
        let a = GrayImage::filled(4, 4, 0.5).unwrap();
        let b = GrayImage::filled(4, 4, 0.6).unwrap();
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP_DB);
        let zero = GrayImage::filled(4, 4, 0.0).unwrap();
        let one = GrayImage::filled(4, 4, 1.0).unwrap();
        assert_eq!(psnr(&zero, &one).unwrap(), 0.0);
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        assert!(psnr(&a, &GrayImage::filled(4, 5, 0.5).unwrap()).is_err());
    }

    #[test]
    fn ssim_identity_and_small_inputs() {
        let a = noisy(1, 32, 24);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let tiny = GrayImage::filled(10, 20, 0.5).unwrap();
        assert!(ssim(&tiny, &tiny).is_err());
    }

    #[test]
    fn ssim_negative_for_inverted_content() {
        let a = GrayImage::from_fn(32, 32, |r, c| if (r / 4 + c / 4) % 2 == 0 { 0.1 } else { 0.9 })
            .unwrap();
        let neg = GrayImage::from_fn(32, 32, |r, c| 1.0 - a.get(r, c)).unwrap();
        assert!(ssim(&a, &neg).unwrap() < 0.0);
    }

    #[test]
    fn ssim_matches_direct_reference() {
        let a = noisy(2, 64, 64);
        let b = noisy(3, 64, 64);
        let fast = ssim(&a, &b).unwrap();
        let slow = ssim_reference(&a, &b);
        assert!((fast - slow).abs() < 1e-9, "{fast} vs {slow}");
    }

    #[test]
    fn psnr_decreases_with_noise_amplitude() {
        let base = GrayImage::filled(32, 32, 0.5).unwrap();
        let mut last = f64::INFINITY;
        for amp in [0.01, 0.02, 0.05, 0.1, 0.2, 0.4] {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let noisy =
                GrayImage::from_fn(32, 32, |_, _| 0.5 + amp * rng.random_range(-1.0..1.0)).unwrap();
            let p = psnr(&base, &noisy).unwrap();
            assert!(p < last);
            last = p;
        }
    }
}
