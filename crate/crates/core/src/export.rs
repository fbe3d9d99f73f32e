//! Fusion of local block models into one global initialization.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::local::LocalModel;
use crate::model::{Domain, Kernel, MixtureModel, Mode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentExport {
    pub segment_id: usize,
    pub kept: usize,
    pub dropped_outside: usize,
    pub dropped_negative: usize,
    /// No kernel survived a filter and a fallback kernel was kept.
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportStats {
    pub segments: Vec<SegmentExport>,
    pub l_init: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ExportOptions {
    /// Scale each block's π by the block's area in global units instead of carrying it over.
    pub area_reweight: bool,
}

/// Removes kernels whose center falls on a block pixel outside the segment. When none survive,
/// the kernel closest to the mask centroid is kept and the returned flag is set.
pub fn drop_outside(local: &LocalModel) -> (LocalModel, bool) {
    let block = &local.block;
    let domain = block.domain();
    let inside = |k: &Kernel| {
        let (r, c) = domain.pixel_at(k.mu);
        block.mask_at(r, c)
    };
    let kept: Vec<Kernel> = local.model.kernels.iter().copied().filter(|k| inside(k)).collect();
    let (kernels, fallback) = if kept.is_empty() {
        let n = block.cbb_side;
        let (mut sx, mut sy, mut cnt) = (0.0, 0.0, 0.0);
        for r in 0..n {
            for c in 0..n {
                if block.mask_at(r, c) {
                    let p = domain.pixel_center(r, c);
                    sx += p[0];
                    sy += p[1];
                    cnt += 1.0;
                }
            }
        }
        let centroid = [sx / cnt, sy / cnt];
        let dist = |k: &Kernel| (k.mu[0] - centroid[0]).powi(2) + (k.mu[1] - centroid[1]).powi(2);
        let nearest = local
            .model
            .kernels
            .iter()
            .min_by(|a, b| dist(a).partial_cmp(&dist(b)).unwrap())
            .copied()
            .expect("local models are non-empty");
        (vec![nearest], true)
    } else {
        (kept, false)
    };
    let mut out = local.clone();
    out.model.kernels = kernels;
    (out, fallback)
}

/// Maps a kernel from a block's unit square into global coordinates, where the block occupies a
/// square of side `scale` at `origin`. The covariance scales by `s = scale²`, i.e. `B / √s`.
pub fn upscale_kernel(k: &Kernel, scale: f64, origin: [f64; 2]) -> Result<Kernel> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::invalid(format!("scale must be positive, got {scale}")));
    }
    Ok(Kernel {
        mu: [origin[0] + scale * k.mu[0], origin[1] + scale * k.mu[1]],
        b: [k.b[0] / scale, k.b[1] / scale, k.b[2] / scale],
        pi: k.pi,
        m: k.m,
    })
}

/// Drops outside and negative-π kernels from every local model, maps the survivors into the
/// global domain of a `width x height` image and concatenates them in segment order.
pub fn aggregate(
    locals: &[LocalModel],
    width: usize,
    height: usize,
    options: ExportOptions,
) -> Result<(MixtureModel, ExportStats)> {
    if locals.is_empty() {
        return Err(Error::invalid("no local models to aggregate"));
    }
    let domain = Domain::for_image(width, height);
    let w = width as f64;
    let mut kernels = Vec::new();
    let mut segments = Vec::with_capacity(locals.len());
    for local in locals {
        let before = local.model.len();
        let (inside, mut fallback) = drop_outside(local);
        let after_outside = inside.model.len();
        let mut survivors: Vec<Kernel> =
            inside.model.kernels.iter().copied().filter(|k| !(k.pi < 0.0)).collect();
        if survivors.is_empty() {
            let mut k = *inside
                .model
                .kernels
                .iter()
                .max_by(|a, b| a.pi.partial_cmp(&b.pi).unwrap())
                .expect("drop_outside keeps at least one kernel");
            k.pi = 1.0 / before as f64;
            survivors.push(k);
            fallback = true;
        }
        let block = &local.block;
        let scale = block.box_side_px as f64 / w;
        let origin = [block.origin_px.1 as f64 / w, block.origin_px.0 as f64 / w];
        let weight = if options.area_reweight { scale * scale } else { 1.0 };
        for k in &survivors {
            let mut g = upscale_kernel(k, scale, origin)?;
            g.pi *= weight;
            kernels.push(g);
        }
        segments.push(SegmentExport {
            segment_id: block.segment_id,
            kept: survivors.len(),
            dropped_outside: before - after_outside,
            dropped_negative: after_outside - survivors.len(),
            fallback,
        });
    }
    let l_init = kernels.len();
    let model = MixtureModel::new(kernels, Mode::SmoeGating, domain)?;
    Ok((model, ExportStats { segments, l_init }))
}
