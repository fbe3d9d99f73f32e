//! Local stage of the adaptive initialization: one corona bounding block per segment, each
//! fitted with adaptive kernel doubling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::metrics::psnr_from_mse;
use crate::model::{Domain, Kernel, MixtureModel, Mode};
use crate::optimizer::{
    evaluate, prune_negative, strongest_kernel, AdamConfig, AdamState, L1Penalty, LearningRates,
    TraceRow,
};
use crate::segment::SegmentMap;

/// A square crop around one segment plus a margin, resampled to `cbb_side x cbb_side`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoronaBlock {
    pub segment_id: usize,
    /// `(row, col)` of the square's top-left corner in the source image. Negative only along an
    /// axis where the square is larger than the image.
    pub origin_px: (i64, i64),
    pub box_side_px: usize,
    pub margin_px: usize,
    pub cbb_side: usize,
    pub image: GrayImage,
    /// Segment membership in the resampled frame, row-major.
    pub mask: Vec<bool>,
}

impl CoronaBlock {
    /// A block that is already square and fully inside its segment, e.g. a synthetic test patch.
    pub fn whole(image: &GrayImage, segment_id: usize) -> Result<Self> {
        if image.width() != image.height() {
            return Err(Error::DimensionMismatch(format!(
                "block must be square, got {}x{}",
                image.width(),
                image.height()
            )));
        }
        Ok(Self {
            segment_id,
            origin_px: (0, 0),
            box_side_px: image.width(),
            margin_px: 0,
            cbb_side: image.width(),
            image: image.clone(),
            mask: vec![true; image.len()],
        })
    }

    /// Source pixels per block pixel.
    pub fn scale(&self) -> f64 {
        self.box_side_px as f64 / self.cbb_side as f64
    }

    /// Local model domain: the block's unit square.
    pub fn domain(&self) -> Domain {
        Domain {
            image_width: self.cbb_side,
            image_height: self.cbb_side,
            coord_scale: self.cbb_side as f64,
        }
    }

    #[inline]
    pub fn mask_at(&self, row: usize, col: usize) -> bool {
        self.mask[row * self.cbb_side + col]
    }
}

/// Per-axis area weights: for output cell `i`, the overlap of `[o + i a, o + (i + 1) a)` with
/// each source pixel, as `(source_index, weight)` pairs.
fn area_weights(origin: i64, scale: f64, cells: usize) -> Vec<Vec<(i64, f64)>> {
    (0..cells)
        .map(|i| {
            let lo = origin as f64 + i as f64 * scale;
            let hi = origin as f64 + (i + 1) as f64 * scale;
            let mut w = Vec::new();
            let mut p = lo.floor() as i64;
            while (p as f64) < hi {
                let overlap = (hi.min((p + 1) as f64) - lo.max(p as f64)).max(0.0);
                if overlap > 0.0 {
                    w.push((p, overlap));
                }
                p += 1;
            }
            w
        })
        .collect()
}

fn resample_area(img: &GrayImage, origin: (i64, i64), scale: f64, side: usize) -> Vec<f64> {
    let rows = area_weights(origin.0, scale, side);
    let cols = area_weights(origin.1, scale, side);
    let mut out = Vec::with_capacity(side * side);
    for rw in &rows {
        for cw in &cols {
            let mut acc = 0.0;
            let mut norm = 0.0;
            for &(r, wr) in rw {
                for &(c, wc) in cw {
                    acc += wr * wc * img.get_clamped(r, c);
                    norm += wr * wc;
                }
            }
            out.push(acc / norm);
        }
    }
    out
}

fn resample_bilinear(img: &GrayImage, origin: (i64, i64), scale: f64, side: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(side * side);
    for i in 0..side {
        let sr = origin.0 as f64 + (i as f64 + 0.5) * scale - 0.5;
        let r0 = sr.floor();
        let fr = sr - r0;
        for j in 0..side {
            let sc = origin.1 as f64 + (j as f64 + 0.5) * scale - 0.5;
            let c0 = sc.floor();
            let fc = sc - c0;
            let (r0, c0) = (r0 as i64, c0 as i64);
            let top = img.get_clamped(r0, c0) * (1.0 - fc) + img.get_clamped(r0, c0 + 1) * fc;
            let bot =
                img.get_clamped(r0 + 1, c0) * (1.0 - fc) + img.get_clamped(r0 + 1, c0 + 1) * fc;
            out.push(top * (1.0 - fr) + bot * fr);
        }
    }
    out
}

/// Places a square of side `side` on one axis of length `dim`, centered on `[lo, hi]`.
fn place_axis(lo: usize, hi: usize, side: usize, dim: usize) -> i64 {
    if side > dim {
        return -(((side - dim) / 2) as i64);
    }
    let extent = hi - lo + 1;
    let start = lo as i64 - ((side as i64 - extent as i64) / 2);
    start.clamp(0, (dim - side) as i64)
}

/// Crops the square box around a segment (bounding-box side plus `margin_px` on every side) and
/// resamples it to `cbb_side x cbb_side`: area averaging when shrinking, bilinear when
/// enlarging, nearest neighbor for the membership mask.
pub fn crop_block(
    image: &GrayImage,
    map: &SegmentMap,
    segment_id: usize,
    margin_px: usize,
    cbb_side: usize,
) -> Result<CoronaBlock> {
    if cbb_side == 0 {
        return Err(Error::invalid("cbb_side must be positive"));
    }
    if map.width != image.width() || map.height != image.height() {
        return Err(Error::DimensionMismatch("segment map does not match image".into()));
    }
    let seg = map.segment(segment_id)?;
    let (w, h) = (image.width(), image.height());
    let side = (seg.bbox.side() + 2 * margin_px).min(w.max(h));
    let origin = (
        place_axis(seg.bbox.min_row, seg.bbox.max_row, side, h),
        place_axis(seg.bbox.min_col, seg.bbox.max_col, side, w),
    );
    let scale = side as f64 / cbb_side as f64;
    let data = if side >= cbb_side {
        resample_area(image, origin, scale, cbb_side)
    } else {
        resample_bilinear(image, origin, scale, cbb_side)
    };
    let inside = |r: i64, c: i64| {
        r >= 0
            && c >= 0
            && (r as usize) < h
            && (c as usize) < w
            && map.label(r as usize, c as usize) == segment_id
    };
    let mut mask = Vec::with_capacity(cbb_side * cbb_side);
    for i in 0..cbb_side {
        let r = (origin.0 as f64 + (i as f64 + 0.5) * scale).floor() as i64;
        for j in 0..cbb_side {
            let c = (origin.1 as f64 + (j as f64 + 0.5) * scale).floor() as i64;
            mask.push(inside(r, c));
        }
    }
    if !mask.iter().any(|m| *m) {
        // Thin segments can slip between nearest-neighbor samples; fall back to coverage.
        for i in 0..cbb_side {
            for j in 0..cbb_side {
                let r0 = (origin.0 as f64 + i as f64 * scale).floor() as i64;
                let r1 = (origin.0 as f64 + (i + 1) as f64 * scale).ceil() as i64;
                let c0 = (origin.1 as f64 + j as f64 * scale).floor() as i64;
                let c1 = (origin.1 as f64 + (j + 1) as f64 * scale).ceil() as i64;
                mask[i * cbb_side + j] = (r0..r1).any(|r| (c0..c1).any(|c| inside(r, c)));
            }
        }
    }
    Ok(CoronaBlock {
        segment_id,
        origin_px: origin,
        box_side_px: side,
        margin_px,
        cbb_side,
        image: GrayImage::new(cbb_side, cbb_side, data)?,
        mask,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpertInit {
    /// Expert constant read from the block at the kernel center.
    Sampled,
    /// Uniform random in `[0, 1]`.
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DoublingMode {
    /// Every kernel is duplicated with a jittered center; π is split between the copies.
    Jitter,
    /// As many fresh random kernels are appended.
    Fresh,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdjustParams {
    pub initial_kernels: usize,
    /// Epoch budget.
    pub max_epochs: usize,
    /// Doubling checkpoint interval.
    pub checkpoint: usize,
    /// Target PSNR in dB; the fit returns as soon as it is exceeded.
    pub target_psnr: f64,
    pub max_kernels: usize,
    pub lambda: f64,
    pub seed: u64,
    pub expert_init: ExpertInit,
    pub doubling: DoublingMode,
    /// Standard deviation of the center jitter applied to duplicated kernels (block units).
    pub jitter: f64,
    /// Keep Adam moments across a doubling (copied to the duplicates) instead of resetting.
    pub warm_moments: bool,
    pub adam: AdamConfig,
}

impl Default for AdjustParams {
    fn default() -> Self {
        Self {
            initial_kernels: 10,
            max_epochs: 300,
            checkpoint: 100,
            target_psnr: 30.0,
            max_kernels: 160,
            lambda: 1e-4,
            seed: 0,
            expert_init: ExpertInit::Sampled,
            doubling: DoublingMode::Jitter,
            jitter: 0.05,
            warm_moments: false,
            adam: AdamConfig {
                lr: LearningRates {
                    mu: 1e-2,
                    b: 1.0,
                    pi: 1e-3,
                    m: 1e-2,
                },
                ..AdamConfig::default()
            },
        }
    }
}

impl AdjustParams {
    pub fn validate(&self) -> Result<()> {
        if self.initial_kernels == 0 {
            return Err(Error::invalid("initial kernel count must be at least 1"));
        }
        if self.checkpoint == 0 || self.checkpoint > self.max_epochs {
            return Err(Error::invalid("checkpoint must be in 1..=max_epochs"));
        }
        if self.max_kernels < self.initial_kernels {
            return Err(Error::invalid("max_kernels must be at least initial_kernels"));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::invalid("lambda must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct LocalModel {
    pub block: CoronaBlock,
    /// Model over the block's unit square.
    pub model: MixtureModel,
    pub achieved_psnr: f64,
    pub epochs_used: usize,
    pub doublings: usize,
    /// Kernel count of the live model when the loop ended (before pruning).
    pub peak_kernels: usize,
    /// Lowest total loss recorded during the run.
    pub best_loss: f64,
    pub early_exit: bool,
    /// Set when pruning removed every kernel and the strongest one was kept instead.
    pub emptied_warning: bool,
    pub trace: Vec<TraceRow>,
}

fn random_kernel(rng: &mut ChaCha8Rng, block: &CoronaBlock, sigma: f64, pi: f64, init: ExpertInit) -> Kernel {
    let mu = [rng.random::<f64>(), rng.random::<f64>()];
    let m = match init {
        ExpertInit::Sampled => {
            let (r, c) = block.domain().pixel_at(mu);
            block.image.get(r, c)
        }
        ExpertInit::Random => rng.random(),
    };
    Kernel::radial(mu, sigma, pi, m)
}

fn initial_sigma(l: usize) -> f64 {
    0.5 / (l as f64).sqrt()
}

fn double(
    model: &mut MixtureModel,
    state: &mut AdamState,
    rng: &mut ChaCha8Rng,
    block: &CoronaBlock,
    params: &AdjustParams,
) -> usize {
    let l = model.len();
    let add = l.min(params.max_kernels.saturating_sub(l));
    if add == 0 {
        return 0;
    }
    match params.doubling {
        DoublingMode::Jitter => {
            let jitter = Normal::new(0.0, params.jitter.max(0.0)).expect("valid normal");
            for j in 0..add {
                model.kernels[j].pi *= 0.5;
                let mut copy = model.kernels[j];
                for v in &mut copy.mu {
                    *v = (*v + jitter.sample(rng)).clamp(0.0, 1.0);
                }
                model.kernels.push(copy);
            }
        }
        DoublingMode::Fresh => {
            let sigma = initial_sigma(l + add);
            let pi = model.pi_sum() / l as f64;
            for _ in 0..add {
                let k = random_kernel(rng, block, sigma, pi, params.expert_init);
                model.kernels.push(k);
            }
        }
    }
    if params.warm_moments && params.doubling == DoublingMode::Jitter {
        state.duplicate_first(add);
    } else {
        *state = AdamState::new(params.adam, model.len());
    }
    add
}

/// Fits a local SMoE model to one block with adaptive kernel doubling.
///
/// Starts from `initial_kernels` random radial kernels with `π = 1/L`. Every epoch evaluates the
/// loss over all block pixels, records the best parameters, returns immediately once the PSNR of
/// the data term exceeds the target, and otherwise takes an Adam step; every `checkpoint` epochs
/// the kernel set is doubled (up to `max_kernels`). If the budget runs out, the best recorded
/// parameters are returned with negative-π kernels removed.
pub fn adjust_kernels(block: &CoronaBlock, params: &AdjustParams) -> Result<LocalModel> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let l0 = params.initial_kernels;
    let sigma = initial_sigma(l0);
    let kernels = (0..l0)
        .map(|_| random_kernel(&mut rng, block, sigma, 1.0 / l0 as f64, params.expert_init))
        .collect();
    let mut model = MixtureModel::new(kernels, Mode::SmoeGating, block.domain())?;
    let penalty = L1Penalty::signed(params.lambda);
    let mut state = AdamState::new(params.adam, model.len());
    let mut best: Option<(MixtureModel, f64)> = None;
    let mut doublings = 0;
    let mut trace = Vec::new();
    let start = std::time::Instant::now();

    for epoch in 0..params.max_epochs {
        let (report, grads) = evaluate(&model, &block.image, None, penalty, true)?;
        if best.as_ref().is_none_or(|b| report.total < b.1) {
            best = Some((model.clone(), report.total));
        }
        let psnr = psnr_from_mse(report.mse);
        trace.push(TraceRow {
            epoch,
            total: report.total,
            mse: report.mse,
            l1: report.l1,
            psnr_db: psnr,
            kernel_count: model.len(),
            elapsed_s: start.elapsed().as_secs_f64(),
            best_total: best.as_ref().map(|b| b.1).unwrap_or(report.total),
        });
        if psnr > params.target_psnr {
            let peak = model.len();
            return Ok(LocalModel {
                block: block.clone(),
                model,
                achieved_psnr: psnr,
                epochs_used: epoch + 1,
                doublings,
                peak_kernels: peak,
                best_loss: best.map(|b| b.1).unwrap_or(report.total),
                early_exit: true,
                emptied_warning: false,
                trace,
            });
        }
        state.step(&mut model, &grads.expect("gradients requested"))?;
        if epoch >= params.checkpoint
            && epoch % params.checkpoint == 0
            && double(&mut model, &mut state, &mut rng, block, params) > 0
        {
            doublings += 1;
        }
    }

    let peak = model.len();
    let (best_model, best_loss) = best.expect("at least one epoch ran");
    let (final_model, emptied_warning) = match prune_negative(&best_model) {
        Ok((m, _)) => (m, false),
        Err(Error::EmptyModel) => {
            let keep = best_model.kernels[strongest_kernel(&best_model)];
            (
                MixtureModel {
                    kernels: vec![keep],
                    ..best_model.clone()
                },
                true,
            )
        }
        Err(e) => return Err(e),
    };
    let (report, _) = evaluate(&final_model, &block.image, None, penalty, false)?;
    Ok(LocalModel {
        block: block.clone(),
        model: final_model,
        achieved_psnr: psnr_from_mse(report.mse),
        epochs_used: params.max_epochs,
        doublings,
        peak_kernels: peak,
        best_loss,
        early_exit: false,
        emptied_warning,
        trace,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LocalParams {
    pub margin_px: usize,
    pub cbb_side: usize,
    pub adjust: AdjustParams,
}

impl Default for LocalParams {
    fn default() -> Self {
        Self {
            margin_px: 5,
            cbb_side: 32,
            adjust: AdjustParams::default(),
        }
    }
}

#[derive(Debug)]
pub struct BlockRun {
    /// Successful fits in segment-id order.
    pub models: Vec<LocalModel>,
    pub failures: Vec<(usize, Error)>,
}

/// Builds the per-segment worker pool used by [`run_all_blocks`] and the rest of a fit.
pub fn worker_pool(workers: usize) -> Result<rayon::ThreadPool> {
    if workers == 0 {
        return Err(Error::invalid("workers must be at least 1"));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::invalid(format!("cannot start worker pool: {e}")))
}

/// Crops and fits every segment on a pool of `workers` threads. Block `i` uses seed
/// `adjust.seed ^ i`, so results do not depend on scheduling.
pub fn run_all_blocks(
    image: &GrayImage,
    map: &SegmentMap,
    params: &LocalParams,
    workers: usize,
) -> Result<BlockRun> {
    params.adjust.validate()?;
    let pool = worker_pool(workers)?;
    let results: Vec<Result<LocalModel>> = pool.install(|| {
        (0..map.len())
            .into_par_iter()
            .map(|id| {
                let block = crop_block(image, map, id, params.margin_px, params.cbb_side)?;
                let adjust = AdjustParams {
                    seed: params.adjust.seed ^ id as u64,
                    ..params.adjust
                };
                adjust_kernels(&block, &adjust)
            })
            .collect()
    });
    let mut models = Vec::new();
    let mut failures = Vec::new();
    for (id, r) in results.into_iter().enumerate() {
        match r {
            Ok(m) => models.push(m),
            Err(e) => failures.push((id, e)),
        }
    }
    if models.is_empty() {
        return Err(Error::AllBlocksFailed(failures.len()));
    }
    Ok(BlockRun { models, failures })
}
