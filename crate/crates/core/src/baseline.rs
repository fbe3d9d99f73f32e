//! Comparison initializers: regular grid, block K-Means and random placement inside segments.
//! All of them emit radial kernels sharing one bandwidth, with `π = 1/L`.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::model::{Domain, Kernel, MixtureModel, Mode};
use crate::segment::SegmentMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockBudget {
    /// Proportional to block intensity variance, at least one per block.
    Variance,
    /// Proportional to block pixel count.
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineParams {
    pub target_l: usize,
    /// K-Means block side in pixels.
    pub block_px: usize,
    /// Fixed kernels per segment for the segment initializer; `None` spreads `target_l` in
    /// proportion to segment area.
    pub kernels_per_segment: Option<usize>,
    /// Shared radial standard deviation in pixels; `None` uses half the spacing of a regular
    /// layout of `target_l` kernels.
    pub bandwidth_px: Option<f64>,
    pub seed: u64,
    /// Weight of intensity against normalized coordinates in the K-Means feature space.
    pub intensity_weight: f64,
    pub budget: BlockBudget,
    pub lloyd_iterations: usize,
}

impl Default for BaselineParams {
    fn default() -> Self {
        Self {
            target_l: 64,
            block_px: 16,
            kernels_per_segment: None,
            bandwidth_px: None,
            seed: 0,
            intensity_weight: 1.0,
            budget: BlockBudget::Variance,
            lloyd_iterations: 20,
        }
    }
}

impl BaselineParams {
    pub fn validate(&self) -> Result<()> {
        if self.target_l == 0 {
            return Err(Error::invalid("target_l must be at least 1"));
        }
        if self.block_px < 4 {
            return Err(Error::invalid("block_px must be at least 4"));
        }
        if let Some(b) = self.bandwidth_px {
            if !(b > 0.0) {
                return Err(Error::invalid("bandwidth_px must be positive"));
            }
        }
        Ok(())
    }

    /// Shared bandwidth in pixels for a model of `l` kernels on a `w x h` image.
    pub fn sigma_px(&self, w: usize, h: usize, l: usize) -> f64 {
        self.bandwidth_px
            .unwrap_or_else(|| 0.5 * ((w * h) as f64 / l.max(1) as f64).sqrt())
    }
}

fn aspect_cost(cols: usize, rows: usize, aspect: f64) -> f64 {
    ((cols as f64 / rows as f64).ln() - aspect.ln()).abs()
}

/// Grid shape `(cols, rows)` with `cols * rows >= l` whose aspect ratio is closest to `w / h`
/// (ties: fewer cells, then fewer rows).
pub fn grid_shape(l: usize, w: usize, h: usize) -> (usize, usize) {
    let aspect = w as f64 / h as f64;
    let guess = ((l as f64 / aspect).sqrt().round() as usize).clamp(1, l);
    let mut best: Option<(f64, usize, usize, usize)> = None;
    for rows in guess.saturating_sub(3).max(1)..=(guess + 3).min(l) {
        let cols = l.div_ceil(rows);
        let key = (aspect_cost(cols, rows, aspect), cols * rows, rows, cols);
        if best.is_none_or(|b| (key.0, key.1, key.2) < (b.0, b.1, b.2)) {
            best = Some(key);
        }
    }
    let (_, _, rows, cols) = best.expect("non-empty search window");
    (cols, rows)
}

fn model_from(kernels: Vec<Kernel>, w: usize, h: usize) -> Result<MixtureModel> {
    let l = kernels.len() as f64;
    let kernels = kernels
        .into_iter()
        .map(|k| Kernel { pi: 1.0 / l, ..k })
        .collect();
    MixtureModel::new(kernels, Mode::SmoeGating, Domain::for_image(w, h))
}

/// Regular grid of `target_l` kernels at cell midpoints, experts sampled at the centers.
pub fn grid_init(image: &GrayImage, params: &BaselineParams) -> Result<MixtureModel> {
    params.validate()?;
    let (w, h) = (image.width(), image.height());
    let l = params.target_l;
    let (cols, rows) = grid_shape(l, w, h);
    let domain = Domain::for_image(w, h);
    let sigma = params.sigma_px(w, h, l) / w as f64;
    let kernels = (0..l)
        .map(|i| {
            let (r, c) = (i / cols, i % cols);
            let mu = [
                (c as f64 + 0.5) / cols as f64,
                (r as f64 + 0.5) * h as f64 / rows as f64 / w as f64,
            ];
            let (pr, pc) = domain.pixel_at(mu);
            Kernel::radial(mu, sigma, 1.0, image.get(pr, pc))
        })
        .collect();
    model_from(kernels, w, h)
}

/// Splits `total` over `weights` by largest remainder, at least `floor` each.
fn largest_remainder(total: usize, weights: &[f64], floor: usize, caps: &[usize]) -> Vec<usize> {
    let n = weights.len();
    let mut alloc = vec![floor; n];
    let mut remaining = total.saturating_sub(floor * n);
    // Repeated passes redistribute what the per-block caps cut off.
    while remaining > 0 {
        let open: Vec<usize> = (0..n).filter(|&i| alloc[i] < caps[i]).collect();
        if open.is_empty() {
            break;
        }
        let wsum: f64 = open.iter().map(|&i| weights[i]).sum();
        let share = |i: usize| {
            if wsum > 0.0 {
                weights[i] / wsum * remaining as f64
            } else {
                remaining as f64 / open.len() as f64
            }
        };
        let mut given = 0;
        let mut rema: Vec<(f64, usize)> = Vec::new();
        for &i in &open {
            let s = share(i);
            let add = (s.floor() as usize).min(caps[i] - alloc[i]);
            alloc[i] += add;
            given += add;
            rema.push((s - s.floor(), i));
        }
        let mut left = remaining - given;
        rema.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        for &(_, i) in &rema {
            if left == 0 {
                break;
            }
            if alloc[i] < caps[i] {
                alloc[i] += 1;
                left -= 1;
            }
        }
        if left == remaining {
            break;
        }
        remaining = left;
    }
    alloc
}

struct Tile {
    r0: usize,
    c0: usize,
    r1: usize,
    c1: usize,
}

impl Tile {
    fn pixels(&self) -> usize {
        (self.r1 - self.r0) * (self.c1 - self.c0)
    }
}

fn kmeans_tile(
    image: &GrayImage,
    tile: &Tile,
    k: usize,
    params: &BaselineParams,
    seed: u64,
) -> Vec<(f64, f64, f64)> {
    let w = image.width() as f64;
    let iw = params.intensity_weight;
    let pts: Vec<[f64; 3]> = (tile.r0..tile.r1)
        .flat_map(|r| (tile.c0..tile.c1).map(move |c| (r, c)))
        .map(|(r, c)| [(c as f64 + 0.5) / w, (r as f64 + 0.5) / w, iw * image.get(r, c)])
        .collect();
    let intensity = |p: &[f64; 3], r: usize, c: usize| if iw > 0.0 { p[2] / iw } else { image.get(r, c) };
    let first = image.get(tile.r0, tile.c0);
    let constant = (tile.r0..tile.r1).all(|r| (tile.c0..tile.c1).all(|c| image.get(r, c) == first));
    if k == 1 || (constant && k == 1) {
        let n = pts.len() as f64;
        let cx = pts.iter().map(|p| p[0]).sum::<f64>() / n;
        let cy = pts.iter().map(|p| p[1]).sum::<f64>() / n;
        let mean = (tile.r0..tile.r1)
            .flat_map(|r| (tile.c0..tile.c1).map(move |c| (r, c)))
            .map(|(r, c)| image.get(r, c))
            .sum::<f64>()
            / n;
        return vec![(cx, cy, mean)];
    }
    let d2 = |a: &[f64; 3], b: &[f64; 3]| (0..3).map(|i| (a[i] - b[i]).powi(2)).sum::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers: Vec<[f64; 3]> = vec![pts[rng.random_range(0..pts.len())]];
    let mut dist: Vec<f64> = pts.iter().map(|p| d2(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = dist.iter().sum();
        let idx = if total > 0.0 {
            let mut t = rng.random::<f64>() * total;
            let mut pick = dist.len() - 1;
            for (i, d) in dist.iter().enumerate() {
                if t < *d {
                    pick = i;
                    break;
                }
                t -= d;
            }
            pick
        } else {
            rng.random_range(0..pts.len())
        };
        centers.push(pts[idx]);
        for (d, p) in dist.iter_mut().zip(&pts) {
            *d = d.min(d2(p, &pts[idx]));
        }
    }
    let mut assign = vec![usize::MAX; pts.len()];
    for _ in 0..params.lloyd_iterations.max(1) {
        let mut changed = false;
        for (a, p) in assign.iter_mut().zip(&pts) {
            let mut best = 0;
            let mut bd = f64::INFINITY;
            for (j, c) in centers.iter().enumerate() {
                let d = d2(p, c);
                if d < bd {
                    bd = d;
                    best = j;
                }
            }
            if *a != best {
                *a = best;
                changed = true;
            }
        }
        let mut sums = vec![[0.0; 3]; k];
        let mut counts = vec![0usize; k];
        for (a, p) in assign.iter().zip(&pts) {
            counts[*a] += 1;
            for i in 0..3 {
                sums[*a][i] += p[i];
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                centers[j] = sums[j].map(|s| s / counts[j] as f64);
            }
        }
        if !changed {
            break;
        }
    }
    let cols = tile.c1 - tile.c0;
    centers
        .iter()
        .enumerate()
        .map(|(j, c)| {
            // Members' true mean intensity; the seed point stands in for an empty cluster.
            let members: Vec<usize> = (0..pts.len()).filter(|&i| assign[i] == j).collect();
            let mean = if members.is_empty() {
                intensity(c, tile.r0, tile.c0)
            } else {
                members
                    .iter()
                    .map(|&i| image.get(tile.r0 + i / cols, tile.c0 + i % cols))
                    .sum::<f64>()
                    / members.len() as f64
            };
            (c[0], c[1], mean)
        })
        .collect()
}

/// Per-block K-Means over `(x, y, intensity)` with a variance-driven kernel budget.
pub fn kmeans_init(image: &GrayImage, params: &BaselineParams) -> Result<MixtureModel> {
    params.validate()?;
    let (w, h) = (image.width(), image.height());
    let bp = params.block_px;
    let mut tiles = Vec::new();
    for r0 in (0..h).step_by(bp) {
        for c0 in (0..w).step_by(bp) {
            tiles.push(Tile {
                r0,
                c0,
                r1: (r0 + bp).min(h),
                c1: (c0 + bp).min(w),
            });
        }
    }
    let weights: Vec<f64> = tiles
        .iter()
        .map(|t| match params.budget {
            BlockBudget::Uniform => t.pixels() as f64,
            BlockBudget::Variance => {
                let vals: Vec<f64> = (t.r0..t.r1)
                    .flat_map(|r| (t.c0..t.c1).map(move |c| (r, c)))
                    .map(|(r, c)| image.get(r, c))
                    .collect();
                let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64
            }
        })
        .collect();
    let caps: Vec<usize> = tiles.iter().map(Tile::pixels).collect();
    let l = params.target_l.min(w * h);
    let budget = if l < tiles.len() {
        // Fewer kernels than blocks: the most active blocks get one each.
        let mut order: Vec<usize> = (0..tiles.len()).collect();
        order.sort_by(|&a, &b| weights[b].partial_cmp(&weights[a]).unwrap().then(a.cmp(&b)));
        let mut alloc = vec![0; tiles.len()];
        for &i in order.iter().take(l) {
            alloc[i] = 1;
        }
        alloc
    } else {
        largest_remainder(l, &weights, 1, &caps)
    };
    let sigma = params.sigma_px(w, h, l) / w as f64;
    let per_tile: Vec<Vec<(f64, f64, f64)>> = tiles
        .par_iter()
        .zip(budget.par_iter())
        .enumerate()
        .map(|(i, (t, &k))| {
            if k == 0 {
                Vec::new()
            } else {
                kmeans_tile(image, t, k, params, params.seed ^ (i as u64).wrapping_mul(0x9E37_79B9))
            }
        })
        .collect();
    let kernels = per_tile
        .into_iter()
        .flatten()
        .map(|(x, y, m)| Kernel::radial([x, y], sigma, 1.0, m))
        .collect();
    model_from(kernels, w, h)
}

/// Kernels at random member pixels of every segment (fixed count per segment).
pub fn s_smoe_init(
    image: &GrayImage,
    map: &SegmentMap,
    params: &BaselineParams,
) -> Result<MixtureModel> {
    params.validate()?;
    let (w, h) = (image.width(), image.height());
    if map.width != w || map.height != h {
        return Err(Error::DimensionMismatch("segment map does not match image".into()));
    }
    let n = map.len();
    let counts: Vec<usize> = match params.kernels_per_segment {
        Some(k) => vec![k.max(1); n],
        None => {
            // Area-proportional split of target_l, at least one kernel per segment.
            let area: Vec<f64> = map.segments.iter().map(|s| s.pixel_count as f64).collect();
            let caps: Vec<usize> = map.segments.iter().map(|s| s.pixel_count).collect();
            largest_remainder(params.target_l.max(n), &area, 1, &caps)
        }
    };
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (i, &l) in map.labels.iter().enumerate() {
        members[l].push(i);
    }
    let total: usize = counts
        .iter()
        .zip(&members)
        .map(|(c, m)| (*c).min(m.len()))
        .sum();
    let sigma = params.sigma_px(w, h, total) / w as f64;
    let domain = Domain::for_image(w, h);
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut kernels = Vec::with_capacity(total);
    for (seg, count) in members.iter().zip(&counts) {
        let k = (*count).min(seg.len());
        for i in sample(&mut rng, seg.len(), k).into_iter() {
            let p = seg[i];
            let mu = domain.pixel_center(p / w, p % w);
            kernels.push(Kernel::radial(mu, sigma, 1.0, image.data()[p]));
        }
    }
    model_from(kernels, w, h)
}
