//! Edge-aware superpixel segmentation by density-reachable region growing.
//!
//! Regions grow from unlabeled seeds taken in raster order. A pixel joins when it is 8-adjacent
//! to a member and its intensity (on the 0-255 scale) is within `d_th` of the region's running
//! mean. Regions smaller than `min_segment_px` are then merged into the adjacent region with the
//! closest mean, and labels are renumbered in raster order of first occurrence.

use std::collections::VecDeque;
use std::path::Path;

use image::{ImageBuffer, Luma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::GrayImage;

const UNSET: usize = usize::MAX;

/// Absorbs rounding in `value * 255` so integer-valued differences compare as intended.
const THRESHOLD_SLACK: f64 = 1e-9;

/// 8-neighborhood in raster order.
pub(crate) const NEIGHBORS: [(i64, i64); 8] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, -1),
    (0, 1),
    (1, -1),
    (1, 0),
    (1, 1),
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentParams {
    /// Intensity difference threshold on the 0-255 scale.
    pub d_th: f64,
    pub min_segment_px: usize,
}

impl Default for SegmentParams {
    fn default() -> Self {
        Self {
            d_th: 40.0,
            min_segment_px: 16,
        }
    }
}

impl SegmentParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.d_th > 0.0 && self.d_th <= 255.0) {
            return Err(Error::invalid(format!("d_th must be in (0, 255], got {}", self.d_th)));
        }
        if self.min_segment_px == 0 {
            return Err(Error::invalid("min_segment_px must be at least 1"));
        }
        Ok(())
    }
}

/// Inclusive pixel bounding box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub min_row: usize,
    pub min_col: usize,
    pub max_row: usize,
    pub max_col: usize,
}

impl BBox {
    pub fn height(&self) -> usize {
        self.max_row - self.min_row + 1
    }

    pub fn width(&self) -> usize {
        self.max_col - self.min_col + 1
    }

    pub fn side(&self) -> usize {
        self.height().max(self.width())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentInfo {
    pub id: usize,
    pub pixel_count: usize,
    pub bbox: BBox,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentMap {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<usize>,
    pub segments: Vec<SegmentInfo>,
}

impl SegmentMap {
    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    #[inline]
    pub fn label(&self, row: usize, col: usize) -> usize {
        self.labels[row * self.width + col]
    }

    pub fn segment(&self, id: usize) -> Result<&SegmentInfo> {
        self.segments.get(id).ok_or(Error::SegmentNotFound(id))
    }

    /// Pixel indices (row-major) of one segment.
    pub fn members(&self, id: usize) -> Vec<usize> {
        (0..self.labels.len()).filter(|&i| self.labels[i] == id).collect()
    }

    /// Builds the map from raw labels, renumbering them densely in raster order.
    pub fn from_labels(image: &GrayImage, raw: &[usize]) -> Result<Self> {
        let (w, h) = (image.width(), image.height());
        if raw.len() != w * h {
            return Err(Error::DimensionMismatch(format!(
                "{} labels for {}x{} image",
                raw.len(),
                w,
                h
            )));
        }
        let mut remap = std::collections::HashMap::new();
        let mut labels = Vec::with_capacity(raw.len());
        for &l in raw {
            let next = remap.len();
            labels.push(*remap.entry(l).or_insert(next));
        }
        let mut segments: Vec<SegmentInfo> = (0..remap.len())
            .map(|id| SegmentInfo {
                id,
                pixel_count: 0,
                bbox: BBox {
                    min_row: usize::MAX,
                    min_col: usize::MAX,
                    max_row: 0,
                    max_col: 0,
                },
                mean: 0.0,
            })
            .collect();
        for (i, &l) in labels.iter().enumerate() {
            let (r, c) = (i / w, i % w);
            let s = &mut segments[l];
            s.pixel_count += 1;
            s.mean += image.data()[i];
            s.bbox.min_row = s.bbox.min_row.min(r);
            s.bbox.min_col = s.bbox.min_col.min(c);
            s.bbox.max_row = s.bbox.max_row.max(r);
            s.bbox.max_col = s.bbox.max_col.max(c);
        }
        for s in &mut segments {
            s.mean /= s.pixel_count as f64;
        }
        Ok(Self {
            width: w,
            height: h,
            labels,
            segments,
        })
    }

    /// Writes labels as a 16-bit grayscale PNG (labels above 65535 saturate).
    pub fn save_label_map(&self, path: impl AsRef<Path>) -> Result<()> {
        let px: Vec<u16> = self.labels.iter().map(|&l| l.min(u16::MAX as usize) as u16).collect();
        let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
            ImageBuffer::from_raw(self.width as u32, self.height as u32, px)
                .expect("label count matches dimensions");
        buf.save(path.as_ref())?;
        Ok(())
    }
}

#[inline]
fn neighbor(w: usize, h: usize, p: usize, (dr, dc): (i64, i64)) -> Option<usize> {
    let r = (p / w) as i64 + dr;
    let c = (p % w) as i64 + dc;
    (r >= 0 && c >= 0 && r < h as i64 && c < w as i64).then(|| r as usize * w + c as usize)
}

pub fn segment(image: &GrayImage, params: &SegmentParams) -> Result<SegmentMap> {
    params.validate()?;
    let (w, h) = (image.width(), image.height());
    let px = image.data();
    let mut labels = vec![UNSET; w * h];
    let mut members: Vec<Vec<usize>> = Vec::new();
    let mut sums: Vec<f64> = Vec::new();
    let mut queue = VecDeque::new();

    for seed in 0..w * h {
        if labels[seed] != UNSET {
            continue;
        }
        let id = members.len();
        labels[seed] = id;
        let mut region = vec![seed];
        let mut sum = px[seed];
        queue.push_back(seed);
        while let Some(p) = queue.pop_front() {
            for off in NEIGHBORS {
                let Some(q) = neighbor(w, h, p, off) else {
                    continue;
                };
                if labels[q] != UNSET {
                    continue;
                }
                let mean = sum / region.len() as f64;
                if (px[q] * 255.0 - mean * 255.0).abs() <= params.d_th + THRESHOLD_SLACK {
                    labels[q] = id;
                    sum += px[q];
                    region.push(q);
                    queue.push_back(q);
                }
            }
        }
        members.push(region);
        sums.push(sum);
    }

    merge_small(w, h, &mut labels, &mut members, &mut sums, params.min_segment_px);
    SegmentMap::from_labels(image, &labels)
}

fn merge_small(
    w: usize,
    h: usize,
    labels: &mut [usize],
    members: &mut [Vec<usize>],
    sums: &mut [f64],
    min_px: usize,
) {
    let live = |members: &[Vec<usize>]| members.iter().filter(|m| !m.is_empty()).count();
    loop {
        let mut changed = false;
        for id in 0..members.len() {
            let size = members[id].len();
            if size == 0 || size >= min_px || live(members) <= 1 {
                continue;
            }
            let mean = sums[id] / size as f64;
            let mut best: Option<(f64, usize)> = None;
            for &p in &members[id] {
                for off in NEIGHBORS {
                    let Some(q) = neighbor(w, h, p, off) else {
                        continue;
                    };
                    let other = labels[q];
                    if other == id {
                        continue;
                    }
                    let diff = (sums[other] / members[other].len() as f64 - mean).abs();
                    let better = match best {
                        None => true,
                        Some((d, o)) => diff < d || (diff == d && other < o),
                    };
                    if better {
                        best = Some((diff, other));
                    }
                }
            }
            let Some((_, target)) = best else {
                continue;
            };
            let moved = std::mem::take(&mut members[id]);
            for &p in &moved {
                labels[p] = target;
            }
            members[target].extend(moved);
            sums[target] += sums[id];
            sums[id] = 0.0;
            changed = true;
        }
        if !changed {
            break;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SizeStats {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub mean: f64,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Distribution of the bounding-box side `max(height, width)` over all segments, in pixels.
pub fn segment_size_stats(map: &SegmentMap) -> SizeStats {
    let mut sides: Vec<f64> = map.segments.iter().map(|s| s.bbox.side() as f64).collect();
    if sides.is_empty() {
        return SizeStats {
            min: 0.0,
            q1: 0.0,
            median: 0.0,
            q3: 0.0,
            max: 0.0,
            mean: 0.0,
        };
    }
    sides.sort_by(|a, b| a.partial_cmp(b).unwrap());
    SizeStats {
        min: sides[0],
        q1: quantile(&sides, 0.25),
        median: quantile(&sides, 0.5),
        q3: quantile(&sides, 0.75),
        max: sides[sides.len() - 1],
        mean: sides.iter().sum::<f64>() / sides.len() as f64,
    }
}
