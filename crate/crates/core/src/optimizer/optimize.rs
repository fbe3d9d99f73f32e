use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::metrics::psnr_from_mse;
use crate::model::{MixtureModel, Mode};
use crate::optimizer::adam::{AdamConfig, AdamState};
use crate::optimizer::loss::{evaluate, L1Penalty};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizeConfig {
    /// Weight of the `Σ π_j` sparsity term.
    pub lambda: f64,
    pub max_epochs: usize,
    /// Stop once the mean per-epoch loss change over `delta_window` epochs is below this.
    pub loss_delta_stop: f64,
    pub delta_window: usize,
    /// Stop as soon as the PSNR of the data term reaches this value (dB).
    pub target_psnr: Option<f64>,
    pub record_best: bool,
    /// Penalize `|π|` instead of the signed sum.
    pub l1_absolute: bool,
    /// Remove kernels whose π turned negative after each update (never the last one).
    pub prune_inline: bool,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for OptimizeConfig {
    fn default() -> Self {
        Self {
            lambda: 1e-4,
            max_epochs: 1000,
            loss_delta_stop: 1e-6,
            delta_window: 1,
            target_psnr: None,
            record_best: true,
            l1_absolute: false,
            prune_inline: false,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

impl OptimizeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(Error::invalid("lambda must be non-negative"));
        }
        if self.max_epochs == 0 {
            return Err(Error::invalid("max_epochs must be at least 1"));
        }
        if !(self.loss_delta_stop > 0.0) {
            return Err(Error::invalid("loss_delta_stop must be positive"));
        }
        if self.delta_window == 0 {
            return Err(Error::invalid("delta_window must be at least 1"));
        }
        Ok(())
    }

    pub(crate) fn penalty(&self) -> L1Penalty {
        L1Penalty {
            lambda: self.lambda,
            absolute: self.l1_absolute,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub epoch: usize,
    pub total: f64,
    pub mse: f64,
    pub l1: f64,
    pub psnr_db: f64,
    pub kernel_count: usize,
    pub elapsed_s: f64,
    /// Lowest total loss seen up to and including this epoch.
    pub best_total: f64,
}

pub const TRACE_CSV_HEADER: &str = "epoch,total_loss,mse,l1,psnr_db,kernel_count,elapsed_s";

pub fn write_trace_csv<W: Write>(rows: &[TraceRow], mut out: W) -> std::io::Result<()> {
    writeln!(out, "{TRACE_CSV_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.epoch, r.total, r.mse, r.l1, r.psnr_db, r.kernel_count, r.elapsed_s
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    TargetPsnr,
    LossDelta,
    MaxEpochs,
}

#[derive(Debug, Clone)]
pub struct OptimizeOutcome {
    pub model: MixtureModel,
    pub trace: Vec<TraceRow>,
    pub stop: StopReason,
    /// Loss report of the returned parameters as evaluated during the run.
    pub final_total: f64,
    pub final_mse: f64,
}

impl OptimizeOutcome {
    pub fn psnr(&self) -> f64 {
        psnr_from_mse(self.final_mse)
    }
}

/// Mask of kernels with `π >= 0`.
pub(crate) fn nonnegative_mask(model: &MixtureModel) -> Vec<bool> {
    model.kernels.iter().map(|k| !(k.pi < 0.0)).collect()
}

/// Removes kernels with negative π, preserving the order of the rest.
pub fn prune_negative(model: &MixtureModel) -> Result<(MixtureModel, usize)> {
    let keep = nonnegative_mask(model);
    let kernels: Vec<_> = model
        .kernels
        .iter()
        .zip(&keep)
        .filter(|(_, k)| **k)
        .map(|(k, _)| *k)
        .collect();
    if kernels.is_empty() {
        return Err(Error::EmptyModel);
    }
    let removed = model.len() - kernels.len();
    Ok((
        MixtureModel {
            kernels,
            ..model.clone()
        },
        removed,
    ))
}

/// Index of the kernel with the largest π (first on ties).
pub(crate) fn strongest_kernel(model: &MixtureModel) -> usize {
    let mut best = 0;
    for (i, k) in model.kernels.iter().enumerate() {
        if k.pi > model.kernels[best].pi {
            best = i;
        }
    }
    best
}

/// Gradient descent on the L1-regularized MSE.
///
/// Each epoch evaluates the loss of the current parameters, records them if they are the best
/// so far, checks the stopping rules and then takes one Adam step. Every trace row is passed to
/// `sink` as soon as it is produced, so a caller keeps the trace even if a later epoch fails.
pub fn optimize(
    model: &MixtureModel,
    image: &GrayImage,
    region: Option<&[bool]>,
    config: &OptimizeConfig,
    sink: &mut dyn FnMut(&TraceRow),
) -> Result<OptimizeOutcome> {
    config.validate()?;
    model.validate()?;
    let start = Instant::now();
    let penalty = config.penalty();
    let mut current = model.clone();
    let mut state = AdamState::new(config.adam, current.len());
    let mut trace: Vec<TraceRow> = Vec::new();
    let mut best: Option<(MixtureModel, f64, f64)> = None;

    for epoch in 0..config.max_epochs {
        let (report, grads) = evaluate(&current, image, region, penalty, true)?;
        let mut grads = grads.expect("gradients requested");
        if current.len() == 1 && current.mode == Mode::SmoeGating {
            // A lone gate is 1 whatever its π; only the penalty would move it.
            grads.kernels[0].pi = 0.0;
        }
        let improved = best.as_ref().is_none_or(|b| report.total < b.1);
        if improved {
            best = Some((current.clone(), report.total, report.mse));
        }
        let best_total = best.as_ref().map(|b| b.1).unwrap_or(report.total);
        let row = TraceRow {
            epoch,
            total: report.total,
            mse: report.mse,
            l1: report.l1,
            psnr_db: psnr_from_mse(report.mse),
            kernel_count: current.len(),
            elapsed_s: start.elapsed().as_secs_f64(),
            best_total,
        };
        sink(&row);
        trace.push(row);

        if let Some(target) = config.target_psnr {
            if row.psnr_db >= target {
                return Ok(OptimizeOutcome {
                    model: current,
                    trace,
                    stop: StopReason::TargetPsnr,
                    final_total: report.total,
                    final_mse: report.mse,
                });
            }
        }
        let w = config.delta_window;
        if trace.len() > w {
            let mean_delta = (trace[trace.len() - 1 - w].total - report.total) / w as f64;
            if mean_delta.abs() < config.loss_delta_stop {
                return Ok(finish(current, report, best, config, trace, StopReason::LossDelta));
            }
        }
        if epoch + 1 == config.max_epochs {
            return Ok(finish(current, report, best, config, trace, StopReason::MaxEpochs));
        }

        state.step(&mut current, &grads)?;
        if config.prune_inline {
            let mut keep = nonnegative_mask(&current);
            if keep.iter().any(|k| !k) {
                if !keep.iter().any(|k| *k) {
                    // The survivor is alone, so its gate is 1 and the sign of π is free.
                    let j = strongest_kernel(&current);
                    keep[j] = true;
                    current.kernels[j].pi = current.kernels[j].pi.abs();
                }
                state.retain(&keep);
                let mut i = 0;
                current.kernels.retain(|_| {
                    i += 1;
                    keep[i - 1]
                });
            }
        }
        if !current.kernels.iter().all(|k| k.is_finite()) {
            return Err(Error::invalid(format!(
                "parameters became non-finite at epoch {epoch}"
            )));
        }
    }
    unreachable!("loop returns on its last epoch")
}

fn finish(
    current: MixtureModel,
    report: crate::optimizer::loss::LossReport,
    best: Option<(MixtureModel, f64, f64)>,
    config: &OptimizeConfig,
    trace: Vec<TraceRow>,
    stop: StopReason,
) -> OptimizeOutcome {
    match best {
        Some((model, total, mse)) if config.record_best => OptimizeOutcome {
            model,
            trace,
            stop,
            final_total: total,
            final_mse: mse,
        },
        _ => OptimizeOutcome {
            model: current,
            trace,
            stop,
            final_total: report.total,
            final_mse: report.mse,
        },
    }
}
