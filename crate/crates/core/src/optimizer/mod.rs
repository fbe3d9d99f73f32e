//! Loss, analytic gradients, Adam and the optimization loop shared by the local and global stages.

mod adam;
mod loss;
mod optimize;

pub use adam::{adam_step, AdamConfig, AdamState, LearningRates};
pub use loss::{compute_gradients, compute_loss, KernelGrad, L1Penalty, LossReport, ParamGradients};
pub use optimize::{
    optimize, prune_negative, write_trace_csv, OptimizeConfig, OptimizeOutcome, StopReason,
    TraceRow, TRACE_CSV_HEADER,
};

pub(crate) use loss::evaluate;
pub(crate) use optimize::strongest_kernel;
