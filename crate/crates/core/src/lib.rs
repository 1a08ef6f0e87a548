//! Data-versus-steps modeling for constant-learning-rate pre-training.
//!
//! * [`dynamics`]: noisy-gradient training model, run simulation and
//!   crossing detection.
//! * [`losslaw`]: loss power-law fitting and `(S, E)` dataset assembly.
//! * [`esfit`]: the piecewise `E(S)` model, its fitter and batch metrics.
//! * [`scheduler`]: optimal-batch curve, momentum schedules, the
//!   fixed-data/fixed-loss equivalence check and reference formulas.
//! * [`cli`]: the pipeline behind the `batchscale` binary.

// NaN must fail the positivity checks, so `!(x > 0.0)` is used on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod dynamics;
pub mod error;
pub mod esfit;
pub mod losslaw;
pub mod optim;
pub mod quad;
pub mod runfile;
pub mod scheduler;

pub use dynamics::{
    constant_noise_oracle, data_to_loss, expected_loss_decrease, find_crossing, noise_at, simulate_run,
    step_ratio, steps_to_loss, Crossing, NoiseKind, NoiseProfile, OracleResult, RunRecord, SimConfig,
    StepRatioForm, TrainingRun,
};
pub use error::{Error, Result};
pub use esfit::{
    classic_data_for_batch, classic_es, es_derivative, eval_es, extract_metrics, fit_es, from_free_params,
    metrics_trend, BatchMetrics, EsFit, EsFitOptions, FreeParams, PiecewiseEs, TrendReport,
};
pub use losslaw::{
    build_es_dataset, fit_power_law, steps_for_loss, EsDataset, EsPoint, PowerLawFit, PowerLawFitOptions,
};
pub use scheduler::{
    deepseek_bopt, eval_bopt, fit_bopt_curve, make_schedule, mccandlish_lr, simulate_surface, surge_lr, verify_equivalence,
    BatchCurve, BoptCurve, EquivalenceReport, InitMode, LossSurface, Schedule, ScheduleOptions,
};
