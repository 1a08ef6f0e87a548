//! Python bindings: `import batchscale_py`.
//!
//! Value types are wrapped as frozen classes with read-only attributes and
//! a `to_json()` method; library errors raise `BatchscaleError`, whose
//! `args` are `(kind, message)`.

use std::path::PathBuf;

use batchscale::cli::config::{Overrides, PipelineConfig};
use batchscale::cli::pipeline::{self, Context};
use batchscale::esfit::{self, FreeParams, PiecewiseEs};
use batchscale::losslaw::{self, EsDataset, EsPoint};
use batchscale::scheduler::{self, AffineCurve, Knot, LossSurface, ScheduleOptions};
use batchscale::{dynamics, Error};
use pyo3::create_exception;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

create_exception!(batchscale_py, BatchscaleError, PyValueError);

fn to_py(e: Error) -> PyErr {
    BatchscaleError::new_err((e.kind(), e.to_string()))
}

trait IntoPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for batchscale::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(to_py)
    }
}

fn json<T: serde::Serialize>(v: &T) -> PyResult<String> {
    serde_json::to_string(v).map_err(|e| PyValueError::new_err(e.to_string()))
}

macro_rules! wrapper {
    ($py:ident, $name:literal, $inner:ty) => {
        #[pyclass(name = $name, frozen, skip_from_py_object, module = "batchscale_py")]
        #[derive(Clone)]
        pub struct $py(pub $inner);
    };
}

wrapper!(PyPowerLawFit, "PowerLawFit", batchscale::PowerLawFit);
wrapper!(PyNoiseProfile, "NoiseProfile", dynamics::NoiseProfile);
wrapper!(PySimConfig, "SimConfig", dynamics::SimConfig);
wrapper!(PyTrainingRun, "TrainingRun", dynamics::TrainingRun);
wrapper!(PyFreeParams, "FreeParams", FreeParams);
wrapper!(PyPiecewiseEs, "PiecewiseEs", PiecewiseEs);
wrapper!(PyEsFit, "EsFit", esfit::EsFit);
wrapper!(PyBatchMetrics, "BatchMetrics", esfit::BatchMetrics);
wrapper!(PySchedule, "Schedule", scheduler::Schedule);
wrapper!(PyEquivalenceReport, "EquivalenceReport", scheduler::EquivalenceReport);

#[pymethods]
impl PyPowerLawFit {
    fn to_json(&self) -> PyResult<String> {
        json(&self.0)
    }
    fn __repr__(&self) -> String {
        format!("PowerLawFit({:?})", self.0)
    }
    #[new]
    fn new(l0: f64, a: f64, alpha: f64) -> PyResult<Self> {
        let p = batchscale::PowerLawFit { l0, a, alpha };
        p.validate().py()?;
        Ok(Self(p))
    }
    #[getter]
    fn l0(&self) -> f64 {
        self.0.l0
    }
    #[getter]
    fn a(&self) -> f64 {
        self.0.a
    }
    #[getter]
    fn alpha(&self) -> f64 {
        self.0.alpha
    }
    fn loss_at(&self, steps: f64) -> f64 {
        self.0.loss_at(steps)
    }
    fn steps_for_loss(&self, target: f64) -> PyResult<f64> {
        self.0.steps_for_loss(target).py()
    }
}

#[pymethods]
impl PyNoiseProfile {
    fn to_json(&self) -> PyResult<String> {
        json(&self.0)
    }
    fn __repr__(&self) -> String {
        format!("NoiseProfile({:?})", self.0)
    }
    #[staticmethod]
    fn constant(b0: f64) -> Self {
        Self(dynamics::NoiseProfile::constant(b0))
    }
    #[staticmethod]
    fn linear(b0: f64, slope: f64) -> Self {
        Self(dynamics::NoiseProfile::linear(b0, slope))
    }
    #[staticmethod]
    fn power(b0: f64, exponent: f64, scale_ref: f64) -> Self {
        Self(dynamics::NoiseProfile::power(b0, exponent, scale_ref))
    }
    fn at(&self, s: f64) -> f64 {
        self.0.at(s)
    }
}

#[pymethods]
impl PySimConfig {
    fn to_json(&self) -> PyResult<String> {
        json(&self.0)
    }
    fn __repr__(&self) -> String {
        format!("SimConfig({:?})", self.0)
    }
    #[new]
    #[pyo3(signature = (epsilon, noise, fullbatch_loss, exact_step_ratio = false))]
    fn new(epsilon: f64, noise: PyRef<PyNoiseProfile>, fullbatch_loss: PyRef<PyPowerLawFit>, exact_step_ratio: bool) -> PyResult<Self> {
        let mut cfg = dynamics::SimConfig::new(epsilon, noise.0, fullbatch_loss.0);
        if exact_step_ratio {
            cfg.step_form = dynamics::StepRatioForm::Exact;
        }
        cfg.validate().py()?;
        Ok(Self(cfg))
    }
    #[getter]
    fn epsilon(&self) -> f64 {
        self.0.epsilon
    }
    fn stall_bound(&self, b_noise: f64) -> f64 {
        self.0.stall_bound(b_noise)
    }
}

#[pymethods]
impl PyTrainingRun {
    fn to_json(&self) -> PyResult<String> {
        json(&self.0)
    }
    fn __repr__(&self) -> String {
        format!("TrainingRun({:?})", self.0)
    }
    /// `records` is a list of `(step, tokens, loss)`.
    #[new]
    #[pyo3(signature = (batch_size, records, model_size = 1.0))]
    fn new(batch_size: f64, records: Vec<(u64, f64, f64)>, model_size: f64) -> PyResult<Self> {
        let run = dynamics::TrainingRun {
            model_size,
            batch_size,
            records: records.into_iter().map(|(step, tokens, loss)| dynamics::RunRecord { step, tokens, loss }).collect(),
            meta: Default::default(),
        };
        run.validate().py()?;
        Ok(Self(run))
    }
    #[getter]
    fn batch_size(&self) -> f64 {
        self.0.batch_size
    }
    #[getter]
    fn model_size(&self) -> f64 {
        self.0.model_size
    }
    #[getter]
    fn records(&self) -> Vec<(u64, f64, f64)> {
        self.0.records.iter().map(|r| (r.step, r.tokens, r.loss)).collect()
    }
    fn tokens_to_reach(&self, target: f64) -> Option<f64> {
        self.0.tokens_to_reach(target)
    }
    fn __len__(&self) -> usize {
        self.0.records.len()
    }
}

#[pymethods]
impl PyFreeParams {
    fn to_json(&self) -> PyResult<String> {
        json(&self.0)
    }
    fn __repr__(&self) -> String {
        format!("FreeParams({:?})", self.0)
    }
    #[new]
    fn new(s_min: f64, s_1: f64, s_opt: f64, s_2: f64, c: f64, e_min: f64) -> PyResult<Self> {
        let fp = FreeParams { s_min, s_1, s_opt, s_2, c, e_min };
        fp.validate().py()?;
        Ok(Self(fp))
    }
    fn model(&self) -> PyResult<PyPiecewiseEs> {
        esfit::from_free_params(&self.0).py().map(PyPiecewiseEs)
    }
    #[getter]
    fn s_min(&self) -> f64 {
        self.0.s_min
    }
    #[getter]
    fn s_1(&self) -> f64 {
        self.0.s_1
    }
    #[getter]
    fn s_opt(&self) -> f64 {
        self.0.s_opt
    }
    #[getter]
    fn s_2(&self) -> f64 {
        self.0.s_2
    }
    #[getter]
    fn c(&self) -> f64 {
        self.0.c
    }
    #[getter]
    fn e_min(&self) -> f64 {
        self.0.e_min
    }
}

#[pymethods]
impl PyPiecewiseEs {
    fn to_json(&self) -> PyResult<String> {
        json(&self.0)
    }
    fn __repr__(&self) -> String {
        format!("PiecewiseEs({:?})", self.0)
    }
    fn eval(&self, s: f64) -> PyResult<f64> {
        self.0.eval(s).py()
    }
    fn derivative(&self, s: f64) -> PyResult<f64> {
        self.0.derivative(s).py()
    }
    fn free_params(&self) -> PyFreeParams {
        PyFreeParams(self.0.free_params())
    }
    /// Largest relative residual of the continuity and smoothness constraints.
    fn constraint_residual(&self) -> f64 {
        self.0.constraint_residuals().max()
    }
    fn metrics(&self, target_loss: f64) -> PyBatchMetrics {
        PyBatchMetrics(esfit::extract_metrics(&self.0, target_loss))
    }
    #[getter]
    fn a_1(&self) -> f64 {
        self.0.a_1
    }
    #[getter]
    fn a_0(&self) -> f64 {
        self.0.a_0
    }
    #[getter]
    fn b_minus1(&self) -> f64 {
        self.0.b_minus1
    }
    #[getter]
    fn b_0(&self) -> f64 {
        self.0.b_0
    }
}

#[pymethods]
impl PyEsFit {
    fn to_json(&self) -> PyResult<String> {
        json(&self.0)
    }
    fn __repr__(&self) -> String {
        format!("EsFit({:?})", self.0)
    }
    #[getter]
    fn model(&self) -> PyPiecewiseEs {
        PyPiecewiseEs(self.0.model)
    }
    #[getter]
    fn objective(&self) -> f64 {
        self.0.objective
    }
    #[getter]
    fn target_loss(&self) -> f64 {
        self.0.target_loss
    }
    fn metrics(&self) -> PyBatchMetrics {
        PyBatchMetrics(esfit::extract_metrics(&self.0.model, self.0.target_loss))
    }
}

#[pymethods]
impl PyBatchMetrics {
    fn to_json(&self) -> PyResult<String> {
        json(&self.0)
    }
    fn __repr__(&self) -> String {
        format!("BatchMetrics({:?})", self.0)
    }
    #[getter]
    fn target_loss(&self) -> f64 {
        self.0.target_loss
    }
    #[getter]
    fn b_min(&self) -> f64 {
        self.0.b_min
    }
    #[getter]
    fn b_opt(&self) -> f64 {
        self.0.b_opt
    }
    #[getter]
    fn e_min(&self) -> f64 {
        self.0.e_min
    }
    #[getter]
    fn s_opt(&self) -> f64 {
        self.0.s_opt
    }
}

#[pymethods]
impl PySchedule {
    fn to_json(&self) -> PyResult<String> {
        json(&self.0)
    }
    fn __repr__(&self) -> String {
        format!("Schedule({:?})", self.0)
    }
    /// `(tokens, batch)` per switch point.
    #[getter]
    fn entries(&self) -> Vec<(f64, f64)> {
        self.0.entries.iter().map(|e| (e.tokens, e.batch)).collect()
    }
    #[getter]
    fn batches(&self) -> Vec<f64> {
        self.0.entries.iter().map(|e| e.batch).collect()
    }
    fn table(&self) -> String {
        scheduler::schedule_table(&self.0)
    }
}

#[pymethods]
impl PyEquivalenceReport {
    fn to_json(&self) -> PyResult<String> {
        json(&self.0)
    }
    fn __repr__(&self) -> String {
        format!("EquivalenceReport({:?})", self.0)
    }
    #[getter]
    fn passed(&self) -> bool {
        self.0.passed
    }
    /// `(d0, b_fixed_data, loss, b_fixed_loss, d_fixed_loss, agrees)` per data budget.
    #[getter]
    fn rows(&self) -> Vec<(f64, f64, f64, f64, f64, bool)> {
        self.0
            .rows
            .iter()
            .map(|r| (r.d0, r.b_fixed_data, r.loss, r.b_fixed_loss, r.d_fixed_loss, r.agrees))
            .collect()
    }
}

#[pyfunction]
fn step_ratio(epsilon: f64, b_noise: f64, batch: f64) -> PyResult<f64> {
    dynamics::step_ratio(epsilon, b_noise, batch).py()
}

#[pyfunction]
fn steps_to_loss(cfg: PyRef<PySimConfig>, batch: f64, target_loss: f64) -> PyResult<f64> {
    dynamics::steps_to_loss(&cfg.0, batch, target_loss).py()
}

#[pyfunction]
fn data_to_loss(cfg: PyRef<PySimConfig>, batch: f64, target_loss: f64) -> PyResult<f64> {
    dynamics::data_to_loss(&cfg.0, batch, target_loss).py()
}

/// Closed-form constant-noise solution as a dict.
#[pyfunction]
fn constant_noise_oracle(epsilon: f64, b0: f64, s_min: f64) -> Vec<(&'static str, f64)> {
    let o = dynamics::constant_noise_oracle(epsilon, b0, s_min);
    vec![("s_min", o.s_min), ("s_opt", o.s_opt), ("e_min", o.e_min), ("b_min", o.b_min), ("b_opt", o.b_opt)]
}

#[pyfunction]
fn simulate_run(cfg: PyRef<PySimConfig>, batch: f64, max_steps: u64) -> PyResult<PyTrainingRun> {
    dynamics::simulate_run(&cfg.0, batch, max_steps).py().map(PyTrainingRun)
}

/// `(loss, tokens_a, tokens_b)` of the first inversion, or `None`.
#[pyfunction]
fn find_crossing(a: PyRef<PyTrainingRun>, b: PyRef<PyTrainingRun>) -> PyResult<Option<(f64, f64, f64)>> {
    Ok(dynamics::find_crossing(&a.0, &b.0).py()?.map(|c| (c.loss, c.tokens_a, c.tokens_b)))
}

#[pyfunction]
#[pyo3(signature = (run, warmup_exclude = 1000, delta = 0.01, seed = 0, starts = 8))]
fn fit_power_law(run: PyRef<PyTrainingRun>, warmup_exclude: u64, delta: f64, seed: u64, starts: usize) -> PyResult<PyPowerLawFit> {
    let opts = losslaw::PowerLawFitOptions { warmup_exclude, delta, seed, starts };
    losslaw::fit_power_law(&run.0, &opts).py().map(PyPowerLawFit)
}

/// `(S, E)` points at `target_loss` from per-batch power laws, as `(S, E, B)`.
#[pyfunction]
fn build_es_dataset(fits: Vec<(f64, PyRef<PyPowerLawFit>)>, target_loss: f64) -> PyResult<Vec<(f64, f64, f64)>> {
    let fits: Vec<(f64, batchscale::PowerLawFit)> = fits.iter().map(|(b, f)| (*b, f.0)).collect();
    let ds = losslaw::build_es_dataset(&fits, target_loss).py()?;
    Ok(ds.points.iter().map(|p| (p.s, p.e, p.b)).collect())
}

/// Fits the piecewise model to `(S, E)` pairs.
#[pyfunction]
#[pyo3(signature = (points, target_loss = 0.0, delta = 0.05, seeds = 16, seed = 0))]
fn fit_es(points: Vec<(f64, f64)>, target_loss: f64, delta: f64, seeds: usize, seed: u64) -> PyResult<PyEsFit> {
    let ds = EsDataset {
        target_loss,
        points: points.into_iter().map(|(s, e)| EsPoint { s, e, b: e / s }).collect(),
        source: Vec::new(),
    };
    esfit::fit_es(&ds, &esfit::EsFitOptions { delta, seeds, seed }).py().map(PyEsFit)
}

/// Momentum schedule on an affine curve `intercept + slope·D`, or on
/// log-log interpolated `(D, B)` knots when `knots` is given.
#[pyfunction]
#[pyo3(signature = (d_interval, momenta, intercept = None, slope = None, knots = None, anchored = true, quantum = None, model_size = 1.0))]
#[allow(clippy::too_many_arguments)]
fn make_schedule(
    d_interval: f64,
    momenta: Vec<f64>,
    intercept: Option<f64>,
    slope: Option<f64>,
    knots: Option<Vec<(f64, f64)>>,
    anchored: bool,
    quantum: Option<f64>,
    model_size: f64,
) -> PyResult<PySchedule> {
    let opts = ScheduleOptions {
        model_size,
        d_interval,
        n: momenta.len(),
        momenta,
        init_mode: if anchored { scheduler::InitMode::Anchored } else { scheduler::InitMode::PaperLiteral },
        quantum,
    };
    let s = match (knots, intercept, slope) {
        (Some(k), None, None) => {
            let curve = scheduler::BoptCurve::from_knots(model_size, k.into_iter().map(|(d, b)| Knot { d, b }).collect()).py()?;
            scheduler::make_schedule(&curve, &opts)
        }
        (None, Some(intercept), Some(slope)) => scheduler::make_schedule(&AffineCurve { intercept, slope }, &opts),
        _ => return Err(PyValueError::new_err("pass either knots or both intercept and slope")),
    };
    s.py().map(PySchedule)
}

/// `loss[i][j]` is the loss at `batches[i]` after `data[j]` tokens.
#[pyfunction]
fn verify_equivalence(batches: Vec<f64>, data: Vec<f64>, loss: Vec<Vec<f64>>) -> PyResult<PyEquivalenceReport> {
    scheduler::verify_equivalence(&LossSurface { batches, data, loss }).py().map(PyEquivalenceReport)
}

#[pyfunction]
fn deepseek_bopt(compute: f64) -> PyResult<f64> {
    scheduler::deepseek_bopt(compute).py()
}

#[pyfunction]
fn mccandlish_lr(eta_max: f64, b_noise: f64, batch: f64) -> f64 {
    scheduler::mccandlish_lr(eta_max, b_noise, batch)
}

#[pyfunction]
fn surge_lr(eta_max: f64, b_noise: f64, batch: f64) -> f64 {
    scheduler::surge_lr(eta_max, b_noise, batch)
}

/// Runs every stage a JSON config supports; returns the warnings.
#[pyfunction]
#[pyo3(signature = (config_json, out_dir))]
fn run_pipeline(config_json: &str, out_dir: PathBuf) -> PyResult<Vec<String>> {
    let mut cfg = PipelineConfig::from_json("<python>", config_json).py()?;
    cfg.apply(&Overrides { output_dir: Some(out_dir), ..Default::default() }).py()?;
    let mut ctx = Context::new(cfg);
    pipeline::run_all(&mut ctx).py()?;
    Ok(ctx.warnings)
}

/// A bundled demo config as JSON text.
#[pyfunction]
fn demo_config(name: &str) -> PyResult<&'static str> {
    batchscale::cli::DEMOS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, t)| *t)
        .ok_or_else(|| PyValueError::new_err(format!("unknown demo {name:?}")))
}

#[pymodule]
fn batchscale_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("BatchscaleError", m.py().get_type::<BatchscaleError>())?;
    m.add_class::<PyPowerLawFit>()?;
    m.add_class::<PyNoiseProfile>()?;
    m.add_class::<PySimConfig>()?;
    m.add_class::<PyTrainingRun>()?;
    m.add_class::<PyFreeParams>()?;
    m.add_class::<PyPiecewiseEs>()?;
    m.add_class::<PyEsFit>()?;
    m.add_class::<PyBatchMetrics>()?;
    m.add_class::<PySchedule>()?;
    m.add_class::<PyEquivalenceReport>()?;
    m.add_function(wrap_pyfunction!(step_ratio, m)?)?;
    m.add_function(wrap_pyfunction!(steps_to_loss, m)?)?;
    m.add_function(wrap_pyfunction!(data_to_loss, m)?)?;
    m.add_function(wrap_pyfunction!(constant_noise_oracle, m)?)?;
    m.add_function(wrap_pyfunction!(simulate_run, m)?)?;
    m.add_function(wrap_pyfunction!(find_crossing, m)?)?;
    m.add_function(wrap_pyfunction!(fit_power_law, m)?)?;
    m.add_function(wrap_pyfunction!(build_es_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(fit_es, m)?)?;
    m.add_function(wrap_pyfunction!(make_schedule, m)?)?;
    m.add_function(wrap_pyfunction!(verify_equivalence, m)?)?;
    m.add_function(wrap_pyfunction!(deepseek_bopt, m)?)?;
    m.add_function(wrap_pyfunction!(mccandlish_lr, m)?)?;
    m.add_function(wrap_pyfunction!(surge_lr, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    m.add_function(wrap_pyfunction!(demo_config, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
