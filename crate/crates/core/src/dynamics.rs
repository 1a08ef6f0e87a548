//! Noisy-gradient training dynamics under a constant learning rate.
//!
//! A full-batch reference run reaches loss `L_fb(s)` after `s` steps. A run
//! at batch size `B` needs `δS(s) ≥ 1` of its own steps for every full-batch
//! step, so the steps and tokens it spends to reach a loss are the
//! integrals of `δS` and `B·δS` over full-batch pseudo-time.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losslaw::PowerLawFit;
use crate::quad::{adaptive_simpson, QuadOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    Constant,
    Linear,
    Power,
}

/// Gradient noise scale `B_noise(s)` as a function of full-batch steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseProfile {
    pub kind: NoiseKind,
    pub b0: f64,
    #[serde(default)]
    pub growth: f64,
    #[serde(default = "default_scale_ref")]
    pub scale_ref: f64,
}

fn default_scale_ref() -> f64 {
    1.0
}

impl NoiseProfile {
    pub fn constant(b0: f64) -> Self {
        Self { kind: NoiseKind::Constant, b0, growth: 0.0, scale_ref: 1.0 }
    }

    pub fn linear(b0: f64, slope: f64) -> Self {
        Self { kind: NoiseKind::Linear, b0, growth: slope, scale_ref: 1.0 }
    }

    pub fn power(b0: f64, exponent: f64, scale_ref: f64) -> Self {
        Self { kind: NoiseKind::Power, b0, growth: exponent, scale_ref }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.b0 > 0.0 && self.b0.is_finite()) {
            return Err(Error::InvalidConfig(format!("noise b0 must be positive and finite, got {}", self.b0)));
        }
        if !(self.growth >= 0.0 && self.growth.is_finite()) {
            return Err(Error::InvalidConfig(format!("noise growth must be >= 0, got {}", self.growth)));
        }
        if !(self.scale_ref > 0.0 && self.scale_ref.is_finite()) {
            return Err(Error::InvalidConfig(format!("noise scale_ref must be positive, got {}", self.scale_ref)));
        }
        Ok(())
    }

    pub fn at(&self, s: f64) -> f64 {
        noise_at(self, s)
    }

    /// Largest noise value on `[0, s]`; every kind is nondecreasing.
    pub fn max_on(&self, s: f64) -> f64 {
        self.at(0.0).max(self.at(s))
    }
}

pub fn noise_at(profile: &NoiseProfile, s: f64) -> f64 {
    match profile.kind {
        NoiseKind::Constant => profile.b0,
        NoiseKind::Linear => profile.b0 + profile.growth * s,
        NoiseKind::Power => profile.b0 * (1.0 + s / profile.scale_ref).powf(profile.growth),
    }
}

/// Which `δS` expression to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepRatioForm {
    /// `1 / (1 − ½ε·B_noise/B)`, valid for small learning rates.
    #[default]
    SmallLr,
    /// `(1 − ½ε) / (1 − ½ε·(1 + B_noise/B))`.
    Exact,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub epsilon: f64,
    pub noise: NoiseProfile,
    pub fullbatch_loss: PowerLawFit,
    #[serde(default = "default_quad_rel_tol")]
    pub quad_rel_tol: f64,
    #[serde(default = "default_max_subdivisions")]
    pub max_subdivisions: usize,
    #[serde(default)]
    pub step_form: StepRatioForm,
    /// Pseudo-time integration substeps per optimizer step in `simulate_run`.
    #[serde(default = "default_substeps")]
    pub substeps: usize,
}

fn default_quad_rel_tol() -> f64 {
    1e-8
}
fn default_max_subdivisions() -> usize {
    1 << 20
}
fn default_substeps() -> usize {
    8
}

impl SimConfig {
    pub fn new(epsilon: f64, noise: NoiseProfile, fullbatch_loss: PowerLawFit) -> Self {
        Self {
            epsilon,
            noise,
            fullbatch_loss,
            quad_rel_tol: default_quad_rel_tol(),
            max_subdivisions: default_max_subdivisions(),
            step_form: StepRatioForm::SmallLr,
            substeps: default_substeps(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon < 2.0) {
            return Err(Error::InvalidConfig(format!("epsilon must lie in (0, 2), got {}", self.epsilon)));
        }
        if !(self.quad_rel_tol > 0.0 && self.quad_rel_tol <= 1e-2) {
            return Err(Error::InvalidConfig(format!(
                "quad_rel_tol must lie in (0, 1e-2], got {}",
                self.quad_rel_tol
            )));
        }
        if self.max_subdivisions == 0 || self.substeps == 0 {
            return Err(Error::InvalidConfig("max_subdivisions and substeps must be positive".into()));
        }
        self.noise.validate()?;
        self.fullbatch_loss.validate().map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    fn quad_options(&self) -> QuadOptions {
        QuadOptions { rel_tol: self.quad_rel_tol, max_subdivisions: self.max_subdivisions }
    }

    /// Smallest batch size that still makes progress at noise level `b_noise`.
    pub fn stall_bound(&self, b_noise: f64) -> f64 {
        match self.step_form {
            StepRatioForm::SmallLr => 0.5 * self.epsilon * b_noise,
            StepRatioForm::Exact => 0.5 * self.epsilon * b_noise / (1.0 - 0.5 * self.epsilon),
        }
    }

    pub fn step_ratio_at(&self, s: f64, batch: f64) -> Result<f64> {
        let b_noise = self.noise.at(s);
        match self.step_form {
            StepRatioForm::SmallLr => step_ratio(self.epsilon, b_noise, batch),
            StepRatioForm::Exact => step_ratio_exact(self.epsilon, b_noise, batch),
        }
        .map_err(|e| match e {
            Error::Stall { batch, bound, .. } => Error::Stall { batch, bound, step: s },
            other => other,
        })
    }

    /// `ds/dS = 1/δS`, clamped at zero once the stall bound is reached.
    fn progress_rate(&self, s: f64, batch: f64) -> f64 {
        let x = 0.5 * self.epsilon * self.noise.at(s) / batch;
        let rate = match self.step_form {
            StepRatioForm::SmallLr => 1.0 - x,
            StepRatioForm::Exact => (1.0 - 0.5 * self.epsilon - x) / (1.0 - 0.5 * self.epsilon),
        };
        rate.max(0.0)
    }

    fn check_reachable(&self, batch: f64, s_min: f64) -> Result<()> {
        let bound = self.stall_bound(self.noise.max_on(s_min));
        if !(batch > bound) {
            let step = if self.stall_bound(self.noise.at(0.0)) >= batch { 0.0 } else { s_min };
            return Err(Error::Stall { batch, bound, step });
        }
        Ok(())
    }
}

/// Expected one-step loss decrease with identity Hessian:
/// `ε|G|² − ½ε²(|G|² + tr(Σ)/B)`.
pub fn expected_loss_decrease(epsilon: f64, grad_norm_sq: f64, noise_trace: f64, batch: f64) -> f64 {
    epsilon * grad_norm_sq - 0.5 * epsilon * epsilon * (grad_norm_sq + noise_trace / batch)
}

/// Steps at batch size `batch` needed to match one full-batch step
/// (small learning-rate form). `batch = ∞` gives exactly 1.
pub fn step_ratio(epsilon: f64, b_noise: f64, batch: f64) -> Result<f64> {
    let bound = 0.5 * epsilon * b_noise;
    if !(batch > bound) {
        return Err(Error::Stall { batch, bound, step: f64::NAN });
    }
    Ok(1.0 / (1.0 - bound / batch))
}

/// Step ratio keeping the `1 − ½ε` factor.
pub fn step_ratio_exact(epsilon: f64, b_noise: f64, batch: f64) -> Result<f64> {
    let denom = 1.0 - 0.5 * epsilon * (1.0 + b_noise / batch);
    if !(denom > 0.0) {
        let bound = 0.5 * epsilon * b_noise / (1.0 - 0.5 * epsilon);
        return Err(Error::Stall { batch, bound, step: f64::NAN });
    }
    Ok((1.0 - 0.5 * epsilon) / denom)
}

/// Steps at constant batch size `batch` to reach `target_loss`.
pub fn steps_to_loss(cfg: &SimConfig, batch: f64, target_loss: f64) -> Result<f64> {
    let s_min = cfg.fullbatch_loss.steps_for_loss(target_loss)?;
    if batch.is_infinite() && batch > 0.0 {
        return Ok(s_min);
    }
    cfg.check_reachable(batch, s_min)?;
    let r = adaptive_simpson(
        |s| cfg.step_ratio_at(s, batch).unwrap_or(f64::INFINITY),
        0.0,
        s_min,
        cfg.quad_options(),
    )?;
    // δS ≥ 1 pointwise, so the integral cannot undercut S_min.
    Ok(r.value.max(s_min))
}

/// Tokens consumed at constant batch size `batch` to reach `target_loss`.
pub fn data_to_loss(cfg: &SimConfig, batch: f64, target_loss: f64) -> Result<f64> {
    if batch.is_infinite() {
        return Ok(f64::INFINITY);
    }
    Ok(batch * steps_to_loss(cfg, batch, target_loss)?)
}

/// Closed-form solution of the constant-noise model for one target loss
/// (reached after `s_min` full-batch steps).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    pub epsilon: f64,
    pub b0: f64,
    pub s_min: f64,
    pub s_opt: f64,
    pub e_min: f64,
    pub b_min: f64,
    pub b_opt: f64,
}

impl OracleResult {
    /// `E(S) = ½εb0·S²/(S − s_min)` for `S > s_min`.
    pub fn e_of_s(&self, s: f64) -> Result<f64> {
        if !(s > self.s_min) {
            return Err(Error::Domain(format!("S = {s} must exceed s_min = {}", self.s_min)));
        }
        Ok(self.b_min * s * s / (s - self.s_min))
    }

    pub fn s_of_b(&self, batch: f64) -> f64 {
        self.s_min * batch / (batch - self.b_min)
    }

    pub fn e_of_b(&self, batch: f64) -> f64 {
        self.s_min * batch * batch / (batch - self.b_min)
    }
}

pub fn constant_noise_oracle(epsilon: f64, b0: f64, s_min: f64) -> OracleResult {
    OracleResult {
        epsilon,
        b0,
        s_min,
        s_opt: 2.0 * s_min,
        e_min: 2.0 * epsilon * b0 * s_min,
        b_min: 0.5 * epsilon * b0,
        b_opt: epsilon * b0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub step: u64,
    pub tokens: f64,
    pub loss: f64,
}

/// A loss trajectory recorded at a fixed batch size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingRun {
    pub model_size: f64,
    pub batch_size: f64,
    pub records: Vec<RunRecord>,
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
}

impl TrainingRun {
    pub fn validate(&self) -> Result<()> {
        if !(self.model_size > 0.0) || !(self.batch_size > 0.0 && self.batch_size.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "model_size and batch_size must be positive, got {} and {}",
                self.model_size, self.batch_size
            )));
        }
        for (i, r) in self.records.iter().enumerate() {
            if !(r.loss.is_finite() && r.loss > 0.0) {
                return Err(Error::InvalidInput(format!("record {i}: loss {} is not finite and positive", r.loss)));
            }
            if (r.tokens - r.step as f64 * self.batch_size).abs() > 1.0 {
                return Err(Error::InvalidInput(format!(
                    "record {i}: tokens {} disagree with step {} x batch size {}",
                    r.tokens, r.step, self.batch_size
                )));
            }
            if i > 0 {
                let p = &self.records[i - 1];
                if r.step <= p.step || !(r.tokens > p.tokens) {
                    return Err(Error::InvalidInput(format!("record {i}: steps and tokens must be strictly increasing")));
                }
            }
        }
        Ok(())
    }

    pub fn id(&self) -> String {
        self.meta.get("id").cloned().unwrap_or_else(|| format!("bs{}", self.batch_size))
    }

    /// `(min, max)` of recorded losses.
    pub fn loss_range(&self) -> Option<(f64, f64)> {
        let mut it = self.records.iter().map(|r| r.loss);
        let first = it.next()?;
        Some(it.fold((first, first), |(lo, hi), l| (lo.min(l), hi.max(l))))
    }

    /// Tokens at which the loss first reaches `target`, interpolating
    /// linearly in log-tokens between bracketing records.
    pub fn tokens_to_reach(&self, target: f64) -> Option<f64> {
        let k = self.records.iter().position(|r| r.loss <= target)?;
        let hit = &self.records[k];
        if k == 0 || hit.loss == target {
            return Some(hit.tokens);
        }
        let prev = &self.records[k - 1];
        let t = (prev.loss - target) / (prev.loss - hit.loss);
        let log_tokens = prev.tokens.ln() + t * (hit.tokens.ln() - prev.tokens.ln());
        Some(log_tokens.exp())
    }
}

/// Simulates a constant-batch run for `max_steps` optimizer steps.
///
/// Full-batch pseudo-time follows `ds/dS = 1/δS(s)`, integrated with RK4 on
/// `cfg.substeps` substeps per optimizer step; once the rate reaches zero
/// the loss stays at the stall level. Fails with `Error::Stall` only when
/// no progress is possible from the first step, where `L_fb` is unbounded.
pub fn simulate_run(cfg: &SimConfig, batch: f64, max_steps: u64) -> Result<TrainingRun> {
    cfg.validate()?;
    if !(batch > 0.0 && batch.is_finite()) {
        return Err(Error::InvalidInput(format!("batch size must be positive and finite, got {batch}")));
    }
    if max_steps == 0 {
        return Err(Error::InvalidInput("max_steps must be positive".into()));
    }
    if cfg.progress_rate(0.0, batch) <= 0.0 {
        return Err(Error::Stall { batch, bound: cfg.stall_bound(cfg.noise.at(0.0)), step: 0.0 });
    }

    let h = 1.0 / cfg.substeps as f64;
    let rate = |s: f64| cfg.progress_rate(s, batch);
    let mut s = 0.0f64;
    let mut records = Vec::with_capacity(max_steps as usize);
    for step in 1..=max_steps {
        for _ in 0..cfg.substeps {
            let k1 = rate(s);
            if k1 <= 0.0 {
                break;
            }
            let k2 = rate(s + 0.5 * h * k1);
            let k3 = rate(s + 0.5 * h * k2);
            let k4 = rate(s + h * k3);
            let next = s + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
            s = next.max(s);
        }
        records.push(RunRecord {
            step,
            tokens: step as f64 * batch,
            loss: cfg.fullbatch_loss.loss_at(s),
        });
    }

    let mut meta = BTreeMap::new();
    meta.insert("source".to_string(), "simulate".to_string());
    meta.insert("id".to_string(), format!("sim-bs{batch}"));
    Ok(TrainingRun { model_size: 1.0, batch_size: batch, records, meta })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Crossing {
    pub loss: f64,
    pub tokens_a: f64,
    pub tokens_b: f64,
}

/// Number of geometric loss levels scanned by [`find_crossing`].
pub const CROSSING_GRID_LEVELS: usize = 256;

/// Finds the largest loss at which the smaller-batch run `a` stops being
/// the more data-efficient one.
///
/// Scans a geometric grid of loss levels over the common loss range from
/// high to low; the first level pair where `E_a − E_b` changes from
/// negative to nonnegative is refined by bisection.
pub fn find_crossing(a: &TrainingRun, b: &TrainingRun) -> Result<Option<Crossing>> {
    if !(a.batch_size < b.batch_size) {
        return Err(Error::InvalidInput(format!(
            "run A batch size {} must be smaller than run B batch size {}",
            a.batch_size, b.batch_size
        )));
    }
    let (a_lo, a_hi) = a.loss_range().ok_or_else(|| Error::InsufficientData("run A has no records".into()))?;
    let (b_lo, b_hi) = b.loss_range().ok_or_else(|| Error::InsufficientData("run B has no records".into()))?;
    let lo = a_lo.max(b_lo);
    let hi = a_hi.min(b_hi);
    if !(lo < hi) {
        return Err(Error::InsufficientOverlap { a_lo, a_hi, b_lo, b_hi });
    }

    // Both runs reach every level in [lo, hi] by construction.
    let gap = |l: f64| -> f64 {
        let ea = a.tokens_to_reach(l).unwrap_or(f64::INFINITY);
        let eb = b.tokens_to_reach(l).unwrap_or(f64::INFINITY);
        ea - eb
    };

    let ratio = (lo / hi).powf(1.0 / (CROSSING_GRID_LEVELS - 1) as f64);
    let levels: Vec<f64> = (0..CROSSING_GRID_LEVELS)
        .map(|i| if i + 1 == CROSSING_GRID_LEVELS { lo } else { hi * ratio.powi(i as i32) })
        .collect();

    let mut prev = (levels[0], gap(levels[0]));
    for &level in &levels[1..] {
        let g = gap(level);
        if prev.1 < 0.0 && g >= 0.0 {
            // prev.0 > level; invariant gap(upper) < 0 <= gap(lower).
            let (mut upper, mut lower) = (prev.0, level);
            for _ in 0..200 {
                let mid = 0.5 * (upper + lower);
                if mid == upper || mid == lower {
                    break;
                }
                if gap(mid) < 0.0 {
                    upper = mid;
                } else {
                    lower = mid;
                }
            }
            let loss = 0.5 * (upper + lower);
            return Ok(Some(Crossing {
                loss,
                tokens_a: a.tokens_to_reach(loss).unwrap_or(f64::NAN),
                tokens_b: b.tokens_to_reach(loss).unwrap_or(f64::NAN),
            }));
        }
        prev = (level, g);
    }
    Ok(None)
}
