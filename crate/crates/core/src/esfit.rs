//! Piecewise `E(S)` model: an inverse-linear stage near `s_min`, a
//! quadratic transition around the data-optimal point, and a linear stage
//! whose slope is the minimum viable batch size.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losslaw::EsDataset;
use crate::optim::{huber, linear_regression, nelder_mead, standard_normal, NelderMeadOptions};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PiecewiseEs {
    pub s_min: f64,
    pub s_1: f64,
    pub s_opt: f64,
    pub s_2: f64,
    pub e_min: f64,
    pub c: f64,
    pub b_minus1: f64,
    pub b_0: f64,
    pub a_1: f64,
    pub a_0: f64,
}

/// The six parameters left free once continuity and smoothness at both
/// knots are imposed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FreeParams {
    pub s_min: f64,
    pub s_1: f64,
    pub s_opt: f64,
    pub s_2: f64,
    pub c: f64,
    pub e_min: f64,
}

impl FreeParams {
    pub fn validate(&self) -> Result<()> {
        let all_finite = [self.s_min, self.s_1, self.s_opt, self.s_2, self.c, self.e_min]
            .iter()
            .all(|v| v.is_finite());
        if !all_finite || !(self.s_min > 0.0 && self.s_min < self.s_1 && self.s_1 < self.s_opt && self.s_opt < self.s_2) {
            return Err(Error::OrderingViolation(format!(
                "need 0 < s_min < s_1 < s_opt < s_2, got ({}, {}, {}, {})",
                self.s_min, self.s_1, self.s_opt, self.s_2
            )));
        }
        if !(self.c > 0.0 && self.e_min > 0.0) {
            return Err(Error::OrderingViolation(format!(
                "need c > 0 and e_min > 0, got c = {}, e_min = {}",
                self.c, self.e_min
            )));
        }
        Ok(())
    }

    /// Unconstrained coordinates: logs of the positive gaps and scales.
    pub fn to_unconstrained(&self) -> [f64; 6] {
        [
            self.s_min.ln(),
            (self.s_1 - self.s_min).ln(),
            (self.s_opt - self.s_1).ln(),
            (self.s_2 - self.s_opt).ln(),
            self.c.ln(),
            self.e_min.ln(),
        ]
    }

    pub fn from_unconstrained(u: &[f64]) -> Self {
        let s_min = u[0].exp();
        let s_1 = s_min + u[1].exp();
        let s_opt = s_1 + u[2].exp();
        let s_2 = s_opt + u[3].exp();
        Self { s_min, s_1, s_opt, s_2, c: u[4].exp(), e_min: u[5].exp() }
    }
}

pub fn from_free_params(fp: &FreeParams) -> Result<PiecewiseEs> {
    fp.validate()?;
    let FreeParams { s_min, s_1, s_opt, s_2, c, e_min } = *fp;
    let b_minus1 = -2.0 * c * (s_1 - s_opt) * (s_1 - s_min).powi(2);
    let b_0 = c * (s_1 - s_opt).powi(2) + e_min - b_minus1 / (s_1 - s_min);
    let a_1 = 2.0 * c * (s_2 - s_opt);
    let a_0 = c * (s_2 - s_opt).powi(2) + e_min - a_1 * s_2;
    Ok(PiecewiseEs { s_min, s_1, s_opt, s_2, e_min, c, b_minus1, b_0, a_1, a_0 })
}

/// Per-knot residuals of the four equality constraints.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstraintResiduals {
    /// Relative value gap at `s_1`.
    pub continuity_s1: f64,
    /// Relative value gap at `s_2`.
    pub continuity_s2: f64,
    /// Relative slope gap at `s_1`.
    pub smoothness_s1: f64,
    /// Relative slope gap at `s_2`.
    pub smoothness_s2: f64,
}

impl ConstraintResiduals {
    pub fn max(&self) -> f64 {
        self.continuity_s1
            .max(self.continuity_s2)
            .max(self.smoothness_s1)
            .max(self.smoothness_s2)
    }
}

fn rel_gap(x: f64, y: f64) -> f64 {
    (x - y).abs() / x.abs().max(y.abs()).max(f64::MIN_POSITIVE)
}

impl PiecewiseEs {
    pub fn free_params(&self) -> FreeParams {
        FreeParams { s_min: self.s_min, s_1: self.s_1, s_opt: self.s_opt, s_2: self.s_2, c: self.c, e_min: self.e_min }
    }

    fn inverse_piece(&self, s: f64) -> f64 {
        self.b_minus1 / (s - self.s_min) + self.b_0
    }
    fn quadratic_piece(&self, s: f64) -> f64 {
        self.c * (s - self.s_opt).powi(2) + self.e_min
    }
    fn linear_piece(&self, s: f64) -> f64 {
        self.a_1 * s + self.a_0
    }

    pub fn eval(&self, s: f64) -> Result<f64> {
        eval_es(self, s)
    }

    pub fn derivative(&self, s: f64) -> Result<f64> {
        es_derivative(self, s)
    }

    /// Evaluates the three pieces against the equality constraints.
    pub fn constraint_residuals(&self) -> ConstraintResiduals {
        let slope_inv = -self.b_minus1 / (self.s_1 - self.s_min).powi(2);
        let slope_quad_1 = 2.0 * self.c * (self.s_1 - self.s_opt);
        let slope_quad_2 = 2.0 * self.c * (self.s_2 - self.s_opt);
        ConstraintResiduals {
            continuity_s1: rel_gap(self.inverse_piece(self.s_1), self.quadratic_piece(self.s_1)),
            continuity_s2: rel_gap(self.quadratic_piece(self.s_2), self.linear_piece(self.s_2)),
            smoothness_s1: rel_gap(slope_inv, slope_quad_1),
            smoothness_s2: rel_gap(slope_quad_2, self.a_1),
        }
    }

    /// Checks ordering, signs and the four equality constraints at `tol`.
    pub fn check(&self, tol: f64) -> Result<()> {
        self.free_params().validate()?;
        if !(self.b_minus1 > 0.0 && self.a_1 > 0.0) {
            return Err(Error::OrderingViolation(format!(
                "need b_minus1 > 0 and a_1 > 0, got {} and {}",
                self.b_minus1, self.a_1
            )));
        }
        let r = self.constraint_residuals();
        if !(r.max() <= tol) {
            return Err(Error::Domain(format!("constraint residuals exceed {tol}: {r:?}")));
        }
        Ok(())
    }
}

pub fn eval_es(p: &PiecewiseEs, s: f64) -> Result<f64> {
    if !(s > p.s_min) {
        return Err(Error::Domain(format!("S = {s} must exceed s_min = {}", p.s_min)));
    }
    Ok(if s <= p.s_1 {
        p.inverse_piece(s)
    } else if s <= p.s_2 {
        p.quadratic_piece(s)
    } else {
        p.linear_piece(s)
    })
}

pub fn es_derivative(p: &PiecewiseEs, s: f64) -> Result<f64> {
    if !(s > p.s_min) {
        return Err(Error::Domain(format!("S = {s} must exceed s_min = {}", p.s_min)));
    }
    Ok(if s <= p.s_1 {
        -p.b_minus1 / (s - p.s_min).powi(2)
    } else if s <= p.s_2 {
        2.0 * p.c * (s - p.s_opt)
    } else {
        p.a_1
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EsFitOptions {
    /// Huber threshold on `ln E` residuals.
    pub delta: f64,
    /// Number of multi-starts.
    pub seeds: usize,
    pub seed: u64,
}

impl Default for EsFitOptions {
    fn default() -> Self {
        Self { delta: 0.05, seeds: 16, seed: 0 }
    }
}

pub const MIN_ES_POINTS: usize = 6;

/// Fitted model with the diagnostics persisted alongside it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EsFit {
    pub target_loss: f64,
    pub model: PiecewiseEs,
    pub free: FreeParams,
    pub objective: f64,
    pub seed: u64,
    /// Index of the multi-start that produced the winner.
    pub start: usize,
    pub point_count: usize,
}

fn objective(points: &[(f64, f64)], u: &[f64], delta: f64) -> f64 {
    let fp = FreeParams::from_unconstrained(u);
    let Ok(p) = from_free_params(&fp) else {
        return f64::INFINITY;
    };
    let mut total = 0.0;
    for &(s, log_e) in points {
        match eval_es(&p, s) {
            Ok(e) if e > 0.0 => total += huber(log_e - e.ln(), delta),
            _ => return f64::INFINITY,
        }
    }
    total
}

/// Data-driven starting point for the simplex search.
fn heuristic_start(points: &[(f64, f64)]) -> FreeParams {
    let e: Vec<f64> = points.iter().map(|p| p.1.exp()).collect();
    let s: Vec<f64> = points.iter().map(|p| p.0).collect();
    let n = s.len();
    let k = (0..n).min_by(|&i, &j| e[i].total_cmp(&e[j])).unwrap_or(0);
    let s_opt = s[k];
    let e_min = e[k];
    let s_min = 0.8 * s[0];

    // Curvature from the second divided difference around the minimum.
    let j = k.clamp(1, n - 2);
    let (x0, x1, x2) = (s[j - 1], s[j], s[j + 1]);
    let d01 = (e[j] - e[j - 1]) / (x1 - x0);
    let d12 = (e[j + 1] - e[j]) / (x2 - x1);
    let mut c = (d12 - d01) / (x2 - x0);
    if !(c > 0.0 && c.is_finite()) {
        c = e_min / (s_opt - s_min).powi(2);
    }

    let mut a_1 = (e[n - 1] - e[n - 2]) / (s[n - 1] - s[n - 2]);
    if !(a_1 > 0.0 && a_1.is_finite()) {
        a_1 = e_min / s_opt;
    }
    let mut s_2 = s_opt + a_1 / (2.0 * c);
    if !(s_2 > s_opt) || s_2 > 10.0 * s[n - 1] {
        s_2 = 0.5 * (s_opt + s[n - 1]).max(1.1 * s_opt);
    }
    let s_1 = s_min + 0.5 * (s_opt - s_min);
    FreeParams { s_min, s_1, s_opt, s_2, c, e_min }
}

/// Fits the piecewise model to `ds` by minimizing the summed Huber loss of
/// log-E residuals over the unconstrained reparameterization.
///
/// Start 0 is the data heuristic; the others jitter it with seeded
/// Gaussian noise. Ties break toward the lower objective, then lower `s_min`.
pub fn fit_es(ds: &EsDataset, opts: &EsFitOptions) -> Result<EsFit> {
    if !(opts.delta > 0.0) {
        return Err(Error::InvalidInput(format!("Huber delta must be positive, got {}", opts.delta)));
    }
    if ds.points.len() < MIN_ES_POINTS {
        return Err(Error::InsufficientData(format!(
            "{} points; need at least {MIN_ES_POINTS}",
            ds.points.len()
        )));
    }
    let mut pts: Vec<(f64, f64)> = Vec::with_capacity(ds.points.len());
    for p in &ds.points {
        if !(p.s > 0.0 && p.e > 0.0 && p.s.is_finite() && p.e.is_finite()) {
            return Err(Error::InvalidInput(format!("point ({}, {}) must be positive and finite", p.s, p.e)));
        }
        pts.push((p.s, p.e.ln()));
    }
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    if pts.windows(2).any(|w| w[0].0 == w[1].0) {
        return Err(Error::InsufficientData("S values must be distinct".into()));
    }
    let k = (0..pts.len()).min_by(|&i, &j| pts[i].1.total_cmp(&pts[j].1)).unwrap_or(0);
    if k == 0 || k + 1 == pts.len() {
        return Err(Error::FitDiverged(
            "E is monotone in S over the data; no interior minimum to anchor s_opt".into(),
        ));
    }

    let (b_lo, b_hi) = ds
        .points
        .iter()
        .map(|p| p.e / p.s)
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), b| (lo.min(b), hi.max(b)));
    if !(b_hi >= 10.0 * b_lo) {
        return Err(Error::InsufficientData(format!(
            "batch sizes span [{b_lo}, {b_hi}], less than one decade"
        )));
    }
    let base = heuristic_start(&pts).to_unconstrained();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let nm = NelderMeadOptions { max_evals: 40_000, restarts: 8, ..NelderMeadOptions::default() };
    let step = [0.1; 6];

    let mut best: Option<(f64, Vec<f64>, usize)> = None;
    for start in 0..opts.seeds.max(1) {
        let x0: Vec<f64> = if start == 0 {
            base.to_vec()
        } else {
            base.iter().map(|&v| v + 0.3 * standard_normal(&mut rng)).collect()
        };
        if !objective(&pts, &x0, opts.delta).is_finite() {
            continue;
        }
        let m = nelder_mead(|u| objective(&pts, u, opts.delta), &x0, &step, nm);
        if !m.value.is_finite() {
            continue;
        }
        let better = match &best {
            None => true,
            Some((f, x, _)) => m.value < *f || (m.value == *f && m.x[0] < x[0]),
        };
        if better {
            best = Some((m.value, m.x, start));
        }
    }
    let (value, u, start) = best.ok_or_else(|| Error::FitDiverged("no start produced a finite objective".into()))?;
    let free = FreeParams::from_unconstrained(&u);
    let model = from_free_params(&free).map_err(|e| Error::FitDiverged(e.to_string()))?;
    Ok(EsFit { target_loss: ds.target_loss, model, free, objective: value, seed: opts.seed, start, point_count: pts.len() })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchMetrics {
    pub target_loss: f64,
    pub b_min: f64,
    pub b_opt: f64,
    pub e_min: f64,
    pub s_opt: f64,
}

/// `B_min` is the asymptotic slope; `B_opt` the origin-to-minimum chord slope.
pub fn extract_metrics(p: &PiecewiseEs, target_loss: f64) -> BatchMetrics {
    BatchMetrics { target_loss, b_min: p.a_1, b_opt: p.e_min / p.s_opt, e_min: p.e_min, s_opt: p.s_opt }
}

/// Hyperbolic `E(S) = E_min / (1 − S_min/S)`.
pub fn classic_es(e_min: f64, s_min: f64, s: f64) -> Result<f64> {
    if !(s > s_min) {
        return Err(Error::Domain(format!("S = {s} must exceed S_min = {s_min}")));
    }
    Ok(e_min / (1.0 - s_min / s))
}

/// Data needed at batch size `b` under the hyperbolic law: `E_min + B·S_min`.
pub fn classic_data_for_batch(e_min: f64, s_min: f64, b: f64) -> f64 {
    e_min + b * s_min
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendReport {
    /// Target losses, descending.
    pub losses: Vec<f64>,
    pub b_min: Vec<f64>,
    pub b_opt: Vec<f64>,
    /// Whether each series is nondecreasing as the loss decreases.
    pub b_min_monotone: bool,
    pub b_opt_monotone: bool,
    /// Log-log slopes of B against `loss − l0`, when `l0` is supplied.
    pub b_min_slope: Option<f64>,
    pub b_opt_slope: Option<f64>,
}

pub fn metrics_trend(metrics: &[BatchMetrics], l0: Option<f64>) -> Result<TrendReport> {
    let mut sorted = metrics.to_vec();
    sorted.sort_by(|a, b| b.target_loss.total_cmp(&a.target_loss));
    sorted.dedup_by(|a, b| a.target_loss == b.target_loss);
    if sorted.len() < 3 || sorted.len() != metrics.len() {
        return Err(Error::InsufficientData(format!(
            "need at least 3 metrics at distinct target losses, got {} ({} distinct)",
            metrics.len(),
            sorted.len()
        )));
    }
    let losses: Vec<f64> = sorted.iter().map(|m| m.target_loss).collect();
    let b_min: Vec<f64> = sorted.iter().map(|m| m.b_min).collect();
    let b_opt: Vec<f64> = sorted.iter().map(|m| m.b_opt).collect();
    let nondecreasing = |v: &[f64]| v.windows(2).all(|w| w[1] >= w[0]);

    let slope = |series: &[f64], l0: f64| -> Option<f64> {
        let (x, y): (Vec<f64>, Vec<f64>) = losses
            .iter()
            .zip(series)
            .filter(|(l, b)| **l > l0 && **b > 0.0)
            .map(|(l, b)| ((l - l0).ln(), b.ln()))
            .unzip();
        linear_regression(&x, &y).map(|(_, m)| m)
    };
    let (b_min_slope, b_opt_slope) = match l0 {
        Some(l0) => (slope(&b_min, l0), slope(&b_opt, l0)),
        None => (None, None),
    };
    Ok(TrendReport {
        b_min_monotone: nondecreasing(&b_min),
        b_opt_monotone: nondecreasing(&b_opt),
        losses,
        b_min,
        b_opt,
        b_min_slope,
        b_opt_slope,
    })
}
