//! Optimal-batch-size curve over consumed data, the momentum batch-size
//! schedule built on it, the argmin-equivalence check between the
//! fixed-data and fixed-loss problems, and related reference formulas.

use serde::{Deserialize, Serialize};

use crate::dynamics::{simulate_run, SimConfig};
use crate::error::{Error, Result};
use crate::esfit::BatchMetrics;
use crate::optim::linear_regression;

/// A batch-size curve `f(N, D)` for a fixed model size.
pub trait BatchCurve {
    /// Batch size at cumulative data `d` (tokens). `d = 0` is the start.
    fn batch_at(&self, d: f64) -> f64;
}

impl<F: Fn(f64) -> f64> BatchCurve for F {
    fn batch_at(&self, d: f64) -> f64 {
        self(d)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Knot {
    pub d: f64,
    pub b: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoptCurve {
    pub model_size: f64,
    pub knots: Vec<Knot>,
    /// Power-law exponent used beyond the last knot.
    pub extrapolation: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl BoptCurve {
    pub fn from_knots(model_size: f64, mut knots: Vec<Knot>) -> Result<Self> {
        if knots.len() < 2 {
            return Err(Error::InsufficientData(format!("{} knots; need at least 2", knots.len())));
        }
        if knots.iter().any(|k| !(k.d > 0.0 && k.b > 0.0 && k.d.is_finite() && k.b.is_finite())) {
            return Err(Error::InvalidInput("knots must have positive finite D and B".into()));
        }
        knots.sort_by(|x, y| x.d.total_cmp(&y.d));
        if knots.windows(2).any(|w| w[0].d == w[1].d) {
            return Err(Error::InvalidInput("knot D values must be distinct".into()));
        }
        let tail = &knots[knots.len().saturating_sub(3)..];
        let x: Vec<f64> = tail.iter().map(|k| k.d.ln()).collect();
        let y: Vec<f64> = tail.iter().map(|k| k.b.ln()).collect();
        let extrapolation = linear_regression(&x, &y).map(|(_, m)| m).unwrap_or(0.0);
        let mut warnings = Vec::new();
        if !knots_monotone(&knots) {
            warnings.push("non-monotone: knot batch sizes decrease somewhere along D".to_string());
        }
        Ok(Self { model_size, knots, extrapolation, warnings })
    }

    pub fn is_monotone(&self) -> bool {
        knots_monotone(&self.knots)
    }
}

/// Relative slack below which a knot-to-knot decrease counts as flat; fits
/// of a flat curve differ in the last few bits.
const MONOTONE_REL_TOL: f64 = 1e-9;

fn knots_monotone(knots: &[Knot]) -> bool {
    knots.windows(2).all(|w| w[1].b >= w[0].b * (1.0 - MONOTONE_REL_TOL))
}

/// Builds `f(N, D)` from per-loss metrics: each metric becomes the knot
/// `(D = e_min, B = b_opt)`.
pub fn fit_bopt_curve(metrics: &[BatchMetrics], model_size: f64) -> Result<BoptCurve> {
    let mut losses: Vec<f64> = metrics.iter().map(|m| m.target_loss).collect();
    losses.sort_by(f64::total_cmp);
    losses.dedup();
    if metrics.len() < 3 || losses.len() != metrics.len() {
        return Err(Error::InsufficientData(format!(
            "need at least 3 metrics at distinct target losses, got {}",
            metrics.len()
        )));
    }
    let knots = metrics.iter().map(|m| Knot { d: m.e_min, b: m.b_opt }).collect();
    BoptCurve::from_knots(model_size, knots)
}

/// Log-log interpolation between knots, power-law extrapolation past the
/// last knot, and the first knot's batch size at or below the first knot.
pub fn eval_bopt(curve: &BoptCurve, d: f64) -> f64 {
    let first = curve.knots[0];
    let last = curve.knots[curve.knots.len() - 1];
    if !(d > first.d) {
        return first.b;
    }
    if d >= last.d {
        if d == last.d {
            return last.b;
        }
        return last.b * (d / last.d).powf(curve.extrapolation);
    }
    let i = curve.knots.partition_point(|k| k.d <= d);
    let (lo, hi) = (curve.knots[i - 1], curve.knots[i]);
    if d == lo.d {
        return lo.b;
    }
    let t = (d.ln() - lo.d.ln()) / (hi.d.ln() - lo.d.ln());
    (lo.b.ln() + t * (hi.b.ln() - lo.b.ln())).exp()
}

impl BatchCurve for BoptCurve {
    fn batch_at(&self, d: f64) -> f64 {
        eval_bopt(self, d)
    }
}

/// Affine curve `B(D) = intercept + slope·D`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineCurve {
    pub intercept: f64,
    pub slope: f64,
}

impl BatchCurve for AffineCurve {
    fn batch_at(&self, d: f64) -> f64 {
        self.intercept + self.slope * d
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// `B_global,0 = 0`.
    PaperLiteral,
    /// `B_global,0 = f(N, 0)`.
    #[default]
    Anchored,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleEntry {
    pub tokens: f64,
    pub batch: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub model_size: f64,
    pub d_interval: f64,
    pub momenta: Vec<f64>,
    pub init_mode: InitMode,
    pub entries: Vec<ScheduleEntry>,
}

/// Default rounding quantum for emitted batch sizes (64K tokens).
pub const DEFAULT_QUANTUM: f64 = 65_536.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleOptions {
    pub model_size: f64,
    pub d_interval: f64,
    pub momenta: Vec<f64>,
    pub n: usize,
    pub init_mode: InitMode,
    /// Round emitted batches to a multiple of this; `None` disables rounding.
    pub quantum: Option<f64>,
}

/// Runs the momentum recurrence
/// `B_i = B_{i−1} + (1 + α_i)(f(i·D) − f((i−1)·D))` for `i = 1..=n`.
///
/// The sum is carried in telescoped form,
/// `B_i = f(i·D) + (B_0 − f(0)) + Σ_{k≤i} α_k Δ_k`, so the anchored
/// zero-momentum schedule equals `f` at every milestone bit for bit.
/// Rounding to `quantum` happens after the recurrence.
pub fn make_schedule<C: BatchCurve + ?Sized>(curve: &C, opts: &ScheduleOptions) -> Result<Schedule> {
    if opts.momenta.len() != opts.n {
        return Err(Error::LengthMismatch { expected: opts.n, actual: opts.momenta.len() });
    }
    if !(opts.d_interval > 0.0 && opts.d_interval.is_finite()) {
        return Err(Error::InvalidInput(format!("d_interval must be positive, got {}", opts.d_interval)));
    }
    if let Some(&a) = opts.momenta.iter().find(|a| !(**a >= -1.0 && a.is_finite())) {
        return Err(Error::InvalidInput(format!("momentum values must be >= -1, got {a}")));
    }
    if let Some(q) = opts.quantum {
        if !(q > 0.0) {
            return Err(Error::InvalidInput(format!("rounding quantum must be positive, got {q}")));
        }
    }

    let f0 = curve.batch_at(0.0);
    let init = match opts.init_mode {
        InitMode::PaperLiteral => 0.0,
        InitMode::Anchored => f0,
    };
    let offset = init - f0;
    let mut excess = 0.0;
    let mut entries = Vec::with_capacity(opts.n);
    for (idx, alpha) in opts.momenta.iter().enumerate() {
        let i = idx + 1;
        let b_last = curve.batch_at((i - 1) as f64 * opts.d_interval);
        let b_new = curve.batch_at(i as f64 * opts.d_interval);
        excess += alpha * (b_new - b_last);
        let batch = b_new + (offset + excess);
        if !(batch > 0.0) {
            return Err(Error::NonPositiveBatch { index: i, batch });
        }
        let batch = match opts.quantum {
            Some(q) => ((batch / q).round() * q).max(q),
            None => batch,
        };
        entries.push(ScheduleEntry { tokens: i as f64 * opts.d_interval, batch });
    }
    Ok(Schedule {
        model_size: opts.model_size,
        d_interval: opts.d_interval,
        momenta: opts.momenta.clone(),
        init_mode: opts.init_mode,
        entries,
    })
}

/// Batch sizes of the deployed dynamic schedule used as a reference:
/// 2M, 4M, 5M, 6M tokens, switched every 125B tokens.
pub const REFERENCE_SCHEDULE: [f64; 4] = [2.0e6, 4.0e6, 5.0e6, 6.0e6];
pub const REFERENCE_INTERVAL: f64 = 125.0e9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleComparison {
    pub reference: Vec<f64>,
    pub produced: Vec<f64>,
    /// `produced − reference` per entry over the common length.
    pub differences: Vec<f64>,
    pub max_abs_difference: f64,
}

pub fn compare_schedule(schedule: &Schedule, reference: &[f64]) -> ScheduleComparison {
    let produced: Vec<f64> = schedule.entries.iter().map(|e| e.batch).collect();
    let differences: Vec<f64> = produced.iter().zip(reference).map(|(p, r)| p - r).collect();
    let max_abs_difference = differences.iter().fold(0.0f64, |m, d| m.max(d.abs()));
    ScheduleComparison { reference: reference.to_vec(), produced, differences, max_abs_difference }
}

/// Human-readable table of a schedule.
pub fn schedule_table(schedule: &Schedule) -> String {
    let mut out = String::from("switch  tokens               batch\n");
    for (i, e) in schedule.entries.iter().enumerate() {
        out.push_str(&format!("{:>6}  {:>19.6e}  {:>19.6e}\n", i + 1, e.tokens, e.batch));
    }
    out
}

/// Loss sampled on a rectangular `(B, D)` grid at fixed model size.
/// `loss[i][j]` is the loss at `batches[i]` after `data[j]` tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossSurface {
    pub batches: Vec<f64>,
    pub data: Vec<f64>,
    pub loss: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceRow {
    pub d0: f64,
    /// Best batch for the fixed-data problem.
    pub b_fixed_data: f64,
    pub loss: f64,
    /// Best batch for the fixed-loss problem at that loss.
    pub b_fixed_loss: f64,
    pub d_fixed_loss: f64,
    pub agrees: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub passed: bool,
    pub rows: Vec<EquivalenceRow>,
}

fn argmin_first(values: impl Iterator<Item = f64>) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in values.enumerate() {
        if best.is_none_or(|(_, b)| v < b) {
            best = Some((i, v));
        }
    }
    best
}

/// Least data at which a row reaches `target`, interpolating linearly in D
/// between grid points; `∞` when the row never gets there.
fn data_to_reach(data: &[f64], row: &[f64], target: f64) -> f64 {
    match row.iter().position(|&l| l <= target) {
        None => f64::INFINITY,
        Some(0) => data[0],
        Some(k) if row[k] == target => data[k],
        Some(k) => {
            let t = (row[k - 1] - target) / (row[k - 1] - row[k]);
            data[k - 1] + t * (data[k] - data[k - 1])
        }
    }
}

/// Samples `L(B, D)` from simulated runs, one row per batch size, with the
/// loss interpolated linearly in tokens between recorded steps.
pub fn simulate_surface(cfg: &SimConfig, batches: &[f64], data: &[f64]) -> Result<LossSurface> {
    let d_max = data.iter().cloned().fold(0.0, f64::max);
    let mut loss = Vec::with_capacity(batches.len());
    for &b in batches {
        if let Some(&d) = data.iter().find(|&&d| !(d >= b)) {
            return Err(Error::InvalidInput(format!("data budget {d} is below one step of batch size {b}")));
        }
        let steps = (d_max / b).ceil() as u64;
        let run = simulate_run(cfg, b, steps.max(1))?;
        let row = data
            .iter()
            .map(|&d| {
                let x = d / b;
                let k = (x.floor() as usize).clamp(1, run.records.len());
                let lo = &run.records[k - 1];
                match run.records.get(k) {
                    Some(hi) if x > lo.step as f64 => lo.loss + (x - lo.step as f64) * (hi.loss - lo.loss),
                    _ => lo.loss,
                }
            })
            .collect();
        loss.push(row);
    }
    Ok(LossSurface { batches: batches.to_vec(), data: data.to_vec(), loss })
}

/// Checks, at every data budget on the grid, that the batch minimizing loss
/// at that budget also minimizes the data needed to reach the resulting
/// loss. Ties go to the smaller batch on both sides.
pub fn verify_equivalence(surface: &LossSurface) -> Result<EquivalenceReport> {
    let nb = surface.batches.len();
    let nd = surface.data.len();
    if nb == 0 || nd < 2 {
        return Err(Error::InsufficientData("surface needs at least one batch row and two data columns".into()));
    }
    if surface.loss.len() != nb {
        return Err(Error::LengthMismatch { expected: nb, actual: surface.loss.len() });
    }
    if surface.batches.windows(2).any(|w| !(w[0] < w[1])) || surface.data.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::InvalidInput("batch and data axes must be strictly increasing".into()));
    }
    for (i, row) in surface.loss.iter().enumerate() {
        if row.len() != nd {
            return Err(Error::LengthMismatch { expected: nd, actual: row.len() });
        }
        if let Some(j) = row.windows(2).position(|w| !(w[1] < w[0])) {
            return Err(Error::MonotonicityViolation { batch: surface.batches[i], index: j + 1 });
        }
    }

    let mut rows = Vec::with_capacity(nd);
    for (j, &d0) in surface.data.iter().enumerate() {
        let (i_star, l0) = argmin_first(surface.loss.iter().map(|row| row[j])).expect("nonempty");
        let reach: Vec<f64> = surface.loss.iter().map(|row| data_to_reach(&surface.data, row, l0)).collect();
        let (k_star, d_best) = argmin_first(reach.into_iter()).expect("nonempty");
        rows.push(EquivalenceRow {
            d0,
            b_fixed_data: surface.batches[i_star],
            loss: l0,
            b_fixed_loss: surface.batches[k_star],
            d_fixed_loss: d_best,
            agrees: i_star == k_star,
        });
    }
    Ok(EquivalenceReport { passed: rows.iter().all(|r| r.agrees), rows })
}

/// Compute-budget power law for the optimal batch size: `0.2920·C^0.3271`.
pub fn deepseek_bopt(compute: f64) -> Result<f64> {
    if !(compute > 0.0) {
        return Err(Error::Domain(format!("compute budget must be positive, got {compute}")));
    }
    Ok(0.2920 * compute.powf(0.3271))
}

/// Optimal learning rate `η_max / (1 + B_noise/B)`.
pub fn mccandlish_lr(eta_max: f64, b_noise: f64, batch: f64) -> f64 {
    eta_max / (1.0 + b_noise / batch)
}

/// Optimal learning rate `η_max / (½(√(B_noise/B) + √(B/B_noise)))`.
pub fn surge_lr(eta_max: f64, b_noise: f64, batch: f64) -> f64 {
    eta_max / (0.5 * ((b_noise / batch).sqrt() + (batch / b_noise).sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;

    const M: f64 = 1.0e6;
    const D: f64 = 125.0e9;

    fn linear_demo() -> AffineCurve {
        AffineCurve { intercept: 2.0 * M, slope: M / D }
    }

    fn opts(momenta: Vec<f64>, init_mode: InitMode) -> ScheduleOptions {
        ScheduleOptions { model_size: 1e9, d_interval: D, n: momenta.len(), momenta, init_mode, quantum: None }
    }

    fn batches(s: &Schedule) -> Vec<f64> {
        s.entries.iter().map(|e| e.batch).collect()
    }

    #[test]
    fn hand_traced_schedules() {
        let f = linear_demo();
        let s = make_schedule(&f, &opts(vec![0.0; 4], InitMode::Anchored)).unwrap();
        assert_eq!(batches(&s), vec![3.0 * M, 4.0 * M, 5.0 * M, 6.0 * M]);
        let s = make_schedule(&f, &opts(vec![0.0; 4], InitMode::PaperLiteral)).unwrap();
        assert_eq!(batches(&s), vec![1.0 * M, 2.0 * M, 3.0 * M, 4.0 * M]);
        let s = make_schedule(&f, &opts(vec![1.0, 0.0, 0.0, 0.0], InitMode::Anchored)).unwrap();
        assert_eq!(batches(&s), vec![4.0 * M, 5.0 * M, 6.0 * M, 7.0 * M]);
        let milestones: Vec<f64> = s.entries.iter().map(|e| e.tokens).collect();
        assert_eq!(milestones, vec![D, 2.0 * D, 3.0 * D, 4.0 * D]);
    }

    #[test]
    fn schedule_errors() {
        let f = linear_demo();
        let mut o = opts(vec![0.0; 4], InitMode::Anchored);
        o.n = 3;
        assert!(matches!(make_schedule(&f, &o), Err(Error::LengthMismatch { .. })));
        let falling = AffineCurve { intercept: 4.0 * M, slope: -M / D };
        assert!(matches!(
            make_schedule(&falling, &opts(vec![0.0; 2], InitMode::PaperLiteral)),
            Err(Error::NonPositiveBatch { index: 1, .. })
        ));
    }

    #[test]
    fn rounding_applies_after_recurrence() {
        let f = AffineCurve { intercept: 100_000.0, slope: 30_000.0 / D };
        let mut o = opts(vec![0.0; 3], InitMode::Anchored);
        o.quantum = Some(DEFAULT_QUANTUM);
        let s = make_schedule(&f, &o).unwrap();
        for e in &s.entries {
            assert_eq!(e.batch % DEFAULT_QUANTUM, 0.0);
        }
        // 130K, 160K, 190K tokens round to 2, 2, 3 quanta.
        assert_eq!(batches(&s), vec![131072.0, 131072.0, 196608.0]);
    }

    #[test]
    fn reference_comparison() {
        let s = make_schedule(&linear_demo(), &opts(vec![0.0; 4], InitMode::Anchored)).unwrap();
        let c = compare_schedule(&s, &REFERENCE_SCHEDULE);
        assert_eq!(c.differences, vec![1.0 * M, 0.0, 0.0, 0.0]);
        assert_eq!(c.max_abs_difference, M);
    }

    #[test]
    fn bopt_interpolation() {
        let c = BoptCurve::from_knots(1.0, vec![Knot { d: 100.0, b: 2.0 }, Knot { d: 1000.0, b: 2.0 }]).unwrap();
        assert_eq!(eval_bopt(&c, 500.0), 2.0);
        assert_eq!(eval_bopt(&c, 1000.0), 2.0);
        let c = BoptCurve::from_knots(1.0, vec![Knot { d: 100.0, b: 1.0 }, Knot { d: 10000.0, b: 10.0 }]).unwrap();
        assert!((eval_bopt(&c, 1000.0) - 10f64.sqrt()).abs() < 1e-12);
        assert_eq!(eval_bopt(&c, 100.0), 1.0);
        assert_eq!(eval_bopt(&c, 10.0), 1.0);
        assert_eq!(eval_bopt(&c, 0.0), 1.0);
        // extrapolation exponent 0.5 from the two knots
        assert!((eval_bopt(&c, 1.0e6) - 100.0).abs() < 1e-9);
    }

    #[test]
    fn bopt_curve_needs_three_distinct_losses() {
        let m = |l: f64| BatchMetrics { target_loss: l, b_min: 1.0, b_opt: 2.0, e_min: 100.0 * (4.0 - l), s_opt: 1.0 };
        assert!(matches!(fit_bopt_curve(&[m(3.0), m(2.9)], 1.0), Err(Error::InsufficientData(_))));
        let c = fit_bopt_curve(&[m(3.0), m(2.9), m(3.1)], 1.0).unwrap();
        assert!(c.warnings.is_empty());
        assert_eq!(c.extrapolation, 0.0);
        let mut ms = [m(3.0), m(2.9), m(3.1)];
        ms[1].b_opt = 1.0;
        let c = fit_bopt_curve(&ms, 1.0).unwrap();
        assert_eq!(c.warnings.len(), 1);
    }

    #[test]
    fn equivalence_rejects_non_monotone_rows() {
        let surface = LossSurface {
            batches: vec![1.0, 2.0],
            data: vec![1.0, 2.0, 3.0],
            loss: vec![vec![3.0, 2.5, 2.0], vec![3.0, 2.9, 2.95]],
        };
        assert!(matches!(
            verify_equivalence(&surface),
            Err(Error::MonotonicityViolation { batch, index: 2 }) if batch == 2.0
        ));
    }

    #[test]
    fn equivalence_on_hand_surface() {
        let surface = LossSurface {
            batches: vec![1.0, 2.0, 4.0],
            data: vec![10.0, 20.0, 30.0, 40.0],
            loss: vec![
                vec![4.0, 3.5, 3.2, 3.1],
                vec![3.9, 3.3, 3.0, 2.8],
                vec![4.2, 3.6, 3.1, 2.7],
            ],
        };
        let r = verify_equivalence(&surface).unwrap();
        assert!(r.passed);
        let best: Vec<f64> = r.rows.iter().map(|row| row.b_fixed_data).collect();
        assert_eq!(best, vec![2.0, 2.0, 2.0, 4.0]);
        assert_eq!(r.rows[2].d_fixed_loss, 30.0);
    }

    #[test]
    fn reference_calculators() {
        assert_eq!(deepseek_bopt(1.0).unwrap(), 0.2920);
        let ratio = deepseek_bopt(1024.0).unwrap() / deepseek_bopt(1.0).unwrap();
        assert!((ratio - 2f64.powf(10.0 * 0.3271)).abs() < 1e-12);
        assert!((ratio - 9.66).abs() < 0.01);
        assert!(deepseek_bopt(0.0).is_err());

        assert_eq!(mccandlish_lr(1.0, 4.0, 4.0), 0.5);
        assert!((mccandlish_lr(1.0, 4.0, 1.0) - 0.2).abs() < 1e-15);
        assert!((mccandlish_lr(1.0, 4.0, 1e15) - 1.0).abs() < 1e-12);

        assert_eq!(surge_lr(1.0, 4.0, 4.0), 1.0);
        assert!((surge_lr(1.0, 4.0, 1.0) - 0.8).abs() < 1e-15);
        assert!((surge_lr(1.0, 4.0, 12.0) - surge_lr(1.0, 4.0, 4.0 / 3.0)).abs() < 1e-15);
    }
}
