//! Constant-LR loss power law `L(S) = L0 + A·S^(−α)`: fitting, inversion,
//! and assembly of `(S, E)` datasets at a fixed target loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::TrainingRun;
use crate::error::{Error, Result};
use crate::optim::{golden_section, huber, linear_regression, nelder_mead, NelderMeadOptions};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerLawFit {
    pub l0: f64,
    pub a: f64,
    pub alpha: f64,
}

impl PowerLawFit {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v > 0.0 && v.is_finite();
        if !(ok(self.l0) && ok(self.a) && ok(self.alpha)) {
            return Err(Error::Domain(format!(
                "power law needs positive finite l0, a, alpha; got ({}, {}, {})",
                self.l0, self.a, self.alpha
            )));
        }
        Ok(())
    }

    pub fn loss_at(&self, steps: f64) -> f64 {
        self.l0 + self.a * steps.powf(-self.alpha)
    }

    /// Inverse of [`loss_at`](Self::loss_at).
    pub fn steps_for_loss(&self, target: f64) -> Result<f64> {
        steps_for_loss(self, target)
    }
}

pub fn steps_for_loss(fit: &PowerLawFit, target: f64) -> Result<f64> {
    if !(target > fit.l0) {
        return Err(Error::Domain(format!(
            "target loss {target} is not above the irreducible loss {}",
            fit.l0
        )));
    }
    Ok(((target - fit.l0) / fit.a).powf(-1.0 / fit.alpha))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerLawFitOptions {
    /// Records with `step < warmup_exclude` are dropped.
    pub warmup_exclude: u64,
    /// Huber threshold in nats.
    pub delta: f64,
    pub seed: u64,
    pub starts: usize,
}

impl Default for PowerLawFitOptions {
    fn default() -> Self {
        Self { warmup_exclude: 1000, delta: 0.01, seed: 0, starts: 8 }
    }
}

/// Minimum records needed after warmup exclusion.
pub const MIN_FIT_RECORDS: usize = 16;

/// A fitted power law with the settings that produced it; this is the
/// persisted JSON shape.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerLawRecord {
    pub l0: f64,
    pub a: f64,
    pub alpha: f64,
    pub warmup_exclude: u64,
    pub delta: f64,
    pub seed: u64,
}

impl PowerLawRecord {
    pub fn new(fit: PowerLawFit, opts: &PowerLawFitOptions) -> Self {
        Self {
            l0: fit.l0,
            a: fit.a,
            alpha: fit.alpha,
            warmup_exclude: opts.warmup_exclude,
            delta: opts.delta,
            seed: opts.seed,
        }
    }

    pub fn fit(&self) -> PowerLawFit {
        PowerLawFit { l0: self.l0, a: self.a, alpha: self.alpha }
    }
}

struct Observations {
    log_s: Vec<f64>,
    s: Vec<f64>,
    loss: Vec<f64>,
    min_loss: f64,
}

impl Observations {
    fn objective(&self, fit: &PowerLawFit, delta: f64) -> f64 {
        if !(fit.l0 > 0.0 && fit.l0 < self.min_loss && fit.a > 0.0 && fit.alpha > 0.0) {
            return f64::INFINITY;
        }
        self.s
            .iter()
            .zip(&self.loss)
            .map(|(&s, &l)| huber(l - fit.loss_at(s), delta))
            .sum()
    }

    /// For fixed `l0`, `(ln A, −α)` from regressing `ln(L − l0)` on `ln S`.
    fn profile(&self, l0: f64) -> Option<PowerLawFit> {
        let y: Vec<f64> = self.loss.iter().map(|&l| (l - l0).ln()).collect();
        if y.iter().any(|v| !v.is_finite()) {
            return None;
        }
        let (intercept, slope) = linear_regression(&self.log_s, &y)?;
        Some(PowerLawFit { l0, a: intercept.exp(), alpha: -slope })
    }
}

/// Fits `L0 + A·S^(−α)` to a run by minimizing the summed Huber loss.
///
/// `L0` is searched by golden section on `(0, min loss)` with the other two
/// parameters profiled out by log-log regression; the bracket is jittered
/// across `opts.starts` seeded starts. The best profile solution is then
/// polished jointly over `(L0, ln A, α)` with Nelder–Mead.
pub fn fit_power_law(run: &TrainingRun, opts: &PowerLawFitOptions) -> Result<PowerLawFit> {
    if !(opts.delta > 0.0) {
        return Err(Error::InvalidInput(format!("Huber delta must be positive, got {}", opts.delta)));
    }
    let kept: Vec<_> = run
        .records
        .iter()
        .filter(|r| r.step >= opts.warmup_exclude && r.step > 0)
        .collect();
    if kept.len() < MIN_FIT_RECORDS {
        return Err(Error::InsufficientData(format!(
            "{} records after excluding steps < {}; need at least {MIN_FIT_RECORDS}",
            kept.len(),
            opts.warmup_exclude
        )));
    }
    let s: Vec<f64> = kept.iter().map(|r| r.step as f64).collect();
    let loss: Vec<f64> = kept.iter().map(|r| r.loss).collect();
    let min_loss = loss.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(min_loss > 0.0 && min_loss.is_finite()) {
        return Err(Error::InvalidInput("losses must be finite and positive".into()));
    }
    let obs = Observations { log_s: s.iter().map(|v| v.ln()).collect(), s, loss, min_loss };

    let profiled = |l0: f64| -> f64 {
        match obs.profile(l0) {
            Some(fit) => obs.objective(&fit, opts.delta),
            None => f64::INFINITY,
        }
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut best: Option<(f64, f64)> = None;
    for start in 0..opts.starts.max(1) {
        let (lo, hi) = if start == 0 {
            (0.0, min_loss)
        } else {
            let u: f64 = rng.random_range(0.0..0.9);
            let w: f64 = rng.random_range(0.05..1.0);
            (u * min_loss, (u + w * (1.0 - u)) * min_loss)
        };
        let (l0, f) = golden_section(profiled, lo, hi, 1e-15 * min_loss, 300);
        if f.is_finite() && best.is_none_or(|(_, fb)| f < fb) {
            best = Some((l0, f));
        }
    }
    let (l0, _) = best.ok_or_else(|| Error::FitDiverged("no start produced a finite objective".into()))?;
    let start = obs
        .profile(l0)
        .ok_or_else(|| Error::FitDiverged("profile regression failed at the best L0".into()))?;

    let polish = |x: &[f64]| obs.objective(&PowerLawFit { l0: x[0], a: x[1].exp(), alpha: x[2] }, opts.delta);
    let x0 = [start.l0, start.a.ln(), start.alpha];
    let step = [1e-3 * (min_loss - start.l0).max(1e-12), 1e-3, 1e-3 * start.alpha.max(1e-6)];
    let m = nelder_mead(polish, &x0, &step, NelderMeadOptions::default());
    let polished = PowerLawFit { l0: m.x[0], a: m.x[1].exp(), alpha: m.x[2] };

    let fit = if obs.objective(&polished, opts.delta) <= obs.objective(&start, opts.delta) {
        polished
    } else {
        start
    };
    if fit.validate().is_err() || !(fit.l0 < min_loss) {
        return Err(Error::FitDiverged(format!("fit left the admissible region: {fit:?}")));
    }
    Ok(fit)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EsPoint {
    pub s: f64,
    pub e: f64,
    pub b: f64,
}

/// `(S_i, E_i)` observations at one target loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EsDataset {
    pub target_loss: f64,
    pub points: Vec<EsPoint>,
    #[serde(default)]
    pub source: Vec<String>,
}

pub const MIN_ES_BATCH_SIZES: usize = 4;

/// Builds the `(S, E)` dataset for `target` from per-batch-size power-law
/// fits. Points are sorted by ascending `S`.
pub fn build_es_dataset(fits: &[(f64, PowerLawFit)], target: f64) -> Result<EsDataset> {
    build_es_dataset_with_ids(fits, target, &[])
}

/// Like [`build_es_dataset`], recording `ids[i]` as the provenance of
/// `fits[i]` (falls back to the batch size when absent).
pub fn build_es_dataset_with_ids(fits: &[(f64, PowerLawFit)], target: f64, ids: &[String]) -> Result<EsDataset> {
    if fits.len() < MIN_ES_BATCH_SIZES {
        return Err(Error::InsufficientData(format!(
            "{} batch sizes; need at least {MIN_ES_BATCH_SIZES}",
            fits.len()
        )));
    }
    let offenders: Vec<f64> = fits.iter().filter(|(_, f)| !(target > f.l0)).map(|(b, _)| *b).collect();
    if !offenders.is_empty() {
        return Err(Error::Domain(format!(
            "target loss {target} is unreachable for batch sizes {offenders:?}"
        )));
    }
    let mut rows = Vec::with_capacity(fits.len());
    for (i, (b, fit)) in fits.iter().enumerate() {
        let s = steps_for_loss(fit, target)?;
        let id = ids.get(i).cloned().unwrap_or_else(|| format!("bs{b}"));
        rows.push((EsPoint { s, e: b * s, b: *b }, id));
    }
    rows.sort_by(|x, y| x.0.s.total_cmp(&y.0.s));
    let (points, source) = rows.into_iter().unzip();
    Ok(EsDataset { target_loss: target, points, source })
}

/// `count` geometrically spaced levels from `hi` down to `lo` inclusive.
pub fn geometric_levels(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![hi];
    }
    let r = (lo / hi).powf(1.0 / (count - 1) as f64);
    (0..count)
        .map(|i| if i + 1 == count { lo } else { hi * r.powi(i as i32) })
        .collect()
}

/// Target-loss interval used by the demo sweep.
pub const DEMO_LOSS_RANGE: (f64, f64) = (2.93, 3.25);
pub const DEMO_LOSS_LEVELS: usize = 16;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::RunRecord;

    fn plant() -> PowerLawFit {
        PowerLawFit { l0: 2.0, a: 10.0, alpha: 0.5 }
    }

    fn planted_run(steps: impl Iterator<Item = u64>) -> TrainingRun {
        let p = plant();
        TrainingRun {
            model_size: 1.0,
            batch_size: 1.0,
            records: steps
                .map(|s| RunRecord { step: s, tokens: s as f64, loss: p.loss_at(s as f64) })
                .collect(),
            meta: Default::default(),
        }
    }

    #[test]
    fn steps_for_loss_examples() {
        assert!((steps_for_loss(&plant(), 3.0).unwrap() - 100.0).abs() < 1e-9);
        assert!((steps_for_loss(&plant(), 2.1).unwrap() - 10000.0).abs() < 1e-6);
        assert!(matches!(steps_for_loss(&plant(), 2.0), Err(Error::Domain(_))));
    }

    #[test]
    fn too_few_records() {
        let run = planted_run((1..=5).map(|i| 1000 + i));
        assert!(matches!(
            fit_power_law(&run, &PowerLawFitOptions::default()),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn warmup_exclusion_counts() {
        let run = planted_run(1..=1010);
        let opts = PowerLawFitOptions::default();
        // Steps 1000..=1010 are 11 records.
        assert!(matches!(fit_power_law(&run, &opts), Err(Error::InsufficientData(_))));
        let opts = PowerLawFitOptions { warmup_exclude: 10, ..opts };
        fit_power_law(&run, &opts).unwrap();
    }

    #[test]
    fn es_dataset_sorted_and_consistent() {
        let fits: Vec<(f64, PowerLawFit)> = [16.0, 2.0, 8.0, 4.0]
            .iter()
            .map(|&b| (b, PowerLawFit { l0: 2.0, a: 10.0 * (1.0_f64 - 0.5 * 4.0 / (2.0 * b)).powf(-0.5), alpha: 0.5 }))
            .collect();
        let ds = build_es_dataset(&fits, 3.0).unwrap();
        assert!(ds.points.windows(2).all(|w| w[0].s < w[1].s));
        for p in &ds.points {
            assert!((p.e - p.b * p.s).abs() <= 0.5);
        }
    }

    #[test]
    fn es_dataset_names_unreachable_batches() {
        let mut fits: Vec<(f64, PowerLawFit)> = (0..4).map(|i| (2f64.powi(i), plant())).collect();
        fits[2].1.l0 = 3.5;
        let err = build_es_dataset(&fits, 3.0).unwrap_err();
        match err {
            Error::Domain(msg) => assert!(msg.contains("[4.0]"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn geometric_levels_hit_endpoints() {
        let l = geometric_levels(2.93, 3.25, 16);
        assert_eq!(l.len(), 16);
        assert_eq!(l[0], 3.25);
        assert_eq!(l[15], 2.93);
        assert!(l.windows(2).all(|w| w[0] > w[1]));
    }
}
