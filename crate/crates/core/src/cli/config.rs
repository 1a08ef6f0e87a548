//! Pipeline configuration: one JSON document, with command-line flags
//! overriding individual fields.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dynamics::{NoiseProfile, SimConfig, StepRatioForm};
use crate::error::{Error, Result};
use crate::losslaw::{geometric_levels, PowerLawFit};
use crate::scheduler::{AffineCurve, InitMode, Knot, DEFAULT_QUANTUM};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simulator: Option<SimulatorSpec>,
    /// Run files (`.csv` with sidecar, or `.jsonl`). When empty the runs
    /// written by `simulate` into the output directory are used.
    #[serde(default)]
    pub runs: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_losses: Option<TargetLosses>,
    #[serde(default)]
    pub fit: FitConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<ScheduleConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verify: Option<VerifyConfig>,
}

/// A list of batch sizes (or data budgets), or a geometric range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Grid {
    List(Vec<f64>),
    Geometric { lo: f64, hi: f64, count: usize },
}

impl Grid {
    /// Ascending values.
    pub fn values(&self, what: &str) -> Result<Vec<f64>> {
        let v = match self {
            Grid::List(v) => v.clone(),
            Grid::Geometric { lo, hi, count } => {
                if !(*lo > 0.0 && lo < hi && *count >= 2) {
                    return Err(Error::InvalidConfig(format!(
                        "{what}: geometric grid needs 0 < lo < hi and count >= 2"
                    )));
                }
                let mut v = geometric_levels(*lo, *hi, *count);
                v.reverse();
                v
            }
        };
        if v.is_empty() || v.iter().any(|x| !(*x > 0.0 && x.is_finite())) {
            return Err(Error::InvalidConfig(format!("{what}: values must be positive and finite")));
        }
        if v.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::InvalidConfig(format!("{what}: values must be strictly increasing")));
        }
        Ok(v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulatorSpec {
    pub epsilon: f64,
    pub noise: NoiseProfile,
    pub fullbatch_loss: PowerLawFit,
    pub batch_sizes: Grid,
    pub max_steps: u64,
    /// Keep every k-th step (the last step is always kept).
    #[serde(default = "one_u64")]
    pub record_every: u64,
    #[serde(default = "one_f64")]
    pub model_size: f64,
    #[serde(default)]
    pub step_form: StepRatioForm,
    #[serde(default = "eight")]
    pub substeps: usize,
    /// Standard deviation of Gaussian noise added to recorded losses (nats).
    #[serde(default)]
    pub loss_noise: f64,
}

fn one_u64() -> u64 {
    1
}
fn one_f64() -> f64 {
    1.0
}
fn eight() -> usize {
    8
}

impl SimulatorSpec {
    pub fn sim_config(&self) -> Result<SimConfig> {
        let mut cfg = SimConfig::new(self.epsilon, self.noise, self.fullbatch_loss);
        cfg.step_form = self.step_form;
        cfg.substeps = self.substeps;
        cfg.validate()?;
        if self.max_steps == 0 || self.record_every == 0 {
            return Err(Error::InvalidConfig("max_steps and record_every must be positive".into()));
        }
        if !(self.loss_noise >= 0.0) || !(self.model_size > 0.0) {
            return Err(Error::InvalidConfig("loss_noise must be >= 0 and model_size > 0".into()));
        }
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TargetLosses {
    List(Vec<f64>),
    Range { lo: f64, hi: f64, count: usize },
}

impl TargetLosses {
    /// Target losses in decreasing order.
    pub fn values(&self) -> Result<Vec<f64>> {
        match self {
            TargetLosses::List(v) => {
                if v.is_empty() || v.iter().any(|x| !(*x > 0.0 && x.is_finite())) {
                    return Err(Error::InvalidConfig("target_losses must be positive and finite".into()));
                }
                if v.windows(2).any(|w| !(w[0] > w[1])) {
                    return Err(Error::InvalidConfig("target_losses list must be strictly decreasing".into()));
                }
                Ok(v.clone())
            }
            TargetLosses::Range { lo, hi, count } => {
                if !(*lo > 0.0 && lo < hi && *count >= 3) {
                    return Err(Error::InvalidConfig(
                        "target_losses range needs 0 < lo < hi and count >= 3".into(),
                    ));
                }
                Ok(geometric_levels(*lo, *hi, *count))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    #[serde(default = "loss_delta")]
    pub loss_delta: f64,
    #[serde(default = "warmup_exclude")]
    pub warmup_exclude: u64,
    #[serde(default = "loss_starts")]
    pub loss_starts: usize,
    #[serde(default = "es_delta")]
    pub es_delta: f64,
    #[serde(default = "es_seeds")]
    pub es_seeds: usize,
}

fn loss_delta() -> f64 {
    0.01
}
fn warmup_exclude() -> u64 {
    1000
}
fn loss_starts() -> usize {
    8
}
fn es_delta() -> f64 {
    0.05
}
fn es_seeds() -> usize {
    16
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            loss_delta: loss_delta(),
            warmup_exclude: warmup_exclude(),
            loss_starts: loss_starts(),
            es_delta: es_delta(),
            es_seeds: es_seeds(),
        }
    }
}

/// Where the schedule's batch curve comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CurveSource {
    /// `bopt_curve.json` written by `fit`.
    Metrics,
    Affine { intercept: f64, slope: f64 },
    Knots { knots: Vec<Knot> },
}

impl CurveSource {
    pub fn affine(&self) -> Option<AffineCurve> {
        match self {
            CurveSource::Affine { intercept, slope } => Some(AffineCurve { intercept: *intercept, slope: *slope }),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    #[serde(default = "metrics_source")]
    pub curve: CurveSource,
    pub d_interval: f64,
    pub n: usize,
    /// Defaults to `n` zeros.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub momenta: Option<Vec<f64>>,
    #[serde(default)]
    pub init_mode: InitMode,
    /// `null` disables rounding.
    #[serde(default = "default_quantum")]
    pub quantum: Option<f64>,
    #[serde(default)]
    pub compare_reference: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_size: Option<f64>,
}

fn metrics_source() -> CurveSource {
    CurveSource::Metrics
}
fn default_quantum() -> Option<f64> {
    Some(DEFAULT_QUANTUM)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyConfig {
    pub surfaces: Vec<SurfaceSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SurfaceSpec {
    /// A `LossSurface` JSON file.
    File { name: String, file: String },
    Simulated {
        name: String,
        epsilon: f64,
        noise: NoiseProfile,
        fullbatch_loss: PowerLawFit,
        batches: Grid,
        data: Grid,
        /// Rows whose loss is swapped at two adjacent data points, to
        /// exercise the monotonicity precondition.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        corrupt_row: Option<usize>,
    },
}

impl SurfaceSpec {
    pub fn name(&self) -> &str {
        match self {
            SurfaceSpec::File { name, .. } | SurfaceSpec::Simulated { name, .. } => name,
        }
    }
}

/// Command-line overrides; `None` leaves the config value alone.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub output_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub runs: Option<Vec<String>>,
    pub target_losses: Option<Vec<f64>>,
    pub loss_delta: Option<f64>,
    pub warmup_exclude: Option<u64>,
    pub loss_starts: Option<usize>,
    pub es_delta: Option<f64>,
    pub es_seeds: Option<usize>,
    pub d_interval: Option<f64>,
    pub n: Option<usize>,
    pub momenta: Option<Vec<f64>>,
    pub init_mode: Option<InitMode>,
    /// `Some(None)` disables rounding.
    pub quantum: Option<Option<f64>>,
    pub compare_reference: bool,
}

impl PipelineConfig {
    pub fn from_json(source: &str, text: &str) -> Result<Self> {
        let cfg: PipelineConfig = serde_json::from_str(text)
            .map_err(|e| Error::InvalidConfig(format!("{source}: line {}: {e}", e.line())))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_json(&path.display().to_string(), &text)
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(d) = &o.output_dir {
            self.output_dir = Some(d.display().to_string());
        }
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(r) = &o.runs {
            self.runs = r.clone();
        }
        if let Some(t) = &o.target_losses {
            self.target_losses = Some(TargetLosses::List(t.clone()));
        }
        let f = &mut self.fit;
        f.loss_delta = o.loss_delta.unwrap_or(f.loss_delta);
        f.warmup_exclude = o.warmup_exclude.unwrap_or(f.warmup_exclude);
        f.loss_starts = o.loss_starts.unwrap_or(f.loss_starts);
        f.es_delta = o.es_delta.unwrap_or(f.es_delta);
        f.es_seeds = o.es_seeds.unwrap_or(f.es_seeds);

        let touches_schedule = o.d_interval.is_some()
            || o.n.is_some()
            || o.momenta.is_some()
            || o.init_mode.is_some()
            || o.quantum.is_some()
            || o.compare_reference;
        if touches_schedule && self.schedule.is_none() {
            let d_interval = o
                .d_interval
                .ok_or_else(|| Error::InvalidConfig("--d-interval is required without a schedule section".into()))?;
            let n = o.n.or(o.momenta.as_ref().map(Vec::len)).ok_or_else(|| {
                Error::InvalidConfig("--n or --momenta is required without a schedule section".into())
            })?;
            self.schedule = Some(ScheduleConfig {
                curve: CurveSource::Metrics,
                d_interval,
                n,
                momenta: None,
                init_mode: InitMode::default(),
                quantum: default_quantum(),
                compare_reference: false,
                model_size: None,
            });
        }
        if let Some(s) = &mut self.schedule {
            s.d_interval = o.d_interval.unwrap_or(s.d_interval);
            s.n = o.n.unwrap_or(s.n);
            if let Some(m) = &o.momenta {
                s.momenta = Some(m.clone());
            }
            s.init_mode = o.init_mode.unwrap_or(s.init_mode);
            if let Some(q) = o.quantum {
                s.quantum = q;
            }
            s.compare_reference |= o.compare_reference;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(sim) = &self.simulator {
            sim.sim_config()?;
            sim.batch_sizes.values("simulator.batch_sizes")?;
        }
        if let Some(t) = &self.target_losses {
            t.values()?;
        }
        let f = &self.fit;
        if !(f.loss_delta > 0.0 && f.es_delta > 0.0) || f.loss_starts == 0 || f.es_seeds == 0 {
            return Err(Error::InvalidConfig("fit deltas, loss_starts and es_seeds must be positive".into()));
        }
        if let Some(s) = &self.schedule {
            if !(s.d_interval > 0.0 && s.d_interval.is_finite()) || s.n == 0 {
                return Err(Error::InvalidConfig("schedule needs d_interval > 0 and n >= 1".into()));
            }
            if let Some(m) = &s.momenta {
                if m.len() != s.n {
                    return Err(Error::InvalidConfig(format!(
                        "schedule has n = {} but {} momenta",
                        s.n,
                        m.len()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Directory artifacts go to; relative to the working directory.
    pub fn output_dir(&self) -> PathBuf {
        PathBuf::from(self.output_dir.clone().unwrap_or_else(|| "out".to_string()))
    }

    /// SHA-256 of the effective configuration with the output directory
    /// removed, so relocated runs hash identically.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = None;
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        let digest = Sha256::digest(&bytes);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "simulator": {
            "epsilon": 0.5,
            "noise": {"kind": "constant", "b0": 4.0, "growth": 0.0, "scale_ref": 1.0},
            "fullbatch_loss": {"l0": 2.0, "a": 9.3, "alpha": 0.5},
            "batch_sizes": [2.0, 4.0, 8.0],
            "max_steps": 100
        }
    }"#;

    #[test]
    fn missing_epsilon_is_invalid_config() {
        let text = MINIMAL.replace("\"epsilon\": 0.5,", "");
        let err = PipelineConfig::from_json("cfg", &text).unwrap_err();
        assert!(matches!(err, Error::InvalidConfig(_)), "{err}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn target_losses_must_decrease() {
        assert!(TargetLosses::List(vec![3.0, 3.1]).values().is_err());
        assert!(TargetLosses::Range { lo: 2.9, hi: 3.2, count: 2 }.values().is_err());
        let v = TargetLosses::Range { lo: 2.93, hi: 3.25, count: 16 }.values().unwrap();
        assert_eq!(v.len(), 16);
        assert_eq!((v[0], v[15]), (3.25, 2.93));
    }

    #[test]
    fn overrides_win_and_hash_ignores_output_dir() {
        let mut a = PipelineConfig::from_json("cfg", MINIMAL).unwrap();
        let mut b = a.clone();
        a.apply(&Overrides { output_dir: Some("x".into()), es_delta: Some(0.02), ..Default::default() }).unwrap();
        b.apply(&Overrides { output_dir: Some("y".into()), es_delta: Some(0.02), ..Default::default() }).unwrap();
        assert_eq!(a.fit.es_delta, 0.02);
        assert_eq!(a.hash(), b.hash());
        b.apply(&Overrides { seed: Some(7), ..Default::default() }).unwrap();
        assert_ne!(a.hash(), b.hash());
    }
}
