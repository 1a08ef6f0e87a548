//! Pipeline stages. Each stage reads what it needs from the config or the
//! output directory and writes its artifacts there, so stages can run one
//! at a time or chained.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{CurveSource, PipelineConfig, SurfaceSpec};
use super::svg;
use crate::dynamics::{find_crossing, simulate_run, Crossing, TrainingRun};
use crate::error::{Error, Result, ResultExt};
use crate::esfit::{extract_metrics, fit_es, metrics_trend, BatchMetrics, ConstraintResiduals, EsFit, EsFitOptions};
use crate::losslaw::{build_es_dataset_with_ids, fit_power_law, EsDataset, PowerLawFitOptions, PowerLawRecord};
use crate::optim::standard_normal;
use crate::runfile::{read_run, write_csv, write_file};
use crate::scheduler::{
    compare_schedule, fit_bopt_curve, make_schedule, schedule_table, simulate_surface, verify_equivalence,
    BatchCurve, BoptCurve, EquivalenceReport, LossSurface, Schedule, ScheduleComparison, ScheduleOptions,
    REFERENCE_SCHEDULE,
};

pub const MANIFEST: &str = "runs/manifest.json";
pub const LOSS_FITS: &str = "fits/loss_fits.json";
pub const CROSSINGS: &str = "fits/crossings.json";
pub const METRICS: &str = "metrics.json";
pub const METRICS_TABLE: &str = "metrics.csv";
pub const TREND: &str = "trend.json";
pub const BOPT_CURVE: &str = "bopt_curve.json";
pub const SCHEDULE: &str = "schedule.json";
pub const SCHEDULE_TABLE: &str = "schedule.txt";
pub const SCHEDULE_COMPARISON: &str = "schedule_comparison.json";
pub const EQUIVALENCE: &str = "equivalence.json";
pub const REPORT: &str = "report.json";
pub const REPORT_MD: &str = "report.md";

fn es_dataset_path(k: usize) -> String {
    format!("es/dataset_{k:02}.json")
}
fn es_fit_path(k: usize) -> String {
    format!("es/fit_{k:02}.json")
}

/// Effective config plus output location and accumulated warnings.
pub struct Context {
    pub cfg: PipelineConfig,
    pub out: PathBuf,
    pub warnings: Vec<String>,
}

impl Context {
    pub fn new(cfg: PipelineConfig) -> Self {
        let out = cfg.output_dir();
        Self { cfg, out, warnings: Vec::new() }
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    fn warn(&mut self, msg: impl Into<String>) {
        self.warnings.push(msg.into());
    }

    fn write_json<T: Serialize + ?Sized>(&self, rel: &str, value: &T) -> Result<()> {
        let text = serde_json::to_string_pretty(value)? + "\n";
        write_file(&self.path(rel), text.as_bytes())
    }

    fn write_text(&self, rel: &str, text: &str) -> Result<()> {
        write_file(&self.path(rel), text.as_bytes())
    }

    fn read_json<T: DeserializeOwned>(&self, rel: &str, producer: &str) -> Result<T> {
        let path = self.path(rel);
        if !path.exists() {
            return Err(Error::MissingArtifacts(format!("{} not found; run `{producer}` first", path.display())));
        }
        read_json_file(&path)
    }

    fn exists(&self, rel: &str) -> bool {
        self.path(rel).exists()
    }
}

pub fn read_json_file<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let name = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(&name, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse { source_name: name, line: e.line(), message: e.to_string() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    /// Relative to the output directory.
    pub file: String,
    pub batch_size: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub runs: Vec<ManifestEntry>,
}

/// Writes one CSV run (plus sidecar) per configured batch size.
pub fn simulate(ctx: &mut Context) -> Result<Manifest> {
    let spec = ctx
        .cfg
        .simulator
        .clone()
        .ok_or_else(|| Error::InvalidConfig("config has no simulator section".into()))?;
    let sim = spec.sim_config()?;
    let batches = spec.batch_sizes.values("simulator.batch_sizes")?;
    let mut runs = Vec::with_capacity(batches.len());
    for (i, &b) in batches.iter().enumerate() {
        let mut run = simulate_run(&sim, b, spec.max_steps).context(|| format!("simulating batch size {b}"))?;
        let last = spec.max_steps;
        run.records.retain(|r| r.step % spec.record_every == 0 || r.step == last);
        if spec.loss_noise > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(ctx.cfg.seed.wrapping_mul(1_000_003).wrapping_add(i as u64));
            for r in &mut run.records {
                r.loss += spec.loss_noise * standard_normal(&mut rng);
            }
        }
        let id = format!("run{i:02}");
        run.model_size = spec.model_size;
        run.meta.insert("id".into(), id.clone());
        run.meta.insert("seed".into(), ctx.cfg.seed.to_string());
        let file = format!("runs/{id}.csv");
        write_csv(&run, &ctx.path(&file))?;
        runs.push(ManifestEntry { id, file, batch_size: b });
    }
    let manifest = Manifest { runs };
    ctx.write_json(MANIFEST, &manifest)?;
    Ok(manifest)
}

pub struct LoadedRun {
    pub id: String,
    pub file: String,
    pub run: TrainingRun,
}

/// Configured run files, or the simulated runs in the output directory.
pub fn load_runs(ctx: &Context) -> Result<Vec<LoadedRun>> {
    let mut out = Vec::new();
    if ctx.cfg.runs.is_empty() {
        let manifest: Manifest = ctx.read_json(MANIFEST, "simulate")?;
        for e in manifest.runs {
            let run = read_run(&ctx.path(&e.file))?;
            out.push(LoadedRun { id: e.id, file: e.file, run });
        }
    } else {
        for f in &ctx.cfg.runs {
            let run = read_run(Path::new(f))?;
            out.push(LoadedRun { id: run.id(), file: f.clone(), run });
        }
    }
    out.sort_by(|a, b| a.run.batch_size.total_cmp(&b.run.batch_size));
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossFitEntry {
    pub run: String,
    pub file: String,
    pub batch_size: f64,
    pub model_size: f64,
    /// Lowest recorded loss; targets below it are not used for this run.
    pub min_loss: f64,
    pub fit: PowerLawRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossingEntry {
    pub run_a: String,
    pub run_b: String,
    pub batch_a: f64,
    pub batch_b: f64,
    pub crossing: Option<Crossing>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

/// Crossing search between runs adjacent in batch size.
pub fn crossings(ctx: &mut Context) -> Result<Vec<CrossingEntry>> {
    let runs = load_runs(ctx)?;
    let mut out = Vec::new();
    for w in runs.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        if a.run.batch_size == b.run.batch_size {
            continue;
        }
        let (crossing, note) = match find_crossing(&a.run, &b.run) {
            Ok(c) => (c, None),
            Err(e) => (None, Some(e.to_string())),
        };
        out.push(CrossingEntry {
            run_a: a.id.clone(),
            run_b: b.id.clone(),
            batch_a: a.run.batch_size,
            batch_b: b.run.batch_size,
            crossing,
            note,
        });
    }
    ctx.write_json(CROSSINGS, &out)?;
    Ok(out)
}

/// Fits the loss power law to every run.
pub fn fit_loss(ctx: &mut Context) -> Result<Vec<LossFitEntry>> {
    let runs = load_runs(ctx)?;
    if runs.len() < 4 {
        return Err(Error::InsufficientData(format!("{} runs; the fit needs at least 4", runs.len())));
    }
    let f = &ctx.cfg.fit;
    let opts =
        PowerLawFitOptions { warmup_exclude: f.warmup_exclude, delta: f.loss_delta, seed: ctx.cfg.seed, starts: f.loss_starts };
    let mut entries = Vec::with_capacity(runs.len());
    for r in &runs {
        let fit = fit_power_law(&r.run, &opts).context(|| format!("run {} ({})", r.id, r.file))?;
        entries.push(LossFitEntry {
            run: r.id.clone(),
            file: r.file.clone(),
            batch_size: r.run.batch_size,
            model_size: r.run.model_size,
            min_loss: r.run.loss_range().map(|x| x.0).unwrap_or(f64::INFINITY),
            fit: PowerLawRecord::new(fit, &opts),
        });
    }
    ctx.write_json(LOSS_FITS, &entries)?;
    Ok(entries)
}

/// Persisted `E(S)` fit with its diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EsFitArtifact {
    pub target_loss: f64,
    pub dataset: String,
    /// Runs left out because they never reach the target.
    pub excluded_runs: Vec<String>,
    pub fit: EsFit,
    pub constraints: ConstraintResiduals,
    pub metrics: BatchMetrics,
}

pub struct EsStage {
    pub fits: Vec<EsFitArtifact>,
    pub metrics: Vec<BatchMetrics>,
}

fn fit_one(
    entries: &[LossFitEntry],
    target: f64,
    opts: &EsFitOptions,
) -> Result<(EsDataset, Vec<String>, EsFit)> {
    let (usable, excluded): (Vec<&LossFitEntry>, Vec<&LossFitEntry>) =
        entries.iter().partition(|e| e.min_loss <= target && e.fit.l0 < target);
    let fits: Vec<_> = usable.iter().map(|e| (e.batch_size, e.fit.fit())).collect();
    let ids: Vec<String> = usable.iter().map(|e| e.run.clone()).collect();
    let ds = build_es_dataset_with_ids(&fits, target, &ids)?;
    let fit = fit_es(&ds, opts)?;
    Ok((ds, excluded.iter().map(|e| e.run.clone()).collect(), fit))
}

/// Builds and fits one `(S, E)` dataset per target loss, then derives the
/// batch metrics, their trend and the optimal-batch curve.
pub fn fit_es_stage(ctx: &mut Context) -> Result<EsStage> {
    let entries: Vec<LossFitEntry> = ctx.read_json(LOSS_FITS, "fit-loss")?;
    let targets = ctx
        .cfg
        .target_losses
        .as_ref()
        .ok_or_else(|| Error::InvalidConfig("config has no target_losses".into()))?
        .values()?;
    let opts = EsFitOptions { delta: ctx.cfg.fit.es_delta, seeds: ctx.cfg.fit.es_seeds, seed: ctx.cfg.seed };

    let results: Vec<Result<(EsDataset, Vec<String>, EsFit)>> = std::thread::scope(|scope| {
        let handles: Vec<_> = targets
            .iter()
            .map(|&t| {
                let entries = &entries;
                let opts = &opts;
                scope.spawn(move || fit_one(entries, t, opts))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("fit thread panicked")).collect()
    });

    let mut fits = Vec::with_capacity(targets.len());
    for (k, (res, &t)) in results.into_iter().zip(&targets).enumerate() {
        let (ds, excluded, fit) = res.context(|| format!("target loss {t}"))?;
        if !excluded.is_empty() {
            ctx.warn(format!("target loss {t}: runs {} never reach it and were left out", excluded.join(", ")));
        }
        ctx.write_json(&es_dataset_path(k), &ds)?;
        let metrics = extract_metrics(&fit.model, t);
        let artifact = EsFitArtifact {
            target_loss: t,
            dataset: es_dataset_path(k),
            excluded_runs: excluded,
            constraints: fit.model.constraint_residuals(),
            fit,
            metrics,
        };
        ctx.write_json(&es_fit_path(k), &artifact)?;
        fits.push(artifact);
    }

    let metrics: Vec<BatchMetrics> = fits.iter().map(|f| f.metrics).collect();
    ctx.write_json(METRICS, &metrics)?;
    let mut table = String::from("target_loss,b_min,b_opt,e_min,s_opt\n");
    for m in &metrics {
        table.push_str(&format!("{},{},{},{},{}\n", m.target_loss, m.b_min, m.b_opt, m.e_min, m.s_opt));
    }
    ctx.write_text(METRICS_TABLE, &table)?;

    if metrics.len() >= 3 {
        // The largest batch is the closest thing to a full-batch run.
        let l0 = entries.iter().max_by(|a, b| a.batch_size.total_cmp(&b.batch_size)).map(|e| e.fit.l0);
        let trend = metrics_trend(&metrics, l0)?;
        ctx.write_json(TREND, &trend)?;
        let model_size = entries.first().map(|e| e.model_size).unwrap_or(1.0);
        let curve = fit_bopt_curve(&metrics, model_size)?;
        for w in &curve.warnings {
            ctx.warn(format!("optimal-batch curve: {w}"));
        }
        ctx.write_json(BOPT_CURVE, &curve)?;
    } else {
        ctx.warn("fewer than 3 target losses; no trend or optimal-batch curve");
    }
    Ok(EsStage { fits, metrics })
}

pub struct ScheduleStage {
    pub schedule: Schedule,
    pub comparison: Option<ScheduleComparison>,
}

/// Batch curve named by the schedule config.
pub fn schedule_curve(ctx: &Context) -> Result<(Box<dyn BatchCurve>, Option<f64>)> {
    let sc = ctx
        .cfg
        .schedule
        .as_ref()
        .ok_or_else(|| Error::MissingArtifacts("no schedule section and no explicit curve".into()))?;
    Ok(match &sc.curve {
        CurveSource::Metrics => {
            let curve: BoptCurve = ctx.read_json(BOPT_CURVE, "fit")?;
            let n = curve.model_size;
            (Box::new(curve), Some(n))
        }
        CurveSource::Affine { .. } => (Box::new(sc.curve.affine().expect("affine")), None),
        CurveSource::Knots { knots } => (Box::new(BoptCurve::from_knots(sc.model_size.unwrap_or(1.0), knots.clone())?), None),
    })
}

pub fn schedule(ctx: &mut Context) -> Result<ScheduleStage> {
    let (curve, curve_n) = schedule_curve(ctx)?;
    let sc = ctx.cfg.schedule.clone().expect("checked by schedule_curve");
    let opts = ScheduleOptions {
        model_size: sc.model_size.or(curve_n).unwrap_or(1.0),
        d_interval: sc.d_interval,
        momenta: sc.momenta.clone().unwrap_or_else(|| vec![0.0; sc.n]),
        n: sc.n,
        init_mode: sc.init_mode,
        quantum: sc.quantum,
    };
    let schedule = make_schedule(curve.as_ref(), &opts)?;
    ctx.write_json(SCHEDULE, &schedule)?;
    ctx.write_text(SCHEDULE_TABLE, &schedule_table(&schedule))?;
    let comparison = if sc.compare_reference {
        let c = compare_schedule(&schedule, &REFERENCE_SCHEDULE);
        ctx.write_json(SCHEDULE_COMPARISON, &c)?;
        Some(c)
    } else {
        None
    };
    Ok(ScheduleStage { schedule, comparison })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurfaceResult {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<EquivalenceReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<ErrorInfo>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorInfo {
    pub kind: String,
    pub message: String,
}

impl From<&Error> for ErrorInfo {
    fn from(e: &Error) -> Self {
        Self { kind: e.kind().to_string(), message: e.to_string() }
    }
}

pub fn build_surface(spec: &SurfaceSpec) -> Result<LossSurface> {
    match spec {
        SurfaceSpec::File { file, .. } => read_json_file(Path::new(file)),
        SurfaceSpec::Simulated { epsilon, noise, fullbatch_loss, batches, data, corrupt_row, .. } => {
            let cfg = crate::dynamics::SimConfig::new(*epsilon, *noise, *fullbatch_loss);
            cfg.validate()?;
            let b = batches.values("surface batches")?;
            let d = data.values("surface data")?;
            let mut surface = simulate_surface(&cfg, &b, &d)?;
            if let Some(r) = *corrupt_row {
                let row = surface
                    .loss
                    .get_mut(r)
                    .ok_or_else(|| Error::InvalidConfig(format!("corrupt_row {r} is outside the surface")))?;
                if row.len() >= 3 {
                    row.swap(1, 2);
                }
            }
            Ok(surface)
        }
    }
}

/// Runs the argmin-equivalence check on every configured surface. All
/// surfaces are checked and written before the first failure is returned.
pub fn verify(ctx: &mut Context) -> Result<Vec<SurfaceResult>> {
    let vc = ctx.cfg.verify.clone().ok_or_else(|| Error::InvalidConfig("config has no verify section".into()))?;
    let mut results = Vec::new();
    let mut first_err: Option<Error> = None;
    for spec in &vc.surfaces {
        let outcome = build_surface(spec).and_then(|s| verify_equivalence(&s));
        let outcome = match outcome {
            Ok(r) if !r.passed => Err(Error::EquivalenceFailed(format!(
                "{} of {} data budgets disagree",
                r.rows.iter().filter(|x| !x.agrees).count(),
                r.rows.len()
            ))),
            other => other,
        };
        match outcome {
            Ok(report) => results.push(SurfaceResult { name: spec.name().into(), report: Some(report), error: None }),
            Err(e) => {
                let e = e.context(format!("surface {}", spec.name()));
                results.push(SurfaceResult { name: spec.name().into(), report: None, error: Some((&e).into()) });
                first_err.get_or_insert(e);
            }
        }
    }
    ctx.write_json(EQUIVALENCE, &results)?;
    match first_err {
        Some(e) => Err(e),
        None => Ok(results),
    }
}

/// Renders every plot whose inputs exist. Returns the files written.
pub fn plot(ctx: &mut Context) -> Result<Vec<String>> {
    let mut written = Vec::new();
    if ctx.exists(MANIFEST) || !ctx.cfg.runs.is_empty() {
        let runs = load_runs(ctx)?;
        let crossings: Vec<CrossingEntry> =
            if ctx.exists(CROSSINGS) { ctx.read_json(CROSSINGS, "fit-loss")? } else { Vec::new() };
        let runs: Vec<TrainingRun> = runs.into_iter().map(|r| r.run).collect();
        let found: Vec<Crossing> = crossings.iter().filter_map(|c| c.crossing).collect();
        ctx.write_text("plots/loss_vs_tokens.svg", &svg::loss_plot(&runs, &found))?;
        written.push("plots/loss_vs_tokens.svg".to_string());
    }
    let mut k = 0;
    while ctx.exists(&es_fit_path(k)) {
        let art: EsFitArtifact = ctx.read_json(&es_fit_path(k), "fit-es")?;
        let ds: EsDataset = ctx.read_json(&art.dataset, "fit-es")?;
        let name = format!("plots/es_fit_{k:02}.svg");
        let title = format!("E(S) at target loss {:.4}", art.target_loss);
        ctx.write_text(&name, &svg::es_plot(&art.fit.model, &ds.points, &title))?;
        written.push(name);
        k += 1;
    }
    if ctx.exists(METRICS) {
        let metrics: Vec<BatchMetrics> = ctx.read_json(METRICS, "fit-es")?;
        if metrics.is_empty() {
            ctx.warn("empty metrics list; trend plot skipped");
        } else {
            ctx.write_text("plots/batch_trend.svg", &svg::trend_plot(&metrics))?;
            written.push("plots/batch_trend.svg".to_string());
        }
    } else {
        ctx.warn("no metrics; trend plot skipped");
    }
    if ctx.exists(SCHEDULE) {
        let schedule: Schedule = ctx.read_json(SCHEDULE, "schedule")?;
        let curve = schedule_curve(ctx).ok().map(|c| c.0);
        ctx.write_text("plots/schedule.svg", &svg::schedule_plot(&schedule, curve.as_deref()))?;
        written.push("plots/schedule.svg".to_string());
    }
    Ok(written)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub version: String,
    pub config_name: String,
    pub config_sha256: String,
    pub seed: u64,
    pub es_seeds: usize,
    pub loss_starts: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub target_loss: f64,
    pub file: String,
    pub objective: f64,
    pub point_count: usize,
    pub max_constraint_residual: f64,
    pub excluded_runs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub provenance: Provenance,
    /// SHA-256 of every artifact the report draws on, keyed by path.
    pub artifacts: BTreeMap<String, String>,
    pub loss_fits: Vec<LossFitEntry>,
    pub fits: Vec<FitSummary>,
    pub metrics: Vec<BatchMetrics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trend: Option<crate::esfit::TrendReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<Schedule>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule_comparison: Option<ScheduleComparison>,
    pub crossings: Vec<CrossingEntry>,
    pub equivalence: Vec<SurfaceResult>,
    pub warnings: Vec<String>,
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

/// Assembles `report.json` and `report.md` from the artifacts on disk.
pub fn report(ctx: &mut Context) -> Result<Report> {
    let mut artifacts = BTreeMap::new();
    let mut note = |ctx: &Context, rel: &str| -> Result<()> {
        if ctx.exists(rel) {
            artifacts.insert(rel.to_string(), sha256_file(&ctx.path(rel))?);
        }
        Ok(())
    };
    for rel in [MANIFEST, LOSS_FITS, CROSSINGS, METRICS, METRICS_TABLE, TREND, BOPT_CURVE, SCHEDULE, SCHEDULE_TABLE, SCHEDULE_COMPARISON, EQUIVALENCE] {
        note(ctx, rel)?;
    }
    let opt = |ctx: &Context, rel: &str| ctx.exists(rel);
    let loss_fits: Vec<LossFitEntry> = if opt(ctx, LOSS_FITS) { ctx.read_json(LOSS_FITS, "fit-loss")? } else { Vec::new() };
    let mut fits = Vec::new();
    let mut k = 0;
    while ctx.exists(&es_fit_path(k)) {
        let art: EsFitArtifact = ctx.read_json(&es_fit_path(k), "fit-es")?;
        note(ctx, &es_fit_path(k))?;
        note(ctx, &art.dataset)?;
        fits.push(FitSummary {
            target_loss: art.target_loss,
            file: es_fit_path(k),
            objective: art.fit.objective,
            point_count: art.fit.point_count,
            max_constraint_residual: art.constraints.max(),
            excluded_runs: art.excluded_runs,
        });
        k += 1;
    }
    if opt(ctx, MANIFEST) {
        let manifest: Manifest = ctx.read_json(MANIFEST, "simulate")?;
        for e in &manifest.runs {
            note(ctx, &e.file)?;
        }
    }
    let report = Report {
        provenance: Provenance {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config_name: ctx.cfg.name.clone(),
            config_sha256: ctx.cfg.hash(),
            seed: ctx.cfg.seed,
            es_seeds: ctx.cfg.fit.es_seeds,
            loss_starts: ctx.cfg.fit.loss_starts,
        },
        artifacts,
        loss_fits,
        fits,
        metrics: if opt(ctx, METRICS) { ctx.read_json(METRICS, "fit-es")? } else { Vec::new() },
        trend: if opt(ctx, TREND) { Some(ctx.read_json(TREND, "fit-es")?) } else { None },
        schedule: if opt(ctx, SCHEDULE) { Some(ctx.read_json(SCHEDULE, "schedule")?) } else { None },
        schedule_comparison: if opt(ctx, SCHEDULE_COMPARISON) {
            Some(ctx.read_json(SCHEDULE_COMPARISON, "schedule")?)
        } else {
            None
        },
        crossings: if opt(ctx, CROSSINGS) { ctx.read_json(CROSSINGS, "fit-loss")? } else { Vec::new() },
        equivalence: if opt(ctx, EQUIVALENCE) { ctx.read_json(EQUIVALENCE, "verify")? } else { Vec::new() },
        warnings: ctx.warnings.clone(),
    };
    ctx.write_json(REPORT, &report)?;
    ctx.write_text(REPORT_MD, &markdown(&report))?;
    Ok(report)
}

fn markdown(r: &Report) -> String {
    let p = &r.provenance;
    let mut s = format!(
        "# {} report\n\n{} {} | config sha256 `{}` | seed {} | E(S) starts {} | loss-fit starts {}\n",
        if p.config_name.is_empty() { "batchscale" } else { &p.config_name },
        p.tool,
        p.version,
        p.config_sha256,
        p.seed,
        p.es_seeds,
        p.loss_starts
    );
    if !r.loss_fits.is_empty() {
        s.push_str("\n## Loss power laws (`fits/loss_fits.json`)\n\n| run | batch | L0 | A | alpha |\n|---|---|---|---|---|\n");
        for e in &r.loss_fits {
            s.push_str(&format!("| {} | {} | {:.6} | {:.6} | {:.6} |\n", e.run, e.batch_size, e.fit.l0, e.fit.a, e.fit.alpha));
        }
    }
    if !r.metrics.is_empty() {
        s.push_str("\n## Batch metrics (`metrics.json`)\n\n| target loss | B_min | B_opt | E_min | S_opt |\n|---|---|---|---|---|\n");
        for m in &r.metrics {
            s.push_str(&format!(
                "| {:.4} | {:.6e} | {:.6e} | {:.6e} | {:.6e} |\n",
                m.target_loss, m.b_min, m.b_opt, m.e_min, m.s_opt
            ));
        }
    }
    if let Some(t) = &r.trend {
        s.push_str(&format!(
            "\nTrend (`trend.json`): B_min nondecreasing as loss falls: {}; B_opt: {}\n",
            t.b_min_monotone, t.b_opt_monotone
        ));
    }
    if let Some(sch) = &r.schedule {
        s.push_str("\n## Schedule (`schedule.json`)\n\n```\n");
        s.push_str(&schedule_table(sch));
        s.push_str("```\n");
    }
    if let Some(c) = &r.schedule_comparison {
        s.push_str(&format!(
            "\nAgainst the reference schedule {:?}: max |difference| = {:.6e}\n",
            c.reference, c.max_abs_difference
        ));
    }
    let found: Vec<&CrossingEntry> = r.crossings.iter().filter(|c| c.crossing.is_some()).collect();
    if !r.crossings.is_empty() {
        s.push_str(&format!("\n## Crossings (`fits/crossings.json`)\n\n{} of {} adjacent pairs cross.\n", found.len(), r.crossings.len()));
        for c in found {
            let x = c.crossing.expect("filtered");
            s.push_str(&format!("- B={} vs B={}: loss {:.6}, tokens {:.6e}\n", c.batch_a, c.batch_b, x.loss, x.tokens_a));
        }
    }
    if !r.equivalence.is_empty() {
        s.push_str("\n## Equivalence (`equivalence.json`)\n\n");
        for e in &r.equivalence {
            let status = match (&e.report, &e.error) {
                (Some(rep), _) if rep.passed => "pass".to_string(),
                (Some(_), _) => "FAIL".to_string(),
                (None, Some(err)) => format!("error: {}", err.kind),
                _ => "?".to_string(),
            };
            s.push_str(&format!("- {}: {}\n", e.name, status));
        }
    }
    if !r.warnings.is_empty() {
        s.push_str("\n## Warnings\n\n");
        for w in &r.warnings {
            s.push_str(&format!("- {w}\n"));
        }
    }
    s
}

/// Every stage the config supports, in order.
pub fn run_all(ctx: &mut Context) -> Result<()> {
    if ctx.cfg.runs.is_empty() && ctx.cfg.simulator.is_some() {
        simulate(ctx)?;
    }
    if ctx.exists(MANIFEST) || !ctx.cfg.runs.is_empty() {
        crossings(ctx)?;
    }
    if ctx.cfg.target_losses.is_some() {
        fit_loss(ctx)?;
        fit_es_stage(ctx)?;
    }
    if ctx.cfg.schedule.is_some() {
        schedule(ctx)?;
    }
    if ctx.cfg.verify.is_some() {
        verify(ctx)?;
    }
    plot(ctx)?;
    report(ctx)?;
    Ok(())
}
