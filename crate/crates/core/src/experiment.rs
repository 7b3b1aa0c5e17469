//! Factorial experiments: build, sample, diagnose and time every model of a
//! design, then tabulate closure, DIC, convergence and runtime side by side.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diagnostics::{self, quantile_sorted, ClosureReport, DicScore, TrajectoryPoint};
use crate::ingest::{AnalysisSpan, ObservationTable, Window};
use crate::network::{build, canonical_span, label_matches, BiasKind, ModelConfig, ProcessErrorKind};
use crate::priors::PriorSpec;
use crate::sampler::{
    file_stem, run_with, RunOptions, RunStatus, SampleStore, SamplerError, SamplerSettings, StoreAudit, Timing,
};
use crate::{ARTIFACT_VERSION, SCHEMA_VERSION};

/// Rolling windows over which closure is scored.
pub const CLOSURE_WINDOWS: [u32; 3] = [1, 12, 60];
pub const CLOSURE_LEVEL: f64 = 0.95;
/// Seed of the canonical design when none is given.
pub const DEFAULT_SEED: u64 = 7;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid design: {0}")]
    Design(String),
    #[error("model {0} is not in the report")]
    UnknownModel(String),
    #[error("model {model} has no monitored parameter {name}")]
    MissingParameter { model: String, name: String },
    #[error("experiment interrupted during {model} after iteration {iteration}")]
    Interrupted { model: String, iteration: usize },
    #[error("malformed report: {0}")]
    Report(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// The model variants to run and the sampler settings they share, plus
/// optional paths to the data manifest and prior file they were built from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DesignMatrix {
    #[serde(default = "schema_version")]
    pub schema_version: u32,
    pub models: Vec<ModelConfig>,
    pub settings: SamplerSettings,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub priors: Option<PathBuf>,
}

fn schema_version() -> u32 {
    SCHEMA_VERSION
}

/// Design file as written by hand: models may be given by id and are then
/// expanded against the data's span and lakes.
#[derive(Clone, Debug, Deserialize)]
pub struct DesignFile {
    #[serde(default = "schema_version")]
    pub schema_version: u32,
    pub models: Vec<ModelEntry>,
    #[serde(default)]
    pub settings: Option<SamplerSettings>,
    #[serde(default)]
    pub data: Option<PathBuf>,
    #[serde(default)]
    pub priors: Option<PathBuf>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(untagged)]
pub enum ModelEntry {
    Id(String),
    Config(Box<ModelConfig>),
}

impl DesignFile {
    pub fn resolve(
        self,
        span: AnalysisSpan,
        lakes: &[String],
        default_settings: SamplerSettings,
    ) -> Result<DesignMatrix, ExperimentError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(ExperimentError::Design(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        let models = self
            .models
            .into_iter()
            .map(|m| match m {
                ModelEntry::Id(id) => {
                    ModelConfig::from_id(&id, span, lakes.to_vec()).map_err(|e| ExperimentError::Design(e.to_string()))
                }
                ModelEntry::Config(c) => Ok(*c),
            })
            .collect::<Result<Vec<_>, _>>()?;
        let d = DesignMatrix {
            schema_version: SCHEMA_VERSION,
            models,
            settings: self.settings.unwrap_or(default_settings),
            data: self.data,
            priors: self.priors,
        };
        d.validate()?;
        Ok(d)
    }
}

impl DesignMatrix {
    /// The 26 variants: the cumulative prototype and the 12 rolling
    /// variants (window 1 or 12 by none/fixed/hierarchical process error by
    /// fixed/hierarchical bias), each without and then with the constrained
    /// flow bias.
    pub fn canonical(span: AnalysisSpan, lakes: Vec<String>, settings: SamplerSettings) -> Self {
        let mut models = Vec::with_capacity(26);
        for constrained in [false, true] {
            models.push(ModelConfig::new(
                Window::Cumulative,
                ProcessErrorKind::None,
                BiasKind::FixedSeasonal,
                constrained,
                span,
                lakes.clone(),
            ));
            for w in [1, 12] {
                for pe in [ProcessErrorKind::None, ProcessErrorKind::FixedSeasonal, ProcessErrorKind::Hierarchical] {
                    for bias in [BiasKind::FixedSeasonal, BiasKind::Hierarchical] {
                        models.push(ModelConfig::new(Window::Rolling(w), pe, bias, constrained, span, lakes.clone()));
                    }
                }
            }
        }
        DesignMatrix {
            schema_version: SCHEMA_VERSION,
            models,
            settings,
            data: None,
            priors: None,
        }
    }

    pub fn ids(&self) -> Vec<&str> {
        self.models.iter().map(|m| m.id.as_str()).collect()
    }

    /// Keeps only the listed models, in design order.
    pub fn select(mut self, ids: &[&str]) -> Result<Self, ExperimentError> {
        for id in ids {
            if !self.models.iter().any(|m| m.id == *id) {
                return Err(ExperimentError::UnknownModel(id.to_string()));
            }
        }
        self.models.retain(|m| ids.contains(&m.id.as_str()));
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        if self.models.is_empty() {
            return Err(ExperimentError::Design("no models".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for m in &self.models {
            m.validate().map_err(|e| ExperimentError::Design(e.to_string()))?;
            if !seen.insert(m.id.as_str()) {
                return Err(ExperimentError::Design(format!("duplicate model id {}", m.id)));
            }
        }
        self.settings.validate().map_err(|e| ExperimentError::Design(e.to_string()))?;
        Ok(())
    }
}

/// The canonical 26-model design over the canonical analysis span for
/// Superior and Michigan-Huron at the reduced-scale preset.
pub fn canonical_design() -> DesignMatrix {
    DesignMatrix::canonical(
        canonical_span(),
        vec!["SUP".into(), "MHU".into()],
        SamplerSettings::reduced(DEFAULT_SEED),
    )
}

/// Data, priors and execution controls for [`run_design`].
#[derive(Clone, Debug)]
pub struct Resources<'a> {
    pub table: &'a ObservationTable,
    pub priors: &'a PriorSpec,
    /// Skip posterior-predictive closure.
    pub skip_ppc: bool,
    /// Retained draws used for DIC; 0 uses all.
    pub dic_draws: usize,
    /// Per-model restart files and finished-model results live under
    /// `<dir>/<model id>/`.
    pub checkpoint_dir: Option<PathBuf>,
    pub resume: bool,
    pub halt_after: Option<usize>,
    pub threads: Option<usize>,
    /// Run models concurrently instead of one after another. Runtimes are
    /// then not comparable across models.
    pub parallel_models: bool,
}

impl<'a> Resources<'a> {
    pub fn new(table: &'a ObservationTable, priors: &'a PriorSpec) -> Self {
        Resources {
            table,
            priors,
            skip_ppc: false,
            dic_draws: 0,
            checkpoint_dir: None,
            resume: false,
            halt_after: None,
            threads: None,
            parallel_models: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSummary {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    pub q025: f64,
    pub q975: f64,
}

impl ParamSummary {
    pub fn from_draws(name: &str, draws: &[f64]) -> Self {
        let m = diagnostics::Moments::from_slice(draws);
        let mut sorted = draws.to_vec();
        sorted.sort_by(f64::total_cmp);
        ParamSummary {
            name: name.to_string(),
            mean: m.mean,
            sd: m.variance().sqrt(),
            q025: quantile_sorted(&sorted, 0.025),
            q975: quantile_sorted(&sorted, 0.975),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceSummary {
    pub max_r50: f64,
    pub max_r975: f64,
    pub flagged: usize,
    pub trajectory: Vec<TrajectoryPoint>,
    pub notes: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum ModelStatus {
    Complete,
    Failed { reason: String },
}

/// Everything recorded for one model. Wall-clock times are kept apart from
/// the deterministic results so that report files can be compared across
/// runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelReport {
    pub id: String,
    pub config: ModelConfig,
    pub status: ModelStatus,
    #[serde(default)]
    pub closure: Option<ClosureReport>,
    #[serde(default)]
    pub dic: Option<DicScore>,
    #[serde(default)]
    pub convergence: Option<ConvergenceSummary>,
    #[serde(default)]
    pub summaries: Vec<ParamSummary>,
    #[serde(default)]
    pub audit: Option<StoreAudit>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timing: Option<Timing>,
}

impl ModelReport {
    fn failed(config: &ModelConfig, reason: String) -> Self {
        ModelReport {
            id: config.id.clone(),
            config: config.clone(),
            status: ModelStatus::Failed { reason },
            closure: None,
            dic: None,
            convergence: None,
            summaries: Vec::new(),
            audit: None,
            timing: None,
        }
    }

    pub fn is_complete(&self) -> bool {
        self.status == ModelStatus::Complete
    }

    /// Sampling time in seconds, excluding posterior-predictive work.
    pub fn runtime(&self) -> Option<f64> {
        self.timing.as_ref().map(|t| t.total_seconds)
    }

    pub fn summary(&self, name: &str) -> Option<&ParamSummary> {
        self.summaries.iter().find(|s| s.name == name)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub schema_version: u32,
    pub artifact_version: String,
    pub seed: u64,
    pub settings: SamplerSettings,
    pub models: Vec<ModelReport>,
}

fn model_dir(root: &Path, id: &str) -> PathBuf {
    root.join(file_stem(id))
}

/// Builds, samples and diagnoses one model. Sampling halts are passed up;
/// every other problem becomes a failure record.
pub fn run_model(config: &ModelConfig, settings: &SamplerSettings, res: &Resources) -> Result<ModelReport, ExperimentError> {
    let dir = res.checkpoint_dir.as_ref().map(|d| model_dir(d, &config.id));
    if let (Some(d), true) = (&dir, res.resume) {
        let done = d.join("result.json");
        if done.exists() {
            let text = fs::read_to_string(&done)?;
            let r: ModelReport = serde_json::from_str(&text).map_err(|e| ExperimentError::Report(e.to_string()))?;
            if r.config == *config {
                return Ok(r);
            }
        }
    }
    let outcome = catch_unwind(AssertUnwindSafe(|| run_model_inner(config, settings, res, dir.clone())));
    let report = match outcome {
        Ok(Ok(r)) => r,
        Ok(Err(ExperimentError::Interrupted { model, iteration })) => {
            return Err(ExperimentError::Interrupted { model, iteration })
        }
        Ok(Err(e)) => ModelReport::failed(config, e.to_string()),
        Err(panic) => {
            let msg = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "unknown panic".into());
            ModelReport::failed(config, format!("panic: {msg}"))
        }
    };
    if let Some(d) = &dir {
        fs::create_dir_all(d)?;
        let text = serde_json::to_string(&report).map_err(|e| ExperimentError::Report(e.to_string()))?;
        fs::write(d.join("result.json"), text)?;
    }
    Ok(report)
}

fn run_model_inner(
    config: &ModelConfig,
    settings: &SamplerSettings,
    res: &Resources,
    dir: Option<PathBuf>,
) -> Result<ModelReport, ExperimentError> {
    let fail = |reason: String| Ok(ModelReport::failed(config, reason));
    let net = match build(config, res.priors, res.table) {
        Ok(n) => n,
        Err(e) => return fail(format!("build: {e}")),
    };
    let options = RunOptions {
        checkpoint_dir: dir,
        resume: res.resume,
        halt_after: res.halt_after,
        threads: res.threads,
    };
    let store = match run_with(&net, settings, &options) {
        Ok(s) => s,
        Err(SamplerError::Halted(i)) => {
            return Err(ExperimentError::Interrupted {
                model: config.id.clone(),
                iteration: i,
            })
        }
        Err(e) => return fail(format!("sampling: {e}")),
    };
    let timing = Some(store.timing.clone());
    if let RunStatus::Failed { reason } = &store.status {
        let mut r = ModelReport::failed(config, reason.clone());
        r.timing = timing;
        return Ok(r);
    }
    let convergence = match diagnostics::psrf_report(&store) {
        Ok(p) => ConvergenceSummary {
            max_r50: p.max_r50,
            max_r975: p.max_r975,
            flagged: p.flagged.len(),
            trajectory: p.trajectory,
            notes: p.notes,
        },
        Err(e) => return fail(format!("convergence: {e}")),
    };
    let draws = if res.dic_draws == 0 { store.draw_count() } else { res.dic_draws };
    let dic = match diagnostics::dic(&net, &store, draws) {
        Ok(d) => d,
        Err(e) => return fail(format!("DIC: {e}")),
    };
    let closure = if res.skip_ppc {
        None
    } else {
        let mut obs = Vec::new();
        for lake in &config.lakes {
            for w in CLOSURE_WINDOWS {
                if w as usize <= config.analysis_span.months {
                    match res.table.delta_h(lake, Window::Rolling(w)) {
                        Ok(o) => obs.push(o),
                        Err(e) => return fail(format!("closure data: {e}")),
                    }
                }
            }
        }
        match diagnostics::closure(&net, &store, &obs, CLOSURE_LEVEL) {
            Ok(c) => Some(c),
            Err(e) => return fail(format!("closure: {e}")),
        }
    };
    Ok(ModelReport {
        id: config.id.clone(),
        config: config.clone(),
        status: ModelStatus::Complete,
        closure,
        dic: Some(dic),
        convergence: Some(convergence),
        summaries: summaries(&store),
        audit: Some(store.audit(&net)),
        timing,
    })
}

fn summaries(store: &SampleStore) -> Vec<ParamSummary> {
    store
        .monitored_indices()
        .into_iter()
        .map(|p| ParamSummary::from_draws(&store.names[p], store.param(p)))
        .collect()
}

/// Runs every model of the design. Models run one after another (chains
/// within a model may run in parallel) unless `parallel_models` is set.
pub fn run_design(design: &DesignMatrix, res: &Resources) -> Result<ExperimentReport, ExperimentError> {
    design.validate()?;
    let models = if res.parallel_models {
        run_parallel(design, res)?
    } else {
        design
            .models
            .iter()
            .map(|m| run_model(m, &design.settings, res))
            .collect::<Result<Vec<_>, _>>()?
    };
    Ok(ExperimentReport {
        schema_version: SCHEMA_VERSION,
        artifact_version: ARTIFACT_VERSION.to_string(),
        seed: design.settings.seed,
        settings: design.settings.clone(),
        models,
    })
}

#[cfg(feature = "parallel")]
fn run_parallel(design: &DesignMatrix, res: &Resources) -> Result<Vec<ModelReport>, ExperimentError> {
    use rayon::prelude::*;
    design
        .models
        .par_iter()
        .map(|m| run_model(m, &design.settings, res))
        .collect()
}

#[cfg(not(feature = "parallel"))]
fn run_parallel(design: &DesignMatrix, res: &Resources) -> Result<Vec<ModelReport>, ExperimentError> {
    design.models.iter().map(|m| run_model(m, &design.settings, res)).collect()
}

/// One row of a side-by-side comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub name: String,
    pub baseline: ParamSummary,
    pub candidate: ParamSummary,
    /// Candidate SD over baseline SD.
    pub sd_ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub baseline: String,
    pub candidate: String,
    pub rows: Vec<ComparisonRow>,
}

/// Default comparison: every channel flow.
pub fn default_comparison_patterns() -> Vec<String> {
    vec!["Q[*".into()]
}

impl ExperimentReport {
    pub fn model(&self, id: &str) -> Option<&ModelReport> {
        self.models.iter().find(|m| m.id == id)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self, ExperimentError> {
        serde_json::from_str(text).map_err(|e| ExperimentError::Report(e.to_string()))
    }

    /// Writes the report directory: `report.json` (without wall-clock
    /// times), `models.csv`, `closure.csv`, `closure_wide.csv`, `dic.csv`,
    /// `convergence.csv`, `timing.csv`, and per model `trajectory_<id>.csv`,
    /// `closure_bands_<id>.csv` and `flows_<id>.csv`.
    pub fn write_dir(&self, dir: &Path) -> Result<(), ExperimentError> {
        fs::create_dir_all(dir)?;
        let mut stripped = self.clone();
        for m in &mut stripped.models {
            m.timing = None;
        }
        fs::write(dir.join("report.json"), stripped.to_json())?;
        let ids: Vec<&str> = self.models.iter().map(|m| m.id.as_str()).collect();
        let header = self.header(&ids.join(" "));
        fs::write(dir.join("models.csv"), header.clone() + &self.models_csv())?;
        fs::write(dir.join("closure.csv"), header.clone() + &self.closure_csv())?;
        fs::write(dir.join("closure_wide.csv"), header.clone() + &self.closure_wide_csv())?;
        fs::write(dir.join("dic.csv"), header.clone() + &self.dic_csv())?;
        fs::write(dir.join("convergence.csv"), header.clone() + &self.convergence_csv())?;
        fs::write(dir.join("timing.csv"), header + &self.timing_csv())?;
        for m in &self.models {
            let h = self.header(&m.id);
            let stem = file_stem(&m.id);
            if let Some(c) = &m.convergence {
                let mut s = h.clone() + "iteration,max_r50,max_r975\n";
                for p in &c.trajectory {
                    let _ = writeln!(s, "{},{},{}", p.iteration, p.max_r50, p.max_r975);
                }
                fs::write(dir.join(format!("trajectory_{stem}.csv")), s)?;
            }
            if let Some(c) = &m.closure {
                let mut s = h.clone() + "lake,window,j,lower,median,upper,observed\n";
                for b in &c.bands {
                    let obs = b.observed.map(|v| v.to_string()).unwrap_or_default();
                    let _ = writeln!(s, "{},{},{},{},{},{},{obs}", b.lake, b.window, b.j, b.lower, b.median, b.upper);
                }
                fs::write(dir.join(format!("closure_bands_{stem}.csv")), s)?;
            }
            if m.is_complete() {
                let mut s = h + "name,mean,sd,q025,q975\n";
                for p in m.summaries.iter().filter(|p| label_matches("Q[*", &p.name)) {
                    let _ = writeln!(s, "{},{},{},{},{}", csv_field(&p.name), p.mean, p.sd, p.q025, p.q975);
                }
                fs::write(dir.join(format!("flows_{stem}.csv")), s)?;
            }
        }
        Ok(())
    }

    /// Reads a directory written by [`write_dir`](Self::write_dir),
    /// restoring wall-clock times from `timing.csv`.
    pub fn read_dir(dir: &Path) -> Result<Self, ExperimentError> {
        let mut r = Self::from_json(&fs::read_to_string(dir.join("report.json"))?)?;
        let timing = fs::read_to_string(dir.join("timing.csv"))?;
        let mut by_id: BTreeMap<String, Timing> = BTreeMap::new();
        for line in timing.lines().filter(|l| !l.starts_with('#')).skip(1) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() < 4 || f[2].is_empty() {
                continue;
            }
            let bad = || ExperimentError::Report(format!("timing.csv: {line}"));
            let total: f64 = f[2].parse().map_err(|_| bad())?;
            let chains = f[3]
                .split(';')
                .filter(|s| !s.is_empty())
                .map(|s| s.parse::<f64>().map_err(|_| bad()))
                .collect::<Result<Vec<_>, _>>()?;
            by_id.insert(
                f[0].to_string(),
                Timing {
                    chain_seconds: chains,
                    total_seconds: total,
                },
            );
        }
        for m in &mut r.models {
            m.timing = by_id.remove(&m.id);
        }
        Ok(r)
    }

    fn header(&self, models: &str) -> String {
        format!(
            "# l2swbm {} seed={} models={}\n",
            self.artifact_version, self.seed, models
        )
    }

    fn models_csv(&self) -> String {
        let mut s = String::from("model,window,process_error,bias,constrained_flow_bias,status,audited_draws,linkage_violations,support_violations,reason\n");
        for m in &self.models {
            let (status, reason) = match &m.status {
                ModelStatus::Complete => ("complete", String::new()),
                ModelStatus::Failed { reason } => ("failed", csv_field(reason)),
            };
            let pe = match m.config.process_error {
                ProcessErrorKind::None => "none",
                ProcessErrorKind::FixedSeasonal => "fixed",
                ProcessErrorKind::Hierarchical => "hierarchical",
            };
            let bias = match m.config.bias {
                BiasKind::FixedSeasonal => "fixed",
                BiasKind::Hierarchical => "hierarchical",
            };
            let (draws, linkage, support) = match &m.audit {
                Some(a) => (
                    a.draws.to_string(),
                    a.linkage_violations.to_string(),
                    a.support_violations.to_string(),
                ),
                None => Default::default(),
            };
            let _ = writeln!(
                s,
                "{},{},{pe},{bias},{},{status},{draws},{linkage},{support},{reason}",
                m.id, m.config.window, m.config.constrained_flow_bias
            );
        }
        s
    }

    fn closure_csv(&self) -> String {
        let mut s = String::from("model,lake,window,inside,denominator,percent\n");
        for m in &self.models {
            for r in m.closure.iter().flat_map(|c| &c.rows) {
                let pct = r.percent.map(|p| p.to_string()).unwrap_or_default();
                let _ = writeln!(s, "{},{},{},{},{},{pct}", m.id, r.lake, r.window, r.inside, r.denominator);
            }
        }
        s
    }

    /// One row per model, columns window-major then lake, in the layout of
    /// the usual closure table.
    pub fn closure_wide_csv(&self) -> String {
        let lakes: Vec<String> = self.models.first().map(|m| m.config.lakes.clone()).unwrap_or_default();
        let mut s = String::from("model");
        for w in CLOSURE_WINDOWS {
            for l in &lakes {
                let _ = write!(s, ",{l}_{w}");
            }
        }
        s.push('\n');
        for m in &self.models {
            s.push_str(&m.id);
            for w in CLOSURE_WINDOWS {
                for l in &lakes {
                    let v = m.closure.as_ref().and_then(|c| c.percent(l, w));
                    let _ = write!(s, ",{}", v.map(|p| format!("{p:.0}")).unwrap_or_default());
                }
            }
            s.push('\n');
        }
        s
    }

    fn dic_csv(&self) -> String {
        let mut s = String::from("model,mean_deviance,p_d,dic,draws\n");
        for m in &self.models {
            if let Some(d) = &m.dic {
                let _ = writeln!(s, "{},{},{},{},{}", m.id, d.mean_deviance, d.p_d, d.dic, d.draws);
            } else {
                let _ = writeln!(s, "{},,,,", m.id);
            }
        }
        s
    }

    fn convergence_csv(&self) -> String {
        let mut s = String::from("model,max_r50,max_r975,flagged\n");
        for m in &self.models {
            if let Some(c) = &m.convergence {
                let _ = writeln!(s, "{},{},{},{}", m.id, c.max_r50, c.max_r975, c.flagged);
            } else {
                let _ = writeln!(s, "{},,,", m.id);
            }
        }
        s
    }

    fn timing_csv(&self) -> String {
        let mut s = String::from("model,window,total_seconds,chain_seconds\n");
        for m in &self.models {
            match &m.timing {
                Some(t) => {
                    let chains: Vec<String> = t.chain_seconds.iter().map(|c| c.to_string()).collect();
                    let _ = writeln!(s, "{},{},{},{}", m.id, m.config.window, t.total_seconds, chains.join(";"));
                }
                None => {
                    let _ = writeln!(s, "{},{},,", m.id, m.config.window);
                }
            }
        }
        s
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Side-by-side posterior summaries of the parameters matching `patterns`
/// (e.g. `Q[*`, `P[SUP,10]`) under two models.
pub fn compare(
    report: &ExperimentReport,
    baseline_id: &str,
    candidate_id: &str,
    patterns: &[String],
) -> Result<Comparison, ExperimentError> {
    let base = report
        .model(baseline_id)
        .ok_or_else(|| ExperimentError::UnknownModel(baseline_id.into()))?;
    let cand = report
        .model(candidate_id)
        .ok_or_else(|| ExperimentError::UnknownModel(candidate_id.into()))?;
    let mut rows = Vec::new();
    for pat in patterns {
        let matched: Vec<&ParamSummary> = base.summaries.iter().filter(|s| label_matches(pat, &s.name)).collect();
        if matched.is_empty() {
            return Err(ExperimentError::MissingParameter {
                model: base.id.clone(),
                name: pat.clone(),
            });
        }
        for b in matched {
            let c = cand.summary(&b.name).ok_or_else(|| ExperimentError::MissingParameter {
                model: cand.id.clone(),
                name: b.name.clone(),
            })?;
            rows.push(ComparisonRow {
                name: b.name.clone(),
                baseline: b.clone(),
                candidate: c.clone(),
                sd_ratio: if b.sd > 0.0 { c.sd / b.sd } else if c.sd == 0.0 { 1.0 } else { f64::INFINITY },
            });
        }
    }
    Ok(Comparison {
        baseline: base.id.clone(),
        candidate: cand.id.clone(),
        rows,
    })
}

impl Comparison {
    pub fn to_csv(&self, seed: u64) -> String {
        let mut s = format!(
            "# l2swbm {ARTIFACT_VERSION} seed={seed} models={} {}\n",
            self.baseline, self.candidate
        );
        s.push_str("name,baseline_mean,baseline_sd,baseline_q025,baseline_q975,candidate_mean,candidate_sd,candidate_q025,candidate_q975,sd_ratio\n");
        for r in &self.rows {
            let (b, c) = (&r.baseline, &r.candidate);
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{}",
                csv_field(&r.name),
                b.mean,
                b.sd,
                b.q025,
                b.q975,
                c.mean,
                c.sd,
                c.q025,
                c.q975,
                r.sd_ratio
            );
        }
        s
    }

    pub fn file_name(&self) -> String {
        format!("comparison_{}_vs_{}.csv", file_stem(&self.baseline), file_stem(&self.candidate))
    }
}
