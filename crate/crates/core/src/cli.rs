//! Command-line interface: prior fitting, single-model runs, full
//! experiments, synthetic fixtures and graph export.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 configuration or validation
//! failure.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::diagnostics::{self, PsrfReport};
use crate::experiment::{
    self, compare, default_comparison_patterns, DesignFile, DesignMatrix, ExperimentError,
    Resources, CLOSURE_LEVEL, CLOSURE_WINDOWS,
};
use crate::ingest::{align, load_series, AnalysisSpan, ComponentSeries, ObservationTable, SeriesDecl, Window};
use crate::network::{build, label_matches, ModelConfig};
use crate::priors::{fit_all, FitRules, PriorSpec};
use crate::sampler::{run_with, RunOptions, RunStatus, SampleStore, SamplerError, SamplerSettings};
use crate::synthetic::{generate, SyntheticSpec};
use crate::{ARTIFACT_VERSION, SCHEMA_VERSION};

/// Failure carrying its exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn config(m: impl Into<String>) -> Self {
        CliError { code: 2, message: m.into() }
    }
    fn runtime(m: impl Into<String>) -> Self {
        CliError { code: 1, message: m.into() }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::runtime(e.to_string())
    }
}

type CliResult<T = ()> = Result<T, CliError>;

/// Data declarations and run inputs. Relative paths resolve against the
/// manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    /// Upstream to downstream.
    pub lakes: Vec<String>,
    pub span: AnalysisSpan,
    /// Component and level (`H`) series.
    pub series: Vec<SeriesDecl>,
    /// Fitted prior file; when absent, priors are fitted from `series`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub priors: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rules: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub settings: Option<SamplerSettings>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

/// A manifest with its data loaded.
pub struct LoadedData {
    pub manifest: RunManifest,
    pub table: ObservationTable,
    pub priors: PriorSpec,
    pub warnings: Vec<String>,
}

impl RunManifest {
    pub fn read(path: &Path) -> CliResult<(Self, PathBuf)> {
        let text = fs::read_to_string(path).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        let m: RunManifest =
            serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        if m.schema_version != SCHEMA_VERSION {
            return Err(CliError::config(format!(
                "{}: schema_version {} is not supported (expected {SCHEMA_VERSION})",
                path.display(),
                m.schema_version
            )));
        }
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        m.validate(&base)?;
        Ok((m, base))
    }

    /// Every referenced path must exist.
    pub fn validate(&self, base: &Path) -> CliResult {
        if self.lakes.is_empty() {
            return Err(CliError::config("manifest lists no lakes"));
        }
        for d in &self.series {
            if !self.lakes.contains(&d.lake) {
                return Err(CliError::config(format!("series {} names unknown lake {}", d.path.display(), d.lake)));
            }
        }
        let paths = self.series.iter().map(|d| &d.path).chain(&self.priors).chain(&self.rules);
        for p in paths {
            if !base.join(p).exists() {
                return Err(CliError::config(format!("missing file {}", base.join(p).display())));
            }
        }
        Ok(())
    }

    pub fn load(self, base: &Path) -> CliResult<LoadedData> {
        let mut series = Vec::new();
        for d in &self.series {
            series.push(load_series(&base.join(&d.path), d).map_err(|e| CliError::config(e.to_string()))?);
        }
        let mut warnings = Vec::new();
        let priors = match &self.priors {
            Some(p) => {
                let path = base.join(p);
                let text = fs::read_to_string(&path)?;
                PriorSpec::from_json(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?
            }
            None => {
                let rules = read_rules(self.rules.as_ref().map(|r| base.join(r)).as_deref())?;
                let out = fit_all(&series, &rules).map_err(|e| CliError::config(format!("prior fit: {e}")))?;
                warnings.extend(out.warnings);
                out.spec
            }
        };
        let table = align(&series, self.span);
        warnings.extend(table.warnings.iter().cloned());
        Ok(LoadedData {
            manifest: self,
            table,
            priors,
            warnings,
        })
    }
}

fn read_rules(path: Option<&Path>) -> CliResult<FitRules> {
    match path {
        None => Ok(FitRules::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::config(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", p.display())))
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "l2swbm", version, about = "Bayesian water balance models for connected large lakes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Fit calendar-month priors from historical series.
    FitPriors(FitPriorsArgs),
    /// Sample one model and write its draws and diagnostics.
    Run(RunArgs),
    /// Run a design of models and write the comparison tables.
    Experiment(ExperimentArgs),
    /// Write a synthetic two-lake data set with its manifest and priors.
    Synth(SynthArgs),
    /// Print a model's graph in Graphviz format.
    Dot(DotArgs),
}

#[derive(Args, Debug)]
pub struct FitPriorsArgs {
    /// Manifest whose series are the history.
    #[arg(long, conflicts_with = "history")]
    pub manifest: Option<PathBuf>,
    /// Directory of `<LAKE>_<COMPONENT>_<SOURCE>.csv` files.
    #[arg(long)]
    pub history: Option<PathBuf>,
    #[arg(long)]
    pub rules: Option<PathBuf>,
    #[arg(long, default_value = "priors.json")]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug, Clone)]
pub struct SamplingArgs {
    /// Iterations per chain (including burn-in).
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub chains: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Defaults to half of `--k`.
    #[arg(long)]
    pub burn_in: Option<usize>,
    /// Retained draws per chain.
    #[arg(long)]
    pub retain: Option<usize>,
    /// Skip posterior-predictive closure (the timing protocol).
    #[arg(long)]
    pub no_ppc: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overwrite an existing output directory.
    #[arg(long)]
    pub force: bool,
    /// Continue from restart files in the output directory.
    #[arg(long)]
    pub resume: bool,
    /// Iterations between restart files; 0 disables them.
    #[arg(long, default_value_t = 0)]
    pub checkpoint_every: usize,
    #[arg(long, hide = true)]
    pub halt_after: Option<usize>,
}

#[derive(Args, Debug)]
pub struct RunArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub model: String,
    #[command(flatten)]
    pub sampling: SamplingArgs,
}

#[derive(Args, Debug)]
pub struct ExperimentArgs {
    /// Data manifest; may instead be named by the design file.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long, conflicts_with = "canonical")]
    pub design: Option<PathBuf>,
    /// The 26-model design.
    #[arg(long)]
    pub canonical: bool,
    /// Restrict the design to these ids (comma separated).
    #[arg(long, value_delimiter = ',')]
    pub models: Vec<String>,
    /// `baseline:candidate` pairs to compare; defaults to PROT:f12FF when
    /// both are present.
    #[arg(long)]
    pub compare: Vec<String>,
    /// Run models concurrently (runtimes are then not comparable).
    #[arg(long)]
    pub parallel_models: bool,
    #[command(flatten)]
    pub sampling: SamplingArgs,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct DotArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub model: String,
}

/// Parses arguments and runs; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

pub fn dispatch(cli: Cli) -> CliResult {
    match cli.command {
        Command::FitPriors(a) => cmd_fit_priors(&a),
        Command::Run(a) => cmd_run(&a),
        Command::Experiment(a) => cmd_experiment(&a),
        Command::Synth(a) => cmd_synth(&a),
        Command::Dot(a) => cmd_dot(&a),
    }
}

/// Refuses to reuse a non-empty output location without `--force` (or
/// `--resume`, which needs the earlier contents).
fn prepare_out(out: &Path, force: bool, resume: bool) -> CliResult {
    let occupied = out.exists() && (out.is_file() || fs::read_dir(out)?.next().is_some());
    if occupied && !force && !resume {
        return Err(CliError::config(format!(
            "{} already exists; pass --force to overwrite",
            out.display()
        )));
    }
    if occupied && force && !resume && out.is_dir() {
        fs::remove_dir_all(out)?;
    }
    Ok(())
}

pub fn cmd_fit_priors(a: &FitPriorsArgs) -> CliResult {
    prepare_out(&a.out, a.force, false)?;
    let series: Vec<ComponentSeries> = match (&a.manifest, &a.history) {
        (Some(m), _) => {
            let (man, base) = RunManifest::read(m)?;
            man.series
                .iter()
                .map(|d| load_series(&base.join(&d.path), d).map_err(|e| CliError::config(e.to_string())))
                .collect::<CliResult<_>>()?
        }
        (None, Some(dir)) => history_dir(dir)?,
        (None, None) => return Err(CliError::config("pass --manifest or --history")),
    };
    let rules = read_rules(a.rules.as_deref())?;
    let outcome = fit_all(&series, &rules).map_err(|e| CliError::config(format!("prior fit: {e}")))?;
    for w in &outcome.warnings {
        eprintln!("warning: {w}");
    }
    fs::write(&a.out, outcome.spec.to_json() + "\n")?;
    eprintln!("wrote {} prior cells to {}", outcome.spec.len(), a.out.display());
    Ok(())
}

/// Reads every `<LAKE>_<COMPONENT>_<SOURCE>.csv` in a directory.
fn history_dir(dir: &Path) -> CliResult<Vec<ComponentSeries>> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| CliError::config(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    entries.sort();
    let mut out = Vec::new();
    for p in entries {
        let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        let parts: Vec<&str> = stem.split('_').collect();
        let decl = match parts.as_slice() {
            [lake, comp, src] => {
                let component = comp
                    .parse()
                    .map_err(|_| CliError::config(format!("{}: unknown component {comp}", p.display())))?;
                let source = src
                    .parse()
                    .map_err(|_| CliError::config(format!("{}: bad source index {src}", p.display())))?;
                SeriesDecl {
                    lake: lake.to_string(),
                    component,
                    source,
                    units: "mm".into(),
                    path: p.clone(),
                }
            }
            _ => {
                return Err(CliError::config(format!(
                    "{}: expected <LAKE>_<COMPONENT>_<SOURCE>.csv",
                    p.display()
                )))
            }
        };
        out.push(load_series(&p, &decl).map_err(|e| CliError::config(e.to_string()))?);
    }
    if out.is_empty() {
        return Err(CliError::config(format!("{}: no series files", dir.display())));
    }
    Ok(out)
}

fn settings_from(base: Option<&SamplerSettings>, a: &SamplingArgs, seed_default: Option<u64>) -> CliResult<SamplerSettings> {
    let seed = a.seed.or(seed_default).unwrap_or(experiment::DEFAULT_SEED);
    let mut s = base.cloned().unwrap_or_else(|| SamplerSettings::reduced(seed));
    s.seed = seed;
    if let Some(k) = a.k {
        s.iterations = k;
        s.burn_in = k / 2;
        s.retained_per_chain = s.retained_per_chain.min(k - k / 2).max(1);
    }
    if let Some(c) = a.chains {
        s.chains = c;
    }
    if let Some(b) = a.burn_in {
        s.burn_in = b;
    }
    if let Some(r) = a.retain {
        s.retained_per_chain = r;
    }
    s.checkpoint_interval = a.checkpoint_every;
    s.validate().map_err(|e| CliError::config(e.to_string()))?;
    Ok(s)
}

fn model_config(id: &str, data: &LoadedData) -> CliResult<ModelConfig> {
    let valid = || {
        DesignMatrix::canonical(data.table.span, data.manifest.lakes.clone(), SamplerSettings::reduced(0))
            .ids()
            .join(", ")
    };
    ModelConfig::from_id(id, data.table.span, data.manifest.lakes.clone())
        .map_err(|_| CliError::config(format!("unknown model id {id:?}; valid ids: {}", valid())))
}

fn header(model: &str, seed: u64) -> String {
    format!("# l2swbm {ARTIFACT_VERSION} seed={seed} models={model}\n")
}

fn stamp(model: &str, seed: u64, mut body: serde_json::Value) -> String {
    if let Some(o) = body.as_object_mut() {
        o.insert("schema_version".into(), SCHEMA_VERSION.into());
        o.insert("artifact_version".into(), ARTIFACT_VERSION.into());
        o.insert("model_id".into(), model.into());
        o.insert("seed".into(), seed.into());
    }
    serde_json::to_string_pretty(&body).expect("json") + "\n"
}

pub fn cmd_run(a: &RunArgs) -> CliResult {
    let (man, base) = RunManifest::read(&a.manifest)?;
    let out = a
        .sampling
        .out
        .clone()
        .or_else(|| man.out.as_ref().map(|o| base.join(o)))
        .unwrap_or_else(|| PathBuf::from(format!("run_{}", a.model)));
    let seed_default = man.seed;
    let data = man.load(&base)?;
    for w in &data.warnings {
        eprintln!("warning: {w}");
    }
    let config = model_config(&a.model, &data)?;
    let settings = settings_from(data.manifest.settings.as_ref(), &a.sampling, seed_default)?;
    prepare_out(&out, a.sampling.force, a.sampling.resume)?;
    fs::create_dir_all(&out)?;
    let net = build(&config, &data.priors, &data.table).map_err(|e| CliError::config(e.to_string()))?;
    let ckpt = out.join("checkpoints");
    let options = RunOptions {
        checkpoint_dir: Some(ckpt.clone()),
        resume: a.sampling.resume,
        halt_after: a.sampling.halt_after,
        threads: None,
    };
    let store = match run_with(&net, &settings, &options) {
        Ok(s) => s,
        Err(SamplerError::Halted(i)) => {
            return Err(CliError::runtime(format!(
                "halted after iteration {i}; restart files are in {}",
                ckpt.display()
            )))
        }
        Err(e @ SamplerError::Settings(_)) => return Err(CliError::config(e.to_string())),
        Err(e) => return Err(CliError::runtime(e.to_string())),
    };
    store.save(&out)?;
    if let RunStatus::Failed { reason } = &store.status {
        return Err(CliError::runtime(format!("{}: {reason}", config.id)));
    }
    write_run_diagnostics(&out, &net, &store, &data, a.sampling.no_ppc)?;
    if ckpt.exists() {
        fs::remove_dir_all(&ckpt)?;
    }
    eprintln!(
        "{}: {} iterations x {} chains in {:.1} s; outputs in {}",
        config.id,
        settings.iterations,
        settings.chains,
        store.timing.total_seconds,
        out.display()
    );
    Ok(())
}

fn write_run_diagnostics(
    out: &Path,
    net: &crate::network::Network,
    store: &SampleStore,
    data: &LoadedData,
    no_ppc: bool,
) -> CliResult {
    let id = &store.model_id;
    let seed = store.settings.seed;
    let psrf: PsrfReport = diagnostics::psrf_report(store).map_err(|e| CliError::runtime(e.to_string()))?;
    fs::write(out.join("convergence.json"), stamp(id, seed, serde_json::to_value(&psrf).expect("json")))?;
    let mut s = header(id, seed) + "iteration,max_r50,max_r975\n";
    for p in &psrf.trajectory {
        let _ = writeln!(s, "{},{},{}", p.iteration, p.max_r50, p.max_r975);
    }
    fs::write(out.join("trajectory.csv"), s)?;
    let dic = diagnostics::dic(net, store, store.draw_count()).map_err(|e| CliError::runtime(e.to_string()))?;
    fs::write(out.join("dic.json"), stamp(id, seed, serde_json::to_value(dic).expect("json")))?;
    let mut s = header(id, seed) + "name,mean,sd,q025,q975\n";
    for p in store.monitored_indices() {
        if label_matches("Q[*", &store.names[p]) {
            let ps = experiment::ParamSummary::from_draws(&store.names[p], store.param(p));
            let _ = writeln!(s, "\"{}\",{},{},{},{}", ps.name, ps.mean, ps.sd, ps.q025, ps.q975);
        }
    }
    fs::write(out.join("flows.csv"), s)?;
    if !no_ppc {
        let mut obs = Vec::new();
        for lake in &data.manifest.lakes {
            for w in CLOSURE_WINDOWS {
                if (w as usize) <= data.table.span.months {
                    obs.push(
                        data.table
                            .delta_h(lake, Window::Rolling(w))
                            .map_err(|e| CliError::config(e.to_string()))?,
                    );
                }
            }
        }
        let c = diagnostics::closure(net, store, &obs, CLOSURE_LEVEL).map_err(|e| CliError::runtime(e.to_string()))?;
        let mut s = header(id, seed) + "lake,window,inside,denominator,percent\n";
        for r in &c.rows {
            let pct = r.percent.map(|p| p.to_string()).unwrap_or_default();
            let _ = writeln!(s, "{},{},{},{},{pct}", r.lake, r.window, r.inside, r.denominator);
        }
        fs::write(out.join("closure.csv"), s)?;
        let mut s = header(id, seed) + "lake,window,j,lower,median,upper,observed\n";
        for b in &c.bands {
            let obs = b.observed.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(s, "{},{},{},{},{},{},{obs}", b.lake, b.window, b.j, b.lower, b.median, b.upper);
        }
        fs::write(out.join("closure_bands.csv"), s)?;
    }
    Ok(())
}

pub fn cmd_experiment(a: &ExperimentArgs) -> CliResult {
    let design_file: Option<(DesignFile, PathBuf)> = match &a.design {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::config(format!("{}: {e}", p.display())))?;
            let d: DesignFile =
                serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", p.display())))?;
            Some((d, p.parent().map(Path::to_path_buf).unwrap_or_default()))
        }
        None if a.canonical => None,
        None => return Err(CliError::config("pass --canonical or --design")),
    };
    let manifest_path = match (&a.manifest, &design_file) {
        (Some(m), _) => m.clone(),
        (None, Some((d, dir))) => match &d.data {
            Some(p) => dir.join(p),
            None => return Err(CliError::config("the design names no data; pass --manifest")),
        },
        (None, None) => return Err(CliError::config("pass --manifest")),
    };
    let (man, base) = RunManifest::read(&manifest_path)?;
    let out = a
        .sampling
        .out
        .clone()
        .or_else(|| man.out.as_ref().map(|o| base.join(o)))
        .unwrap_or_else(|| PathBuf::from("experiment"));
    let seed_default = man.seed;
    let data = man.load(&base)?;
    for w in &data.warnings {
        eprintln!("warning: {w}");
    }
    let settings = settings_from(data.manifest.settings.as_ref(), &a.sampling, seed_default)?;
    let lakes = data.manifest.lakes.clone();
    let mut design = match design_file {
        Some((d, _)) => {
            let explicit = d.settings.is_some();
            let mut m = d.resolve(data.table.span, &lakes, settings.clone()).map_err(design_err)?;
            if explicit {
                // command-line flags still win over the file
                m.settings = settings_from(Some(&m.settings), &a.sampling, Some(m.settings.seed))?;
            }
            m
        }
        None => DesignMatrix::canonical(data.table.span, lakes, settings),
    };
    if !a.models.is_empty() {
        let ids: Vec<&str> = a.models.iter().map(String::as_str).collect();
        design = design.select(&ids).map_err(design_err)?;
    }
    design.validate().map_err(design_err)?;
    let pairs = comparison_pairs(&a.compare, &design)?;

    prepare_out(&out, a.sampling.force, a.sampling.resume)?;
    fs::create_dir_all(&out)?;
    let ckpt = out.join("checkpoints");
    let mut res = Resources::new(&data.table, &data.priors);
    res.skip_ppc = a.sampling.no_ppc;
    res.checkpoint_dir = Some(ckpt.clone());
    res.resume = a.sampling.resume;
    res.halt_after = a.sampling.halt_after;
    res.parallel_models = a.parallel_models;
    let report = match experiment::run_design(&design, &res) {
        Ok(r) => r,
        Err(ExperimentError::Interrupted { model, iteration }) => {
            return Err(CliError::runtime(format!(
                "halted in {model} after iteration {iteration}; resume with --resume"
            )))
        }
        Err(e) => return Err(CliError::runtime(e.to_string())),
    };
    report.write_dir(&out).map_err(|e| CliError::runtime(e.to_string()))?;
    for (b, c) in pairs {
        if !(report.model(&b).is_some_and(|m| m.is_complete()) && report.model(&c).is_some_and(|m| m.is_complete())) {
            eprintln!("warning: skipping comparison {b} vs {c}: a model did not complete");
            continue;
        }
        match compare(&report, &b, &c, &default_comparison_patterns()) {
            Ok(cmp) => fs::write(out.join(cmp.file_name()), cmp.to_csv(report.seed))?,
            Err(e) => eprintln!("warning: comparison {b} vs {c}: {e}"),
        }
    }
    if ckpt.exists() {
        fs::remove_dir_all(&ckpt)?;
    }
    let failed: Vec<&str> = report.models.iter().filter(|m| !m.is_complete()).map(|m| m.id.as_str()).collect();
    eprint!("{}", report.closure_wide_csv());
    eprintln!("{} models; outputs in {}", report.models.len(), out.display());
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::runtime(format!("models failed: {}", failed.join(", "))))
    }
}

fn design_err(e: ExperimentError) -> CliError {
    CliError::config(e.to_string())
}

fn comparison_pairs(requested: &[String], design: &DesignMatrix) -> CliResult<Vec<(String, String)>> {
    let ids = design.ids();
    if requested.is_empty() {
        return Ok(if ids.contains(&"PROT") && ids.contains(&"f12FF") {
            vec![("PROT".into(), "f12FF".into())]
        } else {
            Vec::new()
        });
    }
    requested
        .iter()
        .map(|r| {
            let (b, c) = r
                .split_once(':')
                .ok_or_else(|| CliError::config(format!("--compare expects baseline:candidate, got {r:?}")))?;
            for id in [b, c] {
                if !ids.contains(&id) {
                    return Err(CliError::config(format!("--compare names {id}, which is not in the design")));
                }
            }
            Ok((b.to_string(), c.to_string()))
        })
        .collect()
}

/// Writes a synthetic data set: series CSVs, `manifest.json`,
/// `priors.json` and the generating `truth.json`.
pub fn cmd_synth(a: &SynthArgs) -> CliResult {
    prepare_out(&a.out, a.force, false)?;
    let spec = SyntheticSpec::great_lakes(a.seed);
    let data = generate(&spec);
    let decls = data.write_csv(&a.out.join("data"))?;
    let priors = data.fit_priors().map_err(|e| CliError::runtime(e.to_string()))?;
    fs::write(a.out.join("priors.json"), priors.to_json() + "\n")?;
    let manifest = RunManifest {
        schema_version: SCHEMA_VERSION,
        lakes: data.lakes(),
        span: spec.analysis,
        series: decls
            .into_iter()
            .map(|mut d| {
                d.path = Path::new("data").join(&d.path);
                d
            })
            .collect(),
        priors: Some("priors.json".into()),
        rules: None,
        settings: None,
        out: None,
        seed: Some(experiment::DEFAULT_SEED),
    };
    fs::write(
        a.out.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).expect("json") + "\n",
    )?;
    let truth = serde_json::json!({
        "schema_version": SCHEMA_VERSION,
        "artifact_version": ARTIFACT_VERSION,
        "seed": a.seed,
        "spec": spec,
        "analysis_truth": data
            .truth
            .iter()
            .map(|((lake, name), _)| {
                let v: Vec<Option<f64>> = (1..=spec.analysis.months).map(|t| data.truth_at(lake, name, t)).collect();
                serde_json::json!({"lake": lake, "name": name, "values": v})
            })
            .collect::<Vec<_>>(),
    });
    fs::write(a.out.join("truth.json"), serde_json::to_string_pretty(&truth).expect("json") + "\n")?;
    eprintln!("wrote synthetic data (seed {}) to {}", a.seed, a.out.display());
    Ok(())
}

pub fn cmd_dot(a: &DotArgs) -> CliResult {
    let (man, base) = RunManifest::read(&a.manifest)?;
    let data = man.load(&base)?;
    let config = model_config(&a.model, &data)?;
    let net = build(&config, &data.priors, &data.table).map_err(|e| CliError::config(e.to_string()))?;
    print!("{}", net.to_dot());
    Ok(())
}
