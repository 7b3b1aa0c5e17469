//! Calendar-month empirical priors for the water-balance components.
//!
//! Each (lake, component, calendar month) cell is fitted from historical
//! monthly data: precipitation gets a Gamma prior (Thom's approximate
//! maximum-likelihood estimator), runoff a log-normal prior, and evaporation,
//! channel outflow and diversions normal priors.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{Component, ComponentSeries, YearMonth};
use crate::SCHEMA_VERSION;

#[derive(Debug, Error, PartialEq)]
pub enum PriorError {
    #[error("degenerate history: {0}")]
    Degenerate(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("{lake}/{component}/month {month}: {source}")]
    Cell {
        lake: String,
        component: Component,
        month: u32,
        source: Box<PriorError>,
    },
    #[error("no history for {lake}/{component}")]
    MissingHistory { lake: String, component: Component },
    #[error("component {0} has no prior family")]
    NoFamily(Component),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalPrior {
    pub mean: f64,
    pub precision: f64,
}

/// Shape/rate parameterisation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GammaPrior {
    pub shape: f64,
    pub rate: f64,
}

impl GammaPrior {
    pub fn mean(&self) -> f64 {
        self.shape / self.rate
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogNormalPrior {
    pub log_mean: f64,
    pub log_precision: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum Prior {
    Normal(NormalPrior),
    Gamma(GammaPrior),
    LogNormal(LogNormalPrior),
}

impl Prior {
    pub fn mean(&self) -> f64 {
        match self {
            Prior::Normal(p) => p.mean,
            Prior::Gamma(g) => g.mean(),
            Prior::LogNormal(l) => l.log_mean.exp(),
        }
    }

    pub fn family(&self) -> Family {
        match self {
            Prior::Normal(_) => Family::Normal,
            Prior::Gamma(_) => Family::Gamma,
            Prior::LogNormal(_) => Family::LogNormal,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Normal,
    Gamma,
    LogNormal,
}

/// Prior family used for each component.
pub fn family_for(component: Component) -> Option<Family> {
    match component {
        Component::P => Some(Family::Gamma),
        Component::R => Some(Family::LogNormal),
        Component::E | Component::Q | Component::D => Some(Family::Normal),
        Component::I | Component::H => None,
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance.
fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

fn all_equal(xs: &[f64]) -> bool {
    xs.windows(2).all(|w| w[0] == w[1])
}

pub fn fit_normal(history: &[f64], precision_scale: f64) -> Result<NormalPrior, PriorError> {
    if history.len() < 2 {
        return Err(PriorError::Degenerate(format!("{} value(s), need at least 2", history.len())));
    }
    if all_equal(history) {
        return Err(PriorError::Degenerate("zero variance".into()));
    }
    let var = variance(history);
    Ok(NormalPrior {
        mean: mean(history),
        precision: precision_scale / var,
    })
}

/// Thom (1958) Gamma fit.
pub fn fit_gamma_thom(history: &[f64]) -> Result<GammaPrior, PriorError> {
    if let Some(x) = history.iter().find(|x| **x <= 0.0 || !x.is_finite()) {
        return Err(PriorError::Domain(format!("gamma fit needs positive values, found {x}")));
    }
    if history.len() < 2 || all_equal(history) {
        return Err(PriorError::Degenerate("fewer than 2 distinct values".into()));
    }
    let m = mean(history);
    let mean_log = history.iter().map(|x| x.ln()).sum::<f64>() / history.len() as f64;
    let phi = m.ln() - mean_log;
    if phi <= 0.0 {
        return Err(PriorError::Degenerate(format!("log correction {phi} <= 0")));
    }
    let shape = (1.0 + (1.0 + 4.0 * phi / 3.0).sqrt()) / (4.0 * phi);
    Ok(GammaPrior {
        shape,
        rate: shape / m,
    })
}

pub fn fit_lognormal(history: &[f64]) -> Result<LogNormalPrior, PriorError> {
    if let Some(x) = history.iter().find(|x| **x <= 0.0 || !x.is_finite()) {
        return Err(PriorError::Domain(format!("log-normal fit needs positive values, found {x}")));
    }
    let logs: Vec<f64> = history.iter().map(|x| x.ln()).collect();
    if logs.len() < 2 || all_equal(&logs) {
        return Err(PriorError::Degenerate("zero log-variance".into()));
    }
    Ok(LogNormalPrior {
        log_mean: mean(&logs),
        log_precision: 1.0 / variance(&logs),
    })
}

/// Fitting rules: which period of history to use and how much to relax
/// each normal prior's precision.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitRules {
    #[serde(default)]
    pub schema_version: u32,
    /// Inclusive period; `None` uses the whole record.
    #[serde(default)]
    pub period: Option<(YearMonth, YearMonth)>,
    /// Multiplier applied to fitted normal precisions.
    #[serde(default = "default_scales")]
    pub precision_scale: BTreeMap<Component, f64>,
    /// Minimum count per calendar month below which a warning is issued.
    #[serde(default = "default_min_points")]
    pub min_points: usize,
}

fn default_scales() -> BTreeMap<Component, f64> {
    [(Component::E, 0.5), (Component::Q, 0.5), (Component::D, 1.0)].into_iter().collect()
}

fn default_min_points() -> usize {
    10
}

impl Default for FitRules {
    fn default() -> Self {
        FitRules {
            schema_version: SCHEMA_VERSION,
            period: Some((YearMonth::new(1950, 1), YearMonth::new(2004, 12))),
            precision_scale: default_scales(),
            min_points: default_min_points(),
        }
    }
}

impl FitRules {
    pub fn scale(&self, c: Component) -> f64 {
        self.precision_scale.get(&c).copied().unwrap_or(1.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorEntry {
    pub lake: String,
    pub component: Component,
    pub month: u32,
    #[serde(flatten)]
    pub prior: Prior,
}

/// Fitted priors keyed by (lake, component, calendar month).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PriorSpec {
    cells: BTreeMap<(String, Component, u32), Prior>,
}

#[derive(Serialize, Deserialize)]
struct PriorSpecFile {
    schema_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    artifact_version: Option<String>,
    entries: Vec<PriorEntry>,
}

impl PriorSpec {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, lake: &str, component: Component, month: u32, prior: Prior) {
        self.cells.insert((lake.to_string(), component, month), prior);
    }

    pub fn get(&self, lake: &str, component: Component, month: u32) -> Option<&Prior> {
        self.cells.get(&(lake.to_string(), component, month))
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = PriorEntry> + '_ {
        self.cells.iter().map(|((lake, component, month), prior)| PriorEntry {
            lake: lake.clone(),
            component: *component,
            month: *month,
            prior: *prior,
        })
    }

    pub fn lakes(&self) -> Vec<String> {
        let mut v: Vec<String> = self.cells.keys().map(|k| k.0.clone()).collect();
        v.dedup();
        v
    }

    pub fn to_json(&self) -> String {
        let file = PriorSpecFile {
            schema_version: SCHEMA_VERSION,
            artifact_version: Some(crate::ARTIFACT_VERSION.to_string()),
            entries: self.entries().collect(),
        };
        serde_json::to_string_pretty(&file).expect("prior spec serialises")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        let file: PriorSpecFile = serde_json::from_str(text)?;
        let mut spec = PriorSpec::new();
        for e in file.entries {
            spec.insert(&e.lake, e.component, e.month, e.prior);
        }
        Ok(spec)
    }
}

/// Result of [`fit_all`], carrying non-fatal warnings.
#[derive(Debug)]
pub struct FitOutcome {
    pub spec: PriorSpec,
    pub warnings: Vec<String>,
}

/// Fits 12 calendar-month priors for every (lake, component) in `history`.
/// When a (lake, component) has several sources, the lowest source index is
/// used.
pub fn fit_all(history: &[ComponentSeries], rules: &FitRules) -> Result<FitOutcome, PriorError> {
    let mut chosen: BTreeMap<(String, Component), &ComponentSeries> = BTreeMap::new();
    for s in history {
        if family_for(s.component).is_none() {
            continue;
        }
        let key = (s.lake.clone(), s.component);
        match chosen.get(&key) {
            Some(prev) if prev.source <= s.source => {}
            _ => {
                chosen.insert(key, s);
            }
        }
    }
    let mut spec = PriorSpec::new();
    let mut warnings = Vec::new();
    for ((lake, component), series) in chosen {
        let series = match rules.period {
            Some((from, to)) => series.window(from, to),
            None => series.clone(),
        };
        for month in 1..=12u32 {
            let values = series.calendar_values(month);
            if values.len() < rules.min_points {
                warnings.push(format!(
                    "{lake}/{component}/month {month}: only {} historical values",
                    values.len()
                ));
            }
            let fitted = match family_for(component) {
                Some(Family::Gamma) => fit_gamma_thom(&values).map(Prior::Gamma),
                Some(Family::LogNormal) => fit_lognormal(&values).map(Prior::LogNormal),
                Some(Family::Normal) => fit_normal(&values, rules.scale(component)).map(Prior::Normal),
                None => Err(PriorError::NoFamily(component)),
            };
            let prior = fitted.map_err(|e| PriorError::Cell {
                lake: lake.clone(),
                component,
                month,
                source: Box::new(e),
            })?;
            spec.insert(&lake, component, month, prior);
        }
    }
    Ok(FitOutcome { spec, warnings })
}
