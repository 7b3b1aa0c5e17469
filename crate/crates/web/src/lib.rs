//! WebAssembly bindings for the browser demo in `www/`. Every entry point
//! takes plain numbers or text and returns a JSON string.

use l2swbm::experiment::{run_model, Resources};
use l2swbm::ingest::{AnalysisSpan, YearMonth};
use l2swbm::network::{Density, LinExpr, ModelConfig, NetworkBuilder, NodeClass, NodeId, Precision};
use l2swbm::priors::fit_gamma_thom;
use l2swbm::sampler::{run, SamplerSettings};
use l2swbm::synthetic::{generate, SyntheticSpec};
use serde_json::json;
use wasm_bindgen::prelude::*;

fn err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

/// Gamma prior fitted to whitespace or comma separated monthly totals.
#[wasm_bindgen]
pub fn fit_gamma(history: &str) -> Result<String, JsError> {
    let values = history
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>().map_err(|_| err(format!("not a number: {s}"))))
        .collect::<Result<Vec<f64>, JsError>>()?;
    let g = fit_gamma_thom(&values).map_err(err)?;
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    Ok(json!({ "shape": g.shape, "rate": g.rate, "prior_mean": g.mean(), "sample_mean": mean, "n": values.len() }).to_string())
}

/// Posterior draws of `x ~ N(0, prior_precision)` given one `y ~ N(x, 1)`,
/// binned for plotting.
#[wasm_bindgen]
pub fn toy_posterior(y: f64, prior_precision: f64, iterations: usize, bins: usize, seed: u64) -> Result<String, JsError> {
    let mut b = NetworkBuilder::new();
    let x = b.stochastic(
        NodeId::Named("x".into()),
        NodeClass::Component,
        Density::Normal { mean: LinExpr::constant(0.0), precision: Precision::Const(prior_precision) },
    );
    b.observed(
        NodeId::Named("y".into()),
        Density::Normal { mean: LinExpr::node(x), precision: Precision::Const(1.0) },
        Some(y),
    );
    let net = b.finish(vec![], None).map_err(err)?;
    let burn = iterations / 2;
    let store = run(&net, &SamplerSettings::new(iterations, 1, burn, iterations - burn, seed)).map_err(err)?;
    let draws = store.param(0);
    let n = draws.len() as f64;
    let mean = draws.iter().sum::<f64>() / n;
    let sd = (draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let (lo, hi) = draws.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &d| (a.min(d), b.max(d)));
    let bins = bins.max(1);
    let width = ((hi - lo) / bins as f64).max(f64::MIN_POSITIVE);
    let mut counts = vec![0usize; bins];
    for &d in draws {
        counts[(((d - lo) / width) as usize).min(bins - 1)] += 1;
    }
    let post_precision = prior_precision + 1.0;
    Ok(json!({
        "mean": mean,
        "sd": sd,
        "exact_mean": y / post_precision,
        "exact_sd": post_precision.powf(-0.5),
        "lo": lo,
        "width": width,
        "counts": counts,
    })
    .to_string())
}

/// Fits one model to a freshly simulated two-lake system and reports
/// posterior-predictive closure per lake and window.
#[wasm_bindgen]
pub fn closure_demo(model: &str, months: usize, iterations: usize, seed: u64) -> Result<String, JsError> {
    let mut spec = SyntheticSpec::great_lakes(seed);
    spec.analysis = AnalysisSpan::new(YearMonth::new(2005, 1), months);
    let data = generate(&spec);
    let table = data.table();
    let priors = data.fit_priors().map_err(err)?;
    let config = ModelConfig::from_id(model, table.span, data.lakes()).map_err(err)?;
    let retained = (iterations / 4).clamp(1, 500);
    let settings = SamplerSettings::new(iterations, 2, iterations / 2, retained, seed);
    let report = run_model(&config, &settings, &Resources::new(&table, &priors)).map_err(err)?;
    let rows = report.closure.map(|c| c.rows).unwrap_or_default();
    Ok(json!({ "model": model, "status": report.status, "closure": rows, "dic": report.dic }).to_string())
}
