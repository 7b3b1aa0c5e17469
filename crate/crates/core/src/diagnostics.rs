//! Convergence (PSRF), model comparison (DIC) and posterior-predictive
//! closure of the storage-change observations.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, FisherSnedecor};
use thiserror::Error;

use crate::ingest::{DeltaHObservations, Window};
use crate::network::{Network, NodeId};
use crate::sampler::SampleStore;

/// R-hat above which a parameter is reported as not converged.
pub const PSRF_THRESHOLD: f64 = 1.1;
/// Posterior-predictive simulation windows, in months.
pub const CLOSURE_WINDOWS: [u32; 3] = [1, 12, 60];

#[derive(Debug, Error, PartialEq)]
pub enum DiagnosticsError {
    #[error("PSRF needs at least 2 chains, got {0}")]
    InsufficientChains(usize),
    #[error("PSRF needs at least 10 draws per chain, got {0}")]
    TooFewDraws(usize),
    #[error("chains have unequal lengths")]
    Ragged,
    #[error("window error: {0}")]
    Window(String),
    #[error("internal error: {0}")]
    Internal(String),
}

/// Streaming mean and sum of squared deviations (Welford).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub n: u64,
    pub mean: f64,
    pub m2: f64,
}

impl Moments {
    #[inline]
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }

    pub fn from_slice(xs: &[f64]) -> Self {
        let mut m = Moments::default();
        for &x in xs {
            m.push(x);
        }
        m
    }

    /// Unbiased variance.
    pub fn variance(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            self.m2 / (self.n - 1) as f64
        }
    }
}

/// Point estimate and upper 97.5% bound of the scale reduction factor.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Psrf {
    pub r50: f64,
    pub r975: f64,
    pub degenerate: bool,
}

fn var(xs: &[f64]) -> f64 {
    Moments::from_slice(xs).variance()
}

fn cov(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / (n - 1.0)
}

/// Gelman-Rubin diagnostic from per-chain moments, with the degrees of
/// freedom correction and the F-based upper bound.
pub fn psrf_from_moments(chains: &[Moments]) -> Result<Psrf, DiagnosticsError> {
    let m = chains.len();
    if m < 2 {
        return Err(DiagnosticsError::InsufficientChains(m));
    }
    let n = chains[0].n;
    if chains.iter().any(|c| c.n != n) {
        return Err(DiagnosticsError::Ragged);
    }
    if n < 10 {
        return Err(DiagnosticsError::TooFewDraws(n as usize));
    }
    let nf = n as f64;
    let mf = m as f64;
    let s2: Vec<f64> = chains.iter().map(Moments::variance).collect();
    let xbar: Vec<f64> = chains.iter().map(|c| c.mean).collect();
    let w = s2.iter().sum::<f64>() / mf;
    if s2.iter().all(|v| *v == 0.0) {
        return Ok(Psrf {
            r50: 1.0,
            r975: 1.0,
            degenerate: true,
        });
    }
    let b = nf * var(&xbar);
    let muhat = xbar.iter().sum::<f64>() / mf;
    let var_w = var(&s2) / mf;
    let var_b = 2.0 * b * b / (mf - 1.0);
    let xbar2: Vec<f64> = xbar.iter().map(|x| x * x).collect();
    let cov_wb = (nf / mf) * (cov(&s2, &xbar2) - 2.0 * muhat * cov(&s2, &xbar));
    let v = (nf - 1.0) * w / nf + (1.0 + 1.0 / mf) * b / nf;
    let var_v = ((nf - 1.0).powi(2) * var_w
        + (1.0 + 1.0 / mf).powi(2) * var_b
        + 2.0 * (nf - 1.0) * (1.0 + 1.0 / mf) * cov_wb)
        / (nf * nf);
    let df_adj = if var_v > 0.0 {
        let df_v = 2.0 * v * v / var_v;
        (df_v + 3.0) / (df_v + 1.0)
    } else {
        1.0
    };
    let b_df = mf - 1.0;
    let w_df = if var_w > 0.0 { 2.0 * w * w / var_w } else { f64::INFINITY };
    let r2_fixed = (nf - 1.0) / nf;
    let r2_random = (1.0 + 1.0 / mf) * (1.0 / nf) * (b / w);
    let q = if w_df.is_finite() && w_df < 1e7 {
        FisherSnedecor::new(b_df, w_df)
            .map_err(|e| DiagnosticsError::Internal(e.to_string()))?
            .inverse_cdf(0.975)
    } else {
        ChiSquared::new(b_df)
            .map_err(|e| DiagnosticsError::Internal(e.to_string()))?
            .inverse_cdf(0.975)
            / b_df
    };
    Ok(Psrf {
        r50: (df_adj * (r2_fixed + r2_random)).sqrt(),
        r975: (df_adj * (r2_fixed + q * r2_random)).sqrt(),
        degenerate: false,
    })
}

/// PSRF of one parameter given its draws per chain.
pub fn psrf(chains: &[&[f64]]) -> Result<Psrf, DiagnosticsError> {
    let m: Vec<Moments> = chains.iter().map(|c| Moments::from_slice(c)).collect();
    psrf_from_moments(&m)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamPsrf {
    pub name: String,
    pub r50: f64,
    pub r975: f64,
    pub degenerate: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub iteration: usize,
    pub max_r50: f64,
    pub max_r975: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PsrfReport {
    pub params: Vec<ParamPsrf>,
    pub max_r50: f64,
    pub max_r975: f64,
    /// Parameters with R-hat above [`PSRF_THRESHOLD`].
    pub flagged: Vec<String>,
    pub trajectory: Vec<TrajectoryPoint>,
    pub notes: Vec<String>,
}

/// PSRF of every monitored parameter in a store, plus the convergence
/// trajectory accumulated during the run. Parameters that are constant
/// (degenerate) report 1.0.
pub fn psrf_report(store: &SampleStore) -> Result<PsrfReport, DiagnosticsError> {
    let mut params = Vec::new();
    for p in store.monitored_indices() {
        let chains: Vec<&[f64]> = (0..store.chains).map(|c| store.chain(p, c)).collect();
        let r = psrf(&chains)?;
        params.push(ParamPsrf {
            name: store.names[p].clone(),
            r50: r.r50,
            r975: r.r975,
            degenerate: r.degenerate,
        });
    }
    let (trajectory, notes) = psrf_trajectory(store);
    Ok(summarise(params, trajectory, notes))
}

fn summarise(params: Vec<ParamPsrf>, trajectory: Vec<TrajectoryPoint>, notes: Vec<String>) -> PsrfReport {
    let max_r50 = params.iter().map(|p| p.r50).fold(f64::NEG_INFINITY, f64::max);
    let max_r975 = params.iter().map(|p| p.r975).fold(f64::NEG_INFINITY, f64::max);
    let flagged = params
        .iter()
        .filter(|p| p.r50 > PSRF_THRESHOLD)
        .map(|p| p.name.clone())
        .collect();
    PsrfReport {
        params,
        max_r50,
        max_r975,
        flagged,
        trajectory,
        notes,
    }
}

/// `(iteration, max R50, max R97.5)` at each convergence checkpoint of a
/// run. Checkpoints are evaluated on the latter half of the iterations so
/// far, thinned to the configured number of draws per chain.
pub fn psrf_trajectory(store: &SampleStore) -> (Vec<TrajectoryPoint>, Vec<String>) {
    let mut notes = store.trajectory_notes.clone();
    let mut out = Vec::new();
    for t in &store.trajectory {
        let cp = t.checkpoint;
        let np = store.trajectory_params.len();
        let mut r50 = f64::NEG_INFINITY;
        let mut r975 = f64::NEG_INFINITY;
        let mut ok = true;
        for j in 0..np {
            let m: Vec<Moments> = t.moments.iter().map(|c| c[j]).collect();
            match psrf_from_moments(&m) {
                Ok(r) => {
                    r50 = r50.max(r.r50);
                    r975 = r975.max(r.r975);
                }
                Err(e) => {
                    notes.push(format!("checkpoint {}: {e}", cp.iteration));
                    ok = false;
                    break;
                }
            }
        }
        if ok && np > 0 {
            out.push(TrajectoryPoint {
                iteration: cp.iteration,
                max_r50: r50,
                max_r975: r975,
            });
        }
    }
    (out, notes)
}

/// Offline equivalent of the in-run trajectory from complete chain
/// histories `[chain][iteration-1]` of each parameter.
pub fn psrf_trajectory_from_history(
    histories: &[Vec<Vec<f64>>],
    interval: usize,
    retained: usize,
    min_draws: usize,
) -> Vec<TrajectoryPoint> {
    let len = histories.first().and_then(|h| h.first()).map_or(0, Vec::len);
    let mut out = Vec::new();
    let mut k = interval;
    while interval > 0 && k <= len {
        if k >= min_draws {
            let half = k - k / 2;
            let n = retained.min(half);
            let stride = half / n;
            let mut r50 = f64::NEG_INFINITY;
            let mut r975 = f64::NEG_INFINITY;
            for param in histories {
                let chains: Vec<Vec<f64>> = param
                    .iter()
                    .map(|c| (0..n).rev().map(|r| c[k - stride * r - 1]).collect())
                    .collect();
                let refs: Vec<&[f64]> = chains.iter().map(Vec::as_slice).collect();
                if let Ok(p) = psrf(&refs) {
                    r50 = r50.max(p.r50);
                    r975 = r975.max(p.r975);
                }
            }
            out.push(TrajectoryPoint {
                iteration: k,
                max_r50: r50,
                max_r975: r975,
            });
        }
        k += interval;
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DicScore {
    pub mean_deviance: f64,
    pub p_d: f64,
    pub dic: f64,
    pub draws: usize,
}

/// Deviance information criterion over `draws` evenly spaced pooled
/// retained states. Means are accumulated as offsets from the first
/// selected draw so that identical draws give exactly zero `pD`.
pub fn dic(network: &Network, store: &SampleStore, draws: usize) -> Result<DicScore, DiagnosticsError> {
    let total = store.draw_count();
    if total == 0 || draws == 0 {
        return Err(DiagnosticsError::Internal("no draws".into()));
    }
    if store.slots != network.stochastic_count() {
        return Err(DiagnosticsError::Internal("store does not match network".into()));
    }
    let k = draws.min(total);
    let picks: Vec<usize> = (0..k).map(|i| i * total / k).collect();
    let first = store.state(picks[0]);
    let d0 = -2.0 * network.log_likelihood(&first);
    let mut offset = vec![0.0; first.len()];
    let mut dsum = 0.0;
    for &i in &picks {
        let x = store.state(i);
        dsum += -2.0 * network.log_likelihood(&x) - d0;
        for (o, (v, f)) in offset.iter_mut().zip(x.iter().zip(&first)) {
            *o += v - f;
        }
    }
    let kf = k as f64;
    let mean_state: Vec<f64> = first.iter().zip(&offset).map(|(f, o)| f + o / kf).collect();
    let d_bar = d0 + dsum / kf;
    let d_hat = -2.0 * network.log_likelihood(&mean_state);
    if !d_hat.is_finite() {
        return Err(DiagnosticsError::Internal("deviance at posterior mean is not finite".into()));
    }
    let p_d = d_bar - d_hat;
    Ok(DicScore {
        mean_deviance: d_bar,
        p_d,
        dic: d_bar + p_d,
        draws: k,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClosureRow {
    pub lake: String,
    pub window: u32,
    pub inside: usize,
    /// Number of observed changes tested (`T - window + 1` when complete).
    pub denominator: usize,
    /// `None` when every observation in the window is masked.
    pub percent: Option<f64>,
}

/// Posterior-predictive band for one observed change in storage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClosureBand {
    pub lake: String,
    pub window: u32,
    pub j: usize,
    pub lower: f64,
    pub median: f64,
    pub upper: f64,
    pub observed: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClosureReport {
    pub level: f64,
    pub rows: Vec<ClosureRow>,
    pub bands: Vec<ClosureBand>,
}

impl ClosureReport {
    pub fn percent(&self, lake: &str, window: u32) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.lake == lake && r.window == window)
            .and_then(|r| r.percent)
    }
}

/// Empirical quantile with linear interpolation between order statistics.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Simulated storage changes per draw: `sims[j][k]` for window start `j`
/// and pooled draw `k`.
fn simulate_windows(
    network: &Network,
    store: &SampleStore,
    lake: usize,
    windows: &[u32],
    seed: u64,
) -> Result<Vec<Vec<Vec<f64>>>, DiagnosticsError> {
    let t_max = network
        .config
        .as_ref()
        .map(|c| c.analysis_span.months)
        .ok_or_else(|| DiagnosticsError::Internal("network has no configuration".into()))?;
    let balance: Vec<usize> = (1..=t_max)
        .map(|t| network.node(&NodeId::Balance { lake, t }))
        .collect::<Option<_>>()
        .ok_or_else(|| DiagnosticsError::Internal("balance nodes missing".into()))?;
    let tau = network
        .slot_of_id(&NodeId::DeltaHPrecision { lake })
        .ok_or_else(|| DiagnosticsError::Internal("storage precision missing".into()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1_000 + lake as u64);
    let n = store.draw_count();
    let mut sims: Vec<Vec<Vec<f64>>> = windows
        .iter()
        .map(|w| vec![Vec::with_capacity(n); t_max + 1 - *w as usize])
        .collect();
    let mut prefix = vec![0.0; t_max + 1];
    for k in 0..n {
        let x = store.state(k);
        for t in 1..=t_max {
            prefix[t] = prefix[t - 1] + network.value_of(balance[t - 1], &x).unwrap_or(f64::NAN);
        }
        let sd = 1.0 / x[tau].sqrt();
        for (wi, &w) in windows.iter().enumerate() {
            for j in 1..=t_max + 1 - w as usize {
                let z: f64 = StandardNormal.sample(&mut rng);
                sims[wi][j - 1].push(prefix[j + w as usize - 1] - prefix[j - 1] + sd * z);
            }
        }
    }
    Ok(sims)
}

/// Share of observed storage changes over each window that fall inside the
/// central `level` posterior-predictive interval.
pub fn closure(
    network: &Network,
    store: &SampleStore,
    observations: &[DeltaHObservations],
    level: f64,
) -> Result<ClosureReport, DiagnosticsError> {
    let t_max = network
        .config
        .as_ref()
        .map(|c| c.analysis_span.months)
        .ok_or_else(|| DiagnosticsError::Internal("network has no configuration".into()))?;
    let mut windows: Vec<u32> = Vec::new();
    for o in observations {
        let Window::Rolling(w) = o.window else {
            return Err(DiagnosticsError::Window("closure windows must be rolling".into()));
        };
        if w == 0 || w as usize > t_max {
            return Err(DiagnosticsError::Window(format!("window {w} exceeds T = {t_max}")));
        }
        if o.values.len() != t_max + 1 - w as usize {
            return Err(DiagnosticsError::Window(format!("window {w}: {} observations", o.values.len())));
        }
        if !windows.contains(&w) {
            windows.push(w);
        }
    }
    let lo_p = (1.0 - level) / 2.0;
    let hi_p = 1.0 - lo_p;
    let mut rows = Vec::new();
    let mut bands = Vec::new();
    for (l, lake) in network.lakes.iter().enumerate() {
        let mine: Vec<&DeltaHObservations> = observations.iter().filter(|o| o.lake == *lake).collect();
        if mine.is_empty() {
            continue;
        }
        let sims = simulate_windows(network, store, l, &windows, store.settings.seed)?;
        for o in mine {
            let Window::Rolling(w) = o.window else { unreachable!() };
            let wi = windows.iter().position(|x| *x == w).unwrap();
            let mut inside = 0;
            let mut denominator = 0;
            for (j, obs) in o.values.iter().enumerate() {
                let mut s = sims[wi][j].clone();
                s.sort_by(f64::total_cmp);
                let (lower, median, upper) = (quantile_sorted(&s, lo_p), quantile_sorted(&s, 0.5), quantile_sorted(&s, hi_p));
                if let Some(y) = obs {
                    denominator += 1;
                    if (lower..=upper).contains(y) {
                        inside += 1;
                    }
                }
                bands.push(ClosureBand {
                    lake: lake.clone(),
                    window: w,
                    j: j + 1,
                    lower,
                    median,
                    upper,
                    observed: *obs,
                });
            }
            rows.push(ClosureRow {
                lake: lake.clone(),
                window: w,
                inside,
                denominator,
                percent: (denominator > 0).then(|| 100.0 * inside as f64 / denominator as f64),
            });
        }
    }
    Ok(ClosureReport { level, rows, bands })
}
