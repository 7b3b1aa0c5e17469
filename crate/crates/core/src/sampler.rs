//! Multi-chain MCMC over a [`Network`].
//!
//! Each sweep visits every stochastic node once in the network's update
//! plan: conjugate nodes get exact Normal or Gamma draws, the rest a
//! stepping-out slice update. Factor means are cached per chain and patched
//! after every node update, then rebuilt from scratch at the start of the
//! next sweep so that a chain's trajectory depends only on its state and RNG
//! position (which is what makes checkpoint resume exact).

use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use web_time::Instant;

use crate::diagnostics::Moments;
use crate::ingest::Component;
use crate::blocks::{BlockMove, LineDensity};
use crate::network::{
    label_matches, CachedMeans, LatentState, Network, NodeClass, NodeId, NodeIdx, SliceTerm, UpdateKind,
};

pub const DEFAULT_SLICE_WIDTH: f64 = 20.0;
pub const DEFAULT_SLICE_MAX_STEPS: usize = 50;
/// Factor applied to the slice width on the single retry after the
/// stepping-out budget is exhausted.
const SLICE_WIDEN_FACTOR: f64 = 10.0;
const SHRINK_LIMIT: usize = 500;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SliceError {
    #[error("slice sampler started at a point with zero density ({0})")]
    Precondition(f64),
    #[error("stepping out did not bracket the slice after widening to {width}")]
    Exhausted { width: f64 },
    #[error("shrinkage failed to find a point in the slice")]
    Shrink,
}

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("invalid sampler settings: {0}")]
    Settings(String),
    #[error("slice failure at node {node}, iteration {iteration}: {source}")]
    Slice {
        node: String,
        iteration: usize,
        source: SliceError,
    },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("run halted after iteration {0}")]
    Halted(usize),
    #[error(transparent)]
    Io(#[from] io::Error),
}

fn default_width() -> f64 {
    DEFAULT_SLICE_WIDTH
}
fn default_steps() -> usize {
    DEFAULT_SLICE_MAX_STEPS
}
fn default_trajectory_interval() -> usize {
    10_000
}
fn default_trajectory_retained() -> usize {
    1_000
}
fn default_trajectory_min() -> usize {
    2_000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerSettings {
    pub iterations: usize,
    pub chains: usize,
    pub burn_in: usize,
    pub retained_per_chain: usize,
    pub seed: u64,
    #[serde(default = "default_width")]
    pub slice_width: f64,
    #[serde(default = "default_steps")]
    pub slice_max_steps: usize,
    /// Iterations between restart files; 0 disables checkpointing.
    #[serde(default)]
    pub checkpoint_interval: usize,
    /// Iterations between convergence checkpoints.
    #[serde(default = "default_trajectory_interval")]
    pub trajectory_interval: usize,
    /// Draws per chain kept at each convergence checkpoint.
    #[serde(default = "default_trajectory_retained")]
    pub trajectory_retained: usize,
    /// Convergence checkpoints with fewer iterations are skipped.
    #[serde(default = "default_trajectory_min")]
    pub trajectory_min_draws: usize,
}

impl SamplerSettings {
    pub fn new(iterations: usize, chains: usize, burn_in: usize, retained_per_chain: usize, seed: u64) -> Self {
        SamplerSettings {
            iterations,
            chains,
            burn_in,
            retained_per_chain,
            seed,
            slice_width: DEFAULT_SLICE_WIDTH,
            slice_max_steps: DEFAULT_SLICE_MAX_STEPS,
            checkpoint_interval: 0,
            trajectory_interval: default_trajectory_interval(),
            trajectory_retained: default_trajectory_retained(),
            trajectory_min_draws: default_trajectory_min(),
        }
    }

    /// 250,000 iterations, 3 chains, half burn-in, 1,000 draws per chain.
    pub fn full_scale(seed: u64) -> Self {
        Self::new(250_000, 3, 125_000, 1_000, seed)
    }

    /// Desk-scale preset: 50,000 iterations, 3 chains, half burn-in.
    pub fn reduced(seed: u64) -> Self {
        Self::new(50_000, 3, 25_000, 1_000, seed)
    }

    pub fn validate(&self) -> Result<(), SamplerError> {
        let bad = |m: String| Err(SamplerError::Settings(m));
        if self.iterations == 0 || self.chains == 0 || self.retained_per_chain == 0 {
            return bad("iterations, chains and retained draws must be positive".into());
        }
        if self.burn_in >= self.iterations {
            return bad(format!("burn-in {} must be below K = {}", self.burn_in, self.iterations));
        }
        if self.retained_per_chain > self.iterations - self.burn_in {
            return bad(format!(
                "cannot retain {} draws from {} post burn-in iterations",
                self.retained_per_chain,
                self.iterations - self.burn_in
            ));
        }
        if !(self.slice_width > 0.0 && self.slice_width.is_finite()) || self.slice_max_steps == 0 {
            return bad("slice width and step budget must be positive".into());
        }
        if self.trajectory_retained == 0 {
            return bad("trajectory_retained must be positive".into());
        }
        Ok(())
    }

    /// Thinning stride, counting back from iteration K.
    pub fn stride(&self) -> usize {
        (self.iterations - self.burn_in) / self.retained_per_chain
    }

    /// Iteration number (1-based) of each retained draw, ascending.
    pub fn retained_iterations(&self) -> Vec<usize> {
        let s = self.stride();
        let r = self.retained_per_chain;
        (0..r).map(|k| self.iterations - s * (r - 1 - k)).collect()
    }

    pub fn tuning(&self) -> SliceTuning {
        SliceTuning {
            width: self.slice_width,
            max_steps: self.slice_max_steps,
        }
    }

    /// Convergence checkpoints `(k, stride, draws)`: the draws at
    /// `k - stride * r` for `r < draws`, i.e. the latter half of the first
    /// `k` iterations thinned evenly.
    pub fn trajectory_plan(&self) -> (Vec<TrajectoryCheckpoint>, Vec<String>) {
        let mut plan = Vec::new();
        let mut notes = Vec::new();
        if self.trajectory_interval == 0 {
            return (plan, notes);
        }
        let mut k = self.trajectory_interval;
        while k <= self.iterations {
            if k < self.trajectory_min_draws {
                notes.push(format!("checkpoint {k}: fewer than {} draws per chain, skipped", self.trajectory_min_draws));
            } else {
                let half = k - k / 2;
                let n = self.trajectory_retained.min(half);
                plan.push(TrajectoryCheckpoint {
                    iteration: k,
                    stride: half / n,
                    draws: n,
                });
            }
            k += self.trajectory_interval;
        }
        (plan, notes)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrajectoryCheckpoint {
    pub iteration: usize,
    pub stride: usize,
    pub draws: usize,
}

impl TrajectoryCheckpoint {
    #[inline]
    fn includes(&self, i: usize) -> bool {
        i <= self.iteration && (self.iteration - i) % self.stride == 0 && (self.iteration - i) / self.stride < self.draws
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SliceTuning {
    pub width: f64,
    pub max_steps: usize,
}

impl Default for SliceTuning {
    fn default() -> Self {
        SliceTuning {
            width: DEFAULT_SLICE_WIDTH,
            max_steps: DEFAULT_SLICE_MAX_STEPS,
        }
    }
}

/// Univariate slice sampler with stepping out and shrinkage.
pub fn slice_sample<F, R>(logdensity: F, current: f64, width: f64, max_steps: usize, rng: &mut R) -> Result<f64, SliceError>
where
    F: Fn(f64) -> f64,
    R: Rng + ?Sized,
{
    let f0 = logdensity(current);
    if !(f0 > f64::NEG_INFINITY) || f0.is_nan() {
        return Err(SliceError::Precondition(current));
    }
    let e: f64 = rand_distr::Exp1.sample(rng);
    let level = f0 - e;
    let u: f64 = rng.random();
    let mut lo = current - u * width;
    let mut hi = lo + width;
    let mut step = width;
    let mut bracketed = false;
    let mut f_lo = logdensity(lo);
    let mut f_hi = logdensity(hi);
    for _attempt in 0..2 {
        let mut left = 0;
        while left < max_steps && f_lo > level {
            lo -= step;
            f_lo = logdensity(lo);
            left += 1;
        }
        let mut right = 0;
        while right < max_steps && f_hi > level {
            hi += step;
            f_hi = logdensity(hi);
            right += 1;
        }
        if f_lo <= level && f_hi <= level {
            bracketed = true;
            break;
        }
        step *= SLICE_WIDEN_FACTOR;
    }
    if !bracketed {
        return Err(SliceError::Exhausted { width: step });
    }
    for _ in 0..SHRINK_LIMIT {
        let v: f64 = rng.random();
        let x = lo + v * (hi - lo);
        let fx = logdensity(x);
        if fx > level {
            return Ok(x);
        }
        if x < current {
            lo = x;
        } else {
            hi = x;
        }
    }
    Err(SliceError::Shrink)
}

const MEAN_REFRESH_INTERVAL: u64 = 64;
/// Joint moves run on every `BLOCK_INTERVAL`-th sweep.
const BLOCK_INTERVAL: u64 = 2;

/// Per-chain sweep workspace.
pub(crate) struct Sweeper {
    means: Vec<f64>,
    xe: Vec<f64>,
    scratch: Vec<SliceTerm>,
    sweeps: u64,
}

impl Sweeper {
    pub fn new(net: &Network) -> Self {
        Sweeper {
            means: vec![0.0; net.factor_count()],
            xe: net.extend_state(&vec![0.0; net.stochastic_count()]),
            scratch: Vec::new(),
            sweeps: 0,
        }
    }

    /// One systematic scan over the update plan. On a slice failure the
    /// node's label is returned with the error.
    pub fn sweep<R: Rng + ?Sized>(
        &mut self,
        net: &Network,
        x: &mut [f64],
        rng: &mut R,
        tuning: SliceTuning,
    ) -> Result<(), (NodeIdx, SliceError)> {
        let n = x.len();
        self.xe[..n].copy_from_slice(x);
        let xe = &mut self.xe;
        // the cached means are carried between sweeps by delta updates and
        // recomputed periodically to shed rounding drift
        if self.sweeps % MEAN_REFRESH_INTERVAL == 0 {
            for f in 0..self.means.len() {
                self.means[f] = net.factor_mean(f, xe);
            }
        }
        let with_blocks = self.sweeps % BLOCK_INTERVAL == 0;
        self.sweeps += 1;
        let mut result = Ok(());
        for &(slot, kind) in &net.update_plan {
            let old = xe[slot];
            let new = match kind {
                UpdateKind::ConjugateNormal => {
                    let (m, p) = net.normal_conditional(slot, xe, &CachedMeans(&self.means));
                    let z: f64 = StandardNormal.sample(rng);
                    m + z / p.sqrt()
                }
                UpdateKind::ConjugateGamma => {
                    let (a, b) = net.gamma_conditional(slot, xe, &CachedMeans(&self.means));
                    let g = Gamma::new(a, 1.0 / b).expect("positive gamma parameters");
                    let v: f64 = g.sample(rng);
                    v.max(f64::MIN_POSITIVE)
                }
                UpdateKind::Slice => {
                    let d = net.slice_density(slot, xe, &CachedMeans(&self.means), &mut self.scratch);
                    match slice_sample(|v| d.log_density(v), old, tuning.width, tuning.max_steps, rng) {
                        Ok(v) => v,
                        Err(e) => {
                            result = Err((net.slot_node(slot), e));
                            break;
                        }
                    }
                }
            };
            let delta = new - old;
            xe[slot] = new;
            if delta != 0.0 {
                for &(f, a) in net.mean_children(slot) {
                    self.means[f] += a * delta;
                }
            }
        }
        if result.is_ok() && with_blocks {
            for mv in &net.blocks {
                self.block_step(mv, rng);
            }
        }
        x.copy_from_slice(&self.xe[..n]);
        result
    }
}

impl Sweeper {
    /// One draw of the step length along a fixed direction.
    fn block_step<R: Rng + ?Sized>(&mut self, mv: &BlockMove, rng: &mut R) {
        let xe = &mut self.xe;
        let mut a = 0.0;
        let mut b = 0.0;
        for bf in &mv.factors {
            let g = bf.h - bf.v;
            if g != 0.0 {
                let tau = xe[bf.prec as usize];
                let r = xe[bf.value as usize] - self.means[bf.f as usize];
                a += tau * g * g;
                b += tau * r * g;
            }
        }
        if !(a > 0.0) {
            return;
        }
        let z: f64 = StandardNormal.sample(rng);
        let mut s = b / a + z / a.sqrt();
        if !mv.unary.is_empty() {
            // the Gaussian part is proposed exactly; the unary priors decide
            let line = LineDensity { unary: &mv.unary, x: xe, a: 0.0, b: 0.0 };
            let log_ratio = line.log_density(s) - line.log_density(0.0);
            let u: f64 = rng.random();
            if !(u.ln() < log_ratio) {
                s = 0.0;
            }
        }
        if s != 0.0 {
            for &(k, c) in &mv.slots {
                xe[k] += c * s;
            }
            for bf in &mv.factors {
                self.means[bf.f as usize] += bf.h * s;
            }
        }
    }
}

/// Updates every stochastic node once, then refreshes deterministic nodes.
pub fn gibbs_step<R: Rng + ?Sized>(
    network: &Network,
    state: &mut LatentState,
    rng: &mut R,
    tuning: SliceTuning,
) -> Result<(), SamplerError> {
    let mut sw = Sweeper::new(network);
    sw.sweep(network, &mut state.values, rng, tuning)
        .map_err(|(node, source)| SamplerError::Slice {
            node: network.label(node),
            iteration: 0,
            source,
        })?;
    network.refresh(state);
    Ok(())
}

/// Per-chain RNG: one ChaCha8 stream per chain index under a common seed.
pub fn chain_rng(seed: u64, chain: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chain as u64);
    rng
}

/// Deterministic initial state: prior means, zero errors and biases, and a
/// multiplicative jitter in [0.9, 1.1] on components for chains after the
/// first.
pub fn init_state(network: &Network, chain_index: usize, seed: u64) -> LatentState {
    let mut rng = chain_rng(seed, chain_index);
    init_with(network, chain_index, &mut rng)
}

fn init_with(network: &Network, chain_index: usize, rng: &mut ChaCha8Rng) -> LatentState {
    let n = network.stochastic_count();
    let mut x = vec![0.0; n];
    for s in 0..n {
        let node = &network.nodes[network.slot_node(s)];
        x[s] = match node.class {
            NodeClass::ProcessError | NodeClass::Bias => 0.0,
            _ => network.prior_mean(s, &x),
        };
        if chain_index > 0 && node.class == NodeClass::Component {
            let j: f64 = rng.random_range(0.9..=1.1);
            x[s] *= j;
        }
    }
    network.state_from_values(x)
}

/// Which values a [`SampleStore`] records: every stochastic node followed
/// by the channel-inflow nodes.
#[derive(Clone, Debug)]
pub(crate) struct StorePlan {
    pub names: Vec<String>,
    pub nodes: Vec<NodeIdx>,
    /// For each deterministic parameter, its position in the network's
    /// deterministic list.
    pub det_positions: Vec<usize>,
    pub monitored: Vec<bool>,
    pub slots: usize,
}

impl StorePlan {
    pub fn new(net: &Network) -> Self {
        let mut names = Vec::new();
        let mut nodes = Vec::new();
        for s in 0..net.stochastic_count() {
            let n = net.slot_node(s);
            names.push(net.label(n));
            nodes.push(n);
        }
        let mut det_positions = Vec::new();
        for (p, &n) in net.deterministic_nodes().iter().enumerate() {
            if matches!(net.nodes[n].id, NodeId::Inflow { .. }) {
                names.push(net.label(n));
                nodes.push(n);
                det_positions.push(p);
            }
        }
        let patterns = net.config.as_ref().map(|c| c.monitored.clone());
        let monitored = names
            .iter()
            .map(|name| match &patterns {
                Some(p) => p.iter().any(|pat| label_matches(pat, name)),
                None => true,
            })
            .collect();
        StorePlan {
            names,
            nodes,
            det_positions,
            monitored,
            slots: net.stochastic_count(),
        }
    }

    fn record(&self, net: &Network, x: &[f64], out: &mut [f64], retained: usize, r: usize) {
        for (p, v) in x.iter().enumerate() {
            out[p * retained + r] = *v;
        }
        for (k, &pos) in self.det_positions.iter().enumerate() {
            out[(self.slots + k) * retained + r] = net.deterministic_value(pos, x);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum RunStatus {
    Complete,
    Failed { reason: String },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub chain_seconds: Vec<f64>,
    pub total_seconds: f64,
}

/// Per-chain moments of the monitored stochastic parameters at one
/// convergence checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryMoments {
    pub checkpoint: TrajectoryCheckpoint,
    /// `[chain][param]`, parameters as in [`SampleStore::trajectory_params`].
    pub moments: Vec<Vec<Moments>>,
}

/// Retained draws from all chains.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleStore {
    pub model_id: String,
    pub settings: SamplerSettings,
    pub names: Vec<String>,
    pub nodes: Vec<NodeIdx>,
    pub monitored: Vec<bool>,
    /// Number of leading parameters that are stochastic nodes, in slot order.
    pub slots: usize,
    pub chains: usize,
    pub retained: usize,
    /// Parameter-major: `values[(p * chains + c) * retained + r]`.
    pub values: Vec<f64>,
    pub iterations: Vec<usize>,
    pub status: RunStatus,
    pub timing: Timing,
    pub trajectory_params: Vec<usize>,
    pub trajectory: Vec<TrajectoryMoments>,
    pub trajectory_notes: Vec<String>,
}

impl SampleStore {
    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// All draws of parameter `p`, chain-major.
    pub fn param(&self, p: usize) -> &[f64] {
        let n = self.chains * self.retained;
        &self.values[p * n..(p + 1) * n]
    }

    pub fn chain(&self, p: usize, c: usize) -> &[f64] {
        let start = (p * self.chains + c) * self.retained;
        &self.values[start..start + self.retained]
    }

    pub fn draw_count(&self) -> usize {
        self.chains * self.retained
    }

    /// Stochastic node values of pooled draw `k` (chain-major order).
    pub fn state(&self, k: usize) -> Vec<f64> {
        let n = self.draw_count();
        (0..self.slots).map(|p| self.values[p * n + k]).collect()
    }

    pub fn is_complete(&self) -> bool {
        self.status == RunStatus::Complete
    }

    pub fn monitored_indices(&self) -> Vec<usize> {
        (0..self.names.len()).filter(|&p| self.monitored[p]).collect()
    }

    /// Writes `manifest.json`, `timing.json` and one CSV per monitored
    /// parameter under `draws/`.
    pub fn save(&self, dir: &Path) -> io::Result<()> {
        fs::create_dir_all(dir.join("draws"))?;
        let header = format!(
            "# l2swbm {} model={} seed={}\n",
            crate::ARTIFACT_VERSION,
            self.model_id,
            self.settings.seed
        );
        let mut params = Vec::new();
        for p in self.monitored_indices() {
            let file = format!("{}.csv", file_stem(&self.names[p]));
            let mut s = String::with_capacity(16 * self.draw_count() + 64);
            s.push_str(&header);
            s.push_str("chain,draw_index,value\n");
            for c in 0..self.chains {
                for (r, v) in self.chain(p, c).iter().enumerate() {
                    s.push_str(&format!("{c},{r},{v}\n"));
                }
            }
            fs::write(dir.join("draws").join(&file), s)?;
            params.push(serde_json::json!({"name": self.names[p], "file": format!("draws/{file}")}));
        }
        let manifest = serde_json::json!({
            "schema_version": crate::SCHEMA_VERSION,
            "artifact_version": crate::ARTIFACT_VERSION,
            "model_id": self.model_id,
            "seed": self.settings.seed,
            "settings": self.settings,
            "chains": self.chains,
            "retained_per_chain": self.retained,
            "iterations": self.iterations,
            "status": self.status,
            "parameters": params,
        });
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
        let timing = serde_json::json!({
            "schema_version": crate::SCHEMA_VERSION,
            "artifact_version": crate::ARTIFACT_VERSION,
            "model_id": self.model_id,
            "seed": self.settings.seed,
            "chain_seconds": self.timing.chain_seconds,
            "total_seconds": self.timing.total_seconds,
        });
        fs::write(dir.join("timing.json"), serde_json::to_string_pretty(&timing)? + "\n")?;
        Ok(())
    }
}

/// Result of checking every retained draw against the state invariants.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StoreAudit {
    pub draws: usize,
    /// Inflow draws that differ from the scaled upstream outflow, or are
    /// nonzero for the most upstream lake.
    pub linkage_violations: usize,
    /// Non-positive draws of P, R or a precision.
    pub support_violations: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub first_violation: Option<String>,
}

impl StoreAudit {
    pub fn is_clean(&self) -> bool {
        self.linkage_violations == 0 && self.support_violations == 0
    }
}

impl SampleStore {
    /// Checks inflow linkage (exact equality) and positivity on every
    /// retained draw.
    pub fn audit(&self, net: &Network) -> StoreAudit {
        let mut a = StoreAudit {
            draws: self.draw_count(),
            ..StoreAudit::default()
        };
        let scale = net.config.as_ref().map_or(crate::network::DEFAULT_INFLOW_SCALE, |c| c.inflow_scale);
        for (p, &node) in self.nodes.iter().enumerate() {
            let n = &net.nodes[node];
            let vals = self.param(p);
            match n.id {
                NodeId::Inflow { lake, t } => {
                    let upstream = if lake == 0 {
                        None
                    } else {
                        let id = NodeId::Component { lake: lake - 1, component: Component::Q, t };
                        match net.slot_of_id(&id) {
                            Some(q) => Some(self.param(q)),
                            None => {
                                a.linkage_violations += vals.len();
                                a.first_violation.get_or_insert_with(|| format!("{}: no upstream outflow", self.names[p]));
                                continue;
                            }
                        }
                    };
                    for (k, &v) in vals.iter().enumerate() {
                        let expected = upstream.map_or(0.0, |q| scale * q[k]);
                        if v != expected {
                            a.linkage_violations += 1;
                            a.first_violation
                                .get_or_insert_with(|| format!("{} draw {k}: {v} != {expected}", self.names[p]));
                        }
                    }
                }
                _ => {
                    let positive = matches!(
                        n.id,
                        NodeId::Component { component: Component::P | Component::R, .. }
                    ) || (p < self.slots && n.class == NodeClass::Precision);
                    if positive {
                        for (k, &v) in vals.iter().enumerate() {
                            if !(v > 0.0) {
                                a.support_violations += 1;
                                a.first_violation.get_or_insert_with(|| format!("{} draw {k}: {v}", self.names[p]));
                            }
                        }
                    }
                }
            }
        }
        a
    }
}

/// File-system-safe form of a parameter label, e.g. `Q[SUP,10]` -> `Q_SUP_10`.
pub fn file_stem(label: &str) -> String {
    let mut s: String = label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '_' || c == '-' { c } else { '_' })
        .collect();
    while s.ends_with('_') {
        s.pop();
    }
    s
}

/// Controls for checkpointing, interruption and thread use.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub checkpoint_dir: Option<PathBuf>,
    pub resume: bool,
    /// Stop every chain after this iteration (after writing its restart
    /// file), as if the process had been interrupted.
    pub halt_after: Option<usize>,
    /// Cap on concurrently running chains; defaults to `L2SWBM_THREADS`.
    pub threads: Option<usize>,
}

pub fn run(network: &Network, settings: &SamplerSettings) -> Result<SampleStore, SamplerError> {
    run_with(network, settings, &RunOptions::default())
}

struct ChainOutput {
    draws: Vec<f64>,
    resumed_seconds: f64,
    moments: Vec<Vec<Moments>>,
    seconds: f64,
    failure: Option<String>,
}

pub fn run_with(network: &Network, settings: &SamplerSettings, options: &RunOptions) -> Result<SampleStore, SamplerError> {
    settings.validate()?;
    if let Some(d) = &options.checkpoint_dir {
        fs::create_dir_all(d)?;
    }
    let plan = StorePlan::new(network);
    let (checkpoints, notes) = settings.trajectory_plan();
    let trajectory_params: Vec<usize> = (0..plan.slots).filter(|&p| plan.monitored[p]).collect();
    let model_id = network.config.as_ref().map(|c| c.id.clone()).unwrap_or_default();
    let ctx = ChainContext {
        net: network,
        settings,
        plan: &plan,
        checkpoints: &checkpoints,
        trajectory_params: &trajectory_params,
        options,
        model_id: &model_id,
    };
    let started = Instant::now();
    let outputs = run_chains(&ctx)?;
    // a resumed run also counts the time spent before its restart files
    let earlier = outputs.iter().map(|o| o.resumed_seconds).fold(0.0, f64::max);
    let total_seconds = earlier + started.elapsed().as_secs_f64();

    let r = settings.retained_per_chain;
    let np = plan.names.len();
    let chains = settings.chains;
    let mut values = vec![0.0; np * chains * r];
    let mut failure = None;
    for (c, out) in outputs.iter().enumerate() {
        for p in 0..np {
            let dst = (p * chains + c) * r;
            values[dst..dst + r].copy_from_slice(&out.draws[p * r..(p + 1) * r]);
        }
        if failure.is_none() {
            if let Some(f) = &out.failure {
                failure = Some(format!("chain {c}: {f}"));
            }
        }
    }
    let trajectory = checkpoints
        .iter()
        .enumerate()
        .map(|(k, cp)| TrajectoryMoments {
            checkpoint: *cp,
            moments: outputs.iter().map(|o| o.moments[k].clone()).collect(),
        })
        .collect();
    Ok(SampleStore {
        model_id,
        settings: settings.clone(),
        names: plan.names.clone(),
        nodes: plan.nodes.clone(),
        monitored: plan.monitored.clone(),
        slots: plan.slots,
        chains,
        retained: r,
        values,
        iterations: settings.retained_iterations(),
        status: match failure {
            None => RunStatus::Complete,
            Some(reason) => RunStatus::Failed { reason },
        },
        timing: Timing {
            chain_seconds: outputs.iter().map(|o| o.seconds).collect(),
            total_seconds,
        },
        trajectory_params,
        trajectory,
        trajectory_notes: notes,
    })
}

struct ChainContext<'a> {
    net: &'a Network,
    settings: &'a SamplerSettings,
    plan: &'a StorePlan,
    checkpoints: &'a [TrajectoryCheckpoint],
    trajectory_params: &'a [usize],
    options: &'a RunOptions,
    model_id: &'a str,
}

/// Thread cap from `L2SWBM_THREADS`, if set to a positive integer.
pub fn env_threads() -> Option<usize> {
    std::env::var("L2SWBM_THREADS").ok()?.trim().parse().ok().filter(|n| *n > 0)
}

#[cfg(feature = "parallel")]
fn run_chains(ctx: &ChainContext) -> Result<Vec<ChainOutput>, SamplerError> {
    use rayon::prelude::*;
    let threads = ctx.options.threads.or_else(env_threads).unwrap_or(0);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.min(ctx.settings.chains))
        .build()
        .map_err(|e| SamplerError::Settings(e.to_string()))?;
    let results: Vec<Result<ChainOutput, SamplerError>> =
        pool.install(|| (0..ctx.settings.chains).into_par_iter().map(|c| run_chain(ctx, c)).collect());
    results.into_iter().collect()
}

#[cfg(not(feature = "parallel"))]
fn run_chains(ctx: &ChainContext) -> Result<Vec<ChainOutput>, SamplerError> {
    (0..ctx.settings.chains).map(|c| run_chain(ctx, c)).collect()
}

fn run_chain(ctx: &ChainContext, chain: usize) -> Result<ChainOutput, SamplerError> {
    let net = ctx.net;
    let s = ctx.settings;
    let r = s.retained_per_chain;
    let np = ctx.plan.names.len();
    let stride = s.stride();
    let tuning = s.tuning();

    let mut rng = chain_rng(s.seed, chain);
    let mut x;
    let mut draws = vec![f64::NAN; np * r];
    let mut moments = vec![vec![Moments::default(); ctx.trajectory_params.len()]; ctx.checkpoints.len()];
    let mut start_iter = 1;
    let mut seconds_before = 0.0;
    let mut sweeper = Sweeper::new(net);

    let ckpt_path = ctx
        .options
        .checkpoint_dir
        .as_ref()
        .map(|d| d.join(format!("chain_{chain}.ckpt")));
    let resumed = match (&ckpt_path, ctx.options.resume) {
        (Some(p), true) if p.exists() => Some(Checkpoint::read(p)?),
        _ => None,
    };
    if let Some(ck) = resumed {
        ck.check(ctx, chain)?;
        x = ck.state;
        rng.set_word_pos(ck.word_pos);
        draws = ck.draws;
        for (k, m) in moments.iter_mut().enumerate() {
            for (j, mm) in m.iter_mut().enumerate() {
                *mm = ck.moments[k * ctx.trajectory_params.len() + j];
            }
        }
        start_iter = ck.iteration + 1;
        seconds_before = ck.seconds;
        sweeper.means = ck.cache;
        sweeper.sweeps = ck.cache_sweeps;
    } else {
        x = init_with(net, chain, &mut rng).values;
    }

    let started = Instant::now();
    let mut failure = None;
    for i in start_iter..=s.iterations {
        if let Err((node, e)) = sweeper.sweep(net, &mut x, &mut rng, tuning) {
            failure = Some(format!("slice failure at {} (iteration {i}): {e}", net.label(node)));
            break;
        }
        if i > s.burn_in && (s.iterations - i) % stride == 0 {
            let back = (s.iterations - i) / stride;
            if back < r {
                ctx.plan.record(net, &x, &mut draws, r, r - 1 - back);
            }
        }
        for (k, cp) in ctx.checkpoints.iter().enumerate() {
            if cp.includes(i) {
                for (j, &p) in ctx.trajectory_params.iter().enumerate() {
                    moments[k][j].push(x[p]);
                }
            }
        }
        let halt = ctx.options.halt_after == Some(i);
        if let Some(path) = &ckpt_path {
            if (s.checkpoint_interval > 0 && i % s.checkpoint_interval == 0) || halt {
                let ck = Checkpoint {
                    model_id: ctx.model_id.to_string(),
                    chain,
                    iteration: i,
                    seed: s.seed,
                    word_pos: rng.get_word_pos(),
                    settings: s.clone(),
                    seconds: seconds_before + started.elapsed().as_secs_f64(),
                    state: x.clone(),
                    draws: draws.clone(),
                    moments: moments.iter().flatten().copied().collect(),
                    cache: sweeper.means.clone(),
                    cache_sweeps: sweeper.sweeps,
                };
                ck.write(path)?;
            }
        }
        if halt {
            return Err(SamplerError::Halted(i));
        }
    }
    Ok(ChainOutput {
        draws,
        resumed_seconds: seconds_before,
        moments,
        seconds: seconds_before + started.elapsed().as_secs_f64(),
        failure,
    })
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"L2SWBMCK";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    model_id: String,
    chain: usize,
    iteration: usize,
    seed: u64,
    word_pos: String,
    settings: SamplerSettings,
    seconds: f64,
    state_len: usize,
    draws_len: usize,
    moments_len: usize,
    cache_len: usize,
    cache_sweeps: u64,
}

/// Restart file for one chain: a JSON header followed by little-endian f64
/// arrays (state, retained draws, trajectory moments).
struct Checkpoint {
    model_id: String,
    chain: usize,
    iteration: usize,
    seed: u64,
    word_pos: u128,
    settings: SamplerSettings,
    seconds: f64,
    state: Vec<f64>,
    draws: Vec<f64>,
    moments: Vec<Moments>,
    /// Sampler's factor-mean cache and its sweep counter, so a resumed
    /// chain continues bit-for-bit.
    cache: Vec<f64>,
    cache_sweeps: u64,
}

impl Checkpoint {
    fn write(&self, path: &Path) -> Result<(), SamplerError> {
        let header = CheckpointHeader {
            model_id: self.model_id.clone(),
            chain: self.chain,
            iteration: self.iteration,
            seed: self.seed,
            word_pos: self.word_pos.to_string(),
            settings: self.settings.clone(),
            seconds: self.seconds,
            state_len: self.state.len(),
            draws_len: self.draws.len(),
            moments_len: self.moments.len(),
            cache_len: self.cache.len(),
            cache_sweeps: self.cache_sweeps,
        };
        let h = serde_json::to_vec(&header).map_err(|e| SamplerError::Checkpoint(e.to_string()))?;
        let mut buf = Vec::with_capacity(16 + h.len() + 8 * (self.state.len() + self.draws.len() + 3 * self.moments.len()));
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(h.len() as u32).to_le_bytes());
        buf.extend_from_slice(&h);
        for v in self.state.iter().chain(&self.draws).chain(&self.cache) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for m in &self.moments {
            for v in [m.n as f64, m.mean, m.m2] {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let tmp = path.with_extension("ckpt.tmp");
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&buf)?;
        f.sync_all()?;
        fs::rename(tmp, path)?;
        Ok(())
    }

    fn read(path: &Path) -> Result<Checkpoint, SamplerError> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        let bad = |m: &str| SamplerError::Checkpoint(format!("{}: {m}", path.display()));
        if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("not a restart file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let hl = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let header: CheckpointHeader = serde_json::from_slice(bytes.get(16..16 + hl).ok_or_else(|| bad("truncated"))?)
            .map_err(|e| bad(&e.to_string()))?;
        let body = &bytes[16 + hl..];
        let n = header.state_len + header.draws_len + header.cache_len + 3 * header.moments_len;
        if body.len() != 8 * n {
            return Err(bad("truncated body"));
        }
        let f: Vec<f64> = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let (state, rest) = f.split_at(header.state_len);
        let (draws, rest) = rest.split_at(header.draws_len);
        let (cache, rest) = rest.split_at(header.cache_len);
        let moments = rest
            .chunks_exact(3)
            .map(|c| Moments {
                n: c[0] as u64,
                mean: c[1],
                m2: c[2],
            })
            .collect();
        Ok(Checkpoint {
            model_id: header.model_id,
            chain: header.chain,
            iteration: header.iteration,
            seed: header.seed,
            word_pos: header.word_pos.parse().map_err(|_| bad("bad RNG position"))?,
            settings: header.settings,
            seconds: header.seconds,
            state: state.to_vec(),
            draws: draws.to_vec(),
            moments,
            cache: cache.to_vec(),
            cache_sweeps: header.cache_sweeps,
        })
    }

    fn check(&self, ctx: &ChainContext, chain: usize) -> Result<(), SamplerError> {
        let ok = self.model_id == ctx.model_id
            && self.chain == chain
            && self.seed == ctx.settings.seed
            && self.settings == *ctx.settings
            && self.state.len() == ctx.net.stochastic_count()
            && self.draws.len() == ctx.plan.names.len() * ctx.settings.retained_per_chain
            && self.moments.len() == ctx.checkpoints.len() * ctx.trajectory_params.len()
            && self.cache.len() == ctx.net.factor_count()
            && self.iteration <= ctx.settings.iterations;
        if ok {
            Ok(())
        } else {
            Err(SamplerError::Checkpoint(format!(
                "restart file for chain {chain} does not match this model and settings"
            )))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
use crate::network::{Density, LinExpr, NetworkBuilder, Precision};

    fn normal_toy(y: Option<f64>) -> Network {
        let mut b = NetworkBuilder::new();
        let x = b.stochastic(
            NodeId::Named("x".into()),
            NodeClass::Component,
            Density::Normal { mean: LinExpr::constant(0.0), precision: Precision::Const(1.0) },
        );
        b.observed(
            NodeId::Named("y".into()),
            Density::Normal { mean: LinExpr::node(x), precision: Precision::Const(1.0) },
            y,
        );
        b.finish(vec![], None).unwrap()
    }

    fn mean_var(v: &[f64]) -> (f64, f64) {
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        (m, v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0))
    }

    #[test]
    fn slice_standard_normal_moments() {
        let mut rng = chain_rng(11, 0);
        let mut x = 0.0;
        let mut v = Vec::with_capacity(50_000);
        for _ in 0..50_000 {
            x = slice_sample(|t| -0.5 * t * t, x, 2.0, 50, &mut rng).unwrap();
            v.push(x);
        }
        let (m, var) = mean_var(&v);
        assert!(m.abs() < 0.03, "{m}");
        assert!((var - 1.0).abs() < 0.05, "{var}");
    }

    #[test]
    fn slice_gamma_mean() {
        let mut rng = chain_rng(12, 0);
        let mut x = 1.0;
        let mut sum = 0.0;
        for _ in 0..50_000 {
            x = slice_sample(|t: f64| if t > 0.0 { t.ln() - t } else { f64::NEG_INFINITY }, x, 1.0, 50, &mut rng).unwrap();
            assert!(x > 0.0);
            sum += x;
        }
        assert!((sum / 50_000.0 - 2.0).abs() < 0.04);
    }

    #[test]
    fn slice_rejects_zero_density_start() {
        let mut rng = chain_rng(1, 0);
        let r = slice_sample(|t: f64| if t > 0.0 { 0.0 } else { f64::NEG_INFINITY }, -1.0, 1.0, 50, &mut rng);
        assert_eq!(r, Err(SliceError::Precondition(-1.0)));
    }

    #[test]
    fn slice_exhaustion_after_widening() {
        let mut rng = chain_rng(1, 0);
        let r = slice_sample(|_| 0.0, 0.0, 1.0, 3, &mut rng);
        assert!(matches!(r, Err(SliceError::Exhausted { .. })));
    }

    #[test]
    fn thinning_arithmetic() {
        let s = SamplerSettings::new(200, 1, 100, 50, 1);
        let it = s.retained_iterations();
        assert_eq!(it.len(), 50);
        assert_eq!(*it.last().unwrap(), 200);
        assert!(it.iter().all(|i| (101..=200).contains(i)));
        assert!(it.windows(2).all(|w| w[1] - w[0] == 2));
        let s = SamplerSettings::full_scale(1);
        assert_eq!(s.stride(), 125);
        assert_eq!(s.retained_iterations()[0], 125_125);
    }

    #[test]
    fn settings_validation() {
        assert!(SamplerSettings::new(100, 1, 100, 1, 0).validate().is_err());
        assert!(SamplerSettings::new(100, 1, 50, 51, 0).validate().is_err());
        assert!(SamplerSettings::new(100, 0, 50, 10, 0).validate().is_err());
        assert!(SamplerSettings::new(100, 1, 50, 50, 0).validate().is_ok());
    }

    #[test]
    fn trajectory_plan_halves_then_thins() {
        let s = SamplerSettings::full_scale(1);
        let (plan, notes) = s.trajectory_plan();
        assert_eq!(plan.len(), 25);
        assert!(notes.is_empty());
        assert_eq!(plan[0], TrajectoryCheckpoint { iteration: 10_000, stride: 5, draws: 1000 });
        assert_eq!(plan[24], TrajectoryCheckpoint { iteration: 250_000, stride: 125, draws: 1000 });
        let mut s = SamplerSettings::new(5_000, 2, 1_000, 100, 1);
        s.trajectory_interval = 1_000;
        let (plan, notes) = s.trajectory_plan();
        assert_eq!(notes.len(), 1);
        assert_eq!(plan[0].iteration, 2_000);
    }

    #[test]
    fn conjugate_toy_posterior() {
        let net = normal_toy(Some(2.0));
        let mut state = init_state(&net, 0, 5);
        let mut rng = chain_rng(5, 0);
        let mut v = Vec::new();
        for _ in 0..20_000 {
            gibbs_step(&net, &mut state, &mut rng, SliceTuning::default()).unwrap();
            v.push(state.values[0]);
        }
        let (m, _) = mean_var(&v);
        assert!((m - 1.0).abs() < 0.02, "{m}");
    }

    #[test]
    fn masked_observation_leaves_prior() {
        let net = normal_toy(None);
        let s = SamplerSettings::new(20_000, 1, 0, 20_000, 3);
        let store = run(&net, &s).unwrap();
        let (m, var) = mean_var(store.param(0));
        assert!(m.abs() < 0.03 && (var - 1.0).abs() < 0.05, "{m} {var}");
    }

    #[test]
    fn runs_are_deterministic_and_chains_distinct() {
        let net = normal_toy(Some(2.0));
        let s = SamplerSettings::new(300, 3, 100, 50, 42);
        let a = run(&net, &s).unwrap();
        let b = run(&net, &s).unwrap();
        assert_eq!(a.values, b.values);
        assert_ne!(a.chain(0, 1), a.chain(0, 2));
        assert_eq!(a.values.len(), 3 * 50);
    }
}

