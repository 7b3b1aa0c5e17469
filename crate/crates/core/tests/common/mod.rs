#![allow(dead_code)]

use l2swbm::ingest::{AnalysisSpan, Component, ObservationTable, YearMonth};
use l2swbm::network::{Conditional, LatentState, Network, NodeClass, NodeId};
use l2swbm::priors::PriorSpec;
use l2swbm::synthetic::{generate, SyntheticData, SyntheticSpec};

pub const GRID_POINTS: usize = 2048;

/// Synthetic system restricted to `lakes` lakes and `months` analysis months
/// from 2005-01.
pub fn fixture(lakes: usize, months: usize, seed: u64) -> (SyntheticData, ObservationTable, PriorSpec) {
    let mut spec = SyntheticSpec::great_lakes(seed).with_lakes(lakes);
    spec.analysis = AnalysisSpan::new(YearMonth::new(2005, 1), months);
    let data = generate(&spec);
    let table = data.table();
    let priors = data.fit_priors().expect("synthetic history fits");
    (data, table, priors)
}

/// Conditional class of a stochastic node, as named in reports.
pub fn class_key(net: &Network, slot: usize) -> &'static str {
    let node = &net.nodes[net.slot_node(slot)];
    match node.id {
        NodeId::Component { component: Component::P, .. } => "slice-P",
        NodeId::Component { component: Component::R, .. } => "slice-R",
        NodeId::Component { .. } => "normal",
        NodeId::ProcessError { .. } | NodeId::SeasonalProcessError { .. } => "epsilon",
        NodeId::Bias { .. } | NodeId::SeasonalBias { .. } => "eta",
        _ if node.class == NodeClass::Precision => "gamma",
        _ => "other",
    }
}

fn with_value(state: &LatentState, slot: usize, v: f64) -> LatentState {
    let mut values = state.values.clone();
    values[slot] = v;
    LatentState {
        values,
        deterministic: Vec::new(),
    }
}

/// Interval holding essentially all of the conditional mass of `slot`,
/// located by a coarse scan of the joint density.
fn bracket(net: &Network, state: &LatentState, slot: usize, positive: bool) -> (f64, f64) {
    let cur = state.values[slot];
    let coarse: Vec<f64> = if positive {
        (0..=4000).map(|k| 10f64.powf(-6.0 + 12.0 * k as f64 / 4000.0)).collect()
    } else {
        let span = 50.0 * (1.0 + cur.abs());
        (0..=8000).map(|k| cur - span + 2.0 * span * k as f64 / 8000.0).collect()
    };
    let lp: Vec<f64> = coarse.iter().map(|&v| net.log_joint(&with_value(state, slot, v))).collect();
    let max = lp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let inside: Vec<usize> = (0..coarse.len()).filter(|&k| lp[k] > max - 40.0).collect();
    let lo = coarse[inside[0].saturating_sub(1)];
    let hi = coarse[(inside[inside.len() - 1] + 1).min(coarse.len() - 1)];
    let lo = if positive { lo.max(1e-12) } else { lo };
    (lo, hi)
}

fn normalise(lp: &[f64]) -> Vec<f64> {
    let max = lp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = lp.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = w.iter().sum();
    w.into_iter().map(|x| x / z).collect()
}

/// KL divergence from the grid-normalised joint density of `slot` (others
/// fixed) to the conditional descriptor evaluated on the same grid.
pub fn grid_kl(net: &Network, state: &LatentState, slot: usize) -> f64 {
    let cond = net.full_conditional(slot, state).expect("stochastic slot");
    let positive = match &cond {
        Conditional::Gamma { .. } => true,
        Conditional::Slice(d) => d.log_density(-1.0) == f64::NEG_INFINITY,
        Conditional::Normal { .. } => false,
    };
    let (lo, hi) = bracket(net, state, slot, positive);
    let grid: Vec<f64> = (0..GRID_POINTS)
        .map(|k| lo + (hi - lo) * k as f64 / (GRID_POINTS - 1) as f64)
        .collect();
    let oracle: Vec<f64> = grid.iter().map(|&v| net.log_joint(&with_value(state, slot, v))).collect();
    let desc: Vec<f64> = grid
        .iter()
        .map(|&v| match &cond {
            Conditional::Normal { mean, precision } => -0.5 * precision * (v - mean) * (v - mean),
            Conditional::Gamma { shape, rate } => (shape - 1.0) * v.ln() - rate * v,
            Conditional::Slice(d) => d.log_density(v),
        })
        .collect();
    let p = normalise(&oracle);
    let q = normalise(&desc);
    p.iter()
        .zip(&q)
        .filter(|(a, _)| **a > 0.0)
        .map(|(a, b)| a * (a / b).ln())
        .sum()
}
