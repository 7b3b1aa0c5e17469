//! Joint moves along fixed directions of the latent space.
//!
//! Once the storage-change precision becomes large, single-site updates of
//! the components barely move: every component sits inside one or more
//! tightly fitted window sums. Two families of directions leave those sums
//! unchanged and are sampled jointly after each sweep:
//!
//! * within a month, a pair of components shifted so the monthly balance is
//!   unchanged (with the downstream lake's evaporation compensating when the
//!   pair touches an outflow);
//! * across months, a normal-prior component (or the seasonal process
//!   error) raised in one
//!   calendar month and lowered in the next, with the seasonal biases of its
//!   sources moved the opposite way so the observation residuals stay put.
//!   Every rolling 12-month sum contains each calendar month once, so these
//!   moves are free with respect to 12-month storage changes.
//!
//! The conditional along a line is a unary-prior term per touched node times
//! a Gaussian in the step length, so moves without gamma or log-normal nodes
//! are drawn exactly and the rest use the slice sampler.

use std::collections::BTreeMap;

use crate::ingest::Component;
use crate::network::{BiasKind, Network, NodeId, ProcessErrorKind, UnaryPrior};

/// A normal factor touched by a move: its value shifts by `v * s` and its
/// mean by `h * s` for step length `s`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct BlockFactor {
    pub f: u32,
    pub value: u32,
    pub prec: u32,
    pub v: f64,
    pub h: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct BlockMove {
    pub slots: Vec<(usize, f64)>,
    pub unary: Vec<(UnaryPrior, usize, f64)>,
    pub factors: Vec<BlockFactor>,
}

/// Log density along the line, up to a constant: the unary priors at the
/// shifted points and the collapsed Gaussian `-0.5 (a s^2 - 2 b s)`.
pub(crate) struct LineDensity<'a> {
    pub unary: &'a [(UnaryPrior, usize, f64)],
    pub x: &'a [f64],
    pub a: f64,
    pub b: f64,
}

impl LineDensity<'_> {
    #[inline]
    pub fn log_density(&self, s: f64) -> f64 {
        let mut lp = -0.5 * (self.a * s * s - 2.0 * self.b * s);
        for &(u, k, c) in self.unary {
            lp += u.log_kernel(self.x[k] + c * s);
            if lp == f64::NEG_INFINITY {
                return lp;
            }
        }
        lp
    }
}

impl Network {
    fn block_move(&self, slots: Vec<(usize, f64)>) -> BlockMove {
        let mut acc: BTreeMap<u32, (u32, u32, f64, f64)> = BTreeMap::new();
        for &(k, c) in &slots {
            if let Some(own) = self.own_ref(k) {
                acc.entry(own.f).or_insert((own.value, own.prec, 0.0, 0.0)).2 += c;
            }
            for ch in self.mean_refs(k) {
                acc.entry(ch.f).or_insert((ch.value, ch.prec, 0.0, 0.0)).3 += ch.coef * c;
            }
        }
        let factors = acc
            .into_iter()
            .filter(|(_, (_, _, v, h))| *v != 0.0 || *h != 0.0)
            .map(|(f, (value, prec, v, h))| BlockFactor { f, value, prec, v, h })
            .collect();
        let unary = slots
            .iter()
            .filter_map(|&(k, c)| self.slots[k].unary.map(|u| (u, k, c)))
            .collect();
        BlockMove { slots, unary, factors }
    }

    /// Balance-preserving and seasonal-shift directions for a built model.
    /// Networks assembled by hand (without a configuration) get none.
    pub(crate) fn compile_blocks(&self) -> Vec<BlockMove> {
        let Some(config) = &self.config else {
            return Vec::new();
        };
        let span = config.analysis_span;
        let months = span.months;
        let nl = self.lakes.len();
        let slot = |id: NodeId| self.slot_of_id(&id);
        let theta = |lake: usize, component: Component, t: usize| slot(NodeId::Component { lake, component, t });

        // sources per (lake, component)
        let mut sources: BTreeMap<(usize, Component), Vec<u32>> = BTreeMap::new();
        for n in &self.nodes {
            if let NodeId::ObsPrecision { lake, component, source } = n.id {
                sources.entry((lake, component)).or_default().push(source);
            }
        }

        let mut dirs: Vec<Vec<(usize, f64)>> = Vec::new();

        // within-month pairs, pivoting on evaporation (normal prior, so the
        // pairs without gamma or log-normal partners are drawn exactly)
        for t in 1..=months {
            for l in 0..nl {
                let Some(e) = theta(l, Component::E, t) else { continue };
                for c in [Component::P, Component::R, Component::Q, Component::D] {
                    let Some(k) = theta(l, c, t) else { continue };
                    // E enters with sign -1: raising E by 1 is offset by c moving 1/sign
                    let dc = 1.0 / c.balance_sign();
                    let mut d = vec![(e, 1.0), (k, dc)];
                    if c == Component::Q && l + 1 < nl {
                        if let Some(ed) = theta(l + 1, Component::E, t) {
                            d.push((ed, config.inflow_scale * dc));
                        }
                    }
                    dirs.push(d);
                }
                if config.process_error == ProcessErrorKind::Hierarchical {
                    if let Some(eps) = slot(NodeId::ProcessError { lake: l, t }) {
                        dirs.push(vec![(e, 1.0), (eps, 1.0)]);
                    }
                }
            }
        }

        // seasonal shifts between consecutive calendar months
        for l in 0..nl {
            for m in 1..=12u32 {
                let m2 = m % 12 + 1;
                let sign = |month: u32| -> f64 {
                    if month == m {
                        1.0
                    } else if month == m2 {
                        -1.0
                    } else {
                        0.0
                    }
                };
                // P and R are left out: their shifts follow from an E shift
                // and the within-month pairs, without the cost of slicing
                for c in [Component::E, Component::Q, Component::D] {
                    let mut d = Vec::new();
                    for t in 1..=months {
                        let s = sign(span.calendar_month(t));
                        if s == 0.0 {
                            continue;
                        }
                        if let Some(k) = theta(l, c, t) {
                            d.push((k, s));
                        }
                        if config.bias == BiasKind::Hierarchical {
                            for &n in sources.get(&(l, c)).into_iter().flatten() {
                                if let Some(k) = slot(NodeId::Bias { lake: l, component: c, source: n, t }) {
                                    d.push((k, -s));
                                }
                            }
                        }
                    }
                    for &n in sources.get(&(l, c)).into_iter().flatten() {
                        for month in [m, m2] {
                            if let Some(k) = slot(NodeId::SeasonalBias { lake: l, component: c, source: n, month }) {
                                d.push((k, -sign(month)));
                            }
                        }
                    }
                    if !d.is_empty() {
                        dirs.push(d);
                    }
                }
                if config.process_error != ProcessErrorKind::None {
                    let mut d = Vec::new();
                    for month in [m, m2] {
                        if let Some(k) = slot(NodeId::SeasonalProcessError { lake: l, month }) {
                            d.push((k, sign(month)));
                        }
                    }
                    if config.process_error == ProcessErrorKind::Hierarchical {
                        for t in 1..=months {
                            let s = sign(span.calendar_month(t));
                            if s != 0.0 {
                                if let Some(k) = slot(NodeId::ProcessError { lake: l, t }) {
                                    d.push((k, s));
                                }
                            }
                        }
                    }
                    if !d.is_empty() {
                        dirs.push(d);
                    }
                }
            }
        }

        dirs.into_iter().map(|d| self.block_move(d)).collect()
    }
}
