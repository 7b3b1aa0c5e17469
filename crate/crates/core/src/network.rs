//! Directed graphical model for the lake water balance.
//!
//! A [`Network`] is a list of nodes (stochastic, observed, deterministic)
//! where every normal mean is a linear expression of earlier nodes and every
//! precision is a constant or a stochastic node. At build time the graph is
//! compiled into normal "factors" (one per normal-distributed node whose
//! value is either data or a stochastic node), unary Gamma/log-normal priors,
//! and per-node adjacency. Deterministic nodes are flattened into linear
//! combinations of stochastic nodes, so a change to one month's component
//! reaches every storage-change window containing that month directly.

use std::collections::{BTreeMap, HashMap};
use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;
use thiserror::Error;

use crate::ingest::{AnalysisSpan, Component, IngestError, ObservationTable, Window, YearMonth};
use crate::blocks::BlockMove;
use crate::priors::{Prior, PriorSpec};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Seasonal process-error and bias prior precision (sd 10 mm).
pub const VAGUE_SEASONAL_PRECISION: f64 = 0.01;
/// Seasonal bias prior precision for channel flows and diversions when
/// constrained (sd 2 mm).
pub const CONSTRAINED_FLOW_BIAS_PRECISION: f64 = 0.25;
pub const DELTA_H_PRECISION_PRIOR: (f64, f64) = (0.01, 0.01);
pub const OBS_PRECISION_PRIOR: (f64, f64) = (0.1, 0.1);
pub const HIERARCHY_PRECISION_PRIOR: (f64, f64) = (0.05, 0.05);
pub const DEFAULT_INFLOW_SCALE: f64 = 0.7;

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("build error: {0}")]
    Build(String),
    #[error("missing prior for {lake}/{component}/month {month}")]
    MissingPrior {
        lake: String,
        component: Component,
        month: u32,
    },
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("schedule error: {0}")]
    Schedule(String),
    #[error(transparent)]
    Data(#[from] IngestError),
}

pub type NodeIdx = usize;

/// Structured node identifier. Lakes are indices into [`Network::lakes`];
/// `t` and `j` are 1-based month indices, `month` is the calendar month.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum NodeId {
    Component { lake: usize, component: Component, t: usize },
    Inflow { lake: usize, t: usize },
    Balance { lake: usize, t: usize },
    DeltaH { lake: usize, j: usize },
    ProcessError { lake: usize, t: usize },
    SeasonalProcessError { lake: usize, month: u32 },
    ProcessErrorPrecision { lake: usize, month: u32 },
    Bias { lake: usize, component: Component, source: u32, t: usize },
    SeasonalBias { lake: usize, component: Component, source: u32, month: u32 },
    BiasPrecision { lake: usize, component: Component, source: u32, month: u32 },
    ObsPrecision { lake: usize, component: Component, source: u32 },
    DeltaHPrecision { lake: usize },
    ComponentObs { lake: usize, component: Component, source: u32, t: usize },
    DeltaHObs { lake: usize, j: usize },
    Named(String),
}

impl NodeId {
    pub fn lake(&self) -> Option<usize> {
        use NodeId::*;
        match self {
            Component { lake, .. }
            | Inflow { lake, .. }
            | Balance { lake, .. }
            | DeltaH { lake, .. }
            | ProcessError { lake, .. }
            | SeasonalProcessError { lake, .. }
            | ProcessErrorPrecision { lake, .. }
            | Bias { lake, .. }
            | SeasonalBias { lake, .. }
            | BiasPrecision { lake, .. }
            | ObsPrecision { lake, .. }
            | DeltaHPrecision { lake }
            | ComponentObs { lake, .. }
            | DeltaHObs { lake, .. } => Some(*lake),
            Named(_) => None,
        }
    }

    /// Human-readable label, e.g. `Q[SUP,10]` or `tau_eta[MHU,Q,2,7]`.
    pub fn label(&self, lakes: &[String]) -> String {
        use NodeId::*;
        let lk = |l: &usize| lakes.get(*l).cloned().unwrap_or_else(|| l.to_string());
        match self {
            Component { lake, component, t } => format!("{component}[{},{t}]", lk(lake)),
            Inflow { lake, t } => format!("I[{},{t}]", lk(lake)),
            Balance { lake, t } => format!("B[{},{t}]", lk(lake)),
            DeltaH { lake, j } => format!("dH[{},{j}]", lk(lake)),
            ProcessError { lake, t } => format!("eps[{},{t}]", lk(lake)),
            SeasonalProcessError { lake, month } => format!("eps_c[{},{month}]", lk(lake)),
            ProcessErrorPrecision { lake, month } => format!("tau_eps[{},{month}]", lk(lake)),
            Bias { lake, component, source, t } => format!("eta[{},{component},{source},{t}]", lk(lake)),
            SeasonalBias { lake, component, source, month } => {
                format!("eta_c[{},{component},{source},{month}]", lk(lake))
            }
            BiasPrecision { lake, component, source, month } => {
                format!("tau_eta[{},{component},{source},{month}]", lk(lake))
            }
            ObsPrecision { lake, component, source } => format!("tau[{},{component},{source}]", lk(lake)),
            DeltaHPrecision { lake } => format!("tau_dH[{}]", lk(lake)),
            ComponentObs { lake, component, source, t } => format!("y[{},{component},{source},{t}]", lk(lake)),
            DeltaHObs { lake, j } => format!("y_dH[{},{j}]", lk(lake)),
            Named(s) => s.clone(),
        }
    }
}

/// Role of a node, used for update ordering, initialisation and reporting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum NodeClass {
    Component,
    ProcessError,
    Bias,
    Precision,
    Derived,
    Observation,
}

#[derive(Clone, Debug, PartialEq)]
pub enum NodeKind {
    Stochastic,
    /// Observed datum; `None` is a masked observation (no likelihood term).
    Observed(Option<f64>),
    Deterministic,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Precision {
    Const(f64),
    Node(NodeIdx),
}

/// `constant + sum(coef * node)`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LinExpr {
    pub constant: f64,
    pub terms: Vec<(NodeIdx, f64)>,
}

impl LinExpr {
    pub fn constant(c: f64) -> Self {
        LinExpr { constant: c, terms: Vec::new() }
    }

    pub fn node(n: NodeIdx) -> Self {
        LinExpr { constant: 0.0, terms: vec![(n, 1.0)] }
    }

    pub fn sum(terms: Vec<(NodeIdx, f64)>) -> Self {
        LinExpr { constant: 0.0, terms }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Density {
    Normal { mean: LinExpr, precision: Precision },
    Gamma { shape: f64, rate: f64 },
    LogNormal { log_mean: f64, log_precision: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Node {
    pub id: NodeId,
    pub class: NodeClass,
    pub kind: NodeKind,
    pub density: Option<Density>,
    /// Defining expression of a deterministic node.
    pub expr: Option<LinExpr>,
}

impl Node {
    pub fn parents(&self) -> Vec<NodeIdx> {
        let mut p = Vec::new();
        if let Some(Density::Normal { mean, precision }) = &self.density {
            p.extend(mean.terms.iter().map(|(n, _)| *n));
            if let Precision::Node(n) = precision {
                p.push(*n);
            }
        }
        if let Some(e) = &self.expr {
            p.extend(e.terms.iter().map(|(n, _)| *n));
        }
        p.sort_unstable();
        p.dedup();
        p
    }
}

/// How a stochastic node is refreshed in each sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateKind {
    ConjugateNormal,
    ConjugateGamma,
    Slice,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum ValueRef {
    Datum(f64),
    Slot(usize),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum PrecRef {
    Const(f64),
    Slot(usize),
}

/// A normal density term `value ~ N(mean, precision)`.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Factor {
    pub node: NodeIdx,
    pub value: ValueRef,
    pub mean_const: f64,
    pub terms_start: usize,
    pub terms_end: usize,
    pub precision: PrecRef,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum UnaryPrior {
    Gamma { shape: f64, rate: f64, log_norm: f64 },
    LogNormal { log_mean: f64, log_precision: f64 },
}

impl UnaryPrior {
    fn log_density(&self, x: f64) -> f64 {
        if x <= 0.0 {
            return f64::NEG_INFINITY;
        }
        match *self {
            UnaryPrior::Gamma { shape, rate, log_norm } => log_norm + (shape - 1.0) * x.ln() - rate * x,
            UnaryPrior::LogNormal { log_mean, log_precision } => {
                let lx = x.ln();
                0.5 * (log_precision.ln() - LN_2PI) - lx - 0.5 * log_precision * (lx - log_mean) * (lx - log_mean)
            }
        }
    }

    /// Log density up to an additive constant.
    #[inline]
    pub(crate) fn log_kernel(&self, x: f64) -> f64 {
        if x <= 0.0 {
            return f64::NEG_INFINITY;
        }
        match *self {
            UnaryPrior::Gamma { shape, rate, .. } => (shape - 1.0) * x.ln() - rate * x,
            UnaryPrior::LogNormal { log_mean, log_precision } => {
                let lx = x.ln();
                -lx - 0.5 * log_precision * (lx - log_mean) * (lx - log_mean)
            }
        }
    }
}

/// A factor as seen from one of its parents. `value` and `prec` index the
/// extended state: slots first, then [`Network::ext_consts`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct ChildRef {
    pub f: u32,
    pub value: u32,
    pub prec: u32,
    pub coef: f64,
}

/// Per stochastic node compiled information.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct SlotInfo {
    pub node: NodeIdx,
    pub own_factor: Option<usize>,
    pub unary: Option<UnaryPrior>,
    pub update: UpdateKind,
}

/// Source of current factor means.
pub(crate) trait FactorMeans {
    fn mean(&self, f: usize) -> f64;
}

/// Values of the stochastic and deterministic nodes for one chain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentState {
    /// One value per stochastic node, in slot order.
    pub values: Vec<f64>,
    /// One value per deterministic node, in [`Network::deterministic_nodes`] order.
    pub deterministic: Vec<f64>,
}

/// Full conditional of one stochastic node.
#[derive(Clone, Debug, PartialEq)]
pub enum Conditional {
    Normal { mean: f64, precision: f64 },
    Gamma { shape: f64, rate: f64 },
    Slice(SliceDensity),
}

/// Normal child term whose precision is the node itself: contributes
/// `0.5 ln x - 0.5 * x * (resid - coef * x)^2`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct SliceTerm {
    pub resid: f64,
    pub coef: f64,
}

/// One-dimensional unnormalised log density of a node given all others.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceDensity {
    pub(crate) unary: Option<UnaryPrior>,
    /// Normal terms with other precisions, collapsed to `-0.5 * (qa x^2 - 2 qb x)`.
    pub(crate) qa: f64,
    pub(crate) qb: f64,
    /// Terms whose precision is the node itself.
    pub(crate) self_terms: Vec<SliceTerm>,
}

impl SliceDensity {
    pub fn log_density(&self, x: f64) -> f64 {
        let mut lp = match &self.unary {
            Some(u) => u.log_kernel(x),
            None => 0.0,
        };
        if lp == f64::NEG_INFINITY {
            return lp;
        }
        lp -= 0.5 * (self.qa * x * x - 2.0 * self.qb * x);
        if !self.self_terms.is_empty() {
            if x <= 0.0 {
                return f64::NEG_INFINITY;
            }
            let lx = x.ln();
            for t in &self.self_terms {
                let r = t.resid - t.coef * x;
                lp += 0.5 * lx - 0.5 * x * r * r;
            }
        }
        lp
    }
}

/// Water-balance process-error structure.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProcessErrorKind {
    None,
    FixedSeasonal,
    Hierarchical,
}

/// Source-bias structure.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasKind {
    FixedSeasonal,
    Hierarchical,
}

fn default_inflow_scale() -> f64 {
    DEFAULT_INFLOW_SCALE
}

pub fn default_monitored() -> Vec<String> {
    ["P[*", "E[*", "R[*", "Q[*", "D[*", "I[*", "tau*", "eps_c[*"]
        .iter()
        .map(|s| s.to_string())
        .collect()
}

/// One cell of the factorial model design.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub id: String,
    pub window: Window,
    pub process_error: ProcessErrorKind,
    pub bias: BiasKind,
    pub constrained_flow_bias: bool,
    pub analysis_span: AnalysisSpan,
    /// Ordered upstream to downstream; each lake after the first receives
    /// `inflow_scale` times the previous lake's outflow.
    pub lakes: Vec<String>,
    #[serde(default = "default_inflow_scale")]
    pub inflow_scale: f64,
    #[serde(default = "default_monitored")]
    pub monitored: Vec<String>,
}

impl ModelConfig {
    pub fn new(
        window: Window,
        process_error: ProcessErrorKind,
        bias: BiasKind,
        constrained_flow_bias: bool,
        analysis_span: AnalysisSpan,
        lakes: Vec<String>,
    ) -> Self {
        let mut c = ModelConfig {
            id: String::new(),
            window,
            process_error,
            bias,
            constrained_flow_bias,
            analysis_span,
            lakes,
            inflow_scale: DEFAULT_INFLOW_SCALE,
            monitored: default_monitored(),
        };
        c.id = c.canonical_id();
        c
    }

    /// Label under the design naming scheme: optional `f` prefix for the
    /// constrained flow bias, `PROT` for the cumulative prototype, otherwise
    /// two-digit window then process-error letter (N/F/H) then bias letter
    /// (F/H).
    pub fn canonical_id(&self) -> String {
        let prefix = if self.constrained_flow_bias { "f" } else { "" };
        let pe = match self.process_error {
            ProcessErrorKind::None => 'N',
            ProcessErrorKind::FixedSeasonal => 'F',
            ProcessErrorKind::Hierarchical => 'H',
        };
        let b = match self.bias {
            BiasKind::FixedSeasonal => 'F',
            BiasKind::Hierarchical => 'H',
        };
        match self.window {
            Window::Cumulative if pe == 'N' && b == 'F' => format!("{prefix}PROT"),
            Window::Cumulative => format!("{prefix}C{pe}{b}"),
            Window::Rolling(w) => format!("{prefix}{w:02}{pe}{b}"),
        }
    }

    pub fn from_id(id: &str, span: AnalysisSpan, lakes: Vec<String>) -> Result<Self, NetworkError> {
        let bad = || NetworkError::Config(format!("unrecognised model id {id:?}"));
        let (constrained, rest) = match id.strip_prefix('f') {
            Some(r) => (true, r),
            None => (false, id),
        };
        let (window, letters) = if rest == "PROT" {
            (Window::Cumulative, "NF")
        } else if let Some(l) = rest.strip_prefix('C') {
            (Window::Cumulative, l)
        } else {
            let split = rest.find(|c: char| !c.is_ascii_digit()).ok_or_else(bad)?;
            if split == 0 {
                return Err(bad());
            }
            let w: u32 = rest[..split].parse().map_err(|_| bad())?;
            (Window::Rolling(w), &rest[split..])
        };
        let mut chars = letters.chars();
        let pe = match chars.next() {
            Some('N') => ProcessErrorKind::None,
            Some('F') => ProcessErrorKind::FixedSeasonal,
            Some('H') => ProcessErrorKind::Hierarchical,
            _ => return Err(bad()),
        };
        let bias = match chars.next() {
            Some('F') => BiasKind::FixedSeasonal,
            Some('H') => BiasKind::Hierarchical,
            _ => return Err(bad()),
        };
        if chars.next().is_some() {
            return Err(bad());
        }
        let c = ModelConfig::new(window, pe, bias, constrained, span, lakes);
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), NetworkError> {
        if let Window::Rolling(w) = self.window {
            if w == 0 || w as usize > self.analysis_span.months {
                return Err(NetworkError::Config(format!(
                    "rolling window {w} must lie in 1..={}",
                    self.analysis_span.months
                )));
            }
        }
        if self.analysis_span.months == 0 {
            return Err(NetworkError::Config("analysis span is empty".into()));
        }
        if self.lakes.is_empty() {
            return Err(NetworkError::Config("no lakes".into()));
        }
        if self.id != self.canonical_id() {
            return Err(NetworkError::Config(format!(
                "id {:?} does not match structure (expected {:?})",
                self.id,
                self.canonical_id()
            )));
        }
        Ok(())
    }
}

/// Incrementally assembles a network. Nodes may only reference nodes added
/// before them, so every network is acyclic by construction.
#[derive(Debug, Default)]
pub struct NetworkBuilder {
    nodes: Vec<Node>,
    index: HashMap<NodeId, NodeIdx>,
}

impl NetworkBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, node: Node) -> NodeIdx {
        let idx = self.nodes.len();
        for p in node.parents() {
            assert!(p < idx, "parent {p} of {:?} not yet defined", node.id);
            assert!(
                !matches!(self.nodes[p].kind, NodeKind::Observed(_)),
                "observed node used as parent of {:?}",
                node.id
            );
        }
        if let Some(Density::Normal { precision: Precision::Node(p), .. }) = &node.density {
            assert!(
                self.nodes[*p].kind == NodeKind::Stochastic,
                "precision of {:?} must be stochastic",
                node.id
            );
        }
        let prev = self.index.insert(node.id.clone(), idx);
        assert!(prev.is_none(), "duplicate node {:?}", node.id);
        self.nodes.push(node);
        idx
    }

    pub fn stochastic(&mut self, id: NodeId, class: NodeClass, density: Density) -> NodeIdx {
        self.push(Node {
            id,
            class,
            kind: NodeKind::Stochastic,
            density: Some(density),
            expr: None,
        })
    }

    pub fn observed(&mut self, id: NodeId, density: Density, value: Option<f64>) -> NodeIdx {
        self.push(Node {
            id,
            class: NodeClass::Observation,
            kind: NodeKind::Observed(value),
            density: Some(density),
            expr: None,
        })
    }

    pub fn deterministic(&mut self, id: NodeId, class: NodeClass, expr: LinExpr) -> NodeIdx {
        self.push(Node {
            id,
            class,
            kind: NodeKind::Deterministic,
            density: None,
            expr: Some(expr),
        })
    }

    pub fn get(&self, id: &NodeId) -> Option<NodeIdx> {
        self.index.get(id).copied()
    }

    pub fn finish(self, lakes: Vec<String>, config: Option<ModelConfig>) -> Result<Network, NetworkError> {
        Network::compile(self.nodes, self.index, lakes, config)
    }
}

/// Compiled graphical model. Immutable once built.
#[derive(Clone, Debug)]
pub struct Network {
    pub nodes: Vec<Node>,
    pub lakes: Vec<String>,
    pub config: Option<ModelConfig>,
    index: HashMap<NodeId, NodeIdx>,
    slot_of: Vec<Option<usize>>,
    pub(crate) slots: Vec<SlotInfo>,
    pub(crate) factors: Vec<Factor>,
    pub(crate) terms: Vec<(usize, f64)>,
    // CSR adjacency: slot -> (factor, coef) for factors whose mean contains the slot
    mean_child_start: Vec<usize>,
    mean_children: Vec<(usize, f64)>,
    // slot -> factors whose precision is the slot
    prec_child_start: Vec<usize>,
    // the same adjacency with value and precision resolved to extended-state indices
    mean_refs: Vec<ChildRef>,
    prec_refs: Vec<ChildRef>,
    own_refs: Vec<Option<ChildRef>>,
    ext_consts: Vec<f64>,
    /// Deterministic nodes and their flattened expressions over slots.
    deterministic: Vec<NodeIdx>,
    det_const: Vec<f64>,
    det_terms_start: Vec<usize>,
    det_terms: Vec<(usize, f64)>,
    pub update_plan: Vec<(usize, UpdateKind)>,
    pub(crate) blocks: Vec<BlockMove>,
}

impl Network {
    fn compile(
        nodes: Vec<Node>,
        index: HashMap<NodeId, NodeIdx>,
        lakes: Vec<String>,
        config: Option<ModelConfig>,
    ) -> Result<Network, NetworkError> {
        let mut slot_of = vec![None; nodes.len()];
        let mut slots = Vec::new();
        for (i, n) in nodes.iter().enumerate() {
            if n.kind == NodeKind::Stochastic {
                slot_of[i] = Some(slots.len());
                slots.push(SlotInfo {
                    node: i,
                    own_factor: None,
                    unary: None,
                    update: UpdateKind::Slice,
                });
            }
        }

        // flatten deterministic nodes in topological (= index) order
        let mut flat: Vec<Option<(f64, Vec<(usize, f64)>)>> = vec![None; nodes.len()];
        let mut deterministic = Vec::new();
        let flatten = |expr: &LinExpr, flat: &Vec<Option<(f64, Vec<(usize, f64)>)>>| -> (f64, Vec<(usize, f64)>) {
            let mut acc: BTreeMap<usize, f64> = BTreeMap::new();
            let mut constant = expr.constant;
            for &(n, c) in &expr.terms {
                if let Some(s) = slot_of[n] {
                    *acc.entry(s).or_insert(0.0) += c;
                } else if let Some((k, sub)) = &flat[n] {
                    constant += c * k;
                    for &(s, cc) in sub {
                        *acc.entry(s).or_insert(0.0) += c * cc;
                    }
                }
            }
            (constant, acc.into_iter().filter(|(_, c)| *c != 0.0).collect())
        };
        for (i, n) in nodes.iter().enumerate() {
            if n.kind == NodeKind::Deterministic {
                let e = n.expr.as_ref().ok_or_else(|| NetworkError::Build(format!("{:?} has no expression", n.id)))?;
                flat[i] = Some(flatten(e, &flat));
                deterministic.push(i);
            }
        }
        let mut det_const = Vec::with_capacity(deterministic.len());
        let mut det_terms_start = vec![0];
        let mut det_terms = Vec::new();
        for &i in &deterministic {
            let (c, t) = flat[i].as_ref().expect("flattened");
            det_const.push(*c);
            det_terms.extend_from_slice(t);
            det_terms_start.push(det_terms.len());
        }

        let mut factors = Vec::new();
        let mut terms = Vec::new();
        for (i, n) in nodes.iter().enumerate() {
            let value = match n.kind {
                NodeKind::Stochastic => ValueRef::Slot(slot_of[i].unwrap()),
                NodeKind::Observed(Some(v)) => ValueRef::Datum(v),
                NodeKind::Observed(None) | NodeKind::Deterministic => continue,
            };
            match &n.density {
                Some(Density::Normal { mean, precision }) => {
                    let (mean_const, t) = flatten(mean, &flat);
                    let precision = match precision {
                        Precision::Const(c) => {
                            if !(*c > 0.0 && c.is_finite()) {
                                return Err(NetworkError::Build(format!("{:?}: precision {c} must be > 0", n.id)));
                            }
                            PrecRef::Const(*c)
                        }
                        Precision::Node(p) => PrecRef::Slot(slot_of[*p].expect("precision is stochastic")),
                    };
                    if let ValueRef::Slot(s) = value {
                        if t.iter().any(|(ts, _)| *ts == s) {
                            return Err(NetworkError::Build(format!("{:?} depends on itself", n.id)));
                        }
                        slots[s].own_factor = Some(factors.len());
                    }
                    let start = terms.len();
                    terms.extend(t);
                    factors.push(Factor {
                        node: i,
                        value,
                        mean_const,
                        terms_start: start,
                        terms_end: terms.len(),
                        precision,
                    });
                }
                Some(Density::Gamma { shape, rate }) => {
                    let ValueRef::Slot(s) = value else {
                        return Err(NetworkError::Build(format!("{:?}: observed gamma nodes unsupported", n.id)));
                    };
                    if !(*shape > 0.0 && *rate > 0.0) {
                        return Err(NetworkError::Build(format!("{:?}: gamma parameters must be > 0", n.id)));
                    }
                    slots[s].unary = Some(UnaryPrior::Gamma {
                        shape: *shape,
                        rate: *rate,
                        log_norm: shape * rate.ln() - ln_gamma(*shape),
                    });
                }
                Some(Density::LogNormal { log_mean, log_precision }) => {
                    let ValueRef::Slot(s) = value else {
                        return Err(NetworkError::Build(format!("{:?}: observed log-normal nodes unsupported", n.id)));
                    };
                    if !(*log_precision > 0.0) {
                        return Err(NetworkError::Build(format!("{:?}: log precision must be > 0", n.id)));
                    }
                    slots[s].unary = Some(UnaryPrior::LogNormal {
                        log_mean: *log_mean,
                        log_precision: *log_precision,
                    });
                }
                None => return Err(NetworkError::Build(format!("{:?} has no density", n.id))),
            }
        }

        // adjacency
        let ns = slots.len();
        let mut mean_lists: Vec<Vec<(usize, f64)>> = vec![Vec::new(); ns];
        let mut prec_lists: Vec<Vec<usize>> = vec![Vec::new(); ns];
        for (f, fac) in factors.iter().enumerate() {
            for &(s, c) in &terms[fac.terms_start..fac.terms_end] {
                mean_lists[s].push((f, c));
            }
            if let PrecRef::Slot(s) = fac.precision {
                prec_lists[s].push(f);
            }
        }
        let mut mean_child_start = vec![0];
        let mut mean_children = Vec::new();
        for l in &mean_lists {
            mean_children.extend_from_slice(l);
            mean_child_start.push(mean_children.len());
        }
        let mut prec_child_start = vec![0];
        let mut prec_children = Vec::new();
        for l in &prec_lists {
            prec_children.extend_from_slice(l);
            prec_child_start.push(prec_children.len());
        }

        let mut ext_consts = Vec::new();
        let mut ext = |v: f64| -> u32 {
            ext_consts.push(v);
            (ns + ext_consts.len() - 1) as u32
        };
        let resolved: Vec<(u32, u32)> = factors
            .iter()
            .map(|fac| {
                let v = match fac.value {
                    ValueRef::Slot(s) => s as u32,
                    ValueRef::Datum(d) => ext(d),
                };
                let p = match fac.precision {
                    PrecRef::Slot(s) => s as u32,
                    PrecRef::Const(c) => ext(c),
                };
                (v, p)
            })
            .collect();
        let child_ref = |f: usize, coef: f64| ChildRef {
            f: f as u32,
            value: resolved[f].0,
            prec: resolved[f].1,
            coef,
        };
        let mean_refs = mean_children.iter().map(|&(f, c)| child_ref(f, c)).collect();
        let prec_refs = prec_children.iter().map(|&f| child_ref(f, 0.0)).collect();
        let own_refs = slots.iter().map(|i| i.own_factor.map(|f| child_ref(f, 1.0))).collect();

        // classify
        for s in 0..ns {
            let info = &slots[s];
            let own_normal_ok = info.own_factor.is_some_and(|f| match factors[f].precision {
                PrecRef::Const(_) => true,
                PrecRef::Slot(p) => p != s,
            });
            let update = if info.own_factor.is_none() && info.unary.is_none() {
                return Err(NetworkError::Schedule(format!("stochastic node {:?} has no prior", nodes[info.node].id)));
            } else if own_normal_ok
                && prec_lists[s].is_empty()
                && mean_lists[s].iter().all(|(f, _)| factors[*f].precision != PrecRef::Slot(s))
            {
                UpdateKind::ConjugateNormal
            } else if matches!(info.unary, Some(UnaryPrior::Gamma { .. })) && mean_lists[s].is_empty() {
                UpdateKind::ConjugateGamma
            } else {
                UpdateKind::Slice
            };
            slots[s].update = update;
        }

        let mut order: Vec<usize> = (0..ns).collect();
        order.sort_by_key(|&s| (nodes[slots[s].node].class, s));
        let update_plan = order.into_iter().map(|s| (s, slots[s].update)).collect();

        let mut net = Network {
            nodes,
            lakes,
            config,
            index,
            slot_of,
            slots,
            factors,
            terms,
            mean_child_start,
            mean_children,
            prec_child_start,
            mean_refs,
            prec_refs,
            own_refs,
            ext_consts,
            deterministic,
            det_const,
            det_terms_start,
            det_terms,
            update_plan,
            blocks: Vec::new(),
        };
        net.blocks = net.compile_blocks();
        Ok(net)
    }

    /// Number of joint directional moves made after each sweep.
    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn stochastic_count(&self) -> usize {
        self.slots.len()
    }

    pub fn node(&self, id: &NodeId) -> Option<NodeIdx> {
        self.index.get(id).copied()
    }

    pub fn slot(&self, node: NodeIdx) -> Option<usize> {
        self.slot_of[node]
    }

    pub fn slot_of_id(&self, id: &NodeId) -> Option<usize> {
        self.node(id).and_then(|n| self.slot_of[n])
    }

    pub fn slot_node(&self, slot: usize) -> NodeIdx {
        self.slots[slot].node
    }

    pub fn update_kind(&self, slot: usize) -> UpdateKind {
        self.slots[slot].update
    }

    pub fn label(&self, node: NodeIdx) -> String {
        self.nodes[node].id.label(&self.lakes)
    }

    pub fn deterministic_nodes(&self) -> &[NodeIdx] {
        &self.deterministic
    }

    /// Count of nodes by (kind, class).
    pub fn counts(&self) -> BTreeMap<(&'static str, NodeClass), usize> {
        let mut m = BTreeMap::new();
        for n in &self.nodes {
            let k = match n.kind {
                NodeKind::Stochastic => "stochastic",
                NodeKind::Observed(_) => "observed",
                NodeKind::Deterministic => "deterministic",
            };
            *m.entry((k, n.class)).or_insert(0) += 1;
        }
        m
    }

    pub(crate) fn mean_children(&self, slot: usize) -> &[(usize, f64)] {
        &self.mean_children[self.mean_child_start[slot]..self.mean_child_start[slot + 1]]
    }

    #[inline]
    pub(crate) fn factor_value(&self, f: usize, x: &[f64]) -> f64 {
        match self.factors[f].value {
            ValueRef::Datum(v) => v,
            ValueRef::Slot(s) => x[s],
        }
    }

    #[inline]
    pub(crate) fn factor_precision(&self, f: usize, x: &[f64]) -> f64 {
        match self.factors[f].precision {
            PrecRef::Const(c) => c,
            PrecRef::Slot(s) => x[s],
        }
    }

    /// Mean of factor `f` evaluated from scratch.
    #[inline]
    pub(crate) fn factor_mean(&self, f: usize, x: &[f64]) -> f64 {
        let fac = &self.factors[f];
        let mut m = fac.mean_const;
        for &(s, c) in &self.terms[fac.terms_start..fac.terms_end] {
            m += c * x[s];
        }
        m
    }

    pub(crate) fn factor_is_observation(&self, f: usize) -> bool {
        matches!(self.factors[f].value, ValueRef::Datum(_))
    }

    pub(crate) fn factor_count(&self) -> usize {
        self.factors.len()
    }

    /// Value of a deterministic node given the stochastic values.
    pub fn deterministic_value(&self, det_pos: usize, x: &[f64]) -> f64 {
        let mut v = self.det_const[det_pos];
        for &(s, c) in &self.det_terms[self.det_terms_start[det_pos]..self.det_terms_start[det_pos + 1]] {
            v += c * x[s];
        }
        v
    }

    /// Position of a deterministic node in [`LatentState::deterministic`].
    pub fn deterministic_position(&self, node: NodeIdx) -> Option<usize> {
        self.deterministic.binary_search(&node).ok()
    }

    /// Value of any node (stochastic, deterministic or observed datum).
    pub fn value_of(&self, node: NodeIdx, x: &[f64]) -> Option<f64> {
        match &self.nodes[node].kind {
            NodeKind::Stochastic => Some(x[self.slot_of[node].unwrap()]),
            NodeKind::Deterministic => Some(self.deterministic_value(self.deterministic_position(node)?, x)),
            NodeKind::Observed(v) => *v,
        }
    }

    /// Deterministic node values are a pure function of the stochastic ones.
    /// Inflow nodes driven by a single upstream outflow are evaluated as the
    /// exact product `scale * Q` so the linkage holds bit-for-bit.
    pub fn refresh(&self, state: &mut LatentState) {
        state.deterministic.resize(self.deterministic.len(), 0.0);
        for p in 0..self.deterministic.len() {
            state.deterministic[p] = self.deterministic_value(p, &state.values);
        }
    }

    pub fn state_from_values(&self, values: Vec<f64>) -> LatentState {
        let mut s = LatentState {
            values,
            deterministic: Vec::new(),
        };
        self.refresh(&mut s);
        s
    }

    /// Sum of all prior and unmasked likelihood log densities.
    pub fn log_joint(&self, state: &LatentState) -> f64 {
        let x = &state.values;
        if x.len() != self.slots.len() {
            return f64::NAN;
        }
        let mut lp = 0.0;
        for info in &self.slots {
            if let Some(u) = &info.unary {
                lp += u.log_density(x[self.slot_of[info.node].unwrap()]);
            }
        }
        for f in 0..self.factors.len() {
            lp += self.factor_log_density(f, x);
        }
        if lp.is_nan() {
            f64::NEG_INFINITY
        } else {
            lp
        }
    }

    fn factor_log_density(&self, f: usize, x: &[f64]) -> f64 {
        let tau = self.factor_precision(f, x);
        if !(tau > 0.0) {
            return f64::NEG_INFINITY;
        }
        let r = self.factor_value(f, x) - self.factor_mean(f, x);
        0.5 * (tau.ln() - LN_2PI) - 0.5 * tau * r * r
    }

    /// Sum of observation log likelihoods (masked observations omitted).
    pub fn log_likelihood(&self, x: &[f64]) -> f64 {
        (0..self.factors.len())
            .filter(|&f| self.factor_is_observation(f))
            .map(|f| self.factor_log_density(f, x))
            .sum()
    }

    pub fn observation_count(&self) -> usize {
        (0..self.factors.len()).filter(|&f| self.factor_is_observation(f)).count()
    }

    /// Full conditional of a stochastic node given the rest of `state`.
    pub fn full_conditional(&self, slot: usize, state: &LatentState) -> Result<Conditional, NetworkError> {
        if slot >= self.slots.len() {
            return Err(NetworkError::Schedule(format!("slot {slot} out of range")));
        }
        let xe = self.extend_state(&state.values);
        let means = FreshMeans { net: self, x: &xe };
        Ok(self.conditional_with(slot, &xe, &means, &mut Vec::new()))
    }

    /// State followed by the data and constant precisions the compiled
    /// adjacency refers to.
    pub(crate) fn extend_state(&self, x: &[f64]) -> Vec<f64> {
        let mut xe = Vec::with_capacity(x.len() + self.ext_consts.len());
        xe.extend_from_slice(x);
        xe.extend_from_slice(&self.ext_consts);
        xe
    }

    #[inline]
    pub(crate) fn own_ref(&self, slot: usize) -> Option<ChildRef> {
        self.own_refs[slot]
    }

    #[inline]
    pub(crate) fn mean_refs(&self, slot: usize) -> &[ChildRef] {
        &self.mean_refs[self.mean_child_start[slot]..self.mean_child_start[slot + 1]]
    }

    #[inline]
    fn prec_refs(&self, slot: usize) -> &[ChildRef] {
        &self.prec_refs[self.prec_child_start[slot]..self.prec_child_start[slot + 1]]
    }

    /// `xe` is the extended state from [`Network::extend_state`].
    pub(crate) fn conditional_with<M: FactorMeans>(
        &self,
        slot: usize,
        xe: &[f64],
        means: &M,
        scratch: &mut Vec<SliceTerm>,
    ) -> Conditional {
        match self.slots[slot].update {
            UpdateKind::ConjugateNormal => {
                let (m, p) = self.normal_conditional(slot, xe, means);
                Conditional::Normal { mean: m, precision: p }
            }
            UpdateKind::ConjugateGamma => {
                let (a, b) = self.gamma_conditional(slot, xe, means);
                Conditional::Gamma { shape: a, rate: b }
            }
            UpdateKind::Slice => Conditional::Slice(self.slice_density(slot, xe, means, scratch)),
        }
    }

    #[inline]
    pub(crate) fn normal_conditional<M: FactorMeans>(&self, slot: usize, xe: &[f64], means: &M) -> (f64, f64) {
        let own = self.own_refs[slot].expect("conjugate normal has own factor");
        let tau0 = xe[own.prec as usize];
        let mut prec = tau0;
        let mut num = tau0 * means.mean(own.f as usize);
        let xk = xe[slot];
        for c in self.mean_refs(slot) {
            let tau = xe[c.prec as usize];
            let r = xe[c.value as usize] - (means.mean(c.f as usize) - c.coef * xk);
            prec += c.coef * c.coef * tau;
            num += c.coef * tau * r;
        }
        (num / prec, prec)
    }

    #[inline]
    pub(crate) fn gamma_conditional<M: FactorMeans>(&self, slot: usize, xe: &[f64], means: &M) -> (f64, f64) {
        let Some(UnaryPrior::Gamma { shape, rate, .. }) = self.slots[slot].unary else {
            unreachable!("conjugate gamma has gamma prior")
        };
        let mut ss = 0.0;
        let children = self.prec_refs(slot);
        for c in children {
            let r = xe[c.value as usize] - means.mean(c.f as usize);
            ss += r * r;
        }
        (shape + 0.5 * children.len() as f64, rate + 0.5 * ss)
    }

    pub(crate) fn slice_density<M: FactorMeans>(
        &self,
        slot: usize,
        xe: &[f64],
        means: &M,
        scratch: &mut Vec<SliceTerm>,
    ) -> SliceDensity {
        let info = &self.slots[slot];
        let xk = xe[slot];
        let mut qa = 0.0;
        let mut qb = 0.0;
        if let Some(own) = self.own_refs[slot] {
            let tau = xe[own.prec as usize];
            qa += tau;
            qb += tau * means.mean(own.f as usize);
        }
        scratch.clear();
        let me = slot as u32;
        for c in self.mean_refs(slot) {
            let resid = xe[c.value as usize] - (means.mean(c.f as usize) - c.coef * xk);
            if c.prec == me {
                scratch.push(SliceTerm { resid, coef: c.coef });
            } else {
                let tau = xe[c.prec as usize];
                qa += tau * c.coef * c.coef;
                qb += tau * c.coef * resid;
            }
        }
        for c in self.prec_refs(slot) {
            if self.mean_refs(slot).iter().any(|g| g.f == c.f) {
                continue;
            }
            scratch.push(SliceTerm {
                resid: xe[c.value as usize] - means.mean(c.f as usize),
                coef: 0.0,
            });
        }
        SliceDensity {
            unary: info.unary,
            qa,
            qb,
            self_terms: scratch.clone(),
        }
    }

    /// Prior mean used for initialisation.
    pub(crate) fn prior_mean(&self, slot: usize, x: &[f64]) -> f64 {
        let info = &self.slots[slot];
        match (&info.unary, info.own_factor) {
            (Some(UnaryPrior::Gamma { shape, rate, .. }), _) => shape / rate,
            (Some(UnaryPrior::LogNormal { log_mean, .. }), _) => log_mean.exp(),
            (None, Some(f)) => self.factor_mean(f, x),
            (None, None) => 0.0,
        }
    }



    /// Graphviz rendering of the graph.
    pub fn to_dot(&self) -> String {
        let mut s = String::from("digraph l2swbm {\n  rankdir=LR;\n");
        for (i, n) in self.nodes.iter().enumerate() {
            let shape = match n.kind {
                NodeKind::Stochastic => "ellipse",
                NodeKind::Observed(_) => "box",
                NodeKind::Deterministic => "diamond",
            };
            let _ = writeln!(s, "  n{i} [label=\"{}\", shape={shape}];", self.label(i));
        }
        for (i, n) in self.nodes.iter().enumerate() {
            for p in n.parents() {
                let _ = writeln!(s, "  n{p} -> n{i};");
            }
        }
        s.push_str("}\n");
        s
    }

    /// Checks the support and linkage invariants of a state.
    pub fn check_state(&self, state: &LatentState) -> Result<(), String> {
        for (s, info) in self.slots.iter().enumerate() {
            let v = state.values[s];
            if !v.is_finite() {
                return Err(format!("{} is not finite", self.label(info.node)));
            }
            if info.unary.is_some() && v <= 0.0 {
                return Err(format!("{} = {v} outside positive support", self.label(info.node)));
            }
        }
        for (p, &n) in self.deterministic.iter().enumerate() {
            if let NodeId::Inflow { lake, t } = self.nodes[n].id {
                let v = state.deterministic[p];
                if lake == 0 {
                    if v != 0.0 {
                        return Err(format!("{} = {v}, expected 0", self.label(n)));
                    }
                } else {
                    let q = self
                        .slot_of_id(&NodeId::Component { lake: lake - 1, component: Component::Q, t })
                        .ok_or("upstream outflow missing")?;
                    let scale = self.config.as_ref().map_or(DEFAULT_INFLOW_SCALE, |c| c.inflow_scale);
                    if v != scale * state.values[q] {
                        return Err(format!("{} = {v} != {scale} * Q", self.label(n)));
                    }
                }
            }
        }
        Ok(())
    }
}

pub(crate) struct FreshMeans<'a> {
    pub net: &'a Network,
    pub x: &'a [f64],
}

impl FactorMeans for FreshMeans<'_> {
    #[inline]
    fn mean(&self, f: usize) -> f64 {
        self.net.factor_mean(f, self.x)
    }
}

/// Cached factor means, kept in step with the state during a sweep.
pub(crate) struct CachedMeans<'a>(pub &'a [f64]);

impl FactorMeans for CachedMeans<'_> {
    #[inline]
    fn mean(&self, f: usize) -> f64 {
        self.0[f]
    }
}

fn prior_density(prior: &Prior, lake: &str, component: Component, month: u32) -> Result<Density, NetworkError> {
    let expected = crate::priors::family_for(component);
    if expected != Some(prior.family()) {
        return Err(NetworkError::Build(format!(
            "prior for {lake}/{component}/month {month} has family {:?}, expected {:?}",
            prior.family(),
            expected
        )));
    }
    Ok(match *prior {
        Prior::Normal(p) => Density::Normal {
            mean: LinExpr::constant(p.mean),
            precision: Precision::Const(p.precision),
        },
        Prior::Gamma(g) => Density::Gamma {
            shape: g.shape,
            rate: g.rate,
        },
        Prior::LogNormal(l) => Density::LogNormal {
            log_mean: l.log_mean,
            log_precision: l.log_precision,
        },
    })
}

/// Assembles the water-balance network for one model configuration.
pub fn build(config: &ModelConfig, priors: &PriorSpec, data: &ObservationTable) -> Result<Network, NetworkError> {
    config.validate()?;
    let span = config.analysis_span;
    if data.span != span {
        return Err(NetworkError::Build(format!(
            "data span {}+{} does not match model span {}+{}",
            data.span.start, data.span.months, span.start, span.months
        )));
    }
    let t_max = span.months;
    let nl = config.lakes.len();
    let mut b = NetworkBuilder::new();

    // components, by time then lake
    let mut theta = vec![vec![[0usize; 5]; t_max + 1]; nl];
    for t in 1..=t_max {
        let month = span.calendar_month(t);
        for (l, lake) in config.lakes.iter().enumerate() {
            for (k, &c) in Component::THETA.iter().enumerate() {
                let prior = priors.get(lake, c, month).ok_or_else(|| NetworkError::MissingPrior {
                    lake: lake.clone(),
                    component: c,
                    month,
                })?;
                let density = prior_density(prior, lake, c, month)?;
                theta[l][t][k] = b.stochastic(NodeId::Component { lake: l, component: c, t }, NodeClass::Component, density);
            }
        }
    }
    let q_idx = 3;

    // channel inflow from the upstream lake
    let mut inflow = vec![vec![0usize; t_max + 1]; nl];
    for l in 0..nl {
        for t in 1..=t_max {
            let expr = if l == 0 {
                LinExpr::default()
            } else {
                LinExpr::sum(vec![(theta[l - 1][t][q_idx], config.inflow_scale)])
            };
            inflow[l][t] = b.deterministic(NodeId::Inflow { lake: l, t }, NodeClass::Derived, expr);
        }
    }

    // process error
    let mut eps: Vec<Vec<Option<NodeIdx>>> = vec![vec![None; t_max + 1]; nl];
    if config.process_error != ProcessErrorKind::None {
        for l in 0..nl {
            let mut seasonal = [0usize; 13];
            let mut seasonal_prec = [0usize; 13];
            for m in 1..=12u32 {
                seasonal[m as usize] = b.stochastic(
                    NodeId::SeasonalProcessError { lake: l, month: m },
                    NodeClass::ProcessError,
                    Density::Normal {
                        mean: LinExpr::constant(0.0),
                        precision: Precision::Const(VAGUE_SEASONAL_PRECISION),
                    },
                );
                if config.process_error == ProcessErrorKind::Hierarchical {
                    let (a, r) = HIERARCHY_PRECISION_PRIOR;
                    seasonal_prec[m as usize] = b.stochastic(
                        NodeId::ProcessErrorPrecision { lake: l, month: m },
                        NodeClass::Precision,
                        Density::Gamma { shape: a, rate: r },
                    );
                }
            }
            for t in 1..=t_max {
                let c = span.calendar_month(t) as usize;
                let id = NodeId::ProcessError { lake: l, t };
                eps[l][t] = Some(match config.process_error {
                    ProcessErrorKind::FixedSeasonal => {
                        b.deterministic(id, NodeClass::ProcessError, LinExpr::node(seasonal[c]))
                    }
                    _ => b.stochastic(
                        id,
                        NodeClass::ProcessError,
                        Density::Normal {
                            mean: LinExpr::node(seasonal[c]),
                            precision: Precision::Node(seasonal_prec[c]),
                        },
                    ),
                });
            }
        }
    }

    // monthly balance
    let mut balance = vec![vec![0usize; t_max + 1]; nl];
    for l in 0..nl {
        for t in 1..=t_max {
            let th = theta[l][t];
            let mut terms: Vec<(NodeIdx, f64)> = Component::THETA
                .iter()
                .zip(th.iter())
                .map(|(c, n)| (*n, c.balance_sign()))
                .collect();
            terms.push((inflow[l][t], 1.0));
            if let Some(e) = eps[l][t] {
                terms.push((e, 1.0));
            }
            balance[l][t] = b.deterministic(NodeId::Balance { lake: l, t }, NodeClass::Derived, LinExpr::sum(terms));
        }
    }

    // storage change and its likelihood
    let window = config.window;
    for (l, lake) in config.lakes.iter().enumerate() {
        let obs = data.delta_h(lake, window)?;
        let (a, r) = DELTA_H_PRECISION_PRIOR;
        let tau = b.stochastic(NodeId::DeltaHPrecision { lake: l }, NodeClass::Precision, Density::Gamma { shape: a, rate: r });
        let mut prev: Option<NodeIdx> = None;
        for j in 1..=window.count(t_max) {
            let expr = match (window, prev) {
                (Window::Cumulative, Some(p)) => LinExpr::sum(vec![(p, 1.0), (balance[l][j], 1.0)]),
                _ => LinExpr::sum(window.months(j).map(|i| (balance[l][i], 1.0)).collect()),
            };
            let dh = b.deterministic(NodeId::DeltaH { lake: l, j }, NodeClass::Derived, expr);
            prev = Some(dh);
            b.observed(
                NodeId::DeltaHObs { lake: l, j },
                Density::Normal {
                    mean: LinExpr::node(dh),
                    precision: Precision::Node(tau),
                },
                obs.values[j - 1],
            );
        }
    }

    // source likelihoods and biases
    for series in &data.components {
        let Some(l) = config.lakes.iter().position(|x| *x == series.lake) else {
            continue;
        };
        let Some(k) = Component::THETA.iter().position(|c| *c == series.component) else {
            continue;
        };
        let c = series.component;
        let n = series.source;
        let (a, r) = OBS_PRECISION_PRIOR;
        let tau = b.stochastic(
            NodeId::ObsPrecision { lake: l, component: c, source: n },
            NodeClass::Precision,
            Density::Gamma { shape: a, rate: r },
        );
        let p0 = if config.constrained_flow_bias && matches!(c, Component::Q | Component::D) {
            CONSTRAINED_FLOW_BIAS_PRECISION
        } else {
            VAGUE_SEASONAL_PRECISION
        };
        let mut seasonal = [0usize; 13];
        let mut seasonal_prec = [0usize; 13];
        for m in 1..=12u32 {
            seasonal[m as usize] = b.stochastic(
                NodeId::SeasonalBias { lake: l, component: c, source: n, month: m },
                NodeClass::Bias,
                Density::Normal {
                    mean: LinExpr::constant(0.0),
                    precision: Precision::Const(p0),
                },
            );
            if config.bias == BiasKind::Hierarchical {
                let (a, r) = HIERARCHY_PRECISION_PRIOR;
                seasonal_prec[m as usize] = b.stochastic(
                    NodeId::BiasPrecision { lake: l, component: c, source: n, month: m },
                    NodeClass::Precision,
                    Density::Gamma { shape: a, rate: r },
                );
            }
        }
        for t in 1..=t_max {
            let m = span.calendar_month(t) as usize;
            let id = NodeId::Bias { lake: l, component: c, source: n, t };
            let eta = match config.bias {
                BiasKind::FixedSeasonal => b.deterministic(id, NodeClass::Bias, LinExpr::node(seasonal[m])),
                BiasKind::Hierarchical => b.stochastic(
                    id,
                    NodeClass::Bias,
                    Density::Normal {
                        mean: LinExpr::node(seasonal[m]),
                        precision: Precision::Node(seasonal_prec[m]),
                    },
                ),
            };
            b.observed(
                NodeId::ComponentObs { lake: l, component: c, source: n, t },
                Density::Normal {
                    mean: LinExpr::sum(vec![(theta[l][t][k], 1.0), (eta, 1.0)]),
                    precision: Precision::Node(tau),
                },
                series.values[t - 1],
            );
        }
    }

    b.finish(config.lakes.clone(), Some(config.clone()))
}

/// Closed-form node counts implied by a configuration and the number of
/// source series per lake.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeCounts {
    pub stochastic: usize,
    pub deterministic: usize,
    pub observed: usize,
}

impl NodeCounts {
    pub fn expected(config: &ModelConfig, sources: usize) -> NodeCounts {
        let t = config.analysis_span.months;
        let l = config.lakes.len();
        let nw = config.window.count(t);
        let mut st = 5 * t * l + l + sources;
        let mut det = t * l /* inflow */ + t * l /* balance */ + nw * l;
        let mut obs = nw * l + sources * t;
        match config.process_error {
            ProcessErrorKind::None => {}
            ProcessErrorKind::FixedSeasonal => {
                st += 12 * l;
                det += t * l;
            }
            ProcessErrorKind::Hierarchical => st += 24 * l + t * l,
        }
        match config.bias {
            BiasKind::FixedSeasonal => {
                st += 12 * sources;
                det += t * sources;
            }
            BiasKind::Hierarchical => st += 24 * sources + t * sources,
        }
        obs += 0;
        NodeCounts {
            stochastic: st,
            deterministic: det,
            observed: obs,
        }
    }
}

impl Network {
    pub fn node_counts(&self) -> NodeCounts {
        let mut c = NodeCounts {
            stochastic: 0,
            deterministic: 0,
            observed: 0,
        };
        for n in &self.nodes {
            match n.kind {
                NodeKind::Stochastic => c.stochastic += 1,
                NodeKind::Deterministic => c.deterministic += 1,
                NodeKind::Observed(_) => c.observed += 1,
            }
        }
        c
    }
}

/// Matches a label against a pattern where `*` matches any run of characters.
pub fn label_matches(pattern: &str, label: &str) -> bool {
    fn go(p: &[u8], s: &[u8]) -> bool {
        match p.split_first() {
            None => s.is_empty(),
            Some((b'*', rest)) => (0..=s.len()).any(|k| go(rest, &s[k..])),
            Some((c, rest)) => s.first() == Some(c) && go(rest, &s[1..]),
        }
    }
    go(pattern.as_bytes(), label.as_bytes())
}

impl fmt::Display for ModelConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} (window {}, process error {:?}, bias {:?}, constrained flow bias {})",
            self.id, self.window, self.process_error, self.bias, self.constrained_flow_bias
        )
    }
}

/// Canonical two-lake analysis span used by the fixtures: 2005-01, 120 months.
pub fn canonical_span() -> AnalysisSpan {
    AnalysisSpan::new(YearMonth::new(2005, 1), 120)
}
