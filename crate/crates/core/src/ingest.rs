//! Monthly series loading, validation, alignment and change-in-storage
//! observations.
//!
//! All series are monthly and expressed in mm over the lake surface. Missing
//! months are kept as masked entries (`None`) so every series is gap-free in
//! time; nothing is interpolated.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("{path}: row {row}: {message}")]
    Parse {
        path: String,
        row: usize,
        message: String,
    },
    #[error("{path}: duplicate entry for {month}")]
    DuplicateKey { path: String, month: YearMonth },
    #[error("unsupported units {units:?} for {lake}/{component}: only \"mm\" over lake surface is accepted")]
    Units {
        lake: String,
        component: Component,
        units: String,
    },
    #[error("{path}: no data rows")]
    Empty { path: String },
    #[error("span error for {lake}: level for {first_missing} is not available ({detail})")]
    Span {
        lake: String,
        first_missing: YearMonth,
        detail: String,
    },
    #[error("invalid window: {0}")]
    Window(String),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

/// Water-balance component kind. `H` is the beginning-of-month lake level.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Component {
    P,
    E,
    R,
    I,
    Q,
    D,
    H,
}

impl Component {
    /// Components that carry priors and source likelihoods.
    pub const THETA: [Component; 5] = [Component::P, Component::E, Component::R, Component::Q, Component::D];

    pub fn as_str(self) -> &'static str {
        match self {
            Component::P => "P",
            Component::E => "E",
            Component::R => "R",
            Component::I => "I",
            Component::Q => "Q",
            Component::D => "D",
            Component::H => "H",
        }
    }

    /// Sign with which the component enters the monthly balance.
    pub fn balance_sign(self) -> f64 {
        match self {
            Component::E | Component::Q => -1.0,
            _ => 1.0,
        }
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Component {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "P" => Ok(Component::P),
            "E" => Ok(Component::E),
            "R" => Ok(Component::R),
            "I" => Ok(Component::I),
            "Q" => Ok(Component::Q),
            "D" => Ok(Component::D),
            "H" => Ok(Component::H),
            other => Err(format!("unknown component {other:?}")),
        }
    }
}

/// A calendar month.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct YearMonth {
    pub year: i32,
    pub month: u32,
}

impl YearMonth {
    pub fn new(year: i32, month: u32) -> Self {
        assert!((1..=12).contains(&month), "month {month} out of range");
        YearMonth { year, month }
    }

    /// Months since year 0, January.
    pub fn ordinal(self) -> i64 {
        self.year as i64 * 12 + (self.month as i64 - 1)
    }

    pub fn from_ordinal(ord: i64) -> Self {
        YearMonth {
            year: ord.div_euclid(12) as i32,
            month: (ord.rem_euclid(12) + 1) as u32,
        }
    }

    pub fn add_months(self, n: i64) -> Self {
        Self::from_ordinal(self.ordinal() + n)
    }

    pub fn months_until(self, later: YearMonth) -> i64 {
        later.ordinal() - self.ordinal()
    }
}

impl fmt::Display for YearMonth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:04}-{:02}", self.year, self.month)
    }
}

impl FromStr for YearMonth {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (y, m) = s
            .trim()
            .split_once('-')
            .ok_or_else(|| format!("expected YYYY-MM, got {s:?}"))?;
        let year: i32 = y.parse().map_err(|_| format!("bad year in {s:?}"))?;
        let month: u32 = m.parse().map_err(|_| format!("bad month in {s:?}"))?;
        if !(1..=12).contains(&month) {
            return Err(format!("month out of range in {s:?}"));
        }
        Ok(YearMonth { year, month })
    }
}

impl Serialize for YearMonth {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for YearMonth {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Calendar month (1..=12) of the 1-based analysis index `t`.
pub fn calendar_month(start_month: u32, t: usize) -> u32 {
    debug_assert!(t >= 1);
    ((start_month as usize - 1 + t - 1) % 12) as u32 + 1
}

/// Analysis period: `months` months beginning at `start`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnalysisSpan {
    pub start: YearMonth,
    pub months: usize,
}

impl AnalysisSpan {
    pub fn new(start: YearMonth, months: usize) -> Self {
        AnalysisSpan { start, months }
    }

    pub fn calendar_month(&self, t: usize) -> u32 {
        calendar_month(self.start.month, t)
    }

    /// Month of 1-based index `t`.
    pub fn month_at(&self, t: usize) -> YearMonth {
        self.start.add_months(t as i64 - 1)
    }
}

/// One monthly series from one source.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentSeries {
    pub lake: String,
    pub component: Component,
    pub source: u32,
    pub start: YearMonth,
    pub values: Vec<Option<f64>>,
}

impl ComponentSeries {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn end(&self) -> YearMonth {
        self.start.add_months(self.values.len() as i64 - 1)
    }

    pub fn mask(&self) -> Vec<bool> {
        self.values.iter().map(Option::is_some).collect()
    }

    pub fn get(&self, month: YearMonth) -> Option<f64> {
        let k = self.start.months_until(month);
        if k < 0 {
            return None;
        }
        self.values.get(k as usize).copied().flatten()
    }

    pub fn present(&self) -> impl Iterator<Item = f64> + '_ {
        self.values.iter().filter_map(|v| *v)
    }

    /// Present values whose calendar month equals `month`.
    pub fn calendar_values(&self, month: u32) -> Vec<f64> {
        self.values
            .iter()
            .enumerate()
            .filter(|(k, _)| self.start.add_months(*k as i64).month == month)
            .filter_map(|(_, v)| *v)
            .collect()
    }

    pub fn mean(&self) -> Option<f64> {
        let (n, s) = self.present().fold((0usize, 0.0), |(n, s), v| (n + 1, s + v));
        (n > 0).then(|| s / n as f64)
    }

    /// Sub-series restricted to `from..=to`, masked outside the native range.
    pub fn window(&self, from: YearMonth, to: YearMonth) -> ComponentSeries {
        let n = from.months_until(to) + 1;
        let values = (0..n.max(0)).map(|k| self.get(from.add_months(k))).collect();
        ComponentSeries {
            start: from,
            values,
            ..self.clone()
        }
    }
}

/// Declares how to read one series file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesDecl {
    pub lake: String,
    pub component: Component,
    #[serde(default = "default_source")]
    pub source: u32,
    #[serde(default = "default_units")]
    pub units: String,
    pub path: PathBuf,
}

fn default_source() -> u32 {
    1
}

fn default_units() -> String {
    "mm".to_string()
}

pub fn load_series(path: &Path, decl: &SeriesDecl) -> Result<ComponentSeries, IngestError> {
    let file = std::fs::File::open(path).map_err(|e| {
        std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))
    })?;
    parse_series(std::io::BufReader::new(file), &path.display().to_string(), decl)
}

/// Parses `year,month,value` CSV text. A blank value field means masked.
pub fn parse_series<R: BufRead>(
    reader: R,
    name: &str,
    decl: &SeriesDecl,
) -> Result<ComponentSeries, IngestError> {
    if decl.units.trim() != "mm" {
        return Err(IngestError::Units {
            lake: decl.lake.clone(),
            component: decl.component,
            units: decl.units.clone(),
        });
    }
    let mut rows: BTreeMap<YearMonth, Option<f64>> = BTreeMap::new();
    let parse_err = |row: usize, message: String| IngestError::Parse {
        path: name.to_string(),
        row,
        message,
    };
    for (i, line) in reader.lines().enumerate() {
        let row = i + 1;
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split(',').map(str::trim).collect();
        if fields.first() == Some(&"year") {
            continue;
        }
        if fields.len() < 2 || fields.len() > 3 {
            return Err(parse_err(row, format!("expected 3 fields, found {}", fields.len())));
        }
        let year: i32 = fields[0]
            .parse()
            .map_err(|_| parse_err(row, format!("bad year {:?}", fields[0])))?;
        let month: u32 = fields[1]
            .parse()
            .map_err(|_| parse_err(row, format!("bad month {:?}", fields[1])))?;
        if !(1..=12).contains(&month) {
            return Err(parse_err(row, format!("month {month} out of range")));
        }
        let value = match fields.get(2).copied().unwrap_or("") {
            "" | "NA" => None,
            v => {
                let x: f64 = v.parse().map_err(|_| parse_err(row, format!("bad value {v:?}")))?;
                if !x.is_finite() {
                    return Err(parse_err(row, format!("non-finite value {v:?}")));
                }
                Some(x)
            }
        };
        let key = YearMonth { year, month };
        if rows.insert(key, value).is_some() {
            return Err(IngestError::DuplicateKey {
                path: name.to_string(),
                month: key,
            });
        }
    }
    let (first, last) = match (rows.keys().next(), rows.keys().next_back()) {
        (Some(a), Some(b)) => (*a, *b),
        _ => return Err(IngestError::Empty { path: name.to_string() }),
    };
    let n = first.months_until(last) + 1;
    let values = (0..n)
        .map(|k| rows.get(&first.add_months(k)).copied().flatten())
        .collect();
    Ok(ComponentSeries {
        lake: decl.lake.clone(),
        component: decl.component,
        source: decl.source,
        start: first,
        values,
    })
}

/// Writes a series as `year,month,value`, one row per month, blank when masked.
pub fn write_series<W: Write>(series: &ComponentSeries, mut out: W) -> std::io::Result<()> {
    writeln!(out, "year,month,value")?;
    for (k, v) in series.values.iter().enumerate() {
        let ym = series.start.add_months(k as i64);
        match v {
            Some(x) => writeln!(out, "{},{},{}", ym.year, ym.month, x)?,
            None => writeln!(out, "{},{},", ym.year, ym.month)?,
        }
    }
    Ok(())
}

/// Length of the storage-change window used by a balance formulation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Window {
    /// Changes from the first analysis month to each month (prototype form).
    Cumulative,
    Rolling(u32),
}

impl Window {
    /// Number of observations produced over `months` analysis months.
    pub fn count(self, months: usize) -> usize {
        match self {
            Window::Cumulative => months,
            Window::Rolling(w) => (months + 1).saturating_sub(w as usize),
        }
    }

    /// 1-based inclusive month range summed by observation `j`.
    pub fn months(self, j: usize) -> std::ops::RangeInclusive<usize> {
        match self {
            Window::Cumulative => 1..=j,
            Window::Rolling(w) => j..=j + w as usize - 1,
        }
    }
}

impl fmt::Display for Window {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Window::Cumulative => f.write_str("C"),
            Window::Rolling(w) => write!(f, "{w}"),
        }
    }
}

/// Observed change in storage for one lake, indexed by start month `j`
/// (rolling) or end month `t` (cumulative), both 1-based in `values[j-1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaHObservations {
    pub lake: String,
    pub window: Window,
    pub values: Vec<Option<f64>>,
}

/// Differences of beginning-of-month levels over `window`.
///
/// `levels` must cover `span.start` through `span.start + T` (the level at
/// the beginning of the month after the analysis period closes the last
/// window).
pub fn delta_h(
    levels: &ComponentSeries,
    window: Window,
    span: AnalysisSpan,
) -> Result<DeltaHObservations, IngestError> {
    let t_total = span.months;
    if let Window::Rolling(w) = window {
        if w == 0 {
            return Err(IngestError::Window("rolling window must be >= 1".into()));
        }
        if w as usize > t_total {
            return Err(IngestError::Span {
                lake: levels.lake.clone(),
                first_missing: span.start.add_months(w as i64),
                detail: format!("window {w} exceeds analysis length {t_total}"),
            });
        }
    }
    // levels[k] is the level at the beginning of month k (1-based), k in 1..=T+1
    let first_needed = span.start;
    let last_needed = span.start.add_months(t_total as i64);
    if levels.start > first_needed {
        return Err(IngestError::Span {
            lake: levels.lake.clone(),
            first_missing: first_needed,
            detail: format!("level record starts {}", levels.start),
        });
    }
    if levels.end() < last_needed {
        return Err(IngestError::Span {
            lake: levels.lake.clone(),
            first_missing: levels.end().add_months(1),
            detail: format!("level record ends {}, need through {last_needed}", levels.end()),
        });
    }
    let level = |k: usize| levels.get(span.start.add_months(k as i64 - 1));
    let values = (1..=window.count(t_total))
        .map(|j| {
            let (a, b) = match window {
                Window::Cumulative => (1, j + 1),
                Window::Rolling(w) => (j, j + w as usize),
            };
            match (level(a), level(b)) {
                (Some(ha), Some(hb)) => Some(hb - ha),
                _ => None,
            }
        })
        .collect();
    Ok(DeltaHObservations {
        lake: levels.lake.clone(),
        window,
        values,
    })
}

/// A component series restricted to the analysis span.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignedSeries {
    pub lake: String,
    pub component: Component,
    pub source: u32,
    /// `values[t-1]` for t in 1..=T.
    pub values: Vec<Option<f64>>,
}

impl AlignedSeries {
    pub fn present_count(&self) -> usize {
        self.values.iter().filter(|v| v.is_some()).count()
    }
}

/// Rectangular observation table over an analysis span.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservationTable {
    pub span: AnalysisSpan,
    pub components: Vec<AlignedSeries>,
    /// Beginning-of-month levels per lake, `T + 1` entries each.
    pub levels: BTreeMap<String, ComponentSeries>,
    pub warnings: Vec<String>,
}

impl ObservationTable {
    pub fn series(&self, lake: &str, component: Component) -> impl Iterator<Item = &AlignedSeries> {
        let lake = lake.to_string();
        self.components
            .iter()
            .filter(move |s| s.lake == lake && s.component == component)
    }

    pub fn delta_h(&self, lake: &str, window: Window) -> Result<DeltaHObservations, IngestError> {
        let levels = self.levels.get(lake).ok_or_else(|| IngestError::Span {
            lake: lake.to_string(),
            first_missing: self.span.start,
            detail: "no level series".into(),
        })?;
        delta_h(levels, window, self.span)
    }

    pub fn masked_count(&self) -> usize {
        self.components
            .iter()
            .map(|s| s.values.len() - s.present_count())
            .sum()
    }
}

/// Aligns series onto the analysis span. Component series get `T` entries,
/// level series `T + 1`. Series with no overlap are dropped with a warning.
pub fn align(series_set: &[ComponentSeries], span: AnalysisSpan) -> ObservationTable {
    let first = span.start;
    let last = span.start.add_months(span.months as i64 - 1);
    let mut components = Vec::new();
    let mut levels = BTreeMap::new();
    let mut warnings = Vec::new();
    for s in series_set {
        let (to, n) = if s.component == Component::H {
            (last.add_months(1), span.months + 1)
        } else {
            (last, span.months)
        };
        if s.is_empty() || s.end() < first || s.start > to {
            warnings.push(format!(
                "{}/{}/{}: record {}..{} has no overlap with {}..{}; dropped",
                s.lake,
                s.component,
                s.source,
                s.start,
                s.end(),
                first,
                to
            ));
            continue;
        }
        let w = s.window(first, to);
        debug_assert_eq!(w.values.len(), n);
        if s.component == Component::H {
            levels.insert(s.lake.clone(), w);
        } else {
            components.push(AlignedSeries {
                lake: s.lake.clone(),
                component: s.component,
                source: s.source,
                values: w.values,
            });
        }
    }
    components.sort_by(|a, b| (&a.lake, a.component, a.source).cmp(&(&b.lake, b.component, b.source)));
    ObservationTable {
        span,
        components,
        levels,
        warnings,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn decl(c: Component) -> SeriesDecl {
        SeriesDecl {
            lake: "SUP".into(),
            component: c,
            source: 1,
            units: "mm".into(),
            path: PathBuf::new(),
        }
    }

    fn parse(text: &str) -> Result<ComponentSeries, IngestError> {
        parse_series(text.as_bytes(), "test.csv", &decl(Component::P))
    }

    fn levels(start: YearMonth, v: &[f64]) -> ComponentSeries {
        ComponentSeries {
            lake: "SUP".into(),
            component: Component::H,
            source: 1,
            start,
            values: v.iter().map(|x| Some(*x)).collect(),
        }
    }

    #[test]
    fn two_consecutive_rows() {
        let s = parse("year,month,value\n2005,1,65.0\n2005,2,40.0\n").unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s.mask(), vec![true, true]);
        assert_eq!(s.values, vec![Some(65.0), Some(40.0)]);
    }

    #[test]
    fn gap_becomes_masked_entry() {
        let s = parse("year,month,value\n2005,1,65.0\n2005,3,40.0\n").unwrap();
        assert_eq!(s.len(), 3);
        assert_eq!(s.mask(), vec![true, false, true]);
    }

    #[test]
    fn blank_value_is_masked() {
        let s = parse("year,month,value\n2005,1,\n2005,2,3\n").unwrap();
        assert_eq!(s.values, vec![None, Some(3.0)]);
    }

    #[test]
    fn malformed_row_names_row_number() {
        let err = parse("year,month,value\n2005,1,1.0\n2005,x,2.0\n").unwrap_err();
        match err {
            IngestError::Parse { row, .. } => assert_eq!(row, 3),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn duplicate_month_rejected() {
        let err = parse("year,month,value\n2005,1,1.0\n2005,1,2.0\n").unwrap_err();
        assert!(matches!(err, IngestError::DuplicateKey { .. }));
    }

    #[test]
    fn non_mm_units_rejected() {
        let mut d = decl(Component::Q);
        d.units = "cms".into();
        let err = parse_series("2005,1,1\n".as_bytes(), "q.csv", &d).unwrap_err();
        assert!(matches!(err, IngestError::Units { .. }));
    }

    #[test]
    fn calendar_month_wraps() {
        assert_eq!(calendar_month(1, 1), 1);
        assert_eq!(calendar_month(1, 12), 12);
        assert_eq!(calendar_month(1, 13), 1);
        assert_eq!(calendar_month(11, 3), 1);
    }

    #[test]
    fn delta_h_pairwise_difference() {
        let span = AnalysisSpan::new(YearMonth::new(2005, 1), 2);
        let obs = delta_h(&levels(span.start, &[100.0, 110.0, 105.0]), Window::Rolling(1), span).unwrap();
        assert_eq!(obs.values, vec![Some(10.0), Some(-5.0)]);
        let cum = delta_h(&levels(span.start, &[100.0, 110.0, 105.0]), Window::Cumulative, span).unwrap();
        assert_eq!(cum.values, vec![Some(10.0), Some(5.0)]);
    }

    #[test]
    fn delta_h_constant_levels_zero() {
        let span = AnalysisSpan::new(YearMonth::new(2005, 1), 24);
        let lv = levels(span.start, &[176_000.0; 25]);
        for w in [Window::Rolling(1), Window::Rolling(12), Window::Cumulative] {
            let obs = delta_h(&lv, w, span).unwrap();
            assert!(obs.values.iter().all(|v| *v == Some(0.0)));
        }
    }

    #[test]
    fn delta_h_window_longer_than_span() {
        let span = AnalysisSpan::new(YearMonth::new(2005, 1), 3);
        let err = delta_h(&levels(span.start, &[100.0, 110.0, 105.0, 120.0]), Window::Rolling(12), span)
            .unwrap_err();
        assert!(matches!(err, IngestError::Span { .. }));
    }

    #[test]
    fn delta_h_missing_trailing_level() {
        let span = AnalysisSpan::new(YearMonth::new(2005, 1), 3);
        let err = delta_h(&levels(span.start, &[100.0, 110.0, 105.0]), Window::Rolling(1), span).unwrap_err();
        match err {
            IngestError::Span { first_missing, .. } => assert_eq!(first_missing, YearMonth::new(2005, 4)),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn masked_level_masks_dependent_windows() {
        let span = AnalysisSpan::new(YearMonth::new(2005, 1), 3);
        let mut lv = levels(span.start, &[1.0, 2.0, 4.0, 8.0]);
        lv.values[1] = None;
        let obs = delta_h(&lv, Window::Rolling(1), span).unwrap();
        assert_eq!(obs.values, vec![None, None, Some(4.0)]);
    }

    #[test]
    fn align_partial_record_masks_leading_months() {
        let span = AnalysisSpan::new(YearMonth::new(2005, 1), 120);
        let igs = ComponentSeries {
            lake: "SUP".into(),
            component: Component::Q,
            source: 2,
            start: YearMonth::new(2008, 11),
            values: vec![Some(60.0); 74],
        };
        let table = align(&[igs], span);
        let s = &table.components[0];
        assert_eq!(s.values.len(), 120);
        assert_eq!(s.values.iter().take_while(|v| v.is_none()).count(), 46);
        assert_eq!(s.present_count(), 74);
    }

    #[test]
    fn align_full_coverage_has_no_masks() {
        let span = AnalysisSpan::new(YearMonth::new(2005, 1), 24);
        let p = ComponentSeries {
            lake: "SUP".into(),
            component: Component::P,
            source: 1,
            start: YearMonth::new(2000, 1),
            values: vec![Some(1.0); 240],
        };
        let table = align(&[p], span);
        assert_eq!(table.masked_count(), 0);
        assert!(table.warnings.is_empty());
    }

    #[test]
    fn align_drops_series_without_overlap() {
        let span = AnalysisSpan::new(YearMonth::new(2005, 1), 120);
        let old = ComponentSeries {
            lake: "SUP".into(),
            component: Component::E,
            source: 1,
            start: YearMonth::new(1990, 1),
            values: vec![Some(1.0); 168],
        };
        let table = align(&[old], span);
        assert!(table.components.is_empty());
        assert_eq!(table.warnings.len(), 1);
    }

    proptest! {
        #[test]
        fn delta_h_lengths_and_telescoping(
            lv in proptest::collection::vec(-500.0f64..500.0, 2..60),
            w in 1u32..20,
        ) {
            let t = lv.len() - 1;
            let span = AnalysisSpan::new(YearMonth::new(2001, 4), t);
            let series = levels(span.start, &lv);
            let cum = delta_h(&series, Window::Cumulative, span).unwrap();
            prop_assert_eq!(cum.values.len(), t);
            if (w as usize) <= t {
                let a = delta_h(&series, Window::Rolling(w), span).unwrap();
                prop_assert_eq!(a.values.len(), t - w as usize + 1);
                if 2 * (w as usize) <= t {
                    let b = delta_h(&series, Window::Rolling(2 * w), span).unwrap();
                    for j in 0..b.values.len() {
                        let sum = a.values[j].unwrap() + a.values[j + w as usize].unwrap();
                        prop_assert!((sum - b.values[j].unwrap()).abs() < 1e-9);
                    }
                }
            }
        }

        #[test]
        fn csv_round_trip(
            vals in proptest::collection::vec(proptest::option::of(-1e4f64..1e4), 1..50),
            start_month in 1u32..=12,
        ) {
            let mut vals = vals;
            vals[0] = Some(vals[0].unwrap_or(1.0));
            let last = vals.len() - 1;
            vals[last] = Some(vals[last].unwrap_or(2.0));
            let s = ComponentSeries {
                lake: "SUP".into(),
                component: Component::P,
                source: 1,
                start: YearMonth::new(1999, start_month),
                values: vals,
            };
            let mut buf = Vec::new();
            write_series(&s, &mut buf).unwrap();
            let back = parse(std::str::from_utf8(&buf).unwrap()).unwrap();
            let mut buf2 = Vec::new();
            write_series(&back, &mut buf2).unwrap();
            prop_assert_eq!(&back.values, &s.values);
            prop_assert_eq!(back.mask(), s.mask());
            prop_assert_eq!(buf, buf2);
        }
    }
}
