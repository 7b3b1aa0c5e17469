//! Synthetic two-lake data with realistic monthly magnitudes.
//!
//! True components follow seasonal climatologies (gamma precipitation,
//! log-normal runoff, normal evaporation and diversions, persistent outflow
//! anomalies). Each data source observes a component with a seasonal bias
//! and Gaussian noise. Levels integrate the true balance plus a persistent
//! AR(1) process term, so storage changes carry the kind of slowly varying
//! residual that monthly data sources do not see.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, LogNormal, Normal};
use serde::{Deserialize, Serialize};

use crate::ingest::{align, write_series, AnalysisSpan, Component, ComponentSeries, ObservationTable, SeriesDecl, YearMonth};
use crate::priors::{fit_all, FitRules, PriorError, PriorSpec};

/// `mean + amplitude * cos(2 pi (month - peak) / 12)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Seasonal {
    pub mean: f64,
    pub amplitude: f64,
    pub peak: u32,
}

impl Seasonal {
    pub const fn new(mean: f64, amplitude: f64, peak: u32) -> Self {
        Seasonal { mean, amplitude, peak }
    }

    pub fn at(&self, month: u32) -> f64 {
        self.mean + self.amplitude * (2.0 * PI * (month as f64 - self.peak as f64) / 12.0).cos()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceSpec {
    pub component: Component,
    pub source: u32,
    pub start: YearMonth,
    pub end: YearMonth,
    /// Mean of the observed series over its record; the constant part of the
    /// bias is whatever offset achieves it.
    pub target_mean: f64,
    /// Seasonal shape of the bias (zero-mean part).
    pub bias_amplitude: f64,
    pub bias_peak: u32,
    pub noise_sd: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LakeSpec {
    pub name: String,
    pub p: Seasonal,
    pub p_cv: f64,
    pub e: Seasonal,
    pub e_sd: f64,
    pub r: Seasonal,
    pub r_log_sd: f64,
    pub q: Seasonal,
    /// Stationary SD and lag-1 correlation of outflow anomalies.
    pub q_anomaly_sd: f64,
    pub q_phi: f64,
    pub d: Seasonal,
    pub d_sd: f64,
    /// Seasonal part of the true process term.
    pub process: Seasonal,
    /// Stationary SD and lag-1 correlation of the persistent process term,
    /// which is centred on the analysis period.
    pub process_sd: f64,
    pub process_phi: f64,
    /// Multi-year sinusoid added to the process term (mm, months); zero at
    /// the start of the analysis period.
    pub process_cycle_amplitude: f64,
    pub process_cycle_period: f64,
    pub initial_level: f64,
    pub level_noise_sd: f64,
    pub sources: Vec<SourceSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub record_start: YearMonth,
    pub record_end: YearMonth,
    pub analysis: AnalysisSpan,
    pub inflow_scale: f64,
    pub lakes: Vec<LakeSpec>,
}

fn ym(y: i32, m: u32) -> YearMonth {
    YearMonth::new(y, m)
}

#[allow(clippy::too_many_arguments)]
fn src(component: Component, source: u32, start: YearMonth, target: f64, amp: f64, peak: u32, sd: f64) -> SourceSpec {
    SourceSpec {
        component,
        source,
        start,
        end: ym(2014, 12),
        target_mean: target,
        bias_amplitude: amp,
        bias_peak: peak,
        noise_sd: sd,
    }
}

impl SyntheticSpec {
    /// Superior and Michigan-Huron, 1950-2014 record, analysis 2005-2014.
    pub fn great_lakes(seed: u64) -> Self {
        use Component::*;
        let h = ym(1950, 1);
        let a = ym(2005, 1);
        let sup = LakeSpec {
            name: "SUP".into(),
            p: Seasonal::new(70.0, 22.0, 9),
            p_cv: 0.35,
            e: Seasonal::new(50.0, 55.0, 12),
            e_sd: 12.0,
            r: Seasonal::new(44.0, 28.0, 5),
            r_log_sd: 0.25,
            q: Seasonal::new(69.0, 9.0, 9),
            q_anomaly_sd: 9.0,
            q_phi: 0.9,
            d: Seasonal::new(4.9, 1.8, 6),
            d_sd: 0.9,
            process: Seasonal::new(0.0, 0.0, 8),
            process_sd: 16.0,
            process_phi: 0.97,
            process_cycle_amplitude: 12.0,
            process_cycle_period: 96.0,
            initial_level: 183_350.0,
            level_noise_sd: 5.0,
            sources: vec![
                src(P, 1, h, 65.53, 3.0, 1, 9.9),
                src(P, 2, a, 75.27, 2.0, 7, 10.0),
                src(E, 1, h, 46.06, 5.0, 11, 9.5),
                src(E, 2, a, 48.85, 3.0, 2, 4.7),
                src(R, 1, h, 47.07, 3.0, 4, 1.9),
                src(R, 2, h, 50.77, 4.0, 5, 14.6),
                src(Q, 1, h, 69.71, 0.5, 1, 0.5),
                src(Q, 2, ym(2008, 11), 66.0, 1.0, 7, 2.8),
                src(D, 1, h, 4.91, 0.3, 6, 0.8),
            ],
        };
        let mhu = LakeSpec {
            name: "MHU".into(),
            p: Seasonal::new(75.0, 18.0, 9),
            p_cv: 0.35,
            e: Seasonal::new(58.0, 50.0, 12),
            e_sd: 11.0,
            r: Seasonal::new(58.0, 32.0, 4),
            r_log_sd: 0.25,
            q: Seasonal::new(121.0, 8.0, 8),
            q_anomaly_sd: 8.0,
            q_phi: 0.9,
            d: Seasonal::new(-2.05, 0.4, 7),
            d_sd: 0.2,
            process: Seasonal::new(0.0, 0.0, 8),
            process_sd: 16.0,
            process_phi: 0.97,
            process_cycle_amplitude: 12.0,
            process_cycle_period: 96.0,
            initial_level: 176_400.0,
            level_noise_sd: 5.0,
            sources: vec![
                src(P, 1, h, 70.16, 3.0, 1, 8.8),
                src(P, 2, a, 81.09, 2.0, 7, 10.6),
                src(E, 1, h, 42.68, 6.0, 11, 10.1),
                src(E, 2, a, 63.18, 3.0, 2, 3.2),
                src(R, 1, h, 60.73, 3.0, 4, 0.7),
                src(R, 2, h, 62.26, 4.0, 5, 13.6),
                src(Q, 1, h, 119.77, 0.5, 1, 0.5),
                src(Q, 2, ym(2008, 11), 117.0, 1.0, 7, 1.4),
                src(D, 1, h, -2.05, 0.1, 6, 0.18),
            ],
        };
        SyntheticSpec {
            seed,
            record_start: h,
            record_end: ym(2014, 12),
            analysis: AnalysisSpan::new(a, 120),
            inflow_scale: 0.7,
            lakes: vec![sup, mhu],
        }
    }

    /// Same system restricted to the first `n` lakes.
    pub fn with_lakes(mut self, n: usize) -> Self {
        self.lakes.truncate(n);
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    pub spec: SyntheticSpec,
    /// Every observed series, levels included.
    pub series: Vec<ComponentSeries>,
    /// True values over the whole record: components, inflow and the
    /// process term (stored under [`Component::H`]'s place as `"eps"`).
    pub truth: BTreeMap<(String, String), Vec<f64>>,
}

fn ar1(rng: &mut ChaCha8Rng, n: usize, sd: f64, phi: f64) -> Vec<f64> {
    let innov = Normal::new(0.0, sd * (1.0 - phi * phi).sqrt()).unwrap();
    let mut x = Normal::new(0.0, sd).unwrap().sample(rng);
    (0..n)
        .map(|_| {
            let v = x;
            x = phi * x + innov.sample(rng);
            v
        })
        .collect()
}

pub fn generate(spec: &SyntheticSpec) -> SyntheticData {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = (spec.record_start.months_until(spec.record_end) + 1) as usize;
    let months: Vec<YearMonth> = (0..n).map(|k| spec.record_start.add_months(k as i64)).collect();
    let mut truth = BTreeMap::new();
    let mut series = Vec::new();
    let mut upstream_q: Option<Vec<f64>> = None;
    for lake in &spec.lakes {
        let p: Vec<f64> = months
            .iter()
            .map(|m| {
                let mean = lake.p.at(m.month).max(1.0);
                let shape = 1.0 / (lake.p_cv * lake.p_cv);
                Gamma::new(shape, mean / shape).unwrap().sample(&mut rng)
            })
            .collect();
        let e: Vec<f64> = months
            .iter()
            .map(|m| lake.e.at(m.month) + Normal::new(0.0, lake.e_sd).unwrap().sample(&mut rng))
            .collect();
        let r: Vec<f64> = months
            .iter()
            .map(|m| {
                let mean = lake.r.at(m.month).max(1.0);
                let mu = mean.ln() - 0.5 * lake.r_log_sd * lake.r_log_sd;
                LogNormal::new(mu, lake.r_log_sd).unwrap().sample(&mut rng)
            })
            .collect();
        let qa = ar1(&mut rng, n, lake.q_anomaly_sd, lake.q_phi);
        let q: Vec<f64> = months.iter().zip(&qa).map(|(m, a)| lake.q.at(m.month) + a).collect();
        let d: Vec<f64> = months
            .iter()
            .map(|m| lake.d.at(m.month) + Normal::new(0.0, lake.d_sd).unwrap().sample(&mut rng))
            .collect();
        let pa = ar1(&mut rng, n, lake.process_sd, lake.process_phi);
        let a0 = spec.record_start.months_until(spec.analysis.start) as usize;
        let w = &pa[a0..a0 + spec.analysis.months];
        let mu = w.iter().sum::<f64>() / w.len() as f64;
        let eps: Vec<f64> = months
            .iter()
            .zip(&pa)
            .enumerate()
            .map(|(k, (m, a))| {
                let phase = 2.0 * PI * (k as f64 - a0 as f64) / lake.process_cycle_period;
                lake.process.at(m.month) + a - mu + lake.process_cycle_amplitude * phase.sin()
            })
            .collect();
        let inflow: Vec<f64> = match &upstream_q {
            Some(uq) => uq.iter().map(|v| spec.inflow_scale * v).collect(),
            None => vec![0.0; n],
        };

        let truth_of = |c: Component| -> &Vec<f64> {
            match c {
                Component::P => &p,
                Component::E => &e,
                Component::R => &r,
                Component::Q => &q,
                Component::D => &d,
                _ => unreachable!(),
            }
        };
        for s in &lake.sources {
            let tv = truth_of(s.component);
            let idx: Vec<usize> = (0..n).filter(|&k| months[k] >= s.start && months[k] <= s.end).collect();
            let noise = Normal::new(0.0, s.noise_sd).unwrap();
            let mut obs: Vec<f64> = idx
                .iter()
                .map(|&k| {
                    let b = s.bias_amplitude * (2.0 * PI * (months[k].month as f64 - s.bias_peak as f64) / 12.0).cos();
                    tv[k] + b + noise.sample(&mut rng)
                })
                .collect();
            let shift = s.target_mean - obs.iter().sum::<f64>() / obs.len() as f64;
            for v in &mut obs {
                *v += shift;
                if matches!(s.component, Component::P | Component::R) {
                    *v = v.max(0.1);
                }
                *v = (*v * 100.0).round() / 100.0;
            }
            series.push(ComponentSeries {
                lake: lake.name.clone(),
                component: s.component,
                source: s.source,
                start: s.start,
                values: obs.into_iter().map(Some).collect(),
            });
        }

        // levels from the analysis start through one month past its end
        let a0 = spec.record_start.months_until(spec.analysis.start) as usize;
        let level_noise = Normal::new(0.0, lake.level_noise_sd).unwrap();
        let mut h = lake.initial_level;
        let mut levels = Vec::with_capacity(spec.analysis.months + 1);
        for k in a0..=a0 + spec.analysis.months {
            levels.push(Some(((h + level_noise.sample(&mut rng)) * 10.0).round() / 10.0));
            if k < n {
                h += p[k] - e[k] + r[k] + inflow[k] - q[k] + d[k] + eps[k];
            }
        }
        series.push(ComponentSeries {
            lake: lake.name.clone(),
            component: Component::H,
            source: 1,
            start: spec.analysis.start,
            values: levels,
        });

        for (name, v) in [
            ("P", &p),
            ("E", &e),
            ("R", &r),
            ("I", &inflow),
            ("Q", &q),
            ("D", &d),
            ("eps", &eps),
        ] {
            truth.insert((lake.name.clone(), name.to_string()), v.clone());
        }
        upstream_q = Some(q);
    }
    SyntheticData {
        spec: spec.clone(),
        series,
        truth,
    }
}

impl SyntheticData {
    pub fn lakes(&self) -> Vec<String> {
        self.spec.lakes.iter().map(|l| l.name.clone()).collect()
    }

    pub fn table(&self) -> ObservationTable {
        align(&self.series, self.spec.analysis)
    }

    pub fn fit_priors(&self) -> Result<PriorSpec, PriorError> {
        Ok(fit_all(&self.series, &FitRules::default())?.spec)
    }

    /// True value of a quantity (`"P"`, `"I"`, `"eps"`, ...) at analysis
    /// month `t` (1-based).
    pub fn truth_at(&self, lake: &str, name: &str, t: usize) -> Option<f64> {
        let off = self.spec.record_start.months_until(self.spec.analysis.start) as usize;
        self.truth.get(&(lake.to_string(), name.to_string()))?.get(off + t - 1).copied()
    }

    /// Writes one `year,month,value` CSV per series and returns their
    /// declarations with paths relative to `dir`.
    pub fn write_csv(&self, dir: &Path) -> io::Result<Vec<SeriesDecl>> {
        fs::create_dir_all(dir)?;
        let mut decls = Vec::new();
        for s in &self.series {
            let name = format!("{}_{}_{}.csv", s.lake, s.component, s.source);
            let mut buf = Vec::new();
            write_series(s, &mut buf)?;
            fs::write(dir.join(&name), buf)?;
            decls.push(SeriesDecl {
                lake: s.lake.clone(),
                component: s.component,
                source: s.source,
                units: "mm".into(),
                path: PathBuf::from(name),
            });
        }
        Ok(decls)
    }
}
