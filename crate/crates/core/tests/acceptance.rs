//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails. Criteria 4, 5, 7, 8 and 9 share a single run of the
//! 26-model design at K = 50,000 on the synthetic two-lake system.

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use l2swbm::diagnostics::{dic, psrf, psrf_trajectory};
use l2swbm::experiment::{canonical_design, run_design, ExperimentReport, Resources};
use l2swbm::network::{build, Density, LinExpr, ModelConfig, Network, NetworkBuilder, NodeClass, NodeId, Precision};
use l2swbm::priors::fit_gamma_thom;
use l2swbm::sampler::{chain_rng, gibbs_step, init_state, run, SamplerSettings};
use l2swbm::synthetic::{generate, SyntheticSpec};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn toy(prior_precision: f64) -> Network {
    let mut b = NetworkBuilder::new();
    let x = b.stochastic(
        NodeId::Named("x".into()),
        NodeClass::Component,
        Density::Normal { mean: LinExpr::constant(0.0), precision: Precision::Const(prior_precision) },
    );
    b.observed(
        NodeId::Named("y".into()),
        Density::Normal { mean: LinExpr::node(x), precision: Precision::Const(1.0) },
        Some(2.0),
    );
    b.finish(vec![], None).unwrap()
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, v.sqrt())
}

fn conjugate_toy() -> Outcome {
    let t0 = Instant::now();
    let store = run(&toy(1.0), &SamplerSettings::new(20_000, 3, 10_000, 10_000, 1)).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    let (m, sd) = mean_sd(store.param(0));
    let want_sd = 0.5f64.sqrt();
    outcome(
        (m - 1.0).abs() <= 0.02 && (sd - want_sd).abs() <= 0.02 && secs < 10.0 && store.draw_count() == 30_000,
        format!("{} draws: mean {m:.4} (1), sd {sd:.4} ({want_sd:.4}), {secs:.2} s", store.draw_count()),
    )
}

fn grid_oracle() -> Outcome {
    let t0 = Instant::now();
    let (data, table, priors) = common::fixture(1, 2, 3);
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    let tuning = SamplerSettings::new(10, 1, 0, 10, 1).tuning();
    for id in ["PROT", "01FF", "01HH", "f01HH", "01NH"] {
        let cfg = ModelConfig::from_id(id, table.span, data.lakes()).unwrap();
        let net = build(&cfg, &priors, &table).unwrap();
        let mut state = init_state(&net, 1, 11);
        let mut rng = chain_rng(11, 1);
        for _ in 0..25 {
            gibbs_step(&net, &mut state, &mut rng, tuning).unwrap();
        }
        for slot in 0..net.stochastic_count() {
            let kl = common::grid_kl(&net, &state, slot);
            let e = worst.entry(common::class_key(&net, slot)).or_insert(0.0);
            *e = e.max(kl);
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    let classes = ["normal", "gamma", "slice-P", "slice-R", "epsilon", "eta"];
    let pass = classes.iter().all(|c| worst.get(c).is_some_and(|k| *k < 1e-6)) && secs < 60.0;
    let detail = classes
        .iter()
        .map(|c| format!("{c} {:.1e}", worst.get(c).copied().unwrap_or(f64::NAN)))
        .collect::<Vec<_>>()
        .join(", ");
    outcome(pass, format!("max KL per class: {detail}; {secs:.1} s"))
}

fn thom() -> Outcome {
    let g = fit_gamma_thom(&[1.0, 2.0, 3.0]).unwrap();
    let mut rng = chain_rng(3, 0);
    let mut worst: f64 = 0.0;
    for _ in 0..1_000 {
        let n = rng.random_range(2..80);
        let shape = rng.random_range(0.5..20.0);
        let scale = rng.random_range(1.0..200.0);
        let dist = Gamma::new(shape, scale).unwrap();
        let h: Vec<f64> = (0..n).map(|_| dist.sample(&mut rng)).collect();
        let p = fit_gamma_thom(&h).unwrap();
        let mean = h.iter().sum::<f64>() / n as f64;
        worst = worst.max(((p.shape / p.rate) - mean).abs() / mean);
    }
    outcome(
        (g.shape - 5.376).abs() <= 0.01 && (g.rate - 2.688).abs() <= 0.005 && worst <= 1e-9,
        format!("shape {:.4}, rate {:.4}; prior-mean identity max rel err {worst:.1e} over 1000 histories", g.shape, g.rate),
    )
}

fn psrf_checks() -> Outcome {
    let mut rng = chain_rng(17, 0);
    let mut iid_max: f64 = 0.0;
    for _ in 0..10 {
        let chains: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..1_000).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect();
        let refs: Vec<&[f64]> = chains.iter().map(Vec::as_slice).collect();
        iid_max = iid_max.max(psrf(&refs).unwrap().r50);
    }
    let sep: Vec<Vec<f64>> = [-10.0, 0.0, 10.0]
        .iter()
        .map(|c| (0..1_000).map(|_| c + rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    let refs: Vec<&[f64]> = sep.iter().map(Vec::as_slice).collect();
    let separated = psrf(&refs).unwrap().r50;

    // Keep every iteration so the protocol can be replayed from the raw chains.
    let k = 50_000;
    let store = run(&toy(1.0), &SamplerSettings::new(k, 3, 0, k, 5)).unwrap();
    let (traj, _) = psrf_trajectory(&store);
    let mut protocol = traj.iter().map(|p| p.iteration).collect::<Vec<_>>() == vec![10_000, 20_000, 30_000, 40_000, 50_000];
    for p in &traj {
        let kk = p.iteration;
        let half = kk - kk / 2;
        let stride = half / 1_000;
        let chains: Vec<Vec<f64>> = (0..3)
            .map(|c| {
                let h = store.chain(0, c);
                let picked: Vec<f64> = (0..1_000).rev().map(|r| h[kk - stride * r - 1]).collect();
                assert!(kk - stride * 999 > kk / 2);
                picked
            })
            .collect();
        let refs: Vec<&[f64]> = chains.iter().map(Vec::as_slice).collect();
        let direct = psrf(&refs).unwrap();
        protocol &= (direct.r50 - p.max_r50).abs() < 1e-9 && (direct.r975 - p.max_r975).abs() < 1e-9;
    }
    outcome(
        iid_max <= 1.02 && separated > 5.0 && protocol,
        format!(
            "i.i.d. max R50 {iid_max:.4}; separated R50 {separated:.1}; trajectory at {:?} matches halve-then-thin replay: {protocol}",
            traj.iter().map(|p| p.iteration).collect::<Vec<_>>()
        ),
    )
}

fn dic_checks() -> Outcome {
    let net = toy(1e-4);
    let store = run(&net, &SamplerSettings::new(40_000, 3, 10_000, 10_000, 3)).unwrap();
    let p_d = dic(&net, &store, store.draw_count()).unwrap().p_d;
    let mut flat = store.clone();
    let n = flat.draw_count();
    let v = flat.values[0];
    flat.values[..n].fill(v);
    let flat_pd = dic(&net, &flat, n).unwrap().p_d;
    outcome(
        flat_pd == 0.0 && (p_d - 1.0).abs() <= 0.2,
        format!("identical draws pD = {flat_pd}; vague-prior toy pD = {p_d:.3} (analytic {:.4})", 1.0 / (1.0 + 1e-4)),
    )
}

struct Experiment {
    report: ExperimentReport,
    wall: BTreeMap<String, f64>,
}

fn canonical_experiment(out: &Path) -> Experiment {
    let data = generate(&SyntheticSpec::great_lakes(1));
    let table = data.table();
    let priors = data.fit_priors().unwrap();
    let design = canonical_design();
    let res = Resources::new(&table, &priors);
    let mut wall = BTreeMap::new();
    let mut models = Vec::new();
    let mut report = None;
    // One model at a time so that wall-clock per model (sampling plus
    // diagnostics) is known.
    for cfg in &design.models {
        let single = design.clone().select(&[cfg.id.as_str()]).unwrap();
        let t0 = Instant::now();
        let r = run_design(&single, &res).unwrap();
        wall.insert(cfg.id.clone(), t0.elapsed().as_secs_f64());
        eprintln!("  {} done in {:.1} s", cfg.id, wall[&cfg.id]);
        models.extend(r.models.clone());
        report.get_or_insert(r);
    }
    let mut report = report.unwrap();
    report.models = models;
    report.write_dir(out).unwrap();
    Experiment { report, wall }
}

fn is_rolling(id: &str, w: &str) -> bool {
    id.trim_start_matches('f').starts_with(w)
}

fn closure_pattern(e: &Experiment) -> Outcome {
    let mut pass = true;
    let mut lines = Vec::new();
    let mut total = 0.0;
    for m in &e.report.models {
        let id = m.id.as_str();
        let rolling1 = is_rolling(id, "01");
        let rolling12 = is_rolling(id, "12");
        if !(rolling1 || rolling12) {
            continue;
        }
        total += e.wall[id];
        let Some(c) = &m.closure else {
            pass = false;
            lines.push(format!("{id}: no closure ({:?})", m.status));
            continue;
        };
        let mut cells = Vec::new();
        for w in [1u32, 12, 60] {
            for lake in ["SUP", "MHU"] {
                let p = c.percent(lake, w).unwrap_or(f64::NAN);
                let ok = match (w, rolling12) {
                    (1, _) => p >= 90.0,
                    (_, true) => p >= 90.0,
                    (_, false) => p < 60.0,
                };
                pass &= ok;
                cells.push(format!("{lake}{w}={p:.0}{}", if ok { "" } else { "!" }));
            }
        }
        lines.push(format!("{id} {}", cells.join(" ")));
    }
    pass &= total < 1_800.0;
    for l in &lines {
        println!("    {l}");
    }
    outcome(pass, format!("24 rolling models, total wall-clock {:.1} min (limit 30)", total / 60.0))
}

fn denominators(e: &Experiment) -> Outcome {
    let mut pass = true;
    let mut seen = Vec::new();
    for m in &e.report.models {
        if let Some(c) = &m.closure {
            for lake in ["SUP", "MHU"] {
                let d: Vec<usize> = c.rows.iter().filter(|r| r.lake == lake).map(|r| r.denominator).collect();
                pass &= d == [120, 109, 61];
                if seen.is_empty() {
                    seen = d;
                }
            }
        } else {
            pass = false;
        }
    }
    outcome(pass, format!("denominators {seen:?} for every model and lake"))
}

fn linkage(e: &Experiment) -> Outcome {
    let mut pass = true;
    let mut draws = 0;
    let mut bad = Vec::new();
    for m in &e.report.models {
        match &m.audit {
            Some(a) if a.is_clean() && a.draws == 3_000 => draws += a.draws,
            other => {
                pass = false;
                bad.push(format!("{}: {other:?}", m.id));
            }
        }
    }
    outcome(
        pass && e.report.models.len() == 26,
        format!(
            "I[MHU,t] == 0.7*Q[SUP,t], I[SUP,t] == 0, P,R > 0 on {draws} retained draws across {} models{}",
            e.report.models.len(),
            if bad.is_empty() { String::new() } else { format!("; violations: {}", bad.join("; ")) }
        ),
    )
}

fn constrained_bias(e: &Experiment) -> Outcome {
    let (Some(prot), Some(f)) = (e.report.model("PROT"), e.report.model("f12FF")) else {
        return outcome(false, "PROT or f12FF missing".into());
    };
    let sd = |m: &l2swbm::experiment::ModelReport, name: &str| m.summary(name).map(|s| s.sd);
    let mut below = 0;
    let mut ratios = Vec::new();
    for t in 1..=120 {
        let name = format!("Q[SUP,{t}]");
        if let (Some(a), Some(b)) = (sd(prot, &name), sd(f, &name)) {
            ratios.push(b / a);
            if b < 0.75 * a {
                below += 1;
            }
        }
    }
    let mut worst: (f64, String) = (0.0, String::new());
    for c in ["P", "E", "R"] {
        for lake in ["SUP", "MHU"] {
            for t in 1..=120 {
                let name = format!("{c}[{lake},{t}]");
                if let (Some(a), Some(b)) = (sd(prot, &name), sd(f, &name)) {
                    if (b - a).abs() > worst.0 {
                        worst = ((b - a).abs(), name);
                    }
                }
            }
        }
    }
    ratios.sort_by(f64::total_cmp);
    let median = ratios.get(ratios.len() / 2).copied().unwrap_or(f64::NAN);
    let q10 = sd(prot, "Q[SUP,10]").unwrap_or(f64::NAN);
    let f10 = sd(f, "Q[SUP,10]").unwrap_or(f64::NAN);
    outcome(
        below as f64 >= 0.8 * 120.0 && ratios.len() == 120 && worst.0 < 2.0,
        format!(
            "Q[SUP,t] sd ratio < 0.75 in {below}/120 months (median {median:.2}; t=10: {q10:.2} -> {f10:.2}); max P/E/R sd change {:.2} mm at {}",
            worst.0, worst.1
        ),
    )
}

fn runtime_order(e: &Experiment) -> Outcome {
    let rt = |id: &str| e.report.model(id).and_then(|m| m.runtime()).unwrap_or(f64::NAN);
    let ids: Vec<&str> = e.report.models.iter().map(|m| m.id.as_str()).collect();
    let class_mean = |w: &str| {
        let v: Vec<f64> = ids.iter().filter(|id| is_rolling(id, w)).map(|id| rt(id)).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    // Structure-matched comparisons: same process-error and bias settings,
    // differing only in the window.
    let pairs: Vec<(String, String)> = ids
        .iter()
        .filter(|id| is_rolling(id, "01"))
        .map(|id| (id.to_string(), id.replacen("01", "12", 1)))
        .collect();
    let r1_lt_r12 = pairs.iter().filter(|(a, b)| rt(a) < rt(b)).count();
    let r1: f64 = pairs.iter().map(|(a, _)| rt(a)).sum::<f64>() / pairs.len() as f64;
    let r12: f64 = pairs.iter().map(|(_, b)| rt(b)).sum::<f64>() / pairs.len() as f64;
    let cum = (rt("PROT") + rt("fPROT")) / 2.0;
    let matched12 = (rt("12NF") + rt("f12NF")) / 2.0;
    let ratio = cum / matched12;
    println!(
        "    mean sampling s: rolling-1 {:.1}, rolling-12 {:.1}, cumulative {cum:.1} (PROT {:.1}, fPROT {:.1}); 12NF {:.1}, f12NF {:.1}",
        class_mean("01"),
        class_mean("12"),
        rt("PROT"),
        rt("fPROT"),
        rt("12NF"),
        rt("f12NF")
    );
    println!("    class-mean cumulative/rolling-12 ratio {:.2} (unmatched structures, informational)", cum / class_mean("12"));
    outcome(
        r1 < r12 && r12 < cum && ratio >= 2.0,
        format!(
            "rolling-1 {r1:.1} s < rolling-12 {r12:.1} s (matched pairs, {r1_lt_r12}/12 individually) < cumulative {cum:.1} s; cumulative / matched rolling-12 = {ratio:.2} (need >= 2)"
        ),
    )
}

fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, d: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for e in fs::read_dir(d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

fn determinism(scratch: &Path) -> Outcome {
    let _ = fs::remove_dir_all(scratch);
    fs::create_dir_all(scratch).unwrap();
    let cli = |args: &[&str], threads: &str| {
        let o = Command::new(env!("CARGO_BIN_EXE_l2swbm"))
            .args(args)
            .current_dir(scratch)
            .env("L2SWBM_THREADS", threads)
            .output()
            .unwrap();
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    };
    cli(&["synth", "--out", "sys"], "1");
    let mut files = 0;
    let mut differing = Vec::new();
    let mut timing_files = 0;
    for (kind, extra) in [
        ("run", vec!["run", "--model", "f12FF", "--k", "4000"]),
        ("experiment", vec!["experiment", "--models", "PROT,01HH,f12FF", "--canonical", "--k", "2000"]),
    ] {
        let mut trees = Vec::new();
        for threads in ["1", "3"] {
            let out = format!("{kind}_{threads}");
            let mut args = extra.clone();
            args.extend(["--manifest", "sys/manifest.json", "--seed", "7", "--out", &out]);
            cli(&args, threads);
            trees.push(tree(&scratch.join(&out)));
        }
        for (p, a) in &trees[0] {
            let name = p.file_name().unwrap().to_string_lossy();
            if name == "timing.json" || name == "timing.csv" {
                timing_files += 1;
                continue;
            }
            files += 1;
            if trees[1].get(p) != Some(a) {
                differing.push(format!("{kind}/{}", p.display()));
            }
        }
        if trees[0].len() != trees[1].len() {
            differing.push(format!("{kind}: file sets differ"));
        }
    }
    outcome(
        differing.is_empty() && files > 0,
        format!(
            "{files} output files byte-identical between 1-thread and 3-thread runs ({timing_files} wall-clock timing files excluded){}",
            if differing.is_empty() { String::new() } else { format!("; differing: {}", differing.join(", ")) }
        ),
    )
}

fn main() {
    let started = Instant::now();
    let scratch = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    let mut report = |n: u32, name: &'static str, o: Outcome| {
        println!("{} [{n}] {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((n, name, o));
    };
    report(1, "conjugate toy posterior", conjugate_toy());
    report(2, "grid-oracle full conditionals", grid_oracle());
    report(3, "Thom gamma estimator", thom());
    eprintln!("running the 26-model design at K = 50,000 ...");
    let exp = canonical_experiment(&scratch.join("canonical"));
    report(4, "closure pattern", closure_pattern(&exp));
    report(5, "closure denominators", denominators(&exp));
    report(6, "PSRF", psrf_checks());
    report(7, "structural linkage", linkage(&exp));
    report(8, "constrained flow bias", constrained_bias(&exp));
    report(9, "runtime ordering", runtime_order(&exp));
    report(10, "DIC sanity", dic_checks());
    report(11, "determinism", determinism(&scratch.join("determinism")));
    let failed: Vec<u32> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    println!(
        "{} of {} criteria passed in {:.1} min{}",
        results.len() - failed.len(),
        results.len(),
        started.elapsed().as_secs_f64() / 60.0,
        if failed.is_empty() { String::new() } else { format!("; failed: {failed:?}") }
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
