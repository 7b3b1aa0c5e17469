mod common;

use l2swbm::experiment::{compare, run_design, DesignMatrix, ExperimentError, ExperimentReport, ModelStatus, Resources};
use l2swbm::network::ModelConfig;
use l2swbm::sampler::SamplerSettings;

fn strip_timing(mut r: ExperimentReport) -> ExperimentReport {
    for m in &mut r.models {
        m.timing = None;
    }
    r
}

fn design(ids: &[&str], months: usize) -> (DesignMatrix, l2swbm::ingest::ObservationTable, l2swbm::priors::PriorSpec) {
    let (data, table, priors) = common::fixture(2, months, 1);
    let settings = SamplerSettings::new(300, 3, 150, 50, 13);
    let d = DesignMatrix::canonical(table.span, data.lakes(), settings)
        .select(ids)
        .unwrap();
    (d, table, priors)
}

#[test]
fn canonical_design_at_reduced_scale_gives_26_rows() {
    let (data, table, priors) = common::fixture(2, 24, 1);
    let d = DesignMatrix::canonical(table.span, data.lakes(), SamplerSettings::new(100, 2, 50, 20, 3));
    let report = run_design(&d, &Resources::new(&table, &priors)).unwrap();
    assert_eq!(report.models.len(), 26);
    for m in &report.models {
        assert!(m.is_complete(), "{}: {:?}", m.id, m.status);
        assert!(m.audit.as_ref().unwrap().is_clean());
        let c = m.closure.as_ref().unwrap();
        // 60-month windows do not fit in 24 months
        assert_eq!(c.rows.len(), 4);
    }
}

#[test]
fn same_seed_reproduces_report_and_dropping_a_model_changes_nothing_else() {
    let (d, table, priors) = design(&["PROT", "01NF", "f12FF"], 36);
    let res = Resources::new(&table, &priors);
    let a = strip_timing(run_design(&d, &res).unwrap());
    let b = strip_timing(run_design(&d, &res).unwrap());
    assert_eq!(a, b);
    let (d2, _, _) = design(&["PROT", "f12FF"], 36);
    let c = strip_timing(run_design(&d2, &res).unwrap());
    assert_eq!(c.models[0], a.models[0]);
    assert_eq!(c.models[1], a.models[2]);
}

#[test]
fn report_round_trips_through_json_and_directory() {
    let (d, table, priors) = design(&["01NF", "12FH"], 24);
    let report = run_design(&d, &Resources::new(&table, &priors)).unwrap();
    let back = ExperimentReport::from_json(&report.to_json()).unwrap();
    assert_eq!(back, report);
    let dir = tempfile::tempdir().unwrap();
    report.write_dir(dir.path()).unwrap();
    let read = ExperimentReport::read_dir(dir.path()).unwrap();
    assert_eq!(read, report);
    for f in ["report.json", "closure.csv", "dic.csv", "convergence.csv", "timing.csv", "models.csv"] {
        let text = std::fs::read_to_string(dir.path().join(f)).unwrap();
        if f.ends_with(".csv") {
            assert!(text.starts_with("# l2swbm ") && text.lines().next().unwrap().contains("seed=13"), "{f}");
        }
    }
}

#[test]
fn comparisons() {
    let (d, table, priors) = design(&["PROT", "f12FF"], 24);
    let report = run_design(&d, &Resources::new(&table, &priors)).unwrap();
    let same = compare(&report, "PROT", "PROT", &["Q[SUP,*".into()]).unwrap();
    assert_eq!(same.rows.len(), 24);
    assert!(same.rows.iter().all(|r| r.sd_ratio == 1.0));
    let cross = compare(&report, "PROT", "f12FF", &["Q[*".into(), "P[SUP,3]".into()]).unwrap();
    assert_eq!(cross.rows.len(), 49);
    assert_eq!(cross.file_name(), "comparison_PROT_vs_f12FF.csv");
    match compare(&report, "PROT", "f12FF", &["eta_q[*".into()]) {
        Err(ExperimentError::MissingParameter { name, .. }) => assert_eq!(name, "eta_q[*"),
        other => panic!("unexpected {other:?}"),
    }
    assert!(matches!(compare(&report, "PROT", "01NF", &["Q[*".into()]), Err(ExperimentError::UnknownModel(_))));
}

#[test]
fn failing_model_is_isolated() {
    let (mut d, table, priors) = design(&["01NF", "12NF"], 24);
    let mut broken = ModelConfig::from_id("01FF", table.span, vec!["SUP".into(), "ERI".into()]).unwrap();
    broken.id = "01FF".into();
    d.models.insert(1, broken);
    let report = run_design(&d, &Resources::new(&table, &priors)).unwrap();
    assert_eq!(report.models.len(), 3);
    assert!(report.models[0].is_complete());
    assert!(matches!(&report.models[1].status, ModelStatus::Failed { reason } if reason.contains("ERI")));
    assert!(report.models[2].is_complete());
}

#[test]
fn interrupted_design_resumes_to_identical_report() {
    let (mut d, table, priors) = design(&["01NF", "12FF"], 24);
    d.settings.checkpoint_interval = 100;
    let straight = strip_timing(run_design(&d, &Resources::new(&table, &priors)).unwrap());
    let dir = tempfile::tempdir().unwrap();
    let mut res = Resources::new(&table, &priors);
    res.checkpoint_dir = Some(dir.path().to_path_buf());
    res.halt_after = Some(200);
    assert!(matches!(run_design(&d, &res), Err(ExperimentError::Interrupted { iteration: 200, .. })));
    res.halt_after = None;
    res.resume = true;
    let resumed = strip_timing(run_design(&d, &res).unwrap());
    assert_eq!(resumed, straight);
}
