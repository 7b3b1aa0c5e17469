use l2swbm_web::{closure_demo, fit_gamma, toy_posterior};
use serde_json::Value;

fn parse(s: String) -> Value {
    serde_json::from_str(&s).unwrap()
}

#[test]
fn gamma_fit_of_small_history() {
    let r = parse(fit_gamma("1, 2\n3").ok().unwrap());
    assert!((r["shape"].as_f64().unwrap() - 5.376).abs() < 0.01);
    assert!((r["rate"].as_f64().unwrap() - 2.688).abs() < 0.005);
    assert_eq!(r["n"], 3);
}

#[test]
fn toy_histogram_covers_all_draws() {
    let r = parse(toy_posterior(2.0, 1.0, 20_000, 40, 1).ok().unwrap());
    let counts: u64 = r["counts"].as_array().unwrap().iter().map(|c| c.as_u64().unwrap()).sum();
    assert_eq!(counts, 10_000);
    assert!((r["mean"].as_f64().unwrap() - 1.0).abs() < 0.05);
    assert_eq!(r["exact_mean"].as_f64().unwrap(), 1.0);
}

#[test]
fn closure_table_for_one_model() {
    let r = parse(closure_demo("12FF", 72, 600, 1).ok().unwrap());
    let rows = r["closure"].as_array().unwrap();
    assert_eq!(rows.len(), 6);
    assert_eq!(rows[1]["denominator"], 61);
}
