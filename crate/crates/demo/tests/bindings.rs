use mcct_demo::{calibrate_row, compare_methods, fit_synthetic};
use serde_json::Value;

const SMALL: &str = r#"{"n": 1200, "m": 5, "seed": 3}"#;

#[test]
fn fit_synthetic_reduces_ece_and_keeps_accuracy() {
    let report: Value = serde_json::from_str(&fit_synthetic(SMALL, "mcct").unwrap()).unwrap();
    let before = report["before"]["ece"].as_f64().unwrap();
    let after = report["after"]["ece"].as_f64().unwrap();
    assert!(after < before / 2.0, "ECE {before} -> {after}");
    assert_eq!(report["before"]["accuracy"], report["after"]["accuracy"]);
    assert_eq!(
        report["after"]["prediction_change_rate"].as_f64(),
        Some(0.0)
    );
    assert_eq!(report["model"]["kind"], "mcct");
    assert_eq!(
        report["after"]["bins"]["bins"].as_array().unwrap().len(),
        15
    );
}

#[test]
fn calibrate_row_uses_fitted_model() {
    let report: Value = serde_json::from_str(&fit_synthetic(SMALL, "ts").unwrap()).unwrap();
    let model = report["model"].to_string();
    let t = report["model"]["temperature"].as_f64().unwrap();
    let logits = [2.0, -1.0, 0.5, 0.0, 3.0];
    let row: Value = serde_json::from_str(&calibrate_row(&model, &logits).unwrap()).unwrap();
    let after: Vec<f64> = serde_json::from_value(row["after"].clone()).unwrap();
    let denom: f64 = logits.iter().map(|v| (v / t).exp()).sum();
    for (p, v) in after.iter().zip(logits) {
        assert!((p - (v / t).exp() / denom).abs() < 1e-12);
    }
    let before: Vec<f64> = serde_json::from_value(row["before"].clone()).unwrap();
    assert!((before.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn compare_methods_covers_every_method() {
    let scores: Value = serde_json::from_str(&compare_methods(SMALL).unwrap()).unwrap();
    let names: Vec<&str> = scores
        .as_array()
        .unwrap()
        .iter()
        .map(|s| s["method"].as_str().unwrap())
        .collect();
    assert_eq!(
        names,
        ["mcct", "mcct-i", "ts", "vs", "hb", "ets-nll", "ets-mse"]
    );
}

#[test]
fn bad_input_is_an_error() {
    assert!(fit_synthetic("{", "mcct").is_err());
    assert!(fit_synthetic(SMALL, "platt").is_err());
    assert!(fit_synthetic(r#"{"m": 1}"#, "ts").is_err());
    assert!(calibrate_row(r#"{"kind": "ts", "temperature": 1.0}"#, &[]).is_err());
}
