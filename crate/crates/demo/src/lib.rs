//! WebAssembly bindings behind the static demo page.
//!
//! Every entry point takes and returns JSON strings so the page needs no
//! generated type glue beyond `wasm-bindgen`'s string passing. The plain Rust
//! functions are public for native testing; the `js_*` wrappers convert
//! errors into JavaScript exceptions.

use mcct_core::data::{generate_synthetic, split_dataset, SynthConfig};
use mcct_core::logits::softmax_rows;
use mcct_core::metrics::{evaluate, MetricReport};
use mcct_core::{fit_method, CalibratedModel, FitOptions, FitSummary, LogitMatrix, Method};
use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::*;

#[derive(Debug, thiserror::Error)]
pub enum DemoError {
    #[error(transparent)]
    Core(#[from] mcct_core::Error),
    #[error("invalid JSON: {0}")]
    Json(#[from] serde_json::Error),
}

pub type DemoResult<T> = std::result::Result<T, DemoError>;

/// Synthetic experiment settings sent by the page.
#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(default)]
pub struct Experiment {
    pub n: usize,
    pub m: usize,
    pub alpha: f64,
    pub overconfidence: f64,
    pub noise_sd: f64,
    pub calib_fraction: f64,
    pub bins: usize,
    pub seed: u64,
}

impl Default for Experiment {
    fn default() -> Self {
        Self {
            n: 3000,
            m: 10,
            alpha: 0.5,
            overconfidence: 2.5,
            noise_sd: 0.0,
            calib_fraction: 0.5,
            bins: 15,
            seed: 0,
        }
    }
}

#[derive(Debug, Serialize)]
pub struct FitReport {
    pub model: CalibratedModel,
    pub summary: FitSummary,
    pub before: MetricReport,
    pub after: MetricReport,
}

#[derive(Debug, Serialize)]
pub struct MethodScore {
    pub method: Method,
    pub ece: f64,
    pub nll: f64,
    pub accuracy: f64,
    pub prediction_change_rate: f64,
}

#[derive(Debug, Serialize)]
pub struct RowCalibration {
    pub before: Vec<f64>,
    pub after: Vec<f64>,
}

struct Prepared {
    calib: (LogitMatrix, mcct_core::LabelVector),
    test: (LogitMatrix, mcct_core::LabelVector),
    before: mcct_core::ProbMatrix,
}

fn prepare(exp: &Experiment) -> DemoResult<Prepared> {
    let data = generate_synthetic(&SynthConfig {
        n: exp.n,
        m: exp.m,
        alpha: exp.alpha,
        overconfidence: exp.overconfidence,
        noise_sd: exp.noise_sd,
        seed: exp.seed,
    })?;
    let (calib, test) = split_dataset(&data.logits, &data.labels, exp.calib_fraction, exp.seed)?;
    let before = softmax_rows(&test.logits);
    Ok(Prepared {
        calib: (calib.logits, calib.labels),
        test: (test.logits, test.labels),
        before,
    })
}

/// Generates a synthetic dataset, fits `method` on the calibration part and
/// scores the test part before and after calibration.
pub fn fit_synthetic(experiment_json: &str, method: &str) -> DemoResult<String> {
    let exp: Experiment = serde_json::from_str(experiment_json)?;
    let method: Method = method.parse()?;
    let data = prepare(&exp)?;
    let opts = FitOptions {
        hb_bins: exp.bins,
        ..FitOptions::default()
    };
    let (model, summary) = fit_method(method, &data.calib.0, &data.calib.1, &opts)?;
    let (z, y) = &data.test;
    let report = FitReport {
        before: evaluate(&data.before, y, &data.before, exp.bins)?,
        after: evaluate(&model.apply(z)?, y, &data.before, exp.bins)?,
        model,
        summary,
    };
    Ok(serde_json::to_string(&report)?)
}

/// Fits every method on the same split and returns their test scores.
pub fn compare_methods(experiment_json: &str) -> DemoResult<String> {
    let exp: Experiment = serde_json::from_str(experiment_json)?;
    let data = prepare(&exp)?;
    let opts = FitOptions {
        hb_bins: exp.bins,
        ..FitOptions::default()
    };
    let (z, y) = &data.test;
    let mut scores = Vec::with_capacity(Method::ALL.len());
    for method in Method::ALL {
        let (model, _) = fit_method(method, &data.calib.0, &data.calib.1, &opts)?;
        let r = evaluate(&model.apply(z)?, y, &data.before, exp.bins)?;
        scores.push(MethodScore {
            method,
            ece: r.ece,
            nll: r.nll,
            accuracy: r.accuracy,
            prediction_change_rate: r.prediction_change_rate,
        });
    }
    Ok(serde_json::to_string(&scores)?)
}

/// Softmax of one logit row before and after a fitted model.
pub fn calibrate_row(model_json: &str, logits: &[f64]) -> DemoResult<String> {
    let model: CalibratedModel = serde_json::from_str(model_json)?;
    model.validate()?;
    let z = LogitMatrix::new(logits.to_vec(), 1, logits.len())?;
    let row = RowCalibration {
        before: softmax_rows(&z).as_slice().to_vec(),
        after: model.apply(&z)?.as_slice().to_vec(),
    };
    Ok(serde_json::to_string(&row)?)
}

fn to_js(e: DemoError) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen(js_name = fitSynthetic)]
pub fn js_fit_synthetic(experiment_json: &str, method: &str) -> Result<String, JsError> {
    fit_synthetic(experiment_json, method).map_err(to_js)
}

#[wasm_bindgen(js_name = compareMethods)]
pub fn js_compare_methods(experiment_json: &str) -> Result<String, JsError> {
    compare_methods(experiment_json).map_err(to_js)
}

#[wasm_bindgen(js_name = calibrateRow)]
pub fn js_calibrate_row(model_json: &str, logits: Vec<f64>) -> Result<String, JsError> {
    calibrate_row(model_json, &logits).map_err(to_js)
}
