use mcct_core::baselines::{fit_method, FitOptions, Method};
use mcct_core::data::{generate_synthetic, SynthConfig};
use mcct_core::logits::{argmax_rows, nll, softmax_rows};
use mcct_core::metrics::{ece, ranking_diagnostics, DEFAULT_BINS};
use mcct_core::{fit_mcct, CalibratedModel, LabelVector, LogitMatrix, Mode, SolverConfig};

fn synth(n: usize, c: f64, seed: u64) -> (LogitMatrix, LabelVector) {
    let d = generate_synthetic(&SynthConfig {
        n,
        m: 10,
        alpha: 0.5,
        overconfidence: c,
        noise_sd: 0.0,
        seed,
    })
    .unwrap();
    (d.logits, d.labels)
}

#[test]
fn calibrated_logits_get_a_near_identity_fit() {
    let (zc, yc) = synth(20_000, 1.0, 21);
    let (zt, yt) = synth(20_000, 1.0, 22);
    let fit = fit_mcct(&zc, &yc, Mode::Direct, 10, &SolverConfig::default()).unwrap();
    let before = nll(&softmax_rows(&zt), &yt).unwrap();
    let after = nll(&CalibratedModel::Mcct(fit.params).apply(&zt).unwrap(), &yt).unwrap();
    assert!(
        (after - before).abs() <= 1e-3 * before,
        "test NLL {before} -> {after}"
    );
}

#[test]
fn scaled_logits_calibrate_close_to_the_oracle_temperature() {
    let (zc, yc) = synth(5_000, 2.5, 23);
    let (zt, yt) = synth(10_000, 2.5, 24);
    let oracle = CalibratedModel::Ts { temperature: 2.5 }.apply(&zt).unwrap();
    let (oracle_ece, _) = ece(&oracle, &yt, DEFAULT_BINS).unwrap();

    let direct = fit_mcct(&zc, &yc, Mode::Direct, 10, &SolverConfig::default()).unwrap();
    assert!(direct.converged);
    let w = direct.params.w();
    assert!(w.windows(2).all(|p| p[0] <= p[1]));
    let mean_w = w.iter().sum::<f64>() / w.len() as f64;
    assert!((mean_w - 0.4).abs() < 0.15, "w = {w:?}");
    let p = CalibratedModel::Mcct(direct.params.clone())
        .apply(&zt)
        .unwrap();
    let (mcct_ece, _) = ece(&p, &yt, DEFAULT_BINS).unwrap();
    assert!(
        mcct_ece <= 2.0 * oracle_ece,
        "mcct {mcct_ece} oracle {oracle_ece}"
    );

    let inverse = fit_mcct(&zc, &yc, Mode::Inverse, 10, &SolverConfig::default()).unwrap();
    assert!(
        (inverse.final_loss - direct.final_loss).abs() <= 1e-6,
        "direct {} inverse {}",
        direct.final_loss,
        inverse.final_loss
    );
}

#[test]
fn order_preserving_methods_never_change_predictions() {
    let (zc, yc) = synth(2_000, 2.5, 25);
    let (zt, _) = synth(3_000, 2.5, 26);
    let base = softmax_rows(&zt);
    for method in Method::ALL.into_iter().filter(|m| m.preserves_ranking()) {
        let (model, _) = fit_method(method, &zc, &yc, &FitOptions::default()).unwrap();
        let p = model.apply(&zt).unwrap();
        assert_eq!(argmax_rows(&p), argmax_rows(&zt), "{method}");
        let d = ranking_diagnostics(&base, &p, 0.7).unwrap();
        assert_eq!(d.prediction_change_rate, 0.0, "{method}");
        assert_eq!(d.uncertain_alteration_rate, 0.0, "{method}");
    }
}

#[test]
fn full_topk_equals_plain_fit() {
    let (zc, yc) = synth(1_000, 2.5, 27);
    let plain = fit_method(Method::Mcct, &zc, &yc, &FitOptions::default()).unwrap();
    let topk = fit_method(
        Method::Mcct,
        &zc,
        &yc,
        &FitOptions {
            top_k: Some(10),
            ..FitOptions::default()
        },
    )
    .unwrap();
    assert_eq!(plain.0, topk.0);
}
