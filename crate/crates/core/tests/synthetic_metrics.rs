use mcct_core::baselines::fit_ts;
use mcct_core::data::{generate_synthetic, SynthConfig};
use mcct_core::logits::softmax_rows;
use mcct_core::metrics::{confidence_and_correct, ece, ece_kde, DEFAULT_BINS};
use mcct_core::CalibratedModel;

fn cfg(n: usize, c: f64, seed: u64) -> SynthConfig {
    SynthConfig {
        n,
        m: 10,
        alpha: 0.5,
        overconfidence: c,
        noise_sd: 0.0,
        seed,
    }
}

#[test]
fn calibrated_generator_has_small_error_under_every_estimator() {
    let d = generate_synthetic(&cfg(50_000, 1.0, 31)).unwrap();
    let p = softmax_rows(&d.logits);
    let (binned, _) = ece(&p, &d.labels, DEFAULT_BINS).unwrap();
    let kde = ece_kde(&p, &d.labels).unwrap();
    assert!(binned <= 0.02, "ece {binned}");
    assert!(kde <= 0.01, "ece_kde {kde}");

    let CalibratedModel::Ts { temperature } = fit_ts(&d.logits, &d.labels).unwrap() else {
        unreachable!()
    };
    assert!((temperature - 1.0).abs() <= 0.05);
}

#[test]
fn overconfident_generator_shows_a_confidence_gap() {
    let d = generate_synthetic(&cfg(50_000, 2.5, 32)).unwrap();
    let (conf, correct) = confidence_and_correct(&softmax_rows(&d.logits), &d.labels);
    let mean_conf = conf.iter().sum::<f64>() / conf.len() as f64;
    let acc = correct.iter().filter(|&&c| c).count() as f64 / correct.len() as f64;
    assert!(
        mean_conf - acc >= 0.05,
        "confidence {mean_conf} accuracy {acc}"
    );
}

#[test]
fn kde_and_binned_estimates_agree_on_smooth_data() {
    for (c, seed) in [(1.0, 33), (1.5, 34), (2.5, 35), (0.7, 36)] {
        let d = generate_synthetic(&cfg(50_000, c, seed)).unwrap();
        let p = softmax_rows(&d.logits);
        let (binned, _) = ece(&p, &d.labels, DEFAULT_BINS).unwrap();
        let kde = ece_kde(&p, &d.labels).unwrap();
        assert!(
            (kde - binned).abs() <= 0.02,
            "c = {c}: ece {binned} kde {kde}"
        );
    }
}
