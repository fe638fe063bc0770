//! Fitting monotone maps by constrained NLL minimisation.
//!
//! The ordering constraints on `w` and `b` are linear, so the fit works in
//! increment coordinates instead: the lowest-rank weight (direct mode) or
//! highest-rank weight (inverse mode) plus non-negative consecutive gaps, and
//! likewise `b[0]` plus non-negative gaps. Every ordering constraint becomes a
//! simple lower bound, which [`newton::minimize_bounded`] handles exactly, and
//! any iterate maps back to parameters that satisfy the constraints without
//! rounding slack.

pub mod newton;
pub mod simplex;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::logits::{LabelVector, LogitMatrix};
use crate::transform::{Mode, MonotoneParams, SortedProblem};
use newton::{minimize_bounded, NewtonSettings, TwiceDifferentiable};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub max_iterations: usize,
    pub stationarity_tol: f64,
    pub constraint_tol: f64,
    /// Lower bound on every weight.
    pub w_floor: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iterations: 500,
            stationarity_tol: 1e-8,
            constraint_tol: 1e-9,
            w_floor: 1e-8,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations < 1 {
            return Err(Error::InvalidConfig("max_iterations must be >= 1".into()));
        }
        for (name, v) in [
            ("stationarity_tol", self.stationarity_tol),
            ("constraint_tol", self.constraint_tol),
            ("w_floor", self.w_floor),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitResult {
    pub params: MonotoneParams,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub iterations: usize,
    pub converged: bool,
    pub constraint_violation: f64,
    /// Samples left out of the fit because their true class ranked below the
    /// retained top `k`.
    pub dropped_samples: usize,
}

/// Starting point of the fit. Direct: weights evenly spaced over `[0, 1]`
/// with the first lifted to `w_floor`; inverse: unit weights. Biases start at
/// zero.
pub fn init_params(mode: Mode, m: usize, k: usize, w_floor: f64) -> Result<MonotoneParams> {
    if k < 2 || k > m {
        return Err(Error::BadTopK { k, m });
    }
    let w = match mode {
        Mode::Direct => {
            let mut w: Vec<f64> = (0..k).map(|i| i as f64 / (k - 1) as f64).collect();
            w[0] = w[0].max(w_floor);
            w
        }
        Mode::Inverse => vec![1.0; k],
    };
    MonotoneParams::new(mode, m, w, vec![0.0; k])
}

/// NLL over increment coordinates `x = (weight increments, bias increments)`.
struct IncrementObjective<'a> {
    problem: &'a SortedProblem,
    mode: Mode,
}

impl IncrementObjective<'_> {
    fn k(&self) -> usize {
        self.problem.k()
    }

    /// Weights and biases from increments.
    fn expand(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let k = self.k();
        let mut w = vec![0.0; k];
        match self.mode {
            Mode::Direct => {
                w[0] = x[0];
                for j in 1..k {
                    w[j] = w[j - 1] + x[j];
                }
            }
            Mode::Inverse => {
                w[k - 1] = x[k - 1];
                for j in (0..k - 1).rev() {
                    w[j] = w[j + 1] + x[j];
                }
            }
        }
        let mut b = vec![0.0; k];
        b[0] = x[k];
        for j in 1..k {
            b[j] = b[j - 1] + x[k + j];
        }
        (w, b)
    }

    /// Inverse of [`Self::expand`].
    fn contract(&self, w: &[f64], b: &[f64]) -> Vec<f64> {
        let k = self.k();
        let mut x = vec![0.0; 2 * k];
        match self.mode {
            Mode::Direct => {
                x[0] = w[0];
                for j in 1..k {
                    x[j] = w[j] - w[j - 1];
                }
            }
            Mode::Inverse => {
                x[k - 1] = w[k - 1];
                for j in 0..k - 1 {
                    x[j] = w[j] - w[j + 1];
                }
            }
        }
        x[k] = b[0];
        for j in 1..k {
            x[k + j] = b[j] - b[j - 1];
        }
        x
    }

    fn lower_bounds(&self, w_floor: f64) -> Vec<f64> {
        let k = self.k();
        let mut lower = vec![0.0; 2 * k];
        match self.mode {
            Mode::Direct => lower[0] = w_floor,
            Mode::Inverse => lower[k - 1] = w_floor,
        }
        lower[k] = f64::NEG_INFINITY;
        lower
    }

    /// Applies the transpose of the expansion map to a vector of parameter
    /// space sensitivities.
    fn pull_back(&self, v: &mut [f64]) {
        let k = self.k();
        match self.mode {
            // w_j depends on x_0..=x_j: suffix sums
            Mode::Direct => {
                for j in (0..k - 1).rev() {
                    v[j] += v[j + 1];
                }
            }
            // w_j depends on x_j..k: prefix sums
            Mode::Inverse => {
                for j in 1..k {
                    v[j] += v[j - 1];
                }
            }
        }
        for j in (k..2 * k - 1).rev() {
            v[j] += v[j + 1];
        }
    }
}

impl TwiceDifferentiable for IncrementObjective<'_> {
    fn dim(&self) -> usize {
        2 * self.k()
    }

    fn value(&self, x: &[f64]) -> f64 {
        let (w, b) = self.expand(x);
        self.problem.loss(self.mode, &w, &b)
    }

    fn value_gradient_hessian(&self, x: &[f64]) -> (f64, DVector<f64>, DMatrix<f64>) {
        let (w, b) = self.expand(x);
        let (loss, mut grad, mut hess) = self.problem.loss_gradient_hessian(self.mode, &w, &b);
        self.pull_back(grad.as_mut_slice());
        let d = self.dim();
        // T' H T: pull back every column, then every row
        for c in 0..d {
            self.pull_back(hess.column_mut(c).as_mut_slice());
        }
        let mut ht = hess.transpose();
        for c in 0..d {
            self.pull_back(ht.column_mut(c).as_mut_slice());
        }
        // Adding a constant to every bias leaves the softmax unchanged, so
        // b[0] is held at its starting value to remove the flat direction.
        let pinned = self.k();
        grad[pinned] = 0.0;
        ht.row_mut(pinned).fill(0.0);
        ht.column_mut(pinned).fill(0.0);
        ht[(pinned, pinned)] = 1.0;
        (loss, grad, ht)
    }
}

/// Fits a monotone map on `(z, y)`, keeping the top `k` ranks (`k == m` for
/// the full map).
pub fn fit_mcct(
    z: &LogitMatrix,
    y: &LabelVector,
    mode: Mode,
    k: usize,
    cfg: &SolverConfig,
) -> Result<FitResult> {
    cfg.validate()?;
    y.check_against(z.n(), z.m())?;
    if z.n() < 2 {
        return Err(Error::TooFewSamples(format!(
            "need at least 2 samples, got {}",
            z.n()
        )));
    }
    let m = z.m();
    if k < 2 || k > m {
        return Err(Error::BadTopK { k, m });
    }
    if y.iter().all(|l| l == y.get(0)) {
        log::warn!(
            "every calibration label is {}; the fit is degenerate",
            y.get(0)
        );
    }
    crate::logits::validate_distinct(z);

    let (problem, dropped) = SortedProblem::from_logits_topk(z, y, k)?;
    if dropped > 0 {
        log::info!("top-{k} truncation dropped {dropped} of {} samples", z.n());
    }
    let objective = IncrementObjective {
        problem: &problem,
        mode,
    };
    let init = init_params(mode, m, k, cfg.w_floor)?;
    let x0 = objective.contract(init.w(), init.b());
    let lower = objective.lower_bounds(cfg.w_floor);
    let initial_loss = objective.value(&x0);

    let outcome = minimize_bounded(
        &objective,
        &x0,
        &lower,
        NewtonSettings {
            max_iterations: cfg.max_iterations,
            stationarity_tol: cfg.stationarity_tol,
        },
    );

    let (x, final_loss) = if outcome.value <= initial_loss {
        (outcome.x, outcome.value)
    } else {
        (x0, initial_loss)
    };
    let (w, b) = objective.expand(&x);
    let params = MonotoneParams::new(mode, m, w, b)?;
    let floor_gap =
        (cfg.w_floor - params.w().iter().copied().fold(f64::INFINITY, f64::min)).max(0.0);
    let constraint_violation = params.constraints().violation().max(floor_gap);
    if !outcome.converged {
        log::warn!(
            "{mode} fit stopped after {} iterations with projected gradient {:.3e}",
            outcome.iterations,
            outcome.stationarity
        );
    }
    Ok(FitResult {
        params,
        initial_loss,
        final_loss,
        iterations: outcome.iterations,
        converged: outcome.converged && constraint_violation <= cfg.constraint_tol,
        constraint_violation,
        dropped_samples: dropped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::logits::Rows;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn init_examples() {
        let p = init_params(Mode::Direct, 3, 3, 1e-8).unwrap();
        assert_eq!(p.w(), &[1e-8, 0.5, 1.0]);
        assert_eq!(p.b(), &[0.0; 3]);
        let p = init_params(Mode::Inverse, 7, 5, 1e-8).unwrap();
        assert_eq!(p.w(), &[1.0; 5]);
        assert_eq!(p.b(), &[0.0; 5]);
        for mode in [Mode::Direct, Mode::Inverse] {
            for k in 2..12 {
                let p = init_params(mode, 12, k, 1e-8).unwrap();
                assert_eq!(p.constraints().violation(), 0.0);
            }
        }
        assert!(init_params(Mode::Direct, 3, 1, 1e-8).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(SolverConfig::default().validate().is_ok());
        let bad = SolverConfig {
            w_floor: 0.0,
            ..SolverConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = SolverConfig {
            max_iterations: 0,
            ..SolverConfig::default()
        };
        assert!(bad.validate().is_err());
        let cfg: SolverConfig = serde_json::from_str(r#"{"max_iterations": 20}"#).unwrap();
        assert_eq!(cfg.max_iterations, 20);
        assert_eq!(cfg.w_floor, 1e-8);
        assert!(serde_json::from_str::<SolverConfig>(r#"{"max_iter": 20}"#).is_err());
    }

    #[test]
    fn increments_round_trip_and_pull_back() {
        let z = LogitMatrix::new(vec![0.1, 0.5, 0.2, 0.9, 0.3, 0.0], 2, 3).unwrap();
        let y = LabelVector::new(vec![1, 0], 3).unwrap();
        let problem = SortedProblem::from_logits(&z, &y).unwrap();
        for mode in [Mode::Direct, Mode::Inverse] {
            let obj = IncrementObjective {
                problem: &problem,
                mode,
            };
            let x = vec![0.3, 0.2, 0.7, -0.4, 0.1, 0.25];
            let (w, b) = obj.expand(&x);
            let back = obj.contract(&w, &b);
            for (a, c) in x.iter().zip(&back) {
                assert_abs_diff_eq!(a, c, epsilon = 1e-15);
            }
            // pull_back(v) . x == v . expand(x) for linear expansion
            let v = [1.5, -0.5, 2.0, 0.25, -1.0, 3.0];
            let mut pv = v.to_vec();
            obj.pull_back(&mut pv);
            let lhs: f64 = pv.iter().zip(&x).map(|(a, c)| a * c).sum();
            let theta = [w, b].concat();
            let rhs: f64 = v.iter().zip(&theta).map(|(a, c)| a * c).sum();
            assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-12);
        }
    }

    fn fixture(seed: u64, n: usize, m: usize) -> (LogitMatrix, LabelVector) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..n * m).map(|_| rng.random_range(-4.0..4.0)).collect();
        let z = LogitMatrix::new(data, n, m).unwrap();
        // labels correlated with the argmax so the fit has signal
        let labels = (0..n)
            .map(|i| {
                if rng.random_bool(0.6) {
                    crate::logits::argmax(z.row(i))
                } else {
                    rng.random_range(0..m)
                }
            })
            .collect();
        (z, LabelVector::new(labels, m).unwrap())
    }

    #[test]
    fn fit_is_feasible_descending_and_deterministic() {
        let (z, y) = fixture(4, 200, 5);
        let cfg = SolverConfig::default();
        for mode in [Mode::Direct, Mode::Inverse] {
            let a = fit_mcct(&z, &y, mode, 5, &cfg).unwrap();
            let b = fit_mcct(&z, &y, mode, 5, &cfg).unwrap();
            assert_eq!(a, b);
            assert!(a.converged, "{a:?}");
            assert!(a.final_loss <= a.initial_loss);
            assert!(a.constraint_violation <= cfg.constraint_tol);
            assert!(a.params.w().iter().all(|&w| w >= cfg.w_floor));
        }
    }

    #[test]
    fn modes_agree_at_the_optimum() {
        let (z, y) = fixture(8, 300, 6);
        let cfg = SolverConfig::default();
        let d = fit_mcct(&z, &y, Mode::Direct, 6, &cfg).unwrap();
        let i = fit_mcct(&z, &y, Mode::Inverse, 6, &cfg).unwrap();
        assert_abs_diff_eq!(d.final_loss, i.final_loss, epsilon = 1e-6);
    }

    #[test]
    fn rejects_bad_inputs() {
        let (z, y) = fixture(1, 10, 4);
        let cfg = SolverConfig::default();
        assert!(matches!(
            fit_mcct(&z, &y, Mode::Direct, 1, &cfg),
            Err(Error::BadTopK { .. })
        ));
        assert!(matches!(
            fit_mcct(&z, &y, Mode::Direct, 5, &cfg),
            Err(Error::BadTopK { .. })
        ));
        let one = z.select_rows(&[0]);
        assert!(fit_mcct(&one, &y.select(&[0]), Mode::Direct, 4, &cfg).is_err());
    }

    #[test]
    fn iteration_cap_reports_non_convergence() {
        let (z, y) = fixture(2, 100, 4);
        let cfg = SolverConfig {
            max_iterations: 1,
            ..SolverConfig::default()
        };
        let r = fit_mcct(&z, &y, Mode::Direct, 4, &cfg).unwrap();
        assert!(!r.converged);
        assert!(r.final_loss <= r.initial_loss);
    }
}
