//! Projected Newton method for smooth objectives under lower bounds.
//!
//! Variables are split each iteration into an active set (near their bound
//! with the gradient or the Newton step pushing outward) and a free set. The
//! free block takes a damped Newton step, active variables move onto their
//! bound, and the combined step is projected back onto the bounds along an
//! Armijo backtracking arc.
//! No randomness is involved, so identical inputs give bitwise identical
//! iterates.

use nalgebra::{DMatrix, DVector};

/// Objective with exact first and second derivatives.
pub trait TwiceDifferentiable {
    fn dim(&self) -> usize;
    fn value(&self, x: &[f64]) -> f64;
    fn value_gradient_hessian(&self, x: &[f64]) -> (f64, DVector<f64>, DMatrix<f64>);
}

#[derive(Debug, Clone, Copy)]
pub struct NewtonSettings {
    pub max_iterations: usize,
    /// Threshold on the infinity norm of the projected gradient.
    pub stationarity_tol: f64,
}

#[derive(Debug, Clone)]
pub struct NewtonOutcome {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Infinity norm of the projected gradient at `x`.
    pub stationarity: f64,
}

const ARMIJO: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 60;
const STALL_LIMIT: usize = 5;

fn project(x: &mut [f64], lower: &[f64]) {
    for (v, &l) in x.iter_mut().zip(lower) {
        if *v < l {
            *v = l;
        }
    }
}

fn projected_gradient_norm(x: &[f64], g: &DVector<f64>, lower: &[f64]) -> f64 {
    x.iter()
        .zip(g.iter())
        .zip(lower)
        .map(|((&xi, &gi), &l)| (xi - (xi - gi).max(l)).abs())
        .fold(0.0, f64::max)
}

/// Solves `(h + ridge*I) d = -g` with the ridge starting at `damping` times
/// the largest diagonal entry, raising it until the factorisation succeeds.
fn regularized_newton_step(h: &DMatrix<f64>, g: &DVector<f64>, damping: f64) -> DVector<f64> {
    let n = g.len();
    let scale = (0..n)
        .map(|i| h[(i, i)].abs())
        .fold(0.0, f64::max)
        .max(1e-300);
    let mut ridge = damping * scale;
    loop {
        let mut reg = h.clone();
        for i in 0..n {
            reg[(i, i)] += ridge;
        }
        if let Some(chol) = reg.cholesky() {
            let d = chol.solve(&(-g));
            if d.iter().all(|v| v.is_finite()) {
                return d;
            }
        }
        ridge = if ridge == 0.0 {
            scale * 1e-12
        } else {
            ridge * 10.0
        };
        if ridge > scale * 1e12 {
            // plain scaled gradient as a last resort
            return -g / scale;
        }
    }
}

/// Minimises `obj` subject to `x >= lower` (use `f64::NEG_INFINITY` for free
/// variables), starting from `x0` (projected onto the bounds first).
pub fn minimize_bounded<F: TwiceDifferentiable>(
    obj: &F,
    x0: &[f64],
    lower: &[f64],
    settings: NewtonSettings,
) -> NewtonOutcome {
    let d = obj.dim();
    assert_eq!(x0.len(), d, "start point has wrong dimension");
    assert_eq!(lower.len(), d, "bound vector has wrong dimension");

    let mut x = x0.to_vec();
    project(&mut x, lower);
    let (mut f, mut g, mut h) = obj.value_gradient_hessian(&x);
    let mut pg = projected_gradient_norm(&x, &g, lower);
    let mut iterations = 0;
    let mut stalls = 0;
    // relative Levenberg-Marquardt damping: grows while steps are cut back
    // hard, decays to zero once full steps are accepted
    let mut damping = 0.0;

    while pg > settings.stationarity_tol && iterations < settings.max_iterations {
        iterations += 1;

        let eps = pg.min(1e-3);
        let mut active: Vec<bool> = (0..d)
            .map(|i| x[i] - lower[i] <= eps && g[i] > 0.0)
            .collect();
        let mut dir = vec![0.0; d];
        // Newton step on the free block; free variables at their bound that
        // the step would push outward join the active set and the block is
        // solved again
        loop {
            let free: Vec<usize> = (0..d).filter(|&i| !active[i]).collect();
            if free.is_empty() {
                break;
            }
            let hf = DMatrix::from_fn(free.len(), free.len(), |r, c| h[(free[r], free[c])]);
            let gf = DVector::from_iterator(free.len(), free.iter().map(|&i| g[i]));
            let step = regularized_newton_step(&hf, &gf, damping);
            let mut blocked = false;
            for (&i, &s) in free.iter().zip(step.iter()) {
                dir[i] = s;
                if s < 0.0 && x[i] - lower[i] <= eps {
                    active[i] = true;
                    blocked = true;
                }
            }
            if !blocked {
                break;
            }
        }
        // active variables go onto their bound (plus a scaled gradient step
        // that the projection then clips)
        for i in (0..d).filter(|&i| active[i]) {
            dir[i] = (lower[i] - x[i]) - g[i].max(0.0) / h[(i, i)].max(1e-12);
        }

        let mut alpha: f64 = 1.0;
        let mut accepted = None;
        let mut noise_step = false;
        for _ in 0..MAX_BACKTRACKS {
            let mut trial: Vec<f64> = x.iter().zip(&dir).map(|(xi, di)| xi + alpha * di).collect();
            project(&mut trial, lower);
            let ft = obj.value(&trial);
            let predicted: f64 = (0..d).map(|i| g[i] * (x[i] - trial[i])).sum();
            if ft.is_finite() && ft <= f - ARMIJO * predicted.max(0.0) {
                accepted = Some((trial, ft));
                break;
            }
            // Close to a stationary point the Armijo test is decided by
            // rounding noise; take the full step when its value is within
            // noise and it shrinks the projected gradient.
            if alpha == 1.0 && pg < 1e-6 && ft <= f + 64.0 * f64::EPSILON * f.abs().max(1.0) {
                let (_, gt, _) = obj.value_gradient_hessian(&trial);
                if projected_gradient_norm(&trial, &gt, lower) < pg {
                    accepted = Some((trial, ft));
                    noise_step = true;
                    break;
                }
            }
            alpha *= 0.5;
        }

        let Some((trial, ft)) = accepted else {
            break;
        };
        if !noise_step && (f - ft).abs() <= 4.0 * f64::EPSILON * f.abs().max(1.0) {
            stalls += 1;
        } else {
            stalls = 0;
        }
        x = trial;
        damping = if alpha < 0.1 {
            (damping * 10.0_f64).clamp(1e-6, 1.0)
        } else if alpha == 1.0 && damping > 1e-10 {
            damping * 0.1
        } else if alpha == 1.0 {
            0.0
        } else {
            damping
        };
        (f, g, h) = obj.value_gradient_hessian(&x);
        pg = projected_gradient_norm(&x, &g, lower);
        if stalls >= STALL_LIMIT {
            break;
        }
    }

    NewtonOutcome {
        x,
        value: f,
        iterations,
        converged: pg <= settings.stationarity_tol,
        stationarity: pg,
    }
}
