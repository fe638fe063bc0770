//! Sequential quadratic programming over the probability simplex.
//!
//! Meant for a handful of variables: every quadratic subproblem is solved
//! exactly by enumerating the faces of the simplex and solving the
//! equality-constrained KKT system on each.

use nalgebra::{DMatrix, DVector};

use super::newton::TwiceDifferentiable;

#[derive(Debug, Clone)]
pub struct SimplexOutcome {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Exact minimiser of `g.(u - x) + 0.5 (u - x)' H (u - x)` over the simplex.
fn qp_on_simplex(x: &[f64], g: &DVector<f64>, h: &DMatrix<f64>) -> Vec<f64> {
    let d = x.len();
    let trace: f64 = (0..d).map(|i| h[(i, i)].abs()).sum();
    let ridge = 1e-12 * trace.max(1e-12);
    let model = |u: &[f64]| -> f64 {
        let v = DVector::from_iterator(d, u.iter().zip(x).map(|(a, b)| a - b));
        g.dot(&v) + 0.5 * v.dot(&(h * &v)) + 0.5 * ridge * v.norm_squared()
    };

    let mut best: Option<(f64, Vec<f64>)> = None;
    for mask in 1u32..(1 << d) {
        let support: Vec<usize> = (0..d).filter(|&i| mask & (1 << i) != 0).collect();
        let s = support.len();
        // unknowns: v_S and the multiplier of sum(u) = 1
        let mut kkt = DMatrix::zeros(s + 1, s + 1);
        let mut rhs = DVector::zeros(s + 1);
        for (r, &i) in support.iter().enumerate() {
            for (c, &j) in support.iter().enumerate() {
                kkt[(r, c)] = h[(i, j)];
            }
            kkt[(r, r)] += ridge;
            kkt[(r, s)] = -1.0;
            kkt[(s, r)] = 1.0;
            // v_j = -x_j off the support
            let off: f64 = (0..d)
                .filter(|j| mask & (1 << j) == 0)
                .map(|j| h[(i, j)] * -x[j])
                .sum();
            rhs[r] = -g[i] - off;
        }
        rhs[s] = 1.0 - support.iter().map(|&i| x[i]).sum::<f64>();
        let Some(sol) = kkt.lu().solve(&rhs) else {
            continue;
        };
        let mut u = vec![0.0; d];
        for (r, &i) in support.iter().enumerate() {
            u[i] = x[i] + sol[r];
        }
        if u.iter().any(|&v| v.is_nan() || v < -1e-14) {
            continue;
        }
        for v in u.iter_mut() {
            *v = v.max(0.0);
        }
        let total: f64 = u.iter().sum();
        u.iter_mut().for_each(|v| *v /= total);
        let q = model(&u);
        if best.as_ref().is_none_or(|(bq, _)| q < *bq) {
            best = Some((q, u));
        }
    }
    best.map(|(_, u)| u).unwrap_or_else(|| x.to_vec())
}

/// Minimises a convex objective over `{x >= 0, sum(x) = 1}`.
pub fn minimize_on_simplex<F: TwiceDifferentiable>(
    obj: &F,
    x0: &[f64],
    max_iterations: usize,
    tol: f64,
) -> SimplexOutcome {
    let d = obj.dim();
    let mut x = x0.to_vec();
    let (mut f, mut g, mut h) = obj.value_gradient_hessian(&x);
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iterations {
        iterations += 1;
        let target = qp_on_simplex(&x, &g, &h);
        let dir: Vec<f64> = target.iter().zip(&x).map(|(t, xi)| t - xi).collect();
        let slope: f64 = dir.iter().zip(g.iter()).map(|(a, b)| a * b).sum();
        // Frank-Wolfe style gap: zero exactly at a KKT point
        if -slope <= tol {
            converged = true;
            break;
        }
        let mut alpha = 1.0;
        let mut moved = false;
        for _ in 0..60 {
            let trial: Vec<f64> = x.iter().zip(&dir).map(|(xi, di)| xi + alpha * di).collect();
            let ft = obj.value(&trial);
            if ft.is_finite() && ft <= f + 1e-4 * alpha * slope {
                x = trial;
                moved = true;
                break;
            }
            alpha *= 0.5;
        }
        if !moved {
            break;
        }
        (f, g, h) = obj.value_gradient_hessian(&x);
    }
    debug_assert_eq!(x.len(), d);
    SimplexOutcome {
        x,
        value: f,
        iterations,
        converged,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    /// squared distance to a target point
    struct Dist(Vec<f64>);

    impl TwiceDifferentiable for Dist {
        fn dim(&self) -> usize {
            self.0.len()
        }
        fn value(&self, x: &[f64]) -> f64 {
            x.iter().zip(&self.0).map(|(a, b)| (a - b).powi(2)).sum()
        }
        fn value_gradient_hessian(&self, x: &[f64]) -> (f64, DVector<f64>, DMatrix<f64>) {
            let g =
                DVector::from_iterator(x.len(), x.iter().zip(&self.0).map(|(a, b)| 2.0 * (a - b)));
            (self.value(x), g, DMatrix::identity(x.len(), x.len()) * 2.0)
        }
    }

    #[test]
    fn interior_target_is_reached() {
        let out = minimize_on_simplex(&Dist(vec![0.2, 0.3, 0.5]), &[1.0 / 3.0; 3], 50, 1e-14);
        assert!(out.converged);
        for (a, b) in out.x.iter().zip([0.2, 0.3, 0.5]) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn projection_onto_an_edge_and_a_vertex() {
        // Euclidean projection of (0.8, 0.6, -0.4) is (0.6, 0.4, 0)
        let out = minimize_on_simplex(&Dist(vec![0.8, 0.6, -0.4]), &[1.0 / 3.0; 3], 50, 1e-14);
        assert_abs_diff_eq!(out.x[0], 0.6, epsilon = 1e-12);
        assert_abs_diff_eq!(out.x[1], 0.4, epsilon = 1e-12);
        assert_eq!(out.x[2], 0.0);

        let out = minimize_on_simplex(&Dist(vec![3.0, 0.0, 0.0]), &[1.0 / 3.0; 3], 50, 1e-14);
        assert_eq!(out.x, vec![1.0, 0.0, 0.0]);
    }
}
