//! Bounded quasi-Newton minimization.
//!
//! Limited-memory BFGS with gradient projection onto box constraints and a
//! backtracking Armijo line search along the projected path. Deterministic:
//! the iterate sequence is a pure function of the objective and the start.
//! Objectives signal failure by returning a non-finite value; such points
//! are rejected by the line search.

use nalgebra::DVector;
use std::collections::VecDeque;

/// Stored curvature pairs (s, y, 1 / s'y).
type History = VecDeque<(DVector<f64>, DVector<f64>, f64)>;

#[derive(Debug, Clone)]
pub struct BoxBounds {
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

impl BoxBounds {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Self {
        assert_eq!(lower.len(), upper.len());
        assert!(lower.iter().zip(&upper).all(|(l, u)| l <= u));
        Self {
            lower: DVector::from_vec(lower),
            upper: DVector::from_vec(upper),
        }
    }

    pub fn unit_cube(dim: usize) -> Self {
        Self::new(vec![0.0; dim], vec![1.0; dim])
    }

    pub fn clamp(&self, x: &mut DVector<f64>) {
        for i in 0..x.len() {
            x[i] = x[i].clamp(self.lower[i], self.upper[i]);
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptimOptions {
    pub max_iters: usize,
    /// Convergence on the infinity norm of the projected gradient.
    pub grad_tol: f64,
    /// Number of stored curvature pairs.
    pub memory: usize,
}

impl Default for OptimOptions {
    fn default() -> Self {
        Self {
            max_iters: 200,
            grad_tol: 1e-8,
            memory: 8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptimOutcome {
    pub x: DVector<f64>,
    pub f: f64,
    pub iterations: usize,
    pub converged: bool,
    pub evaluations: usize,
}

const ARMIJO_C1: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 40;
const BOUND_EPS: f64 = 1e-10;

fn projected_gradient(x: &DVector<f64>, g: &DVector<f64>, b: &BoxBounds) -> DVector<f64> {
    DVector::from_fn(x.len(), |i, _| {
        let pinned_low = (x[i] - b.lower[i]).abs() <= BOUND_EPS && g[i] > 0.0;
        let pinned_high = (b.upper[i] - x[i]).abs() <= BOUND_EPS && g[i] < 0.0;
        if pinned_low || pinned_high {
            0.0
        } else {
            g[i]
        }
    })
}

/// Two-loop recursion for the L-BFGS direction `-H g`.
fn lbfgs_direction(g: &DVector<f64>, hist: &History) -> DVector<f64> {
    let mut q = g.clone();
    let mut alphas = Vec::with_capacity(hist.len());
    for (s, y, rho) in hist.iter().rev() {
        let a = rho * s.dot(&q);
        q.axpy(-a, y, 1.0);
        alphas.push(a);
    }
    let gamma = hist
        .back()
        .map(|(s, y, _)| s.dot(y) / y.dot(y))
        .unwrap_or(1.0);
    let mut r = q * gamma;
    for ((s, y, rho), a) in hist.iter().zip(alphas.iter().rev()) {
        let beta = rho * y.dot(&r);
        r.axpy(a - beta, s, 1.0);
    }
    -r
}

/// Minimize `f` over a box. `eval` returns the objective value and gradient.
pub fn minimize_bounded<F>(
    mut eval: F,
    x0: &DVector<f64>,
    bounds: &BoxBounds,
    opts: &OptimOptions,
) -> OptimOutcome
where
    F: FnMut(&DVector<f64>) -> (f64, DVector<f64>),
{
    let mut x = x0.clone();
    bounds.clamp(&mut x);
    let (mut fx, mut g) = eval(&x);
    let mut n_eval = 1usize;
    let mut hist: History = VecDeque::new();
    let mut converged = false;
    let mut iter = 0usize;

    if !fx.is_finite() {
        return OptimOutcome {
            x,
            f: fx,
            iterations: 0,
            converged: false,
            evaluations: n_eval,
        };
    }

    while iter < opts.max_iters {
        let pg = projected_gradient(&x, &g, bounds);
        if pg.amax() <= opts.grad_tol {
            converged = true;
            break;
        }
        iter += 1;

        // Quasi-Newton direction on the free variables; bound-active
        // components (where the projected gradient vanishes) are frozen.
        let mut gr = g.clone();
        for i in 0..gr.len() {
            if pg[i] == 0.0 {
                gr[i] = 0.0;
            }
        }
        let mut d = lbfgs_direction(&gr, &hist);
        for i in 0..d.len() {
            if pg[i] == 0.0 {
                d[i] = 0.0;
            }
        }
        if d.dot(&gr) >= -1e-14 * d.norm() * gr.norm() {
            d = -gr.clone();
        }

        // Backtracking Armijo search along the projected path.
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..MAX_BACKTRACKS {
            let mut xt = &x + &d * alpha;
            bounds.clamp(&mut xt);
            let step = &xt - &x;
            if step.amax() == 0.0 {
                break;
            }
            let (ft, gt) = eval(&xt);
            n_eval += 1;
            if ft.is_finite() && ft <= fx + ARMIJO_C1 * g.dot(&step) {
                accepted = Some((xt, ft, gt, step));
                break;
            }
            alpha *= 0.5;
        }

        match accepted {
            Some((xt, ft, gt, step)) => {
                let yv = &gt - &g;
                let sy = step.dot(&yv);
                if sy > 1e-10 * step.norm() * yv.norm() {
                    let rho = 1.0 / sy;
                    hist.push_back((step, yv, rho));
                    if hist.len() > opts.memory {
                        hist.pop_front();
                    }
                }
                x = xt;
                fx = ft;
                g = gt;
            }
            None => {
                if hist.is_empty() {
                    break;
                }
                // Stale curvature can poison the direction; restart clean.
                hist.clear();
            }
        }
    }

    OptimOutcome {
        x,
        f: fx,
        iterations: iter,
        converged,
        evaluations: n_eval,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rosenbrock(x: &DVector<f64>) -> (f64, DVector<f64>) {
        let (a, b) = (1.0, 100.0);
        let f = (a - x[0]).powi(2) + b * (x[1] - x[0] * x[0]).powi(2);
        let g = DVector::from_vec(vec![
            -2.0 * (a - x[0]) - 4.0 * b * x[0] * (x[1] - x[0] * x[0]),
            2.0 * b * (x[1] - x[0] * x[0]),
        ]);
        (f, g)
    }

    #[test]
    fn solves_rosenbrock_inside_box() {
        let bounds = BoxBounds::new(vec![-2.0, -2.0], vec![2.0, 2.0]);
        for start in [[-1.5, 1.5], [0.0, 0.0], [1.9, -1.9]] {
            let out = minimize_bounded(
                rosenbrock,
                &DVector::from_column_slice(&start),
                &bounds,
                &OptimOptions {
                    max_iters: 500,
                    ..Default::default()
                },
            );
            assert!(out.converged, "start {start:?}");
            assert!((out.x[0] - 1.0).abs() < 1e-5);
            assert!((out.x[1] - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn lands_on_active_bound() {
        // Quadratic with unconstrained minimum at (2, -1), box [0,1]^2.
        let quad = |x: &DVector<f64>| {
            let f = (x[0] - 2.0).powi(2) + (x[1] + 1.0).powi(2);
            let g = DVector::from_vec(vec![2.0 * (x[0] - 2.0), 2.0 * (x[1] + 1.0)]);
            (f, g)
        };
        let out = minimize_bounded(
            quad,
            &DVector::from_column_slice(&[0.5, 0.5]),
            &BoxBounds::unit_cube(2),
            &OptimOptions::default(),
        );
        assert!(out.converged);
        assert!((out.x[0] - 1.0).abs() < 1e-10);
        assert!(out.x[1].abs() < 1e-10);
    }

    #[test]
    fn descent_from_start() {
        let (f0, _) = rosenbrock(&DVector::from_column_slice(&[-1.2, 1.0]));
        let out = minimize_bounded(
            rosenbrock,
            &DVector::from_column_slice(&[-1.2, 1.0]),
            &BoxBounds::new(vec![-2.0, -2.0], vec![2.0, 2.0]),
            &OptimOptions::default(),
        );
        assert!(out.f <= f0);
    }

    #[test]
    fn non_finite_objective_rejected() {
        // Objective blows up left of 0.25; the search must stay on the
        // finite side and still make progress.
        let partial = |x: &DVector<f64>| {
            if x[0] < 0.25 {
                (f64::INFINITY, DVector::zeros(1))
            } else {
                ((x[0] - 0.2).powi(2), DVector::from_vec(vec![2.0 * (x[0] - 0.2)]))
            }
        };
        let out = minimize_bounded(
            partial,
            &DVector::from_column_slice(&[0.9]),
            &BoxBounds::unit_cube(1),
            &OptimOptions::default(),
        );
        assert!(out.f.is_finite());
        assert!(out.x[0] >= 0.25 - 1e-12);
        assert!((out.x[0] - 0.25).abs() < 1e-4);
    }
}
