//! Quasi-Newton minimisation (BFGS with backtracking line search).

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, Copy)]
pub struct BfgsOptions {
    pub max_iter: usize,
    /// Converged once the largest absolute gradient component is below this.
    pub grad_tol: f64,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        Self { max_iter: 500, grad_tol: 1e-7 }
    }
}

#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: DVector<f64>,
    pub value: f64,
    pub grad: DVector<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Minimises `objective`, which returns the value and gradient at a point.
/// Non-finite values are treated as infeasible and rejected by the line search.
pub fn bfgs<F>(mut objective: F, x0: DVector<f64>, opts: BfgsOptions) -> Minimum
where
    F: FnMut(&DVector<f64>) -> (f64, DVector<f64>),
{
    let n = x0.len();
    let mut x = x0;
    let (mut f, mut g) = objective(&x);
    let mut h = DMatrix::<f64>::identity(n, n);
    let mut first = true;
    let mut iterations = 0;

    while iterations < opts.max_iter {
        if g.amax() <= opts.grad_tol {
            return Minimum { x, value: f, grad: g, iterations, converged: true };
        }
        iterations += 1;
        let mut dir = -(&h * &g);
        let mut slope = dir.dot(&g);
        if slope >= 0.0 || !slope.is_finite() {
            h = DMatrix::identity(n, n);
            dir = -g.clone();
            slope = dir.dot(&g);
        }
        let mut step = if first { (1.0 / g.norm()).min(1.0) } else { 1.0 };
        let mut accepted = None;
        for _ in 0..60 {
            let trial = &x + &dir * step;
            let (ft, gt) = objective(&trial);
            if ft.is_finite() && ft <= f + 1e-4 * step * slope {
                accepted = Some((trial, ft, gt));
                break;
            }
            step *= 0.5;
        }
        let Some((xn, fnew, gn)) = accepted else {
            return Minimum { x, value: f, grad: g.clone(), iterations, converged: g.amax() <= opts.grad_tol };
        };
        let s = &xn - &x;
        let y = &gn - &g;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            if first {
                let scale = sy / y.norm_squared();
                h = DMatrix::identity(n, n) * scale;
            }
            let rho = 1.0 / sy;
            let hy = &h * &y;
            let yhy = y.dot(&hy);
            // H+ = H - rho (s hy' + hy s') + (rho^2 yHy + rho) s s'
            h -= (&s * hy.transpose() + &hy * s.transpose()) * rho;
            h += (&s * s.transpose()) * (rho * rho * yhy + rho);
            first = false;
        }
        let small_change = (f - fnew).abs() <= 1e-15 * f.abs().max(1.0) && s.amax() <= 1e-14;
        x = xn;
        f = fnew;
        g = gn;
        if small_change {
            break;
        }
    }
    let converged = g.amax() <= opts.grad_tol;
    Minimum { x, value: f, grad: g, iterations, converged }
}
