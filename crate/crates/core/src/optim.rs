//! Damped Newton for small square nonlinear systems, with a
//! Levenberg–Marquardt fallback when the Newton direction fails.

use nalgebra::{DMatrix, DVector};

#[derive(Clone, Debug)]
pub struct NewtonOptions {
    pub max_iter: usize,
    /// Stop once the sup-norm of the residual is below this.
    pub tol: f64,
    /// A stalled run still counts as converged below this residual.
    pub accept: f64,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        NewtonOptions { max_iter: 100, tol: 1e-14, accept: 1e-10 }
    }
}

#[derive(Clone, Debug)]
pub struct NewtonOutcome {
    pub x: DVector<f64>,
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn sup(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0_f64, |m, a| if a.is_nan() { f64::INFINITY } else { m.max(a.abs()) })
}

/// Solve `r(x) = 0` where `fun` returns the residual and Jacobian.
pub fn newton<F>(fun: F, x0: DVector<f64>, opts: &NewtonOptions) -> NewtonOutcome
where
    F: Fn(&DVector<f64>) -> (DVector<f64>, DMatrix<f64>),
{
    let mut x = x0;
    let (mut r, mut jac) = fun(&x);
    let mut norm = r.norm();
    let mut iterations = 0;
    while iterations < opts.max_iter {
        if sup(&r) <= opts.tol || !norm.is_finite() {
            break;
        }
        iterations += 1;
        let mut accepted = false;
        let newton_step = if jac.is_square() { jac.clone().lu().solve(&(-&r)) } else { None };
        if let Some(step) = newton_step {
            if step.iter().all(|s| s.is_finite()) {
                let mut alpha = 1.0;
                while alpha > 1e-10 {
                    let xn = &x + alpha * &step;
                    let (rn, jn) = fun(&xn);
                    let nn = rn.norm();
                    if nn.is_finite() && nn < (1.0 - 1e-4 * alpha) * norm {
                        x = xn;
                        r = rn;
                        jac = jn;
                        norm = nn;
                        accepted = true;
                        break;
                    }
                    alpha *= 0.5;
                }
            }
        }
        if !accepted {
            let jt = jac.transpose();
            let jtj = &jt * &jac;
            let g = &jt * &r;
            let scale = jtj.diagonal().max().max(1e-300);
            let mut mu = 1e-6 * scale;
            while mu < 1e10 * scale {
                let mut a = jtj.clone();
                for i in 0..a.nrows() {
                    a[(i, i)] += mu;
                }
                if let Some(step) = a.lu().solve(&(-&g)) {
                    let xn = &x + &step;
                    let (rn, jn) = fun(&xn);
                    let nn = rn.norm();
                    if nn.is_finite() && nn < norm {
                        x = xn;
                        r = rn;
                        jac = jn;
                        norm = nn;
                        accepted = true;
                        break;
                    }
                }
                mu *= 10.0;
            }
        }
        if !accepted {
            break;
        }
    }
    let residual = sup(&r);
    NewtonOutcome { x, residual, iterations, converged: residual <= opts.accept }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solves_coupled_system() {
        // e^a = 2, a + b³ = 1 + ln 2: root (ln 2, 1).
        let fun = |x: &DVector<f64>| {
            let (a, b) = (x[0], x[1]);
            let r = DVector::from_vec(vec![a.exp() - 2.0, a + b * b * b - 2f64.ln() - 1.0]);
            let j = DMatrix::from_row_slice(2, 2, &[a.exp(), 0.0, 1.0, 3.0 * b * b]);
            (r, j)
        };
        let out = newton(fun, DVector::from_vec(vec![3.0, 4.0]), &NewtonOptions::default());
        assert!(out.converged);
        assert!((out.x[0] - 2f64.ln()).abs() < 1e-12 && (out.x[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn singular_jacobian_falls_back() {
        // r = (x² − 1, x² − 1): rank one everywhere.
        let fun = |x: &DVector<f64>| {
            let r = DVector::from_vec(vec![x[0] * x[0] - 1.0, x[0] * x[0] - 1.0]);
            let j = DMatrix::from_row_slice(2, 1, &[2.0 * x[0], 2.0 * x[0]]);
            (r, j)
        };
        // Non-square Jacobian: only the LM branch applies.
        let out = newton(fun, DVector::from_vec(vec![3.0]), &NewtonOptions::default());
        assert!(out.converged);
        assert!((out.x[0] - 1.0).abs() < 1e-8);
    }
}
