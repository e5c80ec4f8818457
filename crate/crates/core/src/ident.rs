//! Population identification: exact inverse maps from observable joint
//! probabilities to the potential-outcome CDF `F = F_{Y_d}(y)` and the local
//! Gaussian dependence `ρ = ρ_{Y_d}(y)`.
//!
//! Discrete-treatment systems are written in "cell" form: with thresholds
//! `A_lo < A_hi` on the probit scale of the selection variable,
//!
//! `Pr[Y ≤ y, D = d | Z = z] = Φ₂(Φ⁻¹F, A_hi(z); ρ) − Φ₂(Φ⁻¹F, A_lo(z); ρ)`.
//!
//! Binary `d = 1` is the cell `(−∞, Φ⁻¹π(z))`, binary `d = 0` is
//! `(Φ⁻¹π(z), ∞)`, and ordered level `d` is `(Φ⁻¹π_{d−1}(z), Φ⁻¹π_d(z))`.
//! Unknowns are solved in the unconstrained coordinates `(Φ⁻¹F, atanh ρ)`.

use crate::copulas::{self, Family};
use crate::gauss::{self, Corr, Prob};
use crate::optim::{newton, NewtonOptions};
use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector, Matrix4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Minimum |π(1) − π(0)| (or probit gap) treated as a relevant instrument.
pub const WEAK_TOL: f64 = 1e-6;

fn w_max() -> f64 {
    Corr::MAX.atanh()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Level {
    /// `d = 1`
    Treated,
    /// `d = 0`
    Untreated,
}

/// Observed `Pr[Y ≤ y, D = d | Z = z]` for z = 0, 1 and propensities `π(z)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinarySystemInput {
    pub p0: f64,
    pub p1: f64,
    pub pi0: f64,
    pub pi1: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Sup-norm of the forward-map residual at the solution.
    pub residual: f64,
    pub iterations: usize,
    /// ρ reached the clamp `|ρ| = 1 − 1e-8`.
    pub boundary: bool,
    pub method: String,
    pub warnings: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentSolution {
    pub f: f64,
    pub rho: f64,
    pub diagnostics: Diagnostics,
}

/// A two-equation cell system on the probit scale.
#[derive(Clone, Copy, Debug)]
pub struct CellSystem {
    pub p: [f64; 2],
    pub lo: [f64; 2],
    pub hi: [f64; 2],
}

/// Value, ∂/∂x and ∂/∂ρ of `Φ₂(x, hi; ρ) − Φ₂(x, lo; ρ)`.
pub fn cell_prob(x: f64, lo: f64, hi: f64, rho: f64) -> (f64, f64, f64) {
    let part = |a: f64| -> (f64, f64, f64) {
        if a == f64::NEG_INFINITY {
            (0.0, 0.0, 0.0)
        } else if a == f64::INFINITY {
            (gauss::cdf(x), gauss::phi(x), 0.0)
        } else {
            (
                gauss::bvn_cdf_raw(x, a, rho),
                gauss::bvn_dx(x, a, rho),
                gauss::bvn_pdf(x, a, rho),
            )
        }
    };
    let (vh, dxh, drh) = part(hi);
    let (vl, dxl, drl) = part(lo);
    (vh - vl, dxh - dxl, drh - drl)
}

impl CellSystem {
    fn width(&self, z: usize) -> f64 {
        gauss::interval_prob(self.lo[z], self.hi[z])
    }

    /// Residuals and Jacobian in `(x, w) = (Φ⁻¹F, atanh ρ)`.
    fn eval(&self, v: &DVector<f64>, target: &[f64; 2]) -> (DVector<f64>, DMatrix<f64>) {
        let x = v[0];
        let w = v[1].clamp(-w_max(), w_max());
        let rho = w.tanh();
        let mut r = DVector::zeros(2);
        let mut j = DMatrix::zeros(2, 2);
        for z in 0..2 {
            let (val, dx, drho) = cell_prob(x, self.lo[z], self.hi[z], rho);
            r[z] = val - target[z];
            j[(z, 0)] = dx;
            j[(z, 1)] = drho * (1.0 - rho * rho);
        }
        (r, j)
    }

    fn forward(&self, f: f64, rho: f64) -> [f64; 2] {
        let x = gauss::quantile(Prob::new(f));
        [0, 1].map(|z| cell_prob(x, self.lo[z], self.hi[z], rho).0)
    }

    /// Open interval of `F` compatible with the Fréchet bounds in both cells.
    fn feasible_f(&self) -> Result<(f64, f64)> {
        for z in 0..2 {
            let w = self.width(z);
            let p = self.p[z];
            if !(p > 0.0) {
                return Err(Error::Infeasible(format!(
                    "p({z}) = {p} must exceed the lower Fréchet bound 0"
                )));
            }
            if !(p < w) {
                return Err(Error::Infeasible(format!(
                    "p({z}) = {p} must be below the cell probability {w} (upper Fréchet bound)"
                )));
            }
        }
        let lo = self.p[0].max(self.p[1]);
        let hi = (1.0 - self.width(0) + self.p[0]).min(1.0 - self.width(1) + self.p[1]);
        if lo >= hi {
            return Err(Error::Infeasible(format!(
                "no F satisfies both Fréchet constraints: need F > {lo} and F < {hi}"
            )));
        }
        Ok((lo, hi))
    }

    fn naive_start(&self) -> f64 {
        let (lo, hi) = self.feasible_f().unwrap_or((0.0, 1.0));
        let f = (self.p[0] + self.p[1]) / (self.width(0) + self.width(1));
        if f > lo && f < hi {
            f
        } else {
            0.5 * (lo + hi)
        }
    }

    fn finish(&self, v: &DVector<f64>, iterations: usize, method: &str) -> IdentSolution {
        let f = gauss::cdf(v[0]);
        let rho = v[1].clamp(-w_max(), w_max()).tanh();
        let fw = self.forward(f, rho);
        let residual = (fw[0] - self.p[0]).abs().max((fw[1] - self.p[1]).abs());
        IdentSolution {
            f,
            rho,
            diagnostics: Diagnostics {
                residual,
                iterations,
                boundary: rho.abs() >= Corr::MAX * (1.0 - 1e-15),
                method: method.into(),
                warnings: vec![],
            },
        }
    }

    /// Damped Newton from the naive start, then from the best points of a
    /// 40×40 grid if that fails.
    pub fn solve_newton(&self) -> Result<IdentSolution> {
        self.feasible_f()?;
        let opts = NewtonOptions::default();
        let start = DVector::from_vec(vec![gauss::quantile(Prob::new(self.naive_start())), 0.0]);
        let out = newton(|v| self.eval(v, &self.p), start, &opts);
        if out.converged {
            return Ok(self.finish(&out.x, out.iterations, "newton"));
        }
        let mut seeds = Vec::with_capacity(1600);
        for i in 0..40 {
            for k in 0..40 {
                let f = (i as f64 + 0.5) / 40.0;
                let rho = -0.975 + 1.95 * k as f64 / 39.0;
                let v = DVector::from_vec(vec![gauss::quantile(Prob::new(f)), rho.atanh()]);
                let (r, _) = self.eval(&v, &self.p);
                seeds.push((r.norm(), v));
            }
        }
        seeds.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut best: Option<(f64, DVector<f64>, usize)> = None;
        for (_, seed) in seeds.into_iter().take(8) {
            let o = newton(|v| self.eval(v, &self.p), seed, &opts);
            if o.converged {
                return Ok(self.finish(&o.x, out.iterations + o.iterations, "grid-seeded newton"));
            }
            if best.as_ref().is_none_or(|b| o.residual < b.0) {
                best = Some((o.residual, o.x, o.iterations));
            }
        }
        let res = best.map_or(f64::NAN, |b| b.0);
        Err(Error::NonConvergence(format!(
            "binary system residual {res:.3e} after grid-seeded restarts"
        )))
    }

    /// Continuation from the ρ = 0 solution: solve
    /// `G(θ) = G(θ₀) + t (p − G(θ₀))` for t from 0 to 1.
    pub fn solve_homotopy(&self) -> Result<IdentSolution> {
        self.feasible_f()?;
        let f0 = self.naive_start();
        let mut theta = DVector::from_vec(vec![gauss::quantile(Prob::new(f0)), 0.0]);
        let zero = [0.0, 0.0];
        let (g0v, _) = self.eval(&theta, &zero);
        let g0 = [g0v[0], g0v[1]];
        let dir = [self.p[0] - g0[0], self.p[1] - g0[1]];
        let target = |t: f64| [g0[0] + t * dir[0], g0[1] + t * dir[1]];
        let corr_opts = NewtonOptions { max_iter: 12, tol: 1e-13, accept: 1e-11 };
        let mut t = 0.0;
        let mut h: f64 = 0.1;
        let mut trace = vec![0.0];
        let mut iterations = 0;
        while t < 1.0 {
            h = h.min(1.0 - t);
            let (_, jac) = self.eval(&theta, &zero);
            let rhs = DVector::from_vec(dir.to_vec());
            let pred = jac.lu().solve(&rhs).filter(|v| v.iter().all(|a| a.is_finite()));
            let guess = match pred {
                Some(v) => &theta + h * v,
                None => theta.clone(),
            };
            let tt = target(t + h);
            let out = newton(|v| self.eval(v, &tt), guess, &corr_opts);
            iterations += out.iterations;
            let jump = (&out.x - &theta).amax();
            if out.converged && jump < 2.0 {
                theta = out.x;
                t = if 1.0 - (t + h) < 1e-15 { 1.0 } else { t + h };
                trace.push(t);
                h = (h * 1.5).min(0.25);
            } else {
                h *= 0.5;
                if h < 1e-5 {
                    return Err(Error::NonConvergence(format!(
                        "homotopy step below 1e-5 at t = {t:.6}; path {:?}",
                        trace
                    )));
                }
            }
        }
        let polish = newton(|v| self.eval(v, &self.p), theta, &NewtonOptions::default());
        let mut sol = self.finish(&polish.x, iterations + polish.iterations, "homotopy");
        if sol.diagnostics.residual > 1e-8 {
            return Err(Error::NonConvergence(format!(
                "homotopy ended with residual {:.3e}",
                sol.diagnostics.residual
            )));
        }
        sol.diagnostics.warnings.push(format!("{} continuation steps", trace.len() - 1));
        Ok(sol)
    }
}

fn check_prob(name: &str, p: f64) -> Result<()> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Invalid(format!("{name} = {p} must lie in (0, 1)")));
    }
    Ok(())
}

/// The cell system for a binary treatment level.
pub fn binary_cells(input: &BinarySystemInput, level: Level) -> CellSystem {
    let a = [
        gauss::quantile(Prob::new(input.pi0)),
        gauss::quantile(Prob::new(input.pi1)),
    ];
    let p = [input.p0, input.p1];
    match level {
        Level::Treated => CellSystem { p, lo: [f64::NEG_INFINITY; 2], hi: a },
        Level::Untreated => CellSystem { p, lo: a, hi: [f64::INFINITY; 2] },
    }
}

/// Solve the two-equation binary system for `(F_{Y_d}(y), ρ_{Y_d}(y))`.
///
/// For `Level::Untreated` the inputs are `Pr[Y ≤ y, D = 0 | Z = z]`.
pub fn solve_binary(input: &BinarySystemInput, level: Level) -> Result<IdentSolution> {
    check_prob("π(0)", input.pi0)?;
    check_prob("π(1)", input.pi1)?;
    if (input.pi1 - input.pi0).abs() < WEAK_TOL {
        return Err(Error::WeakInstrument(format!(
            "|π(1) − π(0)| = {:.3e} < {WEAK_TOL:e}",
            (input.pi1 - input.pi0).abs()
        )));
    }
    binary_cells(input, level).solve_newton()
}

/// Jacobian of the treated-level forward map in `(F, ρ)` coordinates, rows
/// `(π0, π1)`. With the larger propensity first it is a P-matrix.
pub fn binary_jacobian(f: f64, rho: f64, pi0: f64, pi1: f64) -> [[f64; 2]; 2] {
    let x = gauss::quantile(Prob::new(f));
    let dfdx = gauss::phi(x);
    [pi0, pi1].map(|pi| {
        let a = gauss::quantile(Prob::new(pi));
        let (_, dx, dr) = cell_prob(x, f64::NEG_INFINITY, a, rho);
        [dx / dfdx, dr]
    })
}

/// Ordered-treatment input: cell probabilities for level `d` (1-based) and
/// the interior thresholds `π_1(z) < … < π_{K−1}(z)` for z = 0, 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderedSystemInput {
    pub level: usize,
    pub p0: f64,
    pub p1: f64,
    pub thresholds: [Vec<f64>; 2],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dominance {
    /// `F_{D|Z}(d|0) > F_{D|Z}(d|1)` at every point: Z = 1 shifts D up.
    Z0Above,
    /// `F_{D|Z}(d|1) > F_{D|Z}(d|0)` at every point.
    Z1Above,
}

/// Dominance direction of two treatment CDFs, or the violating points
/// (those whose sign disagrees with the majority or is zero).
pub fn uoc_direction(cdf0: &[f64], cdf1: &[f64]) -> std::result::Result<Dominance, Vec<usize>> {
    let up = cdf0.iter().zip(cdf1).filter(|(a, b)| a > b).count();
    let down = cdf0.iter().zip(cdf1).filter(|(a, b)| a < b).count();
    let dir = if up >= down { Dominance::Z0Above } else { Dominance::Z1Above };
    let bad: Vec<usize> = cdf0
        .iter()
        .zip(cdf1)
        .enumerate()
        .filter(|(_, (a, b))| match dir {
            Dominance::Z0Above => a <= b,
            Dominance::Z1Above => a >= b,
        })
        .map(|(i, _)| i)
        .collect();
    if bad.is_empty() {
        Ok(dir)
    } else {
        Err(bad)
    }
}

/// Solve the ordered system at one level. Boundary levels reduce to the
/// binary forms; interior levels use homotopy continuation from ρ = 0.
pub fn solve_ordered(input: &OrderedSystemInput) -> Result<IdentSolution> {
    let [t0, t1] = &input.thresholds;
    if t0.len() != t1.len() || t0.is_empty() {
        return Err(Error::Invalid("threshold vectors must be non-empty and equal length".into()));
    }
    let k = t0.len() + 1;
    if input.level == 0 || input.level > k {
        return Err(Error::Invalid(format!("level {} outside 1..={k}", input.level)));
    }
    for t in [t0, t1] {
        for (j, &v) in t.iter().enumerate() {
            check_prob("threshold", v)?;
            if j > 0 && v <= t[j - 1] {
                return Err(Error::Invalid("thresholds must be strictly increasing".into()));
            }
        }
    }
    if let Some(j) = (0..k - 1).find(|&j| (t0[j] - t1[j]).abs() < WEAK_TOL) {
        return Err(Error::WeakInstrument(format!(
            "π_{}(1) and π_{}(0) differ by less than {WEAK_TOL:e}",
            j + 1,
            j + 1
        )));
    }
    if let Err(bad) = uoc_direction(t0, t1) {
        let pts: Vec<usize> = bad.iter().map(|j| j + 1).collect();
        return Err(Error::Assumption(format!(
            "uniformity in ordered choice fails: threshold dominance flips at d = {pts:?}"
        )));
    }
    let d = input.level;
    if d == 1 {
        let b = BinarySystemInput { p0: input.p0, p1: input.p1, pi0: t0[0], pi1: t1[0] };
        return binary_cells(&b, Level::Treated).solve_newton();
    }
    if d == k {
        let b = BinarySystemInput { p0: input.p0, p1: input.p1, pi0: t0[k - 2], pi1: t1[k - 2] };
        return binary_cells(&b, Level::Untreated).solve_newton();
    }
    let q = |p: f64| gauss::quantile(Prob::new(p));
    let sys = CellSystem {
        p: [input.p0, input.p1],
        lo: [q(t0[d - 2]), q(t1[d - 2])],
        hi: [q(t0[d - 1]), q(t1[d - 1])],
    };
    sys.solve_homotopy()
}

/// Closed-form solution for a continuous treatment at one `(d, y)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContinuousSolution {
    pub a: f64,
    pub b: f64,
    pub f: f64,
    pub rho: f64,
}

/// Continuous-treatment solution from probit-scale inputs
/// `q_z = Φ⁻¹F_{Y|D,Z}(y|d,z)` and `r_z = Φ⁻¹F_{D|Z}(d|z)`.
pub fn solve_continuous_index(q0: f64, q1: f64, r0: f64, r1: f64) -> Result<ContinuousSolution> {
    let den = r1 - r0;
    if !(den.abs() >= WEAK_TOL) {
        return Err(Error::WeakInstrument(format!(
            "|Φ⁻¹F(d|1) − Φ⁻¹F(d|0)| = {:.3e} < {WEAK_TOL:e}",
            den.abs()
        )));
    }
    let a = (q0 * r1 - q1 * r0) / den;
    let b = (q1 - q0) / den;
    let s = b.hypot(1.0);
    Ok(ContinuousSolution { a, b, f: gauss::cdf(a / s), rho: -b / s })
}

/// Continuous-treatment solution from CDF values.
pub fn solve_continuous(fy0: f64, fy1: f64, fd0: f64, fd1: f64) -> Result<ContinuousSolution> {
    for (name, v) in [("F(y|d,0)", fy0), ("F(y|d,1)", fy1), ("F(d|0)", fd0), ("F(d|1)", fd1)] {
        check_prob(name, v)?;
    }
    let q = |p: f64| gauss::quantile(Prob::new(p));
    solve_continuous_index(q(fy0), q(fy1), q(fd0), q(fd1))
}

/// `(a, b)` implied by `(F, ρ)`: a = Φ⁻¹F/√(1−ρ²), b = −ρ/√(1−ρ²).
pub fn continuous_coefficients(f: f64, rho: f64) -> (f64, f64) {
    let s = (1.0 - rho * rho).sqrt();
    (gauss::quantile(Prob::new(f)) / s, -rho / s)
}

fn spearman_weight(v: f64) -> f64 {
    (1.0 - 2.0 * v) / (v * (1.0 - v)).sqrt()
}

/// Continuous-treatment solution under the local-Spearman representation.
pub fn solve_continuous_spearman(fy0: f64, fy1: f64, fd0: f64, fd1: f64) -> Result<IdentSolution> {
    for (name, v) in [("F(y|d,0)", fy0), ("F(y|d,1)", fy1), ("F(d|0)", fd0), ("F(d|1)", fd1)] {
        check_prob(name, v)?;
    }
    let (w0, w1) = (spearman_weight(fd0), spearman_weight(fd1));
    if (w0 - w1).abs() < WEAK_TOL {
        return Err(Error::DegenerateWeight(format!("w0 = {w0}, w1 = {w1}")));
    }
    let f = (fy1 * w0 - fy0 * w1) / (w0 - w1);
    if !(f > 0.0 && f < 1.0) {
        return Err(Error::Infeasible(format!("implied F = {f} outside (0, 1)")));
    }
    let s = (f * (1.0 - f)).sqrt();
    let (fy, w) = if w0.abs() >= w1.abs() { (fy0, w0) } else { (fy1, w1) };
    let rho = 2.0 * (fy - f) / (w * s);
    let fit = |fd_w: f64| f + 0.5 * rho * s * fd_w;
    let residual = (fit(w0) - fy0).abs().max((fit(w1) - fy1).abs());
    Ok(IdentSolution {
        f,
        rho,
        diagnostics: Diagnostics {
            residual,
            method: "closed form".into(),
            ..Default::default()
        },
    })
}

/// Multi-valued instrument input: `p[c]` and `π[c]` over the `2^K`
/// instrument cells. Cell index bits encode `(z_1, …, z_K)` with `z_K` as
/// the least significant bit, so cells 0 and 1 form the status-quo pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiIvInput {
    pub level: Level,
    pub p: Vec<f64>,
    pub pi: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OveridEntry {
    pub cells: (usize, usize),
    /// F and ρ from the pair's own binary solve, when it succeeds.
    pub f: Option<f64>,
    pub rho: Option<f64>,
    pub f_gap: Option<f64>,
    pub rho_gap: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiIvSolution {
    pub f: f64,
    pub rho_by_cell: Vec<f64>,
    pub boundary_cells: Vec<usize>,
    pub residual: f64,
    pub overid: Vec<OveridEntry>,
}

/// Identify `F` from the status-quo pair and each cell's ρ by inverting the
/// copula at that cell; cross-pair solves give overidentification gaps.
pub fn solve_multi_iv(input: &MultiIvInput) -> Result<MultiIvSolution> {
    let m = input.p.len();
    if m < 2 || !m.is_power_of_two() || input.pi.len() != m {
        return Err(Error::Invalid("need 2^K cells with matching propensities".into()));
    }
    let pair = |i: usize, j: usize| BinarySystemInput {
        p0: input.p[i],
        p1: input.p[j],
        pi0: input.pi[i],
        pi1: input.pi[j],
    };
    let base = solve_binary(&pair(0, 1), input.level).map_err(|e| match e {
        Error::WeakInstrument(m) => Error::WeakInstrument(format!("status-quo pair: {m}")),
        other => other,
    })?;
    let f = base.f;
    let mut rho_by_cell = vec![base.rho, base.rho];
    let mut boundary_cells = vec![];
    let mut residual = base.diagnostics.residual;
    for c in 2..m {
        check_prob("π(cell)", input.pi[c])?;
        let sol = match input.level {
            Level::Treated => copulas::solve_rho(Family::Gaussian, input.p[c], f, input.pi[c])?,
            Level::Untreated => {
                let s = copulas::solve_rho(Family::Gaussian, input.p[c], f, 1.0 - input.pi[c])?;
                copulas::RhoSolution { rho: -s.rho, boundary: s.boundary }
            }
        };
        if sol.boundary.is_some() {
            boundary_cells.push(c);
        }
        let fw = multi_forward(input.level, f, input.pi[c], sol.rho);
        residual = residual.max((fw - input.p[c]).abs());
        rho_by_cell.push(sol.rho);
    }
    let mut overid = vec![];
    for i in 0..m {
        for j in i + 1..m {
            if (i, j) == (0, 1) || (input.pi[i] - input.pi[j]).abs() < WEAK_TOL {
                continue;
            }
            let e = match solve_binary(&pair(i, j), input.level) {
                Ok(s) => OveridEntry {
                    cells: (i, j),
                    f: Some(s.f),
                    rho: Some(s.rho),
                    f_gap: Some(s.f - f),
                    rho_gap: Some(s.rho - base.rho),
                },
                Err(_) => OveridEntry { cells: (i, j), f: None, rho: None, f_gap: None, rho_gap: None },
            };
            overid.push(e);
        }
    }
    Ok(MultiIvSolution { f, rho_by_cell, boundary_cells, residual, overid })
}

/// Forward map for one multi-IV cell.
pub fn multi_forward(level: Level, f: f64, pi: f64, rho: f64) -> f64 {
    let x = gauss::quantile(Prob::new(f));
    let a = gauss::quantile(Prob::new(pi));
    match level {
        Level::Treated => cell_prob(x, f64::NEG_INFINITY, a, rho).0,
        Level::Untreated => cell_prob(x, a, f64::INFINITY, rho).0,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum AltMode {
    /// Treated level at two outcome values y, y′ sharing ρ(·; z).
    WithinLevels,
    /// Both treatment levels at one y sharing ρ(y; z).
    BetweenLevels,
}

/// Four observed probabilities for the alternative systems.
///
/// `WithinLevels`: `p[0]` holds `Pr[Y ≤ y, D = 1 | Z = z]`, `p[1]` the same at y′.
/// `BetweenLevels`: `p[0]` holds the `D = 1` cells, `p[1]` the `D = 0` cells.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AltSystemInput {
    pub mode: AltMode,
    pub p: [[f64; 2]; 2],
    pub pi0: f64,
    pub pi1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AltSolution {
    /// `(F(y), F(y′))` or `(F₁(y), F₀(y))`.
    pub f: [f64; 2],
    /// ρ for z = 0 and z = 1.
    pub rho: [f64; 2],
    /// Jacobian determinant in `(F, F′, ρ₀, ρ₁)` coordinates.
    pub determinant: f64,
    pub rank_warning: bool,
    pub diagnostics: Diagnostics,
}

impl AltSystemInput {
    fn cells(&self) -> [(f64, f64); 2] {
        [self.pi0, self.pi1].map(|pi| {
            let a = gauss::quantile(Prob::new(pi));
            (f64::NEG_INFINITY, a)
        })
    }

    // Residuals/Jacobian in (x, x′, w0, w1) coordinates plus the Jacobian
    // in (F, F′, ρ0, ρ1) coordinates.
    fn eval(&self, v: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>, Matrix4<f64>) {
        let cells = self.cells();
        let mut r = DVector::zeros(4);
        let mut j = DMatrix::zeros(4, 4);
        let mut jf = Matrix4::zeros();
        let rho = [v[2], v[3]].map(|w| w.clamp(-w_max(), w_max()).tanh());
        for k in 0..2 {
            let x = v[k];
            let dfdx = gauss::phi(x);
            for z in 0..2 {
                let row = 2 * k + z;
                let (_, a) = cells[z];
                let (val, dx, dr) = match (self.mode, k) {
                    (AltMode::BetweenLevels, 1) => {
                        // D = 0 cell: C(F₀, 1 − π; −ρ) = F₀ − C(F₀, π; ρ).
                        let (val, dx, dr) = cell_prob(x, a, f64::INFINITY, rho[z]);
                        (val, dx, dr)
                    }
                    _ => cell_prob(x, f64::NEG_INFINITY, a, rho[z]),
                };
                r[row] = val - self.p[k][z];
                j[(row, k)] = dx;
                j[(row, 2 + z)] = dr * (1.0 - rho[z] * rho[z]);
                jf[(row, k)] = dx / dfdx;
                jf[(row, 2 + z)] = dr;
            }
        }
        (r, j, jf)
    }
}

/// Solve the four-equation alternative restriction systems.
pub fn solve_alt_system(input: &AltSystemInput) -> Result<AltSolution> {
    check_prob("π(0)", input.pi0)?;
    check_prob("π(1)", input.pi1)?;
    if (input.pi1 - input.pi0).abs() < WEAK_TOL {
        return Err(Error::WeakInstrument("π(1) = π(0)".into()));
    }
    let widths = [input.pi0, input.pi1];
    for k in 0..2 {
        for z in 0..2 {
            let w = match (input.mode, k) {
                (AltMode::BetweenLevels, 1) => 1.0 - widths[z],
                _ => widths[z],
            };
            let p = input.p[k][z];
            if !(p > 0.0 && p < w) {
                return Err(Error::Infeasible(format!(
                    "cell ({k}, {z}) probability {p} outside (0, {w})"
                )));
            }
        }
    }
    let naive = |k: usize| {
        let w = match (input.mode, k) {
            (AltMode::BetweenLevels, 1) => [1.0 - widths[0], 1.0 - widths[1]],
            _ => widths,
        };
        ((input.p[k][0] + input.p[k][1]) / (w[0] + w[1])).clamp(1e-6, 1.0 - 1e-6)
    };
    let q = |p: f64| gauss::quantile(Prob::new(p));
    let opts = NewtonOptions { max_iter: 200, tol: 1e-14, accept: 1e-10 };
    let fun = |v: &DVector<f64>| {
        let (r, j, _) = input.eval(v);
        (r, j)
    };
    let mut start = DVector::from_vec(vec![q(naive(0)), q(naive(1)), 0.0, 0.0]);
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_a17);
    let mut total_iter = 0;
    for attempt in 0..=5 {
        let out = newton(fun, start.clone(), &opts);
        total_iter += out.iterations;
        if out.converged && out.residual <= 1e-8 {
            let (_, _, jf) = input.eval(&out.x);
            let det = jf.determinant();
            let rank_warning = det.abs() < 1e-8;
            let rho = [out.x[2], out.x[3]].map(|w| w.clamp(-w_max(), w_max()).tanh());
            let mut warnings = vec![];
            if rank_warning {
                warnings.push(format!(
                    "identification failure: Jacobian determinant {det:.3e} below 1e-8"
                ));
            }
            return Ok(AltSolution {
                f: [gauss::cdf(out.x[0]), gauss::cdf(out.x[1])],
                rho,
                determinant: det,
                rank_warning,
                diagnostics: Diagnostics {
                    residual: out.residual,
                    iterations: total_iter,
                    boundary: rho.iter().any(|r| r.abs() >= Corr::MAX * (1.0 - 1e-15)),
                    method: if attempt == 0 { "newton".into() } else { format!("restart {attempt}") },
                    warnings,
                },
            });
        }
        start = DVector::from_vec(vec![
            q(rng.random_range(0.05..0.95)),
            q(rng.random_range(0.05..0.95)),
            rng.random_range(-1.5..1.5),
            rng.random_range(-1.5..1.5),
        ]);
    }
    Err(Error::NonConvergence("alternative system: Newton failed after 5 random restarts".into()))
}

/// Forward map for the alternative systems (used by tests and the DGP).
pub fn alt_forward(mode: AltMode, f: [f64; 2], rho: [f64; 2], pi: [f64; 2]) -> [[f64; 2]; 2] {
    let x = f.map(|v| gauss::quantile(Prob::new(v)));
    let mut out = [[0.0; 2]; 2];
    for k in 0..2 {
        for z in 0..2 {
            let a = gauss::quantile(Prob::new(pi[z]));
            out[k][z] = match (mode, k) {
                (AltMode::BetweenLevels, 1) => cell_prob(x[k], a, f64::INFINITY, rho[z]).0,
                _ => cell_prob(x[k], f64::NEG_INFINITY, a, rho[z]).0,
            };
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelContrast {
    pub d: f64,
    pub cdf0: f64,
    pub cdf1: f64,
    pub probit_gap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OveridSummary {
    pub cells: (usize, usize),
    pub f_gap: Option<f64>,
    pub rho_gap: Option<f64>,
    pub f_gap_sd: Option<f64>,
    pub rho_gap_sd: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssumptionReport {
    pub rel: Vec<RelContrast>,
    pub min_probit_gap: f64,
    pub rel_ok: bool,
    pub uoc_direction: Option<Dominance>,
    pub uoc_violations: Vec<f64>,
    pub overid: Vec<OveridSummary>,
}

/// Relevance and dominance diagnostics from treatment CDFs by instrument
/// value. Points where both CDFs are 0 or 1 are skipped.
pub fn check_assumptions(grid: &[f64], cdf0: &[f64], cdf1: &[f64]) -> AssumptionReport {
    let mut rel = vec![];
    for (k, &d) in grid.iter().enumerate() {
        let (a, b) = (cdf0[k], cdf1[k]);
        let trivial = (a <= 0.0 && b <= 0.0) || (a >= 1.0 && b >= 1.0);
        if trivial {
            continue;
        }
        let gap = (gauss::quantile_f64(b) - gauss::quantile_f64(a)).abs();
        rel.push(RelContrast { d, cdf0: a, cdf1: b, probit_gap: gap });
    }
    let min_probit_gap = rel.iter().map(|r| r.probit_gap).fold(f64::INFINITY, f64::min);
    let c0: Vec<f64> = rel.iter().map(|r| r.cdf0).collect();
    let c1: Vec<f64> = rel.iter().map(|r| r.cdf1).collect();
    let (uoc_direction, uoc_violations) = match uoc_direction(&c0, &c1) {
        Ok(dir) => (Some(dir), vec![]),
        Err(bad) => (None, bad.iter().map(|&i| rel[i].d).collect()),
    };
    AssumptionReport {
        rel_ok: min_probit_gap >= WEAK_TOL,
        min_probit_gap,
        rel,
        uoc_direction,
        uoc_violations,
        overid: vec![],
    }
}

/// Cross-pair discrepancies of a multi-IV solution with their bootstrap
/// standard deviations. Informal: no critical values are attached.
pub fn overid_diagnostic(point: &MultiIvSolution, boot: &[MultiIvSolution]) -> Vec<OveridSummary> {
    let sd = |vals: Vec<f64>| -> Option<f64> {
        if vals.len() < 2 {
            return None;
        }
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let v = vals.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / (vals.len() - 1) as f64;
        Some(v.sqrt())
    };
    point
        .overid
        .iter()
        .map(|e| {
            let matching = |get: fn(&OveridEntry) -> Option<f64>| -> Vec<f64> {
                boot.iter()
                    .filter_map(|b| b.overid.iter().find(|x| x.cells == e.cells).and_then(get))
                    .collect()
            };
            OveridSummary {
                cells: e.cells,
                f_gap: e.f_gap,
                rho_gap: e.rho_gap,
                f_gap_sd: sd(matching(|x| x.f_gap)),
                rho_gap_sd: sd(matching(|x| x.rho_gap)),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn forward_binary(f: f64, rho: f64, pi: [f64; 2], level: Level) -> BinarySystemInput {
        let inp = BinarySystemInput { p0: 0.0, p1: 0.0, pi0: pi[0], pi1: pi[1] };
        let cells = binary_cells(&inp, level);
        let p = cells.forward(f, rho);
        BinarySystemInput { p0: p[0], p1: p[1], ..inp }
    }

    #[test]
    fn binary_independence() {
        let inp = BinarySystemInput { p0: 0.4 * 0.3, p1: 0.4 * 0.6, pi0: 0.3, pi1: 0.6 };
        let s = solve_binary(&inp, Level::Treated).unwrap();
        assert!((s.f - 0.4).abs() < 1e-12 && s.rho.abs() < 1e-12);
    }

    #[test]
    fn binary_round_trip_both_levels() {
        for level in [Level::Treated, Level::Untreated] {
            let inp = forward_binary(0.4, 0.3, [0.3, 0.6], level);
            let s = solve_binary(&inp, level).unwrap();
            assert!((s.f - 0.4).abs() < 1e-10 && (s.rho - 0.3).abs() < 1e-10, "{level:?} {s:?}");
            assert!(s.diagnostics.residual < 1e-10);
        }
    }

    #[test]
    fn untreated_matches_mapped_treated_form() {
        // F − C(F, π; ρ) = C(F, 1 − π; −ρ)
        let (f, rho, pi) = (0.55, -0.45, [0.35, 0.7]);
        let d0 = forward_binary(f, rho, pi, Level::Untreated);
        let mapped = forward_binary(f, -rho, [1.0 - pi[0], 1.0 - pi[1]], Level::Treated);
        assert!((d0.p0 - mapped.p0).abs() < 1e-15 && (d0.p1 - mapped.p1).abs() < 1e-15);
    }

    #[test]
    fn binary_weak_and_infeasible() {
        let inp = BinarySystemInput { p0: 0.2, p1: 0.2, pi0: 0.5, pi1: 0.5 };
        assert!(matches!(solve_binary(&inp, Level::Treated), Err(Error::WeakInstrument(_))));
        let inp = BinarySystemInput { p0: 0.35, p1: 0.2, pi0: 0.3, pi1: 0.6 };
        assert!(matches!(solve_binary(&inp, Level::Treated), Err(Error::Infeasible(_))));
    }

    #[test]
    fn binary_jacobian_is_p_matrix() {
        for &(f, rho) in &[(0.4, 0.3), (0.2, -0.7), (0.8, 0.8)] {
            // Rows ordered by decreasing π.
            let j = binary_jacobian(f, rho, 0.6, 0.3);
            assert!(j[0][0] > 0.0 && j[1][1] > 0.0);
            assert!(j[0][0] * j[1][1] - j[0][1] * j[1][0] > 0.0);
        }
    }

    #[test]
    fn ordered_example() {
        let th = [vec![0.2, 0.6], vec![0.35, 0.8]];
        let q = |p: f64| gauss::quantile(Prob::new(p));
        let sys = CellSystem {
            p: [0.0; 2],
            lo: [q(0.2), q(0.35)],
            hi: [q(0.6), q(0.8)],
        };
        let p = sys.forward(0.5, -0.4);
        let s = solve_ordered(&OrderedSystemInput { level: 2, p0: p[0], p1: p[1], thresholds: th }).unwrap();
        assert!((s.f - 0.5).abs() < 1e-8 && (s.rho + 0.4).abs() < 1e-8, "{s:?}");
    }

    #[test]
    fn ordered_independence_gives_cell_ratio() {
        let th = [vec![0.2, 0.6], vec![0.35, 0.8]];
        let f = 0.37;
        let s = solve_ordered(&OrderedSystemInput {
            level: 2,
            p0: f * 0.4,
            p1: f * 0.45,
            thresholds: th,
        })
        .unwrap();
        assert!((s.f - f).abs() < 1e-12 && s.rho.abs() < 1e-12);
    }

    #[test]
    fn ordered_uoc_violation() {
        let th = [vec![0.2, 0.8], vec![0.35, 0.6]];
        let r = solve_ordered(&OrderedSystemInput { level: 2, p0: 0.1, p1: 0.1, thresholds: th });
        assert!(matches!(r, Err(Error::Assumption(_))));
    }

    #[test]
    fn ordered_k2_matches_binary() {
        let pi = [0.3, 0.6];
        for (level, lv) in [(1, Level::Treated), (2, Level::Untreated)] {
            let b = forward_binary(0.45, -0.2, pi, lv);
            let sb = solve_binary(&b, lv).unwrap();
            let so = solve_ordered(&OrderedSystemInput {
                level,
                p0: b.p0,
                p1: b.p1,
                thresholds: [vec![pi[0]], vec![pi[1]]],
            })
            .unwrap();
            assert!((sb.f - so.f).abs() < 1e-10 && (sb.rho - so.rho).abs() < 1e-10);
        }
    }

    #[test]
    fn continuous_examples() {
        let s = solve_continuous(0.5, 0.5, 0.4, 0.7).unwrap();
        assert!(s.a.abs() < 1e-15 && s.b.abs() < 1e-15 && (s.f - 0.5).abs() < 1e-15 && s.rho.abs() < 1e-15);
        let s = solve_continuous(0.5, 0.6, 0.4, 0.7).unwrap();
        assert!((s.a - 0.08253).abs() < 5e-6, "{s:?}");
        assert!((s.b - 0.32574).abs() < 5e-6);
        // The rounded reference 0.53128 is 8e-6 above the exact 0.531272.
        assert!((s.f - 0.53128).abs() < 1e-5);
        assert!((s.f - 0.531_272_218_724).abs() < 1e-10);
        assert!((s.rho + 0.30973).abs() < 5e-6);
        let (a, b) = continuous_coefficients(s.f, s.rho);
        assert!((a - s.a).abs() < 1e-12 && (b - s.b).abs() < 1e-12);
    }

    #[test]
    fn continuous_swap_invariance_and_weak() {
        let s = solve_continuous(0.3, 0.45, 0.25, 0.65).unwrap();
        let t = solve_continuous(0.45, 0.3, 0.65, 0.25).unwrap();
        assert_eq!(s, t);
        assert!(matches!(solve_continuous(0.3, 0.4, 0.5, 0.5), Err(Error::WeakInstrument(_))));
    }

    fn spearman_forward(f: f64, rho: f64, fd: f64) -> f64 {
        f + 0.5 * rho * (f * (1.0 - f)).sqrt() * spearman_weight(fd)
    }

    #[test]
    fn spearman_examples() {
        let s = solve_continuous_spearman(0.4, 0.4, 0.3, 0.6).unwrap();
        assert!((s.f - 0.4).abs() < 1e-14 && s.rho.abs() < 1e-14);
        for fd in [(0.3, 0.6), (0.3, 0.7)] {
            let (y0, y1) = (spearman_forward(0.5, 0.4, fd.0), spearman_forward(0.5, 0.4, fd.1));
            let s = solve_continuous_spearman(y0, y1, fd.0, fd.1).unwrap();
            assert!((s.f - 0.5).abs() < 1e-10 && (s.rho - 0.4).abs() < 1e-10);
        }
        let y = spearman_forward(0.5, 0.4, 0.3);
        assert!(matches!(
            solve_continuous_spearman(y, y, 0.3, 0.3),
            Err(Error::DegenerateWeight(_))
        ));
    }

    #[test]
    fn multi_iv_common_rho() {
        let (f, rho) = (0.45, 0.35);
        let pi = vec![0.3, 0.55, 0.4, 0.7];
        let p: Vec<f64> = pi.iter().map(|&q| multi_forward(Level::Treated, f, q, rho)).collect();
        let s = solve_multi_iv(&MultiIvInput { level: Level::Treated, p, pi }).unwrap();
        assert!((s.f - f).abs() < 1e-10);
        for r in &s.rho_by_cell {
            assert!((r - rho).abs() < 1e-9);
        }
        for e in &s.overid {
            assert!(e.f_gap.unwrap().abs() < 1e-9 && e.rho_gap.unwrap().abs() < 1e-9);
        }
        assert!(s.residual < 1e-10);
    }

    #[test]
    fn multi_iv_independence_and_weak() {
        let pi = vec![0.3, 0.55, 0.4, 0.7];
        let p: Vec<f64> = pi.iter().map(|q| 0.6 * q).collect();
        let s = solve_multi_iv(&MultiIvInput { level: Level::Treated, p, pi }).unwrap();
        assert!((s.f - 0.6).abs() < 1e-12);
        assert!(s.rho_by_cell.iter().all(|r| r.abs() < 1e-10));
        let pi = vec![0.3, 0.3, 0.4, 0.7];
        let p: Vec<f64> = pi.iter().map(|q| 0.6 * q).collect();
        assert!(matches!(
            solve_multi_iv(&MultiIvInput { level: Level::Treated, p, pi }),
            Err(Error::WeakInstrument(_))
        ));
    }

    #[test]
    fn alt_between_levels_example() {
        let p = alt_forward(AltMode::BetweenLevels, [0.45, 0.55], [0.2, -0.1], [0.3, 0.7]);
        let s = solve_alt_system(&AltSystemInput { mode: AltMode::BetweenLevels, p, pi0: 0.3, pi1: 0.7 }).unwrap();
        assert!((s.f[0] - 0.45).abs() < 1e-8 && (s.f[1] - 0.55).abs() < 1e-8);
        assert!((s.rho[0] - 0.2).abs() < 1e-8 && (s.rho[1] + 0.1).abs() < 1e-8, "{s:?}");
        assert!(!s.rank_warning);
    }

    #[test]
    fn alt_independence() {
        for mode in [AltMode::WithinLevels, AltMode::BetweenLevels] {
            let p = alt_forward(mode, [0.3, 0.6], [0.0, 0.0], [0.3, 0.7]);
            let s = solve_alt_system(&AltSystemInput { mode, p, pi0: 0.3, pi1: 0.7 }).unwrap();
            assert!((s.f[0] - 0.3).abs() < 1e-10 && (s.f[1] - 0.6).abs() < 1e-10);
            assert!(s.rho.iter().all(|r| r.abs() < 1e-9));
        }
    }

    #[test]
    fn alt_within_equal_levels_warns() {
        let p = alt_forward(AltMode::WithinLevels, [0.4, 0.4], [0.3, -0.2], [0.3, 0.7]);
        let s = solve_alt_system(&AltSystemInput { mode: AltMode::WithinLevels, p, pi0: 0.3, pi1: 0.7 }).unwrap();
        assert!(s.rank_warning, "{s:?}");
    }

    #[test]
    fn assumption_report() {
        let grid = [1.0, 2.0, 3.0];
        let r = check_assumptions(&grid, &[0.3, 0.6, 1.0], &[0.2, 0.4, 1.0]);
        assert_eq!(r.uoc_direction, Some(Dominance::Z0Above));
        assert!(r.rel_ok && r.rel.len() == 2);
        let r = check_assumptions(&grid, &[0.3, 0.4, 0.9], &[0.2, 0.6, 0.7]);
        assert_eq!(r.uoc_direction, None);
        assert_eq!(r.uoc_violations, vec![2.0]);
    }
}
