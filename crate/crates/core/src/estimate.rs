//! Sample estimators of potential-outcome distributions and local
//! dependence, plus two baselines that ignore selection on unobservables.
//!
//! Discrete treatments use a probit first stage for the selection
//! thresholds and then, at every (level, outcome threshold), a bivariate
//! probit likelihood for the cell `D = d`. Continuous treatments combine two
//! distribution regressions in closed form.

use crate::data::Dataset;
use crate::dgp::TreatmentKind;
use crate::dr::{self, BasisSpec, DrFit, DrSide, ProbitOptions};
use crate::error::{Error, Result};
use crate::gauss;
use crate::ident::{self, WEAK_TOL};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

/// Index differences below this make the continuous closed form unusable.
pub const WEAK_CONTRAST: f64 = 1e-4;
/// Sup-norm bound on the average score for a cell fit to count as converged.
pub const CELL_TOL: f64 = 1e-6;
const CELL_MAX_ITER: usize = 100;
// |atanh ρ| beyond this is treated as the boundary.
const W_LIMIT: f64 = 12.0;

/// Why a grid point carries no usable estimate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlaggedPoint {
    pub d: f64,
    pub y: f64,
    pub reason: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub flagged: Vec<FlaggedPoint>,
    /// Continuous kind: covariate support points dropped at each `d` for a
    /// weak first-stage contrast, as `(d, count)`.
    pub weak_contrast: Vec<(f64, usize)>,
    /// Rows whose first-stage thresholds had to be reordered.
    pub reordered_rows: usize,
    /// Largest average score over converged cell fits.
    pub max_grad: f64,
    pub warnings: Vec<String>,
}

/// Per-kind coefficient storage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum OutcomeModel {
    Discrete {
        /// Treatment values in selection order: level `cell_order[k]`
        /// occupies `(π_k, π_{k+1}]` of the selection variable.
        cell_order: Vec<f64>,
        /// First-stage probit coefficients on `B(z, x)`, one per interior
        /// threshold.
        first_stage: Vec<Vec<f64>>,
        /// `β_d(y)` indexed `[d][y]`, with `d` in `d_grid` order.
        beta: Vec<Vec<Vec<f64>>>,
        /// `γ_d(y)`, with `ρ = tanh(B(x)'γ)`.
        gamma: Vec<Vec<Vec<f64>>>,
        converged: Vec<Vec<bool>>,
    },
    Continuous {
        outcome: DrFit,
        treatment: DrFit,
    },
}

/// Fitted conditional potential-outcome CDFs and local dependence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PotentialOutcomeFit {
    pub kind: TreatmentKind,
    pub basis: BasisSpec,
    pub y_grid: Vec<f64>,
    /// Treatment levels (discrete, ascending) or evaluation points (continuous).
    pub d_grid: Vec<f64>,
    /// Distinct covariate rows of the sample (full rows; only the columns
    /// in the basis distinguish them).
    pub support: Vec<Vec<f64>>,
    /// Sample share of each support row, summing to one.
    pub support_weight: Vec<f64>,
    pub model: OutcomeModel,
    pub diagnostics: FitDiagnostics,
}

/// A conditional curve over the outcome grid at one `(d, x)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Curve {
    /// Rearranged `F̂_{Y_d|X}(y|x)` with flagged points interpolated.
    pub f: Vec<f64>,
    /// `ρ̂_{Y_d;X}(y; x)` with flagged points interpolated.
    pub rho: Vec<f64>,
}

impl PotentialOutcomeFit {
    /// Raw `(F̂, ρ̂)` at grid indices, or `None` if the point is flagged.
    pub fn point(&self, di: usize, yi: usize, x: &[f64]) -> Option<(f64, f64)> {
        match &self.model {
            OutcomeModel::Discrete { beta, gamma, converged, .. } => {
                if !converged[di][yi] {
                    return None;
                }
                let bx = self.basis.bx_row(x);
                Some((gauss::cdf(dot(&bx, &beta[di][yi])), dot(&bx, &gamma[di][yi]).tanh()))
            }
            OutcomeModel::Continuous { outcome, treatment } => {
                if !outcome.converged[yi] || !treatment.converged[di] {
                    return None;
                }
                let d = self.d_grid[di];
                let r = [0.0, 1.0].map(|z| treatment.index(di, &self.basis.bzx_row(z, x)));
                if (r[1] - r[0]).abs() < WEAK_CONTRAST {
                    return None;
                }
                let q = [0.0, 1.0].map(|z| outcome.index(yi, &self.basis.bdzx_row(d, z, x)));
                let s = ident::solve_continuous_index(q[0], q[1], r[0], r[1]).ok()?;
                Some((s.f, s.rho))
            }
        }
    }

    /// Rearranged conditional curve at `(d_grid[di], x)`; `None` when every
    /// grid point is flagged there.
    pub fn curve(&self, di: usize, x: &[f64]) -> Option<Curve> {
        let pts: Vec<Option<(f64, f64)>> = (0..self.y_grid.len()).map(|yi| self.point(di, yi, x)).collect();
        let f = interpolate_gaps(&self.y_grid, &pts.iter().map(|p| p.map(|v| v.0)).collect::<Vec<_>>())?;
        let rho = interpolate_gaps(&self.y_grid, &pts.iter().map(|p| p.map(|v| v.1)).collect::<Vec<_>>())?;
        Some(Curve { f: dr::rearrange(&f), rho })
    }

    /// Number of treatment values.
    pub fn n_d(&self) -> usize {
        self.d_grid.len()
    }

    /// Position of treatment value `d` in `d_grid`.
    pub fn d_index(&self, d: f64) -> Result<usize> {
        self.d_grid
            .iter()
            .position(|&v| v == d)
            .ok_or_else(|| Error::Invalid(format!("treatment value {d} is not in the fitted grid {:?}", self.d_grid)))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Fill `None` entries by linear interpolation between the nearest present
/// neighbours (constant beyond the ends). `None` if nothing is present.
pub fn interpolate_gaps(grid: &[f64], v: &[Option<f64>]) -> Option<Vec<f64>> {
    let known: Vec<usize> = (0..v.len()).filter(|&i| v[i].is_some()).collect();
    if known.is_empty() {
        return None;
    }
    let mut out = Vec::with_capacity(v.len());
    let mut next = 0;
    for i in 0..v.len() {
        if let Some(x) = v[i] {
            out.push(x);
            continue;
        }
        while next < known.len() && known[next] < i {
            next += 1;
        }
        let val = match (next.checked_sub(1).map(|p| known[p]), known.get(next)) {
            (Some(a), Some(&b)) => {
                let (va, vb) = (v[a].unwrap(), v[b].unwrap());
                va + (vb - va) * (grid[i] - grid[a]) / (grid[b] - grid[a])
            }
            (Some(a), None) => v[a].unwrap(),
            (None, Some(&b)) => v[b].unwrap(),
            (None, None) => unreachable!(),
        };
        out.push(val);
    }
    Some(out)
}

/// Optional reweighting and warm start for a fit.
#[derive(Clone, Copy, Debug, Default)]
pub struct FitControl<'a> {
    /// Observation weights (for example multiplier-bootstrap draws).
    pub weights: Option<&'a [f64]>,
    /// A previous fit on the same grids whose coefficients seed the solver.
    pub warm: Option<&'a PotentialOutcomeFit>,
}

// Distinct covariate rows and their (weighted) shares.
fn covariate_support(data: &Dataset, basis: &BasisSpec, w: Option<&[f64]>) -> (Vec<Vec<f64>>, Vec<f64>, Vec<usize>) {
    let mut map: HashMap<Vec<u64>, usize> = HashMap::new();
    let mut rows = vec![];
    let mut mass = vec![];
    let mut member = Vec::with_capacity(data.n());
    for i in 0..data.n() {
        let key: Vec<u64> = basis.covariates.iter().map(|&j| data.x[j][i].to_bits()).collect();
        let g = *map.entry(key).or_insert_with(|| {
            rows.push(data.covariate_row(i));
            mass.push(0.0);
            rows.len() - 1
        });
        mass[g] += w.map_or(1.0, |w| w[i]);
        member.push(g);
    }
    let tot: f64 = mass.iter().sum();
    mass.iter_mut().for_each(|m| *m /= tot);
    (rows, mass, member)
}

fn check_weights(data: &Dataset, w: Option<&[f64]>) -> Result<()> {
    if let Some(w) = w {
        if w.len() != data.n() {
            return Err(Error::Invalid(format!("{} weights for {} observations", w.len(), data.n())));
        }
        if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || w.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Invalid("weights must be finite, non-negative and not all zero".into()));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Cell likelihood

/// Value and first and second partials in `(x, ρ)` of
/// `Φ₂(x, hi; ρ) − Φ₂(x, lo; ρ)`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CellDerivs {
    pub p: f64,
    pub px: f64,
    pub pr: f64,
    pub pxx: f64,
    pub pxr: f64,
    pub prr: f64,
}

pub fn cell_derivs(x: f64, lo: f64, hi: f64, rho: f64) -> CellDerivs {
    let part = |a: f64| -> CellDerivs {
        if a == f64::NEG_INFINITY {
            return CellDerivs::default();
        }
        let phx = gauss::phi(x);
        if a == f64::INFINITY {
            return CellDerivs { p: gauss::cdf(x), px: phx, pxx: -x * phx, ..Default::default() };
        }
        let s2 = 1.0 - rho * rho;
        let s = s2.sqrt();
        let u = (a - rho * x) / s;
        let pdf2 = gauss::bvn_pdf(x, a, rho);
        let px = phx * gauss::cdf(u);
        let q = x * x - 2.0 * rho * x * a + a * a;
        CellDerivs {
            p: gauss::bvn_cdf_raw(x, a, rho),
            px,
            pr: pdf2,
            pxx: -x * px - phx * gauss::phi(u) * rho / s,
            pxr: -pdf2 * (x - rho * a) / s2,
            prr: pdf2 * (rho / s2 + x * a / s2 - rho * q / (s2 * s2)),
        }
    };
    let (h, l) = (part(hi), part(lo));
    CellDerivs {
        p: h.p - l.p,
        px: h.px - l.px,
        pr: h.pr - l.pr,
        pxx: h.pxx - l.pxx,
        pxr: h.pxr - l.pxr,
        prr: h.prr - l.prr,
    }
}

/// Observations of one treatment cell sharing `(B(x), lo, hi)`, with the
/// weighted outcome values sorted for fast threshold counts.
#[derive(Clone, Debug)]
struct CellGroup {
    bx: Vec<f64>,
    lo: f64,
    hi: f64,
    width: f64,
    ys: Vec<f64>,
    cum_w: Vec<f64>,
}

impl CellGroup {
    // Weight at or below `y` and above it.
    fn split(&self, y: f64) -> (f64, f64) {
        let k = self.ys.partition_point(|&v| v <= y);
        let below = if k == 0 { 0.0 } else { self.cum_w[k - 1] };
        (below, self.cum_w.last().copied().unwrap_or(0.0) - below)
    }
}

/// One term of the cell likelihood: `w1·ln P + w0·ln(M − P)`.
struct CellObs<'a> {
    bx: &'a [f64],
    lo: f64,
    hi: f64,
    width: f64,
    w1: f64,
    w0: f64,
}

struct CellEval {
    ll: f64,
    grad: DVector<f64>,
    hess: DMatrix<f64>,
    info: DMatrix<f64>,
}

// Average log-likelihood, score, Hessian and information at θ = (b, g).
// `None` outside the domain (some P on or beyond its Fréchet bounds).
fn cell_eval(obs: &[CellObs], theta: &DVector<f64>, total: f64) -> Option<CellEval> {
    let p = theta.len() / 2;
    let mut ll = 0.0;
    let mut grad = DVector::zeros(2 * p);
    let mut hess = DMatrix::zeros(2 * p, 2 * p);
    let mut info = DMatrix::zeros(2 * p, 2 * p);
    let mut dp = vec![0.0; 2 * p];
    for o in obs {
        let x: f64 = (0..p).map(|j| o.bx[j] * theta[j]).sum();
        let w: f64 = (0..p).map(|j| o.bx[j] * theta[p + j]).sum();
        if !(w.abs() <= W_LIMIT) || !x.is_finite() {
            return None;
        }
        let rho = w.tanh();
        let c = cell_derivs(x, o.lo, o.hi, rho);
        let rest = o.width - c.p;
        if (o.w1 > 0.0 && !(c.p > 0.0)) || (o.w0 > 0.0 && !(rest > 0.0)) {
            return None;
        }
        if o.w1 > 0.0 {
            ll += o.w1 * c.p.ln();
        }
        if o.w0 > 0.0 {
            ll += o.w0 * rest.ln();
        }
        let s2 = 1.0 - rho * rho;
        let pw = c.pr * s2;
        let pww = c.prr * s2 * s2 - 2.0 * rho * s2 * c.pr;
        let pxw = c.pxr * s2;
        let s1 = if o.w1 > 0.0 { o.w1 / c.p } else { 0.0 } - if o.w0 > 0.0 { o.w0 / rest } else { 0.0 };
        let sq = if o.w1 > 0.0 { o.w1 / (c.p * c.p) } else { 0.0 } + if o.w0 > 0.0 { o.w0 / (rest * rest) } else { 0.0 };
        let fisher = (o.w1 + o.w0) * o.width / (c.p * rest).max(1e-300);
        for j in 0..p {
            dp[j] = c.px * o.bx[j];
            dp[p + j] = pw * o.bx[j];
        }
        for a in 0..2 * p {
            grad[a] += s1 * dp[a];
        }
        for a in 0..2 * p {
            let ba = o.bx[a % p];
            for b in 0..=a {
                let bb = o.bx[b % p];
                let second = match (a < p, b < p) {
                    (true, true) => c.pxx,
                    (false, false) => pww,
                    _ => pxw,
                } * ba
                    * bb;
                hess[(a, b)] += s1 * second - sq * dp[a] * dp[b];
                info[(a, b)] += fisher * dp[a] * dp[b];
            }
        }
    }
    for a in 0..2 * p {
        for b in 0..a {
            hess[(b, a)] = hess[(a, b)];
            info[(b, a)] = info[(a, b)];
        }
    }
    Some(CellEval { ll: ll / total, grad: grad / total, hess: hess / total, info: info / total })
}

struct CellFit {
    b: Vec<f64>,
    g: Vec<f64>,
    converged: bool,
    grad: f64,
    reason: String,
}

// Newton ascent on the cell likelihood; Fisher scoring when the Hessian is
// not negative definite or the Newton direction does not improve.
fn cell_newton(obs: &[CellObs], start: DVector<f64>, total: f64) -> CellFit {
    let p = start.len() / 2;
    let fail = |theta: &DVector<f64>, grad: f64, reason: &str| CellFit {
        b: theta.rows(0, p).iter().cloned().collect(),
        g: theta.rows(p, p).iter().cloned().collect(),
        converged: false,
        grad,
        reason: reason.into(),
    };
    let mut theta = start;
    let Some(mut ev) = cell_eval(obs, &theta, total) else {
        return fail(&theta, f64::INFINITY, "start outside the likelihood domain");
    };
    for _ in 0..CELL_MAX_ITER {
        let grad = ev.grad.amax();
        if grad <= 1e-11 {
            break;
        }
        let newton = (-&ev.hess).cholesky().map(|c| c.solve(&ev.grad));
        let scoring = ev.info.clone().cholesky().map(|c| c.solve(&ev.grad));
        let mut moved = false;
        for dir in [newton, scoring].into_iter().flatten() {
            let mut alpha = 1.0;
            for _ in 0..40 {
                let cand = &theta + alpha * &dir;
                if let Some(e2) = cell_eval(obs, &cand, total) {
                    let better = e2.ll >= ev.ll - 1e-12 * (1.0 + ev.ll.abs());
                    if better || (grad <= 1e-4 && e2.grad.amax() < grad) {
                        theta = cand;
                        ev = e2;
                        moved = true;
                        break;
                    }
                }
                alpha *= 0.5;
            }
            if moved {
                break;
            }
        }
        if !moved {
            break;
        }
    }
    let grad = ev.grad.amax();
    let at_edge = (0..p).any(|j| theta[p + j].abs() > 0.8 * W_LIMIT);
    if grad <= CELL_TOL && !at_edge {
        CellFit {
            b: theta.rows(0, p).iter().cloned().collect(),
            g: theta.rows(p, p).iter().cloned().collect(),
            converged: true,
            grad,
            reason: String::new(),
        }
    } else if at_edge {
        fail(&theta, grad, "local dependence diverges to ±1")
    } else {
        fail(&theta, grad, &format!("average score {grad:.2e} above {CELL_TOL:e}"))
    }
}

// ---------------------------------------------------------------------------
// Discrete treatments

/// Binary-treatment estimator (`D ∈ {0, 1}`).
pub fn fit_binary(data: &Dataset, basis: &BasisSpec, y_grid: &[f64]) -> Result<PotentialOutcomeFit> {
    fit_binary_with(data, basis, y_grid, FitControl::default())
}

pub fn fit_binary_with(
    data: &Dataset,
    basis: &BasisSpec,
    y_grid: &[f64],
    ctl: FitControl,
) -> Result<PotentialOutcomeFit> {
    let levels = data.treatment_levels();
    if levels != [0.0, 1.0] {
        return Err(Error::Invalid(format!("binary treatment must take values 0 and 1; found {levels:?}")));
    }
    // D = 1 occupies the lower part of the selection variable.
    fit_discrete(data, basis, y_grid, vec![1.0, 0.0], TreatmentKind::Binary, ctl)
}

/// Ordered-treatment estimator; levels are the sorted distinct values of D.
pub fn fit_ordered(data: &Dataset, basis: &BasisSpec, y_grid: &[f64]) -> Result<PotentialOutcomeFit> {
    fit_ordered_with(data, basis, y_grid, FitControl::default())
}

pub fn fit_ordered_with(
    data: &Dataset,
    basis: &BasisSpec,
    y_grid: &[f64],
    ctl: FitControl,
) -> Result<PotentialOutcomeFit> {
    let levels = data.treatment_levels();
    if levels.len() < 2 || levels.len() > 50 {
        return Err(Error::Invalid(format!(
            "ordered treatment needs between 2 and 50 levels; found {}",
            levels.len()
        )));
    }
    fit_discrete(data, basis, y_grid, levels, TreatmentKind::Ordered, ctl)
}

fn check_y_grid(y_grid: &[f64]) -> Result<()> {
    if y_grid.is_empty() || y_grid.windows(2).any(|w| !(w[0] < w[1])) || y_grid.iter().any(|v| !v.is_finite()) {
        return Err(Error::Invalid("grid must be non-empty, finite and strictly increasing".into()));
    }
    Ok(())
}

fn fit_discrete(
    data: &Dataset,
    basis: &BasisSpec,
    y_grid: &[f64],
    cell_order: Vec<f64>,
    kind: TreatmentKind,
    ctl: FitControl,
) -> Result<PotentialOutcomeFit> {
    check_y_grid(y_grid)?;
    check_weights(data, ctl.weights)?;
    basis.check(data)?;
    let w = ctl.weights;
    let n = data.n();
    let k_levels = cell_order.len();
    let mut diagnostics = FitDiagnostics::default();

    // Step 1: probits of 1{D among the first k cells} on B(Z, X).
    let zx = basis.design_zx(data, None)?;
    dr::check_rank(&zx, w)?;
    let position: Vec<usize> = data
        .d
        .iter()
        .map(|v| cell_order.iter().position(|c| c == v).unwrap())
        .collect();
    let warm_first = ctl.warm.and_then(|f| match &f.model {
        OutcomeModel::Discrete { first_stage, .. } if first_stage.len() + 1 == k_levels => Some(first_stage.clone()),
        _ => None,
    });
    let mut first_stage: Vec<Vec<f64>> = Vec::with_capacity(k_levels - 1);
    for k in 0..k_levels - 1 {
        let resp: Vec<bool> = position.iter().map(|&p| p <= k).collect();
        let start = warm_first.as_ref().map(|s| s[k].clone()).or_else(|| first_stage.last().cloned());
        let fit = dr::probit_fit(&resp, &zx, w, start.as_deref(), &ProbitOptions::default())?;
        if !fit.converged {
            return Err(Error::NonConvergence(format!(
                "first-stage probit for threshold {} (score {:.2e})",
                k + 1,
                fit.grad_norm
            )));
        }
        first_stage.push(fit.coef);
    }

    // Relevance and, for several thresholds, a common dominance direction,
    // checked at every covariate support point.
    let (support, support_weight, member) = covariate_support(data, basis, w);
    for x in &support {
        let t: [Vec<f64>; 2] = [0.0, 1.0].map(|z| {
            let b = basis.bzx_row(z, x);
            let mut v: Vec<f64> = first_stage.iter().map(|c| gauss::cdf(dot(&b, c))).collect();
            v.sort_by(|a, b| a.total_cmp(b));
            v
        });
        if let Some(j) = (0..k_levels - 1).find(|&j| (t[1][j] - t[0][j]).abs() < WEAK_TOL) {
            return Err(Error::WeakInstrument(format!(
                "first-stage threshold {} does not move with Z at covariates {x:?}",
                j + 1
            )));
        }
        if k_levels > 2 {
            if let Err(bad) = ident::uoc_direction(&t[0], &t[1]) {
                return Err(Error::Assumption(format!(
                    "instrument shifts thresholds {bad:?} in opposite directions at covariates {x:?}"
                )));
            }
        }
    }

    // Thresholds on the probit scale at each observation's own Z, sorted.
    let mut cells: Vec<Vec<(f64, f64)>> = Vec::with_capacity(n);
    for i in 0..n {
        let b = basis.bzx(data, data.z[i], i);
        let mut a: Vec<f64> = first_stage.iter().map(|c| dot(&b, c)).collect();
        if a.windows(2).any(|p| p[0] > p[1]) {
            diagnostics.reordered_rows += 1;
            a.sort_by(|x, y| x.total_cmp(y));
        }
        let row: Vec<(f64, f64)> = (0..k_levels)
            .map(|k| {
                let lo = if k == 0 { f64::NEG_INFINITY } else { a[k - 1] };
                let hi = if k + 1 == k_levels { f64::INFINITY } else { a[k] };
                (lo, hi)
            })
            .collect();
        cells.push(row);
    }
    for k in 0..k_levels {
        for row in &cells {
            let (lo, hi) = row[k];
            if !(gauss::interval_prob(lo, hi) > 1e-12) {
                return Err(Error::CellCollapse(cell_order[k].round() as usize));
            }
        }
    }
    if diagnostics.reordered_rows > 0 {
        diagnostics.warnings.push(format!(
            "first-stage thresholds reordered at {} observations",
            diagnostics.reordered_rows
        ));
    }

    // Group the observations of each cell by (B(x), lo, hi).
    let total: f64 = w.map_or(n as f64, |w| w.iter().sum());
    let mut groups: Vec<Vec<CellGroup>> = vec![vec![]; k_levels];
    {
        let mut index: Vec<HashMap<(usize, u64, u64), usize>> = vec![HashMap::new(); k_levels];
        let mut raw: Vec<Vec<Vec<(f64, f64)>>> = vec![vec![]; k_levels];
        for i in 0..n {
            let wi = w.map_or(1.0, |w| w[i]);
            if wi <= 0.0 {
                continue;
            }
            let k = position[i];
            let (lo, hi) = cells[i][k];
            let key = (member[i], lo.to_bits(), hi.to_bits());
            let g = *index[k].entry(key).or_insert_with(|| {
                groups[k].push(CellGroup {
                    bx: basis.bx(data, i),
                    lo,
                    hi,
                    width: gauss::interval_prob(lo, hi),
                    ys: vec![],
                    cum_w: vec![],
                });
                raw[k].push(vec![]);
                groups[k].len() - 1
            });
            raw[k][g].push((data.y[i], wi));
        }
        for k in 0..k_levels {
            for (g, mut list) in raw[k].drain(..).enumerate() {
                list.sort_by(|a, b| a.0.total_cmp(&b.0));
                let mut acc = 0.0;
                groups[k][g].ys = list.iter().map(|v| v.0).collect();
                groups[k][g].cum_w = list
                    .iter()
                    .map(|v| {
                        acc += v.1;
                        acc
                    })
                    .collect();
            }
        }
    }

    // d_grid is ascending; map each to its cell.
    let d_grid: Vec<f64> = {
        let mut v = cell_order.clone();
        v.sort_by(|a, b| a.total_cmp(b));
        v
    };
    let cell_of: Vec<usize> = d_grid.iter().map(|d| cell_order.iter().position(|c| c == d).unwrap()).collect();
    let warm_coef = ctl.warm.and_then(|f| match &f.model {
        OutcomeModel::Discrete { beta, gamma, converged, .. }
            if f.d_grid == d_grid && f.y_grid == y_grid =>
        {
            Some((beta, gamma, converged))
        }
        _ => None,
    });

    let p = basis.len_x();
    let jobs: Vec<(usize, usize)> = (0..d_grid.len()).flat_map(|di| (0..y_grid.len()).map(move |yi| (di, yi))).collect();
    let fits: Vec<CellFit> = jobs
        .par_iter()
        .map(|&(di, yi)| {
            let k = cell_of[di];
            let y = y_grid[yi];
            let obs: Vec<CellObs> = groups[k]
                .iter()
                .map(|g| {
                    let (w1, w0) = g.split(y);
                    CellObs { bx: &g.bx, lo: g.lo, hi: g.hi, width: g.width, w1, w0 }
                })
                .filter(|o| o.w1 + o.w0 > 0.0)
                .collect();
            let warm = warm_coef.and_then(|(b, g, c)| c[di][yi].then(|| (b[di][yi].clone(), g[di][yi].clone())));
            if let Some((b, g)) = warm {
                let fit = cell_newton(&obs, DVector::from_iterator(2 * p, b.into_iter().chain(g)), total);
                if fit.converged {
                    return fit;
                }
            }
            match cell_start(&obs, p) {
                Ok(s) => cell_newton(&obs, s, total),
                Err(reason) => CellFit { b: vec![0.0; p], g: vec![0.0; p], converged: false, grad: f64::NAN, reason },
            }
        })
        .collect();

    let nd = d_grid.len();
    let ny = y_grid.len();
    let mut beta = vec![vec![vec![]; ny]; nd];
    let mut gamma = vec![vec![vec![]; ny]; nd];
    let mut converged = vec![vec![false; ny]; nd];
    for (&(di, yi), fit) in jobs.iter().zip(fits) {
        if fit.converged {
            diagnostics.max_grad = diagnostics.max_grad.max(fit.grad);
        } else {
            diagnostics.flagged.push(FlaggedPoint { d: d_grid[di], y: y_grid[yi], reason: fit.reason });
        }
        beta[di][yi] = fit.b;
        gamma[di][yi] = fit.g;
        converged[di][yi] = fit.converged;
    }
    if let Some(di) = (0..nd).find(|&di| converged[di].iter().all(|c| !c)) {
        diagnostics.warnings.push(format!("no grid point converged for d = {}", d_grid[di]));
    } else if !diagnostics.flagged.is_empty() {
        diagnostics.warnings.push(format!(
            "{} grid points flagged and interpolated from converged neighbours",
            diagnostics.flagged.len()
        ));
    }
    Ok(PotentialOutcomeFit {
        kind,
        basis: basis.clone(),
        y_grid: y_grid.to_vec(),
        d_grid,
        support,
        support_weight,
        model: OutcomeModel::Discrete { cell_order, first_stage, beta, gamma, converged },
        diagnostics,
    })
}

// Probit of the outcome indicator on B(x) within the cell, with ρ = 0.
fn cell_start(obs: &[CellObs], p: usize) -> std::result::Result<DVector<f64>, String> {
    let mut resp = vec![];
    let mut rows = vec![];
    let mut wts = vec![];
    for o in obs {
        for (r, wt) in [(true, o.w1), (false, o.w0)] {
            if wt > 0.0 {
                resp.push(r);
                rows.push(o.bx);
                wts.push(wt);
            }
        }
    }
    if !resp.iter().any(|&r| r) || resp.iter().all(|&r| r) {
        return Err("outcome indicator is constant within the treatment cell".into());
    }
    let x = DMatrix::from_fn(rows.len(), p, |i, j| rows[i][j]);
    let fit = dr::probit_fit(&resp, &x, Some(&wts), None, &ProbitOptions::default()).map_err(|e| e.to_string())?;
    Ok(DVector::from_iterator(2 * p, fit.coef.into_iter().chain(std::iter::repeat_n(0.0, p))))
}

// ---------------------------------------------------------------------------
// Continuous treatments

/// Continuous-treatment estimator over outcome grid `y_grid` and treatment
/// evaluation points `d_grid`.
pub fn fit_continuous(data: &Dataset, basis: &BasisSpec, y_grid: &[f64], d_grid: &[f64]) -> Result<PotentialOutcomeFit> {
    fit_continuous_with(data, basis, y_grid, d_grid, FitControl::default())
}

pub fn fit_continuous_with(
    data: &Dataset,
    basis: &BasisSpec,
    y_grid: &[f64],
    d_grid: &[f64],
    ctl: FitControl,
) -> Result<PotentialOutcomeFit> {
    check_y_grid(y_grid)?;
    check_y_grid(d_grid)?;
    check_weights(data, ctl.weights)?;
    basis.check(data)?;
    let warm = ctl.warm.and_then(|f| match &f.model {
        OutcomeModel::Continuous { outcome, treatment } if f.y_grid == y_grid && f.d_grid == d_grid => {
            Some((outcome.coef.clone(), treatment.coef.clone()))
        }
        _ => None,
    });
    let outcome = dr::dr_fit(data, DrSide::Outcome, basis, y_grid, ctl.weights, warm.as_ref().map(|w| &w.0[..]), false)?;
    let treatment =
        dr::dr_fit(data, DrSide::Treatment, basis, d_grid, ctl.weights, warm.as_ref().map(|w| &w.1[..]), false)?;
    let (support, support_weight, _) = covariate_support(data, basis, ctl.weights);
    let mut diagnostics = FitDiagnostics::default();
    for (k, &y) in y_grid.iter().enumerate() {
        if !outcome.converged[k] {
            diagnostics.flagged.push(FlaggedPoint {
                d: f64::NAN,
                y,
                reason: format!("outcome regression score {:.2e}", outcome.grad_norm[k]),
            });
        }
    }
    for (k, &d) in d_grid.iter().enumerate() {
        if !treatment.converged[k] {
            diagnostics.flagged.push(FlaggedPoint {
                d,
                y: f64::NAN,
                reason: format!("treatment regression score {:.2e}", treatment.grad_norm[k]),
            });
        }
        let weak = support
            .iter()
            .filter(|x| {
                let r = [0.0, 1.0].map(|z| treatment.index(k, &basis.bzx_row(z, x)));
                (r[1] - r[0]).abs() < WEAK_CONTRAST
            })
            .count();
        if weak > 0 {
            diagnostics.weak_contrast.push((d, weak));
            diagnostics.warnings.push(format!(
                "{weak} covariate points excluded at d = {d}: first-stage contrast below {WEAK_CONTRAST:e}"
            ));
        }
    }
    if weak_everywhere(&diagnostics, support.len(), d_grid.len()) {
        return Err(Error::WeakInstrument(format!(
            "first-stage contrast below {WEAK_CONTRAST:e} at every covariate point for some d"
        )));
    }
    diagnostics.max_grad = outcome
        .grad_norm
        .iter()
        .chain(&treatment.grad_norm)
        .zip(outcome.converged.iter().chain(&treatment.converged))
        .filter(|(_, c)| **c)
        .fold(0.0, |m, (g, _)| m.max(*g));
    Ok(PotentialOutcomeFit {
        kind: TreatmentKind::Continuous,
        basis: basis.clone(),
        y_grid: y_grid.to_vec(),
        d_grid: d_grid.to_vec(),
        support,
        support_weight,
        model: OutcomeModel::Continuous { outcome, treatment },
        diagnostics,
    })
}

fn weak_everywhere(diag: &FitDiagnostics, support: usize, nd: usize) -> bool {
    nd > 0 && diag.weak_contrast.iter().any(|&(_, c)| c == support)
}

// ---------------------------------------------------------------------------
// Baselines

/// Distribution regression of `1{Y ≤ y}` on `(B(x), D)` that treats D as
/// exogenous given X.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExogenousFit {
    pub y_grid: Vec<f64>,
    pub d_grid: Vec<f64>,
    /// Coefficients per outcome threshold: `B(x)` terms then the `D` term.
    pub coef: Vec<Vec<f64>>,
    pub converged: Vec<bool>,
    /// Rearranged `F̂_{Y_d}(y)` indexed `[d][y]`.
    pub values: Vec<Vec<f64>>,
}

pub fn fit_exogenous_dr(data: &Dataset, basis: &BasisSpec, y_grid: &[f64], d_grid: &[f64]) -> Result<ExogenousFit> {
    fit_exogenous_dr_with(data, basis, y_grid, d_grid, None)
}

pub fn fit_exogenous_dr_with(
    data: &Dataset,
    basis: &BasisSpec,
    y_grid: &[f64],
    d_grid: &[f64],
    weights: Option<&[f64]>,
) -> Result<ExogenousFit> {
    check_y_grid(y_grid)?;
    check_weights(data, weights)?;
    basis.check(data)?;
    dr::check_grid(&data.y, y_grid, weights)?;
    let p = basis.len_x();
    let bx = basis.design_x(data)?;
    let x = DMatrix::from_fn(data.n(), p + 1, |i, j| if j < p { bx[(i, j)] } else { data.d[i] });
    dr::check_rank(&x, weights)?;
    let mut coef = Vec::with_capacity(y_grid.len());
    let mut converged = Vec::with_capacity(y_grid.len());
    let mut prev: Option<Vec<f64>> = None;
    for &y in y_grid {
        let resp: Vec<bool> = data.y.iter().map(|&v| v <= y).collect();
        let fit = dr::probit_fit(&resp, &x, weights, prev.as_deref(), &ProbitOptions::default())
            .map_err(|e| e.at_grid(y))?;
        prev = Some(fit.coef.clone());
        converged.push(fit.converged);
        coef.push(fit.coef);
    }
    let wsum: f64 = weights.map_or(data.n() as f64, |w| w.iter().sum());
    let values = d_grid
        .iter()
        .map(|&d| {
            let raw: Vec<f64> = coef
                .iter()
                .map(|c| {
                    (0..data.n())
                        .map(|i| {
                            let idx: f64 = (0..p).map(|j| bx[(i, j)] * c[j]).sum::<f64>() + d * c[p];
                            weights.map_or(1.0, |w| w[i]) * gauss::cdf(idx)
                        })
                        .sum::<f64>()
                        / wsum
                })
                .collect();
            dr::rearrange(&raw)
        })
        .collect();
    Ok(ExogenousFit { y_grid: y_grid.to_vec(), d_grid: d_grid.to_vec(), coef, converged, values })
}

/// Two-stage least squares of Y on (1, D, X) with instruments (1, Z, X).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TslsFit {
    /// Coefficient on D.
    pub coef: f64,
    pub se: f64,
    /// First-stage F statistic for the excluded instrument.
    pub first_stage_f: f64,
    pub weak: bool,
}

pub fn fit_2sls(data: &Dataset) -> Result<TslsFit> {
    let n = data.n();
    let k = data.ncov() + 2;
    if n <= k {
        return Err(Error::Precondition(format!("2SLS needs more than {k} observations; have {n}")));
    }
    let build = |first: &[f64]| {
        DMatrix::from_fn(n, k, |i, j| match j {
            0 => 1.0,
            1 => first[i],
            _ => data.x[j - 2][i],
        })
    };
    let xm = build(&data.d);
    let zm = build(&data.z);
    let y = DVector::from_column_slice(&data.y);
    let zx = zm.transpose() * &xm;
    let zx_inv = zx
        .clone()
        .try_inverse()
        .filter(|m| m.iter().all(|v| v.is_finite()))
        .ok_or_else(|| Error::RankDeficient("instrument moment matrix Z'X is singular".into()))?;
    let beta = &zx_inv * (zm.transpose() * &y);
    let resid = &y - &xm * &beta;
    let sigma2 = resid.norm_squared() / (n - k) as f64;
    let zz = zm.transpose() * &zm;
    let cov = &zx_inv * zz * zx_inv.transpose() * sigma2;
    // First stage: D on (1, Z, X); F = t² of the Z coefficient.
    let ztz_inv = (zm.transpose() * &zm)
        .try_inverse()
        .ok_or_else(|| Error::RankDeficient("instrument matrix is singular".into()))?;
    let d = DVector::from_column_slice(&data.d);
    let pi = &ztz_inv * (zm.transpose() * &d);
    let r1 = &d - &zm * &pi;
    let s1 = r1.norm_squared() / (n - k) as f64;
    let var_z = s1 * ztz_inv[(1, 1)];
    let first_stage_f = if var_z > 0.0 { pi[1] * pi[1] / var_z } else { f64::INFINITY };
    Ok(TslsFit { coef: beta[1], se: cov[(1, 1)].max(0.0).sqrt(), first_stage_f, weak: first_stage_f < 10.0 })
}
