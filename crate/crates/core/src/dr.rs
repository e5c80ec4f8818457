//! Distribution regression: probit fits of threshold indicators with
//! coefficients indexed by the threshold, plus monotone rearrangement.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::gauss;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// Transformation vectors `B(x)`, `B(z, x)` and `B(d, z, x)`.
///
/// `B(x)` is an intercept followed by powers `1..=degree` of each selected
/// covariate. `B(z, x)` appends `z` (or `z·B(x)` when saturated), and
/// `B(d, z, x)` appends `d` (and `d·z` when saturated).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BasisSpec {
    /// Indices of the covariate columns used.
    #[serde(default)]
    pub covariates: Vec<usize>,
    #[serde(default = "one")]
    pub degree: usize,
    #[serde(default = "yes")]
    pub saturate_z: bool,
}

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

impl Default for BasisSpec {
    fn default() -> Self {
        BasisSpec { covariates: vec![], degree: 1, saturate_z: true }
    }
}

impl BasisSpec {
    pub fn intercept_only() -> BasisSpec {
        BasisSpec::default()
    }

    /// Linear terms in every covariate of `data`.
    pub fn linear(ncov: usize) -> BasisSpec {
        BasisSpec { covariates: (0..ncov).collect(), ..Default::default() }
    }

    pub fn len_x(&self) -> usize {
        1 + self.covariates.len() * self.degree
    }

    pub fn len_zx(&self) -> usize {
        if self.saturate_z { 2 * self.len_x() } else { self.len_x() + 1 }
    }

    pub fn len_dzx(&self) -> usize {
        self.len_zx() + if self.saturate_z { 2 } else { 1 }
    }

    /// `B(x)` from a full covariate row.
    pub fn bx_row(&self, x: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len_x());
        out.push(1.0);
        for &j in &self.covariates {
            let mut p = 1.0;
            for _ in 0..self.degree {
                p *= x[j];
                out.push(p);
            }
        }
        out
    }

    pub fn bzx_row(&self, z: f64, x: &[f64]) -> Vec<f64> {
        let bx = self.bx_row(x);
        let mut out = bx.clone();
        if self.saturate_z {
            out.extend(bx.iter().map(|v| z * v));
        } else {
            out.push(z);
        }
        out
    }

    pub fn bdzx_row(&self, d: f64, z: f64, x: &[f64]) -> Vec<f64> {
        let mut out = self.bzx_row(z, x);
        out.push(d);
        if self.saturate_z {
            out.push(d * z);
        }
        out
    }

    pub fn bx(&self, data: &Dataset, i: usize) -> Vec<f64> {
        self.bx_row(&data.covariate_row(i))
    }

    pub fn bzx(&self, data: &Dataset, z: f64, i: usize) -> Vec<f64> {
        self.bzx_row(z, &data.covariate_row(i))
    }

    pub fn bdzx(&self, data: &Dataset, d: f64, z: f64, i: usize) -> Vec<f64> {
        self.bdzx_row(d, z, &data.covariate_row(i))
    }

    /// Covariate columns referenced by the basis, in order.
    pub fn used_covariates(&self, data: &Dataset, i: usize) -> Vec<f64> {
        self.covariates.iter().map(|&j| data.x[j][i]).collect()
    }

    /// Check the basis against the columns of `data`.
    pub fn check(&self, data: &Dataset) -> Result<()> {
        if self.degree == 0 {
            return Err(Error::Invalid("basis degree must be at least 1".into()));
        }
        if let Some(&j) = self.covariates.iter().find(|&&j| j >= data.ncov()) {
            return Err(Error::Invalid(format!("basis references covariate {j} but data has {}", data.ncov())));
        }
        Ok(())
    }

    /// Design matrix with rows `B(x_i)`.
    pub fn design_x(&self, data: &Dataset) -> Result<DMatrix<f64>> {
        self.check(data)?;
        Ok(rows_to_matrix((0..data.n()).map(|i| self.bx(data, i)).collect(), self.len_x()))
    }

    /// Design matrix with rows `B(z_i, x_i)`, or with `z` overridden.
    pub fn design_zx(&self, data: &Dataset, z: Option<f64>) -> Result<DMatrix<f64>> {
        self.check(data)?;
        let rows = (0..data.n()).map(|i| self.bzx(data, z.unwrap_or(data.z[i]), i)).collect();
        Ok(rows_to_matrix(rows, self.len_zx()))
    }

    /// Design matrix with rows `B(d_i, z_i, x_i)`.
    pub fn design_dzx(&self, data: &Dataset) -> Result<DMatrix<f64>> {
        self.check(data)?;
        let rows = (0..data.n()).map(|i| self.bdzx(data, data.d[i], data.z[i], i)).collect();
        Ok(rows_to_matrix(rows, self.len_dzx()))
    }
}

fn rows_to_matrix(rows: Vec<Vec<f64>>, p: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), p, |i, j| rows[i][j])
}

/// Error if `x` (with positive-weight rows) lacks full column rank.
pub fn check_rank(x: &DMatrix<f64>, weights: Option<&[f64]>) -> Result<()> {
    let mut xtx = DMatrix::zeros(x.ncols(), x.ncols());
    for i in 0..x.nrows() {
        let w = weights.map_or(1.0, |w| w[i]);
        if w <= 0.0 {
            continue;
        }
        let r = x.row(i);
        xtx += w * r.transpose() * r;
    }
    let sv = xtx.clone().symmetric_eigenvalues();
    let max = sv.iter().cloned().fold(0.0_f64, f64::max);
    let min = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(max > 0.0) || min <= 1e-12 * max {
        return Err(Error::RankDeficient(format!(
            "X'X eigenvalue ratio {:.3e} with {} columns",
            if max > 0.0 { min / max } else { 0.0 },
            x.ncols()
        )));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct ProbitOptions {
    pub max_iter: usize,
    pub max_halvings: usize,
    /// Bound on the sup-norm of the average score.
    pub tol: f64,
}

impl Default for ProbitOptions {
    fn default() -> Self {
        ProbitOptions { max_iter: 50, max_halvings: 30, tol: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbitFit {
    pub coef: Vec<f64>,
    /// Average (weighted) log-likelihood.
    pub loglik: f64,
    /// Sup-norm of the average score at `coef`.
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Row-major copy of a design matrix.
fn row_major(x: &DMatrix<f64>) -> Vec<f64> {
    x.transpose().as_slice().to_vec()
}

/// Average log-likelihood, score and negative Hessian, with the design in
/// row-major layout (`p` columns).
fn probit_terms(
    resp: &[bool],
    xr: &[f64],
    p: usize,
    w: Option<&[f64]>,
    beta: &DVector<f64>,
) -> (f64, DVector<f64>, DMatrix<f64>, f64) {
    let beta = beta.as_slice();
    let mut ll = 0.0;
    let mut g = vec![0.0; p];
    let mut h = vec![0.0; p * p];
    let mut wsum = 0.0;
    let mut max_eta = 0.0_f64;
    for (i, row) in xr.chunks_exact(p).enumerate() {
        let wi = w.map_or(1.0, |w| w[i]);
        if wi == 0.0 {
            continue;
        }
        wsum += wi;
        let e: f64 = row.iter().zip(beta).map(|(a, b)| a * b).sum();
        max_eta = max_eta.max(e.abs());
        // Signed index q so that the observation's probability is Φ(q).
        let (q, sgn) = if resp[i] { (e, 1.0) } else { (-e, -1.0) };
        let (lnc, lam) = if q > -37.0 && q <= 5.0 {
            let c = gauss::cdf(q);
            (c.ln(), gauss::phi(q) / c)
        } else {
            (gauss::ln_cdf(q), gauss::mills(q))
        };
        ll += wi * lnc;
        let gs = wi * sgn * lam;
        let c = wi * lam * (lam + q);
        for a in 0..p {
            g[a] += gs * row[a];
            let ca = c * row[a];
            let ha = &mut h[a * p..a * p + a + 1];
            for (hb, xb) in ha.iter_mut().zip(row) {
                *hb += ca * xb;
            }
        }
    }
    let mut hm = DMatrix::zeros(p, p);
    for a in 0..p {
        for b in 0..=a {
            hm[(a, b)] = h[a * p + b] / wsum;
            hm[(b, a)] = hm[(a, b)];
        }
    }
    (ll / wsum, DVector::from_vec(g) / wsum, hm, max_eta)
}

/// Probit maximum likelihood by Newton–Raphson with step halving.
///
/// Converges when the average score is below `opts.tol` and the Newton step
/// has collapsed. A separating direction shows up as indices beyond ±8
/// while the Newton step stays large for several iterations; the columns
/// still moving are reported.
pub fn probit_fit(
    resp: &[bool],
    x: &DMatrix<f64>,
    weights: Option<&[f64]>,
    start: Option<&[f64]>,
    opts: &ProbitOptions,
) -> Result<ProbitFit> {
    let p = x.ncols();
    if resp.len() != x.nrows() {
        return Err(Error::Invalid("response and design lengths differ".into()));
    }
    let (mut n1, mut n0) = (0.0, 0.0);
    for (i, &r) in resp.iter().enumerate() {
        let w = weights.map_or(1.0, |w| w[i]);
        if r { n1 += w } else { n0 += w }
    }
    if n1 == 0.0 || n0 == 0.0 {
        return Err(Error::Separation { columns: (0..p).collect(), grid_point: None });
    }
    let mut beta = match start {
        Some(s) if s.len() == p => DVector::from_column_slice(s),
        _ => DVector::zeros(p),
    };
    let xr = row_major(x);
    let (mut ll, mut g, mut h, mut max_eta) = probit_terms(resp, &xr, p, weights, &beta);
    let mut iterations = 0;
    let mut last_step = f64::INFINITY;
    let mut moving: Vec<usize> = vec![];
    let mut diverging = 0;
    while iterations < opts.max_iter {
        let step = match h.clone().cholesky() {
            Some(ch) => ch.solve(&g),
            None => match h.clone().lu().solve(&g) {
                Some(s) => s,
                None => {
                    if max_eta > 8.0 {
                        break;
                    }
                    return Err(Error::RankDeficient("singular probit information matrix".into()));
                }
            },
        };
        let step_norm = step.amax();
        let grad = g.amax();
        if grad <= opts.tol && step_norm <= 1e-13 * (1.0 + beta.amax()) {
            last_step = step_norm;
            break;
        }
        iterations += 1;
        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..=opts.max_halvings {
            let cand = &beta + alpha * &step;
            let (l2, g2, h2, m2) = probit_terms(resp, &xr, p, weights, &cand);
            // Near the optimum the log-likelihood change drops below summation
            // roundoff, so a shrinking score also counts as progress.
            let ll_ok = l2 >= ll - 1e-12 * (1.0 + ll.abs());
            let g_ok = grad <= 1e-4 && g2.amax() < grad;
            if l2.is_finite() && (ll_ok || g_ok) {
                moving = (0..p).filter(|&j| (alpha * step[j]).abs() > 1e-3).collect();
                beta = cand;
                ll = l2;
                g = g2;
                h = h2;
                max_eta = m2;
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        last_step = alpha * step_norm;
        if !accepted {
            break;
        }
        // A Newton step may overshoot once; a separating direction keeps
        // pushing indices outward iteration after iteration.
        if max_eta > 8.0 && !moving.is_empty() {
            diverging += 1;
            if diverging >= 5 {
                return Err(Error::Separation { columns: moving, grid_point: None });
            }
        } else {
            diverging = 0;
        }
    }
    let grad_norm = g.amax();
    let converged = grad_norm <= opts.tol;
    if !converged && max_eta > 8.0 && last_step > 1e-6 {
        return Err(Error::Separation { columns: moving, grid_point: None });
    }
    Ok(ProbitFit { coef: beta.iter().cloned().collect(), loglik: ll, grad_norm, iterations, converged })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum DrSide {
    /// `1{Y ≤ y}` on `B(D, Z, X)`.
    Outcome,
    /// `1{D ≤ d}` on `B(Z, X)`.
    Treatment,
}

/// Coefficient curves from a distribution regression.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DrFit {
    pub side: DrSide,
    pub grid: Vec<f64>,
    pub coef: Vec<Vec<f64>>,
    pub converged: Vec<bool>,
    pub grad_norm: Vec<f64>,
    pub iterations: Vec<usize>,
}

impl DrFit {
    pub fn index(&self, k: usize, row: &[f64]) -> f64 {
        self.coef[k].iter().zip(row).map(|(a, b)| a * b).sum()
    }
}

/// Minimum count on each side of a threshold: `max(10, 1% of n)`.
pub fn min_side_count(n: usize) -> usize {
    10.max(n.div_ceil(100))
}

/// Check that every threshold splits the data with enough observations on
/// each side.
pub fn check_grid(values: &[f64], grid: &[f64], weights: Option<&[f64]>) -> Result<()> {
    let active: Vec<f64> = values
        .iter()
        .enumerate()
        .filter(|(i, _)| weights.is_none_or(|w| w[*i] > 0.0))
        .map(|(_, &v)| v)
        .collect();
    let need = min_side_count(values.len());
    for &t in grid {
        let below = active.iter().filter(|&&v| v <= t).count();
        let above = active.len() - below;
        if below < need || above < need {
            return Err(Error::Precondition(format!(
                "threshold {t} leaves {below} observations at or below and {above} above; need {need} on each side"
            )));
        }
    }
    Ok(())
}

/// Fit the distribution regression on `side` over `grid`.
///
/// Grid points are fit in order with each fit warm-started from the
/// previous one, or from `starts` when given. With `reverse` the sweep runs
/// from the last grid point down.
pub fn dr_fit(
    data: &Dataset,
    side: DrSide,
    basis: &BasisSpec,
    grid: &[f64],
    weights: Option<&[f64]>,
    starts: Option<&[Vec<f64>]>,
    reverse: bool,
) -> Result<DrFit> {
    let (values, x) = match side {
        DrSide::Outcome => (&data.y, basis.design_dzx(data)?),
        DrSide::Treatment => (&data.d, basis.design_zx(data, None)?),
    };
    check_grid(values, grid, weights)?;
    check_rank(&x, weights)?;
    let m = grid.len();
    let mut coef = vec![vec![]; m];
    let mut converged = vec![false; m];
    let mut grad_norm = vec![0.0; m];
    let mut iterations = vec![0; m];
    let order: Vec<usize> = if reverse { (0..m).rev().collect() } else { (0..m).collect() };
    let mut prev: Option<Vec<f64>> = None;
    let opts = ProbitOptions::default();
    for k in order {
        let t = grid[k];
        let resp: Vec<bool> = values.iter().map(|&v| v <= t).collect();
        let fit = match starts.map(|s| probit_fit(&resp, &x, weights, Some(&s[k]), &opts)) {
            Some(Ok(f)) if f.converged => f,
            _ => probit_fit(&resp, &x, weights, prev.as_deref(), &opts).map_err(|e| e.at_grid(t))?,
        };
        prev = Some(fit.coef.clone());
        coef[k] = fit.coef;
        converged[k] = fit.converged;
        grad_norm[k] = fit.grad_norm;
        iterations[k] = fit.iterations;
    }
    Ok(DrFit { side, grid: grid.to_vec(), coef, converged, grad_norm, iterations })
}

/// Monotone rearrangement: the sorted values.
pub fn rearrange(values: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn probit_data(n: usize, beta: [f64; 2], seed: u64) -> (Vec<bool>, DMatrix<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = vec![];
        let mut resp = vec![];
        for _ in 0..n {
            let x: f64 = rng.random_range(-2.0..2.0);
            let u: f64 = rng.random();
            resp.push(u < gauss::cdf(beta[0] + beta[1] * x));
            rows.push(vec![1.0, x]);
        }
        (resp, rows_to_matrix(rows, 2))
    }

    #[test]
    fn intercept_only_is_probit_of_mean() {
        let resp: Vec<bool> = (0..1000).map(|i| i % 10 < 3).collect();
        let x = DMatrix::from_element(1000, 1, 1.0);
        let f = probit_fit(&resp, &x, None, None, &ProbitOptions::default()).unwrap();
        assert!((f.coef[0] - gauss::quantile_f64(0.3)).abs() < 1e-10, "{f:?} {}", gauss::quantile_f64(0.3));
        assert!(f.converged);
    }

    #[test]
    fn score_matches_finite_differences() {
        let (resp, x) = probit_data(500, [0.2, -0.7], 3);
        let f = probit_fit(&resp, &x, None, None, &ProbitOptions::default()).unwrap();
        let b = DVector::from_vec(vec![f.coef[0] + 0.1, f.coef[1] - 0.2]);
        let (_, g, _, _) = probit_terms(&resp, &row_major(&x), x.ncols(), None, &b);
        let h = 1e-5;
        for j in 0..2 {
            let mut bp = b.clone();
            bp[j] += h;
            let mut bm = b.clone();
            bm[j] -= h;
            let fd = (probit_terms(&resp, &row_major(&x), x.ncols(), None, &bp).0 - probit_terms(&resp, &row_major(&x), x.ncols(), None, &bm).0) / (2.0 * h);
            assert!(((fd - g[j]) / g[j]).abs() < 1e-5, "{fd} {}", g[j]);
        }
    }

    #[test]
    fn optimum_beats_perturbations() {
        let (resp, x) = probit_data(800, [-0.3, 1.1], 5);
        let f = probit_fit(&resp, &x, None, None, &ProbitOptions::default()).unwrap();
        assert!(f.grad_norm <= 1e-8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (l0, ..) = probit_terms(&resp, &row_major(&x), x.ncols(), None, &DVector::zeros(2));
        assert!(f.loglik >= l0);
        for _ in 0..100 {
            let b = DVector::from_vec(vec![
                f.coef[0] + rng.random_range(-0.1..0.1),
                f.coef[1] + rng.random_range(-0.1..0.1),
            ]);
            assert!(probit_terms(&resp, &row_major(&x), x.ncols(), None, &b).0 <= f.loglik);
        }
    }

    #[test]
    fn separation_detected() {
        let resp = vec![true; 50];
        let x = DMatrix::from_element(50, 1, 1.0);
        assert!(matches!(
            probit_fit(&resp, &x, None, None, &ProbitOptions::default()),
            Err(Error::Separation { .. })
        ));
        // Perfect split on a covariate.
        let rows: Vec<Vec<f64>> = (0..60).map(|i| vec![1.0, i as f64 / 10.0 - 3.0]).collect();
        let resp: Vec<bool> = (0..60).map(|i| i >= 30).collect();
        match probit_fit(&resp, &rows_to_matrix(rows, 2), None, None, &ProbitOptions::default()) {
            Err(Error::Separation { columns, .. }) => assert!(columns.contains(&1)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn rank_deficiency() {
        let rows: Vec<Vec<f64>> = (0..40).map(|i| vec![1.0, 2.0, i as f64]).collect();
        let x = rows_to_matrix(rows, 3);
        assert!(matches!(check_rank(&x, None), Err(Error::RankDeficient(_))));
    }

    #[test]
    fn rearrangement() {
        assert_eq!(rearrange(&[0.2, 0.1, 0.4]), vec![0.1, 0.2, 0.4]);
        let m = vec![0.1, 0.3, 0.3, 0.9];
        assert_eq!(rearrange(&m), m);
    }

    #[test]
    fn median_grid_and_bad_threshold() {
        let y: Vec<f64> = (0..101).map(|i| i as f64).collect();
        let n = y.len();
        let data = Dataset::new(y, vec![0.0; n], (0..n).map(|i| (i % 2) as f64).collect(), vec![]).unwrap();
        let x = BasisSpec::intercept_only().design_x(&data).unwrap();
        let med = crate::data::quantile_type7(&data.y, 0.5);
        let resp: Vec<bool> = data.y.iter().map(|&v| v <= med).collect();
        let f = probit_fit(&resp, &x, None, None, &ProbitOptions::default()).unwrap();
        assert!((gauss::cdf(f.coef[0]) - 0.5).abs() <= 1.0 / n as f64);
        assert!(matches!(check_grid(&data.y, &[-1.0], None), Err(Error::Precondition(_))));
    }
}
