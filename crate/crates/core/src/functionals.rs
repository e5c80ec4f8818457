//! Covariate-marginal potential-outcome CDFs and the structural functionals
//! built on them: quantile and average structural functions, their
//! treatment effects, counterfactuals for the treated and the marginal local
//! dependence.

use crate::copulas::{self, Family};
use crate::data::Dataset;
use crate::dgp::TreatmentKind;
use crate::dr;
use crate::error::{Error, Result};
use crate::estimate::{ExogenousFit, PotentialOutcomeFit};
use serde::{Deserialize, Serialize};

/// Rule for values between grid points.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Extrapolation {
    /// `max{F(ȳ) : ȳ ≤ y}`.
    Step,
    /// Linear between neighbouring grid points.
    Linear,
}

/// How quantiles are read off a grid CDF.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum QuantileRule {
    /// Smallest grid point with `F ≥ τ`.
    #[default]
    Grid,
    /// Linear interpolation of the inverse between grid points.
    Linear,
}

/// `F̂_{Y_d}(y)` on a grid for each treatment value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginalCdf {
    pub y: Vec<f64>,
    pub d: Vec<f64>,
    /// Indexed `[d][y]`; monotone in `y` and inside `[0, 1]`.
    pub values: Vec<Vec<f64>>,
    pub extrapolation: Extrapolation,
    /// Covariate mass dropped at each `d` because every grid point there
    /// was flagged, as `(d, share)`.
    pub excluded: Vec<(f64, f64)>,
}

impl MarginalCdf {
    /// Build from raw values, clipping to `[0, 1]` and rearranging.
    pub fn new(y: Vec<f64>, d: Vec<f64>, values: Vec<Vec<f64>>, extrapolation: Extrapolation) -> Result<MarginalCdf> {
        if y.is_empty() || y.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Invalid("outcome grid must be strictly increasing".into()));
        }
        if values.len() != d.len() || values.iter().any(|v| v.len() != y.len()) {
            return Err(Error::Invalid("CDF table does not match the grids".into()));
        }
        if values.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("non-finite CDF value".into()));
        }
        let values = values.iter().map(|v| dr::rearrange(&v.iter().map(|x| x.clamp(0.0, 1.0)).collect::<Vec<_>>())).collect();
        Ok(MarginalCdf { y, d, values, extrapolation, excluded: vec![] })
    }

    pub fn d_index(&self, d: f64) -> Result<usize> {
        self.d
            .iter()
            .position(|&v| v == d)
            .ok_or_else(|| Error::Invalid(format!("treatment value {d} not among {:?}", self.d)))
    }

    /// `F̂_{Y_d}(y)` off the grid: zero below the first point, the last
    /// value beyond the end, and the extrapolation rule in between.
    pub fn eval(&self, di: usize, y: f64) -> f64 {
        let v = &self.values[di];
        let k = self.y.partition_point(|&g| g <= y);
        if k == 0 {
            return 0.0;
        }
        if k == self.y.len() {
            return v[k - 1];
        }
        match self.extrapolation {
            Extrapolation::Step => v[k - 1],
            Extrapolation::Linear => {
                let t = (y - self.y[k - 1]) / (self.y[k] - self.y[k - 1]);
                v[k - 1] + t * (v[k] - v[k - 1])
            }
        }
    }
}

/// Average the conditional fits over the sample covariate distribution.
pub fn marginalize(fit: &PotentialOutcomeFit) -> Result<MarginalCdf> {
    let ny = fit.y_grid.len();
    let mut values = Vec::with_capacity(fit.n_d());
    let mut excluded = vec![];
    for di in 0..fit.n_d() {
        let mut acc = vec![0.0; ny];
        let mut mass = 0.0;
        for (x, &w) in fit.support.iter().zip(&fit.support_weight) {
            if let Some(c) = fit.curve(di, x) {
                acc.iter_mut().zip(&c.f).for_each(|(a, f)| *a += w * f);
                mass += w;
            }
        }
        if mass <= 0.0 {
            return Err(Error::NonConvergence(format!(
                "every grid point is flagged for d = {}",
                fit.d_grid[di]
            )));
        }
        if mass < 1.0 - 1e-12 {
            excluded.push((fit.d_grid[di], 1.0 - mass));
        }
        values.push(acc.iter().map(|a| a / mass).collect());
    }
    let rule = match fit.kind {
        TreatmentKind::Continuous => Extrapolation::Linear,
        _ => Extrapolation::Step,
    };
    let mut m = MarginalCdf::new(fit.y_grid.clone(), fit.d_grid.clone(), values, rule)?;
    m.excluded = excluded;
    Ok(m)
}

impl From<&ExogenousFit> for MarginalCdf {
    fn from(f: &ExogenousFit) -> MarginalCdf {
        MarginalCdf {
            y: f.y_grid.clone(),
            d: f.d_grid.clone(),
            values: f.values.clone(),
            extrapolation: Extrapolation::Linear,
            excluded: vec![],
        }
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::Invalid(format!("quantile index {tau} outside (0, 1)")));
    }
    Ok(())
}

/// Quantile structural function `Q_τ(F_{Y_d})`.
pub fn qsf(f: &MarginalCdf, tau: f64, d: f64, rule: QuantileRule) -> Result<f64> {
    check_tau(tau)?;
    let v = &f.values[f.d_index(d)?];
    let j = v.partition_point(|&x| x < tau);
    if j == v.len() {
        return Err(Error::Boundary { tau, side: "above" });
    }
    if j == 0 {
        // F(y_min) ≥ τ: the infimum is attained on the grid only with equality.
        if v[0] > tau {
            return Err(Error::Boundary { tau, side: "below" });
        }
        return Ok(f.y[0]);
    }
    Ok(match rule {
        QuantileRule::Grid => f.y[j],
        QuantileRule::Linear => {
            let (a, b) = (v[j - 1], v[j]);
            f.y[j - 1] + (tau - a) / (b - a) * (f.y[j] - f.y[j - 1])
        }
    })
}

/// `(Q_τ(F_{Y_d}) − Q_τ(F_{Y_d'})) / (d − d')`.
pub fn qte(f: &MarginalCdf, tau: f64, d: f64, d_prime: f64, rule: QuantileRule) -> Result<f64> {
    if d == d_prime {
        return Err(Error::Invalid("treatment effect needs two distinct treatment values".into()));
    }
    Ok((qsf(f, tau, d, rule)? - qsf(f, tau, d_prime, rule)?) / (d - d_prime))
}

/// `y_min + Σ_j (1 − F(y_j))·(y_{j+1} − y_j)`.
pub fn asf(f: &MarginalCdf, d: f64) -> Result<f64> {
    let v = &f.values[f.d_index(d)?];
    let tail: f64 = f.y.windows(2).zip(v).map(|(w, fv)| (1.0 - fv) * (w[1] - w[0])).sum();
    Ok(f.y[0] + tail)
}

/// Bound on the error of [`asf`] from mass outside the grid:
/// `(F(y_min) + 1 − F(y_max))·(y_max − y_min)`.
pub fn asf_bias_bound(f: &MarginalCdf, d: f64) -> Result<f64> {
    let v = &f.values[f.d_index(d)?];
    let range = f.y[f.y.len() - 1] - f.y[0];
    Ok((v[0] + 1.0 - v[v.len() - 1]) * range)
}

pub fn ate(f: &MarginalCdf, d: f64, d_prime: f64) -> Result<f64> {
    if d == d_prime {
        return Err(Error::Invalid("treatment effect needs two distinct treatment values".into()));
    }
    Ok((asf(f, d)? - asf(f, d_prime)?) / (d - d_prime))
}

/// One row of tidy functional output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FunctionalRow {
    pub parameter: String,
    pub d: f64,
    pub d_prime: Option<f64>,
    pub tau_or_y: Option<f64>,
    pub estimate: f64,
}

/// CDF of `Y₀` among the treated on the same grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Counterfactual {
    pub y: Vec<f64>,
    pub values: Vec<f64>,
    /// Points where the raw formula fell outside `[0, 1]`.
    pub clipped: usize,
    /// True when the untreated-at-Z=0 shortcut replaced `F_{Y₀}`.
    pub used_z0_shortcut: bool,
}

/// `[F_{Y₀}(y) − (1 − π)·F_{Y|D}(y|0)] / π`, clipped and rearranged.
pub fn treated_counterfactual(f_y0: &[f64], f_y_given_d0: &[f64], pi: f64) -> Result<(Vec<f64>, usize)> {
    if !(pi > 0.0 && pi < 1.0) {
        return Err(Error::Invalid(format!("treated share π = {pi} must lie in (0, 1)")));
    }
    if f_y0.len() != f_y_given_d0.len() {
        return Err(Error::Invalid("CDF vectors have different lengths".into()));
    }
    let mut clipped = 0;
    let raw: Vec<f64> = f_y0
        .iter()
        .zip(f_y_given_d0)
        .map(|(a, b)| {
            let v = (a - (1.0 - pi) * b) / pi;
            if !(0.0..=1.0).contains(&v) {
                clipped += 1;
            }
            v.clamp(0.0, 1.0)
        })
        .collect();
    Ok((dr::rearrange(&raw), clipped))
}

/// Counterfactual for the treated (`D = 1`) from a binary-treatment
/// marginal and the sample. When nobody is treated at `Z = 0`,
/// `F_{Y₀}` is taken as the empirical `F_{Y|Z}(·|0)`.
pub fn treated_counterfactual_from_sample(f: &MarginalCdf, data: &Dataset) -> Result<Counterfactual> {
    let n = data.n() as f64;
    let treated = data.d.iter().filter(|&&d| d == 1.0).count() as f64;
    let pi = treated / n;
    let ecdf = |keep: &dyn Fn(usize) -> bool| -> Vec<f64> {
        let idx: Vec<usize> = (0..data.n()).filter(|&i| keep(i)).collect();
        f.y.iter()
            .map(|&y| idx.iter().filter(|&&i| data.y[i] <= y).count() as f64 / idx.len().max(1) as f64)
            .collect()
    };
    let untreated = ecdf(&|i| data.d[i] == 0.0);
    let none_treated_z0 = (0..data.n()).filter(|&i| data.z[i] == 0.0).all(|i| data.d[i] == 0.0);
    let f_y0 = if none_treated_z0 {
        ecdf(&|i| data.z[i] == 0.0)
    } else {
        f.values[f.d_index(0.0)?].clone()
    };
    let (values, clipped) = treated_counterfactual(&f_y0, &untreated, pi)?;
    Ok(Counterfactual { y: f.y.clone(), values, clipped, used_z0_shortcut: none_treated_z0 })
}

/// Covariate-marginal local dependence at `(v, d, y)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginalDependence {
    pub rho: f64,
    /// `∫ C(F_{Y_d|X}(y|x), v; ρ(y; x)) dF_X(x)`.
    pub joint: f64,
    /// `F̂_{Y_d}(y)`.
    pub f: f64,
    /// The averaged joint probability fell on or outside a Fréchet bound.
    pub boundary: bool,
}

pub fn marginal_local_dependence(fit: &PotentialOutcomeFit, v: f64, d: f64, yi: usize) -> Result<MarginalDependence> {
    if !(v > 0.0 && v < 1.0) {
        return Err(Error::Invalid(format!("v = {v} outside (0, 1)")));
    }
    if yi >= fit.y_grid.len() {
        return Err(Error::Invalid(format!("grid index {yi} out of range")));
    }
    let di = fit.d_index(d)?;
    let (mut joint, mut f, mut mass) = (0.0, 0.0, 0.0);
    for (x, &w) in fit.support.iter().zip(&fit.support_weight) {
        if let Some(c) = fit.curve(di, x) {
            let u = c.f[yi];
            joint += w * copulas::c_unchecked(Family::Gaussian, u, v, c.rho[yi]);
            f += w * u;
            mass += w;
        }
    }
    if mass <= 0.0 {
        return Err(Error::NonConvergence(format!("every grid point is flagged for d = {d}")));
    }
    joint /= mass;
    f /= mass;
    if !(f > 0.0 && f < 1.0) {
        return Err(Error::Invalid(format!("F̂ = {f} at the boundary; local dependence undefined")));
    }
    let (lo, hi) = copulas::frechet(f, v);
    let boundary = joint <= lo || joint >= hi;
    let t = joint.clamp(lo, hi);
    let sol = copulas::solve_rho(Family::Gaussian, t, f, v)?;
    Ok(MarginalDependence { rho: sol.rho, joint, f, boundary: boundary || sol.boundary.is_some() })
}
