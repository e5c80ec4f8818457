//! Estimator selection, grids, functional requests and the bootstrap
//! pipelines shared by the subcommands.

use crate::config::{BasisConfig, FunctionalConfig, GridConfig, Parameter, TargetConfig};
use crate::CliError;
use copiv_core::data::{quantile_type7, Dataset, EvalGrid};
use copiv_core::dgp::{Law, TreatmentKind};
use copiv_core::dr::{self, BasisSpec};
use copiv_core::estimate::{self, FitControl, PotentialOutcomeFit};
use copiv_core::functionals::{self, FunctionalRow, MarginalCdf, QuantileRule};
use copiv_core::{Error, Result};
use serde::{Deserialize, Serialize};

/// Largest number of distinct values treated as an ordered treatment.
pub const MAX_ORDERED_LEVELS: usize = 50;

/// Kind implied by the observed treatment values: 0/1 is binary, at most
/// [`MAX_ORDERED_LEVELS`] integer values is ordered, anything else continuous.
pub fn infer_kind(levels: &[f64]) -> TreatmentKind {
    if levels == [0.0, 1.0] {
        TreatmentKind::Binary
    } else if levels.len() <= MAX_ORDERED_LEVELS && levels.iter().all(|v| v.fract() == 0.0) {
        TreatmentKind::Ordered
    } else {
        TreatmentKind::Continuous
    }
}

/// Configured kind (or the inferred one) plus a warning when the two
/// disagree.
pub fn resolve_kind(configured: Option<TreatmentKind>, data: &Dataset) -> (TreatmentKind, Option<String>) {
    let levels = data.treatment_levels();
    let inferred = infer_kind(&levels);
    match configured {
        None => (inferred, None),
        Some(k) if k == inferred => (k, None),
        Some(k) => (
            k,
            Some(format!(
                "treatment configured as {k:?} but {} distinct values suggest {inferred:?}",
                levels.len()
            )),
        ),
    }
}

pub fn basis_for(cfg: &BasisConfig, ncov: usize) -> Result<BasisSpec> {
    if cfg.degree == 0 {
        return Err(Error::Invalid("basis degree must be at least 1".into()));
    }
    Ok(BasisSpec { covariates: (0..ncov).collect(), degree: cfg.degree, saturate_z: cfg.saturate_z })
}

fn sorted_union(mut v: Vec<f64>, extra: &[f64]) -> Vec<f64> {
    v.extend_from_slice(extra);
    v.sort_by(|a, b| a.total_cmp(b));
    v.dedup();
    v
}

/// Trimming probabilities for quantile grids on `v`, tightened so that about
/// twice the minimum per-side count of a sample of size `n` lies beyond the
/// outermost grid points; with `per_arm` this holds within each instrument
/// arm. Thin arm tails otherwise separate the distribution regressions.
fn trim(v: &[f64], z: &[f64], n: usize, lo: f64, hi: f64, per_arm: bool) -> (f64, f64) {
    let need = (2 * dr::min_side_count(n)) as f64;
    let e = (need / n as f64).min(0.5);
    let (mut lower, mut upper) = (quantile_type7(v, e), quantile_type7(v, 1.0 - e));
    for arm in if per_arm { [0.0, 1.0].as_slice() } else { &[] } {
        let vals: Vec<f64> = v.iter().zip(z).filter(|(_, &zi)| zi == *arm).map(|(&a, _)| a).collect();
        if vals.is_empty() {
            continue;
        }
        let n_arm = n as f64 * vals.len() as f64 / v.len() as f64;
        let e = (need / n_arm).min(0.5);
        lower = lower.max(quantile_type7(&vals, e));
        upper = upper.min(quantile_type7(&vals, 1.0 - e));
    }
    let share = |t: f64, strict: bool| v.iter().filter(|&&a| if strict { a < t } else { a <= t }).count() as f64 / v.len() as f64;
    let (plo, phi) = (lo.max(share(lower, true)), hi.min(share(upper, false)));
    if plo < phi { (plo, phi) } else { (0.5, 0.5) }
}

/// Outcome grid: explicit points, or empirical quantiles of the sample's
/// outcomes placed for samples of size `n`; merged with `extra`. With a
/// continuous treatment the edges are also kept inside each instrument arm.
pub fn outcome_grid(kind: TreatmentKind, cfg: &GridConfig, data: &Dataset, n: usize, extra: &[f64]) -> Vec<f64> {
    let base = match &cfg.y {
        Some(g) => g.clone(),
        None => {
            let (lo, hi) = trim(&data.y, &data.z, n, cfg.y_lo, cfg.y_hi, kind == TreatmentKind::Continuous);
            EvalGrid::quantile_points(&data.y, cfg.y_count, lo, hi)
        }
    };
    sorted_union(base, extra)
}

/// Treatment grid: the observed levels of a discrete treatment; for a
/// continuous one explicit points or empirical quantiles, merged with
/// `extra`.
pub fn treatment_grid(kind: TreatmentKind, cfg: &GridConfig, data: &Dataset, n: usize, extra: &[f64]) -> Vec<f64> {
    match kind {
        TreatmentKind::Continuous => {
            let base = match &cfg.d {
                Some(g) => g.clone(),
                None if cfg.d_count == 0 => vec![],
                None => {
                    let (lo, hi) = trim(&data.d, &data.z, n, cfg.d_lo, cfg.d_hi, true);
                    EvalGrid::quantile_points(&data.d, cfg.d_count, lo, hi)
                }
            };
            sorted_union(base, extra)
        }
        _ => data.treatment_levels(),
    }
}

/// A potential-outcome estimator on fixed grids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimator {
    pub kind: TreatmentKind,
    pub basis: BasisSpec,
    pub y_grid: Vec<f64>,
    pub d_grid: Vec<f64>,
}

impl Estimator {
    pub fn fit(&self, data: &Dataset, ctl: FitControl) -> Result<PotentialOutcomeFit> {
        match self.kind {
            TreatmentKind::Binary => estimate::fit_binary_with(data, &self.basis, &self.y_grid, ctl),
            TreatmentKind::Ordered => estimate::fit_ordered_with(data, &self.basis, &self.y_grid, ctl),
            TreatmentKind::Continuous => {
                estimate::fit_continuous_with(data, &self.basis, &self.y_grid, &self.d_grid, ctl)
            }
        }
    }

    /// Covariate-marginal CDFs from a fit under `weights`, warm-started
    /// from `warm` when given.
    pub fn marginal(&self, data: &Dataset, weights: Option<&[f64]>, warm: Option<&PotentialOutcomeFit>) -> Result<MarginalCdf> {
        functionals::marginalize(&self.fit(data, FitControl { weights, warm })?)
    }

    /// Baseline that treats D as exogenous given X.
    pub fn exogenous_marginal(&self, data: &Dataset, weights: Option<&[f64]>) -> Result<MarginalCdf> {
        let f = estimate::fit_exogenous_dr_with(data, &self.basis, &self.y_grid, &self.d_grid, weights)?;
        Ok(MarginalCdf::from(&f))
    }
}

/// One scalar functional of the potential-outcome distributions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "parameter", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Item {
    Cdf { d: f64, y: f64 },
    Qsf { d: f64, tau: f64 },
    Qte { d: f64, d_prime: f64, tau: f64 },
    Asf { d: f64 },
    Ate { d: f64, d_prime: f64 },
}

impl Item {
    pub fn parameter(&self) -> &'static str {
        match self {
            Item::Cdf { .. } => "CDF",
            Item::Qsf { .. } => "QSF",
            Item::Qte { .. } => "QTE",
            Item::Asf { .. } => "ASF",
            Item::Ate { .. } => "ATE",
        }
    }

    pub fn d(&self) -> f64 {
        match *self {
            Item::Cdf { d, .. } | Item::Qsf { d, .. } | Item::Qte { d, .. } | Item::Asf { d } | Item::Ate { d, .. } => d,
        }
    }

    pub fn d_prime(&self) -> Option<f64> {
        match *self {
            Item::Qte { d_prime, .. } | Item::Ate { d_prime, .. } => Some(d_prime),
            _ => None,
        }
    }

    pub fn tau_or_y(&self) -> Option<f64> {
        match *self {
            Item::Cdf { y, .. } => Some(y),
            Item::Qsf { tau, .. } | Item::Qte { tau, .. } => Some(tau),
            _ => None,
        }
    }

    pub fn evaluate(&self, f: &MarginalCdf, rule: QuantileRule) -> Result<f64> {
        match *self {
            Item::Cdf { d, y } => Ok(f.eval(f.d_index(d)?, y)),
            Item::Qsf { d, tau } => functionals::qsf(f, tau, d, rule),
            Item::Qte { d, d_prime, tau } => functionals::qte(f, tau, d, d_prime, rule),
            Item::Asf { d } => functionals::asf(f, d),
            Item::Ate { d, d_prime } => functionals::ate(f, d, d_prime),
        }
    }

    /// Like [`Item::evaluate`], but a quantile beyond the outcome grid is
    /// censored at the grid edge instead of failing. Used for bootstrap
    /// replicates, where an occasional draw runs off the grid.
    pub fn evaluate_censored(&self, f: &MarginalCdf, rule: QuantileRule) -> Result<f64> {
        let q = |d: f64, tau: f64| match functionals::qsf(f, tau, d, rule) {
            Err(Error::Boundary { side, .. }) => Ok(if side == "above" { f.y[f.y.len() - 1] } else { f.y[0] }),
            other => other,
        };
        match *self {
            Item::Qsf { d, tau } => q(d, tau),
            Item::Qte { d, d_prime, tau } => Ok((q(d, tau)? - q(d_prime, tau)?) / (d - d_prime)),
            _ => self.evaluate(f, rule),
        }
    }

    /// Population value under `law`.
    pub fn truth(&self, law: &Law) -> f64 {
        match *self {
            Item::Cdf { d, y } => law.outcome_cdf(d, y),
            Item::Qsf { d, tau } => law.outcome_quantile(d, tau),
            Item::Qte { d, d_prime, tau } => {
                (law.outcome_quantile(d, tau) - law.outcome_quantile(d_prime, tau)) / (d - d_prime)
            }
            Item::Asf { d } => law.outcome_mean(d),
            Item::Ate { d, d_prime } => (law.outcome_mean(d) - law.outcome_mean(d_prime)) / (d - d_prime),
        }
    }

    pub fn row(&self, estimate: f64) -> FunctionalRow {
        FunctionalRow {
            parameter: self.parameter().into(),
            d: self.d(),
            d_prime: self.d_prime(),
            tau_or_y: self.tau_or_y(),
            estimate,
        }
    }

    // Items sharing a key form one curve for the uniform band.
    fn curve_key(&self) -> (&'static str, Option<u64>, Option<u64>) {
        match self {
            Item::Asf { .. } | Item::Ate { .. } => (self.parameter(), None, None),
            _ => (self.parameter(), Some(self.d().to_bits()), self.d_prime().map(f64::to_bits)),
        }
    }
}

/// Items grouped into curves, in order of first appearance. Each curve is
/// indexed by τ or y, by d for ASF, and by pair position for ATE.
pub fn curves(items: &[Item]) -> Vec<Vec<usize>> {
    let mut keys = vec![];
    let mut groups: Vec<Vec<usize>> = vec![];
    for (i, it) in items.iter().enumerate() {
        let k = it.curve_key();
        match keys.iter().position(|x| *x == k) {
            Some(g) => groups[g].push(i),
            None => {
                keys.push(k);
                groups.push(vec![i]);
            }
        }
    }
    groups
}

/// Index value of item `items[g[j]]` within its curve.
pub fn curve_u(items: &[Item], g: &[usize], j: usize) -> f64 {
    let it = items[g[j]];
    match it {
        Item::Asf { d } => d,
        Item::Ate { .. } => j as f64,
        _ => it.tau_or_y().unwrap_or(j as f64),
    }
}

pub fn evaluate_all(f: &MarginalCdf, items: &[Item], rule: QuantileRule) -> Result<Vec<f64>> {
    items.iter().map(|it| it.evaluate(f, rule)).collect()
}

pub fn evaluate_all_censored(f: &MarginalCdf, items: &[Item], rule: QuantileRule) -> Result<Vec<f64>> {
    items.iter().map(|it| it.evaluate_censored(f, rule)).collect()
}

/// Default treatment values and effect pairs for `kind`.
pub fn default_targets(kind: TreatmentKind, levels: &[f64], d: &[f64]) -> (Vec<f64>, Vec<[f64; 2]>) {
    match kind {
        TreatmentKind::Continuous => {
            let q = [0.25, 0.5, 0.75].map(|p| quantile_type7(d, p));
            (q.to_vec(), vec![[q[2], q[0]]])
        }
        TreatmentKind::Binary => (vec![0.0, 1.0], vec![[1.0, 0.0]]),
        TreatmentKind::Ordered => (levels.to_vec(), levels.windows(2).map(|w| [w[1], w[0]]).collect()),
    }
}

/// Items requested by an `estimate` configuration, given the fitted grid.
pub fn functional_items(cfg: &FunctionalConfig, d_values: &[f64], pairs: &[[f64; 2]], y_grid: &[f64]) -> Vec<Item> {
    let mut items = vec![];
    if cfg.cdf {
        for &d in d_values {
            items.extend(y_grid.iter().map(|&y| Item::Cdf { d, y }));
        }
    }
    if cfg.qsf {
        for &d in d_values {
            items.extend(cfg.tau.iter().map(|&tau| Item::Qsf { d, tau }));
        }
    }
    if cfg.qte {
        for &[d, d_prime] in pairs {
            items.extend(cfg.tau.iter().map(|&tau| Item::Qte { d, d_prime, tau }));
        }
    }
    if cfg.asf {
        items.extend(d_values.iter().map(|&d| Item::Asf { d }));
    }
    if cfg.ate {
        items.extend(pairs.iter().map(|&[d, d_prime]| Item::Ate { d, d_prime }));
    }
    items
}

/// Items for a coverage target. CDF points default to the quartiles of
/// each `Y_d` under the law.
pub fn target_items(t: &TargetConfig, d_values: &[f64], pairs: &[[f64; 2]], law: &Law) -> Vec<Item> {
    let mut items = vec![];
    match t.parameter {
        Parameter::Cdf => {
            for &d in d_values {
                let ys = t.y.clone().unwrap_or_else(|| [0.25, 0.5, 0.75].map(|p| law.outcome_quantile(d, p)).to_vec());
                items.extend(ys.into_iter().map(|y| Item::Cdf { d, y }));
            }
        }
        Parameter::Qsf => {
            for &d in d_values {
                items.extend(t.tau.iter().map(|&tau| Item::Qsf { d, tau }));
            }
        }
        Parameter::Qte => {
            for &[d, d_prime] in pairs {
                items.extend(t.tau.iter().map(|&tau| Item::Qte { d, d_prime, tau }));
            }
        }
        Parameter::Asf => items.extend(d_values.iter().map(|&d| Item::Asf { d })),
        Parameter::Ate => items.extend(pairs.iter().map(|&[d, d_prime]| Item::Ate { d, d_prime })),
    }
    items
}

/// Check that every pair has distinct members.
pub fn check_pairs(pairs: &[[f64; 2]]) -> std::result::Result<(), CliError> {
    if let Some(p) = pairs.iter().find(|p| p[0] == p[1] || !p[0].is_finite() || !p[1].is_finite()) {
        return Err(CliError::Config(format!("effect pair {p:?} needs two distinct finite values")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use copiv_core::dgp::{self, Law};

    #[test]
    fn kind_inference() {
        assert_eq!(infer_kind(&[0.0, 1.0]), TreatmentKind::Binary);
        assert_eq!(infer_kind(&[1.0, 2.0, 3.0]), TreatmentKind::Ordered);
        assert_eq!(infer_kind(&[0.1, 0.7, 1.3]), TreatmentKind::Continuous);
        let many: Vec<f64> = (0..60).map(f64::from).collect();
        assert_eq!(infer_kind(&many), TreatmentKind::Continuous);
    }

    #[test]
    fn curves_group_by_parameter_and_pair() {
        let items = vec![
            Item::Qsf { d: 0.0, tau: 0.25 },
            Item::Qsf { d: 1.0, tau: 0.25 },
            Item::Qsf { d: 0.0, tau: 0.5 },
            Item::Asf { d: 0.0 },
            Item::Asf { d: 1.0 },
            Item::Ate { d: 1.0, d_prime: 0.0 },
        ];
        let g = curves(&items);
        assert_eq!(g, vec![vec![0, 2], vec![1], vec![3, 4], vec![5]]);
        assert_eq!(curve_u(&items, &g[0], 1), 0.5);
        assert_eq!(curve_u(&items, &g[2], 1), 1.0);
    }

    #[test]
    fn truths_of_location_shift() {
        let law = Law::preset("exogenous").unwrap();
        for tau in [0.1, 0.5, 0.9] {
            let q = Item::Qte { d: 1.0, d_prime: 0.0, tau }.truth(&law);
            assert!((q - 0.5).abs() < 1e-12);
        }
        assert!((Item::Cdf { d: 0.0, y: 0.0 }.truth(&law) - 0.5).abs() < 1e-12);
        assert!((Item::Ate { d: 1.0, d_prime: 0.0 }.truth(&law) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn estimator_recovers_binary_law() {
        let law = Law::preset("gaussian").unwrap();
        let data = dgp::simulate(&law, 4000, 3).unwrap();
        let y_grid = EvalGrid::quantile_points(&data.y, 15, 0.05, 0.95);
        let est = Estimator { kind: TreatmentKind::Binary, basis: BasisSpec::default(), y_grid: y_grid.clone(), d_grid: vec![0.0, 1.0] };
        let f = est.marginal(&data, None, None).unwrap();
        for di in 0..2 {
            for (k, &y) in y_grid.iter().enumerate() {
                let truth = law.outcome_cdf(f.d[di], y);
                assert!((f.values[di][k] - truth).abs() < 0.06, "d={} y={y}", f.d[di]);
            }
        }
    }
}
