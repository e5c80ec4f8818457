//! Bootstrap draws, robust standard errors, pointwise and uniform bands, and
//! a Monte Carlo coverage harness.

use crate::data::{sorted_quantile, Dataset};
use crate::dgp::{self, stream_rng, Law};
use crate::error::{Error, Result};
use rand::{Rng, RngCore};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// `Φ⁻¹(0.75) − Φ⁻¹(0.25)`.
pub const NORMAL_IQR: f64 = 2.0 * 0.674_489_750_196_081_7;
/// Share of failed replicates above which a bootstrap is abandoned.
pub const MAX_FAILED_SHARE: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Scheme {
    /// Resample rows with replacement.
    Empirical,
    /// Reweight every observation by an independent unit exponential.
    Multiplier,
}

/// An estimator followed by a functional: data and optional observation
/// weights in, a vector of functional values out.
pub trait Pipeline: Sync {
    fn run(&self, data: &Dataset, weights: Option<&[f64]>) -> Result<Vec<f64>>;
}

impl<F> Pipeline for F
where
    F: Fn(&Dataset, Option<&[f64]>) -> Result<Vec<f64>> + Sync,
{
    fn run(&self, data: &Dataset, weights: Option<&[f64]>) -> Result<Vec<f64>> {
        self(data, weights)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Draws {
    /// Successful replicates, each of length |U|, in replicate order.
    pub draws: Vec<Vec<f64>>,
    pub failed: usize,
    pub b: usize,
    pub scheme: Scheme,
    pub seed: u64,
}

/// Multiplier weights for replicate `index`: unit exponentials.
pub fn multiplier_weights(n: usize, seed: u64, index: u64) -> Vec<f64> {
    let mut rng = stream_rng(seed, index);
    (0..n).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect()
}

/// Row indices for empirical replicate `index`.
pub fn resample_rows(n: usize, seed: u64, index: u64) -> Vec<usize> {
    let mut rng = stream_rng(seed, index);
    (0..n).map(|_| rng.random_range(0..n)).collect()
}

/// `b` bootstrap replicates of `pipeline`. Replicate `r` draws from its own
/// counter-based stream, so results do not depend on the thread count.
pub fn bootstrap<P: Pipeline + ?Sized>(
    data: &Dataset,
    pipeline: &P,
    b: usize,
    scheme: Scheme,
    seed: u64,
) -> Result<Draws> {
    if b < 100 {
        return Err(Error::Invalid(format!("bootstrap needs at least 100 replicates; got {b}")));
    }
    let n = data.n();
    let out: Vec<Option<Vec<f64>>> = (0..b as u64)
        .into_par_iter()
        .map(|r| {
            let res = match scheme {
                Scheme::Empirical => pipeline.run(&data.select(&resample_rows(n, seed, r)), None),
                Scheme::Multiplier => pipeline.run(data, Some(&multiplier_weights(n, seed, r))),
            };
            res.ok().filter(|v| v.iter().all(|x| x.is_finite()))
        })
        .collect();
    let width = out.iter().flatten().map(|v| v.len()).next().unwrap_or(0);
    let draws: Vec<Vec<f64>> = out.into_iter().flatten().filter(|v| v.len() == width).collect();
    let failed = b - draws.len();
    if failed as f64 > MAX_FAILED_SHARE * b as f64 {
        return Err(Error::Bootstrap { failed, total: b });
    }
    Ok(Draws { draws, failed, b, scheme, seed })
}

/// Interquartile range over that of the standard normal. Returns `(0, true)`
/// with fewer than two distinct draws.
pub fn robust_se(draws: &[f64]) -> (f64, bool) {
    let mut s: Vec<f64> = draws.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    if s.len() < 2 || s[0] == s[s.len() - 1] {
        return (0.0, true);
    }
    ((sorted_quantile(&s, 0.75) - sorted_quantile(&s, 0.25)) / NORMAL_IQR, false)
}

/// The `k`-th smallest value with `k = ⌈(B+1)(1−α)⌉`, clamped to `1..=B`.
pub fn critical_value(stats: &[f64], alpha: f64) -> f64 {
    let mut s = stats.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    let b = s.len();
    let k = (((b + 1) as f64) * (1.0 - alpha)).ceil() as usize;
    s[k.clamp(1, b) - 1]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandMeta {
    pub seed: u64,
    pub b: usize,
    pub scheme: Scheme,
    pub failed: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandResult {
    /// Index set labels.
    pub u: Vec<f64>,
    pub estimate: Vec<f64>,
    pub se: Vec<f64>,
    pub cv_pointwise: Vec<f64>,
    pub cv_uniform: f64,
    pub lo_pt: Vec<f64>,
    pub hi_pt: Vec<f64>,
    pub lo_unif: Vec<f64>,
    pub hi_unif: Vec<f64>,
    /// Points with zero SE, excluded from the uniform statistic.
    pub zero_se: Vec<usize>,
    pub alpha: f64,
    pub meta: Option<BandMeta>,
    pub draws: Option<Vec<Vec<f64>>>,
}

impl BandResult {
    /// Attach labels for the index set.
    pub fn with_u(mut self, u: Vec<f64>) -> BandResult {
        self.u = u;
        self
    }

    /// True when the uniform band contains the pointwise band everywhere.
    pub fn nested(&self) -> bool {
        (0..self.estimate.len()).all(|i| self.lo_unif[i] <= self.lo_pt[i] && self.hi_pt[i] <= self.hi_unif[i])
    }

    pub fn covers_pointwise(&self, i: usize, truth: f64) -> bool {
        self.lo_pt[i] <= truth && truth <= self.hi_pt[i]
    }

    pub fn covers_uniform(&self, truth: &[f64]) -> bool {
        truth.iter().enumerate().all(|(i, &t)| self.lo_unif[i] <= t && t <= self.hi_unif[i])
    }
}

/// Pointwise and uniform `1 − α` bands from bootstrap draws.
pub fn bands(estimates: &[f64], draws: &[Vec<f64>], alpha: f64) -> Result<BandResult> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Invalid(format!("α = {alpha} outside (0, 1)")));
    }
    let m = estimates.len();
    if draws.is_empty() || draws.iter().any(|d| d.len() != m) {
        return Err(Error::Invalid("draws do not match the estimate vector".into()));
    }
    let se: Vec<f64> = (0..m)
        .map(|u| robust_se(&draws.iter().map(|d| d[u]).collect::<Vec<_>>()).0)
        .collect();
    let active: Vec<usize> = (0..m).filter(|&u| se[u] > 0.0).collect();
    if active.is_empty() {
        return Err(Error::Invalid("every standard error is zero".into()));
    }
    let t = |d: &Vec<f64>, u: usize| (d[u] - estimates[u]).abs() / se[u];
    let max_stats: Vec<f64> = draws.iter().map(|d| active.iter().map(|&u| t(d, u)).fold(0.0, f64::max)).collect();
    let cv_uniform = critical_value(&max_stats, alpha);
    let cv_pointwise: Vec<f64> = (0..m)
        .map(|u| if se[u] > 0.0 { critical_value(&draws.iter().map(|d| t(d, u)).collect::<Vec<_>>(), alpha) } else { 0.0 })
        .collect();
    let band = |cv: &dyn Fn(usize) -> f64, sign: f64| -> Vec<f64> { (0..m).map(|u| estimates[u] + sign * cv(u) * se[u]).collect() };
    Ok(BandResult {
        u: (0..m).map(|u| u as f64).collect(),
        estimate: estimates.to_vec(),
        lo_pt: band(&|u| cv_pointwise[u], -1.0),
        hi_pt: band(&|u| cv_pointwise[u], 1.0),
        lo_unif: band(&|_| cv_uniform, -1.0),
        hi_unif: band(&|_| cv_uniform, 1.0),
        zero_se: (0..m).filter(|&u| se[u] == 0.0).collect(),
        se,
        cv_pointwise,
        cv_uniform,
        alpha,
        meta: None,
        draws: None,
    })
}

/// Point estimate, bootstrap and bands in one call.
pub fn estimate_with_bands<P: Pipeline + ?Sized>(
    data: &Dataset,
    pipeline: &P,
    b: usize,
    scheme: Scheme,
    seed: u64,
    alpha: f64,
    keep_draws: bool,
) -> Result<BandResult> {
    let est = pipeline.run(data, None)?;
    let d = bootstrap(data, pipeline, b, scheme, seed)?;
    let mut band = bands(&est, &d.draws, alpha)?;
    band.meta = Some(BandMeta { seed, b, scheme, failed: d.failed });
    if keep_draws {
        band.draws = Some(d.draws);
    }
    Ok(band)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverageConfig {
    pub n: usize,
    pub reps: usize,
    pub b: usize,
    pub alpha: f64,
    pub scheme: Scheme,
    pub seed: u64,
    /// Upper bound on `reps · (B + 1) · n`.
    pub budget: f64,
}

impl CoverageConfig {
    pub fn cost(&self) -> f64 {
        self.reps as f64 * (self.b as f64 + 1.0) * self.n as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub config: CoverageConfig,
    /// Replications that produced bands.
    pub completed: usize,
    pub failed: usize,
    /// Pointwise coverage frequency at each index point.
    pub pointwise: Vec<f64>,
    pub mean_pointwise: f64,
    pub min_pointwise: f64,
    /// Frequency with which the uniform band covered the whole curve.
    pub uniform: f64,
    /// Binomial Monte Carlo standard errors of the two headline rates.
    pub mc_se_pointwise: f64,
    pub mc_se_uniform: f64,
    pub nesting_failures: usize,
}

/// Simulate `reps` datasets from `law`, bootstrap `pipeline` on each and
/// count how often the bands contain `truth`.
pub fn coverage_study<P: Pipeline + ?Sized>(law: &Law, cfg: &CoverageConfig, pipeline: &P, truth: &[f64]) -> Result<CoverageReport> {
    let cost = cfg.cost();
    if cost > cfg.budget {
        return Err(Error::Budget { estimate: cost, limit: cfg.budget });
    }
    if cfg.reps == 0 {
        return Err(Error::Invalid("coverage study needs at least one replication".into()));
    }
    let results: Vec<Option<(Vec<bool>, bool, bool)>> = (0..cfg.reps as u64)
        .into_par_iter()
        .map(|r| {
            let mut rng = stream_rng(cfg.seed, r);
            let (data_seed, boot_seed) = (rng.next_u64(), rng.next_u64());
            let data = dgp::simulate(law, cfg.n, data_seed).ok()?;
            let band = estimate_with_bands(&data, pipeline, cfg.b, cfg.scheme, boot_seed, cfg.alpha, false).ok()?;
            if band.estimate.len() != truth.len() {
                return None;
            }
            let pt = (0..truth.len()).map(|i| band.covers_pointwise(i, truth[i])).collect();
            Some((pt, band.covers_uniform(truth), band.nested()))
        })
        .collect();
    let ok: Vec<&(Vec<bool>, bool, bool)> = results.iter().flatten().collect();
    let completed = ok.len();
    if completed == 0 {
        return Err(Error::NonConvergence("no coverage replication completed".into()));
    }
    let c = completed as f64;
    let pointwise: Vec<f64> = (0..truth.len()).map(|i| ok.iter().filter(|r| r.0[i]).count() as f64 / c).collect();
    let mean_pointwise = pointwise.iter().sum::<f64>() / pointwise.len().max(1) as f64;
    let min_pointwise = pointwise.iter().cloned().fold(1.0, f64::min);
    let uniform = ok.iter().filter(|r| r.1).count() as f64 / c;
    let se = |p: f64| (p * (1.0 - p) / c).sqrt();
    Ok(CoverageReport {
        config: cfg.clone(),
        completed,
        failed: cfg.reps - completed,
        mc_se_pointwise: se(mean_pointwise),
        mc_se_uniform: se(uniform),
        pointwise,
        mean_pointwise,
        min_pointwise,
        uniform,
        nesting_failures: ok.iter().filter(|r| !r.2).count(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gauss::{self, Prob};

    fn sample(n: usize, seed: u64) -> Dataset {
        let mut rng = stream_rng(seed, 0);
        let y: Vec<f64> = (0..n).map(|_| gauss::quantile(Prob::new(rng.random::<f64>()))).collect();
        Dataset::new(y, vec![0.0; n], (0..n).map(|i| (i % 2) as f64).collect(), vec![]).unwrap()
    }

    fn mean(data: &Dataset, w: Option<&[f64]>) -> Result<Vec<f64>> {
        let (mut s, mut t) = (0.0, 0.0);
        for i in 0..data.n() {
            let wi = w.map_or(1.0, |w| w[i]);
            s += wi * data.y[i];
            t += wi;
        }
        Ok(vec![s / t])
    }

    #[test]
    fn bootstrap_sd_of_mean() {
        let data = sample(400, 1);
        let m = data.y.iter().sum::<f64>() / 400.0;
        let sd = (data.y.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 399.0).sqrt() / 20.0;
        for scheme in [Scheme::Empirical, Scheme::Multiplier] {
            let d = bootstrap(&data, &mean, 200, scheme, 7).unwrap();
            let col: Vec<f64> = d.draws.iter().map(|v| v[0]).collect();
            let mu = col.iter().sum::<f64>() / 200.0;
            let bsd = (col.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / 199.0).sqrt();
            assert!((bsd / sd - 1.0).abs() < 0.25, "{scheme:?}: {bsd} vs {sd}");
        }
    }

    #[test]
    fn constant_data_gives_zero_se() {
        let mut data = sample(50, 2);
        data.y = vec![3.0; 50];
        let d = bootstrap(&data, &mean, 100, Scheme::Empirical, 1).unwrap();
        assert!(d.draws.iter().all(|v| v[0] == 3.0));
        assert_eq!(robust_se(&d.draws.iter().map(|v| v[0]).collect::<Vec<_>>()), (0.0, true));
        assert!(bands(&[3.0], &d.draws, 0.1).is_err());
    }

    #[test]
    fn draws_do_not_depend_on_thread_count() {
        let data = sample(200, 3);
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        for scheme in [Scheme::Empirical, Scheme::Multiplier] {
            let a = one.install(|| bootstrap(&data, &mean, 150, scheme, 9).unwrap());
            let b = four.install(|| bootstrap(&data, &mean, 150, scheme, 9).unwrap());
            assert_eq!(a, b);
        }
    }

    #[test]
    fn failures_are_counted_and_capped() {
        let data = sample(100, 4);
        let flaky = |d: &Dataset, w: Option<&[f64]>| -> Result<Vec<f64>> {
            let v = mean(d, w)?;
            if v[0] > 0.15 { Err(Error::NonConvergence("x".into())) } else { Ok(v) }
        };
        match bootstrap(&data, &flaky, 200, Scheme::Empirical, 5) {
            Ok(d) => assert!(d.failed <= 10),
            Err(Error::Bootstrap { failed, total }) => assert!(failed > 10 && total == 200),
            Err(e) => panic!("{e}"),
        }
        let always = |_: &Dataset, _: Option<&[f64]>| -> Result<Vec<f64>> { Err(Error::NonConvergence("x".into())) };
        assert!(matches!(bootstrap(&data, &always, 100, Scheme::Multiplier, 5), Err(Error::Bootstrap { .. })));
    }

    #[test]
    fn robust_se_of_normal_quantiles() {
        let b = 5000;
        let draws: Vec<f64> = (1..=b).map(|i| gauss::quantile_f64((i as f64 - 0.5) / b as f64)).collect();
        let (se, flag) = robust_se(&draws);
        assert!(!flag && (se - 1.0).abs() < 0.02);
        let scaled: Vec<f64> = draws.iter().map(|v| -3.0 * v).collect();
        assert!((robust_se(&scaled).0 - 3.0 * se).abs() < 1e-12);
    }

    #[test]
    fn band_properties() {
        let mut rng = stream_rng(11, 0);
        let b = 20_000;
        let draws: Vec<Vec<f64>> =
            (0..b).map(|_| (0..10).map(|_| gauss::quantile(Prob::new(rng.random::<f64>()))).collect()).collect();
        let est = vec![0.0; 10];
        let r = bands(&est, &draws, 0.1).unwrap();
        assert!(r.nested());
        assert!(r.cv_uniform > 1.645 && r.cv_uniform < 2.576, "{}", r.cv_uniform);
        let r5 = bands(&est, &draws, 0.5).unwrap();
        assert!(r.cv_uniform >= r5.cv_uniform);
        // One index point: uniform and pointwise coincide.
        let single: Vec<Vec<f64>> = draws.iter().map(|d| vec![d[0]]).collect();
        let s = bands(&[0.0], &single, 0.1).unwrap();
        assert_eq!(s.cv_uniform, s.cv_pointwise[0]);
        assert_eq!(s.lo_pt, s.lo_unif);
    }

    #[test]
    fn zero_se_points_are_excluded() {
        let draws: Vec<Vec<f64>> = (0..200).map(|i| vec![1.0, (i as f64 - 100.0) / 50.0]).collect();
        let r = bands(&[1.0, 0.0], &draws, 0.1).unwrap();
        assert_eq!(r.zero_se, vec![0]);
        assert_eq!((r.lo_unif[0], r.hi_unif[0]), (1.0, 1.0));
        assert!(r.nested());
    }

    #[test]
    fn coverage_refuses_over_budget() {
        let law = Law::preset("continuous").unwrap();
        let cfg = CoverageConfig { n: 1000, reps: 10, b: 100, alpha: 0.1, scheme: Scheme::Empirical, seed: 1, budget: 1e5 };
        assert!(matches!(coverage_study(&law, &cfg, &mean, &[0.0]), Err(Error::Budget { .. })));
    }

    #[test]
    fn coverage_of_a_mean() {
        // E[Y] of the exogenous law: Y = U + 0.5·D with E[D] = 0.5.
        let law = Law::preset("exogenous").unwrap();
        let cfg = CoverageConfig { n: 200, reps: 60, b: 100, alpha: 0.1, scheme: Scheme::Empirical, seed: 3, budget: 1e7 };
        let rep = coverage_study(&law, &cfg, &mean, &[0.25]).unwrap();
        assert_eq!(rep.completed, 60);
        assert!(rep.mean_pointwise > 0.75, "{rep:?}");
        assert_eq!(rep.nesting_failures, 0);
    }
}
