//! Synthetic data generators whose joint law of `(Y_d, V_z)` is a Gaussian
//! copula with level-dependent correlation `ρ_{Y_d}(y)`, plus the exact
//! population quantities those laws imply.
//!
//! Conventions: a binary treatment is `D = 1{V ≤ π(z)}`; an ordered
//! treatment takes values `1..=K` with `D = d` iff `π_{d−1}(z) < V ≤ π_d(z)`;
//! a continuous treatment is `D = μ_z + δ'x + σ Φ⁻¹(V)`. Covariates are iid
//! standard normal and enter as location shifts of the outcome (`θ'x`) and
//! of the selection index (`δ'x`).

use crate::copulas::{self, Family};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::gauss::{self, Prob};
use crate::quad;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Marginal distribution of a potential outcome before location shifts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Marginal {
    Gaussian { mean: f64, sd: f64 },
    /// Atoms `b − a`, `b`, `b + 1.5a` from the latent `sign(round(U))`,
    /// `U ~ N(0,1)`, with `(a, b)` giving mean 0 and variance 1.
    ThreeAtom,
    /// Step CDF with the given atoms (increasing) and probabilities.
    Discrete { atoms: Vec<f64>, probs: Vec<f64> },
}

/// `(a, b)` of the three-atom marginal.
pub fn three_atom_calibration() -> (f64, f64) {
    let p_lo = gauss::cdf(-0.5);
    let p_hi = gauss::sf(0.5);
    // Mean: b + a(1.5 p_hi − p_lo) = 0; variance: a²(p_lo + 2.25 p_hi − c²) = 1.
    let c = 1.5 * p_hi - p_lo;
    let a = 1.0 / (p_lo + 2.25 * p_hi - c * c).sqrt();
    (a, -c * a)
}

impl Marginal {
    fn atoms(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        match self {
            Marginal::Gaussian { .. } => None,
            Marginal::ThreeAtom => {
                let (a, b) = three_atom_calibration();
                let p_lo = gauss::cdf(-0.5);
                let p_hi = gauss::sf(0.5);
                Some((vec![b - a, b, b + 1.5 * a], vec![p_lo, 1.0 - p_lo - p_hi, p_hi]))
            }
            Marginal::Discrete { atoms, probs } => Some((atoms.clone(), probs.clone())),
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            Marginal::Gaussian { mean, sd } => {
                if !mean.is_finite() || !(*sd > 0.0) || !sd.is_finite() {
                    return Err(Error::Invalid(format!("Gaussian marginal needs finite mean and sd > 0, got ({mean}, {sd})")));
                }
            }
            Marginal::ThreeAtom => {}
            Marginal::Discrete { atoms, probs } => {
                if atoms.is_empty() || atoms.len() != probs.len() {
                    return Err(Error::Invalid("discrete marginal needs matching non-empty atoms and probs".into()));
                }
                if atoms.windows(2).any(|w| w[1] <= w[0]) || probs.iter().any(|p| !(*p > 0.0)) {
                    return Err(Error::Invalid("atoms must increase and probabilities be positive".into()));
                }
                if (probs.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                    return Err(Error::Invalid("discrete probabilities must sum to 1".into()));
                }
            }
        }
        Ok(())
    }

    pub fn cdf(&self, y: f64) -> f64 {
        match self {
            Marginal::Gaussian { mean, sd } => gauss::cdf((y - mean) / sd),
            _ => {
                let (atoms, probs) = self.atoms().unwrap();
                let s: f64 = atoms.iter().zip(&probs).filter(|(a, _)| **a <= y).map(|(_, p)| p).sum();
                s.min(1.0)
            }
        }
    }

    /// Left-continuous generalized inverse `inf{y : F(y) ≥ p}`.
    pub fn quantile(&self, p: f64) -> f64 {
        match self {
            Marginal::Gaussian { mean, sd } => mean + sd * gauss::quantile(Prob::new(p)),
            _ => {
                let (atoms, probs) = self.atoms().unwrap();
                let mut cum = 0.0;
                for (a, q) in atoms.iter().zip(&probs) {
                    cum += q;
                    if cum >= p - 1e-15 {
                        return *a;
                    }
                }
                *atoms.last().unwrap()
            }
        }
    }

    pub fn mean(&self) -> f64 {
        match self {
            Marginal::Gaussian { mean, .. } => *mean,
            _ => {
                let (atoms, probs) = self.atoms().unwrap();
                atoms.iter().zip(&probs).map(|(a, p)| a * p).sum()
            }
        }
    }

    pub fn is_continuous(&self) -> bool {
        matches!(self, Marginal::Gaussian { .. })
    }
}

/// Local dependence `y ↦ ρ_{Y_d}(y)` on the unshifted outcome scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Dependence {
    Constant { rho: f64 },
    /// `ρ(y) = φ(5(y − 1)/3) − φ(5/3)`.
    Bump,
}

impl Dependence {
    pub fn rho(&self, y: f64) -> f64 {
        match self {
            Dependence::Constant { rho } => *rho,
            Dependence::Bump => gauss::phi(5.0 * (y - 1.0) / 3.0) - gauss::phi(5.0 / 3.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelLaw {
    pub marginal: Marginal,
    pub dependence: Dependence,
}

impl LevelLaw {
    /// `Pr[Y_d ≤ y, V ≤ v] = C(F(y), v; ρ(y))` on the unshifted scale.
    pub fn joint_cdf(&self, y: f64, v: f64) -> f64 {
        copulas::c_unchecked(Family::Gaussian, self.marginal.cdf(y), v, self.dependence.rho(y))
    }

    /// `Pr[Y_d ≤ y | V = v] = Φ((Φ⁻¹F(y) − ρ(y) Φ⁻¹(v)) / √(1 − ρ(y)²))`.
    pub fn conditional_cdf(&self, y: f64, v: f64) -> f64 {
        let f = self.marginal.cdf(y);
        if f <= 0.0 {
            return 0.0;
        }
        if f >= 1.0 {
            return 1.0;
        }
        let r = self.dependence.rho(y);
        gauss::cdf((gauss::quantile_f64(f) - r * gauss::quantile(Prob::new(v))) / (1.0 - r * r).sqrt())
    }

    /// The joint CDF reconstructed by integrating the conditional CDF over
    /// `v' ≤ v`; agrees with [`LevelLaw::joint_cdf`] for a CI law.
    pub fn joint_cdf_by_conditional(&self, y: f64, v: f64) -> f64 {
        let f = self.marginal.cdf(y);
        if f <= 0.0 {
            return 0.0;
        }
        if f >= 1.0 {
            return v;
        }
        let q = gauss::quantile_f64(f);
        let r = self.dependence.rho(y);
        let s = (1.0 - r * r).sqrt();
        let upper = gauss::quantile(Prob::new(v));
        quad::integrate_lower(|t| gauss::cdf((q - r * t) / s) * gauss::phi(t), upper, 1e-15)
    }
}

/// Outcome side: one law per treatment level, plus location shifts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutcomeLaw {
    /// Binary: `[Y_0, Y_1]`; ordered: `[Y_1, …, Y_K]`; continuous: one law
    /// for the base outcome `Y_d − dose_slope·d`.
    pub levels: Vec<LevelLaw>,
    #[serde(default)]
    pub dose_slope: f64,
    /// θ: covariate coefficients in the outcome location.
    #[serde(default)]
    pub covariate_effect: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SelectionRule {
    Binary { pi: [f64; 2] },
    /// Interior thresholds `π_1(z) < … < π_{K−1}(z)`.
    Ordered { thresholds: [Vec<f64>; 2] },
    Continuous { mean: [f64; 2], sd: f64 },
}

/// Copula of `(V_0, V_1)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum VCopula {
    /// Gaussian copula; `rho = 1` gives rank invariance.
    Gaussian { rho: f64 },
    /// `V_1 = (V_0 + shift) mod 1`: uniform margins, not exchangeable.
    Shift { shift: f64 },
}

impl VCopula {
    pub fn is_exchangeable(&self) -> bool {
        match self {
            VCopula::Gaussian { .. } => true,
            VCopula::Shift { shift } => {
                let s = shift.rem_euclid(1.0);
                s == 0.0 || s == 0.5
            }
        }
    }

    /// Draw `(t_0, t_1) = (Φ⁻¹V_0, Φ⁻¹V_1)`.
    fn draw<R: Rng>(&self, rng: &mut R) -> (f64, f64) {
        let t0 = normal(rng);
        match self {
            VCopula::Gaussian { rho } => {
                let r = rho.clamp(-1.0, 1.0);
                (t0, r * t0 + (1.0 - r * r).max(0.0).sqrt() * normal(rng))
            }
            VCopula::Shift { shift } => {
                let v0 = gauss::cdf(t0);
                let v1 = (v0 + shift).rem_euclid(1.0);
                (t0, gauss::quantile(Prob::new(v1)))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionLaw {
    pub rule: SelectionRule,
    pub v_copula: VCopula,
    /// Pr[Z = 1].
    pub p_z: f64,
    /// δ: covariate coefficients in the selection index.
    #[serde(default)]
    pub covariate_effect: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TreatmentKind {
    Binary,
    Ordered,
    Continuous,
}

impl SelectionLaw {
    pub fn kind(&self) -> TreatmentKind {
        match self.rule {
            SelectionRule::Binary { .. } => TreatmentKind::Binary,
            SelectionRule::Ordered { .. } => TreatmentKind::Ordered,
            SelectionRule::Continuous { .. } => TreatmentKind::Continuous,
        }
    }

    fn index_shift(&self, x: &[f64]) -> f64 {
        self.covariate_effect.iter().zip(x).map(|(a, b)| a * b).sum()
    }

    /// Thresholds `π_j(z, x)` for discrete rules (a single π for binary).
    pub fn thresholds(&self, z: usize, x: &[f64]) -> Vec<f64> {
        let s = self.index_shift(x);
        let shift = |p: f64| {
            if s == 0.0 {
                p
            } else {
                gauss::cdf(gauss::quantile(Prob::new(p)) + s)
            }
        };
        match &self.rule {
            SelectionRule::Binary { pi } => vec![shift(pi[z])],
            SelectionRule::Ordered { thresholds } => thresholds[z].iter().map(|&p| shift(p)).collect(),
            SelectionRule::Continuous { .. } => vec![],
        }
    }

    /// `F_{D|Z,X}(d | z, x)` for the continuous rule.
    pub fn treatment_cdf(&self, z: usize, d: f64, x: &[f64]) -> f64 {
        match &self.rule {
            SelectionRule::Continuous { mean, sd } => gauss::cdf((d - mean[z] - self.index_shift(x)) / sd),
            _ => f64::NAN,
        }
    }

    /// `Φ⁻¹F_{D|Z,X}(d | z, x)` without a Φ round trip.
    pub fn treatment_index(&self, z: usize, d: f64, x: &[f64]) -> f64 {
        match &self.rule {
            SelectionRule::Continuous { mean, sd } => (d - mean[z] - self.index_shift(x)) / sd,
            _ => f64::NAN,
        }
    }

    /// Treatment value `h(z, V_z)` given `t = Φ⁻¹(V_z)`.
    fn treatment(&self, z: usize, t: f64, x: &[f64]) -> f64 {
        match &self.rule {
            SelectionRule::Binary { pi } => {
                let a = gauss::quantile(Prob::new(pi[z])) + self.index_shift(x);
                if t <= a { 1.0 } else { 0.0 }
            }
            SelectionRule::Ordered { thresholds } => {
                let s = self.index_shift(x);
                let above = thresholds[z]
                    .iter()
                    .filter(|&&p| t > gauss::quantile(Prob::new(p)) + s)
                    .count();
                (above + 1) as f64
            }
            SelectionRule::Continuous { mean, sd } => mean[z] + self.index_shift(x) + sd * t,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.p_z > 0.0 && self.p_z < 1.0) {
            return Err(Error::Invalid(format!("p_z = {} must lie in (0, 1)", self.p_z)));
        }
        match &self.rule {
            SelectionRule::Binary { pi } => {
                if pi.iter().any(|p| !(*p > 0.0 && *p < 1.0)) {
                    return Err(Error::Invalid("propensities must lie in (0, 1)".into()));
                }
            }
            SelectionRule::Ordered { thresholds } => {
                if thresholds[0].len() != thresholds[1].len() || thresholds[0].is_empty() {
                    return Err(Error::Invalid("ordered thresholds need equal non-zero length".into()));
                }
                for t in thresholds {
                    if t.iter().any(|p| !(*p > 0.0 && *p < 1.0)) || t.windows(2).any(|w| w[1] <= w[0]) {
                        return Err(Error::Invalid("thresholds must be increasing in (0, 1)".into()));
                    }
                }
            }
            SelectionRule::Continuous { mean, sd } => {
                if !(*sd > 0.0) || mean.iter().any(|m| !m.is_finite()) {
                    return Err(Error::Invalid("continuous selection needs finite means and sd > 0".into()));
                }
            }
        }
        if let VCopula::Gaussian { rho } = self.v_copula {
            if !(-1.0..=1.0).contains(&rho) {
                return Err(Error::Invalid(format!("V copula correlation {rho} outside [−1, 1]")));
            }
        }
        Ok(())
    }

    /// Number of treatment levels for discrete rules.
    pub fn n_levels(&self) -> usize {
        match &self.rule {
            SelectionRule::Binary { .. } => 2,
            SelectionRule::Ordered { thresholds } => thresholds[0].len() + 1,
            SelectionRule::Continuous { .. } => 1,
        }
    }
}

/// A complete data-generating process.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Law {
    pub outcome: OutcomeLaw,
    pub selection: SelectionLaw,
}

/// Names accepted by [`Law::preset`].
pub const PRESETS: [&str; 6] = ["gaussian", "bump", "three_atom", "ordered", "continuous", "exogenous"];

fn gaussian_level(mean: f64, rho: f64) -> LevelLaw {
    LevelLaw {
        marginal: Marginal::Gaussian { mean, sd: 1.0 },
        dependence: Dependence::Constant { rho },
    }
}

impl Law {
    /// Shipped laws: binary with bivariate Gaussian `(Y_d, V)` at ρ = 0.5
    /// (`gaussian`), the bump dependence curve (`bump`), three-atom
    /// marginals (`three_atom`), a K = 3 ordered law (`ordered`), a
    /// continuous treatment with negative selection (`continuous`) and its
    /// ρ = 0 counterpart (`exogenous`).
    pub fn preset(name: &str) -> Result<Law> {
        let binary = |levels: Vec<LevelLaw>| Law {
            outcome: OutcomeLaw { levels, dose_slope: 0.0, covariate_effect: vec![] },
            selection: SelectionLaw {
                rule: SelectionRule::Binary { pi: [0.3, 0.6] },
                v_copula: VCopula::Gaussian { rho: 1.0 },
                p_z: 0.5,
                covariate_effect: vec![],
            },
        };
        let continuous = |rho: f64| Law {
            outcome: OutcomeLaw {
                levels: vec![gaussian_level(0.0, rho)],
                dose_slope: 0.5,
                covariate_effect: vec![],
            },
            selection: SelectionLaw {
                rule: SelectionRule::Continuous { mean: [0.0, 1.0], sd: 1.0 },
                v_copula: VCopula::Gaussian { rho: 1.0 },
                p_z: 0.5,
                covariate_effect: vec![],
            },
        };
        let law = match name {
            "gaussian" => binary(vec![gaussian_level(0.0, 0.5), gaussian_level(0.5, 0.5)]),
            "bump" => binary(
                [0.0, 0.5]
                    .map(|m| LevelLaw {
                        marginal: Marginal::Gaussian { mean: m, sd: 1.0 },
                        dependence: Dependence::Bump,
                    })
                    .to_vec(),
            ),
            "three_atom" => binary(vec![
                LevelLaw { marginal: Marginal::ThreeAtom, dependence: Dependence::Constant { rho: 0.5 } };
                2
            ]),
            "ordered" => Law {
                outcome: OutcomeLaw {
                    levels: vec![gaussian_level(0.0, -0.3), gaussian_level(0.5, 0.2), gaussian_level(1.0, 0.4)],
                    dose_slope: 0.0,
                    covariate_effect: vec![],
                },
                selection: SelectionLaw {
                    rule: SelectionRule::Ordered { thresholds: [vec![0.35, 0.8], vec![0.2, 0.6]] },
                    v_copula: VCopula::Gaussian { rho: 1.0 },
                    p_z: 0.5,
                    covariate_effect: vec![],
                },
            },
            "continuous" => continuous(-0.4),
            "exogenous" => continuous(0.0),
            other => {
                return Err(Error::Invalid(format!("unknown preset '{other}'; expected one of {PRESETS:?}")))
            }
        };
        Ok(law)
    }

    pub fn kind(&self) -> TreatmentKind {
        self.selection.kind()
    }

    pub fn validate(&self) -> Result<()> {
        self.selection.validate()?;
        let want = self.selection.n_levels();
        if self.outcome.levels.len() != want {
            return Err(Error::Invalid(format!(
                "outcome law has {} levels, selection implies {want}",
                self.outcome.levels.len()
            )));
        }
        for l in &self.outcome.levels {
            l.marginal.validate()?;
            if let Dependence::Constant { rho } = l.dependence {
                if !(rho > -1.0 && rho < 1.0) {
                    return Err(Error::Invalid(format!("ρ = {rho} outside (−1, 1)")));
                }
            }
        }
        if self.outcome.covariate_effect.len() != self.selection.covariate_effect.len()
            && !self.outcome.covariate_effect.is_empty()
            && !self.selection.covariate_effect.is_empty()
        {
            return Err(Error::Invalid("covariate effect vectors have different lengths".into()));
        }
        Ok(())
    }

    pub fn n_covariates(&self) -> usize {
        self.outcome.covariate_effect.len().max(self.selection.covariate_effect.len())
    }

    /// Treatment values of a discrete law, in level order.
    pub fn levels(&self) -> Vec<f64> {
        match self.kind() {
            TreatmentKind::Binary => vec![0.0, 1.0],
            TreatmentKind::Ordered => (1..=self.selection.n_levels()).map(|d| d as f64).collect(),
            TreatmentKind::Continuous => vec![],
        }
    }

    fn level_index(&self, d: f64) -> usize {
        match self.kind() {
            TreatmentKind::Binary => (d == 1.0) as usize,
            TreatmentKind::Ordered => (d as usize).saturating_sub(1),
            TreatmentKind::Continuous => 0,
        }
    }

    pub fn level_law(&self, d: f64) -> &LevelLaw {
        &self.outcome.levels[self.level_index(d)]
    }

    fn dose(&self, d: f64) -> f64 {
        match self.kind() {
            TreatmentKind::Continuous => self.outcome.dose_slope * d,
            _ => 0.0,
        }
    }

    fn outcome_shift(&self, d: f64, x: &[f64]) -> f64 {
        self.dose(d) + self.outcome.covariate_effect.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
    }

    /// `F_{Y_d|X}(y | x)`.
    pub fn conditional_outcome_cdf(&self, d: f64, y: f64, x: &[f64]) -> f64 {
        self.level_law(d).marginal.cdf(y - self.outcome_shift(d, x))
    }

    /// `ρ_{Y_d;X}(y; x)`.
    pub fn local_dependence(&self, d: f64, y: f64, x: &[f64]) -> f64 {
        self.level_law(d).dependence.rho(y - self.outcome_shift(d, x))
    }

    fn theta_norm(&self) -> f64 {
        self.outcome.covariate_effect.iter().map(|a| a * a).sum::<f64>().sqrt()
    }

    /// Unconditional `F_{Y_d}(y)`, integrating the covariate shift
    /// `θ'X ~ N(0, |θ|²)` in closed form.
    pub fn outcome_cdf(&self, d: f64, y: f64) -> f64 {
        let m = &self.level_law(d).marginal;
        let y = y - self.dose(d);
        let s = self.theta_norm();
        if s == 0.0 {
            return m.cdf(y);
        }
        match m {
            Marginal::Gaussian { mean, sd } => gauss::cdf((y - mean) / sd.hypot(s)),
            _ => {
                let (atoms, probs) = m.atoms().unwrap();
                atoms.iter().zip(&probs).map(|(a, p)| p * gauss::cdf((y - a) / s)).sum()
            }
        }
    }

    /// Quantile `inf{y : F_{Y_d}(y) ≥ τ}` of the unconditional law.
    pub fn outcome_quantile(&self, d: f64, tau: f64) -> f64 {
        let m = &self.level_law(d).marginal;
        let s = self.theta_norm();
        match m {
            Marginal::Gaussian { mean, sd } => {
                self.dose(d) + mean + sd.hypot(s) * gauss::quantile(Prob::new(tau))
            }
            _ if s == 0.0 => self.dose(d) + m.quantile(tau),
            _ => {
                let (atoms, _) = m.atoms().unwrap();
                let lo = atoms[0] - 40.0 * s + self.dose(d);
                let hi = atoms[atoms.len() - 1] + 40.0 * s + self.dose(d);
                quad::bisect(|y| self.outcome_cdf(d, y) - tau, lo, hi, 200)
            }
        }
    }

    /// `E[Y_d]`.
    pub fn outcome_mean(&self, d: f64) -> f64 {
        self.dose(d) + self.level_law(d).marginal.mean()
    }

    /// Exact observable tables at covariate value `x`.
    pub fn observable_cdfs(&self, y_grid: &[f64], d_grid: &[f64], x: &[f64]) -> ObservableTables {
        match self.kind() {
            TreatmentKind::Continuous => {
                let mut fy = [vec![], vec![]];
                let mut fd = [vec![], vec![]];
                for z in 0..2 {
                    for &d in d_grid {
                        let r = self.selection.treatment_index(z, d, x);
                        fd[z].push(gauss::cdf(r));
                        let row = y_grid
                            .iter()
                            .map(|&y| {
                                let law = self.level_law(d);
                                let u = y - self.outcome_shift(d, x);
                                let f = law.marginal.cdf(u);
                                let rho = law.dependence.rho(u);
                                if f <= 0.0 {
                                    0.0
                                } else if f >= 1.0 {
                                    1.0
                                } else {
                                    gauss::cdf((gauss::quantile_f64(f) - rho * r) / (1.0 - rho * rho).sqrt())
                                }
                            })
                            .collect();
                        fy[z].push(row);
                    }
                }
                ObservableTables::Continuous { y: y_grid.to_vec(), d: d_grid.to_vec(), fy_dz: fy, fd_z: fd }
            }
            kind => {
                let th = [self.selection.thresholds(0, x), self.selection.thresholds(1, x)];
                let levels = self.levels();
                let joint = levels
                    .iter()
                    .map(|&d| {
                        [0, 1].map(|z| {
                            let (lo, hi) = cell_bounds(kind, d, &th[z]);
                            y_grid
                                .iter()
                                .map(|&y| {
                                    let f = self.conditional_outcome_cdf(d, y, x);
                                    let rho = self.local_dependence(d, y, x);
                                    let c = |v: f64| copulas::c_unchecked(Family::Gaussian, f, v, rho);
                                    c(hi) - c(lo)
                                })
                                .collect()
                        })
                    })
                    .collect();
                ObservableTables::Discrete { y: y_grid.to_vec(), levels, thresholds: th, joint }
            }
        }
    }
}

/// Selection-variable cell `(lo, hi]` of treatment value `d`.
pub fn cell_bounds(kind: TreatmentKind, d: f64, thresholds: &[f64]) -> (f64, f64) {
    match kind {
        TreatmentKind::Binary => {
            if d == 1.0 { (0.0, thresholds[0]) } else { (thresholds[0], 1.0) }
        }
        _ => {
            let j = d as usize;
            let lo = if j <= 1 { 0.0 } else { thresholds[j - 2] };
            let hi = if j > thresholds.len() { 1.0 } else { thresholds[j - 1] };
            (lo, hi)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum ObservableTables {
    Discrete {
        y: Vec<f64>,
        levels: Vec<f64>,
        /// `π_j(z)` for z = 0, 1.
        thresholds: [Vec<f64>; 2],
        /// `Pr[Y ≤ y, D = d | Z = z]` indexed `[level][z][y]`.
        joint: Vec<[Vec<f64>; 2]>,
    },
    Continuous {
        y: Vec<f64>,
        d: Vec<f64>,
        /// `F_{Y|D,Z}(y | d, z)` indexed `[z][d][y]`.
        fy_dz: [Vec<Vec<f64>>; 2],
        /// `F_{D|Z}(d | z)` indexed `[z][d]`.
        fd_z: [Vec<f64>; 2],
    },
}

fn unit_open<R: Rng>(rng: &mut R) -> f64 {
    ((rng.random::<u64>() >> 11) as f64 + 0.5) / (1u64 << 53) as f64
}

fn normal<R: Rng>(rng: &mut R) -> f64 {
    let u = unit_open(rng);
    gauss::quantile(Prob::new(u))
}

/// RNG for observation (or replicate) `index` under `seed`.
pub fn stream_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

const GRID_POINTS: usize = 4096;

/// Per-level conditional-quantile machinery.
enum Inverter {
    Constant { rho: f64, marginal: Marginal },
    /// Grid of `(y, Φ⁻¹F(y), ρ(y))` for a continuous marginal.
    Grid(Vec<(f64, f64, f64)>),
    Atoms { atoms: Vec<f64>, cum: Vec<f64>, dep: Dependence },
}

impl Inverter {
    fn new(level: &LevelLaw) -> Inverter {
        match (&level.dependence, &level.marginal) {
            (Dependence::Constant { rho }, m) => Inverter::Constant { rho: *rho, marginal: m.clone() },
            (dep, Marginal::Gaussian { mean, sd }) => {
                let (lo, hi) = (mean - 8.5 * sd, mean + 8.5 * sd);
                let grid = (0..GRID_POINTS)
                    .map(|k| {
                        let y = lo + (hi - lo) * k as f64 / (GRID_POINTS - 1) as f64;
                        (y, (y - mean) / sd, dep.rho(y))
                    })
                    .collect();
                Inverter::Grid(grid)
            }
            (dep, m) => {
                let (atoms, probs) = m.atoms().unwrap();
                let mut acc = 0.0;
                let cum = probs.iter().map(|p| {
                    acc += p;
                    acc
                });
                let cum: Vec<f64> = cum.collect();
                Inverter::Atoms { atoms, cum, dep: dep.clone() }
            }
        }
    }

    /// Outcome with `Pr[Y ≤ y | V] = Φ(e)` at `t = Φ⁻¹(V)`.
    fn draw(&self, t: f64, e: f64) -> f64 {
        match self {
            Inverter::Constant { rho, marginal } => {
                let w = rho * t + (1.0 - rho * rho).sqrt() * e;
                match marginal {
                    Marginal::Gaussian { mean, sd } => mean + sd * w,
                    m => m.quantile(gauss::cdf(w)),
                }
            }
            Inverter::Grid(g) => {
                let index = |k: usize| {
                    let (_, q, r) = g[k];
                    (q - r * t) / (1.0 - r * r).sqrt()
                };
                let n = g.len();
                let k = if e <= index(0) {
                    0
                } else if e >= index(n - 1) {
                    n - 2
                } else {
                    let (mut lo, mut hi) = (0, n - 1);
                    while hi - lo > 1 {
                        let mid = (lo + hi) / 2;
                        if index(mid) <= e { lo = mid } else { hi = mid }
                    }
                    lo
                };
                let (i0, i1) = (index(k), index(k + 1));
                let (y0, y1) = (g[k].0, g[k + 1].0);
                y0 + (e - i0) * (y1 - y0) / (i1 - i0)
            }
            Inverter::Atoms { atoms, cum, dep } => {
                for (a, &c) in atoms.iter().zip(cum) {
                    if c >= 1.0 - 1e-15 {
                        return *a;
                    }
                    let r = dep.rho(*a);
                    if (gauss::quantile_f64(c) - r * t) / (1.0 - r * r).sqrt() >= e {
                        return *a;
                    }
                }
                *atoms.last().unwrap()
            }
        }
    }
}

/// Draw `n` observations. Output is identical for any thread count.
pub fn simulate(law: &Law, n: usize, seed: u64) -> Result<Dataset> {
    law.validate()?;
    if n == 0 {
        return Err(Error::Invalid("n must be at least 1".into()));
    }
    let inverters: Vec<Inverter> = law.outcome.levels.iter().map(Inverter::new).collect();
    let k = law.n_covariates();
    let rows: Vec<(f64, f64, f64, Vec<f64>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(seed, i as u64);
            let z = (unit_open(&mut rng) < law.selection.p_z) as usize;
            let x: Vec<f64> = (0..k).map(|_| normal(&mut rng)).collect();
            let (t0, t1) = law.selection.v_copula.draw(&mut rng);
            let t = if z == 1 { t1 } else { t0 };
            let d = law.selection.treatment(z, t, &x);
            let e = normal(&mut rng);
            let y = law.outcome_shift(d, &x) + inverters[law.level_index(d)].draw(t, e);
            (y, d, z as f64, x)
        })
        .collect();
    let mut y = Vec::with_capacity(n);
    let mut d = Vec::with_capacity(n);
    let mut z = Vec::with_capacity(n);
    let mut x = vec![Vec::with_capacity(n); k];
    for (yi, di, zi, xi) in rows {
        y.push(yi);
        d.push(di);
        z.push(zi);
        for (col, v) in x.iter_mut().zip(xi) {
            col.push(v);
        }
    }
    Dataset::new(y, d, z, x)
}

/// `E[U | V ≤ π]` for `U = Y_d − E[Y_d]`, computed as `∫ (F(y) − G(y)) dy`
/// with `G(y) = C(F(y), π; ρ(y)) / π`.
pub fn control_function(level: &LevelLaw, pi: f64) -> Result<f64> {
    if !(pi > 0.0 && pi < 1.0) {
        return Err(Error::Invalid(format!("π = {pi} must lie in (0, 1)")));
    }
    let gap = |y: f64| {
        let f = level.marginal.cdf(y);
        f - level.joint_cdf(y, pi) / pi
    };
    match &level.marginal {
        Marginal::Gaussian { mean, .. } => {
            Ok(quad::integrate_lower(gap, *mean, 1e-14) + quad::integrate_upper(gap, *mean, 1e-14))
        }
        m => {
            let (atoms, _) = m.atoms().unwrap();
            Ok(atoms.windows(2).map(|w| gap(w[0]) * (w[1] - w[0])).sum())
        }
    }
}

/// Closed form for a bivariate Gaussian `(Y_d, Φ⁻¹V)` with unit variance.
pub fn control_function_gaussian(rho: f64, pi: f64) -> f64 {
    -rho * gauss::phi(gauss::quantile(Prob::new(pi))) / pi
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComplianceShares {
    pub complier: f64,
    pub defier: f64,
    pub complier_se: f64,
    pub defier_se: f64,
    /// Standard error of the difference `complier − defier`.
    pub difference_se: f64,
    pub exchangeable: bool,
    pub warnings: Vec<String>,
}

/// Monte Carlo shares of `{D_1 > D_0}` and `{D_1 < D_0}` at `x = 0`.
pub fn compliance_shares(selection: &SelectionLaw, n: usize, seed: u64) -> Result<ComplianceShares> {
    selection.validate()?;
    if selection.kind() == TreatmentKind::Continuous {
        return Err(Error::Invalid("compliance shares need a discrete treatment".into()));
    }
    if n < 2 {
        return Err(Error::Invalid("need at least two draws".into()));
    }
    let x = vec![0.0; selection.covariate_effect.len()];
    let (c, b) = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(seed, i as u64);
            let (t0, t1) = selection.v_copula.draw(&mut rng);
            let d0 = selection.treatment(0, t0, &x);
            let d1 = selection.treatment(1, t1, &x);
            ((d1 > d0) as u64, (d1 < d0) as u64)
        })
        .reduce(|| (0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    let nf = n as f64;
    let (pc, pb) = (c as f64 / nf, b as f64 / nf);
    let se = |p: f64| (p * (1.0 - p) / nf).sqrt();
    let diff_var = (pc + pb - (pc - pb).powi(2)) / nf;
    let exchangeable = selection.v_copula.is_exchangeable();
    let mut warnings = vec![];
    if !exchangeable {
        warnings.push("(V0, V1) copula is not exchangeable; the compliance-share ordering need not hold".into());
    }
    Ok(ComplianceShares {
        complier: pc,
        defier: pb,
        complier_se: se(pc),
        defier_se: se(pb),
        difference_se: diff_var.sqrt(),
        exchangeable,
        warnings,
    })
}
