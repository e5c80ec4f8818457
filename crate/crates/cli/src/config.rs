//! JSON configuration documents for each subcommand. Every field has a
//! default; the resolved document is echoed into the run manifest.

use crate::CliError;
use copiv_core::dgp::{Law, TreatmentKind};
use copiv_core::functionals::QuantileRule;
use copiv_core::infer::Scheme;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ColumnRoles {
    pub y: String,
    pub d: String,
    pub z: String,
    pub covariates: Vec<String>,
}

impl Default for ColumnRoles {
    fn default() -> Self {
        ColumnRoles { y: "y".into(), d: "d".into(), z: "z".into(), covariates: vec![] }
    }
}

/// Polynomial degree and z-saturation of the transformation vectors. All
/// covariate columns enter the basis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BasisConfig {
    pub degree: usize,
    pub saturate_z: bool,
}

impl Default for BasisConfig {
    fn default() -> Self {
        BasisConfig { degree: 1, saturate_z: true }
    }
}

/// Outcome and treatment grids: explicit points, or empirical quantiles at
/// `count` equi-spaced probabilities in `[lo, hi]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub y: Option<Vec<f64>>,
    pub y_count: usize,
    pub y_lo: f64,
    pub y_hi: f64,
    pub d: Option<Vec<f64>>,
    pub d_count: usize,
    pub d_lo: f64,
    pub d_hi: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            y: None,
            y_count: 99,
            y_lo: 0.02,
            y_hi: 0.98,
            d: None,
            d_count: 99,
            d_lo: 0.02,
            d_hi: 0.98,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FunctionalConfig {
    pub cdf: bool,
    pub qsf: bool,
    pub qte: bool,
    pub asf: bool,
    pub ate: bool,
    pub tau: Vec<f64>,
    /// Treatment values for CDF, QSF and ASF output. Defaults to the levels
    /// of a discrete treatment or the quartiles of a continuous one.
    pub d: Option<Vec<f64>>,
    /// `(d, d')` pairs for effects; defaults depend on the treatment kind.
    pub pairs: Option<Vec<[f64; 2]>>,
    pub quantile_rule: QuantileRule,
}

pub fn default_tau() -> Vec<f64> {
    (2..=18).map(|k| k as f64 * 0.05).collect()
}

impl Default for FunctionalConfig {
    fn default() -> Self {
        FunctionalConfig {
            cdf: false,
            qsf: true,
            qte: true,
            asf: true,
            ate: true,
            tau: default_tau(),
            d: None,
            pairs: None,
            quantile_rule: QuantileRule::Grid,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BootstrapConfig {
    /// Replicates; zero skips inference.
    pub b: usize,
    /// Defaults to multiplier for discrete treatments, empirical otherwise.
    pub scheme: Option<Scheme>,
    pub alpha: f64,
    pub seed: u64,
    pub keep_draws: bool,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig { b: 5000, scheme: None, alpha: 0.1, seed: 0, keep_draws: false }
    }
}

impl BootstrapConfig {
    pub fn scheme_for(&self, kind: TreatmentKind) -> Scheme {
        self.scheme.unwrap_or(match kind {
            TreatmentKind::Continuous => Scheme::Empirical,
            _ => Scheme::Multiplier,
        })
    }
}

/// Configuration of `estimate` and `check`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub input: Option<PathBuf>,
    /// Inferred from the treatment column when absent.
    pub treatment: Option<TreatmentKind>,
    pub columns: ColumnRoles,
    pub basis: BasisConfig,
    pub grid: GridConfig,
    pub functionals: FunctionalConfig,
    pub bootstrap: BootstrapConfig,
    pub output_dir: Option<PathBuf>,
}

/// Configuration of `simulate`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateConfig {
    /// Name of a shipped law; ignored when `law` is given.
    pub preset: String,
    pub law: Option<Law>,
    pub n: usize,
    pub seed: u64,
    pub grid: GridConfig,
    pub tau: Vec<f64>,
    /// Treatment values for the truth file (continuous laws).
    pub d: Vec<f64>,
    pub pairs: Option<Vec<[f64; 2]>>,
    pub output_dir: Option<PathBuf>,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        SimulateConfig {
            preset: "continuous".into(),
            law: None,
            n: 2000,
            seed: 0,
            grid: GridConfig::default(),
            tau: default_tau(),
            d: vec![0.0, 0.5, 1.0],
            pairs: None,
            output_dir: None,
        }
    }
}

/// Functional whose coverage is studied.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Parameter {
    Cdf,
    Qsf,
    Qte,
    Asf,
    Ate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TargetConfig {
    pub parameter: Parameter,
    /// Outcome points for `CDF`; by default the law's quartiles of `Y_d`.
    pub y: Option<Vec<f64>>,
    /// Treatment values; defaults to the law's levels or `[0, 0.5, 1]`.
    pub d: Option<Vec<f64>>,
    pub tau: Vec<f64>,
    pub pairs: Option<Vec<[f64; 2]>>,
    pub quantile_rule: QuantileRule,
}

impl Default for TargetConfig {
    fn default() -> Self {
        TargetConfig {
            parameter: Parameter::Cdf,
            y: None,
            d: None,
            tau: vec![0.25, 0.5, 0.75],
            pairs: None,
            quantile_rule: QuantileRule::Linear,
        }
    }
}

/// Estimator whose bands are studied.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EstimatorChoice {
    /// The copula-invariance IV estimator.
    #[default]
    Iv,
    /// Distribution regression treating D as exogenous given X.
    Exogenous,
}

/// Configuration of `coverage`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CoverageFileConfig {
    pub preset: String,
    pub law: Option<Law>,
    pub estimator: EstimatorChoice,
    pub n: usize,
    pub reps: usize,
    pub seed: u64,
    /// Upper bound on `reps · (B + 1) · n`.
    pub budget: f64,
    pub basis: BasisConfig,
    pub grid: GridConfig,
    pub bootstrap: BootstrapConfig,
    pub target: TargetConfig,
    pub output_dir: Option<PathBuf>,
}

impl Default for CoverageFileConfig {
    fn default() -> Self {
        CoverageFileConfig {
            preset: "continuous".into(),
            law: None,
            n: 1000,
            reps: 200,
            seed: 0,
            budget: 1e9,
            estimator: EstimatorChoice::Iv,
            basis: BasisConfig::default(),
            grid: GridConfig { y_count: 25, d_count: 0, ..Default::default() },
            bootstrap: BootstrapConfig { b: 299, ..Default::default() },
            target: TargetConfig::default(),
            output_dir: None,
        }
    }
}

impl SimulateConfig {
    pub fn resolve_law(&self) -> Result<Law, CliError> {
        resolve_law(&self.preset, &self.law)
    }
}

impl CoverageFileConfig {
    pub fn resolve_law(&self) -> Result<Law, CliError> {
        resolve_law(&self.preset, &self.law)
    }
}

fn resolve_law(preset: &str, law: &Option<Law>) -> Result<Law, CliError> {
    let law = match law {
        Some(l) => l.clone(),
        None => Law::preset(preset).map_err(|e| CliError::Config(e.to_string()))?,
    };
    law.validate().map_err(|e| CliError::Config(e.to_string()))?;
    Ok(law)
}

/// Read a JSON config, or the defaults when `path` is `None`.
pub fn load<T: for<'de> Deserialize<'de> + Default>(path: Option<&Path>) -> Result<T, CliError> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("config {}: {e}", p.display())))
        }
    }
}

pub(crate) fn check_tau(tau: &[f64]) -> Result<(), CliError> {
    if let Some(t) = tau.iter().find(|t| !(**t > 0.0 && **t < 1.0)) {
        return Err(CliError::Config(format!("quantile index {t} outside (0, 1)")));
    }
    Ok(())
}

pub(crate) fn check_alpha(alpha: f64) -> Result<(), CliError> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(CliError::Config(format!("alpha = {alpha} outside (0, 1)")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_unknown_fields_fail() {
        let c = RunConfig::default();
        let s = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&s).unwrap(), c);
        assert!(serde_json::from_str::<RunConfig>(r#"{"bootstrp": {}}"#).is_err());
        let p: RunConfig = serde_json::from_str(r#"{"treatment": "BINARY", "bootstrap": {"b": 200}}"#).unwrap();
        assert_eq!(p.treatment, Some(TreatmentKind::Binary));
        assert_eq!(p.bootstrap.b, 200);
        assert_eq!(p.bootstrap.alpha, 0.1);
    }

    #[test]
    fn scheme_defaults_by_kind() {
        let b = BootstrapConfig::default();
        assert_eq!(b.scheme_for(TreatmentKind::Binary), Scheme::Multiplier);
        assert_eq!(b.scheme_for(TreatmentKind::Continuous), Scheme::Empirical);
    }
}
