//! The four subcommands. Each takes a resolved configuration, writes its
//! artifacts plus a `manifest.json`, and returns what it wrote.

use crate::config::{check_alpha, check_tau, CoverageFileConfig, EstimatorChoice, RunConfig, SimulateConfig};
use crate::io::{self, file_sha256, sha256_hex};
use crate::pipeline::{self, Estimator, Item};
use crate::CliError;
use copiv_core::data::Dataset;
use copiv_core::dgp::{self, Law, TreatmentKind};
use copiv_core::estimate::{self, FitControl, FitDiagnostics, TslsFit};
use copiv_core::functionals::{self, FunctionalRow};
use copiv_core::ident::{self, AssumptionReport};
use copiv_core::infer::{self, BandMeta, BandResult, CoverageConfig, CoverageReport, Scheme};
use copiv_core::Error;
use serde::Serialize;
use std::path::{Path, PathBuf};

const DEFAULT_OUTPUT: &str = "copiv-out";
// Pilot sample used to place grids for coverage studies.
const PILOT_N: usize = 20_000;
const PILOT_SEED_OFFSET: u64 = 0x5eed_0f_9a1d;

#[derive(Serialize)]
struct FileHash {
    name: String,
    sha256: String,
}

#[derive(Serialize)]
struct Manifest<'a, C: Serialize> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    seed: u64,
    config_sha256: String,
    config: &'a C,
    input: Option<FileHash>,
    outputs: Vec<FileHash>,
}

fn write_manifest<C: Serialize>(
    dir: &Path,
    command: &str,
    seed: u64,
    config: &C,
    input: Option<&Path>,
    outputs: &[&str],
) -> Result<(), CliError> {
    let text = serde_json::to_string(config).map_err(|e| CliError::Output(e.to_string()))?;
    let input = match input {
        Some(p) => Some(FileHash { name: p.display().to_string(), sha256: file_sha256(p)? }),
        None => None,
    };
    let outputs = outputs
        .iter()
        .map(|name| Ok(FileHash { name: name.to_string(), sha256: file_sha256(&dir.join(name))? }))
        .collect::<Result<Vec<_>, CliError>>()?;
    let m = Manifest {
        tool: "copiv",
        version: env!("CARGO_PKG_VERSION"),
        command,
        seed,
        config_sha256: sha256_hex(text.as_bytes()),
        config,
        input,
        outputs,
    };
    io::write_json(&dir.join("manifest.json"), &m)
}

fn output_dir(p: &Option<PathBuf>) -> Result<PathBuf, CliError> {
    let dir = p.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT));
    std::fs::create_dir_all(&dir)
        .map_err(|e| CliError::Output(format!("cannot create {}: {e}", dir.display())))?;
    Ok(dir)
}

/// Relevance and dominance diagnostics on the sample treatment CDFs.
#[derive(Clone, Debug, Serialize)]
pub struct AssumptionCheck {
    pub kind: TreatmentKind,
    pub report: AssumptionReport,
    pub passed: bool,
    pub failures: Vec<String>,
}

pub fn assumption_check(kind: TreatmentKind, data: &Dataset, d_grid: &[f64]) -> AssumptionCheck {
    let [c0, c1] = data.treatment_cdf_by_z(d_grid, None);
    let report = ident::check_assumptions(d_grid, &c0, &c1);
    let mut failures = vec![];
    let ones = data.z.iter().filter(|&&z| z == 1.0).count();
    if ones == 0 || ones == data.n() {
        failures.push(format!("relevance: the instrument takes a single value ({})", data.z[0]));
    } else if !report.rel_ok {
        failures.push(format!(
            "relevance: smallest probit gap between instrument arms is {:.3e}",
            report.min_probit_gap
        ));
    }
    if kind == TreatmentKind::Ordered && !report.uoc_violations.is_empty() {
        failures.push(format!(
            "ordered-choice uniformity: instrument shifts the treatment CDF in both directions (at d = {:?})",
            report.uoc_violations
        ));
    }
    AssumptionCheck { kind, passed: failures.is_empty(), failures, report }
}

struct Prepared {
    data: Dataset,
    kind: TreatmentKind,
    warnings: Vec<String>,
    d_grid: Vec<f64>,
}

fn prepare(cfg: &RunConfig) -> Result<(PathBuf, Prepared), CliError> {
    let input = cfg
        .input
        .clone()
        .ok_or_else(|| CliError::Config("no input file; set `input` or pass --input".into()))?;
    let data = io::read_dataset(&input, &cfg.columns)?;
    let (kind, warn) = pipeline::resolve_kind(cfg.treatment, &data);
    let levels = data.treatment_levels();
    if kind == TreatmentKind::Binary && levels != [0.0, 1.0] {
        let shown: Vec<f64> = levels.iter().take(5).copied().collect();
        return Err(CliError::Config(format!(
            "binary treatment must take values 0 and 1; found {} distinct values starting {shown:?}",
            levels.len()
        )));
    }
    let d_grid = match kind {
        TreatmentKind::Continuous => pipeline::treatment_grid(kind, &cfg.grid, &data, data.n(), &[]),
        _ => levels,
    };
    Ok((input, Prepared { data, kind, warnings: warn.into_iter().collect(), d_grid }))
}

// ---------------------------------------------------------------------------
// check

#[derive(Debug, Serialize)]
pub struct CheckOutput {
    pub n: usize,
    pub warnings: Vec<String>,
    pub check: AssumptionCheck,
}

/// Assumption diagnostics only. Writes `diagnostics.json` when an output
/// directory is configured.
pub fn run_check(cfg: &RunConfig) -> Result<CheckOutput, CliError> {
    let (input, p) = prepare(cfg)?;
    let out = CheckOutput { n: p.data.n(), warnings: p.warnings, check: assumption_check(p.kind, &p.data, &p.d_grid) };
    if cfg.output_dir.is_some() {
        let dir = output_dir(&cfg.output_dir)?;
        io::write_json(&dir.join("diagnostics.json"), &out)?;
        write_manifest(&dir, "check", 0, cfg, Some(&input), &["diagnostics.json"])?;
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// estimate

/// Bands for one curve of functionals.
#[derive(Clone, Debug, Serialize)]
pub struct CurveBand {
    pub parameter: String,
    pub d: Option<f64>,
    pub d_prime: Option<f64>,
    pub items: Vec<Item>,
    pub band: BandResult,
}

#[derive(Serialize)]
struct BandRow {
    parameter: String,
    d: f64,
    d_prime: Option<f64>,
    u: f64,
    estimate: f64,
    se: f64,
    lo_pt: f64,
    hi_pt: f64,
    lo_unif: f64,
    hi_unif: f64,
}

#[derive(Serialize)]
struct BootstrapSummary {
    b: usize,
    scheme: Scheme,
    seed: u64,
    alpha: f64,
    failed: usize,
}

#[derive(Serialize)]
struct EstimateDiagnostics<'a> {
    kind: TreatmentKind,
    n: usize,
    warnings: Vec<String>,
    assumptions: &'a AssumptionCheck,
    fit: Option<&'a FitDiagnostics>,
    /// Covariate mass dropped at each d, as `(d, share)`.
    excluded_mass: Vec<(f64, f64)>,
    /// Bound on the ASF error from outcome mass outside the grid, as `(d, bound)`.
    asf_bias_bound: Vec<(f64, f64)>,
    bootstrap: Option<BootstrapSummary>,
    baseline_2sls: Option<TslsFit>,
    error: Option<String>,
}

#[derive(Debug)]
pub struct EstimateOutput {
    pub dir: PathBuf,
    pub kind: TreatmentKind,
    pub items: Vec<Item>,
    pub estimates: Vec<f64>,
    pub bands: Vec<CurveBand>,
}

/// Fit, evaluate the requested functionals and, when `bootstrap.b > 0`,
/// attach pointwise and uniform bands.
pub fn run_estimate(cfg: &RunConfig) -> Result<EstimateOutput, CliError> {
    let f = &cfg.functionals;
    check_tau(&f.tau)?;
    check_alpha(cfg.bootstrap.alpha)?;
    if let Some(p) = &f.pairs {
        pipeline::check_pairs(p)?;
    }
    let (input, mut p) = prepare(cfg)?;
    let dir = output_dir(&cfg.output_dir)?;
    let data = &p.data;
    let basis = pipeline::basis_for(&cfg.basis, data.ncov())?;
    let (def_d, def_pairs) = pipeline::default_targets(p.kind, &p.d_grid, &data.d);
    let d_values = f.d.clone().unwrap_or(def_d);
    let pairs = f.pairs.clone().unwrap_or(def_pairs);
    let extra: Vec<f64> = d_values.iter().copied().chain(pairs.iter().flatten().copied()).collect();
    if p.kind == TreatmentKind::Continuous {
        p.d_grid = pipeline::treatment_grid(p.kind, &cfg.grid, data, data.n(), &extra);
    } else if let Some(v) = extra.iter().find(|v| !p.d_grid.contains(v)) {
        return Err(CliError::Config(format!("treatment value {v} is not an observed level {:?}", p.d_grid)));
    }
    let y_grid = pipeline::outcome_grid(p.kind, &cfg.grid, data, data.n(), &[]);
    let est = Estimator { kind: p.kind, basis, y_grid: y_grid.clone(), d_grid: p.d_grid.clone() };
    let items = pipeline::functional_items(f, &d_values, &pairs, &y_grid);
    if items.is_empty() {
        return Err(CliError::Config("no functionals requested".into()));
    }
    let check = assumption_check(p.kind, data, &p.d_grid);
    let tsls = estimate::fit_2sls(data).ok();
    let mut diag = EstimateDiagnostics {
        kind: p.kind,
        n: data.n(),
        warnings: p.warnings.clone(),
        assumptions: &check,
        fit: None,
        excluded_mass: vec![],
        asf_bias_bound: vec![],
        bootstrap: None,
        baseline_2sls: tsls,
        error: None,
    };
    let diag_path = dir.join("diagnostics.json");
    let fail = |diag: &mut EstimateDiagnostics, e: CliError| -> Result<EstimateOutput, CliError> {
        diag.error = Some(e.to_string());
        io::write_json(&diag_path, diag)?;
        write_manifest(&dir, "estimate", cfg.bootstrap.seed, cfg, Some(&input), &["diagnostics.json"])?;
        Err(e)
    };
    if !check.passed {
        let e = CliError::Core(Error::Assumption(check.failures.join("; ")));
        return fail(&mut diag, e);
    }
    let fit = match est.fit(data, FitControl::default()) {
        Ok(fit) => fit,
        Err(e) => return fail(&mut diag, e.into()),
    };
    let rule = f.quantile_rule;
    let point = functionals::marginalize(&fit).and_then(|m| Ok((pipeline::evaluate_all(&m, &items, rule)?, m)));
    let (estimates, marginal) = match point {
        Ok(v) => v,
        Err(e) => {
            diag.fit = Some(&fit.diagnostics);
            return fail(&mut diag, e.into());
        }
    };
    diag.fit = Some(&fit.diagnostics);
    diag.excluded_mass = marginal.excluded.clone();
    diag.asf_bias_bound = d_values
        .iter()
        .filter_map(|&d| functionals::asf_bias_bound(&marginal, d).ok().map(|b| (d, b)))
        .collect();

    let mut curve_bands = vec![];
    let mut outputs = vec!["fit.json", "functionals.csv", "functionals.json"];
    if cfg.bootstrap.b > 0 {
        let scheme = cfg.bootstrap.scheme_for(p.kind);
        let seed = cfg.bootstrap.seed;
        let pipe = |d: &Dataset, w: Option<&[f64]>| -> copiv_core::Result<Vec<f64>> {
            pipeline::evaluate_all_censored(&est.marginal(d, w, Some(&fit))?, &items, rule)
        };
        let draws = match infer::bootstrap(data, &pipe, cfg.bootstrap.b, scheme, seed) {
            Ok(d) => d,
            Err(e) => return fail(&mut diag, e.into()),
        };
        diag.bootstrap =
            Some(BootstrapSummary { b: cfg.bootstrap.b, scheme, seed, alpha: cfg.bootstrap.alpha, failed: draws.failed });
        for g in pipeline::curves(&items) {
            let est_sub: Vec<f64> = g.iter().map(|&i| estimates[i]).collect();
            let draws_sub: Vec<Vec<f64>> = draws.draws.iter().map(|r| g.iter().map(|&i| r[i]).collect()).collect();
            let first = items[g[0]];
            let mut band = match infer::bands(&est_sub, &draws_sub, cfg.bootstrap.alpha) {
                Ok(b) => b,
                Err(Error::Invalid(m)) => {
                    diag.warnings.push(format!("{} curve at d = {} has no band: {m}", first.parameter(), first.d()));
                    continue;
                }
                Err(e) => return fail(&mut diag, e.into()),
            };
            band.meta = Some(BandMeta { seed, b: cfg.bootstrap.b, scheme, failed: draws.failed });
            if cfg.bootstrap.keep_draws {
                band.draws = Some(draws_sub);
            }
            let u = (0..g.len()).map(|j| pipeline::curve_u(&items, &g, j)).collect();
            let shared = !matches!(first, Item::Asf { .. } | Item::Ate { .. });
            curve_bands.push(CurveBand {
                parameter: first.parameter().into(),
                d: shared.then(|| first.d()),
                d_prime: if shared { first.d_prime() } else { None },
                items: g.iter().map(|&i| items[i]).collect(),
                band: band.with_u(u),
            });
        }
        let rows: Vec<BandRow> = curve_bands
            .iter()
            .flat_map(|c| {
                c.items.iter().enumerate().map(move |(j, it)| BandRow {
                    parameter: c.parameter.clone(),
                    d: it.d(),
                    d_prime: it.d_prime(),
                    u: c.band.u[j],
                    estimate: c.band.estimate[j],
                    se: c.band.se[j],
                    lo_pt: c.band.lo_pt[j],
                    hi_pt: c.band.hi_pt[j],
                    lo_unif: c.band.lo_unif[j],
                    hi_unif: c.band.hi_unif[j],
                })
            })
            .collect();
        io::write_rows(&dir.join("bands.csv"), &rows)?;
        io::write_json(&dir.join("bands.json"), &curve_bands)?;
        outputs.extend(["bands.csv", "bands.json"]);
    }
    io::write_json(&dir.join("fit.json"), &fit)?;
    let rows: Vec<FunctionalRow> = items.iter().zip(&estimates).map(|(it, &v)| it.row(v)).collect();
    io::write_rows(&dir.join("functionals.csv"), &rows)?;
    io::write_json(&dir.join("functionals.json"), &serde_json::json!({ "marginal": marginal, "functionals": rows }))?;
    io::write_json(&diag_path, &diag)?;
    outputs.push("diagnostics.json");
    write_manifest(&dir, "estimate", cfg.bootstrap.seed, cfg, Some(&input), &outputs)?;
    Ok(EstimateOutput { dir, kind: p.kind, items, estimates, bands: curve_bands })
}

// ---------------------------------------------------------------------------
// simulate

/// Population quantities of a law on the evaluation grids.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Truth {
    pub law: Law,
    pub y: Vec<f64>,
    pub d: Vec<f64>,
    /// `F_{Y_d}(y)` indexed `[d][y]`.
    pub cdf: Vec<Vec<f64>>,
    /// `ρ_{Y_d}(y)` at covariate value zero, indexed `[d][y]`.
    pub rho: Vec<Vec<f64>>,
    pub tau: Vec<f64>,
    /// `Q_τ(Y_d)` indexed `[d][τ]`.
    pub qsf: Vec<Vec<f64>>,
    pub pairs: Vec<[f64; 2]>,
    /// QTE difference quotients indexed `[pair][τ]`.
    pub qte: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
    pub ate: Vec<f64>,
}

#[derive(Serialize)]
struct TruthRow {
    parameter: &'static str,
    d: f64,
    d_prime: Option<f64>,
    tau_or_y: Option<f64>,
    value: f64,
}

impl Truth {
    pub fn new(law: &Law, y: Vec<f64>, d: Vec<f64>, tau: Vec<f64>, pairs: Vec<[f64; 2]>) -> Truth {
        let x0 = vec![0.0; law.n_covariates()];
        let cdf = d.iter().map(|&dv| y.iter().map(|&yv| law.outcome_cdf(dv, yv)).collect()).collect();
        let rho = d.iter().map(|&dv| y.iter().map(|&yv| law.local_dependence(dv, yv, &x0)).collect()).collect();
        let qsf = d.iter().map(|&dv| tau.iter().map(|&t| law.outcome_quantile(dv, t)).collect()).collect();
        let qte = pairs
            .iter()
            .map(|&[a, b]| tau.iter().map(|&t| Item::Qte { d: a, d_prime: b, tau: t }.truth(law)).collect())
            .collect();
        let mean = d.iter().map(|&dv| law.outcome_mean(dv)).collect();
        let ate = pairs.iter().map(|&[a, b]| Item::Ate { d: a, d_prime: b }.truth(law)).collect();
        Truth { law: law.clone(), y, d, cdf, rho, tau, qsf, pairs, qte, mean, ate }
    }

    fn rows(&self) -> Vec<TruthRow> {
        let mut out = vec![];
        let row = |parameter, d, d_prime, tau_or_y, value| TruthRow { parameter, d, d_prime, tau_or_y, value };
        for (i, &d) in self.d.iter().enumerate() {
            for (k, &y) in self.y.iter().enumerate() {
                out.push(row("CDF", d, None, Some(y), self.cdf[i][k]));
            }
            for (k, &y) in self.y.iter().enumerate() {
                out.push(row("RHO", d, None, Some(y), self.rho[i][k]));
            }
            for (k, &t) in self.tau.iter().enumerate() {
                out.push(row("QSF", d, None, Some(t), self.qsf[i][k]));
            }
            out.push(row("ASF", d, None, None, self.mean[i]));
        }
        for (j, &[a, b]) in self.pairs.iter().enumerate() {
            for (k, &t) in self.tau.iter().enumerate() {
                out.push(row("QTE", a, Some(b), Some(t), self.qte[j][k]));
            }
            out.push(row("ATE", a, Some(b), None, self.ate[j]));
        }
        out
    }
}

#[derive(Debug)]
pub struct SimulateOutput {
    pub dir: PathBuf,
    pub data: Dataset,
    pub truth: Truth,
}

/// Draw a sample from a law and write it with the population truth.
pub fn run_simulate(cfg: &SimulateConfig) -> Result<SimulateOutput, CliError> {
    check_tau(&cfg.tau)?;
    let law = cfg.resolve_law()?;
    let data = dgp::simulate(&law, cfg.n, cfg.seed)?;
    let dir = output_dir(&cfg.output_dir)?;
    let y = pipeline::outcome_grid(law.kind(), &cfg.grid, &data, data.n(), &[]);
    let d = match law.kind() {
        TreatmentKind::Continuous => cfg.d.clone(),
        _ => law.levels(),
    };
    if d.is_empty() {
        return Err(CliError::Config("no treatment values for the truth file".into()));
    }
    let pairs = match &cfg.pairs {
        Some(p) => p.clone(),
        None => match law.kind() {
            TreatmentKind::Continuous if d.len() > 1 => vec![[d[d.len() - 1], d[0]]],
            TreatmentKind::Continuous => vec![],
            k => pipeline::default_targets(k, &d, &[]).1,
        },
    };
    pipeline::check_pairs(&pairs)?;
    let truth = Truth::new(&law, y, d, cfg.tau.clone(), pairs);
    io::write_dataset(&dir.join("data.csv"), &data)?;
    io::write_json(&dir.join("truth.json"), &truth)?;
    io::write_rows(&dir.join("truth.csv"), &truth.rows())?;
    write_manifest(&dir, "simulate", cfg.seed, cfg, None, &["data.csv", "truth.json", "truth.csv"])?;
    Ok(SimulateOutput { dir, data, truth })
}

// ---------------------------------------------------------------------------
// coverage

#[derive(Clone, Debug, Serialize)]
pub struct CoverageOutput {
    pub dir: PathBuf,
    pub items: Vec<Item>,
    pub truth: Vec<f64>,
    pub estimator: Estimator,
    pub report: CoverageReport,
}

#[derive(Serialize)]
struct CoverageRow {
    parameter: &'static str,
    d: f64,
    d_prime: Option<f64>,
    tau_or_y: Option<f64>,
    truth: f64,
    pointwise_coverage: f64,
}

/// Monte Carlo coverage of bootstrap bands for one target curve.
pub fn run_coverage(cfg: &CoverageFileConfig) -> Result<CoverageOutput, CliError> {
    let t = &cfg.target;
    check_tau(&t.tau)?;
    check_alpha(cfg.bootstrap.alpha)?;
    let law = cfg.resolve_law()?;
    let kind = law.kind();
    let basis = pipeline::basis_for(&cfg.basis, law.n_covariates())?;
    let cost = cfg.reps as f64 * (cfg.bootstrap.b as f64 + 1.0) * cfg.n as f64;
    if cost > cfg.budget {
        return Err(Error::Budget { estimate: cost, limit: cfg.budget }.into());
    }
    let pilot = dgp::simulate(&law, PILOT_N.max(cfg.n), cfg.seed.wrapping_add(PILOT_SEED_OFFSET))?;
    let d_values = t.d.clone().unwrap_or_else(|| match kind {
        TreatmentKind::Continuous => vec![0.0, 0.5, 1.0],
        _ => law.levels(),
    });
    let pairs = t.pairs.clone().unwrap_or_else(|| match kind {
        TreatmentKind::Continuous => vec![[d_values[d_values.len() - 1], d_values[0]]],
        k => pipeline::default_targets(k, &law.levels(), &[]).1,
    });
    pipeline::check_pairs(&pairs)?;
    let items = pipeline::target_items(t, &d_values, &pairs, &law);
    if items.is_empty() {
        return Err(CliError::Config("coverage target has no points".into()));
    }
    let cdf_points: Vec<f64> = items.iter().filter_map(|i| matches!(i, Item::Cdf { .. }).then(|| i.tau_or_y().unwrap())).collect();
    let y_grid = pipeline::outcome_grid(kind, &cfg.grid, &pilot, cfg.n, &cdf_points);
    let extra: Vec<f64> = d_values.iter().copied().chain(pairs.iter().flatten().copied()).collect();
    let d_grid = match kind {
        TreatmentKind::Continuous => pipeline::treatment_grid(kind, &cfg.grid, &pilot, cfg.n, &extra),
        _ => law.levels(),
    };
    let truth: Vec<f64> = items.iter().map(|i| i.truth(&law)).collect();
    let estimator = Estimator { kind, basis, y_grid, d_grid };
    let rule = t.quantile_rule;
    let cc = CoverageConfig {
        n: cfg.n,
        reps: cfg.reps,
        b: cfg.bootstrap.b,
        alpha: cfg.bootstrap.alpha,
        scheme: cfg.bootstrap.scheme_for(kind),
        seed: cfg.seed,
        budget: cfg.budget,
    };
    let report = match cfg.estimator {
        EstimatorChoice::Iv => {
            let pipe = |d: &Dataset, w: Option<&[f64]>| pipeline::evaluate_all_censored(&estimator.marginal(d, w, None)?, &items, rule);
            infer::coverage_study(&law, &cc, &pipe, &truth)?
        }
        EstimatorChoice::Exogenous => {
            let pipe = |d: &Dataset, w: Option<&[f64]>| pipeline::evaluate_all_censored(&estimator.exogenous_marginal(d, w)?, &items, rule);
            infer::coverage_study(&law, &cc, &pipe, &truth)?
        }
    };
    let dir = output_dir(&cfg.output_dir)?;
    let out = CoverageOutput { dir: dir.clone(), items, truth, estimator, report };
    let rows: Vec<CoverageRow> = out
        .items
        .iter()
        .enumerate()
        .map(|(k, it)| CoverageRow {
            parameter: it.parameter(),
            d: it.d(),
            d_prime: it.d_prime(),
            tau_or_y: it.tau_or_y(),
            truth: out.truth[k],
            pointwise_coverage: out.report.pointwise[k],
        })
        .collect();
    io::write_json(&dir.join("coverage.json"), &out)?;
    io::write_rows(&dir.join("coverage.csv"), &rows)?;
    write_manifest(&dir, "coverage", cfg.seed, cfg, None, &["coverage.json", "coverage.csv"])?;
    Ok(out)
}
