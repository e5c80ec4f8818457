//! One-parameter copula families, their partial derivatives, and the
//! local-representation inverse `solve_rho`: given a joint probability `t`
//! at margins `(u1, u2)`, find the family parameter reproducing it.
//!
//! Clayton and Frank are evaluated through `expm1`/`ln_1p` forms so that the
//! independence limit is smooth; below `|θ| < 1e-6` a second-order series in
//! θ is used instead.

use crate::error::{Error, Result};
use crate::gauss::{self, Corr, Prob};
use crate::quad::bisect;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Family {
    Gaussian,
    Clayton,
    Frank,
    LocalSpearman,
}

const SERIES_CUTOFF: f64 = 1e-6;
/// Largest |θ| reached by the bisection for Clayton/Frank (s = 1 − 1e-8).
pub const ARCHIMEDEAN_MAX: f64 = 1e8 - 1.0;
const FRECHET_SLACK: f64 = 1e-13;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Boundary {
    Lower,
    Upper,
}

/// Parameter solving `C(u1, u2; ρ) = t`, with a flag when `t` sat on a
/// Fréchet bound and the parameter was clamped.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RhoSolution {
    pub rho: f64,
    pub boundary: Option<Boundary>,
}

/// Fréchet–Hoeffding bounds `(W, M)` at `(u1, u2)`.
pub fn frechet(u1: f64, u2: f64) -> (f64, f64) {
    ((u1 + u2 - 1.0).max(0.0), u1.min(u2))
}

fn spearman_scale(u1: f64, u2: f64) -> f64 {
    (u1 * u2 * (1.0 - u1) * (1.0 - u2)).sqrt()
}

impl Family {
    /// Validate a parameter against the family domain at `(u1, u2)`.
    pub fn check(self, u1: f64, u2: f64, rho: f64) -> Result<()> {
        if !rho.is_finite() {
            return Err(Error::Domain(format!("{self:?} parameter {rho}")));
        }
        let ok = match self {
            Family::Gaussian => rho.abs() < 1.0,
            Family::Clayton => rho >= -1.0,
            Family::Frank => true,
            Family::LocalSpearman => {
                let (w, m) = frechet(u1, u2);
                let c = u1 * u2 + rho * spearman_scale(u1, u2);
                c >= w - FRECHET_SLACK && c <= m + FRECHET_SLACK
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Domain(format!(
                "{self:?} parameter {rho} at (u1, u2) = ({u1}, {u2})"
            )))
        }
    }

    // Bisection variable s in a bounded interval and its map back to ρ.
    fn bracket(self, u1: f64, u2: f64) -> (f64, f64) {
        match self {
            Family::Gaussian => (-Corr::MAX, Corr::MAX),
            Family::Clayton => (-0.5, 1.0 - 1e-8),
            Family::Frank => (-(1.0 - 1e-8), 1.0 - 1e-8),
            Family::LocalSpearman => {
                let (w, m) = frechet(u1, u2);
                let s = spearman_scale(u1, u2);
                ((w - u1 * u2) / s, (m - u1 * u2) / s)
            }
        }
    }

    fn from_s(self, s: f64) -> f64 {
        match self {
            Family::Clayton | Family::Frank => s / (1.0 - s.abs()),
            _ => s,
        }
    }
}

fn check_margins(u1: f64, u2: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&u1) || !(0.0..=1.0).contains(&u2) {
        return Err(Error::Domain(format!("margins ({u1}, {u2}) outside [0,1]")));
    }
    Ok(())
}

/// Copula CDF `C(u1, u2; ρ)`.
pub fn c(family: Family, u1: f64, u2: f64, rho: f64) -> Result<f64> {
    check_margins(u1, u2)?;
    family.check(u1, u2, rho)?;
    Ok(c_unchecked(family, u1, u2, rho))
}

/// `∂C/∂u1`, the conditional CDF of the second margin given the first.
pub fn c1(family: Family, u1: f64, u2: f64, rho: f64) -> Result<f64> {
    check_margins(u1, u2)?;
    family.check(u1, u2, rho)?;
    Ok(c1_unchecked(family, u1, u2, rho))
}

/// `∂C/∂u2`.
pub fn c2(family: Family, u1: f64, u2: f64, rho: f64) -> Result<f64> {
    c1(family, u2, u1, rho)
}

/// `∂C/∂ρ`.
pub fn crho(family: Family, u1: f64, u2: f64, rho: f64) -> Result<f64> {
    check_margins(u1, u2)?;
    family.check(u1, u2, rho)?;
    Ok(crho_unchecked(family, u1, u2, rho))
}

pub(crate) fn c_unchecked(family: Family, u1: f64, u2: f64, rho: f64) -> f64 {
    match family {
        Family::Gaussian => gaussian_c(u1, u2, rho),
        Family::Clayton => clayton_c(u1, u2, rho),
        Family::Frank => frank_c(u1, u2, rho),
        Family::LocalSpearman => u1 * u2 + rho * spearman_scale(u1, u2),
    }
}

fn c1_unchecked(family: Family, u1: f64, u2: f64, rho: f64) -> f64 {
    match family {
        Family::Gaussian => {
            let x1 = gauss::quantile(Prob::new(u1));
            let x2 = gauss::quantile(Prob::new(u2));
            gauss::cdf((x2 - rho * x1) / (1.0 - rho * rho).sqrt())
        }
        Family::Clayton => clayton_c1(u1, u2, rho),
        Family::Frank => frank_c1(u1, u2, rho),
        Family::LocalSpearman => {
            u2 + rho * 0.5 * (1.0 - 2.0 * u1) * (u2 * (1.0 - u2) / (u1 * (1.0 - u1))).sqrt()
        }
    }
}

fn crho_unchecked(family: Family, u1: f64, u2: f64, rho: f64) -> f64 {
    match family {
        Family::Gaussian => {
            let x1 = gauss::quantile(Prob::new(u1));
            let x2 = gauss::quantile(Prob::new(u2));
            gauss::bvn_pdf(x1, x2, rho)
        }
        Family::Clayton => clayton_dtheta(u1, u2, rho),
        Family::Frank => frank_dtheta(u1, u2, rho),
        Family::LocalSpearman => spearman_scale(u1, u2),
    }
}

fn gaussian_c(u1: f64, u2: f64, rho: f64) -> f64 {
    if u1 <= 0.0 || u2 <= 0.0 {
        return 0.0;
    }
    if u1 >= 1.0 {
        return u2;
    }
    if u2 >= 1.0 {
        return u1;
    }
    gauss::bvn_cdf_raw(gauss::quantile_f64(u1), gauss::quantile_f64(u2), rho)
}

// ln S with S = u1^-θ + u2^-θ − 1; None when S ≤ 0 (C = 0 region, θ < 0).
fn clayton_ln_s(a: f64, b: f64, theta: f64) -> Option<f64> {
    if theta > 1.0 {
        // Factor out the dominant power to avoid overflow.
        let (lo, hi) = (a.min(b), a.max(b));
        let rest = (-theta * (hi - lo)).exp() - (theta * lo).exp();
        return Some(-theta * lo + rest.ln_1p());
    }
    let arg = (-theta * a).exp_m1() + (-theta * b).exp_m1();
    if arg <= -1.0 {
        None
    } else {
        Some(arg.ln_1p())
    }
}

fn clayton_c(u1: f64, u2: f64, theta: f64) -> f64 {
    if u1 <= 0.0 || u2 <= 0.0 {
        return 0.0;
    }
    let (a, b) = (u1.ln(), u2.ln());
    if theta.abs() < SERIES_CUTOFF {
        return (a + b + theta * a * b + 0.5 * theta * theta * a * b * (a + b)).exp();
    }
    match clayton_ln_s(a, b, theta) {
        Some(ls) => (-ls / theta).exp(),
        None => 0.0,
    }
}

fn clayton_c1(u1: f64, u2: f64, theta: f64) -> f64 {
    if u2 <= 0.0 {
        return 0.0;
    }
    let (a, b) = (u1.ln(), u2.ln());
    if theta.abs() < SERIES_CUTOFF {
        let c = clayton_c(u1, u2, theta);
        return c / u1 * (1.0 + theta * b + 0.5 * theta * theta * (2.0 * a * b + b * b));
    }
    match clayton_ln_s(a, b, theta) {
        // u1^{−θ−1} S^{−1/θ−1}
        Some(ls) => ((-theta - 1.0) * a + (-1.0 / theta - 1.0) * ls).exp(),
        None => 0.0,
    }
}

fn clayton_dtheta(u1: f64, u2: f64, theta: f64) -> f64 {
    if u1 <= 0.0 || u2 <= 0.0 {
        return 0.0;
    }
    let (a, b) = (u1.ln(), u2.ln());
    let c = clayton_c(u1, u2, theta);
    if theta.abs() < SERIES_CUTOFF {
        return c * (a * b + theta * a * b * (a + b));
    }
    match clayton_ln_s(a, b, theta) {
        Some(ls) => {
            // S'/S with the powers scaled by S to stay finite.
            let ds_over_s = -a * (-theta * a - ls).exp() - b * (-theta * b - ls).exp();
            c * (ls / (theta * theta) - ds_over_s / theta)
        }
        None => 0.0,
    }
}

// Frank copula for θ > 0; negative θ uses C_θ(u, v) = u − C_{−θ}(u, 1 − v).
fn frank_c(u1: f64, u2: f64, theta: f64) -> f64 {
    if theta.abs() < SERIES_CUTOFF {
        let q = u1 * u2 * (1.0 - u1) * (1.0 - u2);
        return u1 * u2
            + 0.5 * theta * q
            + theta * theta * q * (1.0 - 2.0 * u1) * (1.0 - 2.0 * u2) / 12.0;
    }
    if theta < 0.0 {
        return u1 - frank_c(u1, 1.0 - u2, -theta);
    }
    if theta < 1.0 {
        let r = (-theta * u1).exp_m1() * (-theta * u2).exp_m1() / (-theta).exp_m1();
        -r.ln_1p() / theta
    } else {
        let (m, big) = (u1.min(u2), u1.max(u2));
        m - (frank_bracket(m, big, theta).ln() - (-(-theta).exp()).ln_1p()) / theta
    }
}

// e^{θm}(A + B − AB − E) with A = e^{−θu1}, B = e^{−θu2}, E = e^{−θ}, m = min.
fn frank_bracket(m: f64, big: f64, theta: f64) -> f64 {
    1.0 + (-theta * (big - m)).exp() - (-theta * big).exp() - (-theta * (1.0 - m)).exp()
}

fn frank_c1(u1: f64, u2: f64, theta: f64) -> f64 {
    if theta.abs() < SERIES_CUTOFF {
        let g = u2 * (1.0 - u2);
        return u2
            + 0.5 * theta * g * (1.0 - 2.0 * u1)
            + theta * theta * g * (1.0 - 2.0 * u2) * (1.0 - 6.0 * u1 + 6.0 * u1 * u1) / 12.0;
    }
    if theta < 0.0 {
        return 1.0 - frank_c1(u1, 1.0 - u2, -theta);
    }
    if theta < 1.0 {
        let num = (-theta * u1).exp() * (-theta * u2).exp_m1();
        let den = (-theta).exp_m1() + (-theta * u1).exp_m1() * (-theta * u2).exp_m1();
        num / den
    } else {
        let (m, big) = (u1.min(u2), u1.max(u2));
        let one_minus_b = -(-theta * u2).exp_m1();
        (-theta * (u1 - m)).exp() * one_minus_b / frank_bracket(m, big, theta)
    }
}

fn frank_dtheta(u1: f64, u2: f64, theta: f64) -> f64 {
    if theta.abs() < SERIES_CUTOFF {
        let q = u1 * u2 * (1.0 - u1) * (1.0 - u2);
        return 0.5 * q + theta * q * (1.0 - 2.0 * u1) * (1.0 - 2.0 * u2) / 6.0;
    }
    if theta < 0.0 {
        return frank_dtheta(u1, 1.0 - u2, -theta);
    }
    if theta < 1.0 {
        // C = −ln(1 + r)/θ with r = g1 g2 / g, g_i = e^{−θu_i} − 1, g = e^{−θ} − 1.
        let (g1, g2, g) = ((-theta * u1).exp_m1(), (-theta * u2).exp_m1(), (-theta).exp_m1());
        let (d1, d2, d) = (
            -u1 * (-theta * u1).exp(),
            -u2 * (-theta * u2).exp(),
            -(-theta).exp(),
        );
        let r = g1 * g2 / g;
        let dr = (d1 * g2 + g1 * d2) / g - g1 * g2 * d / (g * g);
        r.ln_1p() / (theta * theta) - dr / ((1.0 + r) * theta)
    } else {
        let (m, big) = (u1.min(u2), u1.max(u2));
        let br = frank_bracket(m, big, theta);
        let dbr = -(big - m) * (-theta * (big - m)).exp()
            + big * (-theta * big).exp()
            + (1.0 - m) * (-theta * (1.0 - m)).exp();
        let l = br.ln() - (-(-theta).exp()).ln_1p();
        l / (theta * theta) - (dbr / br - 1.0 / theta.exp_m1()) / theta
    }
}

/// Invert `C(u1, u2; ρ) = t` for ρ.
///
/// Bisection runs on a bounded transform of the parameter and stops when
/// the bracket no longer shrinks. Local-Spearman uses its closed form.
pub fn solve_rho(family: Family, t: f64, u1: f64, u2: f64) -> Result<RhoSolution> {
    if let Some(sol) = frechet_screen(family, t, u1, u2)? {
        return Ok(sol);
    }
    if family == Family::LocalSpearman {
        return Ok(RhoSolution {
            rho: (t - u1 * u2) / spearman_scale(u1, u2),
            boundary: None,
        });
    }
    Ok(solve_rho_bisect(family, t, u1, u2))
}

// Classifies `t` against the Fréchet bounds. Returns a boundary solution
// when `t` sits on a bound and an error when it lies outside.
fn frechet_screen(family: Family, t: f64, u1: f64, u2: f64) -> Result<Option<RhoSolution>> {
    check_margins(u1, u2)?;
    let (w, m) = frechet(u1, u2);
    if !t.is_finite() || t < w - FRECHET_SLACK {
        return Err(Error::Infeasible(format!(
            "t = {t} below the lower Fréchet bound max(u1+u2−1, 0) = {w}"
        )));
    }
    if t > m + FRECHET_SLACK {
        return Err(Error::Infeasible(format!(
            "t = {t} above the upper Fréchet bound min(u1, u2) = {m}"
        )));
    }
    let (lo, hi) = family.bracket(u1, u2);
    if t <= w + FRECHET_SLACK {
        return Ok(Some(RhoSolution {
            rho: family.from_s(lo),
            boundary: Some(Boundary::Lower),
        }));
    }
    if t >= m - FRECHET_SLACK {
        return Ok(Some(RhoSolution {
            rho: family.from_s(hi),
            boundary: Some(Boundary::Upper),
        }));
    }
    Ok(None)
}

/// Generic bisection path, exposed so closed forms can be cross-checked.
pub fn solve_rho_bisect(family: Family, t: f64, u1: f64, u2: f64) -> RhoSolution {
    let (lo, hi) = family.bracket(u1, u2);
    let f = |s: f64| c_unchecked(family, u1, u2, family.from_s(s)) - t;
    if f(lo) >= 0.0 {
        return RhoSolution { rho: family.from_s(lo), boundary: Some(Boundary::Lower) };
    }
    if f(hi) <= 0.0 {
        return RhoSolution { rho: family.from_s(hi), boundary: Some(Boundary::Upper) };
    }
    RhoSolution { rho: family.from_s(bisect(f, lo, hi, 200)), boundary: None }
}
