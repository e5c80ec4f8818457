//! Univariate and bivariate standard Gaussian primitives.
//!
//! The bivariate CDF follows Genz's BVND: Gauss–Legendre quadrature of the
//! Drezner–Wesolowsky integral for moderate correlation, and an asymptotic
//! expansion plus quadrature of the remainder when |ρ| ≥ 0.925.
//!
//! References: A. Genz (2004), "Numerical computation of rectangular bivariate
//! and trivariate normal and t probabilities", Statistics and Computing 14.

use serde::{Deserialize, Serialize};
use libm::erfc;
use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::sync::OnceLock;

const SQRT_2PI: f64 = 2.506_628_274_631_000_7;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// A probability clamped into `[EPS, 1 - EPS]`.
///
/// The complement is carried separately so values produced by [`cdf_prob`]
/// keep full relative precision in the upper tail.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prob {
    value: f64,
    upper: f64,
    clamped: bool,
}

impl Prob {
    pub const EPS: f64 = 1e-12;

    pub fn new(p: f64) -> Prob {
        Self::from_parts(p, 1.0 - p)
    }

    fn from_parts(p: f64, q: f64) -> Prob {
        if p < Self::EPS {
            Prob { value: Self::EPS, upper: 1.0 - Self::EPS, clamped: true }
        } else if q < Self::EPS {
            Prob { value: 1.0 - Self::EPS, upper: Self::EPS, clamped: true }
        } else {
            Prob { value: p, upper: q, clamped: false }
        }
    }

    pub fn value(self) -> f64 {
        self.value
    }

    /// `1 - value`, accurate even when `value` is close to one.
    pub fn complement(self) -> f64 {
        self.upper
    }

    pub fn was_clamped(self) -> bool {
        self.clamped
    }
}

impl From<Prob> for f64 {
    fn from(p: Prob) -> f64 {
        p.value
    }
}

/// A correlation clamped to `|ρ| ≤ 1 - MARGIN`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Corr {
    value: f64,
    clamped: bool,
}

impl Corr {
    pub const MARGIN: f64 = 1e-8;
    pub const MAX: f64 = 1.0 - Self::MARGIN;

    pub fn new(r: f64) -> Corr {
        if r > Self::MAX {
            Corr { value: Self::MAX, clamped: true }
        } else if r < -Self::MAX {
            Corr { value: -Self::MAX, clamped: true }
        } else {
            Corr { value: r, clamped: false }
        }
    }

    pub fn value(self) -> f64 {
        self.value
    }

    pub fn was_clamped(self) -> bool {
        self.clamped
    }
}

impl From<Corr> for f64 {
    fn from(r: Corr) -> f64 {
        r.value
    }
}

/// Standard normal density.
pub fn phi(x: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Standard normal CDF, unclamped.
pub fn cdf(x: f64) -> f64 {
    0.5 * erfc(-x * FRAC_1_SQRT_2)
}

/// Upper tail `1 - Φ(x)`, accurate for large positive `x`.
pub fn sf(x: f64) -> f64 {
    0.5 * erfc(x * FRAC_1_SQRT_2)
}

/// Φ(x) as a clamped [`Prob`] with an accurate complement.
pub fn cdf_prob(x: f64) -> Prob {
    Prob::from_parts(cdf(x), sf(x))
}

/// log Φ(x), finite for all finite `x`.
pub fn ln_cdf(x: f64) -> f64 {
    if x > 5.0 {
        (-sf(x)).ln_1p()
    } else if x > -37.0 {
        cdf(x).ln()
    } else {
        let z2 = 1.0 / (x * x);
        let series = 1.0 - z2 * (1.0 - z2 * (3.0 - z2 * (15.0 - 105.0 * z2)));
        -0.5 * x * x - (-x * SQRT_2PI).ln() + series.ln()
    }
}

/// Inverse Mills ratio φ(x)/Φ(x).
pub fn mills(x: f64) -> f64 {
    if x > -37.0 {
        phi(x) / cdf(x)
    } else {
        let z2 = 1.0 / (x * x);
        let series = 1.0 - z2 * (1.0 - z2 * (3.0 - z2 * (15.0 - 105.0 * z2)));
        -x / series
    }
}

// Acklam's rational approximation, valid for p in (0, 0.5].
fn quantile_lower_seed(p: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969_683_028_665_376e1,
        2.209_460_984_245_205e2,
        -2.759_285_104_469_687e2,
        1.383_577_518_672_69e2,
        -3.066_479_806_614_716e1,
        2.506_628_277_459_239,
    ];
    const B: [f64; 5] = [
        -5.447_609_879_822_406e1,
        1.615_858_368_580_409e2,
        -1.556_989_798_598_866e2,
        6.680_131_188_771_972e1,
        -1.328_068_155_288_572e1,
    ];
    const C: [f64; 6] = [
        -7.784_894_002_430_293e-3,
        -3.223_964_580_411_365e-1,
        -2.400_758_277_161_838,
        -2.549_732_539_343_734,
        4.374_664_141_464_968,
        2.938_163_982_698_783,
    ];
    const D: [f64; 4] = [
        7.784_695_709_041_462e-3,
        3.224_671_290_700_398e-1,
        2.445_134_137_142_996,
        3.754_408_661_907_416,
    ];
    if p < 0.02425 {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    }
}

fn quantile_lower(p: f64) -> f64 {
    let x = quantile_lower_seed(p);
    if p < 1e-300 {
        return x;
    }
    // One Halley step against the erfc-based CDF.
    let e = cdf(x) - p;
    let u = e * SQRT_2PI * (0.5 * x * x).exp();
    x - u / (1.0 + 0.5 * x * u)
}

/// Φ⁻¹ of a clamped probability; uses whichever tail is smaller.
pub fn quantile(p: Prob) -> f64 {
    if p.value <= 0.5 {
        quantile_lower(p.value)
    } else {
        -quantile_lower(p.upper)
    }
}

/// Φ⁻¹ on a raw value; returns ±∞ at 0 and 1.
pub fn quantile_f64(p: f64) -> f64 {
    if p <= 0.0 {
        f64::NEG_INFINITY
    } else if p >= 1.0 {
        f64::INFINITY
    } else if p <= 0.5 {
        quantile_lower(p)
    } else {
        -quantile_lower(1.0 - p)
    }
}

/// Standard bivariate normal density with correlation `r`.
pub fn bvn_pdf(x: f64, y: f64, r: f64) -> f64 {
    let s = 1.0 - r * r;
    (-(x * x - 2.0 * r * x * y + y * y) / (2.0 * s)).exp() / (2.0 * PI * s.sqrt())
}

/// Φ₂(x, y; ρ) with ρ taken from a clamped [`Corr`].
pub fn bvn_cdf(x: f64, y: f64, rho: Corr) -> f64 {
    bvn_cdf_raw(x, y, rho.value)
}

/// Φ₂(x, y; r) for any `r` in [-1, 1]; infinite arguments allowed.
pub fn bvn_cdf_raw(x: f64, y: f64, r: f64) -> f64 {
    if x.is_nan() || y.is_nan() || r.is_nan() {
        return f64::NAN;
    }
    if x == f64::NEG_INFINITY || y == f64::NEG_INFINITY {
        return 0.0;
    }
    if x == f64::INFINITY {
        return cdf(y);
    }
    if y == f64::INFINITY {
        return cdf(x);
    }
    if r >= 1.0 {
        return cdf(x.min(y));
    }
    if r <= -1.0 {
        return (cdf(x) - sf(y)).max(0.0);
    }
    bvnu(-x, -y, r)
}

/// ∂Φ₂/∂x = φ(x)·Φ((y − r x)/√(1−r²)).
pub fn bvn_dx(x: f64, y: f64, r: f64) -> f64 {
    if !x.is_finite() || y == f64::NEG_INFINITY {
        return 0.0;
    }
    if y == f64::INFINITY {
        return phi(x);
    }
    phi(x) * cdf((y - r * x) / (1.0 - r * r).sqrt())
}

fn gauss_legendre_20() -> &'static [(f64, f64); 20] {
    static NODES: OnceLock<[(f64, f64); 20]> = OnceLock::new();
    NODES.get_or_init(|| gauss_legendre::<20>())
}

/// Gauss–Legendre nodes and weights on [-1, 1] via Newton on P_N.
pub(crate) fn gauss_legendre<const N: usize>() -> [(f64, f64); N] {
    let mut out = [(0.0, 0.0); N];
    let n = N as f64;
    for (i, slot) in out.iter_mut().enumerate() {
        let mut x = (PI * (i as f64 + 0.75) / (n + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=N {
                let kf = k as f64;
                let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
                p0 = p1;
                p1 = p2;
            }
            dp = n * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        *slot = (x, 2.0 / ((1.0 - x * x) * dp * dp));
    }
    out
}

// P(X > dh, Y > dk) for a standard bivariate normal with correlation r.
fn bvnu(dh: f64, dk: f64, r: f64) -> f64 {
    let nodes = gauss_legendre_20();
    let two_pi = 2.0 * PI;
    let h = dh;
    let mut k = dk;
    let mut hk = h * k;
    let mut bvn = 0.0;
    if r.abs() < 0.925 {
        let hs = 0.5 * (h * h + k * k);
        let asr = r.asin();
        for &(x, w) in nodes {
            let sn = (0.5 * asr * (1.0 + x)).sin();
            bvn += w * ((sn * hk - hs) / (1.0 - sn * sn)).exp();
        }
        return (bvn * asr / (4.0 * PI) + sf(h) * sf(k)).clamp(0.0, 1.0);
    }
    if r < 0.0 {
        k = -k;
        hk = -hk;
    }
    if r.abs() < 1.0 {
        let as_ = (1.0 - r) * (1.0 + r);
        let mut a = as_.sqrt();
        let bs = (h - k) * (h - k);
        let c = (4.0 - hk) / 8.0;
        let d = (12.0 - hk) / 16.0;
        let asr = -0.5 * (bs / as_ + hk);
        if asr > -100.0 {
            bvn = a
                * asr.exp()
                * (1.0 - c * (bs - as_) * (1.0 - d * bs / 5.0) / 3.0 + c * d * as_ * as_ / 5.0);
        }
        if hk > -100.0 {
            let b = bs.sqrt();
            let sp = SQRT_2PI * cdf(-b / a);
            bvn -= (-0.5 * hk).exp() * sp * b * (1.0 - c * bs * (1.0 - d * bs / 5.0) / 3.0);
        }
        a *= 0.5;
        for &(x, w) in nodes {
            let xs = (a * (x + 1.0)).powi(2);
            let rs = (1.0 - xs).sqrt();
            let asr = -0.5 * (bs / xs + hk);
            if asr > -100.0 {
                bvn += a
                    * w
                    * asr.exp()
                    * ((-hk * xs / (2.0 * (1.0 + rs) * (1.0 + rs))).exp() / rs
                        - (1.0 + c * xs * (1.0 + d * xs)));
            }
        }
        bvn = -bvn / two_pi;
    }
    if r > 0.0 {
        bvn += sf(h.max(k));
    } else if h >= k {
        bvn = -bvn;
    } else {
        let l = if h < 0.0 { cdf(k) - cdf(h) } else { sf(h) - sf(k) };
        bvn = l - bvn;
    }
    bvn.clamp(0.0, 1.0)
}

/// Probability mass of the standard normal on `(lo, hi)`, tail-accurate.
pub fn interval_prob(lo: f64, hi: f64) -> f64 {
    if lo >= hi {
        return 0.0;
    }
    if lo > 0.0 {
        sf(lo) - sf(hi)
    } else {
        cdf(hi) - cdf(lo)
    }
}
