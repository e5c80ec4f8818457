//! Observation table: outcome, treatment, binary instrument, covariates.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub y: Vec<f64>,
    pub d: Vec<f64>,
    pub z: Vec<f64>,
    /// Covariates stored column by column.
    pub x: Vec<Vec<f64>>,
    pub x_names: Vec<String>,
}

impl Dataset {
    /// Build a dataset, checking lengths, finiteness and that `z` is 0/1.
    pub fn new(y: Vec<f64>, d: Vec<f64>, z: Vec<f64>, x: Vec<Vec<f64>>) -> Result<Dataset> {
        let names = (1..=x.len()).map(|j| format!("x{j}")).collect();
        Self::with_names(y, d, z, x, names)
    }

    pub fn with_names(
        y: Vec<f64>,
        d: Vec<f64>,
        z: Vec<f64>,
        x: Vec<Vec<f64>>,
        x_names: Vec<String>,
    ) -> Result<Dataset> {
        let n = y.len();
        if d.len() != n || z.len() != n || x.iter().any(|c| c.len() != n) {
            return Err(Error::Invalid("columns have different lengths".into()));
        }
        if x_names.len() != x.len() {
            return Err(Error::Invalid("covariate names do not match columns".into()));
        }
        if n == 0 {
            return Err(Error::Invalid("empty dataset".into()));
        }
        let finite = |v: &[f64]| v.iter().position(|a| !a.is_finite());
        for (name, col) in [("y", &y), ("d", &d), ("z", &z)] {
            if let Some(i) = finite(col) {
                return Err(Error::Invalid(format!("non-finite {name} at row {i}")));
            }
        }
        for (j, col) in x.iter().enumerate() {
            if let Some(i) = finite(col) {
                return Err(Error::Invalid(format!("non-finite {} at row {i}", x_names[j])));
            }
        }
        if let Some(i) = z.iter().position(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Invalid(format!("instrument must be 0/1; row {i} has {}", z[i])));
        }
        Ok(Dataset { y, d, z, x, x_names })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn ncov(&self) -> usize {
        self.x.len()
    }

    pub fn covariate_row(&self, i: usize) -> Vec<f64> {
        self.x.iter().map(|c| c[i]).collect()
    }

    /// Rows selected by index (repeats allowed).
    pub fn select(&self, rows: &[usize]) -> Dataset {
        let pick = |v: &[f64]| rows.iter().map(|&i| v[i]).collect::<Vec<_>>();
        Dataset {
            y: pick(&self.y),
            d: pick(&self.d),
            z: pick(&self.z),
            x: self.x.iter().map(|c| pick(c)).collect(),
            x_names: self.x_names.clone(),
        }
    }

    /// Sorted distinct treatment values.
    pub fn treatment_levels(&self) -> Vec<f64> {
        let mut v = self.d.clone();
        v.sort_by(|a, b| a.total_cmp(b));
        v.dedup();
        v
    }

    /// Weighted empirical `Pr[D ≤ d | Z = z]` at each grid point, for z = 0, 1.
    pub fn treatment_cdf_by_z(&self, grid: &[f64], weights: Option<&[f64]>) -> [Vec<f64>; 2] {
        let mut out = [vec![0.0; grid.len()], vec![0.0; grid.len()]];
        let mut tot = [0.0; 2];
        for i in 0..self.n() {
            let w = weights.map_or(1.0, |w| w[i]);
            let zi = self.z[i] as usize;
            tot[zi] += w;
            for (k, &g) in grid.iter().enumerate() {
                if self.d[i] <= g {
                    out[zi][k] += w;
                }
            }
        }
        for z in 0..2 {
            if tot[z] > 0.0 {
                out[z].iter_mut().for_each(|v| *v /= tot[z]);
            }
        }
        out
    }

    /// Weighted share of observations with `z = 1`.
    pub fn instrument_share(&self, weights: Option<&[f64]>) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..self.n() {
            let w = weights.map_or(1.0, |w| w[i]);
            num += w * self.z[i];
            den += w;
        }
        num / den
    }
}

/// Sorted evaluation points for outcome levels, treatment levels and
/// quantile indices.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalGrid {
    pub y: Vec<f64>,
    pub d: Vec<f64>,
    pub tau: Vec<f64>,
}

impl EvalGrid {
    /// Empirical quantiles of `v` at `count` equi-spaced probabilities in
    /// `[lo, hi]`, deduplicated.
    pub fn quantile_points(v: &[f64], count: usize, lo: f64, hi: f64) -> Vec<f64> {
        let mut s = v.to_vec();
        s.sort_by(|a, b| a.total_cmp(b));
        let mut out: Vec<f64> = (0..count)
            .map(|k| {
                let p = if count == 1 { 0.5 * (lo + hi) } else { lo + (hi - lo) * k as f64 / (count - 1) as f64 };
                sorted_quantile(&s, p)
            })
            .collect();
        out.dedup();
        out
    }
}

/// Type-7 empirical quantile of `v` at `p`.
pub fn quantile_type7(v: &[f64], p: f64) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    sorted_quantile(&s, p)
}

pub(crate) fn sorted_quantile(s: &[f64], p: f64) -> f64 {
    let n = s.len();
    if n == 1 {
        return s[0];
    }
    let h = (n as f64 - 1.0) * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    s[lo] + (h - lo as f64) * (s[hi] - s[lo])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Dataset {
        Dataset::new(
            vec![1.0, 2.0, 3.0, 4.0],
            vec![0.0, 1.0, 1.0, 0.0],
            vec![0.0, 1.0, 1.0, 0.0],
            vec![vec![0.5, -0.5, 1.5, 0.0]],
        )
        .unwrap()
    }

    #[test]
    fn validation() {
        assert!(Dataset::new(vec![1.0], vec![0.0], vec![2.0], vec![]).is_err());
        assert!(Dataset::new(vec![f64::NAN], vec![0.0], vec![0.0], vec![]).is_err());
        assert!(Dataset::new(vec![1.0, 2.0], vec![0.0], vec![0.0], vec![]).is_err());
        assert_eq!(tiny().ncov(), 1);
    }

    #[test]
    fn treatment_cdf() {
        let [c0, c1] = tiny().treatment_cdf_by_z(&[0.0, 1.0], None);
        assert_eq!(c0, vec![1.0, 1.0]);
        assert_eq!(c1, vec![0.0, 1.0]);
        assert_eq!(tiny().treatment_levels(), vec![0.0, 1.0]);
    }

    #[test]
    fn select_repeats_rows() {
        let s = tiny().select(&[3, 3, 0]);
        assert_eq!(s.y, vec![4.0, 4.0, 1.0]);
        assert_eq!(s.x[0], vec![0.0, 0.0, 0.5]);
    }

    #[test]
    fn type7_quantiles() {
        let v = [4.0, 1.0, 3.0, 2.0];
        assert_eq!(quantile_type7(&v, 0.0), 1.0);
        assert_eq!(quantile_type7(&v, 1.0), 4.0);
        assert!((quantile_type7(&v, 0.25) - 1.75).abs() < 1e-15);
    }
}
