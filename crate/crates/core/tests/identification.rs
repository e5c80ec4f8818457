use copiv_core::copulas::{self, Family};
use copiv_core::dgp::{Law, ObservableTables, TreatmentKind, PRESETS};
use copiv_core::gauss::{self, Prob};
use copiv_core::ident::{self, BinarySystemInput, Level, OrderedSystemInput};
use copiv_core::Error;

fn q(p: f64) -> f64 {
    gauss::quantile(Prob::new(p))
}

#[test]
fn population_tables_invert_to_the_law() {
    // Exact observable tables of the shipped discrete laws, inverted cell by
    // cell, return each level's marginal CDF and local dependence.
    let y = [-1.0, -0.2, 0.4, 1.3];
    for name in ["gaussian", "bump", "ordered"] {
        let law = Law::preset(name).unwrap();
        let ObservableTables::Discrete { levels, thresholds, joint, .. } = law.observable_cdfs(&y, &[], &[]) else {
            panic!("{name} is discrete");
        };
        for (k, &d) in levels.iter().enumerate() {
            for (yi, &yv) in y.iter().enumerate() {
                let (p0, p1) = (joint[k][0][yi], joint[k][1][yi]);
                let s = match law.kind() {
                    TreatmentKind::Binary => {
                        let level = if d == 1.0 { Level::Treated } else { Level::Untreated };
                        let inp = BinarySystemInput { p0, p1, pi0: thresholds[0][0], pi1: thresholds[1][0] };
                        ident::solve_binary(&inp, level).unwrap()
                    }
                    _ => ident::solve_ordered(&OrderedSystemInput { level: d as usize, p0, p1, thresholds: thresholds.clone() }).unwrap(),
                };
                let f = law.outcome_cdf(d, yv);
                let rho = law.local_dependence(d, yv, &[]);
                assert!((s.f - f).abs() < 1e-8 && (s.rho - rho).abs() < 1e-8, "{name} d={d} y={yv}: {s:?}");
            }
        }
    }
}

#[test]
fn ordered_interior_levels_round_trip_on_a_lattice() {
    let th = [vec![0.15, 0.45, 0.8], vec![0.3, 0.6, 0.9]];
    for level in 1..=4usize {
        for &f in &[0.15, 0.5, 0.85] {
            for &r in &[-0.7, -0.1, 0.4, 0.75] {
                let p = [0, 1].map(|z| {
                    let lo = if level == 1 { f64::NEG_INFINITY } else { q(th[z][level - 2]) };
                    let hi = if level == 4 { f64::INFINITY } else { q(th[z][level - 1]) };
                    ident::cell_prob(q(f), lo, hi, r).0
                });
                let s = ident::solve_ordered(&OrderedSystemInput { level, p0: p[0], p1: p[1], thresholds: th.clone() }).unwrap();
                assert!((s.f - f).abs() < 1e-8 && (s.rho - r).abs() < 1e-8, "level {level} F={f} ρ={r}: {s:?}");
            }
        }
    }
}

#[test]
fn continuous_closed_form_matches_the_binary_limit_of_one_cell() {
    // Both routes recover (F, ρ) from the same latent law.
    let (f, r): (f64, f64) = (0.42, -0.35);
    let s = (1.0 - r * r).sqrt();
    let fy = |fd: f64| gauss::cdf((q(f) - r * q(fd)) / s);
    let c = ident::solve_continuous(fy(0.3), fy(0.65), 0.3, 0.65).unwrap();
    assert!((c.f - f).abs() < 1e-12 && (c.rho - r).abs() < 1e-12);
    let p = [0.3, 0.65].map(|p| ident::multi_forward(Level::Treated, f, p, r));
    let b = ident::solve_binary(&BinarySystemInput { p0: p[0], p1: p[1], pi0: 0.3, pi1: 0.65 }, Level::Treated).unwrap();
    assert!((b.f - c.f).abs() < 1e-9 && (b.rho - c.rho).abs() < 1e-9);
}

#[test]
fn infeasible_and_weak_inputs_are_reported() {
    let weak = BinarySystemInput { p0: 0.1, p1: 0.1, pi0: 0.4, pi1: 0.4 };
    assert!(matches!(ident::solve_binary(&weak, Level::Treated), Err(Error::WeakInstrument(_))));
    let too_big = BinarySystemInput { p0: 0.5, p1: 0.2, pi0: 0.3, pi1: 0.6 };
    assert!(ident::solve_binary(&too_big, Level::Treated).is_err());
    assert!(ident::solve_continuous(0.4, 0.5, 0.6, 0.6).is_err());
}

#[test]
fn shipped_laws_have_gaussian_local_dependence_constant_in_v() {
    for name in PRESETS {
        let law = Law::preset(name).unwrap();
        for l in &law.outcome.levels {
            for &y in &[-0.5, 0.3, 1.0] {
                let f = l.marginal.cdf(y);
                if f <= 0.0 || f >= 1.0 {
                    continue;
                }
                for v in [0.2, 0.5, 0.9] {
                    let t = l.joint_cdf(y, v);
                    let r = copulas::solve_rho(Family::Gaussian, t, f, v).unwrap().rho;
                    assert!((r - l.dependence.rho(y)).abs() < 1e-9, "{name} y={y} v={v}");
                }
            }
        }
    }
}
