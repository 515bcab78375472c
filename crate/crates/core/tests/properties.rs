//! Equivariance and symmetry properties across the public API.

use proptest::prelude::*;

use exactmeta::bivariate::{fit_constrained_bivar, fit_ml_bivar, p_value_bivar, DtaData, DtaStudy};
use exactmeta::comparators::{dl_interval, knha_interval, lr_interval_uni, reml_interval_uni};
use exactmeta::network::{fit_ml_net, ContrastStudy, NetworkModel};
use exactmeta::univariate::{ci_mu, fit_ml, p_value_mu, UnivariateData};

fn univariate() -> impl Strategy<Value = UnivariateData> {
    (3usize..9)
        .prop_flat_map(|k| {
            (
                prop::collection::vec(-2.0f64..2.0, k),
                prop::collection::vec(0.02f64..0.6, k),
            )
        })
        .prop_map(|(y, v)| UnivariateData::new(y, v).unwrap())
}

fn affine(d: &UnivariateData, a: f64, b: f64) -> UnivariateData {
    UnivariateData::new(
        d.y().iter().map(|y| a * y + b).collect(),
        d.sigma2().iter().map(|s| a * a * s).collect(),
    )
    .unwrap()
}

fn close(x: f64, y: f64, tol: f64) -> bool {
    (x - y).abs() <= tol * (1.0 + x.abs().max(y.abs()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn mc_interval_is_location_scale_equivariant(d in univariate(), a in 0.3f64..3.0, b in -2.0f64..2.0) {
        let ci = ci_mu(&d, 0.05, 100, 7).unwrap();
        let ct = ci_mu(&affine(&d, a, b), 0.05, 100, 7).unwrap();
        let tol = 3e-4 * a * (ci.upper - ci.lower);
        prop_assert!((ct.lower - (a * ci.lower + b)).abs() < tol, "{} {}", ct.lower, a * ci.lower + b);
        prop_assert!((ct.upper - (a * ci.upper + b)).abs() < tol, "{} {}", ct.upper, a * ci.upper + b);
    }

    #[test]
    fn mc_p_value_is_location_scale_invariant(d in univariate(), a in 0.3f64..3.0, b in -2.0f64..2.0, mu0 in -1.5f64..1.5) {
        let p = p_value_mu(&d, mu0, 60, 3).unwrap();
        let q = p_value_mu(&affine(&d, a, b), a * mu0 + b, 60, 3).unwrap();
        prop_assert!(close(p.p, q.p, 1e-6), "{} {}", p.p, q.p);
        prop_assert!(close(p.statistic, q.statistic, 1e-6));
    }

    #[test]
    fn p_value_diagnostics_are_in_range(d in univariate(), mu0 in -1.5f64..1.5) {
        let p = p_value_mu(&d, mu0, 80, 11).unwrap();
        prop_assert!((0.0..=1.0).contains(&p.p));
        prop_assert!(p.ess <= 80.0 + 1e-9);
        prop_assert!(p.n_degenerate <= 80);
        let at_mle = p_value_mu(&d, fit_ml(&d).mu, 80, 11).unwrap();
        prop_assert_eq!(at_mle.p, 1.0);
    }

    #[test]
    fn intervals_nest_across_levels(d in univariate()) {
        let wide = ci_mu(&d, 0.05, 100, 5).unwrap();
        let narrow = ci_mu(&d, 0.2, 100, 5).unwrap();
        prop_assert!(wide.lower <= narrow.lower && narrow.upper <= wide.upper);
    }

    #[test]
    fn comparators_are_equivariant(d in univariate(), a in 0.3f64..3.0, b in -2.0f64..2.0) {
        let t = affine(&d, a, b);
        let pairs = [
            (dl_interval(&d, 0.05).unwrap(), dl_interval(&t, 0.05).unwrap()),
            (reml_interval_uni(&d, 0.05).unwrap(), reml_interval_uni(&t, 0.05).unwrap()),
            (knha_interval(&d, 0.05).unwrap(), knha_interval(&t, 0.05).unwrap()),
        ];
        for (r, s) in pairs {
            prop_assert!(close(s.lower, a * r.lower + b, 1e-5), "{:?} {:?}", r, s);
            prop_assert!(close(s.upper, a * r.upper + b, 1e-5), "{:?} {:?}", r, s);
            prop_assert!(close(s.tau2, a * a * r.tau2, 1e-4));
        }
    }

    #[test]
    fn knha_shares_reml_heterogeneity(d in univariate()) {
        let r = reml_interval_uni(&d, 0.05).unwrap();
        let k = knha_interval(&d, 0.05).unwrap();
        prop_assert_eq!(r.tau2, k.tau2);
        prop_assert_eq!(r.estimate, k.estimate);
    }

    #[test]
    fn lr_interval_contains_ml_estimate(d in univariate()) {
        let r = lr_interval_uni(&d, 0.05).unwrap();
        prop_assert!(r.contains(fit_ml(&d).mu));
    }

    #[test]
    fn study_order_does_not_change_fits(d in univariate(), shift in 1usize..8) {
        let k = d.k();
        let rot = |v: &[f64]| (0..k).map(|i| v[(i + shift) % k]).collect::<Vec<_>>();
        let p = UnivariateData::new(rot(d.y()), rot(d.sigma2())).unwrap();
        let (f, g) = (fit_ml(&d), fit_ml(&p));
        prop_assert!(close(f.mu, g.mu, 1e-8) && close(f.tau2, g.tau2, 1e-6));
        let (r, s) = (dl_interval(&d, 0.05).unwrap(), dl_interval(&p, 0.05).unwrap());
        prop_assert!(close(r.lower, s.lower, 1e-10) && close(r.upper, s.upper, 1e-10));
    }
}

fn dta() -> impl Strategy<Value = DtaData> {
    (5usize..10)
        .prop_flat_map(|k| {
            prop::collection::vec((0.0f64..2.5, -2.5f64..0.0, 0.02f64..0.5, 0.02f64..0.5), k)
        })
        .prop_map(|rows| {
            DtaData::new(
                rows.into_iter()
                    .map(|(a, b, va, vb)| DtaStudy::new(a, b, va, vb).unwrap())
                    .collect(),
            )
            .unwrap()
        })
}

fn swapped(d: &DtaData) -> DtaData {
    DtaData::new(
        d.studies()
            .iter()
            .map(|s| DtaStudy::new(s.yb, s.ya, s.vb, s.va).unwrap())
            .collect(),
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn label_swap_permutes_nuisance_and_keeps_statistic(d in dta(), mu in (0.5f64..1.5, -1.5f64..-0.5)) {
        let mu0 = [mu.0, mu.1];
        let s = swapped(&d);
        let (Ok(f), Ok(g)) = (fit_constrained_bivar(&d, mu0), fit_constrained_bivar(&s, [mu0[1], mu0[0]])) else {
            return Ok(());
        };
        prop_assert!((f.nuisance.sigma_a2 - g.nuisance.sigma_b2).abs() < 1e-5);
        prop_assert!((f.nuisance.sigma_b2 - g.nuisance.sigma_a2).abs() < 1e-5);
        prop_assert!((f.nuisance.rho - g.nuisance.rho).abs() < 1e-4);
        let (Ok(u), Ok(v)) = (fit_ml_bivar(&d), fit_ml_bivar(&s)) else {
            return Ok(());
        };
        prop_assert!((u.mu[0] - v.mu[1]).abs() < 1e-5 && (u.mu[1] - v.mu[0]).abs() < 1e-5);
        let t = p_value_bivar(&d, mu0, 4, 1).unwrap().statistic;
        let w = p_value_bivar(&s, [mu0[1], mu0[0]], 4, 1).unwrap().statistic;
        prop_assert!((t - w).abs() < 1e-5 * (1.0 + t), "{t} {w}");
    }
}

fn two_arm_network() -> impl Strategy<Value = Vec<ContrastStudy>> {
    prop::collection::vec((1usize..3, -1.0f64..1.5, 0.05f64..0.4), 5..9).prop_map(|rows| {
        let mut studies: Vec<ContrastStudy> = rows
            .into_iter()
            .map(|(t, y, v)| ContrastStudy::new(vec![t], vec![y], vec![vec![v]]).unwrap())
            .collect();
        // Keep both treatments connected.
        studies.push(ContrastStudy::new(vec![1], vec![0.3], vec![vec![0.2]]).unwrap());
        studies.push(ContrastStudy::new(vec![2], vec![0.6], vec![vec![0.2]]).unwrap());
        studies
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn network_fit_ignores_study_order(studies in two_arm_network()) {
        let a = fit_ml_net(&NetworkModel::new(studies.clone(), 2).unwrap()).unwrap();
        let mut rev = studies;
        rev.reverse();
        let b = fit_ml_net(&NetworkModel::new(rev, 2).unwrap()).unwrap();
        prop_assert!((a.deviance - b.deviance).abs() < 1e-8 * (1.0 + a.deviance.abs()));
        prop_assert!((a.tau2 - b.tau2).abs() < 1e-5);
        for j in 0..2 {
            prop_assert!((a.beta[j] - b.beta[j]).abs() < 1e-5);
        }
    }
}
