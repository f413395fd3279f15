use proptest::prelude::*;

use remeta::canonical::transform;
use remeta::model::{group, StudySet};
use remeta::mu::{estimate_mu, omega_weights, WeightRule};
use remeta::tau::{
    dersimonian_laird, estimate_tau, hedges, i_squared, mandel_paule, reml, restricted_loglik_grouped,
    restricted_loglik_raw, restricted_score, TauMethod, REML_MAX_ITER, REML_TOL,
};

const RULES: [&str; 9] = ["mean", "gd", "dl", "hedges", "mp", "reml", "delta1", "delta0", "mh"];

/// Studies whose standard errors repeat now and then, so grouping gets exercised.
fn studies() -> impl Strategy<Value = Vec<(f64, f64)>> {
    prop::collection::vec((-5.0..5.0f64, prop_oneof![0.2..2.0f64, Just(0.5), Just(1.0)]), 4..9)
        .prop_filter("need two distinct variances", |v| {
            v.iter().any(|(_, s)| (s - v[0].1).abs() > 1e-3)
        })
}

fn fixed_effect(x: &[f64], v: &[f64], tau2: f64) -> (f64, f64) {
    let w: Vec<f64> = v.iter().map(|v| 1.0 / (v + tau2)).collect();
    let sw: f64 = w.iter().sum();
    (w.iter().zip(x).map(|(w, x)| w * x).sum::<f64>() / sw, sw)
}

fn cochran_q(x: &[f64], v: &[f64], tau2: f64) -> f64 {
    let (m, _) = fixed_effect(x, v, tau2);
    x.iter().zip(v).map(|(x, v)| (x - m).powi(2) / (v + tau2)).sum()
}

fn raw_dl(x: &[f64], v: &[f64]) -> f64 {
    let k = x.len() as f64;
    let w: Vec<f64> = v.iter().map(|v| 1.0 / v).collect();
    let sw: f64 = w.iter().sum();
    let sw2: f64 = w.iter().map(|w| w * w).sum();
    ((cochran_q(x, v, 0.0) - (k - 1.0)) / (sw - sw2 / sw)).max(0.0)
}

fn raw_hedges(x: &[f64], v: &[f64]) -> f64 {
    let k = x.len() as f64;
    let mean = x.iter().sum::<f64>() / k;
    let ss: f64 = x.iter().map(|x| (x - mean).powi(2)).sum();
    (ss / (k - 1.0) - v.iter().sum::<f64>() / k).max(0.0)
}

fn raw_mp(x: &[f64], v: &[f64]) -> f64 {
    let k = x.len() as f64;
    let f = |t: f64| cochran_q(x, v, t) - (k - 1.0);
    if f(0.0) <= 0.0 {
        return 0.0;
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    while f(hi) > 0.0 {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) > 0.0 {
            lo = mid
        } else {
            hi = mid
        }
    }
    0.5 * (lo + hi)
}

/// `−2` times the restricted log-likelihood from raw studies, up to a constant.
fn raw_neg2_restricted(x: &[f64], v: &[f64], tau2: f64) -> f64 {
    let (m, sw) = fixed_effect(x, v, tau2);
    v.iter().map(|v| (v + tau2).ln()).sum::<f64>()
        + sw.ln()
        + x.iter().zip(v).map(|(x, v)| (x - m).powi(2) / (v + tau2)).sum::<f64>()
}

fn golden_min(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64) -> f64 {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..300 {
        let c = b - g * (b - a);
        let d = a + g * (b - a);
        if f(c) < f(d) {
            b = d
        } else {
            a = c
        }
    }
    0.5 * (a + b)
}

fn split(pairs: &[(f64, f64)]) -> (Vec<f64>, Vec<f64>) {
    (pairs.iter().map(|p| p.0).collect(), pairs.iter().map(|p| p.1 * p.1).collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn moment_estimators_match_raw_formulas(pairs in studies()) {
        let (x, v) = split(&pairs);
        let cf = transform(&group(&StudySet::from_pairs(&pairs).unwrap()).unwrap()).unwrap();
        let s = cf.sufficient();
        let scale = 1.0 + v.iter().sum::<f64>();
        prop_assert!((dersimonian_laird(s).value - raw_dl(&x, &v)).abs() < 1e-9 * scale);
        prop_assert!((hedges(s).value - raw_hedges(&x, &v)).abs() < 1e-9 * scale);
        prop_assert!((mandel_paule(s).unwrap().value - raw_mp(&x, &v)).abs() < 1e-8 * scale);
        let q = cochran_q(&x, &v, 0.0);
        let k = x.len() as f64;
        let i2 = ((q - k + 1.0) / q).max(0.0);
        prop_assert!((i_squared(s) - i2).abs() < 1e-10);
    }

    #[test]
    fn reml_maximizes_the_raw_restricted_likelihood(pairs in studies()) {
        let (x, v) = split(&pairs);
        let g = group(&StudySet::from_pairs(&pairs).unwrap()).unwrap();
        let cf = transform(&g).unwrap();
        let est = reml(cf.sufficient(), None, REML_TOL, REML_MAX_ITER).unwrap().value;
        let scale = v.iter().sum::<f64>() / v.len() as f64;
        let hi = 10.0 * (raw_hedges(&x, &v) + raw_dl(&x, &v) + scale);
        let oracle = golden_min(|t| raw_neg2_restricted(&x, &v, t), 0.0, hi);
        let f = |t| raw_neg2_restricted(&x, &v, t);
        // compare objective values: the optimum is flat
        prop_assert!(f(est) <= f(oracle) + 1e-9, "reml {est} vs oracle {oracle}");
        if est > 0.0 {
            prop_assert!(restricted_score(cf.sufficient(), est).abs() < 1e-7);
        }
        // grouped and raw forms agree up to the same constant at two points
        let d1 = restricted_loglik_grouped(&g, 0.3) - restricted_loglik_raw(&x, &v, 0.3);
        let d2 = restricted_loglik_grouped(&g, 2.0) - restricted_loglik_raw(&x, &v, 2.0);
        prop_assert!((d1 - d2).abs() < 1e-9 * (1.0 + d1.abs()));
    }

    #[test]
    fn shift_and_scale_equivariance(pairs in studies(), shift in -10.0..10.0f64, lam in 0.1..10.0f64) {
        let base = transform(&group(&StudySet::from_pairs(&pairs).unwrap()).unwrap()).unwrap();
        let moved: Vec<(f64, f64)> = pairs.iter().map(|(x, s)| (lam * x + shift, lam * s)).collect();
        let other = transform(&group(&StudySet::from_pairs(&moved).unwrap()).unwrap()).unwrap();
        for m in ["dl", "hedges", "mp", "reml"] {
            let m: TauMethod = m.parse().unwrap();
            let a = estimate_tau(base.sufficient(), &m).unwrap().value;
            let b = estimate_tau(other.sufficient(), &m).unwrap().value;
            prop_assert!((b - lam * lam * a).abs() < 1e-7 * lam * lam * (1.0 + a), "{m}: {a} vs {b}");
        }
        for r in RULES {
            let rule: WeightRule = r.parse().unwrap();
            let a = estimate_mu(&base, &rule).unwrap().value;
            let b = estimate_mu(&other, &rule).unwrap().value;
            prop_assert!((b - (lam * a + shift)).abs() < 1e-7 * (1.0 + lam * a.abs() + shift.abs()), "{r}: {a} vs {b}");
        }
    }

    #[test]
    fn weights_are_bounded_and_normalized(pairs in studies()) {
        let cf = transform(&group(&StudySet::from_pairs(&pairs).unwrap()).unwrap()).unwrap();
        for r in RULES.iter().chain(&["bayes"]) {
            let est = estimate_mu(&cf, &r.parse().unwrap()).unwrap();
            for (w, t) in est.weights_w.iter().zip(cf.t2()) {
                prop_assert!(*w >= 0.0 && *w <= (1.0 + 1e-12) / t, "{r}: weight {w} cap {}", 1.0 / t);
            }
            if ["bayes", "gd", "dl", "reml"].contains(r) {
                // ascending t² means descending weights
                prop_assert!(est.weights_w.windows(2).all(|w| w[0] > w[1]), "{r}: {:?}", est.weights_w);
            }
            let omega = omega_weights(cf.design(), &est.weights_w);
            prop_assert!((omega.iter().sum::<f64>() - 1.0).abs() < 1e-10);
            let direct: f64 = omega.iter().zip(&cf.grouped().group_means).map(|(o, x)| o * x).sum();
            prop_assert!((direct - est.value).abs() < 1e-9 * (1.0 + est.value.abs()));
        }
    }

    #[test]
    fn bayes_weights_fall_as_contrasts_grow(pairs in studies(), j in 0usize..8, factor in 1.01..5.0f64) {
        let g = group(&StudySet::from_pairs(&pairs).unwrap()).unwrap();
        let cf = transform(&g).unwrap();
        let d = cf.design();
        let j = j % cf.y().len();
        let rule = WeightRule::Bayes(Default::default()).prepare(d).unwrap();
        let mut y = cf.y().to_vec();
        let before = rule.weights(remeta::Sufficient::new(d, &y, cf.u2())).unwrap();
        y[j] *= factor;
        let after = rule.weights(remeta::Sufficient::new(d, &y, cf.u2())).unwrap();
        for (a, b) in after.iter().zip(&before) {
            prop_assert!(*a <= b * (1.0 + 1e-12));
        }
    }
}

#[test]
fn constant_effects_give_that_constant() {
    let pairs = [(1.5, 0.3), (1.5, 0.7), (1.5, 1.1), (1.5, 0.7), (1.5, 2.0)];
    let cf = transform(&group(&StudySet::from_pairs(&pairs).unwrap()).unwrap()).unwrap();
    for r in RULES {
        let m = estimate_mu(&cf, &r.parse().unwrap()).unwrap();
        assert!((m.value - 1.5).abs() < 1e-12, "{r}: {}", m.value);
    }
    for m in ["dl", "hedges", "mp", "reml"] {
        let t = estimate_tau(cf.sufficient(), &m.parse().unwrap()).unwrap();
        assert_eq!(t.value, 0.0, "{m}");
    }
}

#[test]
fn mandel_paule_three_studies_closed_form() {
    // a fixed dataset with y₁²/t₁² + y₂²/t₂² ≥ 2
    let pairs = [(-1.2, 0.4), (0.9, 0.8), (2.5, 1.3)];
    let cf = transform(&group(&StudySet::from_pairs(&pairs).unwrap()).unwrap()).unwrap();
    let (y, t) = (cf.y(), cf.t2());
    assert!(y[0] * y[0] / t[0] + y[1] * y[1] / t[1] >= 2.0);
    let a = (y[0] * y[0] + y[1] * y[1]) / 4.0;
    let closed = a - (t[0] + t[1]) / 2.0
        + (a * a + ((t[0] - t[1]) / 2.0).powi(2) - (t[0] - t[1]) * (y[0] * y[0] - y[1] * y[1]) / 4.0).sqrt();
    let mp = mandel_paule(cf.sufficient()).unwrap().value;
    assert!((mp - closed).abs() < 1e-10 * (1.0 + closed));
    let (x, v) = split(&pairs);
    assert!((mp - raw_mp(&x, &v)).abs() < 1e-9);
}
