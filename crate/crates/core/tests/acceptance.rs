//! Acceptance suite: one PASS/FAIL line per criterion.

use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use remeta::canonical::{identity_report, transform, Design};
use remeta::model::{group, GroupedData, StudySet};
use remeta::numerics::{solve_bracketed, RootBracket};
use remeta::risk::p2::{a0, delta1_minimax_ratio, kappa, kappa_condition, p2_risk_at_zero, P2Rule};
use remeta::risk::{
    equal_uncertainty_risk, equal_uncertainty_rule_risk, minimax_bound, mc_mean, paired_risk_mc,
    r_risk_mc_many, large_tau_limit, unbiased_risk_check, EqualRule,
};
use remeta::tau::{
    dersimonian_laird, hedges, mandel_paule, moment_raw, reml, QuadraticFormSpec, REML_MAX_ITER, REML_TOL,
};
use remeta::mu::WeightRule;

type Check = std::result::Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

fn ensure(cond: bool, msg: impl Into<String>) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within_budget(start: Instant, budget: Duration) -> std::result::Result<(), String> {
    let spent = start.elapsed();
    ensure(spent < budget, format!("took {:.1}s, budget {}s", spent.as_secs_f64(), budget.as_secs()))
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn random_grouped(rng: &mut ChaCha8Rng, p: usize) -> GroupedData {
    let mut s2: Vec<f64> = (0..p).map(|_| 10f64.powf(rng.gen_range(-2.0..2.0))).collect();
    s2.sort_by(f64::total_cmp);
    s2.dedup();
    let p = s2.len();
    let nu: Vec<usize> = (0..p).map(|_| rng.gen_range(1..=4)).collect();
    let means = s2
        .iter()
        .zip(&nu)
        .map(|(s, &m)| 3.0 + (s / m as f64).sqrt() * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let within = s2
        .iter()
        .zip(&nu)
        .map(|(s, &m)| if m > 1 { s * rng.gen_range(0.2..3.0) } else { 0.0 })
        .collect();
    GroupedData { group_variances: s2, multiplicities: nu, group_means: means, within_variances: within }
}

fn c1_identities() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let p = rng.gen_range(2..=8);
        let g = random_grouped(&mut rng, p);
        if g.p() < 2 {
            continue;
        }
        let cf = transform(&g).map_err(err)?;
        let tau2 = cf.design().mean_variance() * 10f64.powf(rng.gen_range(-2.0..2.0));
        let r = identity_report(cf.design(), tau2)
            .max()
            .max(cf.quadratic_form_identity_check(tau2))
            .max(cf.weighted_mean_decomposition(tau2).residual());
        worst = worst.max(r);
    }
    ensure(worst <= 1e-9, format!("worst relative residual {worst:e}"))?;
    within_budget(start, Duration::from_secs(10))?;
    Ok(format!("worst residual {worst:.2e} in {:.2}s", start.elapsed().as_secs_f64()))
}

fn mp_three_closed_form(y: &[f64], t: &[f64]) -> f64 {
    let a = (y[0] * y[0] + y[1] * y[1]) / 4.0;
    let d = (t[0] - t[1]) / 2.0;
    a - (t[0] + t[1]) / 2.0 + (a * a + d * d - (t[0] - t[1]) * (y[0] * y[0] - y[1] * y[1]) / 4.0).sqrt()
}

fn c2_estimator_equalities() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for _ in 0..100 {
        let se = [rng.gen_range(0.1..2.0), rng.gen_range(0.1..2.0)];
        let x: [f64; 2] = [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)];
        let set = StudySet::from_pairs(&[(x[0], se[0]), (x[1], se[1])]).map_err(err)?;
        let cf = transform(&group(&set).map_err(err)?).map_err(err)?;
        let s = cf.sufficient();
        let target = (cf.y()[0].powi(2) - cf.t2()[0]).max(0.0);
        // two-study DerSimonian–Laird from raw data
        let oracle = (((x[0] - x[1]).powi(2) - se[0].powi(2) - se[1].powi(2)) / 2.0).max(0.0);
        ensure((target - oracle).abs() <= 1e-12 * (1.0 + oracle), format!("y² − t² {target} vs raw {oracle}"))?;
        let values = [
            dersimonian_laird(s).value,
            hedges(s).value,
            mandel_paule(s).map_err(err)?.value,
            reml(s, None, REML_TOL, REML_MAX_ITER).map_err(err)?.value,
        ];
        ensure(values.iter().all(|v| v.to_bits() == target.to_bits()), format!("n=p=2: {values:?} vs {target}"))?;
    }
    let mut matched = 0;
    while matched < 100 {
        let se: Vec<f64> = (0..3).map(|_| rng.gen_range(0.1..2.0)).collect();
        let pairs: Vec<(f64, f64)> = se.iter().map(|&s| (rng.gen_range(-4.0..4.0), s)).collect();
        let g = group(&StudySet::from_pairs(&pairs).map_err(err)?).map_err(err)?;
        if g.p() != 3 {
            continue;
        }
        let cf = transform(&g).map_err(err)?;
        let (y, t) = (cf.y(), cf.t2());
        if y[0] * y[0] / t[0] + y[1] * y[1] / t[1] < 2.0 {
            continue;
        }
        let mp = mandel_paule(cf.sufficient()).map_err(err)?.value;
        let closed = mp_three_closed_form(y, t);
        ensure((mp - closed).abs() <= 1e-10 * (1.0 + closed.abs()), format!("n=p=3 MP {mp} vs closed form {closed}"))?;
        matched += 1;
    }
    Ok("n=p=2 four-way bitwise equality; n=p=3 MP matches closed form on 100 datasets".into())
}

fn c3_moment_unbiased() -> Check {
    let start = Instant::now();
    let d = Design::new(&[0.2, 0.5, 1.0, 2.0, 4.0], &[2, 1, 3, 1, 2]).map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let mut worst: f64 = 0.0;
    for k in 0..5u64 {
        let q = (0..d.p() - 1).map(|_| rng.gen_range(0.1..3.0)).collect();
        let r = (0..d.p()).map(|_| rng.gen_range(0.1..3.0)).collect();
        let spec = QuadraticFormSpec::new(q, r).map_err(err)?;
        for (i, tau2) in [0.5, 2.0, 10.0].into_iter().enumerate() {
            let w = mc_mean(&d, tau2, 100_000, 300 + 10 * k + i as u64, |s| Ok(moment_raw(s, &spec))).map_err(err)?;
            let z = (w.mean - tau2) / w.std_error();
            worst = worst.max(z.abs());
            ensure(z.abs() <= 3.0, format!("spec {k}, tau2 {tau2}: mean {} se {}", w.mean, w.std_error()))?;
        }
    }
    within_budget(start, Duration::from_secs(30))?;
    Ok(format!("max |z| {worst:.2} over 15 cases in {:.2}s", start.elapsed().as_secs_f64()))
}

fn c4_sample_mean_constant() -> Check {
    let d = Design::new(&[0.3, 1.0, 2.0, 5.0], &[1, 2, 1, 3]).map_err(err)?;
    let rule = WeightRule::SampleMean.prepare(&d).map_err(err)?;
    let pts = r_risk_mc_many(&d, &[0.0, 1.0, 10.0, 100.0], &rule, 1_000_000, 44).map_err(err)?;
    let mut zs = Vec::new();
    for p in &pts {
        let z = (p.r_risk - 1.0) / p.mc_std_error;
        ensure(z.abs() <= 3.0, format!("tau2 {}: {} ± {}", p.tau2, p.r_risk, p.mc_std_error))?;
        zs.push(format!("{:.2}", z));
    }
    Ok(format!("z-scores [{}]", zs.join(", ")))
}

fn spread_design(n: usize) -> std::result::Result<Design, String> {
    let s2: Vec<f64> = (0..n).map(|i| 0.5 * 1.3f64.powi(i as i32)).collect();
    Design::new(&s2, &vec![1; n]).map_err(err)
}

fn c5_large_tau_limits() -> Check {
    let start = Instant::now();
    let mut out = Vec::new();
    for (k, n) in [5usize, 8, 15].into_iter().enumerate() {
        let d = spread_design(n)?;
        let nf = n as f64;
        let spec = QuadraticFormSpec::unit(&d);
        for (alpha, target, label) in [(nf - 3.0, 2.0 / (nf - 1.0), "stein"), (nf - 1.0, 2.0 / (nf - 3.0), "hedges")] {
            let lim = large_tau_limit(&d, &spec, &vec![alpha; n - 1], 1_000_000, 500 + k as u64).map_err(err)?;
            let z = (lim.value - target) / lim.std_error;
            ensure(z.abs() <= 3.0, format!("n={n} {label}: {} ± {} vs {target}", lim.value, lim.std_error))?;
            out.push(format!("n={n} {label} z={z:.2}"));
        }
    }
    within_budget(start, Duration::from_secs(60))?;
    Ok(format!("{} in {:.2}s", out.join(", "), start.elapsed().as_secs_f64()))
}

/// Variances `1 + ε(i − mid)`: the equal-uncertainty limit of the design family.
fn near_equal_design(n: usize, eps: f64) -> std::result::Result<Design, String> {
    let mid = (n as f64 - 1.0) / 2.0;
    let s2: Vec<f64> = (0..n).map(|i| 1.0 + eps * (i as f64 - mid)).collect();
    Design::new(&s2, &vec![1; n]).map_err(err)
}

fn c6_figure() -> Check {
    let grid = remeta::cli::parse_grid("0,0.01:50:200,10", 1.0).map_err(err)?;
    for n in [5usize, 15] {
        let nf = n as f64;
        let bound = minimax_bound(n).map_err(err)?;
        let dl = |t| equal_uncertainty_rule_risk(n, 1.0, t, EqualRule::Plugin { c: nf - 1.0 });
        let mh = |t| equal_uncertainty_rule_risk(n, 1.0, t, EqualRule::Plugin { c: nf - 3.0 });
        let mut diff_signs = Vec::new();
        for &t in &grid {
            let d1 = equal_uncertainty_risk(n, 1.0, t, nf - 3.0).map_err(err)?;
            ensure(d1 <= bound + 1e-9, format!("n={n}: delta1 risk {d1} above bound at tau2 {t}"))?;
            diff_signs.push((dl(t).map_err(err)? - mh(t).map_err(err)?).signum());
        }
        ensure(dl(0.0).map_err(err)? < mh(0.0).map_err(err)?, format!("n={n}: DL not below mH at 0"))?;
        ensure(mh(10.0).map_err(err)? < dl(10.0).map_err(err)?, format!("n={n}: mH not below DL at 10"))?;
        let changes = diff_signs.windows(2).filter(|w| w[0] != w[1] && w[0] != 0.0 && w[1] != 0.0).count();
        ensure(changes == 1, format!("n={n}: DL − mH changes sign {changes} times"))?;
    }
    // closed form against Monte Carlo on a nearly equal-variance design
    let n = 5;
    let d = near_equal_design(n, 1e-4)?;
    let rules = [
        ("dl", WeightRule::Plugin(remeta::tau::TauMethod::DerSimonianLaird), EqualRule::Plugin { c: 4.0 }),
        ("mh", WeightRule::ModifiedHedges, EqualRule::Plugin { c: 2.0 }),
        ("delta1", WeightRule::Delta1, EqualRule::Stein { alpha: 2.0 }),
    ];
    let pts = [0.0, 0.3, 1.0, 3.0, 10.0];
    let mut worst: f64 = 0.0;
    for (k, (name, rule, eq)) in rules.iter().enumerate() {
        let prepared = rule.prepare(&d).map_err(err)?;
        let scaled: Vec<f64> = pts.iter().map(|t| t * d.mean_variance()).collect();
        let mc = r_risk_mc_many(&d, &scaled, &prepared, 1_000_000, 600 + k as u64).map_err(err)?;
        for (p, &t) in mc.iter().zip(&pts) {
            let exact = equal_uncertainty_rule_risk(n, 1.0, t, *eq).map_err(err)?;
            let z = (p.r_risk - exact) / p.mc_std_error;
            worst = worst.max(z.abs());
            ensure(z.abs() <= 3.0, format!("{name} tau2 {t}: MC {} ± {} vs {exact}", p.r_risk, p.mc_std_error))?;
        }
    }
    Ok(format!("delta1 under bound, DL/mH cross once, MC max |z| {worst:.2}"))
}

fn c7_two_variance_numbers() -> Check {
    let a4 = a0(4).map_err(err)?;
    let a10 = a0(10).map_err(err)?;
    let (ratio, a) = delta1_minimax_ratio(1, 3).map_err(err)?;
    ensure((a4 - 0.637).abs() <= 0.002, format!("a0(4) = {a4}"))?;
    ensure((a10 - 0.798).abs() <= 0.002, format!("a0(10) = {a10}"))?;
    ensure((ratio - 0.173).abs() <= 0.002, format!("threshold ratio {ratio}"))?;
    ensure((a - 0.679).abs() <= 0.002, format!("threshold a {a}"))?;
    Ok(format!("a0(4)={a4:.4}, a0(10)={a10:.4}, ratio={ratio:.4}, a={a:.4}"))
}

fn c8_kappa() -> Check {
    let mut crossings = 0;
    for (nu1, nu2) in [(2usize, 3usize), (1, 4), (3, 3), (4, 2), (2, 5), (5, 2)] {
        let n = (nu1 + nu2) as f64;
        // r = s₁²/s₂² on either side of one; group order follows the variances
        let design = |r: f64| {
            if r < 1.0 {
                Design::new(&[r, 1.0], &[nu1, nu2])
            } else {
                Design::new(&[1.0, r], &[nu2, nu1])
            }
        };
        let excess = |r: f64| kappa(&design(r).unwrap()).unwrap() - (n - 1.0);
        let below: Vec<f64> = (0..=300).map(|k| 10f64.powf(-3.0 + 3.0 * k as f64 / 300.0) * 0.999).collect();
        let above: Vec<f64> = below.iter().rev().map(|r| 1.0 / r).collect();
        let windows: Vec<[f64; 2]> =
            below.windows(2).chain(above.windows(2)).map(|w| [w[0], w[1]]).collect();
        for w in windows {
            let (e0, e1) = (excess(w[0]), excess(w[1]));
            if e0.signum() == e1.signum() {
                continue;
            }
            let r0 = solve_bracketed(excess, RootBracket::new(w[0], w[1], 1e-14)).map_err(err)?;
            crossings += 1;
            let at = |r: f64| -> std::result::Result<f64, String> {
                let d = design(r).map_err(err)?;
                Ok(p2_risk_at_zero(&d, P2Rule::Delta0).map_err(err)?
                    - p2_risk_at_zero(&d, P2Rule::DerSimonianLaird).map_err(err)?)
            };
            ensure(at(r0)?.abs() <= 1e-6, format!("ν=({nu1},{nu2}): gap {} at threshold r={r0}", at(r0)?))?;
            for r in [r0 * 0.98, r0 * 1.02] {
                let below = excess(r) < 0.0;
                ensure(below == kappa_condition(nu1, nu2, r), format!("closed-form condition disagrees at r={r}"))?;
                let diff = at(r)?;
                ensure((diff < 0.0) == below, format!("ν=({nu1},{nu2}) r={r}: κ−(n−1)={} but R(δ0)−R(DL)={diff}", excess(r)))?;
            }
        }
    }
    ensure(crossings >= 3, format!("only {crossings} threshold crossings found"))?;
    // δ0 wins at zero but loses far out
    let d = Design::new(&[0.25, 1.0], &[1, 4]).map_err(err)?;
    let k = kappa(&d).map_err(err)?;
    ensure(k < d.n() as f64 - 1.0, format!("design has κ = {k}"))?;
    let at_zero = p2_risk_at_zero(&d, P2Rule::Delta0).map_err(err)? - p2_risk_at_zero(&d, P2Rule::DerSimonianLaird).map_err(err)?;
    ensure(at_zero < 0.0, format!("δ0 not better at zero: {at_zero}"))?;
    let d0 = WeightRule::Delta0.prepare(&d).map_err(err)?;
    let dl = WeightRule::Plugin(remeta::tau::TauMethod::DerSimonianLaird).prepare(&d).map_err(err)?;
    let far = paired_risk_mc(&d, 1e3 * d.mean_variance(), &d0, &dl, 1_000_000, 88).map_err(err)?;
    ensure(far.difference > 3.0 * far.difference_se, format!("far difference {} ± {}", far.difference, far.difference_se))?;
    let near = paired_risk_mc(&d, 0.0, &d0, &dl, 1_000_000, 89).map_err(err)?;
    ensure(
        (near.difference - at_zero).abs() <= 3.0 * near.difference_se,
        format!("MC at zero {} ± {} vs quadrature {at_zero}", near.difference, near.difference_se),
    )?;
    Ok(format!(
        "{crossings} thresholds; κ={k:.3}: R(δ0)−R(DL) = {at_zero:.4} at 0, {:.4} ± {:.4} far out",
        far.difference, far.difference_se
    ))
}

fn c9_unbiased_risk() -> Check {
    let d = Design::new(&[0.3, 0.7, 1.0, 1.8, 3.0, 6.0], &[1; 6]).map_err(err)?;
    let rule: WeightRule = "stein:q=invb,r=unit,alpha=3".parse().map_err(err)?;
    let mut out = Vec::new();
    for (k, tau2) in [0.0, d.mean_variance()].into_iter().enumerate() {
        let c = unbiased_risk_check(&d, tau2, &rule, 100_000, 900 + k as u64).map_err(err)?;
        ensure(c.estimate + 3.0 * c.estimate_se < 0.0, format!("tau2 {tau2}: estimate {} ± {}", c.estimate, c.estimate_se))?;
        ensure(
            c.difference.abs() <= 3.0 * c.difference_se,
            format!("tau2 {tau2}: estimate {} vs Var(δ)−Var(x̄) {} (diff {} ± {})", c.estimate, c.direct, c.difference, c.difference_se),
        )?;
        out.push(format!("tau2={tau2:.3}: {:.4} vs {:.4}", c.estimate, c.direct));
    }
    Ok(out.join("; "))
}

fn run_cli(args: &[&str]) -> std::result::Result<Vec<u8>, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_remeta")).args(args).output().map_err(err)?;
    ensure(out.status.success(), format!("{args:?} failed: {}", String::from_utf8_lossy(&out.stderr)))?;
    Ok(out.stdout)
}

fn c10_determinism() -> Check {
    let dir = tempfile::tempdir().map_err(err)?;
    let csv = dir.path().join("studies.csv");
    let set = remeta::model::simulate(&remeta::model::GenerativeConfig {
        mu: 0.4,
        tau2: 0.3,
        group_variances: vec![0.2, 0.5, 1.0, 2.0],
        multiplicities: vec![1, 2, 1, 2],
        seed: 7,
    })
    .map_err(err)?;
    let mut text = String::from("effect,std_error\n");
    for s in &set.studies {
        text.push_str(&format!("{},{}\n", s.effect, s.std_error));
    }
    std::fs::write(&csv, text).map_err(err)?;
    let csv = csv.to_str().unwrap();
    let mut checked = 0;
    for rule in ["delta1", "dl", "mp", "reml", "mh", "bayes:grid=1e-4:1e3:40"] {
        let base = ["risk-curve", "--design", "s2=0.2:0.5:1:2,nu=1:2:1:2", "--rule", rule, "--grid", "0,0.1:100:4"];
        let run = |threads: &str| {
            let mut a = vec!["--threads", threads];
            a.extend(base);
            a.extend(["--samples", "40000", "--seed", "2024"]);
            run_cli(&a)
        };
        let one = run("1")?;
        let again = run("1")?;
        let many = run("4")?;
        ensure(one == again, format!("{rule}: repeated runs differ"))?;
        ensure(one == many, format!("{rule}: 1 vs 4 workers differ"))?;
        checked += 1;
    }
    let json = ["risk-curve", "--input", csv, "--rule", "delta0", "--samples", "40000", "--seed", "5", "--format", "json"];
    ensure(run_cli(&json)? == run_cli(&[&["--threads", "3"][..], &json[..]].concat())?, "json curve differs")?;
    let analyze = ["analyze", "--input", csv];
    ensure(run_cli(&analyze)? == run_cli(&analyze)?, "analyze output differs")?;
    Ok(format!("{} outputs byte-identical across runs and worker counts", checked + 2))
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("identity suite", c1_identities),
        ("estimator equalities", c2_estimator_equalities),
        ("moment unbiasedness", c3_moment_unbiased),
        ("sample mean has constant risk", c4_sample_mean_constant),
        ("large-tau limits", c5_large_tau_limits),
        ("equal-uncertainty curves", c6_figure),
        ("two-variance constants", c7_two_variance_numbers),
        ("kappa criterion", c8_kappa),
        ("unbiased risk estimate", c9_unbiased_risk),
        ("determinism", c10_determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS {:>2} {name}: {detail} [{secs:.1}s]", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {detail} [{secs:.1}s]", i + 1);
            }
        }
    }
    println!("{} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
