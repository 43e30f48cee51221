//! Acceptance criteria, one test each. Every test prints a single
//! `criterion N: PASS|FAIL ...` line before asserting.

use std::io::Write;
use std::sync::OnceLock;

use metadescent::bounds::{descent_floor_raw, f_test, optimal_alpha_r_raw, Constants, FloorVerdict, TestErrorParams};
use metadescent::experiments::{
    audit_expectations, containment_audit, fig1_config, fig1_plan, identity_audit, run_sweep, sample_system,
    tightness_from_records, AlphaTRule, AuditSettings, Estimand, Formulas, SweepPlan, SweepRecord, FIG1_CURVES,
};
use metadescent::output::write_sweep_csv;
use metadescent::solvers::solve_min_l2;
use metadescent::task_gen::MetaConfig;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEED: u64 = 2023;

/// Written to the raw stderr handle so the line shows without `--nocapture`.
fn report(id: &str, pass: bool, detail: &str) {
    let line = format!("criterion {id}: {} {detail}\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
}

/// One record list per curve, in `FIG1_CURVES` order.
fn fig1_records() -> &'static Vec<Vec<SweepRecord>> {
    static CELL: OnceLock<Vec<Vec<SweepRecord>>> = OnceLock::new();
    CELL.get_or_init(|| {
        FIG1_CURVES
            .iter()
            .map(|&(nu, sigma)| run_sweep(&fig1_plan(nu, sigma, 100, SEED)).expect("fig1 sweep"))
            .collect()
    })
}

fn over(records: &[SweepRecord]) -> Vec<&SweepRecord> {
    records.iter().filter(|r| r.p() > r.cfg.rows()).collect()
}

#[test]
fn criterion_1_fig1_shape() {
    let curves = fig1_records();
    for recs in curves {
        for r in recs.iter() {
            assert!(r.skips * 20 <= r.summary.count + r.skips, "too many skips at p={}", r.p());
        }
    }

    // (a) the two large-(ν, σ) curves decrease up to one combined stderr per step.
    let mut ok_a = true;
    let mut worst_a = f64::NEG_INFINITY;
    for recs in &curves[..2] {
        let o = over(recs);
        for w in o.windows(2) {
            let (a, b) = (&w[0].summary, &w[1].summary);
            let slack = (a.stderr.powi(2) + b.stderr.powi(2)).sqrt();
            worst_a = worst_a.max((b.mean - a.mean) / slack);
            ok_a &= b.mean <= a.mean + slack;
        }
    }
    report("1a", ok_a, &format!("(60,0) and (20,2) decreasing over p > 30; worst rise = {worst_a:.2} stderr"));

    // (b) interior floors on the three small curves, ordered in (ν, σ).
    let mut floors = Vec::new();
    let mut ok_b = true;
    for recs in &curves[2..] {
        let o = over(recs);
        let k = (0..o.len())
            .min_by(|&i, &j| o[i].summary.mean.total_cmp(&o[j].summary.mean))
            .unwrap();
        let last = o.last().unwrap();
        let rise = last.summary.mean - o[k].summary.mean;
        ok_b &= k + 1 < o.len() && rise > last.summary.stderr + o[k].summary.stderr;
        floors.push((o[k].p(), o[k].summary.mean));
    }
    // curves[2..] runs from large to small (ν, σ); reverse to increasing.
    floors.reverse();
    for w in floors.windows(2) {
        ok_b &= w[0].0 <= w[1].0 && w[0].1 <= w[1].1;
    }
    report("1b", ok_b, &format!("floors (p, mean) for (0,0), (0.2,0.02), (2,0.2): {floors:?}"));

    // (c) the (60, 0) curve ends below where it starts.
    let big = &curves[0];
    let at = |p: usize| big.iter().find(|r| r.p() == p).unwrap().summary.mean;
    let ok_c = at(1000) < at(5);
    report("1c", ok_c, &format!("(60,0): mean at p=1000 = {:.3} vs p=5 = {:.3}", at(1000), at(5)));

    assert!(ok_a && ok_b && ok_c);
}

#[test]
fn criterion_2_expectation_audits() {
    let mut cfg = fig1_config(200, 20.0, 2.0);
    cfg.alpha_t = 0.02 / 200.0;
    let settings = AuditSettings::default();
    assert_eq!(settings.replicates, 2000);
    let table = audit_expectations(&cfg, &settings, &Formulas::default()).unwrap();
    let names: Vec<String> = table
        .rows
        .iter()
        .map(|r| format!("{}{}", r.name, if r.pass { "" } else { "(fail)" }))
        .collect();
    let zs: Vec<String> = table.rows.iter().filter(|r| r.z.is_finite()).map(|r| format!("{:.2}", r.z)).collect();
    let diag = table.row("xxxx_mean_diagonal").unwrap();
    let pass = table.all_pass() && diag.theoretical == 70.0 && table.rows.len() >= 8;
    report("2", pass, &format!("rows {names:?}; z = {zs:?}"));
    assert!(pass);
}

fn random_config(rng: &mut ChaCha8Rng, p_range: (usize, usize)) -> MetaConfig {
    let m = rng.random_range(2..=10);
    let n_v = rng.random_range(1..=4);
    let rows = m * n_v;
    let lo = p_range.0.max(rows + 1);
    let p = rng.random_range(lo..=p_range.1.max(lo));
    let mut cfg = fig1_config(p, rng.random_range(0.0..30.0), rng.random_range(0.0..3.0));
    cfg.m = m;
    cfg.n_v = n_v;
    cfg.n_t = rng.random_range(10..=80);
    cfg.alpha_t = rng.random_range(0.0..0.05);
    cfg
}

#[test]
fn criterion_3_identities() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = [0.0f64; 4];
    let mut pass = true;
    for k in 0..100u64 {
        let cfg = random_config(&mut rng, (1, 150));
        let rows = identity_audit(&cfg, 1, SEED + k).unwrap();
        for (w, r) in worst.iter_mut().zip(&rows) {
            *w = w.max(r.empirical);
            pass &= r.pass;
        }
    }
    report("3", pass, &format!("worst excess over tolerance [pythagoras, interpolation, dominance, sandwich] = {worst:?}"));
    assert!(pass);
}

#[test]
fn criterion_4_svd_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for k in 0..100u64 {
        let p = rng.random_range(31..=120);
        let cfg = fig1_config(p, rng.random_range(0.0..30.0), rng.random_range(0.0..3.0));
        let r = sample_system(&cfg, SEED, k).unwrap();
        let ours = solve_min_l2(&r.system).unwrap().w_hat;
        let b: DMatrix<f64> = r.system.b().clone();
        let svd = b.svd(true, true);
        let oracle = svd.solve(r.system.gamma(), 1e-12).unwrap();
        worst = worst.max((&ours - &oracle).norm() / oracle.norm());
    }
    let pass = worst <= 1e-8;
    report("4", pass, &format!("max relative gap to the SVD pseudoinverse over 100 instances, p in [31, 120] = {worst:.3e}"));
    assert!(pass);
}

#[test]
fn criterion_5_optimal_step() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let step = 1e-4;
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let zeta = rng.random_range(0.0..200.0);
        let sigma_r = rng.random_range(0.0..5.0);
        let nu_r = rng.random_range(0.0..5.0);
        let p = rng.random_range(1..=1000);
        let n_r = rng.random_range(1..=100);
        let base = TestErrorParams {
            zeta,
            p,
            n_r,
            alpha_r: 0.0,
            nu_r,
            sigma_r,
        };
        let (best, _) = (0..=10_000)
            .map(|k| k as f64 * step)
            .map(|a| (a, f_test(&base.with_alpha_r(a))))
            .fold((0.0, f64::INFINITY), |acc, x| if x.1 < acc.1 { x } else { acc });
        let closed = optimal_alpha_r_raw(zeta, p, n_r, nu_r, sigma_r).alpha_r;
        worst = worst.max((best - closed).abs() / step);
    }
    let mut exact = true;
    for (p, n_r) in [(1, 1), (30, 10), (999, 7), (200, 100)] {
        let a = optimal_alpha_r_raw(12.5, p, n_r, 1.5, 0.0).alpha_r;
        exact &= a == n_r as f64 / (n_r as f64 + p as f64 + 1.0);
    }
    let pass = worst <= 1.0 && exact;
    report("5", pass, &format!("max |grid - closed form| = {worst:.3} grid steps over 50 configs; sigma_r = 0 exact: {exact}"));
    assert!(pass);
}

#[test]
fn criterion_6_descent_floor() {
    let c4 = Constants::default().c4;
    let curve = |mnv: f64, w0: f64, bd: f64, p: f64| (p - mnv) / p * w0 + bd / (p - c4 * mnv);
    let mut cases = vec![(30.0, 100.0, 30.0 * 100.0 * 0.04039880796), (30.0, 100.0, 30.0 * 100.0 * 0.00040398808)];
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..20 {
        let mnv = rng.random_range(5..=60) as f64;
        let w0 = rng.random_range(1.0..200.0);
        let g: f64 = rng.random_range(1e-3..0.9);
        cases.push((mnv, w0, g * mnv * w0));
    }
    let h = 1e-3;
    let mut worst_loc = 0.0f64;
    let mut worst_val = 0.0f64;
    let mut all_floor = true;
    for &(mnv, w0, bd) in &cases {
        let FloorVerdict::Floor { p_star, floor_value, .. } = descent_floor_raw(mnv, w0, c4, bd) else {
            all_floor = false;
            continue;
        };
        let start = c4 * mnv + h;
        let n = ((4.0 * p_star - start) / h) as usize;
        let (arg, _) = (0..=n)
            .map(|k| start + k as f64 * h)
            .map(|p| (p, curve(mnv, w0, bd, p)))
            .fold((f64::NAN, f64::INFINITY), |acc, x| if x.1 < acc.1 { x } else { acc });
        let g = bd / (mnv * w0);
        let p_oracle = c4 * mnv / (1.0 - g.sqrt());
        worst_loc = worst_loc.max((arg - p_star).abs() / h).max((p_oracle - p_star).abs() / h);
        let v = curve(mnv, w0, bd, p_star);
        worst_val = worst_val.max((floor_value - v).abs() / v.abs());
    }
    let pass = all_floor && worst_loc <= 1.0 && worst_val <= 1e-9;
    report(
        "6",
        pass,
        &format!("{} cases; max location gap = {worst_loc:.3} grid steps (h = {h}); max value rel gap = {worst_val:.2e}", cases.len()),
    );
    assert!(pass);
}

#[test]
fn criterion_7_tightness() {
    let c = Constants::default();
    let rows: Vec<_> = fig1_records().iter().flat_map(|r| tightness_from_records(r, &c)).collect();
    let bad: Vec<_> = rows.iter().filter(|r| !(0.5..=2.0).contains(&r.ratio)).map(|r| (r.nu, r.sigma, r.p, r.ratio)).collect();
    let (lo, hi) = rows.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), r| (a.min(r.ratio), b.max(r.ratio)));
    let pass = bad.is_empty() && rows.len() == 5 * 25;
    report("7", pass, &format!("{} points, simulated/approx in [{lo:.3}, {hi:.3}]; outside [0.5, 2]: {bad:?}", rows.len()));
    assert!(pass);
}

#[test]
fn criterion_8_containment() {
    let mut stated = fig1_config(300, 20.0, 2.0);
    stated.m = 2;
    stated.n_v = 2;
    stated.n_t = 280;
    stated.alpha_t = 0.02 / 300.0;
    let a = containment_audit(&stated, 200, SEED).unwrap();

    let mut desk = stated.clone();
    desk.p = 500;
    desk.n_t = 600;
    desk.alpha_t = 0.02 / 500.0;
    let b = containment_audit(&desk, 200, SEED).unwrap();

    let pass = a.conditional_violations == 0 && b.conditional_violations == 0 && b.premises_held > 0;
    report(
        "8",
        pass,
        &format!(
            "p=300,n_t=280: within b_w {:.3} (b_w = {}), 1-eta = {:.2}, premises held {}; \
             p=500,n_t=600: within b_w {:.3} (b_w = {:.1}), 1-eta = {:.2}, premises held {}, violations {}, max E[err|X,V]/b_w = {:.3}",
            a.fraction_within_b_w,
            a.bounds.b_w,
            a.one_minus_eta,
            a.premises_held,
            b.fraction_within_b_w,
            b.bounds.b_w,
            b.one_minus_eta,
            b.premises_held,
            b.conditional_violations,
            b.max_conditional_ratio
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_9_determinism() {
    let csv = |threads: usize| {
        let plan = SweepPlan {
            base: fig1_config(20, 20.0, 2.0),
            p_grid: vec![10, 20, 40, 60, 120],
            replicates: 100,
            seed: SEED,
            estimands: Estimand::ALL.to_vec(),
            alpha_t_rule: AlphaTRule::Scaled { c: 0.02 },
            threads,
        };
        let mut buf = Vec::new();
        write_sweep_csv(&mut buf, &run_sweep(&plan).unwrap()).unwrap();
        buf
    };
    let one = csv(1);
    let pass = one == csv(8) && one == csv(1) && one == csv(3);
    report("9", pass, &format!("sweep CSV ({} bytes) identical across reruns and 1, 3, 8 workers", one.len()));
    assert!(pass);
}
