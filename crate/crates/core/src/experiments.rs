//! Seeded Monte-Carlo replicates, sweeps over `p`, expectation audits and the
//! simulated-versus-approximate tightness table.

use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bounds::{
    approx_bound, bound_stack, expected_delta_gamma_sq, expected_term1, f_test, optimal_alpha_r, xxxx_identity,
    BoundReport, Constants, TestErrorParams,
};
use crate::error::{Error, Result};
use crate::linalg::{eig_extremes, Cholesky};
use crate::maml::{adapt_inner, adapt_test, build_meta_system, meta_loss, test_error, MetaSystem};
use crate::rng::{standard_normal_matrix, standard_normal_vector, RngStream, Role};
use crate::solvers::{solve_ideal, solve_min_l2, solve_underparameterized};
use crate::stats::Summary;
use crate::task_gen::{sample_task_batch, sample_test_task, sample_truths, DiversitySpec, MetaConfig, TaskBatch};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimand {
    /// `‖ŵ − w0‖²` of the regime-appropriate minimizer: min-ℓ2 above the
    /// interpolation threshold, least squares at or below it.
    ModelErrorL2,
    ModelErrorIdeal,
    ModelErrorUnderparam,
    Term1,
    Term2,
    /// `E_x (xᵀw_r − xᵀŵ^r)² = ‖w_r − ŵ^r‖²` after adapting on a fresh test task.
    TestError,
    /// Smallest nonzero eigenvalue of `BBᵀ`.
    EigMin,
    EigMax,
    DeltaGammaSq,
    /// Meta loss `‖γ − Bŵ‖²/(2 m n_v)` at the solution.
    MetaLossResidual,
}

impl Estimand {
    pub const ALL: [Estimand; 10] = [
        Estimand::ModelErrorL2,
        Estimand::ModelErrorIdeal,
        Estimand::ModelErrorUnderparam,
        Estimand::Term1,
        Estimand::Term2,
        Estimand::TestError,
        Estimand::EigMin,
        Estimand::EigMax,
        Estimand::DeltaGammaSq,
        Estimand::MetaLossResidual,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Estimand::ModelErrorL2 => "model_error_l2",
            Estimand::ModelErrorIdeal => "model_error_ideal",
            Estimand::ModelErrorUnderparam => "model_error_underparam",
            Estimand::Term1 => "term1",
            Estimand::Term2 => "term2",
            Estimand::TestError => "test_error",
            Estimand::EigMin => "eig_min",
            Estimand::EigMax => "eig_max",
            Estimand::DeltaGammaSq => "delta_gamma_sq",
            Estimand::MetaLossResidual => "meta_loss_residual",
        }
    }

    fn index(self) -> usize {
        Self::ALL.iter().position(|&e| e == self).expect("listed")
    }
}

impl FromStr for Estimand {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|e| e.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown estimand {s:?}")))
    }
}

/// How `α_t` follows `p` along a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum AlphaTRule {
    /// Keep the base configuration's `α_t`.
    Fixed,
    /// `α_t = c / p`.
    Scaled { c: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPlan {
    pub base: MetaConfig,
    pub p_grid: Vec<usize>,
    pub replicates: usize,
    pub seed: u64,
    pub estimands: Vec<Estimand>,
    pub alpha_t_rule: AlphaTRule,
    /// Worker count, 0 for the rayon default.
    pub threads: usize,
}

impl SweepPlan {
    pub fn validate(&self) -> Result<()> {
        if self.replicates == 0 {
            return Err(Error::Config("replicates must be at least 1".into()));
        }
        if self.p_grid.is_empty() {
            return Err(Error::Config("p_grid is empty".into()));
        }
        if self.estimands.is_empty() {
            return Err(Error::Config("no estimands requested".into()));
        }
        for &p in &self.p_grid {
            if p < self.base.s {
                return Err(Error::Config(format!("p_grid value {p} is below s = {}", self.base.s)));
            }
            self.config_at(p).validate()?;
        }
        Ok(())
    }

    /// Base configuration at feature count `p` with the step-size rule applied.
    pub fn config_at(&self, p: usize) -> MetaConfig {
        let mut cfg = self.base.with_p(p);
        if let AlphaTRule::Scaled { c } = self.alpha_t_rule {
            cfg.alpha_t = c / p as f64;
        }
        cfg
    }
}

/// All estimands of one replicate; `None` where undefined in the regime.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReplicateValues {
    values: [Option<f64>; 10],
}

impl ReplicateValues {
    pub fn get(&self, e: Estimand) -> Option<f64> {
        self.values[e.index()]
    }

    fn set(&mut self, e: Estimand, v: f64) {
        self.values[e.index()] = Some(v);
    }
}

/// Training data, meta system and the stream a replicate was drawn from.
pub struct ReplicateSystem {
    pub stream: RngStream,
    pub batch: TaskBatch,
    pub system: MetaSystem,
}

/// Sample truths and the training batch of replicate `rep`, and assemble `(B, γ)`.
pub fn sample_system(cfg: &MetaConfig, seed: u64, rep: u64) -> Result<ReplicateSystem> {
    let stream = RngStream::new(seed, rep, 0, Role::TruthDeviation);
    let truths = sample_truths(cfg, stream)?;
    let batch = sample_task_batch(cfg, &truths.tasks, stream)?;
    let system = build_meta_system(&batch, cfg, &cfg.w0())?;
    Ok(ReplicateSystem { stream, batch, system })
}

/// Run one replicate. Deterministic in `(cfg, seed, rep)`.
pub fn run_replicate(cfg: &MetaConfig, seed: u64, rep: u64) -> Result<ReplicateValues> {
    let ReplicateSystem { stream, system: sys, .. } = sample_system(cfg, seed, rep)?;
    let mut out = ReplicateValues { values: [None; 10] };
    out.set(Estimand::DeltaGammaSq, sys.delta_gamma().norm_squared());
    let w_hat = if cfg.p > sys.rows() {
        let l2 = solve_min_l2(&sys)?;
        let ideal = solve_ideal(&sys, sys.w0())?;
        out.set(Estimand::ModelErrorL2, l2.model_error);
        out.set(Estimand::ModelErrorIdeal, ideal.model_error);
        out.set(Estimand::Term1, l2.term1.expect("interpolating path"));
        out.set(Estimand::Term2, l2.term2.expect("interpolating path"));
        out.set(Estimand::EigMin, l2.eig_min);
        out.set(Estimand::EigMax, l2.eig_max);
        l2.w_hat
    } else {
        let ls = solve_underparameterized(&sys)?;
        out.set(Estimand::ModelErrorL2, ls.model_error);
        out.set(Estimand::ModelErrorUnderparam, ls.model_error);
        // nonzero spectrum of BBᵀ equals that of BᵀB
        out.set(Estimand::EigMin, ls.eig_min);
        out.set(Estimand::EigMax, ls.eig_max);
        ls.w_hat
    };
    out.set(Estimand::MetaLossResidual, meta_loss(&sys, &w_hat));
    let test = sample_test_task(cfg, sys.w0(), stream)?;
    let adapted = adapt_test(&w_hat, &test, cfg);
    out.set(Estimand::TestError, (&test.w_r - &adapted.w_adapted).norm_squared());
    Ok(out)
}

/// Sweep output for one `(p, estimand)` pair.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRecord {
    pub cfg: MetaConfig,
    pub estimand: Estimand,
    pub summary: Summary,
    /// Replicates that failed with a degenerate system.
    pub skips: usize,
    pub skip_reasons: Vec<String>,
    pub bounds: BoundReport,
    pub flags: Vec<String>,
}

impl SweepRecord {
    pub fn p(&self) -> usize {
        self.cfg.p
    }
}

fn pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))
}

/// Run every replicate of every grid point. Rows come out in grid order, then
/// in the plan's estimand order.
pub fn run_sweep(plan: &SweepPlan) -> Result<Vec<SweepRecord>> {
    plan.validate()?;
    let pool = pool(plan.threads)?;
    let mut records = Vec::new();
    for &p in &plan.p_grid {
        let cfg = plan.config_at(p);
        let results: Vec<Result<ReplicateValues>> = pool.install(|| {
            (0..plan.replicates as u64)
                .into_par_iter()
                .map(|rep| run_replicate(&cfg, plan.seed, rep))
                .collect()
        });
        records.extend(aggregate(&cfg, results, &plan.estimands)?);
    }
    Ok(records)
}

/// Summarize one grid point. Degenerate replicates are counted and skipped;
/// any other error aborts.
pub fn aggregate(cfg: &MetaConfig, results: Vec<Result<ReplicateValues>>, estimands: &[Estimand]) -> Result<Vec<SweepRecord>> {
    let total = results.len();
    let mut ok = Vec::with_capacity(total);
    let mut reasons: Vec<String> = Vec::new();
    for r in results {
        match r {
            Ok(v) => ok.push(v),
            Err(e @ Error::Degenerate { .. }) => {
                let msg = e.to_string();
                if !reasons.contains(&msg) {
                    reasons.push(msg);
                }
            }
            Err(e) => return Err(e),
        }
    }
    let skips = total - ok.len();
    let bounds = bound_stack(cfg);
    let mut flags: Vec<String> = bounds.flags.tokens().iter().map(|s| s.to_string()).collect();
    if cfg.p <= cfg.rows() {
        flags.push("least_squares".into());
    }
    if ok.is_empty() {
        flags.push("invalid".into());
    }
    Ok(estimands
        .iter()
        .map(|&estimand| {
            let values: Vec<f64> = ok.iter().filter_map(|v| v.get(estimand)).collect();
            SweepRecord {
                cfg: cfg.clone(),
                estimand,
                summary: Summary::of(&values),
                skips,
                skip_reasons: reasons.clone(),
                bounds: bounds.clone(),
                flags: flags.clone(),
            }
        })
        .collect())
}

/// `(ν, σ)` of the five curves, from large to small.
pub const FIG1_CURVES: [(f64, f64); 5] = [(60.0, 0.0), (20.0, 2.0), (2.0, 0.2), (0.2, 0.02), (0.0, 0.0)];

/// Feature counts of the reproduction grid. The band `|p − m n_v| ≤ 3` is
/// left out: the expected min-ℓ2 error is infinite for `|p − 30| ≤ 1` and its
/// variance for `|p − 30| ≤ 3`, so sample means there do not settle.
pub const FIG1_P_GRID: [usize; 35] = [
    5, 8, 10, 12, 15, 18, 20, 22, 24, 26, 34, 36, 38, 40, 42, 45, 48, 50, 55, 60, 70, 80, 90, 100, 120, 150, 200, 250,
    300, 400, 500, 600, 700, 800, 1000,
];

/// `s = 5, m = 10, n_t = 50, n_v = 3, ‖w0‖² = 100`, test task like the training ones.
pub fn fig1_config(p: usize, nu: f64, sigma: f64) -> MetaConfig {
    let s = 5;
    MetaConfig {
        p,
        s,
        m: 10,
        n_t: 50,
        n_v: 3,
        n_r: 10,
        sigma,
        sigma_r: sigma,
        alpha_t: 0.02 / p as f64,
        alpha_r: None,
        w0_s: vec![(100.0 / s as f64).sqrt(); s],
        diversity: DiversitySpec::Uniform(nu),
        nu_r: nu,
    }
}

/// Model-error sweep for one curve. All curves share the seed, so replicate
/// `k` sees the same features and standardized fluctuations on every curve.
pub fn fig1_plan(nu: f64, sigma: f64, replicates: usize, seed: u64) -> SweepPlan {
    SweepPlan {
        base: fig1_config(FIG1_P_GRID[0], nu, sigma),
        p_grid: FIG1_P_GRID.to_vec(),
        replicates,
        seed,
        estimands: vec![Estimand::ModelErrorL2],
        alpha_t_rule: AlphaTRule::Scaled { c: 0.02 },
        threads: 0,
    }
}

/// Closed forms checked by [`audit_expectations`]. Swappable so that a
/// corrupted formula can be fed through the same audit.
#[derive(Clone, Copy)]
pub struct Formulas {
    pub term1: fn(&MetaConfig) -> Option<f64>,
    pub delta_gamma_sq: fn(&MetaConfig) -> f64,
    pub f_test: fn(&TestErrorParams) -> f64,
    pub xxxx: fn(usize, usize) -> DMatrix<f64>,
}

impl Default for Formulas {
    fn default() -> Self {
        Self {
            term1: expected_term1,
            delta_gamma_sq: expected_delta_gamma_sq,
            f_test,
            xxxx: xxxx_identity,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditRow {
    pub name: String,
    pub empirical: f64,
    pub theoretical: f64,
    pub stderr: f64,
    pub z: f64,
    /// Relative-tolerance rows carry the tolerance instead of a z-score test.
    pub rel_tolerance: Option<f64>,
    pub pass: bool,
}

impl AuditRow {
    fn z_row(name: impl Into<String>, s: &Summary, theoretical: f64, z_limit: f64) -> Self {
        let z = s.z(theoretical);
        Self {
            name: name.into(),
            empirical: s.mean,
            theoretical,
            stderr: s.stderr,
            z,
            rel_tolerance: None,
            pass: z.is_finite() && z.abs() <= z_limit,
        }
    }

    fn exact_row(name: impl Into<String>, empirical: f64, theoretical: f64) -> Self {
        Self {
            name: name.into(),
            empirical,
            theoretical,
            stderr: 0.0,
            z: if empirical == theoretical { 0.0 } else { f64::INFINITY },
            rel_tolerance: Some(0.0),
            pass: empirical == theoretical,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditTable {
    pub rows: Vec<AuditRow>,
}

impl AuditTable {
    pub fn all_pass(&self) -> bool {
        self.rows.iter().all(|r| r.pass)
    }

    pub fn row(&self, name: &str) -> Option<&AuditRow> {
        self.rows.iter().find(|r| r.name == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AuditSettings {
    pub replicates: usize,
    pub seed: u64,
    pub z_limit: f64,
    /// Moment-matrix audit sizes and draw count.
    pub xxxx_n: usize,
    pub xxxx_p: usize,
    pub xxxx_draws: usize,
    /// Relative tolerance of the moment-matrix audit.
    pub xxxx_tolerance: f64,
    pub threads: usize,
}

impl Default for AuditSettings {
    fn default() -> Self {
        Self {
            replicates: 2000,
            seed: 2023,
            z_limit: 4.0,
            xxxx_n: 5,
            xxxx_p: 8,
            xxxx_draws: 100_000,
            xxxx_tolerance: 0.02,
            threads: 0,
        }
    }
}

/// Term 1, `‖δγ‖²` and test error (at three `α_r`) against their closed forms,
/// plus the fourth-moment matrix identity.
///
/// The test-error rows hold `ŵ` fixed at the min-ℓ2 solution of an extra
/// replicate and average the squared error over fresh `(w_r, X_r, ε_r, x)`.
pub fn audit_expectations(cfg: &MetaConfig, settings: &AuditSettings, formulas: &Formulas) -> Result<AuditTable> {
    cfg.validate()?;
    if cfg.p <= cfg.rows() {
        return Err(Error::Regime(format!(
            "audit needs p > m n_v, got p = {} and m n_v = {}",
            cfg.p,
            cfg.rows()
        )));
    }
    let pool = pool(settings.threads)?;
    let n = settings.replicates as u64;
    let per_rep: Vec<Result<(f64, f64)>> = pool.install(|| {
        (0..n)
            .into_par_iter()
            .map(|rep| {
                let r = sample_system(cfg, settings.seed, rep)?;
                let l2 = solve_min_l2(&r.system)?;
                Ok((l2.term1.expect("interpolating path"), r.system.delta_gamma().norm_squared()))
            })
            .collect()
    });
    let per_rep = per_rep.into_iter().collect::<Result<Vec<_>>>()?;
    let term1: Vec<f64> = per_rep.iter().map(|v| v.0).collect();
    let dg: Vec<f64> = per_rep.iter().map(|v| v.1).collect();

    let mut rows = Vec::new();
    let t1 = (formulas.term1)(cfg).expect("p > m n_v");
    rows.push(AuditRow::z_row("term1", &Summary::of(&term1), t1, settings.z_limit));
    let dg_target = (formulas.delta_gamma_sq)(cfg);
    if cfg.sigma == 0.0 && cfg.nu() == 0.0 {
        let total: f64 = dg.iter().sum();
        rows.push(AuditRow::exact_row("delta_gamma_sq", total, dg_target));
    } else {
        rows.push(AuditRow::z_row("delta_gamma_sq", &Summary::of(&dg), dg_target, settings.z_limit));
    }

    // fixed meta parameter from a replicate outside the audited range
    let fixed = sample_system(cfg, settings.seed, u64::MAX)?;
    let w_hat = solve_min_l2(&fixed.system)?.w_hat;
    let zeta = (&w_hat - cfg.w0()).norm_squared();
    let practical = cfg.n_r as f64 / (cfg.n_r + cfg.p + 1) as f64;
    let optimal = optimal_alpha_r(zeta, cfg).alpha_r;
    let steps = [("test_error_alpha_zero", 0.0), ("test_error_alpha_practical", practical), ("test_error_alpha_optimal", optimal)];
    let test_draws: Vec<Result<[f64; 3]>> = pool.install(|| {
        (0..n)
            .into_par_iter()
            .map(|rep| {
                let stream = RngStream::new(settings.seed, rep, 1, Role::TestTruthDeviation);
                let test = sample_test_task(cfg, &cfg.w0(), stream)?;
                let x = standard_normal_vector(&mut stream.with_task(1, Role::TestInput).rng(), cfg.p);
                let mut out = [0.0; 3];
                for (k, &(_, a)) in steps.iter().enumerate() {
                    let w = adapt_inner(&w_hat, &test.x_r, &test.y_r, a).w_adapted;
                    out[k] = test_error(&x, &test.w_r, &w);
                }
                Ok(out)
            })
            .collect()
    });
    let test_draws = test_draws.into_iter().collect::<Result<Vec<_>>>()?;
    for (k, &(name, a)) in steps.iter().enumerate() {
        let vals: Vec<f64> = test_draws.iter().map(|v| v[k]).collect();
        let target = (formulas.f_test)(&TestErrorParams::from_config(cfg, zeta).with_alpha_r(a));
        rows.push(AuditRow::z_row(name, &Summary::of(&vals), target, settings.z_limit));
    }

    rows.extend(audit_xxxx(settings, formulas, &pool));
    Ok(AuditTable { rows })
}

fn audit_xxxx(settings: &AuditSettings, formulas: &Formulas, pool: &rayon::ThreadPool) -> Vec<AuditRow> {
    let (n, p, draws) = (settings.xxxx_n, settings.xxxx_p, settings.xxxx_draws);
    const CHUNK: usize = 1000;
    let chunks = draws.div_ceil(CHUNK);
    // per chunk: matrix sum and per-draw diagonal means
    let parts: Vec<(DMatrix<f64>, Vec<f64>)> = pool.install(|| {
        (0..chunks)
            .into_par_iter()
            .map(|c| {
                let mut rng = RngStream::new(settings.seed, c as u64, 0, Role::Audit).rng();
                let mut acc = DMatrix::<f64>::zeros(p, p);
                let mut diag = Vec::new();
                for _ in 0..CHUNK.min(draws - c * CHUNK) {
                    let x = standard_normal_matrix(&mut rng, p, n);
                    let g = &x * x.transpose();
                    let g2 = &g * &g;
                    diag.push(g2.trace() / p as f64);
                    acc += g2;
                }
                (acc, diag)
            })
            .collect()
    });
    let mut total = DMatrix::<f64>::zeros(p, p);
    let mut diag = Vec::with_capacity(draws);
    for (m, d) in parts {
        total += m;
        diag.extend(d);
    }
    let mean = total / draws as f64;
    let target = (formulas.xxxx)(n, p);
    let scale = target[(0, 0)];
    let tol = settings.xxxx_tolerance;
    let mut diag_dev = 0.0f64;
    let mut off_dev = 0.0f64;
    for i in 0..p {
        for j in 0..p {
            let d = (mean[(i, j)] - target[(i, j)]).abs();
            if i == j {
                diag_dev = diag_dev.max(d / target[(i, i)]);
            } else {
                off_dev = off_dev.max(d);
            }
        }
    }
    let trace_summary = Summary::of(&diag);
    vec![
        AuditRow::z_row("xxxx_mean_diagonal", &trace_summary, target.trace() / p as f64, settings.z_limit),
        AuditRow {
            name: "xxxx_max_diagonal_rel_dev".into(),
            empirical: diag_dev,
            theoretical: 0.0,
            stderr: 0.0,
            z: f64::NAN,
            rel_tolerance: Some(tol),
            pass: diag_dev <= tol,
        },
        AuditRow {
            name: "xxxx_max_offdiagonal_rel".into(),
            empirical: off_dev / scale,
            theoretical: 0.0,
            stderr: 0.0,
            z: f64::NAN,
            rel_tolerance: Some(tol),
            pass: off_dev <= tol * scale,
        },
    ]
}

/// Instance-wise algebraic checks on `instances` random systems: the Term 1 /
/// Term 2 split, interpolation, ideal dominance and the Term 2 eigenvalue
/// sandwich. Each row reports the worst violation found (0 when none).
pub fn identity_audit(cfg: &MetaConfig, instances: usize, seed: u64) -> Result<Vec<AuditRow>> {
    cfg.validate()?;
    let per: Vec<Result<[f64; 4]>> = (0..instances as u64)
        .into_par_iter()
        .map(|rep| {
            let r = sample_system(cfg, seed, rep)?;
            let sys = &r.system;
            let l2 = solve_min_l2(sys)?;
            let ideal = solve_ideal(sys, sys.w0())?;
            let (t1, t2) = (l2.term1.expect("interpolating path"), l2.term2.expect("interpolating path"));
            let pyth = (t1 + t2 - l2.model_error).abs() - 1e-8 * l2.model_error;
            let interp = l2.interpolation_residual - 1e-8 * sys.gamma().norm();
            let dominance = ideal.model_error - l2.model_error;
            let dg = sys.delta_gamma().norm_squared();
            let slack = 1e-10 * t2.max(f64::MIN_POSITIVE);
            let sandwich = (dg / l2.eig_max - t2 - slack).max(t2 - dg / l2.eig_min - slack);
            Ok([pyth, interp, dominance, sandwich])
        })
        .collect();
    let per = per.into_iter().collect::<Result<Vec<_>>>()?;
    let names = ["identity_pythagoras", "identity_interpolation", "identity_ideal_dominance", "identity_term2_sandwich"];
    Ok(names
        .iter()
        .enumerate()
        .map(|(k, name)| {
            let worst = per.iter().map(|v| v[k]).fold(f64::NEG_INFINITY, f64::max).max(0.0);
            AuditRow {
                name: name.to_string(),
                empirical: worst,
                theoretical: 0.0,
                stderr: 0.0,
                z: f64::NAN,
                rel_tolerance: Some(0.0),
                pass: worst == 0.0,
            }
        })
        .collect())
}

/// Simulated mean model error next to the simplified bound at one `p`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TightnessRow {
    pub p: usize,
    pub nu: f64,
    pub sigma: f64,
    pub simulated: f64,
    pub stderr: f64,
    pub approx: f64,
    /// `simulated / approx`; NaN when both are zero.
    pub ratio: f64,
}

/// Pair model-error sweep rows with the simplified bound, keeping only the
/// overparameterized points.
pub fn tightness_from_records(records: &[SweepRecord], c: &Constants) -> Vec<TightnessRow> {
    records
        .iter()
        .filter(|r| r.estimand == Estimand::ModelErrorL2 && r.p() > r.cfg.rows())
        .map(|r| {
            let approx = approx_bound(&r.cfg, c).total();
            TightnessRow {
                p: r.p(),
                nu: r.cfg.nu(),
                sigma: r.cfg.sigma,
                simulated: r.summary.mean,
                stderr: r.summary.stderr,
                approx,
                ratio: r.summary.mean / approx,
            }
        })
        .collect()
}

pub fn tightness_comparison(plans: &[SweepPlan], c: &Constants) -> Result<Vec<TightnessRow>> {
    let mut out = Vec::new();
    for plan in plans {
        let plan = SweepPlan {
            estimands: vec![Estimand::ModelErrorL2],
            ..plan.clone()
        };
        out.extend(tightness_from_records(&run_sweep(&plan)?, c));
    }
    Ok(out)
}

/// `E[‖ŵ_ℓ2 − w0‖² | X, V] = Term 1 + tr((BBᵀ)⁻¹ Cov(δγ | X, V))`.
///
/// Given the features, `δγ_i = B_i δ_i + ε_v,i − (α_t/n_t) V_iᵀX_i ε_i` with
/// independent pieces, so the covariance is block diagonal over tasks.
/// Returns `(conditional error, Term 1, tr Cov(δγ))`.
pub fn conditional_model_error(cfg: &MetaConfig, batch: &TaskBatch, sys: &MetaSystem) -> Result<(f64, f64, f64)> {
    let (term1, _) = crate::solvers::decompose_model_error(sys, sys.w0())?;
    let rows = sys.rows();
    let n_v = cfg.n_v;
    let c = cfg.alpha_t / cfg.n_t as f64;
    let s2 = cfg.sigma * cfg.sigma;
    let mut cov = DMatrix::<f64>::zeros(rows, rows);
    for (i, task) in batch.tasks.iter().enumerate() {
        let bi = sys.block(i);
        let mut scaled = bi.columns(0, cfg.s).into_owned();
        for j in 0..cfg.s {
            let sd = cfg.nu_coord(i, j);
            scaled.column_mut(j).scale_mut(sd);
        }
        let vx = task.v.tr_mul(&task.x);
        let block = &scaled * scaled.transpose() + DMatrix::identity(n_v, n_v) * s2 + (&vx * vx.transpose()) * (s2 * c * c);
        cov.view_mut((i * n_v, i * n_v), (n_v, n_v)).copy_from(&block);
    }
    let ch = Cholesky::new(sys.gram()).ok_or_else(|| {
        let (lo, hi) = eig_extremes(sys.gram());
        Error::Degenerate {
            smallest_eigenvalue: lo,
            condition: hi / lo,
        }
    })?;
    let mut trace = 0.0;
    for k in 0..rows {
        trace += ch.solve(&DVector::from_column_slice(cov.column(k).as_slice()))[k];
    }
    Ok((term1 + trace, term1, cov.trace()))
}

/// Outcome of the high-probability bound check at one configuration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContainmentReport {
    pub instances: usize,
    pub bounds: BoundReport,
    /// Fraction with realized `‖ŵ_ℓ2 − w0‖² ≤ b_w`.
    pub fraction_within_b_w: f64,
    /// Fraction with both extreme eigenvalues of `BBᵀ` inside the branch interval.
    pub fraction_eig_inside: f64,
    pub one_minus_eta: f64,
    /// Instances where every premise held: finite `b_w`, positive eigenvalue
    /// bound below `λ_min`, Term 1 ≤ `b_w0` and `tr Cov(δγ) ≤ b_δ`.
    pub premises_held: usize,
    /// Among those, instances whose conditional expected error exceeds `b_w`.
    pub conditional_violations: usize,
    pub max_conditional_ratio: f64,
}

pub fn containment_audit(cfg: &MetaConfig, instances: usize, seed: u64) -> Result<ContainmentReport> {
    cfg.validate()?;
    let bounds = bound_stack(cfg);
    let rows: Vec<Result<(bool, bool, Option<f64>)>> = (0..instances as u64)
        .into_par_iter()
        .map(|rep| {
            let r = sample_system(cfg, seed, rep)?;
            let l2 = solve_min_l2(&r.system)?;
            let within = l2.model_error <= bounds.b_w;
            let eig_inside = bounds.branch_eig_min() <= l2.eig_min && l2.eig_max <= bounds.branch_eig_max();
            let lower = bounds.branch_eig_min();
            let premise_eig = bounds.b_w.is_finite() && lower > 0.0 && lower <= l2.eig_min;
            let cond = if premise_eig {
                let (e, t1, tr) = conditional_model_error(cfg, &r.batch, &r.system)?;
                (t1 <= bounds.b_w0 && tr <= bounds.b_delta).then_some(e / bounds.b_w)
            } else {
                None
            };
            Ok((within, eig_inside, cond))
        })
        .collect();
    let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
    let share = |n: usize| n as f64 / instances as f64;
    let ratios: Vec<f64> = rows.iter().filter_map(|r| r.2).collect();
    Ok(ContainmentReport {
        instances,
        fraction_within_b_w: share(rows.iter().filter(|r| r.0).count()),
        fraction_eig_inside: share(rows.iter().filter(|r| r.1).count()),
        one_minus_eta: 1.0 - bounds.eta,
        premises_held: ratios.len(),
        conditional_violations: ratios.iter().filter(|&&q| q > 1.0).count(),
        max_conditional_ratio: ratios.iter().copied().fold(f64::NAN, f64::max),
        bounds,
    })
}
