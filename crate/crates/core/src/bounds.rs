//! Closed-form expectations, the high-probability bound stack, the simplified
//! approximation and the descent-floor calculus.
//!
//! Everything here is a pure function of the configuration. Logarithms are
//! natural throughout.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::rng::{standard_normal_matrix, RngStream};
use crate::task_gen::MetaConfig;

/// Size below which the high-probability statements are not claimed.
pub const PAPER_THRESHOLD: usize = 256;

/// Inputs of the one-step test error formula.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TestErrorParams {
    /// Model error `‖ŵ − w0‖²`.
    pub zeta: f64,
    pub p: usize,
    pub n_r: usize,
    pub alpha_r: f64,
    pub nu_r: f64,
    pub sigma_r: f64,
}

impl TestErrorParams {
    pub fn from_config(cfg: &MetaConfig, zeta: f64) -> Self {
        Self {
            zeta,
            p: cfg.p,
            n_r: cfg.n_r,
            alpha_r: cfg.effective_alpha_r(),
            nu_r: cfg.nu_r,
            sigma_r: cfg.sigma_r,
        }
    }

    pub fn with_alpha_r(self, alpha_r: f64) -> Self {
        Self { alpha_r, ..self }
    }
}

/// Expected squared test error after one adaptation step of size `α_r`.
pub fn f_test(t: &TestErrorParams) -> f64 {
    let (p, n_r, a) = (t.p as f64, t.n_r as f64, t.alpha_r);
    let k = t.zeta + t.nu_r * t.nu_r;
    ((1.0 - a).powi(2) + (p + 1.0) / n_r * a * a) * k + a * a * p / n_r * t.sigma_r * t.sigma_r
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OptimalAlpha {
    pub alpha_r: f64,
    /// `ζ + ν_r² = 0` and `σ_r = 0`: the error is identically zero in `α_r`.
    pub indeterminate: bool,
}

/// Minimizer of [`f_test`] over `α_r`.
pub fn optimal_alpha_r(zeta: f64, cfg: &MetaConfig) -> OptimalAlpha {
    optimal_alpha_r_raw(zeta, cfg.p, cfg.n_r, cfg.nu_r, cfg.sigma_r)
}

pub fn optimal_alpha_r_raw(zeta: f64, p: usize, n_r: usize, nu_r: f64, sigma_r: f64) -> OptimalAlpha {
    let (p, n_r) = (p as f64, n_r as f64);
    let k = zeta + nu_r * nu_r;
    if sigma_r == 0.0 {
        if k == 0.0 {
            return OptimalAlpha {
                alpha_r: 0.0,
                indeterminate: true,
            };
        }
        return OptimalAlpha {
            alpha_r: n_r / (n_r + p + 1.0),
            indeterminate: false,
        };
    }
    OptimalAlpha {
        alpha_r: k * n_r / ((n_r + p + 1.0) * k + p * sigma_r * sigma_r),
        indeterminate: false,
    }
}

/// Which eigenvalue estimate feeds the ideal-interpolator bound.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EigBranch {
    /// `p > n_t`: `b_eig,min`.
    WideFeatures,
    /// `p ≤ n_t`: `c_eig,min`.
    NarrowFeatures,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct BoundFlags {
    /// `min{p, n_t} < 256`.
    pub below_threshold: bool,
    /// `η ≥ 1`, so the probability statement is empty.
    pub vacuous_eta: bool,
    /// `p < m n_v`: Term 1 and its bounds are undefined.
    pub underparameterized: bool,
    /// `b_w` is infinite (nonpositive eigenvalue estimate or denominator).
    pub unbounded: bool,
}

impl BoundFlags {
    pub fn tokens(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        if self.below_threshold {
            out.push("below_threshold");
        }
        if self.vacuous_eta {
            out.push("vacuous_eta");
        }
        if self.underparameterized {
            out.push("underparameterized");
        }
        if self.unbounded {
            out.push("unbounded");
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundReport {
    pub alpha_t_prime: f64,
    pub b_eig_min: f64,
    pub b_eig_max: f64,
    pub c_eig_min: f64,
    pub c_eig_max: f64,
    #[serde(rename = "D")]
    pub d: f64,
    pub b_delta: f64,
    pub b_w0: f64,
    /// Lower companion `b̃_w0` of the Term 1 bound.
    pub b_w0_lower: f64,
    pub b_w_ideal: f64,
    pub b_w: f64,
    pub eta: f64,
    pub branch: EigBranch,
    pub flags: BoundFlags,
}

impl BoundReport {
    /// The eigenvalue lower estimate used by `b_w_ideal`.
    pub fn branch_eig_min(&self) -> f64 {
        match self.branch {
            EigBranch::WideFeatures => self.b_eig_min,
            EigBranch::NarrowFeatures => self.c_eig_min,
        }
    }

    pub fn branch_eig_max(&self) -> f64 {
        match self.branch {
            EigBranch::WideFeatures => self.b_eig_max,
            EigBranch::NarrowFeatures => self.c_eig_max,
        }
    }

    /// `(symbol, value)` pairs in report order.
    pub fn fields(&self) -> Vec<(&'static str, f64)> {
        vec![
            ("alpha_t'", self.alpha_t_prime),
            ("b_eig,min", self.b_eig_min),
            ("b_eig,max", self.b_eig_max),
            ("c_eig,min", self.c_eig_min),
            ("c_eig,max", self.c_eig_max),
            ("D", self.d),
            ("b_delta", self.b_delta),
            ("b_w0", self.b_w0),
            ("b~_w0", self.b_w0_lower),
            ("b_w^ideal", self.b_w_ideal),
            ("b_w", self.b_w),
            ("eta", self.eta),
        ]
    }
}

fn ln(x: f64) -> f64 {
    x.ln()
}

/// `α_t' = (α_t/n_t)(√p + √n_t + ln√n_t)²`.
pub fn alpha_t_prime(cfg: &MetaConfig) -> f64 {
    let (p, n_t) = (cfg.p as f64, cfg.n_t as f64);
    cfg.alpha_t / n_t * (p.sqrt() + n_t.sqrt() + ln(n_t.sqrt())).powi(2)
}

/// The full bound stack, evaluated even outside the regime where its
/// probability statement is claimed.
pub fn bound_stack(cfg: &MetaConfig) -> BoundReport {
    let p = cfg.p as f64;
    let n_t = cfg.n_t as f64;
    let n_v = cfg.n_v as f64;
    let s = cfg.s as f64;
    let mnv = (cfg.m * cfg.n_v) as f64;
    let at = cfg.alpha_t;
    let sigma2 = cfg.sigma * cfg.sigma;
    let nu2 = cfg.nu() * cfg.nu();
    let w0sq = cfg.w0_norm_sq();

    let atp = alpha_t_prime(cfg);
    let mx = atp.max(1.0 - atp).powi(2);
    let mn0 = (1.0 - atp).max(0.0).powi(2);
    let sqrt_p_ln_p = p.sqrt() * ln(p);
    let spread = ((n_v + 1.0) * mx + 6.0 * mnv) * sqrt_p_ln_p;
    let b_eig_min = p + (mn0 - 1.0) * n_t - spread;
    let b_eig_max = p + (mx - 1.0) * n_t + spread;
    let root_plnp = (p * ln(p)).sqrt();
    let c_eig_min = mn0 * p - 2.0 * mnv * mx * root_plnp;
    let c_eig_max = mx * (p + (2.0 * mnv + 1.0) * root_plnp);

    let l_snt = ln(s * n_t);
    let hi = (1.0 - at * (n_t + 2.0 * (n_t * l_snt).sqrt() + 2.0 * l_snt) / n_t).abs();
    let lo = (1.0 - at * (n_t - 2.0 * (n_t * l_snt).sqrt()) / n_t).abs();
    let d = hi.max(lo).powi(2);

    let b_delta = mnv * sigma2 * (1.0 + at * at * p * ln(n_t).powi(2) * ln(p) / n_t)
        + mnv * nu2 * 2.0 * l_snt * (d + at * at * (p - 1.0) / n_t * 6.25 * ln(s * p * n_t).powi(2));

    let mut flags = BoundFlags {
        below_threshold: cfg.p.min(cfg.n_t) < PAPER_THRESHOLD,
        ..BoundFlags::default()
    };

    let q = p - mnv;
    let (b_w0, b_w0_lower) = if q < 0.0 {
        flags.underparameterized = true;
        (f64::NAN, f64::NAN)
    } else {
        let den = p - 2.0 * root_plnp;
        let upper = if den > 0.0 {
            (q + 2.0 * (q * ln(p)).sqrt() + 2.0 * ln(p)) / den * w0sq
        } else {
            f64::INFINITY
        };
        let lower = (q - 2.0 * (q * ln(p)).sqrt()) / (p + 2.0 * root_plnp + 2.0 * ln(p)) * w0sq;
        (upper, lower)
    };

    let branch = if cfg.p > cfg.n_t {
        EigBranch::WideFeatures
    } else {
        EigBranch::NarrowFeatures
    };
    let eig = match branch {
        EigBranch::WideFeatures => b_eig_min,
        EigBranch::NarrowFeatures => c_eig_min,
    };
    let denom = eig.max(0.0);
    let b_w_ideal = if denom > 0.0 { b_delta / denom } else { f64::INFINITY };
    let b_w = b_w0 + b_w_ideal;
    if b_w == f64::INFINITY {
        flags.unbounded = true;
    }

    let eta = 27.0 * mnv * mnv / (cfg.p.min(cfg.n_t) as f64).powf(0.4);
    flags.vacuous_eta = eta >= 1.0;

    BoundReport {
        alpha_t_prime: atp,
        b_eig_min,
        b_eig_max,
        c_eig_min,
        c_eig_max,
        d,
        b_delta,
        b_w0,
        b_w0_lower,
        b_w_ideal,
        b_w,
        eta,
        branch,
        flags,
    }
}

/// Exact `E‖δγ‖²` over truths, noise and features.
pub fn expected_delta_gamma_sq(cfg: &MetaConfig) -> f64 {
    let (p, n_t) = (cfg.p as f64, cfg.n_t as f64);
    let mnv = (cfg.m * cfg.n_v) as f64;
    let at = cfg.alpha_t;
    let nu = cfg.nu();
    mnv * cfg.sigma * cfg.sigma * (1.0 + at * at * p / n_t)
        + nu * nu * mnv * ((1.0 - at).powi(2) + at * at * (p + 1.0) / n_t)
}

/// Exact `E[Term 1] = (p − m n_v)/p · ‖w0‖²`; `None` below the interpolation threshold.
pub fn expected_term1(cfg: &MetaConfig) -> Option<f64> {
    let rows = cfg.rows();
    if cfg.p < rows {
        return None;
    }
    Some((cfg.p - rows) as f64 / cfg.p as f64 * cfg.w0_norm_sq())
}

/// `E[X Xᵀ X Xᵀ] = n(n + p + 1) I_p` for `X` a `p × n` standard normal matrix.
pub fn xxxx_identity(n: usize, p: usize) -> DMatrix<f64> {
    DMatrix::identity(p, p) * (n * (n + p + 1)) as f64
}

/// Monte-Carlo average of `X Xᵀ X Xᵀ` over `draws` independent matrices.
pub fn xxxx_monte_carlo(n: usize, p: usize, draws: usize, stream: RngStream) -> DMatrix<f64> {
    let mut rng = stream.rng();
    let mut acc = DMatrix::<f64>::zeros(p, p);
    for _ in 0..draws {
        let x = standard_normal_matrix(&mut rng, p, n);
        let g = &x * x.transpose();
        acc += &g * &g;
    }
    acc / draws as f64
}

/// Constants of the simplified bound.
#[derive(Debug, Clone, Copy, PartialEq, serde::Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct Constants {
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub c4: f64,
}

impl Default for Constants {
    fn default() -> Self {
        Self {
            c1: 0.001,
            c2: 0.99995,
            c3: 0.001,
            c4: 0.99995,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ApproxBound {
    pub b_w0: f64,
    /// `+∞` when `p ≤ C4 m n_v`.
    pub b_w_ideal: f64,
    pub b_delta: f64,
}

impl ApproxBound {
    pub fn total(&self) -> f64 {
        self.b_w0 + self.b_w_ideal
    }
}

/// Approximate `b_δ` keeping only the dominating terms.
pub fn approx_b_delta(cfg: &MetaConfig, c: &Constants) -> f64 {
    let n_t = cfg.n_t as f64;
    let nu = cfg.nu();
    cfg.rows() as f64
        * ((1.0 + c.c1 / n_t) * cfg.sigma * cfg.sigma + c.c2 * (1.0 + c.c3 / n_t) * nu * nu)
}

pub fn approx_bound(cfg: &MetaConfig, c: &Constants) -> ApproxBound {
    let p = cfg.p as f64;
    let mnv = cfg.rows() as f64;
    let b_delta = approx_b_delta(cfg, c);
    let den = p - c.c4 * mnv;
    ApproxBound {
        b_w0: (p - mnv) / p * cfg.w0_norm_sq(),
        b_w_ideal: if den > 0.0 { b_delta / den } else { f64::INFINITY },
        b_delta,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum FloorVerdict {
    /// `g ≥ 1`: the approximate curve decreases for all `p > C4 m n_v`.
    MonotoneDecreasing { g: f64 },
    /// Decreasing on `(C4 m n_v, p*)`, increasing after.
    Floor { g: f64, p_star: f64, floor_value: f64 },
}

/// Location and value of the minimum of `((p − m n_v)/p)‖w0‖² + b_δ/(p − C4 m n_v)`.
///
/// Requires `‖w0‖ > 0`.
pub fn descent_floor(cfg: &MetaConfig, c4: f64, b_delta: f64) -> FloorVerdict {
    descent_floor_raw(cfg.rows() as f64, cfg.w0_norm_sq(), c4, b_delta)
}

pub fn descent_floor_raw(mnv: f64, w0_norm_sq: f64, c4: f64, b_delta: f64) -> FloorVerdict {
    let g = b_delta / (mnv * w0_norm_sq);
    if g >= 1.0 {
        return FloorVerdict::MonotoneDecreasing { g };
    }
    let r = 1.0 - g.sqrt();
    FloorVerdict::Floor {
        g,
        p_star: c4 * mnv / r,
        floor_value: w0_norm_sq * (1.0 - r * r / c4),
    }
}

/// Sign of `d/dp` of the approximate curve at real `p > C4 m n_v`.
pub fn floor_derivative(mnv: f64, w0_norm_sq: f64, c4: f64, b_delta: f64, p: f64) -> f64 {
    mnv / (p * p) * w0_norm_sq - b_delta / (p - c4 * mnv).powi(2)
}

/// The four-argument closed form for the `p = s = 1` least-squares error.
pub fn underparam_p1(cfg: &MetaConfig, a1: f64, a2: f64, a3: f64, a4: f64) -> f64 {
    let m = cfg.m as f64;
    let k = cfg.alpha_t / cfg.n_t as f64;
    let nu2 = cfg.nu() * cfg.nu();
    let s2 = cfg.sigma * cfg.sigma;
    let d1 = 1.0 - k * a1;
    let d2 = 1.0 - k * a2;
    nu2 * a3 / m * (d2 / d1).powi(4)
        + s2 * a3 / m * (k * a1).powi(2) * d2 * d2 / d1.powi(4)
        + s2 / (d1 * d1 * a4)
}

/// Chi-square concentration plug-ins for the `p = 1` bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct P1Plugins {
    pub g_hi: f64,
    pub g_lo: f64,
    pub h_hi: f64,
    pub r_hi: f64,
    pub r_lo: f64,
}

pub fn p1_plugins(cfg: &MetaConfig) -> P1Plugins {
    let n_t = cfg.n_t as f64;
    let n_v = cfg.n_v as f64;
    let mnv = cfg.rows() as f64;
    P1Plugins {
        g_hi: n_t + 2.0 * (n_t * ln(n_t)).sqrt() + 2.0 * ln(n_t),
        g_lo: n_t - 2.0 * (n_t * ln(n_t)).sqrt(),
        h_hi: mnv + 2.0 * (mnv * ln(mnv)).sqrt() + 2.0 * ln(mnv),
        r_hi: n_v + 2.0 * (n_v * ln(n_v)).sqrt() + 2.0 * ln(n_v),
        r_lo: n_v - 2.0 * (n_v * ln(n_v)).sqrt(),
    }
}

/// `(lower, upper)` high-probability bounds on the `p = 1` expected model error.
pub fn underparam_p1_bounds(cfg: &MetaConfig) -> (f64, f64) {
    let g = p1_plugins(cfg);
    let m = cfg.m as f64;
    let lower = underparam_p1(cfg, g.g_lo, g.g_hi, 1.0, g.h_hi);
    let upper = underparam_p1(cfg, g.g_hi, g.g_lo, (g.r_hi / g.r_lo).powi(2), m * g.r_lo);
    (lower, upper)
}

/// `ν²/m + σ²α_t²/m + σ²/((1 − α_t)² m n_v)`.
pub fn underparam_p1_approx(cfg: &MetaConfig) -> f64 {
    let m = cfg.m as f64;
    let nu2 = cfg.nu() * cfg.nu();
    let s2 = cfg.sigma * cfg.sigma;
    let at = cfg.alpha_t;
    nu2 / m + s2 * at * at / m + s2 / ((1.0 - at).powi(2) * cfg.rows() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task_gen::fixtures::fig1_config;
    use crate::task_gen::DiversitySpec;
    use proptest::prelude::*;

    fn params(zeta: f64, p: usize, n_r: usize, alpha_r: f64, nu_r: f64, sigma_r: f64) -> TestErrorParams {
        TestErrorParams {
            zeta,
            p,
            n_r,
            alpha_r,
            nu_r,
            sigma_r,
        }
    }

    #[test]
    fn f_test_without_adaptation() {
        let t = params(3.0, 10, 4, 0.0, 2.0, 5.0);
        assert_eq!(f_test(&t), 7.0);
    }

    #[test]
    fn f_test_noise_only_value() {
        let t = params(0.0, 3, 1, 1.0 / 5.0, 0.0, 1.0);
        assert!((f_test(&t) - 0.12).abs() < 1e-15);
    }

    #[test]
    fn optimal_alpha_noiseless() {
        let a = optimal_alpha_r_raw(4.0, 30, 10, 1.0, 0.0);
        assert_eq!(a.alpha_r, 10.0 / 41.0);
        assert!(!a.indeterminate);
        let z = optimal_alpha_r_raw(0.0, 30, 10, 0.0, 0.0);
        assert!(z.indeterminate);
        assert_eq!(z.alpha_r, 0.0);
        assert!(optimal_alpha_r_raw(1.0, 30, 10, 1.0, 1e12).alpha_r < 1e-20);
    }

    #[test]
    fn optimal_alpha_matches_grid() {
        let t = params(5.0, 20, 7, 0.0, 1.5, 2.0);
        let best = (0..=10_000)
            .map(|k| k as f64 * 1e-4)
            .min_by(|a, b| f_test(&t.with_alpha_r(*a)).total_cmp(&f_test(&t.with_alpha_r(*b))))
            .unwrap();
        let opt = optimal_alpha_r_raw(5.0, 20, 7, 1.5, 2.0).alpha_r;
        assert!((best - opt).abs() <= 1e-4);
    }

    #[test]
    fn zero_step_collapses() {
        let mut cfg = fig1_config(300, 20.0, 2.0);
        cfg.alpha_t = 0.0;
        let r = bound_stack(&cfg);
        assert_eq!(r.alpha_t_prime, 0.0);
        assert_eq!(r.d, 1.0);
    }

    #[test]
    fn eig_min_spot_check() {
        // p = n_t with α_t' < 1, written out term by term
        let mut cfg = fig1_config(400, 20.0, 2.0);
        cfg.n_t = 400;
        cfg.alpha_t = 1e-4;
        let r = bound_stack(&cfg);
        let p = 400.0_f64;
        let a = 1e-4 / 400.0 * (20.0 + 20.0 + (20.0_f64).ln()).powi(2);
        assert!(a < 1.0);
        let expect = p + ((1.0 - a).powi(2) - 1.0) * 400.0
            - (4.0 * (1.0 - a).powi(2) + 6.0 * 30.0) * p.sqrt() * p.ln();
        assert_eq!(r.alpha_t_prime, a);
        assert!((r.b_eig_min - expect).abs() <= 1e-12 * expect.abs());
        assert_eq!(r.branch, EigBranch::NarrowFeatures);
    }

    #[test]
    fn fig1_sizes_are_flagged() {
        let r = bound_stack(&fig1_config(1000, 60.0, 0.0));
        assert!(r.flags.below_threshold);
        assert!(r.flags.vacuous_eta);
        assert_eq!(r.branch, EigBranch::WideFeatures);
        assert_eq!(r.flags.tokens()[..2], ["below_threshold", "vacuous_eta"]);
        let r = bound_stack(&fig1_config(10, 60.0, 0.0));
        assert!(r.flags.underparameterized);
        assert!(r.b_w0.is_nan());
    }

    #[test]
    fn nonpositive_eig_estimate_is_unbounded() {
        let mut cfg = fig1_config(300, 2.0, 0.5);
        cfg.n_t = 280;
        cfg.m = 2;
        cfg.n_v = 2;
        cfg.alpha_t = 0.02 / 300.0;
        let r = bound_stack(&cfg);
        assert!(r.b_eig_min <= 0.0);
        assert_eq!(r.b_w_ideal, f64::INFINITY);
        assert!(r.flags.unbounded);
    }

    #[test]
    fn expected_delta_gamma_special_cases() {
        let cfg = fig1_config(50, 0.0, 0.0);
        assert_eq!(expected_delta_gamma_sq(&cfg), 0.0);
        let mut cfg = fig1_config(50, 3.0, 2.0);
        cfg.alpha_t = 0.0;
        assert!((expected_delta_gamma_sq(&cfg) - 30.0 * 13.0).abs() < 1e-9);
    }

    #[test]
    fn expected_term1_limits() {
        assert_eq!(expected_term1(&fig1_config(30, 1.0, 1.0)), Some(0.0));
        assert_eq!(expected_term1(&fig1_config(20, 1.0, 1.0)), None);
        let far = expected_term1(&fig1_config(3_000_000, 1.0, 1.0)).unwrap();
        assert!((far - 100.0).abs() < 1e-3);
    }

    #[test]
    fn xxxx_small_cases() {
        assert_eq!(xxxx_identity(2, 3), DMatrix::identity(3, 3) * 12.0);
        assert_eq!(xxxx_identity(1, 1)[(0, 0)], 3.0);
    }

    #[test]
    fn approx_limits_and_calibration() {
        let c = Constants::default();
        assert_eq!((c.c1, c.c2, c.c3, c.c4), (0.001, 0.99995, 0.001, 0.99995));
        let a = approx_bound(&fig1_config(1_000_000_000, 20.0, 2.0), &c);
        assert!(a.b_w_ideal < 1e-3);
        let a = approx_bound(&fig1_config(25, 20.0, 2.0), &c);
        assert_eq!(a.b_w_ideal, f64::INFINITY);
    }

    #[test]
    fn floor_hand_evaluation() {
        match descent_floor_raw(30.0, 100.0, 1.0, 0.25 * 30.0 * 100.0) {
            FloorVerdict::Floor { p_star, floor_value, g } => {
                assert_eq!(g, 0.25);
                assert!((p_star - 60.0).abs() < 1e-12);
                assert!((floor_value - 75.0).abs() < 1e-12);
            }
            v => panic!("{v:?}"),
        }
        assert!(matches!(
            descent_floor_raw(30.0, 100.0, 1.0, 3000.0),
            FloorVerdict::MonotoneDecreasing { .. }
        ));
    }

    #[test]
    fn floor_derivative_signs() {
        let (mnv, w, c4, bd) = (30.0, 100.0, 0.99995, 600.0);
        let FloorVerdict::Floor { p_star, .. } = descent_floor_raw(mnv, w, c4, bd) else {
            panic!()
        };
        assert!(floor_derivative(mnv, w, c4, bd, p_star * 0.9) < 0.0);
        assert!(floor_derivative(mnv, w, c4, bd, p_star * 1.1) > 0.0);
    }

    #[test]
    fn floor_ordering_for_small_curves() {
        let c = Constants::default();
        let verdict = |nu, sigma| {
            let cfg = fig1_config(100, nu, sigma);
            descent_floor(&cfg, c.c4, approx_b_delta(&cfg, &c))
        };
        let pts: Vec<(f64, f64)> = [(0.2, 0.02), (2.0, 0.2)]
            .iter()
            .map(|&(n, s)| match verdict(n, s) {
                FloorVerdict::Floor { p_star, floor_value, .. } => (p_star, floor_value),
                v => panic!("{v:?}"),
            })
            .collect();
        assert!(pts[0].0 < pts[1].0 && pts[0].1 < pts[1].1);
        assert!(matches!(verdict(60.0, 0.0), FloorVerdict::MonotoneDecreasing { .. }));
    }

    #[test]
    fn p1_forms() {
        let mut cfg = fig1_config(1, 0.0, 0.0);
        cfg.s = 1;
        cfg.w0_s = vec![1.0];
        assert_eq!(underparam_p1_approx(&cfg), 0.0);
        let (lo, hi) = underparam_p1_bounds(&cfg);
        assert_eq!((lo, hi), (0.0, 0.0));
        cfg.diversity = DiversitySpec::Uniform(2.0);
        cfg.sigma = 3.0;
        cfg.alpha_t = 0.0;
        assert!((underparam_p1_approx(&cfg) - (4.0 / 10.0 + 9.0 / 30.0)).abs() < 1e-15);
        // α_t = 0 makes every ratio 1
        let (lo, hi) = underparam_p1_bounds(&cfg);
        let g = p1_plugins(&cfg);
        assert!((lo - (0.4 + 9.0 / g.h_hi)).abs() < 1e-12);
        assert!(lo <= hi);
    }

    #[test]
    fn bounds_are_pure() {
        let cfg = fig1_config(137, 20.0, 2.0);
        let a = bound_stack(&cfg);
        let b = bound_stack(&cfg);
        assert_eq!(format!("{a:?}"), format!("{b:?}"));
    }

    fn arb_cfg() -> impl Strategy<Value = MetaConfig> {
        (1usize..=5, 1usize..=4, 1usize..=400, 0usize..=2000, 0.0..10.0f64, 0.0..5.0f64, 0.0..1.0f64).prop_map(
            |(m, n_v, n_t, extra_p, nu, sigma, c)| {
                let mut cfg = fig1_config(5 + extra_p, nu, sigma);
                cfg.m = m;
                cfg.n_v = n_v;
                cfg.n_t = n_t;
                cfg.alpha_t = c / cfg.p as f64;
                cfg
            },
        )
    }

    proptest! {
        #[test]
        fn stack_invariants(cfg in arb_cfg()) {
            let r = bound_stack(&cfg);
            prop_assert!(r.b_eig_min <= r.b_eig_max);
            prop_assert!(r.c_eig_min <= r.c_eig_max);
            prop_assert!(r.eta >= 0.0);
            prop_assert!(r.b_delta >= 0.0);
            if !r.flags.underparameterized {
                prop_assert_eq!(r.b_w.to_bits(), (r.b_w0 + r.b_w_ideal).to_bits());
            }
            if r.branch_eig_min() <= 0.0 {
                prop_assert_eq!(r.b_w_ideal, f64::INFINITY);
            }
        }

        #[test]
        fn f_test_is_convex_and_minimized(
            zeta in 0.0..50.0f64, nu_r in 0.0..5.0f64, sigma_r in 0.0..5.0f64,
            p in 1usize..500, n_r in 1usize..50, a in 0.0..1.0f64, h in 1e-3..0.5f64,
        ) {
            let t = params(zeta, p, n_r, a, nu_r, sigma_r);
            let k = zeta + nu_r * nu_r;
            let mid = f_test(&t);
            let lo = f_test(&t.with_alpha_r(a - h));
            let hi = f_test(&t.with_alpha_r(a + h));
            if k + sigma_r * sigma_r > 0.0 {
                prop_assert!(lo + hi - 2.0 * mid > 0.0);
            }
            let opt = optimal_alpha_r_raw(zeta, p, n_r, nu_r, sigma_r).alpha_r;
            prop_assert!(f_test(&t.with_alpha_r(opt)) <= mid * (1.0 + 1e-12) + 1e-300);
        }

        #[test]
        fn term1_expectation_increases(cfg in arb_cfg()) {
            let rows = cfg.rows();
            let p = rows.max(cfg.s) + 1;
            let a = expected_term1(&cfg.with_p(p)).unwrap();
            let b = expected_term1(&cfg.with_p(p + 1)).unwrap();
            prop_assert!(b > a);
        }

        #[test]
        fn delta_gamma_expectation_is_linear(cfg in arb_cfg(), k in 0.1..4.0f64) {
            let noise_only = MetaConfig { diversity: DiversitySpec::Uniform(0.0), ..cfg.clone() };
            let nu_only = MetaConfig { sigma: 0.0, ..cfg.clone() };
            let total = expected_delta_gamma_sq(&cfg);
            let sum = expected_delta_gamma_sq(&noise_only) + expected_delta_gamma_sq(&nu_only);
            prop_assert!((total - sum).abs() <= 1e-9 * total.max(1.0));
            let scaled = MetaConfig { sigma: cfg.sigma * k, ..noise_only.clone() };
            let lhs = expected_delta_gamma_sq(&scaled);
            let rhs = k * k * expected_delta_gamma_sq(&noise_only);
            prop_assert!((lhs - rhs).abs() <= 1e-9 * rhs.max(1.0));
        }
    }
}
