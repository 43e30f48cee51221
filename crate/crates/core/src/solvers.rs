//! Meta-parameter solutions and the model-error decomposition.
//!
//! Overparameterized (`p ≥ m n_v`, `B` full row rank):
//!
//! * min-ℓ2 interpolator `ŵ_ℓ2 = Bᵀ(BBᵀ)⁻¹γ`
//! * ideal interpolator `ŵ_ideal = w0 + Bᵀ(BBᵀ)⁻¹δγ`
//! * `‖ŵ_ℓ2 − w0‖² = ‖(I − Bᵀ(BBᵀ)⁻¹B) w0‖² + ‖Bᵀ(BBᵀ)⁻¹δγ‖²` (Term 1 + Term 2,
//!   the cross term vanishes because the two vectors live in complementary
//!   subspaces)
//!
//! Underparameterized (`p ≤ m n_v`): least squares `(BᵀB)⁻¹Bᵀγ`.
//!
//! The Gram matrix is factored by Cholesky while its condition number stays
//! below [`CONDITION_LIMIT`]; past that the solve goes through an SVD
//! pseudoinverse, and a numerically rank-deficient `B` is an error.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{eig_extremes, pseudoinverse, rank_tolerance, singular_values, Cholesky, CONDITION_LIMIT};
use crate::maml::MetaSystem;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    Overparameterized,
    Underparameterized,
}

impl Regime {
    pub fn of(p: usize, rows: usize) -> Self {
        if p > rows {
            Regime::Overparameterized
        } else {
            Regime::Underparameterized
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolvePath {
    Cholesky,
    SvdFallback,
}

#[derive(Debug, Clone)]
pub struct SolveReport {
    pub w_hat: DVector<f64>,
    /// `‖ŵ − w0‖²`.
    pub model_error: f64,
    /// Only set on the interpolating (Gram) paths.
    pub term1: Option<f64>,
    pub term2: Option<f64>,
    /// `‖B ŵ − γ‖`.
    pub interpolation_residual: f64,
    pub regime: Regime,
    pub path: SolvePath,
    /// Extreme eigenvalues of the factored matrix (`BBᵀ` or `BᵀB`).
    pub eig_min: f64,
    pub eig_max: f64,
}

/// Applies `v ↦ (MᵀM)⁻¹... ` style solves against one symmetric matrix.
enum Factored {
    Chol(Cholesky),
    /// Pseudoinverse of the *rectangular* matrix the Gram came from.
    Pinv(DMatrix<f64>),
}

struct Factorization {
    inner: Factored,
    eig_min: f64,
    eig_max: f64,
}

/// Factor `sym = A Aᵀ` (with `a` the rectangular factor), choosing the path.
fn factor(sym: &DMatrix<f64>, a: &DMatrix<f64>) -> Result<Factorization> {
    let (eig_min, eig_max) = eig_extremes(sym);
    let condition = if eig_min > 0.0 { eig_max / eig_min } else { f64::INFINITY };
    if condition <= CONDITION_LIMIT {
        if let Some(ch) = Cholesky::new(sym) {
            return Ok(Factorization {
                inner: Factored::Chol(ch),
                eig_min,
                eig_max,
            });
        }
    }
    // full rank of A Aᵀ needs A to have rank = rows
    let sv = singular_values(a);
    let smax = sv.first().copied().unwrap_or(0.0);
    let needed = a.nrows();
    let rank = sv.iter().filter(|&&s| s > rank_tolerance(a, smax)).count();
    if rank < needed {
        return Err(Error::Degenerate {
            smallest_eigenvalue: eig_min,
            condition,
        });
    }
    Ok(Factorization {
        inner: Factored::Pinv(pseudoinverse(a, None)),
        eig_min,
        eig_max,
    })
}

impl Factorization {
    /// `Aᵀ (A Aᵀ)⁻¹ v`.
    fn project(&self, a: &DMatrix<f64>, v: &DVector<f64>) -> DVector<f64> {
        match &self.inner {
            Factored::Chol(ch) => a.tr_mul(&ch.solve(v)),
            Factored::Pinv(pinv) => pinv * v,
        }
    }

    fn path(&self) -> SolvePath {
        match self.inner {
            Factored::Chol(_) => SolvePath::Cholesky,
            Factored::Pinv(_) => SolvePath::SvdFallback,
        }
    }
}

fn gram_factor(sys: &MetaSystem) -> Result<Factorization> {
    if sys.p() < sys.rows() {
        return Err(Error::Regime(format!(
            "interpolation needs p >= m n_v, got p = {} < {}",
            sys.p(),
            sys.rows()
        )));
    }
    factor(sys.gram(), sys.b())
}

/// Term 1 and Term 2 given an already factored Gram matrix.
fn split(sys: &MetaSystem, f: &Factorization, w0: &DVector<f64>, delta_gamma: &DVector<f64>) -> (f64, f64) {
    let b = sys.b();
    let projected = f.project(b, &(b * w0));
    let term1 = (w0 - projected).norm_squared();
    let term2 = f.project(b, delta_gamma).norm_squared();
    (term1, term2)
}

/// Minimum ℓ2-norm solution of `B w = γ`, with the Term 1 / Term 2 split.
pub fn solve_min_l2(sys: &MetaSystem) -> Result<SolveReport> {
    let f = gram_factor(sys)?;
    let w_hat = f.project(sys.b(), sys.gamma());
    let (term1, term2) = split(sys, &f, sys.w0(), sys.delta_gamma());
    Ok(SolveReport {
        model_error: (&w_hat - sys.w0()).norm_squared(),
        interpolation_residual: (sys.b() * &w_hat - sys.gamma()).norm(),
        w_hat,
        term1: Some(term1),
        term2: Some(term2),
        regime: Regime::of(sys.p(), sys.rows()),
        path: f.path(),
        eig_min: f.eig_min,
        eig_max: f.eig_max,
    })
}

/// Interpolator closest to `w0`. Its model error is Term 2, so the report
/// carries `term1 = 0` and `term2 = model_error`.
pub fn solve_ideal(sys: &MetaSystem, w0: &DVector<f64>) -> Result<SolveReport> {
    if w0.len() != sys.p() {
        return Err(Error::dim("solve_ideal w0", sys.p(), w0.len()));
    }
    let f = gram_factor(sys)?;
    let delta = sys.gamma() - sys.b() * w0;
    let step = f.project(sys.b(), &delta);
    let model_error = step.norm_squared();
    let w_hat = w0 + step;
    Ok(SolveReport {
        interpolation_residual: (sys.b() * &w_hat - sys.gamma()).norm(),
        w_hat,
        model_error,
        term1: Some(0.0),
        term2: Some(model_error),
        regime: Regime::of(sys.p(), sys.rows()),
        path: f.path(),
        eig_min: f.eig_min,
        eig_max: f.eig_max,
    })
}

/// Least-squares minimizer `(BᵀB)⁻¹Bᵀγ` of the meta loss.
pub fn solve_underparameterized(sys: &MetaSystem) -> Result<SolveReport> {
    if sys.p() > sys.rows() {
        return Err(Error::Regime(format!(
            "least squares needs p <= m n_v, got p = {} > {}",
            sys.p(),
            sys.rows()
        )));
    }
    let b = sys.b();
    let bt = b.transpose();
    let normal = {
        let n = &bt * b;
        (&n + n.transpose()) * 0.5
    };
    // (BᵀB)⁻¹Bᵀ = pinv(B) = (pinv(Bᵀ))ᵀ, so factor with Bᵀ as the wide side
    let f = factor(&normal, &bt)?;
    let w_hat = match &f.inner {
        Factored::Chol(ch) => ch.solve(&(&bt * sys.gamma())),
        Factored::Pinv(pinv_bt) => pinv_bt.transpose() * sys.gamma(),
    };
    Ok(SolveReport {
        model_error: (&w_hat - sys.w0()).norm_squared(),
        interpolation_residual: (b * &w_hat - sys.gamma()).norm(),
        w_hat,
        term1: None,
        term2: None,
        regime: Regime::Underparameterized,
        path: f.path(),
        eig_min: f.eig_min,
        eig_max: f.eig_max,
    })
}

/// `(Term 1, Term 2)` for the min-ℓ2 solution relative to `w0`.
pub fn decompose_model_error(sys: &MetaSystem, w0: &DVector<f64>) -> Result<(f64, f64)> {
    if w0.len() != sys.p() {
        return Err(Error::dim("decompose_model_error w0", sys.p(), w0.len()));
    }
    let f = gram_factor(sys)?;
    let delta = sys.gamma() - sys.b() * w0;
    Ok(split(sys, &f, w0, &delta))
}
