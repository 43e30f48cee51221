//! The stacked MAML meta system and one-step adaptation.
//!
//! After one inner gradient step of size `α_t` on task `i`, the validation
//! residual is affine in the meta parameter `ŵ`. Stacking the `m` tasks gives
//!
//! ```text
//!   B_i = V_iᵀ (I_p − (α_t/n_t) X_i X_iᵀ)          (n_v × p)
//!   γ_i = y_v_i − (α_t/n_t) V_iᵀ X_i y_i            (n_v)
//!   L_meta(ŵ) = ‖γ − B ŵ‖² / (2 m n_v)
//! ```
//!
//! and `δγ = γ − B w0` collects everything that is not explained by the mean
//! truth.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;
use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::write_matrix;
use crate::task_gen::{MetaConfig, TaskBatch, TestTask};

#[derive(Debug)]
pub struct MetaSystem {
    b: DMatrix<f64>,
    gamma: DVector<f64>,
    delta_gamma: DVector<f64>,
    w0: DVector<f64>,
    m: usize,
    n_v: usize,
    gram: OnceLock<DMatrix<f64>>,
}

impl Clone for MetaSystem {
    fn clone(&self) -> Self {
        // the cache is rebuilt on demand
        Self::assemble(
            self.b.clone(),
            self.gamma.clone(),
            self.delta_gamma.clone(),
            self.w0.clone(),
            self.m,
            self.n_v,
        )
    }
}

impl MetaSystem {
    /// Build from raw parts; `δγ` is recomputed from `γ`, `B` and `w0`.
    pub fn from_parts(b: DMatrix<f64>, gamma: DVector<f64>, w0: DVector<f64>, m: usize, n_v: usize) -> Result<Self> {
        if b.nrows() != m * n_v {
            return Err(Error::dim("MetaSystem rows", m * n_v, b.nrows()));
        }
        if gamma.len() != b.nrows() {
            return Err(Error::dim("MetaSystem gamma", b.nrows(), gamma.len()));
        }
        if w0.len() != b.ncols() {
            return Err(Error::dim("MetaSystem w0", b.ncols(), w0.len()));
        }
        let delta_gamma = &gamma - &b * &w0;
        Ok(Self::assemble(b, gamma, delta_gamma, w0, m, n_v))
    }

    fn assemble(b: DMatrix<f64>, gamma: DVector<f64>, delta_gamma: DVector<f64>, w0: DVector<f64>, m: usize, n_v: usize) -> Self {
        Self {
            b,
            gamma,
            delta_gamma,
            w0,
            m,
            n_v,
            gram: OnceLock::new(),
        }
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn gamma(&self) -> &DVector<f64> {
        &self.gamma
    }

    pub fn delta_gamma(&self) -> &DVector<f64> {
        &self.delta_gamma
    }

    pub fn w0(&self) -> &DVector<f64> {
        &self.w0
    }

    pub fn p(&self) -> usize {
        self.b.ncols()
    }

    /// `m · n_v`.
    pub fn rows(&self) -> usize {
        self.b.nrows()
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn n_v(&self) -> usize {
        self.n_v
    }

    /// `B Bᵀ`, computed once.
    pub fn gram(&self) -> &DMatrix<f64> {
        self.gram.get_or_init(|| {
            let g = &self.b * self.b.transpose();
            // symmetrize away rounding asymmetry
            (&g + g.transpose()) * 0.5
        })
    }

    /// Row block `i` of `B` (rows `i·n_v .. (i+1)·n_v`).
    pub fn block(&self, task: usize) -> DMatrix<f64> {
        self.b.rows(task * self.n_v, self.n_v).into_owned()
    }

    /// Write `B.txt` and `gamma.txt` into `dir` as plain-text matrices.
    pub fn dump(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_matrix(BufWriter::new(File::create(dir.join("B.txt"))?), &self.b)?;
        let g = DMatrix::from_column_slice(self.gamma.len(), 1, self.gamma.as_slice());
        write_matrix(BufWriter::new(File::create(dir.join("gamma.txt"))?), &g)?;
        Ok(())
    }
}

/// Row block and `γ` block for one task.
pub fn task_block(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    v: &DMatrix<f64>,
    y_v: &DVector<f64>,
    alpha_t: f64,
) -> (DMatrix<f64>, DVector<f64>) {
    let c = alpha_t / x.ncols() as f64;
    let vt = v.transpose();
    let vtx = &vt * x;
    let b = &vt - (&vtx * x.transpose()) * c;
    let g = y_v - (&vtx * y) * c;
    (b, g)
}

pub fn build_meta_system(batch: &TaskBatch, cfg: &MetaConfig, w0: &DVector<f64>) -> Result<MetaSystem> {
    if batch.tasks.len() != cfg.m {
        return Err(Error::dim("build_meta_system tasks", cfg.m, batch.tasks.len()));
    }
    if w0.len() != cfg.p {
        return Err(Error::dim("build_meta_system w0", cfg.p, w0.len()));
    }
    let rows = cfg.rows();
    let mut b = DMatrix::zeros(rows, cfg.p);
    let mut gamma = DVector::zeros(rows);
    let mut delta_gamma = DVector::zeros(rows);
    let c = cfg.alpha_t / cfg.n_t as f64;
    for (i, t) in batch.tasks.iter().enumerate() {
        if t.x.shape() != (cfg.p, cfg.n_t) {
            return Err(Error::dim("build_meta_system X_i", format!("{}x{}", cfg.p, cfg.n_t), format!("{:?}", t.x.shape())));
        }
        if t.v.shape() != (cfg.p, cfg.n_v) {
            return Err(Error::dim("build_meta_system V_i", format!("{}x{}", cfg.p, cfg.n_v), format!("{:?}", t.v.shape())));
        }
        if t.w.len() != cfg.p {
            return Err(Error::dim("build_meta_system w_i", cfg.p, t.w.len()));
        }
        if t.y.len() != cfg.n_t || t.y_v.len() != cfg.n_v || t.eps.len() != cfg.n_t || t.eps_v.len() != cfg.n_v {
            return Err(Error::dim("build_meta_system outputs", format!("{}+{}", cfg.n_t, cfg.n_v), format!("{}+{}", t.y.len(), t.y_v.len())));
        }
        let (bi, gi) = task_block(&t.x, &t.y, &t.v, &t.y_v, cfg.alpha_t);
        b.rows_mut(i * cfg.n_v, cfg.n_v).copy_from(&bi);
        gamma.rows_mut(i * cfg.n_v, cfg.n_v).copy_from(&gi);
        // same as γ_i − B_i w0, without the cancellation
        let di = &bi * (&t.w - w0) + &t.eps_v - (t.v.tr_mul(&t.x) * &t.eps) * c;
        delta_gamma.rows_mut(i * cfg.n_v, cfg.n_v).copy_from(&di);
    }
    Ok(MetaSystem::assemble(b, gamma, delta_gamma, w0.clone(), cfg.m, cfg.n_v))
}

/// `‖γ − B ŵ‖² / (2 m n_v)`.
pub fn meta_loss(sys: &MetaSystem, w_hat: &DVector<f64>) -> f64 {
    (sys.gamma() - sys.b() * w_hat).norm_squared() / (2.0 * sys.rows() as f64)
}

/// Which data produced an adapted solution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdaptSource {
    TrainTask(usize),
    TestTask,
    Raw,
}

#[derive(Debug, Clone)]
pub struct AdaptedSolution {
    pub w_adapted: DVector<f64>,
    pub source: AdaptSource,
}

/// One gradient step on `½‖y − Xᵀŵ‖²` with step `step / n`:
/// `(I − (step/n) X Xᵀ) ŵ + (step/n) X y`.
pub fn adapt_inner(w_hat: &DVector<f64>, x: &DMatrix<f64>, y: &DVector<f64>, step: f64) -> AdaptedSolution {
    let c = step / x.ncols() as f64;
    let residual = y - x.tr_mul(w_hat);
    AdaptedSolution {
        w_adapted: w_hat + (x * residual) * c,
        source: AdaptSource::Raw,
    }
}

/// Adapt to the test task with `α_r` (practical rule when unset).
pub fn adapt_test(w_hat: &DVector<f64>, test: &TestTask, cfg: &MetaConfig) -> AdaptedSolution {
    AdaptedSolution {
        source: AdaptSource::TestTask,
        ..adapt_inner(w_hat, &test.x_r, &test.y_r, cfg.effective_alpha_r())
    }
}

/// `(xᵀ w_r − xᵀ w_test)²`.
pub fn test_error(x: &DVector<f64>, w_r: &DVector<f64>, w_test: &DVector<f64>) -> f64 {
    x.dot(&(w_r - w_test)).powi(2)
}
