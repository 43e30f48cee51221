//! Generative model for training and test tasks.
//!
//! Each task `i` has a truth `w_i = [w0_s + δ_i; 0] ∈ R^p` whose first `s`
//! coordinates fluctuate around the shared mean `w0_s`. Features are i.i.d.
//! standard normal and outputs follow `y = Xᵀ w + ε` with Gaussian noise.
//! Truth deviations are Gaussian with the configured per-coordinate standard
//! deviations.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{standard_normal_matrix, standard_normal_vector, Role, RngStream};

/// Per-coordinate standard deviations of the truth fluctuation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiversitySpec {
    /// A single `ν`, spread evenly: every coordinate of every task has
    /// standard deviation `ν / √s`.
    Uniform(f64),
    /// Explicit `m × s` table of standard deviations `ν_(i),j`.
    PerCoordinate(Vec<Vec<f64>>),
}

/// All scalar parameters of one meta-learning system.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaConfig {
    pub p: usize,
    pub s: usize,
    pub m: usize,
    pub n_t: usize,
    pub n_v: usize,
    pub n_r: usize,
    pub sigma: f64,
    pub sigma_r: f64,
    pub alpha_t: f64,
    /// `None` selects the practical rule `n_r / (n_r + p + 1)`.
    pub alpha_r: Option<f64>,
    /// Mean truth restricted to the `s` true features.
    pub w0_s: Vec<f64>,
    pub diversity: DiversitySpec,
    pub nu_r: f64,
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.p == 0 || self.s == 0 || self.m == 0 || self.n_t == 0 || self.n_v == 0 || self.n_r == 0 {
            return bad("p, s, m, n_t, n_v and n_r must all be positive".into());
        }
        if self.s > self.p {
            return bad(format!("s = {} exceeds p = {}", self.s, self.p));
        }
        if self.w0_s.len() != self.s {
            return bad(format!("w0 has length {}, expected s = {}", self.w0_s.len(), self.s));
        }
        if self.w0_s.iter().any(|v| !v.is_finite()) {
            return bad("w0 entries must be finite".into());
        }
        for (name, v) in [
            ("sigma", self.sigma),
            ("sigma_r", self.sigma_r),
            ("nu_r", self.nu_r),
            ("alpha_t", self.alpha_t),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and nonnegative, got {v}"));
            }
        }
        if let Some(a) = self.alpha_r {
            if !(a.is_finite() && a >= 0.0) {
                return bad(format!("alpha_r must be finite and nonnegative, got {a}"));
            }
        }
        match &self.diversity {
            DiversitySpec::Uniform(nu) => {
                if !(nu.is_finite() && *nu >= 0.0) {
                    return bad(format!("nu must be finite and nonnegative, got {nu}"));
                }
            }
            DiversitySpec::PerCoordinate(rows) => {
                if rows.len() != self.m {
                    return bad(format!("per-coordinate nu has {} rows, expected m = {}", rows.len(), self.m));
                }
                for row in rows {
                    if row.len() != self.s {
                        return bad(format!("per-coordinate nu row has {} entries, expected s = {}", row.len(), self.s));
                    }
                    if row.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                        return bad("per-coordinate nu entries must be finite and nonnegative".into());
                    }
                }
            }
        }
        Ok(())
    }

    /// Standard deviation of coordinate `j` of task `i`'s truth.
    pub fn nu_coord(&self, task: usize, coord: usize) -> f64 {
        match &self.diversity {
            DiversitySpec::Uniform(nu) => nu / (self.s as f64).sqrt(),
            DiversitySpec::PerCoordinate(rows) => rows[task][coord],
        }
    }

    /// `ν_(i) = sqrt(tr Λ_(i))`.
    pub fn nu_task(&self, task: usize) -> f64 {
        (0..self.s).map(|j| self.nu_coord(task, j).powi(2)).sum::<f64>().sqrt()
    }

    /// Aggregate diversity `ν = sqrt(Σ_i ν_(i)² / m)`.
    pub fn nu(&self) -> f64 {
        match &self.diversity {
            DiversitySpec::Uniform(nu) => *nu,
            DiversitySpec::PerCoordinate(_) => {
                ((0..self.m).map(|i| self.nu_task(i).powi(2)).sum::<f64>() / self.m as f64).sqrt()
            }
        }
    }

    /// `m · n_v`, the number of stacked validation rows.
    pub fn rows(&self) -> usize {
        self.m * self.n_v
    }

    /// Mean truth zero-padded to length `p`.
    pub fn w0(&self) -> DVector<f64> {
        let mut w = DVector::zeros(self.p);
        w.rows_mut(0, self.s).copy_from_slice(&self.w0_s);
        w
    }

    pub fn w0_norm_sq(&self) -> f64 {
        self.w0_s.iter().map(|v| v * v).sum()
    }

    /// Test-time step size, falling back to `n_r / (n_r + p + 1)`.
    pub fn effective_alpha_r(&self) -> f64 {
        self.alpha_r
            .unwrap_or(self.n_r as f64 / (self.n_r + self.p + 1) as f64)
    }

    /// Same system with a different feature count.
    pub fn with_p(&self, p: usize) -> Self {
        Self { p, ..self.clone() }
    }
}

/// One training task's data.
#[derive(Debug, Clone)]
pub struct TaskData {
    /// `p × n_t` training inputs, one sample per column.
    pub x: DMatrix<f64>,
    pub eps: DVector<f64>,
    pub y: DVector<f64>,
    /// `p × n_v` validation inputs.
    pub v: DMatrix<f64>,
    pub eps_v: DVector<f64>,
    pub y_v: DVector<f64>,
    pub w: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct TaskBatch {
    pub tasks: Vec<TaskData>,
}

#[derive(Debug, Clone)]
pub struct TestTask {
    pub w_r: DVector<f64>,
    /// `p × n_r` adaptation inputs.
    pub x_r: DMatrix<f64>,
    pub eps_r: DVector<f64>,
    pub y_r: DVector<f64>,
    pub nu_r: f64,
}

#[derive(Debug, Clone)]
pub struct Truths {
    pub tasks: Vec<DVector<f64>>,
    pub test: DVector<f64>,
}

fn pad_truth(cfg: &MetaConfig, deviation: impl Fn(usize) -> f64) -> DVector<f64> {
    let mut w = DVector::zeros(cfg.p);
    for j in 0..cfg.s {
        w[j] = cfg.w0_s[j] + deviation(j);
    }
    w
}

/// Test-task truth `w_r`; drawn from its own stream so that it is the same
/// whether obtained here or through [`sample_test_task`].
pub fn sample_test_truth(cfg: &MetaConfig, stream: RngStream) -> DVector<f64> {
    let z = standard_normal_vector(&mut stream.with_task(0, Role::TestTruthDeviation).rng(), cfg.s);
    let sd = cfg.nu_r / (cfg.s as f64).sqrt();
    pad_truth(cfg, |j| sd * z[j])
}

/// Draw `w_1..w_m` and `w_r`.
///
/// Deviations only depend on `s`, not on `p`, so the same stream yields the
/// same truths across a sweep over `p`.
pub fn sample_truths(cfg: &MetaConfig, stream: RngStream) -> Result<Truths> {
    cfg.validate()?;
    let tasks = (0..cfg.m)
        .map(|i| {
            let z = standard_normal_vector(&mut stream.with_task(i as u64, Role::TruthDeviation).rng(), cfg.s);
            pad_truth(cfg, |j| cfg.nu_coord(i, j) * z[j])
        })
        .collect();
    Ok(Truths {
        tasks,
        test: sample_test_truth(cfg, stream),
    })
}

pub fn sample_task_batch(cfg: &MetaConfig, truths: &[DVector<f64>], stream: RngStream) -> Result<TaskBatch> {
    cfg.validate()?;
    if truths.len() != cfg.m {
        return Err(Error::dim("sample_task_batch truths", cfg.m, truths.len()));
    }
    let tasks = truths
        .iter()
        .enumerate()
        .map(|(i, w)| {
            if w.len() != cfg.p {
                return Err(Error::dim("sample_task_batch truth length", cfg.p, w.len()));
            }
            let i = i as u64;
            let x = standard_normal_matrix(&mut stream.with_task(i, Role::TrainFeatures).rng(), cfg.p, cfg.n_t);
            let eps = standard_normal_vector(&mut stream.with_task(i, Role::TrainNoise).rng(), cfg.n_t) * cfg.sigma;
            let v = standard_normal_matrix(&mut stream.with_task(i, Role::ValFeatures).rng(), cfg.p, cfg.n_v);
            let eps_v = standard_normal_vector(&mut stream.with_task(i, Role::ValNoise).rng(), cfg.n_v) * cfg.sigma;
            let y = x.tr_mul(w) + &eps;
            let y_v = v.tr_mul(w) + &eps_v;
            Ok(TaskData {
                x,
                eps,
                y,
                v,
                eps_v,
                y_v,
                w: w.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TaskBatch { tasks })
}

/// Sample the test task around `w0` with fluctuation `ν_r` and noise `σ_r`.
pub fn sample_test_task(cfg: &MetaConfig, w0: &DVector<f64>, stream: RngStream) -> Result<TestTask> {
    cfg.validate()?;
    if w0.len() != cfg.p {
        return Err(Error::dim("sample_test_task w0", cfg.p, w0.len()));
    }
    let z = standard_normal_vector(&mut stream.with_task(0, Role::TestTruthDeviation).rng(), cfg.s);
    let sd = cfg.nu_r / (cfg.s as f64).sqrt();
    let mut w_r = w0.clone();
    for j in 0..cfg.s {
        w_r[j] += sd * z[j];
    }
    let x_r = standard_normal_matrix(&mut stream.with_task(0, Role::TestFeatures).rng(), cfg.p, cfg.n_r);
    let eps_r = standard_normal_vector(&mut stream.with_task(0, Role::TestNoise).rng(), cfg.n_r) * cfg.sigma_r;
    let y_r = x_r.tr_mul(&w_r) + &eps_r;
    Ok(TestTask {
        w_r,
        x_r,
        eps_r,
        y_r,
        nu_r: cfg.nu_r,
    })
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    /// Reference-sized system with `‖w0‖² = 100` spread over the `s` coordinates.
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
}
