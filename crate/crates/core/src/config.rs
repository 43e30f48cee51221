//! JSON run configuration.
//!
//! ```json
//! {
//!   "system": { "s": 5, "m": 10, "n_t": 50, "n_v": 3, "n_r": 10,
//!               "sigma": 2.0, "nu": 20.0, "w0_norm_sq": 100.0 },
//!   "sweep": { "p_grid": [40, 100, 1000], "replicates": 100,
//!              "estimands": ["model_error_l2"],
//!              "alpha_t_rule": { "scaled": { "c": 0.02 } } },
//!   "seed": 2023
//! }
//! ```
//!
//! Unknown keys are rejected. Parse errors carry the line and column.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bounds::Constants;
use crate::error::{Error, Result};
use crate::experiments::{AlphaTRule, AuditSettings, Estimand, SweepPlan};
use crate::task_gen::{DiversitySpec, MetaConfig};

pub const DEFAULT_SEED: u64 = 2023;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSection {
    /// Required unless a sweep supplies the grid.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<usize>,
    pub s: usize,
    pub m: usize,
    pub n_t: usize,
    pub n_v: usize,
    pub n_r: usize,
    pub sigma: f64,
    /// Defaults to `sigma`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_r: Option<f64>,
    /// Scalar diversity, spread evenly over the `s` coordinates.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nu: Option<f64>,
    /// `m × s` table of per-coordinate standard deviations.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nu_per_coordinate: Option<Vec<Vec<f64>>>,
    /// Defaults to `nu` (or the aggregate of the table).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nu_r: Option<f64>,
    /// Required unless the sweep uses a scaled rule.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha_t: Option<f64>,
    /// Unset means `n_r / (n_r + p + 1)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha_r: Option<f64>,
    /// Mean truth given by its squared norm, spread evenly over `s` coordinates.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w0_norm_sq: Option<f64>,
    /// Explicit mean truth of length `s`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w0: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub p_grid: Vec<usize>,
    pub replicates: usize,
    #[serde(default = "default_estimands")]
    pub estimands: Vec<Estimand>,
    #[serde(default = "default_rule")]
    pub alpha_t_rule: AlphaTRule,
}

fn default_estimands() -> Vec<Estimand> {
    vec![Estimand::ModelErrorL2]
}

fn default_rule() -> AlphaTRule {
    AlphaTRule::Fixed
}

/// One `(ν, σ)` curve; test-task values default to the training ones.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Curve {
    pub nu: f64,
    pub sigma: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nu_r: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_r: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AuditSection {
    pub replicates: usize,
    pub z_limit: f64,
    pub xxxx_n: usize,
    pub xxxx_p: usize,
    pub xxxx_draws: usize,
    pub xxxx_tolerance: f64,
}

impl Default for AuditSection {
    fn default() -> Self {
        let d = AuditSettings::default();
        Self {
            replicates: d.replicates,
            z_limit: d.z_limit,
            xxxx_n: d.xxxx_n,
            xxxx_p: d.xxxx_p,
            xxxx_draws: d.xxxx_draws,
            xxxx_tolerance: d.xxxx_tolerance,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    pub system: SystemSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSection>,
    /// Several `(ν, σ)` curves sharing everything else.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub curves: Vec<Curve>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub constants: Option<Constants>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audit: Option<AuditSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl std::str::FromStr for RunConfigFile {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::ConfigParse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        cfg.check()?;
        Ok(cfg)
    }
}

impl RunConfigFile {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        text.parse()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data serializes")
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(DEFAULT_SEED)
    }

    pub fn constants(&self) -> Constants {
        self.constants.unwrap_or_default()
    }

    pub fn audit_settings(&self) -> AuditSettings {
        let a = self.audit.unwrap_or_default();
        AuditSettings {
            replicates: a.replicates,
            seed: self.seed(),
            z_limit: a.z_limit,
            xxxx_n: a.xxxx_n,
            xxxx_p: a.xxxx_p,
            xxxx_draws: a.xxxx_draws,
            xxxx_tolerance: a.xxxx_tolerance,
            threads: 0,
        }
    }

    /// Cross-field checks that serde cannot express.
    fn check(&self) -> Result<()> {
        let s = &self.system;
        match (&s.nu, &s.nu_per_coordinate) {
            (Some(_), Some(_)) => return Err(Error::Config("give either nu or nu_per_coordinate, not both".into())),
            (None, None) => return Err(Error::Config("missing nu (or nu_per_coordinate)".into())),
            (None, Some(_)) if !self.curves.is_empty() => {
                return Err(Error::Config("curves need a scalar nu in the system section".into()))
            }
            _ => {}
        }
        match (&s.w0_norm_sq, &s.w0) {
            (Some(_), Some(_)) => return Err(Error::Config("give either w0_norm_sq or w0, not both".into())),
            (None, None) => return Err(Error::Config("missing w0_norm_sq (or w0)".into())),
            (Some(v), None) if v.is_nan() || *v < 0.0 => return Err(Error::Config("w0_norm_sq must be nonnegative".into())),
            _ => {}
        }
        if s.p.is_none() && self.sweep.is_none() {
            return Err(Error::Config("system.p is required without a sweep section".into()));
        }
        for cfg in self.curve_configs(None)? {
            cfg.validate()?;
        }
        if let Some(plans) = self.sweep.as_ref().map(|_| self.sweep_plans()) {
            for plan in plans? {
                plan.validate()?;
            }
        }
        Ok(())
    }

    fn alpha_t_at(&self, p: usize) -> Result<f64> {
        if let Some(a) = self.system.alpha_t {
            return Ok(a);
        }
        match self.sweep.as_ref().map(|s| s.alpha_t_rule) {
            Some(AlphaTRule::Scaled { c }) => Ok(c / p as f64),
            _ => Err(Error::Config("alpha_t is required unless the sweep uses a scaled rule".into())),
        }
    }

    /// System at feature count `p` (default: `system.p`, else the first grid value).
    pub fn meta_config(&self, p: Option<usize>) -> Result<MetaConfig> {
        let s = &self.system;
        let p = p
            .or(s.p)
            .or_else(|| self.sweep.as_ref().and_then(|w| w.p_grid.first().copied()))
            .ok_or_else(|| Error::Config("no feature count p given".into()))?;
        let w0_s = match (&s.w0, s.w0_norm_sq) {
            (Some(w), _) => w.clone(),
            (None, Some(n)) => vec![(n / s.s as f64).sqrt(); s.s],
            (None, None) => return Err(Error::Config("missing w0_norm_sq (or w0)".into())),
        };
        let diversity = match (&s.nu, &s.nu_per_coordinate) {
            (Some(nu), _) => DiversitySpec::Uniform(*nu),
            (None, Some(t)) => DiversitySpec::PerCoordinate(t.clone()),
            (None, None) => return Err(Error::Config("missing nu (or nu_per_coordinate)".into())),
        };
        let mut cfg = MetaConfig {
            p,
            s: s.s,
            m: s.m,
            n_t: s.n_t,
            n_v: s.n_v,
            n_r: s.n_r,
            sigma: s.sigma,
            sigma_r: s.sigma_r.unwrap_or(s.sigma),
            alpha_t: self.alpha_t_at(p)?,
            alpha_r: s.alpha_r,
            w0_s,
            diversity,
            nu_r: 0.0,
        };
        cfg.nu_r = s.nu_r.unwrap_or_else(|| cfg.nu());
        Ok(cfg)
    }

    /// One system per curve (or just the system when no curves are listed).
    pub fn curve_configs(&self, p: Option<usize>) -> Result<Vec<MetaConfig>> {
        let base = self.meta_config(p)?;
        if self.curves.is_empty() {
            return Ok(vec![base]);
        }
        Ok(self
            .curves
            .iter()
            .map(|c| MetaConfig {
                sigma: c.sigma,
                sigma_r: c.sigma_r.unwrap_or(c.sigma),
                diversity: DiversitySpec::Uniform(c.nu),
                nu_r: c.nu_r.unwrap_or(c.nu),
                ..base.clone()
            })
            .collect())
    }

    pub fn sweep_plans(&self) -> Result<Vec<SweepPlan>> {
        let sweep = self
            .sweep
            .as_ref()
            .ok_or_else(|| Error::Config("config has no sweep section".into()))?;
        let first = *sweep
            .p_grid
            .first()
            .ok_or_else(|| Error::Config("p_grid is empty".into()))?;
        Ok(self
            .curve_configs(Some(first))?
            .into_iter()
            .map(|base| SweepPlan {
                base,
                p_grid: sweep.p_grid.clone(),
                replicates: sweep.replicates,
                seed: self.seed(),
                estimands: sweep.estimands.clone(),
                alpha_t_rule: sweep.alpha_t_rule,
                threads: 0,
            })
            .collect())
    }
}
