//! Command-line surface.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 numerical
//! degeneracy, 3 verification failure.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::bounds::{approx_b_delta, bound_stack, descent_floor, FloorVerdict};
use crate::config::RunConfigFile;
use crate::error::{Error, Result};
use crate::experiments::{
    audit_expectations, identity_audit, run_sweep, sample_system, tightness_comparison, AuditTable, Formulas,
};
use crate::output::{fmt_f64, write_bounds_csv, write_sweep_csv, write_tightness_csv};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_DEGENERATE: i32 = 2;
pub const EXIT_VERIFY: i32 = 3;

/// Environment variable holding the worker count (0 = automatic).
pub const THREADS_ENV: &str = "METADESCENT_THREADS";

#[derive(Debug, Parser)]
#[command(name = "metadescent", version, about = "Overfitted MAML linear regression: sweeps, bounds and audits")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, clap::Args)]
pub struct RunFlags {
    /// Master seed (overrides the config).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output path (overrides the config).
    #[arg(long, short)]
    pub output: Option<PathBuf>,
    /// Replicate count (overrides the config).
    #[arg(long)]
    pub replicates: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Monte-Carlo sweep over the configured p grid, written as CSV.
    Sweep {
        config: PathBuf,
        #[command(flatten)]
        flags: RunFlags,
    },
    /// Evaluate the bound stack and print every quantity.
    Bounds {
        config: PathBuf,
        /// Also write the report as CSV.
        #[arg(long, short)]
        output: Option<PathBuf>,
    },
    /// Audit closed-form expectations and algebraic identities.
    Verify {
        config: PathBuf,
        #[command(flatten)]
        flags: RunFlags,
    },
    /// Descent-floor verdict of the simplified bound, one line per curve.
    Floor {
        #[arg(required = true)]
        configs: Vec<PathBuf>,
    },
    /// Simulated model error next to the simplified bound.
    Tightness {
        config: PathBuf,
        #[command(flatten)]
        flags: RunFlags,
    },
    /// Write B and gamma of one replicate as plain-text matrices.
    Dump {
        config: PathBuf,
        /// Feature count (defaults to the config's).
        #[arg(long)]
        p: Option<usize>,
        #[arg(long, default_value_t = 0)]
        replicate: u64,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory.
        #[arg(long, short)]
        output: PathBuf,
    },
}

/// Parse arguments, run, and return the process exit code.
pub fn main_with_args<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_CONFIG,
            };
            let rendered = e.render().to_string();
            let _ = if code == EXIT_OK {
                write!(stdout, "{rendered}")
            } else {
                write!(stderr, "{rendered}")
            };
            return code;
        }
    };
    match run(cli.command, stdout) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Degenerate { .. } => EXIT_DEGENERATE,
        _ => EXIT_CONFIG,
    }
}

fn threads() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{THREADS_ENV} must be a nonnegative integer, got {v:?}"))),
        Err(_) => Ok(0),
    }
}

fn load(path: &Path, flags: Option<&RunFlags>) -> Result<RunConfigFile> {
    let mut cfg = RunConfigFile::from_path(path)?;
    if let Some(f) = flags {
        if f.seed.is_some() {
            cfg.seed = f.seed;
        }
        if let Some(r) = f.replicates {
            if let Some(s) = cfg.sweep.as_mut() {
                s.replicates = r;
            }
            let mut a = cfg.audit.unwrap_or_default();
            a.replicates = r;
            cfg.audit = Some(a);
        }
        if f.output.is_some() {
            cfg.output = f.output.clone();
        }
    }
    Ok(cfg)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("cannot write {}: {e}", path.display()))))
}

/// Run a parsed command. Returns the exit code for non-error outcomes.
pub fn run(command: Command, stdout: &mut dyn Write) -> Result<i32> {
    match command {
        Command::Sweep { config, flags } => {
            let cfg = load(&config, Some(&flags))?;
            let threads = threads()?;
            let mut records = Vec::new();
            for mut plan in cfg.sweep_plans()? {
                plan.threads = threads;
                records.extend(run_sweep(&plan)?);
            }
            match &cfg.output {
                Some(path) => write_sweep_csv(create(path)?, &records)?,
                None => write_sweep_csv(&mut *stdout, &records)?,
            }
            Ok(EXIT_OK)
        }
        Command::Bounds { config, output } => {
            let cfg = load(&config, None)?;
            let grid: Vec<Option<usize>> = match (&cfg.system.p, &cfg.sweep) {
                (None, Some(s)) => s.p_grid.iter().map(|&p| Some(p)).collect(),
                _ => vec![None],
            };
            let mut rows = Vec::new();
            for p in grid {
                for mc in cfg.curve_configs(p)? {
                    let b = bound_stack(&mc);
                    writeln!(
                        stdout,
                        "p={} s={} m={} n_t={} n_v={} nu={} sigma={} alpha_t={}",
                        mc.p,
                        mc.s,
                        mc.m,
                        mc.n_t,
                        mc.n_v,
                        fmt_f64(mc.nu()),
                        fmt_f64(mc.sigma),
                        fmt_f64(mc.alpha_t)
                    )?;
                    for (sym, v) in b.fields() {
                        writeln!(stdout, "  {sym:<10} = {}", fmt_f64(v))?;
                    }
                    let branch = match b.branch {
                        crate::bounds::EigBranch::WideFeatures => "p > n_t, using b_eig,min",
                        crate::bounds::EigBranch::NarrowFeatures => "p <= n_t, using c_eig,min",
                    };
                    writeln!(stdout, "  branch     : {branch}")?;
                    let tokens = b.flags.tokens();
                    writeln!(stdout, "  flags      : {}", if tokens.is_empty() { "none".into() } else { tokens.join(";") })?;
                    rows.push((mc, b));
                }
            }
            if let Some(path) = output {
                write_bounds_csv(create(&path)?, &rows)?;
            }
            Ok(EXIT_OK)
        }
        Command::Verify { config, flags } => {
            let cfg = load(&config, Some(&flags))?;
            let mut settings = cfg.audit_settings();
            settings.threads = threads()?;
            let mut all_pass = true;
            for mc in cfg.curve_configs(None)? {
                let mut table = audit_expectations(&mc, &settings, &Formulas::default())?;
                table.rows.extend(identity_audit(&mc, settings.replicates.min(100), settings.seed)?);
                print_audit(stdout, &mc, &table)?;
                all_pass &= table.all_pass();
            }
            writeln!(stdout, "{}", if all_pass { "verify: PASS" } else { "verify: FAIL" })?;
            Ok(if all_pass { EXIT_OK } else { EXIT_VERIFY })
        }
        Command::Floor { configs } => {
            for path in configs {
                let cfg = load(&path, None)?;
                let c = cfg.constants();
                for mc in cfg.curve_configs(None)? {
                    if mc.w0_norm_sq() == 0.0 {
                        return Err(Error::Config(format!("{}: floor needs a nonzero w0", path.display())));
                    }
                    let b_delta = approx_b_delta(&mc, &c);
                    let head = format!(
                        "{}: nu={} sigma={} m*n_v={} C4={}",
                        path.display(),
                        fmt_f64(mc.nu()),
                        fmt_f64(mc.sigma),
                        mc.rows(),
                        fmt_f64(c.c4)
                    );
                    match descent_floor(&mc, c.c4, b_delta) {
                        FloorVerdict::MonotoneDecreasing { g } => {
                            writeln!(stdout, "{head} g={} monotone_decreasing", fmt_f64(g))?
                        }
                        FloorVerdict::Floor { g, p_star, floor_value } => writeln!(
                            stdout,
                            "{head} g={} p_star={} floor_value={}",
                            fmt_f64(g),
                            fmt_f64(p_star),
                            fmt_f64(floor_value)
                        )?,
                    }
                }
            }
            Ok(EXIT_OK)
        }
        Command::Tightness { config, flags } => {
            let cfg = load(&config, Some(&flags))?;
            let threads = threads()?;
            let plans: Vec<_> = cfg
                .sweep_plans()?
                .into_iter()
                .map(|mut p| {
                    p.threads = threads;
                    p
                })
                .collect();
            let rows = tightness_comparison(&plans, &cfg.constants())?;
            match &cfg.output {
                Some(path) => write_tightness_csv(create(path)?, &rows)?,
                None => write_tightness_csv(&mut *stdout, &rows)?,
            }
            Ok(EXIT_OK)
        }
        Command::Dump {
            config,
            p,
            replicate,
            seed,
            output,
        } => {
            let mut cfg = load(&config, None)?;
            if seed.is_some() {
                cfg.seed = seed;
            }
            let mc = cfg.meta_config(p)?;
            let r = sample_system(&mc, cfg.seed(), replicate)?;
            r.system.dump(&output)?;
            writeln!(stdout, "wrote {} and {}", output.join("B.txt").display(), output.join("gamma.txt").display())?;
            Ok(EXIT_OK)
        }
    }
}

fn print_audit(out: &mut dyn Write, mc: &crate::task_gen::MetaConfig, table: &AuditTable) -> Result<()> {
    writeln!(
        out,
        "audit at p={} m={} n_v={} n_t={} nu={} sigma={}",
        mc.p,
        mc.m,
        mc.n_v,
        mc.n_t,
        fmt_f64(mc.nu()),
        fmt_f64(mc.sigma)
    )?;
    writeln!(out, "{:<30} {:>14} {:>14} {:>12} {:>9}  result", "check", "empirical", "target", "stderr", "z")?;
    for r in &table.rows {
        writeln!(
            out,
            "{:<30} {:>14.6e} {:>14.6e} {:>12.4e} {:>9.3}  {}",
            r.name,
            r.empirical,
            r.theoretical,
            r.stderr,
            r.z,
            if r.pass { "pass" } else { "FAIL" }
        )?;
    }
    Ok(())
}
