//! CSV emission. Column order is part of the external contract.
//!
//! Floats are written in the shortest form that parses back to the same
//! double (`inf`, `-inf` and `NaN` for non-finite values). Lines end in LF.

use std::io::Write;

use crate::bounds::BoundReport;
use crate::error::Result;
use crate::experiments::{SweepRecord, TightnessRow};
use crate::task_gen::MetaConfig;

pub const SWEEP_HEADER: [&str; 23] = [
    "p", "s", "m", "n_t", "n_v", "nu", "sigma", "alpha_t", "replicates", "skips", "estimand", "mean", "std", "stderr",
    "b_w0", "b_w_ideal", "b_w", "eta", "b_eig_min", "b_eig_max", "c_eig_min", "c_eig_max", "flags",
];

pub const BOUNDS_HEADER: [&str; 23] = [
    "p", "s", "m", "n_t", "n_v", "nu", "sigma", "alpha_t", "alpha_t_prime", "b_eig_min", "b_eig_max", "c_eig_min",
    "c_eig_max", "D", "b_delta", "b_w0", "b_w0_lower", "b_w_ideal", "b_w", "eta", "branch", "flags", "w0_norm_sq",
];

pub const TIGHTNESS_HEADER: [&str; 7] = ["p", "nu", "sigma", "simulated", "stderr", "approx", "ratio"];

/// Shortest round-trip decimal form.
pub fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        "NaN".into()
    } else if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v:?}")
    }
}

fn writer<W: Write>(w: W) -> csv::Writer<W> {
    csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w)
}

fn system_fields(cfg: &MetaConfig) -> Vec<String> {
    vec![
        cfg.p.to_string(),
        cfg.s.to_string(),
        cfg.m.to_string(),
        cfg.n_t.to_string(),
        cfg.n_v.to_string(),
        fmt_f64(cfg.nu()),
        fmt_f64(cfg.sigma),
        fmt_f64(cfg.alpha_t),
    ]
}

pub fn write_sweep_csv<W: Write>(w: W, records: &[SweepRecord]) -> Result<()> {
    let mut out = writer(w);
    out.write_record(SWEEP_HEADER)?;
    for r in records {
        let b = &r.bounds;
        let mut row = system_fields(&r.cfg);
        row.extend([
            (r.summary.count + r.skips).to_string(),
            r.skips.to_string(),
            r.estimand.name().to_string(),
            fmt_f64(r.summary.mean),
            fmt_f64(r.summary.std),
            fmt_f64(r.summary.stderr),
            fmt_f64(b.b_w0),
            fmt_f64(b.b_w_ideal),
            fmt_f64(b.b_w),
            fmt_f64(b.eta),
            fmt_f64(b.b_eig_min),
            fmt_f64(b.b_eig_max),
            fmt_f64(b.c_eig_min),
            fmt_f64(b.c_eig_max),
            r.flags.join(";"),
        ]);
        out.write_record(&row)?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_bounds_csv<W: Write>(w: W, rows: &[(MetaConfig, BoundReport)]) -> Result<()> {
    let mut out = writer(w);
    out.write_record(BOUNDS_HEADER)?;
    for (cfg, b) in rows {
        let mut row = system_fields(cfg);
        row.extend([
            fmt_f64(b.alpha_t_prime),
            fmt_f64(b.b_eig_min),
            fmt_f64(b.b_eig_max),
            fmt_f64(b.c_eig_min),
            fmt_f64(b.c_eig_max),
            fmt_f64(b.d),
            fmt_f64(b.b_delta),
            fmt_f64(b.b_w0),
            fmt_f64(b.b_w0_lower),
            fmt_f64(b.b_w_ideal),
            fmt_f64(b.b_w),
            fmt_f64(b.eta),
            match b.branch {
                crate::bounds::EigBranch::WideFeatures => "b_eig".into(),
                crate::bounds::EigBranch::NarrowFeatures => "c_eig".into(),
            },
            b.flags.tokens().join(";"),
            fmt_f64(cfg.w0_norm_sq()),
        ]);
        out.write_record(&row)?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_tightness_csv<W: Write>(w: W, rows: &[TightnessRow]) -> Result<()> {
    let mut out = writer(w);
    out.write_record(TIGHTNESS_HEADER)?;
    for r in rows {
        out.write_record([
            r.p.to_string(),
            fmt_f64(r.nu),
            fmt_f64(r.sigma),
            fmt_f64(r.simulated),
            fmt_f64(r.stderr),
            fmt_f64(r.approx),
            fmt_f64(r.ratio),
        ])?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_round_trip() {
        for v in [0.1, 1.0 / 3.0, 1e-300, 6.02e23, -0.0, 100.0, f64::MIN_POSITIVE] {
            assert_eq!(fmt_f64(v).parse::<f64>().unwrap().to_bits(), v.to_bits());
        }
        assert_eq!(fmt_f64(f64::INFINITY), "inf");
        assert_eq!(fmt_f64(f64::NAN), "NaN");
        assert_eq!("inf".parse::<f64>().unwrap(), f64::INFINITY);
    }

    #[test]
    fn empty_sweep_is_header_only() {
        let mut buf = Vec::new();
        write_sweep_csv(&mut buf, &[]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), SWEEP_HEADER.join(",") + "\n");
    }
}
