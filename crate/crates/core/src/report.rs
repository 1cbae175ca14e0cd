//! Per-epoch run logs (CSV) and the summary computed from them.
//!
//! Values are written with Rust's shortest round-trip float formatting, so
//! a log read back yields bit-identical records and an identical summary.

use std::fmt::{self, Write as _};
use std::path::Path;

use nalgebra::{Vector3, Vector4};

use crate::attitude::{error_quat, Quaternion};
use crate::error::{Error, Result};

/// One scan epoch of a closed-loop run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub t: f64,
    pub true_rho: Vector3<f64>,
    pub true_q: Quaternion,
    pub est_rho: Vector3<f64>,
    pub est_q: Quaternion,
    pub phi: bool,
    pub epsilon: f64,
    pub iterations: usize,
    pub nees: f64,
    pub trace_r: f64,
    pub est_bg: Vector3<f64>,
    pub est_ba: Vector3<f64>,
    pub est_rho1: Vector3<f64>,
    pub est_rho2: Vector3<f64>,
    pub true_bg: Vector3<f64>,
    pub true_ba: Vector3<f64>,
    pub true_rho1: Vector3<f64>,
    pub true_rho2: Vector3<f64>,
    pub sd_bg: Vector3<f64>,
    pub sd_ba: Vector3<f64>,
    pub sd_rho1: Vector3<f64>,
    pub sd_rho2: Vector3<f64>,
}

impl EpochRecord {
    pub fn position_error(&self) -> f64 {
        (self.est_rho - self.true_rho).norm()
    }

    /// Rotation angle between estimated and true attitude, rad.
    pub fn attitude_error(&self) -> f64 {
        let e = error_quat(&self.true_q, &self.est_q);
        2.0 * e.v.norm().atan2(e.w)
    }
}

fn vec_names(prefix: &str) -> [String; 3] {
    ["x", "y", "z"].map(|a| format!("{prefix}_{a}"))
}

fn quat_names(prefix: &str) -> [String; 4] {
    ["x", "y", "z", "w"].map(|a| format!("{prefix}_{a}"))
}

/// Column names in file order.
pub fn columns() -> Vec<String> {
    let mut c = vec!["t".to_string()];
    c.extend(vec_names("true_rho"));
    c.extend(quat_names("true_q"));
    c.extend(vec_names("est_rho"));
    c.extend(quat_names("est_q"));
    for s in ["phi", "eps", "iters", "nees", "trace_r"] {
        c.push(s.to_string());
    }
    for p in [
        "est_bg", "est_ba", "est_rho1", "est_rho2", "true_bg", "true_ba", "true_rho1",
        "true_rho2", "sd_bg", "sd_ba", "sd_rho1", "sd_rho2",
    ] {
        c.extend(vec_names(p));
    }
    c
}

fn push_vec(out: &mut String, v: &Vector3<f64>) {
    let _ = write!(out, ",{},{},{}", v.x, v.y, v.z);
}

fn push_quat(out: &mut String, q: &Quaternion) {
    let _ = write!(out, ",{},{},{},{}", q.v.x, q.v.y, q.v.z, q.w);
}

pub fn format_record(r: &EpochRecord) -> String {
    let mut s = format!("{}", r.t);
    push_vec(&mut s, &r.true_rho);
    push_quat(&mut s, &r.true_q);
    push_vec(&mut s, &r.est_rho);
    push_quat(&mut s, &r.est_q);
    let _ = write!(
        s,
        ",{},{},{},{},{}",
        u8::from(r.phi),
        r.epsilon,
        r.iterations,
        r.nees,
        r.trace_r
    );
    for v in [
        &r.est_bg, &r.est_ba, &r.est_rho1, &r.est_rho2, &r.true_bg, &r.true_ba, &r.true_rho1,
        &r.true_rho2, &r.sd_bg, &r.sd_ba, &r.sd_rho1, &r.sd_rho2,
    ] {
        push_vec(&mut s, v);
    }
    s
}

pub fn format_csv(records: &[EpochRecord]) -> String {
    let mut out = columns().join(",");
    out.push('\n');
    for r in records {
        out.push_str(&format_record(r));
        out.push('\n');
    }
    out
}

pub fn write_csv(path: &Path, records: &[EpochRecord]) -> Result<()> {
    crate::io::write_string(path, &format_csv(records))
}

fn read_fields(vals: &[f64]) -> EpochRecord {
    let mut i = 0usize;
    let mut s = || {
        i += 1;
        vals[i - 1]
    };
    let t = s();
    let true_rho = Vector3::new(s(), s(), s());
    let true_q = Quaternion::from_vector4(&Vector4::new(s(), s(), s(), s()));
    let est_rho = Vector3::new(s(), s(), s());
    let est_q = Quaternion::from_vector4(&Vector4::new(s(), s(), s(), s()));
    let phi = s() != 0.0;
    let epsilon = s();
    let iterations = s() as usize;
    let nees = s();
    let trace_r = s();
    let mut v = || Vector3::new(s(), s(), s());
    EpochRecord {
        t,
        true_rho,
        true_q,
        est_rho,
        est_q,
        phi,
        epsilon,
        iterations,
        nees,
        trace_r,
        est_bg: v(),
        est_ba: v(),
        est_rho1: v(),
        est_rho2: v(),
        true_bg: v(),
        true_ba: v(),
        true_rho1: v(),
        true_rho2: v(),
        sd_bg: v(),
        sd_ba: v(),
        sd_rho1: v(),
        sd_rho2: v(),
    }
}

/// Parses a run log. `path` is used in error messages only.
pub fn parse_csv(path: &Path, text: &str) -> Result<Vec<EpochRecord>> {
    let expected = columns();
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::parse(path, 1, "run log is empty"))?;
    let names: Vec<&str> = header.split(',').map(str::trim).collect();
    if names != expected {
        return Err(Error::parse(path, 1, "unexpected column header"));
    }
    let width = expected.len();
    let mut records = Vec::new();
    for (row, (i, line)) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != width {
            return Err(Error::parse(
                path,
                i + 1,
                format!("row {}: expected {width} fields, found {}", row + 1, fields.len()),
            ));
        }
        let mut vals = Vec::with_capacity(width);
        for (j, f) in fields.iter().enumerate() {
            let v: f64 = f.trim().parse().map_err(|_| {
                Error::parse(
                    path,
                    i + 1,
                    format!("row {}: column '{}' is not a number: {f:?}", row + 1, expected[j]),
                )
            })?;
            vals.push(v);
        }
        records.push(read_fields(&vals));
    }
    if records.is_empty() {
        return Err(Error::parse(path, 1, "run log has no data rows"));
    }
    Ok(records)
}

pub fn read_csv(path: &Path) -> Result<Vec<EpochRecord>> {
    parse_csv(path, &crate::io::read_to_string(path)?)
}

/// Aggregate statistics of one run.
#[derive(Clone, Debug, PartialEq)]
pub struct Summary {
    pub epochs: usize,
    pub phi_rate: f64,
    pub rmse_position: f64,
    pub rmse_attitude: f64,
    pub mean_nees: f64,
    pub mean_iterations: f64,
    pub final_bg: (Vector3<f64>, Vector3<f64>),
    pub final_ba: (Vector3<f64>, Vector3<f64>),
    /// Maximal runs of consecutive gated epochs, as `(first t, last t, count)`.
    pub fault_windows: Vec<(f64, f64, usize)>,
}

impl Summary {
    pub fn from_records(records: &[EpochRecord]) -> Result<Self> {
        let last = records
            .last()
            .ok_or_else(|| Error::InvalidArgument("no epochs to summarize".into()))?;
        let n = records.len() as f64;
        let accepted = records.iter().filter(|r| r.phi).count();
        let pos2: f64 = records.iter().map(|r| r.position_error().powi(2)).sum();
        let att2: f64 = records.iter().map(|r| r.attitude_error().powi(2)).sum();
        let finite_nees: Vec<f64> = records.iter().map(|r| r.nees).filter(|v| v.is_finite()).collect();
        let mean_nees = if finite_nees.is_empty() {
            f64::NAN
        } else {
            finite_nees.iter().sum::<f64>() / finite_nees.len() as f64
        };
        let registered: Vec<usize> = records
            .iter()
            .filter(|r| r.iterations > 0)
            .map(|r| r.iterations)
            .collect();
        let mean_iterations = if registered.is_empty() {
            0.0
        } else {
            registered.iter().sum::<usize>() as f64 / registered.len() as f64
        };
        let mut fault_windows: Vec<(f64, f64, usize)> = Vec::new();
        let mut open = false;
        for r in records {
            if r.phi {
                open = false;
                continue;
            }
            match (open, fault_windows.last_mut()) {
                (true, Some(w)) => {
                    w.1 = r.t;
                    w.2 += 1;
                }
                _ => {
                    fault_windows.push((r.t, r.t, 1));
                    open = true;
                }
            }
        }
        Ok(Self {
            epochs: records.len(),
            phi_rate: accepted as f64 / n,
            rmse_position: (pos2 / n).sqrt(),
            rmse_attitude: (att2 / n).sqrt(),
            mean_nees,
            mean_iterations,
            final_bg: (last.est_bg, last.true_bg),
            final_ba: (last.est_ba, last.true_ba),
            fault_windows,
        })
    }
}

fn fmt_vec(v: &Vector3<f64>) -> String {
    format!("{:.6e} {:.6e} {:.6e}", v.x, v.y, v.z)
}

impl fmt::Display for Summary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "epochs             {}", self.epochs)?;
        writeln!(f, "phi_rate           {:.6}", self.phi_rate)?;
        writeln!(f, "rmse_position_m    {:.6e}", self.rmse_position)?;
        writeln!(f, "rmse_attitude_rad  {:.6e}", self.rmse_attitude)?;
        writeln!(f, "mean_nees          {:.6}", self.mean_nees)?;
        writeln!(f, "mean_iterations    {:.6}", self.mean_iterations)?;
        writeln!(f, "final_bias_gyro    est {} true {}", fmt_vec(&self.final_bg.0), fmt_vec(&self.final_bg.1))?;
        writeln!(f, "final_bias_accel   est {} true {}", fmt_vec(&self.final_ba.0), fmt_vec(&self.final_ba.1))?;
        if self.fault_windows.is_empty() {
            writeln!(f, "fault_windows      none")
        } else {
            let spans: Vec<String> = self
                .fault_windows
                .iter()
                .map(|(a, b, n)| format!("{a}-{b} ({n})"))
                .collect();
            writeln!(f, "fault_windows      {}", spans.join("; "))
        }
    }
}
