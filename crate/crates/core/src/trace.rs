//! Per-step scenario traces and their CSV form.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::SimError;
use crate::flags::StatusFlags;

/// Bumped whenever [`TRACE_COLUMNS`] changes.
pub const TRACE_SCHEMA_VERSION: u32 = 1;

/// CSV header, in column order. The first eleven columns are the plant
/// signals; the rest are controller and estimator internals.
pub const TRACE_COLUMNS: [&str; 20] = [
    "t",
    "omega_l",
    "omega_r",
    "v_x",
    "kappa_l",
    "kappa_r",
    "fx_l",
    "fx_r",
    "t_m",
    "t_b",
    "flags",
    "kappa_ref",
    "kappa_hat",
    "zeta",
    "xi",
    "a_x",
    "a_y",
    "mu",
    "driver_torque",
    "v_slip_ref",
];

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub t: f64,
    pub omega_l: f64,
    pub omega_r: f64,
    pub v_x: f64,
    /// True slip of each wheel.
    pub kappa_l: f64,
    pub kappa_r: f64,
    pub fx_l: f64,
    pub fx_r: f64,
    /// Commanded motor torque.
    pub t_m: f64,
    pub t_b: f64,
    pub flags: u32,
    /// Signed slip reference handed to the tracking controller.
    pub kappa_ref: f64,
    pub kappa_hat: f64,
    pub zeta: f64,
    pub xi: f64,
    pub a_x: f64,
    pub a_y: f64,
    pub mu: f64,
    pub driver_torque: f64,
    /// Mean slip-velocity reference of both wheels (m/s).
    pub v_slip_ref: f64,
}

impl TraceRow {
    pub fn status(&self) -> StatusFlags {
        StatusFlags::from_bits_truncate(self.flags)
    }

    pub fn mpc_active(&self) -> bool {
        self.status().contains(StatusFlags::MPC_ACTIVE)
    }

    /// +1 driving, -1 braking.
    pub fn mode_sign(&self) -> f64 {
        if self.status().contains(StatusFlags::BRAKING) {
            -1.0
        } else {
            1.0
        }
    }

    /// Fields in [`TRACE_COLUMNS`] order.
    pub fn values(&self) -> [f64; 20] {
        [
            self.t,
            self.omega_l,
            self.omega_r,
            self.v_x,
            self.kappa_l,
            self.kappa_r,
            self.fx_l,
            self.fx_r,
            self.t_m,
            self.t_b,
            f64::from(self.flags),
            self.kappa_ref,
            self.kappa_hat,
            self.zeta,
            self.xi,
            self.a_x,
            self.a_y,
            self.mu,
            self.driver_torque,
            self.v_slip_ref,
        ]
    }

    fn from_values(v: &[f64]) -> Self {
        Self {
            t: v[0],
            omega_l: v[1],
            omega_r: v[2],
            v_x: v[3],
            kappa_l: v[4],
            kappa_r: v[5],
            fx_l: v[6],
            fx_r: v[7],
            t_m: v[8],
            t_b: v[9],
            flags: v[10] as u32,
            kappa_ref: v[11],
            kappa_hat: v[12],
            zeta: v[13],
            xi: v[14],
            a_x: v[15],
            a_y: v[16],
            mu: v[17],
            driver_torque: v[18],
            v_slip_ref: v[19],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub maneuver: String,
    pub sample_time: f64,
    pub wheel_radius: f64,
    /// Force-maximizing slip of the simulated tire, for evaluation only.
    pub kappa_star: Option<f64>,
    pub rows: Vec<TraceRow>,
}

impl Trace {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), SimError> {
        let mut out = csv::Writer::from_writer(w);
        let err = |e: csv::Error| SimError::Export(e.to_string());
        out.write_record(TRACE_COLUMNS).map_err(err)?;
        for row in &self.rows {
            // shortest round-trip formatting keeps files bit-exact
            let fields: Vec<String> = row.values().iter().map(|v| format!("{v:?}")).collect();
            out.write_record(&fields).map_err(err)?;
        }
        out.flush().map_err(|e| SimError::Export(e.to_string()))?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("csv is utf-8")
    }

    /// Reads rows back from CSV. Metadata (sample time, radius, optimum) is
    /// not part of the file and is inferred or left empty.
    pub fn read_csv<R: Read>(r: R) -> Result<Self, SimError> {
        let mut rdr = csv::Reader::from_reader(r);
        let header = rdr.headers().map_err(|e| SimError::Export(e.to_string()))?.clone();
        if header.iter().ne(TRACE_COLUMNS.iter().copied()) {
            return Err(SimError::Export(format!("unexpected header: {header:?}")));
        }
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| SimError::Export(e.to_string()))?;
            let v: Result<Vec<f64>, _> = rec.iter().map(str::parse::<f64>).collect();
            let v = v.map_err(|e| SimError::Export(e.to_string()))?;
            rows.push(TraceRow::from_values(&v));
        }
        let sample_time = if rows.len() > 1 { rows[1].t - rows[0].t } else { 0.0 };
        let wheel_radius = rows
            .iter()
            .find(|r| r.omega_l > 0.0 && r.kappa_l == 0.0)
            .map(|r| r.v_x / r.omega_l)
            .unwrap_or(0.0);
        Ok(Self { maneuver: String::new(), sample_time, wheel_radius, kappa_star: None, rows })
    }

    pub fn column(&self, f: impl Fn(&TraceRow) -> f64) -> Vec<f64> {
        self.rows.iter().map(f).collect()
    }
}

/// Reduces a series to at most `2 * buckets` points, keeping the minimum and
/// maximum of every bucket in time order so that peaks survive plotting.
pub fn downsample_minmax(t: &[f64], y: &[f64], buckets: usize) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(t.len(), y.len());
    if buckets == 0 || y.len() <= 2 * buckets {
        return (t.to_vec(), y.to_vec());
    }
    let size = y.len().div_ceil(buckets);
    let (mut to, mut yo) = (Vec::with_capacity(2 * buckets), Vec::with_capacity(2 * buckets));
    for start in (0..y.len()).step_by(size) {
        let end = (start + size).min(y.len());
        let (mut lo, mut hi) = (start, start);
        for i in start..end {
            if y[i] < y[lo] {
                lo = i;
            }
            if y[i] > y[hi] {
                hi = i;
            }
        }
        for i in if lo <= hi { [lo, hi] } else { [hi, lo] } {
            if to.last() != Some(&t[i]) {
                to.push(t[i]);
                yo.push(y[i]);
            }
        }
    }
    (to, yo)
}
