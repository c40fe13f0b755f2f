//! CSV and JSON writers. CSV headers are fixed by the row structs.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use mcfqkd_core::geometry::Ring;
use mcfqkd_core::link::LinkPoint;
use mcfqkd_core::runner::{PairReport, PairTally, StabilityPoint};
use mcfqkd_core::sim::Basis;
use serde::Serialize;

#[derive(Debug, Serialize)]
pub struct TallyRow {
    pub pair_id: usize,
    pub basis_a: Basis,
    pub basis_b: Basis,
    pub c_pp: u64,
    pub c_pm: u64,
    pub c_mp: u64,
    pub c_mm: u64,
    pub duration_s: f64,
    pub accidentals: u64,
}

impl From<&PairTally> for TallyRow {
    fn from(t: &PairTally) -> Self {
        let c = t.tally.counts;
        Self {
            pair_id: t.pair_id,
            basis_a: t.tally.basis_a,
            basis_b: t.tally.basis_b,
            c_pp: c.pp,
            c_pm: c.pm,
            c_mp: c.mp,
            c_mm: c.mm,
            duration_s: t.tally.duration_s,
            accidentals: t.tally.accidentals,
        }
    }
}

#[derive(Debug, Serialize)]
pub struct ReportRow {
    pub pair_id: usize,
    pub ring: Ring,
    pub visibility_hv: Option<f64>,
    pub visibility_da: Option<f64>,
    pub qber_hv: Option<f64>,
    pub qber_da: Option<f64>,
    pub coin_rate_hv: f64,
    pub coin_rate_da: f64,
    pub skr_bits_s: f64,
}

impl From<&PairReport> for ReportRow {
    fn from(r: &PairReport) -> Self {
        Self {
            pair_id: r.pair_id,
            ring: r.ring,
            visibility_hv: r.visibility_hv,
            visibility_da: r.visibility_da,
            qber_hv: r.qber_hv,
            qber_da: r.qber_da,
            coin_rate_hv: r.coin_rate_hv,
            coin_rate_da: r.coin_rate_da,
            skr_bits_s: r.skr_bits_s,
        }
    }
}

#[derive(Debug, Serialize)]
pub struct LinkRow {
    pub length_km: f64,
    pub coin_rate: f64,
    pub qber: f64,
    pub skr_pair_bits_s: f64,
    pub skr_ring_bits_s: f64,
}

impl From<&LinkPoint> for LinkRow {
    fn from(p: &LinkPoint) -> Self {
        Self {
            length_km: p.length_km,
            coin_rate: p.coin_rate(),
            qber: p.qber(),
            skr_pair_bits_s: p.skr_pair_bits_s,
            skr_ring_bits_s: p.skr_ring_bits_s,
        }
    }
}

#[derive(Debug, Serialize)]
pub struct StabilityRow {
    pub time_h: f64,
    pub qber_hv: f64,
    pub qber_da: f64,
    pub qber_mean: f64,
    pub coin_rate_hv: f64,
    pub coin_rate_da: f64,
    pub skr_bits_s: f64,
}

impl From<&StabilityPoint> for StabilityRow {
    fn from(p: &StabilityPoint) -> Self {
        Self {
            time_h: p.time_h,
            qber_hv: p.qber_hv,
            qber_da: p.qber_da,
            qber_mean: p.qber_mean(),
            coin_rate_hv: p.coin_rate_hv,
            coin_rate_da: p.coin_rate_da,
            skr_bits_s: p.skr_bits_s,
        }
    }
}

/// Write rows with a header, even when there are no rows.
pub fn write_csv<R: Serialize>(path: &Path, header: &[&str], rows: impl IntoIterator<Item = R>) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path).with_context(|| format!("creating {}", path.display()))?;
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub const TALLY_HEADER: &[&str] = &["pair_id", "basis_a", "basis_b", "c_pp", "c_pm", "c_mp", "c_mm", "duration_s", "accidentals"];
pub const REPORT_HEADER: &[&str] = &[
    "pair_id",
    "ring",
    "visibility_hv",
    "visibility_da",
    "qber_hv",
    "qber_da",
    "coin_rate_hv",
    "coin_rate_da",
    "skr_bits_s",
];
pub const LINK_HEADER: &[&str] = &["length_km", "coin_rate", "qber", "skr_pair_bits_s", "skr_ring_bits_s"];
pub const STABILITY_HEADER: &[&str] = &["time_h", "qber_hv", "qber_da", "qber_mean", "coin_rate_hv", "coin_rate_da", "skr_bits_s"];

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s).with_context(|| format!("writing {}", path.display()))
}
