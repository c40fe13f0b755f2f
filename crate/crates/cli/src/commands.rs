//! Command implementations. Each writes into an output directory and
//! returns a summary for the terminal.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context as _, Result};
use log::{info, warn};
use mcfqkd_core::geometry::{CorePair, Ring};
use mcfqkd_core::link::{LinkModel, LinkPoint};
use mcfqkd_core::runner::{
    analyze_pair_streams, run_stability, simulate_basis_scan, KeyRateReport, PairReport, PairTally, ScheduleSegment,
    StabilityPoint,
};
use mcfqkd_core::sim::{GroundTruth, SimWarning};
use serde::Serialize;

use crate::config::RunConfig;
use crate::output::{
    write_csv, write_json, LinkRow, ReportRow, StabilityRow, TallyRow, LINK_HEADER, REPORT_HEADER, STABILITY_HEADER,
    TALLY_HEADER,
};
use crate::parallel::Rayon;
use crate::svg::{Plot, Series, Style};
use crate::tagfile::{FileSegment, TagFile};

/// Ring key rates observed at the reference length, drawn as markers.
pub const REPORTED_INNER_SKR_BITS_S: f64 = 7300.0;
pub const REPORTED_OUTER_SKR_BITS_S: f64 = 34500.0;

pub const TAG_EXTENSION: &str = "mcqt";

/// Command-line overrides applied on top of the loaded config.
#[derive(Debug, Clone, Copy, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub window_ps: Option<u64>,
    pub lmax_km: Option<f64>,
    pub step_km: Option<f64>,
    pub hours: Option<f64>,
    pub switch_min: Option<f64>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(w) = self.window_ps {
            cfg.experiment.analysis.window.width_ps = w;
        }
        if let Some(l) = self.lmax_km {
            cfg.linkbudget.lmax_km = l;
        }
        if let Some(s) = self.step_km {
            cfg.linkbudget.step_km = s;
        }
        if let Some(h) = self.hours {
            cfg.stability.total_hours = h;
        }
        if let Some(m) = self.switch_min {
            cfg.stability.switch_minutes = m;
        }
        cfg.validate()?;
        Ok(())
    }
}

pub struct Context {
    pub config: RunConfig,
    pub exec: Rayon,
}

impl Context {
    pub fn new(config: RunConfig) -> Result<Self> {
        Ok(Self {
            config,
            exec: Rayon::from_env()?,
        })
    }
}

fn out_dir(out: &Path) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))
}

fn pair_table(cfg: &RunConfig) -> Result<Vec<CorePair>> {
    let (layout, _) = cfg.experiment.layout.build()?;
    Ok(layout.pairs())
}

// ---- simulate

#[derive(Debug, Serialize)]
pub struct PairFiles {
    pub pair_id: usize,
    pub ring: Ring,
    pub core_a: usize,
    pub core_b: usize,
    pub alice: String,
    pub bob: String,
}

#[derive(Debug, Serialize)]
struct GroundTruthFile<'a> {
    seed: u64,
    acquisition_s: f64,
    files: &'a [PairFiles],
    truth: &'a GroundTruth,
    warnings: &'a [SimWarning],
}

#[derive(Debug)]
pub struct SimulateSummary {
    pub files: Vec<PathBuf>,
    pub truth: GroundTruth,
    pub warnings: Vec<SimWarning>,
}

pub fn simulate(ctx: &Context, out: &Path) -> Result<SimulateSummary> {
    let cfg = &ctx.config;
    let exp = cfg.simulate_experiment();
    let sim = simulate_basis_scan(&ctx.exec, &exp, &cfg.simulate.pairs, cfg.seed)?;
    for w in &sim.warnings {
        warn!("{w:?}");
    }
    out_dir(out)?;
    let table = pair_table(cfg)?;
    let mut paths = Vec::new();
    let mut listing = Vec::new();
    for (s, ring) in sim.streams.iter().zip(&sim.rings) {
        let pair = table[s.pair_id];
        let alice = format!("pair{}_alice.{TAG_EXTENSION}", s.pair_id);
        let bob = format!("pair{}_bob.{TAG_EXTENSION}", s.pair_id);
        for (name, core, tags, is_alice) in [(&alice, pair.core_a, &s.alice, true), (&bob, pair.core_b, &s.bob, false)] {
            let path = out.join(name);
            TagFile::from_stream(core as u16, tags, &sim.schedule, is_alice, cfg.simulate.ground_truth).write(&path)?;
            paths.push(path);
        }
        listing.push(PairFiles {
            pair_id: s.pair_id,
            ring: *ring,
            core_a: pair.core_a,
            core_b: pair.core_b,
            alice,
            bob,
        });
    }
    if cfg.simulate.ground_truth {
        let doc = GroundTruthFile {
            seed: cfg.seed,
            acquisition_s: exp.acquisition_s,
            files: &listing,
            truth: &sim.truth,
            warnings: &sim.warnings,
        };
        let path = out.join("ground_truth.json");
        write_json(&path, &doc)?;
        paths.push(path);
    }
    Ok(SimulateSummary {
        files: paths,
        truth: sim.truth,
        warnings: sim.warnings,
    })
}

// ---- analyze

#[derive(Debug, Clone, Serialize)]
pub struct AnalyzeReport {
    pub report: KeyRateReport,
    pub tallies: Vec<PairTally>,
    pub warnings: Vec<String>,
}

/// Expand directories to the timetag files they contain, sorted by name.
pub fn collect_tag_files(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(p)
                .with_context(|| format!("listing {}", p.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == TAG_EXTENSION))
                .collect();
            found.sort();
            files.extend(found);
        } else {
            files.push(p.clone());
        }
    }
    if files.is_empty() {
        bail!("no timetag files given");
    }
    Ok(files)
}

/// Analyze Alice/Bob files. Files are matched to pairs through the core
/// id in their header; acquisitions come from the markers.
///
/// Policy: a file with no records contributes no detections; a pair whose
/// files are both empty gets a zero report. Acquisition starts and bases
/// must agree between the two files; if only the end markers disagree,
/// the overlap is analyzed and a warning recorded.
pub fn analyze(ctx: &Context, inputs: &[PathBuf], out: &Path) -> Result<AnalyzeReport> {
    let cfg = &ctx.config;
    let table = pair_table(cfg)?;
    let files = collect_tag_files(inputs)?;
    let mut sides: BTreeMap<usize, [Option<(PathBuf, TagFile)>; 2]> = BTreeMap::new();
    for path in files {
        let f = TagFile::read(&path)?;
        let core = f.core_id as usize;
        let (pair, side) = table
            .iter()
            .find_map(|p| {
                if p.core_a == core {
                    Some((p.pair_id, 0))
                } else if p.core_b == core {
                    Some((p.pair_id, 1))
                } else {
                    None
                }
            })
            .with_context(|| format!("{}: core {core} carries no pair", path.display()))?;
        let slot = &mut sides.entry(pair).or_default()[side];
        if let Some((prev, _)) = slot {
            bail!("{} and {} both hold core {core}", prev.display(), path.display());
        }
        *slot = Some((path, f));
    }

    let mut warnings = Vec::new();
    let mut reports = Vec::new();
    let mut tallies = Vec::new();
    for (pair_id, [a, b]) in sides {
        let ring = table[pair_id].ring;
        let (Some((pa, fa)), Some((pb, fb))) = (a, b) else {
            bail!("pair {pair_id}: need both the Alice and the Bob file");
        };
        let segments = match joint_segments(&fa, &fb, &mut warnings, pair_id)? {
            Some(s) => s,
            None => {
                info!("pair {pair_id}: no acquisitions in {} / {}", pa.display(), pb.display());
                reports.push(zero_report(pair_id, ring));
                continue;
            }
        };
        let (ts, report) = analyze_pair_streams(
            pair_id,
            ring,
            &fa.tags(),
            &fb.tags(),
            &segments,
            &cfg.experiment.analysis,
            cfg.experiment.ec_efficiency,
        )
        .with_context(|| format!("pair {pair_id}"))?;
        reports.push(report);
        tallies.extend(ts.into_iter().map(|tally| PairTally { pair_id, tally }));
    }
    for w in &warnings {
        warn!("{w}");
    }
    let result = AnalyzeReport {
        report: KeyRateReport::from_pairs(reports, cfg.experiment.ec_efficiency),
        tallies,
        warnings,
    };
    out_dir(out)?;
    write_csv(&out.join("tally.csv"), TALLY_HEADER, result.tallies.iter().map(TallyRow::from))?;
    write_csv(&out.join("report.csv"), REPORT_HEADER, result.report.pairs.iter().map(ReportRow::from))?;
    write_json(&out.join("report.json"), &result)?;
    Ok(result)
}

fn zero_report(pair_id: usize, ring: Ring) -> PairReport {
    PairReport {
        pair_id,
        ring,
        visibility_hv: None,
        visibility_da: None,
        qber_hv: None,
        qber_da: None,
        coin_rate_hv: 0.0,
        coin_rate_da: 0.0,
        singles_a_hz: 0.0,
        singles_b_hz: 0.0,
        accidental_rate_hv: 0.0,
        accidental_rate_da: 0.0,
        skr_bits_s: 0.0,
    }
}

fn is_empty(f: &TagFile) -> bool {
    f.records.is_empty()
}

/// Pair up the acquisitions of both files. `None` when neither has any.
fn joint_segments(
    a: &TagFile,
    b: &TagFile,
    warnings: &mut Vec<String>,
    pair_id: usize,
) -> Result<Option<Vec<ScheduleSegment>>> {
    let (mut sa, mut sb) = (a.segments(), b.segments());
    for (f, s, who) in [(a, &sa, "Alice"), (b, &sb, "Bob")] {
        if s.is_empty() && !is_empty(f) {
            bail!("pair {pair_id}: {who} file has detections but no acquisition markers");
        }
    }
    match (sa.is_empty(), sb.is_empty()) {
        (true, true) => return Ok(None),
        (true, false) => sa = sb.clone(),
        (false, true) => sb = sa.clone(),
        (false, false) => {}
    }
    if sa.len() != sb.len() || sa.iter().zip(&sb).any(|(x, y)| x.start_ps != y.start_ps) {
        bail!("pair {pair_id}: Alice and Bob acquisitions do not line up");
    }
    let mut out = Vec::with_capacity(sa.len());
    let n = sa.len();
    for (k, (x, y)) in sa.iter().zip(&sb).enumerate() {
        let mut end = x.end_ps;
        if x.end_ps != y.end_ps {
            end = x.end_ps.min(y.end_ps);
            if k + 1 == n {
                warnings.push(format!(
                    "pair {pair_id}: recordings end at {} ps and {} ps, analyzing the overlap",
                    x.end_ps, y.end_ps
                ));
            }
        }
        if end <= x.start_ps {
            warnings.push(format!("pair {pair_id}: skipping empty acquisition at {} ps", x.start_ps));
            continue;
        }
        out.push(segment(x, y, end));
    }
    Ok(Some(out))
}

fn segment(a: &FileSegment, b: &FileSegment, end_ps: u64) -> ScheduleSegment {
    ScheduleSegment {
        basis_a: a.basis,
        basis_b: b.basis,
        start_s: a.start_ps as f64 * 1e-12,
        duration_s: (end_ps - a.start_ps) as f64 * 1e-12,
    }
}

// ---- linkbudget

#[derive(Debug, Clone, Serialize)]
pub struct RingCurve {
    pub ring: Ring,
    pub model: LinkModel,
    /// `None` when the key rate stays positive out to the search bound.
    pub max_length_km: Option<f64>,
    pub reference: LinkPoint,
    pub points: Vec<LinkPoint>,
}

pub fn ring_curves(cfg: &RunConfig) -> Result<Vec<RingCurve>> {
    [Ring::Inner, Ring::Outer]
        .into_iter()
        .map(|ring| {
            let model = cfg.experiment.ring_link_model(ring)?;
            let max = model.max_positive_length()?;
            Ok(RingCurve {
                ring,
                max_length_km: max.is_finite().then_some(max),
                reference: model.keyrate_at_length(model.reference_length_km)?,
                points: model.sweep(cfg.linkbudget.lmax_km, cfg.linkbudget.step_km)?,
                model,
            })
        })
        .collect()
}

#[derive(Serialize)]
struct CurveSummary<'a> {
    ring: Ring,
    max_length_km: Option<f64>,
    reference: &'a LinkPoint,
    model: &'a LinkModel,
}

pub fn linkbudget(ctx: &Context, out: &Path) -> Result<Vec<RingCurve>> {
    let curves = ring_curves(&ctx.config)?;
    out_dir(out)?;
    for c in &curves {
        let path = out.join(format!("linkbudget_{}.csv", c.ring.name()));
        write_csv(&path, LINK_HEADER, c.points.iter().map(LinkRow::from))?;
    }
    let summary: Vec<CurveSummary> = curves
        .iter()
        .map(|c| CurveSummary {
            ring: c.ring,
            max_length_km: c.max_length_km,
            reference: &c.reference,
            model: &c.model,
        })
        .collect();
    write_json(&out.join("linkbudget.json"), &summary)?;
    Ok(curves)
}

// ---- stability

#[derive(Debug, Clone, Serialize)]
pub struct StabilityRun {
    pub pair_id: usize,
    pub points: Vec<StabilityPoint>,
    pub qber_mean: f64,
    pub skr_mean_bits_s: f64,
}

pub fn run_stability_series(ctx: &Context) -> Result<StabilityRun> {
    let cfg = &ctx.config;
    let points = run_stability(&ctx.exec, &cfg.experiment, &cfg.stability, cfg.seed)?;
    let n = points.len().max(1) as f64;
    Ok(StabilityRun {
        pair_id: cfg.stability.pair_id,
        qber_mean: points.iter().map(|p| p.qber_mean()).sum::<f64>() / n,
        skr_mean_bits_s: points.iter().map(|p| p.skr_bits_s).sum::<f64>() / n,
        points,
    })
}

pub fn stability(ctx: &Context, out: &Path) -> Result<StabilityRun> {
    let run = run_stability_series(ctx)?;
    out_dir(out)?;
    write_csv(&out.join("stability.csv"), STABILITY_HEADER, run.points.iter().map(StabilityRow::from))?;
    write_json(&out.join("stability.json"), &run)?;
    Ok(run)
}

// ---- reproduce

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Figure {
    Fig2,
    Fig3,
}

pub const FIG2_HEADER: &[&str] = &["length_km", "skr_inner_bits_s", "skr_outer_bits_s"];
pub const FIG2_MARKER_HEADER: &[&str] = &["ring", "length_km", "model_skr_bits_s", "reported_skr_bits_s"];

#[derive(Serialize)]
struct Fig2Row {
    length_km: f64,
    skr_inner_bits_s: f64,
    skr_outer_bits_s: f64,
}

#[derive(Serialize)]
struct MarkerRow {
    ring: Ring,
    length_km: f64,
    model_skr_bits_s: f64,
    reported_skr_bits_s: f64,
}

pub fn reproduce(ctx: &Context, figure: Figure, out: &Path) -> Result<Vec<PathBuf>> {
    out_dir(out)?;
    match figure {
        Figure::Fig2 => fig2(ctx, out),
        Figure::Fig3 => fig3(ctx, out),
    }
}

fn fig2(ctx: &Context, out: &Path) -> Result<Vec<PathBuf>> {
    let curves = ring_curves(&ctx.config)?;
    let (inner, outer) = (&curves[0], &curves[1]);
    let rows = inner.points.iter().zip(&outer.points).map(|(a, b)| Fig2Row {
        length_km: a.length_km,
        skr_inner_bits_s: a.skr_ring_bits_s,
        skr_outer_bits_s: b.skr_ring_bits_s,
    });
    let csv = out.join("fig2.csv");
    write_csv(&csv, FIG2_HEADER, rows)?;

    let reported = [REPORTED_INNER_SKR_BITS_S, REPORTED_OUTER_SKR_BITS_S];
    let markers: Vec<MarkerRow> = curves
        .iter()
        .zip(reported)
        .map(|(c, r)| MarkerRow {
            ring: c.ring,
            length_km: c.reference.length_km,
            model_skr_bits_s: c.reference.skr_ring_bits_s,
            reported_skr_bits_s: r,
        })
        .collect();
    let markers_csv = out.join("fig2_markers.csv");
    write_csv(&markers_csv, FIG2_MARKER_HEADER, markers.iter())?;

    let colors = ["#1f77b4", "#d62728"];
    let mut series: Vec<Series> = curves
        .iter()
        .zip(colors)
        .map(|(c, color)| Series {
            label: format!("{} ring model", c.ring.name()),
            points: c.points.iter().map(|p| (p.length_km, p.skr_ring_bits_s)).collect(),
            color,
            style: Style::Line,
        })
        .collect();
    series.extend(markers.iter().zip(colors).map(|(m, color)| Series {
        label: format!("{} ring reported", m.ring.name()),
        points: vec![(m.length_km, m.reported_skr_bits_s)],
        color,
        style: Style::Markers,
    }));
    let svg = out.join("fig2.svg");
    write_text(
        &svg,
        &Plot {
            title: "Secret key rate versus fiber length".into(),
            x_label: "fiber length (km)".into(),
            y_label: "ring key rate (bit/s)".into(),
            log_y: true,
            series,
        }
        .render(),
    )?;
    Ok(vec![csv, markers_csv, svg])
}

fn fig3(ctx: &Context, out: &Path) -> Result<Vec<PathBuf>> {
    let run = run_stability_series(ctx)?;
    let csv = out.join("fig3.csv");
    write_csv(&csv, STABILITY_HEADER, run.points.iter().map(StabilityRow::from))?;
    let series = |label: &str, color, f: &dyn Fn(&StabilityPoint) -> f64, style| Series {
        label: label.into(),
        points: run.points.iter().map(|p| (p.time_h, f(p))).collect(),
        color,
        style,
    };
    let qber = Plot {
        title: format!("QBER of pair {} over time", run.pair_id),
        x_label: "time (h)".into(),
        y_label: "QBER (%)".into(),
        log_y: false,
        series: vec![
            series("HV", "#1f77b4", &|p| 100.0 * p.qber_hv, Style::Markers),
            series("DA", "#2ca02c", &|p| 100.0 * p.qber_da, Style::Markers),
            series("mean", "#000000", &|p| 100.0 * p.qber_mean(), Style::Line),
        ],
    };
    let rate = Plot {
        title: format!("Secret key rate of pair {} over time", run.pair_id),
        x_label: "time (h)".into(),
        y_label: "key rate (bit/s)".into(),
        log_y: false,
        series: vec![series("key rate", "#d62728", &|p| p.skr_bits_s, Style::Markers)],
    };
    let (qs, rs) = (out.join("fig3_qber.svg"), out.join("fig3_keyrate.svg"));
    write_text(&qs, &qber.render())?;
    write_text(&rs, &rate.render())?;
    Ok(vec![csv, qs, rs])
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}
