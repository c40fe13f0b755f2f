//! Measurement schedules, basis scans, stability runs and key-rate reports.
//!
//! Acquisitions are cut into independent time slices. Emission is a
//! Poisson process, so slices are statistically exact pieces of the full
//! acquisition; each slice is one work unit with its own derived seed and
//! the tallies are summed in unit order.

use alloc::vec::Vec;

use crate::coincidence::{tally_acquisition, AnalysisParams, CoincidenceTally, CoincidenceWindow, MIN_OFFSET_WINDOWS};
use crate::error::{check_range, invalid, Error, Result};
use crate::exec::Executor;
use crate::geometry::{
    build_layout, coupling_probabilities, emission_profile_from_temperature, CoreLayout, Coupling, Ring,
    TemperatureCalibration, DEFAULT_ANNULUS_WIDTH_UM, DEFAULT_CORE_RADIUS_UM, DEFAULT_PITCH_UM,
    INNER_RING_TEMPERATURE_C, OUTER_RING_TEMPERATURE_C,
};
use crate::link::{clamp_rounding, window_capture, LinkModel, REFERENCE_LENGTH_KM};
use crate::math::{secret_key_rate, visibility_from_counts, BasisCounts, KeyRateInputs, DEFAULT_EC_EFFICIENCY};
use crate::sim::{
    derive_seed, simulate_run, apply_polarization_drift, Basis, Channel, DriftModel, GroundTruth, LinkParams,
    PairStreams, PairTruth, Settings, SimWarning, SourceParams, TimeTag,
};

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

pub const DEFAULT_ACQUISITION_S: f64 = 60.0;
pub const DEFAULT_SLICE_S: f64 = 1.0;
pub const DEFAULT_SWITCH_MINUTES: f64 = 30.0;
pub const DEFAULT_STABILITY_HOURS: f64 = 24.0;

const PS_PER_S: f64 = 1e12;
const DRIFT_STREAM: u64 = u64::MAX - 1;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct LayoutConfig {
    pub pitch_um: f64,
    pub core_radius_um: f64,
    pub annulus_width_um: f64,
    /// Temperature-to-radius anchors; derived from the layout when absent.
    #[cfg_attr(feature = "serde", serde(default))]
    pub calibration: Option<TemperatureCalibration>,
}

impl Default for LayoutConfig {
    fn default() -> Self {
        Self {
            pitch_um: DEFAULT_PITCH_UM,
            core_radius_um: DEFAULT_CORE_RADIUS_UM,
            annulus_width_um: DEFAULT_ANNULUS_WIDTH_UM,
            calibration: None,
        }
    }
}

impl LayoutConfig {
    pub fn build(&self) -> Result<(CoreLayout, TemperatureCalibration)> {
        let layout = build_layout(self.pitch_um, self.core_radius_um)?;
        let cal = match self.calibration {
            Some(c) => c,
            None => TemperatureCalibration::for_layout(&layout, self.annulus_width_um)?,
        };
        Ok((layout, cal))
    }

    pub fn coupling_at(&self, temperature: f64) -> Result<(CoreLayout, Coupling)> {
        let (layout, cal) = self.build()?;
        let profile = emission_profile_from_temperature(temperature, &cal)?;
        let coupling = coupling_probabilities(&profile, &layout);
        Ok((layout, coupling))
    }
}

/// Operating point of one ring: source settings (temperature selects the
/// ring) and the link shared by both arms of its channels.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct RingSetup {
    pub source: SourceParams,
    pub link: LinkParams,
}

impl RingSetup {
    pub fn validate(&self) -> Result<()> {
        self.source.validate()?;
        self.link.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct ExperimentConfig {
    pub layout: LayoutConfig,
    pub inner: RingSetup,
    pub outer: RingSetup,
    pub analysis: AnalysisParams,
    pub ec_efficiency: f64,
    /// Per-basis acquisition time of a basis scan.
    pub acquisition_s: f64,
    /// Work-unit length acquisitions are cut into.
    pub slice_s: f64,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.layout.build()?;
        self.inner.validate()?;
        self.outer.validate()?;
        validate_analysis(&self.analysis)?;
        check_range("ec_efficiency", self.ec_efficiency, 0.0, f64::MAX)?;
        positive("acquisition_s", self.acquisition_s)?;
        positive("slice_s", self.slice_s)?;
        Ok(())
    }

    pub fn ring(&self, ring: Ring) -> Result<&RingSetup> {
        match ring {
            Ring::Inner => Ok(&self.inner),
            Ring::Outer => Ok(&self.outer),
            Ring::Center => Err(invalid("ring", "the center core carries no pair")),
        }
    }

    /// Channels of the given pairs, grouped by ring, each ring coupled at
    /// its own source temperature.
    pub fn channel_groups(&self, pair_ids: &[usize]) -> Result<(CoreLayout, Vec<ChannelGroup>)> {
        if pair_ids.is_empty() {
            return Err(Error::EmptyPairSet);
        }
        let mut ids = pair_ids.to_vec();
        ids.sort_unstable();
        ids.dedup();
        let (layout, _) = self.layout.build()?;
        let all = layout.pairs();
        if let Some(&bad) = ids.iter().find(|&&id| id >= all.len()) {
            return Err(Error::UnknownPair(bad));
        }
        let mut groups = Vec::new();
        for ring in [Ring::Inner, Ring::Outer] {
            let wanted: Vec<usize> = ids.iter().copied().filter(|&id| all[id].ring == ring).collect();
            if wanted.is_empty() {
                continue;
            }
            let setup = *self.ring(ring)?;
            let (_, coupling) = self.layout.coupling_at(setup.source.temperature)?;
            let channels = wanted
                .iter()
                .map(|&id| Channel {
                    pair: *coupling.pair(id).expect("pair ids come from the layout"),
                    alice: setup.link,
                    bob: setup.link,
                })
                .collect();
            groups.push(ChannelGroup {
                ring,
                source: setup.source,
                channels,
            });
        }
        Ok((layout, groups))
    }

    /// Predicted link model of a ring from its configured setup.
    pub fn ring_link_model(&self, ring: Ring) -> Result<LinkModel> {
        let setup = self.ring(ring)?;
        let (_, coupling) = self.layout.coupling_at(setup.source.temperature)?;
        let probs: Vec<f64> = coupling.ring(ring).map(|p| p.coupling_prob).collect();
        LinkModel::from_setup(&setup.source, &setup.link, &probs, &self.analysis.window, self.ec_efficiency)
    }
}

fn positive(name: &'static str, x: f64) -> Result<()> {
    if x > 0.0 && x.is_finite() {
        Ok(())
    } else {
        Err(invalid(name, "must be positive and finite"))
    }
}

fn validate_analysis(a: &AnalysisParams) -> Result<()> {
    a.window.validate()?;
    if a.bin_width_ps == 0 || a.range_ps < a.bin_width_ps {
        return Err(invalid("bin_width_ps", "must be positive and no wider than the range"));
    }
    if a.accidental_offset_ps.unsigned_abs() < MIN_OFFSET_WINDOWS * a.window.width_ps {
        return Err(Error::OffsetTooSmall {
            offset_ps: a.accidental_offset_ps,
            window_ps: a.window.width_ps,
        });
    }
    Ok(())
}

/// Channels of one ring simulated together (they share crosstalk).
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelGroup {
    pub ring: Ring,
    pub source: SourceParams,
    pub channels: Vec<Channel>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct ScheduleSegment {
    pub basis_a: Basis,
    pub basis_b: Basis,
    pub start_s: f64,
    pub duration_s: f64,
}

impl ScheduleSegment {
    pub fn end_s(&self) -> f64 {
        self.start_s + self.duration_s
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct MeasurementSchedule {
    pub segments: Vec<ScheduleSegment>,
}

impl MeasurementSchedule {
    pub fn new(segments: Vec<ScheduleSegment>) -> Result<Self> {
        let mut end = 0.0;
        for s in &segments {
            positive("duration_s", s.duration_s)?;
            if !(s.start_s >= end) {
                return Err(invalid("segments", "must be time-ordered and non-overlapping"));
            }
            end = s.end_s();
        }
        Ok(Self { segments })
    }

    /// One acquisition per basis: HV on `[0, T)`, then DA on `[T, 2T)`.
    pub fn basis_scan(acquisition_s: f64) -> Result<Self> {
        Self::new(
            Basis::ALL
                .iter()
                .enumerate()
                .map(|(k, &b)| ScheduleSegment {
                    basis_a: b,
                    basis_b: b,
                    start_s: k as f64 * acquisition_s,
                    duration_s: acquisition_s,
                })
                .collect(),
        )
    }

    /// One slot every `switch_minutes`; each slot acquires HV then DA.
    pub fn stability(total_hours: f64, switch_minutes: f64, acquisition_s: f64) -> Result<Self> {
        positive("total_hours", total_hours)?;
        positive("switch_minutes", switch_minutes)?;
        positive("acquisition_s", acquisition_s)?;
        let slot_s = switch_minutes * 60.0;
        let slots = libm::floor(total_hours * 60.0 / switch_minutes + 1e-9) as usize;
        if slots == 0 {
            return Err(invalid("total_hours", "shorter than one switching period"));
        }
        if 2.0 * acquisition_s > slot_s {
            return Err(invalid("acquisition_s", "both bases must fit in one switching period"));
        }
        let mut segments = Vec::with_capacity(2 * slots);
        for k in 0..slots {
            for (i, &b) in Basis::ALL.iter().enumerate() {
                segments.push(ScheduleSegment {
                    basis_a: b,
                    basis_b: b,
                    start_s: k as f64 * slot_s + i as f64 * acquisition_s,
                    duration_s: acquisition_s,
                });
            }
        }
        Self::new(segments)
    }

    pub fn total_duration_s(&self) -> f64 {
        self.segments.last().map_or(0.0, |s| s.end_s())
    }
}

/// Per-pair result of one HV and one DA acquisition.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct PairReport {
    pub pair_id: usize,
    pub ring: Ring,
    /// `None` when the basis recorded no coincidences.
    pub visibility_hv: Option<f64>,
    pub visibility_da: Option<f64>,
    pub qber_hv: Option<f64>,
    pub qber_da: Option<f64>,
    pub coin_rate_hv: f64,
    pub coin_rate_da: f64,
    pub singles_a_hz: f64,
    pub singles_b_hz: f64,
    pub accidental_rate_hv: f64,
    pub accidental_rate_da: f64,
    /// Unclamped; 0 when a basis has no data.
    pub skr_bits_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct RingTotal {
    pub ring: Ring,
    pub pairs: usize,
    /// Sum of per-pair rates clamped at 0.
    pub skr_bits_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct KeyRateReport {
    pub pairs: Vec<PairReport>,
    pub rings: Vec<RingTotal>,
    pub ec_efficiency: f64,
}

impl KeyRateReport {
    pub fn from_pairs(mut pairs: Vec<PairReport>, ec_efficiency: f64) -> Self {
        pairs.sort_by_key(|p| p.pair_id);
        let rings = [Ring::Inner, Ring::Outer]
            .into_iter()
            .filter_map(|ring| {
                let members: Vec<&PairReport> = pairs.iter().filter(|p| p.ring == ring).collect();
                (!members.is_empty()).then(|| RingTotal {
                    ring,
                    pairs: members.len(),
                    skr_bits_s: members.iter().map(|p| p.skr_bits_s.max(0.0)).sum(),
                })
            })
            .collect();
        Self {
            pairs,
            rings,
            ec_efficiency,
        }
    }

    pub fn ring(&self, ring: Ring) -> Option<&RingTotal> {
        self.rings.iter().find(|r| r.ring == ring)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct PairTally {
    pub pair_id: usize,
    pub tally: CoincidenceTally,
}

/// Merge tallies of the same settings (durations and counts add).
pub fn merge_tallies(a: &CoincidenceTally, b: &CoincidenceTally) -> CoincidenceTally {
    let mut counts = a.counts;
    counts.merge(&b.counts);
    CoincidenceTally {
        counts,
        duration_s: a.duration_s + b.duration_s,
        accidentals: a.accidentals + b.accidentals,
        singles_a: a.singles_a + b.singles_a,
        singles_b: a.singles_b + b.singles_b,
        ..*a
    }
}

/// Report for one pair from its HV and DA tallies.
pub fn pair_report(
    pair_id: usize,
    ring: Ring,
    hv: &CoincidenceTally,
    da: &CoincidenceTally,
    ec_efficiency: f64,
) -> Result<PairReport> {
    positive("duration_s", hv.duration_s)?;
    positive("duration_s", da.duration_s)?;
    let vis = |c: &BasisCounts| match visibility_from_counts(c) {
        Ok(v) => Ok(Some(v)),
        Err(Error::UndefinedVisibility) => Ok(None),
        Err(e) => Err(e),
    };
    let (v_hv, v_da) = (vis(&hv.counts)?, vis(&da.counts)?);
    let coin_rate_hv = hv.counts.total() as f64 / hv.duration_s;
    let coin_rate_da = da.counts.total() as f64 / da.duration_s;
    let skr = match (v_hv, v_da) {
        (Some(a), Some(b)) => secret_key_rate(&KeyRateInputs {
            coin_rate_hv,
            coin_rate_da,
            qber_hv: a.qber(),
            qber_da: b.qber(),
            ec_efficiency,
        })?,
        _ => 0.0,
    };
    let total = hv.duration_s + da.duration_s;
    Ok(PairReport {
        pair_id,
        ring,
        visibility_hv: v_hv.map(|v| v.value()),
        visibility_da: v_da.map(|v| v.value()),
        qber_hv: v_hv.map(|v| v.qber()),
        qber_da: v_da.map(|v| v.qber()),
        coin_rate_hv,
        coin_rate_da,
        singles_a_hz: (hv.singles_a + da.singles_a) as f64 / total,
        singles_b_hz: (hv.singles_b + da.singles_b) as f64 / total,
        accidental_rate_hv: hv.accidentals as f64 / hv.duration_s,
        accidental_rate_da: da.accidentals as f64 / da.duration_s,
        skr_bits_s: skr,
    })
}

/// One simulated slice of one schedule segment for one channel group.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Unit {
    pub group: usize,
    pub segment: usize,
    pub slice: usize,
    pub start_s: f64,
    pub duration_s: f64,
}

fn split_slices(duration_s: f64, slice_s: f64) -> Vec<(f64, f64)> {
    let n = libm::ceil(duration_s / slice_s - 1e-9).max(1.0) as usize;
    (0..n)
        .map(|k| {
            let start = k as f64 * slice_s;
            (start, (duration_s - start).min(slice_s))
        })
        .collect()
}

fn units(groups: usize, schedule: &MeasurementSchedule, slice_s: f64) -> Vec<Unit> {
    let mut out = Vec::new();
    for group in 0..groups {
        for (segment, seg) in schedule.segments.iter().enumerate() {
            for (slice, (off, dur)) in split_slices(seg.duration_s, slice_s).into_iter().enumerate() {
                out.push(Unit {
                    group,
                    segment,
                    slice,
                    start_s: seg.start_s + off,
                    duration_s: dur,
                });
            }
        }
    }
    out
}

fn unit_seed(seed: u64, ring: Ring, unit: &Unit) -> u64 {
    let ring_code = match ring {
        Ring::Center => 0u64,
        Ring::Inner => 1,
        Ring::Outer => 2,
    };
    derive_seed(seed, (ring_code << 40) | unit.segment as u64, unit.slice as u64)
}

#[allow(clippy::too_many_arguments)]
fn simulate_unit(
    layout: &CoreLayout,
    group: &ChannelGroup,
    schedule: &MeasurementSchedule,
    misalignment: &[f64],
    unit: &Unit,
    seed: u64,
) -> Result<crate::sim::SimOutput> {
    let seg = &schedule.segments[unit.segment];
    let settings = Settings {
        alice: crate::sim::AnalyzerSetting::from_basis(seg.basis_a),
        bob: crate::sim::AnalyzerSetting::from_basis(seg.basis_b),
        misalignment_deg: misalignment.get(unit.segment).copied().unwrap_or(0.0),
    };
    simulate_run(
        &group.source,
        layout,
        &group.channels,
        &settings,
        unit.duration_s,
        unit_seed(seed, group.ring, unit),
    )
}

/// Simulate and tally every unit; tallies come back per (group, segment,
/// channel) summed over slices.
#[allow(clippy::too_many_arguments)]
fn tally_schedule<E: Executor>(
    exec: &E,
    layout: &CoreLayout,
    groups: &[ChannelGroup],
    schedule: &MeasurementSchedule,
    misalignment: &[f64],
    analysis: &AnalysisParams,
    slice_s: f64,
    seed: u64,
) -> Result<Vec<Vec<Vec<CoincidenceTally>>>> {
    let units = units(groups.len(), schedule, slice_s);
    let results = exec.map(units.len(), |i| -> Result<Vec<CoincidenceTally>> {
        let u = &units[i];
        let group = &groups[u.group];
        let out = simulate_unit(layout, group, schedule, misalignment, u, seed)?;
        let seg = &schedule.segments[u.segment];
        out.streams
            .iter()
            .map(|s| tally_acquisition(&s.alice, &s.bob, (seg.basis_a, seg.basis_b), u.duration_s, None, analysis))
            .collect()
    });
    let mut acc: Vec<Vec<Vec<CoincidenceTally>>> = groups
        .iter()
        .map(|_| schedule.segments.iter().map(|_| Vec::new()).collect())
        .collect();
    for (u, r) in units.iter().zip(results) {
        let tallies = r?;
        let slot = &mut acc[u.group][u.segment];
        if slot.is_empty() {
            *slot = tallies;
        } else {
            for (a, t) in slot.iter_mut().zip(&tallies) {
                *a = merge_tallies(a, t);
            }
        }
    }
    Ok(acc)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScanResult {
    pub report: KeyRateReport,
    pub tallies: Vec<PairTally>,
}

/// One acquisition per basis for each pair, then visibility, QBER and key
/// rate per pair and per ring.
pub fn run_basis_scan<E: Executor>(
    exec: &E,
    config: &ExperimentConfig,
    pair_ids: &[usize],
    seed: u64,
) -> Result<ScanResult> {
    config.validate()?;
    let (layout, groups) = config.channel_groups(pair_ids)?;
    let schedule = MeasurementSchedule::basis_scan(config.acquisition_s)?;
    let acc = tally_schedule(exec, &layout, &groups, &schedule, &[], &config.analysis, config.slice_s, seed)?;
    let mut reports = Vec::new();
    let mut tallies = Vec::new();
    for (group, per_segment) in groups.iter().zip(&acc) {
        for (k, ch) in group.channels.iter().enumerate() {
            let (hv, da) = (&per_segment[0][k], &per_segment[1][k]);
            reports.push(pair_report(ch.pair.pair_id, group.ring, hv, da, config.ec_efficiency)?);
            for t in [hv, da] {
                tallies.push(PairTally {
                    pair_id: ch.pair.pair_id,
                    tally: *t,
                });
            }
        }
    }
    tallies.sort_by_key(|t| (t.pair_id, t.tally.basis_a));
    Ok(ScanResult {
        report: KeyRateReport::from_pairs(reports, config.ec_efficiency),
        tallies,
    })
}

/// Simulated streams of a whole schedule, slices concatenated on the
/// absolute time axis.
#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleSim {
    pub schedule: MeasurementSchedule,
    pub rings: Vec<Ring>,
    pub streams: Vec<PairStreams>,
    pub truth: GroundTruth,
    pub warnings: Vec<SimWarning>,
}

/// Simulate the basis-scan schedule for the given pairs, keeping streams.
pub fn simulate_basis_scan<E: Executor>(
    exec: &E,
    config: &ExperimentConfig,
    pair_ids: &[usize],
    seed: u64,
) -> Result<ScheduleSim> {
    config.validate()?;
    let (layout, groups) = config.channel_groups(pair_ids)?;
    let schedule = MeasurementSchedule::basis_scan(config.acquisition_s)?;
    let units = units(groups.len(), &schedule, config.slice_s);
    let outputs = exec.map(units.len(), |i| {
        let u = &units[i];
        simulate_unit(&layout, &groups[u.group], &schedule, &[], u, seed)
    });
    let mut streams: Vec<PairStreams> = Vec::new();
    let mut truth: Vec<PairTruth> = Vec::new();
    let mut rings = Vec::new();
    let mut uncoupled = 0;
    let mut warnings = Vec::new();
    for g in &groups {
        for ch in &g.channels {
            streams.push(PairStreams {
                pair_id: ch.pair.pair_id,
                alice: Vec::new(),
                bob: Vec::new(),
            });
            truth.push(PairTruth {
                pair_id: ch.pair.pair_id,
                ..PairTruth::default()
            });
            rings.push(g.ring);
        }
    }
    for (u, out) in units.iter().zip(outputs) {
        let out = out?;
        let offset = libm::round(u.start_s * PS_PER_S) as u64;
        uncoupled += out.truth.uncoupled_emissions;
        for w in out.warnings {
            if !warnings.contains(&w) {
                warnings.push(w);
            }
        }
        for (s, t) in out.streams.iter().zip(&out.truth.pairs) {
            let k = streams.iter().position(|x| x.pair_id == s.pair_id).expect("pair simulated");
            let shift = |x: &TimeTag| TimeTag { time: x.time + offset, ..*x };
            streams[k].alice.extend(s.alice.iter().map(shift));
            streams[k].bob.extend(s.bob.iter().map(shift));
            add_truth(&mut truth[k], t);
        }
    }
    for s in &mut streams {
        // jitter can push a slice's last tags past the next slice start
        s.alice.sort_unstable();
        s.bob.sort_unstable();
    }
    Ok(ScheduleSim {
        truth: GroundTruth {
            duration_s: schedule.total_duration_s(),
            seed,
            pairs: truth,
            uncoupled_emissions: uncoupled,
        },
        schedule,
        rings,
        streams,
        warnings,
    })
}

fn add_truth(acc: &mut PairTruth, t: &PairTruth) {
    acc.emitted += t.emitted;
    acc.true_coincidences += t.true_coincidences;
    acc.alice_photons += t.alice_photons;
    acc.bob_photons += t.bob_photons;
    acc.alice_dark += t.alice_dark;
    acc.bob_dark += t.bob_dark;
    acc.crosstalk_out += t.crosstalk_out;
    acc.crosstalk_in += t.crosstalk_in;
}

/// Analyze recorded streams of one pair over schedule segments.
pub fn analyze_pair_streams(
    pair_id: usize,
    ring: Ring,
    alice: &[TimeTag],
    bob: &[TimeTag],
    segments: &[ScheduleSegment],
    analysis: &AnalysisParams,
    ec_efficiency: f64,
) -> Result<(Vec<CoincidenceTally>, PairReport)> {
    validate_analysis(analysis)?;
    let cut = |v: &[TimeTag], s: &ScheduleSegment| -> Vec<TimeTag> {
        let lo = libm::round(s.start_s * PS_PER_S) as u64;
        let hi = libm::round(s.end_s() * PS_PER_S) as u64;
        let a = v.partition_point(|t| t.time < lo);
        let b = v.partition_point(|t| t.time < hi);
        v[a..b].to_vec()
    };
    let mut tallies = Vec::with_capacity(segments.len());
    for s in segments {
        let (a, b) = (cut(alice, s), cut(bob, s));
        tallies.push(tally_acquisition(&a, &b, (s.basis_a, s.basis_b), s.duration_s, None, analysis)?);
    }
    let merged = |basis: Basis| {
        tallies
            .iter()
            .filter(|t| t.basis_a == basis && t.basis_b == basis)
            .copied()
            .reduce(|a, b| merge_tallies(&a, &b))
    };
    let (hv, da) = match (merged(Basis::HV), merged(Basis::DA)) {
        (Some(hv), Some(da)) => (hv, da),
        _ => return Err(invalid("segments", "need at least one HV and one DA acquisition")),
    };
    let report = pair_report(pair_id, ring, &hv, &da, ec_efficiency)?;
    Ok((tallies, report))
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct StabilityConfig {
    pub pair_id: usize,
    pub setup: RingSetup,
    pub drift: DriftModel,
    pub total_hours: f64,
    pub switch_minutes: f64,
    pub acquisition_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct StabilityPoint {
    pub time_h: f64,
    pub qber_hv: f64,
    pub qber_da: f64,
    pub coin_rate_hv: f64,
    pub coin_rate_da: f64,
    pub skr_bits_s: f64,
    pub misalignment_deg: f64,
}

impl StabilityPoint {
    pub fn qber_mean(&self) -> f64 {
        0.5 * (self.qber_hv + self.qber_da)
    }
}

/// Repeated HV/DA acquisitions of one pair under polarization drift.
pub fn run_stability<E: Executor>(
    exec: &E,
    config: &ExperimentConfig,
    stability: &StabilityConfig,
    seed: u64,
) -> Result<Vec<StabilityPoint>> {
    validate_analysis(&config.analysis)?;
    positive("slice_s", config.slice_s)?;
    stability.setup.validate()?;
    let schedule = MeasurementSchedule::stability(stability.total_hours, stability.switch_minutes, stability.acquisition_s)?;
    let (layout, _) = config.layout.build()?;
    let pair = *layout
        .pairs()
        .get(stability.pair_id)
        .ok_or(Error::UnknownPair(stability.pair_id))?;
    let (_, coupling) = config.layout.coupling_at(stability.setup.source.temperature)?;
    let group = ChannelGroup {
        ring: pair.ring,
        source: stability.setup.source,
        channels: alloc::vec![Channel {
            pair: *coupling.pair(pair.pair_id).expect("pair ids come from the layout"),
            alice: stability.setup.link,
            bob: stability.setup.link,
        }],
    };
    let slot_starts: Vec<f64> = schedule.segments.iter().step_by(2).map(|s| s.start_s).collect();
    let offsets = apply_polarization_drift(&slot_starts, &stability.drift, derive_seed(seed, DRIFT_STREAM, 0))?;
    let misalignment: Vec<f64> = offsets.iter().flat_map(|&o| [o, o]).collect();
    let groups = [group];
    let acc = tally_schedule(exec, &layout, &groups, &schedule, &misalignment, &config.analysis, config.slice_s, seed)?;
    let per_segment = &acc[0];
    let mut points = Vec::with_capacity(slot_starts.len());
    for (k, &start) in slot_starts.iter().enumerate() {
        let (hv, da) = (&per_segment[2 * k][0], &per_segment[2 * k + 1][0]);
        let r = pair_report(pair.pair_id, pair.ring, hv, da, config.ec_efficiency)?;
        points.push(StabilityPoint {
            time_h: start / 3600.0,
            qber_hv: r.qber_hv.unwrap_or(0.5),
            qber_da: r.qber_da.unwrap_or(0.5),
            coin_rate_hv: r.coin_rate_hv,
            coin_rate_da: r.coin_rate_da,
            skr_bits_s: r.skr_bits_s,
            misalignment_deg: offsets[k],
        });
    }
    Ok(points)
}

/// Observed per-pair operating point a ring is calibrated to.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct RingTarget {
    /// Mean coincidences per second per pair and basis, accidentals included.
    pub coin_rate: f64,
    pub qber: f64,
    /// Two-photon loss of the ring: both arms plus detection.
    pub total_loss_db: f64,
    pub temperature_c: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct RingCalibration {
    pub setup: RingSetup,
    /// Pairs per second entering a channel of mean coupling.
    pub channel_pair_rate: f64,
    pub arm_transmission: f64,
    pub singles_hz: f64,
    pub true_coin_rate: f64,
    pub accidental_rate: f64,
    pub intrinsic_qber: f64,
}

/// Choose pair rate, per-arm system loss and visibility so that the
/// expected coincidence rate and QBER of the ring's channels hit `target`.
/// Fiber, detector, dark-count, jitter and crosstalk settings come from
/// `link`; its `system_loss_db` is replaced.
pub fn calibrate_ring(
    layout: &LayoutConfig,
    ring: Ring,
    target: &RingTarget,
    link: &LinkParams,
    window: &CoincidenceWindow,
) -> Result<RingCalibration> {
    positive("coin_rate", target.coin_rate)?;
    check_range("qber", target.qber, 0.0, 0.5)?;
    check_range("total_loss_db", target.total_loss_db, 0.0, f64::MAX)?;
    window.validate()?;
    let (_, coupling) = layout.coupling_at(target.temperature_c)?;
    let probs: Vec<f64> = coupling.ring(ring).map(|p| p.coupling_prob).collect();
    if probs.is_empty() {
        return Err(Error::EmptyPairSet);
    }
    let mean_p = probs.iter().sum::<f64>() / probs.len() as f64;
    if !(mean_p > 0.0) {
        return Err(Error::InfeasibleTarget("ring does not couple at this temperature"));
    }

    let t = libm::pow(10.0, -target.total_loss_db / 20.0);
    let detector_db = -10.0 * libm::log10(link.detector_efficiency);
    let system_loss_db = target.total_loss_db / 2.0 - link.fiber_loss_db_per_km * link.fiber_length_km - detector_db;
    if system_loss_db < 0.0 {
        return Err(Error::InfeasibleTarget("ring loss is below fiber and detector loss"));
    }
    let own = t * (1.0 - link.crosstalk_prob);
    let eta = window_capture(link.jitter_sigma_ps, link.jitter_sigma_ps, window);
    let tau = window.span_ps() * 1e-12;
    let dark = 2.0 * link.dark_rate;
    // tau (lambda t + D)^2 + lambda own^2 eta = C
    let a = tau * t * t;
    let b = own * own * eta + 2.0 * tau * t * dark;
    let c = tau * dark * dark - target.coin_rate;
    if !(c < 0.0) {
        return Err(Error::InfeasibleTarget("dark-count accidentals alone exceed the coincidence rate"));
    }
    let lambda = -2.0 * c / (b + libm::sqrt(b * b - 4.0 * a * c));
    let singles = lambda * t + dark;
    let acc = singles * singles * tau;
    let true_rate = target.coin_rate - acc;
    let q_int = clamp_rounding((target.qber * target.coin_rate - 0.5 * acc) / true_rate);
    if !(0.0..=0.5).contains(&q_int) {
        return Err(Error::InfeasibleTarget("QBER below the accidental floor"));
    }
    let setup = RingSetup {
        source: SourceParams {
            pair_rate: lambda / mean_p,
            visibility: 1.0 - 2.0 * q_int,
            temperature: target.temperature_c,
        },
        link: LinkParams {
            system_loss_db,
            ..*link
        },
    };
    setup.validate()?;
    Ok(RingCalibration {
        setup,
        channel_pair_rate: lambda,
        arm_transmission: t,
        singles_hz: singles,
        true_coin_rate: true_rate,
        accidental_rate: acc,
        intrinsic_qber: q_int,
    })
}

/// Inner-ring operating point: 2287 / 2275 cps per basis and QBER minima
/// of 3.02 % / 2.42 %, averaged; 40.06 dB at 82.5 C.
pub const REFERENCE_INNER_TARGET: RingTarget = RingTarget {
    coin_rate: 2281.0,
    qber: 0.0272,
    total_loss_db: 40.06,
    temperature_c: INNER_RING_TEMPERATURE_C,
};

/// Outer-ring operating point: 7832 / 7770 cps per basis and QBER minima
/// of 2.65 % / 2.72 %, averaged; 35.48 dB at 82.0 C.
pub const REFERENCE_OUTER_TARGET: RingTarget = RingTarget {
    coin_rate: 7801.0,
    qber: 0.026_85,
    total_loss_db: 35.48,
    temperature_c: OUTER_RING_TEMPERATURE_C,
};

/// Inner pair monitored over a day: the coincidence rate giving 2.3 kbit/s
/// at 3 % QBER with f = 1.2.
pub const REFERENCE_STABILITY_TARGET: RingTarget = RingTarget {
    coin_rate: 4019.0,
    qber: 0.03,
    total_loss_db: 40.06,
    temperature_c: INNER_RING_TEMPERATURE_C,
};

pub const REFERENCE_DRIFT: DriftModel = DriftModel {
    rate_deg_per_hour: 0.5,
    max_offset_deg: 3.0,
};

/// Link template shared by the reference rings before calibration.
pub fn reference_link() -> LinkParams {
    LinkParams {
        fiber_length_km: REFERENCE_LENGTH_KM,
        ..LinkParams::default()
    }
}

/// Experiment calibrated to the reference operating points of both rings.
pub fn reference_config() -> Result<ExperimentConfig> {
    let layout = LayoutConfig::default();
    let analysis = AnalysisParams::default();
    let link = reference_link();
    let inner = calibrate_ring(&layout, Ring::Inner, &REFERENCE_INNER_TARGET, &link, &analysis.window)?;
    let outer = calibrate_ring(&layout, Ring::Outer, &REFERENCE_OUTER_TARGET, &link, &analysis.window)?;
    Ok(ExperimentConfig {
        layout,
        inner: inner.setup,
        outer: outer.setup,
        analysis,
        ec_efficiency: DEFAULT_EC_EFFICIENCY,
        acquisition_s: DEFAULT_ACQUISITION_S,
        slice_s: DEFAULT_SLICE_S,
    })
}

/// Day-long monitoring of inner pair 0 with the reference drift.
pub fn reference_stability(config: &ExperimentConfig) -> Result<StabilityConfig> {
    let cal = calibrate_ring(
        &config.layout,
        Ring::Inner,
        &REFERENCE_STABILITY_TARGET,
        &reference_link(),
        &config.analysis.window,
    )?;
    Ok(StabilityConfig {
        pair_id: 0,
        setup: cal.setup,
        drift: REFERENCE_DRIFT,
        total_hours: DEFAULT_STABILITY_HOURS,
        switch_minutes: DEFAULT_SWITCH_MINUTES,
        acquisition_s: DEFAULT_ACQUISITION_S,
    })
}
