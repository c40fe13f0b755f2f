//! Monte Carlo generation of detector timetags for polarization-entangled
//! pairs distributed over opposite-core channels.
//!
//! Emissions into a channel form a Poisson process. Each photon is
//! independently detected in its own arm, rerouted by crosstalk to an
//! adjacent core, or lost. By Poisson thinning every (Alice fate, Bob fate)
//! combination is itself an independent Poisson process, so only emissions
//! with at least one surviving photon are generated event by event; the
//! fully lost ones are only counted. Every channel draws from its own
//! random stream derived from `(seed, pair_id)`.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, Poisson, StandardNormal};

use crate::error::{check_range, invalid, Error, Result};
use crate::geometry::{CoreLayout, CorePair};

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

/// Detector channel ids within one opposite-core channel.
pub mod channel {
    pub const ALICE_T: u8 = 0;
    pub const ALICE_R: u8 = 1;
    pub const BOB_T: u8 = 2;
    pub const BOB_R: u8 = 3;
    /// Setting/acquisition marker records in timetag files.
    pub const MARKER: u8 = 255;
}

/// `TimeTag::flags` bit set on dark counts (ground truth only).
pub const FLAG_DARK: u8 = 1;

/// Jitter samples beyond this many standard deviations are redrawn.
pub const JITTER_TRUNCATION: f64 = 6.0;

const PS_PER_S: f64 = 1e12;
const UNCOUPLED_STREAM: u64 = u64::MAX;

/// One detection event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct TimeTag {
    /// Picoseconds since the start of the acquisition.
    pub time: u64,
    pub channel: u8,
    pub flags: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub enum Basis {
    HV,
    DA,
}

impl Basis {
    pub const ALL: [Basis; 2] = [Basis::HV, Basis::DA];

    /// Half-wave plate angle selecting this basis.
    pub fn hwp_angle(self) -> f64 {
        match self {
            Basis::HV => 0.0,
            Basis::DA => 22.5,
        }
    }

    pub fn code(self) -> u8 {
        match self {
            Basis::HV => 0,
            Basis::DA => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Basis> {
        match code {
            0 => Some(Basis::HV),
            1 => Some(Basis::DA),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Basis::HV => "HV",
            Basis::DA => "DA",
        }
    }
}

/// Half-wave plate in front of a polarizing beam splitter.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct AnalyzerSetting {
    pub hwp_angle_deg: f64,
}

impl AnalyzerSetting {
    pub fn from_basis(basis: Basis) -> Self {
        Self {
            hwp_angle_deg: basis.hwp_angle(),
        }
    }

    /// Polarization analysis angle: a wave plate at `x` rotates by `2x`.
    pub fn analyzer_angle(&self) -> f64 {
        2.0 * self.hwp_angle_deg
    }

    /// Basis label, only for the two labeled plate angles.
    pub fn basis(&self) -> Option<Basis> {
        Basis::ALL.into_iter().find(|b| b.hwp_angle() == self.hwp_angle_deg)
    }
}

/// Analyzer settings of both parties plus a misalignment (degrees of
/// polarization angle) added to `theta_a - theta_b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Settings {
    pub alice: AnalyzerSetting,
    pub bob: AnalyzerSetting,
    pub misalignment_deg: f64,
}

impl Settings {
    pub fn basis(basis: Basis) -> Self {
        Self {
            alice: AnalyzerSetting::from_basis(basis),
            bob: AnalyzerSetting::from_basis(basis),
            misalignment_deg: 0.0,
        }
    }

    pub fn with_misalignment(mut self, deg: f64) -> Self {
        self.misalignment_deg = deg;
        self
    }
}

/// Joint outcome probabilities `[++, +-, -+, --]` for analyzer angles in
/// degrees on the state `(|HH> + |VV>)/sqrt(2)` mixed with white noise of
/// weight `1 - v`: `P(a, b) = (1 + a b v cos 2(theta_a - theta_b)) / 4`.
pub fn joint_outcome_probs(theta_a: f64, theta_b: f64, v: f64) -> [f64; 4] {
    let c = v * libm::cos(2.0 * (theta_a - theta_b).to_radians());
    let same = 0.25 * (1.0 + c);
    let diff = 0.25 * (1.0 - c);
    [same, diff, diff, same]
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct SourceParams {
    /// Pairs per second emitted at the crystal (before core coupling).
    pub pair_rate: f64,
    /// Werner visibility of the emitted state.
    pub visibility: f64,
    pub temperature: f64,
}

impl SourceParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.pair_rate > 0.0 && self.pair_rate.is_finite()) {
            return Err(invalid("pair_rate", "must be positive and finite"));
        }
        check_range("visibility", self.visibility, 0.0, 1.0)?;
        Ok(())
    }
}

/// Loss, detector and noise parameters of one arm of one channel.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct LinkParams {
    pub fiber_length_km: f64,
    pub fiber_loss_db_per_km: f64,
    /// Everything besides fiber attenuation and detector efficiency.
    pub system_loss_db: f64,
    pub detector_efficiency: f64,
    /// Dark counts per second, per detector.
    pub dark_rate: f64,
    pub jitter_sigma_ps: f64,
    pub crosstalk_prob: f64,
    /// Fixed propagation offset added to every detection in this arm.
    #[cfg_attr(feature = "serde", serde(default))]
    pub delay_ps: f64,
}

impl Default for LinkParams {
    fn default() -> Self {
        Self {
            fiber_length_km: 0.411,
            fiber_loss_db_per_km: 0.2,
            system_loss_db: 0.0,
            detector_efficiency: 0.8,
            dark_rate: 100.0,
            jitter_sigma_ps: 50.0,
            crosstalk_prob: 1e-4,
            delay_ps: 0.0,
        }
    }
}

impl LinkParams {
    pub fn validate(&self) -> Result<()> {
        check_range("fiber_length_km", self.fiber_length_km, 0.0, f64::MAX)?;
        check_range("fiber_loss_db_per_km", self.fiber_loss_db_per_km, 0.0, f64::MAX)?;
        check_range("system_loss_db", self.system_loss_db, 0.0, f64::MAX)?;
        check_range("detector_efficiency", self.detector_efficiency, f64::MIN_POSITIVE, 1.0)?;
        check_range("dark_rate", self.dark_rate, 0.0, f64::MAX)?;
        check_range("jitter_sigma_ps", self.jitter_sigma_ps, 0.0, f64::MAX)?;
        check_range("crosstalk_prob", self.crosstalk_prob, 0.0, 1.0)?;
        if self.crosstalk_prob >= 1.0 {
            return Err(invalid("crosstalk_prob", "must be below 1"));
        }
        if !self.delay_ps.is_finite() {
            return Err(invalid("delay_ps", "must be finite"));
        }
        Ok(())
    }

    /// Fiber plus system loss in dB, excluding the detector.
    pub fn optical_loss_db(&self) -> f64 {
        self.fiber_loss_db_per_km * self.fiber_length_km + self.system_loss_db
    }

    /// Probability that a photon entering the arm produces a detection
    /// (before crosstalk rerouting).
    pub fn transmission(&self) -> f64 {
        libm::pow(10.0, -self.optical_loss_db() / 10.0) * self.detector_efficiency
    }
}

/// One simulated channel: the core pair and the link of each arm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Channel {
    pub pair: CorePair,
    pub alice: LinkParams,
    pub bob: LinkParams,
}

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub enum SimWarning {
    /// This channel has zero coupling probability and produced no pairs.
    ZeroCoupling { pair_id: usize },
    /// No simulated channel couples any emission.
    NoCoupledEmission,
}

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct PairStreams {
    pub pair_id: usize,
    /// Alice's detections, channels `ALICE_T` / `ALICE_R`, sorted.
    pub alice: Vec<TimeTag>,
    /// Bob's detections, channels `BOB_T` / `BOB_R`, sorted.
    pub bob: Vec<TimeTag>,
}

/// Ground truth for one channel.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct PairTruth {
    pub pair_id: usize,
    /// Pairs emitted into this channel.
    pub emitted: u64,
    /// Emissions with both photons detected in this channel's own arms.
    pub true_coincidences: u64,
    pub alice_photons: u64,
    pub bob_photons: u64,
    pub alice_dark: u64,
    pub bob_dark: u64,
    /// Photons of this channel rerouted to neighboring cores.
    pub crosstalk_out: u64,
    /// Photons from neighboring channels detected here.
    pub crosstalk_in: u64,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct GroundTruth {
    pub duration_s: f64,
    pub seed: u64,
    pub pairs: Vec<PairTruth>,
    /// Emissions that entered none of the simulated channels.
    pub uncoupled_emissions: u64,
}

impl GroundTruth {
    pub fn total_emitted(&self) -> u64 {
        self.uncoupled_emissions + self.pairs.iter().map(|p| p.emitted).sum::<u64>()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimOutput {
    pub streams: Vec<PairStreams>,
    pub truth: GroundTruth,
    pub warnings: Vec<SimWarning>,
}

/// A photon rerouted into an adjacent core, pending delivery.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrosstalkPhoton {
    pub emit_ps: f64,
    pub target_core: usize,
    pub plus: bool,
    /// Standard-normal jitter draw, scaled by the receiving detector.
    pub jitter_z: f64,
}

/// Result of simulating one channel in isolation.
#[derive(Debug, Clone, PartialEq)]
pub struct PairSim {
    pub streams: PairStreams,
    pub truth: PairTruth,
    pub exports: Vec<CrosstalkPhoton>,
}

#[derive(Clone, Copy)]
enum Fate {
    Own,
    Crosstalk,
    Lost,
}

/// Random stream for channel `stream` under master `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Mix a master seed with work-unit coordinates (SplitMix64 finalizer).
pub fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mix = |mut z: u64| {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    };
    mix(mix(mix(seed) ^ a) ^ b)
}

fn truncated_normal(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= JITTER_TRUNCATION {
            return z;
        }
    }
}

fn detection_time(emit_ps: f64, link: &LinkParams, z: f64) -> u64 {
    let t = libm::round(emit_ps + link.delay_ps + link.jitter_sigma_ps * z);
    if t <= 0.0 {
        0
    } else {
        t as u64
    }
}

fn poisson_count(rng: &mut ChaCha8Rng, mean: f64) -> u64 {
    if !(mean > 0.0) {
        return 0;
    }
    match Poisson::new(mean) {
        Ok(p) => p.sample(rng) as u64,
        Err(_) => libm::round(mean) as u64,
    }
}

/// Homogeneous Poisson arrivals on `[0, duration_ps)`.
fn poisson_arrivals(rng: &mut ChaCha8Rng, rate_hz: f64, duration_ps: f64, mut f: impl FnMut(&mut ChaCha8Rng, f64)) -> u64 {
    if !(rate_hz > 0.0) {
        return 0;
    }
    let mean_gap = PS_PER_S / rate_hz;
    let mut t = 0.0;
    let mut n = 0;
    loop {
        let gap: f64 = Exp1.sample(rng);
        t += gap * mean_gap;
        if t >= duration_ps {
            return n;
        }
        f(rng, t);
        n += 1;
    }
}

fn cumulative<const N: usize>(weights: [f64; N]) -> [f64; N] {
    let total: f64 = weights.iter().sum();
    let mut acc = 0.0;
    let mut out = [0.0; N];
    for (o, w) in out.iter_mut().zip(weights) {
        acc += w / total;
        *o = acc;
    }
    out[N - 1] = 1.0;
    out
}

fn pick<const N: usize>(cdf: &[f64; N], u: f64) -> usize {
    cdf.iter().position(|&c| u < c).unwrap_or(N - 1)
}

/// Simulate one channel; crosstalk photons are returned as exports.
pub fn simulate_pair(
    source: &SourceParams,
    layout: &CoreLayout,
    ch: &Channel,
    settings: &Settings,
    duration_s: f64,
    seed: u64,
) -> PairSim {
    let pair = &ch.pair;
    let mut rng = stream_rng(seed, pair.pair_id as u64);
    let duration_ps = duration_s * PS_PER_S;
    let rate = source.pair_rate * pair.coupling_prob;

    let fates = |link: &LinkParams| {
        let t = link.transmission();
        [t * (1.0 - link.crosstalk_prob), t * link.crosstalk_prob, 1.0 - t]
    };
    let (fa, fb) = (fates(&ch.alice), fates(&ch.bob));
    const FATES: [Fate; 3] = [Fate::Own, Fate::Crosstalk, Fate::Lost];
    // the 8 combinations with at least one photon not lost
    let mut combo_w = [0.0; 8];
    for (k, w) in combo_w.iter_mut().enumerate() {
        *w = fa[k / 3] * fb[k % 3];
    }
    let p_any = combo_w.iter().sum::<f64>();
    let combo_cdf = cumulative(combo_w);

    let theta_a = settings.alice.analyzer_angle() + settings.misalignment_deg;
    let theta_b = settings.bob.analyzer_angle();
    let outcome_cdf = cumulative(joint_outcome_probs(theta_a, theta_b, source.visibility));

    let neighbors_a = layout.neighbors(pair.core_a);
    let neighbors_b = layout.neighbors(pair.core_b);

    let mut truth = PairTruth {
        pair_id: pair.pair_id,
        ..PairTruth::default()
    };
    let mut alice = Vec::new();
    let mut bob = Vec::new();
    let mut exports = Vec::new();

    let detected = poisson_arrivals(&mut rng, rate * p_any, duration_ps, |rng, t| {
        let combo = pick(&combo_cdf, rng.random());
        let outcome = pick(&outcome_cdf, rng.random());
        let (a_plus, b_plus) = (outcome < 2, outcome % 2 == 0);
        let arms = [
            (FATES[combo / 3], &ch.alice, &neighbors_a, a_plus, channel::ALICE_T),
            (FATES[combo % 3], &ch.bob, &neighbors_b, b_plus, channel::BOB_T),
        ];
        let mut own = 0;
        for (fate, link, neighbors, plus, base) in arms {
            match fate {
                Fate::Own => {
                    let z = truncated_normal(rng);
                    let tag = TimeTag {
                        time: detection_time(t, link, z),
                        channel: base + u8::from(!plus),
                        flags: 0,
                    };
                    if base == channel::ALICE_T {
                        alice.push(tag);
                    } else {
                        bob.push(tag);
                    }
                    own += 1;
                }
                Fate::Crosstalk => {
                    truth.crosstalk_out += 1;
                    if !neighbors.is_empty() {
                        let target_core = neighbors[rng.random_range(0..neighbors.len())];
                        exports.push(CrosstalkPhoton {
                            emit_ps: t,
                            target_core,
                            plus,
                            jitter_z: truncated_normal(rng),
                        });
                    }
                }
                Fate::Lost => {}
            }
        }
        if own == 2 {
            truth.true_coincidences += 1;
        }
    });
    truth.alice_photons = alice.len() as u64;
    truth.bob_photons = bob.len() as u64;
    let lost_both = fa[2] * fb[2];
    truth.emitted = detected + poisson_count(&mut rng, rate * lost_both * duration_s);

    for (link, base, stream, dark) in [
        (&ch.alice, channel::ALICE_T, &mut alice, &mut truth.alice_dark),
        (&ch.bob, channel::BOB_T, &mut bob, &mut truth.bob_dark),
    ] {
        for chan in [base, base + 1] {
            *dark += poisson_arrivals(&mut rng, link.dark_rate, duration_ps, |_, t| {
                stream.push(TimeTag {
                    time: libm::round(t) as u64,
                    channel: chan,
                    flags: FLAG_DARK,
                });
            });
        }
    }
    alice.sort_unstable();
    bob.sort_unstable();

    PairSim {
        streams: PairStreams {
            pair_id: pair.pair_id,
            alice,
            bob,
        },
        truth,
        exports,
    }
}

/// Deliver crosstalk photons into the simulated channels owning the target
/// cores; photons reaching unsimulated cores are dropped.
pub fn deliver_crosstalk(channels: &[Channel], sims: &mut [PairSim]) {
    let exports: Vec<CrosstalkPhoton> = sims.iter().flat_map(|s| s.exports.iter().copied()).collect();
    if exports.is_empty() {
        return;
    }
    let mut touched = alloc::vec![false; sims.len()];
    for x in exports {
        let target = channels.iter().enumerate().find_map(|(i, ch)| {
            if ch.pair.core_a == x.target_core {
                Some((i, true))
            } else if ch.pair.core_b == x.target_core {
                Some((i, false))
            } else {
                None
            }
        });
        let Some((i, is_alice)) = target else {
            continue;
        };
        let (link, base) = if is_alice {
            (&channels[i].alice, channel::ALICE_T)
        } else {
            (&channels[i].bob, channel::BOB_T)
        };
        let tag = TimeTag {
            time: detection_time(x.emit_ps, link, x.jitter_z),
            channel: base + u8::from(!x.plus),
            flags: 0,
        };
        let sim = &mut sims[i];
        if is_alice {
            sim.streams.alice.push(tag);
        } else {
            sim.streams.bob.push(tag);
        }
        sim.truth.crosstalk_in += 1;
        touched[i] = true;
    }
    for (sim, t) in sims.iter_mut().zip(touched) {
        if t {
            sim.streams.alice.sort_unstable();
            sim.streams.bob.sort_unstable();
        }
    }
}

fn validate_run(source: &SourceParams, channels: &[Channel], duration_s: f64) -> Result<()> {
    source.validate()?;
    if channels.is_empty() {
        return Err(Error::EmptyPairSet);
    }
    if !(duration_s > 0.0 && duration_s.is_finite()) {
        return Err(invalid("duration_s", "must be positive and finite"));
    }
    for ch in channels {
        ch.alice.validate()?;
        ch.bob.validate()?;
        check_range("coupling_prob", ch.pair.coupling_prob, 0.0, 1.0)?;
    }
    Ok(())
}

/// Simulate all channels for `duration_s` seconds with fixed settings.
pub fn simulate_run(
    source: &SourceParams,
    layout: &CoreLayout,
    channels: &[Channel],
    settings: &Settings,
    duration_s: f64,
    seed: u64,
) -> Result<SimOutput> {
    validate_run(source, channels, duration_s)?;
    let mut sims: Vec<PairSim> = channels
        .iter()
        .map(|ch| simulate_pair(source, layout, ch, settings, duration_s, seed))
        .collect();
    Ok(assemble(source, channels, &mut sims, duration_s, seed))
}

/// Like [`simulate_run`] but with the per-channel work dispatched through an
/// executor.
pub fn simulate_run_with<E: crate::exec::Executor>(
    exec: &E,
    source: &SourceParams,
    layout: &CoreLayout,
    channels: &[Channel],
    settings: &Settings,
    duration_s: f64,
    seed: u64,
) -> Result<SimOutput> {
    validate_run(source, channels, duration_s)?;
    let mut sims = exec.map(channels.len(), |i| {
        simulate_pair(source, layout, &channels[i], settings, duration_s, seed)
    });
    Ok(assemble(source, channels, &mut sims, duration_s, seed))
}

fn assemble(source: &SourceParams, channels: &[Channel], sims: &mut [PairSim], duration_s: f64, seed: u64) -> SimOutput {
    deliver_crosstalk(channels, sims);
    let mut warnings = Vec::new();
    for ch in channels {
        if ch.pair.coupling_prob == 0.0 {
            warnings.push(SimWarning::ZeroCoupling {
                pair_id: ch.pair.pair_id,
            });
        }
    }
    let coupled: f64 = channels.iter().map(|c| c.pair.coupling_prob).sum();
    if coupled == 0.0 {
        warnings.push(SimWarning::NoCoupledEmission);
    }
    let mut rng = stream_rng(seed, UNCOUPLED_STREAM);
    let uncoupled = poisson_count(&mut rng, source.pair_rate * (1.0 - coupled).max(0.0) * duration_s);
    SimOutput {
        truth: GroundTruth {
            duration_s,
            seed,
            pairs: sims.iter().map(|s| s.truth).collect(),
            uncoupled_emissions: uncoupled,
        },
        streams: sims.iter_mut().map(|s| core::mem::replace(&mut s.streams, empty_streams())).collect(),
        warnings,
    }
}

fn empty_streams() -> PairStreams {
    PairStreams {
        pair_id: 0,
        alice: Vec::new(),
        bob: Vec::new(),
    }
}

/// Bounded random walk of the polarization misalignment.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct DriftModel {
    /// Standard deviation of the walk after one hour, degrees.
    pub rate_deg_per_hour: f64,
    /// Reflecting bound on the offset, degrees.
    pub max_offset_deg: f64,
}

impl Default for DriftModel {
    fn default() -> Self {
        Self {
            rate_deg_per_hour: 0.0,
            max_offset_deg: 90.0,
        }
    }
}

/// Misalignment offsets (degrees) at the given times (seconds from the
/// start of the run, non-decreasing). The walk starts at 0 at time 0 and
/// each step has variance `rate^2 * dt_hours`, reflected at the bounds.
pub fn apply_polarization_drift(times_s: &[f64], model: &DriftModel, seed: u64) -> Result<Vec<f64>> {
    check_range("rate_deg_per_hour", model.rate_deg_per_hour, 0.0, f64::MAX)?;
    if !(model.max_offset_deg > 0.0) {
        return Err(invalid("max_offset_deg", "must be positive"));
    }
    let mut rng = stream_rng(seed, 0xD81F7);
    let bound = model.max_offset_deg;
    let mut offset = 0.0;
    let mut last = 0.0;
    let mut out = Vec::with_capacity(times_s.len());
    for &t in times_s {
        if !(t >= last) {
            return Err(invalid("times_s", "must be non-negative and non-decreasing"));
        }
        let dt_h = (t - last) / 3600.0;
        if model.rate_deg_per_hour > 0.0 && dt_h > 0.0 {
            let z: f64 = StandardNormal.sample(&mut rng);
            offset += model.rate_deg_per_hour * libm::sqrt(dt_h) * z;
            offset = reflect(offset, bound);
        }
        out.push(offset);
        last = t;
    }
    Ok(out)
}

fn reflect(mut x: f64, bound: f64) -> f64 {
    if !bound.is_finite() {
        return x;
    }
    let period = 4.0 * bound;
    x = libm::fmod(x + bound, period);
    if x < 0.0 {
        x += period;
    }
    // x in [0, 4b): triangle wave back onto [-b, b]
    if x <= 2.0 * bound {
        x - bound
    } else {
        3.0 * bound - x
    }
}
