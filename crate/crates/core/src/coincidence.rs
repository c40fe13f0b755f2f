//! Coincidence identification over sorted timetag streams.
//!
//! Both the cross-correlation and the windowed matching run as linear
//! two-pointer sweeps over the two streams.

use alloc::vec::Vec;

use crate::error::{invalid, Error, Result};
use crate::math::BasisCounts;
use crate::sim::{channel, Basis, TimeTag};

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

pub const DEFAULT_WINDOW_PS: u64 = 300;
pub const DEFAULT_BIN_WIDTH_PS: u64 = 50;
pub const DEFAULT_RANGE_PS: u64 = 5_000;
pub const DEFAULT_ACCIDENTAL_OFFSET_PS: i64 = 10_000;
/// Accidental probes must sit at least this many window widths off the peak.
pub const MIN_OFFSET_WINDOWS: u64 = 10;

/// Anything carrying a picosecond timestamp.
pub trait Stamp {
    fn time_ps(&self) -> u64;
}

impl Stamp for u64 {
    fn time_ps(&self) -> u64 {
        *self
    }
}

impl Stamp for TimeTag {
    fn time_ps(&self) -> u64 {
        self.time
    }
}

/// Reject streams that are not sorted non-decreasing in time.
pub fn check_sorted<T: Stamp>(stream: &[T], name: &'static str) -> Result<()> {
    match stream.windows(2).position(|w| w[1].time_ps() < w[0].time_ps()) {
        Some(i) => Err(Error::UnsortedStream { stream: name, index: i + 1 }),
        None => Ok(()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum WindowSemantics {
    /// `width` is the full window: accept `|dt| <= width / 2`.
    #[default]
    FullWidth,
    /// `width` is the half window: accept `|dt| <= width`.
    HalfWidth,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct CoincidenceWindow {
    pub width_ps: u64,
    #[cfg_attr(feature = "serde", serde(default))]
    pub semantics: WindowSemantics,
}

impl Default for CoincidenceWindow {
    fn default() -> Self {
        Self::full(DEFAULT_WINDOW_PS)
    }
}

impl CoincidenceWindow {
    pub fn full(width_ps: u64) -> Self {
        Self {
            width_ps,
            semantics: WindowSemantics::FullWidth,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width_ps == 0 {
            return Err(invalid("window_ps", "must be positive"));
        }
        Ok(())
    }

    /// Largest accepted `|dt|` in ps.
    pub fn half_width_ps(&self) -> f64 {
        match self.semantics {
            WindowSemantics::FullWidth => self.width_ps as f64 / 2.0,
            WindowSemantics::HalfWidth => self.width_ps as f64,
        }
    }

    /// Total accepted delay span, the window entering accidental rates.
    pub fn span_ps(&self) -> f64 {
        2.0 * self.half_width_ps()
    }

    fn accepts(&self, dt: i128) -> bool {
        let w = self.width_ps as i128;
        match self.semantics {
            WindowSemantics::FullWidth => 2 * dt.abs() <= w,
            WindowSemantics::HalfWidth => dt.abs() <= w,
        }
    }

    fn too_early(&self, dt: i128) -> bool {
        let w = self.width_ps as i128;
        match self.semantics {
            WindowSemantics::FullWidth => 2 * dt < -w,
            WindowSemantics::HalfWidth => dt < -w,
        }
    }
}

/// Histogram of `t_b - t_a` over all pairs within `±range`. Bin `i` is
/// centered at `(i - k) * bin_width` for `k = bins.len() / 2`.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct CorrelationHistogram {
    pub bin_width_ps: u64,
    pub range_ps: u64,
    pub bins: Vec<u64>,
}

impl CorrelationHistogram {
    fn half_bins(&self) -> i64 {
        (self.bins.len() / 2) as i64
    }

    pub fn bin_center(&self, i: usize) -> i64 {
        (i as i64 - self.half_bins()) * self.bin_width_ps as i64
    }

    /// Index of the bin containing `delay`, if inside the histogram.
    pub fn bin_index(&self, delay: i64) -> Option<usize> {
        let w = self.bin_width_ps as i64;
        let i = (2 * delay + w).div_euclid(2 * w) + self.half_bins();
        usize::try_from(i).ok().filter(|&i| i < self.bins.len())
    }

    pub fn total(&self) -> u64 {
        self.bins.iter().sum()
    }
}

/// Correlation histogram of the delays `t_b - t_a` within `±range_ps`.
pub fn cross_correlation<A: Stamp, B: Stamp>(
    a: &[A],
    b: &[B],
    bin_width_ps: u64,
    range_ps: u64,
) -> Result<CorrelationHistogram> {
    if bin_width_ps == 0 {
        return Err(invalid("bin_width_ps", "must be positive"));
    }
    if range_ps < bin_width_ps {
        return Err(invalid("range_ps", "must be at least one bin width"));
    }
    check_sorted(a, "a")?;
    check_sorted(b, "b")?;
    let k = (2 * range_ps + bin_width_ps) / (2 * bin_width_ps);
    let mut hist = CorrelationHistogram {
        bin_width_ps,
        range_ps,
        bins: alloc::vec![0; 2 * k as usize + 1],
    };
    let range = range_ps as i128;
    let mut start = 0;
    for ta in a.iter().map(|x| x.time_ps() as i128) {
        while start < b.len() && (b[start].time_ps() as i128) < ta - range {
            start += 1;
        }
        for tb in b[start..].iter().map(|x| x.time_ps() as i128) {
            let d = tb - ta;
            if d > range {
                break;
            }
            // |d| <= range fits i64 and always lands inside the bins
            if let Some(i) = hist.bin_index(d as i64) {
                hist.bins[i] += 1;
            }
        }
    }
    Ok(hist)
}

/// Center of the fullest bin. Ties go to the smallest `|delay|`, then to
/// the negative delay.
pub fn find_peak_delay(hist: &CorrelationHistogram) -> Result<i64> {
    let max = hist.bins.iter().copied().max().unwrap_or(0);
    if max == 0 {
        return Err(Error::NoPeak);
    }
    (0..hist.bins.len())
        .filter(|&i| hist.bins[i] == max)
        .map(|i| hist.bin_center(i))
        .min_by_key(|&d| (d.unsigned_abs(), d > 0))
        .ok_or(Error::NoPeak)
}

/// Greedy one-to-one matching in time order: each `a` takes the earliest
/// unused `b` with `t_b - t_a - delay` inside the window. Returns index
/// pairs `(i_a, i_b)`.
pub fn match_coincidences<A: Stamp, B: Stamp>(
    a: &[A],
    b: &[B],
    window: &CoincidenceWindow,
    delay_ps: i64,
) -> Result<Vec<(usize, usize)>> {
    let mut out = Vec::new();
    sweep(a, b, window, delay_ps, |i, j| out.push((i, j)))?;
    Ok(out)
}

/// Number of pairs [`match_coincidences`] would return.
pub fn count_coincidences<A: Stamp, B: Stamp>(
    a: &[A],
    b: &[B],
    window: &CoincidenceWindow,
    delay_ps: i64,
) -> Result<u64> {
    let mut n = 0;
    sweep(a, b, window, delay_ps, |_, _| n += 1)?;
    Ok(n)
}

fn sweep<A: Stamp, B: Stamp>(
    a: &[A],
    b: &[B],
    window: &CoincidenceWindow,
    delay_ps: i64,
    mut on_match: impl FnMut(usize, usize),
) -> Result<()> {
    window.validate()?;
    check_sorted(a, "a")?;
    check_sorted(b, "b")?;
    let delay = delay_ps as i128;
    let mut j = 0;
    for (i, ta) in a.iter().enumerate() {
        let ta = ta.time_ps() as i128;
        // b tags before this window can match no later a either
        while j < b.len() && window.too_early(b[j].time_ps() as i128 - ta - delay) {
            j += 1;
        }
        if j < b.len() && window.accepts(b[j].time_ps() as i128 - ta - delay) {
            on_match(i, j);
            j += 1;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct AccidentalEstimate {
    /// Coincidences counted at the offset delay.
    pub measured: u64,
    /// `S_a * S_b * window * duration` from the observed singles.
    pub predicted: f64,
}

/// Accidental coincidences measured at `delay + offset`, far from the
/// correlation peak, alongside the singles-based prediction.
pub fn estimate_accidentals<A: Stamp, B: Stamp>(
    a: &[A],
    b: &[B],
    window: &CoincidenceWindow,
    delay_ps: i64,
    offset_ps: i64,
    duration_s: f64,
) -> Result<AccidentalEstimate> {
    window.validate()?;
    if offset_ps.unsigned_abs() < MIN_OFFSET_WINDOWS * window.width_ps {
        return Err(Error::OffsetTooSmall {
            offset_ps,
            window_ps: window.width_ps,
        });
    }
    if !(duration_s > 0.0 && duration_s.is_finite()) {
        return Err(invalid("duration_s", "must be positive and finite"));
    }
    let measured = count_coincidences(a, b, window, delay_ps.saturating_add(offset_ps))?;
    let predicted = a.len() as f64 * b.len() as f64 * window.span_ps() * 1e-12 / duration_s;
    Ok(AccidentalEstimate { measured, predicted })
}

/// Basis counts from matched Alice/Bob detections, keyed by the
/// transmitted (+) or reflected (-) port on each side.
pub fn classify_matches(alice: &[TimeTag], bob: &[TimeTag], matches: &[(usize, usize)]) -> BasisCounts {
    let mut c = [0u64; 4];
    for &(i, j) in matches {
        let a_minus = usize::from(alice[i].channel != channel::ALICE_T);
        let b_minus = usize::from(bob[j].channel != channel::BOB_T);
        c[2 * a_minus + b_minus] += 1;
    }
    BasisCounts::from_array(c)
}

/// Counts of one acquisition with fixed analyzer settings.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct CoincidenceTally {
    pub basis_a: Basis,
    pub basis_b: Basis,
    pub counts: BasisCounts,
    pub duration_s: f64,
    /// Accidental coincidences measured at the offset delay.
    pub accidentals: u64,
    pub singles_a: u64,
    pub singles_b: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct AnalysisParams {
    pub window: CoincidenceWindow,
    pub bin_width_ps: u64,
    pub range_ps: u64,
    pub accidental_offset_ps: i64,
    /// Subtract measured accidentals from each outcome before use.
    #[cfg_attr(feature = "serde", serde(default))]
    pub subtract_accidentals: bool,
}

impl Default for AnalysisParams {
    fn default() -> Self {
        Self {
            window: CoincidenceWindow::default(),
            bin_width_ps: DEFAULT_BIN_WIDTH_PS,
            range_ps: DEFAULT_RANGE_PS,
            accidental_offset_ps: DEFAULT_ACCIDENTAL_OFFSET_PS,
            subtract_accidentals: false,
        }
    }
}

/// Delay estimate for a stream pair; 0 when there is nothing to correlate.
pub fn estimate_delay(alice: &[TimeTag], bob: &[TimeTag], params: &AnalysisParams) -> Result<i64> {
    let hist = cross_correlation(alice, bob, params.bin_width_ps, params.range_ps)?;
    match find_peak_delay(&hist) {
        Ok(d) => Ok(d),
        Err(Error::NoPeak) => Ok(0),
        Err(e) => Err(e),
    }
}

/// Tally one acquisition: align on the correlation peak (or the given
/// delay), match, classify and probe accidentals.
pub fn tally_acquisition(
    alice: &[TimeTag],
    bob: &[TimeTag],
    bases: (Basis, Basis),
    duration_s: f64,
    delay_ps: Option<i64>,
    params: &AnalysisParams,
) -> Result<CoincidenceTally> {
    let delay = match delay_ps {
        Some(d) => d,
        None => estimate_delay(alice, bob, params)?,
    };
    let matches = match_coincidences(alice, bob, &params.window, delay)?;
    let mut counts = classify_matches(alice, bob, &matches);
    let acc = estimate_accidentals(alice, bob, &params.window, delay, params.accidental_offset_ps, duration_s)?;
    if params.subtract_accidentals {
        // accidentals spread evenly over the four outcomes
        let share = acc.measured as f64 / 4.0;
        let mut c = counts.as_array();
        for x in &mut c {
            *x = libm::round((*x as f64 - share).max(0.0)) as u64;
        }
        counts = BasisCounts::from_array(c);
    }
    Ok(CoincidenceTally {
        basis_a: bases.0,
        basis_b: bases.1,
        counts,
        duration_s,
        accidentals: acc.measured,
        singles_a: alice.len() as u64,
        singles_b: bob.len() as u64,
    })
}
