//! Secret key rate versus fiber length.
//!
//! A baseline measured (or predicted) at the reference length is split into
//! true coincidences, photon singles and dark counts. Extra fiber scales
//! photons by `u = 10^(-alpha (L - L_ref) / 10)` per arm, so true
//! coincidences fall as `u^2` while accidentals `S_a S_b tau` fall only
//! until dark counts dominate the singles. The resulting QBER growth is
//! what bounds the distance.

use alloc::vec::Vec;

use crate::coincidence::CoincidenceWindow;
use crate::error::{check_range, invalid, Error, Result};
use crate::math::{basis_key_fraction, secret_key_rate, KeyRateInputs};
use crate::runner::PairReport;
use crate::sim::{LinkParams, SourceParams};

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

/// Length of the deployed fiber the baselines refer to.
pub const REFERENCE_LENGTH_KM: f64 = 0.411;

const SEARCH_LIMIT_KM: f64 = 1e5;
const BISECTION_TOLERANCE_KM: f64 = 0.1;
const MONOTONE_GRID: usize = 1000;

/// Fraction of true coincidences whose detection-time difference falls
/// inside the window, for Gaussian jitter on both detectors.
pub fn window_capture(sigma_a_ps: f64, sigma_b_ps: f64, window: &CoincidenceWindow) -> f64 {
    let sigma = libm::sqrt(sigma_a_ps * sigma_a_ps + sigma_b_ps * sigma_b_ps);
    if sigma == 0.0 {
        return 1.0;
    }
    libm::erf(window.half_width_ps() / (core::f64::consts::SQRT_2 * sigma))
}

/// Snap an intrinsic QBER that came out a rounding error below 0.
pub(crate) fn clamp_rounding(q: f64) -> f64 {
    if (-1e-12..0.0).contains(&q) {
        0.0
    } else {
        q
    }
}

/// One basis of a per-pair baseline at the reference length.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct BasisBaseline {
    /// Measured coincidences per second, accidentals included.
    pub coin_rate: f64,
    pub qber: f64,
    pub singles_a_hz: f64,
    pub singles_b_hz: f64,
}

/// Expected baseline of one channel whose source couples `coupling_prob`
/// of its pairs into it.
pub fn expected_baseline(
    source: &SourceParams,
    link: &LinkParams,
    coupling_prob: f64,
    window: &CoincidenceWindow,
) -> BasisBaseline {
    let lambda = source.pair_rate * coupling_prob;
    let t = link.transmission();
    let own = t * (1.0 - link.crosstalk_prob);
    // crosstalk photons arriving from neighbors roughly replace those leaving
    let singles = lambda * t + 2.0 * link.dark_rate;
    let eta = window_capture(link.jitter_sigma_ps, link.jitter_sigma_ps, window);
    let true_rate = lambda * own * own * eta;
    let acc = singles * singles * window.span_ps() * 1e-12;
    let q_int = 0.5 * (1.0 - source.visibility);
    let coin_rate = true_rate + acc;
    BasisBaseline {
        coin_rate,
        qber: if coin_rate > 0.0 { (q_int * true_rate + 0.5 * acc) / coin_rate } else { 0.5 },
        singles_a_hz: singles,
        singles_b_hz: singles,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct LinkModel {
    pub hv: BasisBaseline,
    pub da: BasisBaseline,
    pub reference_length_km: f64,
    pub fiber_loss_db_per_km: f64,
    /// Dark counts per second per arm (both detectors).
    pub dark_a_hz: f64,
    pub dark_b_hz: f64,
    /// Accepted delay span of the coincidence window.
    pub window_ps: f64,
    pub ec_efficiency: f64,
    pub pairs_in_ring: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct LinkPoint {
    pub length_km: f64,
    pub coin_rate_hv: f64,
    pub coin_rate_da: f64,
    pub qber_hv: f64,
    pub qber_da: f64,
    pub skr_pair_bits_s: f64,
    /// Pairs in the ring times the per-pair rate clamped at 0.
    pub skr_ring_bits_s: f64,
}

impl LinkPoint {
    pub fn coin_rate(&self) -> f64 {
        0.5 * (self.coin_rate_hv + self.coin_rate_da)
    }

    pub fn qber(&self) -> f64 {
        0.5 * (self.qber_hv + self.qber_da)
    }
}

#[derive(Debug, Clone, Copy)]
struct Split {
    true_rate: f64,
    q_int: f64,
    photons_a: f64,
    photons_b: f64,
}

impl Split {
    // accidentals divided by u^2, finite as long as the dark terms are
    fn acc_over_u2(&self, m: &LinkModel, inv_u: f64) -> f64 {
        let arm = |p: f64, d: f64| if d == 0.0 { p } else { p + d * inv_u };
        m.window_ps * 1e-12 * arm(self.photons_a, m.dark_a_hz) * arm(self.photons_b, m.dark_b_hz)
    }

    fn qber(&self, m: &LinkModel, inv_u: f64) -> f64 {
        let r = self.acc_over_u2(m, inv_u) / self.true_rate;
        if !r.is_finite() {
            return 0.5;
        }
        ((self.q_int + 0.5 * r) / (1.0 + r)).min(0.5)
    }
}

impl LinkModel {
    /// Mean predicted baseline of a ring's channels.
    pub fn from_setup(
        source: &SourceParams,
        link: &LinkParams,
        coupling_probs: &[f64],
        window: &CoincidenceWindow,
        ec_efficiency: f64,
    ) -> Result<Self> {
        if coupling_probs.is_empty() {
            return Err(Error::EmptyPairSet);
        }
        let mean_p = coupling_probs.iter().sum::<f64>() / coupling_probs.len() as f64;
        let b = expected_baseline(source, link, mean_p, window);
        let model = Self {
            hv: b,
            da: b,
            reference_length_km: link.fiber_length_km,
            fiber_loss_db_per_km: link.fiber_loss_db_per_km,
            dark_a_hz: 2.0 * link.dark_rate,
            dark_b_hz: 2.0 * link.dark_rate,
            window_ps: window.span_ps(),
            ec_efficiency,
            pairs_in_ring: coupling_probs.len(),
        };
        model.validate()?;
        Ok(model)
    }

    /// Baseline from analyzed pair reports, averaged over the given pairs.
    pub fn from_reports(
        reports: &[PairReport],
        link: &LinkParams,
        window: &CoincidenceWindow,
        ec_efficiency: f64,
        pairs_in_ring: usize,
    ) -> Result<Self> {
        if reports.is_empty() {
            return Err(Error::EmptyPairSet);
        }
        let n = reports.len() as f64;
        let mean = |f: &dyn Fn(&PairReport) -> Option<f64>| -> Result<f64> {
            let mut acc = 0.0;
            for r in reports {
                acc += f(r).ok_or(Error::UndefinedVisibility)?;
            }
            Ok(acc / n)
        };
        let sa = mean(&|r| Some(r.singles_a_hz))?;
        let sb = mean(&|r| Some(r.singles_b_hz))?;
        let model = Self {
            hv: BasisBaseline {
                coin_rate: mean(&|r| Some(r.coin_rate_hv))?,
                qber: mean(&|r| r.qber_hv)?,
                singles_a_hz: sa,
                singles_b_hz: sb,
            },
            da: BasisBaseline {
                coin_rate: mean(&|r| Some(r.coin_rate_da))?,
                qber: mean(&|r| r.qber_da)?,
                singles_a_hz: sa,
                singles_b_hz: sb,
            },
            reference_length_km: link.fiber_length_km,
            fiber_loss_db_per_km: link.fiber_loss_db_per_km,
            dark_a_hz: 2.0 * link.dark_rate,
            dark_b_hz: 2.0 * link.dark_rate,
            window_ps: window.span_ps(),
            ec_efficiency,
            pairs_in_ring,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        check_range("reference_length_km", self.reference_length_km, 0.0, f64::MAX)?;
        check_range("fiber_loss_db_per_km", self.fiber_loss_db_per_km, 0.0, f64::MAX)?;
        check_range("dark_a_hz", self.dark_a_hz, 0.0, f64::MAX)?;
        check_range("dark_b_hz", self.dark_b_hz, 0.0, f64::MAX)?;
        check_range("ec_efficiency", self.ec_efficiency, 0.0, f64::MAX)?;
        if !(self.window_ps > 0.0 && self.window_ps.is_finite()) {
            return Err(invalid("window_ps", "must be positive"));
        }
        for b in [&self.hv, &self.da] {
            check_range("qber", b.qber, 0.0, 0.5)?;
            check_range("coin_rate", b.coin_rate, 0.0, f64::MAX)?;
            for s in [b.singles_a_hz, b.singles_b_hz] {
                if !(s >= b.coin_rate) || !s.is_finite() {
                    return Err(invalid("singles_hz", "must be finite and at least the coincidence rate"));
                }
            }
            self.split(b)?;
        }
        Ok(())
    }

    fn split(&self, b: &BasisBaseline) -> Result<Split> {
        let photons_a = b.singles_a_hz - self.dark_a_hz;
        let photons_b = b.singles_b_hz - self.dark_b_hz;
        if photons_a < 0.0 || photons_b < 0.0 {
            return Err(Error::InfeasibleTarget("singles below the dark-count rate"));
        }
        let acc = b.singles_a_hz * b.singles_b_hz * self.window_ps * 1e-12;
        let true_rate = b.coin_rate - acc;
        if !(true_rate > 0.0) {
            return Err(Error::InfeasibleTarget("accidentals exceed the coincidence rate"));
        }
        let q_int = clamp_rounding((b.qber * b.coin_rate - 0.5 * acc) / true_rate);
        if !(0.0..=0.5).contains(&q_int) {
            return Err(Error::InfeasibleTarget("QBER below the accidental floor"));
        }
        Ok(Split {
            true_rate,
            q_int,
            photons_a,
            photons_b,
        })
    }

    fn inv_u(&self, length_km: f64) -> f64 {
        libm::pow(10.0, self.fiber_loss_db_per_km * (length_km - self.reference_length_km) / 10.0)
    }

    /// Per-pair and ring key rate at `length_km`.
    pub fn keyrate_at_length(&self, length_km: f64) -> Result<LinkPoint> {
        check_range("length_km", length_km, 0.0, f64::MAX)?;
        let (hv, da) = (self.split(&self.hv)?, self.split(&self.da)?);
        let inv_u = self.inv_u(length_km);
        let u = 1.0 / inv_u;
        let rate = |s: &Split| {
            let photons = |p: f64, d: f64| p * u + d;
            s.true_rate * u * u
                + self.window_ps * 1e-12 * photons(s.photons_a, self.dark_a_hz) * photons(s.photons_b, self.dark_b_hz)
        };
        let (c_hv, c_da) = (rate(&hv), rate(&da));
        let (q_hv, q_da) = (hv.qber(self, inv_u), da.qber(self, inv_u));
        let skr = secret_key_rate(&KeyRateInputs {
            coin_rate_hv: c_hv,
            coin_rate_da: c_da,
            qber_hv: q_hv,
            qber_da: q_da,
            ec_efficiency: self.ec_efficiency,
        })?;
        Ok(LinkPoint {
            length_km,
            coin_rate_hv: c_hv,
            coin_rate_da: c_da,
            qber_hv: q_hv,
            qber_da: q_da,
            skr_pair_bits_s: skr,
            skr_ring_bits_s: self.pairs_in_ring as f64 * skr.max(0.0),
        })
    }

    // Key rate divided by u^2: same sign, but no underflow far out.
    fn scaled_rate(&self, length_km: f64) -> Result<f64> {
        let inv_u = self.inv_u(length_km);
        let mut total = 0.0;
        for b in [&self.hv, &self.da] {
            let s = self.split(b)?;
            let q = s.qber(self, inv_u);
            let f = basis_key_fraction(q, self.ec_efficiency)?;
            let c = s.true_rate + s.acc_over_u2(self, inv_u);
            if c.is_infinite() {
                return Ok(if f < 0.0 { f64::NEG_INFINITY } else { f64::INFINITY });
            }
            total += 0.5 * c * f;
        }
        Ok(total)
    }

    /// Length where the per-pair key rate reaches zero, to within 0.1 km;
    /// `f64::INFINITY` when it stays positive.
    pub fn max_positive_length(&self) -> Result<f64> {
        let l0 = self.reference_length_km;
        if !(self.keyrate_at_length(l0)?.skr_pair_bits_s > 0.0) {
            return Err(Error::NoPositiveDistance);
        }
        let mut span = 1.0;
        while self.scaled_rate(l0 + span)? > 0.0 {
            span *= 2.0;
            if span > SEARCH_LIMIT_KM {
                return Ok(f64::INFINITY);
            }
        }
        let (mut lo, mut hi) = (l0, l0 + span);
        self.check_monotone(lo, hi)?;
        while hi - lo > BISECTION_TOLERANCE_KM {
            let mid = 0.5 * (lo + hi);
            if self.scaled_rate(mid)? > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(0.5 * (lo + hi))
    }

    // Past the root the unclamped deficit shrinks back toward 0 with the
    // rates, so only the clamped rate is monotone.
    fn check_monotone(&self, lo: f64, hi: f64) -> Result<()> {
        let mut prev = self.keyrate_at_length(lo)?.skr_pair_bits_s.max(0.0);
        for k in 1..=MONOTONE_GRID {
            let l = lo + (hi - lo) * k as f64 / MONOTONE_GRID as f64;
            let r = self.keyrate_at_length(l)?.skr_pair_bits_s.max(0.0);
            if r > prev + 1e-12 * prev.abs() {
                return Err(Error::NotMonotone { lo_km: lo, hi_km: hi });
            }
            prev = r;
        }
        Ok(())
    }

    /// Key rate on the grid `0, step, 2 step, ... <= lmax`.
    pub fn sweep(&self, lmax_km: f64, step_km: f64) -> Result<Vec<LinkPoint>> {
        if !(step_km > 0.0 && step_km.is_finite()) {
            return Err(invalid("step_km", "must be positive"));
        }
        if !(lmax_km >= self.reference_length_km && lmax_km.is_finite()) {
            return Err(invalid("lmax_km", "must be finite and at least the reference length"));
        }
        let n = libm::floor(lmax_km / step_km + 1e-9) as usize;
        (0..=n).map(|k| self.keyrate_at_length(k as f64 * step_km)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn baseline(coin: f64, q: f64, singles: f64) -> BasisBaseline {
        BasisBaseline {
            coin_rate: coin,
            qber: q,
            singles_a_hz: singles,
            singles_b_hz: singles,
        }
    }

    fn model(dark: f64) -> LinkModel {
        LinkModel {
            hv: baseline(7832.0, 0.0265, 466_000.0),
            da: baseline(7770.0, 0.0272, 466_000.0),
            reference_length_km: REFERENCE_LENGTH_KM,
            fiber_loss_db_per_km: 0.2,
            dark_a_hz: dark,
            dark_b_hz: dark,
            window_ps: 300.0,
            ec_efficiency: 1.2,
            pairs_in_ring: 6,
        }
    }

    #[test]
    fn reference_length_reproduces_baseline() {
        let m = model(200.0);
        let p = m.keyrate_at_length(REFERENCE_LENGTH_KM).unwrap();
        let want = secret_key_rate(&KeyRateInputs {
            coin_rate_hv: 7832.0,
            coin_rate_da: 7770.0,
            qber_hv: 0.0265,
            qber_da: 0.0272,
            ec_efficiency: 1.2,
        })
        .unwrap();
        assert!((p.skr_pair_bits_s - want).abs() < 1e-9 * want);
        assert!((p.qber_hv - 0.0265).abs() < 1e-15);
        assert_eq!(p.skr_ring_bits_s, 6.0 * p.skr_pair_bits_s);
    }

    #[test]
    fn true_coincidences_scale_with_u_squared() {
        let mut m = model(0.0);
        m.window_ps = 1e-30;
        let c0 = m.keyrate_at_length(REFERENCE_LENGTH_KM).unwrap().coin_rate_hv;
        let c50 = m.keyrate_at_length(REFERENCE_LENGTH_KM + 50.0).unwrap().coin_rate_hv;
        assert!((c50 / c0 - 0.01).abs() < 1e-12);
    }

    #[test]
    fn pure_loss_keeps_qber() {
        let mut m = model(0.0);
        m.hv = baseline(5000.0, 0.03, 5000.0);
        m.da = m.hv;
        // singles equal to coincidences leave no room for accidentals only
        // through a vanishing window
        m.window_ps = 1e-40;
        for l in [0.0, 10.0, 100.0, 300.0] {
            let p = m.keyrate_at_length(l).unwrap();
            assert!((p.qber_hv - 0.03).abs() < 1e-12);
        }
    }

    #[test]
    fn noiseless_link_never_crosses_zero() {
        // no dark counts and no intrinsic errors: all errors are photon
        // accidentals, which fall with u^2 like the true coincidences
        let mut m = model(0.0);
        for b in [&mut m.hv, &mut m.da] {
            let acc = b.singles_a_hz * b.singles_b_hz * 300e-12;
            b.qber = 0.5 * acc / b.coin_rate;
        }
        assert_eq!(m.max_positive_length().unwrap(), f64::INFINITY);
    }

    #[test]
    fn more_dark_counts_shorten_the_link() {
        let base = model(200.0).max_positive_length().unwrap();
        let doubled = model(400.0).max_positive_length().unwrap();
        assert!(base.is_finite() && doubled < base, "{doubled} vs {base}");
        // root is bracketed by the sign change
        let m = model(200.0);
        assert!(m.keyrate_at_length(base - 0.2).unwrap().skr_pair_bits_s > 0.0);
        assert!(m.keyrate_at_length(base + 0.2).unwrap().skr_pair_bits_s <= 0.0);
    }

    #[test]
    fn qber_tends_to_one_half() {
        let m = model(200.0);
        let far = m.keyrate_at_length(2000.0).unwrap();
        assert!((far.qber_hv - 0.5).abs() < 1e-9);
        let very_far = m.keyrate_at_length(1e6).unwrap();
        assert_eq!(very_far.qber_da, 0.5);
        assert_eq!(very_far.skr_ring_bits_s, 0.0);
    }

    #[test]
    fn monotone_on_dense_grid() {
        let m = model(200.0);
        let pts = m.sweep(250.0, 0.5).unwrap();
        assert_eq!(pts.len(), 501);
        assert!(pts.windows(2).all(|w| w[1].skr_ring_bits_s <= w[0].skr_ring_bits_s));
        let root = m.max_positive_length().unwrap();
        let before: Vec<&LinkPoint> = pts.iter().filter(|p| p.length_km < root).collect();
        assert!(before.windows(2).all(|w| w[1].skr_pair_bits_s < w[0].skr_pair_bits_s));
        assert!(pts.windows(2).all(|w| w[1].qber_hv >= w[0].qber_hv));
    }

    #[test]
    fn errors() {
        let m = model(200.0);
        assert!(m.sweep(100.0, 0.0).is_err());
        assert!(m.sweep(0.2, 1.0).is_err());
        assert!(m.keyrate_at_length(-1.0).is_err());
        let mut bad = m;
        bad.hv.qber = 0.2;
        bad.da.qber = 0.2;
        assert_eq!(bad.max_positive_length(), Err(Error::NoPositiveDistance));
        let mut floor = m;
        floor.hv.qber = 0.0;
        assert!(floor.validate().is_err());
    }

    #[test]
    fn capture_of_gaussian_jitter() {
        let w = CoincidenceWindow::full(300);
        assert!((window_capture(50.0, 50.0, &w) - libm::erf(1.5)).abs() < 1e-15);
        assert_eq!(window_capture(0.0, 0.0, &w), 1.0);
    }

    #[test]
    fn expected_baseline_round_trips_through_split() {
        let source = SourceParams {
            pair_rate: 3e7,
            visibility: 0.95,
            temperature: 82.0,
        };
        let link = LinkParams::default();
        let w = CoincidenceWindow::default();
        let m = LinkModel::from_setup(&source, &link, &[0.1; 6], &w, 1.2).unwrap();
        let s = m.split(&m.hv).unwrap();
        assert!((s.q_int - 0.025).abs() < 1e-12);
        assert!((s.photons_a - 3e6 * link.transmission()).abs() < 1e-6);
    }
}
