//! Key-rate formulas: binary entropy, polarization visibility, QBER and the
//! asymptotic secret key rate of a two-basis entanglement-based protocol.

use crate::error::{check_range, invalid, Error, Result};

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

/// Error-correction efficiency used when none is configured.
pub const DEFAULT_EC_EFFICIENCY: f64 = 1.2;

/// Binary Shannon entropy `H2(x)` in bits, with `0 log 0 = 0`.
///
/// Evaluated through `ln_1p` so that tiny (and near-one) arguments keep full
/// relative precision.
pub fn binary_entropy(x: f64) -> Result<f64> {
    check_range("x", x, 0.0, 1.0)?;
    // 1 - x is exact for x in [0.5, 1], so fold onto the lower half.
    let p = if x > 0.5 { 1.0 - x } else { x };
    if p == 0.0 {
        return Ok(0.0);
    }
    let nats = -p * libm::log(p) - (1.0 - p) * libm::log1p(-p);
    Ok(nats / core::f64::consts::LN_2)
}

/// Coincidence counts for the four outcome combinations of one basis pair.
///
/// `pp` and `mm` are the correlated outcomes (e.g. HH and VV), `pm` and `mp`
/// the anti-correlated ones (HV and VH).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct BasisCounts {
    pub pp: u64,
    pub pm: u64,
    pub mp: u64,
    pub mm: u64,
}

impl BasisCounts {
    pub const fn new(pp: u64, pm: u64, mp: u64, mm: u64) -> Self {
        Self { pp, pm, mp, mm }
    }

    pub fn total(&self) -> u64 {
        self.pp + self.pm + self.mp + self.mm
    }

    pub fn errors(&self) -> u64 {
        self.pm + self.mp
    }

    pub fn correlated(&self) -> u64 {
        self.pp + self.mm
    }

    /// Counts indexed by `[++, +-, -+, --]`.
    pub fn as_array(&self) -> [u64; 4] {
        [self.pp, self.pm, self.mp, self.mm]
    }

    pub fn from_array(c: [u64; 4]) -> Self {
        Self::new(c[0], c[1], c[2], c[3])
    }

    pub fn merge(&mut self, other: &BasisCounts) {
        self.pp += other.pp;
        self.pm += other.pm;
        self.mp += other.mp;
        self.mm += other.mm;
    }
}

/// Visibility derived from integer counts.
///
/// Keeps the exact ratio so that the QBER recovered from it is the correctly
/// rounded `errors / total`, identical to counting errors directly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Visibility {
    errors: u64,
    total: u64,
}

impl Visibility {
    pub fn value(&self) -> f64 {
        let contrast = self.total as i128 - 2 * self.errors as i128;
        contrast as f64 / self.total as f64
    }

    /// `(1 - V) / 2`, evaluated on the exact ratio: equals `errors / total`.
    pub fn qber(&self) -> f64 {
        self.errors as f64 / self.total as f64
    }

    pub fn total(&self) -> u64 {
        self.total
    }
}

/// `(C++ + C-- - C+- - C-+) / total`. Fails when no coincidences were counted.
pub fn visibility_from_counts(counts: &BasisCounts) -> Result<Visibility> {
    let total = counts.total();
    if total == 0 {
        return Err(Error::UndefinedVisibility);
    }
    Ok(Visibility {
        errors: counts.errors(),
        total,
    })
}

/// QBER `(1 - v) / 2` for a visibility in `[-1, 1]`.
pub fn qber_from_visibility(v: f64) -> Result<f64> {
    check_range("visibility", v, -1.0, 1.0)?;
    Ok((1.0 - v) / 2.0)
}

/// Inputs of the two-basis secret key rate.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct KeyRateInputs {
    /// Coincidences per second measured in the H/V basis.
    pub coin_rate_hv: f64,
    /// Coincidences per second measured in the D/A basis.
    pub coin_rate_da: f64,
    pub qber_hv: f64,
    pub qber_da: f64,
    /// Error-correction efficiency `f`.
    pub ec_efficiency: f64,
}

impl KeyRateInputs {
    pub fn validate(&self) -> Result<()> {
        check_range("qber_hv", self.qber_hv, 0.0, 0.5)?;
        check_range("qber_da", self.qber_da, 0.0, 0.5)?;
        check_range("coin_rate_hv", self.coin_rate_hv, 0.0, f64::INFINITY)?;
        check_range("coin_rate_da", self.coin_rate_da, 0.0, f64::INFINITY)?;
        check_range("ec_efficiency", self.ec_efficiency, 0.0, f64::INFINITY)?;
        Ok(())
    }
}

/// Secret fraction of one basis, `1 - (1 + f) H2(q)`. Negative above threshold.
pub fn basis_key_fraction(qber: f64, ec_efficiency: f64) -> Result<f64> {
    check_range("qber", qber, 0.0, 0.5)?;
    check_range("ec_efficiency", ec_efficiency, 0.0, f64::INFINITY)?;
    Ok(1.0 - (1.0 + ec_efficiency) * binary_entropy(qber)?)
}

/// Asymptotic secret key rate in bits per second:
///
/// `R = C_HV (1 - (1+f) H2(Q_HV)) / 2 + C_DA (1 - (1+f) H2(Q_DA)) / 2`.
///
/// The raw value is returned; negative means no secure key. Clamping is left
/// to reporting code.
pub fn secret_key_rate(inputs: &KeyRateInputs) -> Result<f64> {
    inputs.validate()?;
    let f = inputs.ec_efficiency;
    let hv = basis_key_fraction(inputs.qber_hv, f)?;
    let da = basis_key_fraction(inputs.qber_da, f)?;
    Ok(0.5 * inputs.coin_rate_hv * hv + 0.5 * inputs.coin_rate_da * da)
}

/// QBER at which [`basis_key_fraction`] crosses zero, found by bisection to
/// absolute precision below 1e-13. Returns 0.5 for `f = 0`.
pub fn qber_threshold(ec_efficiency: f64) -> Result<f64> {
    if !(ec_efficiency >= 0.0 && ec_efficiency.is_finite()) {
        return Err(invalid("ec_efficiency", "must be finite and non-negative"));
    }
    let fraction = |q: f64| 1.0 - (1.0 + ec_efficiency) * binary_entropy(q).unwrap_or(1.0);
    let (mut lo, mut hi) = (0.0_f64, 0.5_f64);
    if fraction(hi) >= 0.0 {
        return Ok(hi);
    }
    while hi - lo > 1e-14 {
        let mid = 0.5 * (lo + hi);
        if fraction(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn entropy_endpoints_and_reference() {
        assert_eq!(binary_entropy(0.5).unwrap(), 1.0);
        assert_eq!(binary_entropy(0.0).unwrap(), 0.0);
        assert_eq!(binary_entropy(1.0).unwrap(), 0.0);
        // 40-digit reference: 0.19439185783157616...
        assert!(close(binary_entropy(0.03).unwrap(), 0.194392, 1e-6));
        assert!(close(binary_entropy(0.03).unwrap(), 0.194_391_857_831_576_16, 1e-15));
    }

    #[test]
    fn entropy_rejects_out_of_range() {
        for x in [-1e-12, 1.0 + 1e-12, f64::NAN, f64::INFINITY] {
            assert!(matches!(binary_entropy(x), Err(Error::Domain { .. })));
        }
    }

    #[test]
    fn entropy_small_argument_keeps_relative_precision() {
        // H2(x) ~ x log2(e/x) for tiny x
        let x = 1e-20_f64;
        let expected = x * (1.0 - libm::log(x)) / core::f64::consts::LN_2;
        let got = binary_entropy(x).unwrap();
        assert!(((got - expected) / expected).abs() < 1e-12);
    }

    #[test]
    fn entropy_symmetric_on_dyadic_grid() {
        for k in 0..=4096u32 {
            let x = k as f64 / 4096.0;
            assert_eq!(binary_entropy(x).unwrap(), binary_entropy(1.0 - x).unwrap());
        }
    }

    #[test]
    fn visibility_examples() {
        let v = visibility_from_counts(&BasisCounts::new(100, 0, 0, 100)).unwrap();
        assert_eq!(v.value(), 1.0);
        let v = visibility_from_counts(&BasisCounts::new(25, 25, 25, 25)).unwrap();
        assert_eq!(v.value(), 0.0);
        let v = visibility_from_counts(&BasisCounts::new(970, 30, 30, 970)).unwrap();
        assert!(close(v.value(), 0.94, 1e-15));
        assert!(close(v.qber(), 0.03, 1e-15));
        assert_eq!(
            visibility_from_counts(&BasisCounts::default()),
            Err(Error::UndefinedVisibility)
        );
    }

    #[test]
    fn qber_examples() {
        assert_eq!(qber_from_visibility(1.0).unwrap(), 0.0);
        assert_eq!(qber_from_visibility(0.0).unwrap(), 0.5);
        assert!(close(qber_from_visibility(0.94).unwrap(), 0.03, 1e-15));
        assert_eq!(qber_from_visibility(-1.0).unwrap(), 1.0);
        assert!(qber_from_visibility(1.5).is_err());
    }

    fn inputs(c_hv: f64, c_da: f64, q_hv: f64, q_da: f64, f: f64) -> KeyRateInputs {
        KeyRateInputs {
            coin_rate_hv: c_hv,
            coin_rate_da: c_da,
            qber_hv: q_hv,
            qber_da: q_da,
            ec_efficiency: f,
        }
    }

    #[test]
    fn key_rate_examples() {
        assert_eq!(secret_key_rate(&inputs(1000.0, 1000.0, 0.0, 0.0, 1.2)).unwrap(), 1000.0);
        // 40-digit references: 4709.2381620364..., -164.5939036322...
        let r = secret_key_rate(&inputs(7832.0, 7770.0, 0.0272, 0.0272, 1.2)).unwrap();
        assert!(close(r, 4_709.238_162_036_417, 1e-8), "{r}");
        let r = secret_key_rate(&inputs(1000.0, 1000.0, 0.12, 0.12, 1.2)).unwrap();
        assert!(close(r, -164.593_903_632_201_6, 1e-9), "{r}");
    }

    #[test]
    fn key_rate_rejects_invalid_inputs() {
        assert!(secret_key_rate(&inputs(1.0, 1.0, 0.6, 0.0, 1.2)).is_err());
        assert!(secret_key_rate(&inputs(-1.0, 1.0, 0.0, 0.0, 1.2)).is_err());
        assert!(secret_key_rate(&inputs(1.0, 1.0, 0.0, 0.0, -0.1)).is_err());
        assert!(secret_key_rate(&inputs(1.0, 1.0, 0.0, f64::NAN, 1.2)).is_err());
    }

    #[test]
    fn thresholds() {
        // root of 1 - 2 H2(q): 0.11002786443835955...
        assert!(close(qber_threshold(1.0).unwrap(), 0.110_027_864_438_359_55, 1e-12));
        // root of 1 - 2.2 H2(q): 0.09549353849071595...
        assert!(close(qber_threshold(1.2).unwrap(), 0.095_493_538_490_715_95, 1e-12));
        assert_eq!(qber_threshold(0.0).unwrap(), 0.5);
    }

    proptest! {
        #[test]
        fn entropy_symmetric(x in 0.0f64..=1.0) {
            // (x, y) with x + y == 1 exactly
            let y = 1.0 - x;
            let x = 1.0 - y;
            let a = binary_entropy(x).unwrap();
            prop_assert_eq!(a, binary_entropy(y).unwrap());
            prop_assert!((0.0..=1.0).contains(&a));
        }

        #[test]
        fn key_rate_non_increasing_in_qber(q1 in 0.0f64..=0.5, q2 in 0.0f64..=0.5, other in 0.0f64..=0.5,
                                           c in 1.0f64..1e5, f in 0.0f64..2.0) {
            let (lo, hi) = if q1 <= q2 { (q1, q2) } else { (q2, q1) };
            let r_lo = secret_key_rate(&inputs(c, c, lo, other, f)).unwrap();
            let r_hi = secret_key_rate(&inputs(c, c, hi, other, f)).unwrap();
            prop_assert!(r_hi <= r_lo);
            let r_lo = secret_key_rate(&inputs(c, c, other, lo, f)).unwrap();
            let r_hi = secret_key_rate(&inputs(c, c, other, hi, f)).unwrap();
            prop_assert!(r_hi <= r_lo);
        }

        #[test]
        fn key_rate_linear_in_rates(c1 in 0.0f64..1e6, c2 in 0.0f64..1e6,
                                    q1 in 0.0f64..=0.5, q2 in 0.0f64..=0.5) {
            let r = secret_key_rate(&inputs(c1, c2, q1, q2, 1.2)).unwrap();
            let r2 = secret_key_rate(&inputs(2.0 * c1, 2.0 * c2, q1, q2, 1.2)).unwrap();
            prop_assert_eq!(r2, 2.0 * r);
        }

        #[test]
        fn qber_is_error_fraction(pp in 0u64..5000, pm in 0u64..5000, mp in 0u64..5000, mm in 0u64..5000) {
            let counts = BasisCounts::new(pp, pm, mp, mm);
            prop_assume!(counts.total() > 0);
            let v = visibility_from_counts(&counts).unwrap();
            prop_assert_eq!(v.qber(), (pm + mp) as f64 / counts.total() as f64);
            let via_float = qber_from_visibility(v.value()).unwrap();
            prop_assert!((via_float - v.qber()).abs() <= 2.0 * f64::EPSILON);
        }

        #[test]
        fn sign_change_at_threshold(q in 0.0f64..=0.5) {
            let t = qber_threshold(1.2).unwrap();
            let r = secret_key_rate(&inputs(1000.0, 1000.0, q, q, 1.2)).unwrap();
            if q < t - 1e-9 { prop_assert!(r > 0.0); }
            if q > t + 1e-9 { prop_assert!(r < 0.0); }
        }
    }
}
