//! 19-core hexagonal fiber layout, opposite-core pairing and the coupling of
//! a temperature-tuned emission annulus into each pair of cores.
//!
//! Signal and idler photons leave the crystal with opposite transverse
//! momenta, so in the far field they land at point-reflected positions. A
//! pair is coupled into cores `(c, c')` when one photon hits `c` (and hence
//! the other hits `c'`); its probability is the overlap of the annulus
//! intensity with both disks. The center core reflects onto itself and is
//! never part of a key channel.

use alloc::vec::Vec;
use core::f64::consts::PI;

use crate::error::{invalid, Error, Result};
use crate::quad;

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

/// Default core pitch in micrometers.
pub const DEFAULT_PITCH_UM: f64 = 35.0;
/// Default core radius in micrometers.
pub const DEFAULT_CORE_RADIUS_UM: f64 = 4.0;
/// Default radial standard deviation of the emission annulus.
pub const DEFAULT_ANNULUS_WIDTH_UM: f64 = 5.0;
/// Crystal temperature that sizes the emission cone onto the inner ring.
pub const INNER_RING_TEMPERATURE_C: f64 = 82.5;
/// Crystal temperature that sizes the emission cone onto the outer ring.
pub const OUTER_RING_TEMPERATURE_C: f64 = 82.0;

const RADIAL_PANELS: usize = 8;
const RADIAL_ORDER: usize = 20;
const ANGULAR_NODES: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Ring {
    Center,
    Inner,
    Outer,
}

impl Ring {
    pub fn name(self) -> &'static str {
        match self {
            Ring::Center => "center",
            Ring::Inner => "inner",
            Ring::Outer => "outer",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct Core {
    pub id: usize,
    /// Position in micrometers, fiber axis at the origin.
    pub x: f64,
    pub y: f64,
    /// Distance from the fiber axis, kept exact rather than re-derived from
    /// `(x, y)` so equivalent cores give bit-identical overlaps.
    pub radius: f64,
    pub ring: Ring,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct CoreLayout {
    pub cores: Vec<Core>,
    pub pitch: f64,
    pub core_radius: f64,
}

/// Opposite-core channel. `core_a` goes to Alice, `core_b` to Bob.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct CorePair {
    pub pair_id: usize,
    pub core_a: usize,
    pub core_b: usize,
    pub ring: Ring,
    /// `|g_m|^2`: probability that an emitted pair enters this channel.
    pub coupling_prob: f64,
}

/// Build the 19-core layout: center, 6 cores at `pitch`, 12 cores on the
/// second hexagonal shell (6 at `2 pitch`, 6 at `sqrt(3) pitch`).
///
/// Core ids: 0 is the center, 1..=6 the inner ring counter-clockwise from
/// +x, 7..=18 the outer ring every 30 degrees from +x. Core `k` and `k + 3`
/// (inner) or `k + 6` (outer) are exact point reflections.
pub fn build_layout(pitch: f64, core_radius: f64) -> Result<CoreLayout> {
    if !(core_radius > 0.0 && core_radius.is_finite()) {
        return Err(invalid("core_radius", "must be positive and finite"));
    }
    if !(pitch > 2.0 * core_radius && pitch.is_finite()) {
        return Err(invalid("pitch", "cores overlap: pitch must exceed 2 x core radius"));
    }
    let mut cores = Vec::with_capacity(19);
    cores.push(Core {
        id: 0,
        x: 0.0,
        y: 0.0,
        radius: 0.0,
        ring: Ring::Center,
    });

    let place = |id: usize, radius: f64, angle_deg: f64, ring: Ring| {
        let a = angle_deg.to_radians();
        Core {
            id,
            x: radius * libm::cos(a),
            y: radius * libm::sin(a),
            radius,
            ring,
        }
    };

    let mut inner: Vec<Core> = (0..3).map(|k| place(1 + k, pitch, 60.0 * k as f64, Ring::Inner)).collect();
    let mirrored: Vec<Core> = inner.iter().map(|c| reflect(c, c.id + 3)).collect();
    inner.extend(mirrored);
    cores.extend(inner);

    let sqrt3 = libm::sqrt(3.0);
    let mut outer: Vec<Core> = (0..6)
        .map(|j| {
            let radius = if j % 2 == 0 { 2.0 * pitch } else { sqrt3 * pitch };
            place(7 + j, radius, 30.0 * j as f64, Ring::Outer)
        })
        .collect();
    let mirrored: Vec<Core> = outer.iter().map(|c| reflect(c, c.id + 6)).collect();
    outer.extend(mirrored);
    cores.extend(outer);

    Ok(CoreLayout {
        cores,
        pitch,
        core_radius,
    })
}

fn reflect(c: &Core, id: usize) -> Core {
    Core {
        id,
        x: -c.x,
        y: -c.y,
        ..*c
    }
}

impl CoreLayout {
    pub fn core(&self, id: usize) -> Option<&Core> {
        self.cores.get(id)
    }

    /// Point-reflected partner; `None` for the center core.
    pub fn opposite(&self, id: usize) -> Option<usize> {
        match id {
            1..=3 => Some(id + 3),
            4..=6 => Some(id - 3),
            7..=12 => Some(id + 6),
            13..=18 => Some(id - 6),
            _ => None,
        }
    }

    /// The 9 opposite-core channels (3 inner, then 6 outer), coupling unset.
    pub fn pairs(&self) -> Vec<CorePair> {
        let inner = (1..=3).map(|a| (a, Ring::Inner));
        let outer = (7..=12).map(|a| (a, Ring::Outer));
        inner
            .chain(outer)
            .enumerate()
            .map(|(pair_id, (core_a, ring))| CorePair {
                pair_id,
                core_a,
                core_b: core_a + if ring == Ring::Inner { 3 } else { 6 },
                ring,
                coupling_prob: 0.0,
            })
            .collect()
    }

    /// Nearest-neighbor cores (one pitch away).
    pub fn neighbors(&self, id: usize) -> Vec<usize> {
        let Some(c) = self.core(id) else {
            return Vec::new();
        };
        self.cores
            .iter()
            .filter(|o| {
                let d = libm::hypot(o.x - c.x, o.y - c.y);
                o.id != id && (d - self.pitch).abs() <= 1e-9 * self.pitch
            })
            .map(|o| o.id)
            .collect()
    }
}

/// Gaussian annulus of emission intensity in the fiber end-face plane.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct EmissionProfile {
    pub annulus_radius: f64,
    /// Radial standard deviation.
    pub annulus_width: f64,
    pub temperature: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct TemperatureAnchor {
    pub temperature_c: f64,
    pub radius_um: f64,
}

/// Linear cone-radius calibration through two temperature anchors.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct TemperatureCalibration {
    pub inner: TemperatureAnchor,
    pub outer: TemperatureAnchor,
    pub annulus_width_um: f64,
}

impl TemperatureCalibration {
    /// Inner anchor on the inner-ring radius; outer anchor at the radius
    /// where both outer sub-shells (`sqrt(3) p` and `2 p`) couple equally.
    pub fn for_layout(layout: &CoreLayout, annulus_width_um: f64) -> Result<Self> {
        Ok(Self {
            inner: TemperatureAnchor {
                temperature_c: INNER_RING_TEMPERATURE_C,
                radius_um: layout.pitch,
            },
            outer: TemperatureAnchor {
                temperature_c: OUTER_RING_TEMPERATURE_C,
                radius_um: outer_balanced_radius(layout, annulus_width_um)?,
            },
            annulus_width_um,
        })
    }
}

/// Annulus for a crystal temperature, interpolated linearly through the
/// calibration anchors.
pub fn emission_profile_from_temperature(temperature: f64, cal: &TemperatureCalibration) -> Result<EmissionProfile> {
    let dt = cal.outer.temperature_c - cal.inner.temperature_c;
    if dt == 0.0 {
        return Err(Error::DegenerateCalibration);
    }
    if !(cal.annulus_width_um > 0.0) {
        return Err(invalid("annulus_width_um", "must be positive"));
    }
    let slope = (cal.outer.radius_um - cal.inner.radius_um) / dt;
    let radius = cal.inner.radius_um + slope * (temperature - cal.inner.temperature_c);
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(invalid("temperature", "extrapolated annulus radius is not positive"));
    }
    Ok(EmissionProfile {
        annulus_radius: radius,
        annulus_width: cal.annulus_width_um,
        temperature,
    })
}

/// Pair coupling probabilities plus the uncoupled remainder.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct Coupling {
    pub pairs: Vec<CorePair>,
    /// Emission that misses every paired core (including the center core).
    pub uncoupled: f64,
}

impl Coupling {
    pub fn pair(&self, pair_id: usize) -> Option<&CorePair> {
        self.pairs.iter().find(|p| p.pair_id == pair_id)
    }

    pub fn ring(&self, ring: Ring) -> impl Iterator<Item = &CorePair> {
        self.pairs.iter().filter(move |p| p.ring == ring)
    }
}

/// `|g_m|^2` for all 9 pairs from the annulus/core-disk overlap.
pub fn coupling_probabilities(profile: &EmissionProfile, layout: &CoreLayout) -> Coupling {
    let rule = quad::gauss_legendre(RADIAL_ORDER);
    let pairs: Vec<CorePair> = layout
        .pairs()
        .into_iter()
        .map(|mut p| {
            let d = layout.cores[p.core_a].radius;
            // both cores of the pair sit at the same distance
            p.coupling_prob = 2.0 * disk_overlap(profile, d, layout.core_radius, &rule);
            p
        })
        .collect();
    let coupled: f64 = pairs.iter().map(|p| p.coupling_prob).sum();
    Coupling {
        pairs,
        uncoupled: (1.0 - coupled).max(0.0),
    }
}

/// Normalized annulus intensity per unit area at distance `rho` from the axis.
pub fn annulus_intensity(profile: &EmissionProfile, rho: f64) -> f64 {
    let (r, w) = (profile.annulus_radius, profile.annulus_width);
    let z = (rho - r) / w;
    libm::exp(-0.5 * z * z) / annulus_norm(r, w)
}

fn annulus_norm(r: f64, w: f64) -> f64 {
    let tail = w * w * libm::exp(-0.5 * (r / w) * (r / w));
    let body = r * w * libm::sqrt(PI / 2.0) * (1.0 + libm::erf(r / (w * core::f64::consts::SQRT_2)));
    2.0 * PI * (tail + body)
}

/// Fraction of the annulus falling on a disk of radius `a` centered `d` from
/// the axis: composite Gauss-Legendre in the disk radius, trapezoid in angle.
fn disk_overlap(profile: &EmissionProfile, d: f64, a: f64, rule: &(Vec<f64>, Vec<f64>)) -> f64 {
    let radial = quad::composite(0.0, a, RADIAL_PANELS, rule);
    let dphi = 2.0 * PI / ANGULAR_NODES as f64;
    let mut total = 0.0;
    for (s, ws) in radial {
        let mut ring = 0.0;
        for k in 0..ANGULAR_NODES {
            let c = libm::cos(dphi * k as f64);
            let rho = libm::sqrt((d * d + s * s + 2.0 * d * s * c).max(0.0));
            ring += annulus_intensity(profile, rho);
        }
        total += ws * s * ring * dphi;
    }
    total
}

fn outer_balanced_radius(layout: &CoreLayout, width: f64) -> Result<f64> {
    if !(width > 0.0) {
        return Err(invalid("annulus_width_um", "must be positive"));
    }
    let rule = quad::gauss_legendre(RADIAL_ORDER);
    let p = layout.pitch;
    let (near, far) = (libm::sqrt(3.0) * p, 2.0 * p);
    let imbalance = |radius: f64| {
        let prof = EmissionProfile {
            annulus_radius: radius,
            annulus_width: width,
            temperature: 0.0,
        };
        disk_overlap(&prof, far, layout.core_radius, &rule) - disk_overlap(&prof, near, layout.core_radius, &rule)
    };
    let (mut lo, mut hi) = (near, far);
    if !(imbalance(lo) < 0.0 && imbalance(hi) > 0.0) {
        return Err(invalid("annulus_width_um", "no balanced outer-ring radius for this width"));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if imbalance(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-12 * p {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn default_layout() -> CoreLayout {
        build_layout(DEFAULT_PITCH_UM, DEFAULT_CORE_RADIUS_UM).unwrap()
    }

    // Overlap as a 1D integral over the axis distance rho of the intensity
    // times the arc length of the circle rho inside the disk, by adaptive
    // Simpson. Independent of the 2D rule used in the implementation.
    fn overlap_oracle(profile: &EmissionProfile, d: f64, a: f64) -> f64 {
        let arc = |rho: f64| {
            if rho <= 0.0 {
                return 0.0;
            }
            let c = (rho * rho + d * d - a * a) / (2.0 * rho * d);
            if c >= 1.0 {
                0.0
            } else if c <= -1.0 {
                2.0 * PI * rho
            } else {
                2.0 * rho * c.acos()
            }
        };
        let f = |rho: f64| annulus_intensity(profile, rho) * arc(rho);
        // substitute rho = d + a cos(t) to tame the square-root endpoints
        let g = |t: f64| f(d + a * t.cos()) * a * t.sin();
        adaptive_simpson(&g, 0.0, PI, 1e-15, 50)
    }

    fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, eps: f64, depth: u32) -> f64 {
        #[allow(clippy::too_many_arguments)]
        fn step(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, eps: f64, depth: u32) -> f64 {
            let m = 0.5 * (a + b);
            let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
            let (flm, frm) = (f(lm), f(rm));
            let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
            let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
            if depth == 0 || (left + right - whole).abs() <= 15.0 * eps {
                return left + right + (left + right - whole) / 15.0;
            }
            step(f, a, m, fa, flm, fm, left, eps / 2.0, depth - 1) + step(f, m, b, fm, frm, fb, right, eps / 2.0, depth - 1)
        }
        let (fa, fb, fm) = (f(a), f(b), f(0.5 * (a + b)));
        let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
        step(f, a, b, fa, fm, fb, whole, eps, depth)
    }

    #[test]
    fn layout_counts_and_radii() {
        let l = default_layout();
        assert_eq!(l.cores.len(), 19);
        let count = |r| l.cores.iter().filter(|c| c.ring == r).count();
        assert_eq!((count(Ring::Center), count(Ring::Inner), count(Ring::Outer)), (1, 6, 12));
        for c in l.cores.iter().filter(|c| c.ring == Ring::Inner) {
            assert!((libm::hypot(c.x, c.y) - 35.0).abs() < 1e-12);
        }
        for c in l.cores.iter().filter(|c| c.ring == Ring::Outer) {
            let r = libm::hypot(c.x, c.y);
            assert!((r - 70.0).abs() < 1e-12 || (r - 35.0 * 3f64.sqrt()).abs() < 1e-12, "{r}");
        }
    }

    #[test]
    fn pairs_are_exact_reflections() {
        let l = default_layout();
        let pairs = l.pairs();
        assert_eq!(pairs.len(), 9);
        assert_eq!(pairs.iter().filter(|p| p.ring == Ring::Inner).count(), 3);
        assert_eq!(pairs.iter().filter(|p| p.ring == Ring::Outer).count(), 6);
        for p in &pairs {
            let (a, b) = (l.cores[p.core_a], l.cores[p.core_b]);
            assert_eq!((a.x, a.y), (-b.x, -b.y));
            assert_ne!(p.core_a, 0);
            assert_ne!(p.core_b, 0);
            assert_eq!(l.opposite(p.core_a), Some(p.core_b));
            assert_eq!(l.opposite(p.core_b), Some(p.core_a));
        }
        assert_eq!(l.opposite(0), None);
    }

    #[test]
    fn rejects_overlapping_cores() {
        assert!(build_layout(35.0, 20.0).is_err());
        assert!(build_layout(35.0, 0.0).is_err());
        assert!(build_layout(f64::NAN, 4.0).is_err());
    }

    #[test]
    fn neighbor_counts() {
        let l = default_layout();
        assert_eq!(l.neighbors(0).len(), 6);
        for id in 1..=6 {
            assert_eq!(l.neighbors(id).len(), 6, "inner core {id}");
        }
        // outer corner cores (2p) have 3 neighbors, edge cores (sqrt 3 p) have 4
        assert_eq!(l.neighbors(7).len(), 3);
        assert_eq!(l.neighbors(8).len(), 4);
    }

    fn calibration() -> TemperatureCalibration {
        TemperatureCalibration {
            inner: TemperatureAnchor {
                temperature_c: 82.5,
                radius_um: 35.0,
            },
            outer: TemperatureAnchor {
                temperature_c: 82.0,
                radius_um: 65.0,
            },
            annulus_width_um: 5.0,
        }
    }

    #[test]
    fn temperature_anchors_and_midpoint() {
        let cal = calibration();
        assert_eq!(emission_profile_from_temperature(82.5, &cal).unwrap().annulus_radius, 35.0);
        assert_eq!(emission_profile_from_temperature(82.0, &cal).unwrap().annulus_radius, 65.0);
        assert_eq!(emission_profile_from_temperature(82.25, &cal).unwrap().annulus_radius, 50.0);
        // hotter crystal, narrower cone
        assert!(emission_profile_from_temperature(82.6, &cal).unwrap().annulus_radius < 35.0);
        let mut bad = cal;
        bad.outer.temperature_c = 82.5;
        assert_eq!(emission_profile_from_temperature(82.0, &bad), Err(Error::DegenerateCalibration));
    }

    #[test]
    fn narrow_annulus_selects_inner_ring() {
        let l = default_layout();
        let prof = EmissionProfile {
            annulus_radius: 35.0,
            annulus_width: 0.5,
            temperature: 82.5,
        };
        let c = coupling_probabilities(&prof, &l);
        let inner: Vec<f64> = c.ring(Ring::Inner).map(|p| p.coupling_prob).collect();
        let total_inner: f64 = inner.iter().sum();
        for p in &inner {
            assert!((p - total_inner / 3.0).abs() < 1e-12);
        }
        for p in c.ring(Ring::Outer) {
            assert!(p.coupling_prob < 1e-30);
        }
        assert!(total_inner > 0.0);
    }

    #[test]
    fn balanced_outer_radius_equalizes_outer_pairs() {
        let l = default_layout();
        let cal = TemperatureCalibration::for_layout(&l, 1.0).unwrap();
        let prof = emission_profile_from_temperature(82.0, &cal).unwrap();
        let c = coupling_probabilities(&prof, &l);
        let outer: Vec<f64> = c.ring(Ring::Outer).map(|p| p.coupling_prob).collect();
        for p in &outer {
            assert!((p - outer[0]).abs() <= 1e-9 * outer[0].max(1e-300), "{outer:?}");
        }
        for p in c.ring(Ring::Inner) {
            assert!(p.coupling_prob < 1e-12 * outer[0]);
        }
    }

    #[test]
    fn probabilities_sum_to_one() {
        let l = default_layout();
        for (radius, width) in [(35.0, 5.0), (65.0, 5.0), (50.0, 17.5), (10.0, 30.0)] {
            let prof = EmissionProfile {
                annulus_radius: radius,
                annulus_width: width,
                temperature: 0.0,
            };
            let c = coupling_probabilities(&prof, &l);
            let s: f64 = c.pairs.iter().map(|p| p.coupling_prob).sum::<f64>() + c.uncoupled;
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn wide_annulus_matches_quadrature_oracle() {
        let l = default_layout();
        let rule = quad::gauss_legendre(RADIAL_ORDER);
        for (radius, width) in [(35.0, 17.5), (60.6, 17.5), (35.0, 5.0), (65.0, 5.0), (40.0, 2.0)] {
            let prof = EmissionProfile {
                annulus_radius: radius,
                annulus_width: width,
                temperature: 0.0,
            };
            for d in [35.0, 35.0 * 3f64.sqrt(), 70.0] {
                let got = disk_overlap(&prof, d, l.core_radius, &rule);
                let want = overlap_oracle(&prof, d, l.core_radius);
                assert!((got - want).abs() < 1e-9 * want + 1e-15, "R={radius} w={width} d={d}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn hotter_crystal_never_raises_outer_coupling() {
        let l = default_layout();
        let cal = TemperatureCalibration::for_layout(&l, DEFAULT_ANNULUS_WIDTH_UM).unwrap();
        let outer_total = |t: f64| {
            let prof = emission_profile_from_temperature(t, &cal).unwrap();
            coupling_probabilities(&prof, &l).ring(Ring::Outer).map(|p| p.coupling_prob).sum::<f64>()
        };
        let temps = [82.5, 82.55, 82.6, 82.7, 82.8, 82.9];
        let values: Vec<f64> = temps.iter().map(|&t| outer_total(t)).collect();
        for w in values.windows(2) {
            assert!(w[1] <= w[0]);
        }
    }
}
