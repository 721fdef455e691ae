//! Cone representation on the complex unit circle.
//!
//! A cone is stored per dimension as an axis angle in `[-π, π)` and an
//! aperture in `[0, 2π]`. The counter-clockwise upper and lower boundaries
//! are derived views:
//!
//! ```text
//! h_U = exp(i(θ_ax + θ_ap/2))      h_L = exp(i(θ_ax - θ_ap/2))
//! ```
//!
//! Keeping the angles canonical (rather than the boundary vectors) is what
//! lets a point (aperture 0) and the full circle (aperture 2π) stay distinct:
//! both have identical boundaries.

use std::f64::consts::{PI, TAU};
use std::ops::Deref;

use crate::error::{Error, Result};

/// Tolerance on `|h| = 1` accepted for unit complex vectors.
pub const UNIT_TOLERANCE: f64 = 1e-9;

/// Spacing of the grid canonical cone angles are rounded onto (2^-50).
///
/// Every value on this grid below 8 in magnitude is an exact f64, and so is
/// π itself, so the sums and differences the operators take (rotation,
/// complement, wrapping) are exact: negation is a true involution and
/// composed rotations agree bit for bit.
pub const ANGLE_GRID: f64 = 1.0 / (1u64 << 50) as f64;

/// Rounds to the nearest multiple of [`ANGLE_GRID`].
#[inline]
pub fn snap(x: f64) -> f64 {
    (x / ANGLE_GRID).round() * ANGLE_GRID
}

/// Canonical axis angle: wrapped, snapped, and never `+π`.
#[inline]
pub(crate) fn canonical_axis(x: f64) -> f64 {
    let a = snap(wrap_unchecked(x));
    if a >= PI {
        a - TAU
    } else {
        a
    }
}

/// Canonical aperture: clamped to `[0, 2π]` and snapped.
#[inline]
pub(crate) fn canonical_aperture(x: f64) -> f64 {
    snap(x.clamp(0.0, TAU))
}

/// Maps `x` to the congruent angle in `[-π, π)`.
pub fn wrap_angle(x: f64) -> Result<f64> {
    if !x.is_finite() {
        return Err(Error::Domain(format!("cannot wrap non-finite angle {x}")));
    }
    Ok(wrap_unchecked(x))
}

/// [`wrap_angle`] without the finiteness check; NaN passes through.
#[inline]
pub fn wrap_unchecked(x: f64) -> f64 {
    if (-PI..PI).contains(&x) {
        return x;
    }
    let mut r = x - TAU * ((x + PI) / TAU).floor();
    // floor() can land one period off when x + π rounds onto a multiple of 2π
    if r >= PI {
        r -= TAU;
    }
    if r < -PI {
        r += TAU;
    }
    r
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// A vector of finite angles in radians.
#[derive(Debug, Clone, PartialEq)]
pub struct AngleVec(Vec<f64>);

impl AngleVec {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("angle at index {i} is not finite ({})", values[i])));
        }
        Ok(Self(values))
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for AngleVec {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// Per-dimension cone: canonical axis in `[-π, π)`, aperture in `[0, 2π]`.
///
/// Both angle vectors are kept on the [`ANGLE_GRID`].
#[derive(Debug, Clone, PartialEq)]
pub struct ConeBatch {
    axis: AngleVec,
    aperture: AngleVec,
}

impl ConeBatch {
    /// Builds a cone, wrapping the axis and clamping the aperture, then
    /// snapping both to the angle grid.
    pub fn new(axis: Vec<f64>, aperture: Vec<f64>) -> Result<Self> {
        if axis.len() != aperture.len() {
            return Err(Error::Contract(format!(
                "axis has {} dimensions but aperture has {}",
                axis.len(),
                aperture.len()
            )));
        }
        if axis.is_empty() {
            return Err(Error::Contract("cone dimension must be positive".into()));
        }
        let axis = AngleVec::new(axis)?;
        let aperture = AngleVec::new(aperture)?;
        Ok(Self {
            axis: AngleVec(axis.0.into_iter().map(canonical_axis).collect()),
            aperture: AngleVec(aperture.0.into_iter().map(canonical_aperture).collect()),
        })
    }

    /// An entity embedding: aperture identically zero.
    pub fn point(axis: Vec<f64>) -> Result<Self> {
        let d = axis.len();
        Self::new(axis, vec![0.0; d])
    }

    pub fn dim(&self) -> usize {
        self.axis.len()
    }

    pub fn axis(&self) -> &[f64] {
        &self.axis
    }

    pub fn aperture(&self) -> &[f64] {
        &self.aperture
    }

    pub fn is_point(&self) -> bool {
        self.aperture.iter().all(|&a| a == 0.0)
    }
}

/// A vector of unit-modulus complex numbers, split into real and imaginary parts.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitComplexVec {
    re: Vec<f64>,
    im: Vec<f64>,
}

impl UnitComplexVec {
    pub fn new(re: Vec<f64>, im: Vec<f64>) -> Result<Self> {
        if re.len() != im.len() {
            return Err(Error::Contract(format!(
                "real part has {} entries but imaginary part has {}",
                re.len(),
                im.len()
            )));
        }
        for (i, (x, y)) in re.iter().zip(&im).enumerate() {
            let m = x * x + y * y;
            if !m.is_finite() || (m - 1.0).abs() > UNIT_TOLERANCE {
                return Err(Error::Domain(format!("entry {i} has squared modulus {m}, expected 1")));
            }
        }
        Ok(Self { re, im })
    }

    /// `exp(iθ)` per element.
    pub fn from_angles(angles: &[f64]) -> Self {
        Self { re: angles.iter().map(|a| a.cos()).collect(), im: angles.iter().map(|a| a.sin()).collect() }
    }

    pub fn dim(&self) -> usize {
        self.re.len()
    }

    pub fn re(&self) -> &[f64] {
        &self.re
    }

    pub fn im(&self) -> &[f64] {
        &self.im
    }

    /// Elementwise (Hadamard) complex product.
    pub fn hadamard(&self, other: &UnitComplexVec) -> UnitComplexVec {
        let (re, im) = self
            .re
            .iter()
            .zip(&self.im)
            .zip(other.re.iter().zip(&other.im))
            .map(|((a, b), (c, d))| (a * c - b * d, a * d + b * c))
            .unzip();
        UnitComplexVec { re, im }
    }

    /// `Σ_i |Re Δ_i| + |Im Δ_i|`.
    pub fn l1_distance(&self, other: &UnitComplexVec) -> f64 {
        self.re
            .iter()
            .zip(&other.re)
            .zip(self.im.iter().zip(&other.im))
            .map(|((a, b), (c, d))| (a - b).abs() + (c - d).abs())
            .sum()
    }
}

/// Upper and lower boundary vectors of a cone.
pub fn boundaries(cone: &ConeBatch) -> (UnitComplexVec, UnitComplexVec) {
    let upper: Vec<f64> = cone.axis().iter().zip(cone.aperture()).map(|(ax, ap)| ax + ap / 2.0).collect();
    let lower: Vec<f64> = cone.axis().iter().zip(cone.aperture()).map(|(ax, ap)| ax - ap / 2.0).collect();
    (UnitComplexVec::from_angles(&upper), UnitComplexVec::from_angles(&lower))
}

/// Inverse of [`boundaries`] for apertures below 2π.
///
/// Equal boundaries decode to a point; the full circle cannot be recovered
/// from its boundaries alone.
pub fn cone_from_boundaries(upper: &UnitComplexVec, lower: &UnitComplexVec) -> Result<ConeBatch> {
    if upper.dim() != lower.dim() {
        return Err(Error::Contract(format!(
            "upper boundary has {} dimensions, lower has {}",
            upper.dim(),
            lower.dim()
        )));
    }
    let theta_u = arg(upper.re(), upper.im())?;
    let theta_l = arg(lower.re(), lower.im())?;
    let mut axis = Vec::with_capacity(theta_u.len());
    let mut aperture = Vec::with_capacity(theta_u.len());
    for (u, l) in theta_u.iter().zip(theta_l.iter()) {
        let ap = (u - l).rem_euclid(TAU);
        // rem_euclid may round up to exactly 2π for tiny negative differences
        let ap = if ap >= TAU { 0.0 } else { ap };
        aperture.push(ap);
        axis.push(wrap_unchecked(l + ap / 2.0));
    }
    ConeBatch::new(axis, aperture)
}

/// Angle of each point `(x[i], y[i])`, in `[-π, π)`.
pub fn arg(x: &[f64], y: &[f64]) -> Result<AngleVec> {
    if x.len() != y.len() {
        return Err(Error::Contract(format!("x has {} entries, y has {}", x.len(), y.len())));
    }
    let mut out = Vec::with_capacity(x.len());
    for (index, (&a, &b)) in x.iter().zip(y).enumerate() {
        if a == 0.0 && b == 0.0 {
            return Err(Error::Degenerate { index });
        }
        out.push(wrap_unchecked(b.atan2(a)));
    }
    AngleVec::new(out)
}

/// `exp(iθ_ax)` per dimension: the cone's center direction.
pub fn axis_vector(cone: &ConeBatch) -> UnitComplexVec {
    UnitComplexVec::from_angles(cone.axis())
}

/// A relation's action on cones.
///
/// The learnable parameters are unconstrained; the rotation angles are
/// derived views that always stay in range: the axis rotation is the wrapped
/// raw axis, the aperture rotation is `2π·σ(raw_ap)`. `se_scale`/`se_shift`
/// are only read by the sigmoid-expansion projection.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationRotation {
    axis: AngleVec,
    aperture: AngleVec,
    raw_axis: Vec<f64>,
    raw_aperture: Vec<f64>,
    pub se_scale: f64,
    pub se_shift: f64,
}

impl RelationRotation {
    pub fn from_raw(raw_axis: Vec<f64>, raw_aperture: Vec<f64>) -> Result<Self> {
        if raw_axis.len() != raw_aperture.len() {
            return Err(Error::Contract("raw axis and aperture lengths differ".into()));
        }
        let axis = AngleVec::new(raw_axis.iter().map(|&r| canonical_axis(r)).collect())?;
        let aperture = AngleVec::new(raw_aperture.iter().map(|&r| canonical_aperture(TAU * sigmoid(r))).collect())?;
        Ok(Self { axis, aperture, raw_axis, raw_aperture, se_scale: 1.0, se_shift: 0.0 })
    }

    /// Builds a rotation directly from its angle views (snapped to the grid).
    ///
    /// The raw aperture is the logit of `aperture / 2π`, which is infinite at
    /// the range ends; only the views are used by the operators.
    pub fn from_angles(axis: Vec<f64>, aperture: Vec<f64>) -> Result<Self> {
        if axis.len() != aperture.len() {
            return Err(Error::Contract("axis and aperture lengths differ".into()));
        }
        if let Some(a) = aperture.iter().find(|a| !(0.0..=TAU).contains(*a)) {
            return Err(Error::Domain(format!("aperture rotation {a} outside [0, 2π]")));
        }
        let axis = AngleVec::new(axis.into_iter().map(canonical_axis).collect())?;
        let aperture: Vec<f64> = aperture.into_iter().map(canonical_aperture).collect();
        let raw_aperture = aperture
            .iter()
            .map(|a| {
                let p = a / TAU;
                (p / (1.0 - p)).ln()
            })
            .collect();
        Ok(Self {
            raw_axis: axis.to_vec(),
            axis,
            aperture: AngleVec::new(aperture)?,
            raw_aperture,
            se_scale: 1.0,
            se_shift: 0.0,
        })
    }

    pub fn identity(d: usize) -> Self {
        Self::from_angles(vec![0.0; d], vec![0.0; d]).expect("zero angles are valid")
    }

    pub fn dim(&self) -> usize {
        self.axis.len()
    }

    pub fn axis(&self) -> &[f64] {
        &self.axis
    }

    pub fn aperture(&self) -> &[f64] {
        &self.aperture
    }

    pub fn raw_axis(&self) -> &[f64] {
        &self.raw_axis
    }

    pub fn raw_aperture(&self) -> &[f64] {
        &self.raw_aperture
    }

    /// Rotation equal to applying `self` and then `next`: angle sums.
    pub fn compose(&self, next: &RelationRotation) -> Result<Self> {
        let axis = self.axis.iter().zip(next.axis()).map(|(a, b)| a + b).collect();
        let aperture = self.aperture.iter().zip(next.aperture()).map(|(a, b)| a + b).collect();
        Self::from_angles(axis, aperture)
    }

    /// Axis rotation negated, aperture rotation zero.
    pub fn inverse(&self) -> Self {
        let d = self.dim();
        Self::from_angles(self.axis.iter().map(|a| -a).collect(), vec![0.0; d])
            .expect("negated wrapped angles are finite")
    }

    /// Upper and lower boundary rotations `(r_U, r_L)`.
    pub fn boundary_rotations(&self) -> (UnitComplexVec, UnitComplexVec) {
        let up: Vec<f64> = self.axis.iter().zip(self.aperture()).map(|(a, p)| a + p / 2.0).collect();
        let low: Vec<f64> = self.axis.iter().zip(self.aperture()).map(|(a, p)| a - p / 2.0).collect();
        (UnitComplexVec::from_angles(&up), UnitComplexVec::from_angles(&low))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn wrap_examples() {
        assert_eq!(wrap_angle(0.0).unwrap(), 0.0);
        assert_eq!(wrap_angle(PI).unwrap(), -PI);
        // oracle: x - 2π floor((x + π) / 2π) evaluated by hand
        assert_abs_diff_eq!(wrap_angle(5.0 * PI / 2.0).unwrap(), FRAC_PI_2, epsilon = 1e-12);
        assert_eq!(wrap_angle(-PI).unwrap(), -PI);
        assert!(wrap_angle(f64::NAN).is_err());
        assert!(wrap_angle(f64::INFINITY).is_err());
    }

    #[test]
    fn wrap_stays_in_range_near_the_seam() {
        for x in [-PI - 1e-16, -PI - 4e-16, PI - 1e-16, 3.0 * PI, -3.0 * PI, 1e6] {
            let r = wrap_angle(x).unwrap();
            assert!((-PI..PI).contains(&r), "{x} -> {r}");
        }
    }

    #[test]
    fn boundaries_examples() {
        let (u, l) = boundaries(&ConeBatch::new(vec![0.0], vec![0.0]).unwrap());
        assert_eq!((u.re()[0], u.im()[0]), (1.0, 0.0));
        assert_eq!(u, l);

        let (u, l) = boundaries(&ConeBatch::new(vec![0.0], vec![PI]).unwrap());
        assert_abs_diff_eq!(u.re()[0], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(u.im()[0], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(l.re()[0], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(l.im()[0], -1.0, epsilon = 1e-15);

        let (u, l) = boundaries(&ConeBatch::new(vec![FRAC_PI_2], vec![0.0]).unwrap());
        assert_abs_diff_eq!(u.re()[0], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(u.im()[0], 1.0, epsilon = 1e-15);
        assert_eq!(u, l);
    }

    #[test]
    fn cone_from_boundaries_examples() {
        let u = UnitComplexVec::new(vec![0.0], vec![1.0]).unwrap();
        let l = UnitComplexVec::new(vec![0.0], vec![-1.0]).unwrap();
        let c = cone_from_boundaries(&u, &l).unwrap();
        assert_abs_diff_eq!(c.axis()[0], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(c.aperture()[0], PI, epsilon = 1e-15);

        let p = UnitComplexVec::new(vec![1.0], vec![0.0]).unwrap();
        let c = cone_from_boundaries(&p, &p).unwrap();
        assert_eq!((c.axis()[0], c.aperture()[0]), (0.0, 0.0));
    }

    #[test]
    fn non_unit_boundaries_rejected() {
        assert!(UnitComplexVec::new(vec![2.0], vec![0.0]).is_err());
        assert!(UnitComplexVec::new(vec![1.0, 0.0], vec![0.0]).is_err());
    }

    #[test]
    fn arg_examples() {
        assert_eq!(arg(&[1.0], &[0.0]).unwrap()[0], 0.0);
        assert_abs_diff_eq!(arg(&[0.0], &[1.0]).unwrap()[0], FRAC_PI_2);
        assert_abs_diff_eq!(arg(&[-1.0], &[-1.0]).unwrap()[0], -3.0 * PI / 4.0, epsilon = 1e-15);
        // the negative real axis maps to -π, not π
        assert_eq!(arg(&[-1.0], &[0.0]).unwrap()[0], -PI);
        assert!(matches!(arg(&[1.0, 0.0], &[0.0, 0.0]), Err(Error::Degenerate { index: 1 })));
    }

    #[test]
    fn axis_vector_examples() {
        let v = axis_vector(&ConeBatch::new(vec![0.0], vec![PI]).unwrap());
        assert_eq!((v.re()[0], v.im()[0]), (1.0, 0.0));
        let v = axis_vector(&ConeBatch::new(vec![-PI], vec![0.3]).unwrap());
        assert_abs_diff_eq!(v.re()[0], -1.0);
        assert_abs_diff_eq!(v.im()[0], 0.0, epsilon = 1e-15);
        let base = axis_vector(&ConeBatch::new(vec![1.2], vec![0.0]).unwrap());
        for ap in [PI, TAU] {
            assert_eq!(axis_vector(&ConeBatch::new(vec![1.2], vec![ap]).unwrap()), base);
        }
    }

    #[test]
    fn cone_constructor_canonicalizes() {
        let c = ConeBatch::new(vec![PI, 7.0], vec![-1.0, 10.0]).unwrap();
        assert_eq!(c.axis()[0], -PI);
        assert!((-PI..PI).contains(&c.axis()[1]));
        assert_eq!(c.aperture(), &[0.0, TAU]);
        assert!(ConeBatch::new(vec![f64::NAN], vec![0.0]).is_err());
        assert!(ConeBatch::new(vec![0.0], vec![]).is_err());
    }

    #[test]
    fn relation_views_stay_in_range() {
        let r = RelationRotation::from_raw(vec![100.0, -7.5, 0.0], vec![-800.0, 0.0, 800.0]).unwrap();
        for &a in r.axis() {
            assert!((-PI..PI).contains(&a));
        }
        for &a in r.aperture() {
            assert!((0.0..=TAU).contains(&a));
        }
        assert_abs_diff_eq!(r.aperture()[1], PI);
    }

    #[test]
    fn from_angles_keeps_views_exact() {
        let r = RelationRotation::from_angles(vec![0.5], vec![0.0]).unwrap();
        assert_eq!(r.aperture()[0], 0.0);
        assert_eq!(r.raw_aperture()[0], f64::NEG_INFINITY);
        assert!(RelationRotation::from_angles(vec![0.5], vec![7.0]).is_err());
    }
}
