//! Two-by-two systems for the step-size controller.

use std::ops::{Add, Mul, Sub};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Vec2(pub [f64; 2]);

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Mat2(pub [[f64; 2]; 2]);

impl Vec2 {
    pub const ZERO: Vec2 = Vec2([0.0, 0.0]);

    pub fn new(x: f64, y: f64) -> Self {
        Vec2([x, y])
    }

    pub fn splat(v: f64) -> Self {
        Vec2([v, v])
    }

    pub fn x(&self) -> f64 {
        self.0[0]
    }

    pub fn y(&self) -> f64 {
        self.0[1]
    }

    pub fn norm(&self) -> f64 {
        self.x().hypot(self.y())
    }

    pub fn dot(&self, other: &Vec2) -> f64 {
        self.x() * other.x() + self.y() * other.y()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

impl Add for Vec2 {
    type Output = Vec2;
    fn add(self, o: Vec2) -> Vec2 {
        Vec2([self.0[0] + o.0[0], self.0[1] + o.0[1]])
    }
}

impl Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, o: Vec2) -> Vec2 {
        Vec2([self.0[0] - o.0[0], self.0[1] - o.0[1]])
    }
}

impl Mul<Vec2> for f64 {
    type Output = Vec2;
    fn mul(self, v: Vec2) -> Vec2 {
        Vec2([self * v.0[0], self * v.0[1]])
    }
}

impl Mat2 {
    pub fn new(a11: f64, a12: f64, a21: f64, a22: f64) -> Self {
        Mat2([[a11, a12], [a21, a22]])
    }

    pub fn symmetric(a11: f64, a12: f64, a22: f64) -> Self {
        Self::new(a11, a12, a12, a22)
    }

    pub fn identity() -> Self {
        Self::new(1.0, 0.0, 0.0, 1.0)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0[i][j]
    }

    pub fn trace(&self) -> f64 {
        self.0[0][0] + self.0[1][1]
    }

    pub fn det(&self) -> f64 {
        self.0[0][0] * self.0[1][1] - self.0[0][1] * self.0[1][0]
    }

    pub fn scale(&self, s: f64) -> Mat2 {
        let [[a, b], [c, d]] = self.0;
        Mat2::new(s * a, s * b, s * c, s * d)
    }

    pub fn mul_vec(&self, v: Vec2) -> Vec2 {
        Vec2([
            self.0[0][0] * v.0[0] + self.0[0][1] * v.0[1],
            self.0[1][0] * v.0[0] + self.0[1][1] * v.0[1],
        ])
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().flatten().all(|v| v.is_finite())
    }

    /// `v^T A v`.
    pub fn quad_form(&self, v: Vec2) -> f64 {
        v.dot(&self.mul_vec(v))
    }
}

/// Solves `(A + ridge I) x = b` with the closed-form 2x2 inverse.
///
/// The system is declared singular when the determinant is within a few ulps
/// of the cancellation scale `|a11 a22| + |a12 a21|`.
pub fn solve2(a: &Mat2, b: Vec2, ridge: f64) -> Result<Vec2> {
    if !(ridge >= 0.0) {
        return Err(Error::InvalidArgument(format!("ridge must be >= 0, got {ridge}")));
    }
    if !a.is_finite() || !b.is_finite() {
        return Err(Error::NonFinite("solve2 input".into()));
    }
    let [[a11, a12], [a21, a22]] = a.0;
    let (a11, a22) = (a11 + ridge, a22 + ridge);
    let det = a11 * a22 - a12 * a21;
    let scale = (a11 * a22).abs() + (a12 * a21).abs();
    if !(det.abs() > 4.0 * f64::EPSILON * scale) {
        return Err(Error::Singular { det });
    }
    let x = Vec2([(a22 * b.0[0] - a12 * b.0[1]) / det, (a11 * b.0[1] - a21 * b.0[0]) / det]);
    if !x.is_finite() {
        return Err(Error::NonFinite("solve2 result".into()));
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Matrix2, Vector2};

    fn reference(a: &Mat2, b: Vec2, ridge: f64) -> Vec2 {
        let m = Matrix2::new(a.get(0, 0) + ridge, a.get(0, 1), a.get(1, 0), a.get(1, 1) + ridge);
        let x = m.full_piv_lu().solve(&Vector2::new(b.x(), b.y())).unwrap();
        Vec2::new(x[0], x[1])
    }

    #[test]
    fn diagonal_system() {
        let x = solve2(&Mat2::new(2.0, 0.0, 0.0, 1.0), Vec2::new(1.0, 1.0), 0.0).unwrap();
        assert_eq!(x, Vec2::new(0.5, 1.0));
    }

    #[test]
    fn zero_rhs() {
        let x = solve2(&Mat2::identity(), Vec2::ZERO, 0.0).unwrap();
        assert_eq!(x, Vec2::ZERO);
    }

    #[test]
    fn ridged_rank_one_matches_reference() {
        let a = Mat2::new(1.0, 1.0, 1.0, 1.0);
        let b = Vec2::new(1.0, 1.0);
        let x = solve2(&a, b, 1e-6).unwrap();
        let r = reference(&a, b, 1e-6);
        assert!((x - r).norm() <= 1e-9 * r.norm(), "{x:?} vs {r:?}");
        assert!((x.x() - 1.0 / (2.0 + 1e-6)).abs() < 1e-9);
    }

    #[test]
    fn singular_without_ridge() {
        let err = solve2(&Mat2::new(1.0, 1.0, 1.0, 1.0), Vec2::new(1.0, 1.0), 0.0);
        assert!(matches!(err, Err(Error::Singular { .. })));
        assert!(matches!(
            solve2(&Mat2::default(), Vec2::ZERO, 0.0),
            Err(Error::Singular { .. })
        ));
    }

    #[test]
    fn negative_ridge_rejected() {
        assert!(solve2(&Mat2::identity(), Vec2::ZERO, -1.0).is_err());
    }

    proptest::proptest! {
        #[test]
        fn residual_is_tiny(a11 in 0.5f64..4.0, a22 in 0.5f64..4.0, off in -0.4f64..0.4,
                            b1 in -10.0f64..10.0, b2 in -10.0f64..10.0, ridge in 0.0f64..1.0) {
            let a = Mat2::symmetric(a11, off * (a11 * a22).sqrt(), a22);
            let b = Vec2::new(b1, b2);
            let x = solve2(&a, b, ridge).unwrap();
            let ridged = Mat2::new(a11 + ridge, a.get(0, 1), a.get(1, 0), a22 + ridge);
            let res = (ridged.mul_vec(x) - b).norm();
            proptest::prop_assert!(res <= 1e-12 * b.norm().max(1e-300));
        }
    }
}
