//! Map-independent concentration model used by the estimator.
//!
//! The homogenised Laplace problem on a disk with an absorbing rim has the
//! closed-form solution `<theta> = -(A/2) ln R²`, where `R²` is the squared
//! modulus of the Möbius map sending the source to the centre. Obstacles only
//! rescale the effective release rate, `A = A0 / f_c`.

use serde::{Deserialize, Serialize};

use crate::error::FieldError;
use crate::lattice::PERCOLATION_THRESHOLD;

/// Floor applied to `R²` before taking the logarithm.
pub const R2_FLOOR: f64 = 1e-6;
/// Lower clamp of the Poisson-mean constant `c`; keeps Gamma updates well posed.
pub const C_MIN: f64 = 1e-6;
/// Upper clamp of `c`, equal to `-0.5 ln(R2_FLOOR)`.
pub const C_MAX: f64 = 6.907_755_278_982_137;
/// Tortuosity exponent of the square-lattice conductivity law.
pub const TORTUOSITY_EXPONENT: f64 = 1.30;

/// Point in the continuous plane, lattice units.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn norm_sq(self) -> f64 {
        self.x * self.x + self.y * self.y
    }
}

impl From<crate::lattice::NodeCoord> for Point2 {
    fn from(c: crate::lattice::NodeCoord) -> Self {
        Self::new(c.x as f64, c.y as f64)
    }
}

/// Source position and effective release rate `A`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SourceParams {
    pub position: Point2,
    pub release_rate: f64,
}

/// Circular domain centred at the origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DomainGeom {
    pub radius: f64,
}

impl DomainGeom {
    pub fn new(radius: f64) -> Self {
        Self { radius }
    }

    pub fn contains_strictly(&self, p: Point2) -> bool {
        p.norm_sq() < self.radius * self.radius
    }
}

/// Squared modulus of the Möbius map taking `source` to the disk centre,
/// evaluated at `point`. Equals 1 on the rim and 0 at the source.
pub fn moebius_r2(point: Point2, source: Point2, geom: DomainGeom) -> f64 {
    let r0_sq = geom.radius * geom.radius;
    let (dx, dy) = (point.x - source.x, point.y - source.y);
    let cross = point.x * source.y - point.y * source.x;
    let dot = r0_sq - point.x * source.x - point.y * source.y;
    r0_sq * (dx * dx + dy * dy) / (cross * cross + dot * dot)
}

fn log_term(point: Point2, source: Point2, geom: DomainGeom) -> f64 {
    -0.5 * moebius_r2(point, source, geom).max(R2_FLOOR).ln()
}

/// Mean counts `lambda = -(A/2) ln R²` at `point`, with `R²` floored at
/// [`R2_FLOOR`]. Points on or beyond the rim give zero.
pub fn mean_concentration_model(point: Point2, source: &SourceParams, geom: DomainGeom) -> f64 {
    source.release_rate * log_term(point, source.position, geom).max(0.0)
}

/// The ratio `lambda / A`, clamped to `[C_MIN, C_MAX]`.
///
/// Wherever the unclamped value exceeds `C_MIN`,
/// `mean_concentration_model == A * c_constant` exactly.
pub fn c_constant(point: Point2, source: Point2, geom: DomainGeom) -> f64 {
    log_term(point, source, geom).clamp(C_MIN, C_MAX)
}

/// Tortuosity `f_c = (1 - p / p_c)^1.30` for a missing-link fraction `p`.
pub fn tortuosity(p: f64) -> Result<f64, FieldError> {
    if !(0.0..PERCOLATION_THRESHOLD).contains(&p) {
        return Err(FieldError::AboveThreshold(p));
    }
    Ok((1.0 - p / PERCOLATION_THRESHOLD).powf(TORTUOSITY_EXPONENT))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    const GEOM: DomainGeom = DomainGeom { radius: 9.0 };

    #[test]
    fn clamp_constants_agree() {
        assert!((C_MAX + 0.5 * R2_FLOOR.ln()).abs() < 1e-15);
    }

    #[test]
    fn rim_maps_to_one() {
        let src = Point2::new(2.0, -5.0);
        for k in 0..16 {
            let a = k as f64 * std::f64::consts::PI / 8.0;
            let p = Point2::new(9.0 * a.cos(), 9.0 * a.sin());
            assert!((moebius_r2(p, src, GEOM) - 1.0).abs() < 1e-12);
            let s = SourceParams {
                position: src,
                release_rate: 12.0,
            };
            assert!(mean_concentration_model(p, &s, GEOM).abs() < 1e-12);
        }
    }

    #[test]
    fn centred_source_reduces_to_radius_ratio() {
        let p = Point2::new(3.0, -4.0);
        assert!((moebius_r2(p, Point2::default(), GEOM) - 25.0 / 81.0).abs() < 1e-15);
    }

    #[test]
    fn worked_example() {
        let src = Point2::new(0.0, 7.0);
        let r2 = moebius_r2(Point2::default(), src, GEOM);
        assert!((r2 - 49.0 / 81.0).abs() < 1e-15);
        let s = SourceParams {
            position: src,
            release_rate: 12.0,
        };
        let lambda = mean_concentration_model(Point2::default(), &s, GEOM);
        let expect = -6.0 * (49.0f64 / 81.0).ln();
        assert!((lambda - expect).abs() < 1e-12);
        assert!((lambda - 3.0158).abs() < 1e-4);
        let c = c_constant(Point2::default(), src, GEOM);
        assert!((c - expect / 12.0).abs() < 1e-12);
        assert!((c - 0.2513).abs() < 1e-4);
    }

    #[test]
    fn source_point_is_clamped() {
        let src = Point2::new(1.0, 1.0);
        let s = SourceParams {
            position: src,
            release_rate: 4.0,
        };
        assert_eq!(moebius_r2(src, src, GEOM), 0.0);
        assert!((mean_concentration_model(src, &s, GEOM) - (-2.0 * R2_FLOOR.ln())).abs() < 1e-12);
        assert_eq!(c_constant(src, src, GEOM), C_MAX);
    }

    #[test]
    fn rim_searcher_gets_floor() {
        let c = c_constant(Point2::new(9.0, 0.0), Point2::new(0.0, 7.0), GEOM);
        assert_eq!(c, C_MIN);
        // outside the disk (lattice rim nodes beyond R0) also floors
        let c = c_constant(Point2::new(9.0, -4.0), Point2::new(0.0, 7.0), GEOM);
        assert_eq!(c, C_MIN);
    }

    #[test]
    fn tortuosity_values() {
        assert_eq!(tortuosity(0.0).unwrap(), 1.0);
        assert!((tortuosity(0.35).unwrap() - 0.3f64.powf(1.3)).abs() < 1e-15);
        assert!((tortuosity(0.35).unwrap() - 0.2091).abs() < 1e-4);
        assert!((tortuosity(0.25).unwrap() - 0.4061).abs() < 1e-4);
        assert!(tortuosity(0.5).is_err());
    }

    #[test]
    fn centred_source_decreases_along_rays() {
        let s = SourceParams {
            position: Point2::default(),
            release_rate: 5.0,
        };
        for k in 0..8 {
            let a = k as f64 * 0.7;
            let mut prev = f64::INFINITY;
            for i in 1..=90 {
                let r = i as f64 * 0.1;
                let v = mean_concentration_model(Point2::new(r * a.cos(), r * a.sin()), &s, GEOM);
                assert!(v < prev);
                prev = v;
            }
        }
    }

    proptest! {
        #[test]
        fn lambda_is_rate_times_c(
            px in -8.9f64..8.9, py in -8.9f64..8.9,
            sx in -6.0f64..6.0, sy in -6.0f64..6.0,
            a in 0.1f64..100.0,
        ) {
            let p = Point2::new(px, py);
            let src = Point2::new(sx, sy);
            prop_assume!(p.norm_sq() < 80.0 && src.norm_sq() < 80.0);
            let s = SourceParams { position: src, release_rate: a };
            let lambda = mean_concentration_model(p, &s, GEOM);
            prop_assert!(lambda >= 0.0);
            let c = c_constant(p, src, GEOM);
            if c > C_MIN {
                prop_assert!((lambda - a * c).abs() <= 1e-12 * lambda.max(1.0));
            }
            let s2 = SourceParams { position: src, release_rate: 2.0 * a };
            prop_assert_eq!(c, c_constant(p, src, GEOM));
            prop_assert!((mean_concentration_model(p, &s2, GEOM) - 2.0 * lambda).abs() <= 1e-12 * lambda.max(1.0));
        }

        #[test]
        fn r2_in_unit_interval_inside(
            px in -8.9f64..8.9, py in -8.9f64..8.9,
            sx in -8.9f64..8.9, sy in -8.9f64..8.9,
        ) {
            let p = Point2::new(px, py);
            let src = Point2::new(sx, sy);
            prop_assume!(p.norm_sq() < 80.0 && src.norm_sq() < 80.0);
            let r2 = moebius_r2(p, src, GEOM);
            prop_assert!((0.0..=1.0 + 1e-12).contains(&r2));
        }
    }
}
