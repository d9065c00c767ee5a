//! Gaze direction conventions.
//!
//! Angles are radians. Pitch is positive looking up, yaw positive looking to
//! the subject's right as seen by the camera; the unit vector points from the
//! eye towards the target in camera coordinates with `z` pointing away from
//! the camera, so the straight-ahead gaze is `(0, 0, -1)`.

use num_traits::{Float, FloatConst};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GazeAngles<T = f64> {
    pub pitch: T,
    pub yaw: T,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GazeVector<T = f64> {
    pub x: T,
    pub y: T,
    pub z: T,
}

fn lit<T: Float>(v: f64) -> T {
    T::from(v).expect("literal fits every float type")
}

impl<T: Float + FloatConst> GazeAngles<T> {
    /// Checked constructor: pitch in [-pi/2, pi/2], yaw in [-pi, pi].
    pub fn new(pitch: T, yaw: T) -> Result<Self> {
        let a = GazeAngles { pitch, yaw };
        ensure!(
            a.in_range(),
            "gaze angles out of range: pitch {:?}, yaw {:?}",
            pitch.to_f64(),
            yaw.to_f64()
        );
        Ok(a)
    }

    pub fn zero() -> Self {
        GazeAngles { pitch: T::zero(), yaw: T::zero() }
    }

    pub fn in_range(&self) -> bool {
        self.pitch.abs() <= T::FRAC_PI_2() && self.yaw.abs() <= T::PI()
    }

    /// Projects into the valid range; NaN maps to zero.
    pub fn clamped(self) -> Self {
        let c = |v: T, m: T| if v.is_nan() { T::zero() } else { v.max(-m).min(m) };
        GazeAngles { pitch: c(self.pitch, T::FRAC_PI_2()), yaw: c(self.yaw, T::PI()) }
    }

    pub fn to_vector(self) -> GazeVector<T> {
        pitchyaw_to_vector(self)
    }
}

impl<T: Float> GazeVector<T> {
    pub fn norm(&self) -> T {
        (self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn dot(&self, o: &Self) -> T {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    fn cross_norm(&self, o: &Self) -> T {
        let cx = self.y * o.z - self.z * o.y;
        let cy = self.z * o.x - self.x * o.z;
        let cz = self.x * o.y - self.y * o.x;
        (cx * cx + cy * cy + cz * cz).sqrt()
    }
}

pub fn pitchyaw_to_vector<T: Float>(a: GazeAngles<T>) -> GazeVector<T> {
    let (sp, cp) = a.pitch.sin_cos();
    let (sy, cy) = a.yaw.sin_cos();
    GazeVector { x: -cp * sy, y: -sp, z: -cp * cy }
}

/// Inverse of [`pitchyaw_to_vector`]. The input must be unit length within 1e-4.
pub fn vector_to_pitchyaw<T: Float>(v: GazeVector<T>) -> Result<GazeAngles<T>> {
    let n = v.norm();
    ensure!(n.is_finite() && n > lit(1e-12), "cannot convert a zero or non-finite vector to angles");
    ensure!((n - T::one()).abs() <= lit(1e-4), "gaze vector is not unit length (norm {:?})", n.to_f64());
    let (x, y, z) = (v.x / n, v.y / n, v.z / n);
    let pitch = (-y).max(-T::one()).min(T::one()).asin();
    let yaw = (-x).atan2(-z);
    Ok(GazeAngles { pitch, yaw })
}

/// Angle between the two gaze directions, in degrees, within [0, 180].
pub fn angular_error_deg<T: Float>(a: GazeAngles<T>, b: GazeAngles<T>) -> T {
    let (u, v) = (pitchyaw_to_vector(a), pitchyaw_to_vector(b));
    // atan2 of |u x v| and u . v is arccos of the clamped cosine, without its
    // loss of precision near 0 and 180 degrees.
    u.cross_norm(&v).atan2(u.dot(&v)).to_degrees()
}

/// Mean angular error over paired predictions and labels.
pub fn mean_angular_error<T: Float>(pred: &[GazeAngles<T>], gt: &[GazeAngles<T>]) -> Result<T> {
    ensure!(!pred.is_empty(), "mean angular error of an empty set");
    ensure!(pred.len() == gt.len(), "length mismatch: {} predictions vs {} labels", pred.len(), gt.len());
    let sum = pred.iter().zip(gt).fold(T::zero(), |acc, (p, g)| acc + angular_error_deg(*p, *g));
    Ok(sum / T::from(pred.len()).expect("count fits"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    // Independent oracle: rotation of the forward axis by yaw about y then pitch about x.
    fn oracle_vector(p: f64, y: f64) -> [f64; 3] {
        let f = [0.0, 0.0, -1.0];
        // pitch: rotate about x so that positive pitch raises the vector (towards -y)
        let (sp, cp) = p.sin_cos();
        let after_pitch = [f[0], f[1] * cp + f[2] * sp, -f[1] * sp + f[2] * cp];
        let (sy, cy) = y.sin_cos();
        [
            after_pitch[0] * cy + after_pitch[2] * sy,
            after_pitch[1],
            -after_pitch[0] * sy + after_pitch[2] * cy,
        ]
    }

    #[test]
    fn forward_vector_matches_rotation_oracle() {
        for &(p, y) in &[(0.0, 0.0), (0.3, -0.2), (-1.2, 2.5), (1.5, -3.0)] {
            let v = pitchyaw_to_vector(GazeAngles { pitch: p, yaw: y });
            let o = oracle_vector(p, y);
            assert!((v.x - o[0]).abs() < 1e-12 && (v.y - o[1]).abs() < 1e-12 && (v.z - o[2]).abs() < 1e-12);
        }
    }

    #[test]
    fn straight_ahead_is_minus_z() {
        let v = pitchyaw_to_vector(GazeAngles { pitch: 0.0, yaw: 0.0 });
        assert_eq!((v.x, v.y, v.z), (-0.0, -0.0, -1.0));
    }

    #[test]
    fn pure_yaw_difference() {
        let a = GazeAngles { pitch: 0.0, yaw: 0.0 };
        let b = GazeAngles { pitch: 0.0, yaw: PI / 6.0 };
        assert!((angular_error_deg(a, b) - 30.0).abs() < 1e-6);
    }

    #[test]
    fn opposite_directions_are_180() {
        let a = GazeAngles { pitch: 0.0, yaw: 0.0 };
        let b = GazeAngles { pitch: 0.0, yaw: PI };
        assert!((angular_error_deg(a, b) - 180.0).abs() < 1e-6);
    }

    #[test]
    fn degenerate_inputs_are_errors() {
        assert!(vector_to_pitchyaw(GazeVector { x: 0.0, y: 0.0, z: 0.0 }).is_err());
        assert!(vector_to_pitchyaw(GazeVector { x: 0.0, y: 0.0, z: -2.0 }).is_err());
        assert!(mean_angular_error::<f64>(&[], &[]).is_err());
        let a = GazeAngles { pitch: 0.0, yaw: 0.0 };
        assert!(mean_angular_error(&[a, a], &[a]).is_err());
        assert!(GazeAngles::new(2.0, 0.0).is_err());
        assert!(GazeAngles::new(0.0, -3.2).is_err());
    }

    #[test]
    fn clamping_projects_into_range() {
        let c = GazeAngles { pitch: 3.0, yaw: -9.0 }.clamped();
        assert!(c.in_range());
        assert_eq!(c.pitch, PI / 2.0);
        let n = GazeAngles { pitch: f64::NAN, yaw: 0.1 }.clamped();
        assert_eq!(n.pitch, 0.0);
    }

    #[test]
    fn works_in_single_precision() {
        let a = GazeAngles { pitch: 0.0f32, yaw: 0.0 };
        let b = GazeAngles { pitch: 0.0f32, yaw: std::f32::consts::FRAC_PI_6 };
        assert!((angular_error_deg(a, b) - 30.0).abs() < 1e-3);
    }

    fn angles() -> impl Strategy<Value = GazeAngles<f64>> {
        (-1.55f64..1.55, -3.1f64..3.1).prop_map(|(pitch, yaw)| GazeAngles { pitch, yaw })
    }

    proptest! {
        #[test]
        fn round_trip(a in angles()) {
            let back = vector_to_pitchyaw(pitchyaw_to_vector(a)).unwrap();
            prop_assert!((back.pitch - a.pitch).abs() < 1e-6);
            prop_assert!((back.yaw - a.yaw).abs() < 1e-6);
        }

        #[test]
        fn error_is_a_metric_on_directions(a in angles(), b in angles(), c in angles()) {
            prop_assert_eq!(angular_error_deg(a, a), 0.0);
            let ab = angular_error_deg(a, b);
            prop_assert!((ab - angular_error_deg(b, a)).abs() < 1e-9);
            prop_assert!((0.0..=180.0).contains(&ab));
            prop_assert!(ab <= angular_error_deg(a, c) + angular_error_deg(c, b) + 1e-6);
        }

        #[test]
        fn vectors_are_unit(a in angles()) {
            prop_assert!((pitchyaw_to_vector(a).norm() - 1.0).abs() < 1e-12);
        }
    }
}
