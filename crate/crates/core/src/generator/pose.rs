use core::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default camera distance; the toy renderers ignore it.
pub const DEFAULT_RADIUS: f64 = 2.7;
/// Half-width of the uniform pitch window.
pub const PITCH_SPAN: f64 = 0.4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    /// Radians in `(−π, π]`.
    pub yaw: f64,
    pub pitch: f64,
    pub radius: f64,
}

impl Pose {
    pub fn new(yaw: f64, pitch: f64, radius: f64) -> Result<Self> {
        if !(yaw.is_finite() && pitch.is_finite()) {
            return Err(Error::NonFinite("pose"));
        }
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(Error::config("radius", "must be positive"));
        }
        Ok(Self {
            yaw: wrap_yaw(yaw),
            pitch,
            radius,
        })
    }

    pub fn frontal() -> Self {
        Self {
            yaw: 0.0,
            pitch: 0.0,
            radius: DEFAULT_RADIUS,
        }
    }

    /// Yaw-symmetric counterpart: `yaw ↦ −yaw`.
    pub fn mirror(&self) -> Self {
        Self {
            yaw: wrap_yaw(-self.yaw),
            ..*self
        }
    }

    /// Yaw uniform on `(−π, π]`, pitch uniform on `±PITCH_SPAN`.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let u: f64 = rng.random();
        let yaw = PI - 2.0 * PI * u;
        let pitch = rng.random_range(-PITCH_SPAN..=PITCH_SPAN);
        Self {
            yaw,
            pitch,
            radius: DEFAULT_RADIUS,
        }
    }

    /// Four poses evenly spaced in azimuth from a random start, sharing one pitch.
    pub fn sample_azimuth_sweep<R: Rng + ?Sized>(rng: &mut R) -> [Self; 4] {
        let base = Self::sample(rng);
        core::array::from_fn(|k| Self {
            yaw: wrap_yaw(base.yaw + k as f64 * PI / 2.0),
            ..base
        })
    }
}

pub fn mirror_pose(p: &Pose) -> Pose {
    p.mirror()
}

fn wrap_yaw(yaw: f64) -> f64 {
    if yaw > -PI && yaw <= PI {
        return yaw;
    }
    let mut y = libm::fmod(yaw, 2.0 * PI);
    if y <= -PI {
        y += 2.0 * PI;
    } else if y > PI {
        y -= 2.0 * PI;
    }
    y
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    #[test]
    fn mirror_examples() {
        let p = Pose::frontal();
        assert_eq!(mirror_pose(&p), p);
        let q = Pose::new(0.75, 0.1, 2.0).unwrap();
        let m = mirror_pose(&q);
        assert_eq!(m.yaw, -0.75);
        assert_eq!((m.pitch, m.radius), (0.1, 2.0));
        assert_eq!(mirror_pose(&m), q);
    }

    #[test]
    fn mirror_keeps_yaw_half_open() {
        let p = Pose::new(PI, 0.0, 1.0).unwrap();
        assert_eq!(p.mirror().yaw, PI);
        assert_eq!(Pose::new(-PI, 0.0, 1.0).unwrap().yaw, PI);
        assert!((Pose::new(3.0 * PI / 2.0, 0.0, 1.0).unwrap().yaw + PI / 2.0).abs() < 1e-12);
    }

    #[test]
    fn sampled_poses_in_range_and_mirror_involutive() {
        let mut rng = stream(1, Stream::Pose);
        for _ in 0..5000 {
            let p = Pose::sample(&mut rng);
            assert!(p.yaw > -PI && p.yaw <= PI);
            assert!(p.pitch.abs() <= PITCH_SPAN);
            assert_eq!(p.mirror().mirror(), p);
        }
    }

    #[test]
    fn azimuth_sweep_is_distinct() {
        let mut rng = stream(4, Stream::Pose);
        let ps = Pose::sample_azimuth_sweep(&mut rng);
        for i in 0..4 {
            for j in 0..i {
                assert_ne!(ps[i].yaw, ps[j].yaw);
            }
        }
    }
}
