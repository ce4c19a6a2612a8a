//! Euler angles, rotation matrices and exponential maps.
//!
//! Euler orders follow BVH: channels listed as `Zrotation Xrotation Yrotation`
//! compose as `R = Rz · Rx · Ry` (column vectors, child-to-parent).

use std::f64::consts::{PI, TAU};

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::{DataError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub fn index(self) -> usize {
        match self {
            Axis::X => 0,
            Axis::Y => 1,
            Axis::Z => 2,
        }
    }

    pub fn unit(self) -> Vector3<f64> {
        let mut v = Vector3::zeros();
        v[self.index()] = 1.0;
        v
    }

    pub fn letter(self) -> char {
        match self {
            Axis::X => 'X',
            Axis::Y => 'Y',
            Axis::Z => 'Z',
        }
    }
}

/// A Tait-Bryan order: three distinct axes, applied left to right.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EulerOrder(pub [Axis; 3]);

impl EulerOrder {
    pub const XYZ: Self = Self([Axis::X, Axis::Y, Axis::Z]);
    pub const ZXY: Self = Self([Axis::Z, Axis::X, Axis::Y]);
    pub const ZYX: Self = Self([Axis::Z, Axis::Y, Axis::X]);

    pub fn new(axes: [Axis; 3]) -> Result<Self> {
        if axes[0] == axes[1] || axes[1] == axes[2] || axes[0] == axes[2] {
            return Err(DataError::Rotation(format!("repeated axis in Euler order {axes:?}")));
        }
        Ok(Self(axes))
    }

    pub fn all() -> [Self; 6] {
        use Axis::*;
        [
            Self([X, Y, Z]),
            Self([X, Z, Y]),
            Self([Y, X, Z]),
            Self([Y, Z, X]),
            Self([Z, X, Y]),
            Self([Z, Y, X]),
        ]
    }

    fn parity(self) -> f64 {
        let [i, j, _] = self.0.map(Axis::index);
        if (j + 3 - i) % 3 == 1 {
            1.0
        } else {
            -1.0
        }
    }
}

/// Rotation matrix for angles in radians, one per axis in `order`.
pub fn euler_to_matrix(angles: [f64; 3], order: EulerOrder) -> Matrix3<f64> {
    order
        .0
        .iter()
        .zip(angles)
        .fold(Matrix3::identity(), |acc, (axis, a)| {
            acc * Rotation3::from_axis_angle(&nalgebra::Unit::new_unchecked(axis.unit()), a).into_inner()
        })
}

/// Inverse of `euler_to_matrix`; the middle angle lands in [−π/2, π/2]. At
/// gimbal lock the last angle is set to zero.
pub fn matrix_to_euler(m: &Matrix3<f64>, order: EulerOrder) -> [f64; 3] {
    let [i, j, k] = order.0.map(Axis::index);
    let s = order.parity();
    let sb = (s * m[(i, k)]).clamp(-1.0, 1.0);
    let beta = sb.asin();
    if sb.abs() < 1.0 - 1e-12 {
        let alpha = (-s * m[(j, k)]).atan2(m[(k, k)]);
        let gamma = (-s * m[(i, j)]).atan2(m[(i, i)]);
        [alpha, beta, gamma]
    } else {
        let alpha = (s * m[(k, j)]).atan2(m[(j, j)]);
        [alpha, beta, 0.0]
    }
}

/// Axis-angle vector θ·n̂ with θ ∈ [0, π].
pub fn matrix_to_expmap(m: &Matrix3<f64>) -> Vector3<f64> {
    let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(*m));
    // Canonical hemisphere w ≥ 0 keeps θ ≤ π.
    let (w, v) = (q.w, q.imag());
    let (w, v) = if w < 0.0 { (-w, -v) } else { (w, v) };
    let s = v.norm();
    if s < 1e-300 {
        return Vector3::zeros();
    }
    let theta = 2.0 * s.atan2(w);
    v * (theta / s)
}

pub fn expmap_to_matrix(v: &Vector3<f64>) -> Matrix3<f64> {
    Rotation3::new(*v).into_inner()
}

/// The representative of `v`'s rotation (θ + 2πk along the same axis) closest
/// to `prev`. At θ = π this also picks the axis sign matching `prev`.
pub fn nearest_expmap(v: &Vector3<f64>, prev: &Vector3<f64>) -> Vector3<f64> {
    let theta = v.norm();
    if theta < 1e-12 {
        // Identity: the only other candidates are full turns about prev's own axis.
        let pn = prev.norm();
        if pn < PI {
            return *v;
        }
        let axis = prev / pn;
        let k = (pn / TAU).round();
        return axis * (k * TAU);
    }
    let axis = v / theta;
    let along = prev.dot(&axis);
    // Minimize |(θ + 2πk)·n − prev| over integer k.
    let k = ((along - theta) / TAU).round();
    axis * (theta + k * TAU)
}

/// Converts a sequence of rotations to expmaps, keeping consecutive frames on
/// the same branch so no ≈2π jumps appear.
pub fn continuous_expmaps(ms: &[Matrix3<f64>]) -> Vec<Vector3<f64>> {
    let mut out: Vec<Vector3<f64>> = Vec::with_capacity(ms.len());
    for m in ms {
        let v = matrix_to_expmap(m);
        let v = match out.last() {
            Some(p) => nearest_expmap(&v, p),
            None => v,
        };
        out.push(v);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_rotation(rng: &mut ChaCha8Rng) -> Matrix3<f64> {
        let q = nalgebra::Quaternion::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        UnitQuaternion::from_quaternion(q).to_rotation_matrix().into_inner()
    }

    #[test]
    fn identity_and_quarter_turn() {
        assert_eq!(matrix_to_expmap(&Matrix3::identity()), Vector3::zeros());
        let m = euler_to_matrix([PI / 2.0, 0.0, 0.0], EulerOrder::XYZ);
        let v = matrix_to_expmap(&m);
        assert!((v - Vector3::new(PI / 2.0, 0.0, 0.0)).norm() < 1e-12, "{v}");
    }

    #[test]
    fn expmap_round_trip_ten_thousand_including_edges() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut worst: f64 = 0.0;
        for i in 0..10_000 {
            let m = match i % 4 {
                0 => random_rotation(&mut rng),
                1 => {
                    // Near identity.
                    let v = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
                    expmap_to_matrix(&(v * 1e-9))
                }
                _ => {
                    // Near and at π.
                    let n = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)).normalize();
                    let eps = if i % 4 == 2 { 0.0 } else { rng.random_range(0.0..1e-6) };
                    expmap_to_matrix(&(n * (PI - eps)))
                }
            };
            let v = matrix_to_expmap(&m);
            assert!(v.norm() <= PI + 1e-12);
            worst = worst.max((expmap_to_matrix(&v) - m).norm());
        }
        assert!(worst < 1e-9, "{worst}");
    }

    #[test]
    fn euler_round_trip_every_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for order in EulerOrder::all() {
            for _ in 0..500 {
                let m = random_rotation(&mut rng);
                let back = euler_to_matrix(matrix_to_euler(&m, order), order);
                assert!((back - m).norm() < 1e-9, "{order:?}");
            }
            // Gimbal lock: middle angle ±90°.
            for b in [PI / 2.0, -PI / 2.0] {
                let m = euler_to_matrix([0.3, b, -0.7], order);
                let back = euler_to_matrix(matrix_to_euler(&m, order), order);
                assert!((back - m).norm() < 1e-9, "{order:?} lock");
            }
        }
    }

    #[test]
    fn euler_angles_recovered_off_lock() {
        for order in EulerOrder::all() {
            let a = [0.4, -0.9, 2.1];
            let got = matrix_to_euler(&euler_to_matrix(a, order), order);
            for (x, y) in a.iter().zip(got) {
                assert!((x - y).abs() < 1e-12, "{order:?}: {a:?} vs {got:?}");
            }
        }
    }

    #[test]
    fn repeated_axis_rejected() {
        assert!(EulerOrder::new([Axis::X, Axis::X, Axis::Y]).is_err());
    }

    #[test]
    fn spinning_sequence_has_no_branch_jumps() {
        // Steady spin about a tilted axis passes through θ = π repeatedly.
        let axis = Vector3::new(0.3, 1.0, -0.2).normalize();
        let ms: Vec<_> = (0..400).map(|t| expmap_to_matrix(&(axis * (0.05 * t as f64)))).collect();
        let vs = continuous_expmaps(&ms);
        for w in vs.windows(2) {
            assert!((w[1] - w[0]).norm() < 0.06, "{} → {}", w[0], w[1]);
        }
        for (v, m) in vs.iter().zip(&ms) {
            assert!((expmap_to_matrix(v) - m).norm() < 1e-9);
        }
    }

    proptest! {
        #[test]
        fn nearest_representative_is_same_rotation(
            x in -3.0f64..3.0, y in -3.0f64..3.0, z in -3.0f64..3.0,
            px in -9.0f64..9.0, py in -9.0f64..9.0, pz in -9.0f64..9.0,
        ) {
            let v = matrix_to_expmap(&expmap_to_matrix(&Vector3::new(x, y, z)));
            let p = Vector3::new(px, py, pz);
            let r = nearest_expmap(&v, &p);
            prop_assert!((expmap_to_matrix(&r) - expmap_to_matrix(&v)).norm() < 1e-9);
            prop_assert!((r - p).norm() <= (v - p).norm() + 1e-12);
        }
    }
}
