//! Euler angles, rotation matrices and exponential-map (axis-angle) vectors.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
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

    pub fn letter(self) -> char {
        ['X', 'Y', 'Z'][self.index()]
    }
}

/// Three distinct axes; the composed rotation is `R_a R_b R_c` in listed order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RotationOrder(pub [Axis; 3]);

impl RotationOrder {
    pub const XYZ: Self = RotationOrder([Axis::X, Axis::Y, Axis::Z]);
    pub const ZYX: Self = RotationOrder([Axis::Z, Axis::Y, Axis::X]);
    pub const ZXY: Self = RotationOrder([Axis::Z, Axis::X, Axis::Y]);
    pub const ALL: [Self; 6] = [
        RotationOrder([Axis::X, Axis::Y, Axis::Z]),
        RotationOrder([Axis::X, Axis::Z, Axis::Y]),
        RotationOrder([Axis::Y, Axis::X, Axis::Z]),
        RotationOrder([Axis::Y, Axis::Z, Axis::X]),
        RotationOrder([Axis::Z, Axis::X, Axis::Y]),
        RotationOrder([Axis::Z, Axis::Y, Axis::X]),
    ];

    pub fn new(axes: [Axis; 3]) -> Result<Self> {
        let [a, b, c] = axes;
        if a == b || b == c || a == c {
            return Err(Error::InvalidArgument(format!(
                "rotation order {}{}{} repeats an axis",
                a.letter(),
                b.letter(),
                c.letter()
            )));
        }
        Ok(RotationOrder(axes))
    }

    pub fn parse(s: &str) -> Result<Self> {
        let axes: Vec<Axis> = s
            .chars()
            .map(|c| match c.to_ascii_uppercase() {
                'X' => Ok(Axis::X),
                'Y' => Ok(Axis::Y),
                'Z' => Ok(Axis::Z),
                _ => Err(Error::InvalidArgument(format!("bad rotation order `{s}`"))),
            })
            .collect::<Result<_>>()?;
        let axes: [Axis; 3] = axes
            .try_into()
            .map_err(|_| Error::InvalidArgument(format!("bad rotation order `{s}`")))?;
        Self::new(axes)
    }

    /// +1 for cyclic orders (XYZ, YZX, ZXY), -1 otherwise.
    fn parity(&self) -> f64 {
        let [i, j, _] = self.0.map(Axis::index);
        if (j + 3 - i) % 3 == 1 {
            1.0
        } else {
            -1.0
        }
    }
}

pub fn axis_rotation(axis: Axis, rad: f64) -> Matrix3<f64> {
    let (s, c) = rad.sin_cos();
    match axis {
        Axis::X => Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c),
        Axis::Y => Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c),
        Axis::Z => Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0),
    }
}

/// Angles in degrees, one per axis of `order`.
pub fn euler_to_matrix(deg: [f64; 3], order: RotationOrder) -> Matrix3<f64> {
    let [a, b, c] = order.0;
    axis_rotation(a, deg[0].to_radians()) * axis_rotation(b, deg[1].to_radians()) * axis_rotation(c, deg[2].to_radians())
}

/// Inverse of [`euler_to_matrix`], middle angle in [-90, 90] degrees.
pub fn matrix_to_euler(r: &Matrix3<f64>, order: RotationOrder) -> [f64; 3] {
    let [i, j, k] = order.0.map(Axis::index);
    let s = order.parity();
    let b = (s * r[(i, k)]).clamp(-1.0, 1.0).asin();
    let (a, c) = if (s * r[(i, k)]).abs() < 1.0 - 1e-12 {
        (
            (-s * r[(j, k)]).atan2(r[(k, k)]),
            (-s * r[(i, j)]).atan2(r[(i, i)]),
        )
    } else {
        // gimbal lock: fold everything into the first angle
        ((s * r[(k, j)]).atan2(r[(j, j)]), 0.0)
    };
    [a.to_degrees(), b.to_degrees(), c.to_degrees()]
}

fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rodrigues' formula; Taylor series below 1e-7 rad.
pub fn from_expmap(v: &Vector3<f64>) -> Matrix3<f64> {
    let theta = v.norm();
    let (a, b) = if theta < 1e-7 {
        let t2 = theta * theta;
        (1.0 - t2 / 6.0, 0.5 - t2 / 24.0)
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / (theta * theta))
    };
    let k = skew(v);
    Matrix3::identity() + k * a + k * k * b
}

/// Axis-angle vector with angle in [0, pi].
pub fn to_expmap(r: &Matrix3<f64>) -> Vector3<f64> {
    let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(*r));
    quat_to_expmap(&q)
}

pub fn quat_to_expmap(q: &UnitQuaternion<f64>) -> Vector3<f64> {
    let (mut w, mut v) = (q.w, q.imag());
    if w < 0.0 {
        w = -w;
        v = -v;
    }
    let s = v.norm();
    if s < 1e-12 {
        // theta ~ 2 s / w
        return v * (2.0 / w);
    }
    let theta = 2.0 * s.atan2(w);
    v * (theta / s)
}

pub fn expmap_to_quat(v: &Vector3<f64>) -> UnitQuaternion<f64> {
    UnitQuaternion::from_scaled_axis(*v)
}

/// Of the two axis-angle representatives `v` and `v - 2 pi v/|v|` (same rotation), the one
/// closer to `prev`.
pub fn closest_representative(v: &Vector3<f64>, prev: &Vector3<f64>) -> Vector3<f64> {
    let theta = v.norm();
    if theta < 1e-12 {
        return *v;
    }
    let alt = v * ((theta - 2.0 * PI) / theta);
    if (alt - prev).norm() < (v - prev).norm() {
        alt
    } else {
        *v
    }
}

/// Heading about +Y: angle of the rotated forward axis `R (0,0,1)` in the XZ plane.
pub fn heading(r: &Matrix3<f64>) -> f64 {
    let f = r * Vector3::z();
    f.x.atan2(f.z)
}
