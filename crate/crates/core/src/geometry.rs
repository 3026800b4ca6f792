//! Rotation algebra, spherical/Cartesian transforms and the projection onto
//! a product of unit circles.
//!
//! Angles are radians, lengths are meters. Azimuth is measured in the x-y
//! plane from +x towards +y, elevation from the x-y plane towards +z.

use std::f64::consts::PI;

use nalgebra::{DVector, Matrix3, Vector3};

use crate::error::GeometryError;

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Wraps an angle into `[-π, π]`.
pub fn wrap_angle(theta: f64) -> f64 {
    if (-PI..=PI).contains(&theta) {
        return theta;
    }
    let wrapped = (theta + PI).rem_euclid(2.0 * PI) - PI;
    // rem_euclid can round up to exactly 2π
    if wrapped > PI {
        wrapped - 2.0 * PI
    } else {
        wrapped
    }
}

/// Roll, pitch and yaw of a sensor frame.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EulerAngles {
    pub roll: f64,
    pub pitch: f64,
    pub yaw: f64,
}

impl EulerAngles {
    pub fn new(roll: f64, pitch: f64, yaw: f64) -> Self {
        Self {
            roll: wrap_angle(roll),
            pitch: wrap_angle(pitch),
            yaw: wrap_angle(yaw),
        }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    pub fn from_degrees(roll: f64, pitch: f64, yaw: f64) -> Self {
        Self::new(roll.to_radians(), pitch.to_radians(), yaw.to_radians())
    }

    /// Component-wise sum, without wrapping. Used to form presumed + bias.
    pub fn compose(&self, other: &EulerAngles) -> EulerAngles {
        EulerAngles {
            roll: self.roll + other.roll,
            pitch: self.pitch + other.pitch,
            yaw: self.yaw + other.yaw,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.roll.is_finite() && self.pitch.is_finite() && self.yaw.is_finite()
    }
}

/// One range/azimuth/elevation reading.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SphericalReading {
    pub range: f64,
    pub azimuth: f64,
    pub elevation: f64,
}

impl SphericalReading {
    pub fn new(range: f64, azimuth: f64, elevation: f64) -> Self {
        Self {
            range,
            azimuth,
            elevation,
        }
    }
}

pub fn rot_x(theta: f64) -> Mat3 {
    let (s, c) = theta.sin_cos();
    Mat3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

pub fn rot_y(theta: f64) -> Mat3 {
    let (s, c) = theta.sin_cos();
    Mat3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

pub fn rot_z(theta: f64) -> Mat3 {
    let (s, c) = theta.sin_cos();
    Mat3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// `R = R_x(roll) · R_y(pitch) · R_z(yaw)`, the local-to-global rotation.
pub fn rotation_matrix(angles: &EulerAngles) -> Mat3 {
    rot_x(angles.roll) * rot_y(angles.pitch) * rot_z(angles.yaw)
}

/// Cartesian to (range, azimuth, elevation). The azimuth at the pole is 0.
pub fn cart_to_sphere(v: &Vec3) -> Result<SphericalReading, GeometryError> {
    let range = v.norm();
    if !(range > 0.0) {
        return Err(GeometryError::ZeroVector);
    }
    let planar = v.x.hypot(v.y);
    let azimuth = if v.x == 0.0 && v.y == 0.0 {
        0.0
    } else {
        v.y.atan2(v.x)
    };
    let elevation = v.z.atan2(planar);
    Ok(SphericalReading {
        range,
        azimuth,
        elevation,
    })
}

/// Debiased spherical-to-Cartesian conversion with multiplicative
/// compensation factors `lambda_az`, `lambda_el` in `(0, 1]`.
pub fn sphere_to_cart(
    reading: &SphericalReading,
    lambda_az: f64,
    lambda_el: f64,
) -> Result<Vec3, GeometryError> {
    check_compensation(lambda_az, lambda_el)?;
    Ok(sphere_to_cart_unchecked(reading, lambda_az, lambda_el))
}

pub(crate) fn check_compensation(lambda_az: f64, lambda_el: f64) -> Result<(), GeometryError> {
    for l in [lambda_az, lambda_el] {
        if !(l > 0.0 && l <= 1.0) {
            return Err(GeometryError::Compensation(l));
        }
    }
    Ok(())
}

pub(crate) fn sphere_to_cart_unchecked(
    reading: &SphericalReading,
    lambda_az: f64,
    lambda_el: f64,
) -> Vec3 {
    let (sp, cp) = reading.azimuth.sin_cos();
    let (se, ce) = reading.elevation.sin_cos();
    let horiz = reading.range * ce / (lambda_az * lambda_el);
    Vec3::new(horiz * cp, horiz * sp, reading.range * se / lambda_el)
}

/// `e^{-σ²/2}`, the conversion-bias compensation factor for angular noise σ.
pub fn compensation_factor(sigma: f64) -> f64 {
    (-0.5 * sigma * sigma).exp()
}

/// Rescales every consecutive pair of `x` to unit norm.
pub fn project_circles(x: &DVector<f64>) -> Result<DVector<f64>, GeometryError> {
    if x.len() % 2 != 0 {
        return Err(GeometryError::OddLength(x.len()));
    }
    let mut out = x.clone();
    for i in 0..x.len() / 2 {
        let (a, b) = (x[2 * i], x[2 * i + 1]);
        let r = a.hypot(b);
        if !(r > 0.0) || !r.is_finite() {
            return Err(GeometryError::DegeneratePair(i));
        }
        out[2 * i] = a / r;
        out[2 * i + 1] = b / r;
    }
    Ok(out)
}

/// First-order covariance of the converted position
/// `rot · sphere_to_cart(reading) + p` under independent reading noise with
/// standard deviations `(σρ, σφ, ση)`. The compensation factors follow from
/// the angular sigmas.
pub fn converted_covariance(reading: &SphericalReading, sigmas: (f64, f64, f64), rot: &Mat3) -> Mat3 {
    let (s_range, s_az, s_el) = sigmas;
    let l_az = compensation_factor(s_az);
    let l_el = compensation_factor(s_el);
    let j = rot * conversion_jacobian(reading, l_az, l_el);
    let sigma = Mat3::from_diagonal(&Vec3::new(s_range * s_range, s_az * s_az, s_el * s_el));
    let cov = j * sigma * j.transpose();
    0.5 * (cov + cov.transpose())
}

/// Jacobian of `sphere_to_cart` with respect to (range, azimuth, elevation).
pub fn conversion_jacobian(reading: &SphericalReading, lambda_az: f64, lambda_el: f64) -> Mat3 {
    let rho = reading.range;
    let (sp, cp) = reading.azimuth.sin_cos();
    let (se, ce) = reading.elevation.sin_cos();
    let k = 1.0 / (lambda_az * lambda_el);
    let ke = 1.0 / lambda_el;
    Mat3::new(
        k * cp * ce,
        -k * rho * sp * ce,
        -k * rho * cp * se,
        k * sp * ce,
        k * rho * cp * ce,
        -k * rho * sp * se,
        ke * se,
        0.0,
        ke * rho * ce,
    )
}
