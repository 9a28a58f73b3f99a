//! Coordinate geometry of first- and second-order Compton scattering.
//!
//! Angle convention: for a scattering site `x` between a source-like apex `s`
//! and a detector-like apex `d`, the scattering angle `ω` is the deflection
//! between the incoming direction `x − s` and the outgoing direction `d − x`.
//! With that convention the torus level-set function satisfies `φ = cot ω`.

mod cone;
mod scan;
mod torus;

pub use cone::{
    capital_psi, capital_psi_gradient_y, cone_psi, cone_torus_intersection,
    intersection_area_element, ConeSpec, ConeTorusPoint, ConeTorusFrame,
};
pub use scan::{
    alpha_bar, h_factors, immersion_report, jacobian_h, jacobian_h_analytic, jacobian_h_numeric,
    jacobian_h_over_sin, support_factor, Detector, DetectorLayout, ImmersionReport, ImmersionSettings, ScanGeometry, SphereChart,
};
pub use torus::{
    torus_angle_of_point, torus_coordinates, torus_point, torus_surface_element,
    TorusCoordinates, TorusSpec,
};

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

/// Point or direction in cm.
pub type Vec3 = Vector3<f64>;

/// `|κ|` at or above this is treated as lying on the apex line.
pub const LINE_TOLERANCE: f64 = 1e-12;

/// Proper rotation in 3D.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RotationMatrix(Matrix3<f64>);

impl RotationMatrix {
    pub fn identity() -> Self {
        RotationMatrix(Matrix3::identity())
    }

    /// Rotation taking unit vector `u` onto unit vector `v`. For `u·v ≥ 0`
    /// this is the Rodrigues rotation about `u × v`. Otherwise it is a
    /// half-turn taking `u` to `−u`, about the first canonical axis not
    /// parallel to `u` (projected perpendicular to it), followed by the
    /// Rodrigues rotation from `−u` to `v`.
    pub fn rodrigues(u: &Vec3, v: &Vec3) -> Self {
        let c = u.dot(v);
        if c < 0.0 {
            // dividing by 1 + c loses orthogonality near antipodes, so go
            // through −u with a half-turn first
            let axis = (0..3)
                .map(|i| {
                    let mut e = Vec3::zeros();
                    e[i] = 1.0;
                    e
                })
                .find(|e| e.dot(u).abs() < 0.9)
                .expect("a unit vector has a component below 0.9 on some axis");
            let p = (axis - u * axis.dot(u)).normalize();
            let half_turn = 2.0 * p * p.transpose() - Matrix3::identity();
            return RotationMatrix(Self::rodrigues(&(-u), v).0 * half_turn);
        }
        let k = u.cross(v);
        let kx = Matrix3::new(0.0, -k.z, k.y, k.z, 0.0, -k.x, -k.y, k.x, 0.0);
        RotationMatrix(Matrix3::identity() + kx + kx * kx / (1.0 + c))
    }

    /// Rotation taking `e_z` onto the unit vector `v`.
    pub fn from_z_to(v: &Vec3) -> Self {
        Self::rodrigues(&Vec3::z(), v)
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn apply(&self, v: &Vec3) -> Vec3 {
        self.0 * v
    }

    pub fn transpose(&self) -> Self {
        RotationMatrix(self.0.transpose())
    }

    pub fn compose(&self, other: &RotationMatrix) -> Self {
        RotationMatrix(self.0 * other.0)
    }

    /// Row `i` of the matrix as a vector.
    pub fn row(&self, i: usize) -> Vec3 {
        self.0.row(i).transpose()
    }

    /// Largest deviation of `RᵀR` from the identity and of `det R` from one.
    pub fn orthogonality_error(&self) -> f64 {
        let e = (self.0.transpose() * self.0 - Matrix3::identity()).abs().max();
        e.max((self.0.determinant() - 1.0).abs())
    }
}

/// Unit direction on the sphere with polar angle `alpha` and azimuth `beta`.
#[inline]
pub fn spherical_direction(alpha: f64, beta: f64) -> Vec3 {
    let (sa, ca) = alpha.sin_cos();
    let (sb, cb) = beta.sin_cos();
    Vec3::new(sa * cb, sa * sb, ca)
}

fn unit(v: Vec3, what: &'static str) -> Result<(Vec3, f64)> {
    let n = v.norm();
    if n == 0.0 || !n.is_finite() {
        return Err(Error::CoincidentPoints(what));
    }
    Ok((v / n, n))
}

/// `κ = unit(x−s)·unit(d−s)` and `ρ = ‖x−s‖/‖d−s‖`.
pub fn kappa_rho(x: &Vec3, d: &Vec3, s: &Vec3) -> Result<(f64, f64)> {
    let (a, na) = unit(x - s, "x = s")?;
    let (b, nb) = unit(d - s, "d = s")?;
    Ok((a.dot(&b).clamp(-1.0, 1.0), na / nb))
}

/// Torus level-set function `φ = (κ − ρ)/√(1 − κ²)`, equal to `cot ω`.
pub fn phi(x: &Vec3, d: &Vec3, s: &Vec3) -> Result<f64> {
    let (kappa, rho) = kappa_rho(x, d, s)?;
    if kappa.abs() >= 1.0 - LINE_TOLERANCE {
        return Err(Error::DegenerateLine { kappa });
    }
    Ok((kappa - rho) / (1.0 - kappa * kappa).sqrt())
}

/// Closed-form `∇ₓφ`.
pub fn grad_phi(x: &Vec3, d: &Vec3, s: &Vec3) -> Result<Vec3> {
    let (a, na) = unit(x - s, "x = s")?;
    let (b, nb) = unit(d - s, "d = s")?;
    let kappa = a.dot(&b).clamp(-1.0, 1.0);
    if kappa.abs() >= 1.0 - LINE_TOLERANCE {
        return Err(Error::DegenerateLine { kappa });
    }
    let rho = na / nb;
    let q = 1.0 - kappa * kappa;
    let sq = q.sqrt();
    let c_b = (1.0 - rho * kappa) / (na * q * sq);
    let c_a = (rho + kappa * (1.0 - rho * kappa) / q) / (na * sq);
    Ok(b * c_b - a * c_a)
}

/// `‖∇ₓφ‖² = (1 − 2ρκ + ρ²)/((1 − κ²)²‖x − s‖²)`.
pub fn grad_phi_norm_sq(x: &Vec3, d: &Vec3, s: &Vec3) -> Result<f64> {
    let (kappa, rho) = kappa_rho(x, d, s)?;
    if kappa.abs() >= 1.0 - LINE_TOLERANCE {
        return Err(Error::DegenerateLine { kappa });
    }
    let q = 1.0 - kappa * kappa;
    let r = (x - s).norm();
    Ok((1.0 - 2.0 * rho * kappa + rho * rho) / (q * q * r * r))
}

/// Deflection angle in `[0, π]` between two nonzero directions.
pub fn deflection_angle(incoming: &Vec3, outgoing: &Vec3) -> f64 {
    let c = incoming.dot(outgoing) / (incoming.norm() * outgoing.norm());
    c.clamp(-1.0, 1.0).acos()
}

/// `cot⁻¹ : ℝ → (0, π)`.
#[inline]
pub fn arccot(p: f64) -> f64 {
    std::f64::consts::FRAC_PI_2 - p.atan()
}
