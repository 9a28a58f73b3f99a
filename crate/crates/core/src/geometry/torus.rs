use std::f64::consts::{PI, TAU};

use super::{arccot, kappa_rho, phi, spherical_direction, RotationMatrix, Vec3};
use crate::error::{check_open, Error, Result};

/// Spindle torus of points seen from `apex_a` and `apex_b` under deflection `omega`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TorusSpec {
    pub omega: f64,
    pub apex_a: Vec3,
    pub apex_b: Vec3,
}

impl TorusSpec {
    pub fn new(omega: f64, apex_a: Vec3, apex_b: Vec3) -> Result<Self> {
        check_open("omega", omega, 0.0, PI, "(0, pi)")?;
        if apex_a == apex_b {
            return Err(Error::CoincidentPoints("torus apexes"));
        }
        Ok(TorusSpec { omega, apex_a, apex_b })
    }

    /// Point of the torus at chart coordinates `(alpha, beta)`, `alpha < omega`.
    pub fn point(&self, alpha: f64, beta: f64) -> Vec3 {
        torus_point(self.omega, alpha, beta, &self.apex_a, &self.apex_b)
    }

    pub fn surface_element(&self, alpha: f64) -> f64 {
        torus_surface_element(self.omega, alpha, (self.apex_b - self.apex_a).norm())
    }

    /// `φ(x) − cot ω`, zero on the torus.
    pub fn level(&self, x: &Vec3) -> Result<f64> {
        Ok(phi(x, &self.apex_b, &self.apex_a)? - 1.0 / self.omega.tan())
    }
}

/// `a + ‖b − a‖·sin(ω − α)/sin ω · R₂·u(α, β)` with `R₂ e_z = unit(b − a)`.
pub fn torus_point(omega: f64, alpha: f64, beta: f64, apex_a: &Vec3, apex_b: &Vec3) -> Vec3 {
    let ab = apex_b - apex_a;
    let len = ab.norm();
    let r2 = RotationMatrix::from_z_to(&(ab / len));
    let radius = len * (omega - alpha).sin() / omega.sin();
    apex_a + r2.apply(&spherical_direction(alpha, beta)) * radius
}

/// Surface element `dS/(dα dβ) = D² sin(ω − α) sin α / sin² ω`, `D = ‖b − a‖`.
pub fn torus_surface_element(omega: f64, alpha: f64, apex_distance: f64) -> f64 {
    let so = omega.sin();
    apex_distance * apex_distance * (omega - alpha).sin() * alpha.sin() / (so * so)
}

/// Torus angle `ω = cot⁻¹ φ(x, d, s)` of the unique torus through `x`.
pub fn torus_angle_of_point(x: &Vec3, d: &Vec3, s: &Vec3) -> Result<f64> {
    Ok(arccot(phi(x, d, s)?))
}

/// Torus coordinates `(ω, α, β)` of a point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TorusCoordinates {
    pub omega: f64,
    pub alpha: f64,
    pub beta: f64,
}

/// Inverse of [`torus_point`] with `apex_a = s` and `apex_b = d`.
pub fn torus_coordinates(x: &Vec3, d: &Vec3, s: &Vec3) -> Result<TorusCoordinates> {
    let omega = torus_angle_of_point(x, d, s)?;
    let (kappa, _) = kappa_rho(x, d, s)?;
    let r2 = RotationMatrix::from_z_to(&(d - s).normalize());
    let local = r2.transpose().apply(&(x - s));
    let beta = local.y.atan2(local.x).rem_euclid(TAU);
    Ok(TorusCoordinates {
        omega,
        alpha: kappa.acos(),
        beta,
    })
}
