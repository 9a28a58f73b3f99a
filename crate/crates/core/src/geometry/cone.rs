use std::f64::consts::PI;

use super::{grad_phi, phi, RotationMatrix, Vec3};
use crate::error::{check_open, Error, Result};

const Z_CLAMP: f64 = 1e-24;

/// Cone of aperture `omega1` with vertex `x` around the axis `x − s`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConeSpec {
    pub omega1: f64,
    pub vertex: Vec3,
    pub axis_ref: Vec3,
}

impl ConeSpec {
    pub fn new(omega1: f64, vertex: Vec3, axis_ref: Vec3) -> Result<Self> {
        check_open("omega1", omega1, 0.0, PI, "(0, pi)")?;
        if vertex == axis_ref {
            return Err(Error::CoincidentPoints("cone vertex and axis reference"));
        }
        Ok(ConeSpec { omega1, vertex, axis_ref })
    }

    /// `ψ(y) − cos ω₁`, zero on the cone.
    pub fn level(&self, y: &Vec3) -> Result<f64> {
        Ok(cone_psi(y, &self.vertex, &self.axis_ref)? - self.omega1.cos())
    }
}

/// `ψ(y, x, s) = unit(y − x)·unit(x − s)`, the cosine of the first deflection.
pub fn cone_psi(y: &Vec3, x: &Vec3, s: &Vec3) -> Result<f64> {
    let a = x - s;
    let b = y - x;
    if a.norm() == 0.0 {
        return Err(Error::CoincidentPoints("x = s"));
    }
    if b.norm() == 0.0 {
        return Err(Error::CoincidentPoints("y = x"));
    }
    Ok((a.dot(&b) / (a.norm() * b.norm())).clamp(-1.0, 1.0))
}

/// `Ψ(y, x, d, s) = ψ(y, x, s) + cos(cot⁻¹ φ(y, d, x))`.
pub fn capital_psi(y: &Vec3, x: &Vec3, d: &Vec3, s: &Vec3) -> Result<f64> {
    let p = phi(y, d, x)?;
    Ok(cone_psi(y, x, s)? + p / (1.0 + p * p).sqrt())
}

/// `∇_y Ψ = (a − ψ ê)/‖y − x‖ + (1 + φ²)^(-3/2) ∇_y φ(y, d, x)`.
pub fn capital_psi_gradient_y(y: &Vec3, x: &Vec3, d: &Vec3, s: &Vec3) -> Result<Vec3> {
    let psi = cone_psi(y, x, s)?;
    let a = (x - s).normalize();
    let dy = y - x;
    let n = dy.norm();
    let e = dy / n;
    let p = phi(y, d, x)?;
    let damp = (1.0 + p * p).powf(-1.5);
    Ok((a - e * psi) / n + grad_phi(y, d, x)? * damp)
}

/// A point of the cone–torus intersection.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConeTorusPoint {
    pub y: Vec3,
    pub r_cap: f64,
    pub z_cap: f64,
    /// Area element in cm² per rad².
    pub ds: f64,
    pub omega1: f64,
    pub omega2: f64,
    pub varphi: f64,
}

/// Per-`(x, d, s)` quantities shared by every `(ω₁, φ, λ)` sample.
#[derive(Clone, Copy, Debug)]
pub struct ConeTorusFrame {
    pub x: Vec3,
    rot: RotationMatrix,
    /// `R_cᵀ unit(d − x)`: the cone frame coordinates of the outgoing axis.
    row: Vec3,
    dist_xd: f64,
}

impl ConeTorusFrame {
    pub fn new(x: &Vec3, d: &Vec3, s: &Vec3) -> Result<Self> {
        let a = x - s;
        let b = d - x;
        if a.norm() == 0.0 {
            return Err(Error::CoincidentPoints("x = s"));
        }
        let dist_xd = b.norm();
        if dist_xd == 0.0 {
            return Err(Error::CoincidentPoints("d = x"));
        }
        let rot = RotationMatrix::from_z_to(&a.normalize());
        let row = rot.transpose().apply(&(b / dist_xd));
        Ok(ConeTorusFrame { x: *x, rot, row, dist_xd })
    }

    /// Cone direction `R_c·(sin ω₁ cos φ, sin ω₁ sin φ, cos ω₁)`.
    #[inline]
    pub fn direction(&self, omega1: f64, varphi: f64) -> Vec3 {
        self.rot.apply(&super::spherical_direction(omega1, varphi))
    }

    /// Intersection for `λ = cos ω₁ + cos ω₂`; `Ok(None)` for the discarded
    /// branch `r∩ ≤ 0`.
    pub fn intersect(&self, omega1: f64, varphi: f64, lambda: f64) -> Result<Option<ConeTorusPoint>> {
        check_open("omega1", omega1, 0.0, PI, "(0, pi)")?;
        let (s1, c1) = omega1.sin_cos();
        let c2 = lambda - c1;
        check_open("lambda - cos(omega1)", c2, -1.0, 1.0, "(-1, 1)")?;
        let s2 = (1.0 - c2 * c2).sqrt();
        let cot2 = c2 / s2;
        let (sp, cp) = varphi.sin_cos();
        let c = nalgebra::Vector3::new(s1 * cp, s1 * sp, c1);
        let z = self.row.dot(&c).clamp(-1.0, 1.0);
        let q = (1.0 - z * z).max(Z_CLAMP).sqrt();
        let big_d = self.dist_xd;
        let r = big_d * (z - q * cot2);
        if !(r > 0.0) {
            return Ok(None);
        }
        let z_w1 = self.row.dot(&Vec3::new(c1 * cp, c1 * sp, -s1));
        let z_phi = self.row.dot(&Vec3::new(-s1 * sp, s1 * cp, 0.0));
        let g = 1.0 + cot2 * z / q;
        let r_w1 = big_d * (z_w1 * g - s1 / (s2 * s2 * s2) * q);
        let r_phi = big_d * z_phi * g;
        let ds = r * (s1 * s1 * (r * r + r_w1 * r_w1) + r_phi * r_phi).sqrt();
        Ok(Some(ConeTorusPoint {
            y: self.x + self.rot.apply(&c) * r,
            r_cap: r,
            z_cap: z,
            ds,
            omega1,
            omega2: c2.acos(),
            varphi,
        }))
    }
}

/// Point `y∩(ω₁, φ)` on the first-deflection cone at `x` whose second
/// deflection towards `d` satisfies `cos ω₁ + cos ω₂ = λ`.
pub fn cone_torus_intersection(
    omega1: f64,
    varphi: f64,
    lambda: f64,
    x: &Vec3,
    d: &Vec3,
    s: &Vec3,
) -> Result<Option<ConeTorusPoint>> {
    ConeTorusFrame::new(x, d, s)?.intersect(omega1, varphi, lambda)
}

/// Area element `dS∩/(dω₁ dφ)` of the intersection manifold.
pub fn intersection_area_element(
    omega1: f64,
    varphi: f64,
    lambda: f64,
    x: &Vec3,
    d: &Vec3,
    s: &Vec3,
) -> Result<f64> {
    cone_torus_intersection(omega1, varphi, lambda, x, d, s)?
        .map(|p| p.ds)
        .ok_or(Error::NoIntersection)
}
