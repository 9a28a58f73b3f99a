use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{grad_phi, kappa_rho, spherical_direction, RotationMatrix, Vec3};
use crate::error::{Error, Result};
use crate::volume::VoxelGrid;

/// Detector surface `d(α, β) = s + t(α)·R·u(α, β)` for a sphere whose axis
/// passes through the source: `s = center − offset·axis`, `0 ≤ offset ≤ radius`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SphereChart {
    pub center: Vec3,
    pub radius: f64,
    pub axis: Vec3,
    pub offset: f64,
    rot: RotationMatrix,
}

impl SphereChart {
    /// Chart of the sphere `(center, radius)` seen from `source`. When the
    /// source sits at the centre `axis` chooses the pole direction.
    pub fn new(source: &Vec3, center: &Vec3, radius: f64, axis: Option<Vec3>) -> Result<Self> {
        if !(radius > 0.0) {
            return Err(Error::Config(format!("sphere radius {radius} must be positive")));
        }
        let v = center - source;
        let offset = v.norm();
        if offset > radius * (1.0 + 1e-12) {
            return Err(Error::Config("source outside the detector sphere".into()));
        }
        let axis = if offset > 1e-12 {
            v / offset
        } else {
            axis.unwrap_or_else(Vec3::z).normalize()
        };
        Ok(SphereChart {
            center: *center,
            radius,
            axis,
            offset: offset.min(radius),
            rot: RotationMatrix::from_z_to(&axis),
        })
    }

    pub fn source(&self) -> Vec3 {
        self.center - self.axis * self.offset
    }

    /// Distance from the source to the sphere along polar angle `alpha`.
    pub fn t(&self, alpha: f64) -> f64 {
        let (h, r) = (self.offset, self.radius);
        let sa = alpha.sin();
        h * alpha.cos() + (r * r - h * h * sa * sa).max(0.0).sqrt()
    }

    /// `t'(α)/sin α`, finite at the pole.
    pub fn dt_over_sin(&self, alpha: f64) -> f64 {
        let (h, r) = (self.offset, self.radius);
        let sa = alpha.sin();
        let root = (r * r - h * h * sa * sa).max(1e-300).sqrt();
        -h - h * h * alpha.cos() / root
    }

    pub fn dt(&self, alpha: f64) -> f64 {
        self.dt_over_sin(alpha) * alpha.sin()
    }

    /// World direction of chart coordinates.
    #[inline]
    pub fn direction(&self, alpha: f64, beta: f64) -> Vec3 {
        self.rot.apply(&spherical_direction(alpha, beta))
    }

    pub fn point(&self, alpha: f64, beta: f64) -> Vec3 {
        self.source() + self.direction(alpha, beta) * self.t(alpha)
    }

    /// Chart coordinates of a world direction from the source.
    pub fn angles_of(&self, dir: &Vec3) -> (f64, f64) {
        let l = self.rot.transpose().apply(&dir.normalize());
        (l.z.clamp(-1.0, 1.0).acos(), l.y.atan2(l.x).rem_euclid(TAU))
    }
}

/// Arrangement of point detectors on the chart.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DetectorLayout {
    /// `count` detectors on the great half-circle through the pole in the
    /// plane `β = beta0`, uniformly in the signed angle `γ ∈ (−α_max, α_max)`.
    Arc { count: usize, beta0: f64 },
    /// Cell-centred grid `α_i = (i + ½)α_max/n_alpha`, `β_j = 2πj/n_beta`.
    Grid { n_alpha: usize, n_beta: usize },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detector {
    pub position: Vec3,
    /// Outward sphere normal.
    pub normal: Vec3,
    pub alpha: f64,
    pub beta: f64,
    /// Quadrature weight of the detector measure: `t² sin α Δα Δβ` on a grid,
    /// arc length `t Δγ` on an arc.
    pub area: f64,
}

/// Fixed source with point detectors on a sphere around the object.
#[derive(Clone, Debug)]
pub struct ScanGeometry {
    pub source: Vec3,
    pub chart: SphereChart,
    pub alpha_max: f64,
    pub layout: DetectorLayout,
    pub detectors: Vec<Detector>,
    /// Radius of the physical detector disk used by Monte-Carlo scoring (cm).
    pub disk_radius: f64,
}

impl ScanGeometry {
    pub fn new(
        source: Vec3,
        center: Vec3,
        radius: f64,
        alpha_max: f64,
        layout: DetectorLayout,
        disk_radius: f64,
    ) -> Result<Self> {
        if !(alpha_max > 0.0 && alpha_max <= PI) {
            return Err(Error::OutOfRange {
                name: "alpha_max",
                value: alpha_max,
                range: "(0, pi]",
            });
        }
        let chart = SphereChart::new(&source, &center, radius, None)?;
        let detector = |alpha: f64, beta: f64, area: f64| {
            let position = chart.point(alpha, beta);
            Detector {
                position,
                normal: (position - chart.center).normalize(),
                alpha,
                beta: beta.rem_euclid(TAU),
                area,
            }
        };
        let detectors: Vec<Detector> = match layout {
            DetectorLayout::Arc { count, beta0 } => {
                let dg = 2.0 * alpha_max / count as f64;
                (0..count)
                    .map(|i| {
                        let g = -alpha_max + (i as f64 + 0.5) * dg;
                        let beta = if g >= 0.0 { beta0 } else { beta0 + PI };
                        detector(g.abs(), beta, chart.t(g.abs()) * dg)
                    })
                    .collect()
            }
            DetectorLayout::Grid { n_alpha, n_beta } => {
                let da = alpha_max / n_alpha as f64;
                let db = TAU / n_beta as f64;
                let mut v = Vec::with_capacity(n_alpha * n_beta);
                for i in 0..n_alpha {
                    let a = (i as f64 + 0.5) * da;
                    let t = chart.t(a);
                    for j in 0..n_beta {
                        v.push(detector(a, j as f64 * db, t * t * a.sin() * da * db));
                    }
                }
                v
            }
        };
        if detectors.is_empty() {
            return Err(Error::Config("detector layout is empty".into()));
        }
        Ok(ScanGeometry {
            source,
            chart,
            alpha_max,
            layout,
            detectors,
            disk_radius,
        })
    }

    pub fn detector_count(&self) -> usize {
        self.detectors.len()
    }

    /// Errors unless the source and every detector lie outside the box `[lo, hi]`.
    pub fn check_outside(&self, lo: &Vec3, hi: &Vec3) -> Result<()> {
        let inside = |p: &Vec3| (0..3).all(|i| p[i] >= lo[i] && p[i] <= hi[i]);
        if inside(&self.source) {
            return Err(Error::Inadmissible("source inside the object support".into()));
        }
        if let Some(k) = self.detectors.iter().position(|d| inside(&d.position)) {
            return Err(Error::Inadmissible(format!("detector {k} inside the object support")));
        }
        Ok(())
    }

    /// SHA-256 over the source, chart and detector list.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        let mut put = |v: &Vec3| {
            for c in v.iter() {
                h.update(c.to_le_bytes());
            }
        };
        put(&self.source);
        put(&self.chart.center);
        put(&self.chart.axis);
        for d in &self.detectors {
            put(&d.position);
            put(&Vec3::new(d.alpha, d.beta, d.area));
        }
        h.update(self.chart.radius.to_le_bytes());
        h.update(self.alpha_max.to_le_bytes());
        h.update(self.disk_radius.to_le_bytes());
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// `(d − s)·(d − x)` at chart coordinates; its zero set is excluded from Ω.
pub fn support_factor(x: &Vec3, alpha: f64, beta: f64, chart: &SphereChart) -> f64 {
    let s = chart.source();
    let d = chart.point(alpha, beta);
    (d - s).dot(&(d - x))
}

/// `h(x, d) = det(∇φ, ∂_α∇φ, ∂_β∇φ)` by central differences of the closed-form
/// gradient in the chart.
pub fn jacobian_h_numeric(x: &Vec3, alpha: f64, beta: f64, chart: &SphereChart) -> Result<f64> {
    let s = chart.source();
    let e = 1e-5;
    let g = |a: f64, b: f64| grad_phi(x, &chart.point(a, b), &s);
    let g0 = g(alpha, beta)?;
    let ga = (g(alpha + e, beta)? - g(alpha - e, beta)?) / (2.0 * e);
    let gb = (g(alpha, beta + e)? - g(alpha, beta - e)?) / (2.0 * e);
    Ok(nalgebra::Matrix3::from_columns(&[g0, ga, gb]).determinant())
}

/// Closed-form `h` divided by `sin α`, finite at the chart pole.
///
/// In coordinates centred on `x − s` the determinant factors as
/// `(r cos ᾱ − t)(r + t_ᾱ sin ᾱ − t cos ᾱ)/(r² t³ sin⁶ ᾱ)`, and the chart
/// change `(α, β) → (ᾱ, β̄)` contributes `sin α/sin ᾱ`.
pub fn jacobian_h_over_sin(x: &Vec3, alpha: f64, beta: f64, chart: &SphereChart) -> Result<f64> {
    let (f1, f2, denom) = h_factors(x, alpha, beta, chart)?;
    Ok(f1 * f2 / denom)
}

/// Analytic `h(x, d(α, β))`.
pub fn jacobian_h_analytic(x: &Vec3, alpha: f64, beta: f64, chart: &SphereChart) -> Result<f64> {
    Ok(jacobian_h_over_sin(x, alpha, beta, chart)? * alpha.sin())
}

/// Default `h` path.
pub fn jacobian_h(x: &Vec3, alpha: f64, beta: f64, chart: &SphereChart) -> Result<f64> {
    jacobian_h_numeric(x, alpha, beta, chart)
}

/// `(r cos ᾱ − t, r + t_ᾱ sin ᾱ − t cos ᾱ, r² t³ sin⁷ ᾱ)`.
pub fn h_factors(x: &Vec3, alpha: f64, beta: f64, chart: &SphereChart) -> Result<(f64, f64, f64)> {
    let s = chart.source();
    let xs = x - s;
    let r = xs.norm();
    if r == 0.0 {
        return Err(Error::CoincidentPoints("x = s"));
    }
    let xh = xs / r;
    let u = chart.direction(alpha, beta);
    let kappa = u.dot(&xh).clamp(-1.0, 1.0);
    if kappa.abs() >= 1.0 - super::LINE_TOLERANCE {
        return Err(Error::DegenerateLine { kappa });
    }
    let sab = (1.0 - kappa * kappa).sqrt();
    let e_ab = (u * kappa - xh) / sab;
    let t = chart.t(alpha);
    let t_ab = -chart.dt_over_sin(alpha) * chart.axis.dot(&e_ab);
    let f1 = r * kappa - t;
    let f2 = r + t_ab * sab - t * kappa;
    let s2 = sab * sab;
    Ok((f1, f2, r * r * t * t * t * s2 * s2 * s2 * sab))
}

/// Chart sampling of [`immersion_report`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImmersionSettings {
    /// Samples of `α ∈ [0, α_max]`, endpoints included.
    pub n_alpha: usize,
    pub n_beta: usize,
    /// Only every `h_stride`-th voxel per axis enters the `min |h|` search.
    pub h_stride: usize,
}

impl Default for ImmersionSettings {
    fn default() -> Self {
        ImmersionSettings {
            n_alpha: 48,
            n_beta: 48,
            h_stride: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ImmersionReport {
    pub admissible: bool,
    /// Minimum of `|h|/sin α` over the sampled support and chart; `+∞` for an
    /// empty support.
    pub min_abs_h: f64,
    /// Linear indices of support voxels where `(d − s)·(d − x)` changes sign.
    pub violating: Vec<usize>,
    /// Number of sampled support voxels where the detector factor
    /// `r + t_ᾱ sin ᾱ − t cos ᾱ` changes sign over the chart.
    pub detector_condition_crossings: usize,
    pub support_voxels: usize,
}

/// Immersion check of the chart over the voxels of `support` with positive value.
pub fn immersion_report(geometry: &ScanGeometry, support: &VoxelGrid, settings: &ImmersionSettings) -> ImmersionReport {
    let chart = &geometry.chart;
    let s = chart.source();
    let na = settings.n_alpha.max(2);
    let nb = settings.n_beta.max(1);
    let samples: Vec<(f64, f64, Vec3, f64)> = (0..na)
        .flat_map(|i| {
            let a = geometry.alpha_max * i as f64 / (na - 1) as f64;
            (0..nb).map(move |j| (a, TAU * j as f64 / nb as f64))
        })
        .map(|(a, b)| (a, b, chart.direction(a, b), chart.t(a)))
        .collect();

    let stride = settings.h_stride.max(1);
    let [nx, ny, _] = support.dims();
    let idx: Vec<usize> = (0..support.len()).filter(|&i| support.data()[i] > 0.0).collect();
    let per_voxel = crate::par::map_indexed(idx.len(), |k| {
        let i = idx[k];
        let x = support.center_of_index(i);
        let xs = x - s;
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for (_, _, u, t) in &samples {
            // sign of (d − s)·(d − x) = t (t − u·(x − s))
            let f = t - u.dot(&xs);
            lo = lo.min(f);
            hi = hi.max(f);
        }
        let violating = lo <= 0.0 && hi >= 0.0;
        let (ix, iy, iz) = (i % nx, (i / nx) % ny, i / (nx * ny));
        let mut min_h = f64::INFINITY;
        let mut crossing = None;
        if ix % stride == 0 && iy % stride == 0 && iz % stride == 0 {
            let (mut plo, mut phi_) = (f64::INFINITY, f64::NEG_INFINITY);
            for &(a, b, _, _) in &samples {
                if let Ok((f1, f2, den)) = h_factors(&x, a, b, chart) {
                    min_h = min_h.min((f1 * f2 / den).abs());
                    plo = plo.min(f2);
                    phi_ = phi_.max(f2);
                }
            }
            crossing = Some(plo < 0.0 && phi_ > 0.0);
        }
        (i, violating, min_h, crossing)
    });

    let violating: Vec<usize> = per_voxel.iter().filter(|v| v.1).map(|v| v.0).collect();
    ImmersionReport {
        admissible: violating.is_empty(),
        min_abs_h: per_voxel.iter().map(|v| v.2).fold(f64::INFINITY, f64::min),
        detector_condition_crossings: per_voxel.iter().filter(|v| v.3 == Some(true)).count(),
        violating,
        support_voxels: idx.len(),
    }
}

/// Angle `ᾱ = acos κ` between `x − s` and `d − s`.
pub fn alpha_bar(x: &Vec3, d: &Vec3, s: &Vec3) -> Result<f64> {
    Ok(kappa_rho(x, d, s)?.0.acos())
}
