//! Sphere phantoms, mollification and reconstruction priors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::physics::N_W;
use crate::volume::VoxelGrid;

/// Density multipliers (× `n_w`) used by the reference phantoms.
pub const DENSITY_LEVELS: [f64; 5] = [0.0, 1.0, 1.5, 2.0, 3.0];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sphere {
    pub center: [f64; 3],
    pub radius: f64,
    /// Density in units of `n_w`.
    pub multiplier: f64,
}

/// Union of spheres over a constant background; later spheres overwrite
/// earlier ones where they overlap.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SpherePhantomSpec {
    pub spheres: Vec<Sphere>,
    #[serde(default)]
    pub background: f64,
}

/// Lattice on which a phantom is rasterised.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub dims: [usize; 3],
    pub voxel_size_cm: f64,
    /// Outer corner of the first voxel.
    pub origin_cm: [f64; 3],
}

impl GridSpec {
    /// `n³` voxels filling the cube of side `side` centred at the origin.
    pub fn centered_cube(n: usize, side: f64) -> Self {
        GridSpec {
            dims: [n, n, n],
            voxel_size_cm: side / n as f64,
            origin_cm: [-side / 2.0; 3],
        }
    }

    pub fn empty_grid(&self) -> VoxelGrid {
        VoxelGrid::filled(self.dims, self.voxel_size_cm, Vec3::from(self.origin_cm), 0.0)
    }
}

impl SpherePhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.background < 0.0 {
            return Err(Error::Config("negative background density".into()));
        }
        for s in &self.spheres {
            if !(s.radius > 0.0) || s.multiplier < 0.0 {
                return Err(Error::Config(format!("invalid sphere {s:?}")));
            }
        }
        Ok(())
    }

    /// Two small spheres at `n_w` and `2 n_w`.
    pub fn two_point(a: Vec3, b: Vec3, radius: f64) -> Self {
        SpherePhantomSpec {
            spheres: vec![
                Sphere { center: a.into(), radius, multiplier: 1.0 },
                Sphere { center: b.into(), radius, multiplier: 2.0 },
            ],
            background: 0.0,
        }
    }

    /// Nested sphere phantom using every density level, fitting in a cube of
    /// half side `half`.
    pub fn nested_levels(half: f64) -> Self {
        let r = half;
        let sphere = |c: [f64; 3], radius: f64, multiplier: f64| Sphere { center: c, radius, multiplier };
        SpherePhantomSpec {
            spheres: vec![
                sphere([0.0, 0.0, 0.0], 0.8 * r, 1.0),
                sphere([-0.35 * r, -0.2 * r, 0.0], 0.3 * r, 2.0),
                sphere([0.35 * r, 0.1 * r, 0.1 * r], 0.25 * r, 0.0),
                sphere([0.0, 0.4 * r, -0.3 * r], 0.2 * r, 3.0),
                sphere([0.1 * r, -0.45 * r, 0.35 * r], 0.18 * r, 1.5),
            ],
            background: 0.0,
        }
    }
}

/// Electron density `multiplier · n_w` by voxel-centre membership.
pub fn rasterize_phantom(spec: &SpherePhantomSpec, grid: &GridSpec) -> Result<VoxelGrid> {
    spec.validate()?;
    let mut out = grid.empty_grid();
    for i in 0..out.len() {
        let c = out.center_of_index(i);
        let mut v = spec.background;
        for s in &spec.spheres {
            if (c - Vec3::from(s.center)).norm_squared() <= s.radius * s.radius {
                v = s.multiplier;
            }
        }
        out.data_mut()[i] = v * N_W;
    }
    Ok(out)
}

/// Bin-integrated Gaussian weights `Φ((k+½)h/γ) − Φ((k−½)h/γ)` for
/// `|k|h ≤ 4γ`, normalised to unit sum.
pub fn gaussian_kernel(gamma: f64, voxel: f64) -> Vec<f64> {
    let half = ((4.0 * gamma / voxel).floor() as usize).max(0);
    let cdf = |x: f64| 0.5 * (1.0 + libm::erf(x / (gamma * std::f64::consts::SQRT_2)));
    let mut w: Vec<f64> = (-(half as isize)..=half as isize)
        .map(|k| cdf((k as f64 + 0.5) * voxel) - cdf((k as f64 - 0.5) * voxel))
        .collect();
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Separable Gaussian convolution with standard deviation `gamma` (cm).
///
/// Near the faces the truncated kernel is renormalised over the in-grid
/// taps, so constants are reproduced exactly; mass is conserved for fields
/// supported at least `4γ` inside the box.
pub fn mollify(grid: &VoxelGrid, gamma: f64) -> Result<VoxelGrid> {
    if !(gamma > 0.0) {
        return Err(Error::OutOfRange {
            name: "gamma",
            value: gamma,
            range: "(0, inf)",
        });
    }
    let w = gaussian_kernel(gamma, grid.voxel_size());
    let half = (w.len() / 2) as isize;
    let dims = grid.dims();
    let mut cur = grid.data().to_vec();
    let mut next = vec![0.0; cur.len()];
    let strides = [1, dims[0], dims[0] * dims[1]];
    for axis in 0..3 {
        let n = dims[axis] as isize;
        let st = strides[axis];
        for i in 0..cur.len() {
            let pos = ((i / st) % dims[axis]) as isize;
            let base = i - pos as usize * st;
            let (mut acc, mut norm) = (0.0, 0.0);
            for (k, &wk) in w.iter().enumerate() {
                let q = pos + k as isize - half;
                if q >= 0 && q < n {
                    acc += wk * cur[base + q as usize * st];
                    norm += wk;
                }
            }
            next[i] = if norm > 0.0 { acc / norm } else { 0.0 };
        }
        std::mem::swap(&mut cur, &mut next);
    }
    grid.with_data(cur)
}

/// Construction of the prior density used inside reconstruction weights.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    /// Mollifier width of the prior (cm).
    pub gamma: f64,
    /// Relative density error applied uniformly, `prior = (1 + perturbation)·…`.
    #[serde(default)]
    pub perturbation: f64,
}

/// Degraded approximation of `n_e` built from the piecewise-constant `f`.
pub fn build_prior(f: &VoxelGrid, spec: &PriorSpec) -> Result<VoxelGrid> {
    let smooth = mollify(f, spec.gamma)?;
    Ok(smooth.map(|v| (v * (1.0 + spec.perturbation)).max(0.0)))
}
