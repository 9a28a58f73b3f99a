//! Compton kinematics, Klein–Nishina and the Stonestrom attenuation model.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::volume::VoxelGrid;

/// Electron rest energy in keV.
pub const MC2: f64 = 511.0;
/// Classical electron radius in cm.
pub const R_E: f64 = 2.8179403262e-13;
/// Electron density of water in electrons/cm³.
pub const N_W: f64 = 3.23e23;
/// Photoelectric factor of water in keV³/cm, scaled by relative density.
pub const LAMBDA_PE_WATER: f64 = 900.0;
/// Quadrature intervals of the cross-section integral.
pub const SIGMA_NODES: usize = 1024;

/// `E = E₀/(1 + (E₀/mc²)(1 − cos ω))`.
#[inline]
pub fn compton_energy(e0: f64, omega: f64) -> f64 {
    e0 / (1.0 + e0 / MC2 * (1.0 - omega.cos()))
}

/// Same as [`compton_energy`] from `cos ω`.
#[inline]
pub fn compton_energy_cos(e0: f64, cos_omega: f64) -> f64 {
    e0 / (1.0 + e0 / MC2 * (1.0 - cos_omega))
}

/// Lowest energy reachable by a single scatter, `E₀/(1 + 2E₀/mc²)`.
#[inline]
pub fn backscatter_floor(e0: f64) -> f64 {
    e0 / (1.0 + 2.0 * e0 / MC2)
}

/// `cos ω = 1 − mc²(1/E − 1/E₀)` without range checks.
#[inline]
pub fn compton_cos(e0: f64, e: f64) -> f64 {
    1.0 - MC2 * (1.0 / e - 1.0 / e0)
}

/// Scattering angle that takes `e0` to `e`.
pub fn compton_angle(e0: f64, e: f64) -> Result<f64> {
    let lo = backscatter_floor(e0);
    // tolerate rounding at the floor so the round trip holds there too
    if !(e >= lo * (1.0 - 1e-14) && e <= e0 * (1.0 + 1e-14)) {
        return Err(Error::EnergyOutOfBand { energy: e, lo, hi: e0 });
    }
    Ok(compton_cos(e0, e).clamp(-1.0, 1.0).acos())
}

/// `λ = 2 − mc²(1/E − 1/E₀)` without range checks; equals `cos ω₁ + cos ω₂`
/// for a photon detected at `E` after two scatters.
#[inline]
pub fn lambda_raw(e: f64, e0: f64) -> f64 {
    2.0 - MC2 * (1.0 / e - 1.0 / e0)
}

/// `λ(E)` restricted to the open interval `(0, 2)`.
pub fn lambda_of_energy(e: f64, e0: f64) -> Result<f64> {
    let l = lambda_raw(e, e0);
    if l > 1e-12 && l < 2.0 - 1e-12 {
        Ok(l)
    } else {
        Err(Error::OutOfRange {
            name: "lambda",
            value: l,
            range: "(0, 2)",
        })
    }
}

/// Energy at which `λ(E) = lambda`.
pub fn energy_of_lambda(lambda: f64, e0: f64) -> f64 {
    1.0 / ((2.0 - lambda) / MC2 + 1.0 / e0)
}

/// Klein–Nishina angular factor `P = ½ (E'/E)² (E'/E + E/E' − sin² ω)`, so that
/// `dσ/dΩ = r_e² P`.
#[inline]
pub fn klein_nishina(e: f64, omega: f64) -> f64 {
    klein_nishina_cos(e, omega.cos())
}

#[inline]
pub fn klein_nishina_cos(e: f64, c: f64) -> f64 {
    let k = 1.0 / (1.0 + e / MC2 * (1.0 - c));
    0.5 * k * k * (k + 1.0 / k - (1.0 - c * c))
}

/// Total Compton cross-section per electron (cm²) by composite Simpson
/// quadrature of `2π r_e² ∫ P d(cos ω)` over [`SIGMA_NODES`] intervals.
pub fn sigma_total(e: f64) -> f64 {
    let n = SIGMA_NODES;
    let h = 2.0 / n as f64;
    let mut acc = klein_nishina_cos(e, -1.0) + klein_nishina_cos(e, 1.0);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * klein_nishina_cos(e, -1.0 + i as f64 * h);
    }
    2.0 * PI * R_E * R_E * acc * h / 3.0
}

/// `σ(E)` tabulated on a uniform energy grid with linear interpolation.
#[derive(Clone, Debug)]
pub struct SigmaTable {
    e_min: f64,
    step: f64,
    values: Vec<f64>,
}

impl SigmaTable {
    pub fn new(e_min: f64, e_max: f64, n: usize) -> Self {
        let n = n.max(2);
        let step = (e_max - e_min) / (n - 1) as f64;
        let values = (0..n).map(|i| sigma_total(e_min + i as f64 * step)).collect();
        SigmaTable { e_min, step, values }
    }

    /// Table covering every energy reachable from `e0` after any number of
    /// scatters down to `e_min`.
    pub fn for_source(e0: f64) -> Self {
        Self::new(1.0, e0 * 1.001, 4096)
    }

    pub fn eval(&self, e: f64) -> f64 {
        let u = (e - self.e_min) / self.step;
        if u <= 0.0 {
            return self.values[0];
        }
        let i = u.floor() as usize;
        if i + 1 >= self.values.len() {
            return *self.values.last().unwrap();
        }
        let f = u - i as f64;
        self.values[i] * (1.0 - f) + self.values[i + 1] * f
    }
}

/// `μ_E = E⁻³ λ_PE + σ(E) n_e` in cm⁻¹.
pub fn stonestrom_mu(e: f64, lambda_pe: f64, ne: f64) -> f64 {
    stonestrom_mu_with_sigma(e, lambda_pe, ne, sigma_total(e))
}

#[inline]
pub fn stonestrom_mu_with_sigma(e: f64, lambda_pe: f64, ne: f64, sigma: f64) -> f64 {
    lambda_pe / (e * e * e) + sigma * ne
}

/// Electron density and photoelectric factor on one lattice.
#[derive(Clone, Debug)]
pub struct AttenuationModel {
    pub ne: VoxelGrid,
    pub lambda_pe: VoxelGrid,
    pub sigma: SigmaTable,
}

/// Line integrals `(∫ n_e, ∫ λ_PE)` along a path; the attenuation exponent at
/// energy `E` is `σ(E)·ne + E⁻³·lpe`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PathIntegrals {
    pub ne: f64,
    pub lpe: f64,
}

impl PathIntegrals {
    #[inline]
    pub fn exponent(&self, e: f64, sigma: f64) -> f64 {
        sigma * self.ne + self.lpe / (e * e * e)
    }

    #[inline]
    pub fn lerp(&self, other: &PathIntegrals, f: f64) -> PathIntegrals {
        PathIntegrals {
            ne: self.ne + (other.ne - self.ne) * f,
            lpe: self.lpe + (other.lpe - self.lpe) * f,
        }
    }
}

impl std::ops::Add for PathIntegrals {
    type Output = PathIntegrals;
    fn add(self, o: PathIntegrals) -> PathIntegrals {
        PathIntegrals {
            ne: self.ne + o.ne,
            lpe: self.lpe + o.lpe,
        }
    }
}

impl AttenuationModel {
    pub fn new(ne: VoxelGrid, lambda_pe: VoxelGrid, e0: f64) -> Result<Self> {
        ne.check_same_lattice(&lambda_pe)?;
        if ne.data().iter().chain(lambda_pe.data()).any(|&v| v < 0.0) {
            return Err(Error::Config("negative density or photoelectric factor".into()));
        }
        Ok(AttenuationModel {
            ne,
            lambda_pe,
            sigma: SigmaTable::for_source(e0),
        })
    }

    /// Water-like photoelectric factor `LAMBDA_PE_WATER · n_e/n_w`.
    pub fn water_like(ne: VoxelGrid, e0: f64) -> Result<Self> {
        let lpe = ne.map(|v| LAMBDA_PE_WATER * v / N_W);
        Self::new(ne, lpe, e0)
    }

    /// Attenuation-free model on the lattice of `ne`.
    pub fn vacuum_like(ne: &VoxelGrid, e0: f64) -> Self {
        let z = ne.zeros_like();
        Self::new(z.clone(), z, e0).expect("zero grids share a lattice")
    }

    pub fn mu(&self, e: f64, voxel: usize) -> f64 {
        stonestrom_mu_with_sigma(e, self.lambda_pe.data()[voxel], self.ne.data()[voxel], self.sigma.eval(e))
    }

    /// Attenuation coefficients at energy `e` on the lattice.
    pub fn mu_grid(&self, e: f64) -> VoxelGrid {
        let sigma = self.sigma.eval(e);
        let data = (0..self.ne.len())
            .map(|i| stonestrom_mu_with_sigma(e, self.lambda_pe.data()[i], self.ne.data()[i], sigma))
            .collect();
        self.ne.with_data(data).expect("same lattice")
    }

    /// Exact voxel-traversal line integrals along `m → n`.
    pub fn path_integrals(&self, m: &Vec3, n: &Vec3) -> PathIntegrals {
        let len = (n - m).norm();
        let mut acc = PathIntegrals::default();
        let (ne, lpe) = (self.ne.data(), self.lambda_pe.data());
        self.ne.traverse(m, n, |i, a, b| {
            acc.ne += ne[i] * (b - a);
            acc.lpe += lpe[i] * (b - a);
        });
        acc.ne *= len;
        acc.lpe *= len;
        acc
    }

    /// `exp(−∫ μ_E)` along `m → n`.
    pub fn transmission(&self, m: &Vec3, n: &Vec3, e: f64) -> f64 {
        (-self.path_integrals(m, n).exponent(e, self.sigma.eval(e))).exp()
    }

    /// `A_E(m, n) = ‖n − m‖⁻² exp(−∫ μ_E)`.
    pub fn attenuation_factor(&self, m: &Vec3, n: &Vec3, e: f64) -> Result<f64> {
        let d2 = (n - m).norm_squared();
        if d2 == 0.0 {
            return Err(Error::CoincidentPoints("attenuation endpoints"));
        }
        Ok(self.transmission(m, n, e) / d2)
    }
}

/// `A(m, n) = ‖n − m‖⁻² exp(−∫ μ)` for a precomputed `μ` grid.
pub fn attenuation_factor(m: &Vec3, n: &Vec3, mu: &VoxelGrid) -> Result<f64> {
    let d2 = (n - m).norm_squared();
    if d2 == 0.0 {
        return Err(Error::CoincidentPoints("attenuation endpoints"));
    }
    Ok((-mu.line_integral(m, n)).exp() / d2)
}

/// `p = cot ω`.
#[inline]
pub fn p_of_omega(omega: f64) -> f64 {
    omega.cos() / omega.sin()
}

/// Inverse of [`p_of_omega`] onto `(0, π)`.
#[inline]
pub fn omega_of_p(p: f64) -> f64 {
    crate::geometry::arccot(p)
}

/// `τ = ‖d − s‖ tan(ω/2)`.
#[inline]
pub fn tau_of_omega(omega: f64, dist_sd: f64) -> f64 {
    dist_sd * (omega / 2.0).tan()
}

#[inline]
pub fn omega_of_tau(tau: f64, dist_sd: f64) -> f64 {
    2.0 * (tau / dist_sd).atan()
}

/// `p` of a first-order photon detected at energy `e`; `±∞` outside the band.
pub fn p_of_energy(e0: f64, e: f64) -> f64 {
    let c = compton_cos(e0, e);
    if c >= 1.0 {
        f64::INFINITY
    } else if c <= -1.0 {
        f64::NEG_INFINITY
    } else {
        c / (1.0 - c * c).sqrt()
    }
}

/// Energy of a first-order photon with torus parameter `p`.
pub fn energy_of_p(e0: f64, p: f64) -> f64 {
    compton_energy_cos(e0, p / (1.0 + p * p).sqrt())
}
