//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Each export is a thin wrapper over a plain function so the same code is
//! unit-tested natively.

use csi_core::forward::{forward_first_order, FirstOrderSettings};
use csi_core::geometry::{immersion_report, DetectorLayout, ImmersionSettings, ScanGeometry};
use csi_core::phantom::{rasterize_phantom, GridSpec, SpherePhantomSpec};
use csi_core::physics::{compton_energy, AttenuationModel};
use csi_core::{EnergyGrid, Vec3, VoxelGrid};
use wasm_bindgen::prelude::*;

/// Side of the demo object cube (cm).
const SIDE: f64 = 10.0;
/// Energy bin width of the PSF demo (keV).
const PSF_DELTA: f64 = 4.0;

fn arc_geometry(source_z: f64, alpha_max: f64, count: usize) -> csi_core::Result<ScanGeometry> {
    ScanGeometry::new(
        Vec3::new(0.0, 0.0, source_z),
        Vec3::zeros(),
        20.0,
        alpha_max,
        DetectorLayout::Arc { count, beta0: 0.0 },
        0.2,
    )
}

/// Energy (keV) after one deflection by `omega_deg` degrees.
#[wasm_bindgen]
pub fn scattered_energy(e0: f64, omega_deg: f64) -> f64 {
    compton_energy(e0, omega_deg.to_radians())
}

/// Admissibility of the `y = 0` slice of the object cube, row-major in
/// `(z, x)`: 1 where every detector of the cap satisfies the support
/// condition, 2 where some detector violates it, 0 when the slice cannot be
/// evaluated (source or detector inside the cube).
pub fn admissibility_map(source_z: f64, alpha_max_deg: f64, n: usize) -> Vec<u8> {
    let n = n.clamp(2, 128);
    let Ok(geo) = ScanGeometry::new(
        Vec3::new(0.0, 0.0, source_z),
        Vec3::zeros(),
        20.0,
        alpha_max_deg.to_radians().clamp(1e-3, std::f64::consts::PI),
        DetectorLayout::Grid { n_alpha: 8, n_beta: 8 },
        0.2,
    ) else {
        return vec![0; n * n];
    };
    let h = SIDE / n as f64;
    let support = VoxelGrid::filled([n, 1, n], h, Vec3::new(-SIDE / 2.0, -h / 2.0, -SIDE / 2.0), 1.0);
    let (lo, hi) = support.bounds();
    if geo.check_outside(&lo, &hi).is_err() {
        return vec![0; n * n];
    }
    let settings = ImmersionSettings { n_alpha: 48, n_beta: 48, h_stride: usize::MAX };
    let report = immersion_report(&geo, &support, &settings);
    let mut out = vec![1u8; n * n];
    for &i in &report.violating {
        out[i] = 2;
    }
    out
}

#[wasm_bindgen]
pub fn admissibility(source_z: f64, alpha_max_deg: f64, n: usize) -> Vec<u8> {
    admissibility_map(source_z, alpha_max_deg, n)
}

/// Number of energy bins of [`psf`] rows.
#[wasm_bindgen]
pub fn psf_bins() -> usize {
    EnergyGrid::covering(662.0, PSF_DELTA, 2.0).map(|g| g.n_bins).unwrap_or(0)
}

/// First-order spectra of two small water spheres (densities 1 and 2) on an
/// arc of `detectors`, detector-major, each row scaled to its maximum.
pub fn point_spread(a: [f64; 3], b: [f64; 3], detectors: usize) -> csi_core::Result<Vec<f64>> {
    let grid = GridSpec::centered_cube(20, SIDE);
    let spec = SpherePhantomSpec::two_point(Vec3::from(a), Vec3::from(b), 0.6);
    let f = rasterize_phantom(&spec, &grid)?;
    let model = AttenuationModel::water_like(f.clone(), 662.0)?;
    let geo = arc_geometry(-18.0, std::f64::consts::FRAC_PI_2, detectors.clamp(2, 128))?;
    let energy = EnergyGrid::covering(662.0, PSF_DELTA, 2.0)?;
    let settings = FirstOrderSettings { n_theta: 64, n_phi: 64, ..Default::default() };
    let s = forward_first_order(&f, &model, &geo, &energy, &settings)?;
    let nb = energy.n_bins;
    let mut out = s.g1;
    for row in out.chunks_mut(nb) {
        let m = row.iter().cloned().fold(0.0, f64::max);
        if m > 0.0 {
            row.iter_mut().for_each(|v| *v /= m);
        }
    }
    Ok(out)
}

#[wasm_bindgen]
pub fn psf(ax: f64, ay: f64, az: f64, bx: f64, by: f64, bz: f64, detectors: usize) -> Result<Vec<f64>, JsError> {
    point_spread([ax, ay, az], [bx, by, bz], detectors).map_err(|e| JsError::new(&e.to_string()))
}
