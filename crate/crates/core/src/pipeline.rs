//! Run configuration and the batch commands behind the CLI.
//!
//! Every command rebuilds what it needs from the configuration, writes its
//! artifacts under `out_dir` and tags them with the configuration hash. No
//! timestamps are written, so identical configurations give identical files.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::forward::{forward_first_order, forward_primary, forward_second_order, FirstOrderSettings, SecondOrderSettings};
use crate::geometry::{immersion_report, DetectorLayout, ImmersionReport, ImmersionSettings, ScanGeometry, Vec3};
use crate::io::{
    read_json, read_spectrum, read_volume, slice, write_csv_matrix, write_json, write_pgm, write_spectrum_csv,
    write_spectrum_tagged, write_volume_tagged, SliceAxis, SpectrumHeader,
};
use crate::montecarlo::{run_simulation, McSettings};
use crate::phantom::{build_prior, mollify, rasterize_phantom, GridSpec, PriorSpec, SpherePhantomSpec};
use crate::physics::AttenuationModel;
use crate::recon::{contours, reconstruct, ReconSettings};
use crate::spectrum::{Channel, ChannelSelection, EnergyGrid, Spectrum};
use crate::volume::VoxelGrid;

fn default_radius() -> f64 {
    20.0
}
fn default_alpha_max() -> f64 {
    std::f64::consts::FRAC_PI_2
}
fn default_disk() -> f64 {
    0.2
}
fn default_intensity() -> f64 {
    1.0
}
fn default_out() -> PathBuf {
    PathBuf::from("out")
}
fn default_channels() -> ChannelSelection {
    ChannelSelection::G1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometryConfig {
    pub source_cm: [f64; 3],
    #[serde(default)]
    pub center_cm: [f64; 3],
    #[serde(default = "default_radius")]
    pub radius_cm: f64,
    #[serde(default = "default_alpha_max")]
    pub alpha_max_rad: f64,
    pub layout: DetectorLayout,
    #[serde(default = "default_disk")]
    pub disk_radius_cm: f64,
}

impl GeometryConfig {
    pub fn build(&self) -> Result<ScanGeometry> {
        ScanGeometry::new(
            Vec3::from(self.source_cm),
            Vec3::from(self.center_cm),
            self.radius_cm,
            self.alpha_max_rad,
            self.layout,
            self.disk_radius_cm,
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnergyConfig {
    pub e0_kev: f64,
    pub delta_e_kev: f64,
    /// Extra range below the back-scatter floor.
    pub margin_kev: f64,
}

impl Default for EnergyConfig {
    fn default() -> Self {
        EnergyConfig {
            e0_kev: 662.0,
            delta_e_kev: 0.25,
            margin_kev: 2.0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReconInput {
    #[default]
    Analytic,
    Mc,
}

/// Everything a run needs. Unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub phantom: SpherePhantomSpec,
    pub grid: GridSpec,
    /// Gaussian width (cm) applied to the rasterised phantom.
    #[serde(default)]
    pub mollify_cm: Option<f64>,
    pub geometry: GeometryConfig,
    #[serde(default)]
    pub energy: EnergyConfig,
    /// Emitted photons `I₀`.
    #[serde(default = "default_intensity")]
    pub intensity: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_channels")]
    pub channels: ChannelSelection,
    #[serde(default)]
    pub first_order: FirstOrderSettings,
    #[serde(default)]
    pub second_order: SecondOrderSettings,
    #[serde(default)]
    pub monte_carlo: McSettings,
    /// Relative Poisson noise added to projected spectra.
    #[serde(default)]
    pub noise: Option<f64>,
    /// Prior for reconstruction weights; the phantom itself when absent.
    #[serde(default)]
    pub prior: Option<PriorSpec>,
    #[serde(default)]
    pub recon: ReconSettings,
    #[serde(default)]
    pub recon_input: ReconInput,
    #[serde(default)]
    pub immersion: ImmersionSettings,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
}

impl RunConfig {
    /// Source 2 cm inside the sphere below the pole, nested-sphere phantom
    /// on 64³ voxels, detector grid over the upper hemisphere.
    pub fn reference() -> Self {
        RunConfig {
            phantom: SpherePhantomSpec::nested_levels(4.0),
            grid: GridSpec::centered_cube(64, 10.0),
            mollify_cm: None,
            geometry: GeometryConfig {
                source_cm: [0.0, 0.0, -18.0],
                center_cm: [0.0; 3],
                radius_cm: 20.0,
                alpha_max_rad: default_alpha_max(),
                layout: DetectorLayout::Grid { n_alpha: 12, n_beta: 24 },
                disk_radius_cm: 0.2,
            },
            energy: EnergyConfig::default(),
            intensity: 1.0,
            seed: 0,
            channels: ChannelSelection::G1,
            first_order: FirstOrderSettings::default(),
            second_order: SecondOrderSettings::coarse(),
            monte_carlo: McSettings::default(),
            noise: None,
            prior: Some(PriorSpec { gamma: 0.3, perturbation: 0.0 }),
            recon: ReconSettings::default(),
            recon_input: ReconInput::Analytic,
            immersion: ImmersionSettings::default(),
            out_dir: default_out(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg: RunConfig = read_json(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.phantom.validate()?;
        let g = &self.grid;
        if g.dims.contains(&0) || !(g.voxel_size_cm > 0.0) {
            return Err(Error::Config(format!("bad grid {g:?}")));
        }
        if !(self.intensity >= 0.0) {
            return Err(Error::Config("intensity must be non-negative".into()));
        }
        if let Some(n) = self.noise {
            if !(n > 0.0) {
                return Err(Error::Config("noise level must be positive".into()));
            }
        }
        if let Some(m) = self.mollify_cm {
            if !(m > 0.0) {
                return Err(Error::Config("mollify_cm must be positive".into()));
            }
        }
        self.energy_grid()?;
        self.geometry.build()?;
        Ok(())
    }

    /// SHA-256 of the configuration with the output directory blanked.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        let bytes = serde_json::to_vec(&c).expect("config serialises");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn energy_grid(&self) -> Result<EnergyGrid> {
        EnergyGrid::covering(self.energy.e0_kev, self.energy.delta_e_kev, self.energy.margin_kev)
    }

    pub fn phantom_volume(&self) -> Result<VoxelGrid> {
        let f = rasterize_phantom(&self.phantom, &self.grid)?;
        match self.mollify_cm {
            Some(g) => mollify(&f, g),
            None => Ok(f),
        }
    }

    pub fn prior_volume(&self, phantom: &VoxelGrid) -> Result<VoxelGrid> {
        match &self.prior {
            Some(p) => build_prior(phantom, p),
            None => Ok(phantom.clone()),
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }
}

/// Files written by a command and a JSON summary for the console.
#[derive(Clone, Debug, Serialize)]
pub struct Outcome {
    pub command: &'static str,
    pub config_hash: String,
    pub files: Vec<PathBuf>,
    pub summary: serde_json::Value,
}

fn prepare_out(cfg: &RunConfig) -> Result<String> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.out_dir)?;
    Ok(cfg.hash())
}

pub const PHANTOM_FILE: &str = "phantom.f32";
pub const PRIOR_FILE: &str = "prior.f32";
pub const ANALYTIC_FILE: &str = "analytic.spec";
pub const MC_FILE: &str = "mc.spec";
pub const RECON_FILE: &str = "recon.f32";
pub const CONTOUR_FILE: &str = "contours.f32";
pub const ADMISSIBILITY_FILE: &str = "admissibility.json";

/// Electron density of the phantom and of the reconstruction prior.
pub fn cmd_phantom(cfg: &RunConfig) -> Result<Outcome> {
    let hash = prepare_out(cfg)?;
    let f = cfg.phantom_volume()?;
    let prior = cfg.prior_volume(&f)?;
    let (pf, pp) = (cfg.path(PHANTOM_FILE), cfg.path(PRIOR_FILE));
    write_volume_tagged(&pf, &f, "electrons/cm^3", Some(&hash))?;
    write_volume_tagged(&pp, &prior, "electrons/cm^3", Some(&hash))?;
    Ok(Outcome {
        command: "phantom",
        config_hash: hash,
        files: vec![pf, pp],
        summary: serde_json::json!({ "dims": f.dims(), "voxel_size_cm": f.voxel_size(), "integral": f.integral() }),
    })
}

/// Analytic spectrum: primaries, `g1`, and `g2` when the channel selection
/// asks for it; optional relative Poisson noise.
pub fn project(cfg: &RunConfig) -> Result<Spectrum> {
    let f = cfg.phantom_volume()?;
    let geometry = cfg.geometry.build()?;
    let grid = cfg.energy_grid()?;
    let model = AttenuationModel::water_like(f.clone(), grid.e0)?;
    let first = FirstOrderSettings { intensity: cfg.intensity, ..cfg.first_order };
    let mut spec = forward_first_order(&f, &model, &geometry, &grid, &first)?;
    if cfg.channels != ChannelSelection::G1 {
        let second = SecondOrderSettings { intensity: cfg.intensity, ..cfg.second_order };
        spec.g2 = forward_second_order(&f, &model, &geometry, &grid, &second)?.g2;
    }
    spec.g0 = forward_primary(&model, &geometry, &grid, cfg.intensity);
    match cfg.noise {
        Some(level) => spec.with_relative_noise(level, cfg.seed),
        None => Ok(spec),
    }
}

pub fn cmd_project(cfg: &RunConfig) -> Result<Outcome> {
    let hash = prepare_out(cfg)?;
    let spec = project(cfg)?;
    let path = cfg.path(ANALYTIC_FILE);
    write_spectrum_tagged(&path, &spec, Some(&hash))?;
    Ok(Outcome {
        command: "project",
        config_hash: hash,
        files: vec![path],
        summary: spectrum_summary(&spec),
    })
}

fn spectrum_summary(spec: &Spectrum) -> serde_json::Value {
    let sum = |c: Channel| spec.channel(c).iter().sum::<f64>();
    serde_json::json!({
        "n_detectors": spec.n_detectors,
        "n_bins": spec.n_bins(),
        "g0": sum(Channel::G0),
        "g1": sum(Channel::G1),
        "g2": sum(Channel::G2),
        "rest": sum(Channel::Rest),
    })
}

pub fn simulate(cfg: &RunConfig) -> Result<Spectrum> {
    let f = cfg.phantom_volume()?;
    let geometry = cfg.geometry.build()?;
    let grid = cfg.energy_grid()?;
    let model = AttenuationModel::water_like(f, grid.e0)?;
    let settings = McSettings { seed: cfg.seed, intensity: cfg.intensity, ..cfg.monte_carlo };
    Ok(run_simulation(&model, &geometry, &grid, &settings)?.spectrum)
}

pub fn cmd_mc(cfg: &RunConfig) -> Result<Outcome> {
    let hash = prepare_out(cfg)?;
    let spec = simulate(cfg)?;
    let path = cfg.path(MC_FILE);
    write_spectrum_tagged(&path, &spec, Some(&hash))?;
    Ok(Outcome {
        command: "mc",
        config_hash: hash,
        files: vec![path],
        summary: spectrum_summary(&spec),
    })
}

/// Reconstruction from the spectrum file named by `recon_input`, followed by
/// its contour map.
pub fn cmd_recon(cfg: &RunConfig) -> Result<Outcome> {
    let hash = prepare_out(cfg)?;
    let input = cfg.path(match cfg.recon_input {
        ReconInput::Analytic => ANALYTIC_FILE,
        ReconInput::Mc => MC_FILE,
    });
    if !input.exists() {
        return Err(Error::Config(format!("missing input spectrum {}", input.display())));
    }
    let spec = read_spectrum(&input)?;
    let geometry = cfg.geometry.build()?;
    if spec.geometry_hash != geometry.hash() {
        return Err(Error::GridMismatch(format!("{} was produced for another geometry", input.display())));
    }
    let prior = cfg.prior_volume(&cfg.phantom_volume()?)?;
    let settings = ReconSettings { channels: cfg.channels, ..cfg.recon };
    let rec = reconstruct(&spec, &geometry, &prior, &settings)?;
    let path = cfg.path(RECON_FILE);
    write_volume_tagged(&path, &rec.volume, "arbitrary", Some(&hash))?;
    let report = cfg.path("recon_report.json");
    write_json(&report, &rec.report)?;
    let mut files = vec![path, report];
    files.extend(write_contours(cfg, &rec.volume, &hash)?);
    Ok(Outcome {
        command: "recon",
        config_hash: hash,
        files,
        summary: serde_json::json!({
            "weight_floor": rec.report.weight_floor,
            "floored": rec.report.floored,
            "degenerate": rec.report.degenerate,
        }),
    })
}

fn write_contours(cfg: &RunConfig, volume: &VoxelGrid, hash: &str) -> Result<Vec<PathBuf>> {
    let c = contours(volume);
    let mut files = Vec::new();
    for (name, g) in [(CONTOUR_FILE, &c.magnitude), ("contours_x.f32", &c.gx), ("contours_y.f32", &c.gy), ("contours_z.f32", &c.gz)] {
        let p = cfg.path(name);
        write_volume_tagged(&p, g, "arbitrary/cm", Some(hash))?;
        files.push(p);
    }
    Ok(files)
}

/// Contour map of an existing reconstruction.
pub fn cmd_contours(cfg: &RunConfig) -> Result<Outcome> {
    let hash = prepare_out(cfg)?;
    let input = cfg.path(RECON_FILE);
    if !input.exists() {
        return Err(Error::Config(format!("missing reconstruction {}", input.display())));
    }
    let (volume, _) = read_volume(&input)?;
    let files = write_contours(cfg, &volume, &hash)?;
    Ok(Outcome {
        command: "contours",
        config_hash: hash,
        files,
        summary: serde_json::json!({ "dims": volume.dims() }),
    })
}

/// Admissibility of the geometry over the phantom support (the whole grid
/// when the phantom is empty).
pub fn check_geometry(cfg: &RunConfig) -> Result<ImmersionReport> {
    cfg.validate()?;
    let geometry = cfg.geometry.build()?;
    let f = cfg.phantom_volume()?;
    let support = if f.data().iter().any(|&v| v > 0.0) { f } else { f.map(|_| 1.0) };
    let (lo, hi) = support.bounds();
    geometry.check_outside(&lo, &hi)?;
    Ok(immersion_report(&geometry, &support, &cfg.immersion))
}

pub fn cmd_check_geometry(cfg: &RunConfig) -> Result<Outcome> {
    let hash = prepare_out(cfg)?;
    let report = check_geometry(cfg)?;
    let path = cfg.path(ADMISSIBILITY_FILE);
    write_json(&path, &report)?;
    Ok(Outcome {
        command: "check-geometry",
        config_hash: hash,
        files: vec![path],
        summary: serde_json::json!({
            "admissible": report.admissible,
            "violating_voxels": report.violating.len(),
            "support_voxels": report.support_voxels,
            "min_abs_h": report.min_abs_h,
            "detector_condition_crossings": report.detector_condition_crossings,
        }),
    })
}

/// Slice choice for volume exports; the middle slice when `index` is absent.
#[derive(Clone, Copy, Debug)]
pub struct ExportOptions {
    pub axis: SliceAxis,
    pub index: Option<usize>,
}

impl Default for ExportOptions {
    fn default() -> Self {
        ExportOptions { axis: SliceAxis::Z, index: None }
    }
}

/// CSV + PGM slices of volume files and per-channel CSV of spectrum files,
/// recognised by their sidecars.
pub fn cmd_export(paths: &[PathBuf], out_dir: &Path, options: &ExportOptions) -> Result<Outcome> {
    fs::create_dir_all(out_dir)?;
    let mut files = Vec::new();
    for path in paths {
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::Config(format!("bad path {}", path.display())))?;
        let sidecar = crate::io::sidecar_path(path);
        if read_json::<SpectrumHeader>(&sidecar).is_ok() {
            let spec = read_spectrum(path)?;
            for c in Channel::ALL {
                let p = out_dir.join(format!("{stem}_{}.csv", c.name()));
                write_spectrum_csv(&p, &spec, c)?;
                files.push(p);
            }
        } else {
            let (volume, _) = read_volume(path)?;
            let dims = volume.dims();
            let axis_len = dims[options.axis as usize];
            let index = options.index.unwrap_or(axis_len / 2);
            let (rows, cols, vals) = slice(&volume, options.axis, index)?;
            let base = format!("{stem}_{}{index}", options.axis.name());
            let csv = out_dir.join(format!("{base}.csv"));
            let pgm = out_dir.join(format!("{base}.pgm"));
            write_csv_matrix(&csv, rows, cols, &vals)?;
            write_pgm(&pgm, rows, cols, &vals)?;
            files.push(csv);
            files.push(pgm);
        }
    }
    Ok(Outcome {
        command: "export",
        config_hash: String::new(),
        summary: serde_json::json!({ "exported": files.len() }),
        files,
    })
}
