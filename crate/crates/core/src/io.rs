//! On-disk formats: raw little-endian arrays with JSON sidecars, plus CSV
//! and PGM exports for plotting.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::spectrum::{Channel, EnergyGrid, Spectrum};
use crate::volume::VoxelGrid;

/// JSON sidecar of a volume file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeHeader {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    pub voxel_size_cm: f64,
    pub origin_cm: [f64; 3],
    pub units: String,
    /// Hash of the run configuration that produced the file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

/// JSON header of a spectrum file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumHeader {
    #[serde(rename = "E0_keV")]
    pub e0_kev: f64,
    #[serde(rename = "delta_E_keV")]
    pub delta_e_kev: f64,
    pub n_detectors: usize,
    pub n_bins: usize,
    pub channels: Vec<String>,
    pub geometry_hash: String,
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

/// Path of the JSON sidecar next to a binary file (`x.raw` → `x.json`).
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

/// Encodes a volume as f32 values, x-fastest.
pub fn volume_bytes(volume: &VoxelGrid) -> Vec<u8> {
    volume.data().iter().flat_map(|&v| (v as f32).to_le_bytes()).collect()
}

pub fn volume_header(volume: &VoxelGrid, units: &str) -> VolumeHeader {
    let [nx, ny, nz] = volume.dims();
    let o = volume.origin();
    VolumeHeader {
        nx,
        ny,
        nz,
        voxel_size_cm: volume.voxel_size(),
        origin_cm: [o.x, o.y, o.z],
        units: units.to_string(),
        config_hash: None,
    }
}

/// Writes `path` (raw f32) and its sidecar.
pub fn write_volume(path: &Path, volume: &VoxelGrid, units: &str) -> Result<()> {
    write_volume_tagged(path, volume, units, None)
}

/// [`write_volume`] with the producing configuration's hash in the sidecar.
pub fn write_volume_tagged(path: &Path, volume: &VoxelGrid, units: &str, config_hash: Option<&str>) -> Result<()> {
    fs::write(path, volume_bytes(volume))?;
    let mut header = volume_header(volume, units);
    header.config_hash = config_hash.map(str::to_string);
    write_json(&sidecar_path(path), &header)
}

/// Reads a volume and its units string. Values come back as the f32 stored.
pub fn read_volume(path: &Path) -> Result<(VoxelGrid, String)> {
    let header: VolumeHeader = read_json(&sidecar_path(path))?;
    let bytes = fs::read(path)?;
    let n = header.nx * header.ny * header.nz;
    if bytes.len() != 4 * n {
        return Err(Error::Format(format!("{} bytes for {n} f32 voxels", bytes.len())));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let o = header.origin_cm;
    let grid = VoxelGrid::new(
        [header.nx, header.ny, header.nz],
        header.voxel_size_cm,
        Vec3::new(o[0], o[1], o[2]),
        data,
    )?;
    Ok((grid, header.units))
}

pub fn spectrum_header(spec: &Spectrum) -> SpectrumHeader {
    SpectrumHeader {
        e0_kev: spec.grid.e0,
        delta_e_kev: spec.grid.delta,
        n_detectors: spec.n_detectors,
        n_bins: spec.n_bins(),
        channels: Channel::ALL.iter().map(|c| c.name().to_string()).collect(),
        geometry_hash: spec.geometry_hash.clone(),
        seed: spec.seed,
        config_hash: None,
    }
}

/// Channels back to back in header order, each detector-major f64.
pub fn spectrum_bytes(spec: &Spectrum) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 * 5 * spec.g0.len());
    for c in Channel::ALL {
        for v in spec.channel(c) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn write_spectrum(path: &Path, spec: &Spectrum) -> Result<()> {
    write_spectrum_tagged(path, spec, None)
}

pub fn write_spectrum_tagged(path: &Path, spec: &Spectrum, config_hash: Option<&str>) -> Result<()> {
    fs::write(path, spectrum_bytes(spec))?;
    let mut header = spectrum_header(spec);
    header.config_hash = config_hash.map(str::to_string);
    write_json(&sidecar_path(path), &header)
}

pub fn read_spectrum(path: &Path) -> Result<Spectrum> {
    let header: SpectrumHeader = read_json(&sidecar_path(path))?;
    let bytes = fs::read(path)?;
    let per = header.n_detectors * header.n_bins;
    let nch = header.channels.len();
    if bytes.len() != 8 * per * nch {
        return Err(Error::Format(format!(
            "{} bytes for {nch} channels of {per} f64 values",
            bytes.len()
        )));
    }
    // The grid is rebuilt from (E0, ΔE, n_bins); the last bin is centred on E0.
    let grid = EnergyGrid {
        e0: header.e0_kev,
        delta: header.delta_e_kev,
        n_bins: header.n_bins,
    };
    let mut spec = Spectrum::zeros(grid, header.n_detectors, header.geometry_hash.clone());
    spec.seed = header.seed;
    for (i, name) in header.channels.iter().enumerate() {
        let values: Vec<f64> = bytes[8 * per * i..8 * per * (i + 1)]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let channel = Channel::ALL
            .iter()
            .copied()
            .find(|c| c.name() == name)
            .ok_or_else(|| Error::Format(format!("unknown channel {name:?}")))?;
        if let Some(slot) = spec.channel_mut(channel) {
            *slot = values;
        }
    }
    Ok(spec)
}

/// Axis normal to an exported slice.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SliceAxis {
    X,
    Y,
    Z,
}

impl SliceAxis {
    pub fn name(&self) -> &'static str {
        match self {
            SliceAxis::X => "x",
            SliceAxis::Y => "y",
            SliceAxis::Z => "z",
        }
    }
}

impl std::str::FromStr for SliceAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "x" => Ok(SliceAxis::X),
            "y" => Ok(SliceAxis::Y),
            "z" => Ok(SliceAxis::Z),
            _ => Err(Error::Config(format!("slice axis must be x, y or z, got {s:?}"))),
        }
    }
}

/// Row-major 2-D slice `(rows, cols, values)` at `index` along `axis`.
pub fn slice(volume: &VoxelGrid, axis: SliceAxis, index: usize) -> Result<(usize, usize, Vec<f64>)> {
    let [nx, ny, nz] = volume.dims();
    let limit = match axis {
        SliceAxis::X => nx,
        SliceAxis::Y => ny,
        SliceAxis::Z => nz,
    };
    if index >= limit {
        return Err(Error::Config(format!("slice {index} outside 0..{limit}")));
    }
    let (rows, cols) = match axis {
        SliceAxis::X => (nz, ny),
        SliceAxis::Y => (nz, nx),
        SliceAxis::Z => (ny, nx),
    };
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            out.push(match axis {
                SliceAxis::X => volume.get(index, c, r),
                SliceAxis::Y => volume.get(c, index, r),
                SliceAxis::Z => volume.get(c, r, index),
            });
        }
    }
    Ok((rows, cols, out))
}

/// Plain CSV matrix, one row per line.
pub fn write_csv_matrix(path: &Path, rows: usize, cols: usize, values: &[f64]) -> Result<()> {
    let mut w = std::io::BufWriter::new(fs::File::create(path)?);
    for r in 0..rows {
        let line: Vec<String> = values[r * cols..(r + 1) * cols].iter().map(|v| format!("{v:e}")).collect();
        writeln!(w, "{}", line.join(","))?;
    }
    w.flush()?;
    Ok(())
}

/// 8-bit binary PGM scaled linearly from the slice minimum to its maximum.
pub fn pgm_bytes(rows: usize, cols: usize, values: &[f64]) -> Vec<u8> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut out = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| (((v - lo) / span) * 255.0).round().clamp(0.0, 255.0) as u8));
    out
}

pub fn write_pgm(path: &Path, rows: usize, cols: usize, values: &[f64]) -> Result<()> {
    fs::write(path, pgm_bytes(rows, cols, values))?;
    Ok(())
}

/// Sinogram CSV of one channel: header `detector,E_keV...`, one line per detector.
pub fn write_spectrum_csv(path: &Path, spec: &Spectrum, channel: Channel) -> Result<()> {
    let data = spec.channel(channel);
    let mut w = std::io::BufWriter::new(fs::File::create(path)?);
    let energies: Vec<String> = spec.grid.centers().iter().map(|e| format!("{e:.4}")).collect();
    writeln!(w, "detector,{}", energies.join(","))?;
    for d in 0..spec.n_detectors {
        let row: Vec<String> = spec.row(&data, d).iter().map(|v| format!("{v:e}")).collect();
        writeln!(w, "{d},{}", row.join(","))?;
    }
    w.flush()?;
    Ok(())
}
