//! Filtered backprojection `f̃ = ℬ ∂ₚ² g` and contour extraction.
//!
//! Spectra are turned into per-detector densities in the torus parameter
//! `p = cot ω`, resampled onto a common node set, differentiated twice in `p`
//! and backprojected. The backprojection visits every voxel once per detector
//! and weighs the filtered value at `p = φ(x, d, s)` by the chart area of the
//! detector, `|h|`, and the inverse of the prior weight
//! `‖∇φ‖·A_{E₀}(s, x)·A_{E_ω}(x, d)`.
//!
//! The detector measure is the chart measure `t(α)² sin α dα dβ` (arc length
//! for arc layouts), the same quadrature weight stored on each detector.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::LineIntegralMap;
use crate::geometry::{
    grad_phi, immersion_report, jacobian_h_analytic, jacobian_h_numeric, phi, ImmersionReport, ImmersionSettings,
    ScanGeometry, Vec3,
};
use crate::par::map_indexed;
use crate::physics::{energy_of_p, AttenuationModel};
use crate::spectrum::{ChannelSelection, Spectrum};
use crate::volume::VoxelGrid;

/// Detector measure recorded in reconstruction metadata.
pub const DETECTOR_MEASURE: &str = "t(alpha)^2 sin(alpha) dalpha dbeta";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sampling {
    /// Nodes uniform in `p`.
    P,
    /// Nodes uniform in `tan(ω/2)`, denser towards back-scatter.
    Tau,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Resampling {
    /// Monotone piecewise-cubic Hermite.
    Pchip,
    /// Piecewise linear, exactly linear in the data.
    Linear,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HMethod {
    Numeric,
    Analytic,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReconSettings {
    pub channels: ChannelSelection,
    pub sampling: Sampling,
    pub resampling: Resampling,
    /// Number of resampled `p` nodes.
    pub n_p: usize,
    /// Nodes cover `[−p_max, p_max]`, clipped to the finite bin centres.
    pub p_max: f64,
    /// Gaussian smoothing of the resampled data, in nodes (0 disables).
    pub smoothing: f64,
    /// Weight floor as a fraction of the median prior weight.
    pub weight_floor_rel: f64,
    /// Absolute weight floor; overrides `weight_floor_rel`.
    pub weight_floor: Option<f64>,
    pub h_method: HMethod,
    /// Refuse when the sampled `min |h|` over the support falls below this.
    pub min_abs_h: f64,
    /// Node spacing, in voxels, of the prior line-integral tables.
    pub map_stride: usize,
    /// Output lattice dims over the prior box; the prior lattice when absent.
    pub output_dims: Option<[usize; 3]>,
    pub immersion: ImmersionSettings,
}

impl Default for ReconSettings {
    fn default() -> Self {
        ReconSettings {
            channels: ChannelSelection::G1,
            sampling: Sampling::P,
            resampling: Resampling::Pchip,
            n_p: 512,
            p_max: 6.0,
            smoothing: 1.0,
            weight_floor_rel: 1e-6,
            weight_floor: None,
            h_method: HMethod::Numeric,
            min_abs_h: 0.0,
            map_stride: 2,
            output_dims: None,
            immersion: ImmersionSettings::default(),
        }
    }
}

/// Per-detector samples on a common ascending node set in `p`.
#[derive(Clone, Debug, PartialEq)]
pub struct PSamples {
    pub nodes: Vec<f64>,
    pub n_detectors: usize,
    /// Detector-major, `d·nodes.len() + k`.
    pub values: Vec<f64>,
}

impl PSamples {
    pub fn new(nodes: Vec<f64>, n_detectors: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != nodes.len() * n_detectors {
            return Err(Error::GridMismatch(format!(
                "{} values for {} nodes x {} detectors",
                values.len(),
                nodes.len(),
                n_detectors
            )));
        }
        if nodes.windows(2).any(|w| !(w[1] > w[0])) || nodes.iter().any(|p| !p.is_finite()) {
            return Err(Error::Config("p nodes must be finite and strictly ascending".into()));
        }
        Ok(PSamples { nodes, n_detectors, values })
    }

    pub fn row(&self, d: usize) -> &[f64] {
        let n = self.nodes.len();
        &self.values[d * n..(d + 1) * n]
    }

    /// Linear interpolation in `p`; zero outside the node range.
    pub fn eval(&self, d: usize, p: f64) -> f64 {
        let x = &self.nodes;
        let n = x.len();
        if n == 0 || !(p >= x[0] && p <= x[n - 1]) {
            return 0.0;
        }
        let row = self.row(d);
        if n == 1 {
            return row[0];
        }
        let i = x.partition_point(|&v| v <= p).clamp(1, n - 1) - 1;
        let f = (p - x[i]) / (x[i + 1] - x[i]);
        row[i] + f * (row[i + 1] - row[i])
    }

    fn map_rows(&self, nodes: Vec<f64>, f: impl Fn(&[f64]) -> Result<Vec<f64>> + Sync) -> Result<PSamples> {
        let rows = map_indexed(self.n_detectors, |d| f(self.row(d)));
        let mut values = Vec::with_capacity(nodes.len() * self.n_detectors);
        for r in rows {
            values.extend(r?);
        }
        PSamples::new(nodes, self.n_detectors, values)
    }
}

/// Densities in `p`: each bin value divided by its width in `p`, placed at
/// the bin centre. Bins with an unbounded `p` extent are dropped.
pub fn spectrum_density(spectrum: &Spectrum, selection: ChannelSelection) -> Result<PSamples> {
    let data = spectrum.selection(selection);
    let centers = spectrum.grid.centers_p();
    let edges = spectrum.grid.p_edges();
    let keep: Vec<usize> = (0..spectrum.n_bins())
        .filter(|&k| centers[k].is_finite() && edges[k].is_finite() && edges[k + 1].is_finite() && edges[k + 1] > edges[k])
        .collect();
    let nodes: Vec<f64> = keep.iter().map(|&k| centers[k]).collect();
    let mut values = Vec::with_capacity(nodes.len() * spectrum.n_detectors);
    for d in 0..spectrum.n_detectors {
        let row = spectrum.row(&data, d);
        values.extend(keep.iter().map(|&k| row[k] / (edges[k + 1] - edges[k])));
    }
    PSamples::new(nodes, spectrum.n_detectors, values)
}

/// Fritsch–Carlson slopes with the three-point end formula.
fn pchip_slopes(x: &[f64], y: &[f64]) -> Vec<f64> {
    let n = x.len();
    let h: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
    let delta: Vec<f64> = (0..n - 1).map(|i| (y[i + 1] - y[i]) / h[i]).collect();
    let mut m = vec![0.0; n];
    if n == 2 {
        m[0] = delta[0];
        m[1] = delta[0];
        return m;
    }
    for i in 1..n - 1 {
        let (a, b) = (delta[i - 1], delta[i]);
        if a * b > 0.0 {
            let w1 = 2.0 * h[i] + h[i - 1];
            let w2 = h[i] + 2.0 * h[i - 1];
            m[i] = (w1 + w2) / (w1 / a + w2 / b);
        }
    }
    let end = |h0: f64, h1: f64, d0: f64, d1: f64| {
        let s = ((2.0 * h0 + h1) * d0 - h0 * d1) / (h0 + h1);
        if s * d0 <= 0.0 {
            0.0
        } else if d0 * d1 <= 0.0 && s.abs() > 3.0 * d0.abs() {
            3.0 * d0
        } else {
            s
        }
    };
    m[0] = end(h[0], h[1], delta[0], delta[1]);
    m[n - 1] = end(h[n - 2], h[n - 3], delta[n - 2], delta[n - 3]);
    m
}

/// Monotone cubic interpolation of `(x, y)` at `xq`; zero outside `[x₀, x_last]`.
pub fn pchip(x: &[f64], y: &[f64], xq: &[f64]) -> Vec<f64> {
    let n = x.len();
    if n == 0 {
        return vec![0.0; xq.len()];
    }
    if n == 1 {
        return xq.iter().map(|&q| if q == x[0] { y[0] } else { 0.0 }).collect();
    }
    let m = pchip_slopes(x, y);
    xq.iter()
        .map(|&q| {
            if !(q >= x[0] && q <= x[n - 1]) {
                return 0.0;
            }
            let i = x.partition_point(|&v| v <= q).clamp(1, n - 1) - 1;
            let h = x[i + 1] - x[i];
            let t = (q - x[i]) / h;
            let (t2, t3) = (t * t, t * t * t);
            (2.0 * t3 - 3.0 * t2 + 1.0) * y[i]
                + (t3 - 2.0 * t2 + t) * h * m[i]
                + (-2.0 * t3 + 3.0 * t2) * y[i + 1]
                + (t3 - t2) * h * m[i + 1]
        })
        .collect()
}

fn linear(x: &[f64], y: &[f64], xq: &[f64]) -> Vec<f64> {
    let n = x.len();
    xq.iter()
        .map(|&q| {
            if n < 2 || !(q >= x[0] && q <= x[n - 1]) {
                return 0.0;
            }
            let i = x.partition_point(|&v| v <= q).clamp(1, n - 1) - 1;
            y[i] + (q - x[i]) / (x[i + 1] - x[i]) * (y[i + 1] - y[i])
        })
        .collect()
}

/// Output nodes over the finite data range intersected with `[−p_max, p_max]`.
pub fn p_nodes(data_nodes: &[f64], settings: &ReconSettings) -> Result<Vec<f64>> {
    let n = settings.n_p;
    if n < 3 {
        return Err(Error::Config(format!("need at least 3 p nodes, got {n}")));
    }
    let (Some(&first), Some(&last)) = (data_nodes.first(), data_nodes.last()) else {
        return Err(Error::Config("spectrum has no finite p bins".into()));
    };
    let lo = first.max(-settings.p_max);
    let hi = last.min(settings.p_max);
    if !(hi > lo) {
        return Err(Error::Config(format!("empty p range [{lo}, {hi}]")));
    }
    Ok(match settings.sampling {
        Sampling::P => (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect(),
        Sampling::Tau => {
            // τ = tan(ω/2) = p + √(1 + p²) decreases with p
            let tau = |p: f64| 1.0 / (p + (1.0 + p * p).sqrt());
            let (t_hi, t_lo) = (tau(lo), tau(hi));
            let mut v: Vec<f64> = (0..n)
                .map(|i| {
                    let t = t_hi + (t_lo - t_hi) * i as f64 / (n - 1) as f64;
                    (1.0 - t * t) / (2.0 * t)
                })
                .collect();
            v[0] = lo;
            v[n - 1] = hi;
            v
        }
    })
}

pub fn resample(samples: &PSamples, nodes: Vec<f64>, method: Resampling) -> Result<PSamples> {
    let x = samples.nodes.clone();
    let q = nodes.clone();
    samples.map_rows(nodes, |row| {
        Ok(match method {
            Resampling::Pchip => pchip(&x, row, &q),
            Resampling::Linear => linear(&x, row, &q),
        })
    })
}

/// Gaussian smoothing along each row with standard deviation `sigma` nodes;
/// the kernel is renormalised near the ends.
pub fn smooth(samples: &PSamples, sigma: f64) -> Result<PSamples> {
    if !(sigma > 0.0) {
        return Ok(samples.clone());
    }
    let w = crate::phantom::gaussian_kernel(sigma, 1.0);
    let half = (w.len() / 2) as isize;
    samples.map_rows(samples.nodes.clone(), |row| {
        let n = row.len() as isize;
        Ok((0..n)
            .map(|i| {
                let (mut acc, mut norm) = (0.0, 0.0);
                for (k, &wk) in w.iter().enumerate() {
                    let j = i + k as isize - half;
                    if j >= 0 && j < n {
                        acc += wk * row[j as usize];
                        norm += wk;
                    }
                }
                acc / norm
            })
            .collect())
    })
}

/// Second derivative of uniformly spaced samples: central stencil inside,
/// second-order one-sided stencils at the ends (three-point when only three
/// samples exist).
pub fn second_derivative_p(values: &[f64], h: f64) -> Result<Vec<f64>> {
    let n = values.len();
    if n < 3 {
        return Err(Error::Config(format!("second derivative needs at least 3 samples, got {n}")));
    }
    if !(h > 0.0) {
        return Err(Error::OutOfRange { name: "h", value: h, range: "(0, inf)" });
    }
    let h2 = h * h;
    let y = values;
    let mut out = vec![0.0; n];
    for i in 1..n - 1 {
        out[i] = (y[i - 1] - 2.0 * y[i] + y[i + 1]) / h2;
    }
    if n == 3 {
        out[0] = out[1];
        out[2] = out[1];
    } else {
        out[0] = (2.0 * y[0] - 5.0 * y[1] + 4.0 * y[2] - y[3]) / h2;
        out[n - 1] = (2.0 * y[n - 1] - 5.0 * y[n - 2] + 4.0 * y[n - 3] - y[n - 4]) / h2;
    }
    Ok(out)
}

/// Second derivative on arbitrary ascending nodes from the parabola through
/// each point and its neighbours (the end values copy their neighbour).
pub fn second_derivative_nonuniform(x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
    let n = x.len();
    if n < 3 || y.len() != n {
        return Err(Error::Config(format!("second derivative needs at least 3 samples, got {n}")));
    }
    let mut out = vec![0.0; n];
    for i in 1..n - 1 {
        let (h0, h1) = (x[i] - x[i - 1], x[i + 1] - x[i]);
        out[i] = 2.0 * (h0 * y[i + 1] - (h0 + h1) * y[i] + h1 * y[i - 1]) / (h0 * h1 * (h0 + h1));
    }
    out[0] = out[1];
    out[n - 1] = out[n - 2];
    Ok(out)
}

/// `∂ₚ²` of every row.
pub fn filter(samples: &PSamples) -> Result<PSamples> {
    let x = samples.nodes.clone();
    let n = x.len();
    if n < 3 {
        return Err(Error::Config(format!("second derivative needs at least 3 samples, got {n}")));
    }
    let h = (x[n - 1] - x[0]) / (n - 1) as f64;
    let uniform = x.windows(2).all(|w| ((w[1] - w[0]) - h).abs() <= 1e-9 * h.max(1.0));
    samples.map_rows(x.clone(), |row| {
        if uniform {
            second_derivative_p(row, h)
        } else {
            second_derivative_nonuniform(&x, row)
        }
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct BackprojectionReport {
    pub weight_floor: f64,
    /// (voxel, detector) pairs whose prior weight was raised to the floor.
    pub floored: usize,
    /// Pairs skipped because the voxel sits on the source–detector line.
    pub degenerate: usize,
    pub detector_measure: &'static str,
    pub admissibility: ImmersionReport,
}

#[derive(Clone, Debug)]
pub struct Reconstruction {
    pub volume: VoxelGrid,
    pub report: BackprojectionReport,
}

/// Output lattice over the box of `prior`.
pub fn output_lattice(prior: &VoxelGrid, dims: Option<[usize; 3]>) -> Result<VoxelGrid> {
    let Some(dims) = dims else {
        return Ok(prior.zeros_like());
    };
    let pd = prior.dims();
    let extent = prior.voxel_size() * pd[0] as f64;
    let h = extent / dims[0] as f64;
    for a in 0..3 {
        let e = prior.voxel_size() * pd[a] as f64;
        if dims[a] == 0 || ((h * dims[a] as f64) - e).abs() > 1e-9 * e {
            return Err(Error::GridMismatch(format!("output dims {dims:?} do not tile the prior box with cubic voxels")));
        }
    }
    Ok(VoxelGrid::filled(dims, h, prior.origin(), 0.0))
}

struct PriorWeights {
    model: AttenuationModel,
    source: LineIntegralMap,
    lo: Vec3,
    hi: Vec3,
    step: f64,
}

impl PriorWeights {
    fn new(prior: &VoxelGrid, geometry: &ScanGeometry, e0: f64, stride: usize) -> Result<Self> {
        let model = AttenuationModel::water_like(prior.clone(), e0)?;
        let (lo, hi) = prior.bounds();
        let step = prior.voxel_size() * stride.max(1) as f64;
        let source = LineIntegralMap::build(&model, &geometry.source, lo, hi, step);
        Ok(PriorWeights { model, source, lo, hi, step })
    }

    fn detector(&self, d: &Vec3) -> LineIntegralMap {
        LineIntegralMap::build(&self.model, d, self.lo, self.hi, self.step)
    }

    /// `‖∇φ‖·A_{E₀}·A_{E_ω}` at `x` for a detector table, with `p = φ`.
    fn weight(&self, det: &LineIntegralMap, x: &Vec3, p: f64, grad_norm: f64, e0: f64) -> f64 {
        let e = energy_of_p(e0, p);
        let a_in = self.source.eval(x).exponent(e0, self.model.sigma.eval(e0));
        let a_out = det.eval(x).exponent(e, self.model.sigma.eval(e));
        grad_norm * (-(a_in + a_out)).exp()
    }
}

fn check_admissible(geometry: &ScanGeometry, prior: &VoxelGrid, out: &VoxelGrid, settings: &ReconSettings) -> Result<ImmersionReport> {
    let (lo, hi) = out.bounds();
    geometry.check_outside(&lo, &hi)?;
    // support: the output voxels where the prior is positive, or all of them
    let mut support = out.map(|_| 0.0);
    let mut any = false;
    for i in 0..support.len() {
        if prior.sample_nearest(&out.center_of_index(i)) > 0.0 {
            support.data_mut()[i] = 1.0;
            any = true;
        }
    }
    if !any {
        support = out.map(|_| 1.0);
    }
    let report = immersion_report(geometry, &support, &settings.immersion);
    if !report.admissible {
        return Err(Error::Inadmissible(format!(
            "{} of {} support voxels violate (d - s).(d - x) != 0",
            report.violating.len(),
            report.support_voxels
        )));
    }
    if settings.min_abs_h > 0.0 && report.min_abs_h < settings.min_abs_h {
        return Err(Error::Inadmissible(format!(
            "min |h| = {:e} below the threshold {:e}",
            report.min_abs_h, settings.min_abs_h
        )));
    }
    Ok(report)
}

/// `Σ_d area_d·|h|·g(φ, d)/max(𝒲₁, ε_w)` at every output voxel.
pub fn backproject(
    filtered: &PSamples,
    geometry: &ScanGeometry,
    prior: &VoxelGrid,
    e0: f64,
    settings: &ReconSettings,
) -> Result<Reconstruction> {
    if filtered.n_detectors != geometry.detector_count() {
        return Err(Error::GridMismatch(format!(
            "{} detector rows for {} detectors",
            filtered.n_detectors,
            geometry.detector_count()
        )));
    }
    let out = output_lattice(prior, settings.output_dims)?;
    let admissibility = check_admissible(geometry, prior, &out, settings)?;
    let s = geometry.source;
    let pw = PriorWeights::new(prior, geometry, e0, settings.map_stride)?;

    let weight_floor = match settings.weight_floor {
        Some(w) if w > 0.0 => w,
        Some(w) => return Err(Error::OutOfRange { name: "weight_floor", value: w, range: "(0, inf)" }),
        None => {
            // median prior weight over a deterministic subsample of pairs
            let n_vox = out.len();
            let vstride = (n_vox / 4096).max(1);
            let dstride = (geometry.detector_count() / 16).max(1);
            let mut w = Vec::new();
            for det in geometry.detectors.iter().step_by(dstride) {
                let map = pw.detector(&det.position);
                for i in (0..n_vox).step_by(vstride) {
                    let x = out.center_of_index(i);
                    if let (Ok(p), Ok(g)) = (phi(&x, &det.position, &s), grad_phi(&x, &det.position, &s)) {
                        w.push(pw.weight(&map, &x, p, g.norm(), e0));
                    }
                }
            }
            w.sort_by(|a, b| a.total_cmp(b));
            let median = w.get(w.len() / 2).copied().unwrap_or(0.0);
            (settings.weight_floor_rel * median).max(f64::MIN_POSITIVE)
        }
    };

    let mut acc = vec![0.0; out.len()];
    let mut floored = 0;
    let mut degenerate = 0;
    for (di, det) in geometry.detectors.iter().enumerate() {
        let map = pw.detector(&det.position);
        let d = det.position;
        let contrib = map_indexed(out.len(), |i| {
            let x = out.center_of_index(i);
            let (Ok(p), Ok(g)) = (phi(&x, &d, &s), grad_phi(&x, &d, &s)) else {
                return (0.0, false, true);
            };
            let value = filtered.eval(di, p);
            if value == 0.0 {
                return (0.0, false, false);
            }
            let h = match settings.h_method {
                HMethod::Numeric => jacobian_h_numeric(&x, det.alpha, det.beta, &geometry.chart),
                HMethod::Analytic => jacobian_h_analytic(&x, det.alpha, det.beta, &geometry.chart),
            };
            let Ok(h) = h else {
                return (0.0, false, true);
            };
            let w = pw.weight(&map, &x, p, g.norm(), e0);
            let low = w < weight_floor;
            (det.area * h.abs() * value / w.max(weight_floor), low, false)
        });
        for (a, (v, low, deg)) in acc.iter_mut().zip(contrib) {
            *a += v;
            floored += low as usize;
            degenerate += deg as usize;
        }
    }
    Ok(Reconstruction {
        volume: out.with_data(acc)?,
        report: BackprojectionReport {
            weight_floor,
            floored,
            degenerate,
            detector_measure: DETECTOR_MEASURE,
            admissibility,
        },
    })
}

/// Adjoint of the unit-weight toric transform on the lattice of `like`:
/// `(ℬ*g)(x) = Σ_d area_d·‖∇φ(x, d)‖·g(φ(x, d), d)`.
pub fn backproject_adjoint(g: &PSamples, geometry: &ScanGeometry, like: &VoxelGrid) -> Result<VoxelGrid> {
    if g.n_detectors != geometry.detector_count() {
        return Err(Error::GridMismatch("detector rows do not match the geometry".into()));
    }
    let s = geometry.source;
    let mut acc = vec![0.0; like.len()];
    for (di, det) in geometry.detectors.iter().enumerate() {
        let d = det.position;
        let contrib = map_indexed(like.len(), |i| {
            let x = like.center_of_index(i);
            match (phi(&x, &d, &s), grad_phi(&x, &d, &s)) {
                (Ok(p), Ok(gr)) => det.area * gr.norm() * g.eval(di, p),
                _ => 0.0,
            }
        });
        for (a, v) in acc.iter_mut().zip(contrib) {
            *a += v;
        }
    }
    like.with_data(acc)
}

/// Resampled and smoothed `p` densities of the selected channels, before `∂ₚ²`.
pub fn prepare(spectrum: &Spectrum, settings: &ReconSettings) -> Result<PSamples> {
    let density = spectrum_density(spectrum, settings.channels)?;
    let nodes = p_nodes(&density.nodes, settings)?;
    let resampled = resample(&density, nodes, settings.resampling)?;
    smooth(&resampled, settings.smoothing)
}

/// `f̃ = ℬ ∂ₚ² g` for the channel selection of `settings`.
pub fn reconstruct(spectrum: &Spectrum, geometry: &ScanGeometry, prior: &VoxelGrid, settings: &ReconSettings) -> Result<Reconstruction> {
    if spectrum.n_detectors != geometry.detector_count() {
        return Err(Error::GridMismatch(format!(
            "spectrum has {} detectors, geometry {}",
            spectrum.n_detectors,
            geometry.detector_count()
        )));
    }
    let filtered = filter(&prepare(spectrum, settings)?)?;
    backproject(&filtered, geometry, prior, spectrum.grid.e0, settings)
}

/// Spatial gradient of a reconstruction and its magnitude.
#[derive(Clone, Debug)]
pub struct ContourMap {
    pub gx: VoxelGrid,
    pub gy: VoxelGrid,
    pub gz: VoxelGrid,
    pub magnitude: VoxelGrid,
}

/// Central differences inside, one-sided at the faces.
pub fn contours(volume: &VoxelGrid) -> ContourMap {
    let dims = volume.dims();
    let h = volume.voxel_size();
    let strides = [1, dims[0], dims[0] * dims[1]];
    let data = volume.data();
    let component = |axis: usize| {
        let n = dims[axis];
        let st = strides[axis];
        let v: Vec<f64> = (0..data.len())
            .map(|i| {
                if n < 2 {
                    return 0.0;
                }
                let pos = (i / st) % n;
                if pos == 0 {
                    (data[i + st] - data[i]) / h
                } else if pos == n - 1 {
                    (data[i] - data[i - st]) / h
                } else {
                    (data[i + st] - data[i - st]) / (2.0 * h)
                }
            })
            .collect();
        volume.with_data(v).expect("same lattice")
    };
    let (gx, gy, gz) = (component(0), component(1), component(2));
    let mag = (0..data.len())
        .map(|i| {
            let (a, b, c) = (gx.data()[i], gy.data()[i], gz.data()[i]);
            (a * a + b * b + c * c).sqrt()
        })
        .collect();
    ContourMap {
        magnitude: volume.with_data(mag).expect("same lattice"),
        gx,
        gy,
        gz,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::{forward_first_order, FirstOrderSettings, Measure, Sweep, Weights};
    use crate::geometry::DetectorLayout;
    use crate::physics::N_W;
    use crate::spectrum::EnergyGrid;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn second_derivative_annihilates_affine_and_is_exact_on_quadratics() {
        let h = 0.1;
        let lin: Vec<f64> = (0..20).map(|i| 3.0 - 2.0 * i as f64 * h).collect();
        assert!(second_derivative_p(&lin, h).unwrap().iter().all(|v| v.abs() < 1e-10));
        let quad: Vec<f64> = (0..20).map(|i| (i as f64 * h).powi(2)).collect();
        assert!(second_derivative_p(&quad, h).unwrap().iter().all(|v| (v - 2.0).abs() < 1e-8));
        assert!(second_derivative_p(&[1.0, 2.0], h).is_err());
        let three = second_derivative_p(&[0.0, 1.0, 4.0], 1.0).unwrap();
        assert_eq!(three, vec![2.0, 2.0, 2.0]);
    }

    #[test]
    fn second_derivative_converges_at_second_order() {
        let k = 3.0;
        let err = |n: usize| {
            let h = 2.0 / (n - 1) as f64;
            let y: Vec<f64> = (0..n).map(|i| (k * i as f64 * h).sin()).collect();
            let d = second_derivative_p(&y, h).unwrap();
            (0..n)
                .map(|i| (d[i] + k * k * (k * i as f64 * h).sin()).abs())
                .fold(0.0, f64::max)
        };
        let ratio = err(101) / err(201);
        assert!((ratio - 4.0).abs() < 0.4, "ratio {ratio}");
    }

    #[test]
    fn nonuniform_stencil_is_exact_on_quadratics() {
        let x = [0.0, 0.1, 0.35, 0.4, 0.9, 1.3];
        let y: Vec<f64> = x.iter().map(|v| 1.0 + v - 0.5 * v * v).collect();
        for v in second_derivative_nonuniform(&x, &y).unwrap() {
            assert!((v + 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn pchip_interpolates_and_stays_monotone() {
        let x = [0.0, 1.0, 2.0, 3.0, 4.0];
        let y = [0.0, 0.1, 0.2, 5.0, 5.1];
        let q: Vec<f64> = (0..=400).map(|i| i as f64 * 0.01).collect();
        let v = pchip(&x, &y, &q);
        assert!(v.windows(2).all(|w| w[1] >= w[0] - 1e-12));
        for (i, &xi) in x.iter().enumerate() {
            assert!((v[(xi * 100.0) as usize] - y[i]).abs() < 1e-12);
        }
        let lin: Vec<f64> = x.iter().map(|v| 2.0 * v - 1.0).collect();
        for (qi, vi) in q.iter().zip(pchip(&x, &lin, &q)) {
            assert!((vi - (2.0 * qi - 1.0)).abs() < 1e-12);
        }
        assert_eq!(pchip(&x, &y, &[-1.0, 5.0]), vec![0.0, 0.0]);
    }

    #[test]
    fn tau_nodes_ascend_within_range() {
        let settings = ReconSettings { sampling: Sampling::Tau, n_p: 64, ..Default::default() };
        let v = p_nodes(&[-10.0, 10.0], &settings).unwrap();
        assert_eq!(v[0], -6.0);
        assert_eq!(v[63], 6.0);
        assert!(v.windows(2).all(|w| w[1] > w[0]));
        // denser towards back-scatter (negative p)
        assert!(v[1] - v[0] < v[63] - v[62]);
    }

    #[test]
    fn constant_and_ramp_contours() {
        let g = VoxelGrid::filled([6, 5, 4], 0.5, Vec3::zeros(), 3.0);
        let c = contours(&g);
        assert!(c.magnitude.data().iter().all(|&v| v == 0.0));
        let mut ramp = g.clone();
        for i in 0..ramp.len() {
            ramp.data_mut()[i] = 1.7 * ramp.center_of_index(i).x;
        }
        let c = contours(&ramp);
        for i in 0..ramp.len() {
            assert!((c.gx.data()[i] - 1.7).abs() < 1e-12);
            assert!(c.gy.data()[i].abs() < 1e-12 && c.gz.data()[i].abs() < 1e-12);
            assert!((c.magnitude.data()[i] - 1.7).abs() < 1e-12);
        }
    }

    fn ring() -> ScanGeometry {
        ScanGeometry::new(
            Vec3::new(0.0, 0.0, -18.0),
            Vec3::zeros(),
            20.0,
            1.2,
            DetectorLayout::Grid { n_alpha: 3, n_beta: 6 },
            0.2,
        )
        .unwrap()
    }

    fn ball(n: usize) -> VoxelGrid {
        let mut g = VoxelGrid::centered_cube(n, 6.0, Vec3::zeros());
        for i in 0..g.len() {
            if g.center_of_index(i).norm() < 2.0 {
                g.data_mut()[i] = N_W;
            }
        }
        g
    }

    #[test]
    fn zero_spectrum_reconstructs_to_zero() {
        let geo = ring();
        let grid = EnergyGrid::covering(662.0, 2.0, 2.0).unwrap();
        let spec = Spectrum::zeros(grid, geo.detector_count(), geo.hash());
        let prior = ball(8);
        let settings = ReconSettings { n_p: 64, ..Default::default() };
        let r = reconstruct(&spec, &geo, &prior, &settings).unwrap();
        assert!(r.volume.data().iter().all(|&v| v == 0.0));
        assert!(r.report.admissibility.admissible);
    }

    #[test]
    fn reconstruction_is_homogeneous_in_the_spectrum() {
        let geo = ring();
        let grid = EnergyGrid::covering(662.0, 2.0, 2.0).unwrap();
        let prior = ball(8);
        let model = AttenuationModel::water_like(prior.clone(), 662.0).unwrap();
        let fo = FirstOrderSettings { n_theta: 48, n_phi: 48, ..Default::default() };
        let spec = forward_first_order(&prior, &model, &geo, &grid, &fo).unwrap();
        let settings = ReconSettings { n_p: 64, ..Default::default() };
        let a = reconstruct(&spec, &geo, &prior, &settings).unwrap().volume;
        let b = reconstruct(&spec.scaled(3.5), &geo, &prior, &settings).unwrap().volume;
        let scale = a.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(scale > 0.0);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((3.5 * x - y).abs() <= 1e-10 * scale);
        }
    }

    #[test]
    fn source_inside_the_box_is_refused() {
        let geo = ScanGeometry::new(
            Vec3::new(0.0, 0.0, -1.0),
            Vec3::zeros(),
            20.0,
            1.0,
            DetectorLayout::Grid { n_alpha: 2, n_beta: 4 },
            0.2,
        )
        .unwrap();
        let f = PSamples::new(vec![0.0, 1.0, 2.0], 8, vec![1.0; 24]).unwrap();
        assert!(matches!(backproject(&f, &geo, &ball(8), 662.0, &ReconSettings::default()), Err(Error::Inadmissible(_))));
    }

    #[test]
    fn support_condition_violation_is_refused() {
        // source on the sphere: planes through boundary detectors cut the ball
        let geo = ScanGeometry::new(
            Vec3::new(0.0, 0.0, -20.0),
            Vec3::zeros(),
            20.0,
            0.47 * std::f64::consts::PI,
            DetectorLayout::Grid { n_alpha: 2, n_beta: 4 },
            0.2,
        )
        .unwrap();
        let f = PSamples::new(vec![0.0, 1.0, 2.0], 8, vec![1.0; 24]).unwrap();
        let r = backproject(&f, &geo, &ball(8), 662.0, &ReconSettings::default());
        assert!(matches!(r, Err(Error::Inadmissible(_))), "{r:?}");
    }

    #[test]
    fn adjoint_matches_the_unit_weight_transform() {
        let geo = ring();
        let grid = EnergyGrid::covering(662.0, 4.0, 2.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut f = VoxelGrid::centered_cube(12, 6.0, Vec3::zeros());
        for v in f.data_mut() {
            *v = rng.random::<f64>();
        }
        let vac = AttenuationModel::vacuum_like(&f, 662.0);
        let fo = FirstOrderSettings {
            n_theta: 160,
            n_phi: 160,
            step: 0.25,
            sweep: Sweep::Grid,
            measure: Measure::Toric,
            weights: Weights::Unit,
            ..Default::default()
        };
        let lf = forward_first_order(&f, &vac, &geo, &grid, &fo).unwrap();
        let centers = grid.centers_p();
        let edges = grid.p_edges();
        let keep: Vec<usize> = (0..grid.n_bins).filter(|&k| edges[k].is_finite() && edges[k + 1].is_finite()).collect();
        let nodes: Vec<f64> = keep.iter().map(|&k| centers[k]).collect();
        let nd = geo.detector_count();
        // smooth random g, windowed away from the forward and backward ends
        let mut gv = Vec::new();
        for _ in 0..nd {
            let (a, b, c) = (rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>());
            for &k in &keep {
                let p = centers[k];
                let s2 = 1.0 / (1.0 + p * p);
                gv.push(s2 * (a + b * (c * 3.0 + p).sin()));
            }
        }
        let g = PSamples::new(nodes, nd, gv).unwrap();
        let mut lhs = 0.0;
        for (di, det) in geo.detectors.iter().enumerate() {
            for (j, &k) in keep.iter().enumerate() {
                lhs += det.area * lf.g1[di * grid.n_bins + k] * (edges[k + 1] - edges[k]) * g.row(di)[j];
            }
        }
        let bg = backproject_adjoint(&g, &geo, &f).unwrap();
        let rhs: f64 = f.data().iter().zip(bg.data()).map(|(a, b)| a * b).sum::<f64>() * f.voxel_volume();
        assert!((lhs / rhs - 1.0).abs() < 0.01, "lhs {lhs} rhs {rhs}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn filter_annihilates_affine_rows(a in -5.0f64..5.0, b in -5.0f64..5.0, n in 3usize..40) {
            let nodes: Vec<f64> = (0..n).map(|i| -1.0 + i as f64 * 0.05).collect();
            let vals: Vec<f64> = nodes.iter().map(|p| a + b * p).collect();
            let s = PSamples::new(nodes, 1, vals).unwrap();
            for v in filter(&s).unwrap().values {
                prop_assert!(v.abs() < 1e-9);
            }
        }

        #[test]
        fn contour_magnitude_is_component_norm(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut g = VoxelGrid::filled([5, 4, 3], 0.3, Vec3::zeros(), 0.0);
            for v in g.data_mut() { *v = rng.random::<f64>(); }
            let c = contours(&g);
            for i in 0..g.len() {
                let n = (c.gx.data()[i].powi(2) + c.gy.data()[i].powi(2) + c.gz.data()[i].powi(2)).sqrt();
                prop_assert!((n - c.magnitude.data()[i]).abs() < 1e-12);
            }
        }
    }
}
