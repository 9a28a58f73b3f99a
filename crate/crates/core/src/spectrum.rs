//! Energy-resolved spectra per detector, decomposed by scatter order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::physics::{backscatter_floor, energy_of_p, p_of_energy, tau_of_omega};

/// Uniform energy bins of width `delta` whose last bin is centred on `e0`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyGrid {
    pub e0: f64,
    pub delta: f64,
    pub n_bins: usize,
}

impl EnergyGrid {
    /// Bins from `backscatter_floor(e0) − margin` up to `e0`.
    pub fn covering(e0: f64, delta: f64, margin: f64) -> Result<Self> {
        if !(e0 > 0.0 && delta > 0.0 && margin >= 0.0) {
            return Err(Error::Config(format!("bad energy grid e0={e0} delta={delta} margin={margin}")));
        }
        let lo = backscatter_floor(e0) - margin;
        let n_bins = ((e0 + delta / 2.0 - lo) / delta).ceil() as usize;
        Ok(EnergyGrid { e0, delta, n_bins })
    }

    pub fn e_max(&self) -> f64 {
        self.e0 + self.delta / 2.0
    }

    pub fn e_min(&self) -> f64 {
        self.e_max() - self.n_bins as f64 * self.delta
    }

    pub fn center(&self, k: usize) -> f64 {
        self.e_min() + (k as f64 + 0.5) * self.delta
    }

    /// Edges `(lo, hi)` of bin `k`.
    pub fn edges(&self, k: usize) -> (f64, f64) {
        let lo = self.e_min() + k as f64 * self.delta;
        (lo, lo + self.delta)
    }

    pub fn centers(&self) -> Vec<f64> {
        (0..self.n_bins).map(|k| self.center(k)).collect()
    }

    pub fn bin_of(&self, e: f64) -> Option<usize> {
        let u = (e - self.e_min()) / self.delta;
        (u >= 0.0 && u < self.n_bins as f64).then(|| u as usize)
    }

    /// First-order torus parameter `p` at each bin centre (`+∞` for `E ≥ E₀`).
    pub fn centers_p(&self) -> Vec<f64> {
        self.centers().iter().map(|&e| p_of_energy(self.e0, e)).collect()
    }

    /// `τ = dist_sd·tan(ω/2)` at each bin centre.
    pub fn centers_tau(&self, dist_sd: f64) -> Vec<f64> {
        self.centers_p()
            .iter()
            .map(|&p| tau_of_omega(crate::physics::omega_of_p(p), dist_sd))
            .collect()
    }

    /// Bin edges mapped to `p` (ascending with energy, infinite outside the
    /// single-scatter band).
    pub fn p_edges(&self) -> Vec<f64> {
        (0..=self.n_bins)
            .map(|k| p_of_energy(self.e0, self.e_min() + k as f64 * self.delta))
            .collect()
    }

    /// Energy of a first-order bin centre from its `p` value.
    pub fn energy_of_p(&self, p: f64) -> f64 {
        energy_of_p(self.e0, p)
    }
}

/// Spectrum channels; `Rest` holds orders three and above.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    G0,
    G1,
    G2,
    Rest,
    Total,
}

impl Channel {
    pub const ALL: [Channel; 5] = [Channel::G0, Channel::G1, Channel::G2, Channel::Rest, Channel::Total];

    pub fn name(&self) -> &'static str {
        match self {
            Channel::G0 => "g0",
            Channel::G1 => "g1",
            Channel::G2 => "g2",
            Channel::Rest => "rest",
            Channel::Total => "total",
        }
    }
}

/// Channel combination fed to reconstruction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelSelection {
    G1,
    G1g2,
    Total,
}

impl std::str::FromStr for ChannelSelection {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "g1" => Ok(ChannelSelection::G1),
            "g1g2" => Ok(ChannelSelection::G1g2),
            "total" => Ok(ChannelSelection::Total),
            _ => Err(Error::Config(format!("unknown channel selection {s:?}"))),
        }
    }
}

/// Per-detector, per-bin counts, detector-major (`d·n_bins + k`).
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum {
    pub grid: EnergyGrid,
    pub n_detectors: usize,
    pub g0: Vec<f64>,
    pub g1: Vec<f64>,
    pub g2: Vec<f64>,
    pub rest: Vec<f64>,
    pub geometry_hash: String,
    pub seed: Option<u64>,
}

impl Spectrum {
    pub fn zeros(grid: EnergyGrid, n_detectors: usize, geometry_hash: impl Into<String>) -> Self {
        let n = grid.n_bins * n_detectors;
        Spectrum {
            grid,
            n_detectors,
            g0: vec![0.0; n],
            g1: vec![0.0; n],
            g2: vec![0.0; n],
            rest: vec![0.0; n],
            geometry_hash: geometry_hash.into(),
            seed: None,
        }
    }

    pub fn n_bins(&self) -> usize {
        self.grid.n_bins
    }

    pub fn channel(&self, c: Channel) -> Vec<f64> {
        match c {
            Channel::G0 => self.g0.clone(),
            Channel::G1 => self.g1.clone(),
            Channel::G2 => self.g2.clone(),
            Channel::Rest => self.rest.clone(),
            Channel::Total => self.total(),
        }
    }

    pub fn channel_mut(&mut self, c: Channel) -> Option<&mut Vec<f64>> {
        match c {
            Channel::G0 => Some(&mut self.g0),
            Channel::G1 => Some(&mut self.g1),
            Channel::G2 => Some(&mut self.g2),
            Channel::Rest => Some(&mut self.rest),
            Channel::Total => None,
        }
    }

    pub fn total(&self) -> Vec<f64> {
        (0..self.g0.len())
            .map(|i| self.g0[i] + self.g1[i] + self.g2[i] + self.rest[i])
            .collect()
    }

    pub fn selection(&self, sel: ChannelSelection) -> Vec<f64> {
        match sel {
            ChannelSelection::G1 => self.g1.clone(),
            ChannelSelection::G1g2 => self.g1.iter().zip(&self.g2).map(|(a, b)| a + b).collect(),
            ChannelSelection::Total => self.total(),
        }
    }

    /// Row of one detector in a detector-major array.
    pub fn row<'a>(&self, data: &'a [f64], det: usize) -> &'a [f64] {
        &data[det * self.grid.n_bins..(det + 1) * self.grid.n_bins]
    }

    fn check_compatible(&self, other: &Spectrum) -> Result<()> {
        if self.grid != other.grid || self.n_detectors != other.n_detectors {
            return Err(Error::GridMismatch(format!(
                "spectra {:?}×{} vs {:?}×{}",
                self.grid, self.n_detectors, other.grid, other.n_detectors
            )));
        }
        Ok(())
    }

    /// Combines the `g1` channel of `first`, the `g2` channel of `second` and
    /// optionally `g0`/`rest` from a Monte-Carlo spectrum.
    pub fn assemble(first: &Spectrum, second: Option<&Spectrum>, extra: Option<&Spectrum>) -> Result<Spectrum> {
        let mut out = Spectrum::zeros(first.grid, first.n_detectors, first.geometry_hash.clone());
        out.g1 = first.g1.clone();
        if let Some(s) = second {
            first.check_compatible(s)?;
            out.g2 = s.g2.clone();
        }
        if let Some(m) = extra {
            first.check_compatible(m)?;
            out.g0 = m.g0.clone();
            out.rest = m.rest.clone();
        }
        out.seed = first.seed;
        Ok(out)
    }

    /// Every channel multiplied by `k`.
    pub fn scaled(&self, k: f64) -> Spectrum {
        let mut out = self.clone();
        for c in [Channel::G0, Channel::G1, Channel::G2, Channel::Rest] {
            out.channel_mut(c).unwrap().iter_mut().for_each(|v| *v *= k);
        }
        out
    }

    /// Each bin of each channel replaced by a Poisson draw with that mean.
    pub fn poisson_noise(&self, seed: u64) -> Result<Spectrum> {
        let mut out = self.clone();
        for (stream, c) in [Channel::G0, Channel::G1, Channel::G2, Channel::Rest].into_iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(stream as u64);
            for v in out.channel_mut(c).unwrap().iter_mut() {
                *v = poisson_draw(*v, &mut rng)?;
            }
        }
        out.seed = Some(seed);
        Ok(out)
    }

    /// Poisson noise of relative level `level` on the mean non-zero total
    /// bin: the spectrum is scaled to `1/level²` mean counts, drawn, and
    /// scaled back.
    pub fn with_relative_noise(&self, level: f64, seed: u64) -> Result<Spectrum> {
        let total = self.total();
        let nz: Vec<f64> = total.iter().copied().filter(|&v| v > 0.0).collect();
        if nz.is_empty() {
            return Ok(self.clone());
        }
        let mean = nz.iter().sum::<f64>() / nz.len() as f64;
        let k = 1.0 / (level * level * mean);
        Ok(self.scaled(k).poisson_noise(seed)?.scaled(1.0 / k))
    }
}

fn poisson_draw(mean: f64, rng: &mut ChaCha8Rng) -> Result<f64> {
    if mean < 0.0 || mean.is_nan() {
        return Err(Error::NegativeMean(mean));
    }
    if mean == 0.0 {
        return Ok(0.0);
    }
    let d = Poisson::new(mean).map_err(|e| Error::Config(format!("Poisson mean {mean}: {e}")))?;
    Ok(d.sample(rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::physics::compton_energy;
    use approx::assert_relative_eq;

    fn grid() -> EnergyGrid {
        EnergyGrid::covering(662.0, 0.25, 2.0).unwrap()
    }

    #[test]
    fn grid_layout() {
        let g = grid();
        assert_relative_eq!(g.center(g.n_bins - 1), 662.0, epsilon = 1e-9);
        assert!(g.e_min() <= backscatter_floor(662.0) - 2.0);
        assert_eq!(g.bin_of(662.0), Some(g.n_bins - 1));
        assert_eq!(g.bin_of(700.0), None);
        assert_eq!(g.bin_of(g.center(17)), Some(17));
        assert!(EnergyGrid::covering(662.0, 0.0, 0.0).is_err());
        // the 90° energy and the two-60° energy fall into one bin
        let single = compton_energy(662.0, std::f64::consts::FRAC_PI_2);
        let double = compton_energy(compton_energy(662.0, std::f64::consts::PI / 3.0), std::f64::consts::PI / 3.0);
        assert_eq!(g.bin_of(single), g.bin_of(double));
    }

    #[test]
    fn p_and_tau_round_trip() {
        let g = grid();
        let ps = g.centers_p();
        for (k, &p) in ps.iter().enumerate() {
            if p.is_finite() {
                assert!((g.energy_of_p(p) - g.center(k)).abs() < 1e-10);
            }
        }
        // p increases with energy
        let finite: Vec<f64> = ps.iter().copied().filter(|p| p.is_finite()).collect();
        assert!(finite.windows(2).all(|w| w[1] > w[0]));
        let edges = g.p_edges();
        assert!(edges[0] == f64::NEG_INFINITY && edges[g.n_bins] == f64::INFINITY);
    }

    #[test]
    fn assembly_and_total() {
        let g = grid();
        let mut a = Spectrum::zeros(g, 2, "h");
        a.g1[3] = 5.0;
        let only = Spectrum::assemble(&a, None, None).unwrap();
        assert_eq!(only.total(), a.g1);
        let mut b = Spectrum::zeros(g, 2, "h");
        b.g2[3] = 1.0;
        let both = Spectrum::assemble(&a, Some(&b), None).unwrap();
        assert_eq!(both.total()[3], 6.0);
        assert_eq!(both.selection(ChannelSelection::G1g2)[3], 6.0);
        let other = Spectrum::zeros(g, 3, "h");
        assert!(Spectrum::assemble(&a, Some(&other), None).is_err());
        assert_eq!("g1g2".parse::<ChannelSelection>().unwrap(), ChannelSelection::G1g2);
        assert!("g3".parse::<ChannelSelection>().is_err());
    }

    #[test]
    fn poisson_statistics() {
        let g = EnergyGrid { e0: 662.0, delta: 0.25, n_bins: 2000 };
        let mut s = Spectrum::zeros(g, 1, "h");
        s.g1.iter_mut().for_each(|v| *v = 1e6);
        s.g1[0] = 0.0;
        let n = s.poisson_noise(7).unwrap();
        assert_eq!(n.g1[0], 0.0);
        let vals = &n.g1[1..];
        assert!(vals.iter().all(|v| (v - 1e6).abs() < 5.0 * 1e3));
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let sd = (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / vals.len() as f64).sqrt();
        assert!((sd / 1e6 - 1e-3).abs() < 1e-4, "{}", sd / 1e6);
        assert_eq!(n, s.poisson_noise(7).unwrap());
        assert_ne!(n, s.poisson_noise(8).unwrap());
        s.g1[1] = -1.0;
        assert!(matches!(s.poisson_noise(1), Err(Error::NegativeMean(_))));
    }

    #[test]
    fn relative_noise_level() {
        let g = EnergyGrid { e0: 662.0, delta: 0.25, n_bins: 4000 };
        let mut s = Spectrum::zeros(g, 1, "h");
        s.g1.iter_mut().for_each(|v| *v = 3.7e-9);
        let n = s.with_relative_noise(0.005, 3).unwrap();
        let rel: Vec<f64> = n.g1.iter().map(|v| v / 3.7e-9 - 1.0).collect();
        let sd = (rel.iter().map(|r| r * r).sum::<f64>() / rel.len() as f64).sqrt();
        assert!((sd - 0.005).abs() < 0.0005, "{sd}");
    }
}
