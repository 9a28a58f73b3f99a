//! Scalar fields on a regular lattice.

use crate::error::{Error, Result};
use crate::geometry::Vec3;

/// Scalar field on `nx × ny × nz` cubic voxels, x-fastest. `origin` is the
/// outer corner of voxel `(0, 0, 0)`; voxel centres sit at
/// `origin + (i + ½)·voxel_size`.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelGrid {
    dims: [usize; 3],
    voxel_size: f64,
    origin: Vec3,
    data: Vec<f64>,
}

impl VoxelGrid {
    pub fn new(dims: [usize; 3], voxel_size: f64, origin: Vec3, data: Vec<f64>) -> Result<Self> {
        if !(voxel_size > 0.0 && voxel_size.is_finite()) {
            return Err(Error::GridMismatch(format!("voxel size {voxel_size} must be positive")));
        }
        let n = dims[0] * dims[1] * dims[2];
        if data.len() != n {
            return Err(Error::GridMismatch(format!("{} values for {n} voxels", data.len())));
        }
        Ok(VoxelGrid { dims, voxel_size, origin, data })
    }

    pub fn filled(dims: [usize; 3], voxel_size: f64, origin: Vec3, value: f64) -> Self {
        let n = dims[0] * dims[1] * dims[2];
        Self::new(dims, voxel_size, origin, vec![value; n]).expect("valid lattice")
    }

    /// Cube of `n³` voxels with side `side` centred on `center`.
    pub fn centered_cube(n: usize, side: f64, center: Vec3) -> Self {
        Self::filled([n, n, n], side / n as f64, center - Vec3::repeat(side / 2.0), 0.0)
    }

    /// Zero grid on the same lattice.
    pub fn zeros_like(&self) -> Self {
        Self::filled(self.dims, self.voxel_size, self.origin, 0.0)
    }

    pub fn with_data(&self, data: Vec<f64>) -> Result<Self> {
        Self::new(self.dims, self.voxel_size, self.origin, data)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn voxel_size(&self) -> f64 {
        self.voxel_size
    }

    pub fn voxel_volume(&self) -> f64 {
        self.voxel_size.powi(3)
    }

    pub fn origin(&self) -> Vec3 {
        self.origin
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, ix: usize, iy: usize, iz: usize) -> usize {
        ix + self.dims[0] * (iy + self.dims[1] * iz)
    }

    #[inline]
    pub fn get(&self, ix: usize, iy: usize, iz: usize) -> f64 {
        self.data[self.index(ix, iy, iz)]
    }

    #[inline]
    pub fn set(&mut self, ix: usize, iy: usize, iz: usize, v: f64) {
        let i = self.index(ix, iy, iz);
        self.data[i] = v;
    }

    pub fn coords_of_index(&self, i: usize) -> [usize; 3] {
        let [nx, ny, _] = self.dims;
        [i % nx, (i / nx) % ny, i / (nx * ny)]
    }

    pub fn center(&self, ix: usize, iy: usize, iz: usize) -> Vec3 {
        self.origin + Vec3::new(ix as f64 + 0.5, iy as f64 + 0.5, iz as f64 + 0.5) * self.voxel_size
    }

    pub fn center_of_index(&self, i: usize) -> Vec3 {
        let [ix, iy, iz] = self.coords_of_index(i);
        self.center(ix, iy, iz)
    }

    /// Corners `(lo, hi)` of the lattice box.
    pub fn bounds(&self) -> (Vec3, Vec3) {
        let ext = Vec3::new(self.dims[0] as f64, self.dims[1] as f64, self.dims[2] as f64) * self.voxel_size;
        (self.origin, self.origin + ext)
    }

    pub fn same_lattice(&self, other: &VoxelGrid) -> bool {
        self.dims == other.dims && self.voxel_size == other.voxel_size && self.origin == other.origin
    }

    pub fn check_same_lattice(&self, other: &VoxelGrid) -> Result<()> {
        if self.same_lattice(other) {
            Ok(())
        } else {
            Err(Error::GridMismatch(format!(
                "{:?}@{} vs {:?}@{}",
                self.dims, self.voxel_size, other.dims, other.voxel_size
            )))
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// `Σ value · voxel volume`.
    pub fn integral(&self) -> f64 {
        self.sum() * self.voxel_volume()
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> VoxelGrid {
        VoxelGrid {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..self.clone()
        }
    }

    /// Voxel containing `p`, if any.
    pub fn voxel_of(&self, p: &Vec3) -> Option<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let c = ((p[a] - self.origin[a]) / self.voxel_size).floor();
            if c < 0.0 || c >= self.dims[a] as f64 {
                return None;
            }
            out[a] = c as usize;
        }
        Some(out)
    }

    /// Nearest-voxel value, zero outside the box.
    pub fn sample_nearest(&self, p: &Vec3) -> f64 {
        self.voxel_of(p).map_or(0.0, |[x, y, z]| self.get(x, y, z))
    }

    /// Trilinear interpolation between voxel centres, edge values replicated
    /// up to the box faces and zero outside the box.
    pub fn sample_trilinear(&self, p: &Vec3) -> f64 {
        let mut i0 = [0usize; 3];
        let mut i1 = [0usize; 3];
        let mut f = [0.0; 3];
        for a in 0..3 {
            let u = (p[a] - self.origin[a]) / self.voxel_size;
            let n = self.dims[a];
            if !(u >= 0.0 && u <= n as f64) {
                return 0.0;
            }
            let c = u - 0.5;
            let fl = c.floor();
            let lo = fl as isize;
            f[a] = c - fl;
            i0[a] = lo.clamp(0, n as isize - 1) as usize;
            i1[a] = (lo + 1).clamp(0, n as isize - 1) as usize;
        }
        let g = |x: usize, y: usize, z: usize| self.data[x + self.dims[0] * (y + self.dims[1] * z)];
        let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
        let c00 = lerp(g(i0[0], i0[1], i0[2]), g(i1[0], i0[1], i0[2]), f[0]);
        let c10 = lerp(g(i0[0], i1[1], i0[2]), g(i1[0], i1[1], i0[2]), f[0]);
        let c01 = lerp(g(i0[0], i0[1], i1[2]), g(i1[0], i0[1], i1[2]), f[0]);
        let c11 = lerp(g(i0[0], i1[1], i1[2]), g(i1[0], i1[1], i1[2]), f[0]);
        lerp(lerp(c00, c10, f[1]), lerp(c01, c11, f[1]), f[2])
    }

    /// Box around every voxel with a nonzero value, grown by one voxel (the
    /// reach of trilinear interpolation) and clipped to the grid.
    pub fn nonzero_bounds(&self) -> Option<(Vec3, Vec3)> {
        let mut lo = [usize::MAX; 3];
        let mut hi = [0usize; 3];
        let mut any = false;
        for (i, &v) in self.data.iter().enumerate() {
            if v != 0.0 {
                any = true;
                let c = self.coords_of_index(i);
                for a in 0..3 {
                    lo[a] = lo[a].min(c[a]);
                    hi[a] = hi[a].max(c[a]);
                }
            }
        }
        if !any {
            return None;
        }
        let (blo, bhi) = self.bounds();
        let h = self.voxel_size;
        let mut out_lo = Vec3::zeros();
        let mut out_hi = Vec3::zeros();
        for a in 0..3 {
            out_lo[a] = (self.origin[a] + (lo[a] as f64 - 1.0) * h).max(blo[a]);
            out_hi[a] = (self.origin[a] + (hi[a] as f64 + 2.0) * h).min(bhi[a]);
        }
        Some((out_lo, out_hi))
    }

    /// Parameter interval `[t0, t1] ⊂ [0, 1]` of the segment `p0 → p1` inside the box.
    pub fn clip_segment(&self, p0: &Vec3, p1: &Vec3) -> Option<(f64, f64)> {
        let (lo, hi) = self.bounds();
        clip_to_box(&lo, &hi, p0, &(p1 - p0), 0.0, 1.0)
    }

    /// Visits the voxels crossed by the segment `p0 → p1` in order, calling
    /// `f(voxel index, t_enter, t_exit)` with parameters along the segment in
    /// `[0, 1]` (exact voxel-boundary traversal).
    pub fn traverse(&self, p0: &Vec3, p1: &Vec3, mut f: impl FnMut(usize, f64, f64)) {
        let dir = p1 - p0;
        let Some((t_in, t_out)) = self.clip_segment(p0, p1) else {
            return;
        };
        if t_out <= t_in {
            return;
        }
        // probe just past the entry so boundary starts pick the voxel ahead
        let entry = p0 + dir * (t_in + (t_out - t_in) * 1e-9);
        let mut idx = [0isize; 3];
        let mut step = [0isize; 3];
        let mut t_next = [f64::INFINITY; 3];
        let mut t_delta = [f64::INFINITY; 3];
        for a in 0..3 {
            let n = self.dims[a] as isize;
            let c = ((entry[a] - self.origin[a]) / self.voxel_size).floor() as isize;
            idx[a] = c.clamp(0, n - 1);
            if dir[a] > 0.0 {
                step[a] = 1;
                let edge = self.origin[a] + (idx[a] + 1) as f64 * self.voxel_size;
                t_next[a] = (edge - p0[a]) / dir[a];
                t_delta[a] = self.voxel_size / dir[a];
            } else if dir[a] < 0.0 {
                step[a] = -1;
                let edge = self.origin[a] + idx[a] as f64 * self.voxel_size;
                t_next[a] = (edge - p0[a]) / dir[a];
                t_delta[a] = -self.voxel_size / dir[a];
            }
        }
        let mut t = t_in;
        loop {
            let a = if t_next[0] <= t_next[1] && t_next[0] <= t_next[2] {
                0
            } else if t_next[1] <= t_next[2] {
                1
            } else {
                2
            };
            let t_exit = t_next[a].min(t_out);
            if t_exit > t {
                let i = idx[0] as usize + self.dims[0] * (idx[1] as usize + self.dims[1] * idx[2] as usize);
                f(i, t, t_exit);
            }
            if t_next[a] >= t_out {
                break;
            }
            t = t_exit;
            idx[a] += step[a];
            if idx[a] < 0 || idx[a] >= self.dims[a] as isize {
                break;
            }
            t_next[a] += t_delta[a];
        }
    }

    /// `∫ value dℓ` along the segment with exact per-voxel path lengths.
    pub fn line_integral(&self, p0: &Vec3, p1: &Vec3) -> f64 {
        let len = (p1 - p0).norm();
        let mut acc = 0.0;
        self.traverse(p0, p1, |i, a, b| acc += self.data[i] * (b - a));
        acc * len
    }
}

/// Slab clipping of `p0 + t·dir`, `t ∈ [t0, t1]`, against `[lo, hi]`.
pub fn clip_to_box(lo: &Vec3, hi: &Vec3, p0: &Vec3, dir: &Vec3, mut t0: f64, mut t1: f64) -> Option<(f64, f64)> {
    for a in 0..3 {
        if dir[a] == 0.0 {
            if p0[a] < lo[a] || p0[a] > hi[a] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / dir[a];
        let (mut ta, mut tb) = ((lo[a] - p0[a]) * inv, (hi[a] - p0[a]) * inv);
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
        }
        t0 = t0.max(ta);
        t1 = t1.min(tb);
        if t0 > t1 {
            return None;
        }
    }
    Some((t0, t1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn ramp() -> VoxelGrid {
        let mut g = VoxelGrid::filled([4, 5, 6], 0.5, Vec3::new(-1.0, -1.0, -1.5), 0.0);
        for iz in 0..6 {
            for iy in 0..5 {
                for ix in 0..4 {
                    let c = g.center(ix, iy, iz);
                    g.set(ix, iy, iz, 1.0 + 2.0 * c.x - c.y + 0.5 * c.z);
                }
            }
        }
        g
    }

    #[test]
    fn construction_checks() {
        assert!(VoxelGrid::new([2, 2, 2], 1.0, Vec3::zeros(), vec![0.0; 7]).is_err());
        assert!(VoxelGrid::new([2, 2, 2], 0.0, Vec3::zeros(), vec![0.0; 8]).is_err());
        let g = VoxelGrid::centered_cube(10, 10.0, Vec3::zeros());
        let (lo, hi) = g.bounds();
        assert_eq!(lo, Vec3::repeat(-5.0));
        assert_eq!(hi, Vec3::repeat(5.0));
        assert_eq!(g.coords_of_index(g.index(3, 4, 5)), [3, 4, 5]);
    }

    #[test]
    fn trilinear_is_exact_on_affine_interior() {
        let g = ramp();
        for p in [Vec3::new(-0.4, 0.1, -0.2), Vec3::new(0.6, 0.9, 0.8), Vec3::new(0.0, 0.0, 0.0)] {
            assert_relative_eq!(g.sample_trilinear(&p), 1.0 + 2.0 * p.x - p.y + 0.5 * p.z, epsilon = 1e-12);
        }
        assert_eq!(g.sample_trilinear(&Vec3::new(5.0, 0.0, 0.0)), 0.0);
        assert_eq!(g.sample_trilinear(&g.center(2, 3, 4)), g.get(2, 3, 4));
    }

    #[test]
    fn traversal_lengths_sum_to_chord() {
        let g = VoxelGrid::filled([7, 5, 9], 0.3, Vec3::new(-1.0, -0.7, -1.2), 1.0);
        let p0 = Vec3::new(-3.0, -2.0, -4.0);
        let p1 = Vec3::new(3.0, 1.5, 2.0);
        let (t0, t1) = g.clip_segment(&p0, &p1).unwrap();
        let chord = (t1 - t0) * (p1 - p0).norm();
        assert_relative_eq!(g.line_integral(&p0, &p1), chord, max_relative = 1e-12);
        // outside
        assert_eq!(g.line_integral(&Vec3::new(5.0, 5.0, 5.0), &Vec3::new(6.0, 5.0, 5.0)), 0.0);
        // axis-aligned
        let a = Vec3::new(-2.0, 0.0, 0.0);
        let b = Vec3::new(2.0, 0.0, 0.0);
        assert_relative_eq!(g.line_integral(&a, &b), 7.0 * 0.3, max_relative = 1e-12);
    }

    proptest! {
        #[test]
        fn traversal_matches_fine_sampling(
            p0 in prop::array::uniform3(-3.0..3.0f64),
            p1 in prop::array::uniform3(-3.0..3.0f64),
        ) {
            let g = ramp();
            let (p0, p1) = (Vec3::from(p0), Vec3::from(p1));
            prop_assume!((p1 - p0).norm() > 0.1);
            let exact = g.line_integral(&p0, &p1);
            let n = 20000;
            let l = (p1 - p0).norm();
            let mut fine = 0.0;
            for k in 0..n {
                let p = p0 + (p1 - p0) * ((k as f64 + 0.5) / n as f64);
                fine += g.sample_nearest(&p);
            }
            fine *= l / n as f64;
            prop_assert!((exact - fine).abs() < 2e-3 * (1.0 + exact.abs()), "{exact} vs {fine}");
        }

        #[test]
        fn line_integral_is_additive(
            p0 in prop::array::uniform3(-3.0..3.0f64),
            p1 in prop::array::uniform3(-3.0..3.0f64),
            f in 0.0..1.0f64,
        ) {
            let g = ramp();
            let (p0, p1) = (Vec3::from(p0), Vec3::from(p1));
            let k = p0 + (p1 - p0) * f;
            let whole = g.line_integral(&p0, &p1);
            let parts = g.line_integral(&p0, &k) + g.line_integral(&k, &p1);
            prop_assert!((whole - parts).abs() <= 1e-10 * (1.0 + whole.abs()));
        }
    }
}
