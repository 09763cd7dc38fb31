//! Regular anisotropic voxel grids, trilinear sampling and image pyramids.
//!
//! Grids are cell centered: `origin` is the world position of the centre of
//! voxel `(0, 0, 0)` and voxel `(i, j, k)` sits at
//! `origin + direction · (i·sx, j·sy, k·sz)`. Data are stored x-fastest.

use nalgebra::Matrix3;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::Vec3;

/// Hull tolerance in voxel units.
const HULL_TOL: f64 = 1e-9;

/// Geometry of a regular grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    dims: [usize; 3],
    spacing: [f64; 3],
    origin: Vec3,
    direction: Matrix3<f64>,
    v2w: Matrix3<f64>,
    w2v: Matrix3<f64>,
}

impl Grid {
    /// `direction` holds the world-space unit vectors of the voxel axes as columns.
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: Vec3, direction: Matrix3<f64>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::InvalidGrid(format!("dims must be positive, got {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(Error::InvalidGrid(format!("spacing must be positive, got {spacing:?}")));
        }
        if origin.iter().any(|v| !v.is_finite()) || direction.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidGrid("non-finite origin or direction".into()));
        }
        let mut dir = direction;
        for c in 0..3 {
            let n = dir.column(c).norm();
            if (n - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidGrid(format!("direction column {c} has length {n}")));
            }
            let col = dir.column(c) / n;
            dir.set_column(c, &col);
        }
        for a in 0..3 {
            for b in (a + 1)..3 {
                if dir.column(a).dot(&dir.column(b)).abs() >= 1e-9 {
                    return Err(Error::InvalidGrid("direction columns are not orthogonal".into()));
                }
            }
        }
        let s = Matrix3::from_diagonal(&Vec3::new(spacing[0], spacing[1], spacing[2]));
        let sinv = Matrix3::from_diagonal(&Vec3::new(1.0 / spacing[0], 1.0 / spacing[1], 1.0 / spacing[2]));
        Ok(Grid {
            dims,
            spacing,
            origin,
            direction: dir,
            v2w: dir * s,
            w2v: sinv * dir.transpose(),
        })
    }

    /// Grid with identity direction.
    pub fn axis_aligned(dims: [usize; 3], spacing: [f64; 3], origin: Vec3) -> Result<Self> {
        Self::new(dims, spacing, origin, Matrix3::identity())
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn origin(&self) -> Vec3 {
        self.origin
    }

    pub fn direction(&self) -> &Matrix3<f64> {
        &self.direction
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn min_spacing(&self) -> f64 {
        self.spacing.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    /// Volume of one voxel in mm³.
    pub fn voxel_volume(&self) -> f64 {
        self.spacing.iter().product()
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let i = idx % self.dims[0];
        let r = idx / self.dims[0];
        [i, r % self.dims[1], r / self.dims[1]]
    }

    #[inline]
    pub fn voxel_to_world(&self, c: &Vec3) -> Vec3 {
        self.origin + self.v2w * c
    }

    #[inline]
    pub fn world_to_voxel(&self, p: &Vec3) -> Vec3 {
        self.w2v * (p - self.origin)
    }

    /// World position of the centre of voxel `idx`.
    #[inline]
    pub fn voxel_center(&self, idx: usize) -> Vec3 {
        let [i, j, k] = self.coords(idx);
        self.voxel_to_world(&Vec3::new(i as f64, j as f64, k as f64))
    }

    /// World position halfway between the first and last voxel centres.
    pub fn center(&self) -> Vec3 {
        let c = Vec3::new(
            (self.dims[0] - 1) as f64 / 2.0,
            (self.dims[1] - 1) as f64 / 2.0,
            (self.dims[2] - 1) as f64 / 2.0,
        );
        self.voxel_to_world(&c)
    }

    /// True when the continuous voxel coordinate lies in the hull of voxel centres.
    pub fn in_hull(&self, c: &Vec3) -> bool {
        (0..3).all(|a| c[a] >= -HULL_TOL && c[a] <= (self.dims[a] - 1) as f64 + HULL_TOL)
    }

    /// World positions of the eight hull corners.
    pub fn hull_corners(&self) -> [Vec3; 8] {
        let mut out = [Vec3::zeros(); 8];
        for (n, corner) in out.iter_mut().enumerate() {
            let c = Vec3::new(
                if n & 1 == 0 { 0.0 } else { (self.dims[0] - 1) as f64 },
                if n & 2 == 0 { 0.0 } else { (self.dims[1] - 1) as f64 },
                if n & 4 == 0 { 0.0 } else { (self.dims[2] - 1) as f64 },
            );
            *corner = self.voxel_to_world(&c);
        }
        out
    }

    /// Geometry of the next coarser pyramid level: `ceil(dims / 2)` voxels,
    /// doubled spacing, and voxel `i` of the coarse grid centred on fine voxel `2i`.
    pub fn coarsen(&self) -> Grid {
        let dims = self.dims.map(|d| d.div_ceil(2));
        let spacing = self.spacing.map(|s| 2.0 * s);
        Grid::new(dims, spacing, self.origin, self.direction).expect("coarsened grid stays valid")
    }

    /// Same geometry up to `tol` (mm for origin, relative for spacing).
    pub fn same_as(&self, other: &Grid, tol: f64) -> bool {
        self.dims == other.dims
            && (0..3).all(|a| (self.spacing[a] - other.spacing[a]).abs() <= tol * self.spacing[a])
            && (self.origin - other.origin).norm() <= tol
            && (self.direction - other.direction).norm() <= tol
    }

    pub(crate) fn check_same(&self, other: &Grid, what: &str) -> Result<()> {
        if self.same_as(other, 1e-9) {
            Ok(())
        } else {
            Err(Error::GridMismatch(what.to_string()))
        }
    }

    /// Derivative conversion: world gradient from a gradient in voxel coordinates.
    #[inline]
    /// `(M, b, W)` with `c_other = M·c_self + b + W·d` for the voxel
    /// coordinate in `other` of a point at voxel `c_self` moved by world `d`.
    pub(crate) fn voxel_map_to(&self, other: &Grid) -> (Matrix3<f64>, Vec3, Matrix3<f64>) {
        (other.w2v * self.v2w, other.w2v * (self.origin - other.origin), other.w2v)
    }

    pub(crate) fn voxel_grad_to_world(&self, g: &Vec3) -> Vec3 {
        self.w2v.transpose() * g
    }

    /// Locates the interpolation cell for a continuous voxel coordinate.
    ///
    /// Without `extrapolate`, points outside the hull yield `None`; with it the
    /// boundary cell is used and the fractions may leave `[0, 1]`.
    #[inline]
    pub(crate) fn cell(&self, c: &Vec3, extrapolate: bool) -> Option<Cell> {
        let mut i0 = [0usize; 3];
        let mut i1 = [0usize; 3];
        let mut t = [0.0; 3];
        for a in 0..3 {
            let n = self.dims[a];
            let x = c[a];
            // the negated range test also rejects NaN and infinities
            let inside = if extrapolate { x.is_finite() } else { x >= -HULL_TOL && x <= (n - 1) as f64 + HULL_TOL };
            if !inside {
                return None;
            }
            if n == 1 {
                continue;
            }
            // truncation plus correction; `f64::floor` is a libm call on
            // baseline x86-64
            let tr = x as isize;
            let fl = if (tr as f64) > x { tr - 1 } else { tr };
            let base = fl.clamp(0, n as isize - 2) as usize;
            let mut frac = x - base as f64;
            if !extrapolate {
                frac = frac.clamp(0.0, 1.0);
            }
            i0[a] = base;
            i1[a] = base + 1;
            t[a] = frac;
        }
        let nx = self.dims[0];
        let nxy = nx * self.dims[1];
        Some(Cell {
            x: [i0[0], i1[0]],
            y: [i0[1] * nx, i1[1] * nx],
            z: [i0[2] * nxy, i1[2] * nxy],
            t,
        })
    }
}

/// Trilinear interpolation cell: per-axis index offsets and fractions.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Cell {
    x: [usize; 2],
    y: [usize; 2],
    z: [usize; 2],
    t: [f64; 3],
}

impl Cell {
    /// Index of the lower corner.
    #[inline]
    pub(crate) fn base(&self) -> usize {
        self.x[0] + self.y[0] + self.z[0]
    }

    #[inline]
    pub(crate) fn interp<F: Fn(usize) -> f64>(&self, f: F) -> f64 {
        let [tx, ty, tz] = self.t;
        let line = |y: usize, z: usize| {
            let a = f(self.x[0] + y + z);
            let b = f(self.x[1] + y + z);
            a + tx * (b - a)
        };
        let plane = |z: usize| {
            let a = line(self.y[0], z);
            let b = line(self.y[1], z);
            a + ty * (b - a)
        };
        let a = plane(self.z[0]);
        let b = plane(self.z[1]);
        a + tz * (b - a)
    }

    /// Value and gradient with respect to continuous voxel coordinates.
    #[inline]
    pub(crate) fn interp_grad<F: Fn(usize) -> f64>(&self, f: F) -> (f64, Vec3) {
        let [tx, ty, tz] = self.t;
        let mut v = [0.0; 8];
        for (n, slot) in v.iter_mut().enumerate() {
            *slot = f(self.x[n & 1] + self.y[(n >> 1) & 1] + self.z[(n >> 2) & 1]);
        }
        // edges along x
        let e00 = v[1] - v[0];
        let e10 = v[3] - v[2];
        let e01 = v[5] - v[4];
        let e11 = v[7] - v[6];
        let l00 = v[0] + tx * e00;
        let l10 = v[2] + tx * e10;
        let l01 = v[4] + tx * e01;
        let l11 = v[6] + tx * e11;
        let p0 = l00 + ty * (l10 - l00);
        let p1 = l01 + ty * (l11 - l01);
        let value = p0 + tz * (p1 - p0);

        let dx0 = e00 + ty * (e10 - e00);
        let dx1 = e01 + ty * (e11 - e01);
        let dx = dx0 + tz * (dx1 - dx0);
        let dy = (l10 - l00) + tz * ((l11 - l01) - (l10 - l00));
        let dz = p1 - p0;
        // A collapsed axis (n == 1) has identical corner indices, so its derivative is 0.
        (value, Vec3::new(dx, dy, dz))
    }
}

/// Scalar volume on a regular grid, 32-bit samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume3D {
    grid: Grid,
    data: Vec<f32>,
}

impl Volume3D {
    pub fn new(grid: Grid, data: Vec<f32>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::InvalidGrid(format!(
                "data length {} does not match {} voxels",
                data.len(),
                grid.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidGrid("volume contains non-finite values".into()));
        }
        Ok(Volume3D { grid, data })
    }

    pub fn zeros(grid: Grid) -> Self {
        let n = grid.len();
        Volume3D { grid, data: vec![0.0; n] }
    }

    /// Fills the volume by evaluating `f` at every voxel centre (world mm).
    pub fn from_fn<F: Fn(&Vec3) -> f64 + Sync>(grid: Grid, f: F) -> Self {
        let data: Vec<f32> = (0..grid.len())
            .into_par_iter()
            .map(|idx| f(&grid.voxel_center(idx)) as f32)
            .collect();
        Volume3D { grid, data }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f32 {
        self.data[self.grid.index(i, j, k)]
    }

    /// (min, max) of the stored values.
    pub fn range(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    /// Trilinear value at a world point; zero outside the hull of voxel centres.
    pub fn sample_trilinear(&self, p: &Vec3) -> f64 {
        let c = self.grid.world_to_voxel(p);
        match self.grid.cell(&c, false) {
            Some(cell) => cell.interp(|i| self.data[i] as f64),
            None => 0.0,
        }
    }

    /// Value and world gradient at continuous voxel coordinate `c`; zero
    /// outside the hull. `flat[base]` marks cells whose eight corners are all
    /// zero, which are answered without interpolating.
    #[inline]
    pub(crate) fn sample_voxel_with_gradient(&self, c: &Vec3, flat: &[bool]) -> (f64, Vec3) {
        match self.grid.cell(c, false) {
            Some(cell) if flat[cell.base()] => (0.0, Vec3::zeros()),
            Some(cell) => {
                let (v, g) = cell.interp_grad(|i| self.data[i] as f64);
                (v, self.grid.voxel_grad_to_world(&g))
            }
            None => (0.0, Vec3::zeros()),
        }
    }

    /// Per voxel: true when the cell with this lower corner (clipped at the
    /// upper faces) has only zero corners.
    pub(crate) fn flat_cells(&self) -> Vec<bool> {
        let [nx, ny, nz] = self.grid.dims;
        let zero = |i: usize, j: usize, k: usize| self.data[(k * ny + j) * nx + i] == 0.0;
        let mut out = vec![false; self.data.len()];
        out.par_chunks_mut(nx).enumerate().for_each(|(r, row)| {
            let (j, k) = (r % ny, r / ny);
            let (j1, k1) = ((j + 1).min(ny - 1), (k + 1).min(nz - 1));
            for (i, o) in row.iter_mut().enumerate() {
                let i1 = (i + 1).min(nx - 1);
                *o = [i, i1].iter().all(|&a| {
                    zero(a, j, k) && zero(a, j1, k) && zero(a, j, k1) && zero(a, j1, k1)
                });
            }
        });
        out
    }

    /// Smooths with (1/4, 1/2, 1/4) along each axis and keeps every second voxel.
    pub fn downsample(&self) -> Result<Volume3D> {
        if self.grid.dims.iter().any(|&d| d < 2) {
            return Err(Error::DimensionTooSmall(self.grid.dims));
        }
        let mut buf: Vec<f64> = self.data.iter().map(|&v| v as f64).collect();
        for axis in 0..3 {
            buf = smooth_axis(&buf, self.grid.dims, axis);
        }
        let coarse = self.grid.coarsen();
        let [cx, cy, cz] = coarse.dims;
        let mut data = Vec::with_capacity(coarse.len());
        for k in 0..cz {
            for j in 0..cy {
                for i in 0..cx {
                    data.push(buf[self.grid.index(2 * i, 2 * j, 2 * k)] as f32);
                }
            }
        }
        Ok(Volume3D { grid: coarse, data })
    }
}

/// 3-tap binomial smoothing along one axis, mirror (reflect about the end voxel) boundaries.
fn smooth_axis(src: &[f64], dims: [usize; 3], axis: usize) -> Vec<f64> {
    let n = dims[axis];
    let stride = match axis {
        0 => 1,
        1 => dims[0],
        _ => dims[0] * dims[1],
    };
    if n == 1 {
        return src.to_vec();
    }
    let nx = dims[0];
    let ny = dims[1];
    let mut out = vec![0.0; src.len()];
    out.par_chunks_mut(nx * ny).enumerate().for_each(|(k, slab)| {
        for (local, o) in slab.iter_mut().enumerate() {
            let idx = local + k * nx * ny;
            let pos = match axis {
                0 => local % nx,
                1 => local / nx,
                _ => k,
            };
            let prev = if pos == 0 { idx + stride } else { idx - stride };
            let next = if pos == n - 1 { idx - stride } else { idx + stride };
            *o = 0.25 * src[prev] + 0.5 * src[idx] + 0.25 * src[next];
        }
    });
    out
}

/// Binary mask (foreground = `true`) on a regular grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask3D {
    grid: Grid,
    data: Vec<bool>,
}

impl Mask3D {
    pub fn new(grid: Grid, data: Vec<bool>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::InvalidGrid(format!(
                "mask length {} does not match {} voxels",
                data.len(),
                grid.len()
            )));
        }
        Ok(Mask3D { grid, data })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn foreground_count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn foreground_fraction(&self) -> f64 {
        self.foreground_count() as f64 / self.data.len() as f64
    }

    /// The mask as a 0/1 scalar volume.
    pub fn to_volume(&self) -> Volume3D {
        Volume3D {
            grid: self.grid.clone(),
            data: self.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        }
    }
}

/// Multiresolution stack, index 0 = finest.
#[derive(Clone, Debug)]
pub struct Pyramid {
    levels: Vec<Volume3D>,
}

impl Pyramid {
    pub fn build(v: &Volume3D, levels: usize) -> Result<Pyramid> {
        if levels == 0 {
            return Err(Error::InvalidArgument("pyramid needs at least one level".into()));
        }
        let mut out = Vec::with_capacity(levels);
        out.push(v.clone());
        for _ in 1..levels {
            let next = out.last().expect("non-empty").downsample()?;
            out.push(next);
        }
        Ok(Pyramid { levels: out })
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn level(&self, l: usize) -> &Volume3D {
        &self.levels[l]
    }

    pub fn levels(&self) -> &[Volume3D] {
        &self.levels
    }
}

/// Builds a pyramid with exactly `levels` entries; level 0 is `v` itself.
pub fn build_pyramid(v: &Volume3D, levels: usize) -> Result<Pyramid> {
    Pyramid::build(v, levels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Rotation3;

    fn grid(dims: [usize; 3], spacing: [f64; 3]) -> Grid {
        Grid::axis_aligned(dims, spacing, Vec3::new(1.0, -2.0, 3.0)).unwrap()
    }

    #[test]
    fn world_voxel_mapping() {
        let g = grid([4, 4, 4], [1.0, 2.0, 4.0]);
        assert_eq!(g.world_to_voxel(&g.origin()), Vec3::zeros());
        let c = g.world_to_voxel(&(g.origin() + Vec3::new(1.0, 2.0, 4.0)));
        assert!((c - Vec3::new(1.0, 1.0, 1.0)).norm() < 1e-12);

        let rot = *Rotation3::from_axis_angle(&Vec3::z_axis(), std::f64::consts::FRAC_PI_2).matrix();
        let g = Grid::new([3, 3, 3], [1.0; 3], Vec3::zeros(), rot).unwrap();
        let c = g.world_to_voxel(&Vec3::new(0.0, 1.0, 0.0));
        assert!((c - Vec3::new(1.0, 0.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn rejects_bad_direction() {
        let mut d = Matrix3::identity();
        d[(0, 1)] = 0.1;
        d[(1, 1)] = (1.0f64 - 0.01).sqrt();
        assert!(Grid::new([2, 2, 2], [1.0; 3], Vec3::zeros(), d).is_err());
        assert!(Grid::axis_aligned([2, 2, 2], [1.0, 0.0, 1.0], Vec3::zeros()).is_err());
    }

    #[test]
    fn trilinear_nodes_midpoints_and_outside() {
        let g = grid([2, 1, 1], [1.5, 1.0, 1.0]);
        let v = Volume3D::new(g.clone(), vec![2.0, 4.0]).unwrap();
        assert_eq!(v.sample_trilinear(&g.voxel_center(1)), 4.0);
        let mid = (g.voxel_center(0) + g.voxel_center(1)) / 2.0;
        assert!((v.sample_trilinear(&mid) - 3.0).abs() < 1e-12);
        let out = g.voxel_center(1) + Vec3::new(1.5, 0.0, 0.0);
        assert_eq!(v.sample_trilinear(&out), 0.0);
    }

    #[test]
    fn downsample_dims_and_constants() {
        let g = grid([9, 8, 7], [1.0; 3]);
        let v = Volume3D::new(g, vec![5.0; 9 * 8 * 7]).unwrap();
        let d = v.downsample().unwrap();
        assert_eq!(d.grid().dims(), [5, 4, 4]);
        assert_eq!(d.grid().spacing(), [2.0; 3]);
        assert!(d.data().iter().all(|&x| x == 5.0));
    }

    #[test]
    fn downsample_ramp_matches_hand_convolution() {
        let g = grid([8, 2, 2], [1.0; 3]);
        let v = Volume3D::from_fn(g.clone(), |p| g.world_to_voxel(p)[0]);
        let d = v.downsample().unwrap();
        // reflect: x[-1] = x[1], x[8] = x[6]
        let ramp: Vec<f64> = (0..8).map(|i| i as f64).collect();
        let at = |i: isize| ramp[if i < 0 { (-i) as usize } else if i > 7 { (14 - i) as usize } else { i as usize }];
        for ci in 0..4 {
            let i = 2 * ci as isize;
            let expect = 0.25 * at(i - 1) + 0.5 * at(i) + 0.25 * at(i + 1);
            assert!((d.get(ci, 0, 0) as f64 - expect).abs() < 1e-6, "{ci}");
        }
        assert!((d.get(0, 0, 0) - 0.5).abs() < 1e-6);
    }

    #[test]
    fn downsample_rejects_thin_axis() {
        let v = Volume3D::zeros(grid([4, 1, 4], [1.0; 3]));
        assert!(matches!(v.downsample(), Err(Error::DimensionTooSmall(_))));
    }

    #[test]
    fn pyramid_levels() {
        let v = Volume3D::new(grid([64, 64, 64], [1.0; 3]), vec![3.0; 64 * 64 * 64]).unwrap();
        let p = build_pyramid(&v, 1).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p.level(0), &v);
        let p = build_pyramid(&v, 3).unwrap();
        let dims: Vec<_> = p.levels().iter().map(|l| l.grid().dims()).collect();
        assert_eq!(dims, vec![[64; 3], [32; 3], [16; 3]]);
        assert!(p.levels().iter().all(|l| l.data().iter().all(|&x| x == 3.0)));
    }
}
