//! Rigid transforms, dense displacement fields and their application to
//! images and points.
//!
//! A [`DeformationField`] stores a displacement `u(x)` in world mm at every
//! voxel centre `x` of a reference grid; the mapped point is `x + u(x)`.
//! Rigid motion is folded into the same representation as `u(x) = M·x − x`.

use log::warn;
use nalgebra::{Matrix3, Matrix4};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{Grid, Volume3D};
use crate::metrics::{Landmark, LandmarkSet};
use crate::Vec3;

/// Six-parameter rigid motion `p ↦ Q(angles)·(p − center) + center + translation`.
///
/// `Q = Rz(angles[2]) · Ry(angles[1]) · Rx(angles[0])`, angles in radians.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidParams {
    pub angles: [f64; 3],
    pub translation: Vec3,
    pub center: Vec3,
}

impl RigidParams {
    pub fn identity(center: Vec3) -> Self {
        RigidParams { angles: [0.0; 3], translation: Vec3::zeros(), center }
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        euler_zyx(self.angles)
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation() * (p - self.center) + self.center + self.translation
    }
}

/// Wraps an angle into (−π, π].
pub fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::PI;
    let mut w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    w
}

fn rx(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

fn ry(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

fn rz(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

fn drx(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(0.0, 0.0, 0.0, 0.0, -s, -c, 0.0, c, -s)
}

fn dry(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(-s, 0.0, c, 0.0, 0.0, 0.0, -c, 0.0, -s)
}

fn drz(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(-s, -c, 0.0, c, -s, 0.0, 0.0, 0.0, 0.0)
}

/// Rotation `Rz · Ry · Rx`.
pub fn euler_zyx(angles: [f64; 3]) -> Matrix3<f64> {
    rz(angles[2]) * ry(angles[1]) * rx(angles[0])
}

/// Partial derivatives of [`euler_zyx`] with respect to each angle.
pub(crate) fn euler_zyx_partials(angles: [f64; 3]) -> [Matrix3<f64>; 3] {
    let [a, b, c] = angles;
    [
        rz(c) * ry(b) * drx(a),
        rz(c) * dry(b) * rx(a),
        drz(c) * ry(b) * rx(a),
    ]
}

/// Euler angles of a rotation matrix in the z·y·x convention.
pub fn rotation_to_euler(q: &Matrix3<f64>) -> [f64; 3] {
    let cb = (q[(0, 0)] * q[(0, 0)] + q[(1, 0)] * q[(1, 0)]).sqrt();
    let b = (-q[(2, 0)]).atan2(cb);
    if cb > 1e-12 {
        [q[(2, 1)].atan2(q[(2, 2)]), b, q[(1, 0)].atan2(q[(0, 0)])]
    } else {
        // gimbal lock: fold the whole x/z rotation into x
        [(-q[(1, 2)]).atan2(q[(1, 1)]), b, 0.0]
    }
}

/// Homogeneous 4×4 world-to-world transform, row-major.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Matrix44(pub [[f64; 4]; 4]);

impl Matrix44 {
    pub fn identity() -> Self {
        Matrix44::from_parts(&Matrix3::identity(), &Vec3::zeros())
    }

    pub fn from_parts(linear: &Matrix3<f64>, translation: &Vec3) -> Self {
        let mut m = [[0.0; 4]; 4];
        for (r, row) in m.iter_mut().enumerate().take(3) {
            for (c, v) in row.iter_mut().enumerate().take(3) {
                *v = linear[(r, c)];
            }
            row[3] = translation[r];
        }
        m[3] = [0.0, 0.0, 0.0, 1.0];
        Matrix44(m)
    }

    /// Builds from 16 row-major numbers, checking the bottom row.
    pub fn from_row_major(v: &[f64; 16]) -> Option<Self> {
        let mut m = [[0.0; 4]; 4];
        for r in 0..4 {
            m[r].copy_from_slice(&v[4 * r..4 * r + 4]);
        }
        let bottom = [0.0, 0.0, 0.0, 1.0];
        if m[3].iter().zip(bottom).any(|(a, b)| (a - b).abs() > 1e-9) || v.iter().any(|x| !x.is_finite()) {
            return None;
        }
        m[3] = bottom;
        Some(Matrix44(m))
    }

    pub fn linear(&self) -> Matrix3<f64> {
        Matrix3::from_fn(|r, c| self.0[r][c])
    }

    pub fn translation(&self) -> Vec3 {
        Vec3::new(self.0[0][3], self.0[1][3], self.0[2][3])
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.linear() * p + self.translation()
    }

    pub fn to_nalgebra(&self) -> Matrix4<f64> {
        Matrix4::from_fn(|r, c| self.0[r][c])
    }

    pub fn max_abs_diff(&self, other: &Matrix44) -> f64 {
        let mut d: f64 = 0.0;
        for r in 0..4 {
            for c in 0..4 {
                d = d.max((self.0[r][c] - other.0[r][c]).abs());
            }
        }
        d
    }
}

pub fn rigid_to_matrix(r: &RigidParams) -> Matrix44 {
    let q = r.rotation();
    Matrix44::from_parts(&q, &(r.center + r.translation - q * r.center))
}

/// Nearest rotation of the linear part (polar decomposition) and its
/// Frobenius distance from the input.
pub fn polar_rotation(a: &Matrix3<f64>) -> Result<(Matrix3<f64>, f64)> {
    let det = a.determinant();
    if !(det > 0.0) {
        return Err(Error::NonOrientationPreserving(det));
    }
    let svd = a.svd(true, true);
    let u = svd.u.expect("u requested");
    let vt = svd.v_t.expect("v_t requested");
    let r = u * vt;
    Ok((r, (a - r).norm()))
}

/// Result of [`matrix_to_rigid`]: the rigid parameters and how far the
/// input's linear block was from a rotation.
#[derive(Clone, Copy, Debug)]
pub struct RigidExtraction {
    pub params: RigidParams,
    pub frobenius_deviation: f64,
}

impl RigidExtraction {
    /// Deviations above this emit a warning.
    pub const WARN_THRESHOLD: f64 = 1e-6;

    pub fn was_rigid(&self) -> bool {
        self.frobenius_deviation <= Self::WARN_THRESHOLD
    }
}

/// Projects a 4×4 matrix onto rigid parameters about `center`.
/// Scale and shear are discarded with a warning.
pub fn matrix_to_rigid(m: &Matrix44, center: Vec3) -> Result<RigidExtraction> {
    let (q, dev) = polar_rotation(&m.linear())?;
    if dev > RigidExtraction::WARN_THRESHOLD {
        warn!("initial matrix is not rigid (Frobenius deviation {dev:.3e}); using its nearest rotation");
    }
    let angles = rotation_to_euler(&q);
    let q = euler_zyx(angles);
    let translation = m.translation() + q * center - center;
    Ok(RigidExtraction {
        params: RigidParams { angles, translation, center },
        frobenius_deviation: dev,
    })
}

/// Dense displacement field in world mm on a reference grid. Components are
/// stored planar: all `ux`, then all `uy`, then all `uz`.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformationField {
    grid: Grid,
    data: Vec<f64>,
}

impl DeformationField {
    pub fn zeros(grid: Grid) -> Self {
        let n = grid.len();
        DeformationField { grid, data: vec![0.0; 3 * n] }
    }

    pub fn from_planar(grid: Grid, data: Vec<f64>) -> Result<Self> {
        if data.len() != 3 * grid.len() {
            return Err(Error::InvalidGrid(format!(
                "field data length {} does not match 3 x {} voxels",
                data.len(),
                grid.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidGrid("field contains non-finite values".into()));
        }
        Ok(DeformationField { grid, data })
    }

    /// Evaluates `u` at every voxel centre.
    pub fn from_fn<F: Fn(&Vec3) -> Vec3 + Sync>(grid: Grid, f: F) -> Self {
        let n = grid.len();
        let vals: Vec<Vec3> = (0..n).into_par_iter().map(|i| f(&grid.voxel_center(i))).collect();
        let mut data = vec![0.0; 3 * n];
        for (i, v) in vals.iter().enumerate() {
            for d in 0..3 {
                data[d * n + i] = v[d];
            }
        }
        DeformationField { grid, data }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn component(&self, d: usize) -> &[f64] {
        let n = self.grid.len();
        &self.data[d * n..(d + 1) * n]
    }

    #[inline]
    pub fn at(&self, idx: usize) -> Vec3 {
        let n = self.grid.len();
        Vec3::new(self.data[idx], self.data[n + idx], self.data[2 * n + idx])
    }

    /// Largest displacement length in mm.
    pub fn max_norm(&self) -> f64 {
        (0..self.grid.len()).map(|i| self.at(i).norm()).fold(0.0, f64::max)
    }

    /// Trilinear displacement at a world point; `None` outside the grid hull.
    pub fn sample(&self, p: &Vec3) -> Option<Vec3> {
        let c = self.grid.world_to_voxel(p);
        let cell = self.grid.cell(&c, false)?;
        Some(self.sample_cell(&cell))
    }

    fn sample_cell(&self, cell: &crate::grid::Cell) -> Vec3 {
        let n = self.grid.len();
        Vec3::new(
            cell.interp(|i| self.data[i]),
            cell.interp(|i| self.data[n + i]),
            cell.interp(|i| self.data[2 * n + i]),
        )
    }

    /// Trilinear displacement, extrapolating linearly from the boundary cell.
    pub(crate) fn sample_extrapolated(&self, p: &Vec3) -> Vec3 {
        let c = self.grid.world_to_voxel(p);
        let cell = self.grid.cell(&c, true).expect("finite coordinate");
        self.sample_cell(&cell)
    }
}

/// `u(x) = M·x − x` at every voxel centre of `grid`.
pub fn rigid_to_field(r: &RigidParams, grid: &Grid) -> DeformationField {
    let m = rigid_to_matrix(r);
    DeformationField::from_fn(grid.clone(), |x| m.apply(x) - x)
}

/// Deformed template on the field's grid: `out(x) = T(x + u(x))`.
pub fn warp_image(template: &Volume3D, field: &DeformationField) -> Volume3D {
    let g = field.grid();
    let data: Vec<f32> = (0..g.len())
        .into_par_iter()
        .map(|i| template.sample_trilinear(&(g.voxel_center(i) + field.at(i))) as f32)
        .collect();
    Volume3D::new(g.clone(), data).expect("finite samples")
}

/// Landmarks moved by a field, plus ids that fell outside the field grid
/// (those keep zero displacement).
#[derive(Clone, Debug)]
pub struct WarpedPoints {
    pub points: LandmarkSet,
    pub outside: Vec<String>,
}

/// `p' = p + u(p)` with trilinear `u`.
pub fn warp_points(field: &DeformationField, pts: &LandmarkSet) -> WarpedPoints {
    let mut outside = Vec::new();
    let entries = pts
        .iter()
        .map(|l| {
            let u = field.sample(&l.position).unwrap_or_else(|| {
                outside.push(l.id.clone());
                Vec3::zeros()
            });
            Landmark { id: l.id.clone(), position: l.position + u }
        })
        .collect();
    WarpedPoints {
        points: LandmarkSet::new(entries).expect("ids unchanged"),
        outside,
    }
}

/// Checks that every hull corner of `target` lies within one voxel of the
/// hull of `source`, measured in `source` voxels.
fn check_extent(source: &Grid, target: &Grid) -> Result<()> {
    let dims = source.dims();
    for corner in target.hull_corners() {
        let c = source.world_to_voxel(&corner);
        for a in 0..3 {
            let hi = (dims[a] - 1) as f64 + 1.0 + 1e-9;
            if c[a] < -1.0 - 1e-9 || c[a] > hi {
                return Err(Error::ExtentMismatch);
            }
        }
    }
    Ok(())
}

/// Resamples displacement vectors onto another grid covering the same extent.
pub fn resample_field(field: &DeformationField, target: &Grid) -> Result<DeformationField> {
    check_extent(field.grid(), target)?;
    Ok(DeformationField::from_fn(target.clone(), |x| field.sample_extrapolated(x)))
}

/// Transfers a coarse-level field to a finer grid (vectors are in mm, so
/// no rescaling is needed).
pub fn prolong_field(field: &DeformationField, finer: &Grid) -> Result<DeformationField> {
    resample_field(field, finer)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    fn grid() -> Grid {
        Grid::axis_aligned([6, 5, 4], [1.0, 1.5, 2.0], Vec3::new(-3.0, -2.0, -1.0)).unwrap()
    }

    #[test]
    fn rigid_matrix_examples() {
        let id = rigid_to_matrix(&RigidParams::identity(Vec3::new(4.0, 5.0, 6.0)));
        assert!(id.max_abs_diff(&Matrix44::identity()) < 1e-15);
        let t = RigidParams { angles: [0.0; 3], translation: Vec3::new(1.0, 2.0, 3.0), center: Vec3::zeros() };
        let m = rigid_to_matrix(&t);
        assert_eq!(m.translation(), Vec3::new(1.0, 2.0, 3.0));
        assert_eq!(m.linear(), Matrix3::identity());
        let r = RigidParams { angles: [0.0, 0.0, FRAC_PI_2], translation: Vec3::zeros(), center: Vec3::zeros() };
        let p = rigid_to_matrix(&r).apply(&Vec3::new(1.0, 0.0, 0.0));
        assert!((p - Vec3::new(0.0, 1.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn matrix_to_rigid_identity_and_scale() {
        let e = matrix_to_rigid(&Matrix44::identity(), Vec3::new(1.0, 1.0, 1.0)).unwrap();
        assert_eq!(e.params.angles, [0.0; 3]);
        assert!(e.params.translation.norm() < 1e-12);
        assert!(e.was_rigid());

        let scaled = Matrix44::from_parts(&(Matrix3::identity() * 2.0), &Vec3::zeros());
        let e = matrix_to_rigid(&scaled, Vec3::zeros()).unwrap();
        assert!(e.params.rotation().relative_eq(&Matrix3::identity(), 1e-12, 1e-12));
        assert!(!e.was_rigid());

        let flip = Matrix44::from_parts(&Matrix3::from_diagonal(&Vec3::new(1.0, 1.0, -1.0)), &Vec3::zeros());
        assert!(matches!(matrix_to_rigid(&flip, Vec3::zeros()), Err(Error::NonOrientationPreserving(_))));
    }

    #[test]
    fn euler_partials_match_finite_differences() {
        let a = [0.3, -0.4, 1.1];
        let parts = euler_zyx_partials(a);
        for k in 0..3 {
            let mut p = a;
            let mut m = a;
            p[k] += 1e-6;
            m[k] -= 1e-6;
            let fd = (euler_zyx(p) - euler_zyx(m)) / 2e-6;
            assert!((fd - parts[k]).norm() < 1e-8);
        }
    }

    #[test]
    fn rigid_field_examples() {
        let g = grid();
        let z = rigid_to_field(&RigidParams::identity(g.center()), &g);
        assert!(z.as_slice().iter().all(|&v| v == 0.0));
        let t = RigidParams { angles: [0.0; 3], translation: Vec3::new(0.5, -1.0, 2.0), center: g.center() };
        let f = rigid_to_field(&t, &g);
        assert!((0..g.len()).all(|i| (f.at(i) - t.translation).norm() < 1e-12));
        let r = RigidParams { angles: [0.0, 0.0, FRAC_PI_2], translation: Vec3::zeros(), center: g.center() };
        let f = rigid_to_field(&r, &g);
        let m = rigid_to_matrix(&r);
        for idx in [0, 7, 19, 33, 48, 60, 77, 90, 101, 119] {
            let x = g.voxel_center(idx);
            assert!((f.at(idx) - (m.apply(&x) - x)).norm() < 1e-12);
        }
    }

    #[test]
    fn warp_image_identity_shift_and_outside() {
        let g = grid();
        let affine = |p: &Vec3| 2.0 * p.x - 0.5 * p.y + 0.25 * p.z + 1.0;
        let t = Volume3D::from_fn(g.clone(), affine);
        let w = warp_image(&t, &DeformationField::zeros(g.clone()));
        assert_eq!(w, t);

        // template shifted by −s, warped by +s recovers the original inside the overlap
        let s = Vec3::new(0.4, 0.3, -0.2);
        let shifted = Volume3D::from_fn(g.clone(), |p| affine(&(p - s)));
        let field = DeformationField::from_fn(g.clone(), |_| s);
        let w = warp_image(&shifted, &field);
        for idx in 0..g.len() {
            let x = g.voxel_center(idx);
            if g.in_hull(&g.world_to_voxel(&(x + s))) {
                assert!((w.data()[idx] as f64 - affine(&x)).abs() < 1e-5);
            }
        }

        let far = DeformationField::from_fn(g.clone(), |_| Vec3::new(100.0, 0.0, 0.0));
        assert!(warp_image(&t, &far).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn warp_points_examples() {
        let g = Grid::axis_aligned([21, 3, 3], [1.0; 3], Vec3::new(0.0, -1.0, -1.0)).unwrap();
        let pts = LandmarkSet::new(vec![
            Landmark { id: "1".into(), position: Vec3::new(10.0, 0.0, 0.0) },
            Landmark { id: "2".into(), position: Vec3::new(3.3, 0.5, -0.2) },
            Landmark { id: "3".into(), position: Vec3::new(30.0, 0.0, 0.0) },
        ])
        .unwrap();
        let w = warp_points(&DeformationField::zeros(g.clone()), &pts);
        assert_eq!(w.points, pts);
        assert_eq!(w.outside, vec!["3".to_string()]);

        let c = warp_points(&DeformationField::from_fn(g.clone(), |_| Vec3::new(1.0, 2.0, 3.0)), &pts);
        assert_eq!(c.points.get("1").unwrap(), Vec3::new(11.0, 2.0, 3.0));

        let lin = warp_points(&DeformationField::from_fn(g, |p| Vec3::new(0.1 * p.x, 0.0, 0.0)), &pts);
        assert!((lin.points.get("1").unwrap() - Vec3::new(11.0, 0.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn prolong_examples() {
        let fine = Grid::axis_aligned([8, 7, 6], [1.0, 1.0, 1.5], Vec3::new(2.0, 0.0, 1.0)).unwrap();
        let coarse = fine.coarsen();
        let z = prolong_field(&DeformationField::zeros(coarse.clone()), &fine).unwrap();
        assert!(z.as_slice().iter().all(|&v| v == 0.0));
        let k = Vec3::new(0.5, -0.25, 2.0);
        let c = prolong_field(&DeformationField::from_fn(coarse.clone(), |_| k), &fine).unwrap();
        assert!((0..fine.len()).all(|i| (c.at(i) - k).norm() < 1e-12));
        let lin = |p: &Vec3| Vec3::new(0.1 * p.x + 0.2 * p.y, -0.3 * p.z, 0.05 * p.x * 1.0 + 1.0);
        let f = prolong_field(&DeformationField::from_fn(coarse, lin), &fine).unwrap();
        assert!((0..fine.len()).all(|i| (f.at(i) - lin(&fine.voxel_center(i))).norm() < 1e-12));

        let elsewhere = Grid::axis_aligned([8, 7, 6], [1.0; 3], Vec3::new(50.0, 0.0, 0.0)).unwrap();
        assert!(matches!(
            prolong_field(&DeformationField::zeros(fine.coarsen()), &elsewhere),
            Err(Error::ExtentMismatch)
        ));
    }
}
