//! Spectral preconditioner for the curvature-regularised objective.
//!
//! The mirror-boundary Laplacian is diagonal in the DCT-II basis, so the
//! regulariser Hessian `α·h̄·L²` inverts exactly there. Using
//! `P = (α·h̄·L² + σ)⁻¹` as the L-BFGS initial inverse Hessian moves smooth
//! displacement modes as readily as rough ones; plain L-BFGS scales every
//! mode alike and crawls along the smooth ones. σ only keeps the affine
//! null space of `L²` invertible and is set relative to the stiffness of
//! the smoothest non-constant mode.

use std::sync::Arc;

use rayon::prelude::*;
use rustdct::{DctPlanner, TransformType2And3};

use crate::grid::Grid;
use crate::solver::Preconditioner;

pub struct CurvaturePreconditioner {
    grid: Grid,
    /// `α·h̄`.
    stiffness: f64,
    sigma: f64,
    /// Laplacian eigenvalues per axis.
    eig: [Vec<f64>; 3],
    dct: [Arc<dyn TransformType2And3<f64>>; 3],
    work: Vec<f64>,
}

impl CurvaturePreconditioner {
    /// For planar vector fields (3 components) on `grid` with regulariser
    /// weight `alpha`; `sigma = sigma_rel · α·h̄·λ₁²`, with `λ₁` the
    /// smallest non-zero Laplacian eigenvalue.
    pub fn new(grid: &Grid, alpha: f64, sigma_rel: f64) -> Self {
        let mut planner = DctPlanner::new();
        let dims = grid.dims();
        let spacing = grid.spacing();
        let eig: [Vec<f64>; 3] = std::array::from_fn(|a| {
            let (n, h) = (dims[a], spacing[a]);
            (0..n)
                .map(|k| {
                    let s = (std::f64::consts::PI * k as f64 / (2 * n) as f64).sin();
                    -4.0 * s * s / (h * h)
                })
                .collect()
        });
        let lambda1 = eig.iter().filter_map(|e| e.get(1)).map(|v| v.abs()).fold(f64::INFINITY, f64::min);
        let lambda1 = if lambda1.is_finite() { lambda1 } else { 1.0 };
        let dct = std::array::from_fn(|a| planner.plan_dct2(dims[a]) as Arc<dyn TransformType2And3<f64>>);
        let stiffness = alpha * grid.voxel_volume();
        CurvaturePreconditioner {
            grid: grid.clone(),
            stiffness,
            sigma: sigma_rel * stiffness * lambda1 * lambda1,
            eig,
            dct,
            work: Vec::new(),
        }
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// `q ← (α·h̄·L² + σ)⁻¹ q` for one scalar component; `t` is scratch of
    /// the same length. The y/z transforms run on one x-index at a time,
    /// whose `ny·nz` block stays in cache.
    fn solve_component(&self, q: &mut [f64], t: &mut [f64]) {
        let [nx, ny, nz] = self.grid.dims();
        let nxy = nx * ny;
        let [dx, dy, dz] = &self.dct;
        let [ex, ey, ez] = &self.eig;
        let scratch = |t: &Arc<dyn TransformType2And3<f64>>| vec![0.0; t.get_scratch_len()];
        // DCT-III ∘ DCT-II = n/2 per axis
        let norm = 8.0 / (nx * ny * nz) as f64;

        // x transform, then store each z-slab transposed: t[(k·nx + i)·ny + j]
        q.par_chunks_mut(nxy).zip(t.par_chunks_mut(nxy)).for_each_init(
            || scratch(dx),
            |s, (qs, ts)| {
                for row in qs.chunks_mut(nx) {
                    dx.process_dct2_with_scratch(row, s);
                }
                for (j, row) in qs.chunks(nx).enumerate() {
                    for (i, v) in row.iter().enumerate() {
                        ts[i * ny + j] = *v;
                    }
                }
            },
        );

        // y and z transforms, scaling and inverses for one x-index
        let shared = SharedMut(t.as_mut_ptr());
        (0..nx).into_par_iter().for_each_init(
            || (vec![0.0; ny * nz], vec![0.0; nz], scratch(dy), scratch(dz)),
            |(block, line, sy, sz), i| {
                let t = &shared;
                for k in 0..nz {
                    let o = (k * nx + i) * ny;
                    // SAFETY: rows (k, i) for distinct i are disjoint and
                    // nothing else touches `t` during this pass
                    let row = unsafe { std::slice::from_raw_parts(t.0.add(o), ny) };
                    block[k * ny..(k + 1) * ny].copy_from_slice(row);
                }
                for row in block.chunks_mut(ny) {
                    dy.process_dct2_with_scratch(row, sy);
                }
                for j in 0..ny {
                    for k in 0..nz {
                        line[k] = block[k * ny + j];
                    }
                    dz.process_dct2_with_scratch(line, sz);
                    for (k, v) in line.iter_mut().enumerate() {
                        let lam = ex[i] + ey[j] + ez[k];
                        *v *= norm / (self.stiffness * lam * lam + self.sigma);
                    }
                    dz.process_dct3_with_scratch(line, sz);
                    for k in 0..nz {
                        block[k * ny + j] = line[k];
                    }
                }
                for row in block.chunks_mut(ny) {
                    dy.process_dct3_with_scratch(row, sy);
                }
                for k in 0..nz {
                    let o = (k * nx + i) * ny;
                    // SAFETY: as above
                    let row = unsafe { std::slice::from_raw_parts_mut(t.0.add(o), ny) };
                    row.copy_from_slice(&block[k * ny..(k + 1) * ny]);
                }
            },
        );

        // transpose back and invert the x transform
        q.par_chunks_mut(nxy).zip(t.par_chunks(nxy)).for_each_init(
            || scratch(dx),
            |s, (qs, ts)| {
                for (j, row) in qs.chunks_mut(nx).enumerate() {
                    for (i, v) in row.iter_mut().enumerate() {
                        *v = ts[i * ny + j];
                    }
                    dx.process_dct3_with_scratch(row, s);
                }
            },
        );
    }
}

/// Raw pointer shared across the per-x-index tasks, which write disjoint
/// rows.
struct SharedMut(*mut f64);

unsafe impl Sync for SharedMut {}

impl Preconditioner for CurvaturePreconditioner {
    fn apply(&mut self, q: &mut [f64]) {
        let n = self.grid.len();
        let mut t = std::mem::take(&mut self.work);
        t.resize(n, 0.0);
        for c in q.chunks_mut(n) {
            self.solve_component(c, &mut t);
        }
        self.work = t;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objective::laplacian_into;
    use crate::synth::SynthRng;
    use crate::Vec3;

    #[test]
    fn inverts_shifted_biharmonic() {
        let grid = Grid::axis_aligned([7, 5, 4], [1.0, 1.5, 0.8], Vec3::zeros()).unwrap();
        let n = grid.len();
        let alpha = 0.7;
        let mut p = CurvaturePreconditioner::new(&grid, alpha, 2.0);
        let sigma = p.sigma();
        let mut rng = SynthRng::new(3);
        let b: Vec<f64> = (0..3 * n).map(|_| rng.range(-1.0, 1.0)).collect();
        let mut x = b.clone();
        p.apply(&mut x);
        let hbar = grid.voxel_volume();
        let (mut l1, mut l2) = (Vec::new(), Vec::new());
        for c in 0..3 {
            let xc = &x[c * n..(c + 1) * n];
            laplacian_into(xc, &grid, &mut l1);
            laplacian_into(&l1, &grid, &mut l2);
            for i in 0..n {
                let r = alpha * hbar * l2[i] + sigma * xc[i];
                assert!((r - b[c * n + i]).abs() < 1e-9, "{r} vs {}", b[c * n + i]);
            }
        }
    }

    #[test]
    fn sigma_tracks_the_smoothest_mode() {
        // λ₁ = 4 sin²(π/2n)/h² on the longest axis
        let grid = Grid::axis_aligned([16, 8, 1], [2.0, 1.0, 1.0], Vec3::zeros()).unwrap();
        let p = CurvaturePreconditioner::new(&grid, 3.0, 5.0);
        let l1 = 4.0 * (std::f64::consts::PI / 32.0).sin().powi(2) / 4.0;
        let want = 5.0 * 3.0 * grid.voxel_volume() * l1 * l1;
        assert!((p.sigma() - want).abs() < 1e-12 * want);
    }

    #[test]
    fn single_voxel_axes_are_identity_in_that_direction() {
        let grid = Grid::axis_aligned([6, 1, 1], [1.0; 3], Vec3::zeros()).unwrap();
        let mut p = CurvaturePreconditioner::new(&grid, 1.0, 1.0);
        // constant field: only σ acts
        let mut q = vec![1.0; 18];
        p.apply(&mut q);
        for v in q {
            assert!((v - 1.0 / p.sigma()).abs() < 1e-9 / p.sigma());
        }
    }
}
