//! Seeded surrogate cases: sulci-like masks, smooth ground-truth
//! deformations and corresponding landmark pairs.
//!
//! Random numbers come from ChaCha8 seeded with `seed_from_u64(seed)`;
//! uniforms in `[0, 1)` are `(next_u64() >> 11) · 2⁻⁵³`. Every draw is
//! consumed in a fixed order, so cases are identical across runs and
//! platforms.
//!
//! Convention: the "before" map is the template and the "after" map the
//! reference, `after(x) = before(x + u(x))`. Landmarks are placed on the
//! after grid at `p` and their partners sit at `p + u(p)` in the before
//! volume, which is where a perfect registration maps them.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::edt::{edt3, DistanceMap, EdtMode};
use crate::error::{Error, Result};
use crate::grid::{Grid, Mask3D, Volume3D};
use crate::metrics::LandmarkSet;
use crate::transform::{rigid_to_field, rotation_to_euler, warp_image, DeformationField, RigidParams};
use crate::Vec3;

/// Portable seeded generator used for all synthetic data.
pub struct SynthRng(ChaCha8Rng);

impl SynthRng {
    pub fn new(seed: u64) -> Self {
        SynthRng(ChaCha8Rng::seed_from_u64(seed))
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.0.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)`.
    pub fn index(&mut self, n: usize) -> usize {
        ((self.uniform() * n as f64) as usize).min(n - 1)
    }

    pub fn unit_vector(&mut self) -> Vec3 {
        loop {
            let v = Vec3::new(self.range(-1.0, 1.0), self.range(-1.0, 1.0), self.range(-1.0, 1.0));
            let n = v.norm();
            if n > 0.1 && n <= 1.0 {
                return v / n;
            }
        }
    }
}

/// Foreground fraction bounds of generated masks.
pub const MIN_FG_FRACTION: f64 = 0.005;
pub const MAX_FG_FRACTION: f64 = 0.10;

fn stamp(mask: &mut [bool], dims: [usize; 3], q: &Vec3, r: f64) {
    let lo = |a: usize| ((q[a] - r).ceil().max(0.0)) as usize;
    let hi = |a: usize| ((q[a] + r).floor().min((dims[a] - 1) as f64)) as isize;
    let (hx, hy, hz) = (hi(0), hi(1), hi(2));
    if hx < 0 || hy < 0 || hz < 0 {
        return;
    }
    for k in lo(2)..=hz as usize {
        for j in lo(1)..=hy as usize {
            for i in lo(0)..=hx as usize {
                let d = Vec3::new(i as f64, j as f64, k as f64) - q;
                if d.norm_squared() <= r * r {
                    mask[i + dims[0] * (j + dims[1] * k)] = true;
                }
            }
        }
    }
}

fn bezier2(p: &[Vec3; 3], t: f64) -> Vec3 {
    let s = 1.0 - t;
    p[0] * (s * s) + p[1] * (2.0 * s * t) + p[2] * (t * t)
}

/// Rasterizes one curved sheet or tube in voxel index space.
fn draw_structure(rng: &mut SynthRng, dims: [usize; 3], mask: &mut [bool]) {
    let d = Vec3::new(dims[0] as f64, dims[1] as f64, dims[2] as f64);
    let min_dim = dims.iter().cloned().min().unwrap_or(1) as f64;
    let radius = rng.range(0.5, 1.5);
    let random_point = |rng: &mut SynthRng, lo: f64, hi: f64| {
        Vec3::new(rng.range(lo, hi) * d.x, rng.range(lo, hi) * d.y, rng.range(lo, hi) * d.z)
    };
    if rng.uniform() < 0.65 {
        // sheet: quadratic Bezier patch bent along its normal
        let c = random_point(rng, 0.3, 0.7);
        let n = rng.unit_vector();
        let helper = if n.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
        let e1 = n.cross(&helper).normalize();
        let e2 = n.cross(&e1);
        let a = rng.range(0.12, 0.25) * min_dim;
        let b = rng.range(0.12, 0.25) * min_dim;
        let bend = 0.35 * a.min(b);
        let mut ctrl = [[Vec3::zeros(); 3]; 3];
        for (i, row) in ctrl.iter_mut().enumerate() {
            for (j, p) in row.iter_mut().enumerate() {
                let h = rng.range(-bend, bend);
                *p = c + e1 * ((i as f64 - 1.0) * a) + e2 * ((j as f64 - 1.0) * b) + n * h;
            }
        }
        let steps = (4.0 * 2.0 * a.max(b) * 1.5).ceil() as usize + 1;
        for si in 0..=steps {
            let s = si as f64 / steps as f64;
            let col = [bezier2(&ctrl[0], s), bezier2(&ctrl[1], s), bezier2(&ctrl[2], s)];
            for ti in 0..=steps {
                let q = bezier2(&col, ti as f64 / steps as f64);
                stamp(mask, dims, &q, radius);
            }
        }
    } else {
        // tube: quadratic Bezier curve
        let ctrl = [random_point(rng, 0.15, 0.85), random_point(rng, 0.15, 0.85), random_point(rng, 0.15, 0.85)];
        let len = (ctrl[1] - ctrl[0]).norm() + (ctrl[2] - ctrl[1]).norm();
        let steps = (4.0 * len).ceil() as usize + 1;
        for si in 0..=steps {
            stamp(mask, dims, &bezier2(&ctrl, si as f64 / steps as f64), radius.max(0.9));
        }
    }
}

/// Sulci-like binary mask: 3–8 thin curved sheets or tubes, foreground
/// fraction within [0.5 %, 10 %].
pub fn gen_sulci_mask(seed: u64, dims: [usize; 3], spacing: [f64; 3]) -> Result<Mask3D> {
    if dims.iter().any(|&d| d < 32) {
        return Err(Error::InvalidArgument(format!("synthetic masks need dims >= 32, got {dims:?}")));
    }
    let grid = Grid::axis_aligned(dims, spacing, Vec3::zeros())?;
    let mut rng = SynthRng::new(seed);
    for _attempt in 0..64 {
        let count = 3 + rng.index(6);
        let mut data = vec![false; grid.len()];
        for _ in 0..count {
            draw_structure(&mut rng, dims, &mut data);
        }
        let frac = data.iter().filter(|&&b| b).count() as f64 / data.len() as f64;
        if (MIN_FG_FRACTION..=MAX_FG_FRACTION).contains(&frac) {
            return Mask3D::new(grid, data);
        }
    }
    Err(Error::InvalidArgument(format!("could not generate a mask for seed {seed}")))
}

/// Number of control points per axis of the synthetic deformation.
pub const CONTROL_POINTS: usize = 5;
/// Largest displacement relative to the control-point spacing.
pub const MAX_CONTROL_FRACTION: f64 = 0.4;

/// Smooth random displacement: random vectors on a 5³ control lattice
/// spanning the grid, trilinearly upsampled and rescaled so the largest
/// voxel displacement is `max_mag` mm. `max_mag` is capped at 0.4× the
/// smallest control spacing.
pub fn gen_smooth_field(seed: u64, grid: &Grid, max_mag: f64) -> Result<DeformationField> {
    if !(max_mag > 0.0 && max_mag.is_finite()) {
        return Err(Error::InvalidArgument(format!("max_mag must be > 0, got {max_mag}")));
    }
    let dims = grid.dims();
    let cells = (CONTROL_POINTS - 1) as f64;
    let control_spacing: Vec<f64> = (0..3).map(|a| (dims[a] - 1) as f64 * grid.spacing()[a] / cells).collect();
    let cap = MAX_CONTROL_FRACTION * control_spacing.iter().cloned().fold(f64::INFINITY, f64::min);
    let target = if max_mag > cap {
        log::warn!("max_mag {max_mag} exceeds the fold-free cap {cap:.3}; using the cap");
        cap
    } else {
        max_mag
    };

    let mut rng = SynthRng::new(seed);
    let cgrid = Grid::new(
        [CONTROL_POINTS; 3],
        [control_spacing[0].max(1e-9), control_spacing[1].max(1e-9), control_spacing[2].max(1e-9)],
        grid.origin(),
        *grid.direction(),
    )?;
    let nc = cgrid.len();
    let mut ctrl = vec![0.0; 3 * nc];
    for i in 0..nc {
        for d in 0..3 {
            ctrl[d * nc + i] = rng.range(-1.0, 1.0);
        }
    }
    let control = DeformationField::from_planar(cgrid, ctrl)?;
    let raw = DeformationField::from_fn(grid.clone(), |x| control.sample_extrapolated(x));
    let peak = raw.max_norm();
    if peak == 0.0 {
        return Ok(raw);
    }
    let s = target / peak;
    DeformationField::from_planar(grid.clone(), raw.into_vec().into_iter().map(|v| v * s).collect())
}

/// Surrogate registration case.
#[derive(Clone, Debug)]
pub struct SynthCase {
    /// Template: distance map of the generated mask.
    pub before_map: DistanceMap,
    /// Reference: `before_map` pulled back through `true_field`, with an erased block.
    pub after_map: DistanceMap,
    pub true_field: DeformationField,
    pub landmarks_before: LandmarkSet,
    pub landmarks_after: LandmarkSet,
    /// Erased block as voxel index bounds `[lo, hi)` on the after grid.
    pub cavity: ([usize; 3], [usize; 3]),
    pub seed: u64,
}

/// Generation knobs beyond the case signature.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthOptions {
    pub mode: EdtMode,
    pub min_landmarks: usize,
    pub max_landmarks: usize,
}

impl Default for SynthOptions {
    fn default() -> Self {
        SynthOptions { mode: EdtMode::Interior, min_landmarks: 10, max_landmarks: 18 }
    }
}

const FIELD_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;
const CASE_STREAM: u64 = 0xd1b5_4a32_d192_ed03;
const RIGID_STREAM: u64 = 0x94d0_49bb_1331_11eb;

pub fn make_case(seed: u64, dims: [usize; 3], spacing: [f64; 3], max_mag: f64) -> Result<SynthCase> {
    make_case_with(seed, dims, spacing, max_mag, &SynthOptions::default())
}

pub fn make_case_with(
    seed: u64,
    dims: [usize; 3],
    spacing: [f64; 3],
    max_mag: f64,
    opts: &SynthOptions,
) -> Result<SynthCase> {
    let mask = gen_sulci_mask(seed, dims, spacing)?;
    let grid = mask.grid().clone();
    let before_map = edt3(&mask, opts.mode)?;
    let true_field = gen_smooth_field(seed ^ FIELD_STREAM, &grid, max_mag)?;
    let warped = warp_image(&before_map.volume, &true_field);

    let mut rng = SynthRng::new(seed ^ CASE_STREAM);
    let mut lo = [0usize; 3];
    let mut hi = [0usize; 3];
    for a in 0..3 {
        let size = ((dims[a] as f64) * rng.range(0.12, 0.2)).round() as usize;
        let start = (dims[a] as f64 * 0.2) as usize + rng.index(dims[a] - size - 2 * (dims[a] as f64 * 0.2) as usize);
        lo[a] = start;
        hi[a] = start + size;
    }
    let in_cavity = |c: [usize; 3], margin: usize| {
        (0..3).all(|a| c[a] + margin >= lo[a] && c[a] < hi[a] + margin)
    };
    let mut after = warped.into_data();
    for (idx, v) in after.iter_mut().enumerate() {
        if in_cavity(grid.coords(idx), 0) {
            *v = 0.0;
        }
    }
    let after_vol = Volume3D::new(grid.clone(), after)?;

    // ridge voxels of the after map, away from the border and the cavity
    let border = (dims.iter().cloned().min().unwrap_or(0) / 8).max(3);
    let data = after_vol.data();
    let candidates: Vec<usize> = (0..grid.len())
        .filter(|&idx| {
            let c = grid.coords(idx);
            let v = data[idx];
            if v <= 0.0 || (0..3).any(|a| c[a] < border || c[a] + border >= dims[a]) || in_cavity(c, 2) {
                return false;
            }
            let strides = [1, dims[0], dims[0] * dims[1]];
            strides.iter().all(|&s| data[idx - s] <= v && data[idx + s] <= v)
        })
        .collect();
    let want = opts.min_landmarks + rng.index(opts.max_landmarks - opts.min_landmarks + 1);
    let mut chosen: Vec<usize> = Vec::with_capacity(want);
    let mut separation = 6.0 * grid.min_spacing();
    while chosen.len() < want && separation > 0.0 {
        let mut pool = candidates.clone();
        while chosen.len() < want && !pool.is_empty() {
            let pick = pool.swap_remove(rng.index(pool.len()));
            let p = grid.voxel_center(pick);
            if chosen.iter().all(|&q| (grid.voxel_center(q) - p).norm() >= separation) {
                chosen.push(pick);
            }
        }
        separation -= grid.min_spacing();
    }
    if chosen.len() < opts.min_landmarks {
        return Err(Error::InvalidArgument(format!(
            "seed {seed}: only {} landmark candidates available",
            chosen.len()
        )));
    }
    let after_pts: Vec<Vec3> = chosen.iter().map(|&i| grid.voxel_center(i)).collect();
    let before_pts: Vec<Vec3> = chosen.iter().map(|&i| grid.voxel_center(i) + true_field.at(i)).collect();

    Ok(SynthCase {
        before_map,
        after_map: DistanceMap { volume: after_vol, mode: opts.mode },
        true_field,
        landmarks_before: LandmarkSet::from_points(&before_pts),
        landmarks_after: LandmarkSet::from_points(&after_pts),
        cavity: (lo, hi),
        seed,
    })
}

/// Test pair with a known rigid motion: `reference = template ∘ motion`,
/// resampled trilinearly.
#[derive(Clone, Debug)]
pub struct RigidPair {
    pub template: Volume3D,
    pub reference: Volume3D,
    pub motion: RigidParams,
}

/// Interior distance map of a sulci-like mask, and a random rigid motion
/// about the grid centre with rotation angle ≤ `max_angle_deg` (random
/// axis) and shift ≤ `max_shift` mm (random direction).
pub fn make_rigid_pair(seed: u64, dims: [usize; 3], spacing: [f64; 3], max_angle_deg: f64, max_shift: f64) -> Result<RigidPair> {
    let mask = gen_sulci_mask(seed, dims, spacing)?;
    let template = edt3(&mask, EdtMode::Interior)?.volume;
    let grid = template.grid().clone();
    let mut rng = SynthRng::new(seed ^ RIGID_STREAM);
    let axis = nalgebra::Unit::new_normalize(rng.unit_vector());
    let angle = rng.range(0.0, max_angle_deg).to_radians();
    let q = nalgebra::Rotation3::from_axis_angle(&axis, angle);
    let shift = rng.unit_vector() * rng.range(0.0, max_shift);
    let motion = RigidParams { angles: rotation_to_euler(q.matrix()), translation: shift, center: grid.center() };
    let reference = warp_image(&template, &rigid_to_field(&motion, &grid));
    Ok(RigidPair { template, reference, motion })
}

#[derive(Clone, Copy, Debug)]
struct Blob {
    center: Vec3,
    precision: nalgebra::Matrix3<f64>,
    amplitude: f64,
}

// C² ramp: 0 at t ≤ 0, 1 at t ≥ 1
fn smoothstep(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    t * t * t * (t * (6.0 * t - 15.0) + 10.0)
}

// Gaussian sum tapered to zero over the outer `margin` mm of the box
// [0, ext], so the image vanishes at the grid faces.
fn blob_image(blobs: &[Blob], ext: &[f64; 3], margin: f64, p: &Vec3) -> f64 {
    let w: f64 = (0..3).map(|a| smoothstep(p[a] / margin) * smoothstep((ext[a] - p[a]) / margin)).product();
    if w == 0.0 {
        return 0.0;
    }
    w * blobs
        .iter()
        .map(|b| {
            let d = p - b.center;
            b.amplitude * (-0.5 * d.dot(&(b.precision * d))).exp()
        })
        .sum::<f64>()
}

/// Closed-form variant of [`make_rigid_pair`]: both volumes are sampled
/// from a sum of 60 randomly oriented anisotropic Gaussians (σ 3.5–6 mm)
/// centred in the middle 60 % of the grid and tapered to zero over the
/// outer 10 mm, so `reference(x) =
/// template(motion(x))` holds without resampling.
pub fn make_smooth_rigid_pair(
    seed: u64,
    dims: [usize; 3],
    spacing: [f64; 3],
    max_angle_deg: f64,
    max_shift: f64,
) -> Result<RigidPair> {
    let grid = Grid::axis_aligned(dims, spacing, Vec3::zeros())?;
    let mut rng = SynthRng::new(seed ^ RIGID_STREAM);
    let ext: [f64; 3] = std::array::from_fn(|a| (dims[a] - 1) as f64 * spacing[a]);
    let blobs: Vec<Blob> = (0..60)
        .map(|_| {
            let center = Vec3::from(std::array::from_fn::<f64, 3, _>(|a| rng.range(0.2, 0.8) * ext[a]));
            let axis = nalgebra::Unit::new_normalize(rng.unit_vector());
            let frame = nalgebra::Rotation3::from_axis_angle(&axis, rng.range(0.0, std::f64::consts::PI));
            let inv_var = nalgebra::Matrix3::from_diagonal(&Vec3::from(std::array::from_fn::<f64, 3, _>(|_| {
                rng.range(3.5, 6.0).powi(-2)
            })));
            Blob {
                center,
                precision: frame.matrix() * inv_var * frame.matrix().transpose(),
                amplitude: rng.range(0.5, 1.5),
            }
        })
        .collect();
    let axis = nalgebra::Unit::new_normalize(rng.unit_vector());
    let q = nalgebra::Rotation3::from_axis_angle(&axis, rng.range(0.0, max_angle_deg).to_radians());
    let shift = rng.unit_vector() * rng.range(0.0, max_shift);
    let motion = RigidParams { angles: rotation_to_euler(q.matrix()), translation: shift, center: grid.center() };
    let template = Volume3D::from_fn(grid.clone(), |p| blob_image(&blobs, &ext, 10.0, p));
    let reference = Volume3D::from_fn(grid, |p| blob_image(&blobs, &ext, 10.0, &motion.apply(p)));
    Ok(RigidPair { template, reference, motion })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::tre;

    #[test]
    fn mask_determinism_and_fraction() {
        let a = gen_sulci_mask(1, [64; 3], [1.0; 3]).unwrap();
        let b = gen_sulci_mask(1, [64; 3], [1.0; 3]).unwrap();
        assert_eq!(a, b);
        let f = a.foreground_fraction();
        assert!((MIN_FG_FRACTION..=MAX_FG_FRACTION).contains(&f), "{f}");
        assert!(a.foreground_count() < a.data().len());
        assert!(gen_sulci_mask(1, [16, 64, 64], [1.0; 3]).is_err());
    }

    #[test]
    fn field_magnitude_and_determinism() {
        let g = Grid::axis_aligned([48, 44, 40], [1.0, 1.2, 1.5], Vec3::zeros()).unwrap();
        let f = gen_smooth_field(3, &g, 4.0).unwrap();
        assert!((f.max_norm() - 4.0).abs() < 1e-6);
        assert_eq!(f, gen_smooth_field(3, &g, 4.0).unwrap());
        assert!(gen_smooth_field(3, &g, 0.0).is_err());
    }

    #[test]
    fn case_landmarks_follow_field() {
        let c = make_case(5, [48; 3], [1.0; 3], 4.0).unwrap();
        let n = c.landmarks_after.len();
        assert!((10..=18).contains(&n));
        let g = c.true_field.grid();
        for (a, b) in c.landmarks_after.iter().zip(c.landmarks_before.iter()) {
            let idx = {
                let v = g.world_to_voxel(&a.position);
                g.index(v.x.round() as usize, v.y.round() as usize, v.z.round() as usize)
            };
            assert!((b.position - a.position - c.true_field.at(idx)).norm() < 1e-12);
        }
        let r = tre(&c.landmarks_before, &c.landmarks_after).unwrap();
        assert!(r.summary.mean > 0.0);
    }
}
