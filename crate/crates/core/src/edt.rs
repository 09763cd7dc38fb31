//! Exact Euclidean distance transform of binary masks.
//!
//! Squared distances are computed with three separable passes of the
//! lower-envelope-of-parabolas method, one per axis, using the physical
//! voxel spacing. The result is exact up to the final square root: every
//! value equals the minimum over the relevant voxel set of
//! `(dx·sx)² + (dy·sy)² + (dz·sz)²`.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{Grid, Mask3D, Volume3D};

/// Which voxel set distances are measured to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum EdtMode {
    /// Foreground voxels get the distance to the nearest background voxel;
    /// background voxels are 0.
    #[default]
    Interior,
    /// Background voxels get the distance to the nearest foreground voxel.
    Exterior,
    /// `interior − exterior`: positive inside, negative outside.
    Signed,
}

impl std::str::FromStr for EdtMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "interior" => Ok(EdtMode::Interior),
            "exterior" => Ok(EdtMode::Exterior),
            "signed" => Ok(EdtMode::Signed),
            other => Err(Error::InvalidArgument(format!("unknown edt mode {other:?}"))),
        }
    }
}

/// Distance map in mm together with the mode that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMap {
    pub volume: Volume3D,
    pub mode: EdtMode,
}

impl DistanceMap {
    pub fn grid(&self) -> &Grid {
        self.volume.grid()
    }
}

/// One-dimensional squared distance transform
/// `out[i] = min_j ((i − j)²·step² + f[j])` in linear time.
pub fn edt_1d_squared(f: &[f64], step: f64) -> Vec<f64> {
    let mut out = vec![0.0; f.len()];
    let mut scratch = Envelope::with_capacity(f.len());
    scratch.run(f, step, &mut out);
    out
}

struct Envelope {
    v: Vec<usize>,
    z: Vec<f64>,
    /// `f[v[k]] + w·v[k]²` of each envelope parabola.
    g: Vec<f64>,
}

impl Envelope {
    fn with_capacity(n: usize) -> Self {
        Envelope { v: vec![0; n], z: vec![0.0; n + 1], g: vec![0.0; n] }
    }

    /// Final values are `(d·step)² + f`, the same rounding as a direct
    /// `dx² + dy² + dz²` sum, so results agree bit for bit with brute force.
    fn run(&mut self, f: &[f64], step: f64, out: &mut [f64]) {
        let n = f.len();
        let w = step * step;
        if self.v.len() < n {
            self.v.resize(n, 0);
            self.z.resize(n + 1, 0.0);
            self.g.resize(n, 0.0);
        }
        // indices are carried as f64, exact for any realistic n
        let v = &mut self.v[..n];
        let z = &mut self.z[..n + 1];
        let g = &mut self.g[..n];
        let mut k: usize = 0;
        let mut any = false;
        for (q, &fv) in f.iter().enumerate() {
            if fv.is_infinite() {
                continue;
            }
            let qf = q as f64;
            let fq = fv + w * (qf * qf);
            if !any {
                any = true;
                v[0] = q;
                g[0] = fq;
                z[0] = f64::NEG_INFINITY;
                z[1] = f64::INFINITY;
                continue;
            }
            let mut s;
            loop {
                s = (fq - g[k]) / (2.0 * w * (qf - v[k] as f64));
                if s <= z[k] && k > 0 {
                    k -= 1;
                } else {
                    break;
                }
            }
            if s <= z[k] {
                // k == 0 and the new parabola dominates everywhere
                v[0] = q;
                g[0] = fq;
                z[0] = f64::NEG_INFINITY;
                z[1] = f64::INFINITY;
                continue;
            }
            k += 1;
            v[k] = q;
            g[k] = fq;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
        }
        if !any {
            out.iter_mut().for_each(|o| *o = f64::INFINITY);
            return;
        }
        let mut k = 0;
        for (i, o) in out.iter_mut().enumerate() {
            while z[k + 1] < i as f64 {
                k += 1;
            }
            let d = (i as f64 - v[k] as f64) * step;
            *o = d * d + f[v[k]];
        }
    }
}

/// Base pointer of a volume whose rows are handed out to parallel tasks.
struct SharedRows(*mut f64);

unsafe impl Sync for SharedRows {}

impl SharedRows {
    /// Caller guarantees the row is in bounds and touched by no one else.
    #[allow(clippy::mut_from_ref)]
    unsafe fn row(&self, offset: usize, len: usize) -> &mut [f64] {
        std::slice::from_raw_parts_mut(self.0.add(offset), len)
    }
}

/// `dst[c·rows + r] = src[r·cols + c]`, in cache-sized tiles.
fn transpose(src: &[f64], dst: &mut [f64], rows: usize, cols: usize) {
    const TILE: usize = 16;
    for r0 in (0..rows).step_by(TILE) {
        for c0 in (0..cols).step_by(TILE) {
            for r in r0..(r0 + TILE).min(rows) {
                for c in c0..(c0 + TILE).min(cols) {
                    dst[c * rows + r] = src[r * cols + c];
                }
            }
        }
    }
}

/// Squared distances (mm²) for the interior or exterior problem.
/// `targets[i]` marks voxels at distance zero.
fn squared_to_targets(grid: &Grid, targets: &[bool]) -> Vec<f64> {
    let [nx, ny, nz] = grid.dims();
    let [sx, sy, sz] = grid.spacing();
    let mut d: Vec<f64> = targets.iter().map(|&t| if t { 0.0 } else { f64::INFINITY }).collect();

    // x: contiguous rows
    d.par_chunks_mut(nx).for_each_init(
        || (Envelope::with_capacity(nx), vec![0.0; nx]),
        |(env, out), row| {
            env.run(row, sx, out);
            row.copy_from_slice(out);
        },
    );

    // y: transpose each z slab, run along its rows, transpose back
    if ny > 1 {
        d.par_chunks_mut(nx * ny).for_each_init(
            || (Envelope::with_capacity(ny), vec![0.0; nx * ny], vec![0.0; ny]),
            |(env, t, out), slab| {
                transpose(slab, t, ny, nx);
                for col in t.chunks_mut(ny) {
                    env.run(col, sy, out);
                    col.copy_from_slice(out);
                }
                transpose(t, slab, nx, ny);
            },
        );
    }

    // z: per y, gather the nz rows of length nx into a block, transpose it
    // so each z column is contiguous, and write the rows back
    if nz > 1 {
        let shared = SharedRows(d.as_mut_ptr());
        (0..ny).into_par_iter().for_each_init(
            || (Envelope::with_capacity(nz), vec![0.0; nx * nz], vec![0.0; nx * nz], vec![0.0; nz]),
            |(env, blk, t, out), j| {
                let d = &shared;
                for (k, row) in blk.chunks_mut(nx).enumerate() {
                    // SAFETY: rows (j, k) of different j are disjoint and
                    // no other reference to `d` is live during this pass
                    row.copy_from_slice(unsafe { d.row(nx * (j + ny * k), nx) });
                }
                transpose(blk, t, nz, nx);
                for col in t.chunks_mut(nz) {
                    env.run(col, sz, out);
                    col.copy_from_slice(out);
                }
                transpose(t, blk, nx, nz);
                for (k, row) in blk.chunks(nx).enumerate() {
                    // SAFETY: as above
                    unsafe { d.row(nx * (j + ny * k), nx) }.copy_from_slice(row);
                }
            },
        );
    }
    d
}

fn check_classes(mask: &Mask3D, mode: EdtMode) -> Result<()> {
    let fg = mask.foreground_count();
    let bg = mask.data().len() - fg;
    let interior_bad = fg > 0 && bg == 0;
    let exterior_bad = bg > 0 && fg == 0;
    match mode {
        EdtMode::Interior if interior_bad => Err(Error::EmptyBackground),
        EdtMode::Exterior if exterior_bad => Err(Error::EmptyForeground),
        EdtMode::Signed if interior_bad => Err(Error::EmptyBackground),
        EdtMode::Signed if exterior_bad => Err(Error::EmptyForeground),
        _ => Ok(()),
    }
}

/// Squared distance map (mm²). In signed mode the value is
/// `interior² − exterior²` (only one of the two is non-zero per voxel).
pub fn edt3_squared(mask: &Mask3D, mode: EdtMode) -> Result<Vec<f64>> {
    check_classes(mask, mode)?;
    let grid = mask.grid();
    let fg = mask.data();
    let all_same = fg.iter().all(|&b| b == fg[0]);
    if all_same {
        return Ok(vec![0.0; fg.len()]);
    }
    let interior = || {
        let bg: Vec<bool> = fg.iter().map(|&b| !b).collect();
        squared_to_targets(grid, &bg)
    };
    let exterior = || squared_to_targets(grid, fg);
    Ok(match mode {
        EdtMode::Interior => interior(),
        EdtMode::Exterior => exterior(),
        EdtMode::Signed => {
            let mut d = interior();
            for (a, b) in d.iter_mut().zip(exterior()) {
                *a -= b;
            }
            d
        }
    })
}

fn to_map(grid: &Grid, sq: &[f64], mode: EdtMode) -> DistanceMap {
    let data: Vec<f32> = sq.iter().map(|&s| (s.signum() * s.abs().sqrt()) as f32).collect();
    DistanceMap {
        volume: Volume3D::new(grid.clone(), data).expect("finite distances"),
        mode,
    }
}

/// Euclidean distance transform of a mask in physical units (mm).
pub fn edt3(mask: &Mask3D, mode: EdtMode) -> Result<DistanceMap> {
    let sq = edt3_squared(mask, mode)?;
    Ok(to_map(mask.grid(), &sq, mode))
}

/// Largest grid accepted by the brute-force oracle.
pub const ORACLE_MAX_VOXELS: usize = 32 * 32 * 32;

/// Brute-force all-pairs squared distances; reference for [`edt3_squared`].
pub fn edt3_oracle_squared(mask: &Mask3D, mode: EdtMode) -> Result<Vec<f64>> {
    let grid = mask.grid();
    if grid.len() > ORACLE_MAX_VOXELS {
        return Err(Error::GridTooLarge(grid.len()));
    }
    check_classes(mask, mode)?;
    let fg = mask.data();
    let [sx, sy, sz] = grid.spacing();
    let brute = |targets: Vec<usize>, sources: &dyn Fn(usize) -> bool| -> Vec<f64> {
        let coords: Vec<[usize; 3]> = targets.iter().map(|&t| grid.coords(t)).collect();
        (0..fg.len())
            .map(|idx| {
                if !sources(idx) || coords.is_empty() {
                    return 0.0;
                }
                let [i, j, k] = grid.coords(idx);
                coords
                    .iter()
                    .map(|&[a, b, c]| {
                        let dx = (i as f64 - a as f64) * sx;
                        let dy = (j as f64 - b as f64) * sy;
                        let dz = (k as f64 - c as f64) * sz;
                        dx * dx + dy * dy + dz * dz
                    })
                    .fold(f64::INFINITY, f64::min)
            })
            .collect()
    };
    let interior = || brute((0..fg.len()).filter(|&i| !fg[i]).collect(), &|i| fg[i]);
    let exterior = || brute((0..fg.len()).filter(|&i| fg[i]).collect(), &|i| !fg[i]);
    Ok(match mode {
        EdtMode::Interior => interior(),
        EdtMode::Exterior => exterior(),
        EdtMode::Signed => interior().iter().zip(exterior()).map(|(a, b)| a - b).collect(),
    })
}

/// Brute-force distance map, limited to 32³ voxels.
pub fn edt3_oracle(mask: &Mask3D, mode: EdtMode) -> Result<DistanceMap> {
    let sq = edt3_oracle_squared(mask, mode)?;
    Ok(to_map(mask.grid(), &sq, mode))
}
