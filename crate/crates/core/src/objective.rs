//! Discretized registration objective
//! `J(u) = D_ngf(T∘(id + u), R) + alpha · S_curv(u)` with analytic gradient.
//!
//! The distance is the normalized gradient field measure
//!
//! ```text
//! D = h/2 · Σ_x [1 − ρ(x)²],  ρ = (∇Tw·∇R + ε²) / (√(|∇Tw|² + ε²) · √(|∇R|² + ε²))
//! ```
//!
//! and the regularizer is `S = h/2 · Σ_d Σ_x (Δu_d(x))²` with a 7-point,
//! spacing-aware Laplacian and zero-Neumann (half-sample mirror) boundaries.
//! `h` is the voxel volume. Image gradients use central differences in the
//! interior and one-sided differences at the faces, expressed along the grid
//! axes in intensity/mm.

use std::sync::Mutex;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{Grid, Volume3D};
use crate::par::{det_sum, CHUNK};
use crate::transform::DeformationField;

/// NGF edge parameter.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum NgfEps {
    /// Chosen per pyramid level by [`estimate_eps`] on the reference.
    Auto,
    Fixed(f64),
}

impl std::str::FromStr for NgfEps {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "auto" {
            return Ok(NgfEps::Auto);
        }
        match s.parse::<f64>() {
            Ok(v) if v > 0.0 && v.is_finite() => Ok(NgfEps::Fixed(v)),
            _ => Err(Error::InvalidArgument(format!("ngf eps must be 'auto' or a positive number, got {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveSettings {
    /// Curvature weight, > 0.
    pub alpha: f64,
    pub eps: NgfEps,
}

impl Default for ObjectiveSettings {
    fn default() -> Self {
        ObjectiveSettings { alpha: 1.0, eps: NgfEps::Auto }
    }
}

impl ObjectiveSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidArgument(format!("alpha must be > 0, got {}", self.alpha)));
        }
        if let NgfEps::Fixed(e) = self.eps {
            if !(e > 0.0 && e.is_finite()) {
                return Err(Error::InvalidArgument(format!("eps must be > 0, got {e}")));
            }
        }
        Ok(())
    }
}

/// Position-dependent 3-point stencil along one axis: `coef[pos]` weighs
/// the previous, current and next sample.
type Stencil = Vec<[f64; 3]>;

/// Central differences inside, one-sided at the two ends.
fn gradient_stencil(len: usize, h: f64) -> Stencil {
    (0..len)
        .map(|pos| {
            if len == 1 {
                [0.0; 3]
            } else if pos == 0 {
                [0.0, -1.0 / h, 1.0 / h]
            } else if pos == len - 1 {
                [-1.0 / h, 1.0 / h, 0.0]
            } else {
                [-0.5 / h, 0.0, 0.5 / h]
            }
        })
        .collect()
}

/// Second difference with the end sample mirrored (zero Neumann).
fn laplacian_stencil(len: usize, h: f64) -> Stencil {
    let w = 1.0 / (h * h);
    (0..len)
        .map(|pos| {
            if len == 1 {
                [0.0; 3]
            } else if pos == 0 {
                [0.0, -w, w]
            } else if pos == len - 1 {
                [w, -w, 0.0]
            } else {
                [w, -2.0 * w, w]
            }
        })
        .collect()
}

/// Stencil of the transposed operator.
fn transpose_stencil(c: &Stencil) -> Stencil {
    let len = c.len();
    (0..len)
        .map(|pos| {
            let prev = if pos > 0 { c[pos - 1][2] } else { 0.0 };
            let next = if pos + 1 < len { c[pos + 1][0] } else { 0.0 };
            [prev, c[pos][1], next]
        })
        .collect()
}

/// `dst (+)= stencil applied to src along axis`, row-parallel, no reductions.
fn apply_axis(src: &[f64], dst: &mut [f64], dims: [usize; 3], axis: usize, coef: &Stencil, accumulate: bool) {
    let [nx, ny, _] = dims;
    let stride = [1, nx, nx * ny][axis];
    let len = dims[axis];
    dst.par_chunks_mut(nx).enumerate().for_each(|(r, row)| {
        let base = r * nx;
        if !accumulate {
            row.fill(0.0);
        }
        if len == 1 {
            return;
        }
        if axis == 0 {
            let s = &src[base..base + nx];
            let (c0, cl) = (coef[0], coef[nx - 1]);
            row[0] += c0[1] * s[0] + c0[2] * s[1];
            for i in 1..nx - 1 {
                let c = coef[i];
                row[i] += c[0] * s[i - 1] + c[1] * s[i] + c[2] * s[i + 1];
            }
            row[nx - 1] += cl[0] * s[nx - 2] + cl[1] * s[nx - 1];
        } else {
            let pos = if axis == 1 { r % ny } else { r / ny };
            let c = coef[pos];
            let prev = if pos > 0 { base - stride } else { base };
            let next = if pos + 1 < len { base + stride } else { base };
            let (sp, sc, sn) = (&src[prev..prev + nx], &src[base..base + nx], &src[next..next + nx]);
            for i in 0..nx {
                row[i] += c[0] * sp[i] + c[1] * sc[i] + c[2] * sn[i];
            }
        }
    });
}

/// Pool of large work vectors. At fine levels each buffer is tens of MB;
/// allocating afresh on every evaluation costs a page fault per 4 KiB.
#[derive(Default)]
pub(crate) struct Scratch(Vec<Vec<f64>>);

impl Scratch {
    /// A vector of length `len` with unspecified contents.
    pub(crate) fn take(&mut self, len: usize) -> Vec<f64> {
        let mut v = self.0.pop().unwrap_or_default();
        v.resize(len, 0.0);
        v
    }

    pub(crate) fn give(&mut self, v: Vec<f64>) {
        self.0.push(v);
    }
}

/// Per-axis finite differences of `f`, planar output (3·N values).
pub(crate) fn gradient_axes(f: &[f64], grid: &Grid) -> Vec<f64> {
    let mut out = Vec::new();
    gradient_axes_into(f, grid, &mut out);
    out
}

fn gradient_axes_into(f: &[f64], grid: &Grid, out: &mut Vec<f64>) {
    let n = grid.len();
    let dims = grid.dims();
    out.resize(3 * n, 0.0);
    for (axis, comp) in out.chunks_mut(n).enumerate() {
        let coef = gradient_stencil(dims[axis], grid.spacing()[axis]);
        apply_axis(f, comp, dims, axis, &coef, false);
    }
}

/// Adjoint of [`gradient_axes`]: `Gᵀ w` for a planar vector volume `w`.
#[cfg(test)]
fn gradient_adjoint(w: &[f64], grid: &Grid) -> Vec<f64> {
    let mut out = Vec::new();
    gradient_adjoint_into(w, grid, &mut out);
    out
}

fn gradient_adjoint_into(w: &[f64], grid: &Grid, out: &mut Vec<f64>) {
    let n = grid.len();
    let dims = grid.dims();
    out.resize(n, 0.0);
    for axis in 0..3 {
        let coef = transpose_stencil(&gradient_stencil(dims[axis], grid.spacing()[axis]));
        apply_axis(&w[axis * n..(axis + 1) * n], out, dims, axis, &coef, axis > 0);
    }
}

/// Spacing-aware image gradient (intensity/mm) along the grid axes,
/// returned as three component volumes.
pub fn image_gradient(v: &Volume3D) -> Result<[Vec<f64>; 3]> {
    let grid = v.grid();
    if grid.dims().iter().all(|&d| d < 2) {
        return Err(Error::DimensionTooSmall(grid.dims()));
    }
    let f: Vec<f64> = v.data().iter().map(|&x| x as f64).collect();
    let g = gradient_axes(&f, grid);
    let n = grid.len();
    Ok([g[..n].to_vec(), g[n..2 * n].to_vec(), g[2 * n..].to_vec()])
}

/// `0.1 · mean |∇R|` over the voxels where `∇R ≠ 0`, floored at `1e-6`
/// times the intensity range (or `1e-6` for a constant image).
///
/// Flat regions are left out of the mean: distance maps are zero over most
/// of the grid, and averaging those zeros in drives ε towards the level of
/// interpolation noise.
pub fn estimate_eps(r: &Volume3D) -> f64 {
    let grid = r.grid();
    let (lo, hi) = r.range();
    let range = (hi - lo) as f64;
    let floor = if range > 0.0 { 1e-6 * range } else { 1e-6 };
    let n = grid.len();
    let f: Vec<f64> = r.data().iter().map(|&x| x as f64).collect();
    let g = gradient_axes(&f, grid);
    let mag = |i: usize| (g[i] * g[i] + g[n + i] * g[n + i] + g[2 * n + i] * g[2 * n + i]).sqrt();
    let total = det_sum(n, |rg| rg.map(mag).sum());
    let support = det_sum(n, |rg| rg.filter(|&i| mag(i) > 0.0).count() as f64);
    if support == 0.0 {
        return floor;
    }
    (0.1 * total / support).max(floor)
}

/// NGF value and its derivative with respect to the warped-template intensities.
#[derive(Clone, Debug)]
pub struct NgfValue {
    pub value: f64,
    pub d_tw: Vec<f64>,
}

/// Reference-side quantities reused across evaluations.
struct ReferenceGradient {
    grad: Vec<f64>,
    /// `|∇R|² + ε²`
    norm2: Vec<f64>,
    eps: f64,
}

impl ReferenceGradient {
    fn new(r: &[f64], grid: &Grid, eps: f64) -> Self {
        let n = grid.len();
        let grad = gradient_axes(r, grid);
        let e2 = eps * eps;
        let norm2 = (0..n)
            .into_par_iter()
            .map(|i| grad[i] * grad[i] + grad[n + i] * grad[n + i] + grad[2 * n + i] * grad[2 * n + i] + e2)
            .collect();
        ReferenceGradient { grad, norm2, eps }
    }

    /// Returns `D` and writes `∂D/∂tw` into `d_tw`.
    ///
    /// `1 − ρ²` is evaluated as `(|t|²|r|² − (t·r)²) / (|t|²|r|²)` (with ε
    /// folded in), which is exactly zero when the two gradients coincide.
    fn eval(&self, tw: &[f64], grid: &Grid, d_tw: Option<&mut Vec<f64>>, scratch: &mut Scratch) -> f64 {
        let n = grid.len();
        let hbar = grid.voxel_volume();
        let e2 = self.eps * self.eps;
        let mut gt = scratch.take(3 * n);
        gradient_axes_into(tw, grid, &mut gt);
        let gr = &self.grad;
        let at = |i: usize| {
            let t = [gt[i], gt[n + i], gt[2 * n + i]];
            let r = [gr[i], gr[n + i], gr[2 * n + i]];
            let nt2 = t[0] * t[0] + t[1] * t[1] + t[2] * t[2] + e2;
            let dot = t[0] * r[0] + t[1] * r[1] + t[2] * r[2] + e2;
            (t, r, nt2, dot)
        };
        let point = |i: usize| {
            let (_, _, nt2, dot) = at(i);
            let p = nt2 * self.norm2[i];
            (p - dot * dot) / p
        };
        let Some(out) = d_tw else {
            let value = 0.5 * hbar * det_sum(n, |rg| rg.map(point).sum());
            scratch.give(gt);
            return value;
        };
        // value and weights in one sweep; per-chunk partial sums keep the
        // total independent of the thread count
        let mut w = scratch.take(3 * n);
        let (wx, rest) = w.split_at_mut(n);
        let (wy, wz) = rest.split_at_mut(n);
        let partial: Vec<f64> = wx
            .par_chunks_mut(CHUNK)
            .zip(wy.par_chunks_mut(CHUNK))
            .zip(wz.par_chunks_mut(CHUNK))
            .enumerate()
            .map(|(c, ((a, b), d))| {
                let mut acc = 0.0;
                for o in 0..a.len() {
                    let i = c * CHUNK + o;
                    let (t, r, nt2, dot) = at(i);
                    let nr2 = self.norm2[i];
                    let p = nt2 * nr2;
                    acc += (p - dot * dot) / p;
                    // ∂(1 − ρ²)/∂t = −2ρ·(r·|t|² − (t·r)·t) / (|t|³|r|)
                    let sq = p.sqrt();
                    let s = -hbar * dot / (sq * nt2 * sq);
                    a[o] = s * (r[0] * nt2 - dot * t[0]);
                    b[o] = s * (r[1] * nt2 - dot * t[1]);
                    d[o] = s * (r[2] * nt2 - dot * t[2]);
                }
                acc
            })
            .collect();
        gradient_adjoint_into(&w, grid, out);
        scratch.give(w);
        scratch.give(gt);
        0.5 * hbar * partial.iter().sum::<f64>()
    }
}

/// NGF distance between a warped template and the reference on the same grid.
pub fn ngf_distance(tw: &Volume3D, r: &Volume3D, eps: f64) -> Result<NgfValue> {
    tw.grid().check_same(r.grid(), "warped template and reference grids differ")?;
    let grid = r.grid();
    let rf: Vec<f64> = r.data().iter().map(|&x| x as f64).collect();
    let tf: Vec<f64> = tw.data().iter().map(|&x| x as f64).collect();
    let rg = ReferenceGradient::new(&rf, grid, eps);
    let mut d_tw = Vec::new();
    let value = rg.eval(&tf, grid, Some(&mut d_tw), &mut Scratch::default());
    Ok(NgfValue { value, d_tw })
}

/// 7-point Laplacian with half-sample mirror boundaries (self-adjoint),
/// all three axes in one pass.
pub(crate) fn laplacian_into(u: &[f64], grid: &Grid, out: &mut Vec<f64>) {
    let dims = grid.dims();
    let [nx, ny, nz] = dims;
    let cx = laplacian_stencil(nx, grid.spacing()[0]);
    let cy = laplacian_stencil(ny, grid.spacing()[1]);
    let cz = laplacian_stencil(nz, grid.spacing()[2]);
    let nxy = nx * ny;
    out.resize(u.len(), 0.0);
    out.par_chunks_mut(nx).enumerate().for_each(|(r, row)| {
        let base = r * nx;
        let (j, k) = (r % ny, r / ny);
        let s = &u[base..base + nx];
        if nx > 1 {
            row[0] = cx[0][1] * s[0] + cx[0][2] * s[1];
            for i in 1..nx - 1 {
                let c = cx[i];
                row[i] = c[0] * s[i - 1] + c[1] * s[i] + c[2] * s[i + 1];
            }
            row[nx - 1] = cx[nx - 1][0] * s[nx - 2] + cx[nx - 1][1] * s[nx - 1];
        } else {
            row[0] = 0.0;
        }
        let (c1, c2) = (cy[j], cz[k]);
        let yp = if j > 0 { base - nx } else { base };
        let yn = if j + 1 < ny { base + nx } else { base };
        let zp = if k > 0 { base - nxy } else { base };
        let zn = if k + 1 < nz { base + nxy } else { base };
        let (syp, syn) = (&u[yp..yp + nx], &u[yn..yn + nx]);
        let (szp, szn) = (&u[zp..zp + nx], &u[zn..zn + nx]);
        let cc = c1[1] + c2[1];
        for i in 0..nx {
            row[i] += c1[0] * syp[i] + c1[2] * syn[i] + c2[0] * szp[i] + c2[2] * szn[i] + cc * s[i];
        }
    });
}

/// Curvature energy of a planar field slice and its gradient.
pub(crate) fn curvature_planar(u: &[f64], grid: &Grid, grad: Option<&mut [f64]>, scratch: &mut Scratch) -> f64 {
    let n = grid.len();
    let hbar = grid.voxel_volume();
    let mut value = 0.0;
    let mut grad = grad;
    let mut lu = scratch.take(n);
    let mut llu = scratch.take(n);
    for d in 0..3 {
        laplacian_into(&u[d * n..(d + 1) * n], grid, &mut lu);
        value += 0.5 * hbar * det_sum(n, |r| lu[r].iter().map(|v| v * v).sum());
        if let Some(g) = grad.as_deref_mut() {
            laplacian_into(&lu, grid, &mut llu);
            g[d * n..(d + 1) * n]
                .par_iter_mut()
                .zip(llu.par_iter())
                .for_each(|(o, v)| *o = hbar * v);
        }
    }
    scratch.give(lu);
    scratch.give(llu);
    value
}

/// Curvature regularizer value and gradient field.
pub fn curvature(u: &DeformationField) -> (f64, DeformationField) {
    let mut g = vec![0.0; u.as_slice().len()];
    let v = curvature_planar(u.as_slice(), u.grid(), Some(&mut g), &mut Scratch::default());
    (v, DeformationField::from_planar(u.grid().clone(), g).expect("finite gradient"))
}

/// Split of an objective value into its terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveValue {
    pub distance: f64,
    pub regularizer: f64,
    pub total: f64,
}

struct NgfTerm<'a> {
    weight: f64,
    template: &'a Volume3D,
    flat: Vec<bool>,
    reference: ReferenceGradient,
}

/// Objective bound to one reference grid; evaluates `J` and `∂J/∂u` for
/// planar displacement vectors on that grid.
pub struct Objective<'a> {
    grid: Grid,
    alpha: f64,
    terms: Vec<NgfTerm<'a>>,
    scratch: Mutex<Scratch>,
}

impl<'a> Objective<'a> {
    pub fn new(template: &'a Volume3D, reference: &Volume3D, settings: &ObjectiveSettings) -> Result<Self> {
        settings.validate()?;
        let mut obj = Objective {
            grid: reference.grid().clone(),
            alpha: settings.alpha,
            terms: Vec::new(),
            scratch: Mutex::new(Scratch::default()),
        };
        obj.add_term(1.0, template, reference, settings.eps)?;
        Ok(obj)
    }

    /// Adds another weighted NGF pair on the same reference grid.
    pub fn add_term(&mut self, weight: f64, template: &'a Volume3D, reference: &Volume3D, eps: NgfEps) -> Result<()> {
        reference.grid().check_same(&self.grid, "all reference volumes must share one grid")?;
        let eps = match eps {
            NgfEps::Auto => estimate_eps(reference),
            NgfEps::Fixed(e) => e,
        };
        let rf: Vec<f64> = reference.data().iter().map(|&x| x as f64).collect();
        self.terms.push(NgfTerm {
            weight,
            template,
            flat: template.flat_cells(),
            reference: ReferenceGradient::new(&rf, &self.grid, eps),
        });
        Ok(())
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    /// Edge parameter of the primary term.
    pub fn eps(&self) -> f64 {
        self.terms[0].reference.eps
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Zero drops the regularizer entirely (used for parametric stages).
    pub(crate) fn set_alpha(&mut self, alpha: f64) {
        self.alpha = alpha;
    }

    /// Evaluates `J(u)`; when `grad` is given it receives `∂J/∂u` (planar, 3·N).
    pub fn eval(&self, u: &[f64], grad: Option<&mut [f64]>) -> ObjectiveValue {
        let n = self.grid.len();
        assert_eq!(u.len(), 3 * n, "field length must be 3 x voxels");
        let want_grad = grad.is_some();
        let mut guard = self.scratch.lock().unwrap_or_else(|e| e.into_inner());
        let scratch = &mut *guard;
        let mut dist_grad = scratch.take(if want_grad { 3 * n } else { 0 });
        dist_grad.fill(0.0);
        let mut distance = 0.0;
        let dims = self.grid.dims();
        let [nx, ny, _] = dims;
        for term in &self.terms {
            // warped template and its world gradient, row by row
            let (m, b, w) = self.grid.voxel_map_to(term.template.grid());
            let step = m.column(0).into_owned();
            let mut tw = scratch.take(n);
            let mut tg = scratch.take(3 * n);
            let (gx, rest) = tg.split_at_mut(n);
            let (gy, gz) = rest.split_at_mut(n);
            tw.par_chunks_mut(nx)
                .zip(gx.par_chunks_mut(nx))
                .zip(gy.par_chunks_mut(nx).zip(gz.par_chunks_mut(nx)))
                .enumerate()
                .for_each(|(r, ((tw, gx), (gy, gz)))| {
                    let base = r * nx;
                    let row0 = m * crate::Vec3::new(0.0, (r % ny) as f64, (r / ny) as f64) + b;
                    for i in 0..nx {
                        let k = base + i;
                        let d = crate::Vec3::new(u[k], u[n + k], u[2 * n + k]);
                        let c = row0 + step * i as f64 + w * d;
                        let (v, g) = term.template.sample_voxel_with_gradient(&c, &term.flat);
                        tw[i] = v;
                        gx[i] = g.x;
                        gy[i] = g.y;
                        gz[i] = g.z;
                    }
                });
            let mut d_tw = scratch.take(0);
            let d = term.reference.eval(&tw, &self.grid, want_grad.then_some(&mut d_tw), scratch);
            distance += term.weight * d;
            if want_grad {
                let wgt = term.weight;
                dist_grad.par_chunks_mut(n).zip(tg.par_chunks(n)).for_each(|(comp, g)| {
                    for ((o, dt), gi) in comp.iter_mut().zip(&d_tw).zip(g) {
                        *o += wgt * dt * gi;
                    }
                });
            }
            scratch.give(tw);
            scratch.give(tg);
            scratch.give(d_tw);
        }
        if self.alpha == 0.0 {
            if let Some(g) = grad {
                g.copy_from_slice(&dist_grad);
            }
            scratch.give(dist_grad);
            return ObjectiveValue { distance, regularizer: 0.0, total: distance };
        }
        let regularizer = match grad {
            Some(g) => {
                let r = curvature_planar(u, &self.grid, Some(g), scratch);
                g.par_iter_mut().zip(dist_grad.par_iter()).for_each(|(o, d)| *o = d + self.alpha * *o);
                r
            }
            None => curvature_planar(u, &self.grid, None, scratch),
        };
        scratch.give(dist_grad);
        ObjectiveValue { distance, regularizer, total: distance + self.alpha * regularizer }
    }
}

/// One-shot evaluation of `J` and its gradient field.
pub fn objective_eval(
    u: &DeformationField,
    template: &Volume3D,
    r: &Volume3D,
    s: &ObjectiveSettings,
) -> Result<(f64, DeformationField)> {
    u.grid().check_same(r.grid(), "field must live on the reference grid")?;
    let obj = Objective::new(template, r, s)?;
    let mut g = vec![0.0; u.as_slice().len()];
    let v = obj.eval(u.as_slice(), Some(&mut g));
    if !v.total.is_finite() {
        return Err(Error::NonFiniteObjective(v.total));
    }
    Ok((v.total, DeformationField::from_planar(r.grid().clone(), g)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Vec3;

    fn row(n: usize) -> Grid {
        Grid::axis_aligned([n, 1, 1], [1.0; 3], Vec3::zeros()).unwrap()
    }

    #[test]
    fn gradient_examples() {
        let g = Grid::axis_aligned([5, 4, 3], [0.5, 1.0, 2.0], Vec3::zeros()).unwrap();
        let c = Volume3D::new(g.clone(), vec![7.0; g.len()]).unwrap();
        assert!(image_gradient(&c).unwrap().iter().all(|comp| comp.iter().all(|&v| v == 0.0)));
        let lin = Volume3D::from_fn(g.clone(), |p| 3.0 * p.x);
        let gr = image_gradient(&lin).unwrap();
        assert!(gr[0].iter().all(|&v| (v - 3.0).abs() < 1e-5));
        assert!(gr[1].iter().chain(&gr[2]).all(|&v| v == 0.0));

        let sq = Volume3D::from_fn(row(6), |p| p.x * p.x);
        let gr = image_gradient(&sq).unwrap();
        assert_eq!(gr[0][0], 1.0); // (1 - 0) / 1
        assert_eq!(gr[0][5], 9.0); // (25 - 16) / 1
        for (i, v) in gr[0].iter().enumerate().take(5).skip(1) {
            assert_eq!(*v, 2.0 * i as f64);
        }
    }

    #[test]
    fn adjoint_identity() {
        let g = Grid::axis_aligned([5, 3, 4], [0.7, 1.0, 1.3], Vec3::zeros()).unwrap();
        let n = g.len();
        let f: Vec<f64> = (0..n).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
        let w: Vec<f64> = (0..3 * n).map(|i| ((i * 13) % 7) as f64 - 3.0).collect();
        let gf = gradient_axes(&f, &g);
        let gtw = gradient_adjoint(&w, &g);
        let lhs: f64 = gf.iter().zip(&w).map(|(a, b)| a * b).sum();
        let rhs: f64 = f.iter().zip(&gtw).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0));
    }

    #[test]
    fn eps_examples() {
        let g = Grid::axis_aligned([8, 8, 8], [1.0; 3], Vec3::zeros()).unwrap();
        let c = Volume3D::new(g.clone(), vec![2.0; g.len()]).unwrap();
        assert_eq!(estimate_eps(&c), 1e-6);
        let ramp = Volume3D::from_fn(g.clone(), |p| 3.0 * p.x);
        assert!((estimate_eps(&ramp) - 0.3).abs() < 1e-9);
        let ramp10 = Volume3D::from_fn(g.clone(), |p| 30.0 * p.x);
        assert!((estimate_eps(&ramp10) - 10.0 * estimate_eps(&ramp)).abs() < 1e-9);
        // flat half excluded: stencil gives 1.5, 3, 3, 3 on x = 4..7
        let hinge = Volume3D::from_fn(g, |p| (3.0 * (p.x - 4.0)).max(0.0));
        assert!((estimate_eps(&hinge) - 0.2625).abs() < 1e-9);
    }

    #[test]
    fn ngf_zero_cases() {
        let g = Grid::axis_aligned([6, 6, 6], [1.0; 3], Vec3::zeros()).unwrap();
        let v = Volume3D::from_fn(g.clone(), |p| (p.x * 0.7).sin() + p.y * p.z * 0.1);
        assert!(ngf_distance(&v, &v, 0.1).unwrap().value.abs() < 1e-12);
        let a = Volume3D::new(g.clone(), vec![1.0; g.len()]).unwrap();
        let b = Volume3D::new(g.clone(), vec![9.0; g.len()]).unwrap();
        assert_eq!(ngf_distance(&a, &b, 0.1).unwrap().value, 0.0);
        let other = Volume3D::zeros(Grid::axis_aligned([6, 6, 5], [1.0; 3], Vec3::zeros()).unwrap());
        assert!(matches!(ngf_distance(&a, &other, 0.1), Err(Error::GridMismatch(_))));
    }

    #[test]
    fn curvature_constant_and_quadratic_row() {
        let g = Grid::axis_aligned([4, 5, 6], [1.0, 2.0, 0.5], Vec3::zeros()).unwrap();
        let (v, gr) = curvature(&DeformationField::zeros(g.clone()));
        assert_eq!(v, 0.0);
        assert!(gr.as_slice().iter().all(|&x| x == 0.0));
        let (v, gr) = curvature(&DeformationField::from_fn(g, |_| Vec3::new(5.0, 5.0, 5.0)));
        assert_eq!(v, 0.0);
        assert!(gr.as_slice().iter().all(|&x| x == 0.0));

        // u_x = x² on a row: interior Laplacian 2, boundary (u1 − u0) and (u[n−2] − u[n−1]) terms
        let n = 7;
        let field = DeformationField::from_fn(row(n), |p| Vec3::new(p.x * p.x, 0.0, 0.0));
        let (v, _) = curvature(&field);
        let ux: Vec<f64> = (0..n).map(|i| (i * i) as f64).collect();
        let mut hand = 0.5 * (ux[1] - ux[0]).powi(2) + 0.5 * (ux[n - 2] - ux[n - 1]).powi(2);
        hand += (n - 2) as f64 * 0.5 * 4.0;
        assert!((v - hand).abs() < 1e-12);
    }
}
