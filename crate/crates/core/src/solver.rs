//! Limited-memory BFGS with a strong-Wolfe line search.
//!
//! Stopping tests are relative to the starting objective, following the
//! usual variational-registration practice: the run stops when
//! `|g| ≤ grad_tol · (1 + |f0|)` or when one iteration decreases the
//! objective by at most `fun_tol · (1 + |f0|)`.

use std::collections::VecDeque;

use serde::Serialize;

use crate::error::{Error, Result};
use rayon::prelude::*;

use crate::par::{dot, norm, CHUNK};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolverOptions {
    /// Number of stored correction pairs.
    pub memory: usize,
    pub max_iter: usize,
    pub grad_tol: f64,
    pub fun_tol: f64,
    /// Sufficient-decrease constant.
    pub c1: f64,
    /// Curvature constant.
    pub c2: f64,
    /// Function evaluations allowed per line search.
    pub max_line_search: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            memory: 5,
            max_iter: 100,
            grad_tol: 1e-3,
            fun_tol: 1e-6,
            c1: 1e-4,
            c2: 0.9,
            max_line_search: 20,
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<()> {
        let ok = self.memory > 0
            && self.grad_tol > 0.0
            && self.fun_tol > 0.0
            && 0.0 < self.c1
            && self.c1 < self.c2
            && self.c2 < 1.0
            && self.max_line_search > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid solver options {self:?}")))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum StopReason {
    GradTol,
    FunTol,
    MaxIter,
    LineSearchFail,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SolveReport {
    pub iterations: usize,
    pub evaluations: usize,
    pub final_value: f64,
    pub final_grad_norm: f64,
    pub stop: StopReason,
    /// Objective at the start and after every accepted iteration.
    pub trace: Vec<f64>,
}

impl SolveReport {
    pub fn initial_value(&self) -> f64 {
        self.trace[0]
    }
}

struct Point {
    alpha: f64,
    value: f64,
    slope: f64,
    x: Vec<f64>,
    grad: Vec<f64>,
}

struct Problem<'f, F> {
    f: &'f mut F,
    evaluations: usize,
    /// Released vectors, reused so large problems do not fault in fresh
    /// pages on every probe.
    pool: Vec<Vec<f64>>,
}

impl<F: FnMut(&[f64], &mut [f64]) -> f64> Problem<'_, F> {
    fn take(&mut self, len: usize) -> Vec<f64> {
        let mut v = self.pool.pop().unwrap_or_default();
        v.resize(len, 0.0);
        v
    }

    fn give(&mut self, v: Vec<f64>) {
        if v.capacity() > 0 {
            self.pool.push(v);
        }
    }

    fn release(&mut self, p: Point) {
        self.give(p.x);
        self.give(p.grad);
    }

    fn probe(&mut self, x: &[f64], d: &[f64], alpha: f64) -> Point {
        let mut xa = self.take(x.len());
        xa.par_iter_mut().zip(x.par_iter().zip(d.par_iter())).for_each(|(o, (xi, di))| *o = xi + alpha * di);
        let mut g = self.take(x.len());
        g.fill(0.0);
        let value = (self.f)(&xa, &mut g);
        self.evaluations += 1;
        let slope = if value.is_finite() { dot(&g, d) } else { f64::NAN };
        Point { alpha, value, slope, x: xa, grad: g }
    }
}

/// Minimizer of the cubic through two points with slopes, safeguarded
/// into the interior of the bracket; falls back to bisection.
fn cubic_step(lo: &Point, hi: &Point) -> f64 {
    let (a0, a1) = (lo.alpha, hi.alpha);
    let (lo_b, hi_b) = (a0.min(a1), a0.max(a1));
    let width = hi_b - lo_b;
    let mid = 0.5 * (a0 + a1);
    if !(hi.value.is_finite() && hi.slope.is_finite()) {
        return mid;
    }
    let d1 = lo.slope + hi.slope - 3.0 * (lo.value - hi.value) / (a0 - a1);
    let disc = d1 * d1 - lo.slope * hi.slope;
    if disc < 0.0 {
        return mid;
    }
    let d2 = (a1 - a0).signum() * disc.sqrt();
    let a = a1 - (a1 - a0) * (hi.slope + d2 - d1) / (hi.slope - lo.slope + 2.0 * d2);
    if !a.is_finite() {
        return mid;
    }
    a.clamp(lo_b + 0.1 * width, hi_b - 0.1 * width)
}

enum Search {
    Found(Point),
    /// Budget exhausted; best sufficient-decrease point if any.
    Exhausted(Option<Point>),
}

fn line_search<F: FnMut(&[f64], &mut [f64]) -> f64>(
    prob: &mut Problem<'_, F>,
    x: &[f64],
    f0: f64,
    slope0: f64,
    d: &[f64],
    alpha0: f64,
    opts: &SolverOptions,
) -> Search {
    let armijo = |p: &Point| p.value.is_finite() && p.value <= f0 + opts.c1 * p.alpha * slope0;
    let curvature_ok = |p: &Point| p.slope.abs() <= -opts.c2 * slope0;
    let mut budget = opts.max_line_search;

    let mut prev = Point { alpha: 0.0, value: f0, slope: slope0, x: Vec::new(), grad: Vec::new() };
    let mut alpha = alpha0;
    let mut first = true;
    let (mut lo, mut hi) = loop {
        if budget == 0 {
            return Search::Exhausted(None);
        }
        budget -= 1;
        let p = prob.probe(x, d, alpha);
        if !armijo(&p) || (!first && p.value >= prev.value) {
            break (prev, p);
        }
        if curvature_ok(&p) {
            prob.release(prev);
            return Search::Found(p);
        }
        if p.slope >= 0.0 {
            break (p, prev);
        }
        alpha *= 2.0;
        prob.release(std::mem::replace(&mut prev, p));
        first = false;
    };

    loop {
        if budget == 0 {
            prob.release(hi);
            return Search::Exhausted(best_of(prob, lo, f0));
        }
        budget -= 1;
        let a = cubic_step(&lo, &hi);
        let p = prob.probe(x, d, a);
        if !armijo(&p) || p.value >= lo.value {
            prob.release(std::mem::replace(&mut hi, p));
        } else {
            if curvature_ok(&p) {
                prob.release(lo);
                prob.release(hi);
                return Search::Found(p);
            }
            if p.slope * (hi.alpha - lo.alpha) >= 0.0 {
                let old_lo = std::mem::replace(&mut lo, p);
                prob.release(std::mem::replace(&mut hi, old_lo));
            } else {
                prob.release(std::mem::replace(&mut lo, p));
            }
        }
        if (hi.alpha - lo.alpha).abs() <= 1e-14 * lo.alpha.abs().max(1e-300) {
            prob.release(hi);
            return Search::Exhausted(best_of(prob, lo, f0));
        }
    }
}

fn best_of<F: FnMut(&[f64], &mut [f64]) -> f64>(prob: &mut Problem<'_, F>, lo: Point, f0: f64) -> Option<Point> {
    if lo.alpha > 0.0 && lo.value < f0 {
        Some(lo)
    } else {
        prob.release(lo);
        None
    }
}

/// Fixed symmetric positive-definite operator `P`; the initial inverse
/// Hessian of the recursion becomes `γ·P` with `γ = sᵀy / yᵀPy` of the
/// latest pair.
pub trait Preconditioner {
    /// `q ← P q`.
    fn apply(&mut self, q: &mut [f64]);
}

/// Stored correction pair with `rho = 1/(sᵀy)` and `yhy = yᵀPy`. `py`
/// holds `P y` and stays empty without a preconditioner (`P = I`).
struct Pair {
    s: Vec<f64>,
    y: Vec<f64>,
    py: Vec<f64>,
    rho: f64,
    yhy: f64,
}

/// `q ← scale·(q + c·v)`, returning `nextᵀq` (0 without `next`). Fixed
/// chunking keeps the sum independent of the thread count.
fn update_dot(q: &mut [f64], c: f64, v: &[f64], scale: f64, next: Option<&[f64]>) -> f64 {
    let partial: Vec<f64> = q
        .par_chunks_mut(CHUNK)
        .zip(v.par_chunks(CHUNK))
        .enumerate()
        .map(|(k, (qc, vc))| {
            for (qi, vi) in qc.iter_mut().zip(vc) {
                *qi = scale * (*qi + c * vi);
            }
            match next {
                Some(w) => qc.iter().zip(&w[k * CHUNK..]).map(|(a, b)| a * b).sum(),
                None => 0.0,
            }
        })
        .collect();
    partial.iter().sum()
}

/// First-loop step of the preconditioned recursion: `q ← q − c·y` and
/// `r ← scale·(r − c·py)`, returning `nextᵀq` or, without it, `yᵀr`.
fn update_pair(q: &mut [f64], r: &mut [f64], c: f64, p: &Pair, scale: f64, next: Option<&[f64]>) -> f64 {
    let partial: Vec<f64> = q
        .par_chunks_mut(CHUNK)
        .zip(r.par_chunks_mut(CHUNK))
        .enumerate()
        .map(|(k, (qc, rc))| {
            let o = k * CHUNK;
            let (y, py) = (&p.y[o..o + qc.len()], &p.py[o..o + qc.len()]);
            for i in 0..rc.len() {
                rc[i] = scale * (rc[i] - c * py[i]);
            }
            match next {
                Some(w) => {
                    let mut acc = 0.0;
                    for i in 0..qc.len() {
                        qc[i] -= c * y[i];
                        acc += qc[i] * w[o + i];
                    }
                    acc
                }
                None => rc.iter().zip(y).map(|(a, b)| a * b).sum(),
            }
        })
        .collect();
    partial.iter().sum()
}

/// `−H·g` by the two-loop recursion, each update fused with the next dot
/// product so every vector is streamed once per pass. With a
/// preconditioner, `pg = P g` and `q` is scratch space.
fn two_loop(g: &[f64], pg: Option<&[f64]>, mem: &VecDeque<Pair>, q: &mut Vec<f64>, mut r: Vec<f64>) -> Vec<f64> {
    r.clear();
    r.extend_from_slice(pg.unwrap_or(g));
    let m = mem.len();
    if m == 0 {
        r.iter_mut().for_each(|v| *v = -*v);
        return r;
    }
    let last = &mem[m - 1];
    let gamma = 1.0 / (last.rho * last.yhy);
    let mut alphas = vec![0.0; m];
    let mut proj = dot(&last.s, g);
    if pg.is_some() {
        q.clear();
        q.extend_from_slice(g);
    }
    for i in (0..m).rev() {
        let p = &mem[i];
        alphas[i] = p.rho * proj;
        let (scale, next) = match i {
            0 => (gamma, None),
            _ => (1.0, Some(&mem[i - 1].s[..])),
        };
        proj = if pg.is_some() {
            update_pair(q, &mut r, alphas[i], p, scale, next)
        } else {
            update_dot(&mut r, -alphas[i], &p.y, scale, Some(next.unwrap_or(&mem[0].y)))
        };
    }
    for i in 0..m {
        let p = &mem[i];
        let c = alphas[i] - p.rho * proj;
        proj = if i + 1 < m {
            update_dot(&mut r, c, &p.s, 1.0, Some(&mem[i + 1].y))
        } else {
            update_dot(&mut r, c, &p.s, -1.0, None)
        };
    }
    r
}

/// Writes `s = x1 − x0`, `y = g1 − g0` and, given `(P g1, P g0)`,
/// `py = P g1 − P g0`. Returns `(sᵀy, sᵀs, yᵀy, g1ᵀg1, yᵀPy)`; the last
/// equals `yᵀy` without a preconditioner.
#[allow(clippy::too_many_arguments)]
fn correction(
    x1: &[f64],
    x0: &[f64],
    g1: &[f64],
    g0: &[f64],
    pgs: Option<(&[f64], &[f64])>,
    s: &mut Vec<f64>,
    y: &mut Vec<f64>,
    py: &mut Vec<f64>,
) -> [f64; 5] {
    let n = x1.len();
    s.resize(n, 0.0);
    y.resize(n, 0.0);
    py.resize(if pgs.is_some() { n } else { 0 }, 0.0);
    let mut pys: Vec<&mut [f64]> = py.chunks_mut(CHUNK).collect();
    pys.resize_with(n.div_ceil(CHUNK), Default::default);
    let partial: Vec<[f64; 5]> = s
        .par_chunks_mut(CHUNK)
        .zip(y.par_chunks_mut(CHUNK))
        .zip(pys.into_par_iter())
        .enumerate()
        .map(|(k, ((sc, yc), pc))| {
            let o = k * CHUNK;
            let mut acc = [0.0; 5];
            for i in 0..sc.len() {
                let (si, yi, gi) = (x1[o + i] - x0[o + i], g1[o + i] - g0[o + i], g1[o + i]);
                sc[i] = si;
                yc[i] = yi;
                acc[0] += si * yi;
                acc[1] += si * si;
                acc[2] += yi * yi;
                acc[3] += gi * gi;
            }
            match pgs {
                Some((p1, p0)) => {
                    for i in 0..sc.len() {
                        pc[i] = p1[o + i] - p0[o + i];
                        acc[4] += yc[i] * pc[i];
                    }
                }
                None => acc[4] = acc[2],
            }
            acc
        })
        .collect();
    partial.iter().fold([0.0; 5], |a, b| std::array::from_fn(|j| a[j] + b[j]))
}

/// Minimizes `f`, which returns the value and writes the gradient into its
/// second argument. Returns the last accepted iterate.
pub fn lbfgs_minimize<F>(f: F, x0: Vec<f64>, opts: &SolverOptions) -> Result<(Vec<f64>, SolveReport)>
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    minimize(f, x0, opts, None)
}

/// [`lbfgs_minimize`] with initial inverse Hessian `γ·P`. Costs one
/// application of `P` per accepted iterate.
pub fn lbfgs_minimize_with<F>(
    f: F,
    x0: Vec<f64>,
    opts: &SolverOptions,
    precond: &mut dyn Preconditioner,
) -> Result<(Vec<f64>, SolveReport)>
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    minimize(f, x0, opts, Some(precond))
}

fn minimize<F>(
    mut f: F,
    x0: Vec<f64>,
    opts: &SolverOptions,
    mut precond: Option<&mut dyn Preconditioner>,
) -> Result<(Vec<f64>, SolveReport)>
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    opts.validate()?;
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("starting point is not finite".into()));
    }
    let mut prob = Problem { f: &mut f, evaluations: 0, pool: Vec::new() };
    let mut x = x0;
    let mut g = vec![0.0; x.len()];
    let mut fx = (prob.f)(&x, &mut g);
    prob.evaluations += 1;
    if !fx.is_finite() {
        return Err(Error::NonFiniteObjective(fx));
    }
    let scale = 1.0 + fx.abs();
    let mut trace = vec![fx];
    let mut gnorm = norm(&g);
    let mut mem: VecDeque<Pair> = VecDeque::with_capacity(opts.memory);
    let mut spare: [Vec<f64>; 3] = Default::default();
    let mut iterations = 0;

    let finish = |x: Vec<f64>, fx: f64, gnorm: f64, stop, iterations, evaluations, trace| {
        Ok((
            x,
            SolveReport { iterations, evaluations, final_value: fx, final_grad_norm: gnorm, stop, trace },
        ))
    };

    if gnorm <= opts.grad_tol * scale {
        return finish(x, fx, gnorm, StopReason::GradTol, 0, prob.evaluations, trace);
    }
    let mut pg = precond.as_deref_mut().map(|p| {
        let mut v = g.clone();
        p.apply(&mut v);
        v
    });
    // steepest descent in the metric of P, scaled to unit length
    let descent = |g: &[f64], pg: &Option<Vec<f64>>, gnorm: f64| -> (Vec<f64>, f64, f64) {
        match pg {
            None => (g.iter().map(|v| -v).collect(), -gnorm * gnorm, (1.0 / gnorm).min(1.0)),
            Some(pg) => (pg.iter().map(|v| -v).collect(), -dot(g, pg), (1.0 / norm(pg)).min(1.0)),
        }
    };

    while iterations < opts.max_iter {
        let (buf, mut q) = (prob.take(0), prob.take(0));
        let mut d = two_loop(&g, pg.as_deref(), &mem, &mut q, buf);
        prob.give(q);
        let mut slope = dot(&g, &d);
        let mut alpha0 = 1.0;
        if !(slope < 0.0) {
            mem.clear();
            prob.give(d);
            (d, slope, alpha0) = descent(&g, &pg, gnorm);
        } else if mem.is_empty() {
            alpha0 = descent(&g, &pg, gnorm).2;
        }
        let accepted = match line_search(&mut prob, &x, fx, slope, &d, alpha0, opts) {
            Search::Found(p) => Some(p),
            Search::Exhausted(best) => {
                if best.is_none() && !mem.is_empty() {
                    // retry once along steepest descent with fresh memory
                    mem.clear();
                    prob.give(d);
                    (d, slope, alpha0) = descent(&g, &pg, gnorm);
                    match line_search(&mut prob, &x, fx, slope, &d, alpha0, opts) {
                        Search::Found(p) => Some(p),
                        Search::Exhausted(b) => b,
                    }
                } else {
                    best
                }
            }
        };
        let Some(p) = accepted else {
            return finish(x, fx, gnorm, StopReason::LineSearchFail, iterations, prob.evaluations, trace);
        };

        let pg_new = match (precond.as_deref_mut(), &pg) {
            (Some(pc), Some(_)) => {
                let mut v = prob.take(0);
                v.extend_from_slice(&p.grad);
                pc.apply(&mut v);
                Some(v)
            }
            _ => None,
        };
        let pgs = pg_new.as_deref().zip(pg.as_deref());
        let [s_buf, y_buf, py_buf] = &mut spare;
        let [sy, ss, yy, gg, yhy] = correction(&p.x, &x, &p.grad, &g, pgs, s_buf, y_buf, py_buf);
        if sy > 1e-12 * (ss * yy).sqrt() && yhy > 0.0 {
            // the evicted pair's buffers become the next scratch space
            let recycled = match mem.len() == opts.memory {
                true => mem.pop_front().map(|p| [p.s, p.y, p.py]).unwrap_or_default(),
                false => Default::default(),
            };
            let [s, y, py] = std::mem::replace(&mut spare, recycled);
            mem.push_back(Pair { s, y, py, rho: 1.0 / sy, yhy });
        }
        let f_prev = fx;
        log::debug!(
            "iter {}: f {:.9e} -> {:.9e}, step {:.3e}, |g| {:.3e}, evals {}",
            iterations + 1,
            fx,
            p.value,
            p.alpha,
            gg.sqrt(),
            prob.evaluations
        );
        prob.give(std::mem::replace(&mut x, p.x));
        prob.give(std::mem::replace(&mut g, p.grad));
        if let Some(old) = std::mem::replace(&mut pg, pg_new) {
            prob.give(old);
        }
        prob.give(d);
        fx = p.value;
        gnorm = gg.sqrt();
        trace.push(fx);
        iterations += 1;

        if gnorm <= opts.grad_tol * scale {
            return finish(x, fx, gnorm, StopReason::GradTol, iterations, prob.evaluations, trace);
        }
        if f_prev - fx <= opts.fun_tol * scale {
            return finish(x, fx, gnorm, StopReason::FunTol, iterations, prob.evaluations, trace);
        }
    }
    finish(x, fx, gnorm, StopReason::MaxIter, iterations, prob.evaluations, trace)
}
