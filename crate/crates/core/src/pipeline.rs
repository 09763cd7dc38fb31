//! Two-stage registration driver.
//!
//! 1. Rigid: six parameters optimized on pyramid level `rigid_offset`
//!    (one level coarser than the input by default), started from the
//!    tracking matrix when one is given.
//! 2. Deformable: the rigid motion is folded into a displacement field
//!    `u0 = M·x − x`, restricted to the coarsest of `levels` pyramid levels,
//!    refined there, prolonged to the next finer level and refined again,
//!    down to the native resolution.

use std::time::Instant;

use log::info;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::{Grid, Pyramid, Volume3D};
use crate::objective::{NgfEps, Objective, ObjectiveSettings};
use crate::par::det_sum;
use crate::precond::CurvaturePreconditioner;
use crate::solver::{lbfgs_minimize, lbfgs_minimize_with, SolveReport, SolverOptions};
use crate::transform::{
    euler_zyx_partials, matrix_to_rigid, prolong_field, resample_field, rigid_to_field, rigid_to_matrix,
    warp_image, wrap_angle, DeformationField, Matrix44, RigidParams,
};
use crate::Vec3;

/// Optional second NGF term on a pair of raw intensity volumes sharing the
/// grids of the distance maps.
#[derive(Clone, Debug)]
pub struct IntensityTerm {
    pub template: Volume3D,
    pub reference: Volume3D,
    pub weight: f64,
}

#[derive(Clone, Debug)]
pub struct RegistrationConfig {
    /// Number of deformable pyramid levels; level 0 is native resolution.
    pub levels: usize,
    /// Pyramid level used by the rigid stage.
    pub rigid_offset: usize,
    /// NGF settings of the rigid stage; its `alpha` is unused because the
    /// rigid stage minimises the distance term alone.
    pub rigid_objective: ObjectiveSettings,
    pub deformable_objective: ObjectiveSettings,
    pub rigid_solver: SolverOptions,
    pub deformable_solver: SolverOptions,
    /// Deformable level `l` may take `deformable_solver.max_iter · growth^l`
    /// iterations; coarse iterations are cheap and do most of the work.
    pub coarse_iter_growth: usize,
    /// Seed the deformable L-BFGS with the exact inverse of the regulariser
    /// Hessian (plus a data-curvature shift) instead of a scaled identity.
    pub spectral_preconditioner: bool,
    /// Shift of the preconditioner relative to the stiffness of the
    /// smoothest non-constant mode.
    pub precond_sigma: f64,
    /// Initial guess, e.g. from a tracking system. Identity when `None`.
    pub init: Option<Matrix44>,
    pub intensity: Option<IntensityTerm>,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        RegistrationConfig {
            levels: 3,
            rigid_offset: 1,
            rigid_objective: ObjectiveSettings::default(),
            deformable_objective: ObjectiveSettings::default(),
            rigid_solver: SolverOptions { grad_tol: 1e-5, fun_tol: 1e-9, max_iter: 200, ..Default::default() },
            deformable_solver: SolverOptions { max_iter: 50, ..Default::default() },
            coarse_iter_growth: 2,
            spectral_preconditioner: true,
            precond_sigma: 10.0,
            init: None,
            intensity: None,
        }
    }
}

impl RegistrationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(Error::InvalidArgument("levels must be >= 1".into()));
        }
        if self.coarse_iter_growth == 0 {
            return Err(Error::InvalidArgument("coarse_iter_growth must be >= 1".into()));
        }
        if !(self.precond_sigma > 0.0 && self.precond_sigma.is_finite()) {
            return Err(Error::InvalidArgument("precond_sigma must be > 0".into()));
        }
        self.rigid_objective.validate()?;
        self.deformable_objective.validate()?;
        self.rigid_solver.validate()?;
        self.deformable_solver.validate()?;
        if let Some(t) = &self.intensity {
            if !(t.weight >= 0.0 && t.weight.is_finite()) {
                return Err(Error::InvalidArgument("intensity weight must be >= 0".into()));
            }
        }
        Ok(())
    }

    fn depth(&self) -> usize {
        self.levels.max(self.rigid_offset + 1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Rigid,
    Deformable,
}

/// Solver outcome for one pyramid level.
#[derive(Clone, Debug, Serialize)]
pub struct LevelReport {
    pub stage: Stage,
    pub level: usize,
    pub dims: [usize; 3],
    pub eps: f64,
    pub solve: SolveReport,
    pub seconds: f64,
}

impl LevelReport {
    pub fn j_initial(&self) -> f64 {
        self.solve.initial_value()
    }

    pub fn j_final(&self) -> f64 {
        self.solve.final_value
    }
}

#[derive(Clone, Debug)]
pub struct RigidStage {
    pub params: RigidParams,
    pub report: LevelReport,
}

#[derive(Clone, Debug)]
pub struct DeformableStage {
    pub field: DeformationField,
    /// Coarsest level first.
    pub reports: Vec<LevelReport>,
}

#[derive(Clone, Debug)]
pub struct RegistrationResult {
    pub rigid: RigidParams,
    /// Displacement on the reference grid with the rigid motion folded in.
    pub field: DeformationField,
    /// Deformed template on the reference grid.
    pub warped: Volume3D,
    pub rigid_report: LevelReport,
    pub deformable_reports: Vec<LevelReport>,
    pub seconds: f64,
}

struct Pyramids {
    template: Pyramid,
    reference: Pyramid,
    aux: Option<(Pyramid, Pyramid, f64)>,
}

impl Pyramids {
    fn build(template: &Volume3D, reference: &Volume3D, cfg: &RegistrationConfig, depth: usize) -> Result<Self> {
        let aux = match &cfg.intensity {
            Some(t) if t.weight > 0.0 => {
                t.reference.grid().check_same(reference.grid(), "intensity reference grid")?;
                t.template.grid().check_same(template.grid(), "intensity template grid")?;
                Some((Pyramid::build(&t.template, depth)?, Pyramid::build(&t.reference, depth)?, t.weight))
            }
            _ => None,
        };
        Ok(Pyramids {
            template: Pyramid::build(template, depth)?,
            reference: Pyramid::build(reference, depth)?,
            aux,
        })
    }

    fn objective(&self, level: usize, settings: &ObjectiveSettings) -> Result<Objective<'_>> {
        let mut obj = Objective::new(self.template.level(level), self.reference.level(level), settings)?;
        if let Some((t, r, w)) = &self.aux {
            obj.add_term(*w, t.level(level), r.level(level), NgfEps::Auto)?;
        }
        Ok(obj)
    }
}

/// Root-mean-square distance of the grid hull from its centre; converts
/// angles to a length so rotation and translation parameters are comparable.
fn rotation_scale(grid: &Grid) -> f64 {
    let ext: f64 = (0..3)
        .map(|a| {
            let e = (grid.dims()[a] - 1) as f64 * grid.spacing()[a];
            e * e / 12.0
        })
        .sum();
    ext.sqrt().max(1.0)
}

fn rigid_from_vector(x: &[f64], scale: f64, center: Vec3) -> RigidParams {
    RigidParams {
        angles: [x[0] / scale, x[1] / scale, x[2] / scale],
        translation: Vec3::new(x[3], x[4], x[5]),
        center,
    }
}

fn run_rigid(pyr: &Pyramids, cfg: &RegistrationConfig, center: Vec3, init: RigidParams) -> Result<RigidStage> {
    let clock = Instant::now();
    let level = cfg.rigid_offset;
    let mut obj = pyr.objective(level, &cfg.rigid_objective)?;
    // a rigid motion needs no smoothing, and the mirror boundary would
    // otherwise penalise rotations
    obj.set_alpha(0.0);
    let grid = obj.grid().clone();
    let n = grid.len();
    let scale = rotation_scale(&grid);
    let x0 = vec![
        init.angles[0] * scale,
        init.angles[1] * scale,
        init.angles[2] * scale,
        init.translation.x,
        init.translation.y,
        init.translation.z,
    ];
    let mut field = vec![0.0; 3 * n];
    let mut gfield = vec![0.0; 3 * n];
    let f = |x: &[f64], g: &mut [f64]| -> f64 {
        let params = rigid_from_vector(x, scale, center);
        let m = rigid_to_matrix(&params);
        for i in 0..n {
            let p = grid.voxel_center(i);
            let u = m.apply(&p) - p;
            field[i] = u.x;
            field[n + i] = u.y;
            field[2 * n + i] = u.z;
        }
        let value = obj.eval(&field, Some(&mut gfield)).total;
        let partials = euler_zyx_partials(params.angles);
        for d in 0..3 {
            g[3 + d] = det_sum(n, |r| gfield[d * n..(d + 1) * n][r].iter().sum());
        }
        for (k, dq) in partials.iter().enumerate() {
            let gf = &gfield;
            let grid = &grid;
            g[k] = det_sum(n, |r| {
                r.map(|i| {
                    let dp = dq * (grid.voxel_center(i) - center);
                    gf[i] * dp.x + gf[n + i] * dp.y + gf[2 * n + i] * dp.z
                })
                .sum()
            }) / scale;
        }
        value
    };
    let (x, solve) = lbfgs_minimize(f, x0, &cfg.rigid_solver)?;
    let mut params = rigid_from_vector(&x, scale, center);
    params.angles = params.angles.map(wrap_angle);
    info!(
        "rigid: {} iterations, J {:.6e} -> {:.6e} ({:?})",
        solve.iterations,
        solve.initial_value(),
        solve.final_value,
        solve.stop
    );
    Ok(RigidStage {
        params,
        report: LevelReport {
            stage: Stage::Rigid,
            level,
            dims: grid.dims(),
            eps: obj.eps(),
            solve,
            seconds: clock.elapsed().as_secs_f64(),
        },
    })
}

fn run_deformable(pyr: &Pyramids, cfg: &RegistrationConfig, u0: &DeformationField) -> Result<DeformableStage> {
    let mut reports = Vec::with_capacity(cfg.levels);
    let mut current: Option<DeformationField> = None;
    for level in (0..cfg.levels).rev() {
        let clock = Instant::now();
        let grid = pyr.reference.level(level).grid().clone();
        let start = match &current {
            None => resample_field(u0, &grid)?,
            Some(prev) => prolong_field(prev, &grid)?,
        };
        let obj = pyr.objective(level, &cfg.deformable_objective)?;
        let f = |x: &[f64], g: &mut [f64]| obj.eval(x, Some(g)).total;
        let growth = cfg.coarse_iter_growth.saturating_pow(level as u32);
        let opts = SolverOptions { max_iter: cfg.deformable_solver.max_iter.saturating_mul(growth), ..cfg.deformable_solver };
        let (x, solve) = if cfg.spectral_preconditioner {
            let mut h0 = CurvaturePreconditioner::new(&grid, cfg.deformable_objective.alpha, cfg.precond_sigma);
            lbfgs_minimize_with(f, start.into_vec(), &opts, &mut h0)?
        } else {
            lbfgs_minimize(f, start.into_vec(), &opts)?
        };
        info!(
            "deformable level {level}: {} iterations, J {:.6e} -> {:.6e} ({:?})",
            solve.iterations,
            solve.initial_value(),
            solve.final_value,
            solve.stop
        );
        reports.push(LevelReport {
            stage: Stage::Deformable,
            level,
            dims: grid.dims(),
            eps: obj.eps(),
            solve,
            seconds: clock.elapsed().as_secs_f64(),
        });
        current = Some(DeformationField::from_planar(grid, x)?);
    }
    Ok(DeformableStage { field: current.expect("levels >= 1"), reports })
}

/// Rigid registration on the coarser pyramid level. Rotation centre is the
/// centre of the reference domain.
pub fn register_rigid(
    template: &Volume3D,
    reference: &Volume3D,
    init: Option<&Matrix44>,
    cfg: &RegistrationConfig,
) -> Result<RigidStage> {
    cfg.validate()?;
    let pyr = Pyramids::build(template, reference, cfg, cfg.rigid_offset + 1)?;
    let center = reference.grid().center();
    let start = match init {
        Some(m) => matrix_to_rigid(m, center)?.params,
        None => RigidParams::identity(center),
    };
    run_rigid(&pyr, cfg, center, start)
}

/// Multilevel dense refinement of `u0` (given on the reference grid).
pub fn register_deformable(
    template: &Volume3D,
    reference: &Volume3D,
    u0: &DeformationField,
    cfg: &RegistrationConfig,
) -> Result<DeformableStage> {
    cfg.validate()?;
    u0.grid().check_same(reference.grid(), "initial field must live on the reference grid")?;
    let pyr = Pyramids::build(template, reference, cfg, cfg.levels)?;
    run_deformable(&pyr, cfg, u0)
}

/// Full rigid + deformable registration of `template` onto `reference`.
pub fn register(template: &Volume3D, reference: &Volume3D, cfg: &RegistrationConfig) -> Result<RegistrationResult> {
    cfg.validate()?;
    let clock = Instant::now();
    let pyr = Pyramids::build(template, reference, cfg, cfg.depth())?;
    let center = reference.grid().center();
    let start = match &cfg.init {
        Some(m) => matrix_to_rigid(m, center)?.params,
        None => RigidParams::identity(center),
    };
    let rigid = run_rigid(&pyr, cfg, center, start)?;
    let u0 = rigid_to_field(&rigid.params, reference.grid());
    let deformable = run_deformable(&pyr, cfg, &u0)?;
    let warped = warp_image(template, &deformable.field);
    Ok(RegistrationResult {
        rigid: rigid.params,
        field: deformable.field,
        warped,
        rigid_report: rigid.report,
        deformable_reports: deformable.reports,
        seconds: clock.elapsed().as_secs_f64(),
    })
}
