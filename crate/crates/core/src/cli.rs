//! Command line front end. `run` parses arguments, executes one subcommand
//! and returns the process exit code (0 ok, 1 usage, 2 data, 3 numerical).

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::edt::{edt3, EdtMode};
use crate::error::{Error, Result};
use crate::io;
use crate::metrics::{format_report, format_tre, tre, CaseRow, LandmarkSet};
use crate::objective::NgfEps;
use crate::pipeline::{register, IntensityTerm, RegistrationConfig, RegistrationResult};
use crate::synth::{make_case, SynthCase};
use crate::transform::{rigid_to_matrix, warp_points};

#[derive(Parser, Debug)]
#[command(name = "edtreg", version, about = "Distance-map driven volume registration")]
struct Cli {
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Distance map of a binary mask.
    Edt {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "interior")]
        mode: EdtMode,
    },
    /// Rigid + deformable registration of a template onto a reference.
    Register {
        #[arg(long)]
        template: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        /// 4×4 initial guess mapping reference to template coordinates.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Output directory for field, warped volume, matrix and summary.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        reg: RegFlags,
        #[arg(long, requires = "intensity_reference")]
        intensity_template: Option<PathBuf>,
        #[arg(long, requires = "intensity_template")]
        intensity_reference: Option<PathBuf>,
        #[arg(long, default_value_t = 0.0)]
        intensity_weight: f64,
    },
    /// Moves landmarks by a displacement field: p + u(p).
    WarpPoints {
        /// Field base path (components at <stem>_ux.mhd etc.).
        #[arg(long)]
        field: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Target registration error between two landmark files.
    Tre {
        #[arg(long)]
        fixed: PathBuf,
        #[arg(long)]
        moving: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Writes a seeded synthetic case.
    Synth {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        dims: usize,
        #[arg(long, default_value_t = 1.0)]
        spacing: f64,
        #[arg(long, default_value_t = 4.0)]
        max_mag: f64,
    },
    /// Registers every case in a directory and prints a before/after table.
    Eval {
        /// A case directory, or a directory of case directories.
        dir: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        reg: RegFlags,
    },
}

#[derive(Args, Debug, Clone)]
struct RegFlags {
    /// Curvature weight.
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    /// NGF edge parameter: a number or "auto".
    #[arg(long, default_value = "auto")]
    ngf_eps: NgfEps,
    #[arg(long, default_value_t = 3)]
    levels: usize,
    #[arg(long, default_value_t = 1)]
    rigid_offset: usize,
    /// Iteration cap per deformable level.
    #[arg(long)]
    max_iter: Option<usize>,
    /// Accepted for symmetry with `synth`; registration is deterministic.
    #[arg(long)]
    seed: Option<u64>,
}

impl RegFlags {
    fn config(&self) -> RegistrationConfig {
        let mut cfg = RegistrationConfig { levels: self.levels, rigid_offset: self.rigid_offset, ..Default::default() };
        for o in [&mut cfg.rigid_objective, &mut cfg.deformable_objective] {
            o.alpha = self.alpha;
            o.eps = self.ngf_eps;
        }
        if let Some(m) = self.max_iter {
            cfg.deformable_solver.max_iter = m;
        }
        cfg
    }
}

/// Parses `args` (including the program name) and runs the subcommand.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let outcome = match cli.threads {
        Some(0) => Err(Error::InvalidArgument("--threads must be >= 1".into())),
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(|| dispatch(cli.command)),
            Err(e) => Err(Error::InvalidArgument(format!("--threads: {e}"))),
        },
        None => dispatch(cli.command),
    };
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn require_file(p: &Path) -> Result<()> {
    if p.is_file() {
        Ok(())
    } else {
        Err(Error::io(p, std::io::Error::new(std::io::ErrorKind::NotFound, "no such file")))
    }
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write_text(p: &Path, text: &str) -> Result<()> {
    fs::write(p, text).map_err(|e| Error::io(p, e))
}

fn emit(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => write_text(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Edt { input, out, mode } => {
            require_file(&input)?;
            let mask = io::read_mask(&input)?;
            io::write_volume(&edt3(&mask, mode)?.volume, &out)
        }
        Command::Register { template, reference, init, out, reg, intensity_template, intensity_reference, intensity_weight } => {
            for p in [Some(&template), Some(&reference), init.as_ref(), intensity_template.as_ref(), intensity_reference.as_ref()]
                .into_iter()
                .flatten()
            {
                require_file(p)?;
            }
            let mut cfg = reg.config();
            if let Some(p) = &init {
                cfg.init = Some(io::read_matrix(p)?);
            }
            if let (Some(t), Some(r)) = (&intensity_template, &intensity_reference) {
                cfg.intensity = Some(IntensityTerm {
                    template: io::read_scalar_volume(t)?,
                    reference: io::read_scalar_volume(r)?,
                    weight: intensity_weight,
                });
            }
            let tv = io::read_scalar_volume(&template)?;
            let rv = io::read_scalar_volume(&reference)?;
            let result = register(&tv, &rv, &cfg)?;
            create_dir(&out)?;
            io::write_field(&result.field, out.join("field.mhd"))?;
            io::write_volume(&result.warped, out.join("warped.mhd"))?;
            io::write_matrix(&rigid_to_matrix(&result.rigid), out.join("rigid.txt"))?;
            write_text(&out.join("summary.json"), &run_summary(&result))
        }
        Command::WarpPoints { field, input, out } => {
            require_file(&input)?;
            let u = io::read_field(&field)?;
            let w = warp_points(&u, &io::read_landmarks(&input)?);
            if !w.outside.is_empty() {
                log::warn!("landmarks outside the field grid kept in place: {}", w.outside.join(" "));
            }
            io::write_landmarks(&w.points, &out)
        }
        Command::Tre { fixed, moving, out } => {
            require_file(&fixed)?;
            require_file(&moving)?;
            let r = tre(&io::read_landmarks(&fixed)?, &io::read_landmarks(&moving)?)?;
            emit(&format_tre(&r), out.as_deref())
        }
        Command::Synth { seed, out, dims, spacing, max_mag } => {
            let case = make_case(seed, [dims; 3], [spacing; 3], max_mag)?;
            write_case(&case, &out)
        }
        Command::Eval { dir, out, reg } => {
            let report = eval_dir(&dir, &reg.config())?;
            emit(&report, out.as_deref())
        }
    }
}

/// JSON run summary: rigid parameters, per-level solver outcome, seconds.
pub fn run_summary(r: &RegistrationResult) -> String {
    let m = rigid_to_matrix(&r.rigid);
    let levels: Vec<_> = std::iter::once(&r.rigid_report)
        .chain(&r.deformable_reports)
        .map(|l| {
            json!({
                "stage": l.stage,
                "level": l.level,
                "dims": l.dims,
                "eps": l.eps,
                "iterations": l.solve.iterations,
                "J_initial": l.j_initial(),
                "J_final": l.j_final(),
                "stop": l.solve.stop,
            })
        })
        .collect();
    let v = json!({
        "rigid_params": {
            "angles_rad": r.rigid.angles,
            "translation_mm": [r.rigid.translation.x, r.rigid.translation.y, r.rigid.translation.z],
            "center_mm": [r.rigid.center.x, r.rigid.center.y, r.rigid.center.z],
            "matrix": m.0,
        },
        "per_level": levels,
        "seconds": r.seconds,
    });
    serde_json::to_string_pretty(&v).expect("json values are finite") + "\n"
}

/// File names of a case directory.
pub const CASE_BEFORE: &str = "before.mhd";
pub const CASE_AFTER: &str = "after.mhd";
pub const CASE_LANDMARKS_BEFORE: &str = "landmarks_before.csv";
pub const CASE_LANDMARKS_AFTER: &str = "landmarks_after.csv";
pub const CASE_TRUE_FIELD: &str = "true_field.mhd";

pub fn write_case(case: &SynthCase, dir: &Path) -> Result<()> {
    create_dir(dir)?;
    io::write_volume(&case.before_map.volume, dir.join(CASE_BEFORE))?;
    io::write_volume(&case.after_map.volume, dir.join(CASE_AFTER))?;
    io::write_landmarks(&case.landmarks_before, dir.join(CASE_LANDMARKS_BEFORE))?;
    io::write_landmarks(&case.landmarks_after, dir.join(CASE_LANDMARKS_AFTER))?;
    io::write_field(&case.true_field, dir.join(CASE_TRUE_FIELD))
}

/// Registers `before` (template) onto `after` (reference), carries the after
/// landmarks through the field and compares with the before landmarks.
pub fn evaluate_pair(
    label: &str,
    before: &crate::Volume3D,
    after: &crate::Volume3D,
    landmarks_before: &LandmarkSet,
    landmarks_after: &LandmarkSet,
    cfg: &RegistrationConfig,
) -> Result<CaseRow> {
    let initial = tre(landmarks_before, landmarks_after)?;
    let result = register(before, after, cfg)?;
    let mapped = warp_points(&result.field, landmarks_after);
    let fin = tre(landmarks_before, &mapped.points)?;
    Ok(CaseRow { label: label.to_string(), landmarks: initial.summary.count, before: initial.summary, after: fin.summary })
}

fn is_case_dir(p: &Path) -> bool {
    p.join(CASE_BEFORE).is_file()
}

pub fn evaluate_case_dir(dir: &Path, cfg: &RegistrationConfig) -> Result<CaseRow> {
    let label = dir.file_name().and_then(|s| s.to_str()).unwrap_or("case").to_string();
    for f in [CASE_BEFORE, CASE_AFTER, CASE_LANDMARKS_BEFORE, CASE_LANDMARKS_AFTER] {
        require_file(&dir.join(f))?;
    }
    evaluate_pair(
        &label,
        &io::read_scalar_volume(dir.join(CASE_BEFORE))?,
        &io::read_scalar_volume(dir.join(CASE_AFTER))?,
        &io::read_landmarks(dir.join(CASE_LANDMARKS_BEFORE))?,
        &io::read_landmarks(dir.join(CASE_LANDMARKS_AFTER))?,
        cfg,
    )
}

/// Case directories under `dir` in name order (or `dir` itself).
pub fn case_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    if is_case_dir(dir) {
        return Ok(vec![dir.to_path_buf()]);
    }
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| is_case_dir(p))
        .collect();
    out.sort();
    if out.is_empty() {
        return Err(Error::InvalidArgument(format!("{} holds no case directories", dir.display())));
    }
    Ok(out)
}

pub fn eval_dir(dir: &Path, cfg: &RegistrationConfig) -> Result<String> {
    let rows = case_dirs(dir)?.iter().map(|d| evaluate_case_dir(d, cfg)).collect::<Result<Vec<_>>>()?;
    Ok(format_report(&rows))
}
