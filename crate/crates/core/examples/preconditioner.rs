//! Plain against spectrally preconditioned L-BFGS on one deformable
//! objective, same iteration budget.
//!
//! cargo run --release --example preconditioner -- [seed] [dims] [iterations]

use edtreg::objective::Objective;
use edtreg::precond::CurvaturePreconditioner;
use edtreg::synth::make_case;
use edtreg::{lbfgs_minimize, lbfgs_minimize_with, ObjectiveSettings, SolverOptions};

fn main() -> edtreg::Result<()> {
    let mut args = std::env::args().skip(1).map(|a| a.parse::<u64>().ok());
    let seed = args.next().flatten().unwrap_or(1);
    let dims = args.next().flatten().unwrap_or(48) as usize;
    let iters = args.next().flatten().unwrap_or(60) as usize;

    let case = make_case(seed, [dims; 3], [1.0; 3], 4.0)?;
    let (template, reference) = (&case.before_map.volume, &case.after_map.volume);
    let settings = ObjectiveSettings::default();
    let obj = Objective::new(template, reference, &settings)?;
    let f = |u: &[f64], g: &mut [f64]| obj.eval(u, Some(g)).total;
    let x0 = vec![0.0; 3 * template.grid().len()];
    let opts = SolverOptions { max_iter: iters, ..Default::default() };

    let (_, plain) = lbfgs_minimize(f, x0.clone(), &opts)?;
    let mut pc = CurvaturePreconditioner::new(reference.grid(), settings.alpha, 10.0);
    let (_, pre) = lbfgs_minimize_with(f, x0, &opts, &mut pc)?;
    for (name, r) in [("plain", plain), ("preconditioned", pre)] {
        println!(
            "{name:>14}: J {:.4} -> {:.4} in {} iterations / {} evaluations ({:?})",
            r.initial_value(), r.final_value, r.iterations, r.evaluations, r.stop
        );
    }
    Ok(())
}
