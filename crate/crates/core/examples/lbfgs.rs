//! The bare optimizer on the extended Rosenbrock function.
//!
//! cargo run --release --example lbfgs -- [n]

use edtreg::{lbfgs_minimize, SolverOptions};

fn rosenbrock(x: &[f64], g: &mut [f64]) -> f64 {
    g.fill(0.0);
    let mut f = 0.0;
    for i in (0..x.len()).step_by(2) {
        let (a, b) = (x[i], x[i + 1]);
        let t = b - a * a;
        f += 100.0 * t * t + (1.0 - a).powi(2);
        g[i] = -400.0 * a * t - 2.0 * (1.0 - a);
        g[i + 1] = 200.0 * t;
    }
    f
}

fn main() -> edtreg::Result<()> {
    let n: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(100);
    let x0: Vec<f64> = (0..2 * n).map(|i| if i % 2 == 0 { -1.2 } else { 1.0 }).collect();
    let opts = SolverOptions { grad_tol: 1e-10, fun_tol: 1e-14, max_iter: 1000, ..Default::default() };
    let (x, report) = lbfgs_minimize(rosenbrock, x0, &opts)?;
    let err = x.iter().map(|v| (v - 1.0).abs()).fold(0.0, f64::max);
    println!(
        "{} variables: f = {:.3e} after {} iterations / {} evaluations ({:?}), max |x - 1| = {err:.2e}",
        2 * n,
        report.final_value,
        report.iterations,
        report.evaluations,
        report.stop
    );
    Ok(())
}
