//! Generates synthetic cases, registers each one and prints a before/after
//! TRE table.
//!
//! cargo run --release --example synth_eval -- [first_seed] [count] [dims]

use edtreg::cli::evaluate_pair;
use edtreg::metrics::format_report;
use edtreg::synth::make_case;
use edtreg::RegistrationConfig;

fn main() -> edtreg::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args: Vec<u64> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let first = args.first().copied().unwrap_or(1);
    let count = args.get(1).copied().unwrap_or(3);
    let dims = args.get(2).copied().unwrap_or(64) as usize;
    let cfg = RegistrationConfig::default();
    let mut rows = Vec::new();
    for seed in first..first + count {
        let case = make_case(seed, [dims; 3], [1.0; 3], 4.0)?;
        let t = std::time::Instant::now();
        let row = evaluate_pair(
            &seed.to_string(),
            &case.before_map.volume,
            &case.after_map.volume,
            &case.landmarks_before,
            &case.landmarks_after,
            &cfg,
        )?;
        eprintln!("seed {seed}: {:.2} -> {:.2} mm in {:.1}s", row.before.mean, row.after.mean, t.elapsed().as_secs_f64());
        rows.push(row);
    }
    print!("{}", format_report(&rows));
    Ok(())
}
