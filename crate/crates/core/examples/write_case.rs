//! Writes synthetic cases in the directory layout read by `edtreg eval`.
//!
//! cargo run --release --example write_case -- <out_dir> [count] [dims]

use std::path::PathBuf;

use edtreg::cli::write_case;
use edtreg::synth::make_case;

fn main() -> edtreg::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "cases".into()));
    let count: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(3);
    let dims: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(64);
    for seed in 1..=count {
        let case = make_case(seed, [dims; 3], [1.0; 3], 4.0)?;
        let dir = out.join(format!("case{seed:02}"));
        write_case(&case, &dir)?;
        let (lo, hi) = case.cavity;
        println!("{}: {} landmarks, cavity {lo:?}..{hi:?}", dir.display(), case.landmarks_after.len());
    }
    Ok(())
}
