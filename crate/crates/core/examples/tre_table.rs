//! Per-landmark error between two landmark files, or a demo table when run
//! without arguments.
//!
//! cargo run --release --example tre_table -- [fixed.csv moving.csv]

use edtreg::io::read_landmarks;
use edtreg::metrics::{format_report, format_tre, CaseRow, TreSummary};
use edtreg::tre;

fn main() -> edtreg::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if let [fixed, moving] = args.as_slice() {
        let report = tre(&read_landmarks(fixed)?, &read_landmarks(moving)?)?;
        print!("{}", format_tre(&report));
        return Ok(());
    }
    let rows: Vec<CaseRow> = [(13, [5.80, 3.62, 7.22], [1.41, 0.60, 2.53]), (9, [2.10, 0.82, 3.35], [0.95, 0.31, 1.62])]
        .into_iter()
        .enumerate()
        .map(|(i, (n, b, a))| {
            let cell = |v: [f64; 3]| TreSummary { count: n, mean: v[0], min: v[1], max: v[2], sd: 0.0 };
            CaseRow { label: (i + 1).to_string(), landmarks: n, before: cell(b), after: cell(a) }
        })
        .collect();
    print!("{}", format_report(&rows));
    Ok(())
}
