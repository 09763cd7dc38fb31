//! Recovers a known rigid motion between two smooth textured volumes.
//!
//! cargo run --release --example rigid -- [seed]

use std::time::Instant;

use edtreg::pipeline::register_rigid;
use edtreg::synth::make_smooth_rigid_pair;
use edtreg::RegistrationConfig;

fn main() -> edtreg::Result<()> {
    env_logger::init();
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1);
    let pair = make_smooth_rigid_pair(seed, [64; 3], [1.0; 3], 10.0, 5.0)?;
    let clock = Instant::now();
    let found = register_rigid(&pair.template, &pair.reference, None, &RegistrationConfig::default())?;
    let truth = pair.motion;

    // angle of the residual rotation
    let c = ((truth.rotation().transpose() * found.params.rotation()).trace() - 1.0) / 2.0;
    let rot_err = c.clamp(-1.0, 1.0).acos().to_degrees();
    println!("true angles (deg)  {:?}", truth.angles.map(f64::to_degrees));
    println!("found angles (deg) {:?}", found.params.angles.map(f64::to_degrees));
    println!("true shift  {:?}", truth.translation.as_slice());
    println!("found shift {:?}", found.params.translation.as_slice());
    println!(
        "rotation error {rot_err:.4} deg, translation error {:.4} mm, {} iterations ({:?}), {:.2} s",
        (truth.translation - found.params.translation).norm(),
        found.report.solve.iterations,
        found.report.solve.stop,
        clock.elapsed().as_secs_f64()
    );
    Ok(())
}
