use edtreg::pipeline::{register_deformable, register_rigid, Stage};
use edtreg::solver::StopReason;
use edtreg::synth::{make_case, make_smooth_rigid_pair};
use edtreg::transform::{rigid_to_field, rigid_to_matrix, warp_image, warp_points};
use edtreg::{register, tre, DeformationField, RegistrationConfig, RigidParams, Vec3, Volume3D};

fn textured(dims: usize) -> Volume3D {
    make_smooth_rigid_pair(7, [dims; 3], [1.0; 3], 0.0, 0.0).unwrap().template
}

fn translated(v: &Volume3D, shift: Vec3) -> (Volume3D, RigidParams) {
    let motion = RigidParams { angles: [0.0; 3], translation: shift, center: v.grid().center() };
    (warp_image(v, &rigid_to_field(&motion, v.grid())), motion)
}

#[test]
fn rigid_identical_is_identity() {
    let v = textured(40);
    let found = register_rigid(&v, &v, None, &RegistrationConfig::default()).unwrap();
    assert!(found.params.angles.iter().all(|a| a.abs() < 1e-6));
    assert!(found.params.translation.norm() < 1e-6);
}

#[test]
fn rigid_recovers_translation() {
    let v = textured(64);
    let (r, motion) = translated(&v, Vec3::new(3.0, -2.0, 1.0));
    let found = register_rigid(&v, &r, None, &RegistrationConfig::default()).unwrap();
    let err = (found.params.translation - motion.translation).norm();
    assert!(err <= 0.1, "translation error {err}");
    let max_angle = found.params.angles.iter().map(|a| a.abs().to_degrees()).fold(0.0, f64::max);
    assert!(max_angle <= 0.2, "angle {max_angle}°");
}

#[test]
fn rigid_started_at_the_answer_stops_immediately() {
    let v = textured(48);
    let (r, motion) = translated(&v, Vec3::new(3.0, -2.0, 1.0));
    let init = rigid_to_matrix(&motion);
    let cfg = RegistrationConfig { rigid_offset: 0, ..Default::default() };
    let found = register_rigid(&v, &r, Some(&init), &cfg).unwrap();
    assert!(found.report.solve.iterations <= 1, "{:?}", found.report.solve);
    assert_eq!(found.report.solve.stop, StopReason::GradTol);
}

#[test]
fn deformable_identical_stays_at_zero() {
    let v = textured(32);
    let u0 = DeformationField::zeros(v.grid().clone());
    let out = register_deformable(&v, &v, &u0, &RegistrationConfig::default()).unwrap();
    assert!(out.field.max_norm() < 1e-3);
}

#[test]
fn register_identical_reproduces_reference() {
    let v = textured(32);
    let r = register(&v, &v, &RegistrationConfig::default()).unwrap();
    let (lo, hi) = v.range();
    let diff = r.warped.data().iter().zip(v.data()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
    assert!(diff < 1e-3 * (hi - lo), "{diff}");
    assert!(r.field.grid().same_as(v.grid(), 0.0));
}

#[test]
fn starting_from_true_field_does_not_get_worse() {
    let case = make_case(2, [40; 3], [1.0; 3], 3.0).unwrap();
    let cfg = RegistrationConfig { levels: 1, ..Default::default() };
    let out = register_deformable(&case.before_map.volume, &case.after_map.volume, &case.true_field, &cfg).unwrap();
    let rep = &out.reports[0];
    assert!(rep.j_final() <= rep.j_initial());
    // The field is identifiable only where the images carry structure; in
    // the flat and erased parts curvature alone reshapes it. Compare at the
    // landmarks, which sit on structure ridges. 0.5 voxel = 0.5 mm here.
    for l in case.landmarks_after.iter() {
        let d = out.field.sample(&l.position).unwrap() - case.true_field.sample(&l.position).unwrap();
        assert!(d.norm() < 0.5, "landmark {} moved {}", l.id, d.norm());
    }
}

#[test]
fn synthetic_case_error_drops_by_60_percent() {
    let case = make_case(3, [48; 3], [1.0; 3], 4.0).unwrap();
    let r = register(&case.before_map.volume, &case.after_map.volume, &RegistrationConfig::default()).unwrap();
    let before = tre(&case.landmarks_before, &case.landmarks_after).unwrap().summary.mean;
    let mapped = warp_points(&r.field, &case.landmarks_after);
    let after = tre(&case.landmarks_before, &mapped.points).unwrap().summary.mean;
    assert!(after <= 0.4 * before, "{before} -> {after}");

    // per-level traces never increase, levels run coarse to fine
    assert_eq!(r.rigid_report.stage, Stage::Rigid);
    let levels: Vec<usize> = r.deformable_reports.iter().map(|l| l.level).collect();
    assert_eq!(levels, vec![2, 1, 0]);
    for rep in std::iter::once(&r.rigid_report).chain(&r.deformable_reports) {
        assert!(rep.solve.trace.windows(2).all(|w| w[1] <= w[0]), "{:?}", rep.level);
    }
}
