use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use edtreg::io::{read_scalar_volume, write_landmarks, write_mask};
use edtreg::{Grid, LandmarkSet, Mask3D, Vec3};

fn edtreg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_edtreg")).args(args).output().expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn edt_row() {
    let dir = tempfile::tempdir().unwrap();
    let grid = Grid::axis_aligned([5, 1, 1], [1.0; 3], Vec3::zeros()).unwrap();
    let m = Mask3D::new(grid, vec![false, true, true, true, false]).unwrap();
    let (inp, out) = (dir.path().join("m.mhd"), dir.path().join("d.mhd"));
    write_mask(&m, &inp).unwrap();
    let o = edtreg(&["edt", "--in", s(&inp), "--out", s(&out), "--mode", "interior"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(read_scalar_volume(&out).unwrap().data(), &[0.0, 1.0, 2.0, 1.0, 0.0]);
}

#[test]
fn tre_of_identical_files_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let pts: Vec<Vec3> = (0..5).map(|i| Vec3::new(i as f64, 2.0 * i as f64, -1.5)).collect();
    write_landmarks(&LandmarkSet::from_points(&pts), &a).unwrap();
    let o = edtreg(&["tre", "--fixed", s(&a), "--moving", s(&a)]);
    assert_eq!(o.status.code(), Some(0));
    let text = String::from_utf8(o.stdout).unwrap();
    for line in text.lines().filter(|l| !l.starts_with('#') && !l.starts_with("id")) {
        assert!(line.ends_with(",0.000000"), "{line}");
    }
    assert!(text.contains("mean 0.00"));
}

#[test]
fn exit_codes() {
    assert_eq!(edtreg(&["tre", "--bogus"]).status.code(), Some(1));
    assert_eq!(edtreg(&["frobnicate"]).status.code(), Some(1));
    let o = edtreg(&["tre", "--fixed", "/nonexistent/a.csv", "--moving", "/nonexistent/b.csv"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("/nonexistent/a.csv"));
    let dir = tempfile::tempdir().unwrap();
    let o = edtreg(&["synth", "--seed", "1", "--out", s(dir.path()), "--max-mag", "0"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn synth_then_eval_case7() {
    let dir = tempfile::tempdir().unwrap();
    let case = dir.path().join("case7");
    let o = edtreg(&["synth", "--seed", "7", "--out", s(&case)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let o = edtreg(&["eval", s(&case)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8(o.stdout).unwrap();
    let last = text.lines().last().unwrap();
    let cols: Vec<&str> = last.split_whitespace().collect();
    // Mean±sd  n±sd  before±sd  after±sd
    let mean = |c: &str| c.split('±').next().unwrap().parse::<f64>().unwrap();
    let (before, after) = (mean(cols[2]), mean(cols[3]));
    assert!(after <= 0.4 * before, "{text}");
}

#[test]
fn register_outputs_do_not_depend_on_threads() {
    let dir = tempfile::tempdir().unwrap();
    let case = dir.path().join("c");
    assert_eq!(edtreg(&["synth", "--seed", "3", "--dims", "32", "--out", s(&case)]).status.code(), Some(0));
    let mut outs = Vec::new();
    for t in ["1", "3"] {
        let out = dir.path().join(format!("r{t}"));
        let o = edtreg(&[
            "--threads",
            t,
            "register",
            "--template",
            s(&case.join("before.mhd")),
            "--reference",
            s(&case.join("after.mhd")),
            "--out",
            s(&out),
        ]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        for f in ["field_ux.raw", "field_uy.raw", "field_uz.raw", "warped.raw", "rigid.txt"] {
            assert!(out.join(f).is_file(), "{f}");
        }
        outs.push(out);
    }
    for f in ["field_ux.raw", "field_uy.raw", "field_uz.raw", "warped.raw", "rigid.txt"] {
        assert_eq!(fs::read(outs[0].join(f)).unwrap(), fs::read(outs[1].join(f)).unwrap(), "{f}");
    }
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(outs[0].join("summary.json")).unwrap()).unwrap();
    assert!(summary["seconds"].as_f64().unwrap() > 0.0);
    assert_eq!(summary["per_level"].as_array().unwrap().len(), 4);
    assert!(summary["rigid_params"]["angles_rad"].is_array());
}
