use edtreg::synth::SynthRng;
use edtreg::{lbfgs_minimize, SolverOptions};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

/// Random SPD matrix `MᵀM + shift·I` and right-hand side.
fn spd_problem(seed: u64, n: usize, shift: f64) -> (DMatrix<f64>, DVector<f64>) {
    let mut rng = SynthRng::new(seed);
    let m = DMatrix::from_fn(n, n, |_, _| rng.range(-1.0, 1.0));
    let a = m.transpose() * &m + DMatrix::identity(n, n) * shift;
    let b = DVector::from_fn(n, |_, _| rng.range(-5.0, 5.0));
    (a, b)
}

fn quadratic<'a>(a: &'a DMatrix<f64>, b: &'a DVector<f64>) -> impl FnMut(&[f64], &mut [f64]) -> f64 + 'a {
    move |x: &[f64], g: &mut [f64]| {
        let xv = DVector::from_column_slice(x);
        let ax = a * &xv;
        g.copy_from_slice((&ax - b).as_slice());
        0.5 * xv.dot(&ax) - b.dot(&xv)
    }
}

fn tight(memory: usize) -> SolverOptions {
    SolverOptions { memory, grad_tol: 1e-15, fun_tol: 1e-300, max_iter: 2000, ..Default::default() }
}

#[test]
fn convex_quadratic_matches_direct_solve() {
    let (a, b) = spd_problem(11, 50, 1.0);
    let want = a.clone().cholesky().unwrap().solve(&b);
    let (x, rep) = lbfgs_minimize(quadratic(&a, &b), vec![0.0; 50], &tight(5)).unwrap();
    let err = (DVector::from_vec(x) - &want).amax();
    assert!(err < 1e-6, "max error {err:e}, {:?}", rep.stop);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    /// Finite termination needs exact line searches; a tiny curvature
    /// constant makes the cubic step (exact on a quadratic) mandatory.
    #[test]
    fn small_quadratics_finish_within_n_plus_one(seed in 0u64..10_000, n in 2usize..7) {
        let (a, b) = spd_problem(seed, n, 0.5);
        let want = a.clone().cholesky().unwrap().solve(&b);
        let opts = |k| SolverOptions { max_iter: k, c1: 1e-7, c2: 1e-6, ..tight(n) };
        let (x, _) = lbfgs_minimize(quadratic(&a, &b), vec![0.0; n], &opts(n + 1)).unwrap();
        let err = (DVector::from_vec(x) - &want).amax();
        prop_assert!(err <= 1e-8, "n {} error {:e}", n, err);
    }
}

#[test]
fn repeated_runs_are_bitwise_identical() {
    let (a, b) = spd_problem(4, 30, 0.1);
    let run = || lbfgs_minimize(quadratic(&a, &b), vec![1.0; 30], &SolverOptions::default()).unwrap();
    let ((x1, r1), (x2, r2)) = (run(), run());
    assert_eq!(x1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), x2.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    assert_eq!(r1.trace, r2.trace);
}
