//! Property tests against closed forms written out independently of the library.

use std::sync::Arc;

use daenet::cascade::{self, CascadeConfig};
use daenet::conformal::{quantile_rank, ConformalCalibration};
use daenet::dae::{make_robertson, DaeSystem, InputSchedule, SyntheticParams, SyntheticTwoTimescale};
use daenet::linalg::{self, DenseMatrix};
use daenet::newton::{self, NewtonConfig};
use daenet::train::WindowClock;
use daenet::trajectory::{Trajectory, TrajectoryMeta};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn det_gauss(mut a: Vec<Vec<f64>>) -> f64 {
    let n = a.len();
    let mut det = 1.0;
    for k in 0..n {
        let p = (k..n).max_by(|&i, &j| a[i][k].abs().total_cmp(&a[j][k].abs())).unwrap();
        if p != k {
            a.swap(p, k);
            det = -det;
        }
        det *= a[k][k];
        for i in k + 1..n {
            let m = a[i][k] / a[k][k];
            for j in k..n {
                a[i][j] -= m * a[k][j];
            }
        }
    }
    det
}

fn matrix(n: usize, entries: &[f64]) -> DenseMatrix {
    // Diagonal shift keeps the draws comfortably nonsingular.
    DenseMatrix::from_fn(n, n, |i, j| entries[i * n + j] + if i == j { 2.0 * n as f64 } else { 0.0 })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn lu_solve_has_small_residual(n in 1usize..7, entries in prop::collection::vec(-1.0f64..1.0, 36), b in prop::collection::vec(-1.0f64..1.0, 6)) {
        let a = matrix(n, &entries);
        let x = linalg::solve(&a, &b[..n]).unwrap();
        let r = a.matvec(&x);
        let worst = r.iter().zip(&b[..n]).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
        prop_assert!(worst <= 1e-12 * (1.0 + a.norm_inf() * linalg::norm_inf(&x)));
    }

    #[test]
    fn determinant_matches_elimination(n in 1usize..7, entries in prop::collection::vec(-1.0f64..1.0, 36)) {
        let a = matrix(n, &entries);
        let rows: Vec<Vec<f64>> = (0..n).map(|r| a.row(r).to_vec()).collect();
        let expected = det_gauss(rows);
        let got = linalg::det(&a).unwrap();
        prop_assert!((got - expected).abs() <= 1e-10 * expected.abs());
    }

    #[test]
    fn robertson_quasi_steady_solve_is_exact(y1 in 0.01f64..1.0) {
        let sys = make_robertson();
        let r = newton::solve_extended(&sys, &[y1], &[], None, &NewtonConfig::default().with_tol(1e-15)).unwrap();
        let (y2, y3) = (r.y_star[0], r.y_star[1]);
        let f = 0.04 * y1 - 1e4 * y2 * y3 - 3e7 * y2 * y2;
        prop_assert!(f.abs() <= 1e-15, "f_fast = {f:e}");
        prop_assert!(y2 >= 0.0 && y3 >= 0.0);
        prop_assert!((y1 + y2 + y3 - 1.0).abs() <= 2.0 * f64::EPSILON);
    }

    #[test]
    fn affine_pair_contraction_is_closed_form(a1 in -1.0f64..1.0, a2 in -1.0f64..1.0, c in -2.0f64..2.0) {
        let cs = cascade::two_scalar_affine(a1, a2, c, 0.5);
        let est = cascade::estimate_contraction(&cs, &[vec![0.2], vec![0.1]], &[0.0], &NewtonConfig::default()).unwrap();
        prop_assert!((est.rho - (c * (a1 + a2)).abs()).abs() <= 1e-10);
    }

    #[test]
    fn weak_coupling_fixed_point(a1 in -0.5f64..0.5, a2 in -0.5f64..0.5, c in -0.5f64..0.5) {
        let cs = cascade::two_scalar_affine(a1, a2, c, 0.5);
        let (x1, x2) = (0.2, -0.3);
        let r = cascade::cascade_solve(&cs, &[vec![x1], vec![x2]], &[0.0], &CascadeConfig::default()).unwrap();
        // v + c (a1 v + x1 + a2 v + x2) = v_ref.
        let v = (0.5 - c * (x1 + x2)) / (1.0 + c * (a1 + a2));
        prop_assert!((r.v_star[0] - v).abs() <= 1e-9);
    }

    #[test]
    fn log_clock_derivative(t_start in 1e-3f64..1e4, tau in 0.0f64..1.0, decades in 0.1f64..2.0) {
        let clock = WindowClock::Log10 { decades };
        let h = 1e-6;
        let fd = (clock.time(t_start, tau + h) - clock.time(t_start, tau - h)) / (2.0 * h);
        prop_assert!((fd - clock.dt_dtau(t_start, tau)).abs() <= 1e-7 * fd.abs());
        prop_assert_eq!(clock.time(t_start, 0.0), t_start);
    }

    #[test]
    fn trajectory_csv_round_trip_is_bit_exact(values in prop::collection::vec(-1e6f64..1e6, 9)) {
        let sys = make_robertson();
        let meta = TrajectoryMeta::for_system(&sys, &InputSchedule::none());
        let mut t = Trajectory::new(meta.clone());
        for k in 0..3 {
            t.push(k as f64 * 0.1, vec![values[3 * k], values[3 * k + 1]], vec![values[3 * k + 2]]);
        }
        let back = Trajectory::from_csv(&t.to_csv(), meta).unwrap();
        prop_assert_eq!(back.x, t.x);
        prop_assert_eq!(back.z, t.z);
        prop_assert_eq!(back.times, t.times);
    }
}

#[test]
fn split_conformal_rank_and_marginal_coverage() {
    // Rank k = ⌈(n+1)(1−α)⌉; for exchangeable scores P(S_test ≤ q̂) = k/(n+1).
    for (n, alpha, k) in [(19, 0.1, 18), (99, 0.1, 90), (100, 0.1, 91), (49, 0.2, 40)] {
        assert_eq!(quantile_rank(n, alpha), Some(k));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (n, alpha) = (19, 0.1);
    let trials = 4000;
    let mut hits = 0;
    for _ in 0..trials {
        let rows: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.gen::<f64>()]).collect();
        let cal = ConformalCalibration::from_scores(vec!["s".into()], &rows, alpha).unwrap();
        hits += usize::from(rng.gen::<f64>() <= cal.q_hat[0]);
    }
    let cov = hits as f64 / trials as f64;
    assert!((cov - 18.0 / 20.0).abs() < 0.02, "{cov}");
}

#[test]
fn synthetic_extended_solve_lands_on_closed_form_manifold() {
    let model = SyntheticTwoTimescale::new(SyntheticParams::new(100.0, 2, 4, 2)).unwrap();
    let sys = DaeSystem::new(Arc::new(model.clone())).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..50 {
        let x_s = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        let u = [rng.gen_range(-0.5..0.5)];
        let r = newton::solve_extended(&sys, &x_s, &u, None, &NewtonConfig::default()).unwrap();
        let m = model.manifold(&x_s, &u);
        let err = r.y_star.iter().zip(&m).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err <= 1e-11, "{err}");
    }
}
