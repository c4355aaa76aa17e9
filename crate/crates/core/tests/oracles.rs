//! Frozen reference values computed independently (exact rational arithmetic
//! or hand computation) and checked against the library.

use dalvq::agreement::compute_phi;
use dalvq::baselines::lloyd;
use dalvq::diagnostics::{theta, theta_tail_bound, ThetaSeries};
use dalvq::geometry::{empirical_distortion, empirical_h, QuantizerVec, SampleBatch};
use dalvq::schedule::{CommSchedule, TickPlan};

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(1.0)
}

#[test]
fn theta_matches_exact_sums() {
    let table: [(f64, [f64; 5]); 3] = [
        (0.3, [0.3, 0.39, 0.417, 0.129759, 0.023122999576923122]),
        (0.5, [0.5, 0.75, 0.875, 0.3802083333333333, 0.055995058486526736]),
        (0.9, [0.9, 1.71, 2.439, 2.637531, 1.1251696830325442]),
    ];
    for (rho, expected) in table {
        let series = ThetaSeries::new(rho, 20).unwrap();
        for (t, want) in [0, 1, 2, 5, 20].into_iter().zip(expected) {
            assert!(close(theta(rho, t).unwrap(), want, 1e-13), "rho {rho} t {t}");
            assert!(close(series.get(t).unwrap(), want, 1e-13), "rho {rho} t {t}");
        }
    }
}

#[test]
fn theta_at_one_million() {
    let cases = [(0.3, 4.285720e-7, 0.853415), (0.5, 1.000002e-6, 1.862187), (0.9, 9.000090e-6, 8.325566)];
    for (rho, th, total) in cases {
        let s = ThetaSeries::new(rho, 1_000_000).unwrap();
        assert!(close(s.get(1_000_000).unwrap(), th, 1e-6), "rho {rho}");
        assert!((s.weighted_partial_sums()[1_000_000] - total).abs() < 1e-6, "rho {rho}");
    }
}

#[test]
fn theta_tail_bound_values() {
    let cases = [
        (0.3, 100, 0.14285714285714288),
        (0.5, 10_000, 0.02),
        (0.9, 100, 1.0008464149782879),
    ];
    for (rho, t, want) in cases {
        assert!(close(theta_tail_bound(rho, t), want, 1e-12));
        assert!(theta(rho, t).unwrap() <= want);
    }
}

fn line_batch(points: &[f64]) -> SampleBatch {
    SampleBatch::new(1, points.to_vec(), vec![0.0], vec![13.0], 13.0).unwrap()
}

#[test]
fn lloyd_fixed_point_on_line() {
    let batch = line_batch(&[0.0, 1.0, 2.0, 10.0, 11.0, 13.0]);
    let init = QuantizerVec::new(2, 1, vec![0.5, 12.0]).unwrap();
    let st = lloyd(&init, &batch, 1e-12, 100).unwrap();
    assert!(close(st.quantizer.component(0)[0], 1.0, 1e-14));
    assert!(close(st.quantizer.component(1)[0], 34.0 / 3.0, 1e-14));
    assert!(close(st.distortion, 5.0 / 9.0, 1e-14));
    let h = empirical_h(&st.quantizer, &batch).unwrap();
    assert!(h.iter().all(|x| x.abs() < 1e-14));
}

#[test]
fn distortion_and_gradient_by_hand() {
    let batch = line_batch(&[0.0, 1.0, 2.0, 10.0, 11.0, 13.0]);
    let w = QuantizerVec::new(2, 1, vec![0.0, 12.0]).unwrap();
    // cells {0, 1, 2} and {10, 11, 13}
    assert!(close(empirical_distortion(&w, &batch).unwrap(), 0.5 * 11.0 / 6.0, 1e-14));
    let h = empirical_h(&w, &batch).unwrap();
    assert!(close(h[0], -3.0 / 6.0, 1e-14));
    assert!(close(h[1], 2.0 / 6.0, 1e-14));
}

#[test]
fn phi_under_full_averaging() {
    let m = 3;
    let ticks = vec![TickPlan::averaging(m); 6];
    let schedule = CommSchedule::from_ticks(m, &ticks, None).unwrap();
    let table = compute_phi(&schedule, 5).unwrap();
    for tau in -1..5i64 {
        for i in 0..m {
            for j in 0..m {
                let want = if tau == 4 { f64::from(u8::from(i == j)) } else { 1.0 / 3.0 };
                assert!(close(table.get(i, j, tau).unwrap(), want, 1e-15), "tau {tau} ({i},{j})");
            }
        }
    }
}
