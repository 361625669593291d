use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use steerlab_core::rng;
use steerlab_core::stats::{four_pl, gmm_fit, ks_test, logistic_fit, mann_whitney, GmmConfig};

#[test]
fn ks_fixture() {
    let r = ks_test(&[1.0, 2.0, 3.0, 4.0], &[1.5, 2.5, 3.5, 4.5]).unwrap();
    assert_eq!(r.statistic, 0.25);
}

fn brute_u(a: &[f64], b: &[f64]) -> f64 {
    let mut u = 0.0;
    for x in a {
        for y in b {
            if x > y {
                u += 1.0;
            } else if x == y {
                u += 0.5;
            }
        }
    }
    u
}

#[test]
fn mann_whitney_u_matches_pair_counting_up_to_six() {
    let mut r = rng::stream(21, 0);
    for n in 1..=6 {
        for m in 1..=6 {
            for _ in 0..20 {
                let a: Vec<f64> = (0..n).map(|_| r.random_range(0..5) as f64).collect();
                let b: Vec<f64> = (0..m).map(|_| r.random_range(0..5) as f64).collect();
                let got = mann_whitney(&a, &b).unwrap();
                assert_eq!(got.u_a, brute_u(&a, &b), "{a:?} {b:?}");
                assert_eq!(got.u_b, brute_u(&b, &a), "{a:?} {b:?}");
            }
        }
    }
}

#[test]
fn em_log_likelihood_never_decreases() {
    let mut r = rng::stream(33, 0);
    for inst in 0..20u64 {
        let k = 1 + inst as usize % 4;
        let d = 1 + inst as usize % 3;
        let n = 40 + 5 * inst as usize;
        let centres: Vec<Vec<f64>> = (0..k).map(|_| (0..d).map(|_| 4.0 * r.random::<f64>()).collect()).collect();
        let mut x = Array2::<f64>::zeros((n, d));
        for i in 0..n {
            let c = &centres[i % k];
            for j in 0..d {
                x[[i, j]] = c[j] + 0.5 * r.sample::<f64, _>(StandardNormal);
            }
        }
        let cfg = GmmConfig { k, n_init: 1, ..GmmConfig::default() };
        let fit = gmm_fit(x.view(), &cfg, inst).unwrap();
        for w in fit.trace.windows(2) {
            assert!(w[1] >= w[0], "instance {inst}: {} -> {}", w[0], w[1]);
        }
    }
}

#[test]
fn four_parameter_logistic_recovers_planted_curves() {
    for &(lower, upper, mid, slope) in &[(0.1f64, 0.9f64, 0.5f64, 3.0f64), (0.05, 0.7, -2.0, -1.2), (0.2, 0.95, 4.0, 0.8)] {
        let pts: Vec<(f64, f64)> = (0..25)
            .map(|i| {
                let x = mid - 6.0 / slope.abs() + 12.0 / slope.abs() * i as f64 / 24.0;
                (x, four_pl(x, lower, upper, mid, slope))
            })
            .collect();
        let fit = logistic_fit(&pts).unwrap();
        assert!(fit.r_squared >= 0.999, "{fit:?}");
        for (got, want) in [(fit.lower, lower), (fit.upper, upper), (fit.midpoint, mid), (fit.slope, slope)] {
            assert!((got - want).abs() <= 1e-3, "{fit:?}");
        }
    }
}
