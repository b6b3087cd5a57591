//! Property-based checks of the invariants that hold across modules.

use ndarray::Array2;
use proptest::prelude::*;

use spdiff::cspd::{Cspd, VpSchedule};
use spdiff::datasets::{generate, DatasetName, DatasetSpec};
use spdiff::denoiser::{Architecture, DenoiserParams};
use spdiff::evaluation::gaussian_path_nll;
use spdiff::io::{check_version, read_batch, write_batch};
use spdiff::linalg::DEFAULT_JITTER;
use spdiff::noise::covariance_matrix;
use spdiff::rng::{normal_array, seeded};
use spdiff::series::Normalizer;
use spdiff::verify::{check_posterior, check_score};
use spdiff::{KernelSpec, TimeGrid, TimeSeriesBatch};

fn grid_from_gaps(gaps: &[f64]) -> TimeGrid {
    let mut t = vec![0.0];
    for g in gaps {
        t.push(t.last().unwrap() + g);
    }
    TimeGrid::new(t).unwrap()
}

fn kernel(rbf: bool, gamma: f64) -> KernelSpec {
    if rbf {
        KernelSpec::rbf(gamma)
    } else {
        KernelSpec::ou(gamma)
    }
}

fn max_abs(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
}

fn small_arch(mixer: bool) -> Architecture {
    Architecture { channels: 2, hidden: 8, depth: 2, enc_dim: 4, enc_scale: 3.0, mixer, mixer_scales: vec![1.0, 10.0], whiten: None }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn factorization_reconstructs_kernel_matrices(
        n in 1usize..=256,
        spacing in 0.02f64..0.2,
        gamma in 0.1f64..5.0,
        rbf in any::<bool>(),
    ) {
        let grid = TimeGrid::uniform(n, 0.0, spacing * n as f64).unwrap();
        let k = kernel(rbf, gamma);
        let l = k.factor(&grid).unwrap();
        let mut sigma = covariance_matrix(&k, &grid).into_array();
        sigma.diag_mut().mapv_inplace(|v| v + DEFAULT_JITTER);
        prop_assert!(max_abs(&sigma, &l.reconstruct()) <= 1e-8);
    }

    #[test]
    fn whitening_identity_through_triangular_solves(
        gaps in proptest::collection::vec(0.005f64..0.3, 0..64),
        gamma in 0.5f64..100.0,
        rbf in any::<bool>(),
    ) {
        let grid = grid_from_gaps(&gaps);
        let l = kernel(rbf, gamma).factor(&grid).unwrap();
        let la = l.as_array().to_owned();
        let sigma_inv_l = l.solve_upper_columns(&l.solve_lower_columns(&la).unwrap()).unwrap();
        let prod = la.t().dot(&sigma_inv_l);
        prop_assert!(max_abs(&prod, &Array2::eye(grid.len())) <= 1e-6);
    }

    #[test]
    fn posterior_equals_gaussian_conditioning(seed in any::<u64>()) {
        let r = check_posterior(seed, &|s, x0, xn, n| s.posterior_params(x0, xn, n));
        prop_assert!(r.passed, "{:?}", r);
    }

    #[test]
    fn score_matches_finite_differences(seed in any::<u64>()) {
        let r = check_score(seed);
        prop_assert!(r.passed, "{:?}", r);
    }

    #[test]
    fn noise_prediction_score_equals_exact_score(
        gaps in proptest::collection::vec(0.05f64..0.5, 0..6),
        gamma in 0.5f64..10.0,
        rbf in any::<bool>(),
        s_index in 0usize..3,
        seed in any::<u64>(),
    ) {
        let s = [0.1, 0.5, 0.9][s_index];
        let grid = grid_from_gaps(&gaps);
        let k = kernel(rbf, gamma);
        let cspd = Cspd::new(VpSchedule::default(), k);
        let l = k.factor(&grid).unwrap();
        let mut rng = seeded(seed);
        let x0 = normal_array(&mut rng, grid.len(), 2);
        let white = normal_array(&mut rng, grid.len(), 2);
        let xs = cspd.noised(&x0, &l, s, &white).unwrap();
        let exact = cspd.exact_score(&xs, &x0, s, &l).unwrap().score;
        let from_eps = cspd.score_from_noise_prediction(&white, s, &l).unwrap();
        let scale = exact.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        prop_assert!(max_abs(&exact, &from_eps) <= 1e-10 * scale);
    }

    #[test]
    fn transition_preserves_unit_variance(s in 0.0f64..=1.0) {
        let (m, sigma2) = VpSchedule::default().factors(s).unwrap();
        prop_assert!((m * m + sigma2 - 1.0).abs() < 1e-15);
    }

    #[test]
    fn denoiser_is_permutation_equivariant(seed in any::<u64>(), m in 1usize..8) {
        let mut rng = seeded(seed);
        let p = DenoiserParams::init(small_arch(true), &mut rng).unwrap();
        let times: Vec<f64> = normal_array(&mut rng, m, 1).iter().map(|v| v.abs()).collect();
        let x = normal_array(&mut rng, m, 2);
        let perm: Vec<usize> = (0..m).rev().collect();
        let tp: Vec<f64> = perm.iter().map(|&i| times[i]).collect();
        let xp = Array2::from_shape_fn((m, 2), |(i, c)| x[[perm[i], c]]);
        let (out, _) = p.forward(&x, &times, 0.4).unwrap();
        let (outp, _) = p.forward(&xp, &tp, 0.4).unwrap();
        for i in 0..m {
            for c in 0..2 {
                prop_assert!((outp[[i, c]] - out[[perm[i], c]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pointwise_denoiser_ignores_other_points(seed in any::<u64>(), m in 2usize..8) {
        let mut rng = seeded(seed);
        let p = DenoiserParams::init(small_arch(false), &mut rng).unwrap();
        let times: Vec<f64> = (0..m).map(|i| 0.1 * i as f64).collect();
        let x = normal_array(&mut rng, m, 2);
        let mut y = x.clone();
        y.row_mut(m - 1).assign(&normal_array(&mut rng, 1, 2).row(0));
        let (a, _) = p.forward(&x, &times, 0.2).unwrap();
        let (b, _) = p.forward(&y, &times, 0.2).unwrap();
        for i in 0..m - 1 {
            prop_assert_eq!(a.row(i), b.row(i));
        }
    }

    #[test]
    fn generators_are_deterministic_with_increasing_grids(seed in any::<u64>(), which in 0usize..6) {
        let name = DatasetName::ALL[which];
        let spec = DatasetSpec::new(name, 3, seed);
        let a = generate(&spec).unwrap();
        prop_assert_eq!(&a, &generate(&spec).unwrap());
        for s in a.iter() {
            prop_assert!(s.grid.times().windows(2).all(|w| w[0] < w[1]));
            prop_assert!(s.values.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn path_nll_ignores_series_order(seed in any::<u64>(), n in 2usize..8) {
        let batch = generate(&DatasetSpec::new(DatasetName::OuData, n, seed)).unwrap();
        let reversed = TimeSeriesBatch::new(1, batch.series().iter().rev().cloned().collect()).unwrap();
        let k = KernelSpec::ou(0.2);
        let a = gaussian_path_nll(&batch, &k, None).unwrap().value;
        let b = gaussian_path_nll(&reversed, &k, None).unwrap().value;
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
    }

    #[test]
    fn normalizer_round_trips(seed in any::<u64>(), n in 1usize..6) {
        let batch = generate(&DatasetSpec::new(DatasetName::Sink, n, seed)).unwrap();
        let norm = Normalizer::fit(&batch);
        for s in batch.iter() {
            let back = norm.denormalize(&norm.normalize(&s.values));
            prop_assert!(max_abs(&back, &s.values) <= 1e-12 * s.values.iter().fold(1.0f64, |m, v| m.max(v.abs())));
        }
    }

    #[test]
    fn series_files_round_trip(seed in any::<u64>(), n in 1usize..4) {
        let batch = generate(&DatasetSpec::new(DatasetName::Lorenz, n, seed).with("points", 7.0)).unwrap();
        let mut buf = Vec::new();
        write_batch(&mut buf, &batch, Some(seed), serde_json::Value::Null).unwrap();
        let (header, back) = read_batch(&buf[..]).unwrap();
        prop_assert_eq!(header.seed, Some(seed));
        prop_assert_eq!(back, batch);
    }

    #[test]
    fn unknown_major_versions_are_rejected(major in 0u32..100, minor in 0u32..100) {
        let v = format!("{major}.{minor}");
        prop_assert_eq!(check_version(&v).is_ok(), major == 1);
    }
}

