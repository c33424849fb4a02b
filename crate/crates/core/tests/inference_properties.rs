mod common;

use common::{
    g1_ols_discrepancy, hc0, linear_gaussian_data, random_theta, rng, sample, score_fd_suite,
    FAMILIES,
};
use moe_core::inference::{mean_ci, sandwich_covariance};
use moe_core::{
    multi_start_fit, ExpertDesign, ExpertParams, Family, FitConfig, GatingParams, MoeParams,
};
use nalgebra::{DMatrix, SymmetricEigen};
use statrs::distribution::{ContinuousCDF, Normal};

#[test]
fn analytic_score_matches_finite_differences() {
    for (k, family) in FAMILIES.into_iter().enumerate() {
        let err = score_fd_suite(family, 50, 1000 + k as u64);
        assert!(err < 1e-5, "{family}: relative error {err}");
    }
}

#[test]
fn single_gaussian_sandwich_is_hc0() {
    let mut r = rng(2);
    for p in [1, 3] {
        let data = linear_gaussian_data(&mut r, 300, p);
        let (_, _, res) = g1_ols_discrepancy(&data);
        let sw = sandwich_covariance(&data, &res.theta_hat).unwrap();
        let oracle = hc0(&data);
        let beta_block = sw.cov.view((0, 0), (p + 1, p + 1)).into_owned();
        let scale = oracle.abs().max();
        let err = (beta_block - &oracle).abs().max() / scale;
        assert!(err < 1e-4, "p = {p}: relative error {err}");
    }
}

#[test]
fn mean_interval_matches_robust_ols_interval() {
    let data = linear_gaussian_data(&mut rng(3), 400, 2);
    let (_, _, res) = g1_ols_discrepancy(&data);
    let sw = sandwich_covariance(&data, &res.theta_hat).unwrap();
    let oracle = hc0(&data);
    let ExpertParams::Gaussian { coef, .. } = &res.theta_hat.experts[0] else {
        unreachable!()
    };
    let z = Normal::new(0.0, 1.0).unwrap().inverse_cdf(0.975);
    for x in [[0.0, 0.0], [1.0, -0.5], [-2.0, 3.0]] {
        let xt = nalgebra::DVector::from_vec(vec![1.0, x[0], x[1]]);
        let m = coef[0] + coef[1] * x[0] + coef[2] * x[1];
        let se = (xt.transpose() * &oracle * &xt)[(0, 0)].sqrt();
        let (lo, hi) = mean_ci(&x, &res.theta_hat, &sw.cov, 0.95).unwrap();
        assert!((lo - (m - z * se)).abs() <= 1e-3 * (m - z * se).abs().max(se));
        assert!((hi - (m + z * se)).abs() <= 1e-3 * (m + z * se).abs().max(se));
    }
}

#[test]
fn sandwich_is_symmetric_with_psd_meat() {
    let theta = random_theta(
        &mut rng(6),
        Family::Poisson,
        2,
        1,
        ExpertDesign::Linear,
        1.0,
    );
    let data = sample(&theta, 800, 6);
    let res = multi_start_fit(
        &data,
        2,
        Family::Poisson,
        ExpertDesign::Linear,
        &FitConfig {
            n_starts: 3,
            ..FitConfig::default()
        },
    )
    .unwrap();
    let sw = sandwich_covariance(&data, &res.theta_hat).unwrap();
    assert!((&sw.cov - sw.cov.transpose()).abs().max() <= 1e-10);
    assert!(sw.cov.diagonal().iter().all(|&v| v >= 0.0));
    let meat_eig = SymmetricEigen::new(sw.meat.clone()).eigenvalues.min();
    assert!(meat_eig >= -1e-8 * sw.meat.abs().max());
}

#[test]
fn information_matrix_equality_holds_under_correct_specification() {
    let truth = MoeParams::new(
        Family::Gaussian,
        ExpertDesign::Linear,
        GatingParams {
            p: 1,
            blocks: vec![vec![0.3, 2.0]],
        },
        vec![
            ExpertParams::Gaussian {
                coef: vec![2.0, 1.0],
                variance: 0.5,
            },
            ExpertParams::Gaussian {
                coef: vec![-2.0, -1.0],
                variance: 0.8,
            },
        ],
    )
    .unwrap();
    let data = sample(&truth, 5000, 77);
    let res = multi_start_fit(
        &data,
        2,
        Family::Gaussian,
        ExpertDesign::Linear,
        &FitConfig {
            n_starts: 5,
            seed: 77,
            ..FitConfig::default()
        },
    )
    .unwrap();
    let sw = sandwich_covariance(&data, &res.theta_hat).unwrap();
    let model_based: DMatrix<f64> = (-&sw.bread).try_inverse().unwrap() / data.n() as f64;
    let gap = (&sw.cov - &model_based).norm() / model_based.norm();
    assert!(gap < 0.15, "relative gap {gap}");
}
