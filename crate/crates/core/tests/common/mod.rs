//! Helpers and independent oracles shared by the integration suites.
#![allow(dead_code)]

pub mod invariants;

use moe_core::datagen::{gen_moe_sample, CovariateSampler};
use moe_core::estimation::{derive_seed, gating_minorizer};
use moe_core::inference::score_vector;
use moe_core::model::log_quasi_likelihood;
use moe_core::{
    fit, initialize, Dataset, ExpertDesign, ExpertParams, Family, FitConfig, FitResult,
    GatingParams, MoeParams, Response, ResponseKind,
};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const FAMILIES: [Family; 4] = [
    Family::Gaussian,
    Family::Logistic,
    Family::Poisson,
    Family::Multinomial { k: 3 },
];

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn random_x(rng: &mut ChaCha8Rng, p: usize) -> Vec<f64> {
    (0..p).map(|_| normal(rng)).collect()
}

pub fn random_expert(rng: &mut ChaCha8Rng, family: Family, d: usize, scale: f64) -> ExpertParams {
    let mut coef = |len: usize| -> Vec<f64> { (0..len).map(|_| scale * normal(rng)).collect() };
    match family {
        Family::Gaussian => {
            let c = coef(d + 1);
            ExpertParams::Gaussian {
                coef: c,
                variance: 0.5 + 1.5 * rng.random::<f64>(),
            }
        }
        Family::Logistic => ExpertParams::Logistic { coef: coef(d + 1) },
        Family::Poisson => ExpertParams::Poisson {
            coef: coef(d + 1).into_iter().map(|c| 0.5 * c).collect(),
        },
        Family::Multinomial { k } => ExpertParams::Multinomial {
            coef: (0..k - 1).map(|_| coef(d + 1)).collect(),
        },
    }
}

pub fn random_theta(
    rng: &mut ChaCha8Rng,
    family: Family,
    g: usize,
    p: usize,
    design: ExpertDesign,
    scale: f64,
) -> MoeParams {
    let gating = GatingParams {
        p,
        blocks: (0..g - 1)
            .map(|_| (0..=p).map(|_| scale * normal(rng)).collect())
            .collect(),
    };
    let d = design.width(p);
    let experts = (0..g)
        .map(|_| random_expert(rng, family, d, scale))
        .collect();
    MoeParams::new(family, design, gating, experts).unwrap()
}

pub fn random_response(rng: &mut ChaCha8Rng, family: Family) -> Response {
    match family {
        Family::Gaussian => Response::Real(2.0 * normal(rng)),
        Family::Logistic => Response::Binary(rng.random_range(0..2)),
        Family::Poisson => Response::Count(rng.random_range(0..6)),
        Family::Multinomial { k } => Response::Category(rng.random_range(1..=k)),
    }
}

pub fn sample(theta: &MoeParams, n: usize, seed: u64) -> Dataset {
    gen_moe_sample(theta, &CovariateSampler::Normal { p: theta.p() }, n, seed)
        .unwrap()
        .data
}

/// Design row with the leading one, built by hand.
pub fn oracle_design_row(x: &[f64], design: ExpertDesign) -> Vec<f64> {
    let mut row = vec![1.0];
    match design {
        ExpertDesign::Linear => row.extend_from_slice(x),
        ExpertDesign::Polynomial { degree } => {
            for k in 1..=degree {
                row.push(x[0].powi(k as i32));
            }
        }
    }
    row
}

fn lin(c: &[f64], r: &[f64]) -> f64 {
    c.iter().zip(r).map(|(a, b)| a * b).sum()
}

fn ln_factorial(k: u64) -> f64 {
    (1..=k).map(|j| (j as f64).ln()).sum()
}

/// Expert density written out directly from the textbook formulas.
pub fn oracle_expert_density(y: &Response, row: &[f64], e: &ExpertParams) -> f64 {
    match (e, y) {
        (ExpertParams::Gaussian { coef, variance }, Response::Real(y)) => {
            let r = y - lin(coef, row);
            (-(r * r) / (2.0 * variance)).exp() / (2.0 * std::f64::consts::PI * variance).sqrt()
        }
        (ExpertParams::Logistic { coef }, Response::Binary(b)) => {
            let p1 = 1.0 / (1.0 + (-lin(coef, row)).exp());
            if *b == 1 {
                p1
            } else {
                1.0 - p1
            }
        }
        (ExpertParams::Poisson { coef }, Response::Count(k)) => {
            let rate = lin(coef, row).exp();
            (-rate + *k as f64 * rate.ln() - ln_factorial(*k)).exp()
        }
        (ExpertParams::Multinomial { coef }, Response::Category(l)) => {
            let mut num: Vec<f64> = coef.iter().map(|c| lin(c, row).exp()).collect();
            num.push(1.0);
            num[l - 1] / num.iter().sum::<f64>()
        }
        _ => panic!("response does not match family"),
    }
}

pub fn oracle_gates(x: &[f64], gating: &GatingParams) -> Vec<f64> {
    let mut e: Vec<f64> = gating
        .blocks
        .iter()
        .map(|b| (b[0] + lin(&b[1..], x)).exp())
        .collect();
    e.push(1.0);
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// `ln sum_z Gate_z Expert_z` without any log-space tricks.
pub fn oracle_log_density(y: &Response, x: &[f64], theta: &MoeParams) -> f64 {
    let row = oracle_design_row(x, theta.design);
    oracle_gates(x, &theta.gating)
        .iter()
        .zip(&theta.experts)
        .map(|(g, e)| g * oracle_expert_density(y, &row, e))
        .sum::<f64>()
        .ln()
}

/// Closed-form least squares: coefficients and the MLE variance `RSS / n`.
pub fn ols(data: &Dataset) -> (Vec<f64>, f64) {
    let (x, y) = design_and_response(data);
    let beta = x.clone().svd(true, true).solve(&y, 1e-14).unwrap();
    let resid = &y - &x * &beta;
    (
        beta.iter().copied().collect(),
        resid.norm_squared() / data.n() as f64,
    )
}

pub fn design_and_response(data: &Dataset) -> (DMatrix<f64>, DVector<f64>) {
    let p = data.p();
    let x = DMatrix::from_fn(
        data.n(),
        p + 1,
        |i, j| if j == 0 { 1.0 } else { data.x(i)[j - 1] },
    );
    let y = DVector::from_fn(data.n(), |i, _| data.y(i).as_f64());
    (x, y)
}

/// HC0 covariance `(X'X)^-1 (sum e_i^2 x_i x_i') (X'X)^-1` of the OLS coefficients.
pub fn hc0(data: &Dataset) -> DMatrix<f64> {
    let (x, y) = design_and_response(data);
    let xtx_inv = (x.transpose() * &x).try_inverse().unwrap();
    let beta = &xtx_inv * x.transpose() * &y;
    let resid = &y - &x * &beta;
    let mut meat = DMatrix::zeros(x.ncols(), x.ncols());
    for i in 0..x.nrows() {
        let xi = x.row(i).transpose();
        meat += &xi * xi.transpose() * resid[i].powi(2);
    }
    &xtx_inv * meat * &xtx_inv
}

pub fn linear_gaussian_data(rng: &mut ChaCha8Rng, n: usize, p: usize) -> Dataset {
    let beta: Vec<f64> = (0..=p).map(|_| 2.0 * normal(rng)).collect();
    let sd = 0.5 + rng.random::<f64>();
    let rows: Vec<Vec<f64>> = (0..n).map(|_| random_x(rng, p)).collect();
    let y = rows
        .iter()
        .map(|x| Response::Real(beta[0] + lin(&beta[1..], x) + sd * normal(rng)))
        .collect();
    Dataset::new(ResponseKind::Real, rows, y).unwrap()
}

/// Largest coefficient error and relative variance error of the `g = 1`
/// Gaussian fit against closed-form least squares.
pub fn g1_ols_discrepancy(data: &Dataset) -> (f64, f64, FitResult) {
    let config = FitConfig::default();
    let init = initialize(data, 1, Family::Gaussian, ExpertDesign::Linear, &config, 0).unwrap();
    let res = fit(
        data,
        1,
        Family::Gaussian,
        ExpertDesign::Linear,
        &config,
        init,
    )
    .unwrap();
    let (beta, var) = ols(data);
    let ExpertParams::Gaussian { coef, variance } = &res.theta_hat.experts[0] else {
        panic!("gaussian expert expected")
    };
    let coef_err = coef
        .iter()
        .zip(&beta)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    (coef_err, (variance - var).abs() / var, res)
}

/// Relative sup-norm error of the analytic score against central differences
/// of the oracle log density, with steps `1e-6 (1 + |theta_j|)`.
pub fn score_fd_error(x: &[f64], y: &Response, theta: &MoeParams) -> f64 {
    let analytic = score_vector(x, y, theta).unwrap();
    let v = theta.to_vector();
    let mut worst: f64 = 0.0;
    let mut scale: f64 = 0.0;
    for j in 0..v.len() {
        let h = 1e-6 * (1.0 + v[j].abs());
        let mut up = v.clone();
        up[j] += h;
        let mut dn = v.clone();
        dn[j] -= h;
        let fd = (oracle_log_density(y, x, &theta.with_vector(&up).unwrap())
            - oracle_log_density(y, x, &theta.with_vector(&dn).unwrap()))
            / (2.0 * h);
        worst = worst.max((analytic[j] - fd).abs());
        scale = scale.max(fd.abs());
    }
    worst / scale.max(1e-300)
}

/// Worst relative score error over `draws` random `(d, theta)` pairs.
pub fn score_fd_suite(family: Family, draws: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..draws {
        let g = r.random_range(1..=3);
        let p = r.random_range(1..=2);
        let theta = random_theta(&mut r, family, g, p, ExpertDesign::Linear, 0.7);
        let x = random_x(&mut r, p);
        let y = random_response(&mut r, family);
        worst = worst.max(score_fd_error(&x, &y, &theta));
    }
    worst
}

pub struct MinorizerReport {
    /// Largest `|S_z(anchor) - Q_n(anchor)|`.
    pub b1: f64,
    /// Largest `S_z(candidate) - Q_n(candidate)`.
    pub b2: f64,
    /// Smallest eigenvalue of `H / 4 + Hess R_z` over all checked points.
    pub min_eig: f64,
}

/// Log-partition part of the gating log-likelihood, as a function of gating block `z`.
fn log_partition_gradient(
    data: &Dataset,
    gating: &GatingParams,
    z: usize,
    block: &[f64],
) -> DVector<f64> {
    let mut gating = gating.clone();
    gating.blocks[z] = block.to_vec();
    let w = gating.p + 1;
    let mut grad = DVector::zeros(w);
    for i in 0..data.n() {
        let x = data.x(i);
        let gates = oracle_gates(x, &gating);
        let xt: Vec<f64> = std::iter::once(1.0).chain(x.iter().copied()).collect();
        for a in 0..w {
            grad[a] -= gates[z] * xt[a];
        }
    }
    grad
}

/// Finite-difference Hessian (of the analytic gradient) of
/// `R_z = -sum_i ln sum_j exp(alpha_j' x~_i)` in block `z`.
pub fn log_partition_hessian(data: &Dataset, gating: &GatingParams, z: usize) -> DMatrix<f64> {
    let base = gating.blocks[z].clone();
    let w = base.len();
    let mut hess = DMatrix::zeros(w, w);
    for b in 0..w {
        let h = 1e-6 * (1.0 + base[b].abs());
        let mut up = base.clone();
        up[b] += h;
        let mut dn = base.clone();
        dn[b] -= h;
        let col = (log_partition_gradient(data, gating, z, &up)
            - log_partition_gradient(data, gating, z, &dn))
            / (2.0 * h);
        hess.set_column(b, &col);
    }
    (&hess + hess.transpose()) * 0.5
}

/// Minorization checks on `instances` random 3-row Gaussian problems, with
/// `perturbations` candidate blocks per instance.
pub fn minorizer_suite(instances: usize, perturbations: usize, seed: u64) -> MinorizerReport {
    let mut r = rng(seed);
    let mut report = MinorizerReport {
        b1: 0.0,
        b2: f64::NEG_INFINITY,
        min_eig: f64::INFINITY,
    };
    for _ in 0..instances {
        let g = r.random_range(2..=4);
        let p = r.random_range(1..=2);
        let theta = random_theta(&mut r, Family::Gaussian, g, p, ExpertDesign::Linear, 1.0);
        let rows: Vec<Vec<f64>> = (0..3).map(|_| random_x(&mut r, p)).collect();
        let y = (0..3)
            .map(|_| random_response(&mut r, Family::Gaussian))
            .collect();
        let data = Dataset::new(ResponseKind::Real, rows, y).unwrap();
        let q = log_quasi_likelihood(&data, &theta).unwrap();
        let (x, _) = design_and_response(&data);
        let gram = x.transpose() * &x;
        for z in 0..g - 1 {
            let anchor_block = theta.gating.blocks[z].clone();
            let s_anchor = gating_minorizer(&data, &theta, z, &anchor_block).unwrap();
            report.b1 = report.b1.max((s_anchor - q).abs());
            for _ in 0..perturbations {
                let cand: Vec<f64> = anchor_block.iter().map(|a| a + normal(&mut r)).collect();
                let s = gating_minorizer(&data, &theta, z, &cand).unwrap();
                let mut moved = theta.clone();
                moved.gating.blocks[z] = cand.clone();
                let q_moved = log_quasi_likelihood(&data, &moved).unwrap();
                report.b2 = report.b2.max(s - q_moved);

                let hess = log_partition_hessian(&data, &moved.gating, z);
                let bound = &gram * 0.25 + hess;
                let eig = SymmetricEigen::new(bound).eigenvalues.min();
                report.min_eig = report.min_eig.min(eig);
            }
        }
    }
    report
}

/// Seeded fit from the start-0 initialization of `config.seed`.
pub fn seeded_fit(
    data: &Dataset,
    g: usize,
    family: Family,
    design: ExpertDesign,
    config: &FitConfig,
) -> FitResult {
    let seed = derive_seed(config.seed, 0);
    let init = initialize(data, g, family, design, config, seed).unwrap();
    fit(data, g, family, design, config, init).unwrap()
}

pub struct FamilyFit {
    pub family: Family,
    pub data: Dataset,
    pub fit: FitResult,
}

/// Fits of random models on data drawn from them, one per family and seed.
pub fn random_family_fits(seeds: std::ops::Range<u64>) -> Vec<FamilyFit> {
    let mut out = Vec::new();
    for seed in seeds {
        for family in FAMILIES {
            let mut r = rng(seed * 31 + 7);
            let g = r.random_range(1..=3);
            let truth = random_theta(&mut r, family, g, 2, ExpertDesign::Linear, 1.5);
            let data = sample(&truth, 400, seed);
            let config = FitConfig {
                seed,
                n_starts: 1,
                ..FitConfig::default()
            };
            let Ok(init) = initialize(
                &data,
                g,
                family,
                ExpertDesign::Linear,
                &config,
                derive_seed(seed, 0),
            ) else {
                continue;
            };
            if let Ok(fit) = fit(&data, g, family, ExpertDesign::Linear, &config, init) {
                out.push(FamilyFit { family, data, fit });
            }
        }
    }
    out
}

/// Two crossing lines with gating on `x`; component 1 has slope 2, component 2 slope -2.
pub fn crossing_lines(separation: f64) -> MoeParams {
    MoeParams::new(
        Family::Gaussian,
        ExpertDesign::Linear,
        GatingParams {
            p: 1,
            blocks: vec![vec![0.0, separation]],
        },
        vec![
            ExpertParams::Gaussian {
                coef: vec![0.0, 2.0],
                variance: 0.09,
            },
            ExpertParams::Gaussian {
                coef: vec![0.0, -2.0],
                variance: 0.09,
            },
        ],
    )
    .unwrap()
}

pub fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}
