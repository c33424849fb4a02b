//! Plug-in MAP classification and clustering, and regression functionals of
//! fitted models. Every argmax breaks ties toward the smallest index.

use crate::error::{MoeError, Result};
use crate::model::{
    gate_probs, responsibilities, Dataset, ExpertParams, Family, MoeParams, Response,
};
use crate::numeric::{argmax, dot};

/// Class label (1-based) with the class posterior `P(Y = y | x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassPrediction {
    pub label: usize,
    pub posterior: Vec<f64>,
}

/// Component label (1-based) with its posterior vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterPrediction {
    pub component: usize,
    pub posterior: Vec<f64>,
}

/// Conditional mean and variance of a Gaussian mixture of experts at `x`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegressionPrediction {
    pub mean: f64,
    pub variance: f64,
    pub ci: Option<(f64, f64)>,
}

/// `argmax_y sum_z Gate_z(x) Expert_z(y | x)` for multinomial experts.
pub fn classify_map(x: &[f64], theta: &MoeParams) -> Result<ClassPrediction> {
    let k = match theta.family {
        Family::Multinomial { k } => k,
        other => {
            return Err(MoeError::Unsupported(format!(
                "classification with {other} experts"
            )))
        }
    };
    let gates = gate_probs(x, &theta.gating)?;
    let row = theta.design.row(x);
    let mut posterior = vec![0.0; k];
    for (gate, e) in gates.iter().zip(&theta.experts) {
        let lp = e.class_log_probs(&row).expect("multinomial expert");
        for (acc, l) in posterior.iter_mut().zip(lp) {
            *acc += gate * l.exp();
        }
    }
    Ok(ClassPrediction {
        label: argmax(&posterior) + 1,
        posterior,
    })
}

/// `argmax_z tau_z(d)`: clustering on the joint observation.
pub fn cluster_posterior(x: &[f64], y: &Response, theta: &MoeParams) -> Result<ClusterPrediction> {
    let data = Dataset::new(theta.family.response_kind(), vec![x.to_vec()], vec![*y])?;
    let tau = responsibilities(&data, theta)?;
    let posterior = tau.row(0).to_vec();
    Ok(ClusterPrediction {
        component: argmax(&posterior) + 1,
        posterior,
    })
}

/// `argmax_z Gate_z(x)`: clustering on the covariates alone.
pub fn cluster_gate(x: &[f64], theta: &MoeParams) -> Result<ClusterPrediction> {
    let posterior = gate_probs(x, &theta.gating)?;
    Ok(ClusterPrediction {
        component: argmax(&posterior) + 1,
        posterior,
    })
}

/// Gates and per-component (mean, variance).
type GatedMoments = (Vec<f64>, Vec<(f64, f64)>);

fn gaussian_moments(x: &[f64], theta: &MoeParams) -> Result<GatedMoments> {
    if theta.family != Family::Gaussian {
        return Err(MoeError::Unsupported(format!(
            "regression functionals for {} experts",
            theta.family
        )));
    }
    let gates = gate_probs(x, &theta.gating)?;
    let row = theta.design.row(x);
    let moments = theta
        .experts
        .iter()
        .map(|e| match e {
            ExpertParams::Gaussian { coef, variance } => (dot(coef, &row), *variance),
            _ => unreachable!("family checked"),
        })
        .collect();
    Ok((gates, moments))
}

/// `E(Y | x) = sum_z Gate_z(x) mu_z(x)`.
pub fn predict_mean(x: &[f64], theta: &MoeParams) -> Result<f64> {
    let (gates, moments) = gaussian_moments(x, theta)?;
    Ok(gates.iter().zip(&moments).map(|(g, (m, _))| g * m).sum())
}

/// `var(Y | x) = sum_z Gate_z(x) (sigma_z^2 + (mu_z(x) - E(Y | x))^2)`.
pub fn predict_variance(x: &[f64], theta: &MoeParams) -> Result<f64> {
    let (gates, moments) = gaussian_moments(x, theta)?;
    let mean: f64 = gates.iter().zip(&moments).map(|(g, (m, _))| g * m).sum();
    Ok(gates
        .iter()
        .zip(&moments)
        .map(|(g, (m, v))| g * (v + (m - mean) * (m - mean)))
        .sum())
}

/// Mean and variance together.
pub fn predict_regression(x: &[f64], theta: &MoeParams) -> Result<RegressionPrediction> {
    Ok(RegressionPrediction {
        mean: predict_mean(x, theta)?,
        variance: predict_variance(x, theta)?,
        ci: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ExpertDesign, GatingParams};

    fn gaussian(gating: GatingParams, experts: &[(f64, f64)]) -> MoeParams {
        MoeParams::new(
            Family::Gaussian,
            ExpertDesign::Linear,
            gating,
            experts
                .iter()
                .map(|&(m, v)| ExpertParams::Gaussian {
                    coef: vec![m, 0.0],
                    variance: v,
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn uniform_classifier_picks_first_label() {
        let theta = MoeParams::new(
            Family::Multinomial { k: 3 },
            ExpertDesign::Linear,
            GatingParams::zeros(1, 2),
            vec![ExpertParams::zeros(Family::Multinomial { k: 3 }, 2)],
        )
        .unwrap();
        let pred = classify_map(&[0.4, -1.0], &theta).unwrap();
        assert_eq!(pred.label, 1);
        for p in &pred.posterior {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn two_class_positive_score_picks_class_one() {
        let theta = MoeParams::new(
            Family::Multinomial { k: 2 },
            ExpertDesign::Linear,
            GatingParams::zeros(1, 1),
            vec![ExpertParams::Multinomial {
                coef: vec![vec![0.5, 1.0]],
            }],
        )
        .unwrap();
        assert_eq!(classify_map(&[0.2], &theta).unwrap().label, 1);
        assert_eq!(classify_map(&[-2.0], &theta).unwrap().label, 2);
    }

    #[test]
    fn classify_rejects_other_families() {
        let theta = gaussian(GatingParams::zeros(1, 1), &[(0.0, 1.0)]);
        assert!(classify_map(&[0.0], &theta).is_err());
    }

    #[test]
    fn gate_clustering() {
        let theta = gaussian(GatingParams::zeros(2, 1), &[(0.0, 1.0), (1.0, 1.0)]);
        assert_eq!(cluster_gate(&[3.0], &theta).unwrap().component, 1);
        let skewed = gaussian(
            GatingParams {
                p: 1,
                blocks: vec![vec![3f64.ln(), 0.0]],
            },
            &[(0.0, 1.0), (1.0, 1.0)],
        );
        let pred = cluster_gate(&[-7.0], &skewed).unwrap();
        assert_eq!(pred.component, 1);
        assert!((pred.posterior[0] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn posterior_clustering_hand_case() {
        let theta = gaussian(GatingParams::zeros(2, 1), &[(0.0, 1.0), (2.0, 1.0)]);
        let pred = cluster_posterior(&[0.0], &Response::Real(0.0), &theta).unwrap();
        assert_eq!(pred.component, 1);
        assert!((pred.posterior[0] - 0.880_797_077_977_882_3).abs() < 1e-12);
    }

    #[test]
    fn mean_and_variance_hand_values() {
        let g = GatingParams {
            p: 1,
            blocks: vec![vec![3f64.ln(), 0.0]],
        };
        let theta = gaussian(g, &[(0.0, 1.0), (4.0, 1.0)]);
        assert!((predict_mean(&[1.0], &theta).unwrap() - 1.0).abs() < 1e-14);

        let a = 1.5;
        let s = 0.7;
        let sym = gaussian(GatingParams::zeros(2, 1), &[(a, s), (-a, s)]);
        assert!(predict_mean(&[0.0], &sym).unwrap().abs() < 1e-15);
        assert!((predict_variance(&[0.0], &sym).unwrap() - (a * a + s)).abs() < 1e-14);

        let single = gaussian(GatingParams::zeros(1, 1), &[(2.0, 0.3)]);
        assert!((predict_variance(&[5.0], &single).unwrap() - 0.3).abs() < 1e-14);
    }
}
