//! JSON model files.
//!
//! Parameters are stored in the same order as the covariance manifest:
//! gating blocks `1..g-1` (the stored `g`-th block is the zero reference),
//! then expert blocks `1..g`. Floats are written in shortest round-trip form
//! and parsed with correct rounding, so coefficients survive a save/load
//! cycle bit for bit.

use std::path::Path;

use moe_core::inference::SandwichCovariance;
use moe_core::{Dataset, ExpertDesign, ExpertParams, Family, FitResult, GatingParams, MoeParams};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitMetadata {
    pub log_ql: f64,
    pub dim: usize,
    pub bic: f64,
    pub n: usize,
    pub cycles: usize,
    pub seed: u64,
    pub converged: bool,
    pub degenerate: bool,
    pub separated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovarianceBlock {
    pub parameters: Vec<String>,
    pub matrix: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub schema_version: u32,
    pub family: String,
    #[serde(rename = "K", default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    pub g: usize,
    pub p: usize,
    pub expert_design: ExpertDesign,
    pub response: String,
    pub covariates: Vec<String>,
    /// All `g` gating blocks, each `[intercept, x1..xp]`; the last is zero.
    pub gating: Vec<Vec<f64>>,
    pub experts: Vec<ExpertParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fit: Option<FitMetadata>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub covariance: Option<CovarianceBlock>,
}

pub fn parse_family(name: &str, k: Option<usize>) -> CliResult<Family> {
    let family = match name {
        "gaussian" => Family::Gaussian,
        "logistic" => Family::Logistic,
        "poisson" => Family::Poisson,
        "multinomial" => match k {
            Some(k) if k >= 2 => Family::Multinomial { k },
            Some(k) => {
                return Err(CliError::usage(format!(
                    "multinomial needs K >= 2, got {k}"
                )))
            }
            None => return Err(CliError::usage("multinomial family needs K")),
        },
        other => return Err(CliError::usage(format!("unknown family '{other}'"))),
    };
    if k.is_some() && !matches!(family, Family::Multinomial { .. }) {
        return Err(CliError::usage(format!(
            "K is only valid for the multinomial family, not {name}"
        )));
    }
    Ok(family)
}

fn family_k(family: Family) -> Option<usize> {
    match family {
        Family::Multinomial { k } => Some(k),
        _ => None,
    }
}

impl ModelFile {
    pub fn from_params(theta: &MoeParams, response: &str, covariates: &[String]) -> Self {
        ModelFile {
            schema_version: SCHEMA_VERSION,
            family: theta.family.name().to_string(),
            k: family_k(theta.family),
            g: theta.g(),
            p: theta.p(),
            expert_design: theta.design,
            response: response.to_string(),
            covariates: covariates.to_vec(),
            gating: theta.gating.full_blocks(),
            experts: theta.experts.clone(),
            fit: None,
            covariance: None,
        }
    }

    pub fn from_fit(
        fit: &FitResult,
        data: &Dataset,
        response: &str,
        covariates: &[String],
    ) -> Self {
        let theta = &fit.theta_hat;
        let dim = theta.dim();
        let log_ql = fit.final_q();
        ModelFile {
            fit: Some(FitMetadata {
                log_ql,
                dim,
                bic: moe_core::selection::bic_value(log_ql, dim, data.n()),
                n: data.n(),
                cycles: fit.cycles_used,
                seed: fit.seed_used,
                converged: fit.converged,
                degenerate: fit.degenerate,
                separated: fit.separated,
            }),
            ..ModelFile::from_params(theta, response, covariates)
        }
    }

    pub fn with_covariance(mut self, sw: &SandwichCovariance) -> Self {
        self.covariance = Some(CovarianceBlock {
            parameters: sw.parameter_names.clone(),
            matrix: sw
                .cov
                .row_iter()
                .map(|r| r.iter().copied().collect())
                .collect(),
        });
        self
    }

    pub fn family(&self) -> CliResult<Family> {
        parse_family(&self.family, self.k)
    }

    /// Rebuilds and validates the model parameters.
    pub fn params(&self) -> CliResult<MoeParams> {
        let family = self.family()?;
        if self.gating.len() != self.g || self.experts.len() != self.g {
            return Err(CliError::usage(format!(
                "model declares g = {} but has {} gating blocks and {} experts",
                self.g,
                self.gating.len(),
                self.experts.len()
            )));
        }
        if self.covariates.len() != self.p {
            return Err(CliError::usage(format!(
                "model declares p = {} but names {} covariates",
                self.p,
                self.covariates.len()
            )));
        }
        if let Some(last) = self.gating.last() {
            if last.iter().any(|&v| v != 0.0) {
                return Err(CliError::usage(
                    "the last gating block must be the zero reference",
                ));
            }
        }
        let blocks = self.gating[..self.g.saturating_sub(1)].to_vec();
        let gating = GatingParams { p: self.p, blocks };
        Ok(MoeParams::new(
            family,
            self.expert_design,
            gating,
            self.experts.clone(),
        )?)
    }

    /// Covariance matrix, checked against the parameter order of the model.
    pub fn covariance_matrix(&self) -> CliResult<Option<DMatrix<f64>>> {
        let Some(c) = &self.covariance else {
            return Ok(None);
        };
        let names = self.params()?.parameter_names();
        if c.parameters != names {
            return Err(CliError::usage(
                "covariance manifest does not match the model parameters",
            ));
        }
        let d = names.len();
        if c.matrix.len() != d || c.matrix.iter().any(|r| r.len() != d) {
            return Err(CliError::usage(format!(
                "covariance matrix must be {d} x {d}"
            )));
        }
        Ok(Some(DMatrix::from_fn(d, d, |i, j| c.matrix[i][j])))
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("model files serialize");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> CliResult<ModelFile> {
        let value: serde_json::Value = serde_json::from_str(text)
            .map_err(|e| CliError::usage(format!("invalid model JSON: {e}")))?;
        match value
            .get("schema_version")
            .and_then(serde_json::Value::as_u64)
        {
            Some(v) if v == SCHEMA_VERSION as u64 => {}
            Some(v) => {
                return Err(CliError::usage(format!(
                    "unsupported model schema_version {v} (expected {SCHEMA_VERSION})"
                )))
            }
            None => return Err(CliError::usage("model file has no schema_version")),
        }
        let model: ModelFile = serde_json::from_value(value)
            .map_err(|e| CliError::usage(format!("invalid model file: {e}")))?;
        model.params()?;
        Ok(model)
    }

    pub fn load(path: &Path) -> CliResult<ModelFile> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("cannot read model {}: {e}", path.display())))?;
        ModelFile::from_json(&text)
    }

    pub fn save(&self, path: &Path) -> CliResult<()> {
        std::fs::write(path, self.to_json())
            .map_err(|e| CliError::usage(format!("cannot write model {}: {e}", path.display())))
    }
}
