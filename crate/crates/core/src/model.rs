//! The soft-max gated mixture-of-experts model family.
//!
//! Everything here is a pure evaluation: gate probabilities, expert
//! log-densities, the mixture log-density, the log-quasi-likelihood of a
//! dataset and the per-row responsibilities. All density work is carried out
//! in log space; the gate and responsibility vectors are produced by a
//! max-subtracted softmax.
//!
//! The last component is the gating reference: its intercept and slopes are
//! fixed at zero and are not free parameters. Multinomial experts likewise fix
//! their last class at zero.

use serde::{Deserialize, Serialize};
use statrs::function::factorial::ln_factorial;

use crate::error::{MoeError, Result};
use crate::numeric::{dot, log_sum_exp, softmax_in_place, softplus};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Kind of response carried by a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ResponseKind {
    Real,
    Binary,
    Count,
    Categorical { k: usize },
}

impl std::fmt::Display for ResponseKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ResponseKind::Real => write!(f, "real"),
            ResponseKind::Binary => write!(f, "binary"),
            ResponseKind::Count => write!(f, "count"),
            ResponseKind::Categorical { k } => write!(f, "categorical(K={k})"),
        }
    }
}

/// A single observed response. Category labels are 1-based.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Response {
    Real(f64),
    Binary(u8),
    Count(u64),
    Category(usize),
}

impl Response {
    pub fn as_f64(&self) -> f64 {
        match *self {
            Response::Real(y) => y,
            Response::Binary(b) => b as f64,
            Response::Count(c) => c as f64,
            Response::Category(l) => l as f64,
        }
    }

    /// Builds a response of the given kind from a numeric value, validating its range.
    pub fn from_value(kind: ResponseKind, v: f64) -> Result<Response> {
        if !v.is_finite() {
            return Err(MoeError::NonFinite("response"));
        }
        match kind {
            ResponseKind::Real => Ok(Response::Real(v)),
            ResponseKind::Binary => {
                if v == 0.0 || v == 1.0 {
                    Ok(Response::Binary(v as u8))
                } else {
                    Err(MoeError::InvalidResponse(format!(
                        "binary response must be 0 or 1, got {v}"
                    )))
                }
            }
            ResponseKind::Count => {
                if v >= 0.0 && v.fract() == 0.0 {
                    Ok(Response::Count(v as u64))
                } else {
                    Err(MoeError::InvalidResponse(format!(
                        "count response must be a non-negative integer, got {v}"
                    )))
                }
            }
            ResponseKind::Categorical { k } => {
                if v >= 1.0 && v <= k as f64 && v.fract() == 0.0 {
                    Ok(Response::Category(v as usize))
                } else {
                    Err(MoeError::InvalidResponse(format!(
                        "category must be an integer in 1..={k}, got {v}"
                    )))
                }
            }
        }
    }

    fn matches(&self, kind: ResponseKind) -> bool {
        match (self, kind) {
            (Response::Real(y), ResponseKind::Real) => y.is_finite(),
            (Response::Binary(b), ResponseKind::Binary) => *b <= 1,
            (Response::Count(_), ResponseKind::Count) => true,
            (Response::Category(l), ResponseKind::Categorical { k }) => {
                *l >= 1 && *l <= k && k >= 2
            }
            _ => false,
        }
    }
}

/// Expert family of a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Family {
    Gaussian,
    Logistic,
    Poisson,
    Multinomial { k: usize },
}

impl Family {
    pub fn response_kind(&self) -> ResponseKind {
        match *self {
            Family::Gaussian => ResponseKind::Real,
            Family::Logistic => ResponseKind::Binary,
            Family::Poisson => ResponseKind::Count,
            Family::Multinomial { k } => ResponseKind::Categorical { k },
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Family::Gaussian => "gaussian",
            Family::Logistic => "logistic",
            Family::Poisson => "poisson",
            Family::Multinomial { .. } => "multinomial",
        }
    }
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Family::Multinomial { k } => write!(f, "multinomial(K={k})"),
            other => f.write_str(other.name()),
        }
    }
}

/// How the expert design row is built from a covariate point.
///
/// The gating network always sees the raw covariates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ExpertDesign {
    /// Raw covariates, `d = p`.
    #[default]
    Linear,
    /// Powers `x1, x1^2, ..., x1^degree` of the first covariate, `d = degree`.
    Polynomial { degree: usize },
}

impl ExpertDesign {
    /// Number of slope terms `d` (excluding the intercept).
    pub fn width(&self, p: usize) -> usize {
        match *self {
            ExpertDesign::Linear => p,
            ExpertDesign::Polynomial { degree } => degree,
        }
    }

    pub fn validate(&self, p: usize) -> Result<()> {
        match *self {
            ExpertDesign::Linear => Ok(()),
            ExpertDesign::Polynomial { degree } => {
                if p == 0 {
                    Err(MoeError::InvalidConfig(
                        "polynomial design needs at least one covariate".into(),
                    ))
                } else if degree == 0 {
                    Err(MoeError::InvalidConfig(
                        "polynomial degree must be at least 1".into(),
                    ))
                } else {
                    Ok(())
                }
            }
        }
    }

    /// Writes `(1, design(x))` into `out`.
    pub fn fill_row(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.push(1.0);
        match *self {
            ExpertDesign::Linear => out.extend_from_slice(x),
            ExpertDesign::Polynomial { degree } => {
                let t = x[0];
                let mut acc = 1.0;
                for _ in 0..degree {
                    acc *= t;
                    out.push(acc);
                }
            }
        }
    }

    pub fn row(&self, x: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.width(x.len()) + 1);
        self.fill_row(x, &mut out);
        out
    }
}

/// Soft-max gating coefficients: `g - 1` free blocks `(intercept, slopes)` of length `p + 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatingParams {
    pub p: usize,
    pub blocks: Vec<Vec<f64>>,
}

impl GatingParams {
    /// All-zero gating (uniform gates).
    pub fn zeros(g: usize, p: usize) -> Self {
        assert!(g >= 1, "at least one component");
        GatingParams {
            p,
            blocks: vec![vec![0.0; p + 1]; g - 1],
        }
    }

    /// Gating from the full list of `g` blocks, re-expressed relative to the last one.
    pub fn from_full(full: &[Vec<f64>]) -> Self {
        let g = full.len();
        assert!(g >= 1);
        let reference = &full[g - 1];
        let blocks = full[..g - 1]
            .iter()
            .map(|b| b.iter().zip(reference).map(|(a, r)| a - r).collect())
            .collect();
        GatingParams {
            p: reference.len() - 1,
            blocks,
        }
    }

    /// All `g` blocks, including the zero reference block.
    pub fn full_blocks(&self) -> Vec<Vec<f64>> {
        let mut out = self.blocks.clone();
        out.push(vec![0.0; self.p + 1]);
        out
    }

    pub fn g(&self) -> usize {
        self.blocks.len() + 1
    }

    pub fn validate(&self) -> Result<()> {
        for b in &self.blocks {
            if b.len() != self.p + 1 {
                return Err(MoeError::DimensionMismatch {
                    what: "gating block",
                    expected: self.p + 1,
                    found: b.len(),
                });
            }
            if b.iter().any(|v| !v.is_finite()) {
                return Err(MoeError::NonFinite("gating coefficients"));
            }
        }
        Ok(())
    }

    /// Gating logits `alpha_z0 + alpha_z' x` for all components (last is 0).
    pub fn logits_into(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for b in &self.blocks {
            out.push(b[0] + dot(&b[1..], x));
        }
        out.push(0.0);
    }

    /// Log gate probabilities, computed as a stabilized log-softmax.
    pub fn log_probs_into(&self, x: &[f64], out: &mut Vec<f64>) {
        self.logits_into(x, out);
        let lse = log_sum_exp(out);
        for v in out.iter_mut() {
            *v -= lse;
        }
    }
}

/// Parameters of a single expert.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ExpertParams {
    /// Gaussian regression expert; `coef = (beta_0, beta_1..beta_d)`.
    Gaussian {
        coef: Vec<f64>,
        variance: f64,
    },
    Logistic {
        coef: Vec<f64>,
    },
    Poisson {
        coef: Vec<f64>,
    },
    /// One coefficient block per class `1..K-1`; class `K` is the zero reference.
    Multinomial {
        coef: Vec<Vec<f64>>,
    },
}

impl ExpertParams {
    /// Expert with all coefficients zero (and unit variance for Gaussian).
    pub fn zeros(family: Family, d: usize) -> Self {
        match family {
            Family::Gaussian => ExpertParams::Gaussian {
                coef: vec![0.0; d + 1],
                variance: 1.0,
            },
            Family::Logistic => ExpertParams::Logistic {
                coef: vec![0.0; d + 1],
            },
            Family::Poisson => ExpertParams::Poisson {
                coef: vec![0.0; d + 1],
            },
            Family::Multinomial { k } => ExpertParams::Multinomial {
                coef: vec![vec![0.0; d + 1]; k - 1],
            },
        }
    }

    pub fn family(&self) -> Family {
        match self {
            ExpertParams::Gaussian { .. } => Family::Gaussian,
            ExpertParams::Logistic { .. } => Family::Logistic,
            ExpertParams::Poisson { .. } => Family::Poisson,
            ExpertParams::Multinomial { coef } => Family::Multinomial { k: coef.len() + 1 },
        }
    }

    /// Number of free parameters.
    pub fn dim(&self) -> usize {
        match self {
            ExpertParams::Gaussian { coef, .. } => coef.len() + 1,
            ExpertParams::Logistic { coef } | ExpertParams::Poisson { coef } => coef.len(),
            ExpertParams::Multinomial { coef } => coef.iter().map(Vec::len).sum(),
        }
    }

    fn validate(&self, d: usize) -> Result<()> {
        let check = |c: &[f64]| -> Result<()> {
            if c.len() != d + 1 {
                return Err(MoeError::DimensionMismatch {
                    what: "expert coefficients",
                    expected: d + 1,
                    found: c.len(),
                });
            }
            if c.iter().any(|v| !v.is_finite()) {
                return Err(MoeError::NonFinite("expert coefficients"));
            }
            Ok(())
        };
        match self {
            ExpertParams::Gaussian { coef, variance } => {
                check(coef)?;
                if !(*variance > 0.0) || !variance.is_finite() {
                    return Err(MoeError::InvalidVariance(*variance));
                }
                Ok(())
            }
            ExpertParams::Logistic { coef } | ExpertParams::Poisson { coef } => check(coef),
            ExpertParams::Multinomial { coef } => {
                if coef.is_empty() {
                    return Err(MoeError::InvalidConfig(
                        "multinomial expert needs K >= 2".into(),
                    ));
                }
                coef.iter().try_for_each(|c| check(c))
            }
        }
    }

    /// Mean of the expert at a design row (Gaussian, logistic and Poisson only).
    pub fn mean(&self, design_row: &[f64]) -> Option<f64> {
        match self {
            ExpertParams::Gaussian { coef, .. } => Some(dot(coef, design_row)),
            ExpertParams::Logistic { coef } => Some(crate::numeric::sigmoid(dot(coef, design_row))),
            ExpertParams::Poisson { coef } => Some(dot(coef, design_row).exp()),
            ExpertParams::Multinomial { .. } => None,
        }
    }

    /// Multinomial class log-probabilities at a design row (length `K`).
    pub fn class_log_probs(&self, design_row: &[f64]) -> Option<Vec<f64>> {
        match self {
            ExpertParams::Multinomial { coef } => {
                let mut eta: Vec<f64> = coef.iter().map(|c| dot(c, design_row)).collect();
                eta.push(0.0);
                let lse = log_sum_exp(&eta);
                Some(eta.into_iter().map(|e| e - lse).collect())
            }
            _ => None,
        }
    }

    /// Log density/mass of `y` given an already-built design row `(1, design(x))`.
    pub fn log_density_row(&self, y: &Response, design_row: &[f64]) -> Result<f64> {
        match (self, y) {
            (ExpertParams::Gaussian { coef, variance }, Response::Real(y)) => {
                if !(*variance > 0.0) {
                    return Err(MoeError::InvalidVariance(*variance));
                }
                let r = y - dot(coef, design_row);
                Ok(-0.5 * (LN_2PI + variance.ln() + r * r / variance))
            }
            (ExpertParams::Logistic { coef }, Response::Binary(b)) => {
                let eta = dot(coef, design_row);
                Ok(*b as f64 * eta - softplus(eta))
            }
            (ExpertParams::Poisson { coef }, Response::Count(c)) => {
                let eta = dot(coef, design_row);
                Ok(*c as f64 * eta - eta.exp() - ln_factorial(*c))
            }
            (ExpertParams::Multinomial { coef }, Response::Category(l)) => {
                let k = coef.len() + 1;
                if *l < 1 || *l > k {
                    return Err(MoeError::InvalidResponse(format!(
                        "category {l} outside 1..={k}"
                    )));
                }
                Ok(multinomial_log_prob(coef, design_row, *l))
            }
            (e, y) => Err(MoeError::KindMismatch {
                response: format!("{y:?}"),
                family: e.family().to_string(),
            }),
        }
    }
}

/// `log P(Y = l)` for class blocks `coef` (class `K` is the zero reference), without allocating.
pub(crate) fn multinomial_log_prob(coef: &[Vec<f64>], design_row: &[f64], l: usize) -> f64 {
    let mut max = 0.0f64;
    let mut target = 0.0;
    for (c, b) in coef.iter().enumerate() {
        let e = dot(b, design_row);
        max = max.max(e);
        if c + 1 == l {
            target = e;
        }
    }
    let mut sum = (-max).exp();
    for b in coef {
        sum += (dot(b, design_row) - max).exp();
    }
    target - max - sum.ln()
}

/// Full parameter vector of a `g`-component model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoeParams {
    pub family: Family,
    pub design: ExpertDesign,
    pub gating: GatingParams,
    pub experts: Vec<ExpertParams>,
}

impl MoeParams {
    pub fn new(
        family: Family,
        design: ExpertDesign,
        gating: GatingParams,
        experts: Vec<ExpertParams>,
    ) -> Result<Self> {
        let m = MoeParams {
            family,
            design,
            gating,
            experts,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn g(&self) -> usize {
        self.experts.len()
    }

    pub fn p(&self) -> usize {
        self.gating.p
    }

    /// Slope count of the expert design row.
    pub fn d(&self) -> usize {
        self.design.width(self.gating.p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.experts.is_empty() {
            return Err(MoeError::InvalidConfig(
                "model needs at least one component".into(),
            ));
        }
        if self.gating.g() != self.g() {
            return Err(MoeError::DimensionMismatch {
                what: "gating blocks + reference",
                expected: self.g(),
                found: self.gating.g(),
            });
        }
        if let Family::Multinomial { k } = self.family {
            if k < 2 {
                return Err(MoeError::InvalidConfig(
                    "multinomial family needs K >= 2".into(),
                ));
            }
        }
        self.design.validate(self.p())?;
        self.gating.validate()?;
        let d = self.d();
        for e in &self.experts {
            if e.family() != self.family {
                return Err(MoeError::KindMismatch {
                    response: e.family().to_string(),
                    family: self.family.to_string(),
                });
            }
            e.validate(d)?;
        }
        Ok(())
    }

    /// Number of free parameters.
    pub fn dim(&self) -> usize {
        self.gating.blocks.len() * (self.p() + 1)
            + self.experts.iter().map(ExpertParams::dim).sum::<usize>()
    }

    /// Flattens the free parameters: gating blocks `1..g-1`, then expert blocks `1..g`.
    ///
    /// Within a Gaussian expert the order is `(beta_0, .., beta_d, variance)`;
    /// multinomial experts list class blocks `1..K-1`.
    pub fn to_vector(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.dim());
        for b in &self.gating.blocks {
            v.extend_from_slice(b);
        }
        for e in &self.experts {
            match e {
                ExpertParams::Gaussian { coef, variance } => {
                    v.extend_from_slice(coef);
                    v.push(*variance);
                }
                ExpertParams::Logistic { coef } | ExpertParams::Poisson { coef } => {
                    v.extend_from_slice(coef)
                }
                ExpertParams::Multinomial { coef } => {
                    coef.iter().for_each(|c| v.extend_from_slice(c))
                }
            }
        }
        v
    }

    /// Inverse of [`MoeParams::to_vector`], using `self` as the shape template.
    pub fn with_vector(&self, v: &[f64]) -> Result<MoeParams> {
        if v.len() != self.dim() {
            return Err(MoeError::DimensionMismatch {
                what: "parameter vector",
                expected: self.dim(),
                found: v.len(),
            });
        }
        let mut it = v.iter().copied();
        let mut take = |n: usize| -> Vec<f64> { (&mut it).take(n).collect() };
        let mut out = self.clone();
        for b in out.gating.blocks.iter_mut() {
            *b = take(b.len());
        }
        for e in out.experts.iter_mut() {
            match e {
                ExpertParams::Gaussian { coef, variance } => {
                    *coef = take(coef.len());
                    *variance = take(1)[0];
                }
                ExpertParams::Logistic { coef } | ExpertParams::Poisson { coef } => {
                    *coef = take(coef.len())
                }
                ExpertParams::Multinomial { coef } => {
                    for c in coef.iter_mut() {
                        *c = take(c.len());
                    }
                }
            }
        }
        Ok(out)
    }

    /// Human-readable names of the free parameters, in vector order.
    pub fn parameter_names(&self) -> Vec<String> {
        let coef_name = |j: usize| -> String {
            if j == 0 {
                "intercept".to_string()
            } else {
                match self.design {
                    ExpertDesign::Linear => format!("x{j}"),
                    ExpertDesign::Polynomial { .. } => format!("x1^{j}"),
                }
            }
        };
        let mut names = Vec::with_capacity(self.dim());
        for (z, b) in self.gating.blocks.iter().enumerate() {
            for j in 0..b.len() {
                let term = if j == 0 {
                    "intercept".to_string()
                } else {
                    format!("x{j}")
                };
                names.push(format!("gate{}.{}", z + 1, term));
            }
        }
        for (z, e) in self.experts.iter().enumerate() {
            match e {
                ExpertParams::Gaussian { coef, .. } => {
                    for j in 0..coef.len() {
                        names.push(format!("expert{}.{}", z + 1, coef_name(j)));
                    }
                    names.push(format!("expert{}.variance", z + 1));
                }
                ExpertParams::Logistic { coef } | ExpertParams::Poisson { coef } => {
                    for j in 0..coef.len() {
                        names.push(format!("expert{}.{}", z + 1, coef_name(j)));
                    }
                }
                ExpertParams::Multinomial { coef } => {
                    for (l, c) in coef.iter().enumerate() {
                        for j in 0..c.len() {
                            names.push(format!("expert{}.class{}.{}", z + 1, l + 1, coef_name(j)));
                        }
                    }
                }
            }
        }
        names
    }

    /// Reorders components so that new component `j` is old component `order[j]`,
    /// re-expressing the gating relative to the new last component.
    pub fn permuted(&self, order: &[usize]) -> MoeParams {
        assert_eq!(order.len(), self.g());
        let full = self.gating.full_blocks();
        let new_full: Vec<Vec<f64>> = order.iter().map(|&z| full[z].clone()).collect();
        MoeParams {
            family: self.family,
            design: self.design,
            gating: GatingParams::from_full(&new_full),
            experts: order.iter().map(|&z| self.experts[z].clone()).collect(),
        }
    }

    /// Checks that a dataset can be evaluated under this model.
    pub fn check_compatible(&self, data: &Dataset) -> Result<()> {
        if data.p != self.p() {
            return Err(MoeError::DimensionMismatch {
                what: "covariate count",
                expected: self.p(),
                found: data.p,
            });
        }
        if data.kind != self.family.response_kind() {
            return Err(MoeError::KindMismatch {
                response: data.kind.to_string(),
                family: self.family.to_string(),
            });
        }
        Ok(())
    }
}

/// `n` observations of `p` covariates with a typed response.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    p: usize,
    kind: ResponseKind,
    x: Vec<f64>,
    y: Vec<Response>,
}

impl Dataset {
    /// Builds a dataset from covariate rows and responses, validating shapes and kinds.
    pub fn new(kind: ResponseKind, rows: Vec<Vec<f64>>, y: Vec<Response>) -> Result<Self> {
        if rows.is_empty() {
            return Err(MoeError::EmptyDataset);
        }
        let p = rows[0].len();
        let mut x = Vec::with_capacity(rows.len() * p);
        for r in &rows {
            if r.len() != p {
                return Err(MoeError::DimensionMismatch {
                    what: "covariate row",
                    expected: p,
                    found: r.len(),
                });
            }
            if r.iter().any(|v| !v.is_finite()) {
                return Err(MoeError::NonFinite("covariates"));
            }
            x.extend_from_slice(r);
        }
        Self::from_flat(kind, p, x, y)
    }

    /// Builds a dataset from row-major covariates.
    pub fn from_flat(kind: ResponseKind, p: usize, x: Vec<f64>, y: Vec<Response>) -> Result<Self> {
        if y.is_empty() {
            return Err(MoeError::EmptyDataset);
        }
        if x.len() != y.len() * p {
            return Err(MoeError::DimensionMismatch {
                what: "covariate matrix",
                expected: y.len() * p,
                found: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(MoeError::NonFinite("covariates"));
        }
        if let ResponseKind::Categorical { k } = kind {
            if k < 2 {
                return Err(MoeError::InvalidConfig(
                    "categorical response needs K >= 2".into(),
                ));
            }
        }
        if let Some(bad) = y.iter().find(|r| !r.matches(kind)) {
            return Err(MoeError::InvalidResponse(format!(
                "{bad:?} is not a valid {kind} response"
            )));
        }
        Ok(Dataset { p, kind, x, y })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn kind(&self) -> ResponseKind {
        self.kind
    }

    pub fn x(&self, i: usize) -> &[f64] {
        &self.x[i * self.p..(i + 1) * self.p]
    }

    pub fn y(&self, i: usize) -> &Response {
        &self.y[i]
    }

    pub fn responses(&self) -> &[Response] {
        &self.y
    }

    pub fn rows(&self) -> impl Iterator<Item = (&[f64], &Response)> + '_ {
        (0..self.n()).map(move |i| (self.x(i), &self.y[i]))
    }

    /// Subset of rows, in the given order.
    pub fn select(&self, idx: &[usize]) -> Dataset {
        let mut x = Vec::with_capacity(idx.len() * self.p);
        let mut y = Vec::with_capacity(idx.len());
        for &i in idx {
            x.extend_from_slice(self.x(i));
            y.push(self.y[i]);
        }
        Dataset {
            p: self.p,
            kind: self.kind,
            x,
            y,
        }
    }

    /// Sample variance (divide by `n`) of the numeric response.
    pub fn response_variance(&self) -> f64 {
        let n = self.n() as f64;
        let mean = self.y.iter().map(Response::as_f64).sum::<f64>() / n;
        self.y
            .iter()
            .map(|r| (r.as_f64() - mean).powi(2))
            .sum::<f64>()
            / n
    }
}

/// Row-stochastic `n x g` matrix of posterior component probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct Responsibilities {
    n: usize,
    g: usize,
    values: Vec<f64>,
}

impl Responsibilities {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn g(&self) -> usize {
        self.g
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.g..(i + 1) * self.g]
    }

    pub fn get(&self, i: usize, z: usize) -> f64 {
        self.values[i * self.g + z]
    }

    pub fn column(&self, z: usize) -> Vec<f64> {
        (0..self.n).map(|i| self.get(i, z)).collect()
    }

    /// Per-component total responsibility.
    pub fn column_sums(&self) -> Vec<f64> {
        let mut s = vec![0.0; self.g];
        for i in 0..self.n {
            for (acc, v) in s.iter_mut().zip(self.row(i)) {
                *acc += v;
            }
        }
        s
    }

    pub(crate) fn from_values(n: usize, g: usize, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), n * g);
        Responsibilities { n, g, values }
    }
}

/// Gate probabilities at `x`.
pub fn gate_probs(x: &[f64], gating: &GatingParams) -> Result<Vec<f64>> {
    check_point(x, gating.p)?;
    gating.validate()?;
    let mut out = Vec::with_capacity(gating.g());
    gating.logits_into(x, &mut out);
    softmax_in_place(&mut out);
    Ok(out)
}

/// Log gate probabilities at `x`.
pub fn log_gate_probs(x: &[f64], gating: &GatingParams) -> Result<Vec<f64>> {
    check_point(x, gating.p)?;
    gating.validate()?;
    let mut out = Vec::with_capacity(gating.g());
    gating.log_probs_into(x, &mut out);
    Ok(out)
}

/// Log density (or mass) of one expert at `(x, y)`.
pub fn expert_log_density(
    y: &Response,
    x: &[f64],
    expert: &ExpertParams,
    design: ExpertDesign,
) -> Result<f64> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(MoeError::NonFinite("covariates"));
    }
    design.validate(x.len())?;
    let d = design.width(x.len());
    expert.validate(d)?;
    expert.log_density_row(y, &design.row(x))
}

/// Reusable buffers for per-row evaluation.
#[derive(Debug, Default)]
pub(crate) struct RowScratch {
    pub design: Vec<f64>,
    pub log_gate: Vec<f64>,
    pub terms: Vec<f64>,
}

impl MoeParams {
    /// Fills `scratch.terms` with `log Gate_z + log Expert_z` and returns their log-sum-exp.
    pub(crate) fn joint_log_terms(
        &self,
        x: &[f64],
        y: &Response,
        scratch: &mut RowScratch,
    ) -> Result<f64> {
        self.design.fill_row(x, &mut scratch.design);
        self.gating.log_probs_into(x, &mut scratch.log_gate);
        scratch.terms.clear();
        for (lg, e) in scratch.log_gate.iter().zip(&self.experts) {
            scratch
                .terms
                .push(lg + e.log_density_row(y, &scratch.design)?);
        }
        Ok(log_sum_exp(&scratch.terms))
    }
}

/// Log of the mixture density `sum_z Gate_z(x) Expert_z(y|x)`.
pub fn moe_log_density(y: &Response, x: &[f64], theta: &MoeParams) -> Result<f64> {
    theta.validate()?;
    check_point(x, theta.p())?;
    let mut s = RowScratch::default();
    let v = theta.joint_log_terms(x, y, &mut s)?;
    finite_or(v, "mixture log-density")
}

/// Log-quasi-likelihood `Q_n`, summed over rows in order.
pub fn log_quasi_likelihood(data: &Dataset, theta: &MoeParams) -> Result<f64> {
    theta.validate()?;
    theta.check_compatible(data)?;
    log_quasi_likelihood_unchecked(data, theta)
}

pub(crate) fn log_quasi_likelihood_unchecked(data: &Dataset, theta: &MoeParams) -> Result<f64> {
    let mut s = RowScratch::default();
    let mut total = 0.0;
    for (x, y) in data.rows() {
        total += theta.joint_log_terms(x, y, &mut s)?;
    }
    finite_or(total, "log-quasi-likelihood")
}

/// Posterior component probabilities for every row.
pub fn responsibilities(data: &Dataset, theta: &MoeParams) -> Result<Responsibilities> {
    theta.validate()?;
    theta.check_compatible(data)?;
    responsibilities_with_ll(data, theta).map(|(r, _)| r)
}

/// Responsibilities and `Q_n` in a single pass.
pub(crate) fn responsibilities_with_ll(
    data: &Dataset,
    theta: &MoeParams,
) -> Result<(Responsibilities, f64)> {
    let g = theta.g();
    let mut values = Vec::with_capacity(data.n() * g);
    let mut s = RowScratch::default();
    let mut total = 0.0;
    for (x, y) in data.rows() {
        let lse = theta.joint_log_terms(x, y, &mut s)?;
        if !lse.is_finite() {
            return Err(MoeError::NonFinite("mixture log-density"));
        }
        total += lse;
        values.extend(s.terms.iter().map(|t| (t - lse).exp()));
    }
    Ok((Responsibilities::from_values(data.n(), g, values), total))
}

fn check_point(x: &[f64], p: usize) -> Result<()> {
    if x.len() != p {
        return Err(MoeError::DimensionMismatch {
            what: "covariate point",
            expected: p,
            found: x.len(),
        });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(MoeError::NonFinite("covariates"));
    }
    Ok(())
}

fn finite_or(v: f64, what: &'static str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(MoeError::NonFinite(what))
    }
}
