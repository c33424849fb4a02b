//! Expert-block updates: closed-form weighted least squares for Gaussian
//! experts and ascent-guarded weighted IRLS for the GLM families.

use nalgebra::{DMatrix, DVector};

use crate::error::{MoeError, Result};
use crate::model::{Dataset, ExpertDesign, ExpertParams, Family, Response};
use crate::numeric::{dot, log_sum_exp, sigmoid, softplus, spd_solve};

/// Magnitude cap for logistic and multinomial coefficients under separation.
pub const SEPARATION_CAP: f64 = 30.0;

// Largest coordinate change of a single IRLS trial step.
const MAX_STEP: f64 = 5.0;

/// Relative predicted Newton gain below which a standalone IRLS solve stops.
pub(crate) const EXACT_GAIN: f64 = 1e-18;

/// Looser stopping gain inside the MM cycle, where each expert block only
/// has to raise the surrogate and is revisited every cycle.
pub(crate) const CYCLE_GAIN: f64 = 1e-12;

// Relative size of objective changes lost to floating-point rounding.
const ROUNDING: f64 = 1e-13;

/// Design rows `(1, design(x_i))` for every observation, row-major.
#[derive(Debug, Clone)]
pub(crate) struct DesignMatrix {
    pub width: usize,
    pub values: Vec<f64>,
}

impl DesignMatrix {
    pub fn build(data: &Dataset, design: ExpertDesign) -> Self {
        let width = design.width(data.p()) + 1;
        let mut values = Vec::with_capacity(data.n() * width);
        let mut row = Vec::with_capacity(width);
        for i in 0..data.n() {
            design.fill_row(data.x(i), &mut row);
            values.extend_from_slice(&row);
        }
        DesignMatrix { width, values }
    }

    /// Gating design `(1, x_i)`.
    pub fn gating(data: &Dataset) -> Self {
        Self::build(data, ExpertDesign::Linear)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.width..(i + 1) * self.width]
    }

    pub fn n(&self) -> usize {
        self.values.len() / self.width.max(1)
    }
}

/// Outcome of a weighted Gaussian solve.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianFit {
    pub coef: Vec<f64>,
    pub variance: f64,
    /// The variance was raised to the floor.
    pub floored: bool,
}

/// Weighted least squares for one Gaussian expert:
/// `beta = [sum w x x']^-1 sum w y x`, `sigma^2 = sum w r^2 / sum w`, floored.
pub fn weighted_gaussian_fit(
    data: &Dataset,
    design: ExpertDesign,
    weights: &[f64],
    variance_floor: f64,
) -> Result<GaussianFit> {
    let rows = DesignMatrix::build(data, design);
    gaussian_fit_rows(data, &rows, weights, variance_floor, "weighted Gram matrix")
}

pub(crate) fn gaussian_fit_rows(
    data: &Dataset,
    rows: &DesignMatrix,
    weights: &[f64],
    variance_floor: f64,
    context: &str,
) -> Result<GaussianFit> {
    let w = rows.width;
    let mut gram = DMatrix::<f64>::zeros(w, w);
    let mut moment = DVector::<f64>::zeros(w);
    let mut mass = 0.0;
    for (i, &tau) in weights.iter().enumerate() {
        if tau == 0.0 {
            continue;
        }
        let x = rows.row(i);
        let y = real_response(data.y(i))?;
        mass += tau;
        for a in 0..w {
            let tx = tau * x[a];
            moment[a] += tx * y;
            for b in 0..=a {
                gram[(a, b)] += tx * x[b];
            }
        }
    }
    for a in 0..w {
        for b in 0..a {
            gram[(b, a)] = gram[(a, b)];
        }
    }
    let coef = spd_solve(&gram, &moment, context)?;
    let coef: Vec<f64> = coef.iter().copied().collect();
    let mut rss = 0.0;
    for (i, &tau) in weights.iter().enumerate() {
        if tau == 0.0 {
            continue;
        }
        let r = real_response(data.y(i))? - dot(&coef, rows.row(i));
        rss += tau * r * r;
    }
    let raw = rss / mass;
    let (variance, floored) = if raw <= variance_floor || !raw.is_finite() {
        (variance_floor, true)
    } else {
        (raw, false)
    };
    Ok(GaussianFit {
        coef,
        variance,
        floored,
    })
}

fn real_response(y: &Response) -> Result<f64> {
    match *y {
        Response::Real(v) => Ok(v),
        other => Err(MoeError::KindMismatch {
            response: format!("{other:?}"),
            family: "gaussian".into(),
        }),
    }
}

/// Outcome of a weighted GLM solve.
#[derive(Debug, Clone, PartialEq)]
pub struct GlmFit {
    pub expert: ExpertParams,
    /// Weighted log-likelihood at the returned coefficients.
    pub objective: f64,
    /// Some coefficient reached the separation cap.
    pub separated: bool,
    pub iterations: usize,
}

/// Weighted IRLS (Newton with step-halving) for a logistic, Poisson or
/// multinomial expert, started from `start`. The weighted log-likelihood
/// never decreases across accepted steps.
pub fn weighted_glm_fit(
    data: &Dataset,
    design: ExpertDesign,
    weights: &[f64],
    start: &ExpertParams,
    max_inner: usize,
) -> Result<GlmFit> {
    let rows = DesignMatrix::build(data, design);
    glm_fit_rows(data, &rows, weights, start, max_inner, EXACT_GAIN)
}

pub(crate) fn glm_fit_rows(
    data: &Dataset,
    rows: &DesignMatrix,
    weights: &[f64],
    start: &ExpertParams,
    max_inner: usize,
    gain_tol: f64,
) -> Result<GlmFit> {
    let kind = GlmKind::of(start)?;
    let w = rows.width;
    let mut beta = flatten(start);
    if beta.len() != kind.blocks() * w {
        return Err(MoeError::DimensionMismatch {
            what: "expert coefficients",
            expected: kind.blocks() * w,
            found: beta.len(),
        });
    }
    // rows with negligible weight cannot move the weighted sums
    let w_max = weights.iter().copied().fold(0.0, f64::max);
    let active: Vec<usize> = (0..weights.len())
        .filter(|&i| weights[i] > 1e-16 * w_max)
        .collect();
    let cap = kind.cap();
    if let Some(c) = cap {
        beta.iter_mut().for_each(|b| *b = b.clamp(-c, c));
    }
    let mut obj = kind.objective(data, rows, weights, &active, &beta)?;
    if !obj.is_finite() {
        return Err(MoeError::NonFinite("weighted expert log-likelihood"));
    }
    let mut iterations = 0;
    let mut small_before = false;
    for _ in 0..max_inner {
        iterations += 1;
        let (grad, neg_hess) = kind.gradient_hessian(data, rows, weights, &active, &beta)?;
        // coordinates pinned at the cap with the gradient pushing outward stay fixed
        let at_cap = |j: usize| cap.is_some_and(|c| beta[j].abs() >= c);
        let mut free: Vec<usize> = (0..beta.len())
            .filter(|&j| !(at_cap(j) && grad[j] * beta[j] > 0.0))
            .collect();
        // a Newton step pushing a capped coordinate outward would be clamped
        // into a different direction; pin those coordinates and solve again
        let (sub_grad, sub_step) = loop {
            if free.is_empty() {
                break (DVector::zeros(0), None);
            }
            let sub_hess = neg_hess.select_rows(&free).select_columns(&free);
            let sub_grad = DVector::from_iterator(free.len(), free.iter().map(|&j| grad[j]));
            let Some(sub_step) = newton_direction(&sub_hess, &sub_grad) else {
                break (sub_grad, None);
            };
            let kept: Vec<usize> = free
                .iter()
                .zip(sub_step.iter())
                .filter(|&(&j, s)| !(at_cap(j) && s * beta[j] > 0.0))
                .map(|(&j, _)| j)
                .collect();
            if kept.len() == free.len() {
                break (sub_grad, Some(sub_step));
            }
            free = kept;
        };
        let Some(sub_step) = sub_step else {
            break;
        };
        // predicted gain of the full Newton step
        if 0.5 * sub_grad.dot(&sub_step) <= gain_tol * (1.0 + obj.abs()) {
            break;
        }
        // near-flat directions give huge Newton steps; bound the first trial
        let longest = sub_step.amax();
        let shrink = if longest > MAX_STEP {
            MAX_STEP / longest
        } else {
            1.0
        };
        let mut step = vec![0.0; beta.len()];
        for (&j, s) in free.iter().zip(sub_step.iter()) {
            step[j] = shrink * s;
        }
        let slope: f64 = free
            .iter()
            .zip(sub_step.iter())
            .map(|(&j, s)| grad[j] * shrink * s)
            .sum();
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let cand: Vec<f64> = beta
                .iter()
                .zip(&step)
                .map(|(b, s)| {
                    let v = b + t * s;
                    match cap {
                        Some(c) => v.clamp(-c, c),
                        None => v,
                    }
                })
                .collect();
            let cand_obj = kind.objective(data, rows, weights, &active, &cand)?;
            if cand_obj.is_finite() && cand_obj >= obj {
                let small = cand_obj - obj <= 1e-12 * (1.0 + cand_obj.abs());
                beta = cand;
                obj = cand_obj;
                // one more step after the first negligible gain polishes a
                // quadratically converging solve; a second one ends the loop
                accepted = !(small && small_before);
                small_before = small;
                break;
            }
            // below rounding noise of the objective no trial can show a gain
            if t * slope <= ROUNDING * (1.0 + obj.abs()) {
                break;
            }
            t *= 0.5;
            if step
                .iter()
                .zip(&beta)
                .all(|(s, b)| (t * s).abs() <= 1e-14 * (1.0 + b.abs()))
            {
                break;
            }
        }
        if !accepted {
            break;
        }
    }
    // a near-zero log-likelihood means the labels are fitted perfectly
    let total_weight: f64 = weights.iter().sum();
    let separated =
        cap.is_some_and(|c| beta.iter().any(|b| b.abs() >= c) || obj >= -1e-8 * total_weight);
    Ok(GlmFit {
        expert: kind.unflatten(&beta, w),
        objective: obj,
        separated,
        iterations,
    })
}

// Solves (-H + ridge) s = grad, inflating the ridge until the factorization succeeds.
fn newton_direction(neg_hess: &DMatrix<f64>, grad: &DVector<f64>) -> Option<DVector<f64>> {
    if grad.iter().all(|g| *g == 0.0) {
        return None;
    }
    let n = neg_hess.nrows();
    let scale = (0..n)
        .map(|i| neg_hess[(i, i)].abs())
        .fold(0.0, f64::max)
        .max(1e-300);
    let mut ridge = 0.0;
    for _ in 0..12 {
        let mut a = neg_hess.clone();
        for i in 0..n {
            a[(i, i)] += ridge;
        }
        if let Some(ch) = a.cholesky() {
            let s = ch.solve(grad);
            if s.iter().all(|v| v.is_finite()) {
                return Some(s);
            }
        }
        ridge = if ridge == 0.0 {
            1e-10 * scale
        } else {
            ridge * 100.0
        };
    }
    None
}

fn flatten(e: &ExpertParams) -> Vec<f64> {
    match e {
        ExpertParams::Gaussian { coef, .. }
        | ExpertParams::Logistic { coef }
        | ExpertParams::Poisson { coef } => coef.clone(),
        ExpertParams::Multinomial { coef } => coef.concat(),
    }
}

#[derive(Debug, Clone, Copy)]
enum GlmKind {
    Logistic,
    Poisson,
    Multinomial { k: usize },
}

impl GlmKind {
    fn of(e: &ExpertParams) -> Result<Self> {
        match e.family() {
            Family::Logistic => Ok(GlmKind::Logistic),
            Family::Poisson => Ok(GlmKind::Poisson),
            Family::Multinomial { k } => Ok(GlmKind::Multinomial { k }),
            Family::Gaussian => Err(MoeError::Unsupported(
                "IRLS update for Gaussian experts".into(),
            )),
        }
    }

    fn blocks(&self) -> usize {
        match *self {
            GlmKind::Multinomial { k } => k - 1,
            _ => 1,
        }
    }

    fn cap(&self) -> Option<f64> {
        match self {
            GlmKind::Poisson => None,
            _ => Some(SEPARATION_CAP),
        }
    }

    fn unflatten(&self, beta: &[f64], w: usize) -> ExpertParams {
        match self {
            GlmKind::Logistic => ExpertParams::Logistic {
                coef: beta.to_vec(),
            },
            GlmKind::Poisson => ExpertParams::Poisson {
                coef: beta.to_vec(),
            },
            GlmKind::Multinomial { .. } => ExpertParams::Multinomial {
                coef: beta.chunks(w).map(<[f64]>::to_vec).collect(),
            },
        }
    }

    /// Weighted log-likelihood up to terms constant in beta.
    fn objective(
        &self,
        data: &Dataset,
        rows: &DesignMatrix,
        weights: &[f64],
        active: &[usize],
        beta: &[f64],
    ) -> Result<f64> {
        let w = rows.width;
        let mut total = 0.0;
        let mut eta = Vec::new();
        for &i in active {
            let tau = weights[i];
            let x = rows.row(i);
            let ll = match (self, data.y(i)) {
                (GlmKind::Logistic, Response::Binary(b)) => {
                    let e = dot(beta, x);
                    *b as f64 * e - softplus(e)
                }
                (GlmKind::Poisson, Response::Count(c)) => {
                    let e = dot(beta, x);
                    *c as f64 * e - e.exp()
                }
                (GlmKind::Multinomial { .. }, Response::Category(l)) => {
                    eta.clear();
                    eta.extend(beta.chunks(w).map(|b| dot(b, x)));
                    eta.push(0.0);
                    eta[l - 1] - log_sum_exp(&eta)
                }
                (_, y) => {
                    return Err(MoeError::KindMismatch {
                        response: format!("{y:?}"),
                        family: format!("{self:?}"),
                    })
                }
            };
            total += tau * ll;
        }
        Ok(total)
    }

    /// Gradient and negative Hessian of the weighted log-likelihood.
    fn gradient_hessian(
        &self,
        data: &Dataset,
        rows: &DesignMatrix,
        weights: &[f64],
        active: &[usize],
        beta: &[f64],
    ) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let w = rows.width;
        let dim = beta.len();
        let mut grad = vec![0.0; dim];
        // lower triangle, row-major
        let mut h = vec![0.0; dim * dim];
        let mut probs = Vec::new();
        for &i in active {
            let tau = weights[i];
            let x = rows.row(i);
            match (self, data.y(i)) {
                (GlmKind::Logistic, Response::Binary(_))
                | (GlmKind::Poisson, Response::Count(_)) => {
                    let e = dot(beta, x);
                    let (mu, var) = match self {
                        GlmKind::Logistic => {
                            let m = sigmoid(e);
                            (m, m * (1.0 - m))
                        }
                        _ => {
                            let m = e.exp();
                            (m, m)
                        }
                    };
                    let resid = tau * (data.y(i).as_f64() - mu);
                    let tv = tau * var;
                    for a in 0..w {
                        grad[a] += resid * x[a];
                        let c = tv * x[a];
                        for (hb, xb) in h[a * dim..a * dim + a + 1].iter_mut().zip(x) {
                            *hb += c * xb;
                        }
                    }
                }
                (GlmKind::Multinomial { k }, Response::Category(l)) => {
                    probs.clear();
                    probs.extend(beta.chunks(w).map(|b| dot(b, x)));
                    probs.push(0.0);
                    crate::numeric::softmax_in_place(&mut probs);
                    for c in 0..k - 1 {
                        let ind = if *l == c + 1 { 1.0 } else { 0.0 };
                        let r = tau * (ind - probs[c]);
                        for (g, xa) in grad[c * w..(c + 1) * w].iter_mut().zip(x) {
                            *g += r * xa;
                        }
                        for c2 in 0..=c {
                            let v = probs[c] * (if c == c2 { 1.0 } else { 0.0 } - probs[c2]);
                            let tv = tau * v;
                            if tv == 0.0 {
                                continue;
                            }
                            for a in 0..w {
                                let start = (c * w + a) * dim + c2 * w;
                                let len = if c == c2 { a + 1 } else { w };
                                let va = tv * x[a];
                                for (hb, xb) in h[start..start + len].iter_mut().zip(x) {
                                    *hb += va * xb;
                                }
                            }
                        }
                    }
                }
                (_, y) => {
                    return Err(MoeError::KindMismatch {
                        response: format!("{y:?}"),
                        family: format!("{self:?}"),
                    })
                }
            }
        }
        for a in 0..dim {
            for b in 0..a {
                h[b * dim + a] = h[a * dim + b];
            }
        }
        let grad = DVector::from_vec(grad);
        let neg_hess = DMatrix::from_row_slice(dim, dim, &h);
        Ok((grad, neg_hess))
    }
}
