//! Gating-block update from the log-sum-exp minorizer combined with the
//! quadratic lower bound on the soft-max log-partition.
//!
//! With `H = sum_i x~_i x~_i'`, the curvature of the log-partition in a single
//! gating block is bounded by `H / 4` because `a (1 - a) <= 1/4`. Maximizing
//! the resulting quadratic surrogate gives the update
//! `alpha_z <- alpha_z + 4 H^-1 sum_i (tau_iz - Gate_z(x_i)) x~_i`.

use nalgebra::{DMatrix, DVector};

use super::experts::DesignMatrix;
use crate::error::{MoeError, Result};
use crate::model::{responsibilities_with_ll, Dataset, GatingParams, MoeParams, Responsibilities};
use crate::numeric::{dot, log_sum_exp, softmax_in_place, spd_inverse};

/// `H = sum_i x~_i x~_i'` over the gating design.
pub fn gating_gram(data: &Dataset) -> DMatrix<f64> {
    gram_of(&DesignMatrix::gating(data))
}

pub(crate) fn gram_of(rows: &DesignMatrix) -> DMatrix<f64> {
    let w = rows.width;
    let mut h = DMatrix::<f64>::zeros(w, w);
    for i in 0..rows.n() {
        let x = rows.row(i);
        for a in 0..w {
            for b in 0..=a {
                h[(a, b)] += x[a] * x[b];
            }
        }
    }
    for a in 0..w {
        for b in 0..a {
            h[(b, a)] = h[(a, b)];
        }
    }
    h
}

pub(crate) fn gating_gram_inverse(rows: &DesignMatrix) -> Result<DMatrix<f64>> {
    spd_inverse(
        &gram_of(rows),
        "gating Gram matrix (constant or collinear covariates)",
    )
}

/// `sum_i (tau_iz - Gate_z(x_i)) x~_i` for gating block `z` (0-based).
pub(crate) fn gating_gradient(
    rows: &DesignMatrix,
    data: &Dataset,
    theta: &MoeParams,
    tau: &Responsibilities,
    z: usize,
) -> DVector<f64> {
    let w = rows.width;
    let mut grad = DVector::<f64>::zeros(w);
    let mut gates = Vec::with_capacity(theta.g());
    for i in 0..data.n() {
        theta.gating.logits_into(data.x(i), &mut gates);
        softmax_in_place(&mut gates);
        let r = tau.get(i, z) - gates[z];
        if r != 0.0 {
            for (a, x) in rows.row(i).iter().enumerate() {
                grad[a] += r * x;
            }
        }
    }
    grad
}

pub(crate) fn gating_step(
    rows: &DesignMatrix,
    h_inv: &DMatrix<f64>,
    data: &Dataset,
    theta: &MoeParams,
    tau: &Responsibilities,
    z: usize,
) -> Vec<f64> {
    let grad = gating_gradient(rows, data, theta, tau, z);
    let step = h_inv * grad * 4.0;
    theta.gating.blocks[z]
        .iter()
        .zip(step.iter())
        .map(|(a, s)| a + s)
        .collect()
}

/// Expert log-densities for every row and component (row-major `n x g`),
/// with `exp(log - row max)` cached so gate changes need no expert work.
pub(crate) struct ExpertTable {
    g: usize,
    log: Vec<f64>,
    scaled: Vec<f64>,
    row_max: Vec<f64>,
}

impl ExpertTable {
    pub(crate) fn new(
        data: &Dataset,
        expert_rows: &DesignMatrix,
        theta: &MoeParams,
    ) -> Result<Self> {
        let g = theta.g();
        let n = data.n();
        let mut log = Vec::with_capacity(n * g);
        let mut scaled = Vec::with_capacity(n * g);
        let mut row_max = Vec::with_capacity(n);
        for i in 0..n {
            let row = expert_rows.row(i);
            let y = data.y(i);
            let start = log.len();
            for e in &theta.experts {
                log.push(e.log_density_row(y, row)?);
            }
            let m = log[start..]
                .iter()
                .copied()
                .fold(f64::NEG_INFINITY, f64::max);
            if !m.is_finite() {
                return Err(MoeError::NonFinite("expert log-density"));
            }
            row_max.push(m);
            scaled.extend(log[start..].iter().map(|l| (l - m).exp()));
        }
        Ok(ExpertTable {
            g,
            log,
            scaled,
            row_max,
        })
    }
}

/// `Q_n` for `gating` combined with cached expert densities; fills the gate
/// probabilities and responsibilities (both `n x g`).
pub(crate) fn gated_log_likelihood(
    data: &Dataset,
    gating: &GatingParams,
    table: &ExpertTable,
    gates: &mut Vec<f64>,
    tau: &mut Vec<f64>,
) -> Result<f64> {
    let g = table.g;
    gates.resize(data.n() * g, 0.0);
    tau.resize(data.n() * g, 0.0);
    let mut logits = Vec::with_capacity(g);
    let mut total = 0.0;
    for i in 0..data.n() {
        let row = i * g..(i + 1) * g;
        gates_from_logits(data.x(i), gating, &mut logits, &mut gates[row.clone()]);
        total += mix_row(
            data.x(i),
            gating,
            table,
            i,
            &gates[row.clone()],
            &mut tau[row],
            &mut logits,
        )?;
    }
    Ok(total)
}

/// [`gated_log_likelihood`] for parameters that differ from those behind
/// `base_gates` only by `delta` in block `z`. Each row rescales the old gate
/// `z` by `exp(x~' delta)`; rows where that would lose precision are
/// recomputed from `gating`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gated_log_likelihood_shift(
    data: &Dataset,
    rows: &DesignMatrix,
    gating: &GatingParams,
    base_gates: &[f64],
    z: usize,
    delta: &[f64],
    table: &ExpertTable,
    gates: &mut Vec<f64>,
    tau: &mut Vec<f64>,
) -> Result<f64> {
    let g = table.g;
    gates.resize(data.n() * g, 0.0);
    tau.resize(data.n() * g, 0.0);
    let mut logits = Vec::with_capacity(g);
    let mut total = 0.0;
    for i in 0..data.n() {
        let row = i * g..(i + 1) * g;
        let base = &base_gates[row.clone()];
        let d = dot(delta, rows.row(i));
        let moved = base[z] * d.exp();
        let sum = base.iter().sum::<f64>() - base[z] + moved;
        let out = &mut gates[row.clone()];
        if base[z] > SHIFT_FLOOR && d < SHIFT_CEILING && sum > SHIFT_FLOOR && moved.is_finite() {
            let inv = 1.0 / sum;
            for (o, b) in out.iter_mut().zip(base) {
                *o = b * inv;
            }
            out[z] = moved * inv;
        } else {
            gates_from_logits(data.x(i), gating, &mut logits, out);
        }
        total += mix_row(
            data.x(i),
            gating,
            table,
            i,
            &gates[row.clone()],
            &mut tau[row],
            &mut logits,
        )?;
    }
    Ok(total)
}

// Gates below this, or exponents above the ceiling, are recomputed from logits.
const SHIFT_FLOOR: f64 = 1e-200;
const SHIFT_CEILING: f64 = 300.0;

fn gates_from_logits(x: &[f64], gating: &GatingParams, logits: &mut Vec<f64>, out: &mut [f64]) {
    gating.logits_into(x, logits);
    let lmax = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut zsum = 0.0;
    for (o, l) in out.iter_mut().zip(logits.iter()) {
        *o = (l - lmax).exp();
        zsum += *o;
    }
    out.iter_mut().for_each(|o| *o /= zsum);
}

// Responsibilities and log mixture density of row `i` given its gates.
fn mix_row(
    x: &[f64],
    gating: &GatingParams,
    table: &ExpertTable,
    i: usize,
    gates: &[f64],
    tau: &mut [f64],
    logits: &mut Vec<f64>,
) -> Result<f64> {
    let g = table.g;
    let scaled = &table.scaled[i * g..(i + 1) * g];
    let mut mix = 0.0;
    for ((t, gz), s) in tau.iter_mut().zip(gates).zip(scaled) {
        *t = gz * s;
        mix += *t;
    }
    let ll = if mix > 1e-280 {
        tau.iter_mut().for_each(|t| *t /= mix);
        mix.ln() + table.row_max[i]
    } else {
        // underflow: redo the row in log space
        gating.logits_into(x, logits);
        let lz = log_sum_exp(logits);
        for (z, t) in tau.iter_mut().enumerate() {
            *t = logits[z] - lz + table.log[i * g + z];
        }
        let lse = log_sum_exp(tau);
        tau.iter_mut().for_each(|t| *t = (*t - lse).exp());
        lse
    };
    if !ll.is_finite() {
        return Err(MoeError::NonFinite("mixture log-density"));
    }
    Ok(ll)
}

/// Newton direction for gating block `z` on the log-sum-exp minorizer, using
/// the exact block curvature `sum_i Gate_z (1 - Gate_z) x~ x~'`.
pub(crate) fn gating_newton_direction(
    rows: &DesignMatrix,
    gates: &[f64],
    tau: &[f64],
    g: usize,
    z: usize,
) -> Option<DVector<f64>> {
    let w = rows.width;
    let mut grad = DVector::<f64>::zeros(w);
    let mut hess = DMatrix::<f64>::zeros(w, w);
    for i in 0..rows.n() {
        let gz = gates[i * g + z];
        let r = tau[i * g + z] - gz;
        let c = gz * (1.0 - gz);
        let x = rows.row(i);
        for a in 0..w {
            grad[a] += r * x[a];
            let ca = c * x[a];
            for b in 0..=a {
                hess[(a, b)] += ca * x[b];
            }
        }
    }
    for a in 0..w {
        for b in 0..a {
            hess[(b, a)] = hess[(a, b)];
        }
    }
    let step = hess.cholesky()?.solve(&grad);
    step.iter().all(|v| v.is_finite()).then_some(step)
}

/// `4 H^-1 sum_i (tau_iz - Gate_z(x_i)) x~_i` from cached gates and responsibilities.
pub(crate) fn gating_direction(
    rows: &DesignMatrix,
    h_inv: &DMatrix<f64>,
    gates: &[f64],
    tau: &[f64],
    g: usize,
    z: usize,
) -> DVector<f64> {
    let mut grad = DVector::<f64>::zeros(rows.width);
    for i in 0..rows.n() {
        let r = tau[i * g + z] - gates[i * g + z];
        if r != 0.0 {
            for (a, x) in rows.row(i).iter().enumerate() {
                grad[a] += r * x;
            }
        }
    }
    h_inv * grad * 4.0
}

/// One minorize-maximize update of gating block `z` (0-based, `z < g - 1`),
/// with responsibilities and gates evaluated at `theta`.
pub fn gating_block_update(data: &Dataset, theta: &MoeParams, z: usize) -> Result<Vec<f64>> {
    theta.validate()?;
    theta.check_compatible(data)?;
    check_block(theta, z)?;
    let rows = DesignMatrix::gating(data);
    let h_inv = gating_gram_inverse(&rows)?;
    let (tau, _) = responsibilities_with_ll(data, theta)?;
    Ok(gating_step(&rows, &h_inv, data, theta, &tau, z))
}

/// Value of the quadratic surrogate for gating block `z` at `candidate`,
/// anchored at `anchor`:
/// `Q_n(anchor) + d' grad - d' H d / 8` with `d = candidate - anchor_z`.
///
/// It equals `Q_n(anchor)` at the anchor and lies below `Q_n` with block `z`
/// replaced by `candidate`.
pub fn gating_minorizer(
    data: &Dataset,
    anchor: &MoeParams,
    z: usize,
    candidate: &[f64],
) -> Result<f64> {
    anchor.validate()?;
    anchor.check_compatible(data)?;
    check_block(anchor, z)?;
    if candidate.len() != anchor.p() + 1 {
        return Err(MoeError::DimensionMismatch {
            what: "gating block",
            expected: anchor.p() + 1,
            found: candidate.len(),
        });
    }
    let rows = DesignMatrix::gating(data);
    let h = gram_of(&rows);
    let (tau, q) = responsibilities_with_ll(data, anchor)?;
    let grad = gating_gradient(&rows, data, anchor, &tau, z);
    let delta = DVector::from_iterator(
        candidate.len(),
        candidate
            .iter()
            .zip(&anchor.gating.blocks[z])
            .map(|(c, a)| c - a),
    );
    Ok(q + delta.dot(&grad) - 0.125 * (delta.transpose() * &h * &delta)[(0, 0)])
}

fn check_block(theta: &MoeParams, z: usize) -> Result<()> {
    if z + 1 >= theta.g() {
        return Err(MoeError::InvalidConfig(format!(
            "gating block index {} out of range for g = {} (reference component has no free block)",
            z + 1,
            theta.g()
        )));
    }
    Ok(())
}
