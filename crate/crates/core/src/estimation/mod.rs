//! Maximum quasi-likelihood estimation by blockwise minorization-maximization.
//!
//! One cycle visits the gating blocks `1..g-1` and then the expert block.
//! Responsibilities are recomputed at the current iterate before every block
//! update, so each surrogate is anchored at the immediately preceding iterate
//! and `Q_n` cannot decrease.

mod experts;
mod gating;
mod init;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use experts::{weighted_gaussian_fit, weighted_glm_fit, GaussianFit, GlmFit, SEPARATION_CAP};
pub use gating::{gating_block_update, gating_gram, gating_minorizer};
pub use init::initialize;

use crate::error::{MoeError, Result};
use crate::model::{
    responsibilities_with_ll, Dataset, ExpertDesign, ExpertParams, Family, MoeParams,
    Responsibilities,
};
use experts::{gaussian_fit_rows, glm_fit_rows, DesignMatrix, CYCLE_GAIN};

/// Component starvation threshold, relative to `n`.
pub const EMPTY_COMPONENT_FRACTION: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub max_cycles: usize,
    /// Stop when the relative change of `Q_n` over a full cycle falls below this.
    pub rel_tol: f64,
    /// The variance floor is this factor times the sample variance of `y`.
    pub variance_floor_factor: f64,
    pub n_starts: usize,
    pub seed: u64,
    pub irls_max_inner: usize,
    /// Worker threads for multi-start and per-g fits; results do not depend on it.
    pub threads: usize,
    /// Use ascending Newton or lengthened MM steps for the gating blocks and
    /// extrapolate across cycles. Every accepted move still keeps `Q_n` from
    /// decreasing.
    pub accelerate: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            max_cycles: 1000,
            rel_tol: 1e-8,
            variance_floor_factor: 1e-10,
            n_starts: 10,
            seed: 0,
            irls_max_inner: 25,
            threads: 1,
            accelerate: true,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_cycles == 0 {
            return Err(MoeError::InvalidConfig(
                "max_cycles must be at least 1".into(),
            ));
        }
        if !(self.rel_tol > 0.0) {
            return Err(MoeError::InvalidConfig("rel_tol must be positive".into()));
        }
        if self.n_starts == 0 {
            return Err(MoeError::InvalidConfig(
                "n_starts must be at least 1".into(),
            ));
        }
        if self.irls_max_inner == 0 {
            return Err(MoeError::InvalidConfig(
                "irls_max_inner must be at least 1".into(),
            ));
        }
        if !(self.variance_floor_factor > 0.0) {
            return Err(MoeError::InvalidConfig(
                "variance_floor_factor must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn variance_floor(&self, data: &Dataset) -> f64 {
        let v = data.response_variance();
        self.variance_floor_factor * if v > 0.0 { v } else { 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub theta_hat: MoeParams,
    /// `Q_n` at the initial point followed by one value per completed cycle.
    pub q_trace: Vec<f64>,
    pub cycles_used: usize,
    pub converged: bool,
    /// A Gaussian variance sits on the floor.
    pub degenerate: bool,
    /// A logistic/multinomial coefficient sits on the separation cap.
    pub separated: bool,
    pub seed_used: u64,
}

impl FitResult {
    pub fn final_q(&self) -> f64 {
        *self.q_trace.last().expect("trace holds the initial value")
    }

    /// Whether every cycle satisfied `Q_r >= Q_{r-1} - tol * |Q_{r-1}|`.
    pub fn is_monotone(&self, tol: f64) -> bool {
        self.q_trace
            .windows(2)
            .all(|w| w[1] >= w[0] - tol * w[0].abs())
    }
}

/// One block of the parameter partition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Block {
    /// Gating coefficients of component `z` (0-based, `z < g - 1`).
    Gating(usize),
    /// All expert parameters.
    Experts,
}

impl std::fmt::Display for Block {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Block::Gating(z) => write!(f, "gating block {}", z + 1),
            Block::Experts => f.write_str("expert block"),
        }
    }
}

/// Visit order of one cycle: gating blocks, then the expert block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockPartition {
    pub blocks: Vec<Block>,
}

impl BlockPartition {
    pub fn new(g: usize) -> Self {
        let mut blocks: Vec<Block> = (0..g.saturating_sub(1)).map(Block::Gating).collect();
        blocks.push(Block::Experts);
        BlockPartition { blocks }
    }

    /// Parameter-vector index ranges of each block, in [`MoeParams::to_vector`] order.
    pub fn ranges(&self, theta: &MoeParams) -> Vec<std::ops::Range<usize>> {
        let w = theta.p() + 1;
        let gate_len = (theta.g() - 1) * w;
        self.blocks
            .iter()
            .map(|b| match b {
                Block::Gating(z) => z * w..(z + 1) * w,
                Block::Experts => gate_len..theta.dim(),
            })
            .collect()
    }
}

/// Expert parameters after one block update.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertBlockUpdate {
    pub experts: Vec<ExpertParams>,
    pub floored: bool,
    pub separated: bool,
}

// Data-dependent quantities reused across cycles.
struct FitContext<'a> {
    data: &'a Dataset,
    gate_rows: DesignMatrix,
    expert_rows: DesignMatrix,
    h_inv: Option<nalgebra::DMatrix<f64>>,
    floor: f64,
    irls_max_inner: usize,
}

impl<'a> FitContext<'a> {
    fn new(data: &'a Dataset, theta: &MoeParams, config: &FitConfig) -> Result<Self> {
        let gate_rows = DesignMatrix::gating(data);
        let h_inv = if theta.g() > 1 {
            Some(gating::gating_gram_inverse(&gate_rows)?)
        } else {
            None
        };
        Ok(FitContext {
            data,
            expert_rows: DesignMatrix::build(data, theta.design),
            gate_rows,
            h_inv,
            floor: config.variance_floor(data),
            irls_max_inner: config.irls_max_inner,
        })
    }

    fn expert_update(
        &self,
        theta: &MoeParams,
        tau: &Responsibilities,
    ) -> Result<ExpertBlockUpdate> {
        let n = self.data.n();
        let mass = tau.column_sums();
        for (z, &m) in mass.iter().enumerate() {
            if !(m >= n as f64 * EMPTY_COMPONENT_FRACTION) {
                return Err(MoeError::EmptyComponent {
                    component: z + 1,
                    mass: m,
                });
            }
        }
        let mut experts = Vec::with_capacity(theta.g());
        let mut floored = false;
        let mut separated = false;
        for (z, current) in theta.experts.iter().enumerate() {
            let w = tau.column(z);
            match current {
                ExpertParams::Gaussian { .. } => {
                    let ctx = format!("weighted Gram matrix of expert {}", z + 1);
                    let fit =
                        gaussian_fit_rows(self.data, &self.expert_rows, &w, self.floor, &ctx)?;
                    floored |= fit.floored;
                    experts.push(ExpertParams::Gaussian {
                        coef: fit.coef,
                        variance: fit.variance,
                    });
                }
                _ => {
                    let fit = glm_fit_rows(
                        self.data,
                        &self.expert_rows,
                        &w,
                        current,
                        self.irls_max_inner,
                        CYCLE_GAIN,
                    )?;
                    separated |= fit.separated;
                    experts.push(fit.expert);
                }
            }
        }
        Ok(ExpertBlockUpdate {
            experts,
            floored,
            separated,
        })
    }
}

/// Closed-form update of every Gaussian expert from responsibilities at `theta`.
pub fn gaussian_expert_block_update(
    data: &Dataset,
    theta: &MoeParams,
    config: &FitConfig,
) -> Result<ExpertBlockUpdate> {
    if theta.family != Family::Gaussian {
        return Err(MoeError::Unsupported(format!(
            "Gaussian expert update for {} family",
            theta.family
        )));
    }
    expert_block_update(data, theta, config)
}

/// Weighted-IRLS update of every GLM expert from responsibilities at `theta`.
///
/// If the new experts would lower `Q_n`, the current experts are returned unchanged.
pub fn glm_expert_block_update(
    data: &Dataset,
    theta: &MoeParams,
    config: &FitConfig,
) -> Result<ExpertBlockUpdate> {
    if theta.family == Family::Gaussian {
        return Err(MoeError::Unsupported(
            "IRLS update for Gaussian experts".into(),
        ));
    }
    let (_, q_before) = responsibilities_with_ll(data, theta)?;
    let update = expert_block_update(data, theta, config)?;
    let mut candidate = theta.clone();
    candidate.experts = update.experts.clone();
    let (_, q_after) = responsibilities_with_ll(data, &candidate)?;
    if q_after >= q_before {
        Ok(update)
    } else {
        Ok(ExpertBlockUpdate {
            experts: theta.experts.clone(),
            floored: false,
            separated: update.separated,
        })
    }
}

fn expert_block_update(
    data: &Dataset,
    theta: &MoeParams,
    config: &FitConfig,
) -> Result<ExpertBlockUpdate> {
    theta.validate()?;
    theta.check_compatible(data)?;
    let ctx = FitContext::new(data, theta, config)?;
    let (tau, _) = responsibilities_with_ll(data, theta)?;
    ctx.expert_update(theta, &tau)
}

/// Runs the blockwise MM iteration from `init`.
pub fn fit(
    data: &Dataset,
    g: usize,
    family: Family,
    design: ExpertDesign,
    config: &FitConfig,
    init: MoeParams,
) -> Result<FitResult> {
    config.validate()?;
    init.validate()?;
    init.check_compatible(data)?;
    if init.g() != g || init.family != family || init.design != design {
        return Err(MoeError::InvalidConfig(format!(
            "initial parameters ({} components, {}, {:?}) do not match the requested model ({g} components, {family}, {design:?})",
            init.g(),
            init.family,
            init.design
        )));
    }
    run_fit(data, config, init, config.seed)
}

// Current parameters with everything the next block update needs.
struct Iterate {
    theta: MoeParams,
    table: gating::ExpertTable,
    gates: Vec<f64>,
    tau: Vec<f64>,
    q: f64,
    floored: bool,
    separated: bool,
}

impl Iterate {
    fn evaluate(ctx: &FitContext, theta: MoeParams) -> Result<Self> {
        let table = gating::ExpertTable::new(ctx.data, &ctx.expert_rows, &theta)?;
        let (mut gates, mut tau) = (Vec::new(), Vec::new());
        let q =
            gating::gated_log_likelihood(ctx.data, &theta.gating, &table, &mut gates, &mut tau)?;
        Ok(Iterate {
            theta,
            table,
            gates,
            tau,
            q,
            floored: false,
            separated: false,
        })
    }
}

// Gating block update; the best evaluated candidate that does not lower Q_n wins.
fn gating_sweep_step(
    ctx: &FitContext,
    config: &FitConfig,
    it: &mut Iterate,
    z: usize,
) -> Result<()> {
    let data = ctx.data;
    let g = it.theta.g();
    let h_inv = ctx.h_inv.as_ref().expect("gating blocks imply g > 1");
    let step = gating::gating_direction(&ctx.gate_rows, h_inv, &it.gates, &it.tau, g, z);
    if step.iter().any(|v| !v.is_finite()) {
        return Err(MoeError::NonFinite("gating update"));
    }
    let newton = if config.accelerate {
        gating::gating_newton_direction(&ctx.gate_rows, &it.gates, &it.tau, g, z)
    } else {
        None
    };
    let base = it.theta.gating.blocks[z].clone();
    let shifted = |mult: f64, dir: &nalgebra::DVector<f64>| -> Vec<f64> {
        base.iter()
            .zip(dir.iter())
            .map(|(a, s)| a + mult * s)
            .collect()
    };
    let mut cand = it.theta.gating.clone();
    let (mut cand_gates, mut cand_tau) = (Vec::new(), Vec::new());
    let mut best_q = f64::NEG_INFINITY;
    let mut best_block: Option<Vec<f64>> = None;
    let (mut best_gates, mut best_tau) = (Vec::new(), Vec::new());
    // returns whether the candidate is the best so far, and its Q_n
    let mut try_candidate = |params: Vec<f64>| -> Result<(bool, f64)> {
        let delta: Vec<f64> = params.iter().zip(&base).map(|(a, b)| a - b).collect();
        cand.blocks[z] = params;
        let q_new = gating::gated_log_likelihood_shift(
            data,
            &ctx.gate_rows,
            &cand,
            &it.gates,
            z,
            &delta,
            &it.table,
            &mut cand_gates,
            &mut cand_tau,
        )?;
        if q_new > best_q {
            best_q = q_new;
            best_block = Some(cand.blocks[z].clone());
            std::mem::swap(&mut best_gates, &mut cand_gates);
            std::mem::swap(&mut best_tau, &mut cand_tau);
            return Ok((true, q_new));
        }
        Ok((false, q_new))
    };
    // An ascending Newton step is taken as is; otherwise the MM step, which
    // cannot lower Q_n, possibly lengthened while that keeps improving.
    let newton_ascends = match &newton {
        Some(dir) => {
            let (_, q_newton) = try_candidate(shifted(1.0, dir))?;
            q_newton > it.q
        }
        None => false,
    };
    if !newton_ascends {
        let (_, q_mm) = try_candidate(shifted(1.0, &step))?;
        debug_assert!(
            q_mm >= it.q - 1e-10 * (1.0 + it.q.abs()),
            "gating update decreased Q_n: {} -> {q_mm}",
            it.q
        );
        if config.accelerate {
            let mut mult = 2.0;
            while mult <= 1024.0 && try_candidate(shifted(mult, &step))?.0 {
                mult *= 2.0;
            }
        }
    }
    // a rounding-level decrease keeps the anchor
    if best_q >= it.q {
        it.theta.gating.blocks[z] = best_block.expect("a candidate was evaluated");
        it.gates = best_gates;
        it.tau = best_tau;
        it.q = best_q;
    }
    Ok(())
}

fn expert_sweep_step(ctx: &FitContext, it: &mut Iterate) -> Result<()> {
    let (n, g) = (ctx.data.n(), it.theta.g());
    let resp = Responsibilities::from_values(n, g, it.tau.clone());
    let update = ctx.expert_update(&it.theta, &resp)?;
    let mut next = it.theta.clone();
    next.experts = update.experts;
    let table = gating::ExpertTable::new(ctx.data, &ctx.expert_rows, &next)?;
    let (mut gates, mut tau) = (Vec::new(), Vec::new());
    let q_new = gating::gated_log_likelihood(ctx.data, &next.gating, &table, &mut gates, &mut tau)?;
    it.separated = update.separated;
    // Ascent guard: keep the previous experts if the update would lower Q_n.
    if q_new >= it.q {
        it.floored = update.floored;
        it.theta = next;
        it.table = table;
        it.gates = gates;
        it.tau = tau;
        it.q = q_new;
    }
    Ok(())
}

// One full cycle over the block partition.
fn sweep(
    ctx: &FitContext,
    config: &FitConfig,
    partition: &BlockPartition,
    it: &mut Iterate,
    cycle: usize,
) -> Result<()> {
    for &block in &partition.blocks {
        let r = match block {
            Block::Gating(z) => gating_sweep_step(ctx, config, it, z),
            Block::Experts => expert_sweep_step(ctx, it),
        };
        r.map_err(|e| MoeError::BlockFailed {
            block: block.to_string(),
            cycle,
            source: Box::new(e),
        })?;
    }
    Ok(())
}

// Squared-extrapolation point `x0 - 2a r + a^2 v` from three successive
// iterates, backtracking the step length toward `x2` until the point is a
// valid parameter with `Q_n` at least that of `x2`.
fn extrapolate(ctx: &FitContext, x0: &[f64], x1: &[f64], it2: &Iterate) -> Option<Iterate> {
    let x2 = it2.theta.to_vector();
    let r: Vec<f64> = x1.iter().zip(x0).map(|(a, b)| a - b).collect();
    let v: Vec<f64> = x2
        .iter()
        .zip(x1)
        .zip(&r)
        .map(|((c, b), r)| c - b - r)
        .collect();
    let (rn, vn) = (norm(&r), norm(&v));
    if !(vn > 0.0) || !(rn > 0.0) {
        return None;
    }
    let mut alpha = -(rn / vn);
    for _ in 0..4 {
        if alpha > -1.0 {
            return None;
        }
        let point: Vec<f64> = x0
            .iter()
            .zip(&r)
            .zip(&v)
            .map(|((x, r), v)| x - 2.0 * alpha * r + alpha * alpha * v)
            .collect();
        if let Some(it) = it2
            .theta
            .with_vector(&point)
            .ok()
            .and_then(|theta| clamp_to_bounds(theta, ctx.floor))
            .and_then(|theta| Iterate::evaluate(ctx, theta).ok())
        {
            if it.q >= it2.q {
                return Some(it);
            }
        }
        alpha = (alpha - 1.0) / 2.0;
    }
    None
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

// Caps separated coefficients; a variance at or below the floor rejects the point.
fn clamp_to_bounds(mut theta: MoeParams, floor: f64) -> Option<MoeParams> {
    for e in theta.experts.iter_mut() {
        match e {
            ExpertParams::Gaussian { variance, .. } => {
                if !(*variance > floor) {
                    return None;
                }
            }
            ExpertParams::Logistic { coef } => coef
                .iter_mut()
                .for_each(|c| *c = c.clamp(-SEPARATION_CAP, SEPARATION_CAP)),
            ExpertParams::Multinomial { coef } => coef
                .iter_mut()
                .flatten()
                .for_each(|c| *c = c.clamp(-SEPARATION_CAP, SEPARATION_CAP)),
            _ => {}
        }
    }
    Some(theta)
}

fn run_fit(data: &Dataset, config: &FitConfig, init: MoeParams, seed: u64) -> Result<FitResult> {
    let ctx = FitContext::new(data, &init, config)?;
    let partition = BlockPartition::new(init.g());
    let mut it = Iterate::evaluate(&ctx, init).map_err(|e| MoeError::BlockFailed {
        block: "initial evaluation".into(),
        cycle: 0,
        source: Box::new(e),
    })?;
    let mut trace = vec![it.q];
    let mut converged = false;
    let mut cycles = 0;
    let small = |q_new: f64, q_old: f64| {
        (q_new - q_old).abs() <= config.rel_tol * q_old.abs().max(f64::MIN_POSITIVE)
    };

    // With acceleration, every third cycle starts from an extrapolated point
    // when that point is at least as good as the plain iterate.
    let mut history: Vec<Vec<f64>> = Vec::new();
    while cycles < config.max_cycles {
        if config.accelerate && history.len() == 2 {
            let x1 = history.pop().expect("two iterates");
            let x0 = history.pop().expect("two iterates");
            if let Some(jump) = extrapolate(&ctx, &x0, &x1, &it) {
                it = Iterate {
                    floored: it.floored,
                    separated: it.separated,
                    ..jump
                };
            }
        }
        cycles += 1;
        let q_start = it.q;
        if config.accelerate {
            history.push(it.theta.to_vector());
        }
        sweep(&ctx, config, &partition, &mut it, cycles)?;
        trace.push(it.q);
        if small(it.q, q_start) {
            converged = true;
            break;
        }
    }

    let degenerate = it.floored || theta_on_floor(&it.theta, ctx.floor);
    Ok(FitResult {
        theta_hat: it.theta,
        q_trace: trace,
        cycles_used: cycles,
        converged,
        degenerate,
        separated: it.separated,
        seed_used: seed,
    })
}

fn theta_on_floor(theta: &MoeParams, floor: f64) -> bool {
    theta.experts.iter().any(|e| match e {
        ExpertParams::Gaussian { variance, .. } => *variance <= floor,
        _ => false,
    })
}

/// Seed of start `index` derived from `base` (SplitMix64 of a counter).
///
/// Start `i` gets the same seed whatever the total number of starts, so seed
/// sets are nested.
pub fn derive_seed(base: u64, index: usize) -> u64 {
    let mut z = base.wrapping_add((index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Fits from `config.n_starts` seeded initializations and keeps the best
/// (see [`best_start`]).
pub fn multi_start_fit(
    data: &Dataset,
    g: usize,
    family: Family,
    design: ExpertDesign,
    config: &FitConfig,
) -> Result<FitResult> {
    best_start(fit_starts(data, g, family, design, config)?)
}

/// Outcome of every start, in start order. Start `i` is initialized with
/// seed `derive_seed(config.seed, i)`.
pub fn fit_starts(
    data: &Dataset,
    g: usize,
    family: Family,
    design: ExpertDesign,
    config: &FitConfig,
) -> Result<Vec<Result<FitResult>>> {
    config.validate()?;
    let run = |i: usize| -> Result<FitResult> {
        let seed = derive_seed(config.seed, i);
        let init = initialize(data, g, family, design, config, seed)?;
        run_fit(data, config, init, seed)
    };
    Ok(with_threads(config.threads, || {
        if config.threads > 1 {
            (0..config.n_starts).into_par_iter().map(run).collect()
        } else {
            (0..config.n_starts).map(run).collect()
        }
    }))
}

/// Winner among start outcomes: the largest final `Q_n` among non-degenerate
/// fits (degenerate fits are used only when every start is degenerate); ties
/// go to the lowest start index, so the merge is independent of thread count.
pub fn best_start(results: Vec<Result<FitResult>>) -> Result<FitResult> {
    best_of(results)
}

fn best_of(results: Vec<Result<FitResult>>) -> Result<FitResult> {
    let mut best: Option<FitResult> = None;
    let mut failures = Vec::new();
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(fit) => {
                let better = match &best {
                    None => true,
                    Some(b) => match (b.degenerate, fit.degenerate) {
                        (true, false) => true,
                        (false, true) => false,
                        _ => fit.final_q() > b.final_q(),
                    },
                };
                if better {
                    best = Some(fit);
                }
            }
            Err(e) => failures.push(format!("start {}: {e}", i + 1)),
        }
    }
    best.ok_or(MoeError::AllStartsFailed(failures))
}

/// Runs `f` inside a rayon pool of the requested size (inline when `threads <= 1`).
pub(crate) fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> T {
    if threads <= 1 {
        return f();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(pool) => pool.install(f),
        Err(_) => f(),
    }
}
