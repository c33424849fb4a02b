//! Seeded synthetic data generators.
//!
//! All generators draw from a single `ChaCha8Rng` stream seeded with
//! `seed_from_u64`, so datasets are byte-identical across platforms for a
//! given seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{MoeError, Result};
use crate::model::{gate_probs, Dataset, ExpertParams, MoeParams, Response, ResponseKind};
use crate::numeric::{dot, sigmoid};

pub type GeneratorRng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> GeneratorRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Class of a point in the three-class problem: 2 inside the radius-2 disc,
/// 3 inside `[-4,-2]x[2,4]` or `[2,4]x[2,4]`, 1 elsewhere. Boundaries belong
/// to the special regions.
pub fn three_class_label(x1: f64, x2: f64) -> usize {
    if x1 * x1 + x2 * x2 <= 4.0 {
        2
    } else if (2.0..=4.0).contains(&x2)
        && ((-4.0..=-2.0).contains(&x1) || (2.0..=4.0).contains(&x1))
    {
        3
    } else {
        1
    }
}

/// Expected class proportions under uniform covariates on `[-5,5]^2`.
pub fn three_class_proportions() -> [f64; 3] {
    let disc = 4.0 * std::f64::consts::PI / 100.0;
    let squares = 8.0 / 100.0;
    [1.0 - disc - squares, disc, squares]
}

/// `n` points with covariates uniform on `[-5,5]^2` and the three-class label.
pub fn gen_three_class(n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(MoeError::InvalidConfig("n must be at least 1".into()));
    }
    let mut rng = rng_from_seed(seed);
    let mut x = Vec::with_capacity(2 * n);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let x1 = rng.random::<f64>() * 10.0 - 5.0;
        let x2 = rng.random::<f64>() * 10.0 - 5.0;
        x.push(x1);
        x.push(x2);
        y.push(Response::Category(three_class_label(x1, x2)));
    }
    Dataset::from_flat(ResponseKind::Categorical { k: 3 }, 2, x, y)
}

/// Distribution of the covariates in [`gen_moe_sample`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CovariateSampler {
    /// Independent uniforms on `[low, high]` in each of `p` coordinates.
    Uniform { p: usize, low: f64, high: f64 },
    /// Independent standard normals.
    Normal { p: usize },
    /// Every row has the same covariates.
    Fixed { x: Vec<f64> },
}

impl CovariateSampler {
    pub fn p(&self) -> usize {
        match self {
            CovariateSampler::Uniform { p, .. } | CovariateSampler::Normal { p } => *p,
            CovariateSampler::Fixed { x } => x.len(),
        }
    }

    fn sample(&self, rng: &mut GeneratorRng) -> Vec<f64> {
        match self {
            CovariateSampler::Uniform { p, low, high } => (0..*p)
                .map(|_| low + (high - low) * rng.random::<f64>())
                .collect(),
            CovariateSampler::Normal { p } => (0..*p).map(|_| rng.sample(StandardNormal)).collect(),
            CovariateSampler::Fixed { x } => x.clone(),
        }
    }
}

/// A sample from the hierarchical construction, with the latent labels kept.
#[derive(Debug, Clone, PartialEq)]
pub struct MoeSample {
    pub data: Dataset,
    /// Generating component of each row (1-based).
    pub z: Vec<usize>,
}

fn draw_categorical(probs: &[f64], rng: &mut GeneratorRng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

fn draw_response(e: &ExpertParams, row: &[f64], rng: &mut GeneratorRng) -> Result<Response> {
    Ok(match e {
        ExpertParams::Gaussian { coef, variance } => {
            let eps: f64 = rng.sample(StandardNormal);
            Response::Real(dot(coef, row) + variance.sqrt() * eps)
        }
        ExpertParams::Logistic { coef } => {
            let p = sigmoid(dot(coef, row));
            Response::Binary((rng.random::<f64>() < p) as u8)
        }
        ExpertParams::Poisson { coef } => {
            let rate = dot(coef, row).exp();
            let dist = Poisson::new(rate)
                .map_err(|e| MoeError::InvalidConfig(format!("Poisson rate {rate}: {e}")))?;
            Response::Count(dist.sample(rng) as u64)
        }
        ExpertParams::Multinomial { .. } => {
            let probs: Vec<f64> = e
                .class_log_probs(row)
                .expect("multinomial expert")
                .into_iter()
                .map(f64::exp)
                .collect();
            Response::Category(draw_categorical(&probs, rng) + 1)
        }
    })
}

/// Draws `x`, then `Z ~ Gate(x)`, then `y ~ Expert_Z(. | x)` for each row.
pub fn gen_moe_sample(
    theta: &MoeParams,
    sampler: &CovariateSampler,
    n: usize,
    seed: u64,
) -> Result<MoeSample> {
    theta.validate()?;
    if n == 0 {
        return Err(MoeError::InvalidConfig("n must be at least 1".into()));
    }
    if sampler.p() != theta.p() {
        return Err(MoeError::DimensionMismatch {
            what: "covariate sampler",
            expected: theta.p(),
            found: sampler.p(),
        });
    }
    let mut rng = rng_from_seed(seed);
    let p = theta.p();
    let mut xs = Vec::with_capacity(n * p);
    let mut ys = Vec::with_capacity(n);
    let mut zs = Vec::with_capacity(n);
    for _ in 0..n {
        let x = sampler.sample(&mut rng);
        let gates = gate_probs(&x, &theta.gating)?;
        let z = draw_categorical(&gates, &mut rng);
        let row = theta.design.row(&x);
        ys.push(draw_response(&theta.experts[z], &row, &mut rng)?);
        xs.extend_from_slice(&x);
        zs.push(z + 1);
    }
    Ok(MoeSample {
        data: Dataset::from_flat(theta.family.response_kind(), p, xs, ys)?,
        z: zs,
    })
}

/// One regime of a switch signal: `y = c0 + c1 t + c2 t^2 + noise_sd * N(0,1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Regime {
    pub coef: [f64; 3],
    pub noise_sd: f64,
}

/// Piecewise-quadratic signal on equally spaced times in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalSpec {
    pub n: usize,
    /// Strictly increasing regime boundaries in `(0, 1)`.
    pub breakpoints: Vec<f64>,
    /// One more regime than breakpoints.
    pub regimes: Vec<Regime>,
    pub seed: u64,
}

const fn regime(c0: f64, c1: f64, c2: f64, noise_sd: f64) -> Regime {
    Regime {
        coef: [c0, c1, c2],
        noise_sd,
    }
}

impl Default for SignalSpec {
    /// Eight regimes of flat and curved segments with uneven noise, 550 points.
    fn default() -> Self {
        SignalSpec {
            n: 550,
            breakpoints: vec![0.06, 0.13, 0.25, 0.38, 0.52, 0.66, 0.80],
            regimes: vec![
                regime(250.0, 0.0, 0.0, 5.0),
                regime(1000.0, -2000.0, 0.0, 15.0),
                regime(600.0, 0.0, 0.0, 10.0),
                regime(362.5, -500.0, 1000.0, 10.0),
                regime(500.0, 0.0, 0.0, 8.0),
                regime(450.0, 200.0, 0.0, 12.0),
                regime(380.0, 0.0, 0.0, 6.0),
                regime(250.0, 0.0, 0.0, 5.0),
            ],
            seed: 0,
        }
    }
}

impl SignalSpec {
    /// Four regimes with moderate noise and clear level changes at 0.25, 0.5, 0.75.
    pub fn four_regime(seed: u64) -> Self {
        SignalSpec {
            n: 550,
            breakpoints: vec![0.25, 0.5, 0.75],
            regimes: vec![
                regime(250.0, 0.0, 0.0, 10.0),
                regime(700.0, -400.0, 0.0, 15.0),
                regime(900.0, -2400.0, 2400.0, 12.0),
                regime(120.0, 40.0, 0.0, 10.0),
            ],
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(MoeError::InvalidConfig(
                "signal needs at least 2 points".into(),
            ));
        }
        if self.regimes.len() != self.breakpoints.len() + 1 {
            return Err(MoeError::InvalidConfig(format!(
                "{} breakpoints need {} regimes, got {}",
                self.breakpoints.len(),
                self.breakpoints.len() + 1,
                self.regimes.len()
            )));
        }
        if self.breakpoints.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return Err(MoeError::InvalidConfig(
                "breakpoints must lie in (0, 1)".into(),
            ));
        }
        if self.breakpoints.windows(2).any(|w| w[1] <= w[0]) {
            return Err(MoeError::InvalidConfig(
                "breakpoints must be strictly increasing".into(),
            ));
        }
        for r in &self.regimes {
            if !(r.noise_sd >= 0.0) || r.coef.iter().any(|c| !c.is_finite()) {
                return Err(MoeError::InvalidConfig(
                    "regime noise must be >= 0 and coefficients finite".into(),
                ));
            }
        }
        Ok(())
    }

    /// Regime index (0-based) of time `t`.
    pub fn regime_of(&self, t: f64) -> usize {
        self.breakpoints.iter().filter(|&&b| t >= b).count()
    }
}

/// A generated signal with the true regime (1-based) of every point.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalSample {
    pub data: Dataset,
    pub regime: Vec<usize>,
}

/// `t_i = (i-1)/(n-1)`, `y_i` = regime quadratic at `t_i` plus that regime's noise.
pub fn gen_switch_signal(spec: &SignalSpec) -> Result<SignalSample> {
    spec.validate()?;
    let mut rng = rng_from_seed(spec.seed);
    let mut xs = Vec::with_capacity(spec.n);
    let mut ys = Vec::with_capacity(spec.n);
    let mut regimes = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let t = i as f64 / (spec.n - 1) as f64;
        let r = spec.regime_of(t);
        let reg = &spec.regimes[r];
        let eps: f64 = rng.sample(StandardNormal);
        let y = reg.coef[0] + reg.coef[1] * t + reg.coef[2] * t * t + reg.noise_sd * eps;
        xs.push(t);
        ys.push(Response::Real(y));
        regimes.push(r + 1);
    }
    Ok(SignalSample {
        data: Dataset::from_flat(ResponseKind::Real, 1, xs, ys)?,
        regime: regimes,
    })
}
