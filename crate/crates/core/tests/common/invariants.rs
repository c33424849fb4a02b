//! Model-core and generator invariants, each returning the worst discrepancy
//! seen so callers can compare it with their tolerance.

use moe_core::datagen::{
    gen_moe_sample, gen_switch_signal, gen_three_class, three_class_proportions, CovariateSampler,
    SignalSpec,
};
use moe_core::model::{
    expert_log_density, gate_probs, log_quasi_likelihood, moe_log_density, responsibilities,
};
use moe_core::{Dataset, ExpertDesign, ExpertParams, Family, GatingParams, MoeParams, Response};
use rand::Rng;

use super::{oracle_log_density, random_response, random_theta, random_x, rng, sample, FAMILIES};

/// Worst deviation from the simplex (sum and positivity) of gates and
/// responsibility rows for a random model and dataset. Negative entries or
/// zero gates count as a deviation of 1.
pub fn simplex_deviation(seed: u64) -> f64 {
    let mut r = rng(seed);
    let family = FAMILIES[r.random_range(0..FAMILIES.len())];
    let g = r.random_range(1..=5);
    let p = r.random_range(0..=3);
    let theta = random_theta(&mut r, family, g, p, ExpertDesign::Linear, 2.0);
    let data = sample(&theta, 30, seed);
    let mut worst: f64 = 0.0;
    for i in 0..data.n() {
        let gates = gate_probs(data.x(i), &theta.gating).unwrap();
        worst = worst.max((gates.iter().sum::<f64>() - 1.0).abs());
        if gates.iter().any(|&v| !(v > 0.0)) {
            worst = 1.0;
        }
    }
    let tau = responsibilities(&data, &theta).unwrap();
    for i in 0..data.n() {
        let row = tau.row(i);
        worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
        if row.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            worst = 1.0;
        }
    }
    worst
}

/// Gates at logits of magnitude `1e4` stay finite and sum to one.
pub fn extreme_gate_deviation() -> f64 {
    let gating = GatingParams {
        p: 1,
        blocks: vec![vec![0.0, 1e4], vec![0.0, -1e4]],
    };
    let mut worst: f64 = 0.0;
    for x in [-1.0, -1e-3, 0.0, 1e-3, 1.0] {
        let gates = gate_probs(&[x], &gating).unwrap();
        if gates.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return f64::INFINITY;
        }
        worst = worst.max((gates.iter().sum::<f64>() - 1.0).abs());
    }
    worst
}

/// `|moe_log_density - expert_log_density|` for a random one-component model.
pub fn single_component_gap(seed: u64) -> f64 {
    let mut r = rng(seed);
    let family = FAMILIES[r.random_range(0..FAMILIES.len())];
    let p = r.random_range(0..=3);
    let theta = random_theta(&mut r, family, 1, p, ExpertDesign::Linear, 1.0);
    let x = random_x(&mut r, p);
    let y = random_response(&mut r, family);
    let moe = moe_log_density(&y, &x, &theta).unwrap();
    let expert = expert_log_density(&y, &x, &theta.experts[0], theta.design).unwrap();
    (moe - expert).abs()
}

/// Swaps two components and re-expresses the gating relative to the new last
/// component, by hand.
pub fn swap_components(theta: &MoeParams, a: usize, b: usize) -> MoeParams {
    let g = theta.g();
    let mut full: Vec<Vec<f64>> = theta.gating.blocks.clone();
    full.push(vec![0.0; theta.p() + 1]);
    full.swap(a, b);
    let reference = full[g - 1].clone();
    let blocks = full[..g - 1]
        .iter()
        .map(|blk| blk.iter().zip(&reference).map(|(u, v)| u - v).collect())
        .collect();
    let mut experts = theta.experts.clone();
    experts.swap(a, b);
    MoeParams::new(
        theta.family,
        theta.design,
        GatingParams {
            p: theta.p(),
            blocks,
        },
        experts,
    )
    .unwrap()
}

/// Change of `moe_log_density` under a random swap of two components.
pub fn permutation_gap(seed: u64) -> f64 {
    let mut r = rng(seed);
    let family = FAMILIES[r.random_range(0..FAMILIES.len())];
    let g = r.random_range(2..=5);
    let p = r.random_range(0..=3);
    let theta = random_theta(&mut r, family, g, p, ExpertDesign::Linear, 1.0);
    let a = r.random_range(0..g);
    let b = (a + r.random_range(1..g)) % g;
    let swapped = swap_components(&theta, a, b);
    let x = random_x(&mut r, p);
    let y = random_response(&mut r, family);
    (moe_log_density(&y, &x, &theta).unwrap() - moe_log_density(&y, &x, &swapped).unwrap()).abs()
}

/// `|integral - 1|` of a random Gaussian expert density by composite Simpson
/// on `[mu - 10 sd, mu + 10 sd]`.
pub fn gaussian_mass_gap(seed: u64) -> f64 {
    let mut r = rng(seed);
    let p = r.random_range(0..=2);
    let expert = super::random_expert(&mut r, Family::Gaussian, p, 1.0);
    let x = random_x(&mut r, p);
    let ExpertParams::Gaussian { coef, variance } = &expert else {
        unreachable!()
    };
    let mu = coef[0] + coef[1..].iter().zip(&x).map(|(c, v)| c * v).sum::<f64>();
    let sd = variance.sqrt();
    let (lo, hi) = (mu - 10.0 * sd, mu + 10.0 * sd);
    let m = 4000;
    let h = (hi - lo) / m as f64;
    let f = |y: f64| {
        expert_log_density(&Response::Real(y), &x, &expert, ExpertDesign::Linear)
            .unwrap()
            .exp()
    };
    let mut s = f(lo) + f(hi);
    for k in 1..m {
        s += if k % 2 == 1 { 4.0 } else { 2.0 } * f(lo + k as f64 * h);
    }
    (s * h / 3.0 - 1.0).abs()
}

/// `|sum of masses - 1|` for a random discrete expert; Poisson is truncated
/// at `mean + 40 sqrt(mean)`.
pub fn discrete_mass_gap(seed: u64, family: Family) -> f64 {
    let mut r = rng(seed);
    let p = r.random_range(0..=2);
    let expert = super::random_expert(&mut r, family, p, 1.0);
    let x = random_x(&mut r, p);
    let mass = |y: Response| {
        expert_log_density(&y, &x, &expert, ExpertDesign::Linear)
            .unwrap()
            .exp()
    };
    let total: f64 = match family {
        Family::Logistic => mass(Response::Binary(0)) + mass(Response::Binary(1)),
        Family::Multinomial { k } => (1..=k).map(|l| mass(Response::Category(l))).sum(),
        Family::Poisson => {
            let ExpertParams::Poisson { coef } = &expert else {
                unreachable!()
            };
            let mean = (coef[0] + coef[1..].iter().zip(&x).map(|(c, v)| c * v).sum::<f64>()).exp();
            let top = (mean + 40.0 * mean.sqrt()).ceil() as u64;
            (0..=top).map(|k| mass(Response::Count(k))).sum()
        }
        Family::Gaussian => panic!("continuous family"),
    };
    (total - 1.0).abs()
}

/// `|Q_n - per-row oracle sum|` on a random 10-row dataset.
pub fn likelihood_oracle_gap(seed: u64) -> f64 {
    let mut r = rng(seed);
    let family = FAMILIES[r.random_range(0..FAMILIES.len())];
    let g = r.random_range(1..=4);
    let p = r.random_range(1..=3);
    let theta = random_theta(&mut r, family, g, p, ExpertDesign::Linear, 1.0);
    let data = sample(&theta, 10, seed);
    let q = log_quasi_likelihood(&data, &theta).unwrap();
    let oracle: f64 = data
        .rows()
        .map(|(x, y)| oracle_log_density(y, x, &theta))
        .sum();
    (q - oracle).abs()
}

/// Largest deviation of the three-class label frequencies from the area
/// proportions.
pub fn three_class_proportion_gap(n: usize, seed: u64) -> f64 {
    let data = gen_three_class(n, seed).unwrap();
    let mut counts = [0usize; 3];
    for y in data.responses() {
        let Response::Category(l) = y else {
            unreachable!()
        };
        counts[l - 1] += 1;
    }
    counts
        .iter()
        .zip(three_class_proportions())
        .map(|(&c, p)| (c as f64 / n as f64 - p).abs())
        .fold(0.0, f64::max)
}

/// Kolmogorov-Smirnov distance of each three-class coordinate to Uniform[-5, 5].
pub fn three_class_ks(n: usize, seed: u64) -> [f64; 2] {
    let data = gen_three_class(n, seed).unwrap();
    let mut out = [0.0; 2];
    for (j, slot) in out.iter_mut().enumerate() {
        let mut v: Vec<f64> = (0..n).map(|i| data.x(i)[j]).collect();
        v.sort_by(f64::total_cmp);
        let mut d: f64 = 0.0;
        for (i, x) in v.iter().enumerate() {
            let cdf = (x + 5.0) / 10.0;
            d = d
                .max((cdf - i as f64 / n as f64).abs())
                .max(((i + 1) as f64 / n as f64 - cdf).abs());
        }
        *slot = d;
    }
    out
}

/// Every generator returns identical output for the same seed.
pub fn generators_are_deterministic(seed: u64) -> bool {
    let theta = random_theta(
        &mut rng(seed),
        Family::Poisson,
        3,
        2,
        ExpertDesign::Linear,
        1.0,
    );
    let sampler = CovariateSampler::Uniform {
        p: 2,
        low: -1.0,
        high: 1.0,
    };
    let spec = SignalSpec {
        seed,
        ..SignalSpec::default()
    };
    gen_three_class(500, seed).unwrap() == gen_three_class(500, seed).unwrap()
        && gen_moe_sample(&theta, &sampler, 500, seed).unwrap()
            == gen_moe_sample(&theta, &sampler, 500, seed).unwrap()
        && gen_switch_signal(&spec).unwrap() == gen_switch_signal(&spec).unwrap()
}

/// Sample mean and variance of a standard-normal `g = 1` Gaussian model.
pub fn standard_normal_moments(n: usize, seed: u64) -> (f64, f64) {
    let theta = MoeParams::new(
        Family::Gaussian,
        ExpertDesign::Linear,
        GatingParams::zeros(1, 1),
        vec![ExpertParams::Gaussian {
            coef: vec![0.0, 0.0],
            variance: 1.0,
        }],
    )
    .unwrap();
    let data = gen_moe_sample(&theta, &CovariateSampler::Normal { p: 1 }, n, seed)
        .unwrap()
        .data;
    let ys: Vec<f64> = data.responses().iter().map(Response::as_f64).collect();
    let mean = ys.iter().sum::<f64>() / n as f64;
    let var = ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
    (mean, var)
}

/// Largest `|freq - gate| / se` of the latent labels at a fixed covariate point.
pub fn latent_frequency_z_score(n: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let theta = random_theta(&mut r, Family::Gaussian, 3, 2, ExpertDesign::Linear, 0.8);
    let x = random_x(&mut r, 2);
    let gates = gate_probs(&x, &theta.gating).unwrap();
    let s = gen_moe_sample(&theta, &CovariateSampler::Fixed { x }, n, seed).unwrap();
    (0..3)
        .map(|z| {
            let freq = s.z.iter().filter(|&&l| l == z + 1).count() as f64 / n as f64;
            let se = (gates[z] * (1.0 - gates[z]) / n as f64).sqrt();
            (freq - gates[z]).abs() / se
        })
        .fold(0.0, f64::max)
}

/// Dataset rows generated by component `z` (1-based).
pub fn rows_of(data: &Dataset, labels: &[usize], z: usize) -> Dataset {
    let idx: Vec<usize> = (0..data.n()).filter(|&i| labels[i] == z).collect();
    data.select(&idx)
}
