use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::experts::{gaussian_fit_rows, glm_fit_rows, DesignMatrix, CYCLE_GAIN};
use super::FitConfig;
use crate::error::{MoeError, Result};
use crate::model::{
    Dataset, ExpertDesign, ExpertParams, Family, GatingParams, MoeParams, ResponseKind,
};

const LLOYD_ITERATIONS: usize = 10;
const LLOYD_RESTARTS: usize = 5;
const REFINE_ROUNDS: usize = 5;

/// Seeded starting point for a `g`-component fit.
///
/// Rows are split into `g` groups by a seeded hard partition: k-means on
/// standardized covariates (plus the response when it is numeric), seeded by
/// k-means++ and keeping the best of a few restarts, then sharpened by a few
/// rounds of reassigning each row to its most likely expert.
/// If a group ends up too small or its expert solve fails, the partition
/// falls back to a shuffled equal split. Each expert is then fitted on its
/// group with hard 0/1 weights; the gating starts at zero (uniform gates).
/// `g = 1` ignores the seed and returns the global fit.
pub fn initialize(
    data: &Dataset,
    g: usize,
    family: Family,
    design: ExpertDesign,
    config: &FitConfig,
    seed: u64,
) -> Result<MoeParams> {
    if g == 0 {
        return Err(MoeError::InvalidConfig("g must be at least 1".into()));
    }
    if data.kind() != family.response_kind() {
        return Err(MoeError::KindMismatch {
            response: data.kind().to_string(),
            family: family.to_string(),
        });
    }
    design.validate(data.p())?;
    let n = data.n();
    let d = design.width(data.p());
    let needed = g * (d + 1);
    if n < needed {
        return Err(MoeError::InfeasibleInit { n, g, needed });
    }
    let rows = DesignMatrix::build(data, design);
    let floor = config.variance_floor(data);

    if g == 1 {
        let expert = fit_group(
            data,
            &rows,
            family,
            &vec![1.0; n],
            floor,
            config.irls_max_inner,
        )?;
        return MoeParams::new(
            family,
            design,
            GatingParams::zeros(1, data.p()),
            vec![expert],
        );
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let min_size = d + 1;
    let clustered = nearest_seed_partition(data, g, &mut rng);
    let experts = match clustered
        .filter(|labels| group_sizes(labels, g).iter().all(|&s| s >= min_size))
        .map(|labels| {
            fit_groups(
                data,
                &rows,
                family,
                &labels,
                g,
                floor,
                config.irls_max_inner,
            )
        }) {
        Some(Ok(experts)) => refine(
            data,
            &rows,
            family,
            experts,
            min_size,
            floor,
            config.irls_max_inner,
        ),
        _ => {
            let labels = balanced_partition(n, g, &mut rng);
            fit_groups(
                data,
                &rows,
                family,
                &labels,
                g,
                floor,
                config.irls_max_inner,
            )?
        }
    };
    MoeParams::new(family, design, GatingParams::zeros(g, data.p()), experts)
}

// Hard reassignment rounds: each row joins the expert with the highest
// density, then the experts are refitted. Stops early when labels settle or
// a group would become too small to fit.
fn refine(
    data: &Dataset,
    rows: &DesignMatrix,
    family: Family,
    mut experts: Vec<ExpertParams>,
    min_size: usize,
    floor: f64,
    max_inner: usize,
) -> Vec<ExpertParams> {
    let g = experts.len();
    let mut labels: Vec<usize> = Vec::new();
    for _ in 0..REFINE_ROUNDS {
        let next: Option<Vec<usize>> = (0..data.n())
            .map(|i| {
                let mut best = (0, f64::NEG_INFINITY);
                for (z, e) in experts.iter().enumerate() {
                    let l = e.log_density_row(data.y(i), rows.row(i)).ok()?;
                    if l > best.1 {
                        best = (z, l);
                    }
                }
                Some(best.0)
            })
            .collect();
        let Some(next) = next else { break };
        if next == labels || group_sizes(&next, g).iter().any(|&s| s < min_size) {
            break;
        }
        match fit_groups(data, rows, family, &next, g, floor, max_inner) {
            Ok(refitted) => experts = refitted,
            Err(_) => break,
        }
        labels = next;
    }
    experts
}

fn fit_groups(
    data: &Dataset,
    rows: &DesignMatrix,
    family: Family,
    labels: &[usize],
    g: usize,
    floor: f64,
    max_inner: usize,
) -> Result<Vec<ExpertParams>> {
    (0..g)
        .map(|z| {
            let w: Vec<f64> = labels
                .iter()
                .map(|&l| if l == z { 1.0 } else { 0.0 })
                .collect();
            fit_group(data, rows, family, &w, floor, max_inner)
        })
        .collect()
}

fn fit_group(
    data: &Dataset,
    rows: &DesignMatrix,
    family: Family,
    weights: &[f64],
    floor: f64,
    max_inner: usize,
) -> Result<ExpertParams> {
    match family {
        Family::Gaussian => {
            let fit = gaussian_fit_rows(data, rows, weights, floor, "initial group Gram matrix")?;
            Ok(ExpertParams::Gaussian {
                coef: fit.coef,
                variance: fit.variance,
            })
        }
        _ => {
            let start = ExpertParams::zeros(family, rows.width - 1);
            Ok(glm_fit_rows(data, rows, weights, &start, max_inner, CYCLE_GAIN)?.expert)
        }
    }
}

fn group_sizes(labels: &[usize], g: usize) -> Vec<usize> {
    let mut s = vec![0; g];
    for &l in labels {
        s[l] += 1;
    }
    s
}

fn balanced_partition(n: usize, g: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let mut labels = vec![0; n];
    for (rank, &i) in order.iter().enumerate() {
        labels[i] = rank * g / n;
    }
    labels
}

fn standardized_features(data: &Dataset) -> (usize, Vec<f64>) {
    let n = data.n();
    let mut cols: Vec<Vec<f64>> = (0..data.p())
        .map(|j| (0..n).map(|i| data.x(i)[j]).collect())
        .collect();
    if matches!(data.kind(), ResponseKind::Real | ResponseKind::Count) {
        cols.push(data.responses().iter().map(|r| r.as_f64()).collect());
    }
    let mut kept = Vec::new();
    for c in cols {
        let mean = c.iter().sum::<f64>() / n as f64;
        let sd = (c.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
        if sd > 0.0 {
            kept.push(c.into_iter().map(|v| (v - mean) / sd).collect::<Vec<f64>>());
        }
    }
    let f = kept.len();
    let mut flat = Vec::with_capacity(n * f);
    for i in 0..n {
        for c in &kept {
            flat.push(c[i]);
        }
    }
    (f, flat)
}

fn nearest_seed_partition(data: &Dataset, g: usize, rng: &mut ChaCha8Rng) -> Option<Vec<usize>> {
    let (f, feats) = standardized_features(data);
    if f == 0 {
        return None;
    }
    let mut best: Option<(f64, Vec<usize>)> = None;
    for _ in 0..LLOYD_RESTARTS {
        let (ss, labels) = lloyd(&feats, f, g, rng);
        if best.as_ref().is_none_or(|(b, _)| ss < *b) {
            best = Some((ss, labels));
        }
    }
    best.map(|(_, labels)| labels)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

// k-means++ seeding followed by Lloyd passes; returns the within-group sum
// of squares and the labels.
fn lloyd(feats: &[f64], f: usize, g: usize, rng: &mut ChaCha8Rng) -> (f64, Vec<usize>) {
    let n = feats.len() / f;
    let row = |i: usize| &feats[i * f..(i + 1) * f];
    let mut centers: Vec<Vec<f64>> = vec![row(rng.random_range(0..n)).to_vec()];
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(row(i), &centers[0])).collect();
    while centers.len() < g {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, d) in d2.iter().enumerate() {
                if u < *d {
                    pick = i;
                    break;
                }
                u -= d;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        centers.push(row(next).to_vec());
        let c = centers.last().expect("just pushed");
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(row(i), c));
        }
    }
    let mut labels = vec![usize::MAX; n];
    let mut ss = 0.0;
    for _ in 0..LLOYD_ITERATIONS {
        let mut changed = false;
        ss = 0.0;
        for (i, label) in labels.iter_mut().enumerate() {
            let r = row(i);
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (z, c) in centers.iter().enumerate() {
                let dist = sq_dist(r, c);
                if dist < best_d {
                    best_d = dist;
                    best = z;
                }
            }
            ss += best_d;
            if *label != best {
                *label = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; f]; g];
        let mut counts = vec![0usize; g];
        for (i, &l) in labels.iter().enumerate() {
            counts[l] += 1;
            for (s, v) in sums[l].iter_mut().zip(row(i)) {
                *s += v;
            }
        }
        for z in 0..g {
            if counts[z] > 0 {
                centers[z] = sums[z].iter().map(|s| s / counts[z] as f64).collect();
            }
        }
    }
    (ss, labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Response;

    fn small_data() -> Dataset {
        let rows: Vec<Vec<f64>> = (0..12).map(|i| vec![i as f64]).collect();
        let y = (0..12)
            .map(|i| Response::Real((i % 3) as f64 + 0.1 * i as f64))
            .collect();
        Dataset::new(ResponseKind::Real, rows, y).unwrap()
    }

    #[test]
    fn too_few_rows_is_infeasible() {
        let data = small_data();
        let err = initialize(
            &data,
            7,
            Family::Gaussian,
            ExpertDesign::Linear,
            &FitConfig::default(),
            1,
        )
        .unwrap_err();
        assert_eq!(
            err,
            MoeError::InfeasibleInit {
                n: 12,
                g: 7,
                needed: 14
            }
        );
    }

    #[test]
    fn single_component_ignores_seed() {
        let data = small_data();
        let cfg = FitConfig::default();
        let a = initialize(&data, 1, Family::Gaussian, ExpertDesign::Linear, &cfg, 1).unwrap();
        let b = initialize(&data, 1, Family::Gaussian, ExpertDesign::Linear, &cfg, 99).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn seeded_init_is_reproducible() {
        let data = small_data();
        let cfg = FitConfig::default();
        let a = initialize(&data, 3, Family::Gaussian, ExpertDesign::Linear, &cfg, 5).unwrap();
        let b = initialize(&data, 3, Family::Gaussian, ExpertDesign::Linear, &cfg, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.gating, GatingParams::zeros(3, 1));
    }

    #[test]
    fn balanced_partition_is_nonempty() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let labels = balanced_partition(10, 3, &mut rng);
        let sizes = group_sizes(&labels, 3);
        assert_eq!(sizes.iter().sum::<usize>(), 10);
        assert!(sizes.iter().all(|&s| s >= 3));
    }
}
