//! Label-skewed data partitioning and class-coupled participation frequencies.

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::numeric::{dot, log_sum_exp, TOLERANCES};
use crate::rng::rng_from_seed;

/// Lowest participation frequency any node is assigned.
pub const FREQUENCY_FLOOR: f64 = 0.02;

/// Redraws allowed when a partition leaves some node without samples.
pub const PARTITION_RETRIES: usize = 100;

/// Per-node probability vector over classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassDistribution(Vec<f64>);

impl ClassDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.iter().any(|p| !(*p >= 0.0)) {
            return Err(Error::invalid("class distribution has a negative or NaN entry"));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > TOLERANCES.distribution_sum {
            return Err(Error::invalid(format!("class distribution sums to {sum}")));
        }
        Ok(Self(probs))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Draws from a symmetric Dirichlet(`alpha`) of dimension `dim`.
///
/// Gamma variates are formed in log space as `ln G(alpha + 1) + ln(U) / alpha`,
/// which keeps very small concentrations from underflowing to an all-zero draw.
pub fn sample_dirichlet<R: Rng + ?Sized>(alpha: f64, dim: usize, rng: &mut R) -> Result<Vec<f64>> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::invalid(format!("Dirichlet concentration must be positive, got {alpha}")));
    }
    if dim == 0 {
        return Err(Error::invalid("Dirichlet dimension must be positive"));
    }
    let gamma = Gamma::new(alpha + 1.0, 1.0).map_err(|e| Error::invalid(e.to_string()))?;
    let logs: Vec<f64> = (0..dim)
        .map(|_| {
            let g: f64 = gamma.sample(rng);
            let u: f64 = rng.random::<f64>();
            // random() is in [0, 1); map 0 to the smallest positive value
            g.ln() + u.max(f64::MIN_POSITIVE).ln() / alpha
        })
        .collect();
    let lse = log_sum_exp(&logs);
    Ok(logs.iter().map(|l| (l - lse).exp()).collect())
}

/// Result of splitting a dataset across nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataPartition {
    /// Row indices into the source dataset, one list per node.
    pub shards: Vec<Vec<usize>>,
    /// Empirical class proportions of each shard.
    pub distributions: Vec<ClassDistribution>,
    /// Per-node class counts.
    pub class_counts: Vec<Vec<usize>>,
    /// Number of redraws needed to give every node at least one sample.
    pub redraws: usize,
}

/// Splits `dataset` across `num_nodes` nodes with Dirichlet(`alpha`) label skew.
///
/// Each node draws a class-preference row; every class is then divided among
/// nodes in proportion to their preference for it. Integer parts are assigned
/// first and the leftover samples of a class go one each to the nodes with the
/// largest fractional shares, so every sample lands on exactly one node.
pub fn dirichlet_partition(
    dataset: &Dataset,
    num_nodes: usize,
    alpha: f64,
    seed: u64,
) -> Result<DataPartition> {
    if dataset.is_empty() {
        return Err(Error::invalid("cannot partition an empty dataset"));
    }
    if num_nodes == 0 {
        return Err(Error::invalid("num_nodes must be positive"));
    }
    let num_classes = dataset.num_classes();
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &l) in dataset.labels().iter().enumerate() {
        by_class[l].push(i);
    }
    let mut rng = rng_from_seed(seed);
    for attempt in 0..=PARTITION_RETRIES {
        let prefs = (0..num_nodes)
            .map(|_| sample_dirichlet(alpha, num_classes, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let shards = allocate(&by_class, &prefs, num_nodes);
        if shards.iter().all(|s| !s.is_empty()) {
            let class_counts: Vec<Vec<usize>> = shards
                .iter()
                .map(|s| {
                    let mut c = vec![0; num_classes];
                    for &i in s {
                        c[dataset.label(i)] += 1;
                    }
                    c
                })
                .collect();
            let distributions = class_counts
                .iter()
                .map(|c| {
                    let n: usize = c.iter().sum();
                    ClassDistribution::new(c.iter().map(|&k| k as f64 / n as f64).collect())
                })
                .collect::<Result<Vec<_>>>()?;
            return Ok(DataPartition {
                shards,
                distributions,
                class_counts,
                redraws: attempt,
            });
        }
    }
    Err(Error::DegeneratePartition(format!(
        "some node received no samples after {PARTITION_RETRIES} redraws \
         ({} samples, {num_nodes} nodes, alpha {alpha})",
        dataset.len()
    )))
}

fn allocate(by_class: &[Vec<usize>], prefs: &[Vec<f64>], num_nodes: usize) -> Vec<Vec<usize>> {
    let mut shards: Vec<Vec<usize>> = vec![Vec::new(); num_nodes];
    for (class, members) in by_class.iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        let total: f64 = prefs.iter().map(|p| p[class]).sum();
        let n = members.len();
        let shares: Vec<f64> = if total > 0.0 {
            prefs.iter().map(|p| p[class] / total * n as f64).collect()
        } else {
            vec![n as f64 / num_nodes as f64; num_nodes]
        };
        let mut counts: Vec<usize> = shares.iter().map(|s| s.floor() as usize).collect();
        let assigned: usize = counts.iter().sum();
        let mut order: Vec<usize> = (0..num_nodes).collect();
        // largest remainder first; ties broken by node id for determinism
        order.sort_by(|&a, &b| {
            let fa = shares[a] - shares[a].floor();
            let fb = shares[b] - shares[b].floor();
            fb.total_cmp(&fa).then(a.cmp(&b))
        });
        for &node in order.iter().cycle().take(n.saturating_sub(assigned)) {
            counts[node] += 1;
        }
        let mut cursor = 0;
        for (node, &c) in counts.iter().enumerate() {
            shards[node].extend_from_slice(&members[cursor..cursor + c]);
            cursor += c;
        }
    }
    shards
}

/// Participation frequencies derived from a Dirichlet direction vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyAssignment {
    /// Dirichlet(`beta`) direction over classes.
    pub direction: Vec<f64>,
    /// Normalization factor `r`.
    pub normalization: f64,
    /// Final per-node frequencies after flooring and clamping.
    pub frequencies: Vec<f64>,
    /// Mean of the frequencies before flooring; equals the target.
    pub prefloor_mean: f64,
    /// Mean of `frequencies`.
    pub realized_mean: f64,
}

/// Samples a direction from Dirichlet(`beta`) and derives per-node frequencies.
pub fn assign_frequencies(
    dists: &[ClassDistribution],
    beta: f64,
    target_mean: f64,
    seed: u64,
) -> Result<FrequencyAssignment> {
    let dim = dists
        .first()
        .ok_or_else(|| Error::invalid("no class distributions given"))?
        .as_slice()
        .len();
    let direction = sample_dirichlet(beta, dim, &mut rng_from_seed(seed))?;
    frequencies_from_direction(dists, direction, target_mean)
}

/// `p_k = max(<direction, D_k> / r, 0.02)`, with `r` set so the pre-floor mean
/// equals `target_mean`. Values above 1 are clamped.
pub fn frequencies_from_direction(
    dists: &[ClassDistribution],
    direction: Vec<f64>,
    target_mean: f64,
) -> Result<FrequencyAssignment> {
    if !(target_mean > FREQUENCY_FLOOR && target_mean <= 1.0) {
        return Err(Error::invalid(format!(
            "target mean frequency must lie in ({FREQUENCY_FLOOR}, 1], got {target_mean}"
        )));
    }
    if dists.iter().any(|d| d.as_slice().len() != direction.len()) {
        return Err(Error::shape("class distribution and direction dimensions differ"));
    }
    let raw: Vec<f64> = dists.iter().map(|d| dot(&direction, d.as_slice())).collect();
    let raw_mean = raw.iter().sum::<f64>() / raw.len() as f64;
    if raw_mean <= 0.0 {
        log::warn!("direction is orthogonal to every class distribution; all frequencies floored");
        let frequencies = vec![FREQUENCY_FLOOR; raw.len()];
        return Ok(FrequencyAssignment {
            direction,
            normalization: 0.0,
            frequencies,
            prefloor_mean: 0.0,
            realized_mean: FREQUENCY_FLOOR,
        });
    }
    let r = raw_mean / target_mean;
    let mut clamped = 0;
    let frequencies: Vec<f64> = raw
        .iter()
        .map(|v| {
            let p = v / r;
            if p > 1.0 {
                clamped += 1;
                1.0
            } else if p >= FREQUENCY_FLOOR {
                p
            } else {
                FREQUENCY_FLOOR
            }
        })
        .collect();
    if clamped > 0 {
        log::warn!("{clamped} participation frequencies exceeded 1 and were clamped");
    }
    let prefloor_mean = raw.iter().map(|v| v / r).sum::<f64>() / raw.len() as f64;
    let realized_mean = frequencies.iter().sum::<f64>() / frequencies.len() as f64;
    Ok(FrequencyAssignment {
        direction,
        normalization: r,
        frequencies,
        prefloor_mean,
        realized_mean,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn balanced(num_classes: usize, per_class: usize) -> Dataset {
        let labels: Vec<usize> = (0..num_classes * per_class).map(|i| i % num_classes).collect();
        Dataset::new(1, num_classes, vec![0.0; labels.len()], labels).unwrap()
    }

    fn tv_from_uniform(d: &ClassDistribution) -> f64 {
        let u = 1.0 / d.as_slice().len() as f64;
        0.5 * d.as_slice().iter().map(|p| (p - u).abs()).sum::<f64>()
    }

    #[test]
    fn dirichlet_draws_are_distributions() {
        let mut rng = rng_from_seed(5);
        for alpha in [0.001, 0.1, 1.0, 100.0] {
            let d = sample_dirichlet(alpha, 10, &mut rng).unwrap();
            assert!(ClassDistribution::new(d).is_ok());
        }
        assert!(sample_dirichlet(0.0, 3, &mut rng).is_err());
    }

    #[test]
    fn partition_is_exact() {
        let ds = balanced(10, 60);
        let part = dirichlet_partition(&ds, 12, 0.3, 9).unwrap();
        let mut seen: Vec<usize> = part.shards.iter().flatten().copied().collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..ds.len()).collect::<Vec<_>>());
    }

    #[test]
    fn large_alpha_is_near_uniform() {
        let ds = balanced(10, 200);
        let part = dirichlet_partition(&ds, 10, 1e6, 1).unwrap();
        for d in &part.distributions {
            assert!(tv_from_uniform(d) < 0.05, "{:?}", d);
        }
    }

    #[test]
    fn small_alpha_concentrates_mass() {
        let ds = balanced(10, 200);
        let part = dirichlet_partition(&ds, 20, 0.1, 2).unwrap();
        let concentrated = part
            .distributions
            .iter()
            .filter(|d| {
                let mut p = d.as_slice().to_vec();
                p.sort_by(|a, b| b.total_cmp(a));
                p[0] + p[1] > 0.5
            })
            .count();
        assert!(concentrated * 2 >= part.distributions.len(), "{concentrated}");
    }

    #[test]
    fn partition_is_deterministic() {
        let ds = balanced(5, 40);
        assert_eq!(
            dirichlet_partition(&ds, 7, 0.5, 3).unwrap(),
            dirichlet_partition(&ds, 7, 0.5, 3).unwrap()
        );
    }

    #[test]
    fn too_many_nodes_is_degenerate() {
        let ds = balanced(2, 2);
        assert!(matches!(
            dirichlet_partition(&ds, 10, 1.0, 0),
            Err(Error::DegeneratePartition(_))
        ));
    }

    #[test]
    fn identical_distributions_get_the_target() {
        let d = ClassDistribution::new(vec![0.25, 0.75]).unwrap();
        let fa = frequencies_from_direction(&vec![d; 4], vec![0.4, 0.6], 0.1).unwrap();
        for p in fa.frequencies {
            assert!((p - 0.1).abs() < 1e-15);
        }
    }

    #[test]
    fn low_raw_values_hit_the_floor() {
        // raw values 0.01 and 0.19 against a target mean of 0.1 (r = 1)
        let dists = vec![
            ClassDistribution::new(vec![1.0, 0.0]).unwrap(),
            ClassDistribution::new(vec![0.0, 1.0]).unwrap(),
        ];
        let fa = frequencies_from_direction(&dists, vec![0.01, 0.19], 0.1).unwrap();
        assert!((fa.normalization - 1.0).abs() < 1e-15);
        assert_eq!(fa.frequencies[0], FREQUENCY_FLOOR);
        assert!((fa.frequencies[1] - 0.19).abs() < 1e-15);
        assert!((fa.prefloor_mean - 0.1).abs() < 1e-15);
    }

    #[test]
    fn dominant_direction_class_ranks_first() {
        let z = vec![0.38, 0.10, 0.01, 0.00, 0.00, 0.01, 0.44, 0.04, 0.03, 0.00];
        // node i holds share s_i of class 6 and the rest spread uniformly over the others
        let shares = [0.9, 0.6, 0.3, 0.1, 0.0];
        let dists: Vec<ClassDistribution> = shares
            .iter()
            .map(|&s| {
                let mut p = vec![(1.0 - s) / 9.0; 10];
                p[6] = s;
                ClassDistribution::new(p).unwrap()
            })
            .collect();
        let fa = frequencies_from_direction(&dists, z, 0.1).unwrap();
        for w in fa.frequencies.windows(2) {
            assert!(w[0] >= w[1]);
        }
        assert!(fa.frequencies[0] > fa.frequencies[4]);
    }

    #[test]
    fn frequencies_respect_bounds() {
        let ds = balanced(10, 50);
        let part = dirichlet_partition(&ds, 25, 0.1, 4).unwrap();
        for seed in 0..20 {
            let fa = assign_frequencies(&part.distributions, 0.01, 0.3, seed).unwrap();
            assert!(fa.frequencies.iter().all(|&p| (FREQUENCY_FLOOR..=1.0).contains(&p)));
        }
    }
}
