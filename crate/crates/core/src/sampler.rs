//! Feature-clustering sampler: k-means over instance embeddings, a fixed
//! proportion kept from every cluster, then the survivors laid out in
//! raster order and zero-padded into a window-ready sequence.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wsdmil_autograd::Tensor;

use crate::bag::Bag;
use crate::error::{Error, Result};

pub const DEFAULT_CLUSTERS: usize = 10;
pub const MAX_LLOYD_ITERS: usize = 100;
pub const LLOYD_REL_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    pub assignments: Vec<usize>,
    /// Row-major `clusters × dim`.
    pub centroids: Vec<f64>,
    pub dim: usize,
    pub inertia: f64,
    pub cluster_sizes: Vec<usize>,
    /// Objective after every assignment step, in order.
    pub inertia_history: Vec<f64>,
}

impl Clustering {
    pub fn num_clusters(&self) -> usize {
        self.cluster_sizes.len()
    }

    pub fn centroid(&self, k: usize) -> &[f64] {
        &self.centroids[k * self.dim..(k + 1) * self.dim]
    }

    /// Builds a clustering from a given assignment, with centroids as
    /// cluster means. Useful for sampling without running k-means.
    pub fn from_assignments(data: &[f64], dim: usize, assignments: Vec<usize>, clusters: usize) -> Result<Self> {
        let n = check_matrix(data, dim)?;
        if assignments.len() != n || assignments.iter().any(|&a| a >= clusters) {
            return Err(Error::Argument(format!(
                "need {n} assignments, each below {clusters}"
            )));
        }
        let mut centroids = vec![0.0; clusters * dim];
        let sizes = update_means(data, dim, &assignments, &mut centroids);
        let inertia = objective(data, dim, &assignments, &centroids);
        Ok(Clustering {
            assignments,
            centroids,
            dim,
            inertia,
            cluster_sizes: sizes,
            inertia_history: vec![inertia],
        })
    }
}

fn check_matrix(data: &[f64], dim: usize) -> Result<usize> {
    if dim == 0 || data.len() % dim != 0 {
        return Err(Error::Argument(format!(
            "{} values do not form rows of width {dim}",
            data.len()
        )));
    }
    Ok(data.len() / dim)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn objective(data: &[f64], dim: usize, assignments: &[usize], centroids: &[f64]) -> f64 {
    assignments
        .iter()
        .enumerate()
        .map(|(i, &k)| sq_dist(&data[i * dim..(i + 1) * dim], &centroids[k * dim..(k + 1) * dim]))
        .sum()
}

/// Replaces each non-empty cluster's centroid with its mean; empty clusters
/// keep their centroid. Returns the cluster sizes.
fn update_means(data: &[f64], dim: usize, assignments: &[usize], centroids: &mut [f64]) -> Vec<usize> {
    let clusters = centroids.len() / dim;
    let mut sums = vec![0.0; clusters * dim];
    let mut sizes = vec![0usize; clusters];
    for (i, &k) in assignments.iter().enumerate() {
        sizes[k] += 1;
        for j in 0..dim {
            sums[k * dim + j] += data[i * dim + j];
        }
    }
    for k in 0..clusters {
        if sizes[k] > 0 {
            for j in 0..dim {
                centroids[k * dim + j] = sums[k * dim + j] / sizes[k] as f64;
            }
        }
    }
    sizes
}

fn plus_plus_init(data: &[f64], dim: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = data.len() / dim;
    let row = |i: usize| &data[i * dim..(i + 1) * dim];
    let mut centroids = Vec::with_capacity(k * dim);
    centroids.extend_from_slice(row(rng.random_range(0..n)));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(row(i), &centroids[..dim])).collect();
    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 && target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            // rounding can leave the last candidate with zero weight
            if d2[chosen] == 0.0 {
                chosen = d2.iter().rposition(|&w| w > 0.0).expect("total > 0");
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let c = row(pick).to_vec();
        for (i, slot) in d2.iter_mut().enumerate() {
            *slot = slot.min(sq_dist(row(i), &c));
        }
        centroids.extend_from_slice(&c);
    }
    centroids
}

/// Nearest-centroid assignment (lowest index wins ties). Any cluster left
/// empty is reseeded at the point farthest from its centroid, taken from a
/// cluster that can spare it.
fn assign(data: &[f64], dim: usize, centroids: &mut [f64], assignments: &mut [usize]) {
    let n = data.len() / dim;
    let clusters = centroids.len() / dim;
    let mut dist = vec![0.0; n];
    let mut sizes = vec![0usize; clusters];
    for i in 0..n {
        let x = &data[i * dim..(i + 1) * dim];
        let (mut best, mut best_d) = (0, f64::INFINITY);
        for k in 0..clusters {
            let d = sq_dist(x, &centroids[k * dim..(k + 1) * dim]);
            if d < best_d {
                best = k;
                best_d = d;
            }
        }
        assignments[i] = best;
        dist[i] = best_d;
        sizes[best] += 1;
    }
    for k in 0..clusters {
        if sizes[k] > 0 {
            continue;
        }
        let donor = (0..n)
            .filter(|&i| sizes[assignments[i]] >= 2)
            .max_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(b.cmp(&a)));
        let Some(i) = donor else { break };
        sizes[assignments[i]] -= 1;
        sizes[k] = 1;
        assignments[i] = k;
        dist[i] = 0.0;
        centroids[k * dim..(k + 1) * dim].copy_from_slice(&data[i * dim..(i + 1) * dim]);
    }
}

/// k-means++ seeding followed by Lloyd iterations. Stops once the relative
/// improvement of the objective drops below 1e-6, the assignment stops
/// changing, or after 100 iterations.
pub fn kmeans(data: &[f64], dim: usize, clusters: usize, seed: u64) -> Result<Clustering> {
    let n = check_matrix(data, dim)?;
    if clusters == 0 || n < clusters {
        return Err(Error::Argument(format!(
            "k-means needs 1 <= clusters <= instances, got {clusters} clusters for {n} instances"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus_init(data, dim, clusters, &mut rng);
    let mut assignments = vec![usize::MAX; n];
    let mut history: Vec<f64> = Vec::new();
    let mut previous = assignments.clone();
    for _ in 0..MAX_LLOYD_ITERS {
        assign(data, dim, &mut centroids, &mut assignments);
        let j = objective(data, dim, &assignments, &centroids);
        let converged = match history.last() {
            Some(&prev) => assignments == previous || prev - j <= LLOYD_REL_TOL * prev,
            None => false,
        };
        history.push(j);
        if converged {
            break;
        }
        previous.copy_from_slice(&assignments);
        update_means(data, dim, &assignments, &mut centroids);
    }
    let mut sizes = vec![0usize; clusters];
    for &k in &assignments {
        sizes[k] += 1;
    }
    Ok(Clustering {
        inertia: *history.last().expect("at least one iteration"),
        assignments,
        centroids,
        dim,
        cluster_sizes: sizes,
        inertia_history: history,
    })
}

/// Number kept from a cluster of `size`: `max(1, round(alpha·size/100))`,
/// or 0 for an empty cluster.
pub fn kept_count(size: usize, alpha: f64) -> usize {
    if size == 0 {
        return 0;
    }
    ((alpha * size as f64 / 100.0).round() as usize).clamp(1, size)
}

pub fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha <= 100.0) {
        return Err(Error::Argument(format!("alpha must lie in (0, 100], got {alpha}")));
    }
    Ok(())
}

/// Keeps `kept_count(n_k, alpha)` instances from every cluster, drawn
/// uniformly without replacement. Returns ascending instance indices.
pub fn stratified_sample(clustering: &Clustering, alpha: f64, seed: u64) -> Result<Vec<usize>> {
    check_alpha(alpha)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); clustering.num_clusters()];
    for (i, &k) in clustering.assignments.iter().enumerate() {
        members[k].push(i);
    }
    let mut kept = Vec::new();
    for m in &members {
        let take = kept_count(m.len(), alpha);
        if take == m.len() {
            kept.extend_from_slice(m);
        } else if take > 0 {
            kept.extend(index::sample(&mut rng, m.len(), take).into_iter().map(|j| m[j]));
        }
    }
    kept.sort_unstable();
    Ok(kept)
}

/// Model input: kept instances in raster order, zero-padded.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledSequence {
    /// `[1, M_pad, F]`.
    pub features: Tensor,
    pub mask: Vec<bool>,
    /// Source instance per real position, in sequence order.
    pub kept_indices: Vec<usize>,
    pub alpha: f64,
}

impl SampledSequence {
    pub fn padded_len(&self) -> usize {
        self.mask.len()
    }

    /// Number of real (unpadded) positions.
    pub fn len(&self) -> usize {
        self.kept_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kept_indices.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.shape()[2]
    }

    /// Same sequence with `extra` more padding positions appended.
    pub fn with_extra_padding(&self, extra: usize) -> Self {
        let f = self.feature_dim();
        let m_pad = self.padded_len() + extra;
        let mut data = self.features.data().to_vec();
        data.resize(m_pad * f, 0.0);
        let mut mask = self.mask.clone();
        mask.resize(m_pad, false);
        SampledSequence {
            features: Tensor::new(vec![1, m_pad, f], data).expect("sized above"),
            mask,
            kept_indices: self.kept_indices.clone(),
            alpha: self.alpha,
        }
    }
}

/// Least multiple of `(4·base)²` that is at least `m`.
pub fn padded_length(m: usize, base: usize) -> usize {
    let block = (4 * base) * (4 * base);
    m.div_ceil(block).max(1) * block
}

pub fn build_sequence(bag: &Bag, kept: &[usize], base: usize) -> Result<SampledSequence> {
    if kept.is_empty() {
        return Err(Error::Argument("cannot build a sequence from an empty kept set".into()));
    }
    if base == 0 {
        return Err(Error::Argument("window base must be positive".into()));
    }
    if let Some(&bad) = kept.iter().find(|&&i| i >= bag.len()) {
        return Err(Error::Argument(format!(
            "kept index {bad} out of range for {} instances",
            bag.len()
        )));
    }
    let mut order = kept.to_vec();
    order.sort_by_key(|&i| (bag.coords[i], i));
    order.dedup();
    let m = order.len();
    let m_pad = padded_length(m, base);
    let f = bag.dim;
    let mut data = vec![0.0; m_pad * f];
    for (pos, &i) in order.iter().enumerate() {
        data[pos * f..(pos + 1) * f].copy_from_slice(bag.row(i));
    }
    let mut mask = vec![false; m_pad];
    mask[..m].iter_mut().for_each(|v| *v = true);
    Ok(SampledSequence {
        features: Tensor::new(vec![1, m_pad, f], data)?,
        mask,
        kept_indices: order,
        alpha: 100.0,
    })
}

/// Cluster, subsample and lay out one bag. Clusters are capped at the
/// instance count so tiny bags still cluster.
pub fn sample_bag(bag: &Bag, clusters: usize, alpha: f64, base: usize, seed: u64) -> Result<SampledSequence> {
    check_alpha(alpha)?;
    let kept = if alpha >= 100.0 {
        (0..bag.len()).collect()
    } else {
        let clustering = kmeans(&bag.embeddings, bag.dim, clusters.clamp(1, bag.len()), seed)?;
        stratified_sample(&clustering, alpha, seed ^ 0x5eed_5a3f)?
    };
    let mut seq = build_sequence(bag, &kept, base)?;
    seq.alpha = alpha;
    Ok(seq)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_fit_has_zero_inertia() {
        let data = [0.0, 0.0, 5.0, 1.0, -3.0, 2.0];
        let c = kmeans(&data, 2, 3, 11).unwrap();
        assert_eq!(c.inertia, 0.0);
        let mut cents: Vec<Vec<f64>> = (0..3).map(|k| c.centroid(k).to_vec()).collect();
        cents.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(cents, vec![vec![-3.0, 2.0], vec![0.0, 0.0], vec![5.0, 1.0]]);
    }

    #[test]
    fn too_many_clusters() {
        assert!(matches!(kmeans(&[1.0, 2.0], 1, 3, 0), Err(Error::Argument(_))));
    }

    #[test]
    fn duplicates_leave_no_empty_cluster() {
        let data = [1.0; 8];
        let c = kmeans(&data, 2, 3, 5).unwrap();
        assert!(c.cluster_sizes.iter().all(|&s| s > 0));
        assert_eq!(c.cluster_sizes.iter().sum::<usize>(), 4);
    }

    #[test]
    fn kept_counts_follow_rounding_rule() {
        assert_eq!([50, 30, 20].map(|n| kept_count(n, 20.0)), [10, 6, 4]);
        assert_eq!(kept_count(2, 20.0), 1);
        assert_eq!(kept_count(5, 50.0), 3);
        assert_eq!(kept_count(7, 100.0), 7);
    }

    #[test]
    fn alpha_bounds() {
        let c = Clustering::from_assignments(&[0.0, 1.0], 1, vec![0, 0], 1).unwrap();
        for a in [0.0, -1.0, 100.5, f64::NAN] {
            assert!(stratified_sample(&c, a, 0).is_err());
        }
        assert_eq!(stratified_sample(&c, 100.0, 0).unwrap(), vec![0, 1]);
    }

    #[test]
    fn padding_rule() {
        assert_eq!(padded_length(256, 4), 256);
        assert_eq!(padded_length(100, 4), 256);
        assert_eq!(padded_length(257, 4), 512);
        assert_eq!(padded_length(5000, 4), 5120);
        assert_eq!(padded_length(5, 8), 1024);
    }

    #[test]
    fn sequence_is_raster_sorted_and_padded() {
        let coords = vec![(1, 0), (0, 1), (0, 0)];
        let bag = Bag::new("b", vec![3.0, 2.0, 1.0], 1, coords, 0).unwrap();
        let s = build_sequence(&bag, &[0, 1, 2], 1).unwrap();
        assert_eq!(s.padded_len(), 16);
        assert_eq!(s.kept_indices, vec![2, 1, 0]);
        assert_eq!(&s.features.data()[..4], &[1.0, 2.0, 3.0, 0.0]);
        assert_eq!(s.mask.iter().filter(|&&m| m).count(), 3);
        assert!(build_sequence(&bag, &[], 1).is_err());
        assert!(build_sequence(&bag, &[3], 1).is_err());
    }
}
