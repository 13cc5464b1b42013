//! Lloyd's k-means with seeded random-sample initialization.
//!
//! This is the only clustering routine in the crate: it trains the coarse
//! quantizer of the IVF indexes, every PQ sub-codebook, and the 2-means used
//! by gallery cleaning.
//!
//! Determinism: initialization draws `k` distinct row indices from a ChaCha8
//! stream seeded with `seed`. The assignment step may run on many threads, but
//! each point's label and distance are independent of scheduling and every
//! reduction (inertia, centroid sums) runs sequentially in point order, so the
//! resulting codebook is bitwise identical for any thread count.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::vector::{l2sq, Rows};

pub const DEFAULT_MAX_ITERS: usize = 25;

/// Below this many points the assignment step stays on the calling thread.
const PARALLEL_MIN_POINTS: usize = 2048;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KMeansParams {
    pub k: usize,
    pub max_iters: usize,
    pub seed: u64,
}

impl KMeansParams {
    pub fn new(k: usize, seed: u64) -> Self {
        KMeansParams {
            k,
            max_iters: DEFAULT_MAX_ITERS,
            seed,
        }
    }

    pub fn with_max_iters(mut self, max_iters: usize) -> Self {
        self.max_iters = max_iters;
        self
    }
}

/// `k` centroids of dimension `dim`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    k: usize,
    dim: usize,
    centroids: Vec<f32>,
    inertia: f64,
}

impl Codebook {
    pub fn new(k: usize, dim: usize, centroids: Vec<f32>, inertia: f64) -> Result<Self> {
        if k == 0 || dim == 0 {
            return Err(Error::invalid("codebook needs k >= 1 and dim >= 1"));
        }
        if centroids.len() != k * dim {
            return Err(Error::invalid(format!(
                "codebook of {k}x{dim} given {} values",
                centroids.len()
            )));
        }
        if let Some(p) = centroids.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                row: p / dim,
                col: p % dim,
            });
        }
        Ok(Codebook {
            k,
            dim,
            centroids,
            inertia,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Within-cluster sum of squared distances at the end of training.
    pub fn inertia(&self) -> f64 {
        self.inertia
    }

    pub fn centroid(&self, c: usize) -> &[f32] {
        &self.centroids[c * self.dim..(c + 1) * self.dim]
    }

    pub fn centroids(&self) -> Rows<'_> {
        Rows::new(self.dim, &self.centroids).expect("codebook shape checked at construction")
    }

    /// Nearest centroid to `x` and its squared distance; ties go to the lower index.
    #[inline]
    pub fn nearest(&self, x: &[f32]) -> (usize, f64) {
        nearest_in(x, &self.centroids, self.dim)
    }

    /// The `n` nearest centroids to `x`, ranked by distance then index.
    pub fn nearest_n(&self, x: &[f32], n: usize) -> Vec<usize> {
        let mut scored: Vec<(f64, usize)> = self
            .centroids
            .chunks_exact(self.dim)
            .map(|c| l2sq(x, c))
            .zip(0..)
            .collect();
        scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        scored.into_iter().take(n).map(|(_, c)| c).collect()
    }
}

/// Cluster label of every point plus per-cluster member counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assignment {
    pub labels: Vec<usize>,
    pub counts: Vec<usize>,
}

/// Trace of one training run; `inertia_history[0]` is the inertia of the
/// initial sample, each later entry follows one update + reassignment.
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub codebook: Codebook,
    pub labels: Vec<usize>,
    pub inertia_history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Trains a codebook; see [`train_with_report`].
pub fn train(data: Rows<'_>, params: KMeansParams) -> Result<Codebook> {
    train_with_report(data, params).map(|r| r.codebook)
}

/// Runs Lloyd's algorithm.
///
/// Starts from `k` distinct rows sampled uniformly without replacement, then
/// alternates mean updates and nearest-centroid reassignment until labels stop
/// changing or `max_iters` updates have run. A cluster left empty by an update
/// takes the member of the currently largest cluster that lies farthest from
/// that cluster's new mean.
pub fn train_with_report(data: Rows<'_>, params: KMeansParams) -> Result<TrainReport> {
    let KMeansParams { k, max_iters, seed } = params;
    let n = data.len();
    let dim = data.dim();
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    if n < k {
        return Err(Error::InsufficientData(format!(
            "k-means with k={k} needs at least {k} points, got {n}"
        )));
    }
    if max_iters == 0 {
        return Err(Error::invalid("max_iters must be at least 1"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init = index::sample(&mut rng, n, k);
    let mut centroids = Vec::with_capacity(k * dim);
    for i in init.iter() {
        centroids.extend_from_slice(data.row(i));
    }

    let (mut labels, mut inertia) = assign_points(data, &centroids, dim);
    let mut history = vec![inertia];
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iters {
        let repaired = update_centroids(data, &mut labels, &mut centroids, k);
        let (new_labels, new_inertia) = assign_points(data, &centroids, dim);
        iterations += 1;
        history.push(new_inertia);
        inertia = new_inertia;
        let unchanged = !repaired && new_labels == labels;
        labels = new_labels;
        if unchanged {
            converged = true;
            break;
        }
    }

    Ok(TrainReport {
        codebook: Codebook::new(k, dim, centroids, inertia)?,
        labels,
        inertia_history: history,
        iterations,
        converged,
    })
}

/// Maps every point to its nearest centroid (ties to the lower index).
pub fn assign(data: Rows<'_>, codebook: &Codebook) -> Result<Assignment> {
    if data.dim() != codebook.dim() {
        return Err(Error::DimensionMismatch {
            expected: codebook.dim(),
            found: data.dim(),
        });
    }
    let (labels, _) = assign_points(data, &codebook.centroids, codebook.dim);
    let mut counts = vec![0; codebook.k()];
    for &l in &labels {
        counts[l] += 1;
    }
    Ok(Assignment { labels, counts })
}

fn nearest_in(x: &[f32], centroids: &[f32], dim: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.chunks_exact(dim).enumerate() {
        let d = l2sq(x, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn assign_points(data: Rows<'_>, centroids: &[f32], dim: usize) -> (Vec<usize>, f64) {
    let nearest: Vec<(usize, f64)> = if data.len() >= PARALLEL_MIN_POINTS {
        data.as_slice()
            .par_chunks_exact(dim)
            .map(|x| nearest_in(x, centroids, dim))
            .collect()
    } else {
        data.iter().map(|x| nearest_in(x, centroids, dim)).collect()
    };
    let mut inertia = 0.0;
    let mut labels = Vec::with_capacity(nearest.len());
    for (l, d) in nearest {
        inertia += d;
        labels.push(l);
    }
    (labels, inertia)
}

fn update_centroids(data: Rows<'_>, labels: &mut [usize], centroids: &mut [f32], k: usize) -> bool {
    let dim = data.dim();
    let mut sums = vec![0.0f64; k * dim];
    let mut counts = vec![0usize; k];
    for (x, &l) in data.iter().zip(labels.iter()) {
        counts[l] += 1;
        for (s, &v) in sums[l * dim..(l + 1) * dim].iter_mut().zip(x) {
            *s += v as f64;
        }
    }
    for c in 0..k {
        if counts[c] > 0 {
            let n = counts[c] as f64;
            for (dst, &s) in centroids[c * dim..(c + 1) * dim]
                .iter_mut()
                .zip(&sums[c * dim..(c + 1) * dim])
            {
                *dst = (s / n) as f32;
            }
        }
    }
    let mut repaired = false;
    for empty in 0..k {
        if counts[empty] != 0 {
            continue;
        }
        repaired = true;
        let largest = (0..k).fold(0, |best, c| if counts[c] > counts[best] { c } else { best });
        let from = &centroids[largest * dim..(largest + 1) * dim];
        let mut far = (usize::MAX, f64::NEG_INFINITY);
        for (i, x) in data.iter().enumerate() {
            if labels[i] == largest {
                let d = l2sq(x, from);
                if d > far.1 {
                    far = (i, d);
                }
            }
        }
        let p = far.0;
        let src = data.row(p);
        centroids[empty * dim..(empty + 1) * dim].copy_from_slice(src);
        labels[p] = empty;
        counts[largest] -= 1;
        counts[empty] += 1;
    }
    repaired
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn rows(dim: usize, data: &[f32]) -> Rows<'_> {
        Rows::new(dim, data).unwrap()
    }

    #[test]
    fn single_cluster_is_the_mean() {
        let data = [0.0, 0.0, 2.0, 0.0];
        let cb = train(rows(2, &data), KMeansParams::new(1, 0)).unwrap();
        assert_eq!(cb.centroid(0), &[1.0, 0.0]);
        assert_eq!(cb.inertia(), 2.0);
    }

    #[test]
    fn two_points_two_clusters() {
        let data = [0.0, 0.0, 10.0, 10.0];
        for seed in 0..5 {
            let cb = train(rows(2, &data), KMeansParams::new(2, seed)).unwrap();
            let mut cs = vec![cb.centroid(0).to_vec(), cb.centroid(1).to_vec()];
            cs.sort_by(|a, b| a[0].total_cmp(&b[0]));
            assert_eq!(cs, vec![vec![0.0, 0.0], vec![10.0, 10.0]]);
            assert_eq!(cb.inertia(), 0.0);
        }
    }

    #[test]
    fn rejects_bad_k() {
        let data = [0.0, 1.0];
        assert!(matches!(
            train(rows(1, &data), KMeansParams::new(3, 0)),
            Err(Error::InsufficientData(_))
        ));
        assert!(matches!(
            train(rows(1, &data), KMeansParams::new(0, 0)),
            Err(Error::InvalidParameter(_))
        ));
    }

    #[test]
    fn assign_exact_and_tie() {
        let cents = vec![0.0, 0.0, -1.0, 0.0, 1.0, 0.0, 5.0, 5.0];
        let cb = Codebook::new(4, 2, cents, 0.0).unwrap();
        let pts = [5.0, 5.0, 0.0, 3.0];
        let a = assign(rows(2, &pts), &cb).unwrap();
        assert_eq!(a.labels[0], 3);
        // (0,3) is equidistant from centroids 1 and 2 but nearer to 0; shift to test 1 vs 2.
        let cb = Codebook::new(3, 2, vec![9.0, 9.0, -1.0, 0.0, 1.0, 0.0], 0.0).unwrap();
        let a = assign(rows(2, &[0.0, 0.0]), &cb).unwrap();
        assert_eq!(a.labels, vec![1]);
        assert_eq!(a.counts, vec![0, 1, 0]);
    }

    #[test]
    fn assign_dim_mismatch() {
        let cb = Codebook::new(1, 2, vec![0.0, 0.0], 0.0).unwrap();
        assert!(matches!(
            assign(rows(3, &[0.0; 3]), &cb),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn assign_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let data: Vec<f32> = (0..1000 * 16)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let cents: Vec<f32> = (0..32 * 16).map(|_| rng.random_range(-1.0..1.0)).collect();
        let cb = Codebook::new(32, 16, cents.clone(), 0.0).unwrap();
        let a = assign(rows(16, &data), &cb).unwrap();
        for (i, x) in data.chunks(16).enumerate() {
            let dists: Vec<f64> = cents
                .chunks(16)
                .map(|c| x.iter().zip(c).map(|(a, b)| ((a - b) as f64).powi(2)).sum())
                .collect();
            let mut best = 0;
            for c in 1..32 {
                if dists[c] < dists[best] {
                    best = c;
                }
            }
            assert_eq!(a.labels[i], best);
        }
        assert_eq!(a.counts.iter().sum::<usize>(), 1000);
    }

    #[test]
    fn identical_points_survive_empty_cluster_repair() {
        let data = vec![1.0f32; 6 * 3];
        let report = train_with_report(rows(3, &data), KMeansParams::new(4, 9)).unwrap();
        assert_eq!(report.codebook.inertia(), 0.0);
        assert!(report
            .codebook
            .centroids()
            .iter()
            .all(|c| c == [1.0, 1.0, 1.0]));
    }

    #[test]
    fn empty_cluster_takes_farthest_point_of_largest() {
        // Rows 0 and 1 are identical; if both are sampled, one centroid starves.
        let data = [0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 9.0, 0.0];
        for seed in 0..20 {
            let r = train_with_report(rows(2, &data), KMeansParams::new(3, seed)).unwrap();
            assert_eq!(r.codebook.inertia(), 0.0, "seed {seed}");
        }
    }

    fn blobs(seed: u64, centers: usize, per: usize, dim: usize) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::new();
        for c in 0..centers {
            for _ in 0..per {
                for d in 0..dim {
                    let base = if d == c % dim {
                        10.0 * (1 + c / dim) as f32
                    } else {
                        0.0
                    };
                    let z: f32 = rng.sample(StandardNormal);
                    out.push(base + 0.3 * z);
                }
            }
        }
        out
    }

    #[test]
    fn converged_centroids_are_member_means() {
        let data = blobs(3, 5, 40, 6);
        let r =
            train_with_report(rows(6, &data), KMeansParams::new(5, 2).with_max_iters(100)).unwrap();
        assert!(r.converged);
        for c in 0..5 {
            let members: Vec<&[f32]> = rows(6, &data)
                .iter()
                .zip(&r.labels)
                .filter(|(_, &l)| l == c)
                .map(|(x, _)| x)
                .collect();
            assert!(!members.is_empty());
            for d in 0..6 {
                let mean: f64 =
                    members.iter().map(|x| x[d] as f64).sum::<f64>() / members.len() as f64;
                assert!((mean - r.codebook.centroid(c)[d] as f64).abs() <= 1e-4);
            }
        }
    }

    #[test]
    fn thread_count_does_not_change_result() {
        let data = blobs(8, 8, 400, 4);
        let params = KMeansParams::new(8, 5);
        let one = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap()
            .install(|| train(rows(4, &data), params).unwrap());
        let four = rayon::ThreadPoolBuilder::new()
            .num_threads(4)
            .build()
            .unwrap()
            .install(|| train(rows(4, &data), params).unwrap());
        assert_eq!(one, four);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn inertia_never_increases(seed in any::<u64>(), k in 1usize..12, n in 12usize..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f32> = (0..n * 3).map(|_| rng.random_range(-5.0..5.0)).collect();
            let r = train_with_report(rows(3, &data), KMeansParams::new(k, seed)).unwrap();
            for w in r.inertia_history.windows(2) {
                // Means are rounded to f32, so allow for that rounding only.
                prop_assert!(w[1] <= w[0] * (1.0 + 1e-6) + 1e-9, "{:?}", r.inertia_history);
            }
            prop_assert_eq!(r.codebook.inertia(), *r.inertia_history.last().unwrap());
        }

        #[test]
        fn training_is_deterministic(seed in any::<u64>()) {
            let data = blobs(seed, 4, 25, 5);
            let a = train(rows(5, &data), KMeansParams::new(4, seed)).unwrap();
            let b = train(rows(5, &data), KMeansParams::new(4, seed)).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
