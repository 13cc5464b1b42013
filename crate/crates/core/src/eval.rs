//! Validation splits, top-1 identification and the strategy benchmark matrix.

use std::collections::{HashMap, HashSet};
use std::time::Instant;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::gallery::group_by_label;
use crate::index::{BuildConfig, Index};
use crate::ivf_flat::{default_nprobe, IvfParams};
use crate::ivf_pq::IvfPqParams;
use crate::vector::{normalize_row, EmbeddingSet, SearchResult};

/// How many identities to withdraw as probes and how many of them stay
/// represented in the gallery.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub n_identities: usize,
    pub in_gallery_fraction: f64,
    pub probes_per_identity: usize,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(
        n_identities: usize,
        in_gallery_fraction: f64,
        probes_per_identity: usize,
        seed: u64,
    ) -> Self {
        SplitSpec {
            n_identities,
            in_gallery_fraction,
            probes_per_identity,
            seed,
        }
    }

    /// Identities whose remaining images stay in the gallery.
    pub fn in_gallery_count(&self) -> usize {
        (self.n_identities as f64 * self.in_gallery_fraction).round() as usize
    }
}

/// Expected answer for one probe.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Truth {
    InGallery(String),
    OutOfGallery,
}

impl Truth {
    pub fn is_in_gallery(&self) -> bool {
        matches!(self, Truth::InGallery(_))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub gallery: EmbeddingSet,
    pub probes: EmbeddingSet,
    pub truth: Vec<Truth>,
}

/// Draws a validation split from `source`.
///
/// `n_identities` identities are sampled. The first `in_gallery_count()` of
/// them (all needing at least `probes_per_identity + 1` images) give up
/// `probes_per_identity` random images as probes and keep the rest in the
/// gallery; the others (needing `probes_per_identity` images) give up that
/// many probes and have every remaining image dropped. Unsampled identities
/// stay in the gallery whole. Gallery and probe rows keep source order.
pub fn make_split(source: &EmbeddingSet, spec: &SplitSpec) -> Result<Split> {
    if spec.n_identities == 0 {
        return Err(Error::InfeasibleSplit(
            "n_identities must be at least 1".into(),
        ));
    }
    if spec.probes_per_identity == 0 {
        return Err(Error::InfeasibleSplit(
            "probes_per_identity must be at least 1".into(),
        ));
    }
    if !(0.0..=1.0).contains(&spec.in_gallery_fraction) {
        return Err(Error::InfeasibleSplit(format!(
            "in_gallery_fraction {} is outside [0, 1]",
            spec.in_gallery_fraction
        )));
    }
    let groups = group_by_label(source);
    let ppi = spec.probes_per_identity;
    let n_in = spec.in_gallery_count();
    let n_out = spec.n_identities - n_in;
    let eligible_in = groups.iter().filter(|(_, r)| r.len() > ppi).count();
    let eligible_any = groups.iter().filter(|(_, r)| r.len() >= ppi).count();
    let mut violations = Vec::new();
    if groups.len() < spec.n_identities {
        violations.push(format!(
            "source has {} identities, {} requested",
            groups.len(),
            spec.n_identities
        ));
    }
    if eligible_in < n_in {
        violations.push(format!(
            "{n_in} in-gallery identities need >= {} images each, only {eligible_in} qualify",
            ppi + 1
        ));
    }
    if eligible_any < spec.n_identities {
        violations.push(format!(
            "{} identities need >= {ppi} images each, only {eligible_any} qualify",
            spec.n_identities
        ));
    }
    if !violations.is_empty() {
        return Err(Error::InfeasibleSplit(violations.join("; ")));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut order: Vec<usize> = (0..groups.len()).collect();
    order.shuffle(&mut rng);
    let mut chosen_in = Vec::with_capacity(n_in);
    let mut taken = vec![false; groups.len()];
    for &g in &order {
        if chosen_in.len() == n_in {
            break;
        }
        if groups[g].1.len() > ppi {
            chosen_in.push(g);
            taken[g] = true;
        }
    }
    let mut chosen_out = Vec::with_capacity(n_out);
    for &g in &order {
        if chosen_out.len() == n_out {
            break;
        }
        if !taken[g] && groups[g].1.len() >= ppi {
            chosen_out.push(g);
            taken[g] = true;
        }
    }

    let mut is_probe = vec![false; source.len()];
    let mut dropped = vec![false; source.len()];
    let mut truth_of: HashMap<usize, Truth> = HashMap::new();
    for (g, in_gallery) in chosen_in
        .iter()
        .map(|&g| (g, true))
        .chain(chosen_out.iter().map(|&g| (g, false)))
    {
        let rows = &groups[g].1;
        let picks = index::sample(&mut rng, rows.len(), ppi);
        for p in picks.iter() {
            is_probe[rows[p]] = true;
            truth_of.insert(
                rows[p],
                if in_gallery {
                    Truth::InGallery(groups[g].0.clone())
                } else {
                    Truth::OutOfGallery
                },
            );
        }
        if !in_gallery {
            for &r in rows {
                dropped[r] = true;
            }
        }
    }

    let probe_rows: Vec<usize> = (0..source.len()).filter(|&i| is_probe[i]).collect();
    let gallery_rows: Vec<usize> = (0..source.len())
        .filter(|&i| !is_probe[i] && !dropped[i])
        .collect();
    let truth = probe_rows.iter().map(|r| truth_of[r].clone()).collect();
    Ok(Split {
        gallery: source.select(&gallery_rows),
        probes: source.select(&probe_rows),
        truth,
    })
}

/// Truth for probes scored against an existing index: a probe is in-gallery
/// exactly when its label occurs among the index labels.
pub fn truth_from_labels(gallery_labels: &[String], probes: &EmbeddingSet) -> Vec<Truth> {
    let known: HashSet<&str> = gallery_labels.iter().map(String::as_str).collect();
    probes
        .labels()
        .iter()
        .map(|l| {
            if known.contains(l.as_str()) {
                Truth::InGallery(l.clone())
            } else {
                Truth::OutOfGallery
            }
        })
        .collect()
}

/// Decision for one probe.
#[derive(Debug, Clone, PartialEq)]
pub enum Identification {
    /// Label of the nearest gallery vector and its distance.
    Match { label: String, dist: f64 },
    /// Nearest distance exceeded the rejection threshold.
    Reject,
    /// The index returned no candidates (possible with partial IVF probing).
    NoCandidate,
}

fn decide(index: &Index, result: &SearchResult, threshold: Option<f64>) -> Identification {
    match result.top1() {
        None => Identification::NoCandidate,
        Some(n) if threshold.is_some_and(|t| n.dist > t) => Identification::Reject,
        Some(n) => Identification::Match {
            label: index.label(n.id).to_string(),
            dist: n.dist,
        },
    }
}

/// Identifies one probe by its nearest neighbor.
pub fn top1_identify(
    index: &Index,
    probe: &[f32],
    threshold: Option<f64>,
    nprobe: Option<usize>,
) -> Result<Identification> {
    if index.is_empty() {
        return Err(Error::Empty("cannot identify against an empty index"));
    }
    let rows = crate::vector::Rows::new(probe.len(), probe)?;
    let result = index.search(rows, 1, nprobe)?;
    Ok(decide(index, &result[0], threshold))
}

/// One benchmark cell: how to build the index and how many lists to probe.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StrategyConfig {
    pub build: BuildConfig,
    pub nprobe: Option<usize>,
}

impl StrategyConfig {
    pub fn flat() -> Self {
        StrategyConfig {
            build: BuildConfig::Flat,
            nprobe: None,
        }
    }

    pub fn ivf_flat(params: IvfParams, nprobe: usize) -> Self {
        StrategyConfig {
            build: BuildConfig::IvfFlat(params),
            nprobe: Some(nprobe),
        }
    }

    pub fn ivf_pq(params: IvfPqParams, nprobe: usize) -> Self {
        StrategyConfig {
            build: BuildConfig::IvfPq(params),
            nprobe: Some(nprobe),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub strategy: String,
    pub nlist: Option<usize>,
    pub nprobe: Option<usize>,
    pub m: Option<usize>,
    /// Percent of in-gallery probes whose nearest neighbor carries their label.
    pub closed_set_accuracy: f64,
    /// Percent of all probes answered correctly with threshold rejection;
    /// out-of-gallery probes count only when rejected.
    pub open_set_accuracy: f64,
    pub threshold: Option<f64>,
    pub total_time_s: f64,
    pub per_query_time_s: f64,
    pub build_time_s: f64,
    pub n_probes: usize,
    pub n_in_gallery: usize,
    pub approximate_distances: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchOptions {
    pub threshold: Option<f64>,
    /// Search timing is the median over this many repetitions.
    pub repetitions: usize,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions {
            threshold: None,
            repetitions: 3,
        }
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

fn percent(hits: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        100.0 * hits as f64 / total as f64
    }
}

/// Scores an already built index on `probes`.
pub fn evaluate(
    index: &Index,
    probes: &EmbeddingSet,
    truth: &[Truth],
    nprobe: Option<usize>,
    options: &BenchOptions,
) -> Result<EvalReport> {
    if truth.len() != probes.len() {
        return Err(Error::invalid(format!(
            "{} probes but {} truth entries",
            probes.len(),
            truth.len()
        )));
    }
    if probes.is_empty() {
        return Err(Error::Empty("no probes to evaluate"));
    }
    if options.repetitions == 0 {
        return Err(Error::invalid("repetitions must be at least 1"));
    }
    let nprobe = index.effective_nprobe(nprobe);
    let mut times = Vec::with_capacity(options.repetitions);
    let mut results = Vec::new();
    for _ in 0..options.repetitions {
        let start = Instant::now();
        results = index.search(probes.rows(), 1, nprobe)?;
        times.push(start.elapsed().as_secs_f64());
    }
    let total_time_s = median(times);

    let (mut closed_hits, mut open_hits, mut n_in) = (0, 0, 0);
    for (result, t) in results.iter().zip(truth) {
        let closed = decide(index, result, None);
        let open = decide(index, result, options.threshold);
        match t {
            Truth::InGallery(label) => {
                n_in += 1;
                if matches!(&closed, Identification::Match { label: l, .. } if l == label) {
                    closed_hits += 1;
                }
                if matches!(&open, Identification::Match { label: l, .. } if l == label) {
                    open_hits += 1;
                }
            }
            Truth::OutOfGallery => {
                if open == Identification::Reject {
                    open_hits += 1;
                }
            }
        }
    }

    Ok(EvalReport {
        strategy: index.kind().name().to_string(),
        nlist: index.nlist(),
        nprobe,
        m: index.pq_m(),
        closed_set_accuracy: percent(closed_hits, n_in),
        open_set_accuracy: percent(open_hits, probes.len()),
        threshold: options.threshold,
        total_time_s,
        per_query_time_s: total_time_s / probes.len() as f64,
        build_time_s: 0.0,
        n_probes: probes.len(),
        n_in_gallery: n_in,
        approximate_distances: !index.exact_distances(),
    })
}

/// Builds and scores one index per config, sequentially.
pub fn run_benchmark(
    gallery: &EmbeddingSet,
    probes: &EmbeddingSet,
    truth: &[Truth],
    configs: &[StrategyConfig],
    options: &BenchOptions,
) -> Result<Vec<EvalReport>> {
    let mut reports = Vec::with_capacity(configs.len());
    for config in configs {
        let start = Instant::now();
        let index = Index::build(gallery.clone(), &config.build)?;
        let build_time_s = start.elapsed().as_secs_f64();
        let mut report = evaluate(&index, probes, truth, config.nprobe, options)?;
        report.build_time_s = build_time_s;
        reports.push(report);
    }
    Ok(reports)
}

/// Default sweep: flat, then for each `nlist` an IVF-flat and an IVF-PQ row per
/// probe count in `{1, nlist/32, nlist/4}` (deduplicated).
pub fn default_bench_matrix(nlists: &[usize], m: usize, seed: u64) -> Vec<StrategyConfig> {
    let mut configs = vec![StrategyConfig::flat()];
    for &nlist in nlists {
        let mut probes = vec![1, default_nprobe(nlist), (nlist / 4).max(1)];
        probes.dedup();
        for &np in &probes {
            configs.push(StrategyConfig::ivf_flat(IvfParams::new(nlist, seed), np));
        }
        for &np in &probes {
            configs.push(StrategyConfig::ivf_pq(IvfPqParams::new(nlist, m, seed), np));
        }
    }
    configs
}

pub fn reports_to_json(reports: &[EvalReport]) -> String {
    serde_json::to_string_pretty(reports).expect("reports serialize")
}

/// TSV with one row per report. Absent values print as `-`.
pub fn reports_to_tsv(reports: &[EvalReport]) -> String {
    fn opt<T: ToString>(v: Option<T>) -> String {
        v.map(|v| v.to_string()).unwrap_or_else(|| "-".into())
    }
    let mut out = String::from(
        "strategy\tnum_clustering_centers\taccuracy_pct\ttime_s\tnprobe\tm\topen_set_accuracy_pct\tper_query_time_s\tbuild_time_s\n",
    );
    for r in reports {
        out.push_str(&format!(
            "{}\t{}\t{:.2}\t{:.6}\t{}\t{}\t{:.2}\t{:.9}\t{:.6}\n",
            r.strategy,
            opt(r.nlist),
            r.closed_set_accuracy,
            r.total_time_s,
            opt(r.nprobe),
            opt(r.m),
            r.open_set_accuracy,
            r.per_query_time_s,
            r.build_time_s,
        ));
    }
    out
}

/// Fraction of queries whose exact nearest neighbor appears in the
/// approximate top-`k`.
pub fn recall_at_k(approx: &[SearchResult], exact: &[SearchResult], k: usize) -> f64 {
    if exact.is_empty() {
        return 0.0;
    }
    let hits = approx
        .iter()
        .zip(exact)
        .filter(|(a, e)| {
            e.top1()
                .is_some_and(|t| a.entries.iter().take(k).any(|n| n.id == t.id))
        })
        .count();
    hits as f64 / exact.len() as f64
}

/// Parameters of the synthetic identity gallery.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthSpec {
    pub identities: usize,
    pub per_identity: usize,
    pub dim: usize,
    pub sigma: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            identities: 1000,
            per_identity: 10,
            dim: 128,
            sigma: 0.05,
            seed: 0,
        }
    }
}

/// Identity centers uniform on the unit sphere, each sample the center plus
/// isotropic Gaussian noise of scale `sigma`, then L2-normalized. Rows are
/// grouped by identity; labels are `id00000`, `id00001`, ...
pub fn synthetic_identities(spec: &SynthSpec) -> Result<EmbeddingSet> {
    if spec.identities == 0 || spec.per_identity == 0 || spec.dim == 0 {
        return Err(Error::invalid(
            "synthetic set needs identities, samples and dim >= 1",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.identities * spec.per_identity;
    let mut data = Vec::with_capacity(n * spec.dim);
    let mut labels = Vec::with_capacity(n);
    let mut center = vec![0.0f32; spec.dim];
    for id in 0..spec.identities {
        loop {
            for c in center.iter_mut() {
                *c = rng.sample(StandardNormal);
            }
            if normalize_row(&mut center, id).is_ok() {
                break;
            }
        }
        for s in 0..spec.per_identity {
            let mut v: Vec<f32> = center
                .iter()
                .map(|&c| c + (spec.sigma * rng.sample::<f64, _>(StandardNormal)) as f32)
                .collect();
            normalize_row(&mut v, id * spec.per_identity + s)?;
            data.extend_from_slice(&v);
            labels.push(format!("id{id:05}"));
        }
    }
    EmbeddingSet::new(spec.dim, data, labels, true)
}

/// Kind name used in reports for a build config.
pub fn strategy_name(config: &StrategyConfig) -> &'static str {
    config.build.kind().name()
}
