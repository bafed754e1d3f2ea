//! Sample-selection strategies.
//!
//! Every policy consumes the finished task's [`SampleScores`], the quota
//! it may fill, and the current buffer state, and produces the entries to
//! store plus the eviction rule later settles will use to shrink them.
//! The greedy and streaming cores (balanced-buffer, GSS, the diversity
//! pass) are sequential by definition; everything they rank on was
//! computed up front by the scoring pass.

use crate::buffer::{BufferEntry, EvictionRule, ReplayBuffer};
use crate::error::{Error, Result};
use crate::model::GradientVector;
use crate::rng::Rng;
use crate::scoring::{distribution_uniformity, embedding_distance, SampleScores, ScoreKind};
use crate::types::{ClassHistogram, ClassId, Sample, SampleId};
use rand::Rng as _;
use std::collections::{BTreeMap, BTreeSet};

/// Identifier of a selection strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolicyId {
    /// No selection at all (fine-tuning / distillation-only runs).
    None,
    Random,
    LossMin,
    LossMax,
    LossMedian,
    /// Nearest to the mean loss; reported separately from the median mode.
    LossMean,
    EntropyMin,
    EntropyMax,
    /// Nearest to the mean entropy.
    EntropyMean,
    Brisque,
    TvLabel,
    TvImage,
    Ambivalent,
    ClassBalSamples,
    ClassBalBuffer,
    DivClassBal,
    Gss,
    Rss,
}

impl PolicyId {
    pub const ALL: [PolicyId; 18] = [
        PolicyId::None,
        PolicyId::Random,
        PolicyId::LossMin,
        PolicyId::LossMax,
        PolicyId::LossMedian,
        PolicyId::LossMean,
        PolicyId::EntropyMin,
        PolicyId::EntropyMax,
        PolicyId::EntropyMean,
        PolicyId::Brisque,
        PolicyId::TvLabel,
        PolicyId::TvImage,
        PolicyId::Ambivalent,
        PolicyId::ClassBalSamples,
        PolicyId::ClassBalBuffer,
        PolicyId::DivClassBal,
        PolicyId::Gss,
        PolicyId::Rss,
    ];
}

impl std::fmt::Display for PolicyId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            PolicyId::None => "none",
            PolicyId::Random => "random",
            PolicyId::LossMin => "loss_min",
            PolicyId::LossMax => "loss_max",
            PolicyId::LossMedian => "loss_median",
            PolicyId::LossMean => "loss_mean",
            PolicyId::EntropyMin => "entropy_min",
            PolicyId::EntropyMax => "entropy_max",
            PolicyId::EntropyMean => "entropy_mean",
            PolicyId::Brisque => "brisque",
            PolicyId::TvLabel => "tv_label",
            PolicyId::TvImage => "tv_image",
            PolicyId::Ambivalent => "ambivalent",
            PolicyId::ClassBalSamples => "class_bal_samples",
            PolicyId::ClassBalBuffer => "class_bal_buffer",
            PolicyId::DivClassBal => "div_class_bal",
            PolicyId::Gss => "gss",
            PolicyId::Rss => "rss",
        };
        write!(f, "{}", s)
    }
}

impl std::str::FromStr for PolicyId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        for id in PolicyId::ALL {
            if id.to_string() == s {
                return Ok(id);
            }
        }
        Err(Error::Config(format!("unknown policy '{}'", s)))
    }
}

/// Ranking direction for policies that support both ends.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Min,
    Max,
}

impl std::fmt::Display for Direction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Direction::Min => write!(f, "min"),
            Direction::Max => write!(f, "max"),
        }
    }
}

impl std::str::FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "min" => Ok(Direction::Min),
            "max" => Ok(Direction::Max),
            other => Err(Error::Config(format!("unknown direction '{}'", other))),
        }
    }
}

/// A policy with its parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelectionPolicy {
    pub id: PolicyId,
    /// Diversity threshold for `div_class_bal`.
    pub th: f64,
    /// Number of buffer gradients each GSS candidate is compared against.
    pub cmp: usize,
    /// Reduced dimensionality for RSS.
    pub rss_dim: usize,
    /// Naturalness ranking direction (lowest score is the default).
    pub direction: Direction,
}

impl SelectionPolicy {
    pub fn new(id: PolicyId) -> Self {
        SelectionPolicy {
            id,
            th: 0.6,
            cmp: 5,
            rss_dim: 2,
            direction: Direction::Min,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.th > 0.0 && self.th <= 2.0) {
            return Err(Error::Config(format!("th must be in (0,2], got {}", self.th)));
        }
        if self.cmp < 1 {
            return Err(Error::Config("cmp must be >= 1".into()));
        }
        if self.rss_dim < 1 {
            return Err(Error::Config("rss_dim must be >= 1".into()));
        }
        Ok(())
    }

    /// Canonical parameter string for tables, e.g. `th=0.6`.
    pub fn params_string(&self) -> String {
        match self.id {
            PolicyId::DivClassBal => format!("th={}", self.th),
            PolicyId::Gss => format!("cmp={}", self.cmp),
            PolicyId::Rss => format!("d={}", self.rss_dim),
            PolicyId::Brisque => format!("direction={}", self.direction),
            _ => String::new(),
        }
    }

    /// Score families this policy needs from the scoring pass.
    pub fn required_scores(&self) -> Vec<ScoreKind> {
        match self.id {
            PolicyId::None | PolicyId::Random => vec![],
            PolicyId::LossMin | PolicyId::LossMax | PolicyId::LossMedian | PolicyId::LossMean => {
                vec![ScoreKind::Loss]
            }
            PolicyId::EntropyMin | PolicyId::EntropyMax | PolicyId::EntropyMean => {
                vec![ScoreKind::Entropy]
            }
            PolicyId::Brisque => vec![ScoreKind::Naturalness],
            PolicyId::TvLabel => vec![ScoreKind::TvLabel],
            PolicyId::TvImage => vec![ScoreKind::TvImage],
            PolicyId::Ambivalent | PolicyId::ClassBalSamples | PolicyId::ClassBalBuffer => {
                vec![ScoreKind::ClassStats]
            }
            PolicyId::DivClassBal => vec![ScoreKind::ClassStats, ScoreKind::Embedding],
            PolicyId::Gss => vec![ScoreKind::Gradient],
            PolicyId::Rss => vec![ScoreKind::Embedding],
        }
    }

    /// How this policy's stored entries shrink when quotas tighten.
    pub fn eviction_rule(&self) -> EvictionRule {
        match self.id {
            PolicyId::None | PolicyId::Random => EvictionRule::Random,
            PolicyId::LossMin | PolicyId::EntropyMin => EvictionRule::KeepLowest,
            PolicyId::LossMax | PolicyId::EntropyMax | PolicyId::TvLabel | PolicyId::TvImage
            | PolicyId::Ambivalent => EvictionRule::KeepHighest,
            PolicyId::LossMedian => EvictionRule::KeepCentral,
            PolicyId::LossMean | PolicyId::EntropyMean => EvictionRule::KeepNearestMean,
            PolicyId::Brisque => match self.direction {
                Direction::Min => EvictionRule::KeepLowest,
                Direction::Max => EvictionRule::KeepHighest,
            },
            PolicyId::ClassBalSamples | PolicyId::DivClassBal => EvictionRule::KeepLowest,
            PolicyId::ClassBalBuffer => EvictionRule::GreedyBalance,
            // highest-similarity and furthest-from-center entries go first
            PolicyId::Gss | PolicyId::Rss => EvictionRule::KeepLowest,
        }
    }
}

/// Entries chosen for the finished task plus the rule future settles
/// apply to them.
#[derive(Debug)]
pub struct SelectionResult {
    pub entries: Vec<BufferEntry>,
    pub eviction: EvictionRule,
    pub warnings: Vec<String>,
}

/// Ranking flavor for plain score-based selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreSelect {
    Min,
    Max,
    /// Window centered on the lower-median rank.
    Median,
    /// Smallest absolute deviation from the mean score.
    MeanNearest,
}

/// Choose `quota` ids from `(id, score)` pairs; ties break toward the
/// ascending sample id.
pub fn select_by_score(
    pairs: &[(SampleId, f64)],
    quota: usize,
    kind: ScoreSelect,
) -> Vec<(SampleId, f64)> {
    let quota = quota.min(pairs.len());
    let mut sorted: Vec<(SampleId, f64)> = pairs.to_vec();
    match kind {
        ScoreSelect::Min => {
            sorted.sort_by(|a, b| {
                a.1.partial_cmp(&b.1)
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(a.0.cmp(&b.0))
            });
            sorted.truncate(quota);
        }
        ScoreSelect::Max => {
            sorted.sort_by(|a, b| {
                b.1.partial_cmp(&a.1)
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(a.0.cmp(&b.0))
            });
            sorted.truncate(quota);
        }
        ScoreSelect::Median => {
            sorted.sort_by(|a, b| {
                a.1.partial_cmp(&b.1)
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(a.0.cmp(&b.0))
            });
            let n = sorted.len();
            if quota == 0 || n == 0 {
                return Vec::new();
            }
            let median = (n - 1) / 2;
            let start = median.saturating_sub((quota - 1) / 2).min(n - quota);
            sorted = sorted.into_iter().skip(start).take(quota).collect();
        }
        ScoreSelect::MeanNearest => {
            let mean = pairs.iter().map(|p| p.1).sum::<f64>() / pairs.len().max(1) as f64;
            sorted.sort_by(|a, b| {
                let da = (a.1 - mean).abs();
                let db = (b.1 - mean).abs();
                da.partial_cmp(&db)
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(a.0.cmp(&b.0))
            });
            sorted.truncate(quota);
        }
    }
    sorted
}

fn random_ids(ids: &[SampleId], quota: usize, rng: &mut Rng) -> Vec<SampleId> {
    let mut pool: Vec<SampleId> = ids.to_vec();
    let take = quota.min(pool.len());
    for i in 0..take {
        let j = rng.gen_range(i..pool.len());
        pool.swap(i, j);
    }
    pool.truncate(take);
    pool
}

/// Fill a shortfall from the leftover pool (seeded), recording a warning.
fn fill_shortfall(
    chosen: &mut Vec<(SampleId, Option<f64>)>,
    scores: &[SampleScores],
    quota: usize,
    rng: &mut Rng,
    warnings: &mut Vec<String>,
    reason: &str,
) {
    if chosen.len() >= quota {
        return;
    }
    let have: BTreeSet<SampleId> = chosen.iter().map(|c| c.0).collect();
    let rest: Vec<SampleId> = scores
        .iter()
        .map(|s| s.id)
        .filter(|id| !have.contains(id))
        .collect();
    let fill = random_ids(&rest, quota - chosen.len(), rng);
    if !fill.is_empty() {
        warnings.push(format!(
            "{}: filled {} of {} slots with random samples",
            reason,
            fill.len(),
            quota
        ));
        chosen.extend(fill.into_iter().map(|id| (id, None)));
    }
}

/// Samples whose own class distribution is closest to uniform.
pub fn select_class_balanced_samples(
    scores: &[SampleScores],
    quota: usize,
    rng: &mut Rng,
) -> (Vec<(SampleId, Option<f64>)>, Vec<String>) {
    let mut warnings = Vec::new();
    let mut eligible: Vec<(SampleId, f64)> = scores
        .iter()
        .filter_map(|s| s.uniformity_distance.map(|u| (s.id, u)))
        .collect();
    eligible.sort_by(|a, b| {
        a.1.partial_cmp(&b.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.0.cmp(&b.0))
    });
    let quota = quota.min(scores.len());
    let mut chosen: Vec<(SampleId, Option<f64>)> = eligible
        .into_iter()
        .take(quota)
        .map(|(id, u)| (id, Some(u)))
        .collect();
    if chosen.is_empty() && quota > 0 {
        warnings.push("all samples have empty histograms; falling back to random".into());
    }
    fill_shortfall(
        &mut chosen,
        scores,
        quota,
        rng,
        &mut warnings,
        "class_bal_samples: not enough labeled samples",
    );
    (chosen, warnings)
}

/// Greedily extend the buffer's class distribution toward uniform: each
/// step takes the sample whose addition minimizes the L1 distance of the
/// normalized aggregate histogram to uniform over `target` classes.
pub fn select_class_balanced_buffer(
    scores: &[SampleScores],
    quota: usize,
    existing_aggregate: &ClassHistogram,
    target: &BTreeSet<ClassId>,
    rng: &mut Rng,
) -> Result<(Vec<(SampleId, Option<f64>)>, Vec<String>)> {
    let mut warnings = Vec::new();
    let quota = quota.min(scores.len());
    let mut eligible: Vec<&SampleScores> = scores
        .iter()
        .filter(|s| {
            s.histogram
                .as_ref()
                .map(|h| h.total() > 0)
                .unwrap_or(false)
        })
        .collect();
    for s in scores {
        if s.histogram.is_none() {
            return Err(Error::Config(
                "class_bal_buffer requires class statistics".into(),
            ));
        }
    }

    let mut agg = existing_aggregate.clone();
    let mut chosen: Vec<(SampleId, Option<f64>)> = Vec::with_capacity(quota);
    while chosen.len() < quota && !eligible.is_empty() {
        let mut best: Option<(f64, SampleId, usize)> = None;
        for (pos, s) in eligible.iter().enumerate() {
            let mut cand = agg.clone();
            cand.add(s.histogram.as_ref().expect("checked above"));
            let d = distribution_uniformity(&cand, target).unwrap_or(2.0);
            match best {
                Some((bd, bid, _)) if (d, s.id) >= (bd, bid) => {}
                _ => best = Some((d, s.id, pos)),
            }
        }
        let (_, _, pos) = best.expect("eligible non-empty");
        let picked = eligible.remove(pos);
        agg.add(picked.histogram.as_ref().expect("checked above"));
        chosen.push((picked.id, picked.uniformity_distance));
    }
    if chosen.len() < quota {
        fill_shortfall(
            &mut chosen,
            scores,
            quota,
            rng,
            &mut warnings,
            "class_bal_buffer: not enough labeled samples",
        );
    }
    Ok((chosen, warnings))
}

/// Most distinct labeled classes; ties by smaller uniformity distance,
/// then id.
pub fn select_ambivalent(scores: &[SampleScores], quota: usize) -> Vec<(SampleId, Option<f64>)> {
    let mut order: Vec<&SampleScores> = scores.iter().collect();
    order.sort_by(|a, b| {
        let da = a.distinct_classes.unwrap_or(0);
        let db = b.distinct_classes.unwrap_or(0);
        db.cmp(&da)
            .then_with(|| {
                let ua = a.uniformity_distance.unwrap_or(f64::INFINITY);
                let ub = b.uniformity_distance.unwrap_or(f64::INFINITY);
                ua.partial_cmp(&ub).unwrap_or(std::cmp::Ordering::Equal)
            })
            .then(a.id.cmp(&b.id))
    });
    order
        .into_iter()
        .take(quota.min(scores.len()))
        .map(|s| (s.id, s.distinct_classes.map(|d| d as f64)))
        .collect()
}

/// Class-balanced ranking with a visual-similarity filter: walk samples
/// in ascending uniformity distance and accept one only if its embedding
/// distance to every accepted sample is at least `th`. If the pass ends
/// under quota, the best-ranked rejected candidates fill the remainder.
pub fn select_diverse_class_balanced(
    scores: &[SampleScores],
    quota: usize,
    th: f64,
) -> Result<Vec<(SampleId, Option<f64>)>> {
    let quota = quota.min(scores.len());
    let mut order: Vec<&SampleScores> = scores.iter().collect();
    order.sort_by(|a, b| {
        let ua = a.uniformity_distance.unwrap_or(f64::INFINITY);
        let ub = b.uniformity_distance.unwrap_or(f64::INFINITY);
        ua.partial_cmp(&ub)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.id.cmp(&b.id))
    });
    for s in &order {
        if s.embedding.is_none() {
            return Err(Error::Config("div_class_bal requires embeddings".into()));
        }
    }

    let mut accepted: Vec<&SampleScores> = Vec::new();
    let mut rejected: Vec<&SampleScores> = Vec::new();
    for s in order {
        if accepted.len() >= quota {
            rejected.push(s);
            continue;
        }
        let e = s.embedding.as_ref().expect("checked above");
        let diverse = accepted.iter().all(|a| {
            embedding_distance(a.embedding.as_ref().expect("checked above"), e) >= th
        });
        if diverse {
            accepted.push(s);
        } else {
            rejected.push(s);
        }
    }
    let mut chosen: Vec<(SampleId, Option<f64>)> = accepted
        .into_iter()
        .map(|s| (s.id, s.uniformity_distance))
        .collect();
    for s in rejected {
        if chosen.len() >= quota {
            break;
        }
        chosen.push((s.id, s.uniformity_distance));
    }
    Ok(chosen)
}

/// Maximum gradient cosine similarity between the candidate and `cmp`
/// randomly drawn pool members (all of them when `cmp` covers the pool).
/// An empty pool scores 0.
pub fn gss_score(
    candidate: &GradientVector,
    pool: &[&GradientVector],
    cmp: usize,
    rng: &mut Rng,
) -> f64 {
    if pool.is_empty() {
        return 0.0;
    }
    if cmp >= pool.len() {
        return pool
            .iter()
            .map(|g| candidate.cosine(g))
            .fold(f64::NEG_INFINITY, f64::max);
    }
    let mut idx: Vec<usize> = (0..pool.len()).collect();
    for i in 0..cmp {
        let j = rng.gen_range(i..idx.len());
        idx.swap(i, j);
    }
    idx[..cmp]
        .iter()
        .map(|&i| candidate.cosine(pool[i]))
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Streaming greedy gradient-diversity selection. Candidates arrive in
/// dataset order; once the selection is full, one member is discarded
/// with probability proportional to its (shifted, non-negative) score and
/// the candidate takes its place.
pub fn select_gss(
    scores: &[SampleScores],
    quota: usize,
    cmp: usize,
    rng: &mut Rng,
) -> Result<Vec<(SampleId, f64)>> {
    for s in scores {
        if s.gradient.is_none() {
            return Err(Error::Config("gss requires gradients".into()));
        }
    }
    let mut selection: Vec<(usize, f64)> = Vec::new(); // (index into scores, score)
    for (i, s) in scores.iter().enumerate() {
        let pool: Vec<&GradientVector> = selection
            .iter()
            .map(|&(j, _)| scores[j].gradient.as_ref().expect("checked above"))
            .collect();
        let score = gss_score(s.gradient.as_ref().expect("checked above"), &pool, cmp, rng);
        if selection.len() < quota {
            selection.push((i, score));
        } else if quota > 0 {
            // negative similarities cannot be discard probabilities;
            // clamp at zero and keep the +1e-8 shift for all-zero pools
            let weights: Vec<f64> = selection
                .iter()
                .map(|&(_, r)| r.max(0.0) + 1e-8)
                .collect();
            let total: f64 = weights.iter().sum();
            let mut u = rng.gen_range(0.0..total);
            let mut victim = weights.len() - 1;
            for (w_idx, w) in weights.iter().enumerate() {
                u -= w;
                if u < 0.0 {
                    victim = w_idx;
                    break;
                }
            }
            selection.remove(victim);
            selection.push((i, score));
        }
    }
    Ok(selection
        .into_iter()
        .map(|(i, score)| (scores[i].id, score))
        .collect())
}

// --- linear dimensionality reduction and clustering for RSS ---

fn jacobi_eigen(mut a: Vec<f64>, n: usize) -> (Vec<f64>, Vec<f64>) {
    // cyclic Jacobi for a symmetric matrix; returns (eigenvalues,
    // eigenvectors column-major: v[i*n+j] = component i of eigenvector j)
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += a[p * n + q] * a[p * n + q];
            }
        }
        if off.sqrt() < 1e-12 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let eigenvalues: Vec<f64> = (0..n).map(|i| a[i * n + i]).collect();
    (eigenvalues, v)
}

/// Project embeddings onto their top-`d` principal directions. The sign
/// of each direction is fixed by making its largest-magnitude coordinate
/// positive, so the reduction is fully deterministic. Serves as the
/// default pluggable reducer for representation-based selection.
pub fn reduce_dim(embeddings: &[Vec<f64>], d: usize) -> Result<Vec<Vec<f64>>> {
    if embeddings.is_empty() {
        return Err(Error::Config("reduce_dim needs at least one embedding".into()));
    }
    let dim = embeddings[0].len();
    if d > dim {
        return Err(Error::Config(format!(
            "reduced dimension {} exceeds embedding dimension {}",
            d, dim
        )));
    }
    let n = embeddings.len();
    let mut mean = vec![0.0; dim];
    for e in embeddings {
        for (m, x) in mean.iter_mut().zip(e) {
            *m += x;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let centered: Vec<Vec<f64>> = embeddings
        .iter()
        .map(|e| e.iter().zip(&mean).map(|(x, m)| x - m).collect())
        .collect();

    let mut cov = vec![0.0; dim * dim];
    for row in &centered {
        for i in 0..dim {
            let ri = row[i];
            if ri == 0.0 {
                continue;
            }
            for j in i..dim {
                cov[i * dim + j] += ri * row[j];
            }
        }
    }
    let scale = 1.0 / n as f64;
    for i in 0..dim {
        for j in i..dim {
            cov[i * dim + j] *= scale;
            cov[j * dim + i] = cov[i * dim + j];
        }
    }

    let (eigenvalues, vectors) = jacobi_eigen(cov, dim);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&i, &j| {
        eigenvalues[j]
            .partial_cmp(&eigenvalues[i])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(i.cmp(&j))
    });

    let mut directions: Vec<Vec<f64>> = Vec::with_capacity(d);
    for &col in order.iter().take(d) {
        let mut dir: Vec<f64> = (0..dim).map(|i| vectors[i * dim + col]).collect();
        let mut pivot = 0usize;
        for (i, x) in dir.iter().enumerate() {
            if x.abs() > dir[pivot].abs() {
                pivot = i;
            }
        }
        if dir[pivot] < 0.0 {
            for x in &mut dir {
                *x = -*x;
            }
        }
        directions.push(dir);
    }

    Ok(centered
        .iter()
        .map(|row| {
            directions
                .iter()
                .map(|dir| row.iter().zip(dir).map(|(x, v)| x * v).sum())
                .collect()
        })
        .collect())
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd's algorithm with k-means++ seeding. Empty clusters re-seed to
/// the point currently farthest from its centroid. Runs to an assignment
/// fixpoint or `max_iter`.
pub fn kmeans(
    points: &[Vec<f64>],
    k: usize,
    rng: &mut Rng,
    max_iter: usize,
) -> (Vec<Vec<f64>>, Vec<usize>) {
    assert!(k >= 1 && k <= points.len(), "kmeans requires 1 <= k <= n");
    let n = points.len();
    let dim = points[0].len();

    // k-means++ seeding
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    centroids.push(points[rng.gen_range(0..n)].clone());
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let idx = if total <= 0.0 {
            rng.gen_range(0..n)
        } else {
            let mut u = rng.gen_range(0.0..total);
            let mut pick = n - 1;
            for (i, w) in d2.iter().enumerate() {
                u -= w;
                if u < 0.0 {
                    pick = i;
                    break;
                }
            }
            pick
        };
        centroids.push(points[idx].clone());
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, centroids.last().expect("just pushed")));
        }
    }

    let mut assignments = vec![0usize; n];
    for _ in 0..max_iter {
        let mut next = vec![0usize; n];
        for (i, p) in points.iter().enumerate() {
            let mut best = 0usize;
            let mut best_d = sq_dist(p, &centroids[0]);
            for (c, centroid) in centroids.iter().enumerate().skip(1) {
                let d = sq_dist(p, centroid);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            next[i] = best;
        }
        let converged = next == assignments;
        assignments = next;

        let mut counts = vec![0usize; k];
        let mut sums = vec![vec![0.0; dim]; k];
        for (i, &a) in assignments.iter().enumerate() {
            counts[a] += 1;
            for (s, x) in sums[a].iter_mut().zip(&points[i]) {
                *s += x;
            }
        }
        let mut reseeded = false;
        let mut taken: BTreeSet<usize> = BTreeSet::new();
        for c in 0..k {
            if counts[c] > 0 {
                for (ctr, s) in centroids[c].iter_mut().zip(&sums[c]) {
                    *ctr = s / counts[c] as f64;
                }
            } else {
                // farthest point from its assigned centroid takes over
                let mut far = None;
                for (i, p) in points.iter().enumerate() {
                    if taken.contains(&i) {
                        continue;
                    }
                    let d = sq_dist(p, &centroids[assignments[i]]);
                    if far.map(|(fd, _)| d > fd).unwrap_or(true) {
                        far = Some((d, i));
                    }
                }
                if let Some((_, i)) = far {
                    centroids[c] = points[i].clone();
                    taken.insert(i);
                    reseeded = true;
                }
            }
        }
        if converged && !reseeded {
            break;
        }
    }
    (centroids, assignments)
}

/// Sum of squared distances of points to their assigned centroids.
pub fn kmeans_inertia(points: &[Vec<f64>], centroids: &[Vec<f64>], assignments: &[usize]) -> f64 {
    points
        .iter()
        .zip(assignments)
        .map(|(p, &a)| sq_dist(p, &centroids[a]))
        .sum()
}

/// Representation-based selection: reduce embeddings, cluster into one
/// group per buffer slot, keep the sample nearest each cluster center.
/// Each entry's score is its reduced point's distance to the mean of the
/// task's reduced points, which later eviction uses (furthest go first).
pub fn select_rss(
    scores: &[SampleScores],
    quota: usize,
    d: usize,
    rng: &mut Rng,
) -> Result<Vec<(SampleId, f64)>> {
    for s in scores {
        if s.embedding.is_none() {
            return Err(Error::Config("rss requires embeddings".into()));
        }
    }
    if scores.is_empty() || quota == 0 {
        return Ok(Vec::new());
    }
    let embeddings: Vec<Vec<f64>> = scores
        .iter()
        .map(|s| s.embedding.clone().expect("checked above"))
        .collect();
    let reduced = reduce_dim(&embeddings, d.min(embeddings[0].len()).max(1))?;

    let rdim = reduced[0].len();
    let mut mean = vec![0.0; rdim];
    for p in &reduced {
        for (m, x) in mean.iter_mut().zip(p) {
            *m += x;
        }
    }
    for m in &mut mean {
        *m /= reduced.len() as f64;
    }
    let center_dist = |i: usize| sq_dist(&reduced[i], &mean).sqrt();

    if scores.len() <= quota {
        return Ok((0..scores.len())
            .map(|i| (scores[i].id, center_dist(i)))
            .collect());
    }

    let k = quota;
    let (centroids, assignments) = kmeans(&reduced, k, rng, 100);
    let mut chosen: Vec<usize> = Vec::new();
    for c in 0..k {
        let mut best: Option<(f64, SampleId, usize)> = None;
        for (i, &a) in assignments.iter().enumerate() {
            if a != c {
                continue;
            }
            let dist = sq_dist(&reduced[i], &centroids[c]);
            let key = (dist, scores[i].id);
            match best {
                Some((bd, bid, _)) if (key.0, key.1) >= (bd, bid) => {}
                _ => best = Some((dist, scores[i].id, i)),
            }
        }
        if let Some((_, _, i)) = best {
            if !chosen.contains(&i) {
                chosen.push(i);
            }
        }
    }
    // empty clusters or duplicate picks: fill by closeness to the center
    if chosen.len() < quota {
        let mut rest: Vec<usize> = (0..scores.len()).filter(|i| !chosen.contains(i)).collect();
        rest.sort_by(|&a, &b| {
            center_dist(a)
                .partial_cmp(&center_dist(b))
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(scores[a].id.cmp(&scores[b].id))
        });
        chosen.extend(rest.into_iter().take(quota - chosen.len()));
    }
    chosen.sort_by_key(|&i| scores[i].id);
    Ok(chosen
        .into_iter()
        .map(|i| (scores[i].id, center_dist(i)))
        .collect())
}

/// Run the configured policy over one finished task.
#[allow(clippy::too_many_arguments)]
pub fn select(
    policy: &SelectionPolicy,
    samples: &[Sample],
    scores: &[SampleScores],
    quota: usize,
    buffer: &ReplayBuffer,
    balance_target: &BTreeSet<ClassId>,
    rng: &mut Rng,
) -> Result<SelectionResult> {
    policy.validate()?;
    let by_id: BTreeMap<SampleId, &Sample> = samples.iter().map(|s| (s.id, s)).collect();
    if scores.len() != samples.len() || scores.iter().any(|s| !by_id.contains_key(&s.id)) {
        return Err(Error::Invariant(
            "scores and samples must describe the same task data".into(),
        ));
    }

    let take_scalar = |field: fn(&SampleScores) -> Option<f64>| -> Result<Vec<(SampleId, f64)>> {
        scores
            .iter()
            .map(|s| {
                field(s)
                    .map(|v| (s.id, v))
                    .ok_or_else(|| Error::Config(format!("missing score for sample {}", s.id)))
            })
            .collect()
    };

    let mut warnings = Vec::new();
    let chosen: Vec<(SampleId, Option<f64>)> = match policy.id {
        PolicyId::None => Vec::new(),
        PolicyId::Random => {
            let ids: Vec<SampleId> = scores.iter().map(|s| s.id).collect();
            random_ids(&ids, quota, rng)
                .into_iter()
                .map(|id| (id, None))
                .collect()
        }
        PolicyId::LossMin => wrap(select_by_score(&take_scalar(|s| s.loss)?, quota, ScoreSelect::Min)),
        PolicyId::LossMax => wrap(select_by_score(&take_scalar(|s| s.loss)?, quota, ScoreSelect::Max)),
        PolicyId::LossMedian => wrap(select_by_score(
            &take_scalar(|s| s.loss)?,
            quota,
            ScoreSelect::Median,
        )),
        PolicyId::LossMean => wrap(select_by_score(
            &take_scalar(|s| s.loss)?,
            quota,
            ScoreSelect::MeanNearest,
        )),
        PolicyId::EntropyMin => wrap(select_by_score(
            &take_scalar(|s| s.entropy)?,
            quota,
            ScoreSelect::Min,
        )),
        PolicyId::EntropyMax => wrap(select_by_score(
            &take_scalar(|s| s.entropy)?,
            quota,
            ScoreSelect::Max,
        )),
        PolicyId::EntropyMean => wrap(select_by_score(
            &take_scalar(|s| s.entropy)?,
            quota,
            ScoreSelect::MeanNearest,
        )),
        PolicyId::Brisque => {
            let kind = match policy.direction {
                Direction::Min => ScoreSelect::Min,
                Direction::Max => ScoreSelect::Max,
            };
            wrap(select_by_score(&take_scalar(|s| s.naturalness)?, quota, kind))
        }
        PolicyId::TvLabel => wrap(select_by_score(
            &take_scalar(|s| s.tv_label)?,
            quota,
            ScoreSelect::Max,
        )),
        PolicyId::TvImage => wrap(select_by_score(
            &take_scalar(|s| s.tv_image)?,
            quota,
            ScoreSelect::Max,
        )),
        PolicyId::Ambivalent => select_ambivalent(scores, quota),
        PolicyId::ClassBalSamples => {
            let (c, w) = select_class_balanced_samples(scores, quota, rng);
            warnings.extend(w);
            c
        }
        PolicyId::ClassBalBuffer => {
            let agg = buffer.aggregate_histogram();
            let (c, w) =
                select_class_balanced_buffer(scores, quota, &agg, balance_target, rng)?;
            warnings.extend(w);
            c
        }
        PolicyId::DivClassBal => select_diverse_class_balanced(scores, quota, policy.th)?,
        PolicyId::Gss => wrap(select_gss(scores, quota, policy.cmp, rng)?),
        PolicyId::Rss => wrap(select_rss(scores, quota, policy.rss_dim, rng)?),
    };

    // chosen ids are distinct and come from the offered task
    let mut seen = BTreeSet::new();
    for (id, _) in &chosen {
        if !seen.insert(*id) {
            return Err(Error::Invariant(format!("sample {} chosen twice", id)));
        }
        if !by_id.contains_key(id) {
            return Err(Error::Invariant(format!(
                "sample {} not part of the offered task",
                id
            )));
        }
    }

    let entries = chosen
        .into_iter()
        .map(|(id, score)| {
            let sample = (*by_id.get(&id).expect("validated above")).clone();
            let inserted_at = sample.task_id;
            BufferEntry {
                sample,
                score,
                inserted_at,
            }
        })
        .collect();
    Ok(SelectionResult {
        entries,
        eviction: policy.eviction_rule(),
        warnings,
    })
}

fn wrap(pairs: Vec<(SampleId, f64)>) -> Vec<(SampleId, Option<f64>)> {
    pairs.into_iter().map(|(id, s)| (id, Some(s))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bare_scores(values: &[(SampleId, f64)]) -> Vec<(SampleId, f64)> {
        values.to_vec()
    }

    #[test]
    fn score_selection_examples() {
        let pairs = bare_scores(&[(0, 5.0), (1, 1.0), (2, 3.0)]);
        assert_eq!(select_by_score(&pairs, 1, ScoreSelect::Min)[0].0, 1);
        assert_eq!(select_by_score(&pairs, 1, ScoreSelect::Max)[0].0, 0);
        assert_eq!(select_by_score(&pairs, 1, ScoreSelect::Median)[0].0, 2);

        let pairs = bare_scores(&[(0, 1.0), (1, 2.0), (2, 3.0), (3, 4.0)]);
        let mean2: BTreeSet<SampleId> = select_by_score(&pairs, 2, ScoreSelect::MeanNearest)
            .into_iter()
            .map(|p| p.0)
            .collect();
        assert_eq!(mean2, [1, 2].into_iter().collect());
    }

    #[test]
    fn score_selection_tie_breaks_by_id() {
        let pairs = bare_scores(&[(5, 1.0), (2, 1.0), (9, 1.0)]);
        let picked = select_by_score(&pairs, 2, ScoreSelect::Min);
        assert_eq!(picked[0].0, 2);
        assert_eq!(picked[1].0, 5);
    }

    fn stats_scores(entries: &[(SampleId, Option<f64>, usize, Vec<u64>)]) -> Vec<SampleScores> {
        // (id, uniformity, distinct, histogram counts)
        entries
            .iter()
            .map(|(id, u, distinct, counts)| SampleScores {
                id: *id,
                task_id: 0,
                loss: None,
                entropy: None,
                tv_image: None,
                tv_label: None,
                naturalness: None,
                distinct_classes: Some(*distinct),
                uniformity_distance: *u,
                histogram: Some(ClassHistogram {
                    counts: counts.clone(),
                    num_classes: counts.len(),
                }),
                embedding: None,
                gradient: None,
            })
            .collect()
    }

    #[test]
    fn balanced_samples_prefers_uniform_histogram() {
        let scores = stats_scores(&[
            (0, Some(1.2), 1, vec![4, 0, 0]),
            (1, Some(0.0), 3, vec![2, 2, 2]),
            (2, Some(0.9), 2, vec![3, 1, 0]),
        ]);
        let mut rng = Rng::from_seed(1);
        let (chosen, warnings) = select_class_balanced_samples(&scores, 1, &mut rng);
        assert_eq!(chosen[0].0, 1);
        assert!(warnings.is_empty());
    }

    #[test]
    fn balanced_samples_quota_covers_all() {
        let scores = stats_scores(&[
            (0, Some(0.5), 2, vec![3, 1, 0]),
            (1, Some(0.2), 2, vec![2, 2, 0]),
        ]);
        let mut rng = Rng::from_seed(2);
        let (chosen, _) = select_class_balanced_samples(&scores, 10, &mut rng);
        assert_eq!(chosen.len(), 2);
    }

    #[test]
    fn balanced_samples_matches_sort_oracle() {
        let mut rng = Rng::from_seed(3);
        let entries: Vec<(SampleId, Option<f64>, usize, Vec<u64>)> = (0..20)
            .map(|i| {
                let counts: Vec<u64> = (0..4).map(|_| rng.gen_range(0..9u64)).collect();
                let h = ClassHistogram {
                    counts: counts.clone(),
                    num_classes: 4,
                };
                let target: BTreeSet<ClassId> = (0..4).collect();
                (i, distribution_uniformity(&h, &target), h.distinct(), counts)
            })
            .collect();
        let scores = stats_scores(&entries);
        let (chosen, _) = select_class_balanced_samples(&scores, 6, &mut Rng::from_seed(4));

        // full sort oracle
        let mut oracle: Vec<(f64, SampleId)> = entries
            .iter()
            .filter_map(|(id, u, _, _)| u.map(|u| (u, *id)))
            .collect();
        oracle.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let want: Vec<SampleId> = oracle.iter().take(6).map(|(_, id)| *id).collect();
        let got: Vec<SampleId> = chosen.iter().map(|c| c.0).collect();
        assert_eq!(got, want);
    }

    #[test]
    fn balanced_samples_all_ineligible_falls_back_random() {
        let scores = stats_scores(&[
            (0, None, 0, vec![0, 0, 0]),
            (1, None, 0, vec![0, 0, 0]),
            (2, None, 0, vec![0, 0, 0]),
        ]);
        let mut rng = Rng::from_seed(5);
        let (chosen, warnings) = select_class_balanced_samples(&scores, 2, &mut rng);
        assert_eq!(chosen.len(), 2);
        assert!(!warnings.is_empty());
    }

    #[test]
    fn balanced_buffer_two_greedy_steps() {
        // one-class images of classes 0, 0, 1: the greedy pair is one of
        // each class
        let scores = stats_scores(&[
            (0, Some(4.0 / 3.0), 1, vec![5, 0]),
            (1, Some(4.0 / 3.0), 1, vec![5, 0]),
            (2, Some(4.0 / 3.0), 1, vec![0, 5]),
        ]);
        let target: BTreeSet<ClassId> = [0, 1].into_iter().collect();
        let agg = ClassHistogram::zeros(2);
        let mut rng = Rng::from_seed(6);
        let (chosen, _) =
            select_class_balanced_buffer(&scores, 2, &agg, &target, &mut rng).unwrap();
        let ids: BTreeSet<SampleId> = chosen.iter().map(|c| c.0).collect();
        assert_eq!(ids, [0, 2].into_iter().collect());
    }

    #[test]
    fn balanced_buffer_identical_histograms_take_first_ids() {
        let scores = stats_scores(&[
            (3, Some(0.5), 2, vec![3, 1]),
            (1, Some(0.5), 2, vec![3, 1]),
            (7, Some(0.5), 2, vec![3, 1]),
        ]);
        let target: BTreeSet<ClassId> = [0, 1].into_iter().collect();
        let agg = ClassHistogram::zeros(2);
        let mut rng = Rng::from_seed(7);
        let (chosen, _) =
            select_class_balanced_buffer(&scores, 2, &agg, &target, &mut rng).unwrap();
        let ids: Vec<SampleId> = chosen.iter().map(|c| c.0).collect();
        assert_eq!(ids, vec![1, 3]);
    }

    #[test]
    fn balanced_buffer_matches_step_oracle() {
        let mut rng = Rng::from_seed(8);
        let entries: Vec<(SampleId, Option<f64>, usize, Vec<u64>)> = (0..15)
            .map(|i| {
                let counts: Vec<u64> = (0..5).map(|_| rng.gen_range(0..7u64)).collect();
                (i, Some(0.0), 1, counts)
            })
            .collect();
        let scores = stats_scores(&entries);
        let target: BTreeSet<ClassId> = (0..5).collect();
        let agg = ClassHistogram::zeros(5);
        let (chosen, _) =
            select_class_balanced_buffer(&scores, 5, &agg, &target, &mut Rng::from_seed(9))
                .unwrap();

        // independent greedy re-implementation
        let mut left: Vec<usize> = (0..15).collect();
        let mut acc = vec![0u64; 5];
        let mut want = Vec::new();
        for _ in 0..5 {
            let mut best: Option<(f64, SampleId, usize)> = None;
            for (pos, &i) in left.iter().enumerate() {
                let mut cand = acc.clone();
                for (a, b) in cand.iter_mut().zip(&entries[i].3) {
                    *a += b;
                }
                let h = ClassHistogram {
                    counts: cand,
                    num_classes: 5,
                };
                let d = distribution_uniformity(&h, &target).unwrap_or(2.0);
                if best.is_none() || (d, entries[i].0) < (best.unwrap().0, best.unwrap().1) {
                    best = Some((d, entries[i].0, pos));
                }
            }
            let (_, id, pos) = best.unwrap();
            let i = left.remove(pos);
            for (a, b) in acc.iter_mut().zip(&entries[i].3) {
                *a += b;
            }
            want.push(id);
        }
        let got: Vec<SampleId> = chosen.iter().map(|c| c.0).collect();
        assert_eq!(got, want);
    }

    #[test]
    fn ambivalent_prefers_most_classes() {
        let scores = stats_scores(&[
            (0, Some(0.4), 3, vec![2, 2, 2, 0]),
            (1, Some(0.1), 1, vec![6, 0, 0, 0]),
            (2, Some(0.2), 2, vec![3, 3, 0, 0]),
        ]);
        let chosen = select_ambivalent(&scores, 1);
        assert_eq!(chosen[0].0, 0);

        // all tie on distinct count: uniformity breaks the tie, then id
        let scores = stats_scores(&[
            (4, Some(0.5), 2, vec![3, 3]),
            (2, Some(0.5), 2, vec![3, 3]),
            (9, Some(0.1), 2, vec![4, 3]),
        ]);
        let chosen = select_ambivalent(&scores, 2);
        assert_eq!(chosen[0].0, 9);
        assert_eq!(chosen[1].0, 2);
    }

    #[test]
    fn ambivalent_matches_sort_oracle() {
        let mut rng = Rng::from_seed(10);
        let entries: Vec<(SampleId, Option<f64>, usize, Vec<u64>)> = (0..20)
            .map(|i| {
                let counts: Vec<u64> = (0..6).map(|_| rng.gen_range(0..4u64)).collect();
                let h = ClassHistogram {
                    counts: counts.clone(),
                    num_classes: 6,
                };
                let target: BTreeSet<ClassId> = (0..6).collect();
                (i, distribution_uniformity(&h, &target), h.distinct(), counts)
            })
            .collect();
        let scores = stats_scores(&entries);
        let chosen = select_ambivalent(&scores, 7);

        let mut oracle: Vec<(i64, f64, SampleId)> = entries
            .iter()
            .map(|(id, u, d, _)| (-(*d as i64), u.unwrap_or(f64::INFINITY), *id))
            .collect();
        oracle.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let want: Vec<SampleId> = oracle.iter().take(7).map(|e| e.2).collect();
        let got: Vec<SampleId> = chosen.iter().map(|c| c.0).collect();
        assert_eq!(got, want);
    }

    fn scores_with_embeddings(items: &[(SampleId, f64, Vec<f64>)]) -> Vec<SampleScores> {
        items
            .iter()
            .map(|(id, u, e)| SampleScores {
                id: *id,
                task_id: 0,
                loss: None,
                entropy: None,
                tv_image: None,
                tv_label: None,
                naturalness: None,
                distinct_classes: Some(1),
                uniformity_distance: Some(*u),
                histogram: None,
                embedding: Some(e.clone()),
                gradient: None,
            })
            .collect()
    }

    #[test]
    fn diversity_pass_identical_embeddings_accepts_one() {
        let scores = scores_with_embeddings(&[
            (0, 0.1, vec![1.0, 0.0]),
            (1, 0.2, vec![1.0, 0.0]),
            (2, 0.3, vec![1.0, 0.0]),
        ]);
        let chosen = select_diverse_class_balanced(&scores, 2, 0.5).unwrap();
        // only one accepted by the pass; fallback fills from rejected
        assert_eq!(chosen.len(), 2);
        assert_eq!(chosen[0].0, 0);
        assert_eq!(chosen[1].0, 1);
    }

    #[test]
    fn zero_threshold_equals_balanced_samples() {
        let mut rng = Rng::from_seed(11);
        let items: Vec<(SampleId, f64, Vec<f64>)> = (0..12)
            .map(|i| {
                let e: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
                (i, rng.gen_range(0.0..2.0), e)
            })
            .collect();
        let scores = scores_with_embeddings(&items);
        let div = select_diverse_class_balanced(&scores, 5, 0.0).unwrap();
        let (bal, _) = select_class_balanced_samples(&scores, 5, &mut Rng::from_seed(1));
        let div_ids: Vec<SampleId> = div.iter().map(|c| c.0).collect();
        let bal_ids: Vec<SampleId> = bal.iter().map(|c| c.0).collect();
        assert_eq!(div_ids, bal_ids);
    }

    #[test]
    fn three_clusters_one_pick_each() {
        let scores = scores_with_embeddings(&[
            (0, 0.0, vec![1.0, 0.0]),
            (1, 0.1, vec![0.99, 0.01]),
            (2, 0.2, vec![0.0, 1.0]),
            (3, 0.3, vec![0.01, 0.99]),
            (4, 0.4, vec![-1.0, 0.0]),
            (5, 0.5, vec![-0.99, -0.01]),
        ]);
        let chosen = select_diverse_class_balanced(&scores, 3, 0.5).unwrap();
        let ids: BTreeSet<SampleId> = chosen.iter().map(|c| c.0).collect();
        assert_eq!(ids, [0, 2, 4].into_iter().collect());
    }

    fn grad(v: &[f64]) -> GradientVector {
        GradientVector::new(v.to_vec())
    }

    #[test]
    fn gss_score_examples() {
        let g = grad(&[1.0, 0.0, 0.0]);
        let same = grad(&[2.0, 0.0, 0.0]);
        let ortho = grad(&[0.0, 1.0, 0.0]);
        let mut rng = Rng::from_seed(12);
        assert_eq!(gss_score(&g, &[], 5, &mut rng), 0.0);
        assert!((gss_score(&g, &[&same], 5, &mut rng) - 1.0).abs() < 1e-12);
        assert_eq!(gss_score(&g, &[&ortho], 5, &mut rng), 0.0);
    }

    #[test]
    fn gss_score_full_pool_matches_exhaustive_max() {
        let mut rng = Rng::from_seed(13);
        let pool: Vec<GradientVector> = (0..8)
            .map(|_| grad(&[rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]))
            .collect();
        let refs: Vec<&GradientVector> = pool.iter().collect();
        let cand = grad(&[0.3, -0.2, 0.9]);
        let got = gss_score(&cand, &refs, 100, &mut rng);
        let want = refs
            .iter()
            .map(|g| cand.cosine(g))
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(got, want);
    }

    fn gradient_scores(grads: &[Vec<f64>]) -> Vec<SampleScores> {
        grads
            .iter()
            .enumerate()
            .map(|(i, g)| SampleScores {
                id: i as SampleId,
                task_id: 0,
                loss: None,
                entropy: None,
                tv_image: None,
                tv_label: None,
                naturalness: None,
                distinct_classes: None,
                uniformity_distance: None,
                histogram: None,
                embedding: None,
                gradient: Some(grad(g)),
            })
            .collect()
    }

    #[test]
    fn gss_keeps_everything_under_quota() {
        let scores = gradient_scores(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let mut rng = Rng::from_seed(14);
        let out = select_gss(&scores, 8, 5, &mut rng).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].1, 0.0); // first candidate scored on an empty pool
    }

    #[test]
    fn gss_identical_gradients_score_one_after_first() {
        let scores = gradient_scores(&vec![vec![1.0, 1.0]; 5]);
        let mut rng = Rng::from_seed(15);
        let out = select_gss(&scores, 10, 3, &mut rng).unwrap();
        assert_eq!(out[0].1, 0.0);
        for (_, s) in &out[1..] {
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn gss_is_seed_deterministic() {
        let mut rng = Rng::from_seed(16);
        let grads: Vec<Vec<f64>> = (0..20)
            .map(|_| (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let scores = gradient_scores(&grads);
        let a = select_gss(&scores, 6, 3, &mut Rng::from_seed(77)).unwrap();
        let b = select_gss(&scores, 6, 3, &mut Rng::from_seed(77)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn reduce_dim_full_rank_preserves_distances() {
        let mut rng = Rng::from_seed(17);
        let embeddings: Vec<Vec<f64>> = (0..12)
            .map(|_| (0..5).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .collect();
        let reduced = reduce_dim(&embeddings, 5).unwrap();
        for i in 0..embeddings.len() {
            for j in (i + 1)..embeddings.len() {
                let orig = sq_dist(&embeddings[i], &embeddings[j]).sqrt();
                let red = sq_dist(&reduced[i], &reduced[j]).sqrt();
                assert!((orig - red).abs() < 1e-6, "{} vs {}", orig, red);
            }
        }
    }

    #[test]
    fn reduce_dim_identical_points_land_at_origin() {
        let embeddings = vec![vec![3.0, -1.0, 2.0]; 6];
        let reduced = reduce_dim(&embeddings, 2).unwrap();
        for p in reduced {
            assert!(p.iter().all(|v| v.abs() < 1e-12));
        }
    }

    #[test]
    fn reduce_dim_recovers_planted_rank_two() {
        let mut rng = Rng::from_seed(18);
        // rank-2 data in 10 dimensions
        let basis: Vec<Vec<f64>> = (0..2)
            .map(|_| (0..10).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let embeddings: Vec<Vec<f64>> = (0..20)
            .map(|_| {
                let a: f64 = rng.gen_range(-2.0..2.0);
                let b: f64 = rng.gen_range(-2.0..2.0);
                (0..10).map(|i| a * basis[0][i] + b * basis[1][i]).collect()
            })
            .collect();
        let reduced = reduce_dim(&embeddings, 2).unwrap();
        // distances in the plane are preserved exactly when rank <= d
        for i in 0..20 {
            for j in (i + 1)..20 {
                let orig = sq_dist(&embeddings[i], &embeddings[j]).sqrt();
                let red = sq_dist(&reduced[i], &reduced[j]).sqrt();
                assert!((orig - red).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn reduce_dim_rejects_oversized_target() {
        let embeddings = vec![vec![1.0, 2.0]];
        assert!(reduce_dim(&embeddings, 3).is_err());
    }

    #[test]
    fn kmeans_k1_is_mean() {
        let points = vec![vec![0.0, 0.0], vec![2.0, 0.0], vec![1.0, 3.0]];
        let (centroids, assignments) = kmeans(&points, 1, &mut Rng::from_seed(19), 50);
        assert_eq!(assignments, vec![0, 0, 0]);
        assert!((centroids[0][0] - 1.0).abs() < 1e-12);
        assert!((centroids[0][1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn kmeans_k_equals_n_zero_inertia() {
        let points = vec![vec![0.0], vec![5.0], vec![9.0], vec![13.0]];
        let (centroids, assignments) = kmeans(&points, 4, &mut Rng::from_seed(20), 50);
        let inertia = kmeans_inertia(&points, &centroids, &assignments);
        assert!(inertia < 1e-18);
        let distinct: BTreeSet<usize> = assignments.iter().copied().collect();
        assert_eq!(distinct.len(), 4);
    }

    #[test]
    fn kmeans_two_blobs_matches_exhaustive_partition() {
        let points = vec![
            vec![0.0, 0.0],
            vec![0.1, 0.0],
            vec![0.0, 0.1],
            vec![5.0, 5.0],
            vec![5.1, 5.0],
            vec![5.0, 5.1],
        ];
        let (centroids, assignments) = kmeans(&points, 2, &mut Rng::from_seed(21), 100);
        let inertia = kmeans_inertia(&points, &centroids, &assignments);

        // brute force over all 2-partitions
        let mut best = f64::INFINITY;
        for mask in 1..(1 << 6) - 1 {
            let mut groups: [Vec<&Vec<f64>>; 2] = [Vec::new(), Vec::new()];
            for (i, p) in points.iter().enumerate() {
                groups[(mask >> i) & 1].push(p);
            }
            if groups[0].is_empty() || groups[1].is_empty() {
                continue;
            }
            let mut total = 0.0;
            for g in &groups {
                let mut mean = vec![0.0; 2];
                for p in g {
                    for (m, x) in mean.iter_mut().zip(p.iter()) {
                        *m += x;
                    }
                }
                for m in &mut mean {
                    *m /= g.len() as f64;
                }
                for p in g {
                    total += sq_dist(p, &mean);
                }
            }
            best = best.min(total);
        }
        assert!((inertia - best).abs() < 1e-9, "{} vs {}", inertia, best);
    }

    #[test]
    fn rss_quota_one_takes_nearest_to_mean() {
        let scores = scores_with_embeddings(&[
            (0, 0.0, vec![0.0, 0.0]),
            (1, 0.0, vec![1.0, 1.0]),
            (2, 0.0, vec![0.9, 1.1]),
            (3, 0.0, vec![2.0, 2.0]),
        ]);
        let out = select_rss(&scores, 1, 2, &mut Rng::from_seed(22)).unwrap();
        assert_eq!(out.len(), 1);
        // mean of embeddings is (0.975, 1.025); sample 1 sits closest
        assert_eq!(out[0].0, 1);
    }

    #[test]
    fn rss_three_clusters_one_each() {
        let scores = scores_with_embeddings(&[
            (0, 0.0, vec![0.0, 0.0, 0.0]),
            (1, 0.0, vec![0.1, 0.0, 0.0]),
            (2, 0.0, vec![10.0, 0.0, 0.0]),
            (3, 0.0, vec![10.1, 0.0, 0.0]),
            (4, 0.0, vec![0.0, 10.0, 0.0]),
            (5, 0.0, vec![0.1, 10.0, 0.0]),
        ]);
        let out = select_rss(&scores, 3, 2, &mut Rng::from_seed(23)).unwrap();
        let ids: BTreeSet<SampleId> = out.iter().map(|o| o.0).collect();
        let mut per_cluster = 0;
        for pair in [[0u64, 1], [2, 3], [4, 5]] {
            if ids.contains(&pair[0]) ^ ids.contains(&pair[1]) {
                per_cluster += 1;
            }
        }
        assert_eq!(per_cluster, 3, "expected one pick per blob, got {:?}", ids);
    }

    #[test]
    fn rss_duplicate_dataset_selects_same_underlying_points() {
        let mut rng = Rng::from_seed(24);
        let blob = |cx: f64, cy: f64, rng: &mut Rng| -> Vec<f64> {
            vec![cx + rng.gen_range(-0.05..0.05), cy + rng.gen_range(-0.05..0.05)]
        };
        let mut base: Vec<(SampleId, f64, Vec<f64>)> = Vec::new();
        for (i, (cx, cy)) in [(0.0, 0.0), (8.0, 0.0), (0.0, 8.0)].iter().enumerate() {
            for j in 0..3 {
                base.push(((i * 3 + j) as SampleId, 0.0, blob(*cx, *cy, &mut rng)));
            }
        }
        let single = scores_with_embeddings(&base);
        let mut doubled_items = base.clone();
        for (id, u, e) in &base {
            doubled_items.push((id + 9, *u, e.clone()));
        }
        let doubled = scores_with_embeddings(&doubled_items);

        let a = select_rss(&single, 3, 2, &mut Rng::from_seed(31)).unwrap();
        let b = select_rss(&doubled, 3, 2, &mut Rng::from_seed(32)).unwrap();
        let sa: BTreeSet<SampleId> = a.iter().map(|x| x.0).collect();
        let sb: BTreeSet<SampleId> = b.iter().map(|x| x.0 % 9).collect();
        assert_eq!(sa, sb);
    }

    #[test]
    fn policy_param_validation() {
        let mut p = SelectionPolicy::new(PolicyId::DivClassBal);
        p.th = 0.0;
        assert!(p.validate().is_err());
        p.th = 2.5;
        assert!(p.validate().is_err());
        p.th = 0.6;
        assert!(p.validate().is_ok());
        let mut p = SelectionPolicy::new(PolicyId::Gss);
        p.cmp = 0;
        assert!(p.validate().is_err());
    }

    #[test]
    fn policy_id_round_trips_strings() {
        for id in PolicyId::ALL {
            let s = id.to_string();
            let back: PolicyId = s.parse().unwrap();
            assert_eq!(id, back);
        }
        assert!("bogus".parse::<PolicyId>().is_err());
    }
}
