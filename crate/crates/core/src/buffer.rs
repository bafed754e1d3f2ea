//! Fixed-capacity replay memory with per-task quotas.
//!
//! The buffer stores whole samples together with the score their policy
//! assigned at selection time. When a new task arrives, every older
//! task's holding shrinks to its new quota through the policy's eviction
//! rule, then the new entries are inserted; capacity is never exceeded at
//! any intermediate point, which the `peak_len` instrumentation records.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scoring::distribution_uniformity;
use crate::types::{class_histogram, ClassHistogram, ClassId, Sample, SampleId};
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

/// Per-task counts: `floor(M/K)` each with the remainder handed to the
/// earliest tasks, which face the most forgetting pressure.
pub fn quota(capacity: usize, tasks_seen: usize) -> Vec<usize> {
    assert!(tasks_seen >= 1, "quota requires at least one task");
    let base = capacity / tasks_seen;
    let rem = capacity % tasks_seen;
    (0..tasks_seen)
        .map(|t| base + usize::from(t < rem))
        .collect()
}

/// One stored sample with its policy score.
#[derive(Debug, Clone)]
pub struct BufferEntry {
    pub sample: Sample,
    pub score: Option<f64>,
    pub inserted_at: usize,
}

/// How a policy shrinks old holdings when quotas tighten.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvictionRule {
    /// Seeded uniform choice of survivors.
    Random,
    /// Keep the lowest-scored entries (evict the highest).
    KeepLowest,
    /// Keep the highest-scored entries.
    KeepHighest,
    /// Keep a window centered on the lower median of the scores.
    KeepCentral,
    /// Keep the entries closest to the surviving set's mean score.
    KeepNearestMean,
    /// Greedily keep the subset that moves the whole buffer's class
    /// distribution closest to uniform.
    GreedyBalance,
}

#[derive(Debug, Clone, Default)]
pub struct SettleOutcome {
    /// Entries the policy offered beyond the new task's quota.
    pub truncated: usize,
    pub warnings: Vec<String>,
}

/// Manifest of the buffer state; serializable and lossless.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BufferManifest {
    pub capacity: usize,
    pub policy: String,
    pub entries: Vec<ManifestEntry>,
    pub per_task: BTreeMap<usize, usize>,
    pub aggregate_histogram: ClassHistogram,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: SampleId,
    pub task_id: usize,
    pub score: Option<f64>,
    pub inserted_at: usize,
}

#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    num_classes: usize,
    policy: String,
    entries: Vec<BufferEntry>,
    peak_len: usize,
}

fn sort_for_rule(entries: &mut [BufferEntry], ascending: bool) {
    entries.sort_by(|a, b| {
        let sa = a.score.unwrap_or(f64::INFINITY);
        let sb = b.score.unwrap_or(f64::INFINITY);
        let ord = sa.partial_cmp(&sb).unwrap_or(std::cmp::Ordering::Equal);
        let ord = if ascending { ord } else { ord.reverse() };
        ord.then(a.sample.id.cmp(&b.sample.id))
    });
}

/// Reduce `entries` to `keep` members under `rule`. `other_agg` is the
/// class histogram of the rest of the buffer, used by `GreedyBalance`.
fn shrink(
    mut entries: Vec<BufferEntry>,
    keep: usize,
    rule: EvictionRule,
    rng: &mut Rng,
    other_agg: &ClassHistogram,
    balance_target: &BTreeSet<ClassId>,
    num_classes: usize,
) -> Result<Vec<BufferEntry>> {
    if entries.len() <= keep {
        return Ok(entries);
    }
    match rule {
        EvictionRule::Random => {
            // partial Fisher-Yates: the first `keep` slots are the survivors
            for i in 0..keep {
                let j = rng.gen_range(i..entries.len());
                entries.swap(i, j);
            }
            entries.truncate(keep);
        }
        EvictionRule::KeepLowest => {
            sort_for_rule(&mut entries, true);
            entries.truncate(keep);
        }
        EvictionRule::KeepHighest => {
            sort_for_rule(&mut entries, false);
            entries.truncate(keep);
        }
        EvictionRule::KeepCentral => {
            sort_for_rule(&mut entries, true);
            let n = entries.len();
            let median = (n - 1) / 2;
            let start = median.saturating_sub((keep - 1) / 2).min(n - keep);
            entries = entries.into_iter().skip(start).take(keep).collect();
        }
        EvictionRule::KeepNearestMean => {
            let scores: Vec<f64> = entries.iter().map(|e| e.score.unwrap_or(0.0)).collect();
            let mean = scores.iter().sum::<f64>() / scores.len() as f64;
            entries.sort_by(|a, b| {
                let da = (a.score.unwrap_or(0.0) - mean).abs();
                let db = (b.score.unwrap_or(0.0) - mean).abs();
                da.partial_cmp(&db)
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(a.sample.id.cmp(&b.sample.id))
            });
            entries.truncate(keep);
        }
        EvictionRule::GreedyBalance => {
            let mut agg = other_agg.clone();
            let hists: Vec<ClassHistogram> = entries
                .iter()
                .map(|e| class_histogram(&e.sample.labels, num_classes))
                .collect::<Result<_>>()?;
            let mut remaining: Vec<usize> = (0..entries.len()).collect();
            let mut chosen: Vec<usize> = Vec::with_capacity(keep);
            for _ in 0..keep {
                let mut best: Option<(f64, SampleId, usize)> = None;
                for (pos, &idx) in remaining.iter().enumerate() {
                    let mut cand = agg.clone();
                    cand.add(&hists[idx]);
                    let d = distribution_uniformity(&cand, balance_target).unwrap_or(2.0);
                    let key = (d, entries[idx].sample.id, pos);
                    if best.is_none() || (key.0, key.1) < (best.unwrap().0, best.unwrap().1) {
                        best = Some(key);
                    }
                }
                let (_, _, pos) = best.expect("remaining non-empty");
                let idx = remaining.remove(pos);
                agg.add(&hists[idx]);
                chosen.push(idx);
            }
            chosen.sort_unstable();
            let mut kept = Vec::with_capacity(keep);
            for (i, e) in entries.into_iter().enumerate() {
                if chosen.binary_search(&i).is_ok() {
                    kept.push(e);
                }
            }
            entries = kept;
        }
    }
    Ok(entries)
}

impl ReplayBuffer {
    pub fn new(capacity: usize, num_classes: usize, policy: impl Into<String>) -> Self {
        ReplayBuffer {
            capacity,
            num_classes,
            policy: policy.into(),
            entries: Vec::new(),
            peak_len: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[BufferEntry] {
        &self.entries
    }

    /// Largest entry count observed at any point, including inside
    /// settles; must never exceed capacity.
    pub fn peak_len(&self) -> usize {
        self.peak_len
    }

    pub fn per_task_counts(&self) -> BTreeMap<usize, usize> {
        let mut m = BTreeMap::new();
        for e in &self.entries {
            *m.entry(e.inserted_at).or_insert(0) += 1;
        }
        m
    }

    pub fn samples(&self) -> Vec<Sample> {
        self.entries.iter().map(|e| e.sample.clone()).collect()
    }

    fn aggregate_internal(&self) -> Result<ClassHistogram> {
        let mut agg = ClassHistogram::zeros(self.num_classes);
        for e in &self.entries {
            agg.add(&class_histogram(&e.sample.labels, self.num_classes)?);
        }
        Ok(agg)
    }

    /// Class histogram over every stored label map.
    pub fn aggregate_histogram(&self) -> ClassHistogram {
        self.aggregate_internal()
            .expect("buffer labels were validated on entry")
    }

    fn observe(&mut self) {
        self.peak_len = self.peak_len.max(self.entries.len());
    }

    /// Finish task `task`: shrink old holdings to the reallocated quotas,
    /// then insert the new task's entries up to its own quota.
    pub fn settle_new_task(
        &mut self,
        task: usize,
        new_entries: Vec<BufferEntry>,
        rule: EvictionRule,
        balance_target: &BTreeSet<ClassId>,
        rng: &mut Rng,
    ) -> Result<SettleOutcome> {
        let mut outcome = SettleOutcome::default();
        for e in &new_entries {
            if e.inserted_at != task || e.sample.task_id != task {
                return Err(Error::Invariant(format!(
                    "entry {} does not originate from task {}",
                    e.sample.id, task
                )));
            }
        }
        if self.capacity == 0 {
            return Ok(outcome);
        }
        let quotas = quota(self.capacity, task + 1);

        // shrink old tasks first so capacity never overshoots
        let mut by_task: BTreeMap<usize, Vec<BufferEntry>> = BTreeMap::new();
        for e in std::mem::take(&mut self.entries) {
            by_task.entry(e.inserted_at).or_default().push(e);
        }
        let task_ids: Vec<usize> = by_task.keys().copied().collect();
        let mut done: Vec<BufferEntry> = Vec::new();
        for t in task_ids {
            let held = by_task.remove(&t).expect("key just listed");
            let keep = quotas.get(t).copied().unwrap_or(0);
            let mut other_agg = ClassHistogram::zeros(self.num_classes);
            if matches!(rule, EvictionRule::GreedyBalance) {
                // everything except this task's holding
                for e in done.iter().chain(by_task.values().flatten()) {
                    other_agg.add(&class_histogram(&e.sample.labels, self.num_classes)?);
                }
            }
            let shrunk = shrink(
                held,
                keep,
                rule,
                rng,
                &other_agg,
                balance_target,
                self.num_classes,
            )?;
            done.extend(shrunk);
        }
        self.entries = done;
        self.observe();

        // insert the new task, truncating oversupply with the same rule
        let new_quota = quotas[task];
        let offered = new_entries.len();
        let mut incoming = new_entries;
        if offered > new_quota {
            outcome.truncated = offered - new_quota;
            outcome.warnings.push(format!(
                "policy offered {} entries for task {} but quota is {}; truncated",
                offered, task, new_quota
            ));
            let other_agg = self.aggregate_internal()?;
            incoming = shrink(
                incoming,
                new_quota,
                rule,
                rng,
                &other_agg,
                balance_target,
                self.num_classes,
            )?;
        }
        for e in incoming {
            class_histogram(&e.sample.labels, self.num_classes)?; // validate labels on entry
            self.entries.push(e);
            self.observe();
            if self.entries.len() > self.capacity {
                return Err(Error::Invariant(format!(
                    "buffer exceeded capacity {} during settle of task {}",
                    self.capacity, task
                )));
            }
        }

        // canonical order: by task then id
        self.entries
            .sort_by_key(|e| (e.inserted_at, e.sample.id));
        Ok(outcome)
    }

    /// `n` uniform draws with replacement. An empty buffer yields an
    /// empty result (the first task has nothing to replay).
    pub fn retrieve_uniform(&self, n: usize, rng: &mut Rng) -> Vec<Sample> {
        if self.entries.is_empty() {
            return Vec::new();
        }
        (0..n)
            .map(|_| self.entries[rng.gen_range(0..self.entries.len())].sample.clone())
            .collect()
    }

    pub fn manifest(&self) -> BufferManifest {
        BufferManifest {
            capacity: self.capacity,
            policy: self.policy.clone(),
            entries: self
                .entries
                .iter()
                .map(|e| ManifestEntry {
                    id: e.sample.id,
                    task_id: e.sample.task_id,
                    score: e.score,
                    inserted_at: e.inserted_at,
                })
                .collect(),
            per_task: self.per_task_counts(),
            aggregate_histogram: self.aggregate_histogram(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::types::{Image, LabelMap};
    use proptest::{prop_assert, prop_assert_eq, proptest};

    fn entry(id: SampleId, task: usize, score: Option<f64>, class: u8) -> BufferEntry {
        BufferEntry {
            sample: Sample {
                id,
                image: Image::new(3, 2, 2, vec![0.5; 12]).unwrap(),
                labels: LabelMap::filled(2, 2, class),
                task_id: task,
            },
            score,
            inserted_at: task,
        }
    }

    #[test]
    fn quota_examples() {
        assert_eq!(quota(64, 2), vec![32, 32]);
        assert_eq!(quota(64, 3), vec![22, 21, 21]);
        assert_eq!(quota(64, 1), vec![64]);
    }

    proptest! {
        #[test]
        fn quota_sums_to_capacity(m in 1usize..200, k in 1usize..20) {
            let q = quota(m, k);
            prop_assert_eq!(q.iter().sum::<usize>(), m);
            // earliest tasks get the remainder
            for w in q.windows(2) {
                prop_assert!(w[0] >= w[1]);
                prop_assert!(w[0] - w[1] <= 1);
            }
        }
    }

    #[test]
    fn first_settle_keeps_all_offered() {
        let mut buf = ReplayBuffer::new(64, 4, "random");
        let target: BTreeSet<ClassId> = (0..4).collect();
        let entries: Vec<BufferEntry> = (0..32).map(|i| entry(i, 0, None, 0)).collect();
        let mut rng = Rng::from_seed(1);
        buf.settle_new_task(0, entries, EvictionRule::Random, &target, &mut rng)
            .unwrap();
        assert_eq!(buf.len(), 32);
        assert!(buf.peak_len() <= 64);
    }

    #[test]
    fn second_task_shrinks_first_to_quota() {
        let mut buf = ReplayBuffer::new(64, 4, "random");
        let target: BTreeSet<ClassId> = (0..4).collect();
        let mut rng = Rng::from_seed(2);
        let t0: Vec<BufferEntry> = (0..64).map(|i| entry(i, 0, None, 0)).collect();
        buf.settle_new_task(0, t0, EvictionRule::Random, &target, &mut rng)
            .unwrap();
        assert_eq!(buf.len(), 64);
        let t1: Vec<BufferEntry> = (100..132).map(|i| entry(i, 1, None, 1)).collect();
        buf.settle_new_task(1, t1, EvictionRule::Random, &target, &mut rng)
            .unwrap();
        let counts = buf.per_task_counts();
        assert_eq!(counts[&0], 32);
        assert_eq!(counts[&1], 32);
        assert!(buf.peak_len() <= 64);
    }

    #[test]
    fn keep_lowest_evicts_highest_scores() {
        let mut buf = ReplayBuffer::new(4, 4, "gss");
        let target: BTreeSet<ClassId> = (0..4).collect();
        let mut rng = Rng::from_seed(3);
        let t0 = vec![
            entry(0, 0, Some(0.9), 0),
            entry(1, 0, Some(0.1), 0),
            entry(2, 0, Some(0.5), 0),
            entry(3, 0, Some(0.7), 0),
        ];
        buf.settle_new_task(0, t0, EvictionRule::KeepLowest, &target, &mut rng)
            .unwrap();
        let t1 = vec![entry(10, 1, Some(0.2), 1), entry(11, 1, Some(0.3), 1)];
        buf.settle_new_task(1, t1, EvictionRule::KeepLowest, &target, &mut rng)
            .unwrap();
        // task 0 shrank to 2: the two lowest scores survive
        let ids: Vec<SampleId> = buf
            .entries()
            .iter()
            .filter(|e| e.inserted_at == 0)
            .map(|e| e.sample.id)
            .collect();
        assert_eq!(ids, vec![1, 2]);
    }

    #[test]
    fn retrieve_uniform_basics() {
        let mut buf = ReplayBuffer::new(8, 4, "random");
        let target: BTreeSet<ClassId> = (0..4).collect();
        let mut rng = Rng::from_seed(4);
        assert!(buf.retrieve_uniform(5, &mut rng).is_empty());
        buf.settle_new_task(0, vec![entry(7, 0, None, 0)], EvictionRule::Random, &target, &mut rng)
            .unwrap();
        let drawn = buf.retrieve_uniform(5, &mut rng);
        assert_eq!(drawn.len(), 5);
        assert!(drawn.iter().all(|s| s.id == 7));
        assert!(buf.retrieve_uniform(0, &mut rng).is_empty());
    }

    #[test]
    fn retrieval_frequencies_near_uniform() {
        let mut buf = ReplayBuffer::new(64, 4, "random");
        let target: BTreeSet<ClassId> = (0..4).collect();
        let mut rng = Rng::from_seed(5);
        let t0: Vec<BufferEntry> = (0..64).map(|i| entry(i, 0, None, 0)).collect();
        buf.settle_new_task(0, t0, EvictionRule::Random, &target, &mut rng)
            .unwrap();
        let draws = buf.retrieve_uniform(640_000, &mut rng);
        let mut freq = vec![0usize; 64];
        for s in draws {
            freq[s.id as usize] += 1;
        }
        for f in freq {
            let rel = f as f64 / 10_000.0;
            assert!((rel - 1.0).abs() < 0.05, "frequency {} outside 5%", rel);
        }
    }

    #[test]
    fn manifest_round_trips_and_aggregates() {
        let mut buf = ReplayBuffer::new(8, 4, "random");
        let target: BTreeSet<ClassId> = (0..4).collect();
        let mut rng = Rng::from_seed(6);
        let empty = buf.manifest();
        assert!(empty.entries.is_empty());
        assert_eq!(empty.aggregate_histogram.total(), 0);

        let t0 = vec![entry(0, 0, Some(0.5), 1), entry(1, 0, Some(0.25), 2)];
        buf.settle_new_task(0, t0, EvictionRule::KeepLowest, &target, &mut rng)
            .unwrap();
        let m = buf.manifest();
        let json = serde_json::to_string(&m).unwrap();
        let back: BufferManifest = serde_json::from_str(&json).unwrap();
        assert_eq!(m, back);

        // aggregate equals the sum of per-entry histograms
        let mut want = ClassHistogram::zeros(4);
        for e in buf.entries() {
            want.add(&class_histogram(&e.sample.labels, 4).unwrap());
        }
        assert_eq!(m.aggregate_histogram, want);
    }

    #[test]
    fn oversupply_truncates_with_warning() {
        let mut buf = ReplayBuffer::new(4, 4, "loss_min");
        let target: BTreeSet<ClassId> = (0..4).collect();
        let mut rng = Rng::from_seed(7);
        let t0: Vec<BufferEntry> = (0..10).map(|i| entry(i, 0, Some(i as f64), 0)).collect();
        let out = buf
            .settle_new_task(0, t0, EvictionRule::KeepLowest, &target, &mut rng)
            .unwrap();
        assert_eq!(out.truncated, 6);
        assert!(!out.warnings.is_empty());
        assert_eq!(buf.len(), 4);
        let ids: Vec<SampleId> = buf.entries().iter().map(|e| e.sample.id).collect();
        assert_eq!(ids, vec![0, 1, 2, 3]);
    }
}
