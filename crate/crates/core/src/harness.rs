//! End-to-end continual-learning drivers.
//!
//! `run_continual` walks a task sequence: train (with replay and, for
//! class-incremental runs, a frozen teacher snapshot), evaluate on every
//! seen validation set, select samples from the finished task only, and
//! settle the buffer under reallocated quotas. The selection step is
//! handed nothing but the finished task, the buffer and the current
//! model, so it cannot peek at future data by construction.

use crate::buffer::{quota, ReplayBuffer};
use crate::config::{DistillMode, RunConfig};
use crate::dataset::{load_dataset, save_dataset};
use crate::error::{Error, Result};
use crate::metrics::{cka_drift, confusion, miou, recency_bias, CkaCurve, ConfusionMatrix};
use crate::model::{
    predict, save_checkpoint, train_task, ReplayMix, ToySegModel, TrainParams,
};
use crate::policies::{select, PolicyId, SelectionPolicy};
use crate::rng::Rng;
use crate::scoring::score_dataset;
use crate::synthdata::{generate_scenario, ScenarioSpec};
use crate::types::{ClassId, LabelMap, Sample, SampleId, ScenarioKind, TaskDef, IGNORE};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

/// Mapping between dataset class ids and the model's output slots. Slots
/// are appended in task order, so a teacher's outputs are always a prefix
/// of the student's.
#[derive(Debug, Clone)]
pub struct ClassMapping {
    slot_to_global: Vec<ClassId>,
    global_to_slot: [u8; 256],
}

impl ClassMapping {
    pub fn new() -> Self {
        ClassMapping {
            slot_to_global: Vec::new(),
            global_to_slot: [IGNORE; 256],
        }
    }

    pub fn extend(&mut self, classes: &BTreeSet<ClassId>) {
        for &c in classes {
            if self.global_to_slot[c as usize] == IGNORE {
                self.global_to_slot[c as usize] = self.slot_to_global.len() as u8;
                self.slot_to_global.push(c);
            }
        }
    }

    pub fn slots(&self) -> usize {
        self.slot_to_global.len()
    }

    pub fn table(&self) -> &[u8; 256] {
        &self.global_to_slot
    }

    pub fn labels_to_slots(&self, labels: &LabelMap) -> LabelMap {
        LabelMap {
            height: labels.height,
            width: labels.width,
            data: labels
                .data
                .iter()
                .map(|&v| self.global_to_slot[v as usize])
                .collect(),
        }
    }

    pub fn slots_to_global(&self, preds: &LabelMap) -> LabelMap {
        LabelMap {
            height: preds.height,
            width: preds.width,
            data: preds
                .data
                .iter()
                .map(|&v| {
                    self.slot_to_global
                        .get(v as usize)
                        .copied()
                        .unwrap_or(IGNORE)
                })
                .collect(),
        }
    }

    fn remap_samples(&self, samples: &[Sample]) -> Vec<Sample> {
        samples
            .iter()
            .map(|s| Sample {
                id: s.id,
                image: s.image.clone(),
                labels: self.labels_to_slots(&s.labels),
                task_id: s.task_id,
            })
            .collect()
    }
}

impl Default for ClassMapping {
    fn default() -> Self {
        Self::new()
    }
}

/// One evaluation record, written after training each task.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StepRecord {
    pub task: usize,
    pub train_loss_first_epoch: Option<f64>,
    pub train_loss_last_epoch: Option<f64>,
    pub miou_all_seen: Option<f64>,
    pub excluded_classes: usize,
    /// Mean IoU over each task's labeled class subset; `null` until that
    /// task has been seen (and for subsets absent from the val pixels).
    pub subset_miou: Vec<Option<f64>>,
    /// IoU per dataset class id; `null` for classes without pixels.
    pub per_class_iou: Vec<Option<f64>>,
    pub recency_bias_old_vs_newest: Option<f64>,
    pub recency_bias_exclusive: Option<f64>,
    pub buffer_size: usize,
    pub buffer_per_task: Vec<usize>,
    pub buffer_peak: usize,
    pub warnings: Vec<String>,
}

/// `metrics.json` contents.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsFile {
    pub schema: String,
    pub mode: String,
    pub seed: u64,
    pub scenario: String,
    pub policy: String,
    pub policy_params: String,
    pub buffer_capacity: usize,
    pub epochs: usize,
    pub distill: String,
    pub num_classes: usize,
    pub task_classes: Vec<Vec<ClassId>>,
    pub exclusive_classes: Vec<ClassId>,
    pub steps: Vec<StepRecord>,
    pub invariant_violations: Vec<String>,
    #[serde(default)]
    pub error: Option<String>,
}

/// Everything a finished (or aborted) run left on disk.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub out_dir: PathBuf,
    pub metrics: MetricsFile,
}

impl RunArtifacts {
    pub fn metrics_path(dir: &Path) -> PathBuf {
        dir.join("metrics.json")
    }

    pub fn load(dir: &Path) -> Result<RunArtifacts> {
        let path = Self::metrics_path(dir);
        let bytes = fs::read(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let metrics: MetricsFile = serde_json::from_slice(&bytes)
            .map_err(|e| Error::json(path.display().to_string(), e))?;
        Ok(RunArtifacts {
            out_dir: dir.to_path_buf(),
            metrics,
        })
    }
}

/// A resolved scenario: the tasks, the unmasked labels when available,
/// and the classes that exist only in one task's images.
pub struct Scenario {
    pub tasks: Vec<TaskDef>,
    pub true_labels: BTreeMap<SampleId, LabelMap>,
    pub exclusive_classes: BTreeSet<ClassId>,
    pub num_classes: usize,
    pub kind: ScenarioKind,
}

/// `scenario.json` written next to generated datasets.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioFile {
    pub seed: u64,
    pub spec: ScenarioSpec,
}

/// Generate the dataset described by `cfg` in-process.
pub fn scenario_from_config(cfg: &RunConfig) -> Result<Scenario> {
    let spec = cfg.scenario_spec()?;
    let rng = Rng::from_seed(cfg.seed).substream("data");
    let generated = generate_scenario(&spec, &rng)?;
    Ok(Scenario {
        tasks: generated.tasks,
        true_labels: generated.true_labels,
        exclusive_classes: spec.exclusive_classes.iter().copied().collect(),
        num_classes: spec.num_classes,
        kind: spec.kind,
    })
}

/// Load a dataset directory (written by `gen-data`) as a scenario.
pub fn scenario_from_dir(dir: &Path) -> Result<Scenario> {
    let ds = load_dataset(dir)?;
    let mut exclusive = BTreeSet::new();
    let scenario_path = dir.join("scenario.json");
    if scenario_path.exists() {
        let bytes = fs::read(&scenario_path)
            .map_err(|e| Error::io(scenario_path.display().to_string(), e))?;
        let file: ScenarioFile = serde_json::from_slice(&bytes)
            .map_err(|e| Error::json(scenario_path.display().to_string(), e))?;
        exclusive = file.spec.exclusive_classes.iter().copied().collect();
    }
    Ok(Scenario {
        kind: ds.index.scenario,
        num_classes: ds.index.num_classes,
        tasks: ds.tasks,
        true_labels: ds.true_labels,
        exclusive_classes: exclusive,
    })
}

/// Resolve the scenario for a run: load `data` when configured, generate
/// otherwise.
pub fn resolve_scenario(cfg: &RunConfig) -> Result<Scenario> {
    match &cfg.data_dir {
        Some(dir) => scenario_from_dir(dir),
        None => scenario_from_config(cfg),
    }
}

/// Generate and persist a dataset plus its `scenario.json`.
pub fn gen_data(cfg: &RunConfig, out: &Path) -> Result<()> {
    let spec = cfg.scenario_spec()?;
    let rng = Rng::from_seed(cfg.seed).substream("data");
    let generated = generate_scenario(&spec, &rng)?;
    save_dataset(
        out,
        spec.kind,
        spec.num_classes,
        &spec.class_names(),
        &generated.tasks,
        &generated.true_labels,
    )?;
    let file = ScenarioFile {
        seed: cfg.seed,
        spec,
    };
    let path = out.join("scenario.json");
    let json = serde_json::to_vec_pretty(&file)
        .map_err(|e| Error::json(path.display().to_string(), e))?;
    fs::write(&path, json).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent.display().to_string(), e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let json = serde_json::to_vec_pretty(value)
        .map_err(|e| Error::json(path.display().to_string(), e))?;
    write_bytes(path, &json)
}

fn eval_confusion(
    model: &ToySegModel,
    val: &[&Sample],
    mapping: &ClassMapping,
    num_classes: usize,
) -> Result<ConfusionMatrix> {
    let parts: Vec<Result<ConfusionMatrix>> = val
        .par_iter()
        .map(|s| {
            let pred_slots = predict(model, &s.image)?;
            let pred = mapping.slots_to_global(&pred_slots);
            confusion(&pred, &s.labels, num_classes)
        })
        .collect();
    let mut total = ConfusionMatrix::zeros(num_classes);
    for p in parts {
        total.add(&p?);
    }
    Ok(total)
}

fn distill_active(cfg: &RunConfig, kind: ScenarioKind) -> bool {
    match cfg.distill {
        DistillMode::Auto => kind == ScenarioKind::ClassIncremental,
        DistillMode::On => true,
        DistillMode::Off => false,
    }
}

/// Train over the task sequence with replay, evaluating after every task.
pub fn run_continual(
    cfg: &RunConfig,
    scenario: &Scenario,
    config_echo: &[u8],
    out_dir: &Path,
) -> Result<RunArtifacts> {
    cfg.validate()?;
    let tasks = &scenario.tasks;
    let num_classes = scenario.num_classes;
    TaskDef::validate_sequence(tasks, num_classes)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    write_bytes(&out_dir.join("config.txt"), config_echo)?;

    let root = Rng::from_seed(cfg.seed);
    let mut mapping = ClassMapping::new();
    mapping.extend(&tasks[0].labeled_classes);
    let mut model = ToySegModel::init(
        cfg.patch,
        cfg.h1,
        cfg.h2,
        mapping.slots(),
        &mut root.substream("init"),
    );
    let mut buffer = ReplayBuffer::new(
        cfg.buffer_capacity,
        num_classes,
        cfg.policy.id.to_string(),
    );

    let mut metrics = MetricsFile {
        schema: "metrics/v1".into(),
        mode: "continual".into(),
        seed: cfg.seed,
        scenario: scenario.kind.to_string(),
        policy: cfg.policy.id.to_string(),
        policy_params: cfg.policy.params_string(),
        buffer_capacity: cfg.buffer_capacity,
        epochs: cfg.epochs,
        distill: cfg.distill.to_string(),
        num_classes,
        task_classes: tasks
            .iter()
            .map(|t| t.labeled_classes.iter().copied().collect())
            .collect(),
        exclusive_classes: scenario.exclusive_classes.iter().copied().collect(),
        steps: Vec::new(),
        invariant_violations: Vec::new(),
        error: None,
    };

    let mut seen_classes: BTreeSet<ClassId> = BTreeSet::new();
    let mut snapshot_task0: Option<ToySegModel> = None;
    let mut cka_curves: Vec<(usize, CkaCurve)> = Vec::new();
    let mut total_steps: u64 = 0;

    let persist = |metrics: &MetricsFile, out_dir: &Path| -> Result<()> {
        write_json(&RunArtifacts::metrics_path(out_dir), metrics)
    };

    for (k, task) in tasks.iter().enumerate() {
        let old_slots = mapping.slots();
        let teacher = if k > 0 && distill_active(cfg, scenario.kind) {
            Some(model.clone())
        } else {
            None
        };
        mapping.extend(&task.labeled_classes);
        if mapping.slots() > model.num_classes {
            model.grow_head(mapping.slots());
        }
        seen_classes.extend(task.labeled_classes.iter().copied());

        // train on the task plus the buffer contents
        let train_slot = mapping.remap_samples(&task.train_samples);
        let replay_slot = if buffer.is_empty() {
            Vec::new()
        } else {
            mapping.remap_samples(&buffer.samples())
        };
        let params = TrainParams {
            epochs: cfg.epochs,
            batch_size: cfg.batch_size,
            base_lr: cfg.learning_rate,
            poly_power: cfg.poly_power,
            lambda: cfg.lambda,
            replay_mix: cfg.replay_mix,
        };
        let mut train_rng = root.substream_indexed("train", k as u64);
        let report = match train_task(
            &mut model,
            &train_slot,
            &replay_slot,
            &params,
            teacher.as_ref(),
            old_slots,
            &mut train_rng,
        ) {
            Ok(r) => r,
            Err(e) => {
                metrics.error = Some(format!("task {}: {}", k, e));
                persist(&metrics, out_dir)?;
                write_json(
                    &out_dir.join("error.json"),
                    &serde_json::json!({ "task": k, "error": e.to_string() }),
                )?;
                return Err(e);
            }
        };
        total_steps += report.step_losses.len() as u64;

        // evaluate on every seen task's validation set
        let val: Vec<&Sample> = tasks[..=k]
            .iter()
            .flat_map(|t| t.val_samples.iter())
            .collect();
        let cm = eval_confusion(&model, &val, &mapping, num_classes)?;
        write_bytes(
            &out_dir.join(format!("confusion_{}.csv", k)),
            cm.to_csv().as_bytes(),
        )?;

        let all_seen = miou(&cm, &seen_classes);
        let mut per_class_iou = vec![None; num_classes];
        for (c, iou) in &all_seen.per_class {
            per_class_iou[*c as usize] = *iou;
        }
        let subset_miou: Vec<Option<f64>> = tasks
            .iter()
            .enumerate()
            .map(|(j, t)| {
                if j <= k {
                    miou(&cm, &t.labeled_classes).miou
                } else {
                    None
                }
            })
            .collect();
        let recency_old_newest = if scenario.kind == ScenarioKind::ClassIncremental && k > 0 {
            let old: BTreeSet<ClassId> = tasks[..k]
                .iter()
                .flat_map(|t| t.labeled_classes.iter().copied())
                .collect();
            recency_bias(&cm, &old, &task.labeled_classes)
        } else {
            None
        };
        let recency_exclusive = if !scenario.exclusive_classes.is_empty()
            && scenario
                .exclusive_classes
                .iter()
                .all(|c| seen_classes.contains(c))
            && scenario
                .exclusive_classes
                .iter()
                .all(|c| !task.labeled_classes.contains(c))
        {
            recency_bias(&cm, &scenario.exclusive_classes, &task.labeled_classes)
        } else {
            None
        };

        // selection sees only the finished task, the buffer and the model
        let mut warnings = Vec::new();
        if cfg.policy.id != PolicyId::None && cfg.buffer_capacity > 0 {
            let scores = score_dataset(
                Some(&model),
                &task.train_samples,
                &task.labeled_classes,
                num_classes,
                &cfg.policy.required_scores(),
                Some(mapping.table()),
            )?;
            let task_quota = quota(cfg.buffer_capacity, k + 1)[k];
            let mut select_rng = root.substream_indexed("select", k as u64);
            let result = select(
                &cfg.policy,
                &task.train_samples,
                &scores,
                task_quota,
                &buffer,
                &seen_classes,
                &mut select_rng,
            )?;
            warnings.extend(result.warnings.iter().cloned());

            let train_ids: BTreeSet<SampleId> =
                task.train_samples.iter().map(|s| s.id).collect();
            for e in &result.entries {
                if !train_ids.contains(&e.sample.id) || e.inserted_at != k {
                    metrics.invariant_violations.push(format!(
                        "selection for task {} produced entry {} outside the task",
                        k, e.sample.id
                    ));
                }
            }

            let before_counts = buffer.per_task_counts();
            let outcome = buffer.settle_new_task(
                k,
                result.entries,
                result.eviction,
                &seen_classes,
                &mut root.substream_indexed("settle", k as u64),
            )?;
            warnings.extend(outcome.warnings);

            // buffer invariants: capacity, provenance, quota exactness
            if buffer.peak_len() > cfg.buffer_capacity {
                metrics.invariant_violations.push(format!(
                    "buffer peak {} exceeded capacity {}",
                    buffer.peak_len(),
                    cfg.buffer_capacity
                ));
            }
            let quotas = quota(cfg.buffer_capacity, k + 1);
            let counts = buffer.per_task_counts();
            for (&t, &n) in &counts {
                if t > k {
                    metrics
                        .invariant_violations
                        .push(format!("buffer holds entries from future task {}", t));
                }
                let expected = if t == k {
                    quotas[t].min(task.train_samples.len())
                } else {
                    quotas[t].min(before_counts.get(&t).copied().unwrap_or(0))
                };
                if n != expected {
                    metrics.invariant_violations.push(format!(
                        "task {} holds {} entries after settling task {}, expected {}",
                        t, n, k, expected
                    ));
                }
            }
            write_json(
                &out_dir.join(format!("buffer_manifest_{}.json", k)),
                &buffer.manifest(),
            )?;
            write_json(&out_dir.join("buffer_manifest.json"), &buffer.manifest())?;
        }

        save_checkpoint(
            &model,
            total_steps,
            &out_dir.join(format!("model_task{}.bin", k)),
            &out_dir.join(format!("model_task{}.json", k)),
        )?;

        if k == 0 {
            snapshot_task0 = Some(model.clone());
        } else if scenario.kind == ScenarioKind::DomainIncremental {
            // architecture is stable in the domain-incremental setting
            let probe = &tasks[0].val_samples;
            let curve = cka_drift(
                snapshot_task0.as_ref().expect("snapshot set at k == 0"),
                &model,
                probe,
                2000,
                &mut root.substream("cka"),
            )?;
            cka_curves.push((k, curve));
        }

        metrics.steps.push(StepRecord {
            task: k,
            train_loss_first_epoch: report.epoch_means.first().copied(),
            train_loss_last_epoch: report.epoch_means.last().copied(),
            miou_all_seen: all_seen.miou,
            excluded_classes: all_seen.excluded,
            subset_miou,
            per_class_iou,
            recency_bias_old_vs_newest: recency_old_newest,
            recency_bias_exclusive: recency_exclusive,
            buffer_size: buffer.len(),
            buffer_per_task: (0..tasks.len())
                .map(|t| buffer.per_task_counts().get(&t).copied().unwrap_or(0))
                .collect(),
            buffer_peak: buffer.peak_len(),
            warnings,
        });
        persist(&metrics, out_dir)?;
    }

    if let Some((_, final_curve)) = cka_curves.last() {
        let mut csv = String::from("layer,value\n");
        for (layer, value) in final_curve.rows() {
            csv.push_str(&format!("{},{}\n", layer, value));
        }
        write_bytes(&out_dir.join("cka.csv"), csv.as_bytes())?;
        for (k, curve) in &cka_curves[..cka_curves.len() - 1] {
            let mut csv = String::from("layer,value\n");
            for (layer, value) in curve.rows() {
                csv.push_str(&format!("{},{}\n", layer, value));
            }
            write_bytes(&out_dir.join(format!("cka_step{}.csv", k)), csv.as_bytes())?;
        }
    }

    persist(&metrics, out_dir)?;
    if !metrics.invariant_violations.is_empty() {
        return Err(Error::Invariant(format!(
            "{} invariant violations recorded in {}",
            metrics.invariant_violations.len(),
            out_dir.display()
        )));
    }
    Ok(RunArtifacts {
        out_dir: out_dir.to_path_buf(),
        metrics,
    })
}

/// Joint training on the union of all tasks with full labels; the upper
/// bound every continual run is compared against.
pub fn run_offline(
    cfg: &RunConfig,
    scenario: &Scenario,
    config_echo: &[u8],
    out_dir: &Path,
) -> Result<RunArtifacts> {
    cfg.validate()?;
    let tasks = &scenario.tasks;
    let num_classes = scenario.num_classes;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    write_bytes(&out_dir.join("config.txt"), config_echo)?;

    let mut mapping = ClassMapping::new();
    for t in tasks {
        mapping.extend(&t.labeled_classes);
    }

    // union training set with unmasked labels
    let mut union: Vec<Sample> = Vec::new();
    for t in tasks {
        for s in &t.train_samples {
            let labels = match scenario.true_labels.get(&s.id) {
                Some(l) => l.clone(),
                None if scenario.kind == ScenarioKind::DomainIncremental => s.labels.clone(),
                None => {
                    return Err(Error::Config(format!(
                        "sample {} lacks unmasked labels required for offline training",
                        s.id
                    )))
                }
            };
            union.push(Sample {
                id: s.id,
                image: s.image.clone(),
                labels,
                task_id: s.task_id,
            });
        }
    }

    let root = Rng::from_seed(cfg.seed);
    let mut model = ToySegModel::init(
        cfg.patch,
        cfg.h1,
        cfg.h2,
        mapping.slots(),
        &mut root.substream("init"),
    );
    let train_slot = mapping.remap_samples(&union);
    let params = TrainParams {
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        base_lr: cfg.learning_rate,
        poly_power: cfg.poly_power,
        lambda: cfg.lambda,
        replay_mix: ReplayMix::Concat,
    };
    let mut train_rng = root.substream_indexed("train", 0);
    let report = train_task(&mut model, &train_slot, &[], &params, None, 0, &mut train_rng)?;

    let val: Vec<&Sample> = tasks.iter().flat_map(|t| t.val_samples.iter()).collect();
    let cm = eval_confusion(&model, &val, &mapping, num_classes)?;
    let last = tasks.len() - 1;
    write_bytes(
        &out_dir.join(format!("confusion_{}.csv", last)),
        cm.to_csv().as_bytes(),
    )?;

    let seen: BTreeSet<ClassId> = tasks
        .iter()
        .flat_map(|t| t.labeled_classes.iter().copied())
        .collect();
    let all_seen = miou(&cm, &seen);
    let mut per_class_iou = vec![None; num_classes];
    for (c, iou) in &all_seen.per_class {
        per_class_iou[*c as usize] = *iou;
    }

    let metrics = MetricsFile {
        schema: "metrics/v1".into(),
        mode: "offline".into(),
        seed: cfg.seed,
        scenario: scenario.kind.to_string(),
        policy: "offline".into(),
        policy_params: String::new(),
        buffer_capacity: 0,
        epochs: cfg.epochs,
        distill: DistillMode::Off.to_string(),
        num_classes,
        task_classes: tasks
            .iter()
            .map(|t| t.labeled_classes.iter().copied().collect())
            .collect(),
        exclusive_classes: scenario.exclusive_classes.iter().copied().collect(),
        steps: vec![StepRecord {
            task: last,
            train_loss_first_epoch: report.epoch_means.first().copied(),
            train_loss_last_epoch: report.epoch_means.last().copied(),
            miou_all_seen: all_seen.miou,
            excluded_classes: all_seen.excluded,
            subset_miou: tasks
                .iter()
                .map(|t| miou(&cm, &t.labeled_classes).miou)
                .collect(),
            per_class_iou,
            recency_bias_old_vs_newest: None,
            recency_bias_exclusive: None,
            buffer_size: 0,
            buffer_per_task: vec![0; tasks.len()],
            buffer_peak: 0,
            warnings: Vec::new(),
        }],
        invariant_violations: Vec::new(),
        error: None,
    };
    save_checkpoint(
        &model,
        report.step_losses.len() as u64,
        &out_dir.join(format!("model_task{}.bin", last)),
        &out_dir.join(format!("model_task{}.json", last)),
    )?;
    write_json(&RunArtifacts::metrics_path(out_dir), &metrics)?;
    Ok(RunArtifacts {
        out_dir: out_dir.to_path_buf(),
        metrics,
    })
}

// --- experiment grids ---

/// One grid cell: a policy configuration at a buffer size and seed.
#[derive(Debug, Clone)]
pub struct GridCell {
    pub policy: SelectionPolicy,
    pub buffer_capacity: usize,
    pub seed: u64,
}

/// A grid over policies, buffer sizes and seeds sharing one scenario.
#[derive(Debug, Clone)]
pub struct ExperimentGrid {
    pub base: RunConfig,
    pub cells: Vec<GridCell>,
}

impl ExperimentGrid {
    /// Parse a grid file: ordinary config keys plus one `cell = ...` line
    /// per cell, e.g. `cell = policy=gss cmp=5 m=64 seed=1`.
    pub fn from_kv_text(text: &str) -> Result<Self> {
        let pairs = crate::config::parse_kv(text)?;
        let mut base = RunConfig::default();
        let mut cells = Vec::new();
        let base_pairs: Vec<(String, String)> = pairs
            .iter()
            .filter(|(k, _)| k != "cell")
            .cloned()
            .collect();
        base.apply_kv(&base_pairs)?;
        for (key, value) in &pairs {
            if key != "cell" {
                continue;
            }
            let mut cell = GridCell {
                policy: base.policy,
                buffer_capacity: base.buffer_capacity,
                seed: base.seed,
            };
            for token in value.split_whitespace() {
                let (k, v) = token.split_once('=').ok_or_else(|| {
                    Error::Config(format!("cell token '{}' is not key=value", token))
                })?;
                match k {
                    "policy" => cell.policy.id = v.parse()?,
                    "th" => {
                        cell.policy.th = v
                            .parse()
                            .map_err(|e| Error::Config(format!("cell th: {}", e)))?
                    }
                    "cmp" => {
                        cell.policy.cmp = v
                            .parse()
                            .map_err(|e| Error::Config(format!("cell cmp: {}", e)))?
                    }
                    "rss_dim" => {
                        cell.policy.rss_dim = v
                            .parse()
                            .map_err(|e| Error::Config(format!("cell rss_dim: {}", e)))?
                    }
                    "direction" => cell.policy.direction = v.parse()?,
                    "m" => {
                        cell.buffer_capacity = v
                            .parse()
                            .map_err(|e| Error::Config(format!("cell m: {}", e)))?
                    }
                    "seed" => {
                        cell.seed = v
                            .parse()
                            .map_err(|e| Error::Config(format!("cell seed: {}", e)))?
                    }
                    other => {
                        return Err(Error::Config(format!("unknown cell key '{}'", other)))
                    }
                }
            }
            cells.push(cell);
        }
        if cells.is_empty() {
            return Err(Error::Config("grid has no cells".into()));
        }
        Ok(ExperimentGrid { base, cells })
    }
}

/// Stable fingerprint of the data all cells consume.
pub fn dataset_fingerprint(tasks: &[TaskDef]) -> String {
    let mut hasher = Sha256::new();
    for t in tasks {
        for s in t.train_samples.iter().chain(&t.val_samples) {
            hasher.update(s.id.to_le_bytes());
            for v in &s.image.data {
                hasher.update(v.to_le_bytes());
            }
            hasher.update(&s.labels.data);
        }
    }
    format!("{:x}", hasher.finalize())
}

#[derive(Debug, Clone, Serialize)]
struct GridCellRecord {
    index: usize,
    policy: String,
    params: String,
    m: usize,
    seed: u64,
    dir: String,
    status: String,
}

/// Run every cell (in parallel) against the shared scenario and emit
/// `summary.csv` plus `grid.json`. Failed cells are recorded and the
/// rest continue.
pub fn run_grid(grid: &ExperimentGrid, out_dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let scenario = resolve_scenario(&grid.base)?;
    let fingerprint = dataset_fingerprint(&scenario.tasks);
    let n_tasks = scenario.tasks.len();

    let results: Vec<(GridCellRecord, Option<MetricsFile>)> = grid
        .cells
        .par_iter()
        .enumerate()
        .map(|(i, cell)| {
            let mut cfg = grid.base.clone();
            cfg.policy = cell.policy;
            cfg.buffer_capacity = cell.buffer_capacity;
            cfg.seed = cell.seed;
            let dir = out_dir.join(format!(
                "cell_{:03}_{}_m{}_seed{}",
                i, cell.policy.id, cell.buffer_capacity, cell.seed
            ));
            // every cell re-checks that it sees the same bytes
            let fp = dataset_fingerprint(&scenario.tasks);
            let mut record = GridCellRecord {
                index: i,
                policy: cell.policy.id.to_string(),
                params: cell.policy.params_string(),
                m: cell.buffer_capacity,
                seed: cell.seed,
                dir: dir
                    .file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_default(),
                status: "ok".into(),
            };
            if fp != fingerprint {
                record.status = "error: dataset fingerprint changed mid-grid".into();
                return (record, None);
            }
            let echo = cfg.canonical_kv();
            match run_continual(&cfg, &scenario, echo.as_bytes(), &dir) {
                Ok(artifacts) => (record, Some(artifacts.metrics)),
                Err(e) => {
                    record.status = format!("error: {}", e);
                    (record, None)
                }
            }
        })
        .collect();

    let subset_headers: Vec<String> = (0..n_tasks).map(|j| format!("miou_s{}", j)).collect();
    let mut csv = format!(
        "policy,params,m,seed,step,{},miou_all,status\n",
        subset_headers.join(",")
    );
    let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();

    for (record, metrics) in &results {
        match metrics {
            Some(m) => {
                for step in &m.steps {
                    let subsets: Vec<String> =
                        step.subset_miou.iter().map(|v| fmt(*v)).collect();
                    csv.push_str(&format!(
                        "{},{},{},{},{},{},{},{}\n",
                        record.policy,
                        record.params,
                        record.m,
                        record.seed,
                        step.task,
                        subsets.join(","),
                        fmt(step.miou_all_seen),
                        record.status
                    ));
                }
            }
            None => {
                csv.push_str(&format!(
                    "{},{},{},{},,{},,{}\n",
                    record.policy,
                    record.params,
                    record.m,
                    record.seed,
                    vec![""; n_tasks].join(","),
                    record.status
                ));
            }
        }
    }

    // aggregate rows per (policy, params, m) over seeds: mean plus the
    // best/worst seed by final all-classes mIoU
    let mut groups: BTreeMap<(String, String, usize), Vec<&MetricsFile>> = BTreeMap::new();
    for (record, metrics) in &results {
        if let Some(m) = metrics {
            groups
                .entry((record.policy.clone(), record.params.clone(), record.m))
                .or_default()
                .push(m);
        }
    }
    for ((policy, params, m), members) in groups {
        if members.len() < 2 {
            continue;
        }
        let final_of = |mf: &MetricsFile| {
            mf.steps
                .last()
                .and_then(|s| s.miou_all_seen)
                .unwrap_or(f64::NEG_INFINITY)
        };
        let best = members
            .iter()
            .max_by(|a, b| final_of(a).partial_cmp(&final_of(b)).unwrap())
            .expect(">=2 members");
        let worst = members
            .iter()
            .min_by(|a, b| final_of(a).partial_cmp(&final_of(b)).unwrap())
            .expect(">=2 members");
        let n_steps = members[0].steps.len();
        for step in 0..n_steps {
            let mean_over = |f: &dyn Fn(&StepRecord) -> Option<f64>| -> Option<f64> {
                let vals: Vec<f64> = members
                    .iter()
                    .filter_map(|m| m.steps.get(step).and_then(|s| f(s)))
                    .collect();
                (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
            };
            let subsets: Vec<String> = (0..n_tasks)
                .map(|j| fmt(mean_over(&|s: &StepRecord| s.subset_miou[j])))
                .collect();
            csv.push_str(&format!(
                "{},{},{},mean,{},{},{},ok\n",
                policy,
                params,
                m,
                step,
                subsets.join(","),
                fmt(mean_over(&|s: &StepRecord| s.miou_all_seen))
            ));
        }
        for (tag, chosen) in [("best", best), ("worst", worst)] {
            for step in &chosen.steps {
                let subsets: Vec<String> = step.subset_miou.iter().map(|v| fmt(*v)).collect();
                csv.push_str(&format!(
                    "{},{},{},{},{},{},{},ok\n",
                    policy,
                    params,
                    m,
                    tag,
                    step.task,
                    subsets.join(","),
                    fmt(step.miou_all_seen)
                ));
            }
        }
    }

    let summary_path = out_dir.join("summary.csv");
    write_bytes(&summary_path, csv.as_bytes())?;
    write_json(
        &out_dir.join("grid.json"),
        &serde_json::json!({
            "dataset_fingerprint": fingerprint,
            "cells": results.iter().map(|(r, _)| r).collect::<Vec<_>>(),
            "failures": results
                .iter()
                .filter(|(r, _)| r.status != "ok")
                .map(|(r, _)| r)
                .collect::<Vec<_>>(),
        }),
    )?;
    Ok(summary_path)
}

// --- run comparison ---

fn read_confusion_csv(path: &Path, num_classes: usize) -> Result<ConfusionMatrix> {
    let text =
        fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut cm = ConfusionMatrix::zeros(num_classes);
    for (t, line) in text.lines().enumerate() {
        for (p, cell) in line.split(',').enumerate() {
            let v: u64 = cell
                .trim()
                .parse()
                .map_err(|e| Error::Config(format!("{}: {}", path.display(), e)))?;
            cm.counts[t * num_classes + p] = v;
        }
    }
    Ok(cm)
}

/// Side-by-side comparison of two runs over the same scenario: confusion
/// deltas, recency-bias deltas, and overlaid CKA curves as CSV plot data.
pub fn analyze(a_dir: &Path, b_dir: &Path, out_dir: &Path) -> Result<()> {
    let a = RunArtifacts::load(a_dir)?;
    let b = RunArtifacts::load(b_dir)?;
    if a.metrics.scenario != b.metrics.scenario
        || a.metrics.task_classes != b.metrics.task_classes
        || a.metrics.num_classes != b.metrics.num_classes
    {
        return Err(Error::Config(
            "runs do not share a scenario; nothing comparable".into(),
        ));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let c = a.metrics.num_classes;

    for step in &a.metrics.steps {
        let k = step.task;
        let fa = a_dir.join(format!("confusion_{}.csv", k));
        let fb = b_dir.join(format!("confusion_{}.csv", k));
        if !(fa.exists() && fb.exists()) {
            continue;
        }
        let ca = read_confusion_csv(&fa, c)?;
        let cb = read_confusion_csv(&fb, c)?;
        let mut csv = String::from("truth,pred,count_a,count_b,delta\n");
        for t in 0..c {
            for p in 0..c {
                let va = ca.get(t, p) as i64;
                let vb = cb.get(t, p) as i64;
                csv.push_str(&format!("{},{},{},{},{}\n", t, p, va, vb, vb - va));
            }
        }
        write_bytes(&out_dir.join(format!("confusion_{}_ab.csv", k)), csv.as_bytes())?;
    }

    let mut csv = String::from("step,metric,a,b,delta\n");
    let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for (sa, sb) in a.metrics.steps.iter().zip(&b.metrics.steps) {
        for (name, va, vb) in [
            (
                "recency_old_vs_newest",
                sa.recency_bias_old_vs_newest,
                sb.recency_bias_old_vs_newest,
            ),
            (
                "recency_exclusive",
                sa.recency_bias_exclusive,
                sb.recency_bias_exclusive,
            ),
        ] {
            let delta = match (va, vb) {
                (Some(x), Some(y)) => Some(y - x),
                _ => None,
            };
            csv.push_str(&format!(
                "{},{},{},{},{}\n",
                sa.task,
                name,
                fmt(va),
                fmt(vb),
                fmt(delta)
            ));
        }
    }
    write_bytes(&out_dir.join("recency_bias_delta.csv"), csv.as_bytes())?;

    let mut overlay = String::from("run,layer,value\n");
    for (tag, dir) in [("a", a_dir), ("b", b_dir)] {
        let path = dir.join("cka.csv");
        if !path.exists() {
            continue;
        }
        let text =
            fs::read_to_string(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
        for line in text.lines().skip(1) {
            overlay.push_str(&format!("{},{}\n", tag, line));
        }
    }
    write_bytes(&out_dir.join("cka_overlay.csv"), overlay.as_bytes())?;

    write_json(
        &out_dir.join("comparison.json"),
        &serde_json::json!({
            "a": { "dir": a_dir.display().to_string(), "policy": a.metrics.policy },
            "b": { "dir": b_dir.display().to_string(), "policy": b.metrics.policy },
            "final_miou_all": {
                "a": a.metrics.steps.last().and_then(|s| s.miou_all_seen),
                "b": b.metrics.steps.last().and_then(|s| s.miou_all_seen),
            },
        }),
    )?;
    Ok(())
}
