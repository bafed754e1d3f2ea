//! On-disk dataset format.
//!
//! A dataset directory holds one pair of binary files per sample plus an
//! `index.json` describing ids, shapes, class names and task membership:
//!
//! - `img_{id:06}.bin`: image values as little-endian f32, channel-major.
//! - `lbl_{id:06}.bin`: label map as raw unsigned bytes, row-major.
//! - `tru_{id:06}.bin` (optional): unmasked labels, same encoding. Written
//!   by the generator for class-incremental data so joint (offline)
//!   training can see every class.

use crate::error::{Error, Result};
use crate::types::{
    ClassId, Image, LabelMap, Sample, SampleId, ScenarioKind, TaskDef,
};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: SampleId,
    pub task_id: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub image_file: String,
    pub label_file: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub true_label_file: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskRecord {
    pub task_id: usize,
    pub labeled_classes: Vec<ClassId>,
    pub train_ids: Vec<SampleId>,
    pub val_ids: Vec<SampleId>,
}

/// `index.json` contents.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub scenario: ScenarioKind,
    pub num_classes: usize,
    pub class_names: Vec<String>,
    pub tasks: Vec<TaskRecord>,
    pub samples: Vec<SampleRecord>,
}

/// A loaded dataset: the task sequence plus, when stored, the unmasked
/// labels keyed by sample id.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub index: DatasetIndex,
    pub tasks: Vec<TaskDef>,
    pub true_labels: BTreeMap<SampleId, LabelMap>,
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    f.write_all(bytes)
        .map_err(|e| Error::io(path.display().to_string(), e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut f = fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut buf = Vec::new();
    f.read_to_end(&mut buf)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(buf)
}

pub fn image_to_bytes(image: &Image) -> Vec<u8> {
    let mut out = Vec::with_capacity(image.data.len() * 4);
    for v in &image.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn image_from_bytes(
    bytes: &[u8],
    channels: usize,
    height: usize,
    width: usize,
) -> Result<Image> {
    if bytes.len() != channels * height * width * 4 {
        return Err(Error::ShapeMismatch(format!(
            "image blob has {} bytes, expected {}",
            bytes.len(),
            channels * height * width * 4
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Image::new(channels, height, width, data)
}

/// Write a full task sequence (and optional unmasked labels) to `dir`.
pub fn save_dataset(
    dir: &Path,
    scenario: ScenarioKind,
    num_classes: usize,
    class_names: &[String],
    tasks: &[TaskDef],
    true_labels: &BTreeMap<SampleId, LabelMap>,
) -> Result<DatasetIndex> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let mut samples = Vec::new();
    let mut task_records = Vec::new();
    for task in tasks {
        task_records.push(TaskRecord {
            task_id: task.task_id,
            labeled_classes: task.labeled_classes.iter().copied().collect(),
            train_ids: task.train_samples.iter().map(|s| s.id).collect(),
            val_ids: task.val_samples.iter().map(|s| s.id).collect(),
        });
        for s in task.train_samples.iter().chain(&task.val_samples) {
            let image_file = format!("img_{:06}.bin", s.id);
            let label_file = format!("lbl_{:06}.bin", s.id);
            write_file(&dir.join(&image_file), &image_to_bytes(&s.image))?;
            write_file(&dir.join(&label_file), &s.labels.data)?;
            let true_label_file = if let Some(t) = true_labels.get(&s.id) {
                let name = format!("tru_{:06}.bin", s.id);
                write_file(&dir.join(&name), &t.data)?;
                Some(name)
            } else {
                None
            };
            samples.push(SampleRecord {
                id: s.id,
                task_id: s.task_id,
                channels: s.image.channels,
                height: s.image.height,
                width: s.image.width,
                image_file,
                label_file,
                true_label_file,
            });
        }
    }
    samples.sort_by_key(|r| r.id);
    let index = DatasetIndex {
        scenario,
        num_classes,
        class_names: class_names.to_vec(),
        tasks: task_records,
        samples,
    };
    let path = dir.join("index.json");
    let json = serde_json::to_vec_pretty(&index)
        .map_err(|e| Error::json(path.display().to_string(), e))?;
    write_file(&path, &json)?;
    Ok(index)
}

/// Load a dataset directory written by [`save_dataset`].
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let index_path = dir.join("index.json");
    let bytes = read_file(&index_path)?;
    let index: DatasetIndex = serde_json::from_slice(&bytes)
        .map_err(|e| Error::json(index_path.display().to_string(), e))?;

    let mut by_id: BTreeMap<SampleId, Sample> = BTreeMap::new();
    let mut true_labels = BTreeMap::new();
    for rec in &index.samples {
        let img_bytes = read_file(&dir.join(&rec.image_file))?;
        let image = image_from_bytes(&img_bytes, rec.channels, rec.height, rec.width)?;
        let lbl_bytes = read_file(&dir.join(&rec.label_file))?;
        let labels = LabelMap::new(rec.height, rec.width, lbl_bytes)?;
        if let Some(tf) = &rec.true_label_file {
            let t = read_file(&dir.join(tf))?;
            true_labels.insert(rec.id, LabelMap::new(rec.height, rec.width, t)?);
        }
        by_id.insert(
            rec.id,
            Sample {
                id: rec.id,
                image,
                labels,
                task_id: rec.task_id,
            },
        );
    }

    let mut tasks = Vec::new();
    for tr in &index.tasks {
        let fetch = |ids: &[SampleId]| -> Result<Vec<Sample>> {
            ids.iter()
                .map(|id| {
                    by_id
                        .get(id)
                        .cloned()
                        .ok_or_else(|| Error::Config(format!("index references unknown sample {}", id)))
                })
                .collect()
        };
        tasks.push(TaskDef {
            task_id: tr.task_id,
            train_samples: fetch(&tr.train_ids)?,
            val_samples: fetch(&tr.val_ids)?,
            labeled_classes: tr.labeled_classes.iter().copied().collect::<BTreeSet<_>>(),
            scenario: index.scenario,
        });
    }
    tasks.sort_by_key(|t| t.task_id);
    TaskDef::validate_sequence(&tasks, index.num_classes)?;
    Ok(Dataset {
        index,
        tasks,
        true_labels,
    })
}
