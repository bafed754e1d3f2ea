//! Shared domain types and label-map utilities.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

/// Label value excluded from losses, histograms and metrics.
pub const IGNORE: u8 = 255;

/// Stable per-run sample identifier.
pub type SampleId = u64;

/// Class identifier. Must stay below [`IGNORE`].
pub type ClassId = u8;

/// Dense image, values in `[0,1]`, channel-major layout:
/// `data[c * h * w + y * w + x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::ShapeMismatch(format!(
                "image data length {} != {}x{}x{}",
                data.len(),
                channels,
                height,
                width
            )));
        }
        if data.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(Error::ShapeMismatch(
                "image values must be finite and within [0,1]".into(),
            ));
        }
        Ok(Image {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Image {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[c * self.height * self.width + y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[c * self.height * self.width + y * self.width + x] = v;
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    /// Per-pixel luminance, the mean over channels.
    pub fn luminance(&self) -> Vec<f64> {
        let hw = self.pixels();
        let mut lum = vec![0.0f64; hw];
        for c in 0..self.channels {
            let plane = &self.data[c * hw..(c + 1) * hw];
            for (l, v) in lum.iter_mut().zip(plane) {
                *l += *v as f64;
            }
        }
        let inv = 1.0 / self.channels as f64;
        for l in &mut lum {
            *l *= inv;
        }
        lum
    }
}

/// Per-pixel class ids (row-major), `IGNORE` marks unlabeled pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "label data length {} != {}x{}",
                data.len(),
                height,
                width
            )));
        }
        Ok(LabelMap {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: u8) -> Self {
        LabelMap {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        self.data[y * self.width + x] = v;
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }
}

/// One image with its labels; the atomic unit selected into the buffer.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: SampleId,
    pub image: Image,
    pub labels: LabelMap,
    pub task_id: usize,
}

/// Per-class pixel counts with `IGNORE` excluded.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassHistogram {
    pub counts: Vec<u64>,
    pub num_classes: usize,
}

impl ClassHistogram {
    pub fn zeros(num_classes: usize) -> Self {
        ClassHistogram {
            counts: vec![0; num_classes],
            num_classes,
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Number of classes with at least one pixel.
    pub fn distinct(&self) -> usize {
        self.counts.iter().filter(|&&c| c > 0).count()
    }

    pub fn add(&mut self, other: &ClassHistogram) {
        assert_eq!(self.num_classes, other.num_classes);
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += *b;
        }
    }
}

/// Count per-class pixels of a label map, skipping `IGNORE`.
///
/// Fails on any label value that is neither a valid class nor `IGNORE`.
pub fn class_histogram(labels: &LabelMap, num_classes: usize) -> Result<ClassHistogram> {
    let mut counts = vec![0u64; num_classes];
    for &v in &labels.data {
        if v == IGNORE {
            continue;
        }
        if (v as usize) >= num_classes {
            return Err(Error::InvalidLabel {
                value: v,
                num_classes,
            });
        }
        counts[v as usize] += 1;
    }
    Ok(ClassHistogram {
        counts,
        num_classes,
    })
}

/// Normalize a histogram to per-class probabilities.
pub fn histogram_distribution(h: &ClassHistogram) -> Result<Vec<f64>> {
    let total = h.total();
    if total == 0 {
        return Err(Error::EmptyHistogram);
    }
    let inv = 1.0 / total as f64;
    Ok(h.counts.iter().map(|&c| c as f64 * inv).collect())
}

/// Incremental-learning flavor of a task sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    ClassIncremental,
    DomainIncremental,
}

impl std::fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ScenarioKind::ClassIncremental => write!(f, "class_incremental"),
            ScenarioKind::DomainIncremental => write!(f, "domain_incremental"),
        }
    }
}

/// One task of a sequence: its data and the classes labeled in it.
#[derive(Debug, Clone)]
pub struct TaskDef {
    pub task_id: usize,
    pub train_samples: Vec<Sample>,
    pub val_samples: Vec<Sample>,
    pub labeled_classes: BTreeSet<ClassId>,
    pub scenario: ScenarioKind,
}

impl TaskDef {
    /// Check the scenario-kind invariants over a full task sequence.
    pub fn validate_sequence(tasks: &[TaskDef], num_classes: usize) -> Result<()> {
        if tasks.is_empty() {
            return Err(Error::Config("empty task sequence".into()));
        }
        let kind = tasks[0].scenario;
        match kind {
            ScenarioKind::ClassIncremental => {
                let mut seen: BTreeSet<ClassId> = BTreeSet::new();
                for t in tasks {
                    for &c in &t.labeled_classes {
                        if !seen.insert(c) {
                            return Err(Error::Invariant(format!(
                                "class {} labeled in more than one class-incremental task",
                                c
                            )));
                        }
                    }
                }
                if seen.len() != num_classes {
                    return Err(Error::Invariant(format!(
                        "union of labeled classes has {} of {} classes",
                        seen.len(),
                        num_classes
                    )));
                }
            }
            ScenarioKind::DomainIncremental => {
                for t in &tasks[1..] {
                    if t.labeled_classes != tasks[0].labeled_classes {
                        return Err(Error::Invariant(
                            "domain-incremental tasks must share one labeled class set".into(),
                        ));
                    }
                }
            }
        }
        Ok(())
    }
}
