//! Evaluation and representation-drift analysis.

use crate::error::{Error, Result};
use crate::model::{extract_patches, forward, ToySegModel};
use crate::rng::Rng;
use crate::types::{ClassId, LabelMap, Sample, IGNORE};
use rand::Rng as _;
use std::collections::BTreeSet;

/// Square count matrix; rows are ground truth, columns are predictions,
/// `IGNORE` ground-truth pixels excluded.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub num_classes: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn zeros(num_classes: usize) -> Self {
        ConfusionMatrix {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    #[inline]
    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn add(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.num_classes, other.num_classes);
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += *b;
        }
    }

    pub fn row_sum(&self, truth: usize) -> u64 {
        self.counts[truth * self.num_classes..(truth + 1) * self.num_classes]
            .iter()
            .sum()
    }

    pub fn col_sum(&self, pred: usize) -> u64 {
        (0..self.num_classes).map(|t| self.get(t, pred)).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for t in 0..self.num_classes {
            let row: Vec<String> = (0..self.num_classes)
                .map(|p| self.get(t, p).to_string())
                .collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

/// Count (truth, prediction) pairs over one image.
pub fn confusion(preds: &LabelMap, labels: &LabelMap, num_classes: usize) -> Result<ConfusionMatrix> {
    if preds.height != labels.height || preds.width != labels.width {
        return Err(Error::ShapeMismatch("predictions vs labels".into()));
    }
    let mut cm = ConfusionMatrix::zeros(num_classes);
    for (&p, &t) in preds.data.iter().zip(&labels.data) {
        if t == IGNORE {
            continue;
        }
        if (t as usize) >= num_classes {
            return Err(Error::InvalidLabel {
                value: t,
                num_classes,
            });
        }
        if (p as usize) >= num_classes {
            return Err(Error::InvalidLabel {
                value: p,
                num_classes,
            });
        }
        cm.counts[t as usize * num_classes + p as usize] += 1;
    }
    Ok(cm)
}

/// Subset mean IoU. Classes whose IoU denominator is zero are excluded
/// from the mean and counted in `excluded`.
#[derive(Debug, Clone, PartialEq)]
pub struct MiouResult {
    pub miou: Option<f64>,
    pub per_class: Vec<(ClassId, Option<f64>)>,
    pub excluded: usize,
}

pub fn miou(cm: &ConfusionMatrix, class_subset: &BTreeSet<ClassId>) -> MiouResult {
    let mut per_class = Vec::new();
    let mut sum = 0.0;
    let mut included = 0usize;
    let mut excluded = 0usize;
    for &c in class_subset {
        let c = c as usize;
        let tp = cm.get(c, c);
        let denom = cm.row_sum(c) + cm.col_sum(c) - tp;
        if denom == 0 {
            per_class.push((c as ClassId, None));
            excluded += 1;
        } else {
            let iou = tp as f64 / denom as f64;
            per_class.push((c as ClassId, Some(iou)));
            sum += iou;
            included += 1;
        }
    }
    MiouResult {
        miou: (included > 0).then(|| sum / included as f64),
        per_class,
        excluded,
    }
}

/// Fraction of old-class ground-truth pixels predicted as any newest-task
/// class. `None` when no old-class pixels were evaluated.
pub fn recency_bias(
    cm: &ConfusionMatrix,
    old_classes: &BTreeSet<ClassId>,
    newest_classes: &BTreeSet<ClassId>,
) -> Option<f64> {
    debug_assert!(old_classes.is_disjoint(newest_classes));
    let mut hits = 0u64;
    let mut total = 0u64;
    for &t in old_classes {
        total += cm.row_sum(t as usize);
        for &p in newest_classes {
            hits += cm.get(t as usize, p as usize);
        }
    }
    (total > 0).then(|| hits as f64 / total as f64)
}

/// Row-major activation matrix: `rows` probe pixels by `cols` features.
#[derive(Debug, Clone)]
pub struct FeatureMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols);
        FeatureMatrix { rows, cols, data }
    }

    fn center_columns(&self) -> Vec<f64> {
        let mut out = self.data.clone();
        for c in 0..self.cols {
            let mut mean = 0.0;
            for r in 0..self.rows {
                mean += out[r * self.cols + c];
            }
            mean /= self.rows as f64;
            for r in 0..self.rows {
                out[r * self.cols + c] -= mean;
            }
        }
        out
    }
}

fn gram_frobenius(a: &[f64], n: usize, da: usize, b: &[f64], db: usize) -> f64 {
    // ||B^T A||_F^2 over column-centered inputs
    let mut total = 0.0;
    for i in 0..db {
        for j in 0..da {
            let mut s = 0.0;
            for r in 0..n {
                s += b[r * db + i] * a[r * da + j];
            }
            total += s * s;
        }
    }
    total
}

/// Linear centered-kernel alignment between two activation matrices with
/// equal row counts: `||Y^T X||_F^2 / (||X^T X||_F ||Y^T Y||_F)` after
/// column centering. A zero denominator is defined as 0.
pub fn linear_cka(x: &FeatureMatrix, y: &FeatureMatrix) -> Result<f64> {
    if x.rows != y.rows {
        return Err(Error::ShapeMismatch(format!(
            "cka row counts {} vs {}",
            x.rows, y.rows
        )));
    }
    let xc = x.center_columns();
    let yc = y.center_columns();
    let cross = gram_frobenius(&xc, x.rows, x.cols, &yc, y.cols);
    let xx = gram_frobenius(&xc, x.rows, x.cols, &xc, x.cols).sqrt();
    let yy = gram_frobenius(&yc, y.rows, y.cols, &yc, y.cols).sqrt();
    if xx == 0.0 || yy == 0.0 {
        return Ok(0.0);
    }
    Ok(cross / (xx * yy))
}

/// Per-layer similarity between two model snapshots.
#[derive(Debug, Clone, PartialEq)]
pub struct CkaCurve {
    pub input_features: f64,
    pub h1: f64,
    pub h2: f64,
    pub logits: f64,
}

impl CkaCurve {
    pub fn rows(&self) -> [(&'static str, f64); 4] {
        [
            ("input_features", self.input_features),
            ("h1", self.h1),
            ("h2", self.h2),
            ("logits", self.logits),
        ]
    }
}

struct LayerRows {
    input: FeatureMatrix,
    h1: FeatureMatrix,
    h2: FeatureMatrix,
    logits: FeatureMatrix,
}

fn gather_layers(model: &ToySegModel, probe: &[Sample], picks: &[(usize, usize)]) -> Result<LayerRows> {
    let n = picks.len();
    let d_in = model.input_dim;
    let (n1, n2, c) = (model.h1, model.h2, model.num_classes);
    let mut input = vec![0.0; n * d_in];
    let mut h1 = vec![0.0; n * n1];
    let mut h2 = vec![0.0; n * n2];
    let mut logits = vec![0.0; n * c];
    for (si, sample) in probe.iter().enumerate() {
        let rows: Vec<(usize, usize)> = picks
            .iter()
            .enumerate()
            .filter(|(_, (s, _))| *s == si)
            .map(|(row, &(_, p))| (row, p))
            .collect();
        if rows.is_empty() {
            continue;
        }
        let patches = extract_patches(&sample.image, model.patch);
        let acts = forward(model, &sample.image)?;
        for (row, p) in rows {
            input[row * d_in..(row + 1) * d_in]
                .copy_from_slice(&patches[p * d_in..(p + 1) * d_in]);
            h1[row * n1..(row + 1) * n1].copy_from_slice(&acts.h1[p * n1..(p + 1) * n1]);
            h2[row * n2..(row + 1) * n2].copy_from_slice(&acts.h2[p * n2..(p + 1) * n2]);
            logits[row * c..(row + 1) * c].copy_from_slice(&acts.logits[p * c..(p + 1) * c]);
        }
    }
    Ok(LayerRows {
        input: FeatureMatrix::new(n, d_in, input),
        h1: FeatureMatrix::new(n, n1, h1),
        h2: FeatureMatrix::new(n, n2, h2),
        logits: FeatureMatrix::new(n, c, logits),
    })
}

/// Layer-wise CKA between two snapshots of the same architecture over a
/// seeded subsample of probe pixels (default cap 2000).
pub fn cka_drift(
    model_before: &ToySegModel,
    model_after: &ToySegModel,
    probe: &[Sample],
    max_pixels: usize,
    rng: &mut Rng,
) -> Result<CkaCurve> {
    if model_before.patch != model_after.patch
        || model_before.h1 != model_after.h1
        || model_before.h2 != model_after.h2
        || model_before.num_classes != model_after.num_classes
    {
        return Err(Error::ShapeMismatch(
            "cka_drift requires identical architectures".into(),
        ));
    }
    if probe.is_empty() {
        return Err(Error::Config("empty probe set".into()));
    }
    // flat pixel index space over the probe, subsampled without replacement
    let mut flat: Vec<(usize, usize)> = Vec::new();
    for (si, s) in probe.iter().enumerate() {
        for p in 0..s.image.pixels() {
            flat.push((si, p));
        }
    }
    let n = flat.len().min(max_pixels);
    for i in 0..n {
        let j = rng.gen_range(i..flat.len());
        flat.swap(i, j);
    }
    flat.truncate(n);

    let a = gather_layers(model_before, probe, &flat)?;
    let b = gather_layers(model_after, probe, &flat)?;
    Ok(CkaCurve {
        input_features: linear_cka(&a.input, &b.input)?,
        h1: linear_cka(&a.h1, &b.h1)?,
        h2: linear_cka(&a.h2, &b.h2)?,
        logits: linear_cka(&a.logits, &b.logits)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::Image;

    #[test]
    fn confusion_hand_enumeration() {
        let preds = LabelMap::new(1, 3, vec![0, 1, 1]).unwrap();
        let labels = LabelMap::new(1, 3, vec![0, 1, 2]).unwrap();
        let cm = confusion(&preds, &labels, 3).unwrap();
        assert_eq!(cm.get(0, 0), 1);
        assert_eq!(cm.get(1, 1), 1);
        assert_eq!(cm.get(2, 1), 1);
        assert_eq!(cm.total(), 3);
    }

    #[test]
    fn confusion_perfect_is_diagonal() {
        let labels = LabelMap::new(2, 2, vec![0, 1, 2, 1]).unwrap();
        let cm = confusion(&labels, &labels, 3).unwrap();
        for t in 0..3 {
            for p in 0..3 {
                if t != p {
                    assert_eq!(cm.get(t, p), 0);
                }
            }
        }
        assert_eq!(cm.total(), 4);
    }

    #[test]
    fn confusion_all_ignore_is_zero() {
        let preds = LabelMap::new(2, 2, vec![0, 1, 2, 1]).unwrap();
        let labels = LabelMap::filled(2, 2, IGNORE);
        let cm = confusion(&preds, &labels, 3).unwrap();
        assert_eq!(cm.total(), 0);
    }

    #[test]
    fn confusion_additive_over_concatenation() {
        let p1 = LabelMap::new(1, 3, vec![0, 1, 1]).unwrap();
        let l1 = LabelMap::new(1, 3, vec![0, 1, 2]).unwrap();
        let p2 = LabelMap::new(1, 2, vec![2, 0]).unwrap();
        let l2 = LabelMap::new(1, 2, vec![2, 2]).unwrap();
        let mut sum = confusion(&p1, &l1, 3).unwrap();
        sum.add(&confusion(&p2, &l2, 3).unwrap());

        let pc = LabelMap::new(1, 5, vec![0, 1, 1, 2, 0]).unwrap();
        let lc = LabelMap::new(1, 5, vec![0, 1, 2, 2, 2]).unwrap();
        let joint = confusion(&pc, &lc, 3).unwrap();
        assert_eq!(sum, joint);
    }

    #[test]
    fn miou_diagonal_is_one() {
        let labels = LabelMap::new(2, 2, vec![0, 1, 2, 1]).unwrap();
        let cm = confusion(&labels, &labels, 3).unwrap();
        let subset: BTreeSet<ClassId> = [0, 1, 2].into_iter().collect();
        assert_eq!(miou(&cm, &subset).miou, Some(1.0));
    }

    #[test]
    fn miou_plugs_into_formula() {
        let preds = LabelMap::new(1, 3, vec![0, 1, 1]).unwrap();
        let labels = LabelMap::new(1, 3, vec![0, 1, 2]).unwrap();
        let cm = confusion(&preds, &labels, 3).unwrap();
        let subset: BTreeSet<ClassId> = [1].into_iter().collect();
        let r = miou(&cm, &subset);
        assert!((r.miou.unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn miou_disjoint_predictions_is_zero() {
        let preds = LabelMap::new(1, 4, vec![1, 1, 1, 1]).unwrap();
        let labels = LabelMap::new(1, 4, vec![0, 0, 0, 0]).unwrap();
        let cm = confusion(&preds, &labels, 2).unwrap();
        let subset: BTreeSet<ClassId> = [0].into_iter().collect();
        assert_eq!(miou(&cm, &subset).miou, Some(0.0));
    }

    #[test]
    fn miou_zero_denominator_excluded() {
        let preds = LabelMap::new(1, 2, vec![0, 0]).unwrap();
        let labels = LabelMap::new(1, 2, vec![0, 0]).unwrap();
        let cm = confusion(&preds, &labels, 3).unwrap();
        let subset: BTreeSet<ClassId> = [0, 2].into_iter().collect();
        let r = miou(&cm, &subset);
        assert_eq!(r.miou, Some(1.0));
        assert_eq!(r.excluded, 1);
        // subset of only absent classes has no defined value
        let absent: BTreeSet<ClassId> = [2].into_iter().collect();
        assert_eq!(miou(&cm, &absent).miou, None);
    }

    #[test]
    fn miou_equivariant_under_relabeling() {
        let preds = LabelMap::new(1, 6, vec![0, 1, 1, 2, 0, 2]).unwrap();
        let labels = LabelMap::new(1, 6, vec![0, 1, 2, 2, 1, 0]).unwrap();
        let cm = confusion(&preds, &labels, 3).unwrap();
        let all: BTreeSet<ClassId> = [0, 1, 2].into_iter().collect();
        let base = miou(&cm, &all);

        // bijection 0->2, 1->0, 2->1
        let map = |v: u8| (v + 2) % 3;
        let preds2 = LabelMap::new(1, 6, preds.data.iter().map(|&v| map(v)).collect()).unwrap();
        let labels2 = LabelMap::new(1, 6, labels.data.iter().map(|&v| map(v)).collect()).unwrap();
        let cm2 = confusion(&preds2, &labels2, 3).unwrap();
        let permuted = miou(&cm2, &all);
        assert_eq!(base.miou, permuted.miou);
        for (c, iou) in &base.per_class {
            let mapped = map(*c);
            let found = permuted
                .per_class
                .iter()
                .find(|(c2, _)| *c2 == mapped)
                .unwrap();
            assert_eq!(*iou, found.1);
        }
    }

    #[test]
    fn recency_bias_cases() {
        let labels = LabelMap::new(1, 4, vec![0, 0, 1, 1]).unwrap();
        let cm = confusion(&labels, &labels, 4).unwrap();
        let old: BTreeSet<ClassId> = [0, 1].into_iter().collect();
        let newest: BTreeSet<ClassId> = [2, 3].into_iter().collect();
        assert_eq!(recency_bias(&cm, &old, &newest), Some(0.0));

        // every old pixel predicted as a newest class
        let preds = LabelMap::new(1, 4, vec![2, 3, 2, 3]).unwrap();
        let cm = confusion(&preds, &labels, 4).unwrap();
        assert_eq!(recency_bias(&cm, &old, &newest), Some(1.0));

        // crafted: 3 of 4 old pixels drift to newest classes
        let preds = LabelMap::new(1, 4, vec![0, 2, 3, 2]).unwrap();
        let cm = confusion(&preds, &labels, 4).unwrap();
        assert!((recency_bias(&cm, &old, &newest).unwrap() - 0.75).abs() < 1e-12);

        // no old pixels at all
        let none = LabelMap::filled(1, 4, IGNORE);
        let cm = confusion(&preds, &none, 4).unwrap();
        assert_eq!(recency_bias(&cm, &old, &newest), None);
    }

    fn random_matrix(n: usize, d: usize, rng: &mut Rng) -> FeatureMatrix {
        let data = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        FeatureMatrix::new(n, d, data)
    }

    fn orthogonal(d: usize, rng: &mut Rng) -> Vec<f64> {
        // Gram-Schmidt on a random matrix
        let mut q = vec![0.0; d * d];
        for i in 0..d {
            let mut v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            for j in 0..i {
                let dot: f64 = (0..d).map(|k| v[k] * q[j * d + k]).sum();
                for k in 0..d {
                    v[k] -= dot * q[j * d + k];
                }
            }
            let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            for k in 0..d {
                q[i * d + k] = v[k] / norm;
            }
        }
        q
    }

    #[test]
    fn cka_self_similarity_is_one() {
        let mut rng = Rng::from_seed(1);
        let x = random_matrix(100, 8, &mut rng);
        let v = linear_cka(&x, &x).unwrap();
        assert!((v - 1.0).abs() < 1e-6);
    }

    #[test]
    fn cka_invariances() {
        let mut rng = Rng::from_seed(2);
        let x = random_matrix(80, 6, &mut rng);
        let q = orthogonal(6, &mut rng);
        let mut rotated = vec![0.0; 80 * 6];
        for r in 0..80 {
            for j in 0..6 {
                let mut s = 0.0;
                for k in 0..6 {
                    s += x.data[r * 6 + k] * q[j * 6 + k];
                }
                rotated[r * 6 + j] = s;
            }
        }
        let xq = FeatureMatrix::new(80, 6, rotated);
        assert!((linear_cka(&x, &xq).unwrap() - 1.0).abs() < 1e-6);

        let scaled = FeatureMatrix::new(80, 6, x.data.iter().map(|v| v * 3.7).collect());
        assert!((linear_cka(&x, &scaled).unwrap() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn cka_symmetry_and_bounds() {
        let mut rng = Rng::from_seed(3);
        for _ in 0..5 {
            let x = random_matrix(60, 5, &mut rng);
            let y = random_matrix(60, 9, &mut rng);
            let a = linear_cka(&x, &y).unwrap();
            let b = linear_cka(&y, &x).unwrap();
            assert!((a - b).abs() < 1e-9);
            assert!((0.0..=1.0 + 1e-6).contains(&a));
        }
    }

    #[test]
    fn cka_of_independent_gaussians_is_small() {
        use rand_distr::{Distribution, StandardNormal};
        for seed in 0..10 {
            let mut rng = Rng::from_seed(100 + seed);
            let mut sample = |n: usize| -> Vec<f64> {
                (0..n)
                    .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
                    .collect()
            };
            let x = FeatureMatrix::new(500, 32, sample(500 * 32));
            let y = FeatureMatrix::new(500, 32, sample(500 * 32));
            let v = linear_cka(&x, &y).unwrap();
            assert!(v < 0.2, "seed {}: cka {}", seed, v);
        }
    }

    #[test]
    fn cka_row_mismatch_is_error() {
        let x = FeatureMatrix::new(3, 2, vec![0.0; 6]);
        let y = FeatureMatrix::new(4, 2, vec![0.0; 8]);
        assert!(linear_cka(&x, &y).is_err());
    }

    fn probe_samples(rng: &mut Rng) -> Vec<Sample> {
        (0..4)
            .map(|i| Sample {
                id: i,
                image: Image::new(
                    3,
                    8,
                    8,
                    (0..192).map(|_| rng.gen_range(0.0..1.0)).collect(),
                )
                .unwrap(),
                labels: LabelMap::filled(8, 8, 0),
                task_id: 0,
            })
            .collect()
    }

    #[test]
    fn drift_of_identical_models_is_all_ones() {
        let mut rng = Rng::from_seed(4);
        let model = ToySegModel::init(5, 16, 8, 4, &mut rng);
        let probe = probe_samples(&mut rng);
        let curve = cka_drift(&model, &model, &probe, 200, &mut Rng::from_seed(7)).unwrap();
        for (_, v) in curve.rows() {
            assert!((v - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn zeroing_head_only_drops_logit_similarity() {
        let mut rng = Rng::from_seed(5);
        let model = ToySegModel::init(5, 16, 8, 4, &mut rng);
        let probe = probe_samples(&mut rng);
        let mut wiped = model.clone();
        wiped.w3.iter_mut().for_each(|v| *v = 0.0);
        wiped.b3.iter_mut().for_each(|v| *v = 0.0);
        let curve = cka_drift(&model, &wiped, &probe, 200, &mut Rng::from_seed(7)).unwrap();
        assert!((curve.input_features - 1.0).abs() < 1e-6);
        assert!((curve.h1 - 1.0).abs() < 1e-6);
        assert!((curve.h2 - 1.0).abs() < 1e-6);
        assert!(curve.logits < 0.5);
    }

    #[test]
    fn drift_architecture_mismatch_is_error() {
        let mut rng = Rng::from_seed(6);
        let a = ToySegModel::init(5, 16, 8, 4, &mut rng);
        let b = ToySegModel::init(5, 16, 8, 5, &mut rng);
        let probe = probe_samples(&mut rng);
        assert!(cka_drift(&a, &b, &probe, 100, &mut Rng::from_seed(7)).is_err());
    }
}
