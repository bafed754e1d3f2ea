//! Per-sample statistics the selection policies rank on.
//!
//! Everything here is a pure function of an immutable model snapshot and
//! the sample, so scoring parallelizes per sample; results are ordered by
//! sample id regardless.

use crate::error::{Error, Result};
use crate::model::{backward, forward, Activations, GradientVector, LossKind, ToySegModel};
use crate::types::{class_histogram, ClassHistogram, ClassId, Image, LabelMap, Sample, SampleId};
use rayon::prelude::*;
use std::collections::BTreeSet;
use std::path::Path;

/// Score families that can be requested from [`score_dataset`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreKind {
    Loss,
    Entropy,
    TvImage,
    TvLabel,
    Naturalness,
    ClassStats,
    Embedding,
    Gradient,
}

/// All statistics computed for one sample. Fields are present only when
/// their family was requested; `uniformity_distance` is additionally
/// `None` for samples without labeled pixels (ineligible for balancing).
#[derive(Debug, Clone)]
pub struct SampleScores {
    pub id: SampleId,
    pub task_id: usize,
    pub loss: Option<f64>,
    pub entropy: Option<f64>,
    pub tv_image: Option<f64>,
    pub tv_label: Option<f64>,
    pub naturalness: Option<f64>,
    pub distinct_classes: Option<usize>,
    pub uniformity_distance: Option<f64>,
    pub histogram: Option<ClassHistogram>,
    pub embedding: Option<Vec<f64>>,
    pub gradient: Option<GradientVector>,
}

/// Mean Shannon entropy of the posterior over all pixels, `0 ln 0 := 0`.
pub fn image_entropy(acts: &Activations) -> f64 {
    let mut total = 0.0;
    for p in 0..acts.pixels() {
        let mut h = 0.0;
        for &v in acts.posterior_row(p) {
            if v > 0.0 {
                h -= v * v.ln();
            }
        }
        total += h;
    }
    total / acts.pixels() as f64
}

/// Anisotropic total variation of the luminance: sum of absolute
/// differences over horizontal and vertical neighbor pairs.
pub fn total_variation_image(image: &Image) -> f64 {
    let lum = image.luminance();
    let (h, w) = (image.height, image.width);
    let mut tv = 0.0;
    for y in 0..h {
        for x in 0..w {
            let v = lum[y * w + x];
            if x + 1 < w {
                tv += (v - lum[y * w + x + 1]).abs();
            }
            if y + 1 < h {
                tv += (v - lum[(y + 1) * w + x]).abs();
            }
        }
    }
    tv
}

/// Label-map variation: the count of neighbor pairs with differing
/// values. Class ids are nominal, so only inequality counts; `IGNORE`
/// participates as its own value.
pub fn total_variation_labels(labels: &LabelMap) -> f64 {
    let (h, w) = (labels.height, labels.width);
    let mut tv = 0u64;
    for y in 0..h {
        for x in 0..w {
            let v = labels.get(y, x);
            if x + 1 < w && v != labels.get(y, x + 1) {
                tv += 1;
            }
            if y + 1 < h && v != labels.get(y + 1, x) {
                tv += 1;
            }
        }
    }
    tv as f64
}

const MSCN_STABILIZER: f64 = 1.0 / 255.0;

fn gaussian_kernel_7() -> [[f64; 7]; 7] {
    let sigma = 7.0 / 6.0;
    let mut k = [[0.0; 7]; 7];
    let mut sum = 0.0;
    for (dy, row) in k.iter_mut().enumerate() {
        for (dx, v) in row.iter_mut().enumerate() {
            let y = dy as f64 - 3.0;
            let x = dx as f64 - 3.0;
            *v = (-(x * x + y * y) / (2.0 * sigma * sigma)).exp();
            sum += *v;
        }
    }
    for row in k.iter_mut() {
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    k
}

/// Mean-subtracted contrast-normalized luminance coefficients with a 7x7
/// Gaussian window. Border windows renormalize over in-bounds weights, so
/// a global luminance offset cancels exactly everywhere.
pub fn mscn_coefficients(image: &Image) -> Vec<f64> {
    let lum = image.luminance();
    let (h, w) = (image.height, image.width);
    let kernel = gaussian_kernel_7();
    let mut out = vec![0.0f64; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut num = 0.0;
            let mut num_sq = 0.0;
            let mut den = 0.0;
            for dy in -3..=3isize {
                let yy = y + dy;
                if yy < 0 || yy >= h as isize {
                    continue;
                }
                for dx in -3..=3isize {
                    let xx = x + dx;
                    if xx < 0 || xx >= w as isize {
                        continue;
                    }
                    let wgt = kernel[(dy + 3) as usize][(dx + 3) as usize];
                    let v = lum[yy as usize * w + xx as usize];
                    num += wgt * v;
                    num_sq += wgt * v * v;
                    den += wgt;
                }
            }
            let mu = num / den;
            let var = (num_sq / den - mu * mu).max(0.0);
            let v = lum[y as usize * w + x as usize];
            out[y as usize * w + x as usize] = (v - mu) / (var.sqrt() + MSCN_STABILIZER);
        }
    }
    out
}

/// BRISQUE-style naturalness proxy: distance of the MSCN moments from
/// Gaussian statistics, `|kurtosis - 3| + |skewness|`. Higher means less
/// natural. Zero-variance coefficient fields score 0.
pub fn naturalness_score(image: &Image) -> f64 {
    let mscn = mscn_coefficients(image);
    let n = mscn.len() as f64;
    let mean = mscn.iter().sum::<f64>() / n;
    let mut m2 = 0.0;
    let mut m3 = 0.0;
    let mut m4 = 0.0;
    for &v in &mscn {
        let d = v - mean;
        let d2 = d * d;
        m2 += d2;
        m3 += d2 * d;
        m4 += d2 * d2;
    }
    m2 /= n;
    m3 /= n;
    m4 /= n;
    if m2 < 1e-18 {
        return 0.0;
    }
    let skew = m3 / m2.powf(1.5);
    let kurt = m4 / (m2 * m2);
    (kurt - 3.0).abs() + skew.abs()
}

/// Cosine distance between two embeddings in `[0, 2]`. Identical vectors
/// are distance 0; otherwise a zero-norm operand makes the distance 1
/// (maximally uninformative).
pub fn embedding_distance(a: &[f64], b: &[f64]) -> f64 {
    if a == b {
        return 0.0;
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 1.0;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    (1.0 - dot / (na * nb)).clamp(0.0, 2.0)
}

/// Embedding cosine distance between two samples under a model.
pub fn perceptual_distance(model: &ToySegModel, a: &Sample, b: &Sample) -> Result<f64> {
    let ea = crate::model::embed(model, &a.image)?;
    let eb = crate::model::embed(model, &b.image)?;
    Ok(embedding_distance(&ea, &eb))
}

/// L1 distance between a histogram's normalized distribution and the
/// uniform distribution over `target` classes. Mass on classes outside
/// `target` counts fully against uniformity. `None` when the histogram is
/// empty (the sample is ineligible for class balancing).
pub fn distribution_uniformity(h: &ClassHistogram, target: &BTreeSet<ClassId>) -> Option<f64> {
    let total = h.total();
    if total == 0 || target.is_empty() {
        return None;
    }
    let u = 1.0 / target.len() as f64;
    let mut d = 0.0;
    for (c, &count) in h.counts.iter().enumerate() {
        let p = count as f64 / total as f64;
        if target.contains(&(c as ClassId)) {
            d += (p - u).abs();
        } else {
            d += p;
        }
    }
    Some(d)
}

fn embed_from_acts(acts: &Activations) -> Vec<f64> {
    let n2 = acts.h2_dim;
    let hw = acts.pixels();
    let mut out = vec![0.0f64; n2];
    for p in 0..hw {
        for (o, v) in out.iter_mut().zip(&acts.h2[p * n2..(p + 1) * n2]) {
            *o += *v;
        }
    }
    let inv = 1.0 / hw as f64;
    for o in &mut out {
        *o *= inv;
    }
    out
}

fn remap_labels(labels: &LabelMap, table: &[u8; 256]) -> LabelMap {
    LabelMap {
        height: labels.height,
        width: labels.width,
        data: labels.data.iter().map(|&v| table[v as usize]).collect(),
    }
}

/// Compute the requested score families for every sample.
///
/// `label_remap`, when given, maps dataset class ids to the model's output
/// slots for the model-based scores (loss, gradient); data statistics
/// always use the stored labels. Gradients are the expensive family and
/// are only computed when requested.
pub fn score_dataset(
    model: Option<&ToySegModel>,
    samples: &[Sample],
    in_task_classes: &BTreeSet<ClassId>,
    num_classes: usize,
    required: &[ScoreKind],
    label_remap: Option<&[u8; 256]>,
) -> Result<Vec<SampleScores>> {
    let need = |k: ScoreKind| required.contains(&k);
    let need_forward = need(ScoreKind::Loss) || need(ScoreKind::Entropy) || need(ScoreKind::Embedding);
    if (need_forward || need(ScoreKind::Gradient)) && model.is_none() {
        return Err(Error::Config(
            "model-based scores requested without a model".into(),
        ));
    }

    let mut scores: Vec<SampleScores> = samples
        .par_iter()
        .map(|s| -> Result<SampleScores> {
            let model_labels = match label_remap {
                Some(t) => Some(remap_labels(&s.labels, t)),
                None => None,
            };
            let model_labels = model_labels.as_ref().unwrap_or(&s.labels);

            let mut loss = None;
            let mut entropy = None;
            let mut embedding = None;
            if need_forward {
                let acts = forward(model.unwrap(), &s.image)?;
                if need(ScoreKind::Loss) {
                    loss = Some(crate::model::loss_ce(&acts, model_labels)?.0);
                }
                if need(ScoreKind::Entropy) {
                    entropy = Some(image_entropy(&acts));
                }
                if need(ScoreKind::Embedding) {
                    embedding = Some(embed_from_acts(&acts));
                }
            }
            let gradient = if need(ScoreKind::Gradient) {
                let (g, _) = backward(
                    model.unwrap(),
                    &s.image,
                    model_labels,
                    &LossKind::CrossEntropy,
                )?;
                Some(g)
            } else {
                None
            };

            let (histogram, distinct_classes, uniformity_distance) = if need(ScoreKind::ClassStats)
            {
                let h = class_histogram(&s.labels, num_classes)?;
                let d = h.distinct();
                let u = distribution_uniformity(&h, in_task_classes);
                (Some(h), Some(d), u)
            } else {
                (None, None, None)
            };

            Ok(SampleScores {
                id: s.id,
                task_id: s.task_id,
                loss,
                entropy,
                tv_image: need(ScoreKind::TvImage).then(|| total_variation_image(&s.image)),
                tv_label: need(ScoreKind::TvLabel).then(|| total_variation_labels(&s.labels)),
                naturalness: need(ScoreKind::Naturalness).then(|| naturalness_score(&s.image)),
                distinct_classes,
                uniformity_distance,
                histogram,
                embedding,
                gradient,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    scores.sort_by_key(|s| s.id);
    for s in &scores {
        for v in [s.loss, s.entropy, s.tv_image, s.tv_label, s.naturalness] {
            if let Some(x) = v {
                if !x.is_finite() {
                    return Err(Error::Invariant(format!(
                        "non-finite score for sample {}",
                        s.id
                    )));
                }
            }
        }
    }
    Ok(scores)
}

/// All scalar families, e.g. for the `score` CLI table.
pub fn all_scalar_kinds() -> Vec<ScoreKind> {
    vec![
        ScoreKind::Loss,
        ScoreKind::Entropy,
        ScoreKind::TvImage,
        ScoreKind::TvLabel,
        ScoreKind::Naturalness,
        ScoreKind::ClassStats,
    ]
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{}", x),
        None => String::new(),
    }
}

/// Write the score table as CSV. Columns are fixed:
/// `id,task_id,loss,entropy,tv_image,tv_label,naturalness,distinct_classes,uniformity_distance`.
pub fn write_scores_csv(scores: &[SampleScores], path: &Path) -> Result<()> {
    let mut out = String::from(
        "id,task_id,loss,entropy,tv_image,tv_label,naturalness,distinct_classes,uniformity_distance\n",
    );
    for s in scores {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            s.id,
            s.task_id,
            fmt_opt(s.loss),
            fmt_opt(s.entropy),
            fmt_opt(s.tv_image),
            fmt_opt(s.tv_label),
            fmt_opt(s.naturalness),
            s.distinct_classes
                .map(|d| d.to_string())
                .unwrap_or_default(),
            fmt_opt(s.uniformity_distance),
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::types::IGNORE;
    use rand::Rng as _;

    fn acts_from_posterior(h: usize, w: usize, c: usize, row: &[f64]) -> Activations {
        let hw = h * w;
        Activations {
            height: h,
            width: w,
            h1_dim: 1,
            h2_dim: 1,
            num_classes: c,
            h1: vec![0.0; hw],
            h2: vec![0.0; hw],
            logits: vec![0.0; hw * c],
            posterior: row.iter().cloned().cycle().take(hw * c).collect(),
        }
    }

    #[test]
    fn entropy_of_uniform_is_ln_c() {
        let acts = acts_from_posterior(3, 3, 4, &[0.25; 4]);
        assert!((image_entropy(&acts) - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn entropy_of_one_hot_is_zero() {
        let acts = acts_from_posterior(3, 3, 4, &[1.0, 0.0, 0.0, 0.0]);
        assert_eq!(image_entropy(&acts), 0.0);
    }

    #[test]
    fn entropy_of_two_mass_is_ln_2() {
        let acts = acts_from_posterior(2, 2, 4, &[0.5, 0.5, 0.0, 0.0]);
        assert!((image_entropy(&acts) - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn tv_constant_image_is_zero() {
        let img = Image::new(3, 4, 4, vec![0.7; 48]).unwrap();
        assert_eq!(total_variation_image(&img), 0.0);
    }

    #[test]
    fn tv_checker_2x2_enumerated() {
        // luminance [[0,1],[1,0]]: 2 horizontal + 2 vertical pairs, each 1
        let img = Image::new(3, 2, 2, {
            let plane = vec![0.0, 1.0, 1.0, 0.0];
            let mut d = plane.clone();
            d.extend(&plane);
            d.extend(&plane);
            d
        })
        .unwrap();
        assert!((total_variation_image(&img) - 4.0).abs() < 1e-12);
    }

    #[test]
    fn tv_labels_pair_enumeration() {
        let labels = LabelMap::new(2, 2, vec![0, 0, 1, 1]).unwrap();
        assert_eq!(total_variation_labels(&labels), 2.0);
    }

    #[test]
    fn tv_labels_invariant_under_bijection() {
        let mut rng = Rng::from_seed(4);
        for _ in 0..10 {
            let data: Vec<u8> = (0..64).map(|_| rng.gen_range(0..5u8)).collect();
            let labels = LabelMap::new(8, 8, data.clone()).unwrap();
            // bijection on class ids
            let mapped: Vec<u8> = data.iter().map(|&v| (v + 3) % 5 + 10).collect();
            let relabeled = LabelMap::new(8, 8, mapped).unwrap();
            assert_eq!(
                total_variation_labels(&labels),
                total_variation_labels(&relabeled)
            );
        }
    }

    fn noise_image(h: usize, w: usize, rng: &mut Rng) -> Image {
        let data = (0..3 * h * w)
            .map(|_| (0.5 + 0.1 * rng.gen_range(-3.0..3.0) as f32).clamp(0.0, 1.0))
            .collect();
        Image::new(3, h, w, data).unwrap()
    }

    #[test]
    fn gaussian_noise_more_natural_than_checkerboard() {
        let mut rng = Rng::from_seed(5);
        use rand_distr::{Distribution, Normal};
        let normal = Normal::new(0.5f64, 0.08).unwrap();
        let data: Vec<f32> = (0..3 * 32 * 32)
            .map(|_| (normal.sample(&mut rng) as f32).clamp(0.0, 1.0))
            .collect();
        let noise = Image::new(3, 32, 32, data).unwrap();

        let checker: Vec<f32> = (0..3 * 32 * 32)
            .map(|i| {
                let p = i % (32 * 32);
                let (y, x) = (p / 32, p % 32);
                if (y + x) % 2 == 0 {
                    0.0
                } else {
                    1.0
                }
            })
            .collect();
        let checker = Image::new(3, 32, 32, checker).unwrap();

        let ns = naturalness_score(&noise);
        let cs = naturalness_score(&checker);
        assert!(ns < cs, "noise {} should score below checker {}", ns, cs);
    }

    #[test]
    fn constant_image_scores_finite() {
        let img = Image::new(3, 8, 8, vec![0.4; 192]).unwrap();
        let s = naturalness_score(&img);
        assert!(s.is_finite());
        assert_eq!(s, 0.0);
    }

    #[test]
    fn naturalness_invariant_to_global_offset() {
        let mut rng = Rng::from_seed(6);
        let base: Vec<f32> = (0..3 * 16 * 16)
            .map(|_| rng.gen_range(0.2..0.7))
            .collect();
        let shifted: Vec<f32> = base.iter().map(|v| v + 0.1).collect();
        let a = naturalness_score(&Image::new(3, 16, 16, base).unwrap());
        let b = naturalness_score(&Image::new(3, 16, 16, shifted).unwrap());
        assert!((a - b).abs() < 1e-6, "{} vs {}", a, b);
    }

    #[test]
    fn embedding_distance_rules() {
        assert_eq!(embedding_distance(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert_eq!(embedding_distance(&[0.0, 0.0], &[1.0, 0.0]), 1.0);
        assert_eq!(embedding_distance(&[1.0, 0.0], &[1.0, 0.0]), 0.0);
        assert!((embedding_distance(&[1.0, 0.0], &[0.0, 1.0]) - 1.0).abs() < 1e-12);
        assert!((embedding_distance(&[1.0, 0.0], &[-1.0, 0.0]) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn perceptual_distance_symmetry_and_positivity() {
        let mut rng = Rng::from_seed(7);
        let model = crate::model::ToySegModel::init(5, 64, 32, 4, &mut rng);
        let mk = |rng: &mut Rng, id: u64| crate::types::Sample {
            id,
            image: noise_image(8, 8, rng),
            labels: LabelMap::filled(8, 8, 0),
            task_id: 0,
        };
        for i in 0..100 {
            let a = mk(&mut rng, 2 * i);
            let b = mk(&mut rng, 2 * i + 1);
            let dab = perceptual_distance(&model, &a, &b).unwrap();
            let dba = perceptual_distance(&model, &b, &a).unwrap();
            assert_eq!(dab, dba);
            assert!(dab > 0.0, "independent random images at distance 0");
            assert_eq!(perceptual_distance(&model, &a, &a).unwrap(), 0.0);
        }
    }

    #[test]
    fn uniformity_examples() {
        let target: BTreeSet<ClassId> = [0, 1, 2].into_iter().collect();
        let h = ClassHistogram {
            counts: vec![1, 1, 1],
            num_classes: 3,
        };
        assert!(distribution_uniformity(&h, &target).unwrap().abs() < 1e-12);

        let h = ClassHistogram {
            counts: vec![3, 0, 0],
            num_classes: 3,
        };
        let d = distribution_uniformity(&h, &target).unwrap();
        assert!((d - 4.0 / 3.0).abs() < 1e-12);

        let h = ClassHistogram {
            counts: vec![2, 1, 1],
            num_classes: 3,
        };
        let d = distribution_uniformity(&h, &target).unwrap();
        assert!((d - 1.0 / 3.0).abs() < 1e-12);

        let h = ClassHistogram::zeros(3);
        assert!(distribution_uniformity(&h, &target).is_none());
    }

    #[test]
    fn uniformity_stays_in_range() {
        let mut rng = Rng::from_seed(8);
        let target: BTreeSet<ClassId> = [0, 1, 2, 3].into_iter().collect();
        for _ in 0..200 {
            let counts: Vec<u64> = (0..6).map(|_| rng.gen_range(0..50)).collect();
            let h = ClassHistogram {
                counts,
                num_classes: 6,
            };
            if let Some(d) = distribution_uniformity(&h, &target) {
                assert!((0.0..=2.0 + 1e-12).contains(&d));
            }
        }
    }

    #[test]
    fn score_dataset_empty_and_deterministic() {
        let mut rng = Rng::from_seed(9);
        let model = crate::model::ToySegModel::init(5, 64, 32, 4, &mut rng);
        let in_task: BTreeSet<ClassId> = [0, 1, 2, 3].into_iter().collect();
        let empty = score_dataset(Some(&model), &[], &in_task, 4, &all_scalar_kinds(), None)
            .unwrap();
        assert!(empty.is_empty());

        let img = noise_image(8, 8, &mut rng);
        let labels = LabelMap::new(
            8,
            8,
            (0..64)
                .map(|_| {
                    if rng.gen_bool(0.2) {
                        IGNORE
                    } else {
                        rng.gen_range(0..4u8)
                    }
                })
                .collect(),
        )
        .unwrap();
        let s0 = crate::types::Sample {
            id: 0,
            image: img.clone(),
            labels: labels.clone(),
            task_id: 0,
        };
        let s1 = crate::types::Sample {
            id: 1,
            image: img,
            labels,
            task_id: 0,
        };
        let scores =
            score_dataset(Some(&model), &[s0, s1], &in_task, 4, &all_scalar_kinds(), None)
                .unwrap();
        assert_eq!(scores.len(), 2);
        assert_eq!(scores[0].loss, scores[1].loss);
        assert_eq!(scores[0].entropy, scores[1].entropy);
        assert_eq!(scores[0].naturalness, scores[1].naturalness);
    }

    #[test]
    fn score_loss_matches_recomputation() {
        let mut rng = Rng::from_seed(10);
        let model = crate::model::ToySegModel::init(5, 64, 32, 4, &mut rng);
        let in_task: BTreeSet<ClassId> = [0, 1, 2, 3].into_iter().collect();
        let sample = crate::types::Sample {
            id: 3,
            image: noise_image(8, 8, &mut rng),
            labels: LabelMap::new(8, 8, (0..64).map(|_| rng.gen_range(0..4u8)).collect())
                .unwrap(),
            task_id: 0,
        };
        let scores = score_dataset(
            Some(&model),
            std::slice::from_ref(&sample),
            &in_task,
            4,
            &[ScoreKind::Loss],
            None,
        )
        .unwrap();
        let acts = forward(&model, &sample.image).unwrap();
        let (want, _, _) = crate::model::loss_ce(&acts, &sample.labels).unwrap();
        assert_eq!(scores[0].loss.unwrap(), want);
    }

    #[test]
    fn model_free_scoring_rejects_model_kinds() {
        let in_task: BTreeSet<ClassId> = [0].into_iter().collect();
        assert!(score_dataset(None, &[], &in_task, 1, &[ScoreKind::Loss], None).is_err());
        assert!(score_dataset(None, &[], &in_task, 1, &[ScoreKind::ClassStats], None).is_ok());
    }

    #[test]
    fn entropy_bounded_by_ln_c() {
        let mut rng = Rng::from_seed(11);
        let model = crate::model::ToySegModel::init(5, 64, 32, 6, &mut rng);
        for _ in 0..10 {
            let img = noise_image(8, 8, &mut rng);
            let acts = forward(&model, &img).unwrap();
            let h = image_entropy(&acts);
            assert!(h >= 0.0 && h <= 6f64.ln() + 1e-9);
        }
    }
}
