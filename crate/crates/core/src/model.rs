//! Tiny per-pixel segmentation model with exact analytic gradients.
//!
//! Every pixel is classified from its zero-padded `k x k` patch through
//! three dense layers: `3*k^2 -> h1 -> h2 -> C` with ReLU between layers
//! and a softmax head. Small enough that backprop stays hand-derived and
//! auditable, large enough to expose two "encoder" layers for embeddings
//! and representation-drift analysis.
//!
//! Parameter layout (also the gradient and checkpoint order):
//! `w1` (h1 x input, row-major), `b1`, `w2` (h2 x h1), `b2`,
//! `w3` (C x h2), `b3`.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::types::{Image, LabelMap, Sample, IGNORE};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

/// Probability floor inside logarithms.
pub const PROB_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct ToySegModel {
    pub patch: usize,
    pub input_dim: usize,
    pub h1: usize,
    pub h2: usize,
    pub num_classes: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    pub w3: Vec<f64>,
    pub b3: Vec<f64>,
}

/// Per-pixel activations of one forward pass, pixel-major.
#[derive(Debug, Clone)]
pub struct Activations {
    pub height: usize,
    pub width: usize,
    pub h1_dim: usize,
    pub h2_dim: usize,
    pub num_classes: usize,
    pub h1: Vec<f64>,
    pub h2: Vec<f64>,
    pub logits: Vec<f64>,
    pub posterior: Vec<f64>,
}

impl Activations {
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn posterior_row(&self, pixel: usize) -> &[f64] {
        &self.posterior[pixel * self.num_classes..(pixel + 1) * self.num_classes]
    }
}

/// Flat parameter gradient with its norm cached.
#[derive(Debug, Clone)]
pub struct GradientVector {
    pub data: Vec<f64>,
    pub norm: f64,
}

impl GradientVector {
    pub fn new(data: Vec<f64>) -> Self {
        let norm = data.iter().map(|v| v * v).sum::<f64>().sqrt();
        GradientVector { data, norm }
    }

    pub fn zeros(len: usize) -> Self {
        GradientVector {
            data: vec![0.0; len],
            norm: 0.0,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.norm.is_finite()
    }

    /// Cosine similarity; zero-norm operands are defined as 0.
    pub fn cosine(&self, other: &GradientVector) -> f64 {
        if self.norm == 0.0 || other.norm == 0.0 {
            return 0.0;
        }
        let dot = dot(&self.data, &other.data);
        dot / (self.norm * other.norm)
    }
}

/// Adam accumulators plus the polynomial learning-rate schedule.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: usize,
    pub total_steps: usize,
    pub base_lr: f64,
    pub poly_power: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerState {
    pub fn new(param_count: usize, base_lr: f64, poly_power: f64, total_steps: usize) -> Self {
        OptimizerState {
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
            step: 0,
            total_steps,
            base_lr,
            poly_power,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// `base_lr * (1 - t/T)^power`.
    pub fn lr_at(&self, t: usize) -> f64 {
        self.base_lr * (1.0 - t as f64 / self.total_steps as f64).powf(self.poly_power)
    }
}

/// Loss selection for backward passes and training.
pub enum LossKind<'a> {
    CrossEntropy,
    /// Labeled pixels use cross-entropy; unlabeled pixels distill the
    /// teacher's posterior over the first `old_classes` outputs.
    Distill {
        teacher: &'a ToySegModel,
        old_classes: usize,
        lambda: f64,
    },
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len();
    let chunks = n / 4 * 4;
    let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
    let mut i = 0;
    while i < chunks {
        s0 += a[i] * b[i];
        s1 += a[i + 1] * b[i + 1];
        s2 += a[i + 2] * b[i + 2];
        s3 += a[i + 3] * b[i + 3];
        i += 4;
    }
    let mut acc = (s0 + s1) + (s2 + s3);
    while i < n {
        acc += a[i] * b[i];
        i += 1;
    }
    acc
}

#[inline]
fn axpy(out: &mut [f64], a: f64, x: &[f64]) {
    for (o, v) in out.iter_mut().zip(x) {
        *o += a * v;
    }
}

impl ToySegModel {
    /// He-initialized hidden layers, Xavier head, zero biases.
    pub fn init(patch: usize, h1: usize, h2: usize, num_classes: usize, rng: &mut Rng) -> Self {
        let input_dim = 3 * patch * patch;
        let normal = |std: f64, n: usize, rng: &mut Rng| -> Vec<f64> {
            let d = Normal::new(0.0, std).expect("valid std");
            (0..n).map(|_| d.sample(rng)).collect()
        };
        ToySegModel {
            patch,
            input_dim,
            h1,
            h2,
            num_classes,
            w1: normal((2.0 / input_dim as f64).sqrt(), h1 * input_dim, rng),
            b1: vec![0.0; h1],
            w2: normal((2.0 / h1 as f64).sqrt(), h2 * h1, rng),
            b2: vec![0.0; h2],
            w3: normal((1.0 / h2 as f64).sqrt(), num_classes * h2, rng),
            b3: vec![0.0; num_classes],
        }
    }

    pub fn zeros(patch: usize, h1: usize, h2: usize, num_classes: usize) -> Self {
        let input_dim = 3 * patch * patch;
        ToySegModel {
            patch,
            input_dim,
            h1,
            h2,
            num_classes,
            w1: vec![0.0; h1 * input_dim],
            b1: vec![0.0; h1],
            w2: vec![0.0; h2 * h1],
            b2: vec![0.0; h2],
            w3: vec![0.0; num_classes * h2],
            b3: vec![0.0; num_classes],
        }
    }

    pub fn param_count(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len() + self.w3.len()
            + self.b3.len()
    }

    /// Append zero-initialized output rows for newly introduced classes.
    pub fn grow_head(&mut self, new_num_classes: usize) {
        assert!(new_num_classes >= self.num_classes);
        let extra = new_num_classes - self.num_classes;
        self.w3.extend(std::iter::repeat(0.0).take(extra * self.h2));
        self.b3.extend(std::iter::repeat(0.0).take(extra));
        self.num_classes = new_num_classes;
    }

    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        out.extend_from_slice(&self.w1);
        out.extend_from_slice(&self.b1);
        out.extend_from_slice(&self.w2);
        out.extend_from_slice(&self.b2);
        out.extend_from_slice(&self.w3);
        out.extend_from_slice(&self.b3);
        out
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.param_count());
        let mut at = 0;
        for part in [
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.w3,
            &mut self.b3,
        ] {
            let len = part.len();
            part.copy_from_slice(&flat[at..at + len]);
            at += len;
        }
    }

    fn check_image(&self, image: &Image) -> Result<()> {
        if image.channels * self.patch * self.patch != self.input_dim {
            return Err(Error::ShapeMismatch(format!(
                "image has {} channels, model expects {}",
                image.channels,
                self.input_dim / (self.patch * self.patch)
            )));
        }
        Ok(())
    }
}

/// Zero-padded patch features for every pixel, pixel-major rows of length
/// `3*k^2`; within a row: channel-major, then patch row, then patch column.
pub fn extract_patches(image: &Image, patch: usize) -> Vec<f64> {
    let (h, w) = (image.height, image.width);
    let hw = h * w;
    let r = (patch / 2) as isize;
    let dim = image.channels * patch * patch;
    let mut out = vec![0.0f64; hw * dim];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let row = &mut out[((y as usize) * w + x as usize) * dim..][..dim];
            let mut at = 0;
            for c in 0..image.channels {
                let plane = &image.data[c * hw..(c + 1) * hw];
                for dy in -r..=r {
                    let yy = y + dy;
                    for dx in -r..=r {
                        let xx = x + dx;
                        if yy >= 0 && yy < h as isize && xx >= 0 && xx < w as isize {
                            row[at] = plane[(yy as usize) * w + xx as usize] as f64;
                        }
                        at += 1;
                    }
                }
            }
        }
    }
    out
}

/// Forward pass over every pixel. Deterministic; posterior rows sum to 1.
pub fn forward(model: &ToySegModel, image: &Image) -> Result<Activations> {
    model.check_image(image)?;
    let patches = extract_patches(image, model.patch);
    Ok(forward_patches(model, &patches, image.height, image.width))
}

fn forward_patches(model: &ToySegModel, patches: &[f64], height: usize, width: usize) -> Activations {
    let hw = height * width;
    let (d, n1, n2, c) = (model.input_dim, model.h1, model.h2, model.num_classes);
    let mut h1 = vec![0.0f64; hw * n1];
    let mut h2 = vec![0.0f64; hw * n2];
    let mut logits = vec![0.0f64; hw * c];
    let mut posterior = vec![0.0f64; hw * c];

    for p in 0..hw {
        let x = &patches[p * d..(p + 1) * d];
        let h1_row = &mut h1[p * n1..(p + 1) * n1];
        for i in 0..n1 {
            let v = dot(&model.w1[i * d..(i + 1) * d], x) + model.b1[i];
            h1_row[i] = if v > 0.0 { v } else { 0.0 };
        }
        let h2_row = &mut h2[p * n2..(p + 1) * n2];
        for j in 0..n2 {
            let v = dot(&model.w2[j * n1..(j + 1) * n1], h1_row) + model.b2[j];
            h2_row[j] = if v > 0.0 { v } else { 0.0 };
        }
        let z_row = &mut logits[p * c..(p + 1) * c];
        for k in 0..c {
            z_row[k] = dot(&model.w3[k * n2..(k + 1) * n2], h2_row) + model.b3[k];
        }
        let post_row = &mut posterior[p * c..(p + 1) * c];
        let zmax = z_row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for k in 0..c {
            let e = (z_row[k] - zmax).exp();
            post_row[k] = e;
            sum += e;
        }
        let inv = 1.0 / sum;
        for v in post_row.iter_mut() {
            *v *= inv;
        }
    }

    Activations {
        height,
        width,
        h1_dim: n1,
        h2_dim: n2,
        num_classes: c,
        h1,
        h2,
        logits,
        posterior,
    }
}

/// Cross-entropy over labeled pixels: mean of `-ln p[y]`. Returns the
/// scalar, the per-pixel loss map (0 at `IGNORE`), and the labeled count.
pub fn loss_ce(acts: &Activations, labels: &LabelMap) -> Result<(f64, Vec<f64>, usize)> {
    if acts.height != labels.height || acts.width != labels.width {
        return Err(Error::ShapeMismatch("activations vs labels".into()));
    }
    let c = acts.num_classes;
    let mut per_pixel = vec![0.0f64; acts.pixels()];
    let mut total = 0.0;
    let mut labeled = 0usize;
    for (p, &y) in labels.data.iter().enumerate() {
        if y == IGNORE {
            continue;
        }
        if (y as usize) >= c {
            return Err(Error::InvalidLabel {
                value: y,
                num_classes: c,
            });
        }
        let l = -(acts.posterior[p * c + y as usize].max(PROB_EPS)).ln();
        per_pixel[p] = l;
        total += l;
        labeled += 1;
    }
    let loss = if labeled > 0 { total / labeled as f64 } else { 0.0 };
    Ok((loss, per_pixel, labeled))
}

/// Combined labeled cross-entropy and teacher distillation on unlabeled
/// pixels. The teacher posterior (over the first `old_classes` outputs)
/// is renormalized; the student side keeps its full-softmax probabilities
/// restricted to the old outputs. Keeping the student side unnormalized
/// is what penalizes probability mass drifting to new classes on
/// unlabeled pixels; renormalizing both sides is invariant to that drift
/// and degenerates to fine-tuning.
pub fn loss_cil(
    student: &Activations,
    teacher: &Activations,
    labels: &LabelMap,
    old_classes: usize,
    lambda: f64,
) -> Result<f64> {
    if student.height != teacher.height || student.width != teacher.width {
        return Err(Error::ShapeMismatch("student vs teacher activations".into()));
    }
    if teacher.num_classes != old_classes || old_classes == 0 {
        return Err(Error::Config(format!(
            "teacher has {} outputs, expected {}",
            teacher.num_classes, old_classes
        )));
    }
    if old_classes > student.num_classes {
        return Err(Error::Config(
            "old_classes exceeds student output count".into(),
        ));
    }
    let (ce, _, labeled) = loss_ce(student, labels)?;
    let labeled_term = if labeled > 0 { ce } else { 0.0 };

    let cs = student.num_classes;
    let ct = teacher.num_classes;
    let mut distill_total = 0.0;
    let mut ignored = 0usize;
    for (p, &y) in labels.data.iter().enumerate() {
        if y != IGNORE {
            continue;
        }
        ignored += 1;
        let t_row = &teacher.posterior[p * ct..(p + 1) * ct];
        let s_row = &student.posterior[p * cs..p * cs + old_classes];
        let t_sum: f64 = t_row.iter().sum();
        let s_sum: f64 = s_row.iter().sum();
        let mut d = 0.0;
        for k in 0..old_classes {
            let t = t_row[k] / t_sum.max(PROB_EPS);
            let s = (s_row[k] / s_sum.max(PROB_EPS)).max(PROB_EPS);
            d -= t * s.ln();
        }
        distill_total += d;
    }
    let distill_term = if ignored > 0 {
        distill_total / ignored as f64
    } else {
        0.0
    };
    Ok(labeled_term + lambda * distill_term)
}

struct GradAccum {
    gw1: Vec<f64>,
    gb1: Vec<f64>,
    gw2: Vec<f64>,
    gb2: Vec<f64>,
    gw3: Vec<f64>,
    gb3: Vec<f64>,
}

impl GradAccum {
    fn zeros(m: &ToySegModel) -> Self {
        GradAccum {
            gw1: vec![0.0; m.w1.len()],
            gb1: vec![0.0; m.b1.len()],
            gw2: vec![0.0; m.w2.len()],
            gb2: vec![0.0; m.b2.len()],
            gw3: vec![0.0; m.w3.len()],
            gb3: vec![0.0; m.b3.len()],
        }
    }

    fn into_vector(self) -> GradientVector {
        let mut data =
            Vec::with_capacity(self.gw1.len() + self.gb1.len() + self.gw2.len() + self.gb2.len()
                + self.gw3.len() + self.gb3.len());
        data.extend(self.gw1);
        data.extend(self.gb1);
        data.extend(self.gw2);
        data.extend(self.gb2);
        data.extend(self.gw3);
        data.extend(self.gb3);
        GradientVector::new(data)
    }
}

/// Exact analytic gradient of the chosen loss for one sample, plus the
/// loss value itself.
pub fn backward(
    model: &ToySegModel,
    image: &Image,
    labels: &LabelMap,
    kind: &LossKind,
) -> Result<(GradientVector, f64)> {
    model.check_image(image)?;
    if image.height != labels.height || image.width != labels.width {
        return Err(Error::ShapeMismatch("image vs labels".into()));
    }
    let patches = extract_patches(image, model.patch);
    let acts = forward_patches(model, &patches, image.height, image.width);
    let hw = acts.pixels();
    let c = model.num_classes;

    // per-pixel dL/dlogits
    let mut dlogits = vec![0.0f64; hw * c];
    let loss;
    match kind {
        LossKind::CrossEntropy => {
            let (l, _, labeled) = loss_ce(&acts, labels)?;
            loss = l;
            if labeled > 0 {
                let scale = 1.0 / labeled as f64;
                for (p, &y) in labels.data.iter().enumerate() {
                    if y == IGNORE {
                        continue;
                    }
                    let post = &acts.posterior[p * c..(p + 1) * c];
                    let row = &mut dlogits[p * c..(p + 1) * c];
                    for k in 0..c {
                        row[k] = post[k] * scale;
                    }
                    row[y as usize] -= scale;
                }
            }
        }
        LossKind::Distill {
            teacher,
            old_classes,
            lambda,
        } => {
            let t_acts = forward(teacher, image)?;
            loss = loss_cil(&acts, &t_acts, labels, *old_classes, *lambda)?;
            let labeled = labels.data.iter().filter(|&&y| y != IGNORE).count();
            let ignored = hw - labeled;
            let lab_scale = if labeled > 0 { 1.0 / labeled as f64 } else { 0.0 };
            let ign_scale = if ignored > 0 {
                lambda / ignored as f64
            } else {
                0.0
            };
            let ct = t_acts.num_classes;
            for (p, &y) in labels.data.iter().enumerate() {
                let post = &acts.posterior[p * c..(p + 1) * c];
                let row = &mut dlogits[p * c..(p + 1) * c];
                if y != IGNORE {
                    for k in 0..c {
                        row[k] = post[k] * lab_scale;
                    }
                    row[y as usize] -= lab_scale;
                } else {
                    // restricted-renormalized cross-entropy: gradient is
                    // (student_restricted - teacher) on old outputs, 0 on new
                    let t_row = &t_acts.posterior[p * ct..(p + 1) * ct];
                    let t_sum: f64 = t_row.iter().sum();
                    let s_sum: f64 = post[..*old_classes].iter().sum();
                    for k in 0..*old_classes {
                        let t = t_row[k] / t_sum.max(PROB_EPS);
                        let s = post[k] / s_sum.max(PROB_EPS);
                        row[k] = (s - t) * ign_scale;
                    }
                }
            }
        }
    }

    let (d, n1, n2) = (model.input_dim, model.h1, model.h2);
    let mut g = GradAccum::zeros(model);
    let mut dh2 = vec![0.0f64; n2];
    let mut dh1 = vec![0.0f64; n1];
    for p in 0..hw {
        let dz = &dlogits[p * c..(p + 1) * c];
        if dz.iter().all(|&v| v == 0.0) {
            continue;
        }
        let h2_row = &acts.h2[p * n2..(p + 1) * n2];
        let h1_row = &acts.h1[p * n1..(p + 1) * n1];
        let x = &patches[p * d..(p + 1) * d];

        for k in 0..c {
            let dzk = dz[k];
            if dzk != 0.0 {
                axpy(&mut g.gw3[k * n2..(k + 1) * n2], dzk, h2_row);
                g.gb3[k] += dzk;
            }
        }
        for j in 0..n2 {
            if h2_row[j] > 0.0 {
                let mut acc = 0.0;
                for k in 0..c {
                    acc += model.w3[k * n2 + j] * dz[k];
                }
                dh2[j] = acc;
            } else {
                dh2[j] = 0.0;
            }
        }
        for j in 0..n2 {
            let dj = dh2[j];
            if dj != 0.0 {
                axpy(&mut g.gw2[j * n1..(j + 1) * n1], dj, h1_row);
                g.gb2[j] += dj;
            }
        }
        for i in 0..n1 {
            if h1_row[i] > 0.0 {
                let mut acc = 0.0;
                for j in 0..n2 {
                    acc += model.w2[j * n1 + i] * dh2[j];
                }
                dh1[i] = acc;
            } else {
                dh1[i] = 0.0;
            }
        }
        for i in 0..n1 {
            let di = dh1[i];
            if di != 0.0 {
                axpy(&mut g.gw1[i * d..(i + 1) * d], di, x);
                g.gb1[i] += di;
            }
        }
    }
    Ok((g.into_vector(), loss))
}

/// One Adam step under the polynomial learning-rate schedule.
pub fn adam_poly_step(
    model: &mut ToySegModel,
    grads: &GradientVector,
    opt: &mut OptimizerState,
) -> Result<()> {
    if !grads.is_finite() {
        return Err(Error::TrainingDiverged {
            step: opt.step,
            what: "non-finite gradient".into(),
        });
    }
    assert!(
        opt.step < opt.total_steps,
        "optimizer stepped past its planned schedule"
    );
    assert_eq!(grads.data.len(), model.param_count());
    let lr = opt.lr_at(opt.step);
    let t = (opt.step + 1) as f64;
    let bc1 = 1.0 - opt.beta1.powf(t);
    let bc2 = 1.0 - opt.beta2.powf(t);

    let mut flat = model.params_flat();
    for i in 0..flat.len() {
        let gi = grads.data[i];
        opt.m[i] = opt.beta1 * opt.m[i] + (1.0 - opt.beta1) * gi;
        opt.v[i] = opt.beta2 * opt.v[i] + (1.0 - opt.beta2) * gi * gi;
        let mhat = opt.m[i] / bc1;
        let vhat = opt.v[i] / bc2;
        flat[i] -= lr * mhat / (vhat.sqrt() + opt.eps);
    }
    model.set_params_flat(&flat);
    opt.step += 1;
    Ok(())
}

/// How buffer samples are mixed into each training epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ReplayMix {
    /// Each epoch iterates the concatenation of task data and buffer
    /// entries once.
    Concat,
    /// Each batch carries `round(ratio * batch)` uniformly drawn buffer
    /// samples next to fresh task samples.
    Ratio(f64),
}

pub struct TrainParams {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub poly_power: f64,
    pub lambda: f64,
    pub replay_mix: ReplayMix,
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub step_losses: Vec<f64>,
    pub epoch_means: Vec<f64>,
}

/// Mean gradient and mean loss over a batch. Per-sample gradients run in
/// parallel; the reduction order is fixed so runs stay bit-reproducible.
pub fn mean_gradient(
    model: &ToySegModel,
    batch: &[&Sample],
    kind: &LossKind,
) -> Result<(GradientVector, f64)> {
    let results: Vec<Result<(GradientVector, f64)>> = batch
        .par_iter()
        .map(|s| backward(model, &s.image, &s.labels, kind))
        .collect();
    let mut sum = vec![0.0f64; model.param_count()];
    let mut loss_sum = 0.0;
    for r in results {
        let (g, l) = r?;
        for (a, b) in sum.iter_mut().zip(&g.data) {
            *a += *b;
        }
        loss_sum += l;
    }
    let inv = 1.0 / batch.len() as f64;
    for v in sum.iter_mut() {
        *v *= inv;
    }
    Ok((GradientVector::new(sum), loss_sum * inv))
}

fn batch_step(
    model: &mut ToySegModel,
    batch: &[&Sample],
    kind: &LossKind,
    opt: &mut OptimizerState,
) -> Result<f64> {
    let (grad, mean_loss) = mean_gradient(model, batch, kind)?;
    if !mean_loss.is_finite() {
        return Err(Error::TrainingDiverged {
            step: opt.step,
            what: format!("loss = {}", mean_loss),
        });
    }
    adam_poly_step(model, &grad, opt)?;
    Ok(mean_loss)
}

/// Train the model on one task (optionally mixed with replay samples),
/// with shuffled mini-batches and a per-task polynomial schedule.
pub fn train_task(
    model: &mut ToySegModel,
    task_samples: &[Sample],
    replay_samples: &[Sample],
    params: &TrainParams,
    teacher: Option<&ToySegModel>,
    old_classes: usize,
    rng: &mut Rng,
) -> Result<TrainReport> {
    if task_samples.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    let kind = match teacher {
        Some(t) => LossKind::Distill {
            teacher: t,
            old_classes,
            lambda: params.lambda,
        },
        None => LossKind::CrossEntropy,
    };
    let b = params.batch_size.max(1);
    let mut report = TrainReport::default();
    if params.epochs == 0 {
        return Ok(report);
    }

    let (steps_per_epoch, buf_per_batch) = match params.replay_mix {
        ReplayMix::Concat => {
            let n = task_samples.len() + replay_samples.len();
            (n.div_ceil(b), 0usize)
        }
        ReplayMix::Ratio(r) => {
            let nb = if replay_samples.is_empty() {
                0
            } else {
                ((r * b as f64).round() as usize).min(b.saturating_sub(1))
            };
            let nt = b - nb;
            (task_samples.len().div_ceil(nt), nb)
        }
    };
    let total_steps = params.epochs * steps_per_epoch;
    let mut opt = OptimizerState::new(
        model.param_count(),
        params.base_lr,
        params.poly_power,
        total_steps,
    );
    let mut retrieval = rng.substream("retrieval");

    for _epoch in 0..params.epochs {
        let mut epoch_sum = 0.0;
        let mut epoch_steps = 0usize;
        match params.replay_mix {
            ReplayMix::Concat => {
                let mut order: Vec<&Sample> =
                    task_samples.iter().chain(replay_samples).collect();
                // Fisher-Yates driven by the training stream
                for i in (1..order.len()).rev() {
                    let j = rng.gen_range(0..=i);
                    order.swap(i, j);
                }
                for batch in order.chunks(b) {
                    let l = batch_step(model, batch, &kind, &mut opt)?;
                    report.step_losses.push(l);
                    epoch_sum += l;
                    epoch_steps += 1;
                }
            }
            ReplayMix::Ratio(_) => {
                let mut order: Vec<&Sample> = task_samples.iter().collect();
                for i in (1..order.len()).rev() {
                    let j = rng.gen_range(0..=i);
                    order.swap(i, j);
                }
                let nt = b - buf_per_batch;
                for chunk in order.chunks(nt) {
                    let mut batch: Vec<&Sample> = chunk.to_vec();
                    for _ in 0..buf_per_batch {
                        let idx = retrieval.gen_range(0..replay_samples.len());
                        batch.push(&replay_samples[idx]);
                    }
                    let l = batch_step(model, &batch, &kind, &mut opt)?;
                    report.step_losses.push(l);
                    epoch_sum += l;
                    epoch_steps += 1;
                }
            }
        }
        report.epoch_means.push(epoch_sum / epoch_steps.max(1) as f64);
    }
    Ok(report)
}

/// Spatial mean of the second hidden layer; the sample's embedding.
pub fn embed(model: &ToySegModel, image: &Image) -> Result<Vec<f64>> {
    let acts = forward(model, image)?;
    let hw = acts.pixels();
    let n2 = acts.h2_dim;
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
    Ok(out)
}

/// Argmax class per pixel (model output slots).
pub fn predict(model: &ToySegModel, image: &Image) -> Result<LabelMap> {
    let acts = forward(model, image)?;
    let c = acts.num_classes;
    let data: Vec<u8> = (0..acts.pixels())
        .map(|p| {
            let row = acts.posterior_row(p);
            let mut best = 0usize;
            for k in 1..c {
                if row[k] > row[best] {
                    best = k;
                }
            }
            best as u8
        })
        .collect();
    LabelMap::new(image.height, image.width, data)
}

#[derive(Debug, Serialize, Deserialize, PartialEq, Eq)]
struct CheckpointHeader {
    patch: usize,
    input_dim: usize,
    h1: usize,
    h2: usize,
    num_classes: usize,
    step: u64,
}

/// Write `model.bin` (little-endian f32 parameter blob in layout order)
/// and `model.json` next to it.
pub fn save_checkpoint(model: &ToySegModel, step: u64, bin: &Path, json: &Path) -> Result<()> {
    let flat = model.params_flat();
    let mut bytes = Vec::with_capacity(flat.len() * 4);
    for v in flat {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let mut f = std::fs::File::create(bin).map_err(|e| Error::io(bin.display().to_string(), e))?;
    f.write_all(&bytes)
        .map_err(|e| Error::io(bin.display().to_string(), e))?;

    let header = CheckpointHeader {
        patch: model.patch,
        input_dim: model.input_dim,
        h1: model.h1,
        h2: model.h2,
        num_classes: model.num_classes,
        step,
    };
    let js = serde_json::to_vec_pretty(&header)
        .map_err(|e| Error::json(json.display().to_string(), e))?;
    std::fs::write(json, js).map_err(|e| Error::io(json.display().to_string(), e))?;
    Ok(())
}

/// Load a checkpoint pair written by [`save_checkpoint`].
pub fn load_checkpoint(bin: &Path, json: &Path) -> Result<(ToySegModel, u64)> {
    let js = std::fs::read(json).map_err(|e| Error::io(json.display().to_string(), e))?;
    let header: CheckpointHeader =
        serde_json::from_slice(&js).map_err(|e| Error::json(json.display().to_string(), e))?;
    let mut f = std::fs::File::open(bin).map_err(|e| Error::io(bin.display().to_string(), e))?;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes)
        .map_err(|e| Error::io(bin.display().to_string(), e))?;
    let mut model = ToySegModel::zeros(header.patch, header.h1, header.h2, header.num_classes);
    if bytes.len() != model.param_count() * 4 {
        return Err(Error::ShapeMismatch(format!(
            "checkpoint blob has {} bytes, expected {}",
            bytes.len(),
            model.param_count() * 4
        )));
    }
    let flat: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    model.set_params_flat(&flat);
    Ok((model, header.step))
}
