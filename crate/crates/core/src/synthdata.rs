//! Procedural segmentation scenarios.
//!
//! Scenes are colored shapes painted over a textured background. The true
//! label of a pixel is the class of the topmost shape covering it (or the
//! background class 0). Class-incremental tasks mask every out-of-task
//! class to `IGNORE`; domain-incremental tasks keep all labels and shift
//! the image photometrically (palette rotation, box blur, additive noise).
//!
//! Every sample draws from an id-indexed substream, so serial and parallel
//! generation produce identical bytes. Domain-incremental tasks share the
//! scene stream across tasks: with identity domain parameters the tasks
//! are pixel-identical, which isolates the photometric shift as the only
//! difference between domains.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::types::{
    ClassId, Image, LabelMap, Sample, SampleId, ScenarioKind, TaskDef, IGNORE,
};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

/// Photometric appearance of one task's domain.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct DomainParams {
    /// Rotation of the color palette about the gray axis, in degrees.
    pub palette_angle_deg: f64,
    /// Standard deviation of additive Gaussian pixel noise.
    pub noise_sigma: f64,
    /// Box blur radius in pixels (0 disables blur).
    pub blur_radius: usize,
}

impl DomainParams {
    pub fn identity() -> Self {
        DomainParams {
            palette_angle_deg: 0.0,
            noise_sigma: 0.0,
            blur_radius: 0,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.palette_angle_deg == 0.0 && self.noise_sigma == 0.0 && self.blur_radius == 0
    }
}

/// Shape geometry in pixel coordinates. Containment is tested at pixel
/// centers `(x + 0.5, y + 0.5)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum Shape {
    Rectangle { x0: f64, y0: f64, w: f64, h: f64 },
    Disc { cx: f64, cy: f64, r: f64 },
    Triangle { v: [(f64, f64); 3] },
    Ring { cx: f64, cy: f64, r_in: f64, r_out: f64 },
    /// Band `|a x + b y + c| <= half_width` with `(a, b)` a unit normal.
    StripeBand { a: f64, b: f64, c: f64, half_width: f64 },
}

impl Shape {
    fn contains(&self, px: f64, py: f64) -> bool {
        match *self {
            Shape::Rectangle { x0, y0, w, h } => {
                px >= x0 && px < x0 + w && py >= y0 && py < y0 + h
            }
            Shape::Disc { cx, cy, r } => {
                let dx = px - cx;
                let dy = py - cy;
                dx * dx + dy * dy <= r * r
            }
            Shape::Triangle { v } => {
                let sign = |(ax, ay): (f64, f64), (bx, by): (f64, f64)| {
                    (bx - ax) * (py - ay) - (by - ay) * (px - ax)
                };
                let d0 = sign(v[0], v[1]);
                let d1 = sign(v[1], v[2]);
                let d2 = sign(v[2], v[0]);
                let has_neg = d0 < 0.0 || d1 < 0.0 || d2 < 0.0;
                let has_pos = d0 > 0.0 || d1 > 0.0 || d2 > 0.0;
                !(has_neg && has_pos)
            }
            Shape::Ring { cx, cy, r_in, r_out } => {
                let dx = px - cx;
                let dy = py - cy;
                let d2 = dx * dx + dy * dy;
                d2 > r_in * r_in && d2 <= r_out * r_out
            }
            Shape::StripeBand { a, b, c, half_width } => (a * px + b * py + c).abs() <= half_width,
        }
    }
}

/// One painted object. Later objects occlude earlier ones.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlacedObject {
    pub shape: Shape,
    pub class: ClassId,
    pub color: [f32; 3],
}

/// Background texture: a two-color gradient plus low-amplitude noise.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BackgroundSpec {
    /// 0 horizontal, 1 vertical, 2 radial, 3 diagonal gradient.
    pub texture: u8,
    pub color_a: [f32; 3],
    pub color_b: [f32; 3],
    pub noise_amp: f32,
}

/// Fully specified scene, renderable without further random choices other
/// than its render stream (background grain, domain noise).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub background: BackgroundSpec,
    pub objects: Vec<PlacedObject>,
    pub domain: DomainParams,
}

/// Generator parameters for a whole task sequence.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub kind: ScenarioKind,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub train_per_task: usize,
    pub val_per_task: usize,
    /// Labeled class set per task. Class-incremental: pairwise disjoint,
    /// union covering all classes. Domain-incremental: identical sets.
    pub task_labeled: Vec<Vec<ClassId>>,
    /// Classes rendered only in `exclusive_task`'s images.
    pub exclusive_classes: Vec<ClassId>,
    pub exclusive_task: usize,
    /// Per-class placement weight, index 0 (background) unused.
    pub class_weights: Vec<f64>,
    pub objects_min: usize,
    pub objects_max: usize,
    pub domain_params: Vec<DomainParams>,
}

fn longtail_weights(num_classes: usize, span: f64) -> Vec<f64> {
    // geometric decay from 1 down to 1/span across object classes
    let n = num_classes.saturating_sub(1).max(1);
    let mut w = vec![0.0; num_classes];
    for c in 1..num_classes {
        let t = (c - 1) as f64 / (n - 1).max(1) as f64;
        w[c] = span.powf(-t);
    }
    w
}

impl ScenarioSpec {
    /// Three disjoint tasks over 10 classes with two classes exclusive to
    /// the middle task, long-tailed class frequencies.
    pub fn class_incremental_default() -> Self {
        ScenarioSpec {
            kind: ScenarioKind::ClassIncremental,
            height: 32,
            width: 32,
            num_classes: 10,
            train_per_task: 200,
            val_per_task: 50,
            task_labeled: vec![vec![0, 1, 2, 3], vec![4, 5, 6], vec![7, 8, 9]],
            exclusive_classes: vec![4, 5],
            exclusive_task: 1,
            class_weights: longtail_weights(10, 16.0),
            objects_min: 3,
            objects_max: 7,
            domain_params: vec![DomainParams::identity(); 3],
        }
    }

    /// Two tasks over the same classes; the second task's images get a
    /// palette rotation, blur and noise.
    pub fn domain_incremental_default() -> Self {
        let all: Vec<ClassId> = (0..10).collect();
        ScenarioSpec {
            kind: ScenarioKind::DomainIncremental,
            height: 32,
            width: 32,
            num_classes: 10,
            train_per_task: 200,
            val_per_task: 50,
            task_labeled: vec![all.clone(), all],
            exclusive_classes: vec![],
            exclusive_task: 0,
            class_weights: longtail_weights(10, 16.0),
            objects_min: 3,
            objects_max: 7,
            domain_params: vec![
                DomainParams::identity(),
                DomainParams {
                    palette_angle_deg: 35.0,
                    noise_sigma: 0.05,
                    blur_radius: 1,
                },
            ],
        }
    }

    pub fn num_tasks(&self) -> usize {
        self.task_labeled.len()
    }

    pub fn class_names(&self) -> Vec<String> {
        let mut names = vec!["background".to_string()];
        for c in 1..self.num_classes {
            names.push(format!("obj{}", c));
        }
        names
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.num_classes >= IGNORE as usize {
            return Err(Error::Config(format!(
                "num_classes {} out of supported range",
                self.num_classes
            )));
        }
        if self.task_labeled.is_empty() {
            return Err(Error::Config("no tasks".into()));
        }
        if self.domain_params.len() != self.num_tasks() {
            return Err(Error::Config(
                "domain_params must have one entry per task".into(),
            ));
        }
        if self.objects_min > self.objects_max {
            return Err(Error::Config("objects_min > objects_max".into()));
        }
        if self.class_weights.len() != self.num_classes {
            return Err(Error::Config("class_weights must have num_classes entries".into()));
        }
        let mut distinct: BTreeSet<ClassId> = BTreeSet::new();
        for set in &self.task_labeled {
            for &c in set {
                if c as usize >= self.num_classes {
                    return Err(Error::Config(format!(
                        "task labels reference class {} but num_classes is {}",
                        c, self.num_classes
                    )));
                }
                distinct.insert(c);
            }
        }
        if distinct.len() > self.num_classes {
            return Err(Error::Config("more distinct classes than num_classes".into()));
        }
        match self.kind {
            ScenarioKind::ClassIncremental => {
                let total: usize = self.task_labeled.iter().map(|s| s.len()).sum();
                if total != distinct.len() {
                    return Err(Error::Config(
                        "class-incremental labeled sets must be pairwise disjoint".into(),
                    ));
                }
                if distinct.len() != self.num_classes {
                    return Err(Error::Config(
                        "class-incremental labeled sets must cover all classes".into(),
                    ));
                }
            }
            ScenarioKind::DomainIncremental => {
                for set in &self.task_labeled[1..] {
                    let a: BTreeSet<_> = set.iter().collect();
                    let b: BTreeSet<_> = self.task_labeled[0].iter().collect();
                    if a != b {
                        return Err(Error::Config(
                            "domain-incremental tasks must share one labeled class set".into(),
                        ));
                    }
                }
            }
        }
        if self.exclusive_task >= self.num_tasks() && !self.exclusive_classes.is_empty() {
            return Err(Error::Config("exclusive_task out of range".into()));
        }
        if !self.exclusive_classes.is_empty() {
            let owner: BTreeSet<_> = self.task_labeled[self.exclusive_task].iter().collect();
            for c in &self.exclusive_classes {
                if !owner.contains(c) {
                    return Err(Error::Config(format!(
                        "exclusive class {} is not labeled in task {}",
                        c, self.exclusive_task
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Generated task sequence plus the unmasked labels per sample.
#[derive(Debug, Clone)]
pub struct Generated {
    pub tasks: Vec<TaskDef>,
    pub true_labels: BTreeMap<SampleId, LabelMap>,
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f32; 3] {
    let h = (h.fract() + 1.0).fract() * 6.0;
    let i = h.floor() as i32 % 6;
    let f = h - h.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    let (r, g, b) = match i {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    [r as f32, g as f32, b as f32]
}

/// Base color of a class; hues spaced by the golden-ratio conjugate so any
/// class count stays well separated.
pub fn class_color(class: ClassId) -> [f32; 3] {
    if class == 0 {
        return [0.32, 0.34, 0.30];
    }
    let h = 0.11 + class as f64 * 0.618_033_988_749_895;
    hsv_to_rgb(h, 0.72, 0.82)
}

fn jitter_color(base: [f32; 3], rng: &mut Rng, amp: f32) -> [f32; 3] {
    let mut out = [0.0f32; 3];
    for (o, b) in out.iter_mut().zip(base.iter()) {
        let d: f32 = rng.gen_range(-amp..=amp);
        *o = (b + d).clamp(0.02, 0.98);
    }
    out
}

fn sample_shape(rng: &mut Rng, h: usize, w: usize) -> Shape {
    let hf = h as f64;
    let wf = w as f64;
    let m = hf.min(wf);
    match rng.gen_range(0..5u8) {
        0 => {
            let rw = rng.gen_range(0.12..0.45) * wf;
            let rh = rng.gen_range(0.12..0.45) * hf;
            let x0 = rng.gen_range(0.0..(wf - rw));
            let y0 = rng.gen_range(0.0..(hf - rh));
            Shape::Rectangle { x0, y0, w: rw, h: rh }
        }
        1 => {
            let r = rng.gen_range(0.08..0.22) * m;
            let cx = rng.gen_range(r..(wf - r));
            let cy = rng.gen_range(r..(hf - r));
            Shape::Disc { cx, cy, r }
        }
        2 => {
            let r = rng.gen_range(0.10..0.26) * m;
            let cx = rng.gen_range(r..(wf - r));
            let cy = rng.gen_range(r..(hf - r));
            let base: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let mut v = [(0.0, 0.0); 3];
            for (i, vert) in v.iter_mut().enumerate() {
                let ang = base + i as f64 * std::f64::consts::TAU / 3.0
                    + rng.gen_range(-0.4..0.4);
                let rr = r * rng.gen_range(0.7..1.0);
                *vert = (cx + rr * ang.cos(), cy + rr * ang.sin());
            }
            Shape::Triangle { v }
        }
        3 => {
            let r_out = rng.gen_range(0.10..0.24) * m;
            let r_in = r_out * rng.gen_range(0.45..0.70);
            let cx = rng.gen_range(r_out..(wf - r_out));
            let cy = rng.gen_range(r_out..(hf - r_out));
            Shape::Ring { cx, cy, r_in, r_out }
        }
        _ => {
            let theta: f64 = rng.gen_range(0.0..std::f64::consts::PI);
            let (a, b) = (theta.cos(), theta.sin());
            let x0 = rng.gen_range(0.2..0.8) * wf;
            let y0 = rng.gen_range(0.2..0.8) * hf;
            let c = -(a * x0 + b * y0);
            let half_width = rng.gen_range(0.04..0.12) * m;
            Shape::StripeBand { a, b, c, half_width }
        }
    }
}

fn weighted_class(rng: &mut Rng, allowed: &[ClassId], weights: &[f64]) -> ClassId {
    let total: f64 = allowed.iter().map(|&c| weights[c as usize]).sum();
    let mut u = rng.gen_range(0.0..total);
    for &c in allowed {
        u -= weights[c as usize];
        if u < 0.0 {
            return c;
        }
    }
    *allowed.last().expect("allowed classes must be non-empty")
}

/// Build a scene for one sample of one task.
pub fn build_scene(spec: &ScenarioSpec, task: usize, rng: &mut Rng) -> SceneSpec {
    let allowed: Vec<ClassId> = (1..spec.num_classes as ClassId)
        .filter(|c| task == spec.exclusive_task || !spec.exclusive_classes.contains(c))
        .collect();
    let n_objects = rng.gen_range(spec.objects_min..=spec.objects_max);
    let mut objects = Vec::with_capacity(n_objects);
    for _ in 0..n_objects {
        let class = weighted_class(rng, &allowed, &spec.class_weights);
        let shape = sample_shape(rng, spec.height, spec.width);
        let color = jitter_color(class_color(class), rng, 0.05);
        objects.push(PlacedObject { shape, class, color });
    }
    let bg_a = jitter_color(class_color(0), rng, 0.04);
    let bg_b = jitter_color([0.45, 0.42, 0.38], rng, 0.04);
    SceneSpec {
        height: spec.height,
        width: spec.width,
        background: BackgroundSpec {
            texture: rng.gen_range(0..4),
            color_a: bg_a,
            color_b: bg_b,
            noise_amp: 0.03,
        },
        objects,
        domain: spec.domain_params[task],
    }
}

fn rotate_palette(rgb: [f64; 3], angle_deg: f64) -> [f64; 3] {
    // Rodrigues rotation about the gray axis (1,1,1)/sqrt(3); preserves
    // grays, rotates hues
    let t = angle_deg.to_radians();
    let (s, c) = t.sin_cos();
    let g = 1.0 / 3f64.sqrt();
    let [x, y, z] = rgb;
    let proj = g * g * (x + y + z) * (1.0 - c);
    [
        x * c + g * (z - y) * s + proj,
        y * c + g * (x - z) * s + proj,
        z * c + g * (y - x) * s + proj,
    ]
}

fn apply_domain(image: &mut Vec<f32>, h: usize, w: usize, dp: &DomainParams, rng: &mut Rng) {
    let hw = h * w;
    if dp.palette_angle_deg != 0.0 {
        for i in 0..hw {
            let rgb = [
                image[i] as f64,
                image[hw + i] as f64,
                image[2 * hw + i] as f64,
            ];
            let out = rotate_palette(rgb, dp.palette_angle_deg);
            image[i] = out[0].clamp(0.0, 1.0) as f32;
            image[hw + i] = out[1].clamp(0.0, 1.0) as f32;
            image[2 * hw + i] = out[2].clamp(0.0, 1.0) as f32;
        }
    }
    if dp.blur_radius > 0 {
        let r = dp.blur_radius as isize;
        let src = image.clone();
        for ch in 0..3 {
            let plane = &src[ch * hw..(ch + 1) * hw];
            for y in 0..h as isize {
                for x in 0..w as isize {
                    let mut acc = 0.0f64;
                    let mut n = 0u32;
                    for dy in -r..=r {
                        for dx in -r..=r {
                            let yy = y + dy;
                            let xx = x + dx;
                            if yy >= 0 && yy < h as isize && xx >= 0 && xx < w as isize {
                                acc += plane[(yy * w as isize + xx) as usize] as f64;
                                n += 1;
                            }
                        }
                    }
                    image[ch * hw + (y * w as isize + x) as usize] = (acc / n as f64) as f32;
                }
            }
        }
    }
    if dp.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, dp.noise_sigma).expect("valid sigma");
        for v in image.iter_mut() {
            let n: f64 = normal.sample(rng);
            *v = (*v as f64 + n).clamp(0.0, 1.0) as f32;
        }
    }
}

/// Render a scene into an image, its task-masked labels and the unmasked
/// (true) labels. Labels follow painter's order: the topmost object wins.
pub fn render_sample(
    scene: &SceneSpec,
    labeled: &BTreeSet<ClassId>,
    rng: &mut Rng,
) -> (Image, LabelMap, LabelMap) {
    let (h, w) = (scene.height, scene.width);
    let hw = h * w;
    let mut data = vec![0.0f32; 3 * hw];
    let mut truth = vec![0u8; hw];

    let bg = &scene.background;
    for y in 0..h {
        for x in 0..w {
            let t = match bg.texture {
                0 => x as f32 / (w.max(2) - 1) as f32,
                1 => y as f32 / (h.max(2) - 1) as f32,
                2 => {
                    let dx = x as f32 - w as f32 / 2.0;
                    let dy = y as f32 - h as f32 / 2.0;
                    ((dx * dx + dy * dy).sqrt() / (w.max(h) as f32 * 0.7)).min(1.0)
                }
                _ => (x + y) as f32 / (w + h - 2).max(1) as f32,
            };
            let grain: f32 = rng.gen_range(-bg.noise_amp..=bg.noise_amp);
            for c in 0..3 {
                let v = bg.color_a[c] * (1.0 - t) + bg.color_b[c] * t + grain;
                data[c * hw + y * w + x] = v.clamp(0.0, 1.0);
            }
        }
    }

    for obj in &scene.objects {
        for y in 0..h {
            for x in 0..w {
                if obj.shape.contains(x as f64 + 0.5, y as f64 + 0.5) {
                    truth[y * w + x] = obj.class;
                    for c in 0..3 {
                        data[c * hw + y * w + x] = obj.color[c];
                    }
                }
            }
        }
    }

    apply_domain(&mut data, h, w, &scene.domain, rng);

    let masked: Vec<u8> = truth
        .iter()
        .map(|&c| if labeled.contains(&c) { c } else { IGNORE })
        .collect();

    let image = Image::new(3, h, w, data).expect("rendered image is valid");
    let labels = LabelMap::new(h, w, masked).expect("labels match image shape");
    let true_labels = LabelMap::new(h, w, truth).expect("labels match image shape");
    (image, labels, true_labels)
}

/// Generate the full deterministic task sequence described by `spec`.
pub fn generate_scenario(spec: &ScenarioSpec, rng: &Rng) -> Result<Generated> {
    spec.validate()?;
    let mut tasks = Vec::new();
    let mut true_labels = BTreeMap::new();
    let mut next_id: SampleId = 0;

    for task in 0..spec.num_tasks() {
        let labeled: BTreeSet<ClassId> = spec.task_labeled[task].iter().copied().collect();
        let mut make_split = |split: &str, count: usize, next_id: &mut SampleId| -> Vec<Sample> {
            let mut out = Vec::with_capacity(count);
            for i in 0..count {
                // domain-incremental tasks share the scene stream so the
                // photometric transform is the only cross-task difference
                let (scene_tag, render_tag) = match spec.kind {
                    ScenarioKind::DomainIncremental => {
                        (format!("scene/{split}"), format!("render/{split}"))
                    }
                    ScenarioKind::ClassIncremental => (
                        format!("scene/t{task}/{split}"),
                        format!("render/t{task}/{split}"),
                    ),
                };
                let mut scene_rng = rng.substream_indexed(&scene_tag, i as u64);
                let mut render_rng = rng.substream_indexed(&render_tag, i as u64);
                let mut domain_rng =
                    rng.substream_indexed(&format!("domnoise/t{task}/{split}"), i as u64);
                let scene = build_scene(spec, task, &mut scene_rng);
                // background grain comes from the shared render stream;
                // domain noise from the per-task stream
                let (image, labels, truth) = {
                    let mut scene_only = scene.clone();
                    scene_only.domain = DomainParams::identity();
                    let (mut img, lbl, tru) = render_sample(&scene_only, &labeled, &mut render_rng);
                    apply_domain(
                        &mut img.data,
                        spec.height,
                        spec.width,
                        &spec.domain_params[task],
                        &mut domain_rng,
                    );
                    for v in &img.data {
                        debug_assert!(v.is_finite() && (0.0..=1.0).contains(v));
                    }
                    (img, lbl, tru)
                };
                let id = *next_id;
                *next_id += 1;
                true_labels.insert(id, truth);
                out.push(Sample {
                    id,
                    image,
                    labels,
                    task_id: task,
                });
            }
            out
        };
        let train_samples = make_split("train", spec.train_per_task, &mut next_id);
        let val_samples = make_split("val", spec.val_per_task, &mut next_id);
        tasks.push(TaskDef {
            task_id: task,
            train_samples,
            val_samples,
            labeled_classes: labeled,
            scenario: spec.kind,
        });
    }

    TaskDef::validate_sequence(&tasks, spec.num_classes)?;
    Ok(Generated { tasks, true_labels })
}
