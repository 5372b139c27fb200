//! Deterministic two-domain shape scenes. Source images are filled shapes on
//! a noisy warm gradient; target images are 2 px outlines on a flat
//! background with a global hue rotation. Only source images keep their
//! boxes for training; target training images carry image-level labels.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::aiam::{DomainLabel, ImageLabelVector};
use crate::detector::{iou, Bbox, GtInstance, TOTAL_STRIDE};
use crate::error::{invalid, Result};
use crate::math;
use crate::rng::{mix, Lcg};
use crate::tensor::Tensor;

pub const SHAPE_NAMES: [&str; 6] = ["circle", "square", "triangle", "diamond", "cross", "hexagon"];
pub const MIN_SIDE: u32 = 12;
pub const MAX_SIDE: u32 = 32;
pub const MAX_OBJECTS: u32 = 4;
pub const PLACEMENT_ATTEMPTS: usize = 100;
pub const MAX_PAIR_IOU: f64 = 0.2;
pub const TEXTURE_SIGMA: f64 = 0.05;
pub const STROKE: f64 = 2.0;

/// One generated image with its annotations. Pixels are 8-bit RGB, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneRecord {
    pub image_id: String,
    pub domain: DomainLabel,
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
    pub instances: Vec<GtInstance>,
    pub image_labels: ImageLabelVector,
}

impl SceneRecord {
    /// `H×W×3` tensor with values in `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        let data = self.pixels.iter().map(|&p| p as f64 / 255.0).collect();
        Tensor::from_parts(vec![self.height, self.width, 3], data)
    }

    /// Mean of each colour channel over the image.
    pub fn channel_means(&self) -> [f64; 3] {
        let mut m = [0.0; 3];
        for px in self.pixels.chunks_exact(3) {
            for (s, &v) in m.iter_mut().zip(px) {
                *s += v as f64 / 255.0;
            }
        }
        let n = (self.width * self.height) as f64;
        m.map(|v| v / n)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// A split of the benchmark with everything needed to reproduce it.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub class_names: Vec<String>,
    pub seed: u64,
    pub split: Split,
    pub records: Vec<SceneRecord>,
}

impl DatasetManifest {
    pub fn classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn domain(&self, d: DomainLabel) -> impl Iterator<Item = &SceneRecord> {
        self.records.iter().filter(move |r| r.domain == d)
    }
}

pub fn class_names(classes: usize) -> Result<Vec<String>> {
    check_classes(classes)?;
    Ok(SHAPE_NAMES[..classes].iter().map(|s| String::from(*s)).collect())
}

fn check_classes(classes: usize) -> Result<()> {
    if !(2..=SHAPE_NAMES.len()).contains(&classes) {
        return Err(invalid(format!("class count must be in 2..=6, got {classes}")));
    }
    Ok(())
}

/// Scene for training: target images lose their boxes.
pub fn generate_scene(
    seed: u64,
    domain: DomainLabel,
    width: usize,
    height: usize,
    classes: usize,
) -> Result<SceneRecord> {
    let mut r = generate_annotated_scene(seed, domain, width, height, classes)?;
    if domain == DomainLabel::Target {
        r.instances.clear();
    }
    Ok(r)
}

/// Scene with boxes on both domains, for evaluation splits.
pub fn generate_annotated_scene(
    seed: u64,
    domain: DomainLabel,
    width: usize,
    height: usize,
    classes: usize,
) -> Result<SceneRecord> {
    check_classes(classes)?;
    if width == 0 || height == 0 || !width.is_multiple_of(TOTAL_STRIDE) || !height.is_multiple_of(TOTAL_STRIDE) {
        return Err(invalid(format!("image size {width}×{height} must be a positive multiple of 16")));
    }
    if (width as u32) < MAX_SIDE || (height as u32) < MAX_SIDE {
        return Err(invalid("image must fit the largest shape"));
    }
    let mut rng = Lcg::new(seed);
    let instances = place_objects(&mut rng, width, height, classes);
    let base = [rng.uniform(0.35, 0.6), rng.uniform(0.25, 0.45), rng.uniform(0.08, 0.28)];
    let mut img = vec![[0.0f64; 3]; width * height];

    match domain {
        DomainLabel::Source => {
            let dark = rng.uniform(0.6, 0.9);
            let horizontal = rng.below(2) == 0;
            for y in 0..height {
                for x in 0..width {
                    let t = if horizontal {
                        x as f64 / (width - 1) as f64
                    } else {
                        y as f64 / (height - 1) as f64
                    };
                    let f = 1.0 - t * (1.0 - dark);
                    img[y * width + x] = base.map(|c| c * f);
                }
            }
        }
        DomainLabel::Target => img.fill(base),
    }

    for inst in &instances {
        let color = hsv_to_rgb(rng.next_f64(), rng.uniform(0.5, 0.9), rng.uniform(0.8, 1.0));
        let outline = domain == DomainLabel::Target;
        paint_shape(&mut img, width, inst, color, outline);
    }

    match domain {
        DomainLabel::Source => {
            for px in img.iter_mut() {
                for c in px.iter_mut() {
                    *c += TEXTURE_SIGMA * rng.normal();
                }
            }
        }
        DomainLabel::Target => {
            let shift = (160.0 + rng.uniform(-20.0, 20.0)) / 360.0;
            for px in img.iter_mut() {
                let (h, s, v) = rgb_to_hsv(*px);
                *px = hsv_to_rgb(h + shift, s, v);
            }
        }
    }

    let pixels = img
        .iter()
        .flat_map(|px| px.map(|c| math::round(c.clamp(0.0, 1.0) * 255.0) as u8))
        .collect();
    let image_labels = ImageLabelVector::from_classes(classes, instances.iter().map(|i| i.class_id));
    Ok(SceneRecord {
        image_id: String::new(),
        domain,
        width,
        height,
        pixels,
        instances,
        image_labels,
    })
}

fn place_objects(rng: &mut Lcg, width: usize, height: usize, classes: usize) -> Vec<GtInstance> {
    let wanted = rng.range_inclusive(1, MAX_OBJECTS);
    let mut placed: Vec<GtInstance> = Vec::new();
    'objects: for _ in 0..wanted {
        for _ in 0..PLACEMENT_ATTEMPTS {
            let side = rng.range_inclusive(MIN_SIDE, MAX_SIDE);
            let x1 = rng.range_inclusive(0, width as u32 - side) as f64;
            let y1 = rng.range_inclusive(0, height as u32 - side) as f64;
            let class_id = rng.below(classes as u32) as usize;
            let s = side as f64;
            let bbox = Bbox {
                x1,
                y1,
                x2: x1 + s,
                y2: y1 + s,
            };
            if placed.iter().all(|p| iou(&p.bbox, &bbox) < MAX_PAIR_IOU) {
                placed.push(GtInstance { bbox, class_id });
                continue 'objects;
            }
        }
        break;
    }
    placed
}

/// Membership test in the shape's normalised frame `[-1, 1]²`.
fn inside(class_id: usize, u: f64, v: f64) -> bool {
    let (au, av) = (math::abs(u), math::abs(v));
    if au > 1.0 || av > 1.0 {
        return false;
    }
    match class_id {
        0 => u * u + v * v <= 1.0,
        1 => true,
        2 => au <= (v + 1.0) / 2.0,
        3 => au + av <= 1.0,
        4 => au <= 0.34 || av <= 0.34,
        _ => av <= 0.866 && au + av / 1.732 <= 1.0,
    }
}

fn paint_shape(img: &mut [[f64; 3]], width: usize, inst: &GtInstance, color: [f64; 3], outline: bool) {
    let b = &inst.bbox;
    let (cx, cy) = b.center();
    let half = b.width() / 2.0;
    let inner = (half - STROKE) / half;
    for y in b.y1 as usize..b.y2 as usize {
        for x in b.x1 as usize..b.x2 as usize {
            let u = (x as f64 + 0.5 - cx) / half;
            let v = (y as f64 + 0.5 - cy) / half;
            if !inside(inst.class_id, u, v) {
                continue;
            }
            if outline && inside(inst.class_id, u / inner, v / inner) {
                continue;
            }
            img[y * width + x] = color;
        }
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = (h - math::floor(h)) * 6.0;
    let i = math::floor(h);
    let f = h - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as u32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn rgb_to_hsv([r, g, b]: [f64; 3]) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let s = if max > 0.0 { d / max } else { 0.0 };
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    (h - math::floor(h), s, max)
}

/// Sizes of a generated benchmark.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkConfig {
    pub seed: u64,
    pub classes: usize,
    pub train_per_domain: usize,
    pub test: usize,
    pub size: usize,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            classes: 3,
            train_per_domain: 200,
            test: 100,
            size: 64,
        }
    }
}

const STREAM_SOURCE_TRAIN: u64 = 0;
const STREAM_TARGET_TRAIN: u64 = 1;
const STREAM_TARGET_TEST: u64 = 2;

/// Train split (both domains) and target test split.
pub fn generate_benchmark(cfg: &BenchmarkConfig) -> Result<(DatasetManifest, DatasetManifest)> {
    let names = class_names(cfg.classes)?;
    let mut train = Vec::with_capacity(2 * cfg.train_per_domain);
    for (domain, stream, prefix) in [
        (DomainLabel::Source, STREAM_SOURCE_TRAIN, "src_train"),
        (DomainLabel::Target, STREAM_TARGET_TRAIN, "tgt_train"),
    ] {
        let stream_seed = mix(cfg.seed, stream);
        for i in 0..cfg.train_per_domain {
            let mut r = generate_scene(mix(stream_seed, i as u64), domain, cfg.size, cfg.size, cfg.classes)?;
            r.image_id = format!("{prefix}_{i:05}");
            train.push(r);
        }
    }
    let stream_seed = mix(cfg.seed, STREAM_TARGET_TEST);
    let mut test = Vec::with_capacity(cfg.test);
    for i in 0..cfg.test {
        let mut r =
            generate_annotated_scene(mix(stream_seed, i as u64), DomainLabel::Target, cfg.size, cfg.size, cfg.classes)?;
        r.image_id = format!("tgt_test_{i:05}");
        test.push(r);
    }
    Ok((
        DatasetManifest {
            class_names: names.clone(),
            seed: cfg.seed,
            split: Split::Train,
            records: train,
        },
        DatasetManifest {
            class_names: names,
            seed: cfg.seed,
            split: Split::Test,
            records: test,
        },
    ))
}

/// Accuracy of a logistic-regression probe on per-image channel means,
/// trained for `steps` full-batch steps on `train` and scored on `held_out`.
pub fn domain_probe_accuracy(train: &[&SceneRecord], held_out: &[&SceneRecord], steps: usize) -> f64 {
    let feats = |r: &SceneRecord| r.channel_means();
    let n = train.len() as f64;
    let mut mean = [0.0; 3];
    for r in train {
        for (m, v) in mean.iter_mut().zip(feats(r)) {
            *m += v / n;
        }
    }
    let mut std = [0.0; 3];
    for r in train {
        for ((s, v), m) in std.iter_mut().zip(feats(r)).zip(mean) {
            *s += (v - m) * (v - m) / n;
        }
    }
    let std = std.map(|s| math::sqrt(s).max(1e-12));
    let norm = |r: &SceneRecord| {
        let f = feats(r);
        [0, 1, 2].map(|i| (f[i] - mean[i]) / std[i])
    };
    let mut w = [0.0; 3];
    let mut b = 0.0;
    let lr = 1.0;
    for _ in 0..steps {
        let mut gw = [0.0; 3];
        let mut gb = 0.0;
        for r in train {
            let x = norm(r);
            let p = math::sigmoid(w[0] * x[0] + w[1] * x[1] + w[2] * x[2] + b);
            let e = p - r.domain.value();
            for i in 0..3 {
                gw[i] += e * x[i] / n;
            }
            gb += e / n;
        }
        for i in 0..3 {
            w[i] -= lr * gw[i];
        }
        b -= lr * gb;
    }
    let correct = held_out
        .iter()
        .filter(|r| {
            let x = norm(r);
            let z = w[0] * x[0] + w[1] * x[1] + w[2] * x[2] + b;
            (z > 0.0) == (r.domain == DomainLabel::Target)
        })
        .count();
    correct as f64 / held_out.len().max(1) as f64
}
