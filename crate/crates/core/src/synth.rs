//! Deterministic desk-scale fixtures.
//!
//! Scenes are single-channel images holding box-annotated "pedestrians"
//! (head, torso and two legs) and distractors: vertical bars with the same
//! box shape and brightness but no body structure. A fixed random backbone
//! produces feature maps at strides 4, 8 and 16, and an oracle proposer
//! scores anchors by their overlap with ground truth, scoring distractor
//! anchors near 0.5 so that they act as hard negatives.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::GroundTruthBox;
use crate::geometry::{encode_delta, iou, AnchorGrid, Box2};
use crate::proposals::{label_anchors, Label, SCORE_EPS};
use crate::tensors::{atrous_stage, conv2d, max_pool, FeatureMap, FilterBank};

/// Width over height of every synthetic pedestrian and distractor box.
pub const PEDESTRIAN_ASPECT: f64 = 0.41;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    pub pedestrians: usize,
    pub distractors: usize,
    pub min_height: f64,
    pub max_height: f64,
    /// Largest IoU allowed between any two placed objects.
    pub max_overlap: f64,
    /// Standard deviation of the per-pixel noise.
    pub pixel_noise: f32,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            width: 320,
            height: 240,
            pedestrians: 3,
            distractors: 4,
            min_height: 40.0,
            max_height: 200.0,
            max_overlap: 0.3,
            pixel_noise: 0.08,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    /// One channel, stride 1.
    pub image: FeatureMap,
    pub gts: Vec<GroundTruthBox>,
    pub distractors: Vec<Box2>,
}

impl Scene {
    pub fn size(&self) -> (usize, usize) {
        (self.image.width, self.image.height)
    }

    pub fn gt_boxes(&self) -> Vec<Box2> {
        self.gts.iter().map(|g| g.bbox).collect()
    }
}

const PLACEMENT_RETRIES: usize = 200;

fn place(
    rng: &mut ChaCha8Rng,
    cfg: &SceneConfig,
    taken: &[Box2],
) -> Result<Box2> {
    let max_h = cfg.max_height.min(cfg.height as f64);
    if max_h < cfg.min_height || PEDESTRIAN_ASPECT * cfg.min_height > cfg.width as f64 {
        return Err(Error::Placement(format!(
            "objects of height >= {} do not fit a {}x{} image",
            cfg.min_height, cfg.width, cfg.height
        )));
    }
    for _ in 0..PLACEMENT_RETRIES {
        let h = rng.gen_range(cfg.min_height..=max_h);
        let w = PEDESTRIAN_ASPECT * h;
        if w > cfg.width as f64 {
            continue;
        }
        let x = rng.gen_range(0.0..=(cfg.width as f64 - w));
        let y = rng.gen_range(0.0..=(cfg.height as f64 - h));
        let b = Box2::new(x, y, w, h)?;
        if taken.iter().all(|t| iou(t, &b) <= cfg.max_overlap) {
            return Ok(b);
        }
    }
    Err(Error::Placement(format!(
        "no room for another object after {PLACEMENT_RETRIES} tries"
    )))
}

/// Paints `value` over the part of `[x0, x1) x [y0, y1)` (pixels) inside
/// the image.
fn fill(img: &mut FeatureMap, x0: f64, y0: f64, x1: f64, y1: f64, value: f32) {
    let xa = x0.round().max(0.0) as usize;
    let ya = y0.round().max(0.0) as usize;
    let xb = (x1.round().max(0.0) as usize).min(img.width);
    let yb = (y1.round().max(0.0) as usize).min(img.height);
    for y in ya..yb {
        for x in xa..xb {
            img.set(0, y, x, value);
        }
    }
}

fn paint_pedestrian(img: &mut FeatureMap, b: &Box2, tone: f32) {
    let (x, y, w, h) = (b.x(), b.y(), b.w(), b.h());
    // head
    fill(img, x + 0.32 * w, y, x + 0.68 * w, y + 0.16 * h, tone);
    // torso and arms
    fill(img, x + 0.08 * w, y + 0.17 * h, x + 0.92 * w, y + 0.55 * h, tone * 0.85);
    // legs
    fill(img, x + 0.12 * w, y + 0.55 * h, x + 0.42 * w, y + h, tone * 0.7);
    fill(img, x + 0.58 * w, y + 0.55 * h, x + 0.88 * w, y + h, tone * 0.7);
}

fn paint_distractor(img: &mut FeatureMap, b: &Box2, tone: f32, width_frac: f64) {
    let (x, y, w, h) = (b.x(), b.y(), b.w(), b.h());
    let half = 0.5 * width_frac * w;
    let cx = x + 0.5 * w;
    fill(img, cx - half, y, cx + half, y + h, tone * 0.85);
}

/// Generates one scene; identical seeds give identical pixels.
pub fn gen_scene(seed: u64, cfg: &SceneConfig) -> Result<Scene> {
    if cfg.width < 16 || cfg.height < 16 {
        return Err(Error::Config(format!(
            "scene {}x{} is smaller than 16 pixels per side",
            cfg.width, cfg.height
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = FeatureMap::zeros(1, cfg.height, cfg.width, 1.0);
    // low-frequency background: a random linear ramp
    let base: f32 = rng.gen_range(0.1..0.3);
    let gx: f32 = rng.gen_range(-0.1..0.1) / cfg.width as f32;
    let gy: f32 = rng.gen_range(-0.1..0.1) / cfg.height as f32;
    for y in 0..cfg.height {
        for x in 0..cfg.width {
            img.set(0, y, x, base + gx * x as f32 + gy * y as f32);
        }
    }
    let mut taken = Vec::new();
    let mut gts = Vec::with_capacity(cfg.pedestrians);
    for _ in 0..cfg.pedestrians {
        let b = place(&mut rng, cfg, &taken)?;
        taken.push(b);
        gts.push(GroundTruthBox::new(b, 1.0));
    }
    let mut distractors = Vec::with_capacity(cfg.distractors);
    for _ in 0..cfg.distractors {
        let b = place(&mut rng, cfg, &taken)?;
        taken.push(b);
        distractors.push(b);
    }
    // paint in placement order so later objects occlude earlier ones
    for (i, b) in taken.iter().enumerate() {
        let tone: f32 = rng.gen_range(0.55..0.9);
        if i < gts.len() {
            paint_pedestrian(&mut img, b, tone);
        } else {
            let width_frac = rng.gen_range(0.45..0.8);
            paint_distractor(&mut img, b, tone, width_frac);
        }
    }
    if cfg.pixel_noise > 0.0 {
        let noise = Normal::new(0.0f32, cfg.pixel_noise).expect("finite noise level");
        for v in img.data.iter_mut() {
            *v += noise.sample(&mut rng);
        }
    }
    Ok(Scene {
        image: img,
        gts,
        distractors,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub seed: u64,
    /// Output channels of the five convolutions.
    pub channels: [usize; 5],
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            seed: 0x5eed,
            channels: [4, 8, 8, 12, 12],
        }
    }
}

/// Five seeded 3x3 convolutions with ReLU, pooled down to stride 16.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyBackbone {
    pub conv1: FilterBank,
    pub conv2: FilterBank,
    pub conv3: FilterBank,
    pub conv4: FilterBank,
    pub conv5: FilterBank,
}

/// Feature maps of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct Pyramid {
    pub conv3: FeatureMap,
    pub conv4: FeatureMap,
    pub conv5: FeatureMap,
    pub conv4_atrous: FeatureMap,
}

impl Pyramid {
    pub fn layer(&self, name: &str) -> Option<&FeatureMap> {
        match name {
            "conv3" => Some(&self.conv3),
            "conv4" => Some(&self.conv4),
            "conv5" => Some(&self.conv5),
            "conv4_atrous" => Some(&self.conv4_atrous),
            _ => None,
        }
    }
}

pub const LAYER_NAMES: [&str; 4] = ["conv3", "conv4", "conv5", "conv4_atrous"];

fn random_bank(rng: &mut ChaCha8Rng, out_c: usize, in_c: usize) -> FilterBank {
    let fan_in = (in_c * 9) as f32;
    let normal = Normal::new(0.0f32, (2.0 / fan_in).sqrt()).expect("finite scale");
    let weights = (0..out_c * in_c * 9).map(|_| normal.sample(rng)).collect();
    let bias = (0..out_c).map(|_| rng.gen_range(0.0..0.05)).collect();
    FilterBank::new(out_c, in_c, (3, 3), weights, bias)
        .expect("consistent bank shape")
        .with_relu(true)
}

impl ToyBackbone {
    pub fn new(cfg: &BackboneConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let c = cfg.channels;
        ToyBackbone {
            conv1: random_bank(&mut rng, c[0], 1),
            conv2: random_bank(&mut rng, c[1], c[0]),
            conv3: random_bank(&mut rng, c[2], c[1]),
            conv4: random_bank(&mut rng, c[3], c[2]),
            conv5: random_bank(&mut rng, c[4], c[3]),
        }
    }

    pub fn layer_channels(&self, name: &str) -> Option<usize> {
        match name {
            "conv3" => Some(self.conv3.out_channels),
            "conv4" | "conv4_atrous" => Some(self.conv4.out_channels),
            "conv5" => Some(self.conv5.out_channels),
            _ => None,
        }
    }
}

/// Runs the backbone; strides are 4, 8, 16 and 4 for the à-trous map.
pub fn extract_pyramid(bb: &ToyBackbone, image: &FeatureMap) -> Result<Pyramid> {
    if image.width < 16 || image.height < 16 {
        return Err(Error::Shape(format!(
            "image {}x{} is smaller than 16 pixels per side",
            image.width, image.height
        )));
    }
    let x = conv2d(image, &bb.conv1)?;
    let x = max_pool(&x, 2, 2)?;
    let x = conv2d(&x, &bb.conv2)?;
    let x = max_pool(&x, 2, 2)?;
    let conv3 = conv2d(&x, &bb.conv3)?;
    let conv4 = conv2d(&max_pool(&conv3, 2, 2)?, &bb.conv4)?;
    let conv5 = conv2d(&max_pool(&conv4, 2, 2)?, &bb.conv5)?;
    let conv4_atrous = atrous_stage(&conv3, 2, std::slice::from_ref(&bb.conv4))?;
    Ok(Pyramid {
        conv3,
        conv4,
        conv5,
        conv4_atrous,
    })
}

/// Score given to anchors that cover a distractor.
pub const DISTRACTOR_SCORE: f64 = 0.5;

/// Score and delta maps a trained RPN would ideally produce, plus noise.
///
/// An anchor scores its best IoU with ground truth; anchors overlapping a
/// distractor by more than 0.5 score at least [`DISTRACTOR_SCORE`]. Gaussian
/// noise of `noise_sigma` is added and the result clamped into `(0, 1)`.
/// Positive anchors regress exactly onto their matched ground truth, with
/// noise of `noise_sigma / 2` on each delta component; all other deltas are
/// zero.
pub fn oracle_rpn(
    scene: &Scene,
    grid: &AnchorGrid,
    noise_sigma: f64,
    seed: u64,
) -> Result<(FeatureMap, FeatureMap)> {
    if !(noise_sigma >= 0.0) || !noise_sigma.is_finite() {
        return Err(Error::Config(format!("noise_sigma must be >= 0, got {noise_sigma}")));
    }
    let a = grid.num_scales();
    let stride = grid.config.stride as f32;
    let mut scores = FeatureMap::zeros(a, grid.rows, grid.cols, stride);
    let mut deltas = FeatureMap::zeros(4 * a, grid.rows, grid.cols, stride);
    let gts = scene.gt_boxes();
    let labels = label_anchors(grid, &gts, 0.5);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    for (i, anchor) in grid.anchors.iter().enumerate() {
        let (row, col, k) = grid.position(i);
        let mut s = labels[i].max_iou;
        if scene.distractors.iter().any(|d| iou(anchor, d) > 0.5) {
            s = s.max(DISTRACTOR_SCORE);
        }
        let z: f64 = unit.sample(&mut rng);
        s = (s + noise_sigma * z).clamp(SCORE_EPS, 1.0 - SCORE_EPS);
        scores.set(k, row, col, s as f32);
        if labels[i].label == Label::Positive {
            let g = labels[i].matched_gt.expect("positive anchors have a match");
            let d = encode_delta(anchor, &gts[g]);
            let mut jitter = || 0.5 * noise_sigma * unit.sample(&mut rng);
            let vals = [d.tx + jitter(), d.ty + jitter(), d.tw + jitter(), d.th + jitter()];
            for (c, v) in vals.into_iter().enumerate() {
                deltas.set(4 * k + c, row, col, v as f32);
            }
        }
    }
    Ok((scores, deltas))
}
