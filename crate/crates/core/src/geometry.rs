//! Box algebra shared by every other module.
//!
//! Boxes are continuous `(x, y, w, h)` rectangles in image pixels. Corner
//! form only appears inside the IoU and clipping kernels.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned rectangle with a strictly positive area.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawBox", into = "RawBox")]
pub struct Box2 {
    x: f64,
    y: f64,
    w: f64,
    h: f64,
}

#[derive(Serialize, Deserialize)]
struct RawBox {
    x: f64,
    y: f64,
    w: f64,
    h: f64,
}

impl TryFrom<RawBox> for Box2 {
    type Error = Error;

    fn try_from(r: RawBox) -> Result<Self> {
        Box2::new(r.x, r.y, r.w, r.h)
    }
}

impl From<Box2> for RawBox {
    fn from(b: Box2) -> Self {
        RawBox {
            x: b.x,
            y: b.y,
            w: b.w,
            h: b.h,
        }
    }
}

impl Box2 {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        let finite = x.is_finite() && y.is_finite() && w.is_finite() && h.is_finite();
        if !finite || w <= 0.0 || h <= 0.0 {
            return Err(Error::InvalidBox(format!("({x}, {y}, {w}, {h})")));
        }
        Ok(Box2 { x, y, w, h })
    }

    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        Box2::new(x1, y1, x2 - x1, y2 - y1)
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        Box2::new(cx - 0.5 * w, cy - 0.5 * h, w, h)
    }

    #[inline]
    pub fn x(&self) -> f64 {
        self.x
    }

    #[inline]
    pub fn y(&self) -> f64 {
        self.y
    }

    #[inline]
    pub fn w(&self) -> f64 {
        self.w
    }

    #[inline]
    pub fn h(&self) -> f64 {
        self.h
    }

    #[inline]
    pub fn x2(&self) -> f64 {
        self.x + self.w
    }

    #[inline]
    pub fn y2(&self) -> f64 {
        self.y + self.h
    }

    #[inline]
    pub fn center(&self) -> (f64, f64) {
        (self.x + 0.5 * self.w, self.y + 0.5 * self.h)
    }

    #[inline]
    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn aspect_ratio(&self) -> f64 {
        self.w / self.h
    }

    /// Area of the overlap with `other`, zero when disjoint.
    pub fn intersection(&self, other: &Box2) -> f64 {
        let iw = self.x2().min(other.x2()) - self.x.max(other.x);
        let ih = self.y2().min(other.y2()) - self.y.max(other.y);
        if iw <= 0.0 || ih <= 0.0 {
            0.0
        } else {
            iw * ih
        }
    }

    /// Intersection over union, in `[0, 1]`.
    pub fn iou(&self, other: &Box2) -> f64 {
        iou(self, other)
    }
}

pub fn iou(a: &Box2, b: &Box2) -> f64 {
    // corner arithmetic can lose the last bit on identical boxes
    if a == b {
        return 1.0;
    }
    let inter = a.intersection(b);
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Clamps `b` to `[0, width] x [0, height]`.
///
/// Fails when the box has no positive-area overlap with the image.
pub fn clip_box(b: &Box2, image_size: (f64, f64)) -> Result<Box2> {
    let (width, height) = image_size;
    let x1 = b.x.clamp(0.0, width);
    let y1 = b.y.clamp(0.0, height);
    let x2 = b.x2().clamp(0.0, width);
    let y2 = b.y2().clamp(0.0, height);
    if x2 <= x1 || y2 <= y1 {
        return Err(Error::OutOfBounds(format!(
            "box {b:?} outside {width}x{height} image"
        )));
    }
    Box2::from_corners(x1, y1, x2, y2)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnchorConfig {
    pub base_height: f64,
    pub scale_step: f64,
    pub num_scales: usize,
    /// Width over height.
    pub aspect_ratio: f64,
    pub stride: usize,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        AnchorConfig {
            base_height: 40.0,
            scale_step: 1.3,
            num_scales: 9,
            aspect_ratio: 0.41,
            stride: 16,
        }
    }
}

impl AnchorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale_step > 1.0) {
            return Err(Error::Config(format!(
                "scale_step must exceed 1, got {}",
                self.scale_step
            )));
        }
        if self.num_scales == 0 {
            return Err(Error::Config("num_scales must be at least 1".into()));
        }
        if !(self.aspect_ratio > 0.0) || !(self.base_height > 0.0) {
            return Err(Error::Config(
                "aspect_ratio and base_height must be positive".into(),
            ));
        }
        if self.stride == 0 {
            return Err(Error::Config("stride must be at least 1".into()));
        }
        Ok(())
    }

    /// Anchor height at scale index `k`.
    pub fn height(&self, k: usize) -> f64 {
        self.base_height * self.scale_step.powi(k as i32)
    }

    pub fn scale_sizes(&self) -> Vec<(f64, f64)> {
        (0..self.num_scales)
            .map(|k| {
                let h = self.height(k);
                (self.aspect_ratio * h, h)
            })
            .collect()
    }
}

/// Anchors laid out row-major over stride cells, then by scale index.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorGrid {
    pub anchors: Vec<Box2>,
    pub rows: usize,
    pub cols: usize,
    pub config: AnchorConfig,
    pub image_size: (usize, usize),
}

impl AnchorGrid {
    pub fn num_scales(&self) -> usize {
        self.config.num_scales
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    /// Flat index of the anchor at `(row, col, scale)`.
    #[inline]
    pub fn index(&self, row: usize, col: usize, scale: usize) -> usize {
        (row * self.cols + col) * self.config.num_scales + scale
    }

    /// Inverse of [`AnchorGrid::index`].
    #[inline]
    pub fn position(&self, index: usize) -> (usize, usize, usize) {
        let a = self.config.num_scales;
        let cell = index / a;
        (cell / self.cols, cell % self.cols, index % a)
    }
}

/// Places one anchor per scale at every stride cell of the image.
///
/// Anchors that cross the image border are kept.
pub fn generate_anchors(cfg: &AnchorConfig, image_size: (usize, usize)) -> Result<AnchorGrid> {
    cfg.validate()?;
    let (width, height) = image_size;
    if width < cfg.stride || height < cfg.stride {
        return Err(Error::Config(format!(
            "image {width}x{height} smaller than one {}-pixel stride cell",
            cfg.stride
        )));
    }
    let rows = height / cfg.stride;
    let cols = width / cfg.stride;
    let sizes = cfg.scale_sizes();
    let stride = cfg.stride as f64;
    let mut anchors = Vec::with_capacity(rows * cols * sizes.len());
    for row in 0..rows {
        let cy = (row as f64 + 0.5) * stride;
        for col in 0..cols {
            let cx = (col as f64 + 0.5) * stride;
            for &(w, h) in &sizes {
                anchors.push(Box2::from_center(cx, cy, w, h)?);
            }
        }
    }
    Ok(AnchorGrid {
        anchors,
        rows,
        cols,
        config: *cfg,
        image_size,
    })
}

/// Regression target of a box relative to an anchor.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Delta {
    pub tx: f64,
    pub ty: f64,
    pub tw: f64,
    pub th: f64,
}

/// Upper bound on `tw`/`th` before exponentiation.
pub fn max_log_scale() -> f64 {
    (1000.0f64 / 16.0).ln()
}

pub fn encode_delta(anchor: &Box2, target: &Box2) -> Delta {
    let (ax, ay) = anchor.center();
    let (tx, ty) = target.center();
    Delta {
        tx: (tx - ax) / anchor.w,
        ty: (ty - ay) / anchor.h,
        tw: (target.w / anchor.w).ln(),
        th: (target.h / anchor.h).ln(),
    }
}

pub fn decode_delta(anchor: &Box2, d: &Delta) -> Result<Box2> {
    let (ax, ay) = anchor.center();
    let cap = max_log_scale();
    let w = anchor.w * d.tw.min(cap).exp();
    let h = anchor.h * d.th.min(cap).exp();
    Box2::from_center(ax + d.tx * anchor.w, ay + d.ty * anchor.h, w, h)
}

/// Order of `scores` by descending value, ties by lower index.
pub fn rank_by_score(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

/// Greedy NMS returning surviving input indices in descending score order.
pub fn nms_indices(boxes: &[Box2], scores: &[f64], iou_threshold: f64) -> Vec<usize> {
    assert_eq!(boxes.len(), scores.len(), "one score per box");
    let order = rank_by_score(scores);
    let mut suppressed = vec![false; order.len()];
    let mut keep = Vec::new();
    for i in 0..order.len() {
        if suppressed[i] {
            continue;
        }
        let kept = &boxes[order[i]];
        keep.push(order[i]);
        for j in (i + 1)..order.len() {
            if !suppressed[j] && iou(kept, &boxes[order[j]]) > iou_threshold {
                suppressed[j] = true;
            }
        }
    }
    keep
}

/// Greedy non-maximum suppression over `(box, score)` pairs.
pub fn nms(dets: &[(Box2, f64)], iou_threshold: f64) -> Vec<(Box2, f64)> {
    let boxes: Vec<Box2> = dets.iter().map(|d| d.0).collect();
    let scores: Vec<f64> = dets.iter().map(|d| d.1).collect();
    nms_indices(&boxes, &scores, iou_threshold)
        .into_iter()
        .map(|i| dets[i])
        .collect()
}
