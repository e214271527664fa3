//! From RPN score/delta maps to ranked proposals.
//!
//! The anchor labeler and minibatch sampler mirror the RPN training contract
//! (without any gradient step); decoding, NMS and top-k selection turn score
//! maps into the proposal lists consumed by feature extraction.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{clip_box, decode_delta, iou, nms_indices, AnchorGrid, Box2, Delta};
use crate::tensors::FeatureMap;

/// Scores are kept inside `[SCORE_EPS, 1 - SCORE_EPS]`.
pub const SCORE_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    #[serde(rename = "box")]
    pub bbox: Box2,
    /// Proposal confidence in `(0, 1)`.
    pub score: f64,
    pub source_anchor: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Label {
    Positive,
    Negative,
    Ignored,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnchorLabel {
    pub label: Label,
    pub matched_gt: Option<usize>,
    pub max_iou: f64,
}

/// Labels anchors against ground truth.
///
/// An anchor is positive when its best IoU strictly exceeds `iou_pos`; in
/// addition the best anchor of every ground truth (lowest index on ties) is
/// positive. Everything else, including cross-boundary anchors, is negative.
pub fn label_anchors(grid: &AnchorGrid, gts: &[Box2], iou_pos: f64) -> Vec<AnchorLabel> {
    let mut labels: Vec<AnchorLabel> = grid
        .anchors
        .iter()
        .map(|a| {
            let mut best = (None, 0.0);
            for (g, gt) in gts.iter().enumerate() {
                let v = iou(a, gt);
                if v > best.1 {
                    best = (Some(g), v);
                }
            }
            AnchorLabel {
                label: if best.1 > iou_pos {
                    Label::Positive
                } else {
                    Label::Negative
                },
                matched_gt: best.0,
                max_iou: best.1,
            }
        })
        .collect();
    for gt in gts {
        let mut best: Option<(usize, f64)> = None;
        for (i, a) in grid.anchors.iter().enumerate() {
            let v = iou(a, gt);
            if v > 0.0 && best.is_none_or(|(_, b)| v > b) {
                best = Some((i, v));
            }
        }
        if let Some((i, _)) = best {
            labels[i].label = Label::Positive;
        }
    }
    labels
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleBatch {
    /// `(anchor index, label)`, positives first.
    pub entries: Vec<(usize, Label)>,
}

impl SampleBatch {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn count(&self, label: Label) -> usize {
        self.entries.iter().filter(|e| e.1 == label).count()
    }
}

/// Draws one RPN minibatch: up to `size / (1 + neg_per_pos)` positives, the
/// rest negatives.
pub fn sample_minibatch(
    labels: &[AnchorLabel],
    rng_seed: u64,
    size: usize,
    neg_per_pos: usize,
) -> Result<SampleBatch> {
    if labels.is_empty() {
        return Err(Error::Empty("no anchors to sample".into()));
    }
    let pick = |want: Label| -> Vec<usize> {
        labels
            .iter()
            .enumerate()
            .filter(|(_, l)| l.label == want)
            .map(|(i, _)| i)
            .collect()
    };
    let positives = pick(Label::Positive);
    let negatives = pick(Label::Negative);
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let n_pos = positives.len().min(size / (1 + neg_per_pos));
    let n_neg = negatives.len().min(size - n_pos);
    let mut entries = Vec::with_capacity(n_pos + n_neg);
    for i in sample(&mut rng, positives.len(), n_pos) {
        entries.push((positives[i], Label::Positive));
    }
    for i in sample(&mut rng, negatives.len(), n_neg) {
        entries.push((negatives[i], Label::Negative));
    }
    Ok(SampleBatch { entries })
}

/// Reads the delta for anchor `k` at `(row, col)` from a `4A`-channel map.
pub fn delta_at(delta_map: &FeatureMap, row: usize, col: usize, k: usize) -> Delta {
    Delta {
        tx: delta_map.at(4 * k, row, col) as f64,
        ty: delta_map.at(4 * k + 1, row, col) as f64,
        tw: delta_map.at(4 * k + 2, row, col) as f64,
        th: delta_map.at(4 * k + 3, row, col) as f64,
    }
}

/// Turns score and delta maps into clipped proposals, row-major then scale.
///
/// Proposals whose decoded box lies entirely outside the image are dropped.
pub fn decode_proposals(
    score_map: &FeatureMap,
    delta_map: &FeatureMap,
    grid: &AnchorGrid,
) -> Result<Vec<Proposal>> {
    let a = grid.num_scales();
    let shape_ok = |m: &FeatureMap, c: usize| {
        m.channels == c && m.height == grid.rows && m.width == grid.cols
    };
    if !shape_ok(score_map, a) {
        return Err(Error::Shape(format!(
            "score map {}x{}x{} does not match {a}x{}x{}",
            score_map.channels, score_map.height, score_map.width, grid.rows, grid.cols
        )));
    }
    if !shape_ok(delta_map, 4 * a) {
        return Err(Error::Shape(format!(
            "delta map {}x{}x{} does not match {}x{}x{}",
            delta_map.channels,
            delta_map.height,
            delta_map.width,
            4 * a,
            grid.rows,
            grid.cols
        )));
    }
    let image = (grid.image_size.0 as f64, grid.image_size.1 as f64);
    let mut out = Vec::with_capacity(grid.len());
    for row in 0..grid.rows {
        for col in 0..grid.cols {
            for k in 0..a {
                let idx = grid.index(row, col, k);
                let decoded = decode_delta(&grid.anchors[idx], &delta_at(delta_map, row, col, k))?;
                let Ok(bbox) = clip_box(&decoded, image) else {
                    continue;
                };
                let score = (score_map.at(k, row, col) as f64).clamp(SCORE_EPS, 1.0 - SCORE_EPS);
                out.push(Proposal {
                    bbox,
                    score,
                    source_anchor: idx,
                });
            }
        }
    }
    Ok(out)
}

/// NMS at `nms_iou`, then the `top_k` best survivors by score.
pub fn select_proposals(props: &[Proposal], nms_iou: f64, top_k: usize) -> Vec<Proposal> {
    let boxes: Vec<Box2> = props.iter().map(|p| p.bbox).collect();
    let scores: Vec<f64> = props.iter().map(|p| p.score).collect();
    nms_indices(&boxes, &scores, nms_iou)
        .into_iter()
        .take(top_k)
        .map(|i| props[i])
        .collect()
}

/// Fraction of ground truths recalled at each IoU threshold.
///
/// Proposals from all `M` images are pooled and the global top `round(k*M)`
/// by score are kept (ties by image, then position). A ground truth counts as
/// recalled at `t` when a kept proposal of its image reaches IoU `>= t`.
pub fn recall_at(
    props_per_image: &[Vec<Proposal>],
    gts_per_image: &[Vec<Box2>],
    iou_grid: &[f64],
    k: f64,
) -> Result<Vec<f64>> {
    if props_per_image.len() != gts_per_image.len() {
        return Err(Error::Shape(format!(
            "{} proposal lists for {} images",
            props_per_image.len(),
            gts_per_image.len()
        )));
    }
    let total_gts: usize = gts_per_image.iter().map(Vec::len).sum();
    if total_gts == 0 {
        return Err(Error::Empty("no ground truth to recall".into()));
    }
    let budget = (k * props_per_image.len() as f64).round().max(0.0) as usize;
    let mut pooled: Vec<(usize, &Proposal)> = props_per_image
        .iter()
        .enumerate()
        .flat_map(|(img, ps)| ps.iter().map(move |p| (img, p)))
        .collect();
    // stable: equal scores keep (image, position) order
    pooled.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));
    pooled.truncate(budget);

    let mut best = gts_per_image
        .iter()
        .map(|g| vec![0.0f64; g.len()])
        .collect::<Vec<_>>();
    for (img, p) in pooled {
        for (g, gt) in gts_per_image[img].iter().enumerate() {
            let v = iou(&p.bbox, gt);
            if v > best[img][g] {
                best[img][g] = v;
            }
        }
    }
    Ok(iou_grid
        .iter()
        .map(|&t| {
            let hit = best.iter().flatten().filter(|&&v| v > 0.0 && v >= t).count();
            hit as f64 / total_gts as f64
        })
        .collect())
}
