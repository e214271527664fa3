//! Miss rate versus false positives per image.
//!
//! Ground truth outside the reasonable subset becomes an ignore region.
//! Detections are matched greedily in score order; a detection that only
//! overlaps ignore regions is dropped from scoring. The curve sweeps the
//! score threshold and the summary is the geometric mean of miss rates
//! sampled at log-spaced FPPI references.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, rank_by_score, Box2};

/// Miss rates are floored here before taking logs.
pub const MR_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthBox {
    #[serde(rename = "box")]
    pub bbox: Box2,
    /// Full (unoccluded) height in pixels.
    pub height: f64,
    pub visibility: f64,
    pub ignore: bool,
}

impl GroundTruthBox {
    pub fn new(bbox: Box2, visibility: f64) -> Self {
        GroundTruthBox {
            bbox,
            height: bbox.h(),
            visibility,
            ignore: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: String,
    #[serde(rename = "box")]
    pub bbox: Box2,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReasonableFilter {
    pub min_height: f64,
    pub min_visibility: f64,
}

impl Default for ReasonableFilter {
    fn default() -> Self {
        ReasonableFilter {
            min_height: 50.0,
            min_visibility: 0.65,
        }
    }
}

/// Flags every box below either bound as ignored; bounds are inclusive.
pub fn filter_reasonable(gts: &[GroundTruthBox], filter: ReasonableFilter) -> Vec<GroundTruthBox> {
    gts.iter()
        .map(|g| GroundTruthBox {
            ignore: g.height < filter.min_height || g.visibility < filter.min_visibility,
            ..*g
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DetOutcome {
    TruePositive { gt: usize },
    FalsePositive,
    /// Overlaps only an ignore region; neither TP nor FP.
    Ignored,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GtOutcome {
    Matched { det: usize },
    Missed,
    Ignored,
}

/// Matching result of one image; outcome vectors follow input order.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageMatch {
    pub scores: Vec<f64>,
    pub dets: Vec<DetOutcome>,
    pub gts: Vec<GtOutcome>,
}

impl ImageMatch {
    pub fn true_positives(&self) -> usize {
        self.dets
            .iter()
            .filter(|d| matches!(d, DetOutcome::TruePositive { .. }))
            .count()
    }

    pub fn false_positives(&self) -> usize {
        self.dets
            .iter()
            .filter(|d| **d == DetOutcome::FalsePositive)
            .count()
    }

    pub fn counted_gts(&self) -> usize {
        self.gts.iter().filter(|g| **g != GtOutcome::Ignored).count()
    }
}

/// Greedy matching of one image's detections, highest score first (ties by
/// input order).
///
/// Each detection takes the unmatched non-ignored ground truth of highest
/// IoU `>= iou_thresh` (lowest index on ties). Failing that it is ignored if
/// some ignore region reaches the threshold, otherwise it is a false
/// positive.
pub fn match_image(dets: &[(Box2, f64)], gts: &[GroundTruthBox], iou_thresh: f64) -> ImageMatch {
    let scores: Vec<f64> = dets.iter().map(|d| d.1).collect();
    let mut det_out = vec![DetOutcome::FalsePositive; dets.len()];
    let mut gt_out: Vec<GtOutcome> = gts
        .iter()
        .map(|g| {
            if g.ignore {
                GtOutcome::Ignored
            } else {
                GtOutcome::Missed
            }
        })
        .collect();
    for d in rank_by_score(&scores) {
        let b = &dets[d].0;
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if gt_out[g] != GtOutcome::Missed {
                continue;
            }
            let v = iou(b, &gt.bbox);
            if v >= iou_thresh && best.is_none_or(|(_, bv)| v > bv) {
                best = Some((g, v));
            }
        }
        det_out[d] = if let Some((g, _)) = best {
            gt_out[g] = GtOutcome::Matched { det: d };
            DetOutcome::TruePositive { gt: g }
        } else if gts
            .iter()
            .any(|gt| gt.ignore && iou(b, &gt.bbox) >= iou_thresh)
        {
            DetOutcome::Ignored
        } else {
            DetOutcome::FalsePositive
        };
    }
    ImageMatch {
        scores,
        dets: det_out,
        gts: gt_out,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub threshold: f64,
    pub fppi: f64,
    pub miss_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalCurve {
    /// Descending threshold; FPPI non-decreasing, miss rate non-increasing.
    pub points: Vec<CurvePoint>,
    /// Log-average miss rate over FPPI `[1e-2, 1]`.
    pub mr2: f64,
    /// Log-average miss rate over FPPI `[1e-4, 1]`.
    pub mr4: f64,
}

/// Sweeps the score threshold over every scored detection.
///
/// With no scored detection the curve is the single point
/// `(+inf, 0, 1)`.
pub fn curve(matches: &[ImageMatch], num_images: usize) -> Result<EvalCurve> {
    let total: usize = matches.iter().map(ImageMatch::counted_gts).sum();
    if total == 0 {
        return Err(Error::Empty("no non-ignored ground truth".into()));
    }
    if num_images == 0 {
        return Err(Error::Empty("no images".into()));
    }
    let mut scored: Vec<(f64, bool)> = matches
        .iter()
        .flat_map(|m| {
            m.scores.iter().zip(&m.dets).filter_map(|(&s, d)| match d {
                DetOutcome::TruePositive { .. } => Some((s, true)),
                DetOutcome::FalsePositive => Some((s, false)),
                DetOutcome::Ignored => None,
            })
        })
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let n_img = num_images as f64;
    let g = total as f64;
    let mut points = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < scored.len() {
        let t = scored[i].0;
        while i < scored.len() && scored[i].0 == t {
            if scored[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(CurvePoint {
            threshold: t,
            fppi: fp as f64 / n_img,
            miss_rate: (total - tp) as f64 / g,
        });
    }
    if points.is_empty() {
        points.push(CurvePoint {
            threshold: f64::INFINITY,
            fppi: 0.0,
            miss_rate: 1.0,
        });
    }
    Ok(EvalCurve::from_points(points))
}

impl EvalCurve {
    pub fn from_points(points: Vec<CurvePoint>) -> Self {
        let mut c = EvalCurve {
            points,
            mr2: f64::NAN,
            mr4: f64::NAN,
        };
        c.mr2 = log_average_mr(&c, 1e-2, 1.0, 9);
        c.mr4 = log_average_mr(&c, 1e-4, 1.0, 9);
        c
    }
}

/// Reference FPPI values spaced evenly in log10 between `lo` and `hi`.
pub fn reference_fppi(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    if points <= 1 {
        return vec![lo];
    }
    let (a, b) = (lo.log10(), hi.log10());
    let step = (b - a) / (points - 1) as f64;
    (0..points)
        .map(|i| 10f64.powf(a + i as f64 * step))
        .collect()
}

/// Geometric mean of the miss rate at `points` log-spaced reference FPPIs.
///
/// Each reference takes the miss rate of the last operating point whose
/// FPPI does not exceed it, or the curve's highest miss rate when there is
/// none. Miss rates are floored at [`MR_FLOOR`].
pub fn log_average_mr(c: &EvalCurve, fppi_lo: f64, fppi_hi: f64, points: usize) -> f64 {
    let worst = c
        .points
        .iter()
        .map(|p| p.miss_rate)
        .fold(f64::NEG_INFINITY, f64::max);
    let worst = if worst.is_finite() { worst } else { 1.0 };
    let refs = reference_fppi(fppi_lo, fppi_hi, points);
    let sum: f64 = refs
        .iter()
        .map(|&r| {
            let mr = c
                .points
                .iter()
                .rev()
                .find(|p| p.fppi <= r)
                .map_or(worst, |p| p.miss_rate);
            mr.max(MR_FLOOR).ln()
        })
        .sum();
    (sum / refs.len() as f64).exp()
}

/// Evaluates a whole detection set.
///
/// `images` fixes the image order and count; detections of unknown images
/// are an error.
pub fn evaluate(
    images: &[String],
    dets: &[Detection],
    gts: &[(String, GroundTruthBox)],
    iou_thresh: f64,
) -> Result<EvalCurve> {
    let index: std::collections::HashMap<&str, usize> = images
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    let mut per_det = vec![Vec::new(); images.len()];
    let mut per_gt = vec![Vec::new(); images.len()];
    for d in dets {
        let i = *index
            .get(d.image_id.as_str())
            .ok_or_else(|| Error::Empty(format!("detection for unknown image {}", d.image_id)))?;
        per_det[i].push((d.bbox, d.score));
    }
    for (id, g) in gts {
        let i = *index
            .get(id.as_str())
            .ok_or_else(|| Error::Empty(format!("ground truth for unknown image {id}")))?;
        per_gt[i].push(*g);
    }
    let matches: Vec<ImageMatch> = per_det
        .iter()
        .zip(&per_gt)
        .map(|(d, g)| match_image(d, g, iou_thresh))
        .collect();
    curve(&matches, images.len())
}

/// The curve as CSV, with a trailing summary comment.
pub fn curve_csv(c: &EvalCurve) -> Result<String> {
    if c.points.is_empty() {
        return Err(Error::Empty("curve has no points".into()));
    }
    let mut out = String::from("threshold,fppi,miss_rate\n");
    for p in &c.points {
        writeln!(out, "{},{},{}", p.threshold, p.fppi, p.miss_rate).unwrap();
    }
    writeln!(out, "# mr2={},mr4={}", c.mr2, c.mr4).unwrap();
    Ok(out)
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Log-log miss-rate plot with the log-average miss rate in the legend.
pub fn curve_svg(c: &EvalCurve, label: &str) -> Result<String> {
    if c.points.is_empty() {
        return Err(Error::Empty("curve has no points".into()));
    }
    const W: f64 = 480.0;
    const H: f64 = 360.0;
    const M: f64 = 50.0;
    let (x_lo, x_hi) = (-4.0f64, 1.0f64);
    let (y_lo, y_hi) = (-2.0f64, 0.0f64);
    let px = |fppi: f64| {
        let l = fppi.max(10f64.powf(x_lo)).log10().min(x_hi);
        M + (l - x_lo) / (x_hi - x_lo) * (W - 2.0 * M)
    };
    let py = |mr: f64| {
        let l = mr.max(10f64.powf(y_lo)).log10().min(y_hi);
        M + (y_hi - l) / (y_hi - y_lo) * (H - 2.0 * M)
    };
    let mut pts = String::new();
    let mut prev_mr = 1.0;
    write!(pts, "{:.2},{:.2}", px(0.0), py(1.0)).unwrap();
    for p in &c.points {
        write!(pts, " {:.2},{:.2}", px(p.fppi), py(prev_mr)).unwrap();
        write!(pts, " {:.2},{:.2}", px(p.fppi), py(p.miss_rate)).unwrap();
        prev_mr = p.miss_rate;
    }
    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    )
    .unwrap();
    writeln!(s, r#"<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>"#).unwrap();
    writeln!(
        s,
        r#"<rect x="{M}" y="{M}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        W - 2.0 * M,
        H - 2.0 * M
    )
    .unwrap();
    for e in (x_lo as i32)..=(x_hi as i32) {
        let x = px(10f64.powi(e));
        writeln!(
            s,
            r#"<text x="{x:.2}" y="{:.2}" font-size="10" text-anchor="middle">1e{e}</text>"#,
            H - M + 14.0
        )
        .unwrap();
    }
    for v in [0.01, 0.1, 1.0] {
        writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-size="10" text-anchor="end">{v}</text>"#,
            M - 4.0,
            py(v) + 3.0
        )
        .unwrap();
    }
    writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" font-size="11" text-anchor="middle">false positives per image</text>"#,
        W / 2.0,
        H - 12.0
    )
    .unwrap();
    writeln!(
        s,
        r#"<text x="14" y="{:.2}" font-size="11" transform="rotate(-90 14 {:.2})" text-anchor="middle">miss rate</text>"#,
        H / 2.0,
        H / 2.0
    )
    .unwrap();
    writeln!(
        s,
        r#"<polyline fill="none" stroke="red" stroke-width="2" points="{pts}"/>"#
    )
    .unwrap();
    writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" font-size="12">{:.2}% {}</text>"#,
        M + 10.0,
        M + 18.0,
        c.mr2 * 100.0,
        xml_escape(label)
    )
    .unwrap();
    s.push_str("</svg>\n");
    Ok(s)
}

/// Writes the curve CSV and, when `svg` is given, the plot.
pub fn export_curve(c: &EvalCurve, csv: &Path, svg: Option<&Path>) -> Result<()> {
    fs::write(csv, curve_csv(c)?)?;
    if let Some(path) = svg {
        fs::write(path, curve_svg(c, "RPN+BF")?)?;
    }
    Ok(())
}
