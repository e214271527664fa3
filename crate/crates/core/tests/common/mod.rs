//! Reference implementations written from the definitions, kept
//! deliberately naive. Shared by the oracle and acceptance suites.
#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rpnbf::forest::{Tree, TreeNode};
use rpnbf::tensors::{FeatureMap, FilterBank};
use rpnbf::Box2;

/// IoU from corner coordinates.
pub fn iou_ref(a: &Box2, b: &Box2) -> f64 {
    let ix = (a.x() + a.w()).min(b.x() + b.w()) - a.x().max(b.x());
    let iy = (a.y() + a.h()).min(b.y() + b.h()) - a.y().max(b.y());
    if ix <= 0.0 || iy <= 0.0 {
        return 0.0;
    }
    let inter = ix * iy;
    inter / (a.w() * a.h() + b.w() * b.h() - inter)
}

/// Greedy NMS straight from the definition: repeatedly take the best
/// remaining box (lowest index on equal score) and drop everything that
/// overlaps it by more than `thr`.
pub fn nms_ref(dets: &[(Box2, f64)], thr: f64) -> Vec<(Box2, f64)> {
    let mut alive: Vec<usize> = (0..dets.len()).collect();
    let mut out = Vec::new();
    while !alive.is_empty() {
        let mut best = alive[0];
        for &i in &alive {
            if dets[i].1 > dets[best].1 || (dets[i].1 == dets[best].1 && i < best) {
                best = i;
            }
        }
        out.push(dets[best]);
        alive.retain(|&i| i != best && iou_ref(&dets[i].0, &dets[best].0) <= thr);
    }
    out
}

pub fn random_box(rng: &mut ChaCha8Rng, extent: f64) -> Box2 {
    let w = rng.gen_range(1.0..extent / 2.0);
    let h = rng.gen_range(1.0..extent / 2.0);
    Box2::new(rng.gen_range(0.0..extent - w), rng.gen_range(0.0..extent - h), w, h).unwrap()
}

pub fn random_map(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize, stride: f32) -> FeatureMap {
    let data = (0..c * h * w).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    FeatureMap::new(c, h, w, stride, data).unwrap()
}

pub fn random_bank(rng: &mut ChaCha8Rng, out: usize, inp: usize, k: usize) -> FilterBank {
    let weights = (0..out * inp * k * k).map(|_| rng.gen_range(-0.5f32..0.5)).collect();
    let bias = (0..out).map(|_| rng.gen_range(-0.1f32..0.1)).collect();
    FilterBank::new(out, inp, (k, k), weights, bias).unwrap()
}

/// Convolution as a quadruple loop over output pixels and taps.
pub fn conv_ref(x: &FeatureMap, f: &FilterBank) -> FeatureMap {
    let mut out = FeatureMap::zeros(f.out_channels, x.height, x.width, x.stride);
    let d = f.dilation as isize;
    let cy = (f.kh as isize - 1) / 2;
    let cx = (f.kw as isize - 1) / 2;
    for o in 0..f.out_channels {
        for y in 0..x.height as isize {
            for xx in 0..x.width as isize {
                let mut acc = f.bias[o];
                for i in 0..f.in_channels {
                    for ky in 0..f.kh as isize {
                        for kx in 0..f.kw as isize {
                            let sy = y + d * (ky - cy);
                            let sx = xx + d * (kx - cx);
                            if sy < 0 || sx < 0 || sy >= x.height as isize || sx >= x.width as isize {
                                continue;
                            }
                            acc += f.weight(o, i, ky as usize, kx as usize)
                                * x.at(i, sy as usize, sx as usize);
                        }
                    }
                }
                if f.activated {
                    acc = acc.max(0.0);
                }
                out.set(o, y as usize, xx as usize, acc);
            }
        }
    }
    out
}

/// Max pooling by scanning every input cell for membership in the window.
pub fn pool_ref(x: &FeatureMap, k: usize, s: usize) -> FeatureMap {
    let oh = x.height.div_ceil(s);
    let ow = x.width.div_ceil(s);
    let p = (k as isize - 1) / 2;
    let mut out = FeatureMap::zeros(x.channels, oh, ow, x.stride * s as f32);
    for c in 0..x.channels {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut m = f32::NEG_INFINITY;
                for y in 0..x.height {
                    for xx in 0..x.width {
                        let ry = y as isize - (oy * s) as isize + p;
                        let rx = xx as isize - (ox * s) as isize + p;
                        if (0..k as isize).contains(&ry) && (0..k as isize).contains(&rx) {
                            m = m.max(x.at(c, y, xx));
                        }
                    }
                }
                out.set(c, oy, ox, m);
            }
        }
    }
    out
}

/// RoI max pooling: a cell belongs to a bin when the unit interval it covers
/// overlaps the bin's span (in cell units) with positive length.
pub fn roi_pool_ref(x: &FeatureMap, roi: &Box2, n: usize) -> Vec<f32> {
    let s = x.stride as f64;
    let (x0, y0, wc, hc) = (roi.x() / s, roi.y() / s, roi.w() / s, roi.h() / s);
    let overlaps = |cell: usize, a: f64, b: f64| {
        let lo = (cell as f64).max(a);
        let hi = (cell as f64 + 1.0).min(b);
        hi > lo
    };
    let mut out = Vec::with_capacity(x.channels * n * n);
    for c in 0..x.channels {
        for i in 0..n {
            let (ya, yb) = (y0 + i as f64 * hc / n as f64, y0 + (i + 1) as f64 * hc / n as f64);
            for j in 0..n {
                let (xa, xb) = (x0 + j as f64 * wc / n as f64, x0 + (j + 1) as f64 * wc / n as f64);
                let mut m: Option<f32> = None;
                for y in 0..x.height {
                    for xx in 0..x.width {
                        if overlaps(y, ya, yb) && overlaps(xx, xa, xb) {
                            let v = x.at(c, y, xx);
                            m = Some(m.map_or(v, |m: f32| m.max(v)));
                        }
                    }
                }
                out.push(m.unwrap_or(0.0));
            }
        }
    }
    out
}

/// Recursive traversal, independent of [`Tree::eval`].
pub fn tree_value(t: &Tree, node: usize, x: &[f32]) -> f32 {
    match t.nodes[node] {
        TreeNode::Leaf { value } => value,
        TreeNode::Split {
            feature,
            threshold,
            left,
            right,
        } => {
            if x[feature as usize] >= threshold {
                tree_value(t, right as usize, x)
            } else {
                tree_value(t, left as usize, x)
            }
        }
    }
}
