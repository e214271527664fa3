//! Dense feature-map kernels.
//!
//! Maps are channel-major, row-major within a channel, `f32` throughout.
//! Convolution and pooling use same-padding so that the à-trous stage keeps
//! exact stride arithmetic: sampling its output at even cells reproduces the
//! ordinary stride-2 stage bit for bit.

use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Box2;

pub const ROI_SIZE: usize = 7;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Image pixels per cell.
    pub stride: f32,
    pub data: Vec<f32>,
}

impl FeatureMap {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        stride: f32,
        data: Vec<f32>,
    ) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "{} values for a {channels}x{height}x{width} map",
                data.len()
            )));
        }
        if !(stride > 0.0) || !stride.is_finite() {
            return Err(Error::Shape(format!("stride must be positive, got {stride}")));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Shape("feature map holds non-finite values".into()));
        }
        Ok(FeatureMap {
            channels,
            height,
            width,
            stride,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize, stride: f32) -> Self {
        FeatureMap {
            channels,
            height,
            width,
            stride,
            data: vec![0.0; channels * height * width],
        }
    }

    #[inline]
    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    /// Image extent covered by the map, `(width, height)` in pixels.
    pub fn extent(&self) -> (f64, f64) {
        (
            self.width as f64 * self.stride as f64,
            self.height as f64 * self.stride as f64,
        )
    }

    /// Keeps every cell with even row and column; the stride doubles.
    pub fn subsample_even(&self) -> FeatureMap {
        let h = self.height.div_ceil(2);
        let w = self.width.div_ceil(2);
        let mut out = FeatureMap::zeros(self.channels, h, w, self.stride * 2.0);
        for c in 0..self.channels {
            for y in 0..h {
                for x in 0..w {
                    out.set(c, y, x, self.at(c, 2 * y, 2 * x));
                }
            }
        }
        out
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(FMAP_MAGIC)?;
        w.write_all(&FMAP_VERSION.to_le_bytes())?;
        for dim in [self.channels, self.height, self.width] {
            w.write_all(&(dim as u32).to_le_bytes())?;
        }
        w.write_all(&self.stride.to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24 + self.data.len() * 4);
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut head = [0u8; 24];
        r.read_exact(&mut head)
            .map_err(|e| Error::format("FMAP", format!("header: {e}")))?;
        if &head[0..4] != FMAP_MAGIC {
            return Err(Error::format("FMAP", "bad magic"));
        }
        let word = |i: usize| u32::from_le_bytes(head[i..i + 4].try_into().unwrap());
        if word(4) != FMAP_VERSION {
            return Err(Error::format("FMAP", format!("unsupported version {}", word(4))));
        }
        let (channels, height, width) = (word(8) as usize, word(12) as usize, word(16) as usize);
        let stride = f32::from_le_bytes(head[20..24].try_into().unwrap());
        let n = channels
            .checked_mul(height)
            .and_then(|v| v.checked_mul(width))
            .ok_or_else(|| Error::format("FMAP", "dimensions overflow"))?;
        let mut raw = vec![0u8; n * 4];
        r.read_exact(&mut raw)
            .map_err(|e| Error::format("FMAP", format!("payload: {e}")))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        FeatureMap::new(channels, height, width, stride, data)
            .map_err(|e| Error::format("FMAP", e.to_string()))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cursor = bytes;
        let map = FeatureMap::read_from(&mut cursor)?;
        if !cursor.is_empty() {
            return Err(Error::format("FMAP", "trailing bytes"));
        }
        Ok(map)
    }
}

pub const FMAP_MAGIC: &[u8; 4] = b"FMAP";
pub const FMAP_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterBank {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kh: usize,
    pub kw: usize,
    /// Laid out `[out][in][kh][kw]`.
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
    pub dilation: usize,
    /// Apply ReLU to the output.
    pub activated: bool,
}

impl FilterBank {
    pub fn new(
        out_channels: usize,
        in_channels: usize,
        kernel: (usize, usize),
        weights: Vec<f32>,
        bias: Vec<f32>,
    ) -> Result<Self> {
        let (kh, kw) = kernel;
        if kh == 0 || kw == 0 {
            return Err(Error::Shape("kernel must be at least 1x1".into()));
        }
        if weights.len() != out_channels * in_channels * kh * kw {
            return Err(Error::Shape(format!(
                "{} weights for a {out_channels}x{in_channels}x{kh}x{kw} bank",
                weights.len()
            )));
        }
        if bias.len() != out_channels {
            return Err(Error::Shape(format!(
                "{} biases for {out_channels} output channels",
                bias.len()
            )));
        }
        Ok(FilterBank {
            out_channels,
            in_channels,
            kh,
            kw,
            weights,
            bias,
            dilation: 1,
            activated: false,
        })
    }

    pub fn with_dilation(mut self, dilation: usize) -> Self {
        assert!(dilation >= 1, "dilation must be at least 1");
        self.dilation = dilation;
        self
    }

    pub fn with_relu(mut self, activated: bool) -> Self {
        self.activated = activated;
        self
    }

    #[inline]
    pub fn weight(&self, o: usize, i: usize, ky: usize, kx: usize) -> f32 {
        self.weights[((o * self.in_channels + i) * self.kh + ky) * self.kw + kx]
    }

    /// Receptive field per axis, `(k - 1) * dilation + 1`.
    pub fn receptive_field(&self) -> (usize, usize) {
        (
            (self.kh - 1) * self.dilation + 1,
            (self.kw - 1) * self.dilation + 1,
        )
    }
}

/// Same-padded, unit-stride convolution.
///
/// Tap `(ky, kx)` reads the input at offset
/// `dilation * (ky - (kh - 1) / 2, kx - (kw - 1) / 2)`; reads outside the map
/// are zero.
pub fn conv2d(input: &FeatureMap, filters: &FilterBank) -> Result<FeatureMap> {
    if filters.in_channels != input.channels {
        return Err(Error::Shape(format!(
            "filter bank expects {} input channels, map has {}",
            filters.in_channels, input.channels
        )));
    }
    if filters.dilation == 0 {
        return Err(Error::Shape("dilation must be at least 1".into()));
    }
    let (h, w) = (input.height, input.width);
    let d = filters.dilation as isize;
    let (cy, cx) = ((filters.kh as isize - 1) / 2, (filters.kw as isize - 1) / 2);
    let mut data = vec![0.0f32; filters.out_channels * h * w];
    data.par_chunks_mut((h * w).max(1))
        .enumerate()
        .for_each(|(o, plane)| {
            plane.fill(filters.bias[o]);
            for i in 0..filters.in_channels {
                let src = input.plane(i);
                for ky in 0..filters.kh {
                    let dy = d * (ky as isize - cy);
                    for kx in 0..filters.kw {
                        let dx = d * (kx as isize - cx);
                        let wv = filters.weight(o, i, ky, kx);
                        let y0 = (-dy).max(0) as usize;
                        let y1 = (h as isize - dy).clamp(0, h as isize) as usize;
                        let x0 = (-dx).max(0) as usize;
                        let x1 = (w as isize - dx).clamp(0, w as isize) as usize;
                        for y in y0..y1 {
                            let sy = (y as isize + dy) as usize;
                            let dst = &mut plane[y * w..(y + 1) * w];
                            let srow = &src[sy * w..(sy + 1) * w];
                            for x in x0..x1 {
                                dst[x] += wv * srow[(x as isize + dx) as usize];
                            }
                        }
                    }
                }
            }
            if filters.activated {
                for v in plane.iter_mut() {
                    *v = v.max(0.0);
                }
            }
        });
    Ok(FeatureMap {
        channels: filters.out_channels,
        height: h,
        width: w,
        stride: input.stride,
        data,
    })
}

/// Per-channel max pooling.
///
/// Output cell `o` covers input cells `[o*s - p, o*s - p + kernel)` with
/// `p = (kernel - 1) / 2`; out-of-range cells act as `-inf`. The output has
/// `ceil(n / s)` cells per axis and stride `input.stride * s`.
pub fn max_pool(input: &FeatureMap, kernel: usize, pool_stride: usize) -> Result<FeatureMap> {
    if kernel == 0 || pool_stride == 0 {
        return Err(Error::Shape("pool kernel and stride must be at least 1".into()));
    }
    let (h, w) = (input.height, input.width);
    let (oh, ow) = (h.div_ceil(pool_stride), w.div_ceil(pool_stride));
    let p = (kernel as isize - 1) / 2;
    let window = |o: usize, n: usize| {
        let lo = o as isize * pool_stride as isize - p;
        let hi = lo + kernel as isize;
        (lo.max(0) as usize, hi.min(n as isize) as usize)
    };
    let mut data = vec![0.0f32; input.channels * oh * ow];
    data.par_chunks_mut((oh * ow).max(1))
        .enumerate()
        .for_each(|(c, plane)| {
            let src = input.plane(c);
            for oy in 0..oh {
                let (y0, y1) = window(oy, h);
                for ox in 0..ow {
                    let (x0, x1) = window(ox, w);
                    let mut m = f32::NEG_INFINITY;
                    for y in y0..y1 {
                        for &v in &src[y * w + x0..y * w + x1] {
                            m = m.max(v);
                        }
                    }
                    plane[oy * ow + ox] = m;
                }
            }
        });
    Ok(FeatureMap {
        channels: input.channels,
        height: oh,
        width: ow,
        stride: input.stride * pool_stride as f32,
        data,
    })
}

/// The ordinary pool-then-convolve stage: stride-2 pooling, filters as given.
pub fn dense_stage(
    input: &FeatureMap,
    pool_kernel: usize,
    filters: &[FilterBank],
) -> Result<FeatureMap> {
    let mut x = max_pool(input, pool_kernel, 2)?;
    for f in filters {
        x = conv2d(&x, f)?;
    }
    Ok(x)
}

/// The à-trous variant of [`dense_stage`]: pooling stride 1 and every filter
/// dilated twice as much, so the output keeps the input stride.
pub fn atrous_stage(
    input: &FeatureMap,
    pool_kernel: usize,
    filters: &[FilterBank],
) -> Result<FeatureMap> {
    let mut x = max_pool(input, pool_kernel, 1)?;
    for f in filters {
        let dilated = f.clone().with_dilation(f.dilation * 2);
        x = conv2d(&x, &dilated)?;
    }
    Ok(x)
}

/// Cell range `[floor(start + i*len/n), ceil(start + (i+1)*len/n))` clamped
/// to `[0, limit)`.
fn bin_range(start: f64, len: f64, i: usize, n: usize, limit: usize) -> (usize, usize) {
    let lo = (start + i as f64 * len / n as f64).floor();
    let hi = (start + (i + 1) as f64 * len / n as f64).ceil();
    let lo = lo.clamp(0.0, limit as f64) as usize;
    let hi = hi.clamp(0.0, limit as f64) as usize;
    (lo, hi)
}

/// Max-pools the region `roi` (image pixels) into `channels x out x out`.
///
/// The RoI is mapped to cells by dividing by the map stride. Bins that fall
/// entirely outside the map produce zero.
pub fn roi_pool(input: &FeatureMap, roi: &Box2, out_size: usize) -> Result<Vec<f32>> {
    if out_size == 0 {
        return Err(Error::Shape("RoI output size must be at least 1".into()));
    }
    let (ew, eh) = input.extent();
    if roi.x() >= ew || roi.y() >= eh || roi.x2() <= 0.0 || roi.y2() <= 0.0 {
        return Err(Error::OutOfBounds(format!(
            "RoI {roi:?} outside {ew}x{eh} map extent"
        )));
    }
    let s = input.stride as f64;
    let (x0, y0, wc, hc) = (roi.x() / s, roi.y() / s, roi.w() / s, roi.h() / s);
    let rows: Vec<_> = (0..out_size)
        .map(|i| bin_range(y0, hc, i, out_size, input.height))
        .collect();
    let cols: Vec<_> = (0..out_size)
        .map(|j| bin_range(x0, wc, j, out_size, input.width))
        .collect();
    let bins = out_size * out_size;
    let mut out = vec![0.0f32; input.channels * bins];
    for c in 0..input.channels {
        let src = input.plane(c);
        for (i, &(ya, yb)) in rows.iter().enumerate() {
            for (j, &(xa, xb)) in cols.iter().enumerate() {
                if ya >= yb || xa >= xb {
                    continue;
                }
                let mut m = f32::NEG_INFINITY;
                for y in ya..yb {
                    for &v in &src[y * input.width + xa..y * input.width + xb] {
                        m = m.max(v);
                    }
                }
                out[c * bins + i * out_size + j] = m;
            }
        }
    }
    Ok(out)
}

/// One named block of a concatenated RoI feature.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutBlock {
    pub name: String,
    pub channels: usize,
    pub size: usize,
}

impl LayoutBlock {
    pub fn len(&self) -> usize {
        self.channels * self.size * self.size
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoiFeature {
    pub values: Vec<f32>,
    pub layout: Vec<LayoutBlock>,
}

/// A pooled block awaiting concatenation: `channels x 7 x 7` values.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledBlock {
    pub name: String,
    pub channels: usize,
    pub values: Vec<f32>,
}

/// Concatenates pooled blocks in the given order, without any rescaling.
pub fn concat_roi_features(blocks: Vec<PooledBlock>) -> Result<RoiFeature> {
    if blocks.is_empty() {
        return Err(Error::Empty("no RoI blocks to concatenate".into()));
    }
    let bins = ROI_SIZE * ROI_SIZE;
    let total = blocks.iter().map(|b| b.values.len()).sum();
    let mut values = Vec::with_capacity(total);
    let mut layout = Vec::with_capacity(blocks.len());
    for b in blocks {
        if b.values.len() != b.channels * bins {
            return Err(Error::Shape(format!(
                "block {} has {} values, expected {}x{ROI_SIZE}x{ROI_SIZE}",
                b.name,
                b.values.len(),
                b.channels
            )));
        }
        values.extend_from_slice(&b.values);
        layout.push(LayoutBlock {
            name: b.name,
            channels: b.channels,
            size: ROI_SIZE,
        });
    }
    Ok(RoiFeature { values, layout })
}
