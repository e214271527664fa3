//! End-to-end stages and their file formats.
//!
//! Every stage is a pure function of its inputs and the [`RunConfig`]; the
//! `rpnbf` binary is a thin wrapper around the `run_*` functions here.
//!
//! Formats:
//! - scene images: `FMAP` feature maps (one channel, stride 1);
//! - ground truth: JSON lines `{image_id, x, y, w, h, height, visibility}`;
//! - proposals and detections: CSV `image_id,x,y,w,h,score`;
//! - RoI features: `RFEA` (see [`FeatureFile`]);
//! - models: `RBFX` (see [`crate::forest::save_model`]);
//! - curves: CSV `threshold,fppi,miss_rate` plus an SVG plot.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{self, Detection, EvalCurve, GroundTruthBox, ReasonableFilter};
use crate::forest::{self, CascadeReport, Examples, Forest, ForestConfig};
use crate::geometry::{
    generate_anchors, iou, nms_indices, rank_by_score, AnchorConfig, AnchorGrid, Box2,
};
use crate::proposals::{decode_proposals, select_proposals, Proposal};
use crate::synth::{
    extract_pyramid, gen_scene, oracle_rpn, BackboneConfig, Pyramid, Scene, SceneConfig,
    ToyBackbone,
};
use crate::tensors::{concat_roi_features, roi_pool, FeatureMap, LayoutBlock, PooledBlock, ROI_SIZE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// IoU needed for a true positive.
    pub iou_thresh: f64,
    pub reasonable: ReasonableFilter,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            iou_thresh: 0.5,
            reasonable: ReasonableFilter::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    pub train_scenes: usize,
    pub test_scenes: usize,
    pub scene: SceneConfig,
    /// Noise of the oracle proposer.
    pub noise_sigma: f64,
    pub backbone: BackboneConfig,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 1,
            train_scenes: 20,
            test_scenes: 10,
            scene: SceneConfig::default(),
            noise_sigma: 0.15,
            backbone: BackboneConfig::default(),
        }
    }
}

/// Everything a run depends on besides its input files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub anchors: AnchorConfig,
    /// Shorter image edge the detector is run at; recorded, not applied.
    pub short_edge: usize,
    pub nms_iou: f64,
    pub train_top_k: usize,
    pub test_top_k: usize,
    /// NMS applied to classified detections of one image; `None` keeps all.
    pub detection_nms_iou: Option<f64>,
    /// Feature layers concatenated per RoI, in order.
    pub layers: Vec<String>,
    /// A proposal is a positive training example above this IoU with ground truth.
    pub positive_iou: f64,
    pub forest: ForestConfig,
    pub eval: EvalConfig,
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            anchors: AnchorConfig::default(),
            short_edge: 720,
            nms_iou: 0.7,
            train_top_k: 1000,
            test_top_k: 100,
            detection_nms_iou: Some(0.5),
            layers: vec!["conv3".into(), "conv4_atrous".into()],
            positive_iou: 0.5,
            forest: ForestConfig::default(),
            eval: EvalConfig::default(),
            synth: SynthConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.anchors.validate()?;
        self.forest.validate()?;
        if self.layers.is_empty() {
            return Err(Error::Config("at least one feature layer is required".into()));
        }
        let bb = ToyBackbone::new(&self.synth.backbone);
        for l in &self.layers {
            if bb.layer_channels(l).is_none() {
                return Err(Error::Config(format!("unknown feature layer {l:?}")));
            }
        }
        if let Some(t) = self.detection_nms_iou {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::Config(format!("detection_nms_iou {t} outside [0, 1]")));
            }
        }
        if self.train_top_k == 0 || self.test_top_k == 0 {
            return Err(Error::Config("top_k must be at least 1".into()));
        }
        Ok(())
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        RunConfig::from_json(&fs::read_to_string(path)?)
    }

    /// Layout of the concatenated RoI feature.
    pub fn layout(&self) -> Vec<LayoutBlock> {
        let bb = ToyBackbone::new(&self.synth.backbone);
        self.layers
            .iter()
            .map(|l| LayoutBlock {
                name: l.clone(),
                channels: bb.layer_channels(l).unwrap_or(0),
                size: ROI_SIZE,
            })
            .collect()
    }

    pub fn feature_len(&self) -> usize {
        self.layout().iter().map(LayoutBlock::len).sum()
    }
}

/// FNV-1a, used to derive per-image seeds from image ids.
pub fn stable_hash(s: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

pub fn scene_seed(base: u64, image_id: &str) -> u64 {
    forest::tree_seed(base ^ stable_hash(image_id), 0)
}

/// Oracle-proposer seed of an image.
pub fn rpn_seed(base: u64, image_id: &str) -> u64 {
    forest::tree_seed(base ^ stable_hash(image_id), 1)
}

pub fn image_id(split: &str, i: usize) -> String {
    format!("{split}_{i:05}")
}

/// Scenes of one split, in image-id order.
pub fn build_split(synth: &SynthConfig, split: &str, count: usize) -> Result<Vec<(String, Scene)>> {
    (0..count)
        .into_par_iter()
        .map(|i| {
            let id = image_id(split, i);
            let scene = gen_scene(scene_seed(synth.seed, &id), &synth.scene)?;
            Ok((id, scene))
        })
        .collect()
}

/// Score-ranked proposals of one scene after NMS, at most `top_k`.
pub fn propose_scene(
    cfg: &RunConfig,
    id: &str,
    scene: &Scene,
    top_k: usize,
) -> Result<Vec<Proposal>> {
    let grid = generate_anchors(&cfg.anchors, scene.size())?;
    propose_with_grid(cfg, id, scene, &grid, top_k)
}

fn propose_with_grid(
    cfg: &RunConfig,
    id: &str,
    scene: &Scene,
    grid: &AnchorGrid,
    top_k: usize,
) -> Result<Vec<Proposal>> {
    let (scores, deltas) = oracle_rpn(
        scene,
        grid,
        cfg.synth.noise_sigma,
        rpn_seed(cfg.synth.seed, id),
    )?;
    let props = decode_proposals(&scores, &deltas, grid)?;
    Ok(select_proposals(&props, cfg.nms_iou, top_k))
}

/// Pools every configured layer over `roi` and concatenates the blocks.
pub fn roi_feature(cfg: &RunConfig, pyramid: &Pyramid, roi: &Box2) -> Result<Vec<f32>> {
    let blocks = cfg
        .layers
        .iter()
        .map(|name| {
            let map = pyramid
                .layer(name)
                .ok_or_else(|| Error::Config(format!("unknown feature layer {name:?}")))?;
            Ok(PooledBlock {
                name: name.clone(),
                channels: map.channels,
                values: roi_pool(map, roi, ROI_SIZE)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(concat_roi_features(blocks)?.values)
}

/// RoI features for a batch of boxes on one image.
pub fn extract_features(
    cfg: &RunConfig,
    backbone: &ToyBackbone,
    image: &FeatureMap,
    boxes: &[Box2],
) -> Result<Vec<Vec<f32>>> {
    let pyramid = extract_pyramid(backbone, image)?;
    boxes
        .iter()
        .map(|b| roi_feature(cfg, &pyramid, b))
        .collect()
}

/// One row of a feature file.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRow {
    pub image: u32,
    pub bbox: Box2,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct FeatureHeader {
    layout: Vec<LayoutBlock>,
    images: Vec<String>,
    rows: usize,
    cols: usize,
    config: RunConfig,
}

/// RoI features of a proposal set.
///
/// Binary layout: `"RFEA"`, `u32` version, `u32` header length, a JSON
/// header (layout, image ids, row and column counts, resolved run config),
/// then per row `u32` image index, four `f64` box coordinates, `f64`
/// proposal score and `cols` little-endian `f32` values.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureFile {
    pub layout: Vec<LayoutBlock>,
    pub images: Vec<String>,
    pub rows: Vec<FeatureRow>,
    pub values: Examples,
    pub config: RunConfig,
}

pub const FEATURE_MAGIC: &[u8; 4] = b"RFEA";
pub const FEATURE_VERSION: u32 = 1;

impl FeatureFile {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&FeatureHeader {
            layout: self.layout.clone(),
            images: self.images.clone(),
            rows: self.rows.len(),
            cols: self.values.cols,
            config: self.config.clone(),
        })
        .expect("header serializes");
        let mut out = Vec::with_capacity(12 + header.len() + self.rows.len() * (44 + 4 * self.values.cols));
        out.extend_from_slice(FEATURE_MAGIC);
        out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for (r, row) in self.rows.iter().enumerate() {
            out.extend_from_slice(&row.image.to_le_bytes());
            for v in [row.bbox.x(), row.bbox.y(), row.bbox.w(), row.bbox.h(), row.score] {
                out.extend_from_slice(&v.to_le_bytes());
            }
            for v in self.values.row(r) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::format("RFEA", m);
        if bytes.len() < 12 || &bytes[0..4] != FEATURE_MAGIC {
            return Err(bad("bad magic"));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        if word(4) != FEATURE_VERSION {
            return Err(bad("unsupported version"));
        }
        let hlen = word(8) as usize;
        let body = bytes.get(12 + hlen..).ok_or_else(|| bad("truncated header"))?;
        let header: FeatureHeader = serde_json::from_slice(&bytes[12..12 + hlen])
            .map_err(|e| Error::format("RFEA", e.to_string()))?;
        let row_len = 44 + 4 * header.cols;
        if body.len() != header.rows * row_len {
            return Err(bad("payload size does not match header"));
        }
        let mut rows = Vec::with_capacity(header.rows);
        let mut values = Examples::with_cols(header.cols);
        values.features.reserve(header.rows * header.cols);
        let mut feat = Vec::with_capacity(header.cols);
        for chunk in body.chunks_exact(row_len) {
            let image = u32::from_le_bytes(chunk[0..4].try_into().unwrap());
            if image as usize >= header.images.len() {
                return Err(bad("row refers to an unknown image"));
            }
            let f = |i: usize| f64::from_le_bytes(chunk[4 + 8 * i..12 + 8 * i].try_into().unwrap());
            let bbox = Box2::new(f(0), f(1), f(2), f(3))?;
            let score = f(4);
            feat.clear();
            feat.extend(
                chunk[44..]
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap())),
            );
            values.push(&feat, score);
            rows.push(FeatureRow { image, bbox, score });
        }
        Ok(FeatureFile {
            layout: header.layout,
            images: header.images,
            rows,
            values,
            config: header.config,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct GtLine {
    image_id: String,
    x: f64,
    y: f64,
    w: f64,
    h: f64,
    height: f64,
    visibility: f64,
}

pub fn write_gt_jsonl<W: Write>(mut w: W, gts: &[(String, GroundTruthBox)]) -> Result<()> {
    for (id, g) in gts {
        let line = GtLine {
            image_id: id.clone(),
            x: g.bbox.x(),
            y: g.bbox.y(),
            w: g.bbox.w(),
            h: g.bbox.h(),
            height: g.height,
            visibility: g.visibility,
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_gt_jsonl(path: &Path) -> Result<Vec<(String, GroundTruthBox)>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let g: GtLine = serde_json::from_str(&line)?;
        out.push((
            g.image_id,
            GroundTruthBox {
                bbox: Box2::new(g.x, g.y, g.w, g.h)?,
                height: g.height,
                visibility: g.visibility,
                ignore: false,
            },
        ));
    }
    Ok(out)
}

#[derive(Debug, Serialize, Deserialize)]
struct BoxLine {
    image_id: String,
    x: f64,
    y: f64,
    w: f64,
    h: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct DetectionRecord {
    image_id: String,
    x: f64,
    y: f64,
    w: f64,
    h: f64,
    score: f64,
}

/// Writes `image_id,x,y,w,h,score` rows (header always present).
pub fn write_detections<W: Write>(w: W, dets: &[Detection]) -> Result<()> {
    let mut wr = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    wr.write_record(["image_id", "x", "y", "w", "h", "score"])?;
    for d in dets {
        wr.serialize(DetectionRecord {
            image_id: d.image_id.clone(),
            x: d.bbox.x(),
            y: d.bbox.y(),
            w: d.bbox.w(),
            h: d.bbox.h(),
            score: d.score,
        })?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_detections(path: &Path) -> Result<Vec<Detection>> {
    let mut rd = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in rd.deserialize() {
        let r: DetectionRecord = rec?;
        if !r.score.is_finite() {
            return Err(Error::format("detections CSV", "non-finite score"));
        }
        out.push(Detection {
            image_id: r.image_id,
            bbox: Box2::new(r.x, r.y, r.w, r.h)?,
            score: r.score,
        });
    }
    Ok(out)
}

fn write_config_echo(out: &Path, cfg: &RunConfig) -> Result<()> {
    let mut name = out.as_os_str().to_owned();
    name.push(".config.json");
    fs::write(PathBuf::from(name), cfg.to_json())?;
    Ok(())
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(p) = path.parent() {
        if !p.as_os_str().is_empty() {
            fs::create_dir_all(p)?;
        }
    }
    Ok(())
}

/// A scene directory: `images.txt`, `<id>.fmap`, `gt.jsonl`,
/// `distractors.jsonl` and `config.json`.
pub fn write_scene_dir(dir: &Path, scenes: &[(String, Scene)], cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut ids = String::new();
    let mut gts = Vec::new();
    let mut distractors = Vec::new();
    for (id, s) in scenes {
        ids.push_str(id);
        ids.push('\n');
        fs::write(dir.join(format!("{id}.fmap")), s.image.to_bytes())?;
        gts.extend(s.gts.iter().map(|g| (id.clone(), *g)));
        for d in &s.distractors {
            let line = BoxLine {
                image_id: id.clone(),
                x: d.x(),
                y: d.y(),
                w: d.w(),
                h: d.h(),
            };
            distractors.extend(serde_json::to_vec(&line)?);
            distractors.push(b'\n');
        }
    }
    fs::write(dir.join("images.txt"), ids)?;
    let mut buf = Vec::new();
    write_gt_jsonl(&mut buf, &gts)?;
    fs::write(dir.join("gt.jsonl"), buf)?;
    fs::write(dir.join("distractors.jsonl"), distractors)?;
    fs::write(dir.join("config.json"), cfg.to_json())?;
    Ok(())
}

pub fn read_image_list(path: &Path) -> Result<Vec<String>> {
    Ok(fs::read_to_string(path)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}

pub fn read_scene_dir(dir: &Path) -> Result<Vec<(String, Scene)>> {
    let ids = read_image_list(&dir.join("images.txt"))?;
    let mut gts: HashMap<String, Vec<GroundTruthBox>> = HashMap::new();
    for (id, g) in read_gt_jsonl(&dir.join("gt.jsonl"))? {
        gts.entry(id).or_default().push(g);
    }
    let mut distractors: HashMap<String, Vec<Box2>> = HashMap::new();
    let dpath = dir.join("distractors.jsonl");
    if dpath.exists() {
        for line in fs::read_to_string(&dpath)?.lines().filter(|l| !l.trim().is_empty()) {
            let b: BoxLine = serde_json::from_str(line)?;
            distractors
                .entry(b.image_id)
                .or_default()
                .push(Box2::new(b.x, b.y, b.w, b.h)?);
        }
    }
    ids.into_iter()
        .map(|id| {
            let image = FeatureMap::from_bytes(&fs::read(dir.join(format!("{id}.fmap")))?)?;
            let scene = Scene {
                image,
                gts: gts.remove(&id).unwrap_or_default(),
                distractors: distractors.remove(&id).unwrap_or_default(),
            };
            Ok((id, scene))
        })
        .collect()
}

/// Writes `<out>/train` and `<out>/test` scene directories.
pub fn run_synth_gen(cfg: &RunConfig, out: &Path) -> Result<()> {
    let s = &cfg.synth;
    for (split, n) in [("train", s.train_scenes), ("test", s.test_scenes)] {
        let scenes = build_split(s, split, n)?;
        write_scene_dir(&out.join(split), &scenes, cfg)?;
    }
    Ok(())
}

fn proposals_to_detections(id: &str, props: &[Proposal]) -> Vec<Detection> {
    props
        .iter()
        .map(|p| Detection {
            image_id: id.to_string(),
            bbox: p.bbox,
            score: p.score,
        })
        .collect()
}

/// Proposals of every scene in `scenes`, top `top_k` per image.
pub fn run_propose(cfg: &RunConfig, scenes: &Path, top_k: usize, out: &Path) -> Result<()> {
    let scenes = read_scene_dir(scenes)?;
    let per_image = scenes
        .par_iter()
        .map(|(id, s)| Ok(proposals_to_detections(id, &propose_scene(cfg, id, s, top_k)?)))
        .collect::<Result<Vec<_>>>()?;
    create_parent(out)?;
    let mut buf = Vec::new();
    write_detections(&mut buf, &per_image.concat())?;
    fs::write(out, buf)?;
    write_config_echo(out, cfg)
}

/// Builds the feature file for scored boxes grouped per image.
pub fn build_feature_file(
    cfg: &RunConfig,
    scenes: &[(String, Scene)],
    boxes: &HashMap<String, Vec<(Box2, f64)>>,
) -> Result<FeatureFile> {
    let backbone = ToyBackbone::new(&cfg.synth.backbone);
    let layout = cfg.layout();
    let cols: usize = layout.iter().map(LayoutBlock::len).sum();
    let per_image = scenes
        .par_iter()
        .enumerate()
        .map(|(i, (id, s))| {
            let list = boxes.get(id).map(Vec::as_slice).unwrap_or(&[]);
            let bxs: Vec<Box2> = list.iter().map(|b| b.0).collect();
            let feats = extract_features(cfg, &backbone, &s.image, &bxs)?;
            Ok((i, list.to_vec(), feats))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    let mut values = Examples::with_cols(cols);
    for (i, list, feats) in per_image {
        for ((b, score), f) in list.into_iter().zip(feats) {
            values.push(&f, score);
            rows.push(FeatureRow {
                image: i as u32,
                bbox: b,
                score,
            });
        }
    }
    Ok(FeatureFile {
        layout,
        images: scenes.iter().map(|(id, _)| id.clone()).collect(),
        rows,
        values,
        config: cfg.clone(),
    })
}

pub fn group_detections(dets: &[Detection]) -> HashMap<String, Vec<(Box2, f64)>> {
    let mut map: HashMap<String, Vec<(Box2, f64)>> = HashMap::new();
    for d in dets {
        map.entry(d.image_id.clone()).or_default().push((d.bbox, d.score));
    }
    map
}

/// Proposals of every scene (top `top_k` each) with their RoI features.
pub fn proposal_features(
    cfg: &RunConfig,
    scenes: &[(String, Scene)],
    top_k: usize,
) -> Result<FeatureFile> {
    let props = scenes
        .par_iter()
        .map(|(id, s)| {
            let p = propose_scene(cfg, id, s, top_k)?;
            Ok((id.clone(), p.iter().map(|p| (p.bbox, p.score)).collect::<Vec<_>>()))
        })
        .collect::<Result<HashMap<_, _>>>()?;
    build_feature_file(cfg, scenes, &props)
}

/// Per-image NMS over classified detections at `cfg.detection_nms_iou`.
/// Output is grouped by image in first-seen order, each group sorted by
/// descending score.
pub fn finalize_detections(cfg: &RunConfig, dets: Vec<Detection>) -> Vec<Detection> {
    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, Vec<Detection>> = HashMap::new();
    for d in dets {
        if !groups.contains_key(&d.image_id) {
            order.push(d.image_id.clone());
        }
        groups.entry(d.image_id.clone()).or_default().push(d);
    }
    let mut out = Vec::new();
    for id in order {
        let group = groups.remove(&id).unwrap_or_default();
        let scores: Vec<f64> = group.iter().map(|d| d.score).collect();
        let keep = match cfg.detection_nms_iou {
            Some(t) => {
                let boxes: Vec<Box2> = group.iter().map(|d| d.bbox).collect();
                nms_indices(&boxes, &scores, t)
            }
            None => rank_by_score(&scores),
        };
        out.extend(keep.into_iter().map(|i| group[i].clone()));
    }
    out
}

/// Detections from feature rows, scored by `model` or, without one, by the
/// stored proposal score.
pub fn score_rows(ff: &FeatureFile, model: Option<&Forest>) -> Result<Vec<Detection>> {
    let scores = match model {
        Some(m) => m.score_all(&ff.values)?,
        None => ff.rows.iter().map(|r| r.score).collect(),
    };
    Ok(ff
        .rows
        .iter()
        .zip(scores)
        .map(|(r, score)| Detection {
            image_id: ff.images[r.image as usize].clone(),
            bbox: r.bbox,
            score,
        })
        .collect())
}

pub fn run_extract(cfg: &RunConfig, scenes: &Path, proposals: &Path, out: &Path) -> Result<()> {
    let scenes = read_scene_dir(scenes)?;
    let props = group_detections(&read_detections(proposals)?);
    let ff = build_feature_file(cfg, &scenes, &props)?;
    create_parent(out)?;
    fs::write(out, ff.to_bytes())?;
    write_config_echo(out, cfg)
}

/// Splits feature rows by IoU with ground truth: positives above
/// `cfg.positive_iou`, everything else negative.
pub fn split_by_label(
    cfg: &RunConfig,
    ff: &FeatureFile,
    gts: &HashMap<String, Vec<Box2>>,
) -> (Examples, Examples) {
    let mut pos = Examples::with_cols(ff.values.cols);
    let mut neg = Examples::with_cols(ff.values.cols);
    for (r, row) in ff.rows.iter().enumerate() {
        let id = &ff.images[row.image as usize];
        let best = gts
            .get(id)
            .map(|g| g.iter().map(|b| iou(&row.bbox, b)).fold(0.0, f64::max))
            .unwrap_or(0.0);
        let target = if best > cfg.positive_iou { &mut pos } else { &mut neg };
        target.push(ff.values.row(r), row.score);
    }
    (pos, neg)
}

pub fn gt_boxes_by_image(gts: &[(String, GroundTruthBox)]) -> HashMap<String, Vec<Box2>> {
    let mut map: HashMap<String, Vec<Box2>> = HashMap::new();
    for (id, g) in gts {
        map.entry(id.clone()).or_default().push(g.bbox);
    }
    map
}

/// Trains the cascade on a feature file labeled against ground truth.
pub fn train_from_features(
    cfg: &RunConfig,
    ff: &FeatureFile,
    gts: &HashMap<String, Vec<Box2>>,
) -> Result<(Forest, CascadeReport)> {
    let (pos, neg) = split_by_label(cfg, ff, gts);
    forest::train_cascade(&pos, &neg, &cfg.forest)
}

/// Per-tree training loss as CSV `stage,tree,log_loss`.
pub fn loss_log_csv(report: &CascadeReport) -> String {
    let mut s = String::from("stage,tree,log_loss\n");
    for (k, st) in report.stages.iter().enumerate() {
        for (t, l) in st.log_loss.iter().enumerate() {
            s.push_str(&format!("{},{},{}\n", k + 1, t, l));
        }
    }
    s
}

pub fn run_train(cfg: &RunConfig, features: &Path, gt: &Path, out: &Path) -> Result<Forest> {
    let ff = FeatureFile::from_bytes(&fs::read(features)?)?;
    if ff.layout != cfg.layout() {
        return Err(Error::Shape(
            "feature file layout does not match the configured layers".into(),
        ));
    }
    let gts = gt_boxes_by_image(&read_gt_jsonl(gt)?);
    let (model, report) = train_from_features(cfg, &ff, &gts)?;
    create_parent(out)?;
    fs::write(out, forest::save_model(&model))?;
    let mut log = out.as_os_str().to_owned();
    log.push(".loss.csv");
    fs::write(PathBuf::from(log), loss_log_csv(&report))?;
    write_config_echo(out, cfg)?;
    Ok(model)
}

/// Classifies the top `test_top_k` proposals of one scene with the forest.
pub fn detect_scene(
    cfg: &RunConfig,
    backbone: &ToyBackbone,
    model: &Forest,
    id: &str,
    scene: &Scene,
) -> Result<Vec<Detection>> {
    let props = propose_scene(cfg, id, scene, cfg.test_top_k)?;
    let boxes: Vec<Box2> = props.iter().map(|p| p.bbox).collect();
    let feats = extract_features(cfg, backbone, &scene.image, &boxes)?;
    let dets = props
        .iter()
        .zip(&feats)
        .map(|(p, f)| {
            Ok(Detection {
                image_id: id.to_string(),
                bbox: p.bbox,
                score: model.score(f, p.score)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(finalize_detections(cfg, dets))
}

pub fn detect_all(cfg: &RunConfig, model: &Forest, scenes: &[(String, Scene)]) -> Result<Vec<Detection>> {
    let backbone = ToyBackbone::new(&cfg.synth.backbone);
    let per_image = scenes
        .par_iter()
        .map(|(id, s)| detect_scene(cfg, &backbone, model, id, s))
        .collect::<Result<Vec<_>>>()?;
    Ok(per_image.concat())
}

pub fn run_detect(cfg: &RunConfig, scenes: &Path, model: &Path, out: &Path) -> Result<()> {
    let scenes = read_scene_dir(scenes)?;
    let model = forest::load_model(&fs::read(model)?)?;
    if model.num_features != cfg.feature_len() {
        return Err(Error::Shape(format!(
            "model expects {} features, config produces {}",
            model.num_features,
            cfg.feature_len()
        )));
    }
    let dets = detect_all(cfg, &model, &scenes)?;
    create_parent(out)?;
    let mut buf = Vec::new();
    write_detections(&mut buf, &dets)?;
    fs::write(out, buf)?;
    write_config_echo(out, cfg)
}

/// Evaluates detections against ground truth under the reasonable filter.
pub fn evaluate_detections(
    cfg: &RunConfig,
    images: &[String],
    dets: &[Detection],
    gts: &[(String, GroundTruthBox)],
    iou_thresh: f64,
) -> Result<EvalCurve> {
    let boxes: Vec<GroundTruthBox> = gts.iter().map(|g| g.1).collect();
    let filtered = eval::filter_reasonable(&boxes, cfg.eval.reasonable);
    let tagged: Vec<(String, GroundTruthBox)> = gts
        .iter()
        .zip(filtered)
        .map(|((id, _), g)| (id.clone(), g))
        .collect();
    eval::evaluate(images, dets, &tagged, iou_thresh)
}

/// Image ids in first-seen order across ground truth and detections.
pub fn infer_images(dets: &[Detection], gts: &[(String, GroundTruthBox)]) -> Vec<String> {
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::new();
    for id in gts.iter().map(|g| &g.0).chain(dets.iter().map(|d| &d.image_id)) {
        if seen.insert(id.clone()) {
            out.push(id.clone());
        }
    }
    out
}

/// Writes `<out>.csv` and `<out>.svg`; returns the curve.
pub fn run_eval(
    cfg: &RunConfig,
    detections: &Path,
    gt: &Path,
    images: Option<&Path>,
    out: &Path,
) -> Result<EvalCurve> {
    let dets = read_detections(detections)?;
    let gts = read_gt_jsonl(gt)?;
    let images = match images {
        Some(p) => read_image_list(p)?,
        None => infer_images(&dets, &gts),
    };
    let curve = evaluate_detections(cfg, &images, &dets, &gts, cfg.eval.iou_thresh)?;
    create_parent(out)?;
    let csv = out.with_extension("csv");
    let svg = out.with_extension("svg");
    eval::export_curve(&curve, &csv, Some(&svg))?;
    write_config_echo(&csv, cfg)?;
    Ok(curve)
}
