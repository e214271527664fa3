//! RealBoost decision forest with bootstrapped hard-negative mining.
//!
//! Trees split on `feature < threshold` and output real-valued confidences
//! `0.5 * ln(W+ / W-)`. Split search runs on a 256-bin linear quantization of
//! the current training set; the stored thresholds are the raw bin edges, so
//! inference never touches the quantization table.
//!
//! A cascade trains a fresh forest per bootstrap stage, mines the
//! highest-scoring unused negatives after each stage and finally trains the
//! inference forest on the accumulated set. The proposal score `s` seeds
//! every margin as `f0 = 0.5 * ln(s / (1 - s))`.

use std::cmp::Ordering;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_BINS: usize = 256;

/// Stage-0 margin from a proposal score, `0.5 * ln(s / (1 - s))` with `s`
/// clamped to `[eps, 1 - eps]`.
pub fn f0_from_score(s: f64, eps: f64) -> f64 {
    let s = s.clamp(eps, 1.0 - eps);
    0.5 * (s / (1.0 - s)).ln()
}

/// A row-major example matrix with one proposal score per row.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Examples {
    pub cols: usize,
    pub features: Vec<f32>,
    pub priors: Vec<f64>,
}

impl Examples {
    pub fn new(cols: usize, features: Vec<f32>, priors: Vec<f64>) -> Result<Self> {
        if features.len() != cols * priors.len() {
            return Err(Error::Shape(format!(
                "{} values for {} rows of {cols} features",
                features.len(),
                priors.len()
            )));
        }
        Ok(Examples {
            cols,
            features,
            priors,
        })
    }

    pub fn with_cols(cols: usize) -> Self {
        Examples {
            cols,
            ..Default::default()
        }
    }

    pub fn rows(&self) -> usize {
        self.priors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.priors.is_empty()
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f32] {
        &self.features[i * self.cols..(i + 1) * self.cols]
    }

    pub fn push(&mut self, row: &[f32], prior: f64) {
        assert_eq!(row.len(), self.cols, "row length");
        self.features.extend_from_slice(row);
        self.priors.push(prior);
    }
}

/// Labeled, weighted training examples.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSet {
    pub examples: Examples,
    /// `+1` pedestrian, `-1` background.
    pub labels: Vec<i8>,
    /// Normalized to sum to one before each tree.
    pub weights: Vec<f64>,
}

impl TrainSet {
    pub fn new(examples: Examples, labels: Vec<i8>) -> Result<Self> {
        if labels.len() != examples.rows() {
            return Err(Error::Shape(format!(
                "{} labels for {} rows",
                labels.len(),
                examples.rows()
            )));
        }
        if labels.iter().any(|&y| y != 1 && y != -1) {
            return Err(Error::Training("labels must be +1 or -1".into()));
        }
        let n = labels.len().max(1) as f64;
        let weights = vec![1.0 / n; labels.len()];
        Ok(TrainSet {
            examples,
            labels,
            weights,
        })
    }

    /// Positives first, then negatives.
    pub fn from_parts(pos: &Examples, neg: &Examples) -> Result<Self> {
        if pos.cols != neg.cols {
            return Err(Error::Shape(format!(
                "positive rows have {} features, negative rows {}",
                pos.cols, neg.cols
            )));
        }
        let mut ex = pos.clone();
        ex.features.extend_from_slice(&neg.features);
        ex.priors.extend_from_slice(&neg.priors);
        let labels = std::iter::repeat_n(1, pos.rows())
            .chain(std::iter::repeat_n(-1, neg.rows()))
            .collect();
        TrainSet::new(ex, labels)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Per-feature linear quantization into [`NUM_BINS`] bins.
///
/// Feature `f` has 255 non-decreasing edges; `bin(x)` is the number of edges
/// `<= x`, so `bin(x) <= b` exactly when `x < edges[b]`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantTable {
    pub edges: Vec<Vec<f32>>,
}

impl QuantTable {
    /// Edges spaced evenly between each feature's min and max over `ex`.
    pub fn fit(ex: &Examples) -> Self {
        let edges = (0..ex.cols)
            .into_par_iter()
            .map(|f| {
                let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
                for r in 0..ex.rows() {
                    let v = ex.features[r * ex.cols + f];
                    lo = lo.min(v);
                    hi = hi.max(v);
                }
                if ex.is_empty() {
                    (lo, hi) = (0.0, 0.0);
                }
                let step = (hi as f64 - lo as f64) / NUM_BINS as f64;
                (1..NUM_BINS)
                    .map(|b| (lo as f64 + b as f64 * step) as f32)
                    .collect()
            })
            .collect();
        QuantTable { edges }
    }

    #[inline]
    pub fn bin(&self, feature: usize, x: f32) -> u8 {
        self.edges[feature].partition_point(|&e| e <= x) as u8
    }

    /// Feature-major bin matrix: `bins[f * rows + r]`.
    pub fn quantize(&self, ex: &Examples) -> Vec<u8> {
        let n = ex.rows();
        let mut bins = vec![0u8; ex.cols * n];
        bins.par_chunks_mut(n.max(1))
            .enumerate()
            .for_each(|(f, col)| {
                for (r, b) in col.iter_mut().enumerate() {
                    *b = self.bin(f, ex.features[r * ex.cols + f]);
                }
            });
        bins
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TreeNode {
    Split {
        feature: u32,
        threshold: f32,
        left: u32,
        right: u32,
    },
    Leaf {
        value: f32,
    },
}

/// Nodes in depth-first order; the root is node 0.
#[derive(Debug, Clone, PartialEq)]
pub struct Tree {
    pub nodes: Vec<TreeNode>,
}

impl Tree {
    #[inline]
    pub fn eval(&self, x: &[f32]) -> f32 {
        let mut i = 0usize;
        loop {
            match self.nodes[i] {
                TreeNode::Leaf { value } => return value,
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    i = if x[feature as usize] < threshold {
                        left as usize
                    } else {
                        right as usize
                    };
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn go(t: &Tree, i: usize) -> usize {
            match t.nodes[i] {
                TreeNode::Leaf { .. } => 0,
                TreeNode::Split { left, right, .. } => {
                    1 + go(t, left as usize).max(go(t, right as usize))
                }
            }
        }
        go(self, 0)
    }
}

/// Leaf confidence `0.5 * ln((W+ + eps) / (W- + eps))`.
pub fn leaf_value(w_pos: f64, w_neg: f64, eps: f64) -> f32 {
    (0.5 * ((w_pos + eps) / (w_neg + eps)).ln()) as f32
}

/// RealBoost split cost of one child, `2 * sqrt(W+ * W-)`.
#[inline]
pub fn child_cost(w_pos: f64, w_neg: f64) -> f64 {
    2.0 * (w_pos * w_neg).sqrt()
}

/// Smoothing relative to the total weight of the set.
pub const LEAF_SMOOTHING: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
struct SplitChoice {
    cost: f64,
    feature: usize,
    bin: usize,
}

impl SplitChoice {
    fn better(a: SplitChoice, b: SplitChoice) -> SplitChoice {
        match a
            .cost
            .total_cmp(&b.cost)
            .then(a.feature.cmp(&b.feature))
            .then(a.bin.cmp(&b.bin))
        {
            Ordering::Greater => b,
            _ => a,
        }
    }
}

/// Best split of `rows` on one feature, lowest bin on equal cost.
fn best_split_for_feature(
    col: &[u8],
    rows: &[u32],
    w_pos: &[f64],
    w_neg: &[f64],
    feature: usize,
) -> Option<SplitChoice> {
    let mut hp = [0.0f64; NUM_BINS];
    let mut hn = [0.0f64; NUM_BINS];
    let mut cnt = [0u32; NUM_BINS];
    for &r in rows {
        let r = r as usize;
        let b = col[r] as usize;
        hp[b] += w_pos[r];
        hn[b] += w_neg[r];
        cnt[b] += 1;
    }
    let tp: f64 = hp.iter().sum();
    let tn: f64 = hn.iter().sum();
    let total = rows.len() as u32;
    let (mut lp, mut ln, mut lc) = (0.0f64, 0.0f64, 0u32);
    let mut best: Option<SplitChoice> = None;
    for b in 0..NUM_BINS - 1 {
        lp += hp[b];
        ln += hn[b];
        lc += cnt[b];
        if lc == 0 || cnt[b] == 0 {
            continue;
        }
        if lc == total {
            break;
        }
        let cost = child_cost(lp, ln) + child_cost(tp - lp, tn - ln);
        if best.is_none_or(|s| cost < s.cost) {
            best = Some(SplitChoice { cost, feature, bin: b });
        }
    }
    best
}

/// Hyper-parameters of a single tree.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TreeParams {
    pub depth: usize,
    /// Fraction of features evaluated at each node.
    pub feature_fraction: f64,
}

/// Features examined per node for a given fraction.
pub fn features_per_node(num_features: usize, fraction: f64) -> usize {
    ((num_features as f64 * fraction).round() as usize).clamp(1, num_features.max(1))
}

struct TreeBuilder<'a> {
    bins: &'a [u8],
    n: usize,
    qt: &'a QuantTable,
    w_pos: Vec<f64>,
    w_neg: Vec<f64>,
    eps: f64,
    params: TreeParams,
    rng: ChaCha8Rng,
    nodes: Vec<TreeNode>,
}

impl TreeBuilder<'_> {
    fn grow(&mut self, rows: Vec<u32>, depth: usize) -> u32 {
        let id = self.nodes.len() as u32;
        let (wp, wn) = rows.iter().fold((0.0, 0.0), |(p, q), &r| {
            (p + self.w_pos[r as usize], q + self.w_neg[r as usize])
        });
        self.nodes.push(TreeNode::Leaf {
            value: leaf_value(wp, wn, self.eps),
        });
        if depth >= self.params.depth || rows.len() < 2 {
            return id;
        }
        let num_features = self.qt.edges.len();
        let k = features_per_node(num_features, self.params.feature_fraction);
        let mut candidates: Vec<usize> = if k >= num_features {
            (0..num_features).collect()
        } else {
            sample(&mut self.rng, num_features, k).into_vec()
        };
        candidates.sort_unstable();
        let n = self.n;
        let (bins, w_pos, w_neg) = (self.bins, &self.w_pos, &self.w_neg);
        let best = candidates
            .par_iter()
            .filter_map(|&f| {
                best_split_for_feature(&bins[f * n..(f + 1) * n], &rows, w_pos, w_neg, f)
            })
            .reduce_with(SplitChoice::better);
        let Some(best) = best else {
            return id;
        };
        if !(best.cost < child_cost(wp, wn)) {
            return id;
        }
        let col = &self.bins[best.feature * n..(best.feature + 1) * n];
        let (left, right): (Vec<u32>, Vec<u32>) = rows
            .into_iter()
            .partition(|&r| (col[r as usize] as usize) <= best.bin);
        let threshold = self.qt.edges[best.feature][best.bin];
        let l = self.grow(left, depth + 1);
        let r = self.grow(right, depth + 1);
        self.nodes[id as usize] = TreeNode::Split {
            feature: best.feature as u32,
            threshold,
            left: l,
            right: r,
        };
        id
    }
}

/// Trains one tree on pre-quantized features (`bins` from [`QuantTable::quantize`]).
pub fn train_tree_binned(
    ts: &TrainSet,
    qt: &QuantTable,
    bins: &[u8],
    params: TreeParams,
    rng_seed: u64,
) -> Tree {
    let total: f64 = ts.weights.iter().sum();
    let (w_pos, w_neg) = ts
        .labels
        .iter()
        .zip(&ts.weights)
        .map(|(&y, &w)| if y > 0 { (w, 0.0) } else { (0.0, w) })
        .unzip();
    let mut b = TreeBuilder {
        bins,
        n: ts.len(),
        qt,
        w_pos,
        w_neg,
        eps: LEAF_SMOOTHING * total,
        params,
        rng: ChaCha8Rng::seed_from_u64(rng_seed),
        nodes: Vec::new(),
    };
    b.grow((0..ts.len() as u32).collect(), 0);
    Tree { nodes: b.nodes }
}

/// Trains one RealBoost tree on the current weights of `ts`.
pub fn train_tree(ts: &TrainSet, qt: &QuantTable, params: TreeParams, rng_seed: u64) -> Tree {
    let bins = qt.quantize(&ts.examples);
    train_tree_binned(ts, qt, &bins, params, rng_seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForestConfig {
    pub depth: usize,
    pub feature_fraction: f64,
    /// Tree counts of the bootstrapping stages.
    pub stages: Vec<usize>,
    pub final_trees: usize,
    /// Hard negatives mined after each stage, as a fraction of the positives.
    pub hard_negative_fraction: f64,
    pub uses_prior: bool,
    pub clamp_eps: f64,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        ForestConfig {
            depth: 5,
            feature_fraction: 1.0 / 16.0,
            stages: vec![64, 128, 256, 512, 1024, 1536],
            final_trees: 2048,
            hard_negative_fraction: 0.1,
            uses_prior: true,
            clamp_eps: 1e-6,
            seed: 0,
        }
    }
}

impl ForestConfig {
    pub fn tree_params(&self) -> TreeParams {
        TreeParams {
            depth: self.depth,
            feature_fraction: self.feature_fraction,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.feature_fraction > 0.0 && self.feature_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "feature_fraction must lie in (0, 1], got {}",
                self.feature_fraction
            )));
        }
        if !(self.hard_negative_fraction >= 0.0) {
            return Err(Error::Config("hard_negative_fraction must be >= 0".into()));
        }
        if !(self.clamp_eps > 0.0 && self.clamp_eps < 0.5) {
            return Err(Error::Config("clamp_eps must lie in (0, 0.5)".into()));
        }
        Ok(())
    }

    /// Hard negatives added after each stage for `num_pos` positives.
    pub fn quota(&self, num_pos: usize) -> usize {
        (self.hard_negative_fraction * num_pos as f64 - 1e-9).ceil().max(0.0) as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    /// 1-based; the final forest is the last stage.
    pub stage: u32,
    /// Requested tree count.
    pub trees: u32,
    /// Trees actually trained (fewer when boosting truncated).
    pub trained: u32,
    /// Negatives added to the training set after this stage.
    pub negatives_added: u32,
    /// Negatives the pool could not supply.
    pub shortfall: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Forest {
    pub trees: Vec<Tree>,
    pub num_features: usize,
    pub uses_prior: bool,
    pub clamp_eps: f64,
    pub config: ForestConfig,
    pub stage_history: Vec<StageRecord>,
}

impl Forest {
    pub fn empty(num_features: usize, config: ForestConfig) -> Self {
        Forest {
            trees: Vec::new(),
            num_features,
            uses_prior: config.uses_prior,
            clamp_eps: config.clamp_eps,
            config,
            stage_history: Vec::new(),
        }
    }

    pub fn prior_margin(&self, prior: f64) -> f64 {
        if self.uses_prior {
            f0_from_score(prior, self.clamp_eps)
        } else {
            0.0
        }
    }

    /// `f0(prior) + sum of leaf values`, without a length check.
    #[inline]
    pub fn score_unchecked(&self, x: &[f32], prior: f64) -> f64 {
        let mut f = self.prior_margin(prior);
        for t in &self.trees {
            f += t.eval(x) as f64;
        }
        f
    }

    pub fn score(&self, x: &[f32], prior: f64) -> Result<f64> {
        if x.len() != self.num_features {
            return Err(Error::Shape(format!(
                "feature vector has {} values, model expects {}",
                x.len(),
                self.num_features
            )));
        }
        Ok(self.score_unchecked(x, prior))
    }

    /// Scores every row of `ex`.
    pub fn score_all(&self, ex: &Examples) -> Result<Vec<f64>> {
        if ex.cols != self.num_features {
            return Err(Error::Shape(format!(
                "examples have {} features, model expects {}",
                ex.cols, self.num_features
            )));
        }
        Ok((0..ex.rows())
            .into_par_iter()
            .map(|r| self.score_unchecked(ex.row(r), ex.priors[r]))
            .collect())
    }
}

/// What happened while boosting.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BoostReport {
    /// `ln(sum_i exp(-y_i F_i))` before the first tree and after every tree.
    pub log_loss: Vec<f64>,
    /// Tree index at which weights degenerated, if boosting stopped early.
    pub truncated_at: Option<usize>,
}

/// Largest normalized weight tolerated before boosting stops.
pub const DEGENERATE_WEIGHT: f64 = 1.0 - 1e-9;

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Seed for tree `t` of a boosting run.
pub fn tree_seed(seed: u64, t: usize) -> u64 {
    splitmix64(seed ^ splitmix64(t as u64 + 0x9e37_79b9))
}

/// Seed of cascade stage `stage` (the final forest is stage `stages.len()`).
pub fn stage_seed(seed: u64, stage: usize) -> u64 {
    splitmix64(seed.wrapping_add(0x5851_f42d_4c95_7f2d_u64.wrapping_mul(stage as u64 + 1)))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// RealBoost: reweight by `exp(-y F)`, fit a tree, add it to every margin.
///
/// Margins start at `f0(prior)` when `config.uses_prior`. The weights of
/// `ts` are overwritten with the normalized weights of the last tree.
pub fn boost(
    ts: &mut TrainSet,
    num_trees: usize,
    config: &ForestConfig,
    rng_seed: u64,
) -> Result<(Forest, BoostReport)> {
    config.validate()?;
    if ts.is_empty() {
        return Err(Error::Training("empty training set".into()));
    }
    let mut forest = Forest::empty(ts.examples.cols, config.clone());
    let mut report = BoostReport::default();
    let qt = QuantTable::fit(&ts.examples);
    let bins = qt.quantize(&ts.examples);
    let mut margins: Vec<f64> = ts
        .examples
        .priors
        .iter()
        .map(|&s| forest.prior_margin(s))
        .collect();
    let mut neg_margin = vec![0.0f64; ts.len()];
    let params = config.tree_params();
    let update_loss = |margins: &[f64], neg_margin: &mut Vec<f64>, labels: &[i8]| {
        for ((nm, &f), &y) in neg_margin.iter_mut().zip(margins).zip(labels) {
            *nm = -(y as f64) * f;
        }
        log_sum_exp(neg_margin)
    };
    report
        .log_loss
        .push(update_loss(&margins, &mut neg_margin, &ts.labels));
    for t in 0..num_trees {
        let lse = *report.log_loss.last().unwrap();
        for (w, &nm) in ts.weights.iter_mut().zip(&neg_margin) {
            *w = (nm - lse).exp();
        }
        let sum: f64 = ts.weights.iter().sum();
        for w in ts.weights.iter_mut() {
            *w /= sum;
        }
        if ts.weights.iter().any(|&w| w > DEGENERATE_WEIGHT) {
            report.truncated_at = Some(t);
            break;
        }
        let tree = train_tree_binned(ts, &qt, &bins, params, tree_seed(rng_seed, t));
        let ex = &ts.examples;
        margins
            .par_iter_mut()
            .enumerate()
            .for_each(|(r, f)| *f += tree.eval(ex.row(r)) as f64);
        let loss = update_loss(&margins, &mut neg_margin, &ts.labels);
        debug_assert!(
            loss <= lse + 1e-9,
            "exponential loss increased at tree {t}: {lse} -> {loss}"
        );
        report.log_loss.push(loss);
        forest.trees.push(tree);
    }
    Ok((forest, report))
}

/// Indices of the `quota` highest-scoring unused pool rows, ties by index.
pub fn mine_hard_negatives(
    forest: &Forest,
    pool: &Examples,
    used: &[bool],
    quota: usize,
) -> Result<Vec<usize>> {
    if used.len() != pool.rows() {
        return Err(Error::Shape(format!(
            "{} usage flags for {} pool rows",
            used.len(),
            pool.rows()
        )));
    }
    let scores = forest.score_all(pool)?;
    let mut free: Vec<usize> = (0..pool.rows()).filter(|&i| !used[i]).collect();
    free.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    free.truncate(quota);
    Ok(free)
}

/// Outcome of a cascade beyond the final forest.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CascadeReport {
    /// Random negatives that seeded the first stage.
    pub initial_negatives: usize,
    /// Pool rows in the final training set, in insertion order.
    pub used_negatives: Vec<usize>,
    /// One boosting report per stage, final forest last.
    pub stages: Vec<BoostReport>,
}

/// Bootstrapped training.
///
/// The first training set holds every positive and `|pos|` seeded-random
/// pool negatives. Each configured stage boosts a fresh forest of its size
/// and then adds the `quota` hardest unused negatives; the final forest is
/// boosted from scratch on the accumulated set.
pub fn train_cascade(
    pos: &Examples,
    neg_pool: &Examples,
    config: &ForestConfig,
) -> Result<(Forest, CascadeReport)> {
    config.validate()?;
    if pos.is_empty() {
        return Err(Error::Training("no positive examples".into()));
    }
    if pos.cols != neg_pool.cols {
        return Err(Error::Shape(format!(
            "positives have {} features, pool has {}",
            pos.cols, neg_pool.cols
        )));
    }
    let mut used = vec![false; neg_pool.rows()];
    let mut rng = ChaCha8Rng::seed_from_u64(stage_seed(config.seed, usize::MAX >> 1));
    let n_init = pos.rows().min(neg_pool.rows());
    let mut chosen: Vec<usize> = sample(&mut rng, neg_pool.rows(), n_init).into_vec();
    chosen.sort_unstable();
    for &i in &chosen {
        used[i] = true;
    }
    let mut report = CascadeReport {
        initial_negatives: n_init,
        used_negatives: chosen.clone(),
        stages: Vec::new(),
    };
    let mut negatives = Examples::with_cols(pos.cols);
    for &i in &chosen {
        negatives.push(neg_pool.row(i), neg_pool.priors[i]);
    }
    let quota = config.quota(pos.rows());
    let mut history = Vec::new();
    for (k, &trees) in config.stages.iter().enumerate() {
        let mut ts = TrainSet::from_parts(pos, &negatives)?;
        let (forest, br) = boost(&mut ts, trees, config, stage_seed(config.seed, k))?;
        let mined = mine_hard_negatives(&forest, neg_pool, &used, quota)?;
        for &i in &mined {
            used[i] = true;
            negatives.push(neg_pool.row(i), neg_pool.priors[i]);
        }
        report.used_negatives.extend_from_slice(&mined);
        history.push(StageRecord {
            stage: k as u32 + 1,
            trees: trees as u32,
            trained: forest.trees.len() as u32,
            negatives_added: mined.len() as u32,
            shortfall: (quota - mined.len()) as u32,
        });
        report.stages.push(br);
    }
    let last = config.stages.len();
    let mut ts = TrainSet::from_parts(pos, &negatives)?;
    let (mut forest, br) = boost(&mut ts, config.final_trees, config, stage_seed(config.seed, last))?;
    history.push(StageRecord {
        stage: last as u32 + 1,
        trees: config.final_trees as u32,
        trained: forest.trees.len() as u32,
        negatives_added: 0,
        shortfall: 0,
    });
    report.stages.push(br);
    forest.stage_history = history;
    Ok((forest, report))
}

pub const MODEL_MAGIC: &[u8; 4] = b"RBFX";
pub const MODEL_VERSION: u32 = 1;

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a>(&'a [u8]);

impl Reader<'_> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        if self.0.len() < N {
            return Err(Error::format("RBFX", "truncated model file"));
        }
        let (head, rest) = self.0.split_at(N);
        self.0 = rest;
        Ok(head.try_into().unwrap())
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take::<1>()?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take()?))
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take()?))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take()?))
    }
    /// A count that must be coverable by the remaining bytes.
    fn count(&mut self, min_item_bytes: usize) -> Result<usize> {
        let n = self.u32()? as usize;
        if n.saturating_mul(min_item_bytes) > self.0.len() {
            return Err(Error::format("RBFX", "truncated model file"));
        }
        Ok(n)
    }
}

/// Serializes a forest to the versioned little-endian `RBFX` format.
pub fn save_model(forest: &Forest) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MODEL_MAGIC);
    w.u32(MODEL_VERSION);
    w.u32(forest.num_features as u32);
    w.u8(forest.uses_prior as u8);
    w.f64(forest.clamp_eps);
    let c = &forest.config;
    w.u32(c.depth as u32);
    w.f64(c.feature_fraction);
    w.u32(c.stages.len() as u32);
    for &s in &c.stages {
        w.u32(s as u32);
    }
    w.u32(c.final_trees as u32);
    w.f64(c.hard_negative_fraction);
    w.u8(c.uses_prior as u8);
    w.f64(c.clamp_eps);
    w.u64(c.seed);
    w.u32(forest.stage_history.len() as u32);
    for h in &forest.stage_history {
        for v in [h.stage, h.trees, h.trained, h.negatives_added, h.shortfall] {
            w.u32(v);
        }
    }
    w.u32(forest.trees.len() as u32);
    for t in &forest.trees {
        w.u32(t.nodes.len() as u32);
        for n in &t.nodes {
            match *n {
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    w.u8(1);
                    w.u32(feature);
                    w.f32(threshold);
                    w.u32(left);
                    w.u32(right);
                }
                TreeNode::Leaf { value } => {
                    w.u8(0);
                    w.f32(value);
                }
            }
        }
    }
    w.0
}

/// Inverse of [`save_model`]; validates the tree structure.
pub fn load_model(bytes: &[u8]) -> Result<Forest> {
    let mut r = Reader(bytes);
    if &r.take::<4>()? != MODEL_MAGIC {
        return Err(Error::format("RBFX", "bad magic"));
    }
    let version = r.u32()?;
    if version != MODEL_VERSION {
        return Err(Error::format("RBFX", format!("unsupported version {version}")));
    }
    let num_features = r.u32()? as usize;
    let uses_prior = r.u8()? != 0;
    let clamp_eps = r.f64()?;
    let depth = r.u32()? as usize;
    let feature_fraction = r.f64()?;
    let n_stages = r.count(4)?;
    let stages = (0..n_stages)
        .map(|_| r.u32().map(|v| v as usize))
        .collect::<Result<Vec<_>>>()?;
    let config = ForestConfig {
        depth,
        feature_fraction,
        stages,
        final_trees: r.u32()? as usize,
        hard_negative_fraction: r.f64()?,
        uses_prior: r.u8()? != 0,
        clamp_eps: r.f64()?,
        seed: r.u64()?,
    };
    let n_hist = r.count(20)?;
    let mut stage_history = Vec::with_capacity(n_hist);
    for _ in 0..n_hist {
        stage_history.push(StageRecord {
            stage: r.u32()?,
            trees: r.u32()?,
            trained: r.u32()?,
            negatives_added: r.u32()?,
            shortfall: r.u32()?,
        });
    }
    let n_trees = r.count(4)?;
    let mut trees = Vec::with_capacity(n_trees);
    for t in 0..n_trees {
        let n_nodes = r.count(5)?;
        if n_nodes == 0 {
            return Err(Error::format("RBFX", format!("tree {t} has no nodes")));
        }
        let mut nodes = Vec::with_capacity(n_nodes);
        for i in 0..n_nodes {
            let node = match r.u8()? {
                0 => TreeNode::Leaf { value: r.f32()? },
                1 => {
                    let (feature, threshold, left, right) = (r.u32()?, r.f32()?, r.u32()?, r.u32()?);
                    let child_ok = |c: u32| (c as usize) > i && (c as usize) < n_nodes;
                    if feature as usize >= num_features || !child_ok(left) || !child_ok(right) {
                        return Err(Error::format(
                            "RBFX",
                            format!("tree {t} node {i} is malformed"),
                        ));
                    }
                    TreeNode::Split {
                        feature,
                        threshold,
                        left,
                        right,
                    }
                }
                tag => {
                    return Err(Error::format("RBFX", format!("unknown node tag {tag}")));
                }
            };
            nodes.push(node);
        }
        trees.push(Tree { nodes });
    }
    if !r.0.is_empty() {
        return Err(Error::format("RBFX", "trailing bytes"));
    }
    Ok(Forest {
        trees,
        num_features,
        uses_prior,
        clamp_eps,
        config,
        stage_history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f0_values() {
        assert_eq!(f0_from_score(0.5, 1e-6), 0.0);
        let e2 = 2f64.exp();
        assert!((f0_from_score(e2 / (1.0 + e2), 1e-6) - 1.0).abs() < 1e-12);
        let clamped = 0.5 * ((1.0 - 1e-6) / 1e-6f64).ln();
        assert!((f0_from_score(1.0, 1e-6) - clamped).abs() < 1e-9);
        assert!((clamped - 6.9078).abs() < 1e-4);
        assert!((f0_from_score(0.0, 1e-6) + clamped).abs() < 1e-9);
    }

    #[test]
    fn quantization_matches_thresholds() {
        let ex = Examples::new(1, vec![0.0, 0.3, 0.5, 1.0, 0.999], vec![0.5; 5]).unwrap();
        let qt = QuantTable::fit(&ex);
        assert_eq!(qt.edges[0].len(), NUM_BINS - 1);
        assert!(qt.edges[0].windows(2).all(|w| w[0] <= w[1]));
        for &x in &ex.features {
            let b = qt.bin(0, x) as usize;
            for (e, &edge) in qt.edges[0].iter().enumerate() {
                assert_eq!(b <= e, x < edge);
            }
        }
        assert_eq!(qt.bin(0, 0.0), 0);
        assert_eq!(qt.bin(0, 1.0), 255);
    }

    fn stump_set() -> TrainSet {
        let xs = [0.1f32, 0.2, 0.3, 0.7, 0.8, 0.9];
        let ex = Examples::new(2, xs.iter().flat_map(|&x| [0.5, x]).collect(), vec![0.5; 6]).unwrap();
        TrainSet::new(ex, vec![-1, -1, -1, 1, 1, 1]).unwrap()
    }

    #[test]
    fn separable_stump() {
        let ts = stump_set();
        let qt = QuantTable::fit(&ts.examples);
        let params = TreeParams {
            depth: 1,
            feature_fraction: 1.0,
        };
        let t = train_tree(&ts, &qt, params, 0);
        assert_eq!(t.nodes.len(), 3);
        let TreeNode::Split { feature, threshold, left, right } = t.nodes[0] else {
            panic!("expected a split");
        };
        assert_eq!(feature, 1);
        assert!(threshold > 0.3 && threshold <= 0.7);
        let leaf = |i: u32| match t.nodes[i as usize] {
            TreeNode::Leaf { value } => value,
            _ => panic!(),
        };
        assert!(leaf(left) < 0.0 && leaf(right) > 0.0);
    }

    #[test]
    fn pure_node_is_a_clamped_leaf() {
        let ex = Examples::new(1, vec![0.0, 1.0, 2.0], vec![0.5; 3]).unwrap();
        let ts = TrainSet::new(ex, vec![1, 1, 1]).unwrap();
        let qt = QuantTable::fit(&ts.examples);
        let t = train_tree(&ts, &qt, TreeParams { depth: 3, feature_fraction: 1.0 }, 0);
        assert_eq!(t.nodes.len(), 1);
        let TreeNode::Leaf { value } = t.nodes[0] else { panic!() };
        let expect = 0.5 * ((1.0 + 1e-6) / 1e-6f64).ln();
        assert!((value as f64 - expect).abs() < 1e-5);
    }

    #[test]
    fn empty_forest_scores_prior() {
        let f = Forest::empty(3, ForestConfig::default());
        assert_eq!(f.score(&[0.0; 3], 0.5).unwrap(), 0.0);
        assert!(f.score(&[0.0; 2], 0.5).is_err());
    }

    #[test]
    fn mining_picks_top_scores() {
        let mut f = Forest::empty(1, ForestConfig::default());
        f.uses_prior = false;
        f.trees.push(Tree {
            nodes: vec![
                TreeNode::Split { feature: 0, threshold: 0.5, left: 1, right: 2 },
                TreeNode::Leaf { value: -3.0 },
                TreeNode::Split { feature: 0, threshold: 1.5, left: 3, right: 4 },
                TreeNode::Leaf { value: 0.5 },
                TreeNode::Leaf { value: 2.0 },
            ],
        });
        let pool = Examples::new(1, vec![0.0, 2.0, 1.0], vec![0.5; 3]).unwrap();
        let used = vec![false; 3];
        assert_eq!(mine_hard_negatives(&f, &pool, &used, 2).unwrap(), vec![1, 2]);
        assert_eq!(mine_hard_negatives(&f, &pool, &used, 10).unwrap(), vec![1, 2, 0]);
        assert_eq!(
            mine_hard_negatives(&f, &pool, &[false, true, false], 1).unwrap(),
            vec![2]
        );
        let empty = Examples::with_cols(1);
        assert!(mine_hard_negatives(&f, &empty, &[], 3).unwrap().is_empty());
    }

    #[test]
    fn boost_stops_on_degenerate_weights() {
        // one positive with a hopeless prior dominates all weight
        let ex = Examples::new(1, vec![0.0, 0.0, 0.0], vec![0.0, 0.5, 0.5]).unwrap();
        let mut ts = TrainSet::new(ex, vec![1, -1, -1]).unwrap();
        let cfg = ForestConfig {
            clamp_eps: 1e-30,
            ..ForestConfig::default()
        };
        let (f, rep) = boost(&mut ts, 10, &cfg, 1).unwrap();
        assert_eq!(rep.truncated_at, Some(0));
        assert!(f.trees.is_empty());
    }

    #[test]
    fn quota_rounds_up() {
        let cfg = ForestConfig::default();
        assert_eq!(cfg.quota(50_000), 5000);
        assert_eq!(cfg.quota(11), 2);
        assert_eq!(cfg.quota(10), 1);
        assert_eq!(cfg.quota(0), 0);
    }

    #[test]
    fn model_rejects_garbage() {
        let f = Forest::empty(4, ForestConfig::default());
        let bytes = save_model(&f);
        assert_eq!(load_model(&bytes).unwrap(), f);
        assert!(load_model(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'Q';
        assert!(load_model(&bad).is_err());
        let mut bad = bytes;
        bad[4] = 9;
        assert!(load_model(&bad).is_err());
    }
}
