//! Downstream evaluation on frozen encoders: tile-level linear probing,
//! per-patch linear segmentation, and the ablation grid crossing
//! initialization (random, reconstruction-only, reconstruction plus
//! alignment) with input modality (rgb, dsm, rgb+dsm). Encoders are never
//! updated here; only linear heads train.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{AdamWConfig, RunConfig};
use crate::error::Error;
use crate::model::{pool_embedding, DualMimModel};
use crate::nn::tensor::matmul_nn_acc;
use crate::nn::{patchify, Graph, ParamSet, Tensor};
use crate::synthdata::{PairedTile, NUM_CLASSES};
use crate::tileio::normalize;
use crate::trainer::{
    adamw_step, build_corpus, build_eval_corpus, corpus_stats, pretrain, Checkpoint, OptState,
};

/// Optimization budget for every linear head; fixed so results depend only
/// on features, split, and seed.
const HEAD_STEPS: usize = 200;
const HEAD_LR: f64 = 0.1;

// ── Keys ───────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Modality {
    Rgb,
    Dsm,
    RgbDsm,
}

impl Modality {
    pub fn parse(s: &str) -> Result<Self, Error> {
        match s {
            "rgb" => Ok(Modality::Rgb),
            "dsm" => Ok(Modality::Dsm),
            "rgb+dsm" => Ok(Modality::RgbDsm),
            _ => Err(Error::Config(format!(
                "unknown modality {s:?}, expected rgb, dsm, or rgb+dsm"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Rgb => "rgb",
            Modality::Dsm => "dsm",
            Modality::RgbDsm => "rgb+dsm",
        }
    }

    fn uses_rgb(self) -> bool {
        matches!(self, Modality::Rgb | Modality::RgbDsm)
    }

    fn uses_dsm(self) -> bool {
        matches!(self, Modality::Dsm | Modality::RgbDsm)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum InitKind {
    Random,
    Mim,
    MimContrastive,
}

impl InitKind {
    pub fn name(self) -> &'static str {
        match self {
            InitKind::Random => "random",
            InitKind::Mim => "mim",
            InitKind::MimContrastive => "mim+contrastive",
        }
    }
}

// ── Frozen features ────────────────────────────────────────────────────────

/// Frozen forward features for one tile. A tower's entries are present
/// only if that tower was requested at encode time.
#[derive(Debug, Clone)]
pub struct TileFeatures {
    /// [tokens * dim] row-major token features per tower.
    pub tokens_rgb: Option<Vec<f32>>,
    pub tokens_dsm: Option<Vec<f32>>,
    /// Unit-norm pooled embedding per tower.
    pub pooled_rgb: Option<Vec<f32>>,
    pub pooled_dsm: Option<Vec<f32>>,
    pub labels: Vec<u8>,
    /// Dominant pixel label; ties break toward the smaller label.
    pub tile_class: usize,
    pub grid: usize,
    pub patch: usize,
}

/// Dominant label by pixel count, smaller label on ties.
pub fn dominant_class(labels: &[u8]) -> Result<usize, Error> {
    if labels.is_empty() {
        return Err(Error::Config("no labels to classify".into()));
    }
    let mut counts = [0usize; NUM_CLASSES];
    for &l in labels {
        *counts
            .get_mut(l as usize)
            .ok_or_else(|| Error::Config(format!("label {l} out of range")))? += 1;
    }
    let mut best = 0;
    for c in 1..NUM_CLASSES {
        if counts[c] > counts[best] {
            best = c;
        }
    }
    Ok(best)
}

/// Runs the frozen towers selected by `modality` over every tile, after
/// per-city standardization computed from `tiles` themselves. No masking,
/// batch of one tile per forward.
pub fn encode_corpus(
    ckpt: &Checkpoint,
    tiles: &[PairedTile],
    modality: Modality,
) -> Result<Vec<TileFeatures>, Error> {
    let cfg = &ckpt.config;
    let model = DualMimModel::new(cfg.rgb_encoder.clone(), cfg.dsm_encoder.clone())
        .map_err(Error::Nn)?;
    let stats = corpus_stats(tiles)?;
    let size = cfg.train.image_size;
    let mut out = Vec::with_capacity(tiles.len());
    for tile in tiles {
        tile.validate_shape()?;
        if tile.size != size {
            return Err(Error::Config(format!(
                "tile {} of {:?} has size {}, checkpoint expects {size}",
                tile.tile_id, tile.city, tile.size
            )));
        }
        let s = stats
            .iter()
            .find(|s| s.city == tile.city)
            .expect("stats cover every corpus city");
        let norm = normalize(tile, s)?;
        let mut g = Graph::<f32>::new();
        let binding = g.bind(&ckpt.params);
        let mut tf = TileFeatures {
            tokens_rgb: None,
            tokens_dsm: None,
            pooled_rgb: None,
            pooled_dsm: None,
            labels: tile.labels.clone(),
            tile_class: dominant_class(&tile.labels)?,
            grid: model.grid_side(),
            patch: cfg.rgb_encoder.patch_size,
        };
        if modality.uses_rgb() {
            let tok = patchify(&norm.rgb, size, 3, cfg.rgb_encoder.patch_size).map_err(Error::Nn)?;
            let x = g.constant(tok);
            let f = model.rgb.forward(&mut g, &binding, x, 1, None).map_err(Error::Nn)?;
            let t = g.value(f);
            tf.tokens_rgb = Some(t.data().to_vec());
            let pooled = pool_embedding(t).map_err(Error::Nn)?;
            tf.pooled_rgb = Some(pooled.vector.iter().map(|&v| v as f32).collect());
        }
        if modality.uses_dsm() {
            let tok = patchify(&norm.dsm, size, 1, cfg.dsm_encoder.patch_size).map_err(Error::Nn)?;
            let x = g.constant(tok);
            let f = model.dsm.forward(&mut g, &binding, x, 1, None).map_err(Error::Nn)?;
            let t = g.value(f);
            tf.tokens_dsm = Some(t.data().to_vec());
            let pooled = pool_embedding(t).map_err(Error::Nn)?;
            tf.pooled_dsm = Some(pooled.vector.iter().map(|&v| v as f32).collect());
        }
        out.push(tf);
    }
    Ok(out)
}

fn absent(modality: &str) -> Error {
    Error::Config(format!("{modality} features absent from the encoded corpus"))
}

fn embedding_of(f: &TileFeatures, modality: Modality) -> Result<Vec<f32>, Error> {
    match modality {
        Modality::Rgb => f.pooled_rgb.clone().ok_or_else(|| absent("rgb")),
        Modality::Dsm => f.pooled_dsm.clone().ok_or_else(|| absent("dsm")),
        Modality::RgbDsm => {
            let mut v = f.pooled_rgb.clone().ok_or_else(|| absent("rgb"))?;
            v.extend(f.pooled_dsm.as_ref().ok_or_else(|| absent("dsm"))?);
            Ok(v)
        }
    }
}

fn token_features_of(f: &TileFeatures, modality: Modality) -> Result<Vec<f32>, Error> {
    match modality {
        Modality::Rgb => f.tokens_rgb.clone().ok_or_else(|| absent("rgb")),
        Modality::Dsm => f.tokens_dsm.clone().ok_or_else(|| absent("dsm")),
        Modality::RgbDsm => {
            // Fused per token: rgb columns first, then dsm.
            let rgb = f.tokens_rgb.as_ref().ok_or_else(|| absent("rgb"))?;
            let dsm = f.tokens_dsm.as_ref().ok_or_else(|| absent("dsm"))?;
            let n = f.grid * f.grid;
            let (cr, cd) = (rgb.len() / n, dsm.len() / n);
            let mut v = Vec::with_capacity(rgb.len() + dsm.len());
            for t in 0..n {
                v.extend_from_slice(&rgb[t * cr..(t + 1) * cr]);
                v.extend_from_slice(&dsm[t * cd..(t + 1) * cd]);
            }
            Ok(v)
        }
    }
}

// ── Splits and heads ───────────────────────────────────────────────────────

/// Seeded 80/20 index split; both sides non-empty, together a partition.
pub fn split_80_20(n: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>), Error> {
    if n < 2 {
        return Err(Error::Config(format!("need at least 2 items to split, got {n}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let n_test = (n / 5).max(1);
    let mut test = order[..n_test].to_vec();
    let mut train = order[n_test..].to_vec();
    test.sort_unstable();
    train.sort_unstable();
    Ok((train, test))
}

/// Trains `weight` [in_dim, out_dim] and `bias` [out_dim] by full-batch
/// cross entropy under AdamW without weight decay. When `out_dim` is a
/// multiple of `classes`, each input row expands to `out_dim / classes`
/// label rows (per-pixel heads); `targets` must match the expanded rows.
fn train_linear_head(
    x: &Tensor<f32>,
    targets: Arc<Vec<usize>>,
    out_dim: usize,
    classes: usize,
) -> Result<(Tensor<f32>, Tensor<f32>), Error> {
    let (rows, in_dim) = x.dims2().map_err(Error::Nn)?;
    if out_dim % classes != 0 {
        return Err(Error::Config(format!(
            "head output {out_dim} is not a multiple of {classes} classes"
        )));
    }
    let expand = out_dim / classes;
    if targets.len() != rows * expand {
        return Err(Error::Config(format!(
            "{} targets for {} label rows",
            targets.len(),
            rows * expand
        )));
    }
    let mut params = ParamSet::new();
    params
        .insert("head.weight", Tensor::zeros(&[in_dim, out_dim]))
        .map_err(Error::Nn)?;
    params
        .insert("head.bias", Tensor::zeros(&[out_dim]))
        .map_err(Error::Nn)?;
    let mut opt = OptState::new(&params);
    let adamw = AdamWConfig {
        weight_decay: 0.0,
        ..AdamWConfig::default()
    };
    for _ in 0..HEAD_STEPS {
        let mut g = Graph::<f32>::new();
        let binding = g.bind(&params);
        let xs = g.constant(x.clone());
        let w = binding.id("head.weight").map_err(Error::Nn)?;
        let b = binding.id("head.bias").map_err(Error::Nn)?;
        let logits = g.matmul(xs, w).map_err(Error::Nn)?;
        let logits = g.add_row(logits, b).map_err(Error::Nn)?;
        let logits = if expand > 1 {
            g.reshape(logits, &[rows * expand, classes]).map_err(Error::Nn)?
        } else {
            logits
        };
        let loss = g.cross_entropy_rows(logits, Arc::clone(&targets)).map_err(Error::Nn)?;
        g.backward(loss).map_err(Error::Nn)?;
        let grads = binding.grads(&g);
        adamw_step(&mut params, &grads, &mut opt, HEAD_LR, &adamw)?;
    }
    Ok((
        params.get("head.weight").map_err(Error::Nn)?.clone(),
        params.get("head.bias").map_err(Error::Nn)?.clone(),
    ))
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// `x` [n, in_dim] times the head, bias added; plain accumulation outside
/// any graph.
fn apply_head(x: &[f32], n: usize, w: &Tensor<f32>, b: &Tensor<f32>) -> Vec<f32> {
    let (in_dim, out_dim) = (w.shape()[0], w.shape()[1]);
    let mut logits = vec![0.0f32; n * out_dim];
    matmul_nn_acc(x, w.data(), n, in_dim, out_dim, &mut logits);
    for row in logits.chunks_exact_mut(out_dim) {
        for (l, &bias) in row.iter_mut().zip(b.data()) {
            *l += bias;
        }
    }
    logits
}

// ── Linear probe ───────────────────────────────────────────────────────────

/// Multinomial logistic regression on fixed embeddings: seeded 80/20
/// split, fixed budget, top-1 accuracy on the held-out side.
pub fn probe_accuracy(
    embeddings: &[Vec<f32>],
    classes: &[usize],
    n_classes: usize,
    seed: u64,
) -> Result<f64, Error> {
    if embeddings.len() != classes.len() {
        return Err(Error::Config(format!(
            "{} embeddings vs {} class labels",
            embeddings.len(),
            classes.len()
        )));
    }
    if let Some(&c) = classes.iter().find(|&&c| c >= n_classes) {
        return Err(Error::Config(format!("class {c} out of range for {n_classes}")));
    }
    let mut distinct: Vec<usize> = classes.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(Error::Config(
            "probe dataset has a single class; nothing to separate".into(),
        ));
    }
    let dim = embeddings
        .first()
        .map(|e| e.len())
        .ok_or_else(|| Error::Config("no embeddings".into()))?;
    if embeddings.iter().any(|e| e.len() != dim) {
        return Err(Error::Config("embeddings differ in dimension".into()));
    }
    let (train, test) = split_80_20(embeddings.len(), seed)?;

    let mut x_train = Vec::with_capacity(train.len() * dim);
    let mut y_train = Vec::with_capacity(train.len());
    for &i in &train {
        x_train.extend_from_slice(&embeddings[i]);
        y_train.push(classes[i]);
    }
    let x = Tensor::from_vec(&[train.len(), dim], x_train).map_err(Error::Nn)?;
    let (w, b) = train_linear_head(&x, Arc::new(y_train), n_classes, n_classes)?;

    let mut x_test = Vec::with_capacity(test.len() * dim);
    for &i in &test {
        x_test.extend_from_slice(&embeddings[i]);
    }
    let logits = apply_head(&x_test, test.len(), &w, &b);
    let correct = test
        .iter()
        .enumerate()
        .filter(|(row, &i)| argmax(&logits[row * n_classes..(row + 1) * n_classes]) == classes[i])
        .count();
    Ok(correct as f64 / test.len() as f64)
}

/// Frozen-encoder probe over a labeled corpus, one accuracy per seed.
pub fn linear_probe(
    ckpt: &Checkpoint,
    tiles: &[PairedTile],
    modality: Modality,
    seeds: &[u64],
) -> Result<Vec<f64>, Error> {
    let features = encode_corpus(ckpt, tiles, modality)?;
    probe_from_features(&features, modality, seeds)
}

fn probe_from_features(
    features: &[TileFeatures],
    modality: Modality,
    seeds: &[u64],
) -> Result<Vec<f64>, Error> {
    let embeddings: Vec<Vec<f32>> = features
        .iter()
        .map(|f| embedding_of(f, modality))
        .collect::<Result<_, _>>()?;
    let classes: Vec<usize> = features.iter().map(|f| f.tile_class).collect();
    seeds
        .iter()
        .map(|&s| probe_accuracy(&embeddings, &classes, NUM_CLASSES, s))
        .collect()
}

// ── Segmentation ───────────────────────────────────────────────────────────

/// Mean of per-class IoU. Classes absent from both prediction and ground
/// truth are left out of the mean; identical inputs give exactly 1.
pub fn mean_iou(pred: &[u8], gt: &[u8], classes: usize) -> Result<f64, Error> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::Config(format!(
            "iou needs equal non-empty inputs, got {} vs {}",
            pred.len(),
            gt.len()
        )));
    }
    let mut inter = vec![0usize; classes];
    let mut n_pred = vec![0usize; classes];
    let mut n_gt = vec![0usize; classes];
    for (&p, &g) in pred.iter().zip(gt) {
        let (p, g) = (p as usize, g as usize);
        if p >= classes || g >= classes {
            return Err(Error::Config(format!("label {} out of range", p.max(g))));
        }
        n_pred[p] += 1;
        n_gt[g] += 1;
        if p == g {
            inter[p] += 1;
        }
    }
    let mut sum = 0.0;
    let mut present = 0usize;
    for c in 0..classes {
        let union = n_pred[c] + n_gt[c] - inter[c];
        if union > 0 {
            sum += inter[c] as f64 / union as f64;
            present += 1;
        }
    }
    debug_assert!(present > 0, "non-empty inputs imply a present class");
    Ok(sum / present as f64)
}

/// Per-pixel targets for one tile in token-major order: token rows follow
/// the grid row-major, pixels within a token row-major.
fn token_major_labels(labels: &[u8], grid: usize, patch: usize) -> Vec<usize> {
    let size = grid * patch;
    let mut out = Vec::with_capacity(size * size);
    for gy in 0..grid {
        for gx in 0..grid {
            for py in 0..patch {
                for px in 0..patch {
                    out.push(labels[(gy * patch + py) * size + gx * patch + px] as usize);
                }
            }
        }
    }
    out
}

/// Trains a per-token linear head (token features to patch-squared class
/// logits) on the 80/20 train side and reports held-out mean IoU.
pub fn segment_miou(features: &[TileFeatures], modality: Modality, seed: u64) -> Result<f64, Error> {
    if features.is_empty() {
        return Err(Error::Config("no features to segment".into()));
    }
    let grid = features[0].grid;
    let patch = features[0].patch;
    let tokens = grid * grid;
    let per_tile: Vec<Vec<f32>> = features
        .iter()
        .map(|f| token_features_of(f, modality))
        .collect::<Result<_, _>>()?;
    let dim = per_tile[0].len() / tokens;
    let (train, test) = split_80_20(features.len(), seed)?;

    let mut x_train = Vec::with_capacity(train.len() * tokens * dim);
    let mut y_train = Vec::with_capacity(train.len() * tokens * patch * patch);
    for &i in &train {
        x_train.extend_from_slice(&per_tile[i]);
        y_train.extend(token_major_labels(&features[i].labels, grid, patch));
    }
    let x = Tensor::from_vec(&[train.len() * tokens, dim], x_train).map_err(Error::Nn)?;
    let out_dim = patch * patch * NUM_CLASSES;
    let (w, b) = train_linear_head(&x, Arc::new(y_train), out_dim, NUM_CLASSES)?;

    let mut pred = Vec::new();
    let mut gt = Vec::new();
    for &i in &test {
        let logits = apply_head(&per_tile[i], tokens, &w, &b);
        for token_logits in logits.chunks_exact(out_dim) {
            for pixel_logits in token_logits.chunks_exact(NUM_CLASSES) {
                pred.push(argmax(pixel_logits) as u8);
            }
        }
        gt.extend(token_major_labels(&features[i].labels, grid, patch).iter().map(|&l| l as u8));
    }
    mean_iou(&pred, &gt, NUM_CLASSES)
}

/// Frozen-encoder segmentation over a labeled corpus, one mIoU per seed.
pub fn segment_eval(
    ckpt: &Checkpoint,
    tiles: &[PairedTile],
    modality: Modality,
    seeds: &[u64],
) -> Result<Vec<f64>, Error> {
    let features = encode_corpus(ckpt, tiles, modality)?;
    seeds
        .iter()
        .map(|&s| segment_miou(&features, modality, s))
        .collect()
}

// ── Ablation grid ──────────────────────────────────────────────────────────

/// One metric across seeds with its mean and population standard
/// deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct CellMetric {
    pub seeds: Vec<u64>,
    pub values: Vec<f64>,
    pub mean: f64,
    pub stddev: f64,
}

impl CellMetric {
    fn from_values(seeds: &[u64], values: Vec<f64>) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        CellMetric {
            seeds: seeds.to_vec(),
            values,
            mean,
            stddev: var.sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationCell {
    pub probe_accuracy: CellMetric,
    pub seg_miou: CellMetric,
}

/// Every (init, modality) cell, ordered by the key enums.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub rows: BTreeMap<(InitKind, Modality), AblationCell>,
}

impl AblationTable {
    pub fn get(&self, init: InitKind, modality: Modality) -> Option<&AblationCell> {
        self.rows.get(&(init, modality))
    }

    /// Machine-readable lines, one metric value per line.
    pub fn records(&self) -> String {
        let mut s = String::new();
        for ((init, modality), cell) in &self.rows {
            for (metric, m) in [("probe_accuracy", &cell.probe_accuracy), ("seg_miou", &cell.seg_miou)] {
                for (seed, value) in m.seeds.iter().zip(&m.values) {
                    let _ = writeln!(s, "{}\t{}\t{metric}\t{seed}\t{value}", init.name(), modality.name());
                }
            }
        }
        s
    }

    /// Human-readable summary, one row per cell.
    pub fn render(&self) -> String {
        let mut s = String::from(
            "init             modality  probe_accuracy     seg_miou\n",
        );
        for ((init, modality), cell) in &self.rows {
            let _ = writeln!(
                s,
                "{:<16} {:<9} {:.4} +/- {:.4}  {:.4} +/- {:.4}",
                init.name(),
                modality.name(),
                cell.probe_accuracy.mean,
                cell.probe_accuracy.stddev,
                cell.seg_miou.mean,
                cell.seg_miou.stddev,
            );
        }
        s
    }
}

/// Builds the corpora from the configuration, pre-trains the
/// reconstruction-only and combined variants, and evaluates every cell
/// with the same seeds. The random row uses freshly initialized, untrained
/// parameters.
pub fn run_ablation(cfg: &RunConfig, seeds: &[u64]) -> Result<AblationTable, Error> {
    cfg.validate()?;
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    if cfg.train.loss.alpha <= 0.0 {
        return Err(Error::Config(
            "ablation needs loss.alpha > 0 to distinguish the combined variant".into(),
        ));
    }
    if cfg.data.eval_tiles_per_city == 0 {
        return Err(Error::Config("ablation needs data.eval_tiles_per_city >= 1".into()));
    }
    let train_tiles = build_corpus(&cfg.data, cfg.train.image_size)?;
    let eval_tiles = build_eval_corpus(&cfg.data, cfg.train.image_size)?;

    let model = DualMimModel::new(cfg.rgb_encoder.clone(), cfg.dsm_encoder.clone())
        .map_err(Error::Nn)?;
    let random_params: ParamSet<f32> = model.init_params(cfg.train.seed).map_err(Error::Nn)?;
    let random_ckpt = Checkpoint {
        config: cfg.clone(),
        opt: OptState::new(&random_params),
        params: random_params,
        epoch: 0,
        metrics: Vec::new(),
    };
    let mut mim_cfg = cfg.clone();
    mim_cfg.train.loss.alpha = 0.0;
    let mim_ckpt = pretrain(&train_tiles, &mim_cfg, None)?;
    let con_ckpt = pretrain(&train_tiles, cfg, None)?;

    let mut rows = BTreeMap::new();
    for (init, ckpt) in [
        (InitKind::Random, &random_ckpt),
        (InitKind::Mim, &mim_ckpt),
        (InitKind::MimContrastive, &con_ckpt),
    ] {
        let features = encode_corpus(ckpt, &eval_tiles, Modality::RgbDsm)?;
        for modality in [Modality::Rgb, Modality::Dsm, Modality::RgbDsm] {
            let probe = probe_from_features(&features, modality, seeds)?;
            let seg: Vec<f64> = seeds
                .iter()
                .map(|&s| segment_miou(&features, modality, s))
                .collect::<Result<_, _>>()?;
            rows.insert(
                (init, modality),
                AblationCell {
                    probe_accuracy: CellMetric::from_values(seeds, probe),
                    seg_miou: CellMetric::from_values(seeds, seg),
                },
            );
        }
    }
    Ok(AblationTable { rows })
}
