//! Pre-training loop: per-city standardization, paired geometric
//! augmentation, block masking, the combined reconstruction and alignment
//! objective, AdamW with warmup plus cosine decay, and a self-describing
//! binary checkpoint. Single-threaded throughout; a fixed seed fixes every
//! byte of the result.

use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{AdamWConfig, AugmentConfig, RunConfig, TrainConfig};
use crate::error::{io_err, Error};
use crate::losses::{infonce_loss_graph, mim_loss_graph, total_loss_graph, MaskCounting};
use crate::model::{pool_embeddings_graph, sample_mask, DualMimModel};
use crate::nn::{patchify, Graph, ParamSet, Tensor};
use crate::synthdata::PairedTile;
use crate::tileio::{compute_city_stats, normalize, NormStats, RgbStats};

// ── Learning rate schedule ─────────────────────────────────────────────────

/// Learning rate at `step` of `total_steps`: linear ramp from zero over the
/// warmup fraction, then half-cosine decay from `base_lr` to zero at the
/// final step.
pub fn lr_at(step: usize, total_steps: usize, cfg: &TrainConfig) -> f64 {
    let warm = total_steps * cfg.warmup_epochs / cfg.epochs;
    if step < warm {
        return cfg.base_lr * step as f64 / warm as f64;
    }
    if total_steps == warm {
        return cfg.base_lr;
    }
    let t = (step - warm) as f64 / (total_steps - warm) as f64;
    cfg.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

// ── Optimizer ──────────────────────────────────────────────────────────────

/// AdamW moment estimates, one tensor pair per parameter, plus the shared
/// step counter used for bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    pub m: ParamSet<f32>,
    pub v: ParamSet<f32>,
    pub step: u64,
}

impl OptState {
    pub fn new(params: &ParamSet<f32>) -> Self {
        OptState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }
}

/// One decoupled-weight-decay update over every parameter. Gradients must
/// cover each parameter with matching shape and finite values; nothing is
/// mutated when any check fails. Accumulation runs in f64.
pub fn adamw_step(
    params: &mut ParamSet<f32>,
    grads: &ParamSet<f32>,
    state: &mut OptState,
    lr: f64,
    cfg: &AdamWConfig,
) -> Result<(), Error> {
    cfg.validate()?;
    if !lr.is_finite() || lr < 0.0 {
        return Err(Error::Config(format!("learning rate {lr} must be finite and >= 0")));
    }
    for (name, p) in params.iter() {
        let g = grads.get(name).map_err(Error::Nn)?;
        if g.shape() != p.shape() {
            return Err(Error::Config(format!(
                "gradient shape {:?} != parameter shape {:?} for {name:?}",
                g.shape(),
                p.shape()
            )));
        }
        if !g.all_finite() {
            return Err(Error::NonFinite(format!("gradient for {name:?}")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (name, p) in params.iter_mut() {
        let g = grads.get(name).map_err(Error::Nn)?;
        let m = state.m.get_mut(name).map_err(Error::Nn)?;
        let v = state.v.get_mut(name).map_err(Error::Nn)?;
        for i in 0..p.len() {
            let gi = g.data()[i] as f64;
            let mi = cfg.beta1 * m.data()[i] as f64 + (1.0 - cfg.beta1) * gi;
            let vi = cfg.beta2 * v.data()[i] as f64 + (1.0 - cfg.beta2) * gi * gi;
            m.data_mut()[i] = mi as f32;
            v.data_mut()[i] = vi as f32;
            let wi = p.data()[i] as f64;
            let update = (mi / bc1) / ((vi / bc2).sqrt() + cfg.eps) + cfg.weight_decay * wi;
            p.data_mut()[i] = (wi - lr * update) as f32;
        }
    }
    Ok(())
}

// ── Augmentation ───────────────────────────────────────────────────────────

/// Geometric transform applied identically to reflectance, height, and
/// labels: horizontal flip with probability 1/2, then a random crop with
/// area scale in [0.6, 1.0] resized back to the input size. Images
/// resample bilinearly, labels by nearest neighbor. With both transforms
/// disabled the output is a bit-exact copy.
pub fn augment_pair(
    rgb: &[f32],
    dsm: &[f32],
    labels: &[u8],
    size: usize,
    seed: u64,
    cfg: &AugmentConfig,
) -> Result<(Vec<f32>, Vec<f32>, Vec<u8>), Error> {
    let n = size * size;
    if rgb.len() != 3 * n || dsm.len() != n || labels.len() != n {
        return Err(Error::Config(format!(
            "augment input lengths {}/{}/{} do not match size {size}",
            rgb.len(),
            dsm.len(),
            labels.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let flip = cfg.flip && rng.gen::<f64>() < 0.5;
    let (crop, cx, cy) = if cfg.crop {
        let area: f64 = rng.gen_range(0.6..=1.0);
        let side = ((size as f64 * area.sqrt()).round() as usize).clamp(1, size);
        let cx = rng.gen_range(0..=size - side);
        let cy = rng.gen_range(0..=size - side);
        (side, cx, cy)
    } else {
        (size, 0, 0)
    };

    if !cfg.crop {
        // No resampling: copy, reversing columns when flipped.
        let mut out_rgb = Vec::with_capacity(3 * n);
        let mut out_dsm = Vec::with_capacity(n);
        let mut out_labels = Vec::with_capacity(n);
        for y in 0..size {
            for x in 0..size {
                let sx = if flip { size - 1 - x } else { x };
                let p = y * size + sx;
                out_rgb.extend_from_slice(&rgb[3 * p..3 * p + 3]);
                out_dsm.push(dsm[p]);
                out_labels.push(labels[p]);
            }
        }
        return Ok((out_rgb, out_dsm, out_labels));
    }

    let scale = crop as f64 / size as f64;
    let hi = (size - 1) as f64;
    let src = |out: usize, off: usize| -> f64 {
        ((out as f64 + 0.5) * scale - 0.5 + off as f64).clamp(0.0, hi)
    };
    let mut out_rgb = vec![0.0f32; 3 * n];
    let mut out_dsm = vec![0.0f32; n];
    let mut out_labels = vec![0u8; n];
    for y in 0..size {
        let sy = src(y, cy);
        for x in 0..size {
            let sx = {
                let s = src(x, cx);
                if flip {
                    hi - s
                } else {
                    s
                }
            };
            let x0 = sx.floor() as usize;
            let y0 = sy.floor() as usize;
            let x1 = (x0 + 1).min(size - 1);
            let y1 = (y0 + 1).min(size - 1);
            let fx = sx - x0 as f64;
            let fy = sy - y0 as f64;
            let blend = |plane: &[f32], stride: usize, off: usize| -> f32 {
                let at = |yy: usize, xx: usize| plane[(yy * size + xx) * stride + off] as f64;
                let top = (1.0 - fx) * at(y0, x0) + fx * at(y0, x1);
                let bot = (1.0 - fx) * at(y1, x0) + fx * at(y1, x1);
                ((1.0 - fy) * top + fy * bot) as f32
            };
            let o = y * size + x;
            for ch in 0..3 {
                out_rgb[3 * o + ch] = blend(rgb, 3, ch);
            }
            out_dsm[o] = blend(dsm, 1, 0);
            let nx = sx.round() as usize;
            let ny = sy.round() as usize;
            out_labels[o] = labels[ny * size + nx];
        }
    }
    Ok((out_rgb, out_dsm, out_labels))
}

// ── Metrics ────────────────────────────────────────────────────────────────

/// Per-epoch loss means and the learning rate of the epoch's last step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub mim: f64,
    pub nce: f64,
    pub total: f64,
    pub lr: f64,
}

impl EpochMetrics {
    pub fn tsv_line(&self) -> String {
        format!("{}\t{}\t{}\t{}\t{}", self.epoch, self.mim, self.nce, self.total, self.lr)
    }
}

/// Tab-separated log with a header line, one row per epoch.
pub fn metrics_log(metrics: &[EpochMetrics]) -> String {
    let mut s = String::from("epoch\tmim\tnce\ttotal\tlr\n");
    for m in metrics {
        s.push_str(&m.tsv_line());
        s.push('\n');
    }
    s
}

// ── Seed derivation ────────────────────────────────────────────────────────

const SEED_SHUFFLE: u64 = 1;
const SEED_AUGMENT: u64 = 2;
const SEED_MASK_RGB: u64 = 3;
const SEED_MASK_DSM: u64 = 4;
const SEED_CORPUS: u64 = 5;
const SEED_EVAL_CORPUS: u64 = 6;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent stream per (purpose, epoch, item); order of use never
/// affects the draw.
fn derive_seed(master: u64, tag: u64, epoch: u64, item: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(master ^ tag) ^ epoch) ^ item)
}

// ── Checkpoint ─────────────────────────────────────────────────────────────

pub const CKPT_MAGIC: &[u8; 4] = b"FMCK";
pub const CKPT_VERSION: u16 = 1;

/// Full training state: run configuration, model parameters, optimizer
/// moments and step, epochs completed, and the per-epoch metric history.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub params: ParamSet<f32>,
    pub opt: OptState,
    pub epoch: u64,
    pub metrics: Vec<EpochMetrics>,
}

impl Checkpoint {
    /// Errors unless `cfg` matches the stored run configuration exactly;
    /// loading tensors into a differently shaped model is never allowed.
    pub fn require_config(&self, cfg: &RunConfig) -> Result<(), Error> {
        if &self.config != cfg {
            return Err(Error::Config(
                "checkpoint was trained under a different configuration".into(),
            ));
        }
        Ok(())
    }
}

fn put_params(out: &mut Vec<u8>, set: &ParamSet<f32>) {
    out.extend_from_slice(&(set.len() as u32).to_le_bytes());
    for (name, t) in set.iter() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_bits().to_le_bytes());
        }
    }
}

pub fn checkpoint_to_bytes(c: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    let cfg = c.config.serialize();
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(cfg.as_bytes());
    put_params(&mut out, &c.params);
    put_params(&mut out, &c.opt.m);
    put_params(&mut out, &c.opt.v);
    out.extend_from_slice(&c.opt.step.to_le_bytes());
    out.extend_from_slice(&c.epoch.to_le_bytes());
    out.extend_from_slice(&(c.metrics.len() as u32).to_le_bytes());
    for m in &c.metrics {
        out.extend_from_slice(&(m.epoch as u64).to_le_bytes());
        for v in [m.mim, m.nce, m.total, m.lr] {
            out.extend_from_slice(&v.to_bits().to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], Error> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format {
                offset: self.buf.len(),
                msg: format!("truncated while reading {what}"),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16, Error> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32, Error> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64, Error> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

fn read_params(r: &mut Reader, section: &str) -> Result<ParamSet<f32>, Error> {
    let count = r.u32(section)? as usize;
    let mut set = ParamSet::new();
    for _ in 0..count {
        let name_len = r.u16("tensor name length")? as usize;
        let name_off = r.pos;
        let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
            .map_err(|e| Error::Format {
                offset: name_off,
                msg: format!("tensor name is not UTF-8: {e}"),
            })?
            .to_string();
        let rank = r.take(1, "tensor rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("tensor dimension")? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 4, &format!("tensor data for {name:?}"))?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|b| f32::from_bits(u32::from_le_bytes(b.try_into().expect("4 bytes"))))
            .collect();
        let t = Tensor::from_vec(&shape, data).map_err(Error::Nn)?;
        set.insert(&name, t).map_err(Error::Nn)?;
    }
    Ok(set)
}

/// Shape-and-name agreement between a stored section and a template; any
/// missing, extra, or reshaped tensor is a hard error.
fn check_against(stored: &ParamSet<f32>, template: &ParamSet<f32>, what: &str) -> Result<(), Error> {
    for name in stored.names() {
        if !template.contains(name) {
            return Err(Error::Format {
                offset: 0,
                msg: format!("{what} has unknown tensor {name:?}"),
            });
        }
    }
    for (name, t) in template.iter() {
        let s = stored.get(name).map_err(|_| Error::Format {
            offset: 0,
            msg: format!("{what} is missing tensor {name:?}"),
        })?;
        if s.shape() != t.shape() {
            return Err(Error::Format {
                offset: 0,
                msg: format!(
                    "{what} tensor {name:?} has shape {:?}, expected {:?}",
                    s.shape(),
                    t.shape()
                ),
            });
        }
    }
    Ok(())
}

/// Parses and validates a checkpoint: magic, version, a configuration that
/// itself parses, and tensors that exactly match the model the stored
/// configuration describes.
pub fn checkpoint_from_bytes(buf: &[u8]) -> Result<Checkpoint, Error> {
    let mut r = Reader { buf, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != CKPT_MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: format!("bad magic {magic:02x?}, expected {CKPT_MAGIC:02x?}"),
        });
    }
    let version = r.u16("version")?;
    if version != CKPT_VERSION {
        return Err(Error::Format {
            offset: 4,
            msg: format!("unsupported version {version}, expected {CKPT_VERSION}"),
        });
    }
    let cfg_len = r.u32("config length")? as usize;
    let cfg_off = r.pos;
    let cfg_text = std::str::from_utf8(r.take(cfg_len, "config text")?).map_err(|e| {
        Error::Format {
            offset: cfg_off,
            msg: format!("config text is not UTF-8: {e}"),
        }
    })?;
    let config = RunConfig::parse(cfg_text)?;
    config.validate()?;
    let params = read_params(&mut r, "model section")?;
    let m = read_params(&mut r, "first-moment section")?;
    let v = read_params(&mut r, "second-moment section")?;
    let step = r.u64("optimizer step")?;
    let epoch = r.u64("epoch")?;
    let n_metrics = r.u32("metric count")? as usize;
    let mut metrics = Vec::with_capacity(n_metrics);
    for _ in 0..n_metrics {
        let e = r.u64("metric epoch")? as usize;
        let mut vals = [0.0f64; 4];
        for v in vals.iter_mut() {
            *v = f64::from_bits(r.u64("metric value")?);
        }
        metrics.push(EpochMetrics {
            epoch: e,
            mim: vals[0],
            nce: vals[1],
            total: vals[2],
            lr: vals[3],
        });
    }
    if r.pos != buf.len() {
        return Err(Error::Format {
            offset: r.pos,
            msg: format!("{} trailing bytes after checkpoint", buf.len() - r.pos),
        });
    }

    let model = DualMimModel::new(config.rgb_encoder.clone(), config.dsm_encoder.clone())
        .map_err(Error::Nn)?;
    let template: ParamSet<f32> = model.init_params(0).map_err(Error::Nn)?;
    check_against(&params, &template, "model section")?;
    check_against(&m, &params, "first-moment section")?;
    check_against(&v, &params, "second-moment section")?;
    Ok(Checkpoint {
        config,
        params,
        opt: OptState { m, v, step },
        epoch,
        metrics,
    })
}

pub fn save_checkpoint(path: &Path, c: &Checkpoint) -> Result<(), Error> {
    std::fs::write(path, checkpoint_to_bytes(c)).map_err(|e| io_err(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, Error> {
    let buf = std::fs::read(path).map_err(|e| io_err(path, e))?;
    checkpoint_from_bytes(&buf)
}

// ── Pre-training ───────────────────────────────────────────────────────────

struct StepOutcome {
    mim: f64,
    nce: f64,
    total: f64,
}

struct BatchInput {
    rgb_tokens: Tensor<f32>,
    dsm_tokens: Tensor<f32>,
    mask_rgb: Vec<bool>,
    mask_dsm: Vec<bool>,
}

fn masked_rows(mask: &[bool]) -> Vec<usize> {
    mask.iter()
        .enumerate()
        .filter_map(|(i, &m)| m.then_some(i))
        .collect()
}

/// Forward, losses, backward, and one optimizer update for a single batch.
fn train_step(
    model: &DualMimModel,
    params: &mut ParamSet<f32>,
    opt: &mut OptState,
    batch: BatchInput,
    batch_size: usize,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<StepOutcome, Error> {
    let mut g = Graph::<f32>::new();
    let binding = g.bind(params);
    let rows_rgb = Arc::new(masked_rows(&batch.mask_rgb));
    let rows_dsm = Arc::new(masked_rows(&batch.mask_dsm));
    let x_rgb = g.constant(batch.rgb_tokens);
    let x_dsm = g.constant(batch.dsm_tokens);
    let out = model
        .forward_tokens(
            &mut g,
            &binding,
            x_rgb,
            x_dsm,
            batch_size,
            Arc::new(batch.mask_rgb),
            Arc::new(batch.mask_dsm),
        )
        .map_err(Error::Nn)?;
    let mim = mim_loss_graph(
        &mut g,
        x_rgb,
        out.recon_rgb,
        rows_rgb,
        x_dsm,
        out.recon_dsm,
        rows_dsm,
        MaskCounting::PixelChannels,
    )
    .map_err(Error::Nn)?;

    let include_nce = cfg.loss.alpha > 0.0 || cfg.nce_when_alpha_zero;
    let (loss, nce_val) = if include_nce {
        let z_rgb = pool_embeddings_graph(&mut g, out.feat_rgb, model.tokens()).map_err(Error::Nn)?;
        let z_dsm = pool_embeddings_graph(&mut g, out.feat_dsm, model.tokens()).map_err(Error::Nn)?;
        let nce = infonce_loss_graph(&mut g, z_rgb, z_dsm, &cfg.loss).map_err(Error::Nn)?;
        let total = total_loss_graph(&mut g, mim, nce, &cfg.loss).map_err(Error::Nn)?;
        (total, g.value(nce).item().map_err(Error::Nn)? as f64)
    } else {
        (mim, 0.0)
    };

    let mim_val = g.value(mim).item().map_err(Error::Nn)? as f64;
    let total_val = g.value(loss).item().map_err(Error::Nn)? as f64;
    if !total_val.is_finite() {
        return Err(Error::NonFinite(format!(
            "loss (mim={mim_val}, nce={nce_val}, total={total_val})"
        )));
    }
    g.backward(loss).map_err(Error::Nn)?;
    let grads = binding.grads(&g);
    adamw_step(params, &grads, opt, lr, &cfg.adamw)?;
    Ok(StepOutcome {
        mim: mim_val,
        nce: nce_val,
        total: total_val,
    })
}

/// Synthetic pre-training corpus: `tiles_per_city` tiles for each
/// configured city, seeded independently per city.
pub fn build_corpus(data: &crate::config::DataConfig, image_size: usize) -> Result<Vec<PairedTile>, Error> {
    corpus_for(data, image_size, data.tiles_per_city, SEED_CORPUS)
}

/// Held-out evaluation tiles drawn from the same distribution as
/// [`build_corpus`] but from disjoint random streams.
pub fn build_eval_corpus(
    data: &crate::config::DataConfig,
    image_size: usize,
) -> Result<Vec<PairedTile>, Error> {
    corpus_for(data, image_size, data.eval_tiles_per_city, SEED_EVAL_CORPUS)
}

fn corpus_for(
    data: &crate::config::DataConfig,
    image_size: usize,
    per_city: usize,
    tag: u64,
) -> Result<Vec<PairedTile>, Error> {
    let mut tiles = Vec::with_capacity(per_city * data.cities.len());
    for (i, city) in data.cities.iter().enumerate() {
        let preset = crate::synthdata::preset_by_name(city)?;
        let seed = derive_seed(data.seed, tag, i as u64, 0);
        tiles.extend(crate::synthdata::generate_tiles(&preset, per_city, image_size, seed)?);
    }
    Ok(tiles)
}

/// Per-city standardization statistics for every city present, in name
/// order.
pub fn corpus_stats(tiles: &[PairedTile]) -> Result<Vec<NormStats>, Error> {
    let mut cities: Vec<&str> = tiles.iter().map(|t| t.city.as_str()).collect();
    cities.sort_unstable();
    cities.dedup();
    cities
        .iter()
        .map(|c| {
            let of_city: Vec<PairedTile> =
                tiles.iter().filter(|t| t.city == *c).cloned().collect();
            compute_city_stats(&of_city, c, RgbStats::PerChannel)
        })
        .collect()
}

fn normalize_corpus(tiles: &[PairedTile], stats: &[NormStats]) -> Result<Vec<PairedTile>, Error> {
    tiles
        .iter()
        .map(|t| {
            let s = stats
                .iter()
                .find(|s| s.city == t.city)
                .ok_or_else(|| Error::Config(format!("no statistics for city {:?}", t.city)))?;
            normalize(t, s)
        })
        .collect()
}

/// Runs the full pre-training loop on `tiles` and returns the final state.
/// When `ckpt_dir` is given, intermediate checkpoints land there every
/// `checkpoint_interval` epochs along with `checkpoint_final.fmck`.
pub fn pretrain(
    tiles: &[PairedTile],
    cfg: &RunConfig,
    ckpt_dir: Option<&Path>,
) -> Result<Checkpoint, Error> {
    cfg.validate()?;
    let t = &cfg.train;
    if t.checkpoint_interval > 0 && ckpt_dir.is_none() {
        return Err(Error::Config(
            "checkpoint_interval > 0 needs a checkpoint directory".into(),
        ));
    }
    if tiles.is_empty() {
        return Err(Error::Config("pre-training corpus is empty".into()));
    }
    for tile in tiles {
        tile.validate_shape()?;
        if tile.size != t.image_size {
            return Err(Error::Config(format!(
                "tile {} of {:?} has size {}, expected train.image_size {}",
                tile.tile_id, tile.city, tile.size, t.image_size
            )));
        }
    }

    let model = DualMimModel::new(cfg.rgb_encoder.clone(), cfg.dsm_encoder.clone())
        .map_err(Error::Nn)?;
    let stats = corpus_stats(tiles)?;
    let corpus = normalize_corpus(tiles, &stats)?;
    let mut params: ParamSet<f32> = model.init_params(t.seed).map_err(Error::Nn)?;
    let mut opt = OptState::new(&params);

    let include_nce = t.loss.alpha > 0.0 || t.nce_when_alpha_zero;
    let min_batch = if include_nce { 2 } else { 1 };
    let n = corpus.len();
    let full = n / t.batch_size;
    let rem = n % t.batch_size;
    let steps_per_epoch = full + usize::from(rem >= min_batch);
    if steps_per_epoch == 0 {
        return Err(Error::Config(format!(
            "corpus of {n} tiles yields no batch of at least {min_batch}"
        )));
    }
    let total_steps = t.epochs * steps_per_epoch;
    let grid = model.grid_side();
    let tokens = model.tokens();

    let mut metrics = Vec::with_capacity(t.epochs);
    let mut global_step = 0usize;
    for epoch in 0..t.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(t.seed, SEED_SHUFFLE, epoch as u64, 0));
        order.shuffle(&mut rng);

        let (mut sum_mim, mut sum_nce, mut sum_total) = (0.0, 0.0, 0.0);
        let mut last_lr = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(t.batch_size) {
            if chunk.len() < min_batch {
                continue;
            }
            let mut rgb_data = Vec::new();
            let mut dsm_data = Vec::new();
            let mut mask_rgb = Vec::with_capacity(chunk.len() * tokens);
            let mut mask_dsm = Vec::with_capacity(chunk.len() * tokens);
            for &idx in chunk {
                let tile = &corpus[idx];
                let (rgb, dsm, _) = augment_pair(
                    &tile.rgb,
                    &tile.dsm,
                    &tile.labels,
                    t.image_size,
                    derive_seed(t.seed, SEED_AUGMENT, epoch as u64, idx as u64),
                    &t.augment,
                )?;
                let tok_rgb: Tensor<f32> =
                    patchify(&rgb, t.image_size, 3, cfg.rgb_encoder.patch_size)
                        .map_err(Error::Nn)?;
                let tok_dsm: Tensor<f32> =
                    patchify(&dsm, t.image_size, 1, cfg.dsm_encoder.patch_size)
                        .map_err(Error::Nn)?;
                rgb_data.extend_from_slice(tok_rgb.data());
                dsm_data.extend_from_slice(tok_dsm.data());
                let m_rgb = sample_mask(
                    grid,
                    t.mask_ratio,
                    t.mask_unit,
                    derive_seed(t.seed, SEED_MASK_RGB, epoch as u64, idx as u64),
                )
                .map_err(Error::Nn)?;
                let m_dsm = if t.shared_mask {
                    m_rgb.clone()
                } else {
                    sample_mask(
                        grid,
                        t.mask_ratio,
                        t.mask_unit,
                        derive_seed(t.seed, SEED_MASK_DSM, epoch as u64, idx as u64),
                    )
                    .map_err(Error::Nn)?
                };
                mask_rgb.extend_from_slice(m_rgb.as_slice());
                mask_dsm.extend_from_slice(m_dsm.as_slice());
            }
            let rows = chunk.len() * tokens;
            let batch = BatchInput {
                rgb_tokens: Tensor::from_vec(
                    &[rows, cfg.rgb_encoder.patch_dim()],
                    rgb_data,
                )
                .map_err(Error::Nn)?,
                dsm_tokens: Tensor::from_vec(
                    &[rows, cfg.dsm_encoder.patch_dim()],
                    dsm_data,
                )
                .map_err(Error::Nn)?,
                mask_rgb,
                mask_dsm,
            };
            let lr = lr_at(global_step, total_steps, t);
            let outcome = train_step(&model, &mut params, &mut opt, batch, chunk.len(), lr, t)
                .map_err(|e| match e {
                    Error::NonFinite(msg) => Error::NonFinite(format!(
                        "epoch {epoch} batch {batches}: {msg}"
                    )),
                    other => other,
                })?;
            sum_mim += outcome.mim;
            sum_nce += outcome.nce;
            sum_total += outcome.total;
            last_lr = lr;
            global_step += 1;
            batches += 1;
        }
        let b = batches as f64;
        metrics.push(EpochMetrics {
            epoch,
            mim: sum_mim / b,
            nce: sum_nce / b,
            total: sum_total / b,
            lr: last_lr,
        });

        let done = epoch + 1;
        if t.checkpoint_interval > 0 && done % t.checkpoint_interval == 0 && done < t.epochs {
            let ckpt = Checkpoint {
                config: cfg.clone(),
                params: params.clone(),
                opt: opt.clone(),
                epoch: done as u64,
                metrics: metrics.clone(),
            };
            let dir = ckpt_dir.expect("checked above");
            save_checkpoint(&dir.join(format!("checkpoint_epoch{done:03}.fmck")), &ckpt)?;
        }
    }

    let final_ckpt = Checkpoint {
        config: cfg.clone(),
        params,
        opt,
        epoch: t.epochs as u64,
        metrics,
    };
    if let Some(dir) = ckpt_dir {
        save_checkpoint(&dir.join("checkpoint_final.fmck"), &final_ckpt)?;
    }
    Ok(final_ckpt)
}
