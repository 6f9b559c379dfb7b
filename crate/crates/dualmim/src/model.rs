//! The dual-tower masked-autoencoding model: one windowed-transformer
//! encoder per modality (RGB and surface height), learned mask tokens,
//! channel-wise feature fusion, and one linear reconstruction decoder per
//! modality reading the fused features. Pooled per-tower embeddings feed
//! the alignment loss.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::nn::encoder::{
    init_encoder_params, patchify, trunc_normal_tensor, unpatchify, Encoder, EncoderConfig,
};
use crate::nn::graph::{Graph, NodeId, ParamBinding};
use crate::nn::params::ParamSet;
use crate::nn::tensor::{Scalar, Tensor};
use crate::nn::NnError;

pub const RGB_CHANNELS: usize = 3;
pub const DSM_CHANNELS: usize = 1;

/// Parameter name prefixes; fixed so checkpoints stay stable.
pub const RGB_ENC: &str = "rgb_enc";
pub const DSM_ENC: &str = "dsm_enc";
pub const RGB_DEC: &str = "rgb_dec";
pub const DSM_DEC: &str = "dsm_dec";

// ── Patch masks ────────────────────────────────────────────────────────────

/// Boolean mask over the patch grid, true = masked. Masked cells always
/// form whole `unit`-sided blocks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchMask {
    grid: Vec<bool>,
    side: usize,
    unit: usize,
}

impl PatchMask {
    /// Wraps an existing grid, checking the block structure.
    pub fn from_grid(grid: Vec<bool>, side: usize, unit: usize) -> Result<Self, NnError> {
        if grid.len() != side * side {
            return Err(NnError::Shape(format!(
                "mask grid has {} cells for side {side}",
                grid.len()
            )));
        }
        if unit == 0 || side % unit != 0 {
            return Err(NnError::Config(format!(
                "grid side {side} not divisible by mask unit {unit}"
            )));
        }
        let m = Self { grid, side, unit };
        for b in 0..m.blocks() {
            let cells = m.block_cells(b);
            let first = m.grid[cells[0]];
            if cells.iter().any(|&c| m.grid[c] != first) {
                return Err(NnError::Config(format!(
                    "mask block {b} is not uniform for unit {unit}"
                )));
            }
        }
        Ok(m)
    }

    /// Uniform mask (all true or all false).
    pub fn full(side: usize, unit: usize, masked: bool) -> Result<Self, NnError> {
        Self::from_grid(vec![masked; side * side], side, unit)
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn unit(&self) -> usize {
        self.unit
    }

    /// Row-major grid, true = masked.
    pub fn as_slice(&self) -> &[bool] {
        &self.grid
    }

    pub fn masked_count(&self) -> usize {
        self.grid.iter().filter(|&&m| m).count()
    }

    fn blocks_per_side(&self) -> usize {
        self.side / self.unit
    }

    fn blocks(&self) -> usize {
        let b = self.blocks_per_side();
        b * b
    }

    fn block_cells(&self, block: usize) -> Vec<usize> {
        let bs = self.blocks_per_side();
        let (by, bx) = (block / bs, block % bs);
        let mut cells = Vec::with_capacity(self.unit * self.unit);
        for dy in 0..self.unit {
            for dx in 0..self.unit {
                cells.push((by * self.unit + dy) * self.side + bx * self.unit + dx);
            }
        }
        cells
    }
}

/// Samples a random mask. The masked patch count is the closest multiple
/// of unit² to round(ratio · side²), ties rounding toward the denser mask;
/// with unit 1 the count is exactly round(ratio · side²). Blocks are drawn
/// uniformly without replacement; deterministic given the seed.
pub fn sample_mask(
    grid_side: usize,
    ratio: f64,
    mask_unit: usize,
    seed: u64,
) -> Result<PatchMask, NnError> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(NnError::Config(format!("mask ratio {ratio} outside [0, 1]")));
    }
    if grid_side == 0 || mask_unit == 0 || grid_side % mask_unit != 0 {
        return Err(NnError::Config(format!(
            "grid side {grid_side} not divisible by mask unit {mask_unit}"
        )));
    }
    let cells = grid_side * grid_side;
    let per_block = mask_unit * mask_unit;
    let n_blocks = cells / per_block;
    let target = (ratio * cells as f64).round();
    let take = ((target / per_block as f64).round() as usize).min(n_blocks);

    // Partial Fisher-Yates: the first `take` entries are a uniform sample
    // without replacement.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n_blocks).collect();
    for i in 0..take {
        use rand::Rng;
        let j = rng.gen_range(i..n_blocks);
        order.swap(i, j);
    }

    let mut mask = PatchMask {
        grid: vec![false; cells],
        side: grid_side,
        unit: mask_unit,
    };
    for &b in &order[..take] {
        for c in mask.block_cells(b) {
            mask.grid[c] = true;
        }
    }
    Ok(mask)
}

// ── Pooled embeddings ──────────────────────────────────────────────────────

/// L2-normalized mean of the token features, plus whether the mean was the
/// zero vector (left as zero rather than divided by zero).
#[derive(Debug, Clone, PartialEq)]
pub struct PooledEmbedding {
    pub vector: Vec<f64>,
    pub is_zero: bool,
}

/// Mean over token rows followed by L2 normalization. Token order does not
/// matter. Rejects non-finite features.
pub fn pool_embedding<T: Scalar>(features: &Tensor<T>) -> Result<PooledEmbedding, NnError> {
    let (n, c) = features.dims2()?;
    if n == 0 {
        return Err(NnError::Shape("pool_embedding: zero token rows".into()));
    }
    if !features.all_finite() {
        return Err(NnError::NonFinite("pool_embedding: non-finite feature".into()));
    }
    let data = features.data();
    let mut mean = vec![0.0f64; c];
    for row in 0..n {
        for j in 0..c {
            mean[j] += data[row * c + j].to_f64();
        }
    }
    for v in mean.iter_mut() {
        *v /= n as f64;
    }
    let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        for v in mean.iter_mut() {
            *v /= norm;
        }
        Ok(PooledEmbedding {
            vector: mean,
            is_zero: false,
        })
    } else {
        Ok(PooledEmbedding {
            vector: mean,
            is_zero: true,
        })
    }
}

/// Graph form of the pooled embedding for a batch: [B·N, C] → [B, C],
/// rows unit (or zero) after normalization.
pub fn pool_embeddings_graph<T: Scalar>(
    g: &mut Graph<T>,
    features: NodeId,
    tokens_per_sample: usize,
) -> Result<NodeId, NnError> {
    let pooled = g.mean_pool_groups(features, tokens_per_sample)?;
    g.l2_normalize_rows(pooled)
}

// ── The model ──────────────────────────────────────────────────────────────

/// Per-token concatenation of the two towers' features, RGB channels
/// first. Errors when token counts disagree.
pub fn fuse_features<T: Scalar>(
    g: &mut Graph<T>,
    f_rgb: NodeId,
    f_dsm: NodeId,
) -> Result<NodeId, NnError> {
    g.concat_cols(f_rgb, f_dsm)
}

/// Both towers plus fusion and decoder shapes. Parameters live in a
/// [`ParamSet`] produced by [`DualMimModel::init_params`].
#[derive(Debug, Clone)]
pub struct DualMimModel {
    pub rgb: Encoder,
    pub dsm: Encoder,
}

/// Token-level outputs of one forward pass. Reconstruction rows hold patch
/// pixels (channel-innermost); feature rows are per-tower, pre-fusion.
#[derive(Debug, Clone, Copy)]
pub struct ModelOutput {
    pub recon_rgb: NodeId,
    pub recon_dsm: NodeId,
    pub feat_rgb: NodeId,
    pub feat_dsm: NodeId,
}

impl DualMimModel {
    /// The towers must agree on token grid so fusion is per-token; channel
    /// counts are fixed by the modalities.
    pub fn new(rgb_cfg: EncoderConfig, dsm_cfg: EncoderConfig) -> Result<Self, NnError> {
        if rgb_cfg.in_channels != RGB_CHANNELS {
            return Err(NnError::Config(format!(
                "rgb tower must take {RGB_CHANNELS} channels, got {}",
                rgb_cfg.in_channels
            )));
        }
        if dsm_cfg.in_channels != DSM_CHANNELS {
            return Err(NnError::Config(format!(
                "dsm tower must take {DSM_CHANNELS} channel, got {}",
                dsm_cfg.in_channels
            )));
        }
        if rgb_cfg.grid_side() != dsm_cfg.grid_side() {
            return Err(NnError::Config(format!(
                "token grids disagree: rgb {} vs dsm {}",
                rgb_cfg.grid_side(),
                dsm_cfg.grid_side()
            )));
        }
        Ok(Self {
            rgb: Encoder::new(rgb_cfg, RGB_ENC)?,
            dsm: Encoder::new(dsm_cfg, DSM_ENC)?,
        })
    }

    pub fn fused_dim(&self) -> usize {
        self.rgb.cfg.embed_dim + self.dsm.cfg.embed_dim
    }

    pub fn grid_side(&self) -> usize {
        self.rgb.cfg.grid_side()
    }

    pub fn tokens(&self) -> usize {
        self.rgb.cfg.tokens()
    }

    /// Encoder weights, mask tokens, and decoders. Projections and mask
    /// tokens draw truncated-normal (std 0.02); biases start at zero.
    pub fn init_params<T: Scalar>(&self, seed: u64) -> Result<ParamSet<T>, NnError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        init_encoder_params(&self.rgb.cfg, RGB_ENC, &mut rng, &mut ps)?;
        ps.insert(
            &format!("{RGB_ENC}.mask_token"),
            trunc_normal_tensor(&mut rng, &[self.rgb.cfg.embed_dim]),
        )?;
        init_encoder_params(&self.dsm.cfg, DSM_ENC, &mut rng, &mut ps)?;
        ps.insert(
            &format!("{DSM_ENC}.mask_token"),
            trunc_normal_tensor(&mut rng, &[self.dsm.cfg.embed_dim]),
        )?;
        let fused = self.fused_dim();
        for (prefix, out) in [
            (RGB_DEC, self.rgb.cfg.patch_dim()),
            (DSM_DEC, self.dsm.cfg.patch_dim()),
        ] {
            ps.insert(
                &format!("{prefix}.weight"),
                trunc_normal_tensor(&mut rng, &[fused, out]),
            )?;
            ps.insert(&format!("{prefix}.bias"), Tensor::zeros(&[out]))?;
        }
        Ok(ps)
    }

    /// Core forward over already-patchified token nodes ([B·N, patch_dim]
    /// each). Flat masks are per-sample grids laid end to end. Passing the
    /// same mask slice for both modalities gives the shared-mask mode.
    pub fn forward_tokens<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        binding: &ParamBinding,
        rgb_tokens: NodeId,
        dsm_tokens: NodeId,
        batch: usize,
        mask_rgb: Arc<Vec<bool>>,
        mask_dsm: Arc<Vec<bool>>,
    ) -> Result<ModelOutput, NnError> {
        let rgb_token_node = binding.id(&format!("{RGB_ENC}.mask_token"))?;
        let dsm_token_node = binding.id(&format!("{DSM_ENC}.mask_token"))?;
        let feat_rgb = self.rgb.forward(
            g,
            binding,
            rgb_tokens,
            batch,
            Some((mask_rgb, rgb_token_node)),
        )?;
        let feat_dsm = self.dsm.forward(
            g,
            binding,
            dsm_tokens,
            batch,
            Some((mask_dsm, dsm_token_node)),
        )?;
        let fused = fuse_features(g, feat_rgb, feat_dsm)?;
        let decode = |g: &mut Graph<T>, prefix: &str| -> Result<NodeId, NnError> {
            let w = binding.id(&format!("{prefix}.weight"))?;
            let b = binding.id(&format!("{prefix}.bias"))?;
            let r = g.matmul(fused, w)?;
            g.add_row(r, b)
        };
        Ok(ModelOutput {
            recon_rgb: decode(g, RGB_DEC)?,
            recon_dsm: decode(g, DSM_DEC)?,
            feat_rgb,
            feat_dsm,
        })
    }

    /// Single-pair forward from full-resolution images (already
    /// normalized). RGB is H×W×3 row-major, DSM H×W.
    pub fn forward_images<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        binding: &ParamBinding,
        rgb: &[f32],
        dsm: &[f32],
        mask_rgb: &PatchMask,
        mask_dsm: &PatchMask,
    ) -> Result<ModelOutput, NnError> {
        for (mask, cfg, name) in [
            (mask_rgb, &self.rgb.cfg, "rgb"),
            (mask_dsm, &self.dsm.cfg, "dsm"),
        ] {
            if mask.side() != cfg.grid_side() {
                return Err(NnError::Shape(format!(
                    "{name} mask side {} vs token grid {}",
                    mask.side(),
                    cfg.grid_side()
                )));
            }
        }
        let rt = g.constant(patchify::<T>(
            rgb,
            self.rgb.cfg.image_size,
            RGB_CHANNELS,
            self.rgb.cfg.patch_size,
        )?);
        let dt = g.constant(patchify::<T>(
            dsm,
            self.dsm.cfg.image_size,
            DSM_CHANNELS,
            self.dsm.cfg.patch_size,
        )?);
        self.forward_tokens(
            g,
            binding,
            rt,
            dt,
            1,
            Arc::new(mask_rgb.as_slice().to_vec()),
            Arc::new(mask_dsm.as_slice().to_vec()),
        )
    }

    /// Reassembles one sample's reconstruction rows into full-resolution
    /// images: (H×W×3 rgb, H×W dsm).
    pub fn reconstruction_images(
        &self,
        g: &Graph<f32>,
        out: &ModelOutput,
        sample: usize,
    ) -> Result<(Vec<f32>, Vec<f32>), NnError> {
        let n = self.tokens();
        let mut images = Vec::with_capacity(2);
        for (node, cfg, channels) in [
            (out.recon_rgb, &self.rgb.cfg, RGB_CHANNELS),
            (out.recon_dsm, &self.dsm.cfg, DSM_CHANNELS),
        ] {
            let t = g.value(node);
            let (rows, width) = t.dims2()?;
            if (sample + 1) * n > rows {
                return Err(NnError::Shape(format!(
                    "sample {sample} out of range for {rows} token rows"
                )));
            }
            let slice = &t.data()[sample * n * width..(sample + 1) * n * width];
            images.push(unpatchify(slice, cfg.image_size, channels, cfg.patch_size)?);
        }
        let dsm = images.pop().expect("two images pushed");
        let rgb = images.pop().expect("two images pushed");
        Ok((rgb, dsm))
    }
}
