//! Patch-token encoder: linear patch embedding followed by pre-norm
//! transformer blocks with windowed multi-head self-attention, a learned
//! relative position bias per window, and a cyclic shift on every second
//! block.

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, NodeId, ParamBinding};
use super::params::ParamSet;
use super::tensor::{Scalar, Tensor};
use super::NnError;

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub window: usize,
    pub mlp_ratio: f64,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        if self.in_channels == 0 {
            return Err(NnError::Config("in_channels must be >= 1".into()));
        }
        if self.patch_size == 0 || self.image_size == 0 {
            return Err(NnError::Config("image_size and patch_size must be >= 1".into()));
        }
        if self.image_size % self.patch_size != 0 {
            return Err(NnError::Config(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        let grid = self.image_size / self.patch_size;
        if self.window == 0 || grid % self.window != 0 {
            return Err(NnError::Config(format!(
                "token grid {grid} not divisible by window {}",
                self.window
            )));
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(NnError::Config(format!(
                "embed_dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        if !(self.mlp_ratio > 0.0) {
            return Err(NnError::Config(format!(
                "mlp_ratio {} must be > 0",
                self.mlp_ratio
            )));
        }
        Ok(())
    }

    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn tokens(&self) -> usize {
        let g = self.grid_side();
        g * g
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.in_channels
    }

    pub fn mlp_hidden(&self) -> usize {
        ((self.embed_dim as f64 * self.mlp_ratio).round() as usize).max(1)
    }

    /// Tokens per attention window.
    pub fn win_tokens(&self) -> usize {
        self.window * self.window
    }

    /// Cyclic shift for a block: window/2 on odd blocks when depth > 1.
    pub fn shift_for_block(&self, block: usize) -> usize {
        if self.depth > 1 && block % 2 == 1 {
            self.window / 2
        } else {
            0
        }
    }
}

// ── Initialization ─────────────────────────────────────────────────────────

/// One draw from N(0, std²) truncated to ±2 std.
pub fn trunc_normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    use rand::Rng;
    loop {
        let u1: f64 = 1.0 - rng.gen::<f64>(); // (0, 1]
        let u2: f64 = rng.gen();
        let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

pub(crate) fn trunc_normal_tensor<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data: Vec<T> = (0..n)
        .map(|_| T::from_f64(trunc_normal(rng, INIT_STD)))
        .collect();
    Tensor::from_vec(shape, data).expect("shape/data agree by construction")
}

/// Inserts all parameters of one encoder under `prefix`. Projections are
/// truncated-normal (std 0.02), biases and norm offsets zero, norm scales
/// one.
pub fn init_encoder_params<T: Scalar>(
    cfg: &EncoderConfig,
    prefix: &str,
    rng: &mut ChaCha8Rng,
    ps: &mut ParamSet<T>,
) -> Result<(), NnError> {
    cfg.validate()?;
    let d = cfg.embed_dim;
    let hidden = cfg.mlp_hidden();
    let rel = (2 * cfg.window - 1) * (2 * cfg.window - 1);

    ps.insert(
        &format!("{prefix}.patch_embed.weight"),
        trunc_normal_tensor(rng, &[cfg.patch_dim(), d]),
    )?;
    ps.insert(&format!("{prefix}.patch_embed.bias"), Tensor::zeros(&[d]))?;

    for b in 0..cfg.depth {
        let p = format!("{prefix}.block{b}");
        ps.insert(&format!("{p}.ln1.gamma"), ones(&[d]))?;
        ps.insert(&format!("{p}.ln1.beta"), Tensor::zeros(&[d]))?;
        for w in ["wq", "wk", "wv"] {
            ps.insert(
                &format!("{p}.attn.{w}.weight"),
                trunc_normal_tensor(rng, &[d, d]),
            )?;
            // No key bias: softmax is invariant to a per-query constant
            // shift of the scores, so a key bias is a dead parameter.
            if w != "wk" {
                ps.insert(&format!("{p}.attn.{w}.bias"), Tensor::zeros(&[d]))?;
            }
        }
        ps.insert(
            &format!("{p}.attn.rel_bias"),
            trunc_normal_tensor(rng, &[rel, cfg.heads]),
        )?;
        ps.insert(
            &format!("{p}.attn.proj.weight"),
            trunc_normal_tensor(rng, &[d, d]),
        )?;
        ps.insert(&format!("{p}.attn.proj.bias"), Tensor::zeros(&[d]))?;
        ps.insert(&format!("{p}.ln2.gamma"), ones(&[d]))?;
        ps.insert(&format!("{p}.ln2.beta"), Tensor::zeros(&[d]))?;
        ps.insert(
            &format!("{p}.mlp.fc1.weight"),
            trunc_normal_tensor(rng, &[d, hidden]),
        )?;
        ps.insert(&format!("{p}.mlp.fc1.bias"), Tensor::zeros(&[hidden]))?;
        ps.insert(
            &format!("{p}.mlp.fc2.weight"),
            trunc_normal_tensor(rng, &[hidden, d]),
        )?;
        ps.insert(&format!("{p}.mlp.fc2.bias"), Tensor::zeros(&[d]))?;
    }
    Ok(())
}

fn ones<T: Scalar>(shape: &[usize]) -> Tensor<T> {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, vec![T::ONE; n]).expect("shape/data agree")
}

// ── Index maps ─────────────────────────────────────────────────────────────

/// Row permutation that rolls the token grid by `shift` and groups rows
/// window-major, replicated over `batch` samples. Returns (forward, inverse):
/// `out[p] = in[forward[p]]` partitions, `x[inverse]` undoes it.
pub fn window_partition_indices(
    grid: usize,
    window: usize,
    shift: usize,
    batch: usize,
) -> (Vec<usize>, Vec<usize>) {
    let n = grid * grid;
    let wins = grid / window;
    let mut fwd = Vec::with_capacity(batch * n);
    for s in 0..batch {
        for wy in 0..wins {
            for wx in 0..wins {
                for iy in 0..window {
                    for ix in 0..window {
                        let y = (wy * window + iy + shift) % grid;
                        let x = (wx * window + ix + shift) % grid;
                        fwd.push(s * n + y * grid + x);
                    }
                }
            }
        }
    }
    let mut inv = vec![0usize; fwd.len()];
    for (slot, &src) in fwd.iter().enumerate() {
        inv[src] = slot;
    }
    (fwd, inv)
}

/// Flat indices into a [(2w−1)², heads] bias table producing a
/// [heads, win_tokens²] matrix of per-pair biases.
pub fn rel_bias_indices(window: usize, heads: usize) -> Vec<usize> {
    let wt = window * window;
    let span = 2 * window - 1;
    let mut idx = Vec::with_capacity(heads * wt * wt);
    for h in 0..heads {
        for i in 0..wt {
            let (iy, ix) = (i / window, i % window);
            for j in 0..wt {
                let (jy, jx) = (j / window, j % window);
                let rel = (iy + window - 1 - jy) * span + (ix + window - 1 - jx);
                idx.push(rel * heads + h);
            }
        }
    }
    idx
}

// ── Forward ────────────────────────────────────────────────────────────────

/// One encoder tower. Holds no parameters itself; they live in a
/// [`ParamSet`] under `prefix` and are bound into each graph.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub prefix: String,
}

impl Encoder {
    pub fn new(cfg: EncoderConfig, prefix: &str) -> Result<Self, NnError> {
        cfg.validate()?;
        Ok(Encoder {
            cfg,
            prefix: prefix.to_string(),
        })
    }

    /// Runs patch embedding and all blocks over a batch of patchified
    /// images (`tokens`: [batch·N, patch_dim]). `mask` flags token rows to
    /// replace with `mask_token` right after embedding; its length must be
    /// batch·N.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        binding: &ParamBinding,
        tokens: NodeId,
        batch: usize,
        mask: Option<(Arc<Vec<bool>>, NodeId)>,
    ) -> Result<NodeId, NnError> {
        let cfg = &self.cfg;
        let n = cfg.tokens();
        let (rows, width) = g.value(tokens).dims2()?;
        if rows != batch * n {
            return Err(NnError::Shape(format!(
                "encoder forward: {rows} token rows, expected batch {batch} x {n}"
            )));
        }
        if width != cfg.patch_dim() {
            return Err(NnError::Shape(format!(
                "encoder forward: token width {width}, expected {}",
                cfg.patch_dim()
            )));
        }

        let p = &self.prefix;
        let we = binding.id(&format!("{p}.patch_embed.weight"))?;
        let be = binding.id(&format!("{p}.patch_embed.bias"))?;
        let projected = g.matmul(tokens, we)?;
        let mut x = g.add_row(projected, be)?;

        if let Some((mask, token)) = mask {
            if mask.len() != batch * n {
                return Err(NnError::Shape(format!(
                    "encoder forward: mask len {}, expected {}",
                    mask.len(),
                    batch * n
                )));
            }
            x = g.row_blend(x, token, mask)?;
        }

        let eps = T::from_f64(LAYER_NORM_EPS);
        let bias_idx = Arc::new(rel_bias_indices(cfg.window, cfg.heads));
        for b in 0..cfg.depth {
            let bp = format!("{p}.block{b}");
            let shift = cfg.shift_for_block(b);
            let (fwd, inv) = window_partition_indices(cfg.grid_side(), cfg.window, shift, batch);
            let (fwd, inv) = (Arc::new(fwd), Arc::new(inv));

            // x + proj(attn(partition(LN(x))))
            let g1 = binding.id(&format!("{bp}.ln1.gamma"))?;
            let b1 = binding.id(&format!("{bp}.ln1.beta"))?;
            let h = g.layer_norm(x, g1, b1, eps)?;
            let hp = g.gather_rows(h, fwd)?;
            let mut qkv = Vec::with_capacity(3);
            for wn in ["wq", "wk", "wv"] {
                let w = binding.id(&format!("{bp}.attn.{wn}.weight"))?;
                let m = g.matmul(hp, w)?;
                if wn == "wk" {
                    qkv.push(m);
                } else {
                    let bb = binding.id(&format!("{bp}.attn.{wn}.bias"))?;
                    qkv.push(g.add_row(m, bb)?);
                }
            }
            let table = binding.id(&format!("{bp}.attn.rel_bias"))?;
            let wt = cfg.win_tokens();
            let bias = g.gather_elems(table, bias_idx.clone(), &[cfg.heads, wt * wt])?;
            let attn = g.window_attention(qkv[0], qkv[1], qkv[2], bias, cfg.heads, wt)?;
            let wo = binding.id(&format!("{bp}.attn.proj.weight"))?;
            let bo = binding.id(&format!("{bp}.attn.proj.bias"))?;
            let proj = g.matmul(attn, wo)?;
            let proj = g.add_row(proj, bo)?;
            let back = g.gather_rows(proj, inv)?;
            x = g.add(x, back)?;

            // x + fc2(gelu(fc1(LN(x))))
            let g2 = binding.id(&format!("{bp}.ln2.gamma"))?;
            let b2 = binding.id(&format!("{bp}.ln2.beta"))?;
            let h = g.layer_norm(x, g2, b2, eps)?;
            let w1 = binding.id(&format!("{bp}.mlp.fc1.weight"))?;
            let bb1 = binding.id(&format!("{bp}.mlp.fc1.bias"))?;
            let h = g.matmul(h, w1)?;
            let h = g.add_row(h, bb1)?;
            let h = g.gelu(h);
            let w2 = binding.id(&format!("{bp}.mlp.fc2.weight"))?;
            let bb2 = binding.id(&format!("{bp}.mlp.fc2.bias"))?;
            let h = g.matmul(h, w2)?;
            let h = g.add_row(h, bb2)?;
            x = g.add(x, h)?;
        }
        Ok(x)
    }
}

// ── Patchify ───────────────────────────────────────────────────────────────

/// Image (H×W×C row-major) → token matrix [N, patch²·C]. Tokens walk the
/// patch grid row-major; within a token, pixels walk the patch row-major
/// with channels innermost.
pub fn patchify<T: Scalar>(
    data: &[f32],
    size: usize,
    channels: usize,
    patch: usize,
) -> Result<Tensor<T>, NnError> {
    if size % patch != 0 {
        return Err(NnError::Config(format!(
            "image size {size} not divisible by patch {patch}"
        )));
    }
    if data.len() != size * size * channels {
        return Err(NnError::Shape(format!(
            "patchify: {} values for {size}x{size}x{channels}",
            data.len()
        )));
    }
    let g = size / patch;
    let pd = patch * patch * channels;
    let mut out = vec![T::ZERO; g * g * pd];
    for ty in 0..g {
        for tx in 0..g {
            let t = ty * g + tx;
            for py in 0..patch {
                for px in 0..patch {
                    let src = ((ty * patch + py) * size + tx * patch + px) * channels;
                    let dst = t * pd + (py * patch + px) * channels;
                    for c in 0..channels {
                        out[dst + c] = T::from_f64(data[src + c] as f64);
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[g * g, pd], out)
}

/// Inverse of [`patchify`] for f32 token matrices.
pub fn unpatchify(
    tokens: &[f32],
    size: usize,
    channels: usize,
    patch: usize,
) -> Result<Vec<f32>, NnError> {
    let g = size / patch;
    let pd = patch * patch * channels;
    if size % patch != 0 || tokens.len() != g * g * pd {
        return Err(NnError::Shape(format!(
            "unpatchify: {} values for {size}x{size}x{channels}, patch {patch}",
            tokens.len()
        )));
    }
    let mut out = vec![0.0f32; size * size * channels];
    for ty in 0..g {
        for tx in 0..g {
            let t = ty * g + tx;
            for py in 0..patch {
                for px in 0..patch {
                    let dst = ((ty * patch + py) * size + tx * patch + px) * channels;
                    let src = t * pd + (py * patch + px) * channels;
                    out[dst..dst + channels].copy_from_slice(&tokens[src..src + channels]);
                }
            }
        }
    }
    Ok(out)
}

// ── Dense reference ────────────────────────────────────────────────────────

/// Direct dense-attention implementation of one block (no windows, no
/// shift), used as an oracle: with window == grid side and no shift the
/// windowed path must match this.
///
/// Plain loops on purpose; shares nothing with the graph implementation
/// except parameter names.
pub fn dense_block_reference(
    cfg: &EncoderConfig,
    params: &ParamSet<f32>,
    prefix: &str,
    block: usize,
    tokens: &[f32],
) -> Result<Vec<f32>, NnError> {
    let n = cfg.tokens();
    let d = cfg.embed_dim;
    if tokens.len() != n * d {
        return Err(NnError::Shape(format!(
            "reference block: {} values for {n} tokens x {d}",
            tokens.len()
        )));
    }
    if cfg.window != cfg.grid_side() {
        return Err(NnError::Config(
            "reference block assumes window == grid side".into(),
        ));
    }
    let bp = format!("{prefix}.block{block}");
    let get = |name: &str| params.get(&format!("{bp}.{name}"));

    let ln = |x: &[f32], gamma: &[f32], beta: &[f32]| -> Vec<f32> {
        let mut out = vec![0.0f32; x.len()];
        for r in 0..n {
            let row = &x[r * d..(r + 1) * d];
            let mean: f64 = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
            let var: f64 =
                row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d as f64;
            let istd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for j in 0..d {
                out[r * d + j] =
                    (((row[j] as f64 - mean) * istd) as f32) * gamma[j] + beta[j];
            }
        }
        out
    };
    let linear = |x: &[f32], w: &[f32], b: &[f32], din: usize, dout: usize| -> Vec<f32> {
        let rows = x.len() / din;
        let mut out = vec![0.0f32; rows * dout];
        for r in 0..rows {
            for j in 0..dout {
                let mut acc = b[j];
                for l in 0..din {
                    acc += x[r * din + l] * w[l * dout + j];
                }
                out[r * dout + j] = acc;
            }
        }
        out
    };

    let h = ln(
        tokens,
        get("ln1.gamma")?.data(),
        get("ln1.beta")?.data(),
    );
    let no_bias = vec![0.0f32; d];
    let q = linear(&h, get("attn.wq.weight")?.data(), get("attn.wq.bias")?.data(), d, d);
    let k = linear(&h, get("attn.wk.weight")?.data(), &no_bias, d, d);
    let v = linear(&h, get("attn.wv.weight")?.data(), get("attn.wv.bias")?.data(), d, d);

    let heads = cfg.heads;
    let dh = d / heads;
    let scale = 1.0 / (dh as f32).sqrt();
    let table = get("attn.rel_bias")?.data();
    let w = cfg.window;
    let span = 2 * w - 1;
    let mut ctx = vec![0.0f32; n * d];
    for hd in 0..heads {
        for i in 0..n {
            // Window-local coordinates equal grid coordinates here.
            let (iy, ix) = (i / w, i % w);
            let mut scores = vec![0.0f32; n];
            for j in 0..n {
                let (jy, jx) = (j / w, j % w);
                let mut dot = 0.0f32;
                for l in 0..dh {
                    dot += q[i * d + hd * dh + l] * k[j * d + hd * dh + l];
                }
                let rel = (iy + w - 1 - jy) * span + (ix + w - 1 - jx);
                scores[j] = dot * scale + table[rel * heads + hd];
            }
            let mx = scores.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
            let mut sum = 0.0f32;
            for s in scores.iter_mut() {
                *s = (*s - mx).exp();
                sum += *s;
            }
            for j in 0..n {
                let p = scores[j] / sum;
                for l in 0..dh {
                    ctx[i * d + hd * dh + l] += p * v[j * d + hd * dh + l];
                }
            }
        }
    }
    let proj = linear(
        &ctx,
        get("attn.proj.weight")?.data(),
        get("attn.proj.bias")?.data(),
        d,
        d,
    );
    let mut x: Vec<f32> = tokens.iter().zip(&proj).map(|(&a, &b)| a + b).collect();

    let h = ln(&x, get("ln2.gamma")?.data(), get("ln2.beta")?.data());
    let hidden = cfg.mlp_hidden();
    let mut f1 = linear(
        &h,
        get("mlp.fc1.weight")?.data(),
        get("mlp.fc1.bias")?.data(),
        d,
        hidden,
    );
    for v in f1.iter_mut() {
        let xf = *v as f64;
        let u = 0.7978845608028654 * (xf + 0.044715 * xf * xf * xf);
        *v = (0.5 * xf * (1.0 + u.tanh())) as f32;
    }
    let f2 = linear(
        &f1,
        get("mlp.fc2.weight")?.data(),
        get("mlp.fc2.bias")?.data(),
        hidden,
        d,
    );
    for (o, &b) in x.iter_mut().zip(&f2) {
        *o += b;
    }
    Ok(x)
}
