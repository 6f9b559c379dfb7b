//! Training objectives: masked L1 reconstruction over both modalities, a
//! batch-contrastive alignment term between pooled embeddings, and their
//! weighted total.
//!
//! Each loss exists twice: a standalone f64 function (the reference, also
//! used for metric logging) and a graph builder used during training. Tests
//! pin the two against each other.

use std::sync::Arc;

use crate::nn::graph::{Graph, NodeId};
use crate::nn::tensor::Scalar;
use crate::nn::NnError;

/// Weighting and temperature for the combined objective.
#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    /// Weight of the alignment term; the reconstruction term gets 1 − alpha.
    pub alpha: f64,
    /// Similarity temperature. Lower values sharpen the softmax over pairs.
    pub tau: f64,
    /// Average the RGB-anchored and DSM-anchored directions instead of
    /// scoring only RGB anchors.
    pub symmetric_nce: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            tau: 0.07,
            symmetric_nce: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(NnError::Config(format!(
                "alpha {} outside [0, 1]",
                self.alpha
            )));
        }
        if !(self.tau > 0.0) {
            return Err(NnError::Config(format!("tau {} must be > 0", self.tau)));
        }
        Ok(())
    }
}

/// How the reconstruction denominator counts masked content. The numerator
/// is always the plain sum of absolute errors over masked values.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskCounting {
    /// A masked RGB pixel contributes 3 to N, a masked DSM pixel 1. Keeps
    /// the two modality terms commensurate per scalar.
    PixelChannels,
    /// Every masked pixel contributes 1 regardless of channel count.
    Pixels,
}

/// Full-resolution ground truth, reconstructions, and per-pixel masks for
/// one sample pair. RGB arrays are channel-innermost (r, g, b per pixel).
#[derive(Debug, Clone)]
pub struct MaskedBatch {
    pub x_rgb: Vec<f64>,
    pub r_rgb: Vec<f64>,
    pub x_dsm: Vec<f64>,
    pub r_dsm: Vec<f64>,
    pub mask_rgb: Vec<bool>,
    pub mask_dsm: Vec<bool>,
    pub counting: MaskCounting,
}

impl MaskedBatch {
    pub fn validate(&self) -> Result<(), NnError> {
        if self.x_rgb.len() != self.r_rgb.len() || self.x_rgb.len() != self.mask_rgb.len() * 3 {
            return Err(NnError::Shape(format!(
                "rgb lengths disagree: x {}, r {}, mask {} pixels",
                self.x_rgb.len(),
                self.r_rgb.len(),
                self.mask_rgb.len()
            )));
        }
        if self.x_dsm.len() != self.r_dsm.len() || self.x_dsm.len() != self.mask_dsm.len() {
            return Err(NnError::Shape(format!(
                "dsm lengths disagree: x {}, r {}, mask {} pixels",
                self.x_dsm.len(),
                self.r_dsm.len(),
                self.mask_dsm.len()
            )));
        }
        Ok(())
    }

    /// Denominator of the reconstruction loss under the configured counting.
    pub fn n_masked(&self) -> usize {
        let rgb = self.mask_rgb.iter().filter(|&&m| m).count();
        let dsm = self.mask_dsm.iter().filter(|&&m| m).count();
        match self.counting {
            MaskCounting::PixelChannels => rgb * 3 + dsm,
            MaskCounting::Pixels => rgb + dsm,
        }
    }
}

/// Mean absolute reconstruction error over already-extracted masked values.
/// RGB slices hold masked pixel-channels, DSM slices masked pixels; the
/// denominator is the total value count across both.
pub fn masked_l1(
    x_rgb: &[f64],
    r_rgb: &[f64],
    x_dsm: &[f64],
    r_dsm: &[f64],
) -> Result<f64, NnError> {
    if x_rgb.len() != r_rgb.len() || x_dsm.len() != r_dsm.len() {
        return Err(NnError::Shape(format!(
            "masked value lengths disagree: rgb {}/{}, dsm {}/{}",
            x_rgb.len(),
            r_rgb.len(),
            x_dsm.len(),
            r_dsm.len()
        )));
    }
    let n = x_rgb.len() + x_dsm.len();
    if n == 0 {
        return Err(NnError::Config(
            "reconstruction loss undefined with zero masked values".into(),
        ));
    }
    let sum: f64 = x_rgb
        .iter()
        .zip(r_rgb)
        .chain(x_dsm.iter().zip(r_dsm))
        .map(|(x, r)| (x - r).abs())
        .sum();
    Ok(sum / n as f64)
}

/// Masked L1 over full-resolution arrays; unmasked pixels contribute
/// nothing to either sum or denominator.
pub fn mim_loss(batch: &MaskedBatch) -> Result<f64, NnError> {
    batch.validate()?;
    let n = batch.n_masked();
    if n == 0 {
        return Err(NnError::Config(
            "reconstruction loss undefined with zero masked pixels".into(),
        ));
    }
    let mut sum = 0.0;
    for (p, &m) in batch.mask_rgb.iter().enumerate() {
        if m {
            for c in 0..3 {
                sum += (batch.x_rgb[p * 3 + c] - batch.r_rgb[p * 3 + c]).abs();
            }
        }
    }
    for (p, &m) in batch.mask_dsm.iter().enumerate() {
        if m {
            sum += (batch.x_dsm[p] - batch.r_dsm[p]).abs();
        }
    }
    Ok(sum / n as f64)
}

fn normalize_rows(z: &[f64], batch: usize, dim: usize) -> Vec<f64> {
    let mut out = z.to_vec();
    for r in 0..batch {
        let row = &mut out[r * dim..(r + 1) * dim];
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            for v in row.iter_mut() {
                *v /= norm;
            }
        }
    }
    out
}

/// One direction of the alignment loss: each anchor row of `a` scores
/// against every row of `b`, the matching index being the positive. Rows
/// must be unit or zero.
fn nce_direction(a: &[f64], b: &[f64], batch: usize, dim: usize, tau: f64) -> f64 {
    let mut total = 0.0;
    let mut scores = vec![0.0f64; batch];
    for i in 0..batch {
        for (k, s) in scores.iter_mut().enumerate() {
            let dot: f64 = (0..dim).map(|j| a[i * dim + j] * b[k * dim + j]).sum();
            *s = dot / tau;
        }
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
        total += lse - scores[i];
    }
    total / batch as f64
}

/// Batch-contrastive alignment between paired embeddings. Rows are
/// L2-normalized internally (unit and zero rows pass through unchanged), so
/// scores are cosine similarities over temperature. The positive pair sits
/// in the denominator alongside the B−1 negatives, which keeps the loss
/// non-negative.
pub fn infonce_loss(
    z_rgb: &[f64],
    z_dsm: &[f64],
    batch: usize,
    dim: usize,
    config: &LossConfig,
) -> Result<f64, NnError> {
    config.validate()?;
    if batch < 2 {
        return Err(NnError::Config(format!(
            "contrastive loss needs at least 2 pairs, got {batch}"
        )));
    }
    if z_rgb.len() != batch * dim || z_dsm.len() != batch * dim {
        return Err(NnError::Shape(format!(
            "embedding lengths {} and {} do not match {batch}x{dim}",
            z_rgb.len(),
            z_dsm.len()
        )));
    }
    let zr = normalize_rows(z_rgb, batch, dim);
    let zd = normalize_rows(z_dsm, batch, dim);
    let fwd = nce_direction(&zr, &zd, batch, dim, config.tau);
    if config.symmetric_nce {
        let bwd = nce_direction(&zd, &zr, batch, dim, config.tau);
        Ok(0.5 * (fwd + bwd))
    } else {
        Ok(fwd)
    }
}

/// Weighted total: (1 − alpha) · reconstruction + alpha · alignment.
pub fn total_loss(mim: f64, nce: f64, config: &LossConfig) -> Result<f64, NnError> {
    config.validate()?;
    Ok((1.0 - config.alpha) * mim + config.alpha * nce)
}

/// Graph form of the masked L1. Token rows of each (x, r) pair hold patch
/// pixel values; `masked_*` lists the masked token indices. RGB rows carry
/// 3 channels per pixel, DSM rows 1, which fixes the denominator under
/// either counting.
pub fn mim_loss_graph<T: Scalar>(
    g: &mut Graph<T>,
    x_rgb: NodeId,
    r_rgb: NodeId,
    masked_rgb: Arc<Vec<usize>>,
    x_dsm: NodeId,
    r_dsm: NodeId,
    masked_dsm: Arc<Vec<usize>>,
    counting: MaskCounting,
) -> Result<NodeId, NnError> {
    let (_, w_rgb) = g.value(x_rgb).dims2()?;
    let (_, w_dsm) = g.value(x_dsm).dims2()?;
    if w_rgb % 3 != 0 {
        return Err(NnError::Shape(format!(
            "rgb token width {w_rgb} is not 3 channels per pixel"
        )));
    }
    let n = match counting {
        MaskCounting::PixelChannels => masked_rgb.len() * w_rgb + masked_dsm.len() * w_dsm,
        MaskCounting::Pixels => masked_rgb.len() * (w_rgb / 3) + masked_dsm.len() * w_dsm,
    };
    if n == 0 {
        return Err(NnError::Config(
            "reconstruction loss undefined with zero masked tokens".into(),
        ));
    }
    let mut parts: Vec<NodeId> = Vec::new();
    for (x, r, masked) in [
        (x_rgb, r_rgb, &masked_rgb),
        (x_dsm, r_dsm, &masked_dsm),
    ] {
        if masked.is_empty() {
            continue;
        }
        let xm = g.gather_rows(x, Arc::clone(masked))?;
        let rm = g.gather_rows(r, Arc::clone(masked))?;
        let d = g.sub(xm, rm)?;
        let a = g.abs(d);
        parts.push(g.sum(a));
    }
    let total = match parts.len() {
        1 => parts[0],
        _ => g.add(parts[0], parts[1])?,
    };
    Ok(g.scale(total, T::from_f64(1.0 / n as f64)))
}

/// Graph form of the alignment loss over [B, D] embedding nodes. Rows are
/// normalized in-graph, so gradients flow through the normalization.
pub fn infonce_loss_graph<T: Scalar>(
    g: &mut Graph<T>,
    z_rgb: NodeId,
    z_dsm: NodeId,
    config: &LossConfig,
) -> Result<NodeId, NnError> {
    config.validate()?;
    let (batch, _) = g.value(z_rgb).dims2()?;
    if batch < 2 {
        return Err(NnError::Config(format!(
            "contrastive loss needs at least 2 pairs, got {batch}"
        )));
    }
    let zr = g.l2_normalize_rows(z_rgb)?;
    let zd = g.l2_normalize_rows(z_dsm)?;
    let targets: Arc<Vec<usize>> = Arc::new((0..batch).collect());
    let inv_tau = T::from_f64(1.0 / config.tau);

    let s_fwd = g.matmul_nt(zr, zd)?;
    let s_fwd = g.scale(s_fwd, inv_tau);
    let fwd = g.cross_entropy_rows(s_fwd, Arc::clone(&targets))?;
    if !config.symmetric_nce {
        return Ok(fwd);
    }
    let s_bwd = g.matmul_nt(zd, zr)?;
    let s_bwd = g.scale(s_bwd, inv_tau);
    let bwd = g.cross_entropy_rows(s_bwd, targets)?;
    let both = g.add(fwd, bwd)?;
    Ok(g.scale(both, T::from_f64(0.5)))
}

/// Graph form of the weighted total over two scalar loss nodes.
pub fn total_loss_graph<T: Scalar>(
    g: &mut Graph<T>,
    mim: NodeId,
    nce: NodeId,
    config: &LossConfig,
) -> Result<NodeId, NnError> {
    config.validate()?;
    let m = g.scale(mim, T::from_f64(1.0 - config.alpha));
    let n = g.scale(nce, T::from_f64(config.alpha));
    g.add(m, n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::grad_check;
    use crate::nn::tensor::Tensor;
    use crate::nn::params::ParamSet;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const LN_2: f64 = std::f64::consts::LN_2;

    fn cfg(alpha: f64, tau: f64, symmetric: bool) -> LossConfig {
        LossConfig {
            alpha,
            tau,
            symmetric_nce: symmetric,
        }
    }

    #[test]
    fn identity_reconstruction_is_zero() {
        let v = masked_l1(&[0.3, -1.2], &[0.3, -1.2], &[2.0], &[2.0]).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn hand_example_both_modalities() {
        // (|1-0| + |2-4| + |3-3.5|) / 3
        let v = masked_l1(&[1.0, 2.0], &[0.0, 4.0], &[3.0], &[3.5]).unwrap();
        assert!((v - 7.0 / 6.0).abs() < 1e-12, "{v}");
    }

    #[test]
    fn hand_example_rgb_only() {
        let v = masked_l1(&[2.0], &[0.0], &[], &[]).unwrap();
        assert_eq!(v, 2.0);
    }

    #[test]
    fn no_masked_values_is_an_error() {
        assert!(masked_l1(&[], &[], &[], &[]).is_err());
    }

    #[test]
    fn length_mismatch_is_an_error() {
        assert!(masked_l1(&[1.0], &[1.0, 2.0], &[], &[]).is_err());
    }

    fn small_batch(counting: MaskCounting) -> MaskedBatch {
        // 2 RGB pixels (first masked), 2 DSM pixels (second masked).
        MaskedBatch {
            x_rgb: vec![1.0, 2.0, 3.0, 9.0, 9.0, 9.0],
            r_rgb: vec![0.0, 4.0, 2.7, 0.0, 0.0, 0.0],
            x_dsm: vec![7.0, 3.0],
            r_dsm: vec![0.0, 3.5],
            mask_rgb: vec![true, false],
            mask_dsm: vec![false, true],
            counting,
        }
    }

    #[test]
    fn full_array_masking_ignores_unmasked_pixels() {
        // Masked values: rgb |1-0| + |2-4| + |3-2.7| = 3.3, dsm |3-3.5| = 0.5.
        let v = mim_loss(&small_batch(MaskCounting::PixelChannels)).unwrap();
        assert!((v - 3.8 / 4.0).abs() < 1e-12, "{v}");
    }

    #[test]
    fn pixel_counting_changes_only_the_denominator() {
        let v = mim_loss(&small_batch(MaskCounting::Pixels)).unwrap();
        assert!((v - 3.8 / 2.0).abs() < 1e-12, "{v}");
    }

    #[test]
    fn all_false_masks_error() {
        let mut b = small_batch(MaskCounting::PixelChannels);
        b.mask_rgb = vec![false, false];
        b.mask_dsm = vec![false, false];
        assert!(mim_loss(&b).is_err());
    }

    #[test]
    fn identical_embeddings_give_log_batch() {
        for batch in [2usize, 4, 8] {
            let dim = 3;
            let mut z = Vec::new();
            for _ in 0..batch {
                z.extend_from_slice(&[0.6, 0.8, 0.0]);
            }
            let v = infonce_loss(&z, &z, batch, dim, &cfg(0.05, 1.0, true)).unwrap();
            assert!(
                (v - (batch as f64).ln()).abs() < 1e-12,
                "batch {batch}: {v}"
            );
        }
    }

    #[test]
    fn orthogonal_pairs_hand_values() {
        // Pairs (e1, e1) and (e2, e2), e1 ⊥ e2.
        let zr = [1.0, 0.0, 0.0, 1.0];
        let zd = zr;
        let v = infonce_loss(&zr, &zd, 2, 2, &cfg(0.05, 1.0, true)).unwrap();
        // −log(e / (e + 1)) = log(1 + e⁻¹)
        assert!((v - 0.313_261_687_518_222_86).abs() < 1e-12, "{v}");

        let v = infonce_loss(&zr, &zd, 2, 2, &cfg(0.05, 0.5, true)).unwrap();
        // −log(e² / (e² + 1)) = log(1 + e⁻²): sharper temperature rewards
        // the correct pairing.
        assert!((v - 0.126_928_011_042_972_6).abs() < 1e-12, "{v}");
    }

    #[test]
    fn single_pair_is_an_error() {
        assert!(infonce_loss(&[1.0, 0.0], &[1.0, 0.0], 1, 2, &cfg(0.05, 1.0, true)).is_err());
    }

    #[test]
    fn non_unit_rows_are_normalized() {
        let zr = [5.0, 0.0, 0.0, 0.25];
        let zd = [1.0, 0.0, 0.0, 1.0];
        let a = infonce_loss(&zr, &zd, 2, 2, &cfg(0.05, 1.0, true)).unwrap();
        let b = infonce_loss(&[1.0, 0.0, 0.0, 1.0], &zd, 2, 2, &cfg(0.05, 1.0, true)).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn symmetric_is_the_mean_of_both_directions() {
        let s = 1.0 / 2.0f64.sqrt();
        let zr = [1.0, 0.0, 0.0, 1.0];
        let zd = [1.0, 0.0, s, s];
        let c_sym = cfg(0.05, 0.25, true);
        let c_one = cfg(0.05, 0.25, false);
        let sym = infonce_loss(&zr, &zd, 2, 2, &c_sym).unwrap();
        let fwd = infonce_loss(&zr, &zd, 2, 2, &c_one).unwrap();
        let bwd = infonce_loss(&zd, &zr, 2, 2, &c_one).unwrap();
        assert!((sym - 0.5 * (fwd + bwd)).abs() < 1e-12);
        // The construction is genuinely asymmetric, otherwise this test
        // would not exercise the averaging.
        assert!((fwd - bwd).abs() > 1e-6);
    }

    #[test]
    fn alignment_loss_is_rotation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (batch, dim) = (4, 6);
        let zr: Vec<f64> = (0..batch * dim).map(|_| rng.gen::<f64>() - 0.5).collect();
        let zd: Vec<f64> = (0..batch * dim).map(|_| rng.gen::<f64>() - 0.5).collect();
        let c = cfg(0.05, 0.07, true);
        let base = infonce_loss(&zr, &zd, batch, dim, &c).unwrap();

        // Random orthogonal map as a product of Givens rotations, applied
        // to every embedding of both modalities.
        let rotate = |z: &[f64], angles: &[(usize, usize, f64)]| -> Vec<f64> {
            let mut out = z.to_vec();
            for r in 0..batch {
                for &(i, j, th) in angles {
                    let (a, b) = (out[r * dim + i], out[r * dim + j]);
                    out[r * dim + i] = th.cos() * a - th.sin() * b;
                    out[r * dim + j] = th.sin() * a + th.cos() * b;
                }
            }
            out
        };
        for _ in 0..5 {
            let angles: Vec<(usize, usize, f64)> = (0..10)
                .map(|_| {
                    let i = rng.gen_range(0..dim);
                    let mut j = rng.gen_range(0..dim - 1);
                    if j >= i {
                        j += 1;
                    }
                    (i, j, rng.gen::<f64>() * std::f64::consts::TAU)
                })
                .collect();
            let v = infonce_loss(
                &rotate(&zr, &angles),
                &rotate(&zd, &angles),
                batch,
                dim,
                &c,
            )
            .unwrap();
            assert!((v - base).abs() < 1e-9, "{v} vs {base}");
        }
    }

    #[test]
    fn alignment_loss_is_non_negative() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let (batch, dim) = (3, 4);
            let zr: Vec<f64> = (0..batch * dim).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
            let zd: Vec<f64> = (0..batch * dim).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
            let v = infonce_loss(&zr, &zd, batch, dim, &cfg(0.05, 0.07, true)).unwrap();
            assert!(v >= 0.0, "{v}");
        }
    }

    #[test]
    fn total_hand_values() {
        let c = cfg(0.05, 0.07, true);
        assert!((total_loss(1.0, 0.0, &c).unwrap() - 0.95).abs() < 1e-12);
        let v = total_loss(7.0 / 6.0, LN_2, &c).unwrap();
        assert!((v - 1.142_990_692_361_330_7).abs() < 1e-12, "{v}");
    }

    #[test]
    fn alpha_zero_total_equals_mim_exactly() {
        let c = cfg(0.0, 0.07, true);
        let mim = 0.123_456_789_f64;
        assert_eq!(total_loss(mim, 55.5, &c).unwrap(), mim);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(cfg(-0.1, 0.07, true).validate().is_err());
        assert!(cfg(1.1, 0.07, true).validate().is_err());
        assert!(cfg(0.05, 0.0, true).validate().is_err());
        assert!(cfg(0.05, -1.0, true).validate().is_err());
        assert!(cfg(0.05, f64::NAN, true).validate().is_err());
    }

    #[test]
    fn graph_mim_matches_scalar_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        // 6 RGB tokens of width 12 (4 pixels x 3 channels), 6 DSM tokens of
        // width 4.
        let xr: Vec<f64> = (0..72).map(|_| rng.gen::<f64>()).collect();
        let rr: Vec<f64> = (0..72).map(|_| rng.gen::<f64>()).collect();
        let xd: Vec<f64> = (0..24).map(|_| rng.gen::<f64>()).collect();
        let rd: Vec<f64> = (0..24).map(|_| rng.gen::<f64>()).collect();
        let m_rgb = vec![0usize, 3, 4];
        let m_dsm = vec![1usize, 5];

        let mut g: Graph<f64> = Graph::new();
        let xrn = g.constant(Tensor::from_vec(&[6, 12], xr.clone()).unwrap());
        let rrn = g.constant(Tensor::from_vec(&[6, 12], rr.clone()).unwrap());
        let xdn = g.constant(Tensor::from_vec(&[6, 4], xd.clone()).unwrap());
        let rdn = g.constant(Tensor::from_vec(&[6, 4], rd.clone()).unwrap());
        let loss = mim_loss_graph(
            &mut g,
            xrn,
            rrn,
            Arc::new(m_rgb.clone()),
            xdn,
            rdn,
            Arc::new(m_dsm.clone()),
            MaskCounting::PixelChannels,
        )
        .unwrap();

        let gather = |v: &[f64], rows: &[usize], w: usize| -> Vec<f64> {
            rows.iter()
                .flat_map(|&r| v[r * w..(r + 1) * w].to_vec())
                .collect()
        };
        let reference = masked_l1(
            &gather(&xr, &m_rgb, 12),
            &gather(&rr, &m_rgb, 12),
            &gather(&xd, &m_dsm, 4),
            &gather(&rd, &m_dsm, 4),
        )
        .unwrap();
        assert!((g.value(loss).item().unwrap() - reference).abs() < 1e-12);
    }

    #[test]
    fn graph_mim_with_one_empty_modality() {
        let mut g: Graph<f64> = Graph::new();
        let xr = g.constant(Tensor::from_vec(&[1, 3], vec![2.0, 0.0, 0.0]).unwrap());
        let rr = g.constant(Tensor::from_vec(&[1, 3], vec![0.0, 0.0, 0.0]).unwrap());
        let xd = g.constant(Tensor::from_vec(&[1, 1], vec![0.0]).unwrap());
        let rd = g.constant(Tensor::from_vec(&[1, 1], vec![0.0]).unwrap());
        let loss = mim_loss_graph(
            &mut g,
            xr,
            rr,
            Arc::new(vec![0]),
            xd,
            rd,
            Arc::new(vec![]),
            MaskCounting::PixelChannels,
        )
        .unwrap();
        // Single masked RGB token: (2 + 0 + 0) / 3.
        assert!((g.value(loss).item().unwrap() - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn graph_mim_rejects_empty_masks() {
        let mut g: Graph<f64> = Graph::new();
        let xr = g.constant(Tensor::zeros(&[2, 3]));
        let rr = g.constant(Tensor::zeros(&[2, 3]));
        let xd = g.constant(Tensor::zeros(&[2, 1]));
        let rd = g.constant(Tensor::zeros(&[2, 1]));
        let r = mim_loss_graph(
            &mut g,
            xr,
            rr,
            Arc::new(vec![]),
            xd,
            rd,
            Arc::new(vec![]),
            MaskCounting::PixelChannels,
        );
        assert!(r.is_err());
    }

    #[test]
    fn graph_infonce_matches_scalar_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (batch, dim) = (4, 5);
        let zr: Vec<f64> = (0..batch * dim).map(|_| rng.gen::<f64>() - 0.5).collect();
        let zd: Vec<f64> = (0..batch * dim).map(|_| rng.gen::<f64>() - 0.5).collect();
        for symmetric in [false, true] {
            let c = cfg(0.05, 0.07, symmetric);
            let reference = infonce_loss(&zr, &zd, batch, dim, &c).unwrap();
            let mut g: Graph<f64> = Graph::new();
            let a = g.constant(Tensor::from_vec(&[batch, dim], zr.clone()).unwrap());
            let b = g.constant(Tensor::from_vec(&[batch, dim], zd.clone()).unwrap());
            let loss = infonce_loss_graph(&mut g, a, b, &c).unwrap();
            let v = g.value(loss).item().unwrap();
            assert!((v - reference).abs() < 1e-12, "sym {symmetric}: {v} vs {reference}");
        }
    }

    #[test]
    fn graph_total_weights_are_exact() {
        let c = cfg(0.05, 0.07, true);
        let mut ps: ParamSet<f64> = ParamSet::new();
        ps.insert("mim", Tensor::scalar(1.3)).unwrap();
        ps.insert("nce", Tensor::scalar(0.4)).unwrap();
        let mut g: Graph<f64> = Graph::new();
        let b = g.bind(&ps);
        let t = total_loss_graph(&mut g, b.id("mim").unwrap(), b.id("nce").unwrap(), &c).unwrap();
        g.backward(t).unwrap();
        let grads = b.grads(&g);
        assert_eq!(grads.get("mim").unwrap().data()[0], 0.95);
        assert_eq!(grads.get("nce").unwrap().data()[0], 0.05);
    }

    #[test]
    fn mim_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        // Reconstruction params sit at least 0.5 from the targets so the
        // L1 kink is never crossed by the eps perturbations.
        let offset = |rng: &mut ChaCha8Rng| -> f64 {
            let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
            sign * (0.5 + rng.gen::<f64>())
        };
        let xr: Vec<f64> = (0..4 * 6).map(|_| rng.gen::<f64>()).collect();
        let xd: Vec<f64> = (0..4 * 2).map(|_| rng.gen::<f64>()).collect();
        let mut ps: ParamSet<f64> = ParamSet::new();
        let rr: Vec<f64> = xr.iter().map(|&v| v + offset(&mut rng)).collect();
        let rd: Vec<f64> = xd.iter().map(|&v| v + offset(&mut rng)).collect();
        ps.insert("r_rgb", Tensor::from_vec(&[4, 6], rr).unwrap()).unwrap();
        ps.insert("r_dsm", Tensor::from_vec(&[4, 2], rd).unwrap()).unwrap();

        let run = |p: &ParamSet<f64>, grad: bool| -> Result<(f64, Option<ParamSet<f64>>), NnError> {
            let mut g: Graph<f64> = Graph::new();
            let b = g.bind(p);
            let xrn = g.constant(Tensor::from_vec(&[4, 6], xr.clone())?);
            let xdn = g.constant(Tensor::from_vec(&[4, 2], xd.clone())?);
            let loss = mim_loss_graph(
                &mut g,
                xrn,
                b.id("r_rgb")?,
                Arc::new(vec![0, 2]),
                xdn,
                b.id("r_dsm")?,
                Arc::new(vec![1, 2, 3]),
                MaskCounting::PixelChannels,
            )?;
            let v = g.value(loss).item()?;
            if grad {
                g.backward(loss)?;
                Ok((v, Some(b.grads(&g))))
            } else {
                Ok((v, None))
            }
        };
        let report = grad_check(
            &ps,
            1e-6,
            |p| run(p, false).map(|(v, _)| v),
            |p| run(p, true).map(|(v, g)| (v, g.unwrap())),
        )
        .unwrap();
        assert!(
            report.max_rel_err < 1e-6,
            "max rel err {} at {:?}",
            report.max_rel_err,
            report.worst
        );
    }

    #[test]
    fn infonce_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let (batch, dim) = (4, 5);
        let mut ps: ParamSet<f64> = ParamSet::new();
        for name in ["z_rgb", "z_dsm"] {
            let z: Vec<f64> = (0..batch * dim).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
            ps.insert(name, Tensor::from_vec(&[batch, dim], z).unwrap()).unwrap();
        }
        for symmetric in [false, true] {
            let c = cfg(0.05, 0.2, symmetric);
            let run = |p: &ParamSet<f64>, grad: bool| -> Result<(f64, Option<ParamSet<f64>>), NnError> {
                let mut g: Graph<f64> = Graph::new();
                let b = g.bind(p);
                let loss = infonce_loss_graph(&mut g, b.id("z_rgb")?, b.id("z_dsm")?, &c)?;
                let v = g.value(loss).item()?;
                if grad {
                    g.backward(loss)?;
                    Ok((v, Some(b.grads(&g))))
                } else {
                    Ok((v, None))
                }
            };
            let report = grad_check(
                &ps,
                1e-6,
                |p| run(p, false).map(|(v, _)| v),
                |p| run(p, true).map(|(v, g)| (v, g.unwrap())),
            )
            .unwrap();
            assert!(
                report.max_rel_err < 1e-6,
                "sym {symmetric}: max rel err {} at {:?}",
                report.max_rel_err,
                report.worst
            );
        }
    }

    #[test]
    fn combined_total_gradients_match_finite_differences() {
        // Reconstruction and alignment terms through one total, alpha 0.05.
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let c = cfg(0.05, 0.2, true);
        let xr: Vec<f64> = (0..4 * 6).map(|_| rng.gen::<f64>()).collect();
        let xd: Vec<f64> = (0..4 * 2).map(|_| rng.gen::<f64>()).collect();
        let offset = |rng: &mut ChaCha8Rng| -> f64 {
            let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
            sign * (0.5 + rng.gen::<f64>())
        };
        let mut ps: ParamSet<f64> = ParamSet::new();
        let rr: Vec<f64> = xr.iter().map(|&v| v + offset(&mut rng)).collect();
        let rd: Vec<f64> = xd.iter().map(|&v| v + offset(&mut rng)).collect();
        ps.insert("r_rgb", Tensor::from_vec(&[4, 6], rr).unwrap()).unwrap();
        ps.insert("r_dsm", Tensor::from_vec(&[4, 2], rd).unwrap()).unwrap();
        for name in ["z_rgb", "z_dsm"] {
            let z: Vec<f64> = (0..4 * 5).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
            ps.insert(name, Tensor::from_vec(&[4, 5], z).unwrap()).unwrap();
        }
        let run = |p: &ParamSet<f64>, grad: bool| -> Result<(f64, Option<ParamSet<f64>>), NnError> {
            let mut g: Graph<f64> = Graph::new();
            let b = g.bind(p);
            let xrn = g.constant(Tensor::from_vec(&[4, 6], xr.clone())?);
            let xdn = g.constant(Tensor::from_vec(&[4, 2], xd.clone())?);
            let mim = mim_loss_graph(
                &mut g,
                xrn,
                b.id("r_rgb")?,
                Arc::new(vec![0, 3]),
                xdn,
                b.id("r_dsm")?,
                Arc::new(vec![1]),
                MaskCounting::PixelChannels,
            )?;
            let nce = infonce_loss_graph(&mut g, b.id("z_rgb")?, b.id("z_dsm")?, &c)?;
            let loss = total_loss_graph(&mut g, mim, nce, &c)?;
            let v = g.value(loss).item()?;
            if grad {
                g.backward(loss)?;
                Ok((v, Some(b.grads(&g))))
            } else {
                Ok((v, None))
            }
        };
        let report = grad_check(
            &ps,
            1e-6,
            |p| run(p, false).map(|(v, _)| v),
            |p| run(p, true).map(|(v, g)| (v, g.unwrap())),
        )
        .unwrap();
        assert!(
            report.max_rel_err < 1e-6,
            "max rel err {} at {:?}",
            report.max_rel_err,
            report.worst
        );
    }
}
