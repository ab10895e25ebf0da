//! Soft channel → feature masks and masked style interpolation/extrapolation.

use crate::attribution::{contribution_pair, score_image, ContributionMatrix, Normalize};
use crate::error::{Error, Result};
use crate::kmeans::{ClusterModel, SemanticLabeling};
use crate::store::{ActivationStack, LayerLayout, StyleVector};

pub const HAIR: &str = "hair";
pub const POSE: &str = "pose";

pub const DEFAULT_TAU: f64 = 0.1;
pub const DEFAULT_ALPHA: f64 = 1.3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransferConfig {
    pub tau: f64,
    pub alpha: f64,
    /// Zero the coarse channel range for every feature except hair and pose.
    pub restrict_coarse: bool,
}

impl Default for TransferConfig {
    fn default() -> Self {
        TransferConfig {
            tau: DEFAULT_TAU,
            alpha: DEFAULT_ALPHA,
            restrict_coarse: true,
        }
    }
}

/// `K × C_total` channel assignment; every column sums to one.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMask {
    pub k: usize,
    pub channels: usize,
    pub q: Vec<f64>,
    pub tau: f64,
    pub hard: bool,
}

impl FeatureMask {
    pub fn row(&self, k: usize) -> &[f64] {
        &self.q[k * self.channels..(k + 1) * self.channels]
    }

    pub fn get(&self, k: usize, c: usize) -> f64 {
        self.q[k * self.channels + c]
    }

    /// Row with the largest entry in column `c`, ties to the lowest index.
    pub fn argmax(&self, c: usize) -> usize {
        argmax_column(&self.q, self.k, self.channels, c)
    }
}

fn argmax_column(values: &[f64], k: usize, channels: usize, c: usize) -> usize {
    let mut best = 0;
    for j in 1..k {
        if values[j * channels + c] > values[best * channels + c] {
            best = j;
        }
    }
    best
}

/// Column-wise softmax of `scores / tau`; with `hard`, the one-hot argmax.
pub fn feature_mask(m: &ContributionMatrix, tau: f64, hard: bool) -> Result<FeatureMask> {
    if !(tau > 0.0) {
        return Err(Error::NonPositiveTau(tau));
    }
    let (k, n) = (m.k, m.channels);
    let mut q = vec![0.0; k * n];
    if hard {
        for c in 0..n {
            q[argmax_column(&m.scores, k, n, c) * n + c] = 1.0;
        }
    } else {
        let mut col = vec![0.0; k];
        for c in 0..n {
            let max = (0..k)
                .map(|j| m.get(j, c))
                .fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (j, e) in col.iter_mut().enumerate() {
                *e = ((m.get(j, c) - max) / tau).exp();
                sum += *e;
            }
            for (j, e) in col.iter().enumerate() {
                q[j * n + c] = e / sum;
            }
        }
    }
    Ok(FeatureMask {
        k,
        channels: n,
        q,
        tau,
        hard,
    })
}

/// Zeros the coarse channel range unless the feature is hair or pose.
pub fn restrict_mask(row: &[f64], feature: &str, layout: &LayerLayout) -> Vec<f64> {
    let mut out = row.to_vec();
    if feature != HAIR && feature != POSE {
        for v in &mut out[layout.coarse_range()] {
            *v = 0.0;
        }
    }
    out
}

/// `1 − q_hair` on the coarse range, zero elsewhere.
pub fn pose_mask(q_hair: &[f64], layout: &LayerLayout) -> Vec<f64> {
    let coarse = layout.coarse_range();
    q_hair
        .iter()
        .enumerate()
        .map(|(c, &h)| if coarse.contains(&c) { 1.0 - h } else { 0.0 })
        .collect()
}

/// The mask row used to move `feature`: `pose` derives from the hair row,
/// other features read their own row and are optionally kept off the coarse
/// layers.
pub fn mask_row(
    mask: &FeatureMask,
    labeling: &SemanticLabeling,
    feature: &str,
    layout: &LayerLayout,
    restrict_coarse: bool,
) -> Result<Vec<f64>> {
    if mask.channels != layout.total_channels() {
        return Err(Error::LengthMismatch {
            expected: layout.total_channels(),
            actual: mask.channels,
        });
    }
    if feature == POSE {
        let hair = labeling.row(HAIR)?;
        return Ok(pose_mask(mask.row(check_row(hair, mask)?), layout));
    }
    let row = mask.row(check_row(labeling.row(feature)?, mask)?);
    Ok(if restrict_coarse {
        restrict_mask(row, feature, layout)
    } else {
        row.to_vec()
    })
}

fn check_row(row: usize, mask: &FeatureMask) -> Result<usize> {
    if row >= mask.k {
        return Err(Error::InvalidParameter(format!(
            "labeling names cluster {row} but the mask has {} rows",
            mask.k
        )));
    }
    Ok(row)
}

/// Result of moving a source style toward a reference.
#[derive(Debug, Clone, PartialEq)]
pub struct Transferred {
    pub style: StyleVector,
    /// `q ⊙ (σ_ref − σ_src)`.
    pub direction: Vec<f64>,
}

/// `σ_src + α · q ⊙ (σ_ref − σ_src)`.
///
/// Evaluated as `(1 − αq)·σ_src + αq·σ_ref` so that `α = 0` returns the source
/// and `αq = 1` returns the reference bit-for-bit.
pub fn transfer_style(
    src: &StyleVector,
    reference: &StyleVector,
    q: &[f64],
    alpha: f64,
) -> Result<Transferred> {
    let n = src.len();
    for len in [reference.len(), q.len()] {
        if len != n {
            return Err(Error::LengthMismatch {
                expected: n,
                actual: len,
            });
        }
    }
    let mut values = Vec::with_capacity(n);
    let mut direction = Vec::with_capacity(n);
    for ((&s, &r), &qc) in src.values.iter().zip(&reference.values).zip(q) {
        let (s, r) = (s as f64, r as f64);
        let w = alpha * qc;
        values.push(((1.0 - w) * s + w * r) as f32);
        direction.push(qc * (r - s));
    }
    Ok(Transferred {
        style: StyleVector::new(src.image_id.clone(), values),
        direction,
    })
}

/// One source/reference image with its activations.
pub struct TransferImage<'a> {
    pub style: &'a StyleVector,
    pub activations: &'a ActivationStack,
}

#[derive(Debug, Clone)]
pub struct PairTransfer {
    pub result: Transferred,
    pub mask_row: Vec<f64>,
    pub mask: FeatureMask,
}

/// Full pairwise transfer: shared-model memberships for both images, pairwise
/// max scores, mask, feature row, masked move.
#[allow(clippy::too_many_arguments)]
pub fn transfer_pair(
    source: TransferImage<'_>,
    reference: TransferImage<'_>,
    model: &ClusterModel,
    layout: &LayerLayout,
    labeling: &SemanticLabeling,
    feature: &str,
    cfg: &TransferConfig,
    hard: bool,
    normalize: Normalize,
) -> Result<PairTransfer> {
    let (_, ms) = score_image(source.activations, model, layout, normalize)?;
    let (_, mr) = score_image(reference.activations, model, layout, normalize)?;
    let pair = contribution_pair(&ms, &mr)?;
    let mask = feature_mask(&pair, cfg.tau, hard)?;
    let row = mask_row(&mask, labeling, feature, layout, cfg.restrict_coarse)?;
    let result = transfer_style(source.style, reference.style, &row, cfg.alpha)?;
    Ok(PairTransfer {
        result,
        mask_row: row,
        mask,
    })
}
