//! Channel contribution scores: for every cluster `k` and style channel `c`,
//! the energy `Σ A[c,h,w]²` over the cells assigned to `k`.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::kmeans::{assign, resample_membership, ClusterModel, MembershipMap};
use crate::par::*;
use crate::store::{ActivationStack, ImageSource, LayerLayout};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Single,
    Pair,
    Batch,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Single => "single",
            Mode::Pair => "pair",
            Mode::Batch => "batch",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Normalize {
    /// Raw sums over cells.
    #[default]
    None,
    /// Each layer's sums divided by its `H · W`.
    PerLayerMean,
}

impl Normalize {
    pub fn as_str(self) -> &'static str {
        match self {
            Normalize::None => "none",
            Normalize::PerLayerMean => "per_layer_mean",
        }
    }
}

impl fmt::Display for Normalize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Normalize {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Normalize::None),
            "per_layer_mean" | "per-layer-mean" => Ok(Normalize::PerLayerMean),
            other => Err(Error::InvalidParameter(format!(
                "unknown normalization `{other}`"
            ))),
        }
    }
}

/// `K × C_total` contribution scores, row-major by cluster.
#[derive(Debug, Clone, PartialEq)]
pub struct ContributionMatrix {
    pub k: usize,
    pub channels: usize,
    pub scores: Vec<f64>,
    pub mode: Mode,
    pub normalize: Normalize,
}

impl ContributionMatrix {
    pub fn zeros(k: usize, channels: usize, mode: Mode, normalize: Normalize) -> Self {
        ContributionMatrix {
            k,
            channels,
            scores: vec![0.0; k * channels],
            mode,
            normalize,
        }
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.scores[k * self.channels..(k + 1) * self.channels]
    }

    pub fn get(&self, k: usize, c: usize) -> f64 {
        self.scores[k * self.channels + c]
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.scores.iter().map(|&x| x as f32).collect()
    }
}

/// Adds each layer's raw gated sums into `out` (`k × C_total`).
fn accumulate_raw(
    a: &ActivationStack,
    m: &MembershipMap,
    layout: &LayerLayout,
    out: &mut [f64],
) -> Result<()> {
    a.check(layout)?;
    let total = layout.total_channels();
    let k = m.k;
    let mut acc = vec![0.0f64; k];
    for (spec, t) in layout.layers().iter().zip(&a.layers) {
        let u = resample_membership(m, spec.resolution, spec.resolution);
        for c in 0..spec.channels {
            acc.iter_mut().for_each(|x| *x = 0.0);
            for (&x, &l) in t.plane(c).iter().zip(&u.labels) {
                let x = x as f64;
                acc[l as usize] += x * x;
            }
            let col = spec.style_offset + c;
            for (j, v) in acc.iter().enumerate() {
                out[j * total + col] += v;
            }
        }
    }
    Ok(())
}

fn check_membership(m: &MembershipMap) -> Result<()> {
    if m.labels.len() != m.height * m.width || m.labels.iter().any(|&l| l as usize >= m.k) {
        return Err(Error::shape(
            format!("membership/{}", m.image_id),
            "labels do not form a one-hot grid",
        ));
    }
    Ok(())
}

/// Scores for one image.
pub fn contribution_single(
    a: &ActivationStack,
    m: &MembershipMap,
    layout: &LayerLayout,
    normalize: Normalize,
) -> Result<ContributionMatrix> {
    check_membership(m)?;
    let total = layout.total_channels();
    let mut out = ContributionMatrix::zeros(m.k, total, Mode::Single, normalize);
    accumulate_raw(a, m, layout, &mut out.scores)?;
    if normalize == Normalize::PerLayerMean {
        scale_layers(&mut out, layout, 1.0);
    }
    Ok(out)
}

/// Divides each layer's columns by `n · H · W`.
fn scale_layers(m: &mut ContributionMatrix, layout: &LayerLayout, n: f64) {
    let total = m.channels;
    for spec in layout.layers() {
        let denom = n * spec.cells() as f64;
        for j in 0..m.k {
            for v in &mut m.scores[j * total + spec.style_offset..][..spec.channels] {
                *v /= denom;
            }
        }
    }
}

/// Elementwise maximum of a source and a reference score matrix.
pub fn contribution_pair(
    src: &ContributionMatrix,
    reference: &ContributionMatrix,
) -> Result<ContributionMatrix> {
    if src.mode != Mode::Single || reference.mode != Mode::Single {
        return Err(Error::ModeMismatch(format!(
            "pair needs two single-image matrices, got {} and {}",
            src.mode, reference.mode
        )));
    }
    if src.normalize != reference.normalize {
        return Err(Error::ModeMismatch(format!(
            "normalization differs: {} vs {}",
            src.normalize, reference.normalize
        )));
    }
    if src.k != reference.k || src.channels != reference.channels {
        return Err(Error::shape(
            "contrib",
            format!(
                "{}x{} vs {}x{}",
                src.k, src.channels, reference.k, reference.channels
            ),
        ));
    }
    Ok(ContributionMatrix {
        k: src.k,
        channels: src.channels,
        scores: src
            .scores
            .iter()
            .zip(&reference.scores)
            .map(|(a, b)| a.max(*b))
            .collect(),
        mode: Mode::Pair,
        normalize: src.normalize,
    })
}

/// Dataset-averaged scores: per layer, `1/(N·H·W)` times the summed gated
/// energies of all images.
pub fn contribution_batch(
    items: &[(ActivationStack, MembershipMap)],
    layout: &LayerLayout,
) -> Result<ContributionMatrix> {
    let Some((_, first)) = items.first() else {
        return Err(Error::EmptyBatch);
    };
    let k = first.k;
    let total = layout.total_channels();
    let parts: Vec<Vec<f64>> = items
        .par_iter()
        .map(|(a, m)| {
            check_membership(m)?;
            if m.k != k {
                return Err(Error::shape(
                    format!("membership/{}", m.image_id),
                    format!("{} clusters, batch uses {k}", m.k),
                ));
            }
            let mut raw = vec![0.0; k * total];
            accumulate_raw(a, m, layout, &mut raw)?;
            Ok(raw)
        })
        .collect::<Result<_>>()?;
    finish_batch(parts, k, layout, items.len())
}

fn finish_batch(
    parts: Vec<Vec<f64>>,
    k: usize,
    layout: &LayerLayout,
    n: usize,
) -> Result<ContributionMatrix> {
    let total = layout.total_channels();
    let mut out = ContributionMatrix::zeros(k, total, Mode::Batch, Normalize::PerLayerMean);
    for raw in parts {
        for (o, r) in out.scores.iter_mut().zip(raw) {
            *o += r;
        }
    }
    scale_layers(&mut out, layout, n as f64);
    Ok(out)
}

/// Assigns memberships with the shared model, then scores the image.
pub fn score_image(
    a: &ActivationStack,
    model: &ClusterModel,
    layout: &LayerLayout,
    normalize: Normalize,
) -> Result<(MembershipMap, ContributionMatrix)> {
    let m = assign(model, a, layout, &model.clustering_layer)?;
    let c = contribution_single(a, &m, layout, normalize)?;
    Ok((m, c))
}

/// Batch scores over the given images of a source, memberships from the
/// shared model. Images are processed in chunks so memory stays bounded.
pub fn contribution_batch_source(
    source: &dyn ImageSource,
    model: &ClusterModel,
    indices: &[usize],
) -> Result<ContributionMatrix> {
    if indices.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let layout = source.layout();
    let total = layout.total_channels();
    let k = model.k;
    let mut sum = vec![0.0; k * total];
    for chunk in indices.chunks(64) {
        let parts: Vec<Vec<f64>> = chunk
            .par_iter()
            .map(|&i| {
                let a = source.activations(i)?;
                let m = assign(model, &a, layout, &model.clustering_layer)?;
                let mut raw = vec![0.0; k * total];
                accumulate_raw(&a, &m, layout, &mut raw)?;
                Ok(raw)
            })
            .collect::<Result<_>>()?;
        for raw in parts {
            for (s, r) in sum.iter_mut().zip(raw) {
                *s += r;
            }
        }
    }
    finish_batch(vec![sum], k, layout, indices.len())
}
