//! Feature-specific embeddings over layer-normalized styles and exact cosine
//! retrieval.

mod index;
pub mod scan;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::*;
use crate::store::{LayerLayout, StyleVector};

pub use index::{build_index, FeatureHits, Hit, IndexConfig, MaskMode, Provenance, RetrievalIndex};
pub use scan::Direction;

/// One `(mean, std)` pair per layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub layers: Vec<LayerStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerStats {
    pub name: String,
    pub mean: f64,
    pub std: f64,
}

/// Running count / mean / sum of squared deviations, merged with Chan's rule.
#[derive(Debug, Clone, Copy, Default)]
struct Moments {
    n: f64,
    mean: f64,
    m2: f64,
}

impl Moments {
    fn of(values: &[f32]) -> Self {
        let n = values.len() as f64;
        if n == 0.0 {
            return Moments::default();
        }
        let mean = values.iter().map(|&v| v as f64).sum::<f64>() / n;
        let m2 = values
            .iter()
            .map(|&v| {
                let d = v as f64 - mean;
                d * d
            })
            .sum();
        Moments { n, mean, m2 }
    }

    fn merge(self, o: Moments) -> Moments {
        if self.n == 0.0 {
            return o;
        }
        if o.n == 0.0 {
            return self;
        }
        let n = self.n + o.n;
        let delta = o.mean - self.mean;
        Moments {
            n,
            mean: self.mean + delta * o.n / n,
            m2: self.m2 + o.m2 + delta * delta * self.n * o.n / n,
        }
    }
}

/// Per-layer population mean and std over all values of that layer across
/// all images.
pub fn compute_norm_stats(
    styles: &[StyleVector],
    layout: &LayerLayout,
) -> Result<NormalizationStats> {
    if styles.len() < 2 {
        return Err(Error::InvalidParameter(format!(
            "normalization needs at least 2 images, got {}",
            styles.len()
        )));
    }
    for s in styles {
        s.check(layout)?;
    }
    let per_image: Vec<Vec<Moments>> = styles
        .par_iter()
        .map(|s| {
            layout
                .layers()
                .iter()
                .map(|l| Moments::of(&s.values[l.span()]))
                .collect()
        })
        .collect();
    stats_from_moments(per_image, layout)
}

fn stats_from_moments(
    per_image: Vec<Vec<Moments>>,
    layout: &LayerLayout,
) -> Result<NormalizationStats> {
    let mut acc = vec![Moments::default(); layout.layers().len()];
    for img in per_image {
        for (a, m) in acc.iter_mut().zip(img) {
            *a = a.merge(m);
        }
    }
    let mut layers = Vec::with_capacity(acc.len());
    for (spec, m) in layout.layers().iter().zip(acc) {
        let std = (m.m2 / m.n).sqrt();
        if !(std > 0.0) || !std.is_finite() {
            return Err(Error::DegenerateLayer(spec.name.clone()));
        }
        layers.push(LayerStats {
            name: spec.name.clone(),
            mean: m.mean,
            std,
        });
    }
    Ok(NormalizationStats { layers })
}

impl NormalizationStats {
    fn check(&self, layout: &LayerLayout) -> Result<()> {
        if self.layers.len() != layout.layers().len()
            || self
                .layers
                .iter()
                .zip(layout.layers())
                .any(|(s, l)| s.name != l.name)
        {
            return Err(Error::LayoutMismatch(format!(
                "stats cover {} layers, layout has {}",
                self.layers.len(),
                layout.layers().len()
            )));
        }
        Ok(())
    }

    /// `(value − mean) / std` per layer, in f64.
    pub fn apply(&self, values: &[f32], layout: &LayerLayout) -> Result<Vec<f64>> {
        self.check(layout)?;
        if values.len() != layout.total_channels() {
            return Err(Error::LengthMismatch {
                expected: layout.total_channels(),
                actual: values.len(),
            });
        }
        let mut out = Vec::with_capacity(values.len());
        for (spec, st) in layout.layers().iter().zip(&self.layers) {
            out.extend(
                values[spec.span()]
                    .iter()
                    .map(|&v| (v as f64 - st.mean) / st.std),
            );
        }
        Ok(out)
    }
}

pub(crate) fn norm_stats_streaming(
    source: &dyn crate::store::ImageSource,
) -> Result<NormalizationStats> {
    let layout = source.layout();
    let n = source.len();
    if n < 2 {
        return Err(Error::InvalidParameter(format!(
            "normalization needs at least 2 images, got {n}"
        )));
    }
    let per_image: Vec<Vec<Moments>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let s = source.style(i)?;
            s.check(layout)?;
            Ok(layout
                .layers()
                .iter()
                .map(|l| Moments::of(&s.values[l.span()]))
                .collect())
        })
        .collect::<Result<_>>()?;
    stats_from_moments(per_image, layout)
}

/// Layer-wise standardization of a style vector.
pub fn normalize(
    sigma: &StyleVector,
    stats: &NormalizationStats,
    layout: &LayerLayout,
) -> Result<StyleVector> {
    let v = stats.apply(&sigma.values, layout)?;
    Ok(StyleVector::new(
        sigma.image_id.clone(),
        v.into_iter().map(|x| x as f32).collect(),
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureEmbedding {
    pub image_id: String,
    pub feature: String,
    pub values: Vec<f32>,
}

/// `q ⊙ σ̂`.
pub fn embed(sigma_norm: &StyleVector, q: &[f64], feature: &str) -> Result<FeatureEmbedding> {
    if q.len() != sigma_norm.len() {
        return Err(Error::LengthMismatch {
            expected: sigma_norm.len(),
            actual: q.len(),
        });
    }
    Ok(FeatureEmbedding {
        image_id: sigma_norm.image_id.clone(),
        feature: feature.to_string(),
        values: sigma_norm
            .values
            .iter()
            .zip(q)
            .map(|(&s, &w)| (s as f64 * w) as f32)
            .collect(),
    })
}

/// `1 − cos(u, v)`, or 2 when either vector has norm below `1e-12`.
pub fn cosine_distance(u: &[f32], v: &[f32]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::LengthMismatch {
            expected: u.len(),
            actual: v.len(),
        });
    }
    let (nu, nv) = (scan::norm(u), scan::norm(v));
    if nu < 1e-12 || nv < 1e-12 {
        return Ok(scan::ZERO_NORM_DISTANCE);
    }
    Ok((1.0 - scan::dot(u, v) / (nu * nv)).clamp(0.0, 2.0))
}
