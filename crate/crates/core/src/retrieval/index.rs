use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::scan::{self, Direction};
use super::{norm_stats_streaming, FeatureEmbedding, NormalizationStats};
use crate::attribution::{contribution_batch_source, contribution_single, Normalize};
use crate::error::{Error, Result};
use crate::kmeans::{assign, ClusterModel, SemanticLabeling};
use crate::par::*;
use crate::store::{
    ActivationStack, Bundle, BundleWriter, ImageSource, LayerLayout, StyleVector, TensorData,
};
use crate::transfer::{feature_mask, FeatureMask};

const BUILD_BLOCK: usize = 256;

/// Where each image's channel mask comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskMode {
    /// The image's own scores.
    #[default]
    PerImage,
    /// One mask from scores averaged over every indexed image.
    Batch,
}

impl fmt::Display for MaskMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MaskMode::PerImage => "per-image",
            MaskMode::Batch => "batch",
        })
    }
}

impl FromStr for MaskMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-image" | "per_image" | "single" => Ok(MaskMode::PerImage),
            "batch" => Ok(MaskMode::Batch),
            other => Err(Error::InvalidParameter(format!(
                "unknown mask mode `{other}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexConfig {
    pub features: Vec<String>,
    pub tau: f64,
    pub normalize: Normalize,
    pub mask_mode: MaskMode,
    /// Round embeddings to half precision before storing (still as f32).
    pub half_precision: bool,
}

impl IndexConfig {
    pub fn new(features: Vec<String>, tau: f64) -> Self {
        IndexConfig {
            features,
            tau,
            normalize: Normalize::None,
            mask_mode: MaskMode::PerImage,
            half_precision: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub cluster_id: String,
    pub tau: f64,
    pub normalize: String,
    pub mask_mode: MaskMode,
    pub half_precision: bool,
    pub labeling: BTreeMap<String, String>,
}

#[derive(Debug)]
struct FeatureMatrix {
    name: String,
    data: TensorData,
    zero_rows: Vec<bool>,
}

/// Row-normalized per-feature embedding matrices over a fixed image list.
#[derive(Debug)]
pub struct RetrievalIndex {
    ids: Vec<String>,
    lookup: HashMap<String, usize>,
    dim: usize,
    layout: LayerLayout,
    features: Vec<FeatureMatrix>,
    stats: NormalizationStats,
    model: ClusterModel,
    labeling: SemanticLabeling,
    config: IndexConfig,
    /// Fixed mask in batch mode.
    shared_mask: Option<FeatureMask>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hit {
    pub index: usize,
    pub image_id: String,
    pub distance: f64,
}

/// Per-feature retrieval results for one query.
pub type FeatureHits = Vec<(String, Vec<Hit>)>;

/// Embeds one image for each requested feature; rows are unit norm, `None`
/// when the embedding vanished.
#[allow(clippy::too_many_arguments)]
fn embed_image(
    style: &StyleVector,
    acts: &ActivationStack,
    layout: &LayerLayout,
    stats: &NormalizationStats,
    model: &ClusterModel,
    rows: &[(String, usize)],
    cfg: &IndexConfig,
    shared_mask: Option<&FeatureMask>,
) -> Result<Vec<Option<Vec<f32>>>> {
    style.check(layout)?;
    let normed = stats.apply(&style.values, layout)?;
    let own;
    let mask = match shared_mask {
        Some(m) => m,
        None => {
            let m = assign(model, acts, layout, &model.clustering_layer)?;
            let c = contribution_single(acts, &m, layout, cfg.normalize)?;
            own = feature_mask(&c, cfg.tau, false)?;
            &own
        }
    };
    Ok(rows
        .iter()
        .map(|(_, r)| {
            let v: Vec<f32> = normed
                .iter()
                .zip(mask.row(*r))
                .map(|(s, q)| (s * q) as f32)
                .collect();
            scan::unit(&v).map(|u| {
                if cfg.half_precision {
                    u.into_iter()
                        .map(|x| half::f16::from_f32(x).to_f32())
                        .collect()
                } else {
                    u
                }
            })
        })
        .collect())
}

fn feature_rows(
    labeling: &SemanticLabeling,
    features: &[String],
    k: usize,
) -> Result<Vec<(String, usize)>> {
    if features.is_empty() {
        return Err(Error::InvalidParameter("no features requested".into()));
    }
    features
        .iter()
        .map(|f| {
            let r = labeling.row(f)?;
            if r >= k {
                return Err(Error::InvalidParameter(format!(
                    "feature `{f}` maps to cluster {r}, model has {k}"
                )));
            }
            Ok((f.clone(), r))
        })
        .collect()
}

/// Embeds every image of `source` for each feature. Deterministic for any
/// worker count.
pub fn build_index(
    source: &dyn ImageSource,
    model: &ClusterModel,
    labeling: &SemanticLabeling,
    cfg: &IndexConfig,
) -> Result<RetrievalIndex> {
    if !(cfg.tau > 0.0) {
        return Err(Error::NonPositiveTau(cfg.tau));
    }
    let layout = source.layout().clone();
    let rows = feature_rows(labeling, &cfg.features, model.k)?;
    let n = source.len();
    let dim = layout.total_channels();
    let stats = norm_stats_streaming(source)?;

    let shared_mask = match cfg.mask_mode {
        MaskMode::PerImage => None,
        MaskMode::Batch => {
            let all: Vec<usize> = (0..n).collect();
            let m = contribution_batch_source(source, model, &all)?;
            let mut q = feature_mask(&m, cfg.tau, false)?;
            // stored as f32, so build with what a reopened index will see
            q.q.iter_mut().for_each(|x| *x = f64::from(*x as f32));
            Some(q)
        }
    };

    let mut mats: Vec<Vec<f32>> = vec![vec![0.0; n * dim]; rows.len()];
    let mut zeros: Vec<Vec<bool>> = vec![vec![false; n]; rows.len()];
    let mut start = 0;
    while start < n {
        let end = (start + BUILD_BLOCK).min(n);
        let block: Vec<Vec<Option<Vec<f32>>>> = (start..end)
            .into_par_iter()
            .map(|i| {
                let style = source.style(i)?;
                let acts = source.activations(i)?;
                embed_image(
                    &style,
                    &acts,
                    &layout,
                    &stats,
                    model,
                    &rows,
                    cfg,
                    shared_mask.as_ref(),
                )
            })
            .collect::<Result<_>>()?;
        for (off, per_feature) in block.into_iter().enumerate() {
            let i = start + off;
            for (f, v) in per_feature.into_iter().enumerate() {
                match v {
                    Some(v) => mats[f][i * dim..(i + 1) * dim].copy_from_slice(&v),
                    None => zeros[f][i] = true,
                }
            }
        }
        start = end;
    }

    let ids = source.image_ids().to_vec();
    let lookup = ids
        .iter()
        .cloned()
        .enumerate()
        .map(|(i, s)| (s, i))
        .collect();
    Ok(RetrievalIndex {
        ids,
        lookup,
        dim,
        layout,
        features: rows
            .iter()
            .zip(mats.into_iter().zip(zeros))
            .map(|((name, _), (m, z))| FeatureMatrix {
                name: name.clone(),
                data: TensorData::Owned(m),
                zero_rows: z,
            })
            .collect(),
        stats,
        model: model.clone(),
        labeling: labeling.clone(),
        config: cfg.clone(),
        shared_mask,
    })
}

#[derive(Serialize, Deserialize)]
struct IndexMeta {
    features: Vec<String>,
    tau: f64,
    normalize: String,
    mask_mode: MaskMode,
    half_precision: bool,
    labeling: BTreeMap<String, String>,
    stats: NormalizationStats,
    zero_rows: BTreeMap<String, Vec<usize>>,
    cluster: ClusterMeta,
}

#[derive(Serialize, Deserialize)]
struct ClusterMeta {
    id: String,
    k: usize,
    dim: usize,
    clustering_layer: String,
    seed: u64,
    objective: f64,
    iterations_run: usize,
}

impl RetrievalIndex {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.lookup.get(id).copied()
    }

    pub fn features(&self) -> Vec<&str> {
        self.features.iter().map(|f| f.name.as_str()).collect()
    }

    pub fn stats(&self) -> &NormalizationStats {
        &self.stats
    }

    pub fn layout(&self) -> &LayerLayout {
        &self.layout
    }

    pub fn model(&self) -> &ClusterModel {
        &self.model
    }

    pub fn labeling(&self) -> &SemanticLabeling {
        &self.labeling
    }

    pub fn config(&self) -> &IndexConfig {
        &self.config
    }

    pub fn provenance(&self) -> Provenance {
        Provenance {
            cluster_id: self.model.id(),
            tau: self.config.tau,
            normalize: self.config.normalize.as_str().to_string(),
            mask_mode: self.config.mask_mode,
            half_precision: self.config.half_precision,
            labeling: labeling_map(&self.labeling),
        }
    }

    fn feature(&self, name: &str) -> Result<&FeatureMatrix> {
        self.features
            .iter()
            .find(|f| f.name == name)
            .ok_or_else(|| Error::UnknownFeature(name.to_string()))
    }

    /// The whole `N × dim` matrix of one feature.
    pub fn matrix(&self, feature: &str) -> Result<&[f32]> {
        Ok(self.feature(feature)?.data.as_slice())
    }

    pub fn zero_rows(&self, feature: &str) -> Result<&[bool]> {
        Ok(&self.feature(feature)?.zero_rows)
    }

    /// Stored (unit-norm, or all-zero) embedding of row `i`.
    pub fn embedding(&self, feature: &str, i: usize) -> Result<&[f32]> {
        let f = self.feature(feature)?;
        if i >= self.len() {
            return Err(Error::BadK {
                k: i,
                n: self.len(),
            });
        }
        Ok(&f.data.as_slice()[i * self.dim..(i + 1) * self.dim])
    }

    /// Cosine distance from `query` to every indexed image.
    pub fn distances(&self, query: &[f32], feature: &str) -> Result<Vec<f64>> {
        let f = self.feature(feature)?;
        if query.len() != self.dim {
            return Err(Error::LengthMismatch {
                expected: self.dim,
                actual: query.len(),
            });
        }
        let q = scan::unit(query);
        let mut out = vec![0.0; self.len()];
        scan::scan(
            f.data.as_slice(),
            self.dim,
            &f.zero_rows,
            q.as_deref(),
            &mut out,
        );
        Ok(out)
    }

    /// Exact top-`k` scan. `exclude` drops one row (the query itself) before
    /// ranking.
    pub fn query(
        &self,
        query: &[f32],
        feature: &str,
        k: usize,
        direction: Direction,
        exclude: Option<usize>,
    ) -> Result<Vec<Hit>> {
        let available = self.len() - usize::from(exclude.is_some_and(|e| e < self.len()));
        if k == 0 || k > available {
            return Err(Error::BadK { k, n: available });
        }
        let d = self.distances(query, feature)?;
        Ok(scan::top_k(&d, k, direction, exclude)
            .into_iter()
            .map(|(distance, index)| Hit {
                index,
                image_id: self.ids[index].clone(),
                distance,
            })
            .collect())
    }

    /// Queries with an indexed image's own stored embedding.
    pub fn query_id(
        &self,
        id: &str,
        feature: &str,
        k: usize,
        direction: Direction,
        exclude_self: bool,
    ) -> Result<Vec<Hit>> {
        let i = self
            .position(id)
            .ok_or_else(|| Error::UnknownImage(id.to_string()))?;
        let q = self.embedding(feature, i)?.to_vec();
        self.query(&q, feature, k, direction, exclude_self.then_some(i))
    }

    /// Embeds an image that is not in the index with the index's own
    /// normalization stats, cluster model and mask settings.
    pub fn embed_external(
        &self,
        style: &StyleVector,
        acts: &ActivationStack,
    ) -> Result<Vec<FeatureEmbedding>> {
        acts.check(&self.layout)?;
        let rows = feature_rows(&self.labeling, &self.config.features, self.model.k)?;
        let v = embed_image(
            style,
            acts,
            &self.layout,
            &self.stats,
            &self.model,
            &rows,
            &self.config,
            self.shared_mask.as_ref(),
        )?;
        Ok(rows
            .into_iter()
            .zip(v)
            .map(|((feature, _), e)| FeatureEmbedding {
                image_id: style.image_id.clone(),
                feature,
                values: e.unwrap_or_else(|| vec![0.0; self.dim]),
            })
            .collect())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BundleWriter::create(path, self.layout.clone(), self.ids.clone())?;
        for f in &self.features {
            w.write_tensor(
                &format!("emb/{}", f.name),
                &[self.len(), self.dim],
                f.data.as_slice(),
            )?;
        }
        w.write_tensor(
            "centroids",
            &[self.model.k, self.model.dim],
            &self.model.centroids,
        )?;
        if let Some(m) = &self.shared_mask {
            let q: Vec<f32> = m.q.iter().map(|&x| x as f32).collect();
            w.write_tensor("mask/batch", &[m.k, m.channels], &q)?;
        }
        let meta = IndexMeta {
            features: self.config.features.clone(),
            tau: self.config.tau,
            normalize: self.config.normalize.as_str().to_string(),
            mask_mode: self.config.mask_mode,
            half_precision: self.config.half_precision,
            labeling: labeling_map(&self.labeling),
            stats: self.stats.clone(),
            zero_rows: self
                .features
                .iter()
                .map(|f| {
                    (
                        f.name.clone(),
                        f.zero_rows
                            .iter()
                            .enumerate()
                            .filter(|(_, &z)| z)
                            .map(|(i, _)| i)
                            .collect(),
                    )
                })
                .collect(),
            cluster: ClusterMeta {
                id: self.model.id(),
                k: self.model.k,
                dim: self.model.dim,
                clustering_layer: self.model.clustering_layer.clone(),
                seed: self.model.seed,
                objective: self.model.objective,
                iterations_run: self.model.iterations_run,
            },
        };
        w.set_extra(
            "index",
            serde_json::to_value(&meta).expect("index metadata serializes"),
        );
        w.set_extra("provenance", json!(self.provenance()));
        w.finish()?;
        Ok(())
    }

    /// Opens a saved index; embedding matrices are memory-mapped.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let b = Bundle::load(path)?;
        let meta: IndexMeta = b
            .extra("index")
            .cloned()
            .ok_or_else(|| Error::InvalidBundle("no `index` section in manifest".into()))
            .and_then(|v| {
                serde_json::from_value(v).map_err(|e| Error::BadManifest(e.to_string()))
            })?;
        let layout = b.layout().clone();
        let n = b.images().len();
        let dim = layout.total_channels();
        let mut features = Vec::with_capacity(meta.features.len());
        for name in &meta.features {
            let (shape, data) = b.map_tensor(&format!("emb/{name}"))?;
            if shape != [n, dim] {
                return Err(Error::shape(format!("emb/{name}"), format!("{shape:?}")));
            }
            let mut zero_rows = vec![false; n];
            for &i in meta.zero_rows.get(name).map(Vec::as_slice).unwrap_or(&[]) {
                if i < n {
                    zero_rows[i] = true;
                }
            }
            features.push(FeatureMatrix {
                name: name.clone(),
                data,
                zero_rows,
            });
        }
        let (cshape, centroids) = b.read_tensor("centroids")?;
        if cshape != [meta.cluster.k, meta.cluster.dim] {
            return Err(Error::shape("centroids", format!("{cshape:?}")));
        }
        let model = ClusterModel {
            centroids,
            k: meta.cluster.k,
            dim: meta.cluster.dim,
            objective: meta.cluster.objective,
            objective_trace: Vec::new(),
            iterations_run: meta.cluster.iterations_run,
            seed: meta.cluster.seed,
            clustering_layer: meta.cluster.clustering_layer,
        };
        let labeling = SemanticLabeling::new(
            meta.labeling
                .iter()
                .map(|(k, v)| (k.parse::<usize>().unwrap_or(usize::MAX), v.clone())),
        )?;
        let normalize: Normalize = meta.normalize.parse()?;
        let shared_mask = if b.has_tensor("mask/batch") {
            let (shape, q) = b.read_tensor("mask/batch")?;
            Some(FeatureMask {
                k: shape[0],
                channels: shape[1],
                q: q.into_iter().map(f64::from).collect(),
                tau: meta.tau,
                hard: false,
            })
        } else {
            None
        };
        let ids = b.images().to_vec();
        let lookup = ids
            .iter()
            .cloned()
            .enumerate()
            .map(|(i, s)| (s, i))
            .collect();
        Ok(RetrievalIndex {
            ids,
            lookup,
            dim,
            layout,
            features,
            stats: meta.stats,
            model,
            labeling,
            config: IndexConfig {
                features: meta.features,
                tau: meta.tau,
                normalize,
                mask_mode: meta.mask_mode,
                half_precision: meta.half_precision,
            },
            shared_mask,
        })
    }
}

fn labeling_map(l: &SemanticLabeling) -> BTreeMap<String, String> {
    l.features()
        .into_iter()
        .map(|f| (l.row(f).expect("own feature").to_string(), f.to_string()))
        .collect()
}
