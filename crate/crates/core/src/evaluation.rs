//! Attribute Matching Score, retrieved-set identity IoU and the
//! intersection-ratio analysis of per-image contribution vectors.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kmeans::{fit, FitConfig};
use crate::par::*;
use crate::retrieval::{Direction, RetrievalIndex};

pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const DEFAULT_AMS_TOP: usize = 5;
pub const DEFAULT_TRSI_SET_SIZE: usize = 10;
pub const DEFAULT_TRSI_QUERIES: usize = 100;
pub const DEFAULT_TOP_N: usize = 100;
pub const DEFAULT_K_LIST: [usize; 6] = [2, 5, 10, 20, 50, 100];

/// Classifier scores per image and attribute, thresholded at `threshold`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributePredictions {
    attributes: Vec<String>,
    rows: HashMap<String, Vec<f64>>,
    pub threshold: f64,
}

/// Header names compare equal ignoring case and treating spaces as
/// underscores.
fn attr_key(name: &str) -> String {
    name.trim().replace(' ', "_").to_ascii_lowercase()
}

impl AttributePredictions {
    pub fn new(
        attributes: Vec<String>,
        rows: impl IntoIterator<Item = (String, Vec<f64>)>,
        threshold: f64,
    ) -> Result<Self> {
        let mut map = HashMap::new();
        for (id, scores) in rows {
            if scores.len() != attributes.len() {
                return Err(Error::BadTable(format!(
                    "row `{id}` has {} scores for {} attributes",
                    scores.len(),
                    attributes.len()
                )));
            }
            if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
                return Err(Error::BadTable(format!("row `{id}` has score {s}")));
            }
            if map.insert(id.clone(), scores).is_some() {
                return Err(Error::BadTable(format!("duplicate row `{id}`")));
            }
        }
        Ok(AttributePredictions {
            attributes,
            rows: map,
            threshold,
        })
    }

    /// CSV with header `image_id,<attr>,...`.
    pub fn from_csv(reader: impl std::io::Read, threshold: f64) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let header = r
            .headers()
            .map_err(|e| Error::BadTable(e.to_string()))?
            .clone();
        if header.len() < 2 {
            return Err(Error::BadTable(
                "need image_id and at least one attribute".into(),
            ));
        }
        let attributes: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(|e| Error::BadTable(e.to_string()))?;
            let id = rec[0].to_string();
            let scores = rec
                .iter()
                .skip(1)
                .map(|v| {
                    v.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::BadTable(format!("row `{id}`: bad score `{v}`")))
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push((id, scores));
        }
        Self::new(attributes, rows, threshold)
    }

    pub fn load(path: impl AsRef<Path>, threshold: f64) -> Result<Self> {
        let path = path.as_ref();
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(f, threshold)
    }

    pub fn attributes(&self) -> &[String] {
        &self.attributes
    }

    /// Writes the table with rows in `ids` order.
    pub fn write_csv(&self, ids: &[String], out: impl std::io::Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let table = |e: csv::Error| Error::BadTable(e.to_string());
        w.write_record(
            std::iter::once("image_id").chain(self.attributes.iter().map(String::as_str)),
        )
        .map_err(table)?;
        for id in ids {
            let row = self
                .rows
                .get(id)
                .ok_or_else(|| Error::MissingPrediction(id.clone()))?;
            w.write_record(std::iter::once(id.clone()).chain(row.iter().map(|v| v.to_string())))
                .map_err(table)?;
        }
        w.flush().map_err(|e| Error::BadTable(e.to_string()))
    }

    pub fn column(&self, attribute: &str) -> Option<usize> {
        let key = attr_key(attribute);
        self.attributes.iter().position(|a| attr_key(a) == key)
    }

    /// Thresholded prediction `[score > T]`.
    pub fn flag(&self, id: &str, column: usize) -> Result<bool> {
        let row = self
            .rows
            .get(id)
            .ok_or_else(|| Error::MissingPrediction(id.to_string()))?;
        Ok(row[column] > self.threshold)
    }
}

/// Feature name → attribute names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AttributeGroups(pub BTreeMap<String, Vec<String>>);

impl Default for AttributeGroups {
    /// The CelebA attribute grouping for eyes, nose, mouth and hair.
    fn default() -> Self {
        let table: [(&str, &[&str]); 4] = [
            (
                "eyes",
                &[
                    "Arched_Eyebrows",
                    "Bags_Under_Eyes",
                    "Bushy_Eyebrows",
                    "Narrow_Eyes",
                ],
            ),
            ("nose", &["Big_Nose", "Pointy_Nose"]),
            (
                "mouth",
                &[
                    "5_o_Clock_Shadow",
                    "Big_Lips",
                    "Goatee",
                    "Mouth_Slightly_Open",
                    "Mustache",
                    "No_Beard",
                    "Smiling",
                    "Wearing_Lipstick",
                ],
            ),
            (
                "hair",
                &[
                    "Bald",
                    "Bangs",
                    "Black_Hair",
                    "Blond_Hair",
                    "Brown_Hair",
                    "Gray_Hair",
                    "Receding_Hairline",
                    "Sideburns",
                    "Straight_Hair",
                    "Wavy_Hair",
                ],
            ),
        ];
        AttributeGroups(
            table
                .iter()
                .map(|(f, a)| (f.to_string(), a.iter().map(|s| s.to_string()).collect()))
                .collect(),
        )
    }
}

impl AttributeGroups {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::BadTable(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Prediction columns of `feature`'s group.
    pub fn columns(&self, feature: &str, preds: &AttributePredictions) -> Result<Vec<usize>> {
        let attrs = self
            .0
            .get(feature)
            .ok_or_else(|| Error::UnknownFeature(feature.to_string()))?;
        if attrs.is_empty() {
            return Err(Error::EmptyGroup(feature.to_string()));
        }
        attrs
            .iter()
            .map(|a| {
                preds
                    .column(a)
                    .ok_or_else(|| Error::BadTable(format!("no prediction column `{a}`")))
            })
            .collect()
    }
}

/// Image id → identity id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct IdentityLabels(pub HashMap<String, String>);

impl IdentityLabels {
    /// CSV `image_id,identity_id` with a header row.
    pub fn from_csv(reader: impl std::io::Read) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let mut map = HashMap::new();
        for rec in r.records() {
            let rec = rec.map_err(|e| Error::BadTable(e.to_string()))?;
            if rec.len() != 2 {
                return Err(Error::BadTable(format!(
                    "expected 2 columns, got {}",
                    rec.len()
                )));
            }
            map.insert(rec[0].to_string(), rec[1].to_string());
        }
        Ok(IdentityLabels(map))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(f)
    }

    /// Writes `image_id,identity_id` rows in `ids` order.
    pub fn write_csv(&self, ids: &[String], out: impl std::io::Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let table = |e: csv::Error| Error::BadTable(e.to_string());
        w.write_record(["image_id", "identity_id"]).map_err(table)?;
        for id in ids {
            w.write_record([id.as_str(), self.identity(id)?])
                .map_err(table)?;
        }
        w.flush().map_err(|e| Error::BadTable(e.to_string()))
    }

    pub fn identity(&self, id: &str) -> Result<&str> {
        self.0
            .get(id)
            .map(String::as_str)
            .ok_or_else(|| Error::UnknownImage(id.to_string()))
    }
}

/// Fraction of thresholded attribute agreements between each query and its
/// retrieved images. `retrieved[i]` belongs to `queries[i]`; every list must
/// have length `top`.
pub fn attribute_matching(
    queries: &[String],
    retrieved: &[Vec<String>],
    preds: &AttributePredictions,
    columns: &[usize],
) -> Result<f64> {
    if queries.is_empty() || columns.is_empty() {
        return Err(Error::InvalidParameter(
            "need at least one query and one attribute".into(),
        ));
    }
    let top = retrieved.first().map_or(0, Vec::len);
    if retrieved.len() != queries.len() || top == 0 || retrieved.iter().any(|r| r.len() != top) {
        return Err(Error::InvalidParameter("ragged retrieved lists".into()));
    }
    let mut matches = 0u64;
    for (q, hits) in queries.iter().zip(retrieved) {
        for &a in columns {
            let fq = preds.flag(q, a)?;
            for h in hits {
                matches += u64::from(preds.flag(h, a)? == fq);
            }
        }
    }
    Ok(matches as f64 / (queries.len() * top * columns.len()) as f64)
}

/// AMS of `feature` over `queries`, retrieving `top` images each with the
/// query itself excluded.
pub fn ams(
    index: &RetrievalIndex,
    queries: &[String],
    feature: &str,
    preds: &AttributePredictions,
    groups: &AttributeGroups,
    top: usize,
) -> Result<f64> {
    let columns = groups.columns(feature, preds)?;
    let retrieved: Vec<Vec<String>> = queries
        .par_iter()
        .map(|q| {
            preds.flag(q, columns[0])?;
            Ok(index
                .query_id(q, feature, top, Direction::Nearest, true)?
                .into_iter()
                .map(|h| h.image_id)
                .collect())
        })
        .collect::<Result<_>>()?;
    attribute_matching(queries, &retrieved, preds, &columns)
}

/// `m` distinct indices below `n` drawn with `seed`, in ascending order; all
/// of `0..n` when `m >= n`.
pub fn sample_indices(n: usize, m: usize, seed: u64) -> Vec<usize> {
    if m >= n {
        return (0..n).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = rand::seq::index::sample(&mut rng, n, m).into_vec();
    picked.sort_unstable();
    picked
}

/// `|a ∩ b| / |a ∪ b|`; two empty sets give 1.
pub fn iou<T: Ord>(a: &BTreeSet<T>, b: &BTreeSet<T>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(b).count() as f64 / union as f64
}

/// Identity IoU of the two sets retrieved for `query` by two features.
pub fn trsi_iou(
    index: &RetrievalIndex,
    query: &str,
    feature_a: &str,
    feature_b: &str,
    set_size: usize,
    ids: &IdentityLabels,
) -> Result<f64> {
    let identities = |feature: &str| -> Result<BTreeSet<String>> {
        index
            .query_id(query, feature, set_size, Direction::Nearest, true)?
            .into_iter()
            .map(|h| ids.identity(&h.image_id).map(str::to_string))
            .collect()
    };
    Ok(iou(&identities(feature_a)?, &identities(feature_b)?))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrsiValue {
    pub query: String,
    pub feature_a: String,
    pub feature_b: String,
    pub iou: f64,
}

/// TRSI-IoU for every query and every unordered pair of `features`.
pub fn trsi_all(
    index: &RetrievalIndex,
    queries: &[String],
    features: &[String],
    set_size: usize,
    ids: &IdentityLabels,
) -> Result<Vec<TrsiValue>> {
    let mut pairs = Vec::new();
    for (i, a) in features.iter().enumerate() {
        for b in &features[i + 1..] {
            pairs.push((a, b));
        }
    }
    let per_query: Vec<Vec<TrsiValue>> = queries
        .par_iter()
        .map(|q| {
            pairs
                .iter()
                .map(|(a, b)| {
                    Ok(TrsiValue {
                        query: q.clone(),
                        feature_a: a.to_string(),
                        feature_b: b.to_string(),
                        iou: trsi_iou(index, q, a, b, set_size, ids)?,
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(per_query.into_iter().flatten().collect())
}

/// Median with the mean of the two middle values for even lengths.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 {
        v[m]
    } else {
        (v[m - 1] + v[m]) / 2.0
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SubmembershipReport {
    pub feature: String,
    pub n: usize,
    pub sample_size: usize,
    pub seed: u64,
    /// `(K, ratio)` in the order requested.
    pub ratios: Vec<(usize, f64)>,
}

/// Indices of the `n` largest entries, ties to the lowest index.
pub fn top_n(values: &[f64], n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(n);
    idx
}

/// For each K: cluster the per-image score rows, average them per cluster,
/// and report the share of top-`n` channels common to every cluster mean.
pub fn intersection_ratio(
    contribs: &[Vec<f64>],
    feature: &str,
    cluster_counts: &[usize],
    n: usize,
    seed: u64,
) -> Result<SubmembershipReport> {
    let channels = contribs.first().map_or(0, Vec::len);
    if let Some(r) = contribs.iter().find(|r| r.len() != channels) {
        return Err(Error::LengthMismatch {
            expected: channels,
            actual: r.len(),
        });
    }
    if n == 0 || n > channels {
        return Err(Error::BadN { n, channels });
    }
    for &k in cluster_counts {
        if k == 0 || k > contribs.len() {
            return Err(Error::BadK {
                k,
                n: contribs.len(),
            });
        }
    }
    let points: Vec<f32> = contribs.iter().flatten().map(|&x| x as f32).collect();
    let ratios = cluster_counts
        .par_iter()
        .map(|&k| {
            let model = fit(&points, channels, &FitConfig::new(k, seed))?;
            let mut sums = vec![0.0f64; k * channels];
            let mut counts = vec![0usize; k];
            for (row, p) in contribs.iter().zip(points.chunks_exact(channels)) {
                let (j, _) = model.nearest(p);
                counts[j] += 1;
                for (s, &x) in sums[j * channels..(j + 1) * channels].iter_mut().zip(row) {
                    *s += x;
                }
            }
            let mut common: Option<BTreeSet<usize>> = None;
            for j in (0..k).filter(|&j| counts[j] > 0) {
                let mean: Vec<f64> = sums[j * channels..(j + 1) * channels]
                    .iter()
                    .map(|s| s / counts[j] as f64)
                    .collect();
                let z: BTreeSet<usize> = top_n(&mean, n).into_iter().collect();
                common = Some(match common {
                    None => z,
                    Some(c) => c.intersection(&z).copied().collect(),
                });
            }
            let shared = common.map_or(0, |c| c.len());
            Ok((k, shared as f64 / n as f64))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SubmembershipReport {
        feature: feature.to_string(),
        n,
        sample_size: contribs.len(),
        seed,
        ratios,
    })
}

/// Nonincreasing apart from at most `allowed` adjacent rises.
pub fn mostly_nonincreasing(values: &[f64], allowed: usize) -> bool {
    values.windows(2).filter(|w| w[1] > w[0]).count() <= allowed
}
