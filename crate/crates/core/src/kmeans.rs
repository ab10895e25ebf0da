//! Spherical k-means over activation vectors, cluster memberships and the
//! operator-supplied cluster → feature labeling.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::par::*;
use crate::store::{ActivationStack, Bundle, BundleWriter, ImageSource, LayerLayout};

const CHUNK: usize = 1024;
const ZERO_NORM: f64 = 1e-12;

pub const DEFAULT_MAX_ITER: usize = 100;
pub const DEFAULT_TOL: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitConfig {
    pub k: usize,
    pub seed: u64,
    pub max_iter: usize,
    /// Stop once no centroid moves farther than this (Euclidean).
    pub tol: f64,
}

impl FitConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        FitConfig {
            k,
            seed,
            max_iter: DEFAULT_MAX_ITER,
            tol: DEFAULT_TOL,
        }
    }
}

/// Unit-norm centroids plus the bookkeeping needed to reproduce a fit.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    /// `k × dim`, row-major, each row unit norm.
    pub centroids: Vec<f32>,
    pub k: usize,
    pub dim: usize,
    /// Sum of cosine similarities of the clustered points to their centroids.
    pub objective: f64,
    /// Objective after each iteration.
    pub objective_trace: Vec<f64>,
    pub iterations_run: usize,
    pub seed: u64,
    pub clustering_layer: String,
}

impl ClusterModel {
    pub fn centroid(&self, j: usize) -> &[f32] {
        &self.centroids[j * self.dim..(j + 1) * self.dim]
    }

    /// Hard assignment of a single vector: argmax cosine similarity, ties to
    /// the lowest index, zero-norm vectors to cluster 0.
    pub fn nearest(&self, v: &[f32]) -> (usize, f64) {
        let norm = v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
        if norm < ZERO_NORM {
            return (0, 0.0);
        }
        let mut best = (0, f64::NEG_INFINITY);
        for j in 0..self.k {
            let d = dot_f32(v, self.centroid(j));
            if d > best.1 {
                best = (j, d);
            }
        }
        (best.0, best.1 / norm)
    }

    /// Short content hash identifying these centroids.
    pub fn id(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.clustering_layer.as_bytes());
        h.update((self.k as u64).to_le_bytes());
        h.update((self.dim as u64).to_le_bytes());
        h.update(bytemuck::cast_slice::<f32, u8>(&self.centroids));
        hex::encode(&h.finalize()[..8])
    }

    /// Saves as a bundle: tensor `centroids` plus a `cluster` manifest section.
    pub fn save(&self, path: impl AsRef<Path>, layout: &LayerLayout) -> Result<()> {
        let mut w = BundleWriter::create(path, layout.clone(), Vec::new())?;
        w.write_tensor("centroids", &[self.k, self.dim], &self.centroids)?;
        w.set_extra(
            "cluster",
            json!({
                "k": self.k,
                "dim": self.dim,
                "objective": self.objective,
                "objective_trace": self.objective_trace,
                "iterations_run": self.iterations_run,
                "seed": self.seed,
                "clustering_layer": self.clustering_layer,
                "id": self.id(),
            }),
        );
        w.finish()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, LayerLayout)> {
        let b = Bundle::load(path)?;
        let meta: ClusterMeta = b
            .extra("cluster")
            .cloned()
            .ok_or_else(|| Error::InvalidBundle("no `cluster` section in manifest".into()))
            .and_then(|v| {
                serde_json::from_value(v).map_err(|e| Error::BadManifest(e.to_string()))
            })?;
        let (shape, centroids) = b.read_tensor("centroids")?;
        if shape != [meta.k, meta.dim] {
            return Err(Error::shape("centroids", format!("{shape:?}")));
        }
        let model = ClusterModel {
            centroids,
            k: meta.k,
            dim: meta.dim,
            objective: meta.objective,
            objective_trace: meta.objective_trace,
            iterations_run: meta.iterations_run,
            seed: meta.seed,
            clustering_layer: meta.clustering_layer,
        };
        Ok((model, b.layout().clone()))
    }
}

#[derive(Deserialize)]
struct ClusterMeta {
    k: usize,
    dim: usize,
    objective: f64,
    #[serde(default)]
    objective_trace: Vec<f64>,
    iterations_run: usize,
    seed: u64,
    clustering_layer: String,
}

fn dot_f32(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Spherical k-means with k-means++ seeding (distance `1 − cos`).
///
/// `points` is `P × dim` row-major. Zero-norm rows are ignored.
pub fn fit(points: &[f32], dim: usize, cfg: &FitConfig) -> Result<ClusterModel> {
    if cfg.k == 0 {
        return Err(Error::InvalidParameter("k must be at least 1".into()));
    }
    if dim == 0 || !points.len().is_multiple_of(dim) {
        return Err(Error::InvalidParameter(format!(
            "{} values is not a whole number of {dim}-dim points",
            points.len()
        )));
    }
    if !(cfg.tol > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "tol must be positive, got {}",
            cfg.tol
        )));
    }
    let total = points.len() / dim;
    let mut unit: Vec<f64> = Vec::with_capacity(points.len());
    for row in points.chunks_exact(dim) {
        let norm = row.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
        if norm >= ZERO_NORM {
            unit.extend(row.iter().map(|&x| x as f64 / norm));
        }
    }
    let n = unit.len() / dim;
    if n == 0 && total > 0 {
        return Err(Error::DegenerateInput);
    }
    if n < cfg.k {
        return Err(Error::TooFewPoints {
            points: n,
            k: cfg.k,
        });
    }

    let k = cfg.k;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut centroids = init_plus_plus(&unit, dim, k, &mut rng);
    let mut labels = vec![0usize; n];
    let mut sims = vec![0.0f64; n];
    let mut trace = Vec::new();
    let mut iterations = 0;

    while iterations < cfg.max_iter {
        iterations += 1;
        assign_points(&unit, dim, &centroids, &mut labels, &mut sims);
        repair_empty(&unit, dim, &mut centroids, &mut labels, &mut sims, k);

        let sums = cluster_sums(&unit, dim, &labels, k);
        let mut shift = 0.0f64;
        for j in 0..k {
            let s = &sums[j * dim..(j + 1) * dim];
            let norm = dot(s, s).sqrt();
            if norm < ZERO_NORM {
                // members cancel out; keep the old direction
                continue;
            }
            let c = &mut centroids[j * dim..(j + 1) * dim];
            let mut d2 = 0.0;
            for (ci, si) in c.iter_mut().zip(s) {
                let v = si / norm;
                d2 += (v - *ci) * (v - *ci);
                *ci = v;
            }
            shift = shift.max(d2.sqrt());
        }
        trace.push(objective(&unit, dim, &centroids, &labels));
        if shift < cfg.tol {
            break;
        }
    }

    Ok(ClusterModel {
        centroids: centroids.iter().map(|&x| x as f32).collect(),
        k,
        dim,
        objective: trace.last().copied().unwrap_or(0.0),
        objective_trace: trace,
        iterations_run: iterations,
        seed: cfg.seed,
        clustering_layer: String::new(),
    })
}

/// Greedy k-means++: each step samples a few candidates with probability
/// proportional to the squared distance `(1 − cos)²` to the nearest chosen
/// centroid and keeps the one that lowers the total potential most.
fn init_plus_plus(unit: &[f64], dim: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = unit.len() / dim;
    let trials = 2 + (k as f64).ln() as usize;
    let dist_to = |c: &[f64]| -> Vec<f64> {
        unit.par_chunks(dim)
            .map(|p| (1.0 - dot(p, c)).max(0.0))
            .collect()
    };
    let mut centroids = Vec::with_capacity(k * dim);
    let first = rng.gen_range(0..n);
    centroids.extend_from_slice(&unit[first * dim..(first + 1) * dim]);
    let mut dist = dist_to(&centroids[..dim]);
    for _ in 1..k {
        let weights: Vec<f64> = dist.iter().map(|d| d * d).collect();
        let total: f64 = weights.iter().sum();
        let mut best: Option<(f64, usize, Vec<f64>)> = None;
        for _ in 0..trials {
            let pick = if total > 0.0 {
                let target = rng.gen::<f64>() * total;
                let mut acc = 0.0;
                let mut pick = n - 1;
                for (i, w) in weights.iter().enumerate() {
                    acc += w;
                    if acc > target && *w > 0.0 {
                        pick = i;
                        break;
                    }
                }
                pick
            } else {
                rng.gen_range(0..n)
            };
            let d = dist_to(&unit[pick * dim..(pick + 1) * dim]);
            let merged: Vec<f64> = dist.iter().zip(&d).map(|(a, b)| a.min(*b)).collect();
            let potential: f64 = merged.iter().map(|x| x * x).sum();
            if best.as_ref().is_none_or(|b| potential < b.0) {
                best = Some((potential, pick, merged));
            }
        }
        let (_, pick, merged) = best.expect("at least one trial");
        centroids.extend_from_slice(&unit[pick * dim..(pick + 1) * dim]);
        dist = merged;
    }
    centroids
}

fn assign_points(
    unit: &[f64],
    dim: usize,
    centroids: &[f64],
    labels: &mut [usize],
    sims: &mut [f64],
) {
    labels
        .par_chunks_mut(CHUNK)
        .zip(sims.par_chunks_mut(CHUNK))
        .zip(unit.par_chunks(CHUNK * dim))
        .for_each(|((lab, sim), pts)| {
            for ((l, s), p) in lab
                .iter_mut()
                .zip(sim.iter_mut())
                .zip(pts.chunks_exact(dim))
            {
                let mut best = (0, f64::NEG_INFINITY);
                for (j, c) in centroids.chunks_exact(dim).enumerate() {
                    let d = dot(p, c);
                    if d > best.1 {
                        best = (j, d);
                    }
                }
                *l = best.0;
                *s = best.1;
            }
        });
}

/// Seeds each empty cluster with the worst-fitting point that is not the sole
/// member of its own cluster.
fn repair_empty(
    unit: &[f64],
    dim: usize,
    centroids: &mut [f64],
    labels: &mut [usize],
    sims: &mut [f64],
    k: usize,
) {
    let mut counts = vec![0usize; k];
    for &l in labels.iter() {
        counts[l] += 1;
    }
    for e in 0..k {
        if counts[e] > 0 {
            continue;
        }
        let mut worst: Option<usize> = None;
        for i in 0..labels.len() {
            if counts[labels[i]] > 1 && worst.is_none_or(|w| sims[i] < sims[w]) {
                worst = Some(i);
            }
        }
        let Some(i) = worst else { break };
        counts[labels[i]] -= 1;
        counts[e] = 1;
        labels[i] = e;
        let p = &unit[i * dim..(i + 1) * dim];
        centroids[e * dim..(e + 1) * dim].copy_from_slice(p);
        sims[i] = dot(p, p);
    }
}

fn cluster_sums(unit: &[f64], dim: usize, labels: &[usize], k: usize) -> Vec<f64> {
    let partials: Vec<Vec<f64>> = labels
        .par_chunks(CHUNK)
        .zip(unit.par_chunks(CHUNK * dim))
        .map(|(lab, pts)| {
            let mut acc = vec![0.0; k * dim];
            for (&l, p) in lab.iter().zip(pts.chunks_exact(dim)) {
                for (a, x) in acc[l * dim..(l + 1) * dim].iter_mut().zip(p) {
                    *a += x;
                }
            }
            acc
        })
        .collect();
    let mut sums = vec![0.0; k * dim];
    for part in partials {
        for (s, p) in sums.iter_mut().zip(part) {
            *s += p;
        }
    }
    sums
}

fn objective(unit: &[f64], dim: usize, centroids: &[f64], labels: &[usize]) -> f64 {
    let partials: Vec<f64> = labels
        .par_chunks(CHUNK)
        .zip(unit.par_chunks(CHUNK * dim))
        .map(|(lab, pts)| {
            lab.iter()
                .zip(pts.chunks_exact(dim))
                .map(|(&l, p)| dot(p, &centroids[l * dim..(l + 1) * dim]))
                .sum::<f64>()
        })
        .collect();
    partials.iter().sum()
}

/// Hard cluster assignment of every spatial cell of one image, stored as
/// labels; [`MembershipMap::one_hot`] gives the `K × H × W` tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MembershipMap {
    pub image_id: String,
    pub k: usize,
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u32>,
}

impl MembershipMap {
    pub fn label(&self, h: usize, w: usize) -> usize {
        self.labels[h * self.width + w] as usize
    }

    pub fn one_hot(&self) -> Vec<f32> {
        let cells = self.height * self.width;
        let mut out = vec![0.0; self.k * cells];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l as usize * cells + i] = 1.0;
        }
        out
    }

    /// Inverse of [`MembershipMap::one_hot`]; every cell must be one-hot.
    pub fn from_one_hot(
        image_id: impl Into<String>,
        k: usize,
        height: usize,
        width: usize,
        grid: &[f32],
    ) -> Result<Self> {
        let image_id = image_id.into();
        let cells = height * width;
        if grid.len() != k * cells {
            return Err(Error::shape(
                format!("membership/{image_id}"),
                format!("{} values for {k}x{height}x{width}", grid.len()),
            ));
        }
        let mut labels = Vec::with_capacity(cells);
        for i in 0..cells {
            let hot: Vec<usize> = (0..k).filter(|&j| grid[j * cells + i] == 1.0).collect();
            let zeros = (0..k).filter(|&j| grid[j * cells + i] == 0.0).count();
            if hot.len() != 1 || zeros != k - 1 {
                return Err(Error::shape(
                    format!("membership/{image_id}"),
                    format!("cell {i} is not one-hot"),
                ));
            }
            labels.push(hot[0] as u32);
        }
        Ok(MembershipMap {
            image_id,
            k,
            height,
            width,
            labels,
        })
    }
}

/// Assigns each cell of `layer` to its most similar centroid.
pub fn assign(
    model: &ClusterModel,
    activations: &ActivationStack,
    layout: &LayerLayout,
    layer: &str,
) -> Result<MembershipMap> {
    let t = activations.layer(layout, layer)?;
    if t.channels != model.dim {
        return Err(Error::LayerMismatch {
            layer: layer.to_string(),
            expected: model.dim,
            actual: t.channels,
        });
    }
    let cells = t.cells();
    let mut v = vec![0.0f32; t.channels];
    let mut labels = Vec::with_capacity(cells);
    for cell in 0..cells {
        for (c, x) in v.iter_mut().enumerate() {
            *x = t.data[c * cells + cell];
        }
        labels.push(model.nearest(&v).0 as u32);
    }
    Ok(MembershipMap {
        image_id: activations.image_id.clone(),
        k: model.k,
        height: t.height,
        width: t.width,
        labels,
    })
}

/// Nearest-neighbour resize: source row `floor(t · H0 / target_h)`, same for
/// columns.
pub fn resample_membership(m: &MembershipMap, target_h: usize, target_w: usize) -> MembershipMap {
    assert!(
        target_h >= 1 && target_w >= 1,
        "target dims must be positive"
    );
    if target_h == m.height && target_w == m.width {
        return m.clone();
    }
    let mut labels = Vec::with_capacity(target_h * target_w);
    for th in 0..target_h {
        let sh = th * m.height / target_h;
        for tw in 0..target_w {
            let sw = tw * m.width / target_w;
            labels.push(m.labels[sh * m.width + sw]);
        }
    }
    MembershipMap {
        image_id: m.image_id.clone(),
        k: m.k,
        height: target_h,
        width: target_w,
        labels,
    }
}

/// Gathers every spatial vector of `layer` from the given images as a
/// `P × C` matrix, images in the given order, cells row-major.
pub fn gather_cells(
    source: &dyn ImageSource,
    indices: &[usize],
    layer: &str,
) -> Result<(Vec<f32>, usize)> {
    let layout = source.layout();
    let spec = layout.layer(layer)?;
    let dim = spec.channels;
    let cells = spec.cells();
    let per_image: Vec<Vec<f32>> = indices
        .par_iter()
        .map(|&i| {
            let stack = source.activations(i)?;
            let t = stack.layer(layout, layer)?;
            let mut out = vec![0.0f32; cells * dim];
            for c in 0..dim {
                for (cell, &x) in t.plane(c).iter().enumerate() {
                    out[cell * dim + c] = x;
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    Ok((per_image.concat(), dim))
}

/// Fits shared centroids on the cells of `layer` over a seeded sample of at
/// most `sample` images (all images when `sample` is `None`).
pub fn fit_source(
    source: &dyn ImageSource,
    layer: Option<&str>,
    sample: Option<usize>,
    cfg: &FitConfig,
) -> Result<ClusterModel> {
    let layout = source.layout();
    let layer = match layer {
        Some(l) => layout.layer(l)?.name.clone(),
        None => layout
            .default_cluster_layer()
            .ok_or_else(|| Error::InvalidParameter("layout has no layers".into()))?
            .name
            .clone(),
    };
    let n = source.len();
    let indices: Vec<usize> = match sample {
        Some(s) if s < n => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_5a3f);
            let mut picked = rand::seq::index::sample(&mut rng, n, s).into_vec();
            picked.sort_unstable();
            picked
        }
        _ => (0..n).collect(),
    };
    let (points, dim) = gather_cells(source, &indices, &layer)?;
    let mut model = fit(&points, dim, cfg)?;
    model.clustering_layer = layer;
    Ok(model)
}

/// Operator-supplied names for cluster indices.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SemanticLabeling {
    names: BTreeMap<usize, String>,
}

#[derive(Serialize, Deserialize)]
struct LabelingFile {
    clusters: BTreeMap<String, String>,
}

impl SemanticLabeling {
    pub fn new(pairs: impl IntoIterator<Item = (usize, String)>) -> Result<Self> {
        let mut names = BTreeMap::new();
        for (i, name) in pairs {
            if names.values().any(|n: &String| *n == name) {
                return Err(Error::InvalidParameter(format!(
                    "feature `{name}` labels more than one cluster"
                )));
            }
            if names.insert(i, name).is_some() {
                return Err(Error::InvalidParameter(format!(
                    "cluster {i} labeled twice"
                )));
            }
        }
        Ok(SemanticLabeling { names })
    }

    /// `cluster0`, `cluster1`, ... for every index below `k`.
    pub fn generic(k: usize) -> Self {
        SemanticLabeling {
            names: (0..k).map(|i| (i, format!("cluster{i}"))).collect(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: LabelingFile =
            serde_json::from_str(text).map_err(|e| Error::BadManifest(e.to_string()))?;
        let mut pairs = Vec::new();
        for (k, v) in file.clusters {
            let i: usize = k.parse().map_err(|_| {
                Error::InvalidParameter(format!("cluster key `{k}` is not an index"))
            })?;
            pairs.push((i, v));
        }
        Self::new(pairs)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        let file = LabelingFile {
            clusters: self
                .names
                .iter()
                .map(|(k, v)| (k.to_string(), v.clone()))
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("labeling serializes") + "\n"
    }

    /// Cluster row for a feature name.
    pub fn row(&self, feature: &str) -> Result<usize> {
        self.names
            .iter()
            .find(|(_, n)| *n == feature)
            .map(|(&i, _)| i)
            .ok_or_else(|| Error::UnknownFeature(feature.to_string()))
    }

    pub fn name(&self, row: usize) -> Option<&str> {
        self.names.get(&row).map(String::as_str)
    }

    /// Named features in cluster-index order.
    pub fn features(&self) -> Vec<&str> {
        self.names.values().map(String::as_str).collect()
    }

    pub fn check_against(&self, k: usize) -> Result<()> {
        match self.names.keys().find(|&&i| i >= k) {
            Some(i) => Err(Error::InvalidParameter(format!(
                "labeling names cluster {i} but the model has {k} clusters"
            ))),
            None => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::ActivationTensor;

    /// Brute force over every assignment of points to k labels, maximizing the
    /// spherical objective.
    fn brute_force_objective(points: &[[f64; 2]], k: usize) -> f64 {
        let n = points.len();
        let mut best = f64::NEG_INFINITY;
        for code in 0..k.pow(n as u32) {
            let mut c = code;
            let mut sums = vec![[0.0f64; 2]; k];
            for p in points {
                let l = c % k;
                c /= k;
                sums[l][0] += p[0];
                sums[l][1] += p[1];
            }
            // the best centroid for a cluster yields the norm of its sum
            let obj: f64 = sums
                .iter()
                .map(|s| (s[0] * s[0] + s[1] * s[1]).sqrt())
                .sum();
            best = best.max(obj);
        }
        best
    }

    #[test]
    fn duplicated_basis_vectors() {
        let pts = [[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]];
        let oracle = brute_force_objective(&pts, 2);
        assert_eq!(oracle, 4.0);
        let flat: Vec<f32> = pts
            .iter()
            .flat_map(|p| [p[0] as f32, p[1] as f32])
            .collect();
        for seed in 0..10 {
            let m = fit(&flat, 2, &FitConfig::new(2, seed)).unwrap();
            assert_eq!(m.objective, oracle);
            let a = m.nearest(&[1.0, 0.0]).0;
            let b = m.nearest(&[0.0, 1.0]).0;
            assert_ne!(a, b);
            let mut cs: Vec<Vec<f32>> = (0..2).map(|j| m.centroid(j).to_vec()).collect();
            cs.sort_by(|x, y| y[0].partial_cmp(&x[0]).unwrap());
            assert_eq!(cs, vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        }
    }

    #[test]
    fn single_cluster_is_spherical_mean() {
        let pts: Vec<f32> = vec![3.0, 0.0, 0.0, 2.0, 1.0, 1.0];
        let m = fit(&pts, 2, &FitConfig::new(1, 7)).unwrap();
        let s = 1.0 + 1.0 / 2f64.sqrt();
        let t = 1.0 + 1.0 / 2f64.sqrt();
        let n = (s * s + t * t).sqrt();
        assert!((m.centroid(0)[0] as f64 - s / n).abs() < 1e-6);
        assert!((m.centroid(0)[1] as f64 - t / n).abs() < 1e-6);
    }

    #[test]
    fn each_point_its_own_cluster() {
        let pts: Vec<f32> = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let m = fit(&pts, 3, &FitConfig::new(3, 3)).unwrap();
        assert_eq!(m.objective, 3.0);
    }

    #[test]
    fn errors() {
        assert!(matches!(
            fit(&[1.0, 0.0], 2, &FitConfig::new(2, 0)),
            Err(Error::TooFewPoints { .. })
        ));
        assert!(matches!(
            fit(&[0.0; 6], 2, &FitConfig::new(1, 0)),
            Err(Error::DegenerateInput)
        ));
        let mut cfg = FitConfig::new(1, 0);
        cfg.tol = 0.0;
        assert!(fit(&[1.0, 0.0], 2, &cfg).is_err());
    }

    #[test]
    fn zero_points_are_ignored_in_fit() {
        let pts: Vec<f32> = vec![0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0];
        let m = fit(&pts, 2, &FitConfig::new(2, 1)).unwrap();
        assert_eq!(m.objective, 2.0);
    }

    #[test]
    fn deterministic_given_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pts: Vec<f32> = (0..600).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let a = fit(&pts, 6, &FitConfig::new(5, 42)).unwrap();
        let b = fit(&pts, 6, &FitConfig::new(5, 42)).unwrap();
        assert_eq!(a, b);
        for w in a.objective_trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-9 * 100.0, "{:?}", a.objective_trace);
        }
        for j in 0..a.k {
            let n: f32 = a.centroid(j).iter().map(|x| x * x).sum::<f32>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
        assert!(a.objective <= 100.0 + 1e-9);
    }

    fn model(centroids: Vec<f32>, k: usize, dim: usize) -> ClusterModel {
        ClusterModel {
            centroids,
            k,
            dim,
            objective: 0.0,
            objective_trace: vec![],
            iterations_run: 0,
            seed: 0,
            clustering_layer: "L".into(),
        }
    }

    fn stack(channels: usize, res: usize, cells: &[[f32; 2]]) -> (ActivationStack, LayerLayout) {
        let layout = LayerLayout::new([("L", channels, res)], 0).unwrap();
        let mut t = ActivationTensor::zeros(channels, res, res);
        for (i, v) in cells.iter().enumerate() {
            for (c, &x) in v.iter().enumerate().take(channels) {
                t.plane_mut(c)[i] = x;
            }
        }
        (
            ActivationStack {
                image_id: "x".into(),
                layers: vec![t],
            },
            layout,
        )
    }

    #[test]
    fn assignment_rules() {
        let s = std::f32::consts::FRAC_1_SQRT_2;
        // centroids: 0 = e1, 1 = (s, s), 2 = e2, 3 = (s, -s)
        let m = model(vec![1.0, 0.0, s, s, 0.0, 1.0, s, -s], 4, 2);
        let (st, layout) = stack(2, 2, &[[0.0, 1.0], [0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]);
        let mm = assign(&m, &st, &layout, "L").unwrap();
        assert_eq!(mm.labels, vec![2, 0, 0, 2]);

        // centroids 1 and 3 coincide: the tie goes to 1
        let tie = model(vec![0.0, 1.0, 1.0, 0.0, 0.0, -1.0, 1.0, 0.0], 4, 2);
        let (st, layout) = stack(2, 1, &[[2.0, 0.0]]);
        assert_eq!(assign(&tie, &st, &layout, "L").unwrap().labels, vec![1]);

        let wrong = model(vec![1.0, 0.0, 0.0], 1, 3);
        assert!(matches!(
            assign(&wrong, &st, &layout, "L"),
            Err(Error::LayerMismatch { .. })
        ));
    }

    #[test]
    fn all_cells_equal_to_a_centroid() {
        let m = model(vec![1.0, 0.0, 0.6, 0.8, 0.0, 1.0], 3, 2);
        let (st, layout) = stack(2, 2, &[[0.0, 2.0]; 4]);
        assert_eq!(assign(&m, &st, &layout, "L").unwrap().labels, vec![2; 4]);
    }

    #[test]
    fn resample_cases() {
        let m = MembershipMap {
            image_id: "x".into(),
            k: 4,
            height: 2,
            width: 2,
            labels: vec![0, 1, 2, 3],
        };
        assert_eq!(resample_membership(&m, 2, 2), m);
        let up = resample_membership(&m, 4, 4);
        assert_eq!(
            up.labels,
            vec![0, 0, 1, 1, 0, 0, 1, 1, 2, 2, 3, 3, 2, 2, 3, 3]
        );
        let big = MembershipMap {
            image_id: "x".into(),
            k: 16,
            height: 4,
            width: 4,
            labels: (0..16).collect(),
        };
        let down = resample_membership(&big, 2, 2);
        // output(th, tw) = source(2 th, 2 tw)
        assert_eq!(down.labels, vec![0, 2, 8, 10]);
    }

    #[test]
    fn one_hot_roundtrip() {
        let m = MembershipMap {
            image_id: "x".into(),
            k: 3,
            height: 1,
            width: 3,
            labels: vec![2, 0, 1],
        };
        let g = m.one_hot();
        assert_eq!(g, vec![0., 1., 0., 0., 0., 1., 1., 0., 0.]);
        assert_eq!(MembershipMap::from_one_hot("x", 3, 1, 3, &g).unwrap(), m);
    }

    #[test]
    fn labeling_parse() {
        let l =
            SemanticLabeling::from_json(r#"{"clusters":{"0":"background","2":"hair"}}"#).unwrap();
        assert_eq!(l.row("hair").unwrap(), 2);
        assert!(matches!(l.row("eyes"), Err(Error::UnknownFeature(_))));
        assert_eq!(l.features(), vec!["background", "hair"]);
        assert!(SemanticLabeling::from_json(r#"{"clusters":{"0":"a","1":"a"}}"#).is_err());
        assert!(l.check_against(2).is_err());
        assert_eq!(SemanticLabeling::from_json(&l.to_json()).unwrap(), l);
    }

    #[test]
    fn model_save_load() {
        let tmp = tempfile::tempdir().unwrap();
        let m = model(vec![1.0, 0.0, 0.0, 1.0], 2, 2);
        let layout = LayerLayout::new([("L", 2, 4)], 0).unwrap();
        m.save(tmp.path(), &layout).unwrap();
        let (back, lay) = ClusterModel::load(tmp.path()).unwrap();
        assert_eq!(back, m);
        assert_eq!(lay, layout);
    }
}
