//! A miniature modulated generator whose channels each drive exactly one
//! spatial region. Activations are `σ_l[c] · B_l[c, h, w]` with `B` zero
//! outside the channel's region, which makes clustering, attribution and
//! transfer locality exactly checkable.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::evaluation::{AttributeGroups, AttributePredictions, IdentityLabels, DEFAULT_THRESHOLD};
use crate::kmeans::{assign, ClusterModel, SemanticLabeling};
use crate::par::*;
use crate::store::{
    ActivationStack, ActivationTensor, Bundle, BundleWriter, ImageSource, LayerLayout, StyleVector,
};

/// Number of leading layers the toy treats as coarse.
pub const TOY_COARSE_LAYERS: usize = 1;

/// Region names used when there are exactly four regions.
pub const FACE_REGIONS: [&str; 4] = ["eyes", "nose", "mouth", "hair"];

#[derive(Debug, Clone, PartialEq)]
pub struct ToyGenerator {
    layout: LayerLayout,
    k_regions: usize,
    coarsest: usize,
    /// Region of each cell of the coarsest grid, row-major.
    region_grid: Vec<u32>,
    /// Per layer, region of each cell.
    region_maps: Vec<Vec<u32>>,
    /// Per layer, `C × H × W`.
    basis: Vec<Vec<f32>>,
    seed: u64,
}

/// Recursive axis-aligned bisection of a `h × w` rectangle into `k` regions.
#[allow(clippy::too_many_arguments)]
fn bisect(
    grid: &mut [u32],
    stride: usize,
    r0: usize,
    c0: usize,
    h: usize,
    w: usize,
    k: usize,
    next: &mut u32,
) {
    if k == 1 {
        for r in r0..r0 + h {
            for c in c0..c0 + w {
                grid[r * stride + c] = *next;
            }
        }
        *next += 1;
        return;
    }
    let rows = h >= w;
    let (len, other) = if rows { (h, w) } else { (w, h) };
    let half = k / 2;
    let cut = ((len * half) as f64 / k as f64).round() as usize;
    let cut = cut.clamp(1, len - 1);
    let lo = 1.max(k.saturating_sub((len - cut) * other));
    let hi = (k - 1).min(cut * other);
    let k1 = half.clamp(lo, hi);
    if rows {
        bisect(grid, stride, r0, c0, cut, w, k1, next);
        bisect(grid, stride, r0 + cut, c0, h - cut, w, k - k1, next);
    } else {
        bisect(grid, stride, r0, c0, h, cut, k1, next);
        bisect(grid, stride, r0, c0 + cut, h, w - cut, k - k1, next);
    }
}

/// Seeded generator over layers given as `(resolution, channels)` in
/// nondecreasing resolution.
pub fn make_toy(k_regions: usize, layers: &[(usize, usize)], seed: u64) -> Result<ToyGenerator> {
    if k_regions < 2 {
        return Err(Error::InfeasiblePartition(format!(
            "need at least 2 regions, got {k_regions}"
        )));
    }
    let layout = LayerLayout::new(
        layers
            .iter()
            .enumerate()
            .map(|(i, &(res, ch))| (format!("layer{i}"), ch, res)),
        TOY_COARSE_LAYERS.min(layers.len()),
    )?;
    let coarsest = layout.layers()[0].resolution;
    if k_regions > coarsest * coarsest {
        return Err(Error::InfeasiblePartition(format!(
            "{k_regions} regions on a {coarsest}x{coarsest} grid"
        )));
    }
    if let Some(l) = layout.layers().iter().find(|l| l.channels < k_regions) {
        return Err(Error::InfeasiblePartition(format!(
            "layer {} has {} channels for {k_regions} regions",
            l.name, l.channels
        )));
    }
    let mut region_grid = vec![0u32; coarsest * coarsest];
    let mut next = 0;
    bisect(
        &mut region_grid,
        coarsest,
        0,
        0,
        coarsest,
        coarsest,
        k_regions,
        &mut next,
    );

    let region_maps: Vec<Vec<u32>> = layout
        .layers()
        .iter()
        .map(|l| {
            let r = l.resolution;
            let mut m = Vec::with_capacity(r * r);
            for h in 0..r {
                for w in 0..r {
                    m.push(region_grid[(h * coarsest / r) * coarsest + w * coarsest / r]);
                }
            }
            m
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let basis = layout
        .layers()
        .iter()
        .zip(&region_maps)
        .map(|(l, map)| {
            let mut b = Vec::with_capacity(l.activation_len());
            for c in 0..l.channels {
                let owner = (c % k_regions) as u32;
                for &cell in map {
                    b.push(if cell == owner {
                        rng.gen_range(0.5f32..1.5)
                    } else {
                        0.0
                    });
                }
            }
            b
        })
        .collect();

    Ok(ToyGenerator {
        layout,
        k_regions,
        coarsest,
        region_grid,
        region_maps,
        basis,
        seed,
    })
}

impl ToyGenerator {
    pub fn layout(&self) -> &LayerLayout {
        &self.layout
    }

    pub fn regions(&self) -> usize {
        self.k_regions
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn coarsest_resolution(&self) -> usize {
        self.coarsest
    }

    pub fn region_grid(&self) -> &[u32] {
        &self.region_grid
    }

    /// Region of each cell of layer `layer`, row-major.
    pub fn region_map(&self, layer: usize) -> &[u32] {
        &self.region_maps[layer]
    }

    pub fn basis(&self, layer: usize) -> &[f32] {
        &self.basis[layer]
    }

    /// Region owning global style channel `c`.
    pub fn channel_region(&self, c: usize) -> usize {
        let spec = self
            .layout
            .layers()
            .iter()
            .find(|l| l.span().contains(&c))
            .expect("channel inside layout");
        (c - spec.style_offset) % self.k_regions
    }

    /// Region owner of every global channel.
    pub fn channel_regions(&self) -> Vec<usize> {
        (0..self.layout.total_channels())
            .map(|c| self.channel_region(c))
            .collect()
    }

    pub fn region_name(&self, r: usize) -> String {
        if self.k_regions == FACE_REGIONS.len() {
            FACE_REGIONS[r].to_string()
        } else {
            format!("region{r}")
        }
    }

    pub fn region_names(&self) -> Vec<String> {
        (0..self.k_regions).map(|r| self.region_name(r)).collect()
    }

    /// `A_l[c, h, w] = σ_l[c] · B_l[c, h, w]`.
    pub fn synthesize(&self, sigma: &StyleVector) -> Result<ActivationStack> {
        if sigma.len() != self.layout.total_channels() {
            return Err(Error::LengthMismatch {
                expected: self.layout.total_channels(),
                actual: sigma.len(),
            });
        }
        let layers = self
            .layout
            .layers()
            .iter()
            .zip(&self.basis)
            .map(|(l, b)| {
                let cells = l.cells();
                let mut t = ActivationTensor::zeros(l.channels, l.resolution, l.resolution);
                for c in 0..l.channels {
                    let s = sigma.values[l.style_offset + c];
                    for (o, &x) in t
                        .plane_mut(c)
                        .iter_mut()
                        .zip(&b[c * cells..(c + 1) * cells])
                    {
                        *o = s * x;
                    }
                }
                t
            })
            .collect();
        Ok(ActivationStack {
            image_id: sigma.image_id.clone(),
            layers,
        })
    }

    /// Independent uniform `[0.5, 1.5]` entries.
    pub fn random_style(&self, id: impl Into<String>, rng: &mut impl Rng) -> StyleVector {
        StyleVector::new(
            id,
            (0..self.layout.total_channels())
                .map(|_| rng.gen_range(0.5f32..1.5))
                .collect(),
        )
    }

    /// Names each cluster after the region most of its cells fall in, on
    /// the model's clustering layer over the given images. `None` when two
    /// clusters pick the same region.
    pub fn label_clusters(
        &self,
        model: &ClusterModel,
        source: &dyn ImageSource,
        indices: &[usize],
    ) -> Result<Option<SemanticLabeling>> {
        let li = self.layout.layer_index(&model.clustering_layer)?;
        let map = &self.region_maps[li];
        let mut votes = vec![vec![0usize; self.k_regions]; model.k];
        for &i in indices {
            let m = assign(
                model,
                &source.activations(i)?,
                &self.layout,
                &model.clustering_layer,
            )?;
            for (&l, &r) in m.labels.iter().zip(map) {
                votes[l as usize][r as usize] += 1;
            }
        }
        let mut seen = BTreeSet::new();
        let mut pairs = Vec::new();
        for (j, v) in votes.iter().enumerate() {
            if v.iter().all(|&x| x == 0) {
                continue;
            }
            let best = (0..self.k_regions)
                .max_by(|&a, &b| v[a].cmp(&v[b]).then(b.cmp(&a)))
                .expect("at least one region");
            if !seen.insert(best) {
                return Ok(None);
            }
            pairs.push((j, self.region_name(best)));
        }
        SemanticLabeling::new(pairs).map(Some)
    }

    pub fn truth_json(&self) -> serde_json::Value {
        json!({
            "regions": self.k_regions,
            "region_names": self.region_names(),
            "seed": self.seed,
            "coarsest_resolution": self.coarsest,
            "region_grid": self.region_grid,
            "channel_region": self.channel_regions(),
        })
    }
}

/// Images that share the style entries of the listed regions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupSpec {
    pub members: Vec<usize>,
    pub regions: Vec<usize>,
}

fn check_groups(groups: &[GroupSpec], n_images: usize, k_regions: usize) -> Result<()> {
    let mut used = BTreeSet::new();
    for (g, spec) in groups.iter().enumerate() {
        if spec.members.is_empty() || spec.regions.is_empty() {
            return Err(Error::BadGroupSpec(format!("group {g} is empty")));
        }
        if let Some(m) = spec.members.iter().find(|&&m| m >= n_images) {
            return Err(Error::BadGroupSpec(format!(
                "group {g} names image {m}, fixture has {n_images}"
            )));
        }
        if let Some(r) = spec.regions.iter().find(|&&r| r >= k_regions) {
            return Err(Error::BadGroupSpec(format!(
                "group {g} names region {r}, generator has {k_regions}"
            )));
        }
        for &m in &spec.members {
            for &r in &spec.regions {
                if !used.insert((m, r)) {
                    return Err(Error::BadGroupSpec(format!(
                        "image {m} is in two groups sharing region {r}"
                    )));
                }
            }
        }
    }
    Ok(())
}

pub fn image_id(i: usize) -> String {
    format!("img{i:05}")
}

/// Styles for `n_images` images: independent entries everywhere, then each
/// group's members overwritten with one shared draw on its regions' channels.
pub fn fixture_styles(
    gen: &ToyGenerator,
    n_images: usize,
    groups: &[GroupSpec],
    seed: u64,
) -> Result<Vec<StyleVector>> {
    check_groups(groups, n_images, gen.k_regions)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut styles: Vec<StyleVector> = (0..n_images)
        .map(|i| gen.random_style(image_id(i), &mut rng))
        .collect();
    let owner = gen.channel_regions();
    for spec in groups {
        let shared = gen.random_style("", &mut rng);
        for (c, r) in owner.iter().enumerate() {
            if spec.regions.contains(r) {
                for &m in &spec.members {
                    styles[m].values[c] = shared.values[c];
                }
            }
        }
    }
    Ok(styles)
}

/// For every region independently, a seeded shuffle of all images cut into
/// groups of `group_size` (a short last group is kept if it has 2 or more).
pub fn planted_groups(
    n_images: usize,
    k_regions: usize,
    group_size: usize,
    seed: u64,
) -> Vec<GroupSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut out = Vec::new();
    for r in 0..k_regions {
        let mut ids: Vec<usize> = (0..n_images).collect();
        ids.shuffle(&mut rng);
        for chunk in ids.chunks(group_size.max(1)) {
            if chunk.len() >= 2 {
                let mut members = chunk.to_vec();
                members.sort_unstable();
                out.push(GroupSpec {
                    members,
                    regions: vec![r],
                });
            }
        }
    }
    out
}

/// Writes a bundle of styles and synthesized activations with the generator
/// and group ground truth under the manifest's `fixture` key.
pub fn make_fixture(
    gen: &ToyGenerator,
    n_images: usize,
    groups: &[GroupSpec],
    seed: u64,
    out: impl AsRef<Path>,
) -> Result<Bundle> {
    let styles = fixture_styles(gen, n_images, groups, seed)?;
    let ids: Vec<String> = styles.iter().map(|s| s.image_id.clone()).collect();
    let mut w = BundleWriter::create(out, gen.layout.clone(), ids)?;
    for s in &styles {
        w.write_tensor(&format!("style/{}", s.image_id), &[s.len()], &s.values)?;
        let acts = gen.synthesize(s)?;
        for (spec, t) in gen.layout.layers().iter().zip(&acts.layers) {
            w.write_tensor(
                &format!("act/{}/{}", s.image_id, spec.name),
                &[t.channels, t.height, t.width],
                &t.data,
            )?;
        }
    }
    let mut truth = gen.truth_json();
    truth["images"] = json!(n_images);
    truth["fixture_seed"] = json!(seed);
    truth["groups"] = json!(groups);
    w.set_extra("fixture", truth);
    w.finish()
}

/// Soft attribute predictions for toy images: one attribute per (region,
/// layer), `clamp(mean σ over the region's channels in the layer − 0.5, 0, 1)`.
/// Images sharing a region's style block therefore share its attributes.
/// Attributes are grouped under their region's name.
pub fn toy_attributes(
    gen: &ToyGenerator,
    styles: &[StyleVector],
) -> Result<(AttributePredictions, AttributeGroups)> {
    let layers = gen.layout.layers();
    let mut attrs = Vec::new();
    let mut groups = BTreeMap::new();
    for r in 0..gen.k_regions {
        let names: Vec<String> = layers
            .iter()
            .map(|l| format!("{}_{}", gen.region_name(r), l.name))
            .collect();
        attrs.extend(names.iter().cloned());
        groups.insert(gen.region_name(r), names);
    }
    let owner = gen.channel_regions();
    let mut rows = Vec::with_capacity(styles.len());
    for s in styles {
        if s.len() != owner.len() {
            return Err(Error::LengthMismatch {
                expected: owner.len(),
                actual: s.len(),
            });
        }
        let mut row = Vec::with_capacity(attrs.len());
        for r in 0..gen.k_regions {
            for l in layers {
                let vals: Vec<f64> = l
                    .span()
                    .filter(|&c| owner[c] == r)
                    .map(|c| s.values[c] as f64)
                    .collect();
                let mean = vals.iter().sum::<f64>() / vals.len().max(1) as f64;
                row.push((mean - 0.5).clamp(0.0, 1.0));
            }
        }
        rows.push((s.image_id.clone(), row));
    }
    Ok((
        AttributePredictions::new(attrs, rows, DEFAULT_THRESHOLD)?,
        AttributeGroups(groups),
    ))
}

/// File names of the side tables written next to a fixture bundle.
pub const PREDICTIONS_FILE: &str = "predictions.csv";
pub const ATTRIBUTE_GROUPS_FILE: &str = "attribute_groups.json";
pub const IDENTITIES_FILE: &str = "identities.csv";

/// Writes toy attribute predictions, their groups and identity labels (every
/// image is its own identity) into `dir`.
pub fn write_fixture_tables(
    gen: &ToyGenerator,
    styles: &[StyleVector],
    dir: impl AsRef<Path>,
) -> Result<()> {
    let dir = dir.as_ref();
    let ids: Vec<String> = styles.iter().map(|s| s.image_id.clone()).collect();
    let (preds, groups) = toy_attributes(gen, styles)?;
    let create = |name: &str| {
        let path = dir.join(name);
        std::fs::File::create(&path).map_err(|e| Error::io(&path, e))
    };
    preds.write_csv(&ids, create(PREDICTIONS_FILE)?)?;
    let path = dir.join(ATTRIBUTE_GROUPS_FILE);
    let text = serde_json::to_string_pretty(&groups).expect("groups serialize");
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    let identities = IdentityLabels(ids.iter().map(|i| (i.clone(), i.clone())).collect());
    identities.write_csv(&ids, create(IDENTITIES_FILE)?)
}

/// Rebuilds the generator recorded in a fixture bundle's manifest.
pub fn generator_from_bundle(bundle: &Bundle) -> Result<Option<ToyGenerator>> {
    let Some(f) = bundle.extra("fixture") else {
        return Ok(None);
    };
    let bad = || Error::BadManifest("malformed `fixture` section".into());
    let regions = f["regions"].as_u64().ok_or_else(bad)? as usize;
    let seed = f["seed"].as_u64().ok_or_else(bad)?;
    let layers: Vec<(usize, usize)> = bundle
        .layout()
        .layers()
        .iter()
        .map(|l| (l.resolution, l.channels))
        .collect();
    let gen = make_toy(regions, &layers, seed)?;
    if &gen.layout != bundle.layout() {
        return Err(bad());
    }
    Ok(Some(gen))
}

/// Styles held in memory or drawn per image from a seed.
#[derive(Debug, Clone)]
enum Styles {
    Stored(Vec<StyleVector>),
    Seeded(u64),
}

/// Synthesizes activations on demand instead of storing them.
#[derive(Debug, Clone)]
pub struct ToySource {
    gen: ToyGenerator,
    ids: Vec<String>,
    styles: Styles,
}

impl ToySource {
    pub fn new(gen: ToyGenerator, styles: Vec<StyleVector>) -> Self {
        ToySource {
            gen,
            ids: styles.iter().map(|s| s.image_id.clone()).collect(),
            styles: Styles::Stored(styles),
        }
    }

    /// `n` images with independent random styles; image `i` always gets the
    /// same style for a given seed.
    pub fn seeded(gen: ToyGenerator, n: usize, seed: u64) -> Self {
        ToySource {
            gen,
            ids: (0..n).map(image_id).collect(),
            styles: Styles::Seeded(seed),
        }
    }

    pub fn generator(&self) -> &ToyGenerator {
        &self.gen
    }

    /// All styles, in order.
    pub fn styles(&self) -> Vec<StyleVector> {
        (0..self.ids.len())
            .into_par_iter()
            .map(|i| self.style(i).expect("index in range"))
            .collect()
    }
}

impl ImageSource for ToySource {
    fn layout(&self) -> &LayerLayout {
        &self.gen.layout
    }

    fn image_ids(&self) -> &[String] {
        &self.ids
    }

    fn style(&self, index: usize) -> Result<StyleVector> {
        match &self.styles {
            Styles::Stored(s) => Ok(s[index].clone()),
            Styles::Seeded(seed) => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                rng.set_stream(index as u64);
                Ok(self.gen.random_style(self.ids[index].clone(), &mut rng))
            }
        }
    }

    fn activations(&self, index: usize) -> Result<ActivationStack> {
        self.gen.synthesize(&self.style(index)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gen() -> ToyGenerator {
        make_toy(4, &[(4, 8), (8, 8), (16, 8)], 7).unwrap()
    }

    #[test]
    fn four_regions_are_quadrants() {
        let g = gen();
        #[rustfmt::skip]
        let want = [
            0, 0, 1, 1,
            0, 0, 1, 1,
            2, 2, 3, 3,
            2, 2, 3, 3,
        ];
        assert_eq!(g.region_grid(), &want);
    }

    #[test]
    fn partition_feasibility() {
        assert!(matches!(
            make_toy(17, &[(4, 32)], 0),
            Err(Error::InfeasiblePartition(_))
        ));
        assert!(make_toy(16, &[(4, 16)], 0).is_ok());
        assert!(make_toy(1, &[(4, 8)], 0).is_err());
        assert!(make_toy(4, &[(4, 3)], 0).is_err());
        let g = make_toy(7, &[(4, 7)], 0).unwrap();
        let used: BTreeSet<u32> = g.region_grid().iter().copied().collect();
        assert_eq!(used.len(), 7);
    }

    #[test]
    fn deterministic_basis() {
        assert_eq!(gen(), gen());
        assert_ne!(
            gen().basis(0),
            make_toy(4, &[(4, 8), (8, 8), (16, 8)], 8).unwrap().basis(0)
        );
    }

    #[test]
    fn basis_is_region_local_and_bounded() {
        let g = gen();
        for (li, l) in g.layout().layers().iter().enumerate() {
            let cells = l.cells();
            for c in 0..l.channels {
                for (cell, &b) in g.basis(li)[c * cells..(c + 1) * cells].iter().enumerate() {
                    if g.region_map(li)[cell] as usize == c % 4 {
                        assert!((0.5..1.5).contains(&b));
                    } else {
                        assert_eq!(b, 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn region_maps_nest() {
        let g = gen();
        // cell (h, w) at 16x16 lies inside coarse cell (h/4, w/4)
        for h in 0..16 {
            for w in 0..16 {
                assert_eq!(
                    g.region_map(2)[h * 16 + w],
                    g.region_grid()[(h / 4) * 4 + w / 4]
                );
            }
        }
    }

    #[test]
    fn synthesize_is_linear() {
        let g = gen();
        let ones = StyleVector::new("a", vec![1.0; 24]);
        let a = g.synthesize(&ones).unwrap();
        for (li, t) in a.layers.iter().enumerate() {
            assert_eq!(t.data, g.basis(li));
        }
        let zero = g.synthesize(&StyleVector::new("z", vec![0.0; 24])).unwrap();
        assert!(zero.layers.iter().all(|t| t.data.iter().all(|&x| x == 0.0)));
        let mut two = ones.clone();
        two.values[9] = 2.0;
        let b = g.synthesize(&two).unwrap();
        for c in 0..8 {
            let want: Vec<f32> = a.layers[1]
                .plane(c)
                .iter()
                .map(|x| x * if c == 1 { 2.0 } else { 1.0 })
                .collect();
            assert_eq!(b.layers[1].plane(c), &want[..]);
        }
        assert!(matches!(
            g.synthesize(&StyleVector::new("s", vec![1.0; 3])),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn groups_share_blocks() {
        let g = gen();
        let groups = vec![
            GroupSpec {
                members: vec![0, 1],
                regions: vec![1],
            },
            GroupSpec {
                members: vec![2, 3],
                regions: vec![2],
            },
        ];
        let s = fixture_styles(&g, 4, &groups, 3).unwrap();
        for c in 0..24 {
            let r = g.channel_region(c);
            assert_eq!(s[0].values[c] == s[1].values[c], r == 1, "channel {c}");
            assert_eq!(s[2].values[c] == s[3].values[c], r == 2, "channel {c}");
        }
        let bad = [GroupSpec {
            members: vec![0],
            regions: vec![99],
        }];
        assert!(matches!(
            fixture_styles(&g, 4, &bad, 0),
            Err(Error::BadGroupSpec(_))
        ));
        let overlap = [
            GroupSpec {
                members: vec![0, 1],
                regions: vec![1],
            },
            GroupSpec {
                members: vec![1, 2],
                regions: vec![1, 3],
            },
        ];
        assert!(fixture_styles(&g, 4, &overlap, 0).is_err());
        assert_eq!(fixture_styles(&g, 4, &[], 3).unwrap().len(), 4);
    }

    #[test]
    fn planted_groups_cover_each_region() {
        let groups = planted_groups(64, 4, 4, 0);
        assert_eq!(groups.len(), 64);
        for r in 0..4 {
            let mut all: Vec<usize> = groups
                .iter()
                .filter(|g| g.regions == [r])
                .flat_map(|g| g.members.clone())
                .collect();
            all.sort_unstable();
            assert_eq!(all, (0..64).collect::<Vec<_>>());
        }
    }

    #[test]
    fn fixture_bundle_roundtrip() {
        let tmp = tempfile::tempdir().unwrap();
        let g = gen();
        let b = make_fixture(&g, 6, &planted_groups(6, 4, 3, 1), 1, tmp.path().join("f")).unwrap();
        assert_eq!(b.images().len(), 6);
        let back = generator_from_bundle(&b).unwrap().unwrap();
        assert_eq!(back, g);
        let s = b.style(&image_id(2)).unwrap();
        assert_eq!(
            b.activations(&image_id(2)).unwrap(),
            g.synthesize(&s).unwrap()
        );
    }

    #[test]
    fn seeded_source_is_stable() {
        let src = ToySource::seeded(gen(), 10, 5);
        assert_eq!(src.style(3).unwrap(), src.style(3).unwrap());
        assert_ne!(src.style(3).unwrap().values, src.style(4).unwrap().values);
    }

    #[test]
    fn attributes_follow_shared_blocks() {
        let g = gen();
        let groups = vec![GroupSpec {
            members: vec![0, 1],
            regions: vec![2],
        }];
        let styles = fixture_styles(&g, 4, &groups, 1).unwrap();
        let (preds, attr_groups) = toy_attributes(&g, &styles).unwrap();
        assert_eq!(preds.attributes().len(), 12);
        let cols = attr_groups.columns("mouth", &preds).unwrap();
        assert_eq!(cols.len(), 3);
        for &c in &cols {
            assert_eq!(
                preds.flag("img00000", c).unwrap(),
                preds.flag("img00001", c).unwrap()
            );
        }
    }

    #[test]
    fn tables_reload() {
        let tmp = tempfile::tempdir().unwrap();
        let g = gen();
        let styles = fixture_styles(&g, 5, &[], 2).unwrap();
        write_fixture_tables(&g, &styles, tmp.path()).unwrap();
        let (want, _) = toy_attributes(&g, &styles).unwrap();
        let got = AttributePredictions::load(tmp.path().join(PREDICTIONS_FILE), DEFAULT_THRESHOLD)
            .unwrap();
        assert_eq!(got, want);
        let groups = AttributeGroups::load(tmp.path().join(ATTRIBUTE_GROUPS_FILE)).unwrap();
        assert_eq!(groups.0.len(), 4);
        let ids = IdentityLabels::load(tmp.path().join(IDENTITIES_FILE)).unwrap();
        assert_eq!(ids.identity("img00004").unwrap(), "img00004");
    }
}
