#![allow(dead_code)]

use ris_core::attribution::ContributionMatrix;
use ris_core::kmeans::{fit_source, ClusterModel, FitConfig, MembershipMap, SemanticLabeling};
use ris_core::store::{ActivationStack, LayerLayout};
use ris_core::toy::{fixture_styles, make_toy, planted_groups, GroupSpec, ToyGenerator, ToySource};

/// Adjusted Rand index between two labelings of the same points.
pub fn ari(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len());
    let ka = a.iter().max().map_or(0, |m| m + 1);
    let kb = b.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![vec![0u64; kb]; ka];
    for (&x, &y) in a.iter().zip(b) {
        table[x][y] += 1;
    }
    let c2 = |n: u64| (n * n.saturating_sub(1)) as f64 / 2.0;
    let index: f64 = table.iter().flatten().map(|&n| c2(n)).sum();
    let rows: f64 = table.iter().map(|r| c2(r.iter().sum())).sum();
    let cols: f64 = (0..kb).map(|j| c2(table.iter().map(|r| r[j]).sum())).sum();
    let total = c2(a.len() as u64);
    let expected = rows * cols / total;
    let max = (rows + cols) / 2.0;
    if max == expected {
        return 1.0;
    }
    (index - expected) / (max - expected)
}

/// Straight quadruple loop: layer, channel, cell, cluster.
pub fn naive_contribution(
    items: &[(ActivationStack, MembershipMap)],
    layout: &LayerLayout,
    per_layer_mean: bool,
) -> Vec<f64> {
    let k = items[0].1.k;
    let total = layout.total_channels();
    let mut out = vec![0.0; k * total];
    for (a, m) in items {
        for (li, spec) in layout.layers().iter().enumerate() {
            let t = &a.layers[li];
            let r = spec.resolution;
            for c in 0..spec.channels {
                for h in 0..r {
                    for w in 0..r {
                        let sh = h * m.height / r;
                        let sw = w * m.width / r;
                        let label = m.labels[sh * m.width + sw] as usize;
                        for j in 0..k {
                            if j == label {
                                let x = t.get(c, h, w) as f64;
                                out[j * total + spec.style_offset + c] += x * x;
                            }
                        }
                    }
                }
            }
        }
    }
    if per_layer_mean {
        for spec in layout.layers() {
            let d = (items.len() * spec.cells()) as f64;
            for j in 0..k {
                for c in spec.span() {
                    out[j * total + c] /= d;
                }
            }
        }
    }
    out
}

pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-30)
}

pub fn matrix_close(m: &ContributionMatrix, want: &[f64], tol: f64) -> bool {
    m.scores.len() == want.len()
        && m.scores
            .iter()
            .zip(want)
            .all(|(&a, &b)| rel_close(a, b, tol))
}

pub const TOY_LAYERS: [(usize, usize); 3] = [(4, 8), (8, 8), (16, 8)];

pub struct Planted {
    pub gen: ToyGenerator,
    pub source: ToySource,
    pub groups: Vec<GroupSpec>,
    pub model: ClusterModel,
    pub labeling: SemanticLabeling,
}

/// Four-region toy with `n` images; every region independently groups the
/// images in fours.
pub fn planted(n: usize, seed: u64) -> Planted {
    let gen = make_toy(4, &TOY_LAYERS, seed).unwrap();
    let groups = planted_groups(n, 4, 4, seed);
    let styles = fixture_styles(&gen, n, &groups, seed).unwrap();
    let source = ToySource::new(gen.clone(), styles);
    let model = fit_source(&source, None, None, &FitConfig::new(4, seed)).unwrap();
    let all: Vec<usize> = (0..n).collect();
    let labeling = gen
        .label_clusters(&model, &source, &all)
        .unwrap()
        .expect("clusters map one-to-one onto regions");
    Planted {
        gen,
        source,
        groups,
        model,
        labeling,
    }
}

pub fn features() -> Vec<String> {
    ["eyes", "nose", "mouth", "hair"]
        .iter()
        .map(|s| s.to_string())
        .collect()
}

/// Members sharing `region` with image `i`, excluding `i`.
pub fn mates(groups: &[GroupSpec], region: usize, i: usize) -> Vec<usize> {
    groups
        .iter()
        .find(|g| g.regions.contains(&region) && g.members.contains(&i))
        .map(|g| g.members.iter().copied().filter(|&m| m != i).collect())
        .unwrap_or_default()
}

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ris_core::store::ActivationTensor;

/// A tiny random attribution instance: 2 layers, up to 4 channels each,
/// resolutions up to 4, up to 3 clusters and up to 2 images.
pub fn tiny_instance(seed: u64) -> (LayerLayout, Vec<(ActivationStack, MembershipMap)>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r0 = rng.gen_range(1..=4usize);
    let r1 = rng.gen_range(r0..=4usize);
    let layout = LayerLayout::new(
        [
            ("a", rng.gen_range(1..=4usize), r0),
            ("b", rng.gen_range(1..=4usize), r1),
        ],
        1,
    )
    .unwrap();
    let k = rng.gen_range(1..=3usize);
    let mres = if rng.gen_bool(0.5) { r0 } else { r1 };
    let n = rng.gen_range(1..=2usize);
    let items = (0..n)
        .map(|i| {
            let id = format!("i{i}");
            let layers = layout
                .layers()
                .iter()
                .map(|l| ActivationTensor {
                    channels: l.channels,
                    height: l.resolution,
                    width: l.resolution,
                    data: (0..l.activation_len())
                        .map(|_| rng.gen_range(-2.0f32..2.0))
                        .collect(),
                })
                .collect();
            let m = MembershipMap {
                image_id: id.clone(),
                k,
                height: mres,
                width: mres,
                labels: (0..mres * mres)
                    .map(|_| rng.gen_range(0..k as u32))
                    .collect(),
            };
            (
                ActivationStack {
                    image_id: id,
                    layers,
                },
                m,
            )
        })
        .collect();
    (layout, items)
}

/// `k` well-separated directions in `dim` dimensions with `per` noisy points
/// each; returns points and true labels.
pub fn planted_clusters(k: usize, per: usize, dim: usize, seed: u64) -> (Vec<f32>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::new();
    let mut labels = Vec::new();
    for j in 0..k {
        for _ in 0..per {
            for d in 0..dim {
                let base = if d % k == j { 1.0 } else { 0.0 };
                points.push(base + rng.gen_range(-0.1f32..0.1));
            }
            labels.push(j);
        }
    }
    (points, labels)
}
