use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{bail, Context, Result};
use log::{info, warn};
use serde_json::json;

use ris_core::attribution::{contribution_batch_source, score_image};
use ris_core::evaluation::{
    ams, intersection_ratio, median, sample_indices, trsi_all, AttributeGroups,
    AttributePredictions, IdentityLabels,
};
use ris_core::kmeans::{fit_source, ClusterModel, FitConfig, SemanticLabeling};
use ris_core::par::*;
use ris_core::retrieval::{build_index, Direction, Hit, IndexConfig, RetrievalIndex};
use ris_core::store::{read_f32_file, write_f32_file, Bundle, BundleWriter, ImageSource};
use ris_core::toy::{
    generator_from_bundle, make_fixture, make_toy, planted_groups, write_fixture_tables, GroupSpec,
};
use ris_core::transfer::{transfer_pair, TransferConfig, TransferImage};

use crate::{
    AmsArgs, AnalyzeCommand, Cli, ClusterArgs, Command, EvalCommand, FixtureArgs, Format,
    IndexBuildArgs, IndexCommand, IndexQueryArgs, ScoreArgs, SubmembershipArgs, TransferArgs,
    TrsiArgs,
};

/// α outside this range is accepted but flagged.
const ALPHA_WARN: (f64, f64) = (-2.0, 3.0);

/// Images scored per parallel chunk before writing.
const SCORE_CHUNK: usize = 64;

pub fn run(cli: &Cli) -> Result<()> {
    let seed = cli.seed;
    match &cli.command {
        Command::Cluster(a) => cluster(a, seed),
        Command::Score(a) => score(a),
        Command::Transfer(a) => transfer(a),
        Command::Index(IndexCommand::Build(a)) => index_build(a),
        Command::Index(IndexCommand::Query(a)) => index_query(a),
        Command::Eval(EvalCommand::Ams(a)) => eval_ams(a, seed),
        Command::Eval(EvalCommand::Trsi(a)) => eval_trsi(a, seed),
        Command::Analyze(AnalyzeCommand::Submembership(a)) => submembership(a, seed),
        Command::Fixture(a) => fixture(a, seed),
    }
}

fn load_bundle(path: &Path) -> Result<Bundle> {
    Bundle::load(path).with_context(|| format!("loading bundle {}", path.display()))
}

fn load_model(path: &Path) -> Result<ClusterModel> {
    let (model, _) = ClusterModel::load(path)
        .with_context(|| format!("loading cluster model {}", path.display()))?;
    Ok(model)
}

fn load_labels(path: &Path, k: usize) -> Result<SemanticLabeling> {
    let labeling = SemanticLabeling::load(path)
        .with_context(|| format!("loading labeling {}", path.display()))?;
    labeling.check_against(k)?;
    Ok(labeling)
}

fn open_index(path: &Path) -> Result<RetrievalIndex> {
    RetrievalIndex::open(path).with_context(|| format!("opening index {}", path.display()))
}

fn print(text: &str) -> Result<()> {
    let mut out = std::io::stdout().lock();
    out.write_all(text.as_bytes())?;
    out.flush()?;
    Ok(())
}

fn print_json(value: &serde_json::Value) -> Result<()> {
    print(&(serde_json::to_string_pretty(value)? + "\n"))
}

fn cluster(a: &ClusterArgs, seed: u64) -> Result<()> {
    let bundle = load_bundle(&a.bundle)?;
    let mut cfg = FitConfig::new(a.k as usize, seed);
    cfg.max_iter = a.max_iter;
    cfg.tol = a.tol;
    let model = fit_source(&bundle, a.layer.as_deref(), a.sample, &cfg)?;
    info!(
        "k = {} on layer {}: objective {:.6} after {} iterations",
        model.k, model.clustering_layer, model.objective, model.iterations_run
    );
    model
        .save(&a.out, bundle.layout())
        .with_context(|| format!("writing cluster model {}", a.out.display()))?;

    let mut labels = json!(null);
    if let Some(path) = &a.labels_out {
        let labeling = fixture_labeling(&bundle, &model)?
            .unwrap_or_else(|| SemanticLabeling::generic(model.k));
        fs::write(path, labeling.to_json())
            .with_context(|| format!("writing {}", path.display()))?;
        labels = json!(labeling.features());
    }
    print_json(&json!({
        "id": model.id(),
        "k": model.k,
        "clustering_layer": model.clustering_layer,
        "objective": model.objective,
        "iterations_run": model.iterations_run,
        "seed": model.seed,
        "labels": labels,
    }))
}

/// Region names by majority vote when the bundle carries fixture ground truth.
fn fixture_labeling(bundle: &Bundle, model: &ClusterModel) -> Result<Option<SemanticLabeling>> {
    let Some(gen) = generator_from_bundle(bundle)? else {
        return Ok(None);
    };
    if gen.regions() != model.k {
        warn!(
            "k = {} differs from the fixture's {} regions; using generic names",
            model.k,
            gen.regions()
        );
        return Ok(None);
    }
    let indices: Vec<usize> = (0..bundle.len()).collect();
    let labeling = gen.label_clusters(model, bundle, &indices)?;
    if labeling.is_none() {
        warn!("clusters do not map one-to-one onto fixture regions; using generic names");
    }
    Ok(labeling)
}

fn score(a: &ScoreArgs) -> Result<()> {
    let bundle = load_bundle(&a.bundle)?;
    let model = load_model(&a.clusters)?;
    let labeling = a
        .labels
        .as_deref()
        .map(|p| load_labels(p, model.k))
        .transpose()?;
    let layout = bundle.layout();
    let spec = layout.layer(&model.clustering_layer)?;
    let mut w = BundleWriter::create(&a.out, layout.clone(), bundle.images().to_vec())
        .with_context(|| format!("creating {}", a.out.display()))?;
    let ids = bundle.images().to_vec();
    for chunk in ids.chunks(SCORE_CHUNK) {
        let scored = chunk
            .par_iter()
            .map(|id| {
                let acts = bundle.activations(id)?;
                score_image(&acts, &model, layout, a.normalize)
            })
            .collect::<ris_core::Result<Vec<_>>>()?;
        for (id, (m, c)) in chunk.iter().zip(scored) {
            w.write_tensor(
                &format!("membership/{id}"),
                &[model.k, spec.resolution, spec.resolution],
                &m.one_hot(),
            )?;
            w.write_tensor(&format!("contrib/{id}"), &[c.k, c.channels], &c.to_f32())?;
        }
    }
    if a.batch {
        let all: Vec<usize> = (0..bundle.len()).collect();
        let b = contribution_batch_source(&bundle, &model, &all)?;
        w.write_tensor("contrib/batch", &[b.k, b.channels], &b.to_f32())?;
    }
    w.set_extra(
        "contrib",
        json!({
            "mode": "single",
            "normalize": a.normalize.as_str(),
            "batch": a.batch,
            "cluster_id": model.id(),
            "clustering_layer": model.clustering_layer,
            "features": labeling.as_ref().map(|l| l.features()),
        }),
    );
    w.finish()?;
    print_json(&json!({ "images": ids.len(), "k": model.k, "out": a.out }))
}

fn transfer(a: &TransferArgs) -> Result<()> {
    if !(ALPHA_WARN.0..=ALPHA_WARN.1).contains(&a.alpha) {
        warn!(
            "alpha = {} lies outside [{}, {}]",
            a.alpha, ALPHA_WARN.0, ALPHA_WARN.1
        );
    }
    let bundle = load_bundle(&a.bundle)?;
    let model = load_model(&a.clusters)?;
    let labeling = load_labels(&a.labels, model.k)?;
    let layout = bundle.layout();
    let (ss, sa) = (bundle.style(&a.source)?, bundle.activations(&a.source)?);
    let (rs, ra) = (
        bundle.style(&a.reference)?,
        bundle.activations(&a.reference)?,
    );
    let cfg = TransferConfig {
        tau: a.tau,
        alpha: a.alpha,
        restrict_coarse: !a.no_restrict,
    };
    let t = transfer_pair(
        TransferImage {
            style: &ss,
            activations: &sa,
        },
        TransferImage {
            style: &rs,
            activations: &ra,
        },
        &model,
        layout,
        &labeling,
        &a.feature,
        &cfg,
        a.hard,
        a.normalize,
    )?;
    let out = &t.result.style.values;
    write_f32_file(&a.out, out).with_context(|| format!("writing {}", a.out.display()))?;

    // Report: channels with the largest moves, ties to the lower channel.
    let mut moved: Vec<(usize, f64)> = ss
        .values
        .iter()
        .zip(out)
        .map(|(&s, &g)| (g as f64 - s as f64).abs())
        .enumerate()
        .filter(|&(_, d)| d > 0.0)
        .collect();
    moved.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
    moved.truncate(a.report_top);
    let mut text = String::from("rank\tchannel\tlayer\tsource\treference\tresult\tmask\n");
    for (rank, (c, _)) in moved.iter().enumerate() {
        let layer = layout
            .layers()
            .iter()
            .find(|l| l.span().contains(c))
            .map_or("", |l| l.name.as_str());
        text += &format!(
            "{}\t{c}\t{layer}\t{}\t{}\t{}\t{}\n",
            rank + 1,
            ss.values[*c],
            rs.values[*c],
            out[*c],
            t.mask_row[*c]
        );
    }
    print(&text)
}

fn index_build(a: &IndexBuildArgs) -> Result<()> {
    let bundle = load_bundle(&a.bundle)?;
    let model = load_model(&a.clusters)?;
    let labeling = load_labels(&a.labels, model.k)?;
    let features = if a.features.is_empty() {
        labeling
            .features()
            .into_iter()
            .map(str::to_string)
            .collect()
    } else {
        a.features.clone()
    };
    let mut cfg = IndexConfig::new(features, a.tau);
    cfg.normalize = a.normalize;
    cfg.mask_mode = a.mask_mode;
    cfg.half_precision = a.half;
    let idx = build_index(&bundle, &model, &labeling, &cfg)?;
    idx.save(&a.out)
        .with_context(|| format!("writing index {}", a.out.display()))?;
    info!("indexed {} images × {} dims", idx.len(), idx.dim());
    print_json(&json!({
        "images": idx.len(),
        "dim": idx.dim(),
        "features": idx.features(),
        "provenance": idx.provenance(),
    }))
}

fn index_query(a: &IndexQueryArgs) -> Result<()> {
    let idx = open_index(&a.index)?;
    let k = a.top as usize;
    let dir = if a.furthest {
        Direction::Furthest
    } else {
        Direction::Nearest
    };
    let hits = if let Some(path) = &a.query_bundle {
        let bundle = load_bundle(path)?;
        let style = bundle.style(&a.query)?;
        let acts = bundle.activations(&a.query)?;
        let emb = idx
            .embed_external(&style, &acts)?
            .into_iter()
            .find(|e| e.feature == a.feature)
            .with_context(|| format!("feature `{}` is not indexed", a.feature))?;
        if a.exclude_self {
            warn!("--exclude-self ignored for a query embedded from another bundle");
        }
        idx.query(&emb.values, &a.feature, k, dir, None)?
    } else if idx.position(&a.query).is_some() {
        idx.query_id(&a.query, &a.feature, k, dir, a.exclude_self)?
    } else if Path::new(&a.query).is_file() {
        let q = read_f32_file(&a.query)?;
        if a.exclude_self {
            warn!("--exclude-self ignored for an embedding file query");
        }
        idx.query(&q, &a.feature, k, dir, None)?
    } else {
        bail!("`{}` is neither an indexed image id nor a file", a.query);
    };
    print(&render_hits(&hits, a, dir))
}

fn render_hits(hits: &[Hit], a: &IndexQueryArgs, dir: Direction) -> String {
    match a.format {
        Format::Tsv => hits
            .iter()
            .enumerate()
            .map(|(r, h)| format!("{}\t{}\t{}\n", r + 1, h.image_id, h.distance))
            .collect(),
        Format::Json => {
            let rows: Vec<_> = hits
                .iter()
                .enumerate()
                .map(|(r, h)| json!({ "rank": r + 1, "image_id": h.image_id, "distance": h.distance }))
                .collect();
            let v = json!({
                "query": a.query,
                "feature": a.feature,
                "direction": if dir == Direction::Furthest { "furthest" } else { "nearest" },
                "hits": rows,
            });
            serde_json::to_string_pretty(&v).expect("hits serialize") + "\n"
        }
    }
}

fn eval_ams(a: &AmsArgs, seed: u64) -> Result<()> {
    let idx = open_index(&a.index)?;
    let preds = AttributePredictions::load(&a.predictions, a.threshold)
        .with_context(|| format!("loading predictions {}", a.predictions.display()))?;
    let groups = match &a.attribute_groups {
        Some(p) => AttributeGroups::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => AttributeGroups::default(),
    };
    let features: Vec<String> = if a.features.is_empty() {
        idx.features()
            .into_iter()
            .filter(|f| groups.0.contains_key(*f))
            .map(str::to_string)
            .collect()
    } else {
        a.features.clone()
    };
    if features.is_empty() {
        bail!("no indexed feature has an attribute group");
    }
    let picked = sample_indices(idx.len(), a.queries.unwrap_or(idx.len()), seed);
    let queries: Vec<String> = picked.iter().map(|&i| idx.ids()[i].clone()).collect();
    let mut text = String::new();
    for f in &features {
        let score = ams(&idx, &queries, f, &preds, &groups, a.top)
            .with_context(|| format!("AMS for `{f}`"))?;
        text += &format!("{f}\t{score}\n");
    }
    print(&text)
}

fn eval_trsi(a: &TrsiArgs, seed: u64) -> Result<()> {
    let idx = open_index(&a.index)?;
    let ids = IdentityLabels::load(&a.identities)
        .with_context(|| format!("loading identities {}", a.identities.display()))?;
    let features: Vec<String> = if a.features.is_empty() {
        idx.features().into_iter().map(str::to_string).collect()
    } else {
        a.features.clone()
    };
    if features.len() < 2 {
        bail!(
            "TRSI-IoU needs at least two features, got {}",
            features.len()
        );
    }
    if a.queries > idx.len() {
        warn!("{} queries requested, index holds {}", a.queries, idx.len());
    }
    let picked = sample_indices(idx.len(), a.queries, seed);
    let queries: Vec<String> = picked.iter().map(|&i| idx.ids()[i].clone()).collect();
    let values = trsi_all(&idx, &queries, &features, a.set_size, &ids)?;
    let mut text = String::new();
    for v in &values {
        text += &format!("{}\t{}\t{}\t{}\n", v.query, v.feature_a, v.feature_b, v.iou);
    }
    let all: Vec<f64> = values.iter().map(|v| v.iou).collect();
    if let Some(m) = median(&all) {
        info!("median TRSI-IoU over {} values: {m:.4}", all.len());
    }
    print(&text)
}

fn submembership(a: &SubmembershipArgs, seed: u64) -> Result<()> {
    let bundle = load_bundle(&a.bundle)?;
    let model = load_model(&a.clusters)?;
    let labeling = load_labels(&a.labels, model.k)?;
    let row = labeling.row(&a.feature)?;
    let picked = sample_indices(bundle.len(), a.sample.unwrap_or(bundle.len()), seed);
    let layout = bundle.layout();
    let contribs = picked
        .par_iter()
        .map(|&i| {
            let acts = ImageSource::activations(&bundle, i)?;
            let (_, c) = score_image(&acts, &model, layout, a.normalize)?;
            Ok(c.row(row).to_vec())
        })
        .collect::<ris_core::Result<Vec<_>>>()?;
    let ks: Vec<usize> = a
        .k_list
        .iter()
        .copied()
        .filter(|&k| k <= contribs.len())
        .collect();
    for k in a.k_list.iter().filter(|&&k| k > contribs.len()) {
        warn!("skipping K = {k}: only {} images", contribs.len());
    }
    if ks.is_empty() {
        bail!("no K in --k-list fits {} images", contribs.len());
    }
    let report = intersection_ratio(&contribs, &a.feature, &ks, a.top_n, seed)?;
    let text: String = report
        .ratios
        .iter()
        .map(|(k, r)| format!("{k}\t{r}\n"))
        .collect();
    print(&text)
}

fn fixture(a: &FixtureArgs, seed: u64) -> Result<()> {
    let gen = make_toy(a.regions as usize, &a.layers, seed)?;
    let groups: Vec<GroupSpec> = match (&a.groups, a.group_size) {
        (Some(p), _) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).map_err(|e| ris_core::Error::BadGroupSpec(e.to_string()))?
        }
        (None, Some(g)) => planted_groups(a.images, gen.regions(), g, seed),
        (None, None) => Vec::new(),
    };
    let styles_seed = seed ^ 0x00f1_c7d2_5eed;
    let bundle = make_fixture(&gen, a.images, &groups, styles_seed, &a.out)
        .with_context(|| format!("writing fixture {}", a.out.display()))?;
    let styles = (0..bundle.len())
        .map(|i| ImageSource::style(&bundle, i))
        .collect::<ris_core::Result<Vec<_>>>()?;
    write_fixture_tables(&gen, &styles, &a.out)?;
    print_json(&json!({
        "images": bundle.len(),
        "regions": gen.region_names(),
        "total_channels": gen.layout().total_channels(),
        "groups": groups.len(),
        "out": a.out,
    }))
}
