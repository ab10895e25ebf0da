mod common;

use common::*;
use ris_core::attribution::{contribution_single, Normalize};
use ris_core::evaluation::{ams, trsi_iou, AttributeGroups, AttributePredictions, IdentityLabels};
use ris_core::kmeans::assign;
use ris_core::retrieval::{build_index, Direction, IndexConfig, MaskMode, RetrievalIndex};
use ris_core::store::{Bundle, ImageSource};
use ris_core::toy::{make_fixture, planted_groups, ToySource};
use ris_core::Error;

#[test]
fn clusters_recover_regions() {
    let p = planted(16, 3);
    let layer = p.model.clustering_layer.clone();
    let li = p.gen.layout().layer_index(&layer).unwrap();
    for i in 0..16 {
        let m = assign(
            &p.model,
            &p.source.activations(i).unwrap(),
            p.gen.layout(),
            &layer,
        )
        .unwrap();
        let truth: Vec<usize> = p.gen.region_map(li).iter().map(|&r| r as usize).collect();
        let got: Vec<usize> = m.labels.iter().map(|&l| l as usize).collect();
        assert_eq!(ari(&got, &truth), 1.0);
    }
}

#[test]
fn toy_scores_are_region_exclusive() {
    let p = planted(8, 4);
    let owner = p.gen.channel_regions();
    for i in 0..8 {
        let a = p.source.activations(i).unwrap();
        let m = assign(&p.model, &a, p.gen.layout(), &p.model.clustering_layer).unwrap();
        let c = contribution_single(&a, &m, p.gen.layout(), Normalize::None).unwrap();
        for (ch, &r) in owner.iter().enumerate() {
            let row = p.labeling.row(&p.gen.region_name(r)).unwrap();
            for j in 0..4 {
                assert_eq!(c.get(j, ch) > 0.0, j == row, "image {i} channel {ch}");
            }
        }
    }
}

fn index(p: &Planted) -> RetrievalIndex {
    build_index(
        &p.source,
        &p.model,
        &p.labeling,
        &IndexConfig::new(features(), 0.1),
    )
    .unwrap()
}

#[test]
fn structure_and_self_retrieval() {
    let p = planted(12, 5);
    let idx = index(&p);
    assert_eq!(idx.len(), 12);
    assert_eq!(idx.features(), vec!["eyes", "nose", "mouth", "hair"]);
    assert_eq!(idx.matrix("eyes").unwrap().len(), 12 * 24);
    // group mates share a feature's block exactly, so self ties with them
    for f in features() {
        for id in idx.ids() {
            let hits = idx.query_id(id, &f, 12, Direction::Nearest, false).unwrap();
            let own = hits.iter().position(|h| &h.image_id == id).unwrap();
            assert!(hits[own].distance <= 1e-6);
            assert!(hits[..own].iter().all(|h| h.distance == hits[own].distance));
        }
    }
    let all = idx
        .query_id("img00000", "eyes", 12, Direction::Nearest, false)
        .unwrap();
    let mut seen: Vec<usize> = all.iter().map(|h| h.index).collect();
    seen.sort_unstable();
    assert_eq!(seen, (0..12).collect::<Vec<_>>());
    assert!(matches!(
        idx.query_id("img00000", "ears", 1, Direction::Nearest, false),
        Err(Error::UnknownFeature(_))
    ));
    assert!(matches!(
        idx.query_id("img00000", "eyes", 13, Direction::Nearest, false),
        Err(Error::BadK { .. })
    ));
    assert!(matches!(
        idx.query_id("img00000", "eyes", 0, Direction::Nearest, false),
        Err(Error::BadK { .. })
    ));
}

#[test]
fn strict_self_retrieval_without_groups() {
    let gen = ris_core::toy::make_toy(4, &TOY_LAYERS, 12).unwrap();
    let src = ToySource::seeded(gen.clone(), 24, 12);
    let model =
        ris_core::kmeans::fit_source(&src, None, None, &ris_core::kmeans::FitConfig::new(4, 12))
            .unwrap();
    let all: Vec<usize> = (0..24).collect();
    let labeling = gen.label_clusters(&model, &src, &all).unwrap().unwrap();
    let idx = build_index(&src, &model, &labeling, &IndexConfig::new(features(), 0.1)).unwrap();
    for f in features() {
        for (i, id) in idx.ids().iter().enumerate() {
            let hits = idx.query_id(id, &f, 1, Direction::Nearest, false).unwrap();
            assert_eq!(hits[0].index, i);
            assert!(hits[0].distance <= 1e-6);
        }
    }
}

#[test]
fn planted_precision() {
    let p = planted(32, 6);
    let idx = index(&p);
    for r in 0..4 {
        let f = p.gen.region_name(r);
        for i in 0..32 {
            let mut want = mates(&p.groups, r, i);
            let hits = idx
                .query_id(&idx.ids()[i], &f, want.len(), Direction::Nearest, true)
                .unwrap();
            let mut got: Vec<usize> = hits.iter().map(|h| h.index).collect();
            got.sort_unstable();
            want.sort_unstable();
            assert_eq!(got, want, "feature {f} query {i}");
        }
    }
}

#[test]
fn four_image_fixture() {
    // {0,1} share the eyes block, {2,3} share the nose block
    let gen = ris_core::toy::make_toy(4, &TOY_LAYERS, 2).unwrap();
    let groups = vec![
        ris_core::toy::GroupSpec {
            members: vec![0, 1],
            regions: vec![0],
        },
        ris_core::toy::GroupSpec {
            members: vec![2, 3],
            regions: vec![1],
        },
    ];
    let styles = ris_core::toy::fixture_styles(&gen, 4, &groups, 2).unwrap();
    let src = ToySource::new(gen.clone(), styles);
    let model =
        ris_core::kmeans::fit_source(&src, None, None, &ris_core::kmeans::FitConfig::new(4, 2))
            .unwrap();
    let labeling = gen
        .label_clusters(&model, &src, &[0, 1, 2, 3])
        .unwrap()
        .unwrap();
    let idx = build_index(&src, &model, &labeling, &IndexConfig::new(features(), 0.1)).unwrap();
    let hit = idx
        .query_id("img00000", "eyes", 1, Direction::Nearest, true)
        .unwrap();
    assert_eq!(hit[0].index, 1);
    let hit = idx
        .query_id("img00002", "nose", 1, Direction::Nearest, true)
        .unwrap();
    assert_eq!(hit[0].index, 3);
}

#[test]
fn furthest_reverses_nearest() {
    let p = planted(20, 7);
    let idx = index(&p);
    for f in features() {
        let q = idx.embedding(&f, 3).unwrap().to_vec();
        let near = idx.query(&q, &f, 20, Direction::Nearest, None).unwrap();
        let mut far = idx.query(&q, &f, 20, Direction::Furthest, None).unwrap();
        far.reverse();
        assert_eq!(near, far);
    }
}

#[test]
fn rebuild_is_identical_and_save_open_roundtrips() {
    let p = planted(10, 8);
    let a = index(&p);
    let b = index(&p);
    for f in features() {
        assert_eq!(a.matrix(&f).unwrap(), b.matrix(&f).unwrap());
    }
    let tmp = tempfile::tempdir().unwrap();
    a.save(tmp.path().join("idx")).unwrap();
    let c = RetrievalIndex::open(tmp.path().join("idx")).unwrap();
    assert_eq!(c.ids(), a.ids());
    assert_eq!(c.provenance(), a.provenance());
    for f in features() {
        assert_eq!(c.matrix(&f).unwrap(), a.matrix(&f).unwrap());
    }
    let q = a.embedding("hair", 4).unwrap().to_vec();
    assert_eq!(
        c.query(&q, "hair", 5, Direction::Nearest, None).unwrap(),
        a.query(&q, "hair", 5, Direction::Nearest, None).unwrap()
    );
}

#[test]
fn external_query_matches_stored_embedding() {
    let p = planted(10, 9);
    let idx = index(&p);
    let e = idx
        .embed_external(
            &p.source.style(6).unwrap(),
            &p.source.activations(6).unwrap(),
        )
        .unwrap();
    for emb in e {
        assert_eq!(emb.values, idx.embedding(&emb.feature, 6).unwrap());
    }
}

#[test]
fn batch_mask_index_builds() {
    let p = planted(8, 10);
    let mut cfg = IndexConfig::new(features(), 0.1);
    cfg.mask_mode = MaskMode::Batch;
    let idx = build_index(&p.source, &p.model, &p.labeling, &cfg).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    idx.save(tmp.path()).unwrap();
    let back = RetrievalIndex::open(tmp.path()).unwrap();
    let e = back
        .embed_external(
            &p.source.style(2).unwrap(),
            &p.source.activations(2).unwrap(),
        )
        .unwrap();
    assert_eq!(e[0].values, idx.embedding(&e[0].feature, 2).unwrap());
}

#[test]
fn missing_activations_is_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let gen = ris_core::toy::make_toy(4, &TOY_LAYERS, 1).unwrap();
    let b = make_fixture(
        &gen,
        4,
        &planted_groups(4, 4, 2, 1),
        1,
        tmp.path().join("b"),
    )
    .unwrap();
    let p = planted(8, 1);
    std::fs::remove_file(b.dir().join(&b.record("act/img00002/layer1").unwrap().file)).unwrap();
    // rewrite the manifest without that tensor
    let mut manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(b.dir().join("manifest.json")).unwrap())
            .unwrap();
    manifest["tensors"]
        .as_array_mut()
        .unwrap()
        .retain(|t| t["name"] != "act/img00002/layer1");
    std::fs::write(b.dir().join("manifest.json"), manifest.to_string()).unwrap();
    let b = Bundle::load(b.dir()).unwrap();
    let err = build_index(
        &b,
        &p.model,
        &p.labeling,
        &IndexConfig::new(features(), 0.1),
    )
    .unwrap_err();
    assert!(matches!(err, Error::MissingActivations(id) if id == "img00002"));
}

#[test]
fn metrics_on_index() {
    let p = planted(16, 11);
    let idx = index(&p);
    let ids = idx.ids().to_vec();
    // one constant attribute: every comparison agrees
    let preds = AttributePredictions::new(
        vec!["Big_Nose".into(), "Pointy_Nose".into()],
        ids.iter().map(|id| (id.clone(), vec![0.9, 0.1])),
        0.5,
    )
    .unwrap();
    let groups = AttributeGroups::default();
    assert_eq!(ams(&idx, &ids, "nose", &preds, &groups, 15).unwrap(), 1.0);
    let identities = IdentityLabels(ids.iter().map(|i| (i.clone(), i.clone())).collect());
    assert_eq!(
        trsi_iou(&idx, &ids[0], "eyes", "eyes", 3, &identities).unwrap(),
        1.0
    );
    let v = trsi_iou(&idx, &ids[0], "eyes", "hair", 3, &identities).unwrap();
    assert!((0.0..=1.0).contains(&v));
}
