use std::collections::BTreeMap;
use std::path::PathBuf;

use lowshot_core::classifier::{cosine_logits, imprint_novel_weights, normalize_embedding};
use lowshot_core::datamodel::{load_detections, load_manifest, save_detections};
use lowshot_core::detsim::{generate_dataset, SceneSpec};
use lowshot_core::rng::substream;
use lowshot_core::CosineHead;
use serde::Deserialize;

fn repo_file(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

#[test]
fn example_manifest_round_trips_and_matches_generator() {
    let path = repo_file("data/shapes12/manifest.json");
    let m = load_manifest(&path).unwrap();
    assert_eq!((m.num_classes(), m.images().len()), (12, 200));
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("manifest.json");
    m.save(&out).unwrap();
    assert_eq!(load_manifest(&out).unwrap(), m);
    let regenerated = generate_dataset(&SceneSpec::shapes(12), 200, 0).unwrap();
    assert_eq!(regenerated.manifest, m);
}

#[test]
fn example_detections_round_trip() {
    let m = load_manifest(&repo_file("data/shapes12/manifest.json")).unwrap();
    let dets = load_detections(&repo_file("data/shapes12/detections.json"), &m).unwrap();
    assert!(dets.iter().all(|d| d.scores.len() == 12));
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("detections.json");
    save_detections(&out, &dets).unwrap();
    assert_eq!(load_detections(&out, &m).unwrap(), dets);
}

#[derive(Deserialize)]
struct ToySet {
    dim: usize,
    num_foreground: usize,
    base_class_ids: Vec<usize>,
    shots: BTreeMap<usize, Vec<Vec<f64>>>,
}

#[test]
fn imprinted_rows_classify_their_own_shots() {
    let text =
        std::fs::read_to_string(PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data/toy_embeddings.json"))
            .unwrap();
    let toy: ToySet = serde_json::from_str(&text).unwrap();
    let shots: BTreeMap<usize, Vec<Vec<f64>>> =
        toy.shots.iter().map(|(&c, v)| (c, v.iter().map(|e| normalize_embedding(e).vector).collect())).collect();
    let head = CosineHead::random(toy.num_foreground, toy.dim, 16.0, &mut substream(0, "toy-head")).unwrap();
    let imprinted = imprint_novel_weights(&head, &shots).unwrap();
    let novel: Vec<usize> = shots.keys().copied().collect();
    for (&c, embs) in &shots {
        // nearest prototype: mean direction of each class's shots
        let proto = |k: usize| {
            let mut m = vec![0.0; toy.dim];
            for e in &shots[&k] {
                m.iter_mut().zip(e).for_each(|(a, b)| *a += b);
            }
            normalize_embedding(&m).vector
        };
        for e in embs {
            let oracle = novel
                .iter()
                .copied()
                .max_by(|&a, &b| {
                    let s = |k: usize| proto(k).iter().zip(e).map(|(x, y)| x * y).sum::<f64>();
                    s(a).total_cmp(&s(b))
                })
                .unwrap();
            assert_eq!(oracle, c);
            let logits = &cosine_logits(std::slice::from_ref(e), &imprinted).unwrap()[0];
            let best = novel.iter().copied().max_by(|&a, &b| logits[a].total_cmp(&logits[b])).unwrap();
            assert_eq!(best, c, "shot of class {c} went to {best}");
        }
    }
    for &b in &toy.base_class_ids {
        assert_eq!(imprinted.row(b), head.row(b));
    }
}
