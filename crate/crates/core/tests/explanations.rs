mod common;

use cipnet::eval::{self, explain, export_local_explanation, export_prototype_gallery, prototype_gallery, Scenario};
use cipnet::run;
use common::tiny_config;

const THRESHOLD: f64 = 0.01;

#[test]
fn gallery_scores_recompute_from_a_fresh_forward_pass() {
    let cfg = tiny_config(0);
    let outcome = run::train::<f64>(&cfg, None, false).unwrap();
    let (model, stream) = (&outcome.learner.model, &outcome.stream);
    for scenario in [Scenario::Cil, Scenario::Til(1)] {
        let entries = prototype_gallery(model, stream, scenario, 3, THRESHOLD).unwrap();
        assert!(!entries.is_empty());
        for e in &entries {
            if let Scenario::Til(t) = scenario {
                assert_eq!(e.task, t, "TIL gallery reached outside its task");
            }
            let sample = stream.task(e.task).train.iter().find(|s| s.id == e.image_id).unwrap();
            let (p, _) = eval::presence(model, std::slice::from_ref(sample)).unwrap();
            let m = eval::prototype_importance(&p.to_f64_vec(), model, scenario).unwrap();
            assert!((m[e.proto_id] - e.score).abs() <= 1e-6, "{} vs {}", m[e.proto_id], e.score);
            assert!(e.score > THRESHOLD);
            assert!(e.x + e.w <= cfg.data.image_size && e.y + e.h <= cfg.data.image_size);
        }
        for k in 0..model.prototypes() {
            let mine: Vec<f64> = entries.iter().filter(|e| e.proto_id == k).map(|e| e.score).collect();
            assert!(mine.len() <= 3);
            assert!(mine.windows(2).all(|w| w[0] >= w[1]));
        }
    }
    let dir = tempfile::tempdir().unwrap();
    let files = export_prototype_gallery(model, stream, Scenario::Cil, 2, THRESHOLD, dir.path()).unwrap();
    let manifest = std::fs::read_to_string(dir.path().join("manifest.ndjson")).unwrap();
    assert_eq!(manifest.lines().count() + 1, files.len());
}

#[test]
fn explanations_list_only_activated_important_prototypes() {
    let cfg = tiny_config(1);
    let outcome = run::train::<f64>(&cfg, None, false).unwrap();
    let model = &outcome.learner.model;
    let stream = &outcome.stream;
    for sample in stream.task(0).test.iter().take(4) {
        for scenario in [Scenario::Til(0), Scenario::Cil] {
            let e = explain(model, &sample.pixels, scenario, 0.1, THRESHOLD).unwrap();
            let (p, _) = eval::presence(model, std::slice::from_ref(sample)).unwrap();
            let classified = eval::classify(model, &p, scenario, 0.1).unwrap()[0];
            assert_eq!(e.predicted, classified);
            assert!(e.prototypes.iter().all(|x| x.importance > THRESHOLD && x.presence >= 0.1));
            assert!(e.prototypes.windows(2).all(|w| w[0].importance >= w[1].importance));
            let classes = match scenario {
                Scenario::Til(t) => model.heads[t].class_ids.len(),
                Scenario::Cil => model.num_classes(),
            };
            assert!(e.prototypes.iter().all(|x| x.weights.len() == classes));
        }
    }
    let dir = tempfile::tempdir().unwrap();
    let png = dir.path().join("why.png");
    let e = export_local_explanation(model, &stream.task(0).test[0].pixels, Scenario::Cil, 0.1, THRESHOLD, &png).unwrap();
    assert!(png.exists());
    let json: eval::Explanation = serde_json::from_slice(&std::fs::read(png.with_extension("json")).unwrap()).unwrap();
    assert_eq!(json, e);
}
