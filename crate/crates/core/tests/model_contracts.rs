use cipnet::data::{self, generate_synthetic};
use cipnet::eval::{classify, prototype_importance, Scenario};
use cipnet::model::{init_head, mask_presence, BackboneConfig, PrototypeModel, TaskHead};
use cipnet_tensor::Tensor;
use proptest::prelude::*;

const GOLDEN: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/data/golden_presence.txt");

fn tiny_model(seed: u64) -> PrototypeModel<f64> {
    PrototypeModel::new(BackboneConfig::new(16, &[4, 6], 5), 1.0, true, seed).unwrap()
}

fn probe_images(size: usize) -> Tensor<f64> {
    let ds = generate_synthetic(3, 5, size, 11).unwrap();
    let px: Vec<&[f32]> = ds.test.iter().map(|s| s.pixels.as_slice()).collect();
    data::to_tensor(&px, size)
}

fn head(ids: Vec<usize>, rows: &[&[f64]]) -> TaskHead<f64> {
    let d = rows[0].len();
    let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
    TaskHead {
        weights: Tensor::from_f64(&[rows.len(), d], &flat).unwrap(),
        class_ids: ids,
        frozen: false,
    }
}

/// Set `CIPNET_BLESS=1` to rewrite the golden file from the current build.
#[test]
fn golden_presence_is_reproduced_bit_exactly() {
    let (_, p) = tiny_model(5).forward_features(&probe_images(16)).unwrap();
    let bits: Vec<String> = p.data().iter().map(|v| format!("{:016x}", v.to_bits())).collect();
    let text = bits.join("\n") + "\n";
    if std::env::var_os("CIPNET_BLESS").is_some() {
        std::fs::create_dir_all(std::path::Path::new(GOLDEN).parent().unwrap()).unwrap();
        std::fs::write(GOLDEN, &text).unwrap();
    }
    let golden = std::fs::read_to_string(GOLDEN).expect("golden file; run once with CIPNET_BLESS=1");
    assert_eq!(text, golden);
}

#[test]
fn forward_is_deterministic_under_seed() {
    let images = probe_images(16);
    let a = tiny_model(9).forward_features(&images).unwrap();
    let b = tiny_model(9).forward_features(&images).unwrap();
    assert_eq!(a, b);
    let c = tiny_model(10).forward_features(&images).unwrap();
    assert_ne!(a.1, c.1);
}

#[test]
fn single_head_cil_equals_til() {
    let mut model = tiny_model(3);
    model.add_head(init_head(vec![0, 1, 2], 5, 4)).unwrap();
    let images = probe_images(16);
    assert_eq!(model.predict_cil(&images, 0.1).unwrap(), model.predict_til(&images, 0, 0.1).unwrap());
}

#[test]
fn cil_picks_the_globally_best_head() {
    let mut model = tiny_model(0);
    model.log_tau = 0.0;
    let s = |c: f64| (1.0 - c * c).sqrt();
    model.add_head(head(vec![7], &[&[0.9, s(0.9), 0.0, 0.0, 0.0]])).unwrap();
    model.add_head(head(vec![3], &[&[0.2, s(0.2), 0.0, 0.0, 0.0]])).unwrap();
    let p = Tensor::from_f64(&[1, 5], &[1.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
    let scores = model.scores_from_presence(&p, None).unwrap();
    assert!((scores.data()[0] - 0.9).abs() < 1e-12 && (scores.data()[1] - 0.2).abs() < 1e-12);
    assert_eq!(classify(&model, &p, Scenario::Cil, 0.1).unwrap(), vec![7]);
}

#[test]
fn presence_below_threshold_contributes_nothing() {
    let mut model = tiny_model(0);
    model.add_head(init_head(vec![0, 1], 5, 2)).unwrap();
    let p = Tensor::from_f64(&[1, 5], &[0.3, 0.09, 0.5, 0.2, 0.7]).unwrap();
    let zeroed = Tensor::from_f64(&[1, 5], &[0.3, 0.0, 0.5, 0.2, 0.7]).unwrap();
    let masked = model.scores_from_presence(&mask_presence(&p, 0.1), None).unwrap();
    let manual = model.scores_from_presence(&zeroed, None).unwrap();
    assert_eq!(masked, manual);
    let unmasked = model.scores_from_presence(&p, None).unwrap();
    assert_ne!(masked, unmasked);
}

#[test]
fn til_prediction_ignores_other_heads() {
    let mut model = tiny_model(1);
    model.add_head(init_head(vec![0, 1], 5, 1)).unwrap();
    let images = probe_images(16);
    let before = model.predict_til(&images, 0, 0.1).unwrap();
    model.add_head(init_head(vec![2, 3, 4], 5, 2)).unwrap();
    assert_eq!(model.predict_til(&images, 0, 0.1).unwrap(), before);
    model.heads[1].weights = model.heads[1].weights.map(|w| w * 3.0 + 0.5);
    assert_eq!(model.predict_til(&images, 0, 0.1).unwrap(), before);
}

#[test]
fn unknown_task_is_a_range_error() {
    let model = tiny_model(1);
    assert!(matches!(model.predict_til(&probe_images(16), 0, 0.1), Err(cipnet::Error::Range(_))));
    assert!(matches!(model.predict_cil(&probe_images(16), 0.1), Err(cipnet::Error::Range(_))));
}

#[test]
fn importance_hand_value_and_til_scope() {
    let mut model = tiny_model(0);
    model.add_head(head(vec![0, 1], &[&[0.5, 0.1, 0.0, 0.0, 0.0], &[0.2, 0.3, 0.0, 0.0, 0.0]])).unwrap();
    model.add_head(head(vec![2], &[&[9.0, 9.0, 9.0, 9.0, 9.0]])).unwrap();
    let p = [0.8, 0.0, 0.4, 0.0, 0.0];
    let m = prototype_importance(&p, &model, Scenario::Til(0)).unwrap();
    assert!((m[0] - 0.4).abs() < 1e-15);
    assert_eq!(m[1], 0.0);
    let cil = prototype_importance(&p, &model, Scenario::Cil).unwrap();
    assert!((cil[0] - 7.2).abs() < 1e-12);
}

#[test]
fn parameter_count_adds_exactly_head_weights() {
    let mut model = tiny_model(0);
    let base = model.parameter_count();
    assert_eq!(model.prototype_layer_overhead(), 0);
    model.add_head(init_head(vec![0, 1, 2], 5, 0)).unwrap();
    assert_eq!(model.parameter_count(), base + 3 * 5);
    model.add_head(init_head(vec![3, 4], 5, 1)).unwrap();
    assert_eq!(model.parameter_count(), base + 5 * 5);
    assert_eq!(model.prototype_layer_overhead(), 0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cil_argmax_is_invariant_to_presence_scale(
        p in proptest::collection::vec(0.11f64..1.0, 5),
        alpha in 0.2f64..0.99,
    ) {
        let mut model = tiny_model(2);
        model.add_head(init_head(vec![0, 1], 5, 7)).unwrap();
        model.add_head(init_head(vec![2, 3, 4], 5, 8)).unwrap();
        let a = Tensor::from_f64(&[1, 5], &p).unwrap();
        // Scale down only as far as every entry stays above the mask threshold.
        let lo = p.iter().cloned().fold(f64::INFINITY, f64::min);
        let factor = alpha.max(0.1 / lo + 1e-9);
        let scaled: Vec<f64> = p.iter().map(|v| v * factor).collect();
        let b = Tensor::from_f64(&[1, 5], &scaled).unwrap();
        prop_assert_eq!(classify(&model, &a, Scenario::Cil, 0.1).unwrap(), classify(&model, &b, Scenario::Cil, 0.1).unwrap());
    }
}
