//! Generated scene through the decoder, both losses and one optimizer step.

use curvedn_core::decoder::train::{TrainSettings, Trainer};
use curvedn_core::decoder::{Decoder, DecoderConfig, DnInput};
use curvedn_core::dn_queries::{build_dn_batch, NoiseConfig};
use curvedn_core::losses::{dn_loss, matching_loss, LossWeights};
use curvedn_core::synth::{feature_channels, generate_scene, SceneSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn setup() -> (SceneSpec, DecoderConfig) {
    let spec = SceneSpec {
        instances_per_image: [3, 3],
        alphabet_size: 6,
        transcript_len: [1, 4],
        grid: 8,
        ..SceneSpec::default()
    };
    let cfg = DecoderConfig {
        dim: 16,
        heads: 2,
        ffn_dim: 16,
        points_per_curve: 6,
        alphabet_size: 6,
        matching_queries: 5,
        feature_channels: feature_channels(6),
        ..DecoderConfig::default()
    };
    (spec, cfg)
}

#[test]
fn scene_to_parameter_gradients() {
    let (spec, cfg) = setup();
    let scene = generate_scene(&spec, 3).unwrap();
    let model = Decoder::new(cfg.clone()).unwrap();
    let noise = NoiseConfig {
        points_per_curve: cfg.points_per_curve,
        ..NoiseConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let batch = build_dn_batch(&scene.instances, &noise, cfg.alphabet_size, &mut rng).unwrap();
    let pass = model.forward(Some(&DnInput::from(&batch)), &scene.features, None).unwrap();
    assert_eq!(pass.layout.dn_rows(), batch.len());
    assert_eq!(pass.layout.instances(), batch.len() + cfg.matching_queries);

    let w = LossWeights::default();
    let dn = dn_loss(&pass.dn_predictions(), &batch, &scene.instances, &w).unwrap();
    let (matching, routing) = matching_loss(&pass.matching_predictions(), &scene.instances, &w, &Default::default()).unwrap();
    assert_eq!(routing.pairs().count(), 3);
    assert!(dn.total.is_finite() && matching.total.is_finite());

    let mut all = curvedn_core::losses::PredictionGrads::like(&pass.predictions);
    all.add_rows(0, &dn.grads);
    all.add_rows(batch.len(), &matching.grads);
    let grads = pass.backward(&all).unwrap();
    assert_eq!(grads.len(), model.params.len());
    assert!(grads.iter().all(|g| g.iter().all(|x| x.is_finite())));
    assert!(grads.iter().any(|g| g.iter().any(|&x| x != 0.0)));
}

#[test]
fn repeated_steps_on_one_scene_reduce_the_loss() {
    let (spec, cfg) = setup();
    let scene = generate_scene(&spec, 0).unwrap();
    let settings = TrainSettings {
        noise: NoiseConfig {
            points_per_curve: cfg.points_per_curve,
            ..NoiseConfig::default()
        },
        ..TrainSettings::default()
    };
    let mut trainer = Trainer::new(Decoder::new(cfg).unwrap(), settings, 0).unwrap();
    let first = trainer.step(&[&scene], 1e-3).unwrap().matching.total();
    let mut last = first;
    for _ in 0..150 {
        last = trainer.step(&[&scene], 1e-3).unwrap().matching.total();
    }
    assert!(last < first, "{first} -> {last}");
}
