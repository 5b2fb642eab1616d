use lapaction::network::gradcheck::check_gradients;
use lapaction::network::{BackboneConfig, BackboneKind, Classifier, ConvStage, HeadConfig, HeadKind};
use lapaction::sampler::FrameSequence;
use lapaction::seed::rng_from_seed;
use ndarray::Array3;
use rand::Rng;

fn tiny_backbone() -> BackboneConfig {
    BackboneConfig {
        kind: BackboneKind::SmallConv,
        feature_dim: 8,
        stages: vec![
            ConvStage { channels: 4, kernel: 3, downsample: 2 },
            ConvStage { channels: 8, kernel: 3, downsample: 2 },
        ],
    }
}

fn tiny_head(kind: HeadKind) -> HeadConfig {
    HeadConfig {
        kind,
        rnn_units_1: 8,
        rnn_units_2: 4,
        fc_units_1: 8,
        fc_units_2: 4,
        ..HeadConfig::default()
    }
}

fn sequence(seed: u64) -> FrameSequence {
    let mut rng = rng_from_seed(seed);
    FrameSequence {
        frames: (0..4).map(|_| Array3::from_shape_fn((8, 8, 3), |_| rng.random::<f64>())).collect(),
        source_indices: (0..4).collect(),
        clip_id: "grad".into(),
    }
}

#[test]
fn backprop_matches_central_differences_for_every_head() {
    for kind in HeadKind::ALL {
        let model = Classifier::new(tiny_backbone(), tiny_head(kind), 11).unwrap();
        for class in [0, 1] {
            let r = check_gradients(&model, &sequence(3), class, 1e-4, 1e-6, 5).unwrap();
            println!("{kind} class {class}: {r:?}");
            assert!(r.max_relative_error < 1e-4, "{kind}: {r:?}");
        }
    }
}
