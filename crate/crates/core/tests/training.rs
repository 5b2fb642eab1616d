use std::collections::BTreeMap;

use lapaction::dataset::{ActionLabel, Clip, ClipDataset, Split};
use lapaction::fixture::two_motion_clips;
use lapaction::network::{BackboneConfig, BackboneKind, Classifier, ConvStage, HeadConfig, HeadKind, Mode};
use lapaction::sampler::{ClipSource, MemoryClips, SamplerConfig};
use lapaction::trainer::{train_all, train_binary, train_on, TrainConfig, TrainError, TrainSummary};
use lapaction::Error;

fn backbone() -> BackboneConfig {
    BackboneConfig {
        kind: BackboneKind::SmallConv,
        feature_dim: 16,
        stages: vec![
            ConvStage { channels: 8, kernel: 3, downsample: 2 },
            ConvStage { channels: 16, kernel: 3, downsample: 2 },
        ],
    }
}

fn head(kind: HeadKind) -> HeadConfig {
    HeadConfig {
        kind,
        rnn_units_1: 16,
        rnn_units_2: 8,
        inter_layer_dropout: 0.0,
        fc_units_1: 32,
        fc_dropout: 0.0,
        fc_units_2: 16,
        ..HeadConfig::default()
    }
}

fn tiny_config(max_epochs: usize) -> TrainConfig {
    TrainConfig {
        batch_size: 2,
        max_epochs,
        early_stop_patience: max_epochs,
        rng_seed: 3,
        ..TrainConfig::default()
    }
}

#[test]
fn recurrent_head_overfits_two_motions() {
    let (clips, store) = two_motion_clips(4, 16, 50, 0.3, 1);
    let labeled: Vec<_> = clips.iter().map(|(c, t)| (c, *t)).collect();
    let model = Classifier::new(backbone(), head(HeadKind::Lstm), 17).unwrap();
    let out = train_on(model, &labeled, &labeled, &store, 20, &tiny_config(100)).unwrap();
    let last = out.history.last().unwrap();
    assert_eq!(last.train_accuracy, 1.0);
    assert!(last.train_loss < 0.05, "{last:?}");
    // the restored model classifies every clip under center sampling
    for (clip, target) in &clips {
        let seq = store.sample(clip, &SamplerConfig::center(20)).unwrap();
        let p = out.model.forward(&seq, Mode::Inference).unwrap();
        assert_eq!(p[1] > p[0], *target);
    }
}

#[test]
fn training_is_bitwise_deterministic_and_restores_the_best_epoch() {
    let (clips, store) = two_motion_clips(2, 12, 50, 0.3, 2);
    let labeled: Vec<_> = clips.iter().map(|(c, t)| (c, *t)).collect();
    let mut head = head(HeadKind::Gru);
    head.inter_layer_dropout = 0.5;
    let run = || {
        let model = Classifier::new(backbone(), head.clone(), 5).unwrap();
        train_on(model, &labeled, &labeled, &store, 10, &tiny_config(12)).unwrap()
    };
    let a = run();
    let b = run();
    let bits = |o: &lapaction::trainer::TrainOutcome| {
        o.history.iter().map(|r| (r.train_loss.to_bits(), r.val_loss.to_bits())).collect::<Vec<_>>()
    };
    assert_eq!(bits(&a), bits(&b));
    assert_eq!(a.model.params(), b.model.params());

    let argmin = a
        .history
        .iter()
        .min_by(|x, y| x.val_loss.partial_cmp(&y.val_loss).unwrap())
        .unwrap();
    assert_eq!(a.best_epoch, argmin.epoch);
    assert_eq!(a.best_val_loss, argmin.val_loss);
    // the returned parameters reproduce the best validation loss
    let (val_loss, _) = lapaction::trainer::validation_pass(&a.model, &labeled, &store, 10).unwrap();
    assert_eq!(val_loss, a.best_val_loss);
}

fn dataset_from(clips: &[(Clip, bool)], validation_every: Option<usize>) -> ClipDataset {
    let mut split = BTreeMap::new();
    let mut target_clips = Vec::new();
    let mut rest_clips = Vec::new();
    for (i, (clip, target)) in clips.iter().enumerate() {
        let s = if validation_every.is_some_and(|n| i % n == 0) { Split::Validation } else { Split::Train };
        split.insert(clip.clip_id.clone(), s);
        if *target {
            target_clips.push(clip.clone());
        } else {
            rest_clips.push(clip.clone());
        }
    }
    ClipDataset {
        target_action: ActionLabel::AbdominalAccess,
        target_clips,
        rest_clips,
        split,
    }
}

#[test]
fn preconditions_are_checked() {
    let (clips, store) = two_motion_clips(3, 12, 50, 0.3, 4);
    // clip 0 (target) goes to validation, leaving 2 target vs 3 rest
    let unbalanced = dataset_from(&clips, Some(6));
    let err = train_binary(&unbalanced, &store, &backbone(), &head(HeadKind::Lstm), 10, &tiny_config(1)).unwrap_err();
    assert!(matches!(err, Error::Train(TrainError::Unbalanced { target: 2, rest: 3 })));
    assert!(err.to_string().contains("balance"));

    let no_validation = dataset_from(&clips, None);
    let err = train_binary(&no_validation, &store, &backbone(), &head(HeadKind::Lstm), 10, &tiny_config(1)).unwrap_err();
    assert!(matches!(err, Error::Train(TrainError::EmptyValidation)));
}

#[test]
fn train_all_isolates_failures() {
    let dir = tempfile::tempdir().unwrap();
    let (clips, store) = two_motion_clips(2, 12, 50, 0.3, 6);
    let labeled: Vec<_> = clips.iter().map(|(c, t)| (c, *t)).collect();
    let run = |dir: &std::path::Path| {
        train_all(&ActionLabel::TARGETS, 9, dir, |action, seed| {
            if action == ActionLabel::Suction {
                return Err(TrainError::EmptyTrain.into());
            }
            let model = Classifier::new(backbone(), head(HeadKind::Lstm), seed).unwrap();
            let config = TrainConfig { rng_seed: seed, ..tiny_config(2) };
            train_on(model, &labeled, &labeled, &store as &MemoryClips, 10, &config)
        })
        .unwrap()
    };
    let summary = run(dir.path());
    assert_eq!(summary.trained.len(), 5);
    assert_eq!(summary.failures.len(), 1);
    assert!(summary.failures[&ActionLabel::Suction].contains("empty"));
    let entry = &summary.trained[&ActionLabel::KnotPushing];
    assert!(dir.path().join(&entry.checkpoint_path).exists());
    assert!(dir.path().join("knot_pushing/history.csv").exists());
    let loaded = Classifier::load(&dir.path().join("knot_pushing")).unwrap();
    assert_eq!(loaded.head().kind, HeadKind::Lstm);
    assert_eq!(TrainSummary::load(dir.path()).unwrap(), summary);

    let again = tempfile::tempdir().unwrap();
    let rerun = run(again.path());
    assert_eq!(rerun, summary);
    assert_eq!(
        std::fs::read(dir.path().join("summary.json")).unwrap(),
        std::fs::read(again.path().join("summary.json")).unwrap()
    );
}
