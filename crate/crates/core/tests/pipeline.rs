use std::collections::BTreeMap;

use mmfuse::augment::{load_precomputed_pairs, write_precomputed_pairs, AugmentConfig, Augmenter, SpeechMode, TextMode};
use mmfuse::checkpoint::{load_checkpoint, save_checkpoint};
use mmfuse::data::{generate_synthetic_dataset, read_dataset, write_dataset, GeneratorConfig};
use mmfuse::model::{Model, ModelConfig};
use mmfuse::trainer::{evaluate, predict_all, train, TrainConfig};
use ndarray::Array2;

fn data(n: usize) -> mmfuse::data::Dataset {
    generate_synthetic_dataset(&GeneratorConfig {
        n_utterances: n,
        ..Default::default()
    })
    .unwrap()
}

fn small() -> ModelConfig {
    ModelConfig {
        d: 8,
        ..Default::default()
    }
}

#[test]
fn disk_round_trip_then_train_and_reload() {
    let ds = data(40);
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&ds, dir.path()).unwrap();
    let back = read_dataset(dir.path()).unwrap();
    assert_eq!(back, ds);

    let mut model = Model::new(small(), 2).unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        ..Default::default()
    };
    train(&mut model, &back, &cfg, &AugmentConfig::default(), None).unwrap();
    let ckpt = dir.path().join("m.ckpt");
    save_checkpoint(&model, &ckpt).unwrap();
    let loaded = load_checkpoint(&ckpt).unwrap();
    assert_eq!(predict_all(&model, &back).unwrap(), predict_all(&loaded, &back).unwrap());
    for u in back.utterances.iter().take(8) {
        let a = model.predict_probs(u).unwrap();
        let b = loaded.predict_probs(u).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    assert_eq!(evaluate(&model, &back).unwrap(), evaluate(&loaded, &back).unwrap());
}

#[test]
fn training_from_precomputed_pairs() {
    let ds = data(40);
    let aug = Augmenter::new(&AugmentConfig::default(), &ds, None).unwrap();
    let views: BTreeMap<_, _> = ds.utterances.iter().map(|u| (u.id.clone(), aug.view(u, 0, 0).unwrap())).collect();
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_precomputed_pairs(dir.path(), &views).unwrap();
    let pairs = load_precomputed_pairs(&manifest, &ds).unwrap();
    let cfg = AugmentConfig {
        text_mode: TextMode::Precomputed,
        speech_mode: SpeechMode::Precomputed,
        ..Default::default()
    };
    let run = |pairs| {
        let mut model = Model::new(small(), 3).unwrap();
        let tc = TrainConfig {
            epochs: 2,
            ..Default::default()
        };
        train(&mut model, &ds, &tc, &cfg, pairs).map(|o| o.history)
    };
    let h = run(Some(&pairs)).unwrap();
    assert!(h.iter().all(|r| r.acl > 0.0 && r.acl.is_finite()));
    assert!(run(None).is_err());
}

#[test]
fn passthrough_encoders_consume_precomputed_features() {
    let mut ds = data(20);
    for u in &mut ds.utterances {
        let m = u.tokens.len();
        u.text_features = Some(Array2::from_shape_fn((m, 16), |(i, j)| ((i * 7 + j) % 5) as f32 * 0.1));
    }
    let cfg = ModelConfig {
        d: 16,
        speech_passthrough: true,
        text_passthrough: true,
        ..Default::default()
    };
    let mut model = Model::new(cfg, 1).unwrap();
    assert!(model.store.find("speech.conv.w").is_none());
    assert!(model.store.find("text.embedding").is_none());
    let tc = TrainConfig {
        epochs: 1,
        preset: mmfuse::losses::Preset::CeOnly,
        ..Default::default()
    };
    train(&mut model, &ds, &tc, &AugmentConfig::default(), None).unwrap();
    let tr = model.trace(&ds.utterances[0]).unwrap();
    assert_eq!(tr.a.nrows(), ds.utterances[0].num_frames());
}

#[test]
fn per_step_regeneration_changes_the_views_but_stays_deterministic() {
    let ds = data(24);
    let run = |per_step: bool| {
        let mut model = Model::new(small(), 5).unwrap();
        let tc = TrainConfig {
            epochs: 2,
            ..Default::default()
        };
        let aug = AugmentConfig {
            regenerate_per_step: per_step,
            ..Default::default()
        };
        train(&mut model, &ds, &tc, &aug, None).unwrap().history
    };
    assert_eq!(run(true), run(true));
    assert_ne!(run(true), run(false));
}
