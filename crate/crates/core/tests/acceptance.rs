//! Acceptance suite. Each criterion prints one PASS/FAIL line; the process
//! exits non-zero if any criterion fails.

use std::collections::BTreeSet;
use std::panic;
use std::thread;
use std::time::Instant;

use mmfuse::augment::AugmentConfig;
use mmfuse::check::{contrastive_oracle_agreement, ctc_oracle_agreement, model_gradient_check, ModelGradCheck};
use mmfuse::checkpoint::encode_checkpoint;
use mmfuse::data::{generate_synthetic_dataset, make_folds, Emotion, GeneratorConfig, Utterance};
use mmfuse::losses::{acl_loss, scl_loss, LossConfig, Preset};
use mmfuse::model::{Model, ModelConfig};
use mmfuse::oracles::{acl_bruteforce, scl_bruteforce};
use mmfuse::params::Precision;
use mmfuse::trainer::{cross_validate, evaluate, history_csv, train, OptimizerKind, TrainConfig};
use ndarray::{array, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn ctc_oracle() -> Outcome {
    let t = Instant::now();
    let worst = ctc_oracle_agreement(200, 8, 20).map_err(|e| e.to_string())?;
    let secs = t.elapsed().as_secs_f64();
    ensure(worst < 1e-8, format!("max rel err {worst:.3e} >= 1e-8"))?;
    ensure(secs < 30.0, format!("took {secs:.1}s"))?;
    Ok(format!("200 instances, max rel err {worst:.2e}, {secs:.1}s"))
}

fn contrastive_oracle() -> Outcome {
    let worst = contrastive_oracle_agreement(100, 21).map_err(|e| e.to_string())?;
    ensure(worst < 1e-10, format!("max abs err {worst:.3e} >= 1e-10"))?;
    let cfg = LossConfig::default();
    let distinct = array![[1.0, 0.3], [-0.2, 0.8]];
    let no_pos = scl_loss(&distinct, &[0, 1], &cfg).map_err(|e| e.to_string())?;
    ensure(no_pos == 0.0 && scl_bruteforce(&distinct, &[0, 1], &cfg) == 0.0, "no-positive batch is not 0")?;
    let one = array![[0.4, -0.9, 0.1]];
    let s1 = acl_loss(&one, &one, &cfg).map_err(|e| e.to_string())?;
    ensure(s1.abs() < 1e-15 && acl_bruteforce(&one, &one, &cfg).abs() < 1e-15, "S=1 ACL is not 0")?;
    Ok(format!("100 batches, max abs err {worst:.2e}; degenerate cases are 0"))
}

fn gradient_check() -> Outcome {
    let t = Instant::now();
    let mut worst = 0.0f64;
    for d in [4, 8] {
        let spec = ModelGradCheck {
            d,
            loss: LossConfig {
                alpha: 0.1,
                beta: 0.1,
                gamma: 0.1,
                ..Default::default()
            },
            tol: 1e-4,
            max_coords: None,
            ..Default::default()
        };
        let r = model_gradient_check(&spec).map_err(|e| e.to_string())?;
        ensure(r.passed(), format!("d={d}: failing tensors {:?}\n{r}", r.failing_tensors()))?;
        worst = worst.max(r.max_rel_err());
    }
    let secs = t.elapsed().as_secs_f64();
    ensure(secs < 300.0, format!("took {secs:.1}s"))?;
    Ok(format!("d=4 and d=8, every coordinate, max rel err {worst:.2e}, {secs:.1}s"))
}

fn random_utterance(rng: &mut ChaCha8Rng, d_a: usize, vocab: usize) -> Utterance {
    let frames = rng.random_range(2..=24);
    let m = rng.random_range(1..=8);
    let scale = rng.random_range(0.1..5.0);
    Utterance {
        id: "probe".into(),
        speech: Array2::from_shape_fn((frames, d_a), |_| rng.random_range(-scale..scale) as f32),
        tokens: (0..m).map(|_| rng.random_range(0..vocab as u32)).collect(),
        transcript: String::new(),
        raw_label: Emotion::Neutral,
        speaker_id: 0,
        session_id: 1,
        text_features: None,
    }
}

fn structural_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let mut models = Vec::new();
    for (i, (d, heads)) in [(4, 1), (4, 2), (8, 2), (8, 4), (16, 2)].into_iter().enumerate() {
        let cfg = ModelConfig {
            d,
            heads,
            d_a: 6,
            token_vocab_size: 11,
            ..Default::default()
        };
        models.push(Model::new(cfg, i as u64).map_err(|e| e.to_string())?);
    }
    let mut worst_row = 0.0f64;
    for pass in 0..1000 {
        let model = &models[pass % models.len()];
        let d = model.config.d;
        let u = random_utterance(&mut rng, 6, 11);
        let tr = model.trace(&u).map_err(|e| e.to_string())?;
        let jp = model.output_frames(u.num_frames());
        let m = u.tokens.len();
        let f = &tr.fusion;
        ensure(tr.a.dim() == (jp, d), format!("pass {pass}: A is {:?}", tr.a.dim()))?;
        ensure(f.p.dim() == (jp, d), format!("pass {pass}: P is {:?}", f.p.dim()))?;
        for (name, x) in [("R", &f.r), ("Q", &f.q_raw), ("Q gated", &f.q_gated), ("fused", &f.fused)] {
            ensure(x.dim() == (m, d), format!("pass {pass}: {name} is {:?}", x.dim()))?;
        }
        ensure(f.pooled.dim() == (1, 2 * d), format!("pass {pass}: pooled is {:?}", f.pooled.dim()))?;
        ensure(
            f.g.iter().all(|&g| g > 0.0 && g < 1.0),
            format!("pass {pass}: gate value outside (0, 1)"),
        )?;
        for (block, maps, keys) in [("B", &f.attention_b, m), ("C", &f.attention_c, jp), ("D", &f.attention_d, jp)] {
            ensure(maps.len() == model.config.heads, format!("pass {pass}: block {block} head count"))?;
            for a in maps.iter() {
                ensure(a.ncols() == keys, format!("pass {pass}: block {block} has {} keys", a.ncols()))?;
                for row in a.rows() {
                    ensure(row.iter().all(|&v| v >= 0.0), format!("pass {pass}: negative attention"))?;
                    worst_row = worst_row.max((row.sum() - 1.0).abs());
                }
            }
        }
        let s: f64 = tr.probs.iter().sum();
        ensure(
            tr.probs.iter().all(|&p| (0.0..=1.0).contains(&p)) && (s - 1.0).abs() < 1e-9,
            format!("pass {pass}: y-hat off the simplex"),
        )?;
    }
    ensure(worst_row < 1e-6, format!("attention row sum off by {worst_row:.3e}"))?;
    Ok(format!("1000 passes, worst attention row-sum error {worst_row:.2e}"))
}

fn learning_smoke() -> Outcome {
    let t = Instant::now();
    let data = generate_synthetic_dataset(&GeneratorConfig {
        n_utterances: 200,
        class_signal_strength: 0.9,
        ..Default::default()
    })
    .map_err(|e| e.to_string())?;
    let model_cfg = ModelConfig::default();
    let train_cfg = TrainConfig {
        epochs: 30,
        ..Default::default()
    };
    let aug = AugmentConfig::default();

    let ablations = thread::spawn({
        let data = data.clone();
        let model_cfg = model_cfg.clone();
        let train_cfg = train_cfg.clone();
        let aug = aug.clone();
        move || -> Result<Vec<String>, String> {
            let plan = make_folds(&data, 5).map_err(|e| e.to_string())?;
            let fold = &plan.folds[0];
            let train_set = data.subset_sessions(&fold.train_sessions);
            let test_set = data.subset_sessions(&[fold.test_session]);
            let mut notes = Vec::new();
            for preset in [Preset::WoCtc, Preset::WoScl, Preset::WoAcl] {
                let cfg = TrainConfig { preset, ..train_cfg.clone() };
                let mut model = Model::new(model_cfg.clone(), cfg.seed).map_err(|e| e.to_string())?;
                train(&mut model, &train_set, &cfg, &aug, None).map_err(|e| format!("{}: {e}", preset.as_str()))?;
                let wa = evaluate(&model, &test_set).map_err(|e| e.to_string())?.weighted_accuracy;
                notes.push(format!("{} {:.3}", preset.as_str(), wa));
            }
            Ok(notes)
        }
    });

    let report = cross_validate(&data, &model_cfg, &train_cfg, &aug, None).map_err(|e| e.to_string())?;
    let ablation_notes = ablations.join().map_err(|_| "ablation thread panicked".to_string())??;
    let secs = t.elapsed().as_secs_f64();
    let folds: Vec<String> = report
        .folds
        .iter()
        .map(|f| format!("{:.3}", f.metrics.weighted_accuracy))
        .collect();
    ensure(
        report.mean_wa >= 0.9,
        format!("mean held-out WA {:.3} < 0.90 (folds {})", report.mean_wa, folds.join(", ")),
    )?;
    ensure(secs < 600.0, format!("took {secs:.1}s"))?;
    Ok(format!(
        "full preset mean held-out WA {:.3} (folds {}); ablations trained on fold 1: {}; {secs:.0}s",
        report.mean_wa,
        folds.join(", "),
        ablation_notes.join(", ")
    ))
}

fn accumulation_equivalence() -> Outcome {
    let data = generate_synthetic_dataset(&GeneratorConfig {
        n_utterances: 20,
        ..Default::default()
    })
    .map_err(|e| e.to_string())?;
    let mut data16 = data.clone();
    data16.utterances.truncate(16);
    let model_cfg = ModelConfig {
        d: 8,
        dropout: 0.0,
        precision: Precision::F64,
        ..Default::default()
    };
    let mut worst = 0.0f64;
    for optimizer in [OptimizerKind::Sgd, OptimizerKind::Adam] {
        let base = TrainConfig {
            epochs: 1,
            shuffle: false,
            optimizer,
            learning_rate: 1e-2,
            loss: LossConfig {
                alpha: 0.1,
                beta: 0.0,
                gamma: 0.0,
                ..Default::default()
            },
            ..Default::default()
        };
        let run = |batch_size: usize, accum_steps: usize| -> Result<Model, String> {
            let mut m = Model::new(model_cfg.clone(), 4).map_err(|e| e.to_string())?;
            let cfg = TrainConfig {
                batch_size,
                accum_steps,
                ..base.clone()
            };
            let out = train(&mut m, &data16, &cfg, &AugmentConfig::default(), None).map_err(|e| e.to_string())?;
            ensure(out.optimizer_steps == 1, format!("{} optimizer steps", out.optimizer_steps))?;
            Ok(m)
        };
        let accumulated = run(4, 4)?;
        let full = run(16, 1)?;
        let init = Model::new(model_cfg.clone(), 4).map_err(|e| e.to_string())?;
        ensure(full.store.distance(&init.store) > 1e-6, "update did not move the parameters")?;
        let dist = accumulated.store.distance(&full.store);
        ensure(dist < 1e-9, format!("{optimizer:?}: parameter distance {dist:.3e}"))?;
        worst = worst.max(dist);
    }
    Ok(format!("accum 4 x batch 4 vs batch 16 (SGD and Adam): max distance {worst:.2e}"))
}

fn protocol_fidelity() -> Outcome {
    let mut notes = Vec::new();
    for sessions in [5u32, 2] {
        let data = generate_synthetic_dataset(&GeneratorConfig {
            n_utterances: 40,
            n_sessions: sessions,
            ..Default::default()
        })
        .map_err(|e| e.to_string())?;
        let model_cfg = ModelConfig {
            d: 8,
            ..Default::default()
        };
        let train_cfg = TrainConfig {
            epochs: 2,
            ..Default::default()
        };
        let report = cross_validate(&data, &model_cfg, &train_cfg, &AugmentConfig::default(), None)
            .map_err(|e| e.to_string())?;
        ensure(report.folds.len() == sessions as usize, format!("{} folds for {sessions} sessions", report.folds.len()))?;
        let tested: BTreeSet<u32> = report.folds.iter().map(|f| f.test_session).collect();
        ensure(tested == data.sessions().into_iter().collect(), "some session is never held out")?;
        for f in &report.folds {
            let session_of = |id: &String| data.utterances.iter().find(|u| &u.id == id).unwrap().session_id;
            ensure(
                f.train_ids.iter().all(|id| session_of(id) != f.test_session),
                format!("fold {}: a test-session utterance contributed a gradient", f.test_session),
            )?;
            ensure(f.train_ids.is_disjoint(&f.test_ids), "train and test ids overlap")?;
            let expected_test: BTreeSet<String> = data
                .utterances
                .iter()
                .filter(|u| u.session_id == f.test_session)
                .map(|u| u.id.clone())
                .collect();
            ensure(f.test_ids == expected_test, "fold metrics not computed on exactly the held-out session")?;
            let expected_train: BTreeSet<String> = data
                .utterances
                .iter()
                .filter(|u| f.train_sessions.contains(&u.session_id))
                .map(|u| u.id.clone())
                .collect();
            ensure(f.train_ids == expected_train, "not every training utterance was used")?;
            ensure(f.metrics.n == f.test_ids.len(), "metric count differs from held-out size")?;
        }
        let mean = report.folds.iter().map(|f| f.metrics.weighted_accuracy).sum::<f64>() / report.folds.len() as f64;
        ensure(mean == report.mean_wa, format!("mean WA {} != {}", report.mean_wa, mean))?;
        notes.push(format!("{sessions} sessions -> {} folds", report.folds.len()));
    }
    Ok(format!("{}; id audit clean; mean WA is the fold average", notes.join(", ")))
}

fn determinism() -> Outcome {
    let data = generate_synthetic_dataset(&GeneratorConfig {
        n_utterances: 40,
        ..Default::default()
    })
    .map_err(|e| e.to_string())?;
    let model_cfg = ModelConfig {
        d: 8,
        dropout: 0.1,
        ..Default::default()
    };
    let train_cfg = TrainConfig {
        epochs: 3,
        seed: 17,
        ..Default::default()
    };
    let aug = AugmentConfig {
        jitter_sigma: 0.05,
        ..Default::default()
    };
    let run = || -> Result<(String, Vec<u8>), String> {
        let mut m = Model::new(model_cfg.clone(), train_cfg.seed).map_err(|e| e.to_string())?;
        let out = train(&mut m, &data, &train_cfg, &aug, None).map_err(|e| e.to_string())?;
        Ok((history_csv(&out.history), encode_checkpoint(&m)))
    };
    let (h1, c1) = run()?;
    let (h2, c2) = run()?;
    ensure(h1 == h2, "history CSVs differ")?;
    ensure(c1 == c2, "checkpoints differ")?;
    Ok(format!("history ({} bytes) and checkpoint ({} bytes) identical", h1.len(), c1.len()))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("ctc oracle equivalence", ctc_oracle),
        ("contrastive oracle equivalence", contrastive_oracle),
        ("full-model gradient check", gradient_check),
        ("structural invariants", structural_invariants),
        ("learning smoke test", learning_smoke),
        ("gradient accumulation equivalence", accumulation_equivalence),
        ("protocol fidelity", protocol_fidelity),
        ("determinism", determinism),
    ];
    panic::set_hook(Box::new(|_| {}));
    let handles: Vec<_> = criteria
        .iter()
        .map(|&(_, f)| thread::spawn(move || panic::catch_unwind(f)))
        .collect();
    let mut failed = 0;
    for (i, ((name, _), h)) in criteria.iter().zip(handles).enumerate() {
        let result = match h.join() {
            Ok(Ok(r)) => r,
            Ok(Err(p)) | Err(p) => Err(format!(
                "panicked: {}",
                p.downcast_ref::<String>()
                    .cloned()
                    .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default()
            )),
        };
        match result {
            Ok(detail) => println!("[PASS] criterion {}: {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("[FAIL] criterion {}: {name}: {why}", i + 1);
            }
        }
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
