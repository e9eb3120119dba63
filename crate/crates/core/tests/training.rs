//! End-to-end training behaviour: determinism, persistence, convergence.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tapir_core::checkpoint::Checkpoint;
use tapir_core::config::{OptimizerKind, TrainConfig};
use tapir_core::data::{synth_generate, SynthConfig, SynthData};
use tapir_core::eval::{evaluate_dataset, Direction, EvalOptions};
use tapir_core::trainer::train;
use tapir_core::{LossKind, Pooling, RetrievalModel};

fn small_synth(seed: u64) -> SynthConfig {
    SynthConfig {
        num_train: 64,
        num_val: 32,
        num_test: 32,
        seed,
        ..SynthConfig::default()
    }
}

fn small_cfg() -> TrainConfig {
    TrainConfig {
        dim: 16,
        proj_dim: 8,
        hidden_dim: 16,
        batch_size: 16,
        epochs: 2,
        ..TrainConfig::default()
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[test]
fn zero_learning_rate_keeps_initial_parameters() {
    let data = synth_generate(&small_synth(1)).unwrap();
    for optimizer in [OptimizerKind::Adam, OptimizerKind::Sgd] {
        let cfg = TrainConfig {
            lr: 0.0,
            epochs: 1,
            batch_size: 64,
            optimizer,
            pooling: Pooling::Tap,
            ..small_cfg()
        };
        let out = train(&cfg, &data.train.dataset, None).unwrap();
        assert_eq!(out.steps.len(), 1);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let init = RetrievalModel::init(&mut rng, &cfg.model_dims(32), cfg.pooling);
        assert_eq!(out.model, init);
    }
}

#[test]
fn same_seed_gives_identical_runs_and_checkpoints() {
    let data = synth_generate(&small_synth(2)).unwrap();
    for (pooling, loss) in [(Pooling::Tap, LossKind::Pmr), (Pooling::MeanMax, LossKind::NtXent)] {
        let cfg = TrainConfig {
            pooling,
            loss,
            seed: 5,
            ..small_cfg()
        };
        let a = train(&cfg, &data.train.dataset, Some(&data.val.dataset)).unwrap();
        let b = train(&cfg, &data.train.dataset, Some(&data.val.dataset)).unwrap();
        assert_eq!(a.steps, b.steps);
        assert_eq!(a.epochs, b.epochs);
        assert_eq!(a.best.to_bytes(), b.best.to_bytes());

        let other = train(&TrainConfig { seed: 6, ..cfg }, &data.train.dataset, None).unwrap();
        assert_ne!(other.steps, a.steps);
    }
}

#[test]
fn checkpoint_round_trip_reproduces_evaluation() {
    let data = synth_generate(&small_synth(3)).unwrap();
    let cfg = TrainConfig {
        pooling: Pooling::Tap,
        ..small_cfg()
    };
    let out = train(&cfg, &data.train.dataset, Some(&data.val.dataset)).unwrap();
    let opts = EvalOptions::default();
    let before = evaluate_dataset(&out.best.to_model().unwrap(), &data.test.dataset, &cfg.eval_ks, &opts).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("best.ckpt");
    out.best.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded.config, cfg);
    let model = loaded.to_model().unwrap();
    let after = evaluate_dataset(&model, &data.test.dataset, &cfg.eval_ks, &opts).unwrap();
    assert_eq!(before, after);
    let again = evaluate_dataset(&model, &data.test.dataset, &cfg.eval_ks, &opts).unwrap();
    assert_eq!(after, again);
    for dir in [&after.t2a, &after.a2t] {
        assert!(dir.r_at[&1] <= dir.r_at[&5] && dir.r_at[&5] <= dir.r_at[&10]);
    }
}

#[test]
fn loss_decreases_for_every_combination() {
    let data = synth_generate(&SynthConfig::default()).unwrap();
    for pooling in Pooling::ALL {
        for loss in [LossKind::NtXent, LossKind::Pmr] {
            let cfg = TrainConfig {
                pooling,
                loss,
                epochs: 2,
                ..TrainConfig::default()
            };
            let out = train(&cfg, &data.train.dataset, None).unwrap();
            let losses: Vec<f64> = out.steps.iter().map(|s| s.loss).collect();
            let tenth = losses.len() / 10;
            let first = median(losses[..tenth].to_vec());
            let last = median(losses[losses.len() - tenth..].to_vec());
            assert!(last < first, "{pooling}+{loss}: {first} -> {last}");
        }
    }
}

/// Noise-free single-event clips with one prototype per clip; a seed is
/// picked so that no two clips share an event.
fn separable() -> SynthData {
    (0..)
        .map(|seed| {
            synth_generate(&SynthConfig {
                num_events: 64,
                feature_dim: 16,
                frames_per_clip: 4,
                relevant_fraction: 1.0,
                events_per_sample: 1,
                noise_sigma: 0.0,
                num_train: 8,
                num_val: 0,
                num_test: 0,
                train_captions_per_audio: 1,
                seed,
                ..SynthConfig::default()
            })
            .unwrap()
        })
        .find(|d| {
            let mut events: Vec<usize> = d.train.labels.iter().map(|l| l.events[0]).collect();
            events.sort_unstable();
            events.dedup();
            events.len() == d.train.labels.len()
        })
        .unwrap()
}

#[test]
fn separable_toy_set_reaches_perfect_recall() {
    let data = separable();
    for pooling in [Pooling::Mean, Pooling::Tap] {
        let cfg = TrainConfig {
            pooling,
            batch_size: 8,
            epochs: 150,
            lr: 1e-2,
            eval_ks: vec![1],
            ..small_cfg()
        };
        let out = train(&cfg, &data.train.dataset, None).unwrap();
        let rep = evaluate_dataset(&out.model, &data.train.dataset, &[1], &EvalOptions::default()).unwrap();
        assert_eq!(rep.recall(Direction::T2a, 1), Some(1.0), "{pooling}");
        assert_eq!(rep.recall(Direction::A2t, 1), Some(1.0), "{pooling}");
    }
}

#[test]
fn training_improves_validation_recall() {
    let data = synth_generate(&SynthConfig::default()).unwrap();
    let cfg = TrainConfig {
        pooling: Pooling::Tap,
        loss: LossKind::NtXent,
        ..TrainConfig::default()
    };
    assert_eq!(cfg.epochs, 30);
    let out = train(&cfg, &data.train.dataset, Some(&data.val.dataset)).unwrap();
    let r1 = |e: usize| out.epochs[e].validation.recall(Direction::T2a, 1).unwrap();
    assert!(r1(30) > r1(0), "epoch 0 {} vs epoch 30 {}", r1(0), r1(30));
}
