use super::*;
use crate::backbone::ParamScope;
use crate::error::CheckpointError;
use crate::objectives::RandomConvFeatures;
use crate::phantoms::{generate_phantom_set, PhantomSpec};

fn tiny_model() -> ModelConfig {
    ModelConfig {
        base_channels: 4,
        latent_channels: 2,
        discriminator_channels: 4,
        ..ModelConfig::desk(16)
    }
}

fn pairs(n: usize) -> Vec<PhasePair> {
    let spec = PhantomSpec {
        canvas_size: 16,
        ..Default::default()
    };
    generate_phantom_set(&spec, n).unwrap()
}

fn config(mode: AblationMode) -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-3,
        epochs: 1,
        batch_size: 2,
        seed: 5,
        ablation_mode: mode,
        ..Default::default()
    }
}

fn snapshot(store: &crate::backbone::ParamStore, prefix: &str) -> Vec<(String, Vec<f32>)> {
    store
        .with_prefix(prefix)
        .map(|(n, _)| (n.to_string(), store.values(n).unwrap()))
        .collect()
}

#[test]
fn mode_parsing() {
    assert_eq!("kl-fda".parse::<AblationMode>().unwrap(), AblationMode::KlFda);
    assert_eq!(
        "backbone".parse::<AblationMode>().unwrap(),
        AblationMode::BackboneOnly
    );
    assert!("partial".parse::<AblationMode>().is_err());
}

#[test]
fn config_validation() {
    let mut c = TrainConfig::default();
    assert!(c.validate().is_ok());
    c.learning_rate = 0.0;
    assert!(c.validate().is_err());
    c = TrainConfig {
        epochs: 0,
        ..Default::default()
    };
    assert!(c.validate().is_err());
}

#[test]
fn backbone_only_has_no_alignment_or_reconstruction() {
    let data = pairs(2);
    let batch: Vec<&PhasePair> = data.iter().collect();
    let mut state = TrainState::new(tiny_model(), config(AblationMode::BackboneOnly)).unwrap();
    let before_a = snapshot(state.model.params(), DECODER_A);
    let out = train_step(&mut state, &batch, &RandomConvFeatures::default()).unwrap();
    assert_eq!(out.losses.fda, 0.0);
    assert_eq!(out.losses.rec, 0.0);
    assert!(out.losses.trans > 0.0 && out.losses.kl > 0.0);
    assert_eq!(before_a, snapshot(state.model.params(), DECODER_A));
}

#[test]
fn kl_fda_leaves_decoder_a_alone() {
    let data = pairs(2);
    let batch: Vec<&PhasePair> = data.iter().collect();
    let mut state = TrainState::new(tiny_model(), config(AblationMode::KlFda)).unwrap();
    let before_a = snapshot(state.model.params(), DECODER_A);
    let before_b = snapshot(state.model.params(), DECODER_B);
    let out = train_step(&mut state, &batch, &RandomConvFeatures::default()).unwrap();
    assert!(out.losses.fda > 0.0 && out.losses.rec > 0.0);
    assert_eq!(before_a, snapshot(state.model.params(), DECODER_A));
    assert_ne!(before_b, snapshot(state.model.params(), DECODER_B));
}

#[test]
fn updates_are_isolated() {
    let data = pairs(2);
    let batch: Vec<&PhasePair> = data.iter().collect();
    let ex = RandomConvFeatures::default();
    let mut state = TrainState::new(tiny_model(), config(AblationMode::Full)).unwrap();
    let pass = generator_pass(&state.model, AblationMode::Full, &batch, &mut state.rng, &ex).unwrap();

    let disc_before = snapshot(state.model.params(), DISCRIMINATOR);
    let enc_before = snapshot(state.model.params(), ENCODER);
    generator_update(&mut state, &pass).unwrap();
    assert_eq!(disc_before, snapshot(state.model.params(), DISCRIMINATOR));
    let enc_after = snapshot(state.model.params(), ENCODER);
    assert_ne!(enc_before, enc_after);

    // The discriminator loss reaches no generator parameter.
    let loss = discriminator_loss(&state.model, &pass).unwrap();
    let grads = loss.backward().unwrap();
    for (name, var) in state.model.params().iter() {
        let has = grads.get(var.as_tensor()).is_some();
        assert_eq!(has, name.starts_with(DISCRIMINATOR), "{name}");
    }
    discriminator_update(&mut state, &pass).unwrap();
    assert_eq!(enc_after, snapshot(state.model.params(), ENCODER));
    assert_ne!(disc_before, snapshot(state.model.params(), DISCRIMINATOR));
}

#[test]
fn steps_are_deterministic() {
    let data = pairs(4);
    let ex = RandomConvFeatures::default();
    let run = || {
        let mut state = TrainState::new(tiny_model(), config(AblationMode::Full)).unwrap();
        (0..4)
            .map(|i| {
                let batch: Vec<&PhasePair> = data[(i % 2) * 2..(i % 2) * 2 + 2].iter().collect();
                train_step(&mut state, &batch, &ex).unwrap()
            })
            .collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn non_finite_loss_reports_step() {
    let data = pairs(2);
    let batch: Vec<&PhasePair> = data.iter().collect();
    let mut state = TrainState::new(tiny_model(), config(AblationMode::Full)).unwrap();
    let (_, w) = state.model.params().with_prefix(DECODER_B).next().unwrap();
    w.set(&(w.as_tensor() * f64::NAN).unwrap()).unwrap();
    match train_step(&mut state, &batch, &RandomConvFeatures::default()) {
        Err(Error::Divergence { step: Some(1), .. }) => {}
        other => panic!("expected divergence at step 1, got {other:?}"),
    }
}

#[test]
fn one_epoch_bookkeeping() {
    let data = pairs(8);
    let dir = tempfile::tempdir().unwrap();
    let opts = RunOptions {
        run_dir: Some(dir.path().to_path_buf()),
        ..Default::default()
    };
    let out = train(
        &tiny_model(),
        &config(AblationMode::Full),
        &data,
        &data[..2],
        &opts,
    )
    .unwrap();
    assert_eq!(out.state.step, 4);
    assert_eq!(out.history.len(), 1);
    assert!(out.initial.is_some());
    let rows = read_history(&dir.path().join(HISTORY_FILE)).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].step, 4);
    for f in [
        RUN_SNAPSHOT,
        BEST_CHECKPOINT,
        LAST_CHECKPOINT,
        INITIAL_VALIDATION_FILE,
    ] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
}

#[test]
fn empty_training_set() {
    let r = train(
        &tiny_model(),
        &config(AblationMode::Full),
        &[],
        &[],
        &RunOptions::default(),
    );
    assert!(matches!(r, Err(Error::EmptyDataset(_))));
}

#[test]
fn epoch_order_is_a_seeded_permutation() {
    let a = epoch_order(3, 0, 20);
    assert_eq!(a, epoch_order(3, 0, 20));
    assert_ne!(a, epoch_order(3, 1, 20));
    let mut s = a.clone();
    s.sort();
    assert_eq!(s, (0..20).collect::<Vec<_>>());
}

fn trained_state() -> TrainState {
    let data = pairs(4);
    let opts = RunOptions::default();
    let cfg = TrainConfig {
        epochs: 1,
        ..config(AblationMode::Full)
    };
    train(&tiny_model(), &cfg, &data, &[], &opts).unwrap().state
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let state = trained_state();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.bin");
    save_checkpoint(&state, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(
        back.model.count_parameters(ParamScope::All),
        state.model.count_parameters(ParamScope::All)
    );
    for name in state.model.params().names() {
        let a = state.model.params().values(name).unwrap();
        let b = back.model.params().values(name).unwrap();
        assert!(
            a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()),
            "{name}"
        );
    }
    for (x, y) in [
        (&state.generator_opt, &back.generator_opt),
        (&state.discriminator_opt, &back.discriminator_opt),
    ] {
        assert_eq!(x.steps(), y.steps());
        assert_eq!(x.moments().len(), y.moments().len());
        for (k, m) in x.moments() {
            let n = &y.moments()[k];
            let eq = |a: &Tensor, b: &Tensor| {
                a.flatten_all().unwrap().to_vec1::<f32>().unwrap()
                    == b.flatten_all().unwrap().to_vec1::<f32>().unwrap()
            };
            assert!(eq(&m.m, &n.m) && eq(&m.v, &n.v), "{k}");
        }
    }
    assert_eq!(
        (back.step, back.epoch, back.batch_in_epoch),
        (state.step, state.epoch, state.batch_in_epoch)
    );
    assert_eq!(back.rng, state.rng);
    assert_eq!(back.config, state.config);
    assert_eq!(back.best_val_psnr, state.best_val_psnr);
}

#[test]
fn checkpoint_rejects_wrong_layout() {
    let state = trained_state();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.bin");
    save_checkpoint(&state, &path).unwrap();
    let wrong = ModelConfig {
        base_channels: 8,
        ..tiny_model()
    };
    match load_checkpoint_with(&path, &wrong) {
        Err(Error::Checkpoint(CheckpointError::ParameterMismatch { name, .. })) => {
            assert!(name.starts_with(ENCODER), "{name}")
        }
        other => panic!("expected parameter mismatch, got {other:?}"),
    }
    let resized = ModelConfig {
        input_size: (32, 32),
        ..tiny_model()
    };
    assert!(matches!(
        load_checkpoint_with(&path, &resized),
        Err(Error::Checkpoint(CheckpointError::ConfigMismatch(_)))
    ));
}

#[test]
fn checkpoint_detects_truncation_and_version() {
    let state = trained_state();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.bin");
    save_checkpoint(&state, &path).unwrap();
    let bytes = fs_bytes(&path);
    for cut in [5, 30, bytes.len() - 3] {
        let p = dir.path().join(format!("cut{cut}.bin"));
        std::fs::write(&p, &bytes[..cut]).unwrap();
        assert!(
            matches!(
                load_checkpoint(&p),
                Err(Error::Checkpoint(CheckpointError::Corrupt(_)))
            ),
            "cut at {cut}"
        );
    }
    let mut v2 = bytes.clone();
    v2[8..12].copy_from_slice(&2u32.to_le_bytes());
    let p = dir.path().join("v2.bin");
    std::fs::write(&p, v2).unwrap();
    assert!(matches!(
        load_checkpoint(&p),
        Err(Error::Checkpoint(CheckpointError::VersionMismatch {
            found: 2,
            ..
        }))
    ));
}

fn fs_bytes(p: &std::path::Path) -> Vec<u8> {
    std::fs::read(p).unwrap()
}

#[test]
fn resume_matches_uninterrupted() {
    let data = pairs(6);
    let cfg = TrainConfig {
        epochs: 3,
        checkpoint_every: 2,
        ..config(AblationMode::Full)
    };
    let straight = train(&tiny_model(), &cfg, &data, &data[..3], &RunOptions::default()).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let opts = RunOptions {
        run_dir: Some(dir.path().to_path_buf()),
        stop_after_epoch: Some(2),
    };
    train(&tiny_model(), &cfg, &data, &data[..3], &opts).unwrap();
    // Resume from a mid-epoch checkpoint (3 steps per epoch, step 4 is inside epoch 2).
    let state = load_checkpoint(&dir.path().join("ckpt_4.bin")).unwrap();
    assert_eq!((state.epoch, state.batch_in_epoch), (1, 1));
    let resumed = resume(state, &data, &data[..3], &RunOptions::default()).unwrap();
    assert_eq!(resumed.state.step, straight.state.step);
    for name in straight.state.model.params().names() {
        assert_eq!(
            straight.state.model.params().values(name).unwrap(),
            resumed.state.model.params().values(name).unwrap(),
            "{name}"
        );
    }
    assert_eq!(resumed.history, straight.history[1..]);
}
