mod common;

use avmaster::checkpoint::{load_checkpoint, load_params, save_checkpoint};
use avmaster::objectives::InferenceConfig;
use avmaster::optim::Schedule;
use avmaster::train::{evaluate, train, DataInfo, RunManifest, TrainConfig, Trainer};
use avmaster::{AvMaster, Error, ModelConfig};

fn quick(epochs: usize, lr: f64) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 8,
        schedule: Schedule {
            base_lr: lr,
            factor: 0.1,
            interval: 8,
        },
        seed: 4,
    }
}

#[test]
fn schedule_steps_down_every_interval() {
    let s = Schedule::default();
    assert_eq!((s.base_lr, s.factor, s.interval), (1e-4, 0.1, 8));
    for e in 0..30 {
        let want = 1e-4 * 0.1f64.powi((e / 8) as i32);
        assert!((s.lr_at(e) - want).abs() <= 1e-18, "epoch {e}");
    }
    let d = TrainConfig::default();
    assert_eq!((d.epochs, d.batch_size), (30, 32));
}

#[test]
fn qa_only_weights_zero_the_other_contributions() {
    let (task, mut config) = common::tiny_task(0);
    config.lambda_vp = 0.0;
    config.lambda_ap = 0.0;
    config.lambda_c = 0.0;
    let data = task.generate(0, 20);
    let (_, manifest) = train(&config, &quick(2, 1e-3), &data, DataInfo::of("t", &data)).unwrap();
    for rec in &manifest.epochs {
        let l = rec.losses;
        assert!(l.l_vp > 0.0 && l.l_ap > 0.0 && l.l_c > 0.0);
        assert_eq!(l.total, l.l_qa);
    }
}

#[test]
fn overfitting_lowers_the_qa_loss() {
    let (task, config) = common::tiny_task(0);
    let data = task.generate(0, 16);
    let tc = TrainConfig {
        schedule: Schedule {
            base_lr: 1e-2,
            factor: 0.1,
            interval: 60,
        },
        ..quick(60, 1e-2)
    };
    let (trainer, manifest) = train(&config, &tc, &data, DataInfo::of("t", &data)).unwrap();
    let median = |xs: &[f64]| {
        let mut v = xs.to_vec();
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    };
    let l: Vec<f64> = manifest.epochs.iter().map(|r| r.losses.l_qa).collect();
    let k = l.len() / 10;
    assert!(median(&l[l.len() - k..]) < median(&l[..k]), "{l:?}");
    let m = evaluate(&trainer.model, &data, &InferenceConfig::default()).unwrap();
    assert!(m.accuracy > 0.9, "{}", m.accuracy);
}

#[test]
fn equal_inputs_give_identical_runs() {
    let (task, config) = common::tiny_task(1);
    let data = task.generate(0, 12);
    let run = || train(&config, &quick(2, 1e-3), &data, DataInfo::of("t", &data)).unwrap();
    let (a, mut ma) = run();
    let (b, mut mb) = run();
    assert_eq!(a.model.params, b.model.params);
    ma.wall_clock_secs = 0.0;
    mb.wall_clock_secs = 0.0;
    assert_eq!(ma, mb);
    let other = train(&config, &TrainConfig { seed: 5, ..quick(2, 1e-3) }, &data, DataInfo::of("t", &data)).unwrap();
    assert_ne!(a.model.params, other.0.model.params);
}

#[test]
fn resumed_training_matches_uninterrupted_training() {
    let (task, config) = common::tiny_task(2);
    let data = task.generate(0, 13);
    let model = AvMaster::init(config.clone(), 7).unwrap();
    let mut straight = Trainer::new(model.clone(), quick(2, 1e-3)).unwrap();
    straight.run_epoch(&data).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let manifest = RunManifest::new(&config, &straight.train, DataInfo::of("t", &data));
    save_checkpoint(&straight, Some(&manifest), dir.path()).unwrap();
    let second = straight.run_epoch(&data).unwrap();

    let (mut resumed, saved) = load_checkpoint(dir.path()).unwrap();
    assert_eq!(saved.unwrap(), manifest);
    assert_eq!(resumed.epoch, 1);
    let again = resumed.run_epoch(&data).unwrap();
    assert_eq!(again, second);
    assert_eq!(resumed.model.params, straight.model.params);
    assert_eq!(resumed.opt.m, straight.opt.m);
    assert_eq!(resumed.opt.v, straight.opt.v);
    assert_eq!(resumed.opt.step, straight.opt.step);
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let (_, config) = common::tiny_task(0);
    let model = common::perturbed_model(&config, 3);
    let trainer = Trainer::new(model, quick(1, 1e-3)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(&trainer, None, dir.path()).unwrap();
    let (back, manifest) = load_checkpoint(dir.path()).unwrap();
    assert!(manifest.is_none());
    assert_eq!(back.model.params, trainer.model.params);
    assert_eq!(back.model.config, trainer.model.config);
}

#[test]
fn mismatched_configurations_are_refused() {
    let (_, config) = common::tiny_task(0);
    let trainer = Trainer::new(AvMaster::init(config.clone(), 0).unwrap(), quick(1, 1e-3)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(&trainer, None, dir.path()).unwrap();

    let wider = ModelConfig { dim: 16, ..config.clone() };
    match load_params(dir.path(), &wider) {
        Err(Error::Shape(msg)) => assert!(msg.contains("proj.audio.w"), "{msg}"),
        other => panic!("{other:?}"),
    }
    let fewer = ModelConfig { gpap: false, ..config.clone() };
    assert!(matches!(load_params(dir.path(), &fewer), Err(Error::Shape(_))));
    let more = ModelConfig {
        attn_shared: false,
        ..config.clone()
    };
    assert!(matches!(load_params(dir.path(), &more), Err(Error::Shape(_))));

    std::fs::remove_file(dir.path().join("params").join("decoder.multimodal.head.b.bin")).unwrap();
    match load_params(dir.path(), &config) {
        Err(Error::Checkpoint(msg)) => assert!(msg.contains("decoder.multimodal.head.b"), "{msg}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn random_parameters_score_at_chance() {
    let config = ModelConfig::tiny();
    let model = AvMaster::init(config.clone(), 11).unwrap();
    let data = common::random_samples(&config, 1200, 12);
    let m = evaluate(&model, &data, &InferenceConfig::default()).unwrap();
    let p = 1.0 / config.num_answers as f64;
    let sigma = (p * (1.0 - p) / data.len() as f64).sqrt();
    assert!((m.accuracy - p).abs() <= 3.0 * sigma, "{}", m.accuracy);
    assert!(matches!(evaluate(&model, &[], &InferenceConfig::default()), Err(Error::EmptyDataset)));
}

#[test]
fn disabling_decoders_only_changes_the_combination() {
    let (task, config) = common::tiny_task(0);
    let model = common::perturbed_model(&config, 5);
    let data = task.generate(0, 60);
    let base = evaluate(&model, &data, &InferenceConfig::default()).unwrap();
    for ic in [
        InferenceConfig { enable_ap: false, enable_vp: false, ..Default::default() },
        InferenceConfig { enable_qa: false, ..Default::default() },
        InferenceConfig { enable_vp: false, combine: avmaster::objectives::CombineMode::Mul, ..Default::default() },
    ] {
        let m = evaluate(&model, &data, &ic).unwrap();
        assert_eq!(m.per_decoder, base.per_decoder);
    }
    let none = InferenceConfig { enable_qa: false, enable_ap: false, enable_vp: false, ..Default::default() };
    assert!(evaluate(&model, &data, &none).is_err());
}
