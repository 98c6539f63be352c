use super::*;
use crate::archspec::builtin;
use crate::dataio::{gen_synthetic, GestureAnnotation, SynthConfig, VideoSequence};
use crate::model::{build_model, BuildOptions};
use nalgebra::DMatrix;
use rand::Rng;

#[test]
fn orthogonal_identity_and_gain() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (gain, tol) in [(1.0, 1e-5), (2.0, 1e-4)] {
        let w = orthogonal_init(&[4, 4], gain, &mut rng).unwrap();
        let m = DMatrix::from_row_slice(4, 4, w.data());
        let d = &m * m.transpose() - DMatrix::identity(4, 4) * (gain * gain);
        assert!(d.amax() <= tol, "{}", d.amax());
    }
}

#[test]
fn orthogonal_singular_values_equal_gain() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for shape in [vec![3, 7], vec![7, 3], vec![5, 2, 3, 3], vec![6, 6]] {
        let gain = rng.random_range(0.5..2.0);
        let w = orthogonal_init(&shape, gain, &mut rng).unwrap();
        let cols: usize = shape[1..].iter().product();
        let sv = DMatrix::from_row_slice(shape[0], cols, w.data()).singular_values();
        assert!(sv.iter().all(|s| (s - gain).abs() <= 1e-5), "{shape:?}: {sv}");
    }
    assert!(orthogonal_init(&[0, 3], 1.0, &mut rng).is_err());
}

#[test]
fn cross_entropy_examples() {
    let one_hot = Tensor::from_vec(&[2, 3], vec![1.0f64, 0.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
    assert!(cross_entropy(&one_hot, &[0, 2]).unwrap() <= 1e-6);
    let uniform = Tensor::full(&[4, 5], 0.2f64);
    assert!((cross_entropy(&uniform, &[0, 1, 2, 4]).unwrap() - 5f64.ln()).abs() < 1e-12);
    let p = Tensor::from_vec(&[2, 2], vec![0.7f64, 0.3, 0.2, 0.8]).unwrap();
    let want = (-(0.7f64.ln()) - 0.8f64.ln()) / 2.0;
    assert!((cross_entropy(&p, &[0, 1]).unwrap() - want).abs() < 1e-12);
    assert!((want - 0.28990).abs() < 1e-5);
    assert!(cross_entropy(&p, &[0, 2]).is_err());
    assert!(cross_entropy(&p, &[0]).is_err());
    // Zero probability is clamped, not infinite.
    let z = Tensor::from_vec(&[1, 2], vec![0.0f64, 1.0]).unwrap();
    assert!((cross_entropy(&z, &[0]).unwrap() - 1e12f64.ln()).abs() < 1e-9);
}

#[test]
fn graph_loss_matches_direct_loss() {
    let p = Tensor::from_vec(&[3, 2], vec![0.6f64, 0.4, 0.1, 0.9, 0.5, 0.5]).unwrap();
    let mut g = Graph::new();
    let v = g.constant(p.clone());
    let l = g.cross_entropy(v, &[1, 1, 0]).unwrap();
    assert!((g.value(l).item() - cross_entropy(&p, &[1, 1, 0]).unwrap()).abs() < 1e-15);
}

#[test]
fn stopper_fires_after_patience() {
    let mut s = EarlyStopper::new(3);
    assert!(!s.update(0, 1.0));
    let mut stopped = None;
    for epoch in 1..20 {
        if s.update(epoch, 1.0 + epoch as f64) {
            stopped = Some(epoch);
            break;
        }
    }
    assert_eq!(stopped, Some(4));
    assert_eq!(s.best_epoch, 0);

    let mut s = EarlyStopper::new(1);
    assert!(!s.update(0, 2.0));
    assert!(!s.update(1, 3.0));
    assert!(!s.update(2, 1.0));
    assert!(s.improved(2));
    assert!(!s.update(3, 1.0));
    assert!(s.update(4, 1.5));
}

#[test]
fn config_round_trips_through_kv() {
    let c = TrainConfig {
        batch_size: 8,
        gamma: 0.9,
        steps_per_epoch: Some(12),
        precision: Precision::F64,
        augment: false,
        ..Default::default()
    };
    let text = crate::kv::render_kv(&c.to_pairs());
    assert_eq!(TrainConfig::from_kv(&text).unwrap(), c);
    assert!(TrainConfig::from_kv("nonsense=1").is_err());
    let d = TrainConfig::default();
    assert_eq!((d.batch_size, d.learning_rate, d.gamma, d.patience, d.fragment_len), (32, 1e-3, 0.97, 10, 64));
    assert!(TrainConfig { gamma: 0.0, ..d.clone() }.validate().is_err());
    assert!(TrainConfig { batch_size: 0, ..d }.validate().is_err());
}

/// Two classes: dark frames and bright frames, both noisy.
fn toy(seed: u64, n_seq: usize) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sequences = Vec::new();
    for _ in 0..n_seq {
        let t = 64;
        let mut data = Vec::with_capacity(t * 256);
        let labels: Vec<u16> = (0..t).map(|i| ((i / 16) % 2) as u16).collect();
        for &l in &labels {
            let base = if l == 1 { 0.7 } else { 0.3 };
            data.extend((0..256).map(|_| base + rng.random_range(-0.1f32..0.1)));
        }
        let anns = (0..t / 16)
            .filter(|b| b % 2 == 1)
            .map(|b| GestureAnnotation {
                class: 1,
                start: (b * 16) as u32,
                end: (b * 16 + 15) as u32,
            })
            .collect();
        sequences.push(VideoSequence::new(Tensor::from_vec(&[t, 1, 16, 16], data).unwrap(), labels, anns).unwrap());
    }
    Dataset {
        provenance: vec![],
        sequences,
    }
}

fn single(n_classes: usize, seed: u64) -> Model<f32> {
    let b = builtin("single_desk").unwrap();
    build_model(&b.spec, n_classes, b.variant, &BuildOptions { seed, ..Default::default() }).unwrap()
}

#[test]
fn converges_on_separable_frames() {
    let data = toy(3, 4);
    let mut model = single(2, 0);
    let cfg = TrainConfig {
        max_steps: Some(200),
        steps_per_epoch: Some(20),
        max_epochs: 10,
        patience: 100,
        ..Default::default()
    };
    let out = train(&mut model, &data, &data, &cfg).unwrap();
    assert_eq!(out.history.steps, 200);
    let probe = fixed_samples(&data, SampleKind::Frame, cfg.val_samples, cfg.seed ^ 0x7472_6e).unwrap();
    let init = out.history.records[0].train_loss;
    let after = evaluate_loss(&model, &probe, 32).unwrap();
    assert!(after < 0.1, "loss {init} -> {after}");
    assert!(after <= 0.1 * init, "loss {init} -> {after}");
}

fn small_cfg(seed: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        steps_per_epoch: Some(3),
        max_epochs: 3,
        val_samples: 8,
        seed,
        ..Default::default()
    }
}

fn synth(seed: u64) -> Dataset {
    gen_synthetic(&SynthConfig {
        n_sequences: 2,
        frames: 70,
        seed,
        ..Default::default()
    })
    .unwrap()
}

#[test]
fn same_seed_same_run() {
    let (tr, va) = (synth(1), synth(2));
    let b = builtin("tconv_lstm_desk").unwrap();
    let run = || {
        let mut m: Model<f32> = build_model(&b.spec, 6, b.variant, &BuildOptions { seed: 5, ..Default::default() }).unwrap();
        let out = train(&mut m, &tr, &va, &small_cfg(7)).unwrap();
        let mut csv = Vec::new();
        out.history.write_csv(&mut csv).unwrap();
        let mut ck = Vec::new();
        write_checkpoint(&mut ck, &Checkpoint::new(&m, &out, vec![])).unwrap();
        (csv, ck)
    };
    let a = run();
    assert_eq!(a, run());
    let text = String::from_utf8(a.0).unwrap();
    assert_eq!(text.lines().count(), 1 + 4);
}

#[test]
fn keeps_best_validation_weights() {
    let (tr, va) = (synth(3), synth(4));
    for name in ["tpool_mean_desk", "rnn_std_desk", "single_desk"] {
        let b = builtin(name).unwrap();
        let mut m: Model<f32> = build_model(&b.spec, 6, b.variant, &BuildOptions::default()).unwrap();
        let cfg = TrainConfig {
            learning_rate: 3e-2,
            max_epochs: 5,
            ..small_cfg(1)
        };
        let out = train(&mut m, &tr, &va, &cfg).unwrap();
        let h = &out.history;
        let best = h.records.iter().map(|r| r.val_loss).fold(f64::INFINITY, f64::min);
        assert_eq!(h.records[h.best_epoch].val_loss, best, "{name}");
        let kind = SampleKind::for_variant(m.variant, m.frames(), cfg.fragment_len);
        let val = fixed_samples(&va, kind, cfg.val_samples, cfg.seed ^ 0x7661_6c).unwrap();
        assert_eq!(evaluate_loss(&m, &val, cfg.batch_size).unwrap(), best, "{name}");
        let lrs: Vec<f64> = h.records[1..].iter().map(|r| r.lr).collect();
        assert!(lrs.windows(2).all(|w| w[1] < w[0]));
    }
}

#[test]
fn training_does_not_raise_the_training_loss() {
    let data = toy(8, 2);
    let mut model = single(2, 3);
    let cfg = TrainConfig {
        steps_per_epoch: Some(10),
        max_epochs: 3,
        ..Default::default()
    };
    let probe = fixed_samples(&data, SampleKind::Frame, 64, 99).unwrap();
    let before = evaluate_loss(&model, &probe, 32).unwrap();
    train(&mut model, &data, &data, &cfg).unwrap();
    assert!(evaluate_loss(&model, &probe, 32).unwrap() <= before);
}

#[test]
fn nan_input_aborts_with_numeric_error() {
    let mut data = toy(1, 1);
    data.sequences[0].frames.data_mut().fill(f32::NAN);
    let mut model = single(2, 0);
    let cfg = TrainConfig {
        steps_per_epoch: Some(2),
        max_epochs: 1,
        val_samples: 4,
        ..Default::default()
    };
    let clean = toy(2, 1);
    let err = train(&mut model, &data, &clean, &cfg).unwrap_err();
    assert!(matches!(err, Error::Numeric(_)), "{err}");
}

#[test]
fn rejects_empty_splits_and_excess_labels() {
    let mut model = single(2, 0);
    let cfg = small_cfg(0);
    let empty = Dataset::default();
    assert!(matches!(train(&mut model, &empty, &toy(1, 1), &cfg), Err(Error::Data(_))));
    assert!(matches!(train(&mut model, &toy(1, 1), &empty, &cfg), Err(Error::Data(_))));
    assert!(matches!(train(&mut model, &synth(1), &synth(1), &cfg), Err(Error::Data(_))));
}

#[test]
fn pretraining_phase_for_pooling_only() {
    let (tr, va) = (synth(5), synth(6));
    let b = builtin("tpool_max_desk").unwrap();
    let mut m: Model<f32> = build_model(&b.spec, 6, b.variant, &BuildOptions::default()).unwrap();
    let cfg = TrainConfig {
        pretrain_epochs: 2,
        ..small_cfg(2)
    };
    let out = train(&mut m, &tr, &va, &cfg).unwrap();
    let phases: Vec<Phase> = out.history.records.iter().map(|r| r.phase).collect();
    assert_eq!(phases.iter().filter(|&&p| p == Phase::Pretrain).count(), 3);
    assert_eq!(out.history.train_records().count(), 4);

    let mut lstm: Model<f32> = {
        let b = builtin("rnn_lstm_desk").unwrap();
        build_model(&b.spec, 6, b.variant, &BuildOptions::default()).unwrap()
    };
    assert!(matches!(train(&mut lstm, &tr, &va, &cfg), Err(Error::Usage(_))));
}

#[test]
fn checkpoint_round_trip() {
    let (tr, va) = (synth(7), synth(8));
    let b = builtin("tconv_desk").unwrap();
    let mut m: Model<f32> = build_model(&b.spec, 6, b.variant, &BuildOptions { seed: 1, ..Default::default() }).unwrap();
    let out = train(&mut m, &tr, &va, &small_cfg(3)).unwrap();
    let ck = Checkpoint::new(&m, &out, small_cfg(3).to_pairs());
    let mut bytes = Vec::new();
    write_checkpoint(&mut bytes, &ck).unwrap();
    assert_eq!(&bytes[..4], CHECKPOINT_MAGIC);

    let back: Checkpoint<f32> = read_checkpoint(bytes.as_slice()).unwrap();
    let mut again = Vec::new();
    write_checkpoint(&mut again, &back).unwrap();
    assert_eq!(bytes, again);
    assert_eq!(back.optimizer, out.optimizer);
    assert_eq!(back.rng, out.rng);
    assert_eq!(back.settings, small_cfg(3).to_pairs());

    let restored = back.model().unwrap();
    let x = stack::<f32>(&fixed_samples(&va, SampleKind::Window(32), 2, 0).unwrap()).unwrap().0;
    assert_eq!(restored.predict(&x).unwrap(), m.predict(&x).unwrap());

    // Widening into f64 is exact.
    let wide: Checkpoint<f64> = read_checkpoint(bytes.as_slice()).unwrap();
    assert_eq!(wide.params[0].1.data()[0], ck.params[0].1.data()[0] as f64);

    for cut in [3, 10, bytes.len() / 2, bytes.len() - 1] {
        assert!(matches!(read_checkpoint::<f32, _>(&bytes[..cut]), Err(Error::Format(_))), "cut {cut}");
    }
    let mut trailing = bytes.clone();
    trailing.push(0);
    assert!(read_checkpoint::<f32, _>(trailing.as_slice()).is_err());
    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(matches!(read_checkpoint::<f32, _>(magic.as_slice()), Err(Error::Format(_))));
}

#[test]
fn checkpoint_with_wrong_architecture_is_rejected() {
    let (tr, va) = (toy(1, 1), toy(2, 1));
    let mut m = single(2, 0);
    let out = train(&mut m, &tr, &va, &small_cfg(0)).unwrap();
    let mut ck = Checkpoint::new(&m, &out, vec![]);
    ck.params.pop();
    assert!(matches!(ck.model(), Err(Error::Format(_))));
}
