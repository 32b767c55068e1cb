use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use lw2g::lw2g::DecisionKind;
use lw2g::model::{Encoder, EncoderConfig, HeadMask, PromptSet};
use lw2g::snapshot::Snapshot;
use lw2g::taskstream::{generate, StreamSpec};
use lw2g::trainer::{sgd_step, Learner, Mode, TrainConfig};

fn twin(seed: u64) -> StreamSpec {
    StreamSpec {
        seed,
        n_tasks: 2,
        similarity_schedule: vec![0.0, 1.0],
        jitter_deg: 0.0,
        mean_shift: 0.0,
        ..StreamSpec::default()
    }
}

fn learner(seed: u64, mode: Mode) -> Learner<f64> {
    let enc = Encoder::new(&EncoderConfig {
        seed,
        ..EncoderConfig::default()
    })
    .unwrap();
    let cfg = TrainConfig {
        seed,
        mode,
        eps_task: 0.9,
        eps_pre: 0.99,
        ..TrainConfig::default()
    };
    Learner::new(cfg, enc).unwrap()
}

#[test]
fn twin_task_reuses_the_first_set() {
    for seed in 0..3 {
        let tasks = generate::<f64>(&twin(seed)).unwrap();
        let mut l = learner(seed, Mode::Lw2g);
        l.train_task(&tasks[0]).unwrap();
        let r = l.train_task(&tasks[1]).unwrap();
        assert_eq!(r.records.len(), 1);
        let rec = r.records[0];
        assert_eq!(rec.z, rec.hfc_old.angle - rec.hfc_pre.angle);
        assert!(
            rec.hfc_old.degrees() < rec.hfc_pre.degrees(),
            "seed {seed}: {rec:?}"
        );
        assert_eq!(r.decision, DecisionKind::Reuse(0));
        assert_eq!(l.pool.len(), 1);
        let drift = r.drift.unwrap();
        assert!(drift.iter().all(|&d| d < 1e-5), "{drift:?}");

        let mut g = learner(seed, Mode::GrowAlways);
        g.train_task(&tasks[0]).unwrap();
        g.train_task(&tasks[1]).unwrap();
        assert_eq!(g.pool.len(), 2);
    }
}

#[test]
fn frozen_tokens_receive_no_gradient() {
    let cfg = EncoderConfig::default();
    let mut enc = Encoder::<f64>::new(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    enc.head.grow_to(4, &mut rng);
    let donor = PromptSet::random(0, &cfg, &mut rng);
    let mut set = PromptSet::random(1, &cfg, &mut rng);
    set.frozen_extra = Some(donor.prompts.clone());
    let x = Array2::from_shape_fn((8, cfg.input_dim), |_| rng.random_range(-1.0..1.0));
    let y: Vec<usize> = (0..8).map(|i| i % 4).collect();
    let mask = HeadMask::all(4);

    let frozen_before = set.frozen_extra.clone().unwrap();
    let active_before = set.prompts.clone();
    for _ in 0..5 {
        let g = enc
            .grad_prompts(
                &set,
                set.frozen_extra.as_ref().map(|f| f.view()),
                x.view(),
                &y,
                &mask,
                1.0,
            )
            .unwrap();
        sgd_step(&mut set, &g.grad, 0.1);
    }
    let frozen_after = set.frozen_extra.clone().unwrap();
    assert!(frozen_before
        .iter()
        .zip(frozen_after.iter())
        .all(|(a, b)| a.to_bits() == b.to_bits()));
    assert_ne!(set.prompts, active_before);

    // the frozen tokens still shape the output
    let with = enc.forward_prompted(&set, x.view(), &mask).unwrap();
    let mut bare = set.clone();
    bare.frozen_extra = None;
    let without = enc.forward_prompted(&bare, x.view(), &mask).unwrap();
    assert!((&with - &without).iter().any(|v| v.abs() > 1e-9));
}

#[test]
fn restored_snapshot_continues_training() {
    let spec = StreamSpec {
        n_tasks: 3,
        similarity_schedule: vec![0.0, 1.0, 1.0],
        ..StreamSpec::default()
    };
    let tasks = generate::<f32>(&spec).unwrap();
    let enc = Encoder::new(&EncoderConfig::default()).unwrap();
    let mut a = Learner::new(
        TrainConfig {
            epochs: 2,
            ..TrainConfig::default()
        },
        enc,
    )
    .unwrap();
    let mut retrieval = lw2g::metrics::AccuracyMatrix::new(3);
    let mut oracle = lw2g::metrics::AccuracyMatrix::new(3);
    for t in 0..2 {
        a.train_task(&tasks[t]).unwrap();
        a.evaluate_into(&tasks, t, &mut retrieval, &mut oracle)
            .unwrap();
    }
    let bytes = Snapshot::capture(&a, &retrieval, &oracle).to_bytes();
    let (mut b, r2, _) = Snapshot::from_bytes(&bytes)
        .unwrap()
        .restore::<f32>()
        .unwrap();
    assert_eq!(r2, retrieval);
    let ra = a.train_task(&tasks[2]).unwrap();
    let rb = b.train_task(&tasks[2]).unwrap();
    assert_eq!(ra.decision, rb.decision);
    assert_eq!(ra.pool_after, rb.pool_after);
    assert!(
        (ra.final_loss - rb.final_loss).abs() < 1e-3,
        "{} vs {}",
        ra.final_loss,
        rb.final_loss
    );
}
