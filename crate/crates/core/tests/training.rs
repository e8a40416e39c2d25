use patchcast::checkpoint::Checkpoint;
use patchcast::data::{synth_corpus, Corpus, Family, Granularity, Mixture, Partition, SynthGroup, SynthSpec, TimeSeries};
use patchcast::model::{ModelConfig, ModelWeights};
use patchcast::training::{
    assemble_batch, batch_loss, loss_and_grad, mean_window_loss, Normalization, TrainConfig, TrainError, Trainer,
};
use proptest::prelude::*;

fn sinusoid_corpus(count: usize, length: usize, seed: u64) -> Corpus {
    let spec = SynthSpec::default().with_group(SynthGroup {
        granularity: Granularity::Hourly,
        count,
        length: [length, length],
        families: vec![Family::Sinusoid],
        partition: Partition::Pretrain,
        noise: 0.05,
        level: [10.0, 20.0],
        scale: [1.0, 3.0],
    });
    Corpus::new(synth_corpus(&spec, seed).unwrap()).unwrap()
}

fn small_train(steps: u64) -> TrainConfig {
    TrainConfig {
        learning_rate: 3e-3,
        batch_size: 8,
        steps,
        seed: 5,
        eval_every: 0,
        ..TrainConfig::default()
    }
}

#[test]
fn end_to_end_gradient_matches_finite_differences() {
    let cfg = ModelConfig::desk_scale();
    let corpus = sinusoid_corpus(4, 30, 1);
    let mix = Mixture::uniform(&corpus).unwrap();
    let trainer = Trainer::new(cfg.clone(), small_train(1)).unwrap();
    let windows = trainer.batch_for_step(&corpus, &mix, 0).unwrap()[..2].to_vec();
    let batch = assemble_batch(&windows, &cfg, Normalization::PerWindow).unwrap();
    let weights = ModelWeights::init(&cfg, 3).unwrap();
    let (_, grads) = loss_and_grad(&weights, &cfg, &batch, None).unwrap();

    const STEP: f64 = 1e-5;
    const TOL: f64 = 1e-3;
    let names: Vec<String> = weights.named().into_iter().map(|(n, _)| n).collect();
    let analytic: Vec<Vec<f64>> = grads.named().into_iter().map(|(_, t)| t.data().to_vec()).collect();
    for (k, name) in names.iter().enumerate() {
        let len = analytic[k].len();
        // A stride keeps this test quick; the acceptance suite checks every entry.
        let stride = (len / 24).max(1);
        let (mut num, mut den_a, mut den_f) = (0.0f64, 0.0f64, 0.0f64);
        for i in (0..len).step_by(stride) {
            let eval = |delta: f64| {
                let mut w = weights.clone();
                w.values_mut()[k].data_mut()[i] += delta;
                batch_loss(&w, &cfg, &batch).unwrap()
            };
            let fd = (eval(STEP) - eval(-STEP)) / (2.0 * STEP);
            let a = analytic[k][i];
            num += (a - fd).powi(2);
            den_a += a * a;
            den_f += fd * fd;
        }
        let rel = num.sqrt() / den_a.sqrt().max(den_f.sqrt()).max(1e-12);
        assert!(rel < TOL, "{name}: relative error {rel:e}");
    }
}

#[test]
fn loss_is_invariant_to_window_order() {
    let cfg = ModelConfig::desk_scale();
    let corpus = sinusoid_corpus(6, 60, 2);
    let mix = Mixture::uniform(&corpus).unwrap();
    let trainer = Trainer::new(cfg.clone(), small_train(1)).unwrap();
    let windows = trainer.batch_for_step(&corpus, &mix, 3).unwrap();
    let mut reversed = windows.clone();
    reversed.reverse();
    let mut rotated = windows.clone();
    rotated.rotate_left(3);
    let loss = |w: &[_]| batch_loss(&trainer.weights, &cfg, &assemble_batch(w, &cfg, Normalization::PerWindow).unwrap()).unwrap();
    let base = loss(&windows);
    assert_eq!(base.to_bits(), loss(&reversed).to_bits());
    assert_eq!(base.to_bits(), loss(&rotated).to_bits());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn per_window_inputs_are_affine_invariant(c_exp in -3i32..4, b in -1e3f64..1e3, seed in 0u64..50) {
        // Powers of two keep the rescaling exact in binary floating point.
        let c = 2f64.powi(c_exp);
        let cfg = ModelConfig::desk_scale();
        let corpus = sinusoid_corpus(2, 40, seed);
        let mix = Mixture::uniform(&corpus).unwrap();
        let trainer = Trainer::new(cfg.clone(), small_train(1)).unwrap();
        let windows = trainer.batch_for_step(&corpus, &mix, 0).unwrap();
        let mut moved = windows.clone();
        for w in &mut moved {
            w.values.iter_mut().for_each(|v| *v = *v * c + b);
        }
        let a = assemble_batch(&windows, &cfg, Normalization::PerWindow).unwrap();
        let m = assemble_batch(&moved, &cfg, Normalization::PerWindow).unwrap();
        for (x, y) in a.batch.inputs.data().iter().zip(m.batch.inputs.data()) {
            prop_assert!((x - y).abs() <= 1e-9 * (1.0 + x.abs()), "{} vs {}", x, y);
        }
    }
}

#[test]
fn short_run_lowers_loss() {
    let cfg = ModelConfig::desk_scale();
    let corpus = sinusoid_corpus(50, 200, 3);
    let mix = Mixture::uniform(&corpus).unwrap();
    let mut trainer = Trainer::new(cfg.clone(), small_train(200)).unwrap();
    let probe = trainer.batch_for_step(&corpus, &mix, 0).unwrap();
    let before = mean_window_loss(&trainer.weights, &cfg, &probe, Normalization::PerWindow, 8).unwrap();
    trainer.run(&corpus, &mix, None).unwrap();
    let after = mean_window_loss(&trainer.weights, &cfg, &probe, Normalization::PerWindow, 8).unwrap();
    assert!(after < before, "loss {before} -> {after}");
}

#[test]
fn resume_matches_uninterrupted_run() {
    let cfg = ModelConfig::desk_scale();
    let corpus = sinusoid_corpus(10, 120, 4);
    let mix = Mixture::uniform(&corpus).unwrap();
    let train = TrainConfig {
        eval_every: 4,
        ..small_train(12)
    };

    let mut full = Trainer::new(cfg.clone(), train.clone()).unwrap();
    full.run(&corpus, &mix, None).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let mut first = Trainer::new(cfg.clone(), train.clone()).unwrap();
    let summary = first.run_until(&corpus, &mix, 6, Some(dir.path())).unwrap();
    let ck = Checkpoint::load(summary.checkpoints.last().unwrap()).unwrap();
    assert_eq!(ck.step, 6);
    let mut resumed = Trainer::resume(ck, None).unwrap();
    resumed.run(&corpus, &mix, None).unwrap();

    let joined: Vec<_> = first.curve.iter().chain(&resumed.curve).collect();
    assert_eq!(joined.len(), full.curve.len());
    for (a, b) in joined.iter().zip(&full.curve) {
        assert_eq!(a.step, b.step);
        assert!((a.train_loss - b.train_loss).abs() <= 1e-10);
        assert_eq!(a.val_loss.is_some(), b.val_loss.is_some());
    }
    assert_eq!(resumed.weights, full.weights);
}

#[test]
fn fixed_seed_gives_identical_loss_csv() {
    let cfg = ModelConfig::desk_scale();
    let corpus = sinusoid_corpus(8, 100, 6);
    let mix = Mixture::uniform(&corpus).unwrap();
    let run = || {
        let dir = tempfile::tempdir().unwrap();
        let mut t = Trainer::new(cfg.clone(), TrainConfig { eval_every: 5, ..small_train(15) }).unwrap();
        t.run(&corpus, &mix, Some(dir.path())).unwrap();
        std::fs::read(dir.path().join("losses.csv")).unwrap()
    };
    assert_eq!(run(), run());
}

#[test]
fn zero_learning_rate_freezes_the_curve() {
    let cfg = ModelConfig::desk_scale();
    // Train split of 70 points is shorter than the maximum window, so every
    // batch holds the same window.
    let corpus = sinusoid_corpus(1, 100, 7);
    let mix = Mixture::uniform(&corpus).unwrap();
    let mut t = Trainer::new(
        cfg.clone(),
        TrainConfig {
            learning_rate: 0.0,
            eval_every: 1,
            ..small_train(6)
        },
    )
    .unwrap();
    let w0 = t.weights.clone();
    let s = t.run(&corpus, &mix, None).unwrap();
    assert_eq!(t.weights, w0);
    assert!(s.curve.windows(2).all(|p| p[0].train_loss == p[1].train_loss && p[0].val_loss == p[1].val_loss));
}

#[test]
fn divergence_keeps_last_good_checkpoint() {
    let cfg = ModelConfig::desk_scale();
    let good = sinusoid_corpus(4, 100, 8);
    let start = good.series()[0].start;
    let huge: Vec<f64> = (0..100).map(|i| 1e200 * (1.0 + (i % 7) as f64)).collect();
    let bad = Corpus::new(vec![TimeSeries::new("huge", Granularity::Hourly, start, huge).unwrap()]).unwrap();
    let train = TrainConfig {
        normalization: Normalization::None,
        checkpoint_every: 2,
        ..small_train(10)
    };
    let dir = tempfile::tempdir().unwrap();
    let mut t = Trainer::new(cfg, train).unwrap();
    t.run_until(&good, &Mixture::uniform(&good).unwrap(), 4, Some(dir.path())).unwrap();
    let kept = t.weights.clone();
    match t.run(&bad, &Mixture::uniform(&bad).unwrap(), Some(dir.path())) {
        Err(TrainError::Diverged {
            step, last_checkpoint, ..
        }) => {
            assert_eq!(step, 4);
            let path = last_checkpoint.expect("a checkpoint was written before divergence");
            assert!(path.ends_with("step-000004.ptck"));
            assert_eq!(Checkpoint::load(&path).unwrap().weights, kept);
        }
        other => panic!("expected divergence, got {other:?}"),
    }
    assert_eq!(t.weights, kept);
    assert_eq!(t.step, 4);
}
