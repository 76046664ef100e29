use ragaseq::nnet::{Head, ModelConfig, ModelParams};
use ragaseq::train::{
    self, replay, train_async, train_sequential, LinearParams, Objective, SequenceClassification,
    SoftmaxRegression, Step,
};
use ragaseq::{Error, TokenSequence, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn blobs(seed: u64, n: usize) -> SoftmaxRegression {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (dims, classes) = (5, 4);
    let centers: Vec<Vec<f64>> = (0..classes)
        .map(|_| (0..dims).map(|_| rng.gen_range(-2.0..2.0)).collect())
        .collect();
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for i in 0..n {
        let c = i % classes;
        features.push(centers[c].iter().map(|m| m + rng.gen_range(-1.5..1.5)).collect());
        labels.push(c);
    }
    SoftmaxRegression {
        features,
        labels,
        n_classes: classes,
    }
}

fn toy_tokens() -> (ModelConfig, Vec<TokenSequence>) {
    // Class 0 uses low tokens, class 1 high tokens.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let data = (0..24)
        .map(|i| {
            let raga = i % 2;
            let lo = if raga == 0 { 2 } else { 8 };
            let ids = (0..12).map(|_| rng.gen_range(lo..lo + 6)).collect();
            TokenSequence::new(ids, format!("s{i}"), raga)
        })
        .collect();
    let cfg = ModelConfig {
        vocab_size: 14,
        embed_dim: 4,
        lstm_hidden: 6,
        dense1_units: 8,
        n_classes: 2,
        dropout_rate: 0.1,
        head: Head::Classifier,
        k_levels: 5,
        subseq_len: 12,
    };
    (cfg, data)
}

fn train_cfg() -> TrainConfig {
    TrainConfig {
        batch_size: 8,
        learning_rate: 1e-2,
        max_epochs: 6,
        seed: 3,
        ..Default::default()
    }
}

#[test]
fn separable_tokens_loss_decreases() {
    let (cfg, data) = toy_tokens();
    let obj = SequenceClassification::<f64>::new(&cfg, &data).unwrap();
    let init = ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(1));
    let (_, report) = train_sequential(&obj, init, &train_cfg(), None).unwrap();
    let l: Vec<f64> = report.epochs.iter().map(|e| e.loss).collect();
    assert!(l[1] < l[0] && l[2] < l[1] && l[3] < l[2], "{l:?}");
}

#[test]
fn zero_epochs_is_a_no_op() {
    let (cfg, data) = toy_tokens();
    let obj = SequenceClassification::<f32>::new(&cfg, &data).unwrap();
    let init = ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(1));
    let tc = TrainConfig {
        max_epochs: 0,
        ..train_cfg()
    };
    let (p, report) = train_sequential(&obj, init.clone(), &tc, None).unwrap();
    assert_eq!(p, init);
    assert!(report.epochs.is_empty());
    assert_eq!(report.applied, 0);
}

#[test]
fn same_seed_is_bit_identical() {
    let (cfg, data) = toy_tokens();
    let obj = SequenceClassification::<f32>::new(&cfg, &data).unwrap();
    let init = ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(1));
    let a = train_sequential(&obj, init.clone(), &train_cfg(), None).unwrap();
    let b = train_sequential(&obj, init, &train_cfg(), None).unwrap();
    assert_eq!(a.0, b.0);
    assert_eq!(
        a.1.epochs.iter().map(|e| e.loss).collect::<Vec<_>>(),
        b.1.epochs.iter().map(|e| e.loss).collect::<Vec<_>>()
    );
}

#[test]
fn epoch_hook_sees_every_epoch() {
    let obj = blobs(1, 40);
    let mut seen = Vec::new();
    let mut hook = |r: &train::TrainReport, _: &LinearParams| {
        seen.push(r.epochs.len());
        Ok(())
    };
    train_sequential(&obj, obj.zero_params(), &train_cfg(), Some(&mut hook)).unwrap();
    assert_eq!(seen, vec![1, 2, 3, 4, 5, 6]);
}

#[test]
fn stops_at_threshold_when_asked() {
    let obj = blobs(2, 80);
    let tc = TrainConfig {
        max_epochs: 200,
        learning_rate: 0.05,
        loss_threshold: Some(0.6),
        stop_at_threshold: true,
        ..train_cfg()
    };
    let (_, report) = train_sequential(&obj, obj.zero_params(), &tc, None).unwrap();
    let n = report.epochs_to_threshold.expect("converges");
    assert_eq!(report.epochs.len(), n);
    assert!(report.final_loss().unwrap() <= 0.6);
}

#[test]
fn async_matches_sequential_on_convex_problem() {
    let obj = blobs(3, 400);
    let tc = TrainConfig {
        max_epochs: 15,
        learning_rate: 0.02,
        ..train_cfg()
    };
    let (p_seq, _) = train_sequential(&obj, obj.zero_params(), &tc, None).unwrap();
    let seq_loss = obj.loss(&p_seq).unwrap();
    for workers in [2, 4] {
        let (p, r) = train_async(
            &obj,
            obj.zero_params(),
            &TrainConfig {
                workers,
                ..tc.clone()
            },
            None,
        )
        .unwrap();
        let loss = obj.loss(&p).unwrap();
        assert!(
            (loss - seq_loss).abs() <= 0.1 * seq_loss,
            "{workers}: {loss} vs {seq_loss}"
        );
        assert_eq!(r.applied + r.discarded, r.submitted);
        assert_eq!(r.applied, (r.batches_per_epoch * 15) as u64);
        assert!(r.discarded < r.submitted);
        assert_eq!(r.epochs.len(), 15);
    }
}

#[test]
fn fresh_only_async_equals_replayed_sequential() {
    let obj = blobs(4, 120);
    let tc = TrainConfig {
        workers: 3,
        staleness_bound: 1,
        learning_rate: 0.02,
        ..train_cfg()
    };
    let (p_async, r) = train_async(&obj, obj.zero_params(), &tc, None).unwrap();
    let (p_seq, _) = replay(&obj, obj.zero_params(), &tc, &r.applied_order, None).unwrap();
    assert_eq!(p_async, p_seq);
    let mut sorted = r.applied_order.clone();
    sorted.sort_unstable();
    sorted.dedup();
    assert_eq!(sorted.len(), r.applied_order.len());
}

struct Exploding;

impl Objective for Exploding {
    type Params = LinearParams;
    type Aux = ();

    fn num_examples(&self) -> usize {
        20
    }

    fn gradient(
        &self,
        p: &LinearParams,
        batch: &[usize],
        _: &mut ChaCha8Rng,
    ) -> ragaseq::Result<Step<LinearParams, ()>> {
        if batch.contains(&7) {
            panic!("boom");
        }
        Ok(Step {
            loss: 1.0,
            grads: p.clone(),
            aux: (),
        })
    }

    fn loss(&self, _: &LinearParams) -> ragaseq::Result<f64> {
        Ok(1.0)
    }
}

#[test]
fn worker_panic_aborts_the_run() {
    let p = LinearParams {
        w: vec![1.0],
        b: vec![0.0],
    };
    let tc = TrainConfig {
        workers: 2,
        batch_size: 4,
        ..Default::default()
    };
    let err = train_async(&Exploding, p, &tc, None).unwrap_err();
    assert!(matches!(err, Error::Worker(ref m) if m.contains("boom")), "{err}");
}

#[test]
fn non_finite_gradient_aborts_async_run() {
    let p = LinearParams {
        w: vec![f64::INFINITY],
        b: vec![0.0],
    };
    struct Identity;
    impl Objective for Identity {
        type Params = LinearParams;
        type Aux = ();
        fn num_examples(&self) -> usize {
            10
        }
        fn gradient(
            &self,
            p: &LinearParams,
            _: &[usize],
            _: &mut ChaCha8Rng,
        ) -> ragaseq::Result<Step<LinearParams, ()>> {
            Ok(Step {
                loss: 0.0,
                grads: p.clone(),
                aux: (),
            })
        }
        fn loss(&self, _: &LinearParams) -> ragaseq::Result<f64> {
            Ok(0.0)
        }
    }
    let tc = TrainConfig {
        workers: 2,
        batch_size: 2,
        ..Default::default()
    };
    let err = train_async(&Identity, p, &tc, None).unwrap_err();
    assert!(err.to_string().contains("`w`"), "{err}");
}

#[test]
fn async_requires_two_workers() {
    let obj = blobs(1, 20);
    assert!(matches!(
        train_async(&obj, obj.zero_params(), &train_cfg(), None),
        Err(Error::Config(_))
    ));
}
