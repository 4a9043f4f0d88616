use platewaste::checkpoint::{self, CheckpointMeta};
use platewaste::dataio::synth::{generate, training_spec};
use platewaste::dataio::Sample;
use platewaste::maskcore::LabelMask;
use platewaste::metrics::{AggregationMode, Averaging};
use platewaste::nets::{Family, Model, ModelConfig};
use platewaste::optim::LrSchedule;
use platewaste::trainer::{benchmark_throughput, evaluate, predict_samples, train, BatchLog, TrainConfig};

fn data(n: usize, seed: u64) -> Vec<Sample> {
    generate(&training_spec(16, n, seed))
        .unwrap()
        .into_iter()
        .map(|g| Sample {
            id: g.name,
            image: g.image,
            mask: g.mask,
        })
        .collect()
}

fn small_model(seed: u64) -> Model {
    Model::build(ModelConfig::new(Family::Unet, 2, 3, 16), seed).unwrap()
}

fn config(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        seed: 5,
        schedule: Some(LrSchedule::constant(3e-3).unwrap()),
        ..Default::default()
    }
}

#[test]
fn same_seed_gives_bit_identical_history() {
    let d = data(12, 1);
    let run = || train(&config(3), small_model(2), &d[..9], &d[9..], None).unwrap();
    let (a, b) = (run(), run());
    let bits = |h: &platewaste::trainer::TrainHistory| {
        h.epochs
            .iter()
            .flat_map(|r| [r.train_loss, r.train_weighted_iou, r.val_weighted_iou, r.val_weighted_dice])
            .map(f64::to_bits)
            .collect::<Vec<_>>()
    };
    assert_eq!(bits(&a.history), bits(&b.history));
    assert_eq!(a.best.params(), b.best.params());

    let mut other = config(3);
    other.seed = 6;
    let c = train(&other, small_model(2), &d[..9], &d[9..], None).unwrap();
    assert_ne!(bits(&a.history), bits(&c.history));
}

#[test]
fn best_checkpoint_reproduces_recorded_val_iou() {
    let d = data(12, 3);
    let (tr, va) = d.split_at(9);
    let out = train(&config(4), small_model(1), tr, va, None).unwrap();
    let best = out.history.best().unwrap();
    assert_eq!(best.epoch, out.best_epoch);
    assert!(out.history.epochs.iter().all(|r| r.val_weighted_iou <= out.best_val_iou));
    let re = evaluate(&out.best, va, AggregationMode::weighted()).unwrap();
    assert!((re.iou - best.val_weighted_iou).abs() < 1e-9);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("best.pwck");
    checkpoint::save(&path, &out.best, Some(&out.optimizer), &CheckpointMeta::default()).unwrap();
    let loaded = checkpoint::load(&path).unwrap();
    let again = evaluate(&loaded.model, va, AggregationMode::weighted()).unwrap();
    assert_eq!(again, re);
    assert_eq!(loaded.optimizer.unwrap(), out.optimizer);
}

#[test]
fn logged_weights_keep_their_invariants() {
    let d = data(10, 4);
    let mut n = 0;
    let mut hook = |b: &BatchLog| {
        let w = &b.weights.w_hat;
        let sum: f64 = w.iter().sum();
        assert!((sum - w.len() as f64).abs() < 1e-9);
        let max = w.iter().cloned().fold(0.0, f64::max);
        let min = w.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(max / min <= 10.0 + 1e-9);
        n += 1;
    };
    train(&config(2), small_model(0), &d[..8], &d[8..], Some(&mut hook)).unwrap();
    assert_eq!(n, 2 * 2);
}

/// Per-image IoU computed directly from the label arrays.
fn oracle_iou(pred: &LabelMask, gt: &LabelMask, class: u8) -> Option<f64> {
    let (mut inter, mut union) = (0u64, 0u64);
    for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
        inter += (p == class && g == class) as u64;
        union += (p == class || g == class) as u64;
    }
    (union > 0).then(|| inter as f64 / union as f64)
}

#[test]
fn evaluate_matches_independent_per_image_script() {
    let d = data(6, 7);
    let model = small_model(11);
    let preds = predict_samples(&model, &d).unwrap();
    let report = evaluate(&model, &d, AggregationMode::macro_avg().with_background(true)).unwrap();

    let mut per_image = Vec::new();
    for (p, s) in preds.iter().zip(&d) {
        let vals: Vec<f64> = (0..3).filter_map(|c| oracle_iou(p, &s.mask, c)).collect();
        per_image.push(vals.iter().sum::<f64>() / vals.len() as f64);
    }
    let expected = per_image.iter().sum::<f64>() / per_image.len() as f64;
    assert!((report.iou - expected).abs() < 1e-12);
    assert_eq!(report.aggregation.mode, Averaging::Macro);
    let acc: f64 = preds
        .iter()
        .zip(&d)
        .map(|(p, s)| p.labels().iter().zip(s.mask.labels()).filter(|(a, b)| a == b).count() as f64 / 256.0)
        .sum::<f64>()
        / d.len() as f64;
    assert!((report.pixel_accuracy - acc).abs() < 1e-12);
}

#[test]
fn background_only_predictor_scores_zero_food_iou() {
    let d = data(4, 8);
    let mut model = small_model(0);
    let n = model.params().len();
    // Zero head weights and a background-favouring bias.
    model.params_mut()[n - 2].iter_mut().for_each(|w| *w = 0.0);
    model.params_mut()[n - 1].copy_from_slice(&[1.0, 0.0, 0.0]);
    let r = evaluate(&model, &d, AggregationMode::weighted()).unwrap();
    for c in 1..3 {
        assert_eq!(r.per_class_iou.get(c), Some(0.0));
    }
    assert_eq!(r.iou, 0.0);
}

#[test]
fn inference_outpaces_training() {
    let model = Model::build(ModelConfig::new(Family::Unet, 4, 3, 32), 0).unwrap();
    let r = benchmark_throughput(&model, 2, 1, 3, 0).unwrap();
    assert!(r.inference.mean > r.train.mean);
    assert!(r.train.min <= r.train.mean && r.train.mean <= r.train.max);
}
