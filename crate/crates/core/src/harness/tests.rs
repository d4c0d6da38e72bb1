use super::*;
use crate::losses::{make_loss, LossKind, LossSpec};
use crate::metrics::{confusion, MetricReport};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Zero loss and gradient regardless of input.
struct Flat(usize);

impl SampleLoss for Flat {
    fn num_classes(&self) -> usize {
        self.0
    }

    fn evaluate(
        &self,
        logits: &[f64],
        _: usize,
    ) -> Result<crate::losses::LossEvaluation, LossError> {
        Ok(crate::losses::LossEvaluation {
            value: 0.0,
            grad: vec![0.0; logits.len()],
        })
    }
}

fn blobs(seed: u64, per_class: usize) -> Vec<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.3).unwrap();
    let mut out = Vec::new();
    for (label, centre) in [(0usize, [-2.0, -1.0]), (1, [2.0, 1.0])] {
        for _ in 0..per_class {
            let x = centre[0] + noise.sample(&mut rng);
            let y = centre[1] + noise.sample(&mut rng);
            out.push(Example::new(vec![x, y, 1.0], label));
        }
    }
    out
}

fn stats_of(data: &[Example], k: usize) -> ClassStats {
    let labels: Vec<usize> = data.iter().map(|e| e.label).collect();
    ClassStats::from_labels(&labels, k).unwrap()
}

fn ce(stats: &ClassStats) -> crate::losses::LossFn {
    make_loss(&LossSpec::new(LossKind::Ce), stats).unwrap()
}

#[test]
fn featurize_constant_and_identity() {
    let fv = featurize(&Image::filled(40, 30, 0.5));
    assert_eq!(fv.len(), FEATURE_DIM);
    assert!(fv[..256].iter().all(|&v| (v - 0.5).abs() < 1e-15));
    assert_eq!(fv[256], 1.0);

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let small = Image::new(16, 16, (0..256).map(|_| rng.random()).collect()).unwrap();
    assert_eq!(&featurize(&small)[..256], small.as_slice());
}

#[test]
fn featurize_separates_random_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let a = Image::new(32, 32, (0..1024).map(|_| rng.random()).collect()).unwrap();
        let b = Image::new(32, 32, (0..1024).map(|_| rng.random()).collect()).unwrap();
        assert_ne!(featurize(&a), featurize(&b));
        assert_eq!(featurize(&a), featurize(&a.clone()));
    }
}

#[test]
fn separable_toy_is_learned() {
    let data = blobs(3, 40);
    let stats = stats_of(&data, 2);
    let cfg = TrainConfig {
        learning_rate: 0.05,
        epochs: 30,
        ..TrainConfig::default()
    };
    let model = train(&data, &stats, &ce(&stats), &cfg).unwrap();
    let report = evaluate_fold(&model, &data).unwrap();
    assert_eq!(report.macro_avg.recall, 1.0);
}

#[test]
fn loss_decreases_at_default_rate() {
    let data = blobs(4, 40);
    let stats = stats_of(&data, 2);
    let cfg = TrainConfig {
        epochs: 10,
        ..TrainConfig::default()
    };
    let out = train_with_history(&data, &stats, &ce(&stats), &cfg).unwrap();
    assert_eq!(out.epoch_losses.len(), 10);
    for w in out.epoch_losses.windows(2) {
        assert!(w[1] <= w[0] + 1e-6, "{:?}", out.epoch_losses);
    }
    assert!(out.epoch_losses[9] < out.epoch_losses[0]);
}

#[test]
fn zero_learning_rate_is_a_no_op() {
    let data = blobs(5, 10);
    let stats = stats_of(&data, 2);
    let cfg = TrainConfig {
        learning_rate: 0.0,
        epochs: 5,
        ..TrainConfig::default()
    };
    let model = train(&data, &stats, &ce(&stats), &cfg).unwrap();
    assert_eq!(model, LinearModel::zeros(2, 3));
}

#[test]
fn training_is_seed_deterministic() {
    let data = blobs(6, 25);
    let stats = stats_of(&data, 2);
    let cfg = TrainConfig {
        learning_rate: 0.01,
        batch_size: 7,
        epochs: 8,
        seed: 42,
        ..TrainConfig::default()
    };
    let a = train(&data, &stats, &ce(&stats), &cfg).unwrap();
    let b = train(&data, &stats, &ce(&stats), &cfg).unwrap();
    assert_eq!(a.weights(), b.weights());
    let c = train(&data, &stats, &ce(&stats), &TrainConfig { seed: 43, ..cfg }).unwrap();
    assert_ne!(a.weights(), c.weights());
}

#[test]
fn update_count_matches_epochs_times_batches() {
    // with a flat loss and no momentum, each step multiplies W by (1 − lr·wd)
    let data = blobs(7, 10);
    let stats = stats_of(&data, 2);
    let cfg = TrainConfig {
        learning_rate: 0.1,
        batch_size: 6,
        momentum: 0.0,
        weight_decay: 0.5,
        epochs: 3,
        seed: 0,
    };
    let init = LinearModel::from_weights(2, 3, vec![1.0, -2.0, 0.5, 3.0, 0.25, -1.0]).unwrap();
    let out = train_from(init.clone(), &data, &stats, &Flat(2), &cfg).unwrap();
    let steps = cfg.epochs * data.len().div_ceil(cfg.batch_size);
    let factor = (1.0 - cfg.learning_rate * cfg.weight_decay).powi(steps as i32);
    for (w, w0) in out.model.weights().iter().zip(init.weights()) {
        assert!((w - w0 * factor).abs() < 1e-12);
    }
}

#[test]
fn training_errors() {
    let data = blobs(8, 5);
    let stats = stats_of(&data, 2);
    let cfg = TrainConfig::default();
    assert_eq!(
        train(&[], &stats, &ce(&stats), &cfg),
        Err(HarnessError::EmptyDataset)
    );
    let wrong = ClassStats::new(vec![4, 6]).unwrap();
    assert!(matches!(
        train(&data, &wrong, &ce(&stats), &cfg),
        Err(HarnessError::ConfigMismatch(_))
    ));
    let three = ClassStats::new(vec![5, 5, 1]).unwrap();
    assert!(matches!(
        train(&data, &stats, &ce(&three), &cfg),
        Err(HarnessError::ConfigMismatch(_))
    ));
    let bad = TrainConfig {
        momentum: 1.0,
        ..TrainConfig::default()
    };
    assert!(matches!(
        train(&data, &stats, &ce(&stats), &bad),
        Err(HarnessError::InvalidConfig(_))
    ));
}

#[test]
fn train_config_json() {
    let cfg: TrainConfig = serde_json::from_str(r#"{"epochs": 30}"#).unwrap();
    assert_eq!(cfg.epochs, 30);
    assert_eq!(cfg.learning_rate, 0.0004);
    assert_eq!(
        (cfg.batch_size, cfg.momentum, cfg.weight_decay),
        (32, 0.9, 0.001)
    );
    assert!(serde_json::from_str::<TrainConfig>(r#"{"lr": 1}"#).is_err());
}

#[test]
fn predict_examples() {
    let zero = LinearModel::zeros(4, 5);
    assert_eq!(predict(&zero, &[1.0; 5]).unwrap(), (vec![0.0; 4], 0));

    let mut eye = vec![0.0; 9];
    for i in 0..3 {
        eye[i * 3 + i] = 1.0;
    }
    let eye = LinearModel::from_weights(3, 3, eye).unwrap();
    for hot in 0..3 {
        let mut fv = vec![0.0; 3];
        fv[hot] = 1.0;
        assert_eq!(predict(&eye, &fv).unwrap().1, hot);
    }
    assert_eq!(
        predict(&eye, &[1.0]),
        Err(HarnessError::DimensionMismatch {
            expected: 3,
            got: 1
        })
    );
}

#[test]
fn predict_matches_exhaustive_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..200 {
        let w: Vec<f64> = (0..4 * 6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let model = LinearModel::from_weights(4, 6, w.clone()).unwrap();
        let fv: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (logits, class) = predict(&model, &fv).unwrap();
        let mut best = (f64::NEG_INFINITY, 0);
        for c in 0..4 {
            let mut z = 0.0;
            for d in 0..6 {
                z += w[c * 6 + d] * fv[d];
            }
            assert!((z - logits[c]).abs() < 1e-12);
            if z > best.0 {
                best = (z, c);
            }
        }
        assert_eq!(class, best.1);
    }
}

#[test]
fn model_file_round_trip() {
    let model = LinearModel::from_weights(2, 3, vec![0.5, -1.0, 2.0, 1e-300, 7.0, -0.0]).unwrap();
    let bytes = model.to_bytes();
    assert_eq!(bytes.len(), 8 + 6 * 8);
    assert_eq!(LinearModel::from_bytes(&bytes).unwrap(), model);
    assert!(matches!(
        LinearModel::from_bytes(&bytes[..20]),
        Err(ModelFormatError::Truncated { .. })
    ));
    assert!(matches!(
        LinearModel::from_bytes(&bytes[..3]),
        Err(ModelFormatError::Truncated { .. })
    ));
}

#[test]
fn voting_examples() {
    let mut votes = vec![1];
    votes.extend(std::iter::repeat_n(2, 8));
    votes.push(3);
    let d = diagnose(&votes, 4).unwrap();
    assert_eq!(d.vote_counts, vec![0, 1, 8, 1]);
    assert_eq!(d.final_class, 2);

    assert_eq!(diagnose(&[0; 10], 4).unwrap().final_class, 0);
    let tie = [0, 0, 0, 0, 0, 1, 1, 1, 1, 1];
    assert_eq!(diagnose(&tie, 4).unwrap().final_class, 1);
    assert_eq!(diagnose(&[], 4), Err(HarnessError::EmptyInput));
    assert_eq!(
        diagnose(&[4], 4),
        Err(HarnessError::ClassOutOfRange { class: 4, k: 4 })
    );
}

#[test]
fn evaluate_fold_examples() {
    // one-hot inputs with an identity model are predicted perfectly
    let mut eye = vec![0.0; 16];
    for i in 0..4 {
        eye[i * 4 + i] = 1.0;
    }
    let model = LinearModel::from_weights(4, 4, eye).unwrap();
    let fold: Vec<Example> = (0..4)
        .map(|c| {
            let mut fv = vec![0.0; 4];
            fv[c] = 1.0;
            Example::new(fv, c)
        })
        .collect();
    let r = evaluate_fold(&model, &fold).unwrap();
    assert!(r.macro_avg.values().iter().all(|&v| v == 1.0));

    let constant = LinearModel::zeros(4, 4);
    let r = evaluate_fold(&constant, &fold).unwrap();
    assert_eq!(r.macro_avg.recall, 0.25);
    assert_eq!(evaluate_fold(&constant, &[]), Err(HarnessError::EmptyInput));
}

#[test]
fn evaluate_fold_matches_direct_recomputation() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let w: Vec<f64> = (0..4 * 5).map(|_| rng.random_range(-1.0..1.0)).collect();
    let model = LinearModel::from_weights(4, 5, w).unwrap();
    let fold: Vec<Example> = (0..60)
        .map(|_| {
            let fv = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
            Example::new(fv, rng.random_range(0..4))
        })
        .collect();
    let preds: Vec<usize> = fold
        .iter()
        .map(|e| predict(&model, &e.features).unwrap().1)
        .collect();
    let labels: Vec<usize> = fold.iter().map(|e| e.label).collect();
    let direct = MetricReport::from_confusion(&confusion(&preds, &labels, 4).unwrap());
    assert_eq!(evaluate_fold(&model, &fold).unwrap(), direct);
}

#[test]
fn significant_digit_formatting() {
    assert_eq!(format_significant(0.123456789, 6), "0.123457");
    assert_eq!(format_significant(50.0, 6), "50");
    assert_eq!(format_significant(0.3, 6), "0.3");
    assert_eq!(format_significant(-0.5, 6), "-0.5");
    assert_eq!(format_significant(1234567.0, 6), "1.23457e+06");
    assert_eq!(format_significant(0.00001234, 6), "1.234e-05");
    assert_eq!(format_significant(0.0, 6), "0");
}

fn small_dataset(seed: u64) -> Vec<Example> {
    synth_slice_dataset(&SyntheticSpec {
        counts: vec![12, 20, 10, 8],
        slices_per_patient: 2,
        side: 16,
        seed,
        ..SyntheticSpec::default()
    })
    .iter()
    .map(LabeledSlice::example)
    .collect()
}

fn quick_train() -> TrainConfig {
    TrainConfig {
        learning_rate: 0.01,
        epochs: 5,
        ..TrainConfig::default()
    }
}

#[test]
fn synthetic_dataset_shape() {
    let spec = SyntheticSpec {
        counts: vec![3, 2, 1, 1],
        slices_per_patient: 3,
        side: 16,
        ..SyntheticSpec::default()
    };
    let data = synth_slice_dataset(&spec);
    assert_eq!(data.len(), 21);
    assert_eq!(data.last().unwrap().patient, 6);
    for s in &data {
        assert_eq!((s.image.width(), s.image.height()), (16, 16));
        let (lo, hi) = s.image.min_max();
        assert!(lo >= 0.0 && hi <= 1.0);
    }
    assert_eq!(data, synth_slice_dataset(&spec));
}

#[test]
fn cross_validation_shape_and_determinism() {
    let data = small_dataset(1);
    for mode in [SplitMode::Slice, SplitMode::Patient] {
        let cv = CvConfig {
            k: 4,
            seed: 5,
            split_mode: mode,
        };
        let spec = LossSpec::default();
        let a = cross_validate(&data, 4, &spec, &quick_train(), &cv).unwrap();
        assert_eq!(a.folds.len(), 4);
        assert_eq!(a.folds.iter().map(|f| f.n).sum::<u64>(), data.len() as u64);
        let b = cross_validate(&data, 4, &spec, &quick_train(), &cv).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.summary.to_csv().lines().count(), 3);
    }
}

#[test]
fn patient_split_keeps_patients_together() {
    let data = small_dataset(2);
    let cv = CvConfig {
        k: 4,
        seed: 1,
        split_mode: SplitMode::Patient,
    };
    let folds = cv::assign_folds_for_test(&data, &cv);
    for fold in folds.folds() {
        for &i in fold {
            for (j, other) in data.iter().enumerate() {
                if other.group == data[i].group {
                    assert!(fold.contains(&j));
                }
            }
        }
    }
}

#[test]
fn cross_validation_rejects_tiny_classes() {
    let data = small_dataset(3);
    let cv = CvConfig {
        k: 17,
        ..CvConfig::default()
    };
    assert!(matches!(
        cross_validate(&data, 4, &LossSpec::default(), &quick_train(), &cv),
        Err(HarnessError::Split(_))
    ));
}

#[test]
fn grid_search_cells() {
    let data = small_dataset(4);
    let cv = CvConfig::default();
    let cfg = quick_train();
    let mul = crate::losses::ScalingMode::Multiply;
    let grid = grid_search(&data, 4, &[0.3, 0.5, 0.3], &[50.0], mul, &cfg, &cv).unwrap();
    assert_eq!(grid.cells.len(), 3);
    assert_eq!(grid.cells[0], grid.cells[2]);

    let single = grid_search(&data, 4, &[0.3], &[50.0], mul, &cfg, &cv).unwrap();
    let spec = LossSpec::ldam(LossKind::CbLdam, 0.3, 50.0, mul).with_beta(0.999);
    let direct = cross_validate(&data, 4, &spec, &cfg, &cv).unwrap();
    assert_eq!(single.cells[0][0], direct.summary.mean.mcc);

    let csv = grid.to_csv();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("m\\s,50"));
    assert!(lines.next().unwrap().starts_with("0.3,"));
    assert!(matches!(
        grid_search(&data, 4, &[], &[50.0], mul, &cfg, &cv),
        Err(HarnessError::InvalidConfig(_))
    ));
}

proptest! {
    #[test]
    fn vote_ignores_order(mut votes in proptest::collection::vec(0usize..4, 1..30), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let a = diagnose(&votes, 4).unwrap();
        votes.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let b = diagnose(&votes, 4).unwrap();
        prop_assert_eq!(a.final_class, b.final_class);
        prop_assert_eq!(a.vote_counts, b.vote_counts);
    }

    #[test]
    fn ties_go_to_most_severe(tally in proptest::collection::vec(0usize..5, 4)) {
        prop_assume!(tally.iter().sum::<usize>() > 0);
        let votes: Vec<usize> = tally.iter().enumerate().flat_map(|(c, &n)| std::iter::repeat_n(c, n)).collect();
        let d = diagnose(&votes, 4).unwrap();
        let top = *tally.iter().max().unwrap();
        let expected = (0..4).filter(|&c| tally[c] == top).max().unwrap();
        prop_assert_eq!(d.final_class, expected);
    }
}
