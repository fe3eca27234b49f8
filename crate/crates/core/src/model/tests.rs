use super::*;
use crate::anchor::{AnchorSpec, NeighborCount};
use crate::data::{gen_blobs, BlobsSpec, Dataset, ExperimentConfig, Splits};
use crate::diffcore::Tensor;
use crate::gp::KernelConfig;

fn small_config(epochs: usize, batch_size: usize) -> TrainConfig {
    TrainConfig {
        model: ModelConfig {
            arch: Architecture::Mlp,
            hidden: vec![16],
            feature_dim: 8,
        },
        optimizer: OptimizerConfig {
            epochs,
            batch_size,
            ..OptimizerConfig::default()
        },
        kernel: KernelConfig::default().with_length_scale(2.0),
        anchors: AnchorSpec {
            per_class_count: 6,
            c_cor: NeighborCount::All,
            top_k: 3,
            ..AnchorSpec::default()
        },
        gpgl: GpglConfig::default(),
    }
}

fn blobs3(seed: u64) -> Splits<f64> {
    ExperimentConfig::preset("blobs3-fast").unwrap().load_splits(seed).unwrap()
}

#[test]
fn batches_cover_the_set_with_a_short_tail() {
    let splits = blobs3(0);
    let n = splits.train.len();
    let b = 25;
    assert_ne!(n % b, 0);
    let mut t = Trainer::new(Mode::Baseline, small_config(1, b), &splits.train, 0).unwrap();
    let stats = t.train_epoch(&splits.train, &splits.val).unwrap();
    assert_eq!(stats.batches, n.div_ceil(b));
}

#[test]
fn oversized_batch_is_a_config_error() {
    let splits = blobs3(0);
    let cfg = small_config(1, splits.train.len() + 1);
    assert!(matches!(
        Trainer::new(Mode::Baseline, cfg, &splits.train, 0),
        Err(crate::Error::Config(_))
    ));
}

#[test]
fn mu_starts_at_random_guess_and_follows_validation() {
    let splits = blobs3(1);
    let mut t = Trainer::new(Mode::Gpgl, small_config(3, 16), &splits.train, 1).unwrap();
    assert!((t.mu() - 2.0 / 3.0).abs() < 1e-15);
    let mut prev = t.mu();
    for _ in 0..3 {
        let s = t.train_epoch(&splits.train, &splits.val).unwrap();
        assert_eq!(s.mu, prev);
        assert_eq!(t.mu(), s.val_error);
        prev = s.val_error;
    }
}

#[test]
fn magnitudes_come_from_the_previous_epoch() {
    let splits = blobs3(2);
    let mut t = Trainer::new(Mode::Gpgl, small_config(2, 16), &splits.train, 2).unwrap();
    assert_eq!(t.magnitudes(), crate::losses::LossMagnitudes::default());
    let s = t.train_epoch(&splits.train, &splits.val).unwrap();
    let m = t.magnitudes();
    assert_eq!((m.ce1, Some(m.kl), Some(m.ce2)), (s.mag_ce1, s.mag_kl, s.mag_ce2));
}

#[test]
fn context_labels_are_constant_within_an_epoch() {
    let splits = blobs3(3);
    let t = Trainer::new(Mode::Gpgl, small_config(1, 16), &splits.train, 3).unwrap();
    let anchors = t.anchors().unwrap();
    let h = t.model().features(&splits.train.rows(&[0])).unwrap();
    let c = splits.train.labels[0];
    let first = anchors.context_label(h.row(0), c).unwrap();
    for _ in 0..3 {
        assert_eq!(anchors.context_label(h.row(0), c).unwrap(), first);
    }
}

#[test]
fn refresh_with_unchanged_extractor_is_bit_identical() {
    let splits = blobs3(3);
    let t = Trainer::new(Mode::Gpgl, small_config(1, 16), &splits.train, 3).unwrap();
    let mut again = t.anchors().unwrap().clone();
    again.refresh(|flat| t.model().features(&splits.train.rows(flat))).unwrap();
    assert_eq!(&again, t.anchors().unwrap());
}

#[test]
fn pinned_mu_one_reproduces_the_baseline_trajectory() {
    let splits = blobs3(4);
    let mut cfg = small_config(3, 16);
    let mu = 1.0;
    cfg.gpgl.mu = MuPolicy::Pinned(mu);
    let alpha = 1.0 / (2.0 - mu);
    let mut base_cfg = cfg.clone();
    base_cfg.optimizer = cfg.optimizer.with_rate_scale(alpha);
    let mut g = Trainer::new(Mode::Gpgl, cfg, &splits.train, 4).unwrap();
    let mut b = Trainer::new(Mode::Baseline, base_cfg, &splits.train, 4).unwrap();
    assert_eq!(g.model().params(), b.model().params());
    for _ in 0..3 {
        let sg = g.train_epoch(&splits.train, &splits.val).unwrap();
        let sb = b.train_epoch(&splits.train, &splits.val).unwrap();
        assert_eq!(g.model().params(), b.model().params());
        assert_eq!((sg.train_error, sg.val_error), (sb.train_error, sb.val_error));
    }
}

#[test]
fn one_epoch_beats_random_guessing() {
    for mode in [Mode::Baseline, Mode::Gpgl] {
        let wins = (0..5)
            .filter(|&seed| {
                let splits = blobs3(seed);
                let mut t = Trainer::new(mode, small_config(1, 16), &splits.train, seed).unwrap();
                t.train_epoch(&splits.train, &splits.val).unwrap().train_error < 2.0 / 3.0
            })
            .count();
        assert!(wins >= 4, "{mode}: {wins}/5");
    }
}

#[test]
fn anchor_spread_shrinks_after_one_epoch() {
    let spec = BlobsSpec {
        classes: 4,
        per_class: 60,
        dim: 6,
        separation: 6.0,
        noise: 0.6,
    };
    let mut shrank = 0;
    for seed in 0..5 {
        let data = gen_blobs(&spec, seed).unwrap();
        let mut splits = data
            .split_holdout(0.1, &mut stream_rng(seed, Stream::Split))
            .unwrap();
        splits.standardize();
        let mut t = Trainer::new(Mode::Gpgl, small_config(1, 16), &splits.train, seed).unwrap();
        let (raw0, rel0) = (anchor_spread(t.anchors().unwrap()), anchor_spread_ratio(t.anchors().unwrap()).unwrap());
        let s = t.train_epoch(&splits.train, &splits.val).unwrap();
        let (raw1, rel1) = (s.anchor_spread.unwrap(), s.anchor_spread_ratio.unwrap());
        eprintln!("seed {seed}: spread {raw0:.4} -> {raw1:.4}, ratio {rel0:.4} -> {rel1:.4}");
        shrank += usize::from(rel1 < rel0);
    }
    assert!(shrank >= 4, "{shrank}/5");
}

#[test]
fn uniform_predictions_err_on_every_non_first_class() {
    let probs = Tensor::full(vec![20, 10], 0.1);
    let labels: Vec<usize> = (0..20).map(|i| i % 10).collect();
    assert!((error_rate(&probs, &labels) - 0.9).abs() < 1e-15);
    let perfect = crate::gp::one_hot::<f64>(&labels, 10);
    assert_eq!(error_rate(&perfect, &labels), 0.0);
}

#[test]
fn evaluate_rejects_empty_sets() {
    let splits = blobs3(0);
    let t = Trainer::new(Mode::Baseline, small_config(1, 16), &splits.train, 0).unwrap();
    let empty = Dataset::new(Tensor::zeros(vec![0, 4]), vec![], 3, vec![4]).unwrap();
    assert!(evaluate(t.model(), &empty).is_err());
}

#[test]
fn zero_epochs_give_an_empty_history() {
    let splits = blobs3(0);
    let r = run_experiment(&small_config(0, 16), &splits, 0, Threshold::default()).unwrap();
    assert!(r.baseline.epochs.is_empty() && r.gpgl.epochs.is_empty());
    assert!((r.baseline.final_error() - 2.0 / 3.0).abs() < 1e-15);
}

#[test]
fn experiments_are_reproducible() {
    let splits = blobs3(5);
    let run = || run_experiment(&small_config(2, 16), &splits, 5, Threshold::default()).unwrap();
    let (a, b) = (run(), run());
    assert_eq!(a.baseline.epochs, b.baseline.epochs);
    assert_eq!(a.gpgl.epochs, b.gpgl.epochs);
    assert_eq!(a.threshold, b.threshold);
}

#[test]
fn threshold_is_first_epoch_at_or_below() {
    let splits = blobs3(6);
    let r = run_experiment(&small_config(3, 16), &splits, 6, Threshold::Fixed(2.0)).unwrap();
    assert_eq!(r.baseline_epochs, Some(1));
    let mut epochs = r.baseline.epochs.clone();
    for (e, v) in epochs.iter_mut().zip([0.5, 0.2, 0.3]) {
        e.val_error = v;
    }
    assert_eq!(epochs_to_threshold(&epochs, 0.25), Some(2));
    assert_eq!(epochs_to_threshold(&epochs, 0.1), None);
}

#[test]
fn threshold_text_forms() {
    assert_eq!("baseline+0.01".parse::<Threshold>().unwrap(), Threshold::BaselinePlus(0.01));
    assert_eq!("0.2".parse::<Threshold>().unwrap(), Threshold::Fixed(0.2));
    assert!("soon".parse::<Threshold>().is_err());
}

#[test]
fn f32_training_runs() {
    let splits = blobs3(0);
    let s32 = Splits {
        train: splits.train.cast::<f32>(),
        val: splits.val.cast::<f32>(),
    };
    let h = train_run(Mode::Gpgl, &small_config(1, 16), &s32, 0).unwrap();
    assert_eq!(h.epochs.len(), 1);
}
