use nicetrans::evaluation::{difference_map, dsc, evaluate_pair, score_field, FieldChoice, LabeledPair};
use nicetrans::field_algebra::njd_percent;
use nicetrans::losses::{ncc_loss, LossConfig};
use nicetrans::network::{load_checkpoint, register, save_checkpoint, ModelConfig, NetworkParams};
use nicetrans::training::{loss_curve, smoothed, train, Dataset, TrainConfig, TrainOptions};
use nicetrans::volumes::{synth_pair, SyntheticPairSpec};

fn labeled(seed: u64, n: usize, amp: f64) -> (LabeledPair, nicetrans::volumes::SyntheticPair) {
    let spec = SyntheticPairSpec::randomized(seed, [n; 3], 0.087, 3.0, 0.0, amp, n as f64 / 8.0);
    let p = synth_pair(&spec).unwrap();
    let lp = LabeledPair {
        id: format!("pair{seed}"),
        fixed: p.fixed.clone(),
        moving: p.moving.clone(),
        labels_fixed: p.labels_fixed.clone(),
        labels_moving: p.labels_moving.clone(),
    };
    (lp, p)
}

#[test]
fn zero_init_evaluation_is_identity() {
    let params = NetworkParams::init(&ModelConfig::default(), 5).unwrap();
    for seed in [1, 2] {
        let (pair, _) = labeled(seed, 32, 2.0);
        let (rec, result) = evaluate_pair(&params, &pair, FieldChoice::Final).unwrap();
        assert_eq!(rec.dsc_after, rec.dsc_before);
        assert_eq!(rec.njd_percent, 0.0);
        assert_eq!(rec.njd_percent, njd_percent(&result.final_field));
        assert!(rec.runtime_seconds > 0.0);
        assert!(rec.dsc_before > 0.0 && rec.dsc_before < 1.0);
    }
}

#[test]
fn ground_truth_field_recovers_labels() {
    let (pair, synth) = labeled(3, 32, 2.0);
    let (before, after, njd) = score_field(&pair, &synth.truth.field).unwrap();
    // small structures at 32³ lose a boundary shell to nearest-neighbour resampling
    assert!(after > 0.88 && after > before + 0.05, "{before} -> {after}");
    assert_eq!(njd, 0.0);
    assert_eq!(dsc(&pair.labels_fixed, &pair.labels_fixed).unwrap(), 1.0);
}

#[test]
fn overfit_single_pair() {
    let (pair, _) = labeled(4, 32, 2.0);
    let config = TrainConfig { iterations: 200, checkpoint_interval: 0, seed: 1, ..TrainConfig::default() };
    let data = Dataset::Pairs(vec![(pair.fixed.clone(), pair.moving.clone())]);
    let run = train(&config, &data, TrainOptions::default()).unwrap();

    let untrained = NetworkParams::init(&config.model, config.seed).unwrap();
    let cfg = LossConfig::default();
    let before = register(&untrained, &pair.fixed, &pair.moving).unwrap();
    let after = register(&run.checkpoint.params, &pair.fixed, &pair.moving).unwrap();
    let ncc_before = ncc_loss(&before.warped, &pair.fixed, &cfg).unwrap();
    let ncc_after = ncc_loss(&after.warped, &pair.fixed, &cfg).unwrap();
    assert!(ncc_after < ncc_before, "{ncc_after} vs {ncc_before}");

    let mean = |v: nicetrans::volumes::Volume| v.mean();
    let diff_before = mean(difference_map(&before.warped, &pair.fixed).unwrap());
    let diff_after = mean(difference_map(&after.warped, &pair.fixed).unwrap());
    assert!(diff_after < diff_before, "{diff_after} vs {diff_before}");

    let curve = smoothed(&loss_curve(&run.log), 50);
    assert!(curve.last().unwrap() < curve.first().unwrap());

    let (_, dsc_after, _) = score_field(&pair, &after.final_field).unwrap();
    let (dsc_before, _, _) = score_field(&pair, &before.final_field).unwrap();
    assert!(dsc_after > dsc_before, "{dsc_after} vs {dsc_before}");

    // the trained model survives a checkpoint round trip bit for bit
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("trained.ckpt");
    save_checkpoint(&path, &run.checkpoint).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    assert!(loaded.same_as(&run.checkpoint));
    let again = register(&loaded.params, &pair.fixed, &pair.moving).unwrap();
    assert_eq!(again.final_field, after.final_field);
}
