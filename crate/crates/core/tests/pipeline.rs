mod support;

use vibeam_core::dataset::Dataset;
use vibeam_core::par::Exec;
use vibeam_core::pipeline::{
    align_subset, evaluate, finetune, gen_data, predictions_csv, pretrain, train_task,
};
use vibeam_core::metrics::dba_score;
use vibeam_core::scene::MODALITIES;
use vibeam_core::Error;

#[test]
fn align_subset_sizes() {
    let s = align_subset(1000, 0.2, 7).unwrap();
    assert_eq!(s.len(), 200);
    assert!(s.windows(2).all(|w| w[0] < w[1]) && *s.last().unwrap() < 1000);
    assert_eq!(s, align_subset(1000, 0.2, 7).unwrap());
    assert_ne!(s, align_subset(1000, 0.2, 8).unwrap());
    assert_eq!(align_subset(1000, 1.0, 7).unwrap(), (0..1000).collect::<Vec<_>>());
    assert_eq!(align_subset(2000, 0.05, 0).unwrap().len(), 100);
    assert!(matches!(align_subset(1000, 0.0, 7), Err(Error::Config(_))));
    assert!(matches!(align_subset(1000, 1.5, 7), Err(Error::Config(_))));
}

#[test]
fn staged_pipeline_evaluates_consistently() {
    let cfg = support::tiny_run_config();
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    gen_data(&cfg, &cfg.scene, &data, Exec::Parallel).unwrap();
    let mut experts = Vec::new();
    for m in MODALITIES {
        let out = dir.path().join(format!("pre-{m}"));
        let ck = pretrain(&cfg, &data, m, &out, Exec::Parallel).unwrap();
        assert_eq!(ck.epoch, cfg.train.pretrain_epochs);
        assert!(ck.params.iter().all(|(n, _)| !n.starts_with("poe.") && !n.starts_with("task.")));
        experts.push(out);
    }
    let repr = dir.path().join("fine");
    let (ck, n) = finetune(&cfg, &data, &experts, &repr, 0.5, false, Exec::Parallel).unwrap();
    assert_eq!(n, 24);
    assert_eq!(ck.config["align-episodes"], 24);
    let head = dir.path().join("head");
    train_task(&cfg, &data, &repr, &head, Exec::Parallel).unwrap();

    let ev = evaluate(&data, &repr, &head, &[], "r", None, Exec::Parallel).unwrap();
    let again = evaluate(&data, &repr, &head, &[], "r", None, Exec::Sequential).unwrap();
    assert_eq!(ev, again);
    // the summary score is recomputable from the per-episode predictions
    let csv = predictions_csv(&ev);
    let rows: Vec<(usize, usize)> = csv
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<usize> = l.split(',').map(|x| x.parse().unwrap()).collect();
            (f[1], f[2])
        })
        .collect();
    let truths: Vec<usize> = rows.iter().map(|r| r.0).collect();
    let preds: Vec<usize> = rows.iter().map(|r| r.1).collect();
    let ds = Dataset::load(&data, None).unwrap();
    assert_eq!(dba_score(&preds, &truths, cfg.metrics.thresholds, ds.beams).unwrap(), ev.run.dba);

    let all: Vec<String> = MODALITIES.iter().map(|s| s.to_string()).collect();
    let blind = evaluate(&data, &repr, &head, &all, "blind", None, Exec::Parallel).unwrap();
    assert_eq!(blind.predictions.len(), ds.episodes);
    // with nothing observed every episode gets the same prior-only features
    assert!(blind.predictions.iter().all(|&p| p == blind.predictions[0]));
    assert!(matches!(
        evaluate(&data, &repr, &head, &["lidar".into()], "x", None, Exec::Parallel),
        Err(Error::UnknownModality(_))
    ));
}

#[test]
fn head_refuses_another_representation() {
    let cfg = support::tiny_run_config();
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    gen_data(&cfg, &cfg.scene, &data, Exec::Parallel).unwrap();
    let mut experts = Vec::new();
    for m in MODALITIES {
        let out = dir.path().join(format!("pre-{m}"));
        pretrain(&cfg, &data, m, &out, Exec::Parallel).unwrap();
        experts.push(out);
    }
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    finetune(&cfg, &data, &experts, &a, 1.0, false, Exec::Parallel).unwrap();
    finetune(&cfg, &data, &experts, &b, 0.5, false, Exec::Parallel).unwrap();
    let head = dir.path().join("head");
    train_task(&cfg, &data, &a, &head, Exec::Parallel).unwrap();
    assert!(matches!(
        evaluate(&data, &b, &head, &[], "x", None, Exec::Parallel),
        Err(Error::Incompatible(_))
    ));
}
