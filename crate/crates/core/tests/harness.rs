mod common;

use std::fs;

use common::tiny_run;
use refcod_core::config::{Objective, RunConfig};
use refcod_core::data::Sample;
use refcod_core::gradcheck;
use refcod_core::harness::{
    ablation_config, check_compatible, evaluate_predictions, load_dataset, write_calibration,
    Checkpoint, HarnessError, TrainOutput, Trainer, LOG_HEADER,
};
use refcod_core::model::Batch;
use refcod_tensor::nn::Session;
use refcod_tensor::Tensor;

fn tiny_data(cfg: &RunConfig) -> Vec<Sample> {
    load_dataset(cfg).unwrap()
}

#[test]
fn one_epoch_smoke_run_writes_log_and_checkpoint() {
    let mut cfg = tiny_run();
    cfg.optim.epochs = 1;
    let data = tiny_data(&cfg);
    assert_eq!(data.len(), 4);
    let dir = tempfile::tempdir().unwrap();
    let out = TrainOutput::to_dir(dir.path());
    let mut trainer = Trainer::new(&cfg).unwrap();
    trainer.train(&data, &out).unwrap();
    assert_eq!(trainer.epoch, 1);
    assert_eq!(trainer.step, 2);

    let log = fs::read_to_string(out.log_path().unwrap()).unwrap();
    let mut lines = log.lines();
    assert_eq!(lines.next(), Some(LOG_HEADER));
    assert_eq!(lines.count(), 2);

    let ckpt = Checkpoint::load(&out.checkpoint_path().unwrap()).unwrap();
    assert_eq!(ckpt.step, 2);
    assert_eq!(ckpt.epoch, 1);
    assert_eq!(ckpt.config, cfg);
    assert_eq!(ckpt.params.len(), trainer.store.len());
}

#[test]
fn periodic_checkpoints_follow_the_epoch_interval() {
    let mut cfg = tiny_run();
    cfg.optim.epochs = 2;
    cfg.optim.checkpoint_every = 1;
    let dir = tempfile::tempdir().unwrap();
    Trainer::new(&cfg)
        .unwrap()
        .train(&tiny_data(&cfg), &TrainOutput::to_dir(dir.path()))
        .unwrap();
    for name in [
        "checkpoint_epoch1.bin",
        "checkpoint_epoch2.bin",
        "checkpoint.bin",
        "loss_log.csv",
    ] {
        assert!(dir.path().join(name).is_file(), "{name}");
    }
}

#[test]
fn checkpoint_bytes_round_trip() {
    let cfg = tiny_run();
    let mut trainer = Trainer::new(&cfg).unwrap();
    let mut one_epoch = cfg.clone();
    one_epoch.optim.max_steps = 1;
    trainer.config = one_epoch;
    trainer
        .train(&tiny_data(&cfg), &TrainOutput::default())
        .unwrap();
    let ckpt = trainer.checkpoint();
    let bytes = ckpt.to_bytes();
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back, ckpt);
    assert_eq!(back.to_bytes(), bytes);

    let mut corrupt = bytes.clone();
    corrupt[0] ^= 0xff;
    assert!(matches!(
        Checkpoint::from_bytes(&corrupt),
        Err(HarnessError::Checkpoint(_))
    ));
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() / 2]).is_err());
}

#[test]
fn training_logs_are_bit_identical_across_runs() {
    let cfg = tiny_run();
    let data = tiny_data(&cfg);
    let run = || {
        let dir = tempfile::tempdir().unwrap();
        let out = TrainOutput::to_dir(dir.path());
        Trainer::new(&cfg).unwrap().train(&data, &out).unwrap();
        fs::read(out.log_path().unwrap()).unwrap()
    };
    let (a, b) = (run(), run());
    assert!(a.len() > LOG_HEADER.len());
    assert_eq!(a, b);
}

#[test]
fn resumed_training_reproduces_the_next_step() {
    let cfg = tiny_run();
    let data = tiny_data(&cfg);
    let mut straight = Trainer::new(&cfg).unwrap();
    straight.train(&data, &TrainOutput::default()).unwrap();
    assert_eq!(straight.step, 4);

    let mut first = Trainer::new(&cfg).unwrap();
    first.config.optim.max_steps = 2;
    first.train(&data, &TrainOutput::default()).unwrap();
    let bytes = first.checkpoint().to_bytes();

    let mut resumed = Trainer::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
    resumed.config.optim.max_steps = 0;
    resumed.train(&data, &TrainOutput::default()).unwrap();
    assert_eq!(resumed.log.len(), 2);
    for (r, s) in resumed.log.iter().zip(&straight.log[2..]) {
        assert_eq!(r.step, s.step);
        assert!(
            (r.report.total - s.report.total).abs() <= 1e-6,
            "{} vs {}",
            r.report.total,
            s.report.total
        );
    }
}

#[test]
fn cosine_schedule_endpoints() {
    let mut cfg = tiny_run();
    cfg.optim.epochs = 10;
    cfg.optim.lr_floor = 1e-5;
    cfg.optim.backbone_lr_scale = 0.1;
    let mut trainer = Trainer::new(&cfg).unwrap();
    assert_eq!(trainer.learning_rate(), cfg.optim.base_lr);
    trainer.epoch = 5;
    let mid = (cfg.optim.base_lr + cfg.optim.lr_floor) / 2.0;
    assert!((trainer.learning_rate() - mid).abs() < 1e-15);
    trainer.epoch = 10;
    assert!((trainer.learning_rate() - cfg.optim.lr_floor).abs() < 1e-18);
}

#[test]
fn backbone_learning_rate_is_scaled() {
    let cfg = tiny_run();
    let data = tiny_data(&cfg);
    let mut trainer = Trainer::new(&cfg).unwrap();
    let batch = Batch::from_samples(&[&data[0], &data[1]]).unwrap();
    let entry = trainer.step(&batch, 0.01).unwrap();
    assert_eq!(entry.lr_head, 0.01);
    assert_eq!(entry.lr_backbone, 0.01 * cfg.optim.backbone_lr_scale);
}

#[test]
fn disabling_all_modules_gives_the_plain_baseline() {
    let base = tiny_run();
    let mut cfg = base.clone();
    for module in ["rgde", "uaed", "barm"] {
        cfg = ablation_config(&cfg, module).unwrap();
    }
    assert_eq!(cfg.name, "toy-without-rgde-without-uaed-without-barm");
    let a = &cfg.ablation;
    assert!(!(a.rgde || a.euqm || a.ega || a.umrm || a.barm));
    assert!(ablation_config(&base, "attention").is_err());

    let data = tiny_data(&cfg);
    let trainer = Trainer::new(&cfg).unwrap();
    let batch = Batch::from_samples(&[&data[0]]).unwrap();
    let s = Session::new(&trainer.store, true);
    let out = trainer.model.forward(&s, &batch, &cfg.ablation).unwrap();
    assert!(out.decode.dirichlet.is_none());
    assert!(out.refinements.is_none());
    let (_, report) = refcod_core::losses::total_loss(&out.loss_inputs(&batch.gt), &cfg.loss);
    assert_eq!(report.evidential, 0.0);
    assert_eq!(report.focal, 0.0);
    assert!(report.total > 0.0);
}

#[test]
fn architecture_fingerprint_guards_evaluation() {
    let trained = tiny_run();
    let mut other_lr = trained.clone();
    other_lr.optim.base_lr = 1.0;
    other_lr.seed = 99;
    check_compatible(&trained, &other_lr, false).unwrap();

    let mut wider = trained.clone();
    wider.model.embed_dim = 16;
    assert!(matches!(
        check_compatible(&trained, &wider, false),
        Err(HarnessError::FingerprintMismatch { .. })
    ));
    check_compatible(&trained, &wider, true).unwrap();
}

#[test]
fn perfect_predictions_saturate_the_evaluation() {
    let cfg = tiny_run();
    let data = tiny_data(&cfg);
    let preds: Vec<Tensor> = data.iter().map(|s| s.gt.clone()).collect();
    let report = evaluate_predictions(&preds, &data, 10).unwrap();
    assert_eq!(report.overall.count, data.len());
    assert!((report.overall.s_measure - 1.0).abs() < 1e-6);
    assert_eq!(report.overall.mae, 0.0);
    assert_eq!(report.overall.ece, 0.0);
    assert_eq!(report.single.count + report.multiple.count, data.len());
    assert!(report.to_text().contains("[multiple]"));
    assert!(evaluate_predictions(&preds[1..], &data, 10).is_err());
}

#[test]
fn split_follows_connected_components() {
    let mut cfg = tiny_run();
    cfg.data.synth.objects = refcod_core::config::ObjectCount::Mixed;
    cfg.data.synth.image_size = 64;
    cfg.data.synth.num_scenes = 4;
    let data = tiny_data(&cfg);
    let preds: Vec<Tensor> = data.iter().map(|s| s.gt.clone()).collect();
    let report = evaluate_predictions(&preds, &data, 10).unwrap();
    let multi = data.iter().filter(|s| s.object_count() >= 2).count();
    assert!(multi > 0 && multi < data.len());
    assert_eq!(report.multiple.count, multi);
    assert_eq!(report.single.count, data.len() - multi);
}

#[test]
fn empty_dataset_gives_a_zero_count_report() {
    let report = evaluate_predictions(&[], &[], 10).unwrap();
    assert_eq!(report.overall.count, 0);
    assert!(report.to_text().contains("count=0"));
    let json: serde_json::Value = serde_json::from_str(&report.to_json()).unwrap();
    assert_eq!(json["overall"]["count"], 0);
}

#[test]
fn calibration_artifacts_are_written() {
    let cfg = tiny_run();
    let data = tiny_data(&cfg);
    let preds: Vec<Tensor> = data.iter().map(|s| s.gt.clone()).collect();
    let report = evaluate_predictions(&preds, &data, 10).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (csv, svg) = write_calibration(&dir.path().join("calibration"), &report.overall).unwrap();
    let csv = fs::read_to_string(csv).unwrap();
    assert!(csv.starts_with("bin_low,bin_high,mean_conf,acc,count\n"));
    // all mass sits in the top bin with accuracy 1: a bar on the identity line
    assert!(csv
        .trim_end()
        .ends_with(&format!(",1,1,{}", data.len() * 32 * 32)));
    let svg = fs::read_to_string(svg).unwrap();
    roxmltree::Document::parse(&svg).unwrap();
}

#[test]
fn non_finite_loss_aborts_with_diagnostics() {
    let cfg = tiny_run();
    let data = tiny_data(&cfg);
    let mut trainer = Trainer::new(&cfg).unwrap();
    let id = trainer.store.id_of("uaed.w_u").expect("w_u is registered");
    *trainer.store.get_mut(id) = Tensor::full(trainer.store.get(id).shape(), f64::NAN);
    let dir = tempfile::tempdir().unwrap();
    let err = trainer
        .train(&data, &TrainOutput::to_dir(dir.path()))
        .unwrap_err();
    let HarnessError::NonFinite(diag) = err else {
        panic!("expected a non-finite abort, got {err}");
    };
    assert!(diag.contains("step 1"));
    let written = fs::read_to_string(dir.path().join("nan_diagnostics.txt")).unwrap();
    assert_eq!(written, diag);
    assert_eq!(trainer.step, 0);
}

#[test]
fn empty_training_set_is_rejected() {
    let mut trainer = Trainer::new(&tiny_run()).unwrap();
    assert!(matches!(
        trainer.train(&[], &TrainOutput::default()),
        Err(HarnessError::EmptyDataset)
    ));
}

#[test]
fn bce_objective_drops_the_focal_term() {
    let mut cfg = tiny_run();
    cfg.loss.objective = Objective::Bce;
    let data = tiny_data(&cfg);
    let mut trainer = Trainer::new(&cfg).unwrap();
    let batch = Batch::from_samples(&[&data[0]]).unwrap();
    let entry = trainer.step(&batch, 1e-3).unwrap();
    // the Dirichlet slot carries a plain BCE on the evidence log-odds
    assert_eq!(entry.report.focal, 0.0);
    assert!(entry.report.evidential > 0.0);
    assert!(entry.report.total.is_finite());
}

#[test]
fn finite_difference_suites_pass() {
    let suites = gradcheck::run_all();
    // the scalar decoder gate is probed at a handful of values; the rest need dense coverage
    for suite in suites.iter().filter(|s| s.name != "decoder_w_u") {
        assert!(
            suite.points >= gradcheck::MIN_POINTS,
            "{}: {} points",
            suite.name,
            suite.points
        );
    }
    for suite in suites {
        assert!(
            suite.passed,
            "{}: max relative error {:e}",
            suite.name, suite.max_rel_error
        );
    }
}
