use std::path::Path;
use std::time::Instant;

use dlnet::dlnet::Checkpoint;
use dlnet::synthdata::{generate, write_dataset};
use dlnet::trainer::{run, Model, TrainConfig};
use dlnet::Error;

fn small_config(dir: &Path, data: &Path, extra: &str) -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.apply_text(&format!(
        "width = 64\nheight = 32\nprecision = f64\nepochs = 100\ndata = {}\nout = {}\n{extra}",
        data.display(),
        dir.display()
    ))
    .unwrap();
    cfg
}

fn dataset(dir: &Path, count: usize, seed: u64) -> std::path::PathBuf {
    let path = dir.join(format!("data_{count}_{seed}.dlgs"));
    write_dataset(&generate(count, seed, 32, 64).unwrap(), &path).unwrap();
    path
}

fn csv_rows(path: &Path) -> Vec<String> {
    std::fs::read_to_string(path).unwrap().lines().map(str::to_string).collect()
}

#[test]
fn smoke_run_writes_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let data = dataset(tmp.path(), 16, 1);
    let out = tmp.path().join("run");
    let cfg = small_config(&out, &data, "max_steps = 50");
    let start = Instant::now();
    let outcome = run(&cfg).unwrap();
    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 300.0, "{secs} s");
    assert_eq!(outcome.steps, 50);

    let rows = csv_rows(&out.join("losses.csv"));
    assert_eq!(rows[0], "step,recon,smooth_s0,smooth_s3,total");
    assert_eq!(rows.len(), 51);
    for (i, row) in rows[1..].iter().enumerate() {
        let cols: Vec<f64> = row.split(',').map(|c| c.parse().unwrap()).collect();
        assert_eq!(cols.len(), 5);
        assert_eq!(cols[0] as usize, i);
        assert!(cols.iter().all(|v| v.is_finite()));
    }

    let metrics: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    for key in ["abs_rel", "sq_rel", "rms", "rms_log", "delta1", "delta2", "delta3", "samples", "scaling"] {
        assert!(metrics["final"].get(key).is_some(), "{key}");
        assert!(metrics["initial"].get(key).is_some(), "{key}");
    }
    assert_eq!(metrics["scales"], serde_json::json!([0, 3]));

    let cx: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("complexity.json")).unwrap()).unwrap();
    assert_eq!(cx["params"], cx["closed_form_params"]);
    assert_eq!(
        cx["params"].as_u64().unwrap() as usize,
        cfg.network.depth_params().unwrap() + cfg.network.pose_params().unwrap()
    );
    assert!(cx["depth_macs"].as_u64().unwrap() > 0);
    assert!(cx["forward_seconds"].as_f64().unwrap() > 0.0);

    let ck = Checkpoint::<f64>::load(out.join("checkpoint.dlck")).unwrap();
    let (model, meta) = Model::<f64>::from_checkpoint(&ck).unwrap();
    assert_eq!(meta.step, 50);
    assert_eq!(model.store.numel(), cx["params"].as_u64().unwrap() as usize);
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let tmp = tempfile::tempdir().unwrap();
    let data = dataset(tmp.path(), 4, 2);
    let out = tmp.path().join("run");
    let cfg = small_config(&out, &data, "max_steps = 1\nlr = 0");
    run(&cfg).unwrap();
    let ck = Checkpoint::<f64>::load(out.join("checkpoint.dlck")).unwrap();
    let (trained, _) = Model::<f64>::from_checkpoint(&ck).unwrap();
    let fresh = Model::<f64>::new(&cfg.network, cfg.seed).unwrap();
    assert!(trained.store.bit_eq(&fresh.store));
    assert_eq!(csv_rows(&out.join("losses.csv")).len(), 2);
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let tmp = tempfile::tempdir().unwrap();
    let data = dataset(tmp.path(), 8, 3);
    // batch 4 over 8 sequences: two steps per epoch, so step 4 is an epoch end
    let straight = tmp.path().join("straight");
    run(&small_config(&straight, &data, "max_steps = 6")).unwrap();

    let resumed = tmp.path().join("resumed");
    run(&small_config(&resumed, &data, "max_steps = 4")).unwrap();
    run(&small_config(&resumed, &data, "max_steps = 6\nresume = true")).unwrap();

    assert_eq!(csv_rows(&straight.join("losses.csv")), csv_rows(&resumed.join("losses.csv")));
    let a = Checkpoint::<f64>::load(straight.join("checkpoint.dlck")).unwrap();
    let b = Checkpoint::<f64>::load(resumed.join("checkpoint.dlck")).unwrap();
    assert_eq!(a.tensors.len(), b.tensors.len());
    for ((na, ta), (nb, tb)) in a.tensors.iter().zip(&b.tensors) {
        assert_eq!(na, nb);
        assert!(ta.bit_eq(tb), "{na}");
    }
}

#[test]
fn non_finite_input_aborts_with_dump() {
    let tmp = tempfile::tempdir().unwrap();
    let mut seqs = generate(4, 5, 32, 64).unwrap();
    seqs[2].frames[1].image.data_mut()[7] = f32::NAN;
    let data = tmp.path().join("bad.dlgs");
    write_dataset(&seqs, &data).unwrap();
    let out = tmp.path().join("run");
    let err = run(&small_config(&out, &data, "max_steps = 1\naugment = false")).unwrap_err();
    assert!(matches!(err, Error::Numeric(_)), "{err}");
    assert_eq!(err.exit_code(), 4);
    assert!(out.join("nonfinite_step0.dlgs").exists());
    assert!(out.join("nonfinite_step0.json").exists());
}

#[test]
fn data_errors_are_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("missing.dlgs");
    let err = run(&small_config(&tmp.path().join("a"), &missing, "")).unwrap_err();
    assert_eq!(err.exit_code(), 3, "{err}");
    let data = dataset(tmp.path(), 2, 6);
    let err = run(&small_config(&tmp.path().join("b"), &data, "")).unwrap_err();
    assert_eq!(err.exit_code(), 3, "{err}");
    let mut wrong = small_config(&tmp.path().join("c"), &data, "batch_size = 1");
    wrong.network.width = 128;
    let err = run(&wrong).unwrap_err();
    assert_eq!(err.exit_code(), 3, "{err}");
}
