use std::path::Path;
use std::process::{Command, Output};

fn dlnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dlnet")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn gen_train_eval_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d.dlgs");
    let o = dlnet(&["gen", "--scenes", "4", "--out", p(&data), "--seed", "3", "--resolution", "64x32"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(data.exists());

    let cfg = tmp.path().join("train.cfg");
    std::fs::write(&cfg, "# tiny run\nwidth = 64\nheight = 32\nmax_steps = 2\nscales = 0,2\n").unwrap();
    let out = tmp.path().join("run");
    let o = dlnet(&[
        "train",
        "--config",
        p(&cfg),
        "--data",
        p(&data),
        "--out",
        p(&out),
        "--seed",
        "1",
        "--precision",
        "f64",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(summary["steps"], 2);
    for f in ["losses.csv", "metrics.json", "complexity.json", "checkpoint.dlck", "config.txt"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let header = std::fs::read_to_string(out.join("losses.csv")).unwrap();
    assert!(header.starts_with("step,recon,smooth_s0,smooth_s2,total\n"));

    let o = dlnet(&["eval", "--checkpoint", p(&out.join("checkpoint.dlck")), "--data", p(&data), "--scaling", "none"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let m: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(m["scaling"], "none");
    assert_eq!(m["samples"], 4);
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.cfg");
    std::fs::write(&cfg, "learning_rate = 1\n").unwrap();
    assert_eq!(code(&dlnet(&["train", "--config", p(&cfg)])), 2);
    assert_eq!(code(&dlnet(&["train", "--precision", "f16"])), 2);
    assert_eq!(code(&dlnet(&["gen", "--out", "x", "--resolution", "big"])), 2);

    let missing = tmp.path().join("none.dlgs");
    let o = dlnet(&["train", "--data", p(&missing), "--out", p(&tmp.path().join("r"))]);
    assert_eq!(code(&o), 3);

    let junk = tmp.path().join("junk.dlgs");
    std::fs::write(&junk, vec![7u8; 64]).unwrap();
    let o = dlnet(&["eval", "--checkpoint", p(&junk), "--data", p(&junk)]);
    assert_eq!(code(&o), 3);
}

#[test]
fn bench_attn_emits_csv() {
    let o = dlnet(&["bench-attn", "--n-list", "64,128", "--k-proj", "16", "--repeats", "1", "--d", "8"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8(o.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].starts_with("n,k_proj,d,"));
    let cols: Vec<&str> = lines[2].split(',').collect();
    assert_eq!(cols[0], "128");
    assert_eq!(cols[6], (128 * 16).to_string());
}

#[test]
fn gradcheck_passes() {
    let o = dlnet(&["gradcheck"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    assert!(String::from_utf8_lossy(&o.stdout).contains(", 0 failed"));
}
