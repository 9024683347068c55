//! End-to-end checks of the command-line interface.

use std::path::Path;
use std::process::{Command, Output};

fn drnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_drnet"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = drnet(args);
    assert!(
        out.status.success(),
        "command {:?} failed:\n{}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// Stable digest of a directory tree (relative path + contents).
fn dir_digest(root: &Path) -> Vec<(String, u64)> {
    fn walk(dir: &Path, root: &Path, out: &mut Vec<(String, u64)>) {
        let mut entries: Vec<_> = std::fs::read_dir(dir)
            .unwrap()
            .map(|e| e.unwrap().path())
            .collect();
        entries.sort();
        for path in entries {
            if path.is_dir() {
                walk(&path, root, out);
            } else {
                let bytes = std::fs::read(&path).unwrap();
                // FNV-1a
                let mut h: u64 = 0xcbf29ce484222325;
                for b in bytes {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x100000001b3);
                }
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, h));
            }
        }
    }
    let mut out = Vec::new();
    walk(root, root, &mut out);
    out
}

fn small_model_config() -> &'static str {
    "input_size=32\nchannels=4,6,8,8\nfusion_channels=6\nstrides=4,8,16,32\n\
     anchor_scales=6,12,20,28\nsteps=6\nbatch=2\nseed=3\n"
}

#[test]
fn gen_data_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for dir in [&a, &b] {
        ok(&[
            "gen-data",
            "--seed",
            "7",
            "--images",
            "6",
            "--videos",
            "1",
            "--frames",
            "3",
            "--out",
            dir.to_str().unwrap(),
        ]);
    }
    assert_eq!(dir_digest(&a), dir_digest(&b), "identical seeds must give identical datasets");
}

#[test]
fn train_eval_detect_roundtrip() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    ok(&[
        "gen-data", "--seed", "1", "--images", "10", "--canvas", "32",
        "--min-size", "8", "--max-size", "14", "--out", data.to_str().unwrap(),
    ]);

    let cfg_path = tmp.path().join("small.cfg");
    std::fs::write(&cfg_path, small_model_config()).unwrap();

    let run = tmp.path().join("run");
    ok(&[
        "train", "--data", data.to_str().unwrap(), "--out", run.to_str().unwrap(),
        "--config", cfg_path.to_str().unwrap(), "--variant", "drnet",
    ]);
    assert!(run.join("model.afw").is_file());
    assert!(run.join("model.cfg").is_file());
    assert!(run.join("metrics.csv").is_file());
    let metrics = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("step,L_total,L_loc_ARM,L_loc_ODM,L_conf,lr"));
    assert_eq!(metrics.lines().count(), 7, "header plus one line per step");

    // retraining from the echoed config reproduces the checkpoint exactly
    let run2 = tmp.path().join("run2");
    ok(&[
        "train", "--data", data.to_str().unwrap(), "--out", run2.to_str().unwrap(),
        "--config", run.join("config.txt").to_str().unwrap(),
    ]);
    assert_eq!(
        std::fs::read(run.join("model.afw")).unwrap(),
        std::fs::read(run2.join("model.afw")).unwrap(),
        "config echo must reproduce training bit-identically"
    );

    // end-to-end eval vs eval of the saved detections file
    let eval1 = tmp.path().join("eval1");
    ok(&[
        "eval", "--checkpoint", run.to_str().unwrap(), "--data", data.to_str().unwrap(),
        "--out", eval1.to_str().unwrap(),
    ]);
    let eval2 = tmp.path().join("eval2");
    ok(&[
        "eval", "--detections", eval1.join("detections.jsonl").to_str().unwrap(),
        "--data", data.to_str().unwrap(), "--out", eval2.to_str().unwrap(),
    ]);
    assert_eq!(
        std::fs::read(eval1.join("eval.csv")).unwrap(),
        std::fs::read(eval2.join("eval.csv")).unwrap(),
        "eval from detections must match end-to-end eval"
    );

    // detect writes JSON lines
    let det = tmp.path().join("det");
    ok(&[
        "detect", "--checkpoint", run.to_str().unwrap(), "--data", data.to_str().unwrap(),
        "--out", det.to_str().unwrap(),
    ]);
    let lines = std::fs::read_to_string(det.join("detections.jsonl")).unwrap();
    for line in lines.lines() {
        assert!(line.starts_with("{\"frame\":"), "JSONL format: {}", line);
    }

    // export-offsets produces the sampling-center table
    let off = tmp.path().join("off");
    ok(&[
        "export-offsets", "--checkpoint", run.to_str().unwrap(),
        "--image", data.join("images/img_00000.pgm").to_str().unwrap(),
        "--out", off.to_str().unwrap(),
    ]);
    let csv = std::fs::read_to_string(off.join("sampling_centers.csv")).unwrap();
    assert!(csv.starts_with("scale,path,cell_row,cell_col,base_x,base_y,refined_x,refined_y"));
    assert!(csv.lines().count() > 1);
}

#[test]
fn temporal_pair_train_and_sweep() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    ok(&[
        "gen-data", "--seed", "2", "--images", "8", "--videos", "2", "--frames", "4",
        "--canvas", "32", "--min-size", "8", "--max-size", "14",
        "--out", data.to_str().unwrap(),
    ]);
    let cfg_path = tmp.path().join("small.cfg");
    std::fs::write(&cfg_path, small_model_config()).unwrap();

    let run = tmp.path().join("run");
    ok(&[
        "train", "--data", data.to_str().unwrap(), "--out", run.to_str().unwrap(),
        "--config", cfg_path.to_str().unwrap(), "--variant", "tdrnet", "--steps", "4",
    ]);

    let sweep = tmp.path().join("sweep");
    let stdout = ok(&[
        "sweep", "--checkpoint", run.to_str().unwrap(), "--data", data.to_str().unwrap(),
        "--out", sweep.to_str().unwrap(), "--k", "1,2", "--e", "1.0,0.5",
    ]);
    assert!(stdout.contains("k=1"), "{}", stdout);
    let csv = std::fs::read_to_string(sweep.join("sweep.csv")).unwrap();
    assert!(csv.starts_with("k,e,mAP,rg_calls,rd_calls,ms_per_frame"));
    assert_eq!(csv.lines().count(), 5, "header plus one row per (k,e) cell");
    assert!(sweep.join("map_vs_k.svg").is_file());

    // per-clip generator call accounting: 2 clips of 4 frames
    let k2_row: Vec<&str> = csv.lines().find(|l| l.starts_with("2,1")).unwrap().split(',').collect();
    assert_eq!(k2_row[3], "4", "k=2 over two 4-frame clips means 2+2 generator calls");

    // a streamed detect over one clip
    let det = tmp.path().join("det");
    let stdout = ok(&[
        "detect", "--checkpoint", run.to_str().unwrap(), "--data", data.to_str().unwrap(),
        "--out", det.to_str().unwrap(), "--video", "clip_001", "--k", "2", "--e", "0.5",
    ]);
    assert!(stdout.contains("2 generator calls"), "{}", stdout);
}

#[test]
fn unknown_config_key_is_rejected_with_valid_keys() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = tmp.path().join("bad.cfg");
    std::fs::write(&cfg_path, "bogus_key=1\n").unwrap();
    let out = drnet(&[
        "train", "--data", "x", "--out", tmp.path().join("o").to_str().unwrap(),
        "--config", cfg_path.to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("bogus_key") && err.contains("valid keys") && err.contains("input_size"), "{}", err);
}

#[test]
fn missing_checkpoint_is_an_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = drnet(&[
        "eval", "--checkpoint", tmp.path().join("nope").to_str().unwrap(),
        "--data", tmp.path().to_str().unwrap(),
        "--out", tmp.path().join("o").to_str().unwrap(),
    ]);
    assert!(!out.status.success());
}
