use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn segpl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_segpl")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn synth(out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "synth",
        "--out",
        out.to_str().unwrap(),
        "--seed",
        "7",
        "--image-size",
        "16x16",
        "--num-images",
        "20",
        "--labelled",
        "2",
        "--unlabelled",
        "8",
        "--val",
        "4",
        "--test",
        "6",
    ];
    args.extend_from_slice(extra);
    segpl(&args)
}

#[test]
fn synth_is_byte_identical_and_refuses_to_overwrite() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_eq!(code(&synth(&a, &[])), 0);
    assert_eq!(code(&synth(&b, &[])), 0);
    let (ta, tb) = (tree(&a), tree(&b));
    assert!(ta.len() > 20);
    assert_eq!(ta, tb);

    let refused = synth(&a, &[]);
    assert_eq!(code(&refused), 2);
    assert!(String::from_utf8_lossy(&refused.stderr).contains("--force"));
    assert_eq!(code(&synth(&a, &["--force"])), 0);
    assert_eq!(tree(&a), tb);
}

#[test]
fn usage_errors_and_missing_inputs() {
    assert_eq!(code(&segpl(&["--help"])), 0);
    assert_eq!(code(&segpl(&["train", "--no-such-flag"])), 1);
    assert_eq!(code(&segpl(&["synth", "--out", "x", "--image-size", "0x4"])), 1);

    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nowhere");
    let o = segpl(&["eval", "--run-dir", missing.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(!String::from_utf8_lossy(&o.stderr).is_empty());
}

#[test]
fn full_pipeline_writes_every_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let run = tmp.path().join("run");
    assert_eq!(code(&synth(&data, &[])), 0);

    let o = segpl(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--run-dir",
        run.to_str().unwrap(),
        "--mode",
        "segpl_vi",
        "--steps",
        "4",
        "--eval-every",
        "2",
        "--base-width",
        "4",
        "--depth",
        "2",
        "--ratio",
        "2",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["metrics.csv", "best.ckpt", "final.ckpt", "manifest.json"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(run.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "train");
    assert_eq!(manifest["config"]["mode"], "segpl_vi");

    let r = run.to_str().unwrap();
    for (cmd, files) in [
        ("eval", &["eval.csv", "per_image_iou.csv", "gamma_sweep.svg"][..]),
        ("attack", &["attack.csv", "epsilon_sweep.svg"][..]),
        ("report", &["loss_curves.svg", "validation_iou.svg", "threshold_trajectory.svg"][..]),
    ] {
        let o = segpl(&[cmd, "--run-dir", r]);
        assert_eq!(code(&o), 0, "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
        for f in files {
            assert!(run.join(f).exists(), "{cmd} did not write {f}");
        }
    }

    let em = tmp.path().join("em");
    let o = segpl(&["emdemo", "--run-dir", em.to_str().unwrap(), "--seed", "3"]);
    assert_eq!(code(&o), 0);
    assert!(em.join("em_trace.csv").exists());
    assert!(em.join("em_convergence.svg").exists());
}
