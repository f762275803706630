use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_promise-seg")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Value {
    let out = bin(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn fail(args: &[&str]) -> (i32, String) {
    let out = bin(args);
    assert!(!out.status.success(), "{args:?} should fail");
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    assert!(err.starts_with("error: "), "{err}");
    (out.status.code().unwrap(), err)
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((path.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn gen_data_is_byte_identical() {
    let t = tempfile::tempdir().unwrap();
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    for d in [&a, &b] {
        let meta = ok(&["gen-data", "--domain", "targetA", "--count", "30", "--seed", "3", "--size", "32", "--out", p(d)]);
        assert_eq!(meta["domain"], "targetA");
        assert_eq!(meta["count"], 30);
    }
    let (fa, fb) = (files(&a), files(&b));
    assert_eq!(fa.len(), 61);
    assert_eq!(fa, fb);
}

#[test]
fn usage_errors_are_single_lines() {
    let (code, err) = fail(&["gen-data", "--domain", "targetA", "--bogus"]);
    assert_eq!(code, 2);
    assert!(err.starts_with("error: usage: "), "{err}");
    let (code, _) = fail(&["gen-data", "--domain", "nowhere", "--count", "1", "--out", "x"]);
    assert_eq!(code, 2);
    let (_, err) = fail(&["eval", "--checkpoint", "/nonexistent.ckpt", "--data", "/nonexistent"]);
    assert!(err.starts_with("error: io: "), "{err}");
    assert!(bin(&["--help"]).status.success());
    assert!(bin(&["train-ips", "--help"]).status.success());
}

#[test]
fn gradcheck_passes_and_prints_every_op() {
    let t = tempfile::tempdir().unwrap();
    let report = t.path().join("grad.json");
    let out = bin(&["gradcheck", "--report", p(&report)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().count(), 27);
    assert!(text.lines().all(|l| l.ends_with(" ok")), "{text}");
    let r: Value = serde_json::from_str(&fs::read_to_string(report).unwrap()).unwrap();
    assert_eq!(r["results"].as_array().unwrap().len(), 27);
    assert_eq!(r["tolerance"], 1e-3);
}

#[test]
fn end_to_end_pipeline() {
    let t = tempfile::tempdir().unwrap();
    let dir = |n: &str| t.path().join(n);
    let (src, ta, tb) = (dir("source"), dir("targetA"), dir("targetB"));
    ok(&["gen-data", "--domain", "source", "--count", "40", "--seed", "1", "--size", "16", "--out", p(&src)]);
    ok(&["gen-data", "--domain", "targetA", "--count", "30", "--seed", "2", "--size", "16", "--out", p(&ta)]);
    ok(&["gen-data", "--domain", "targetB", "--count", "30", "--seed", "3", "--size", "16", "--out", p(&tb)]);

    let base = dir("base.ckpt");
    let pre = ok(&["pretrain", "--data", p(&src), "--preset", "tiny", "--epochs", "2", "--out", p(&base)]);
    assert_eq!(pre["config"]["epochs"], 2);
    assert_eq!(pre["config"]["model"]["image_size"], 16);
    let base_hash = pre["frozen_hash"].as_str().unwrap().to_string();

    let adapted = dir("ips.ckpt");
    let report = dir("reports/ips.json");
    let r = ok(&[
        "train-ips", "--base", p(&base), "--data", p(&ta), "--test", p(&tb), "--variant", "ips-only", "--epochs",
        "2", "--lr", "0.01", "--batch-size", "4", "--eval-seeds", "1,2", "--out", p(&adapted), "--report", p(&report),
    ]);
    assert_eq!(serde_json::from_str::<Value>(&fs::read_to_string(&report).unwrap()).unwrap(), r);
    let c = &r["config"];
    assert_eq!(c["ips_variant"], "ips-only");
    assert_eq!(c["prompts"], "gt");
    assert_eq!(c["epochs"], 2);
    assert_eq!(c["lr"], 0.01);
    assert_eq!(c["eval_seeds"], serde_json::json!([1, 2]));
    assert_eq!(c["train_data"][0], p(&ta));
    assert_eq!(c["model"]["image_size"], 16);
    assert_eq!(r["frozen_hash"], base_hash.as_str());
    assert_eq!(r["trainable_params"], 2 * 8);
    assert_eq!(r["metrics"]["targetB"]["per_seed"].as_array().unwrap().len(), 2);

    let eval = [
        "eval", "--checkpoint", p(&adapted), "--data", p(&ta), "--prompts", "gt", "--setting", "16P", "--seeds",
        "1,2,3,4,5",
    ];
    let first = bin(&eval);
    assert!(first.status.success());
    assert_eq!(first.stdout, bin(&eval).stdout);
    let e: Value = serde_json::from_slice(&first.stdout).unwrap();
    let m = &e["metrics"]["targetA"];
    assert_eq!(m["per_seed"].as_array().unwrap().len(), 5);
    for k in ["mdice", "miou", "mae"] {
        assert!(m["mean"][k].is_number() && m["std"][k].is_number());
    }
    assert_eq!(e["config"]["test_setting"], "16P");
    assert_eq!(e["config"]["ips_variant"], "ips-only");
    assert_eq!(e["frozen_hash"], base_hash.as_str());

    let promise = dir("promise.ckpt");
    let r = ok(&[
        "train-promise", "--base", p(&base), "--data", p(&tb), "--apm", "cross", "--setting", "5P", "--epochs", "1",
        "--lr", "0.01", "--out", p(&promise),
    ]);
    assert_eq!(r["config"]["prompts"], "apm-cross");
    assert_eq!(r["config"]["ips_variant"], "ips-pae");
    assert_eq!(r["frozen_hash"], base_hash.as_str());
    let e = ok(&["eval", "--checkpoint", p(&promise), "--data", p(&tb), "--prompts", "apm-cross"]);
    assert_eq!(e["config"]["test_setting"], "5P");
    let (_, err) = fail(&["eval", "--checkpoint", p(&promise), "--data", p(&tb), "--prompts", "apm-conv"]);
    assert!(err.starts_with("error: usage: "), "{err}");

    let r = ok(&["train-apm", "--base", p(&base), "--data", p(&tb), "--setting", "3P", "--epochs", "1", "--max-steps", "2"]);
    assert_eq!(r["config"]["prompts"], "apm-conv");
    assert_eq!(r["config"]["ips_variant"], "none");
    assert_eq!(r["history"][0]["steps"], 2);

    let (_, err) = fail(&["train-ips", "--base", p(&adapted), "--data", p(&ta)]);
    assert!(err.starts_with("error: checkpoint: "), "{err}");
    let (_, err) = fail(&["train-ips", "--base", p(&base), "--data", p(&ta), "--lr", "0"]);
    assert!(err.starts_with("error: config: "), "{err}");

    let a = ok(&[
        "ablation", "--base", p(&base), "--data", p(&ta), "--seeds", "1,2", "--epochs", "1", "--lr", "0.01",
    ]);
    let rows = a["ablation"]["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 4);
    assert_eq!(rows[0]["variant"], "none");
    assert_eq!(rows[2]["trainable_params_sam_scale"], 1024);
    assert_eq!(a["config"]["eval_seeds"], serde_json::json!([1, 2]));

    let mm = ok(&[
        "multimodal", "--base", p(&base), "--data", p(&ta), "--data", p(&tb), "--epochs", "1", "--eval-seeds",
        "1,2,3", "--lr", "0.01",
    ]);
    for d in ["targetA", "targetB"] {
        assert!(mm["multimodal"]["gap"][d].is_number());
        assert_eq!(mm["multimodal"]["joint"][d]["per_seed"].as_array().unwrap().len(), 3);
    }
    let (_, err) = fail(&["multimodal", "--base", p(&base), "--data", p(&ta)]);
    assert!(err.starts_with("error: usage: "), "{err}");
}
