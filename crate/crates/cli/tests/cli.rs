use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rrld_core::manifest::{write_json, RunRecord, SCHEMA_VERSION};
use rrld_core::trainer::{RunResult, SeedResult, TargetResult};
use rrld_core::Variant;

fn rrld(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rrld")).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Relative path -> contents for every file below `root`.
fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

fn pngs(t: &BTreeMap<PathBuf, Vec<u8>>) -> usize {
    t.keys().filter(|p| p.extension().is_some_and(|e| e == "png")).count()
}

fn synth(out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["synth", "--out", s(out)];
    args.extend_from_slice(extra);
    rrld(&args)
}

#[test]
fn synth_counts_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let args = ["--classes", "4", "--domains", "3", "--per-domain", "100", "--seed", "1", "--image-size", "8"];
    assert!(synth(&a, &args).status.success());
    assert!(synth(&b, &args).status.success());
    let (ta, tb) = (tree(&a), tree(&b));
    assert_eq!(pngs(&ta), 1200);
    assert_eq!(ta, tb);
}

#[test]
fn synth_rejects_single_domain() {
    let dir = tempfile::tempdir().unwrap();
    let o = synth(&dir.path().join("d"), &["--domains", "1"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

fn small_set(dir: &Path) -> PathBuf {
    let d = dir.join("data");
    let o = synth(&d, &["--classes", "3", "--domains", "3", "--per-domain", "12", "--image-size", "8", "--seed", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    d
}

#[test]
fn corrupt_with_zero_sigma_copies_pixels() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_set(dir.path());
    let out = dir.path().join("noisy");
    let o = rrld(&["corrupt", "--data", s(&data), "--out", s(&out), "--kinds", "gaussian", "--sigma", "0"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let src = tree(&data);
    let dst = tree(&out);
    assert_eq!(pngs(&dst), 2 * pngs(&src));

    let load = |root: &Path| rrld_core::data::load_image_folder_any(root, 8, 3).unwrap();
    let (clean, noisy) = (load(&data), load(&out));
    assert_eq!(noisy.domains().len(), clean.domains().len() + 1);
    let mut a: Vec<_> = clean.samples().iter().map(|x| (x.label, x.image.clone())).collect();
    let noisy_domain = noisy.domains().iter().position(|d| d == "noisy").unwrap();
    let mut b: Vec<_> =
        noisy.samples().iter().filter(|x| x.domain == noisy_domain).map(|x| (x.label, x.image.clone())).collect();
    let key = |x: &(usize, Vec<f64>)| (x.0, x.1.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    a.sort_by_key(key);
    b.sort_by_key(key);
    assert_eq!(a, b);
}

#[test]
fn corrupt_rejects_unknown_kind_and_missing_source() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_set(dir.path());
    let o = rrld(&["corrupt", "--data", s(&data), "--out", s(&dir.path().join("x")), "--kinds", "blur"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let o = rrld(&["corrupt", "--data", s(&dir.path().join("nope")), "--out", s(&dir.path().join("y"))]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn invalid_variant_lists_the_choices() {
    let o = rrld(&["train", "--variant", "SDViT", "--data", "."]);
    assert_eq!(o.status.code(), Some(2));
    let msg = stderr(&o);
    for v in ["ERM", "ERM_AA", "IBSD_only", "AGSD_only", "RRLD"] {
        assert!(msg.contains(v), "{msg}");
    }
}

fn tiny_train(data: &Path, out: &Path, variant: &str) -> Output {
    rrld(&[
        "train", "--variant", variant, "--data", s(data), "--out", s(out), "--seeds", "1,2", "--steps", "4",
        "--batch-size", "8", "--lr", "1e-3", "--patch-size", "4", "--embed-dim", "8", "--depth", "2", "--heads", "2",
        "--mlp-ratio", "2",
    ])
}

#[test]
fn train_then_report_two_variants() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_set(dir.path());
    let (erm, rrld_dir) = (dir.path().join("erm"), dir.path().join("rrld"));
    for (d, v) in [(&erm, "ERM"), (&rrld_dir, "RRLD")] {
        let o = tiny_train(&data, d, v);
        assert!(o.status.success(), "{}", stderr(&o));
        assert!(d.join("manifest.json").exists() && d.join("result.json").exists());
        assert_eq!(fs::read_dir(d.join("metrics")).unwrap().count(), 6);
        assert_eq!(fs::read_dir(d.join("checkpoints")).unwrap().count(), 6);
    }
    let json = dir.path().join("table.json");
    let o = rrld(&["report", s(&erm), s(&rrld_dir), "--json", s(&json)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("ERM") && text.contains("RRLD") && text.contains("Average"), "{text}");
    let table: serde_json::Value = serde_json::from_slice(&fs::read(&json).unwrap()).unwrap();
    assert_eq!(table["schema_version"], 1);
    assert_eq!(table["rows"].as_array().unwrap().len(), 2);

    // A checkpoint scores every domain.
    let ckpt = fs::read_dir(rrld_dir.join("checkpoints")).unwrap().next().unwrap().unwrap().path();
    let o = rrld(&["eval", "--checkpoint", s(&ckpt), "--data", s(&data)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).lines().filter(|l| l.starts_with("domain")).count(), 3, "{}", stdout(&o));
}

#[test]
fn output_root_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_set(dir.path());
    let root = dir.path().join("root");
    let o = Command::new(env!("CARGO_BIN_EXE_rrld"))
        .args(["train", "--variant", "ERM", "--data", s(&data), "--seeds", "1", "--steps", "2", "--batch-size", "8"])
        .args(["--patch-size", "4", "--embed-dim", "8", "--depth", "2", "--heads", "2", "--mlp-ratio", "2"])
        .env("RRLD_OUTPUT_ROOT", &root)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(root.join("ERM").join("result.json").exists());
}

fn record(dir: &Path, variant: Variant, accs: &[(&str, &[f64])]) {
    let targets = accs
        .iter()
        .map(|(name, a)| {
            let runs = a
                .iter()
                .enumerate()
                .map(|(k, &test_acc)| SeedResult {
                    seed: k as u64,
                    best_step: 0,
                    best_val_acc: 0.5,
                    test_acc,
                    early_target_reads: 0,
                    metrics: Vec::new(),
                })
                .collect::<Vec<_>>();
            let mean = a.iter().sum::<f64>() / a.len() as f64;
            let std = if a.len() < 2 {
                0.0
            } else {
                (a.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (a.len() - 1) as f64).sqrt()
            };
            TargetResult { target: name.to_string(), runs, mean, std }
        })
        .collect::<Vec<TargetResult>>();
    let average = targets.iter().map(|t| t.mean).sum::<f64>() / targets.len() as f64;
    fs::create_dir_all(dir).unwrap();
    let rec = RunRecord { schema_version: SCHEMA_VERSION, result: RunResult { variant, targets, average } };
    write_json(&dir.join("result.json"), &rec).unwrap();
}

#[test]
fn report_formats_mean_and_sample_std() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    record(&a, Variant::Rrld, &[("photo", &[0.80, 0.82, 0.84])]);
    let o = rrld(&["report", s(&a)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("0.820 ± 0.020"), "{}", stdout(&o));

    let b = dir.path().join("b");
    record(&b, Variant::Erm, &[("photo", &[0.75])]);
    let o = rrld(&["report", s(&b)]);
    assert!(stdout(&o).contains("0.750 ± 0.000"), "{}", stdout(&o));
}

#[test]
fn report_rejects_mismatched_domains() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    record(&a, Variant::Erm, &[("photo", &[0.8]), ("sketch", &[0.6])]);
    record(&b, Variant::Rrld, &[("photo", &[0.8]), ("cartoon", &[0.6])]);
    let o = rrld(&["report", s(&a), s(&b)]);
    assert!(!o.status.success());
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn selftest_passes_and_detects_broken_stop_gradient() {
    let o = rrld(&["selftest"]);
    assert!(o.status.success(), "{}{}", stdout(&o), stderr(&o));
    assert!(!stdout(&o).contains("[FAIL]"));

    let o = rrld(&["selftest", "--break", "stopgrad"]);
    assert_eq!(o.status.code(), Some(1));
    let out = stdout(&o);
    assert!(out.lines().any(|l| l.contains("[FAIL]") && l.contains("stop")), "{out}");
}
