use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn tiny_config(run_id: &str, extra: &str) -> String {
    format!(
        r#"schema_version = 1
run_id = "{run_id}"

[dataset]
source = "toy"
num_classes = 3
max_count = 40
imbalance_ratio = 4.0
seed = 1

[dataset.toy]
shape = {{ channels = 3, height = 8, width = 8 }}
noise = 0.3
test_per_class = 10
test_size = 30
aux_families = ["smooth_noise", "blobs"]
test_families = ["white_noise", "dots"]

[dataset.aux]
size = 60

[model.backbone]
kind = "small_cnn"
channels = [4, 8]
strides = [1, 2]

[optim]
epochs = 2
learning_rate = 0.005

[train]
batch_id = 16
batch_ood = 8
probe_size = 16
{extra}
"#
    )
}

fn rna(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rna"))
        .args(args)
        .env("RNA_OUTPUT_ROOT", root)
        .env_remove("RNA_DEVICE")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn full_run_writes_the_artifacts_and_evaluation_is_repeatable() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "a.toml", &tiny_config("a", ""));
    let c = cfg.to_str().unwrap();
    let out = rna(tmp.path(), &["run", "--config", c]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(String::from_utf8_lossy(&out.stdout).contains("RN"));
    let run = tmp.path().join("a");
    for f in [
        "config.toml",
        "digest",
        "status.json",
        "data/manifest.json",
        "checkpoints/epoch-0002.json",
        "records/epochs.jsonl",
        "records/steps.jsonl",
        "eval/scores.csv",
        "eval/predictions.csv",
        "eval/report.json",
        "eval/summary.tsv",
        "eval/summary.txt",
        "eval/grid_auc.tsv",
        "eval/norms.json",
    ] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let epochs = fs::read_to_string(run.join("records/epochs.jsonl")).unwrap();
    assert_eq!(epochs.lines().count(), 2);
    let status = fs::read_to_string(run.join("status.json")).unwrap();
    assert!(status.contains("\"evaluated\""));

    let first = fs::read(run.join("eval/scores.csv")).unwrap();
    let first_report = fs::read(run.join("eval/report.json")).unwrap();
    let again = rna(tmp.path(), &["evaluate", "--config", c]);
    assert!(again.status.success(), "{}", stderr(&again));
    assert_eq!(fs::read(run.join("eval/scores.csv")).unwrap(), first);
    assert_eq!(fs::read(run.join("eval/report.json")).unwrap(), first_report);

    // 3 ID test splits per class * 3 classes + 2 OOD sets of 30, for 3 scorers
    let rows = String::from_utf8(first).unwrap().lines().count() - 1;
    assert_eq!(rows, 3 * (30 + 60));
}

#[test]
fn finished_or_different_runs_need_force() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "b.toml", &tiny_config("b", ""));
    let c = cfg.to_str().unwrap();
    assert!(rna(tmp.path(), &["train", "--config", c]).status.success());
    let again = rna(tmp.path(), &["train", "--config", c]);
    assert!(!again.status.success());
    assert!(stderr(&again).contains("--force"), "{}", stderr(&again));

    let changed = write_config(tmp.path(), "b.toml", &tiny_config("b", "").replace("seed = 1", "seed = 2"));
    let c2 = changed.to_str().unwrap();
    let refused = rna(tmp.path(), &["train", "--config", c2]);
    assert!(!refused.status.success());
    assert!(stderr(&refused).contains("digest"), "{}", stderr(&refused));
    assert!(rna(tmp.path(), &["train", "--config", c2, "--force"]).status.success());
    let digest = fs::read_to_string(tmp.path().join("b/digest")).unwrap();
    let eval = rna(tmp.path(), &["evaluate", "--config", c2]);
    assert!(eval.status.success(), "{}", stderr(&eval));
    assert_eq!(digest, fs::read_to_string(tmp.path().join("b/digest")).unwrap());
}

#[test]
fn interrupted_training_resumes_to_the_same_weights() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "r.toml", &tiny_config("r", ""));
    let c = cfg.to_str().unwrap();
    assert!(rna(tmp.path(), &["train", "--config", c]).status.success());
    let run = tmp.path().join("r");
    let full = fs::read(run.join("checkpoints/epoch-0002.json")).unwrap();

    // simulate a crash after the first epoch
    fs::remove_file(run.join("checkpoints/epoch-0002.json")).unwrap();
    let status = fs::read_to_string(run.join("status.json")).unwrap().replace("\"trained\"", "\"training\"");
    fs::write(run.join("status.json"), status).unwrap();
    let resumed = rna(tmp.path(), &["train", "--config", c]);
    assert!(resumed.status.success(), "{}", stderr(&resumed));
    assert_eq!(fs::read(run.join("checkpoints/epoch-0002.json")).unwrap(), full);
}

#[test]
fn config_errors_name_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tiny_config("c", "").replace("[dataset.aux]\n", "[dataset.aux]\nkind = \"none\"\n");
    let cfg = write_config(tmp.path(), "c.toml", &bad);
    let out = rna(tmp.path(), &["run", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("train.batch_ood"), "{}", stderr(&out));
    assert!(!tmp.path().join("c").exists());
    let bad = bad.replace("[optim]", "[loss]\nood_term = \"energy_oe\"\n\n[optim]");
    let cfg = write_config(tmp.path(), "c.toml", &bad);
    let out = rna(tmp.path(), &["run", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("loss.ood_term") && stderr(&out).contains("auxiliary"), "{}", stderr(&out));

    let bad = tiny_config("c", "").replace("[train]\n", "[train]\nbatch_sise = 3\n");
    let cfg = write_config(tmp.path(), "c.toml", &bad);
    let out = rna(tmp.path(), &["run", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("train.batch_sise: unknown field"), "{}", stderr(&out));
}

#[test]
fn only_the_cpu_device_is_accepted() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "d.toml", &tiny_config("d", ""));
    let out = Command::new(env!("CARGO_BIN_EXE_rna"))
        .args(["prepare-data", "--config", cfg.to_str().unwrap()])
        .env("RNA_OUTPUT_ROOT", tmp.path())
        .env("RNA_DEVICE", "cuda")
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(stderr(&out).contains("cuda"), "{}", stderr(&out));
    assert!(rna(tmp.path(), &["prepare-data", "--config", cfg.to_str().unwrap()]).status.success());
    assert!(tmp.path().join("d/data/manifest.json").exists());
}

#[test]
fn sweep_keeps_going_past_a_failed_value() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "s.toml", &tiny_config("s", "").replace("epochs = 2", "epochs = 1"));
    let out = rna(
        tmp.path(),
        &["sweep", "--config", cfg.to_str().unwrap(), "--axis", "lambda", "--values", "0.1,-1,0.5"],
    );
    assert!(!out.status.success());
    let table = fs::read_to_string(tmp.path().join("s-sweep-lambda/sweep.tsv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[1].contains("\tok\t"));
    assert!(lines[2].contains("\tfailed\t") && lines[2].contains("lambda"));
    assert!(lines[3].contains("\tok\t"));
    assert!(tmp.path().join("s-lambda-0.5/eval/report.json").exists());
    assert!(tmp.path().join("s-sweep-lambda/sweep.svg").exists());
}

#[test]
fn report_is_built_from_artifacts_alone() {
    let tmp = tempfile::tempdir().unwrap();
    let base = tiny_config("base", "").replace("epochs = 2", "epochs = 1");
    let a = write_config(tmp.path(), "base.toml", &base);
    let b = write_config(
        tmp.path(),
        "oe.toml",
        &base.replace("run_id = \"base\"", "run_id = \"oe\"").replace("[optim]", "[loss]\nood_term = \"oe\"\n\n[optim]"),
    );
    for c in [&a, &b] {
        let out = rna(tmp.path(), &["run", "--config", c.to_str().unwrap()]);
        assert!(out.status.success(), "{}", stderr(&out));
    }
    let runs = [tmp.path().join("base"), tmp.path().join("oe")];
    let out_dir = tmp.path().join("cmp");
    let args = |out: &Path| -> Vec<String> {
        let mut v = vec!["report".to_string()];
        v.extend(runs.iter().map(|p| p.to_str().unwrap().to_string()));
        v.extend(["--out".to_string(), out.to_str().unwrap().to_string()]);
        v
    };
    let o = rna(tmp.path(), &args(&out_dir).iter().map(String::as_str).collect::<Vec<_>>());
    assert!(o.status.success(), "{}", stderr(&o));
    let cmp = fs::read_to_string(out_dir.join("comparison.tsv")).unwrap();
    assert_eq!(cmp.lines().count(), 1 + 2 * 3);
    assert!(cmp.contains("LA+RNA") && cmp.contains("LA+OE"));
    for f in ["dynamics.csv", "dynamics_norms.svg", "grad_log_ratio.csv", "grad_log_ratio.svg", "hist_base_white_noise.svg"] {
        assert!(out_dir.join(f).exists(), "missing {f}");
    }
    // same inputs, same bytes
    let other = tmp.path().join("cmp2");
    assert!(rna(tmp.path(), &args(&other).iter().map(String::as_str).collect::<Vec<_>>()).status.success());
    assert_eq!(fs::read(out_dir.join("comparison.tsv")).unwrap(), fs::read(other.join("comparison.tsv")).unwrap());
    assert_eq!(fs::read(out_dir.join("dynamics.csv")).unwrap(), fs::read(other.join("dynamics.csv")).unwrap());

    let empty = rna(tmp.path(), &["report", "--out", tmp.path().join("x").to_str().unwrap()]);
    assert!(!empty.status.success());
}

fn write_pngs(dir: &Path, n: usize, shade: impl Fn(usize, u32, u32) -> [u8; 3]) {
    fs::create_dir_all(dir).unwrap();
    for i in 0..n {
        let img = image::RgbImage::from_fn(10, 10, |x, y| image::Rgb(shade(i, x, y)));
        img.save(dir.join(format!("{i:03}.png"))).unwrap();
    }
}

#[test]
fn directory_source_subsamples_and_records_indices() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("images");
    for (c, name) in ["a", "b", "c"].iter().enumerate() {
        let stripe = move |i: usize, x: u32, y: u32| {
            let on = if c == 0 { x % 2 == 0 } else if c == 1 { y % 2 == 0 } else { (x + y) % 2 == 0 };
            let v = if on { 200 } else { 40 } + (i % 7) as u8;
            [v, v / 2, 255 - v]
        };
        write_pngs(&root.join("train").join(name), 30, stripe);
        write_pngs(&root.join("test").join(name), 6, stripe);
    }
    write_pngs(&root.join("aux"), 40, |i, x, _| [(x * 20) as u8, (i * 5) as u8, 90]);
    write_pngs(&root.join("ood/flat"), 12, |i, _, _| [(i * 10) as u8; 3]);
    let text = tiny_config("dir", "")
        .replace("source = \"toy\"\nnum_classes = 3\n", "source = \"directory\"\n")
        .replace(
            "[dataset.toy]\nshape = { channels = 3, height = 8, width = 8 }\nnoise = 0.3\ntest_per_class = 10\ntest_size = 30\naux_families = [\"smooth_noise\", \"blobs\"]\ntest_families = [\"white_noise\", \"dots\"]\n",
            &format!("[dataset.directory]\nroot = {:?}\nshape = {{ channels = 3, height = 8, width = 8 }}\n", root),
        )
        .replace("max_count = 40", "max_count = 20")
        .replace("size = 60", "size = 25");
    let cfg = write_config(tmp.path(), "dir.toml", &text);
    let out = rna(tmp.path(), &["run", "--config", cfg.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    let data = tmp.path().join("dir/data");
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(data.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["class_names"], serde_json::json!(["a", "b", "c"]));
    assert_eq!(manifest["train_counts"], serde_json::json!([20, 10, 5]));
    assert_eq!(manifest["aux_size"], 25);
    let train_idx = fs::read_to_string(data.join("train_indices.txt")).unwrap();
    assert_eq!(train_idx.lines().count(), 35);
    assert_eq!(fs::read_to_string(data.join("aux_indices.txt")).unwrap().lines().count(), 25);

    // a changed image on disk no longer matches the recorded manifest
    write_pngs(&root.join("ood/flat"), 1, |_, _, _| [255, 0, 0]);
    let out = rna(tmp.path(), &["evaluate", "--config", cfg.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("dataset content changed"), "{}", stderr(&out));
}
