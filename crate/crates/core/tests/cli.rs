use std::path::Path;
use std::process::{Command, Output};

use revdeblur::cli::EVAL_HEADER;
use revdeblur::data::{list_pngs, load_png};
use revdeblur::exit::{ExitPolicy, IncrementTable};
use revdeblur::infer::exit_map_from_tsv;
use revdeblur::metrics::{psnr, ssim};

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_revdeblur")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = bin(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen(dir: &Path, seed: &str) {
    ok(&[
        "gen-data", "--out", s(dir), "--count", "2", "--height", "32", "--width", "48", "--patch", "16", "--stride", "16",
        "--seed", seed,
    ]);
}

/// A two-column model on a 16-multiple corpus, trained for a handful of steps.
fn trained_model(root: &Path) -> std::path::PathBuf {
    let train = root.join("train");
    gen(&train, "1");
    let mcfg = root.join("model.cfg");
    std::fs::write(&mcfg, "channels = 4\nlevels = 3\nenc_blocks = 1,1,1\ncolumns = 2\n").unwrap();
    let tcfg = root.join("train.cfg");
    std::fs::write(&tcfg, "patch = 16\nbatch = 2\niters = 4\npretrain_iters = 2\neval_every = 2\nclassifier_iters = 2\n").unwrap();
    let model = root.join("model");
    ok(&[
        "train-decoder", "--train", s(&train), "--val", s(&train), "--model-config", s(&mcfg), "--config", s(&tcfg),
        "--out", s(&model),
    ]);
    model
}

#[test]
fn gen_data_writes_a_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("c");
    gen(&out, "7");
    assert_eq!(list_pngs(&out.join("blur")).unwrap().len(), 2);
    assert_eq!(list_pngs(&out.join("sharp")).unwrap().len(), 2);
    let manifest = std::fs::read_to_string(out.join("manifest.tsv")).unwrap();
    assert_eq!(manifest.lines().count(), 1 + 2 * 2 * 3);
    let again = dir.path().join("d");
    gen(&again, "7");
    assert_eq!(std::fs::read(again.join("manifest.tsv")).unwrap(), manifest.as_bytes());
}

#[test]
fn make_policy_reproduces_the_golden_vector() {
    let dir = tempfile::tempdir().unwrap();
    let rows = [
        [11.134, 0.642, 0.351, 0.178],
        [10.959, 0.406, 0.211, 0.100],
        [9.184, 0.214, 0.105, 0.047],
        [6.215, 0.121, 0.050, 0.021],
        [3.468, 0.079, 0.024, 0.011],
        [2.380, 0.047, 0.016, 0.009],
    ];
    let table = IncrementTable::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>());
    let tp = dir.path().join("table.tsv");
    table.write(&tp).unwrap();
    let pp = dir.path().join("policy.tsv");
    ok(&["make-policy", "--table", s(&tp), "--tau", "0.05", "--out", s(&pp)]);
    assert_eq!(ExitPolicy::read(&pp).unwrap().exits, vec![4, 4, 3, 3, 2, 1]);
    let printed = ok(&["make-policy", "--table", s(&tp), "--tau", "0.05", "--inclusive"]);
    assert_eq!(ExitPolicy::from_tsv(&printed, "stdout").unwrap().exits, vec![4, 4, 3, 2, 2, 1]);
}

#[test]
fn full_pipeline_through_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let model = trained_model(root);
    for f in ["model.cfg", "model.ckpt", "train_log.tsv", "train.cfg"] {
        assert!(model.join(f).exists(), "missing {f}");
    }
    let log = std::fs::read_to_string(model.join("train_log.tsv")).unwrap();
    assert_eq!(log.lines().count(), 3);

    let train = root.join("train");
    ok(&["train-classifier", "--model", s(&model), "--train", s(&train), "--iters", "2"]);
    assert!(model.join("classifier_log.tsv").exists());

    let table = root.join("table.tsv");
    ok(&["build-table", "--model", s(&model), "--data", s(&train), "--out", s(&table)]);
    let t = IncrementTable::read(&table).unwrap();
    assert_eq!(t.gains.len(), 6);
    assert_eq!(t.counts.iter().sum::<usize>(), 12);

    let policy = root.join("policy.tsv");
    ok(&["make-policy", "--table", s(&table), "--tau", "0.05", "--out", s(&policy)]);

    let img = root.join("train/blur/0000.png");
    let restored = root.join("restored.png");
    let map = root.join("exits.tsv");
    ok(&[
        "infer", "--model", s(&model), "--input", s(&img), "--output", s(&restored), "--exit-map", s(&map),
        "--fixed-j", "1", "--window", "16", "--stride", "16",
    ]);
    assert_eq!(load_png(&restored).unwrap().shape(), load_png(&img).unwrap().shape());
    let exits = exit_map_from_tsv(&std::fs::read_to_string(&map).unwrap(), "map").unwrap();
    assert_eq!(exits.len(), 6);
    assert!(exits.iter().all(|e| e.exit == 1));

    let out_dir = root.join("out");
    ok(&["infer", "--model", s(&model), "--input", s(&root.join("train/blur")), "--output", s(&out_dir), "--policy", s(&policy)]);
    assert!(out_dir.join("0001.png").exists());
    assert!(out_dir.join("0001.exits.tsv").exists());

    let cka = ok(&["analyze-cka", "--model", s(&model), "--data", s(&train), "--max-patches", "8"]);
    let lines: Vec<&str> = cka.lines().collect();
    assert_eq!(lines.len(), 3);
    let diag: f64 = lines[1].split('\t').nth(1).unwrap().parse().unwrap();
    assert!((diag - 1.0).abs() < 1e-9);
}

#[test]
fn eval_scores_match_the_metric_functions() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let model = trained_model(root);
    let data = root.join("train");
    let unrestored = ok(&["eval", "--data", s(&data)]);
    let mut lines = unrestored.lines();
    assert_eq!(lines.next(), Some(EVAL_HEADER));
    for (line, name) in lines.by_ref().take(2).zip(["0000.png", "0001.png"]) {
        let f: Vec<&str> = line.split('\t').collect();
        assert_eq!(f[0], format!("blur/{name}"));
        let b = load_png(&data.join("blur").join(name)).unwrap();
        let sh = load_png(&data.join("sharp").join(name)).unwrap();
        assert!((f[1].parse::<f64>().unwrap() - psnr(&b, &sh).unwrap()).abs() < 1e-9);
        assert!((f[2].parse::<f64>().unwrap() - ssim(&b, &sh).unwrap()).abs() < 1e-9);
    }
    assert!(lines.next().unwrap().starts_with("mean\t"));

    let out = root.join("eval.tsv");
    ok(&["eval", "--data", s(&data), "--model", s(&model), "--fixed-j", "2", "--window", "16", "--stride", "16", "--out", s(&out)]);
    let text = std::fs::read_to_string(&out).unwrap();
    let row: Vec<&str> = text.lines().nth(1).unwrap().split('\t').collect();
    assert_eq!(row[3].parse::<f64>().unwrap(), 2.0);
}

#[test]
fn bench_memory_reports_a_slope_ratio() {
    let text = ok(&["bench-memory", "--columns", "1,2", "--channels", "4", "--levels", "3", "--patch", "16"]);
    assert!(text.starts_with("columns\t"));
    let ratio: f64 = text.lines().last().unwrap().strip_prefix("# slope_ratio=").unwrap().parse().unwrap();
    assert!(ratio > 1.0);
}

#[test]
fn bad_invocations_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin(&["gen-data", "--bogus"]);
    assert!(!out.status.success());
    let out = bin(&["make-policy", "--table", s(&dir.path().join("missing.tsv"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
    let out = bin(&["infer", "--model", "m", "--input", "a", "--output", "b", "--fixed-j", "1", "--policy", "p"]);
    assert!(!out.status.success());
    let out = bin(&["eval", "--data", s(&dir.path().join("nothing"))]);
    assert!(!out.status.success());
}

#[test]
fn fixed_j_outside_the_model_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let model = trained_model(dir.path());
    let img = dir.path().join("train/blur/0000.png");
    let out = bin(&["infer", "--model", s(&model), "--input", s(&img), "--output", s(&dir.path().join("o.png")), "--fixed-j", "3"]);
    assert!(!out.status.success());
    let small = dir.path().join("small.png");
    revdeblur::data::save_png(&revdeblur::Tensor::<f32>::zeros([1, 3, 2, 40]), &small).unwrap();
    let out = bin(&["infer", "--model", s(&model), "--input", s(&small), "--output", s(&dir.path().join("o.png"))]);
    assert!(!out.status.success());
}
