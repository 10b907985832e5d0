use std::path::Path;
use std::process::{Command, Output};

fn smoothgeo(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_smoothgeo"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn data(name: &str) -> String {
    format!("{}/../../data/{name}", env!("CARGO_MANIFEST_DIR"))
}

fn write_specs(dir: &Path) {
    let dataset = format!(
        "[dataset]\nkind = \"idx\"\nimages = \"{}\"\nlabels = \"{}\"\n",
        data("digits8-test-images.idx"),
        data("digits8-test-labels.idx")
    );
    std::fs::write(
        dir.join("train.toml"),
        format!(
            "checkpoint = \"net.ckpt\"\n\n[train]\nepochs = 3\nhidden = [16]\n\n{}",
            dataset.replace("test", "train")
        ),
    )
    .unwrap();
    std::fs::write(
        dir.join("exp.toml"),
        format!(
            "checkpoints = [\"models/net.ckpt\"]\nepsilons = [4.0, 8.0]\nimages = 4\nattack_steps = 3\nmethods = [\"SM\", \"SG\"]\nattacks = [\"topk\", \"manipulate\"]\n\n[attribution]\nsg_samples = 4\n\n{dataset}"
        ),
    )
    .unwrap();
}

#[test]
fn train_then_evaluate_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    write_specs(root);
    let out = smoothgeo(&["train", "--config", "train.toml", "--out", "models", "--seed", "5"], root);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(root.join("models/net.ckpt").exists());
    let history = std::fs::read_to_string(root.join("models/net.history.csv")).unwrap();
    assert_eq!(history.lines().count(), 4);

    let run = |out_dir: &str| {
        let out = smoothgeo(&["evaluate", "--config", "exp.toml", "--out", out_dir], root);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        std::fs::read(root.join(out_dir).join("robustness.csv")).unwrap()
    };
    let first = run("a");
    assert_eq!(first, run("b"));
    let text = String::from_utf8(first).unwrap();
    // 2 methods x 2 attacks x (2 budgets + AUC)
    assert_eq!(text.lines().count(), 1 + 12);

    let out = smoothgeo(&["evaluate", "--config", "exp.toml", "--out", "j", "--format", "json"], root);
    assert!(out.status.success());
    let json: serde_json::Value = serde_json::from_slice(&std::fs::read(root.join("j/robustness.json")).unwrap()).unwrap();
    assert_eq!(json["rows"].as_array().unwrap().len(), 12);

    let out = smoothgeo(&["attack", "--config", "exp.toml", "--out", "atk", "--dump-perturbations"], root);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let attacks = std::fs::read_to_string(root.join("atk/attacks.csv")).unwrap();
    assert_eq!(attacks.lines().count(), 1 + 2 * 2 * 2 * 4);
    for line in attacks.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        assert_eq!(cols[4], "true");
        assert!(cols[6].parse::<f64>().unwrap() <= cols[3].parse::<f64>().unwrap() + 1e-9);
    }
    assert_eq!(std::fs::read_dir(root.join("atk/perturbations")).unwrap().count(), 32);

    let out = smoothgeo(&["transfer", "--config", "exp.toml", "--out", "tr"], root);
    assert!(out.status.success());
    assert!(std::fs::read_to_string(root.join("tr/transfer.csv")).unwrap().lines().skip(1).all(|l| l.contains(",SM,")));

    let out = smoothgeo(&["plot", "--config", "exp.toml", "--out", "fig"], root);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(std::fs::read_dir(root.join("fig")).unwrap().count(), 8);
}

#[test]
fn bad_input_exits_with_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "epsilons = [8.0, 4.0]\n").unwrap();
    let out = smoothgeo(&["evaluate", "--config", "bad.toml"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("increasing"));
    let out = smoothgeo(&["evaluate", "--config", "missing.toml"], dir.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn theory_check_reports_each_check() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("theory.toml"),
        "[theory]\ngradient_nets = 2\nig_nets = 2\nig_steps = 64\nhessian_points = 2\neigen_factorizations = 2\n\
         sg_bound_trials = 2\ngradient_difference_nets = 1\ngradient_difference_pairs = 20\nconvolution_nets = 1\nconvolution_samples = 500\n\
         noise_threshold_trials = 50\ntriangle_nets = 1\ntriangle_samples = 20\n",
    )
    .unwrap();
    let out = smoothgeo(&["theory-check", "--config", "theory.toml", "--out", "t"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(stdout.lines().count(), 9);
    let summary: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("t/theory.json")).unwrap()).unwrap();
    assert_eq!(summary["pass"], true);
}
