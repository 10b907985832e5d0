use smoothgeo::attacks::AttackKind;
use smoothgeo::attribution::{attribute, AttributionConfig, Method};
use smoothgeo::harness::experiments::{comparison_report, robustness_report, transfer_report};
use smoothgeo::harness::*;
use smoothgeo::harness::report;
use smoothgeo::nn::{Activation, Network, TrainMode};
use smoothgeo::par;
use smoothgeo::training::{train, TrainConfig};

fn moons_spec() -> ExperimentSpec {
    ExperimentSpec {
        dataset: DatasetSpec::TwoMoons { n: 120, noise: 0.1, seed: 3 },
        attacks: AttackKind::ALL.to_vec(),
        epsilons: vec![0.05, 0.1],
        k: 1,
        images: 6,
        attack_steps: 5,
        seed: 9,
        ..Default::default()
    }
}

fn moons_net(mode: TrainMode) -> (Network, smoothgeo::training::TrainHistory) {
    let data = moons_spec().dataset.load().unwrap().to_unit();
    let cfg = TrainConfig { mode, epochs: 15, batch_size: 16, learning_rate: 0.1, hidden: vec![12], eigen_probe: 16, ..Default::default() };
    train(&data, &cfg).unwrap()
}

#[test]
fn robustness_report_covers_the_grid_and_is_reproducible() {
    let spec = moons_spec();
    let (net, _) = moons_net(TrainMode::Natural);
    let data = spec.dataset.load().unwrap();
    let report = robustness_report(&net, "moons", &data, &spec).unwrap();
    // (2 budgets + AUC) per method and attack
    assert_eq!(report.rows.len(), 3 * Method::ALL.len() * AttackKind::ALL.len());
    for m in Method::ALL {
        for a in AttackKind::ALL {
            assert!(report.auc("moons", m.tag(), a.name()).is_some());
            for row in report.rows_for("moons", m.tag(), a.name()) {
                assert!(row.max_linf <= 0.1 + 1e-9);
                assert_eq!(row.inputs + row.degenerate, spec.images);
            }
        }
    }
    let csv = report.to_csv();
    assert!(csv.starts_with(report::CSV_HEADER));
    assert_eq!(csv, robustness_report(&net, "moons", &data, &spec).unwrap().to_csv());
    assert_eq!(csv, par::sequential(|| robustness_report(&net, "moons", &data, &spec).unwrap().to_csv()));
    let json: serde_json::Value = serde_json::from_str(&report.to_json()).unwrap();
    assert_eq!(json["rows"].as_array().unwrap().len(), report.rows.len());
}

#[test]
fn transfer_report_measures_every_method_against_saliency_attacks() {
    let spec = ExperimentSpec { attacks: vec![AttackKind::TopK], ..moons_spec() };
    let (net, _) = moons_net(TrainMode::Natural);
    let report = transfer_report(&net, "moons", &spec.dataset.load().unwrap(), &spec).unwrap();
    assert_eq!(report.rows.len(), 3 * Method::ALL.len());
    assert!(report.rows.iter().all(|r| r.attacked == "SM"));
}

#[test]
fn comparison_uses_shared_inputs_and_histories() {
    let spec = ExperimentSpec { attacks: vec![AttackKind::TopK], methods: vec![Method::Saliency], ..moons_spec() };
    let (nat, nat_hist) = moons_net(TrainMode::Natural);
    let (ssr, _) = moons_net(TrainMode::Ssr);
    let models = vec![("natural".to_string(), nat, Some(nat_hist.clone())), ("ssr".to_string(), ssr, None)];
    let report = comparison_report(&models, &spec.dataset.load().unwrap(), &spec).unwrap();
    assert_eq!(report.models.len(), 2);
    assert_eq!(report.models[0].mode.as_deref(), Some("natural"));
    assert_eq!(report.models[0].train_accuracy, nat_hist.last().map(|r| r.accuracy));
    assert_eq!(report.models[1].train_accuracy, None);
    let inputs: Vec<usize> = report.metrics.rows.iter().map(|r| r.inputs + r.degenerate).collect();
    assert!(inputs.iter().all(|&n| n == spec.images));
    let csv = report.to_csv();
    assert_eq!(csv.lines().filter(|l| l.starts_with("natural") || l.starts_with("ssr")).count(), 2);
}

#[test]
fn spec_files_rebase_relative_paths() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("exp.toml");
    std::fs::write(
        &path,
        r#"
experiment = "transfer"
checkpoints = ["models/a.ckpt"]
epsilons = [1.0, 2.0]
attacks = ["topk", "mass_center"]
methods = ["SM", "UG"]
seed = 4

[dataset]
kind = "idx"
images = "d/img.idx"
labels = "/abs/lbl.idx"
"#,
    )
    .unwrap();
    let spec = ExperimentSpec::from_toml_file(&path).unwrap();
    assert_eq!(spec.experiment, ExperimentKind::Transfer);
    assert_eq!(spec.checkpoints, vec![dir.path().join("models/a.ckpt")]);
    assert_eq!(spec.out_dir, dir.path().join("out"));
    assert_eq!(spec.attacks, vec![AttackKind::TopK, AttackKind::MassCenter]);
    assert_eq!(spec.methods, vec![Method::Saliency, Method::UniformGradient]);
    match &spec.dataset {
        DatasetSpec::Idx { images, labels } => {
            assert_eq!(images, &dir.path().join("d/img.idx"));
            assert_eq!(labels, std::path::Path::new("/abs/lbl.idx"));
        }
        other => panic!("unexpected dataset {other:?}"),
    }
    assert!(matches!(spec.load_networks(), Err(HarnessError::Network(_))));

    std::fs::write(&path, "epsilons = [4.0, 2.0]\n").unwrap();
    let bad = ExperimentSpec::from_toml_file(&path).unwrap();
    assert!(bad.validate().is_err());
}

#[test]
fn figures_for_grid_and_planar_models() {
    let dir = tempfile::tempdir().unwrap();
    let net = Network::random(&[16, 8, 3], Activation::Relu, 1).unwrap();
    let x: Vec<f64> = (0..16).map(|i| i as f64 / 16.0).collect();
    let map = attribute(&net, &x, Method::Saliency, &AttributionConfig::default()).unwrap();
    let pgm = dir.path().join("map.pgm");
    emit_heatmap(&map, smoothgeo::metrics::GridGeometry::Grid { height: 4, width: 4 }, &pgm).unwrap();
    let bytes = std::fs::read(&pgm).unwrap();
    assert!(bytes.starts_with(b"P5\n4 4\n255\n"));
    assert_eq!(bytes.len(), b"P5\n4 4\n255\n".len() + 16);

    let (planar, _) = moons_net(TrainMode::Natural);
    let svg = dir.path().join("field.svg");
    let region = Region { x: (0.0, 1.0), y: (0.0, 1.0) };
    let summary = emit_contour_field(&planar, region, &[Method::Saliency, Method::SmoothGrad], &AttributionConfig::default(), &svg).unwrap();
    assert!(!summary.levels.is_empty());
    assert!(summary.arrows.iter().all(|a| (a.direction[0].hypot(a.direction[1]) - 1.0).abs() < 1e-9));
    let text = std::fs::read_to_string(&svg).unwrap();
    assert!(text.starts_with("<svg") && text.trim_end().ends_with("</svg>"));
    assert!(emit_contour_field(&net, region, &[Method::Saliency], &AttributionConfig::default(), &svg).is_err());
}

#[test]
fn shipped_configs_parse() {
    let dir = std::path::Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs"));
    for name in ["robustness", "regularization", "transfer", "theory"] {
        let spec = ExperimentSpec::from_toml_file(dir.join(format!("{name}.toml"))).unwrap();
        spec.validate().unwrap();
    }
    let reg = ExperimentSpec::from_toml_file(dir.join("regularization.toml")).unwrap();
    assert_eq!(reg.attribution.qoi, smoothgeo::nn::QuantityOfInterest::post_softmax());
    assert_eq!(reg.checkpoints.len(), 2);
    for (name, mode) in [("train-natural", TrainMode::Natural), ("train-ssr", TrainMode::Ssr)] {
        let spec = TrainSpec::from_toml_file(dir.join(format!("{name}.toml"))).unwrap();
        assert_eq!(spec.train.mode, mode);
        spec.train.validate().unwrap();
        assert!(spec.dataset.load().is_ok());
    }
}
