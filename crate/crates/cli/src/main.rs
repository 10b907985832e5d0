use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use smoothgeo::attacks::{pgd_attack, AttackConfig, AttackKind};
use smoothgeo::attribution::{attribute, AttributionConfig};
use smoothgeo::harness::experiments::{comparison_report, robustness_report, select_inputs, transfer_report};
use smoothgeo::harness::{
    emit_contour_field, emit_heatmap, history_path, run_theory_checks, ExperimentKind, ExperimentSpec, Region,
    TrainSpec,
};
use smoothgeo::nn::Network;
use smoothgeo::training::{train, TrainHistory};
use smoothgeo::{par, rng};

#[derive(Parser)]
#[command(name = "smoothgeo", version, about = "Attribution robustness experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML file with an experiment or training spec.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the spec's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides the spec).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    format: Format,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write its checkpoint and history.
    Train,
    /// Attack inputs and record per-input outcomes.
    Attack {
        /// Also write each perturbation as little-endian f64s.
        #[arg(long)]
        dump_perturbations: bool,
    },
    /// Robustness report (or a model comparison for `experiment = "regularization"`).
    Evaluate,
    /// Attack the saliency map and measure every method.
    Transfer,
    /// Run the randomized theory checks.
    TheoryCheck,
    /// Heatmaps of clean attributions, or a contour plot for 2-D models.
    Plot,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let workers = par::init_workers_from_env();
    log::debug!("{workers} workers");
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn experiment_spec(cli: &Cli) -> Result<ExperimentSpec> {
    let mut spec = match &cli.config {
        Some(p) => ExperimentSpec::from_toml_file(p)?,
        None => ExperimentSpec::default(),
    };
    if let Some(seed) = cli.seed {
        spec.seed = seed;
        spec.theory.seed = seed;
    }
    if let Some(out) = &cli.out {
        spec.out_dir = out.clone();
    }
    spec.validate()?;
    Ok(spec)
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(name);
    std::fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
    log::info!("wrote {}", path.display());
    Ok(path)
}

fn single(spec: &ExperimentSpec) -> Result<(String, Network)> {
    let mut nets = spec.load_networks()?;
    if nets.len() != 1 {
        bail!("expected exactly one checkpoint, got {}", nets.len());
    }
    Ok(nets.remove(0))
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train => cmd_train(&cli),
        Command::Attack { dump_perturbations } => cmd_attack(&cli, dump_perturbations),
        Command::Evaluate => cmd_evaluate(&cli),
        Command::Transfer => cmd_transfer(&cli),
        Command::TheoryCheck => cmd_theory(&cli),
        Command::Plot => cmd_plot(&cli),
    }
}

fn cmd_train(cli: &Cli) -> Result<bool> {
    let mut spec = match &cli.config {
        Some(p) => TrainSpec::from_toml_file(p)?,
        None => TrainSpec::default(),
    };
    if let Some(seed) = cli.seed {
        spec.train.seed = seed;
    }
    let data = spec.dataset.load()?.to_unit();
    let (net, history) = train(&data, &spec.train)?;
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&out)?;
    let ckpt = out.join(&spec.checkpoint);
    net.save_checkpoint(&ckpt)?;
    write(&out, &history_path(&spec.checkpoint).to_string_lossy(), &history.to_csv())?;
    if cli.format == Format::Json {
        write(&out, "history.json", &serde_json::to_string_pretty(&history)?)?;
    }
    let last = history.last();
    println!(
        "{}: {} epochs, train accuracy {:.4}",
        ckpt.display(),
        history.rows.len(),
        last.map_or(f64::NAN, |r| r.accuracy)
    );
    Ok(true)
}

#[derive(serde::Serialize)]
struct AttackRecord {
    input: usize,
    method: String,
    attack: String,
    epsilon: f64,
    feasible: bool,
    best_step: usize,
    linf: f64,
    l2: f64,
    loss_start: f64,
    loss_best: f64,
}

fn cmd_attack(cli: &Cli, dump: bool) -> Result<bool> {
    let spec = experiment_spec(cli)?;
    let (_, net) = single(&spec)?;
    let data = spec.dataset.load()?;
    let width = data.range_width();
    let unit = data.to_unit();
    let idx = select_inputs(&[&net], &unit, spec.images)?;
    let inputs: Vec<Vec<f64>> = idx.iter().map(|&i| unit.features[i].clone()).collect();
    let acfg = AttributionConfig { seed: spec.seed, ..spec.attribution.clone() };
    let mut records = Vec::new();
    for &method in &spec.methods {
        let maps: Vec<Vec<f64>> = inputs
            .iter()
            .map(|x| attribute(&net, x, method, &acfg).map(|m| m.scores))
            .collect::<std::result::Result<_, _>>()?;
        for &kind in &spec.attacks {
            for &eps in &spec.epsilons {
                let results = par::map(inputs.len(), |i| {
                    let cfg = AttackConfig {
                        steps: spec.attack_steps,
                        surrogate_beta: spec.surrogate_beta,
                        k: spec.k,
                        target_map: (kind == AttackKind::Manipulate).then(|| maps[(i + 1) % maps.len()].clone()),
                        seed: rng::mix(spec.seed, i as u64),
                        attribution: acfg.clone(),
                        ..AttackConfig::new(kind, eps / width, method, data.geometry)
                    };
                    pgd_attack(&net, &inputs[i], &cfg)
                });
                for (i, res) in results.into_iter().enumerate() {
                    let res = res?;
                    if dump {
                        let dir = spec.out_dir.join("perturbations");
                        std::fs::create_dir_all(&dir)?;
                        let delta: Vec<u8> = res
                            .x_adv
                            .iter()
                            .zip(&inputs[i])
                            .flat_map(|(a, b)| ((a - b) * width).to_le_bytes())
                            .collect();
                        std::fs::write(dir.join(format!("{}_{}_{}_{}.f64", method.tag(), kind.name(), eps, idx[i])), delta)?;
                    }
                    records.push(AttackRecord {
                        input: idx[i],
                        method: method.tag().into(),
                        attack: kind.name().into(),
                        epsilon: eps,
                        feasible: res.feasible,
                        best_step: res.best_step,
                        linf: res.linf * width,
                        l2: res.l2 * width,
                        loss_start: res.loss_trace[0],
                        loss_best: res.loss_trace[res.best_step],
                    });
                }
            }
        }
    }
    match cli.format {
        Format::Json => write(&spec.out_dir, "attacks.json", &serde_json::to_string_pretty(&records)?)?,
        Format::Csv => {
            let mut csv = String::from("input,method,attack,epsilon,feasible,best_step,linf,l2,loss_start,loss_best\n");
            for r in &records {
                csv.push_str(&format!(
                    "{},{},{},{},{},{},{},{},{},{}\n",
                    r.input, r.method, r.attack, r.epsilon, r.feasible, r.best_step, r.linf, r.l2, r.loss_start, r.loss_best
                ));
            }
            write(&spec.out_dir, "attacks.csv", &csv)?
        }
    };
    let infeasible = records.iter().filter(|r| !r.feasible).count();
    println!("{} attacks, {infeasible} infeasible", records.len());
    Ok(true)
}

fn cmd_evaluate(cli: &Cli) -> Result<bool> {
    let spec = experiment_spec(cli)?;
    let data = spec.dataset.load()?;
    if spec.experiment == ExperimentKind::Regularization {
        let mut models = Vec::new();
        for ((name, net), path) in spec.load_networks()?.into_iter().zip(&spec.checkpoints) {
            let hp = history_path(path);
            let history = std::fs::read_to_string(&hp).ok().and_then(|t| TrainHistory::from_csv(&t));
            models.push((name, net, history));
        }
        let report = comparison_report(&models, &data, &spec)?;
        match cli.format {
            Format::Csv => write(&spec.out_dir, "regularization.csv", &report.to_csv())?,
            Format::Json => write(&spec.out_dir, "regularization.json", &report.to_json())?,
        };
        return Ok(true);
    }
    let (name, net) = single(&spec)?;
    let report = robustness_report(&net, &name, &data, &spec)?;
    match cli.format {
        Format::Csv => write(&spec.out_dir, "robustness.csv", &report.to_csv())?,
        Format::Json => write(&spec.out_dir, "robustness.json", &report.to_json())?,
    };
    Ok(true)
}

fn cmd_transfer(cli: &Cli) -> Result<bool> {
    let spec = experiment_spec(cli)?;
    let (name, net) = single(&spec)?;
    let report = transfer_report(&net, &name, &spec.dataset.load()?, &spec)?;
    match cli.format {
        Format::Csv => write(&spec.out_dir, "transfer.csv", &report.to_csv())?,
        Format::Json => write(&spec.out_dir, "transfer.json", &report.to_json())?,
    };
    Ok(true)
}

fn cmd_theory(cli: &Cli) -> Result<bool> {
    let spec = experiment_spec(cli)?;
    let summary = run_theory_checks(&spec.theory)?;
    write(&spec.out_dir, "theory.json", &summary.to_json())?;
    for c in &summary.checks {
        println!("{:<28} {}", c.check, if c.pass { "pass" } else { "FAIL" });
    }
    Ok(summary.pass)
}

fn cmd_plot(cli: &Cli) -> Result<bool> {
    let spec = experiment_spec(cli)?;
    let (name, net) = single(&spec)?;
    let data = spec.dataset.load()?;
    let acfg = AttributionConfig { seed: spec.seed, ..spec.attribution.clone() };
    std::fs::create_dir_all(&spec.out_dir)?;
    if net.input_dim() == 2 {
        let unit = data.to_unit();
        let region = Region { x: (0.0, 1.0), y: (0.0, 1.0) };
        let path = spec.out_dir.join(format!("{name}_contours.svg"));
        let summary = emit_contour_field(&net, region, &spec.methods, &acfg, &path)?;
        log::info!("wrote {} ({} arrows, {} points)", path.display(), summary.arrows.len(), unit.len());
        return Ok(true);
    }
    let unit = data.to_unit();
    let idx = select_inputs(&[&net], &unit, spec.images.min(8))?;
    for &i in &idx {
        for &m in &spec.methods {
            let map = attribute(&net, &unit.features[i], m, &acfg)?;
            let path = spec.out_dir.join(format!("{name}_{i}_{}.pgm", m.tag()));
            emit_heatmap(&map, data.geometry, &path)?;
        }
    }
    println!("{} heatmaps in {}", idx.len() * spec.methods.len(), spec.out_dir.display());
    Ok(true)
}
