//! Robustness, regularization and transfer experiments.

use crate::attacks::{pgd_attack, AttackConfig, AttackKind};
use crate::attribution::{attribute, AttributionConfig, Method};
use crate::metrics::{log_auc, GridGeometry, MetricError, MetricValues};
use crate::nn::Network;
use crate::training::{mean_top_eigenvalue, TrainHistory};
use crate::{par, rng};

use super::report::{Budget, ComparisonReport, MetricReport, MetricRow, ModelSummary};
use super::{history_path, io_err, Dataset, ExperimentSpec, HarnessError, Result};

/// Indices of the first `n` points every network classifies correctly.
pub fn select_inputs(nets: &[&Network], data: &Dataset, n: usize) -> Result<Vec<usize>> {
    let mut chosen = Vec::with_capacity(n);
    for (i, (x, &y)) in data.features.iter().zip(&data.labels).enumerate() {
        if chosen.len() == n {
            break;
        }
        let mut ok = true;
        for net in nets {
            ok &= net.predict(x)? == y;
        }
        if ok {
            chosen.push(i);
        }
    }
    Ok(chosen)
}

/// Attack and measurement settings shared by every input of a run.
pub struct AttackPlan<'a> {
    pub net: &'a Network,
    pub model: &'a str,
    /// Inputs in model units.
    pub inputs: &'a [Vec<f64>],
    pub geometry: GridGeometry,
    /// Width of the native data range; budgets are divided by it.
    pub range_width: f64,
    pub spec: &'a ExperimentSpec,
}

impl AttackPlan<'_> {
    fn attribution(&self) -> AttributionConfig {
        AttributionConfig { seed: self.spec.seed, ..self.spec.attribution.clone() }
    }

    fn attack_config(&self, kind: AttackKind, eps: f64, method: Method, i: usize, target: Option<&[f64]>) -> AttackConfig {
        AttackConfig {
            steps: self.spec.attack_steps,
            surrogate_beta: self.spec.surrogate_beta,
            k: self.spec.k,
            target_map: if kind == AttackKind::Manipulate { target.map(<[f64]>::to_vec) } else { None },
            data_range: (0.0, 1.0),
            seed: rng::mix(self.spec.seed, i as u64),
            attribution: self.attribution(),
            ..AttackConfig::new(kind, eps / self.range_width, method, self.geometry)
        }
    }

    fn clean_maps(&self, method: Method) -> Result<Vec<Vec<f64>>> {
        let cfg = self.attribution();
        par::map(self.inputs.len(), |i| Ok(attribute(self.net, &self.inputs[i], method, &cfg)?.scores))
            .into_iter()
            .collect()
    }

    /// Attacks `attacked` under `kind` at every budget and measures each of
    /// `measured` between clean and perturbed inputs. Emits one row per
    /// budget and measured method, plus AUC rows when the grid has ≥ 2 points.
    pub fn run(&self, attacked: Method, measured: &[Method], kind: AttackKind) -> Result<Vec<MetricRow>> {
        let n = self.inputs.len();
        let attacked_maps = self.clean_maps(attacked)?;
        let clean: Vec<Vec<Vec<f64>>> = measured.iter().map(|&m| self.clean_maps(m)).collect::<Result<_>>()?;
        let cfg_m = self.attribution();
        let mut per_method: Vec<Vec<MetricRow>> = vec![Vec::new(); measured.len()];

        for &eps in &self.spec.epsilons {
            let outcomes = par::map(n, |i| -> Result<(bool, f64, Vec<Option<MetricValues>>)> {
                let target = &attacked_maps[(i + 1) % n];
                let cfg = self.attack_config(kind, eps, attacked, i, Some(target));
                let res = pgd_attack(self.net, &self.inputs[i], &cfg)?;
                let mut vals = Vec::with_capacity(measured.len());
                for (j, &m) in measured.iter().enumerate() {
                    let z = &clean[j][i];
                    let z_adv = if res.x_adv == self.inputs[i] {
                        z.clone()
                    } else {
                        attribute(self.net, &res.x_adv, m, &cfg_m)?.scores
                    };
                    vals.push(measure(z, &z_adv, self.spec.k, self.geometry)?);
                }
                Ok((res.feasible, res.linf, vals))
            });
            let outcomes: Vec<_> = outcomes.into_iter().collect::<Result<_>>()?;
            let infeasible = outcomes.iter().filter(|o| !o.0).count();
            let max_linf = outcomes.iter().fold(0.0_f64, |m, o| m.max(o.1)) * self.range_width;
            for (j, &m) in measured.iter().enumerate() {
                let vals: Vec<MetricValues> = outcomes.iter().filter_map(|o| o.2[j]).collect();
                let metrics = MetricValues::mean(&vals).ok_or(HarnessError::Metric(MetricError::Degenerate))?;
                per_method[j].push(MetricRow {
                    model: self.model.to_string(),
                    attacked: attacked.tag().into(),
                    method: m.tag().into(),
                    attack: kind.name().into(),
                    budget: Budget::Epsilon(eps),
                    metrics,
                    inputs: vals.len(),
                    infeasible,
                    degenerate: n - vals.len(),
                    max_linf,
                });
            }
        }

        let mut rows = Vec::new();
        for mut block in per_method {
            if block.len() >= 2 {
                let auc = auc_row(&block)?;
                block.push(auc);
            }
            rows.extend(block);
        }
        Ok(rows)
    }
}

/// Metrics for one pair of maps; `None` when either map is all zero.
fn measure(z: &[f64], z_adv: &[f64], k: usize, geom: GridGeometry) -> Result<Option<MetricValues>> {
    if z == z_adv {
        return match MetricValues::identity(z, k) {
            Ok(v) => Ok(Some(v)),
            Err(MetricError::Degenerate) => Ok(None),
            Err(e) => Err(e.into()),
        };
    }
    match MetricValues::compute(z, z_adv, k, geom) {
        Ok(v) => Ok(Some(v)),
        Err(MetricError::Degenerate | MetricError::UndefinedCorrelation) => Ok(None),
        Err(e) => Err(e.into()),
    }
}

fn auc_row(block: &[MetricRow]) -> Result<MetricRow> {
    let curve = |f: fn(&MetricValues) -> f64| -> Result<f64> {
        let pts: Vec<(f64, f64)> = block
            .iter()
            .map(|r| match r.budget {
                Budget::Epsilon(e) => (e, f(&r.metrics)),
                Budget::Auc => unreachable!("AUC rows are appended last"),
            })
            .collect();
        Ok(log_auc(&pts)?)
    };
    let first = &block[0];
    Ok(MetricRow {
        budget: Budget::Auc,
        metrics: MetricValues {
            k_in: curve(|m| m.k_in)?,
            cor: curve(|m| m.cor)?,
            cdl: curve(|m| m.cdl)?,
            cosd: curve(|m| m.cosd)?,
        },
        inputs: block.iter().map(|r| r.inputs).min().unwrap_or(0),
        infeasible: block.iter().map(|r| r.infeasible).sum(),
        degenerate: block.iter().map(|r| r.degenerate).sum(),
        max_linf: block.iter().fold(0.0, |m, r| m.max(r.max_linf)),
        ..first.clone()
    })
}

/// Test split in model units together with the native range width.
fn unit_inputs(data: &Dataset, indices: &[usize]) -> (Vec<Vec<f64>>, f64) {
    let unit = data.to_unit();
    (indices.iter().map(|&i| unit.features[i].clone()).collect(), data.range_width())
}

/// Each method attacked and measured on itself, for every attack kind.
pub fn robustness_report(net: &Network, model: &str, data: &Dataset, spec: &ExperimentSpec) -> Result<MetricReport> {
    spec.validate()?;
    let unit = data.to_unit();
    let idx = select_inputs(&[net], &unit, spec.images)?;
    let (inputs, width) = unit_inputs(data, &idx);
    let plan = AttackPlan { net, model, inputs: &inputs, geometry: data.geometry, range_width: width, spec };
    let mut rows = Vec::new();
    for &m in &spec.methods {
        for &kind in &spec.attacks {
            rows.extend(plan.run(m, &[m], kind)?);
        }
    }
    Ok(MetricReport { experiment: "robustness".into(), rows })
}

/// Perturbations found against SM, measured under every configured method.
pub fn transfer_report(net: &Network, model: &str, data: &Dataset, spec: &ExperimentSpec) -> Result<MetricReport> {
    spec.validate()?;
    let unit = data.to_unit();
    let idx = select_inputs(&[net], &unit, spec.images)?;
    let (inputs, width) = unit_inputs(data, &idx);
    let plan = AttackPlan { net, model, inputs: &inputs, geometry: data.geometry, range_width: width, spec };
    let mut rows = Vec::new();
    for &kind in &spec.attacks {
        rows.extend(plan.run(Method::Saliency, &spec.methods, kind)?);
    }
    Ok(MetricReport { experiment: "transfer".into(), rows })
}

/// Runs [`robustness_report`] on every model over a shared input set (the
/// first points all models classify correctly).
pub fn comparison_report(
    models: &[(String, Network, Option<TrainHistory>)],
    data: &Dataset,
    spec: &ExperimentSpec,
) -> Result<ComparisonReport> {
    spec.validate()?;
    if models.is_empty() {
        return Err(HarnessError::InvalidSpec("no models to compare".into()));
    }
    let unit = data.to_unit();
    let nets: Vec<&Network> = models.iter().map(|m| &m.1).collect();
    let idx = select_inputs(&nets, &unit, spec.images)?;
    let (inputs, width) = unit_inputs(data, &idx);
    let mut summaries = Vec::new();
    let mut rows = Vec::new();
    for (name, net, history) in models {
        let plan = AttackPlan { net, model: name, inputs: &inputs, geometry: data.geometry, range_width: width, spec };
        for &m in &spec.methods {
            for &kind in &spec.attacks {
                rows.extend(plan.run(m, &[m], kind)?);
            }
        }
        let eval = unit.subset(&idx);
        summaries.push(ModelSummary {
            model: name.clone(),
            mode: net.meta.map(|m| format!("{:?}", m.mode).to_lowercase()),
            clean_accuracy: crate::training::accuracy(net, &unit),
            train_accuracy: history.as_ref().and_then(|h| h.last()).map(|r| r.accuracy),
            epoch_time_s: history.as_ref().filter(|h| !h.rows.is_empty()).map(|h| h.mean_epoch_time()),
            mean_top_eigenvalue: mean_top_eigenvalue(net, &eval, eval.len())?,
        });
    }
    Ok(ComparisonReport { models: summaries, metrics: MetricReport { experiment: "regularization".into(), rows } })
}

fn single_network(spec: &ExperimentSpec) -> Result<(String, Network)> {
    let mut nets = spec.load_networks()?;
    if nets.len() != 1 {
        return Err(HarnessError::InvalidSpec(format!("expected one checkpoint, got {}", nets.len())));
    }
    Ok(nets.remove(0))
}

pub fn run_robustness_experiment(spec: &ExperimentSpec) -> Result<MetricReport> {
    let (name, net) = single_network(spec)?;
    robustness_report(&net, &name, &spec.dataset.load()?, spec)
}

pub fn run_transfer_experiment(spec: &ExperimentSpec) -> Result<MetricReport> {
    let (name, net) = single_network(spec)?;
    transfer_report(&net, &name, &spec.dataset.load()?, spec)
}

/// Compares the spec's checkpoints. Training accuracy and epoch time come
/// from the history CSV saved beside each checkpoint, when present.
pub fn run_regularization_experiment(spec: &ExperimentSpec) -> Result<ComparisonReport> {
    if spec.checkpoints.len() < 2 {
        return Err(HarnessError::InvalidSpec("regularization needs at least two checkpoints".into()));
    }
    let mut models = Vec::new();
    for ((name, net), path) in spec.load_networks()?.into_iter().zip(&spec.checkpoints) {
        let hp = history_path(path);
        let history = if hp.exists() {
            let text = std::fs::read_to_string(&hp).map_err(io_err(&hp))?;
            TrainHistory::from_csv(&text)
        } else {
            None
        };
        models.push((name, net, history));
    }
    comparison_report(&models, &spec.dataset.load()?, spec)
}
