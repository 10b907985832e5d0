//! Metric reports and their CSV / JSON renderings.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::metrics::MetricValues;

/// Row budget: an attack budget in dataset units, or the log-AUC aggregate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Budget {
    Epsilon(f64),
    Auc,
}

impl Budget {
    fn label(self) -> String {
        match self {
            Budget::Epsilon(e) => format!("{e}"),
            Budget::Auc => "auc".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub model: String,
    /// Method whose map was attacked.
    pub attacked: String,
    /// Method whose map was measured; equals `attacked` outside transfer runs.
    pub method: String,
    pub attack: String,
    pub budget: Budget,
    pub metrics: MetricValues,
    /// Inputs averaged into this row.
    pub inputs: usize,
    pub infeasible: usize,
    /// Inputs dropped because a map was all zero.
    pub degenerate: usize,
    /// Largest ‖x_adv − x‖∞ over the row, in dataset units.
    pub max_linf: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub experiment: String,
    pub rows: Vec<MetricRow>,
}

pub const CSV_HEADER: &str = "model,attacked,method,attack,epsilon,k_in,cor,cdl,cosd,inputs,infeasible,degenerate,max_linf";

impl MetricReport {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{CSV_HEADER}\n");
        for r in &self.rows {
            let m = &r.metrics;
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{},{}",
                r.model,
                r.attacked,
                r.method,
                r.attack,
                r.budget.label(),
                m.k_in,
                m.cor,
                m.cdl,
                m.cosd,
                r.inputs,
                r.infeasible,
                r.degenerate,
                r.max_linf
            );
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// The AUC row for a (model, measured method, attack) triple.
    pub fn auc(&self, model: &str, method: &str, attack: &str) -> Option<&MetricValues> {
        self.rows
            .iter()
            .find(|r| r.model == model && r.method == method && r.attack == attack && r.budget == Budget::Auc)
            .map(|r| &r.metrics)
    }

    pub fn rows_for(&self, model: &str, method: &str, attack: &str) -> impl Iterator<Item = &MetricRow> {
        let (model, method, attack) = (model.to_string(), method.to_string(), attack.to_string());
        self.rows.iter().filter(move |r| r.model == model && r.method == method && r.attack == attack)
    }
}

/// Per-model columns of the regularization comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub model: String,
    pub mode: Option<String>,
    pub clean_accuracy: f64,
    pub train_accuracy: Option<f64>,
    pub epoch_time_s: Option<f64>,
    pub mean_top_eigenvalue: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub models: Vec<ModelSummary>,
    pub metrics: MetricReport,
}

impl ComparisonReport {
    /// One row per model and `(method, attack)` pair with the AUC of each metric.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "model,mode,clean_acc,train_acc,epoch_time_s,mean_top_eigenvalue,method,attack,auc_k_in,auc_cor,auc_cdl,auc_cosd\n",
        );
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for m in &self.models {
            for r in self.metrics.rows.iter().filter(|r| r.model == m.model && r.budget == Budget::Auc) {
                let v = &r.metrics;
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{},{},{},{},{},{},{}",
                    m.model,
                    m.mode.clone().unwrap_or_default(),
                    m.clean_accuracy,
                    opt(m.train_accuracy),
                    opt(m.epoch_time_s),
                    m.mean_top_eigenvalue,
                    r.method,
                    r.attack,
                    v.k_in,
                    v.cor,
                    v.cdl,
                    v.cosd
                );
            }
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
