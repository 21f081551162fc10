//! Clean and adversarial accuracy, overall and per group, plus exports of
//! hidden representations and first-layer weights.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attack::{run_attack, AttackConfig};
use crate::data::GroupedDataset;
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::rng::RngState;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub average_acc: f64,
    pub adversarial_acc: f64,
    /// Worst-group clean accuracy.
    pub robust_acc: f64,
    /// Worst-group adversarial accuracy.
    pub robust_adv_acc: f64,
    pub per_group_acc: Vec<f64>,
    pub per_group_adv_acc: Vec<f64>,
    pub worst_group_id_clean: usize,
    pub worst_group_id_adv: usize,
    pub attack: Option<AttackConfig>,
}

/// A report together with the per-row predictions behind it.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub clean_pred: Vec<usize>,
    pub adv_pred: Vec<usize>,
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str =
        "average_acc,adversarial_acc,robust_acc,robust_adv_acc,worst_group_clean,worst_group_adv";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.average_acc,
            self.adversarial_acc,
            self.robust_acc,
            self.robust_adv_acc,
            self.worst_group_id_clean,
            self.worst_group_id_adv
        )
    }

    /// Checks the min/average identities every report must satisfy.
    pub fn check_identities(&self) -> Result<()> {
        let (g, min) = argmin(&self.per_group_acc);
        let (ga, min_adv) = argmin(&self.per_group_adv_acc);
        let ok = self.robust_acc == min
            && self.robust_adv_acc == min_adv
            && self.worst_group_id_clean == g
            && self.worst_group_id_adv == ga
            && self.average_acc >= self.robust_acc
            && self.adversarial_acc >= self.robust_adv_acc;
        if ok {
            Ok(())
        } else {
            Err(Error::Evaluation(format!("inconsistent report: {self:?}")))
        }
    }
}

fn argmin(v: &[f64]) -> (usize, f64) {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x < v[best] {
            best = i;
        }
    }
    (best, v[best])
}

fn tally(ds: &GroupedDataset, pred: &[usize]) -> (f64, Vec<f64>) {
    let m = ds.num_groups;
    let mut correct = vec![0usize; m];
    let mut total = vec![0usize; m];
    for ((&p, &y), &g) in pred.iter().zip(&ds.labels).zip(&ds.groups) {
        total[g] += 1;
        if p == y {
            correct[g] += 1;
        }
    }
    let all: usize = correct.iter().sum();
    let per_group = correct
        .iter()
        .zip(&total)
        .map(|(&c, &t)| c as f64 / t as f64)
        .collect();
    (all as f64 / ds.len() as f64, per_group)
}

/// Perturbed copy of the whole dataset, attacked in batch mode with weight 1.
fn attacked_inputs(
    params: &ModelParams,
    ds: &GroupedDataset,
    attack: &AttackConfig,
    rng: &mut RngState,
) -> Result<crate::tensor::Tensor> {
    let cfg = attack.as_batch();
    let (x_adv, _) = run_attack(params, &ds.features, &ds.labels, &cfg, 1.0, rng)?;
    Ok(x_adv)
}

pub fn evaluate(
    params: &ModelParams,
    ds: &GroupedDataset,
    attack: Option<&AttackConfig>,
    rng: &mut RngState,
) -> Result<MetricsReport> {
    Ok(evaluate_detailed(params, ds, attack, rng)?.report)
}

/// Without an attack the adversarial metrics equal the clean ones.
pub fn evaluate_detailed(
    params: &ModelParams,
    ds: &GroupedDataset,
    attack: Option<&AttackConfig>,
    rng: &mut RngState,
) -> Result<Evaluation> {
    if ds.is_empty() {
        return Err(Error::Evaluation("dataset is empty".into()));
    }
    if let Some(g) = ds.group_sizes().iter().position(|&c| c == 0) {
        return Err(Error::Evaluation(format!("group {g} has no examples")));
    }
    let clean_pred = params.predict(&ds.features)?;
    let adv_pred = match attack {
        Some(cfg) => params.predict(&attacked_inputs(params, ds, cfg, rng)?)?,
        None => clean_pred.clone(),
    };
    let (average_acc, per_group_acc) = tally(ds, &clean_pred);
    let (adversarial_acc, per_group_adv_acc) = tally(ds, &adv_pred);
    let (worst_group_id_clean, robust_acc) = argmin(&per_group_acc);
    let (worst_group_id_adv, robust_adv_acc) = argmin(&per_group_adv_acc);
    Ok(Evaluation {
        report: MetricsReport {
            average_acc,
            adversarial_acc,
            robust_acc,
            robust_adv_acc,
            per_group_acc,
            per_group_adv_acc,
            worst_group_id_clean,
            worst_group_id_adv,
            attack: attack.copied(),
        },
        clean_pred,
        adv_pred,
    })
}

/// Writes `group,label,correct,h0..` rows: all clean rows first, then (with an
/// attack) the perturbed rows in the same order. Returns the row count.
pub fn export_representations(
    params: &ModelParams,
    ds: &GroupedDataset,
    path: &Path,
    attack: Option<&AttackConfig>,
    rng: &mut RngState,
) -> Result<usize> {
    if params.is_linear() {
        return Err(Error::Unsupported(
            "representation export needs a hidden layer".into(),
        ));
    }
    let mut inputs = vec![ds.features.clone()];
    if let Some(cfg) = attack {
        inputs.push(attacked_inputs(params, ds, cfg, rng)?);
    }
    let h_dim = params.layers()[params.layers().len() - 1].d_in();
    let mut out = String::from("group,label,correct");
    for j in 0..h_dim {
        out.push_str(&format!(",h{j}"));
    }
    out.push('\n');
    let mut rows = 0;
    for x in &inputs {
        let h = params.penultimate(x)?;
        let pred = params.predict(x)?;
        for i in 0..ds.len() {
            out.push_str(&format!(
                "{},{},{}",
                ds.groups[i],
                ds.labels[i],
                u8::from(pred[i] == ds.labels[i])
            ));
            for v in h.row(i) {
                out.push(',');
                out.push_str(&v.to_string());
            }
            out.push('\n');
            rows += 1;
        }
    }
    fs::write(path, out)?;
    Ok(rows)
}

/// Mean absolute difference of adjacent entries; 0 for fewer than two entries.
pub fn smoothness(row: &[f64]) -> f64 {
    if row.len() < 2 {
        return 0.0;
    }
    row.windows(2).map(|w| (w[1] - w[0]).abs()).sum::<f64>() / (row.len() - 1) as f64
}

/// Incoming weights of every first-layer unit, one row per unit.
pub fn first_layer_units(params: &ModelParams) -> Vec<Vec<f64>> {
    let w = &params.layers()[0].weight;
    let (d_in, d_out) = (w.shape()[0], w.shape()[1]);
    (0..d_out)
        .map(|j| (0..d_in).map(|i| w.get(i, j)).collect())
        .collect()
}

/// Writes `unit,w0..,smoothness` rows and returns the per-unit smoothness.
pub fn export_first_layer(params: &ModelParams, path: &Path) -> Result<Vec<f64>> {
    let units = first_layer_units(params);
    let d_in = params.input_dim();
    let mut out = String::from("unit");
    for i in 0..d_in {
        out.push_str(&format!(",w{i}"));
    }
    out.push_str(",smoothness\n");
    let mut smooth = Vec::with_capacity(units.len());
    for (j, row) in units.iter().enumerate() {
        let s = smoothness(row);
        out.push_str(&j.to_string());
        for v in row {
            out.push(',');
            out.push_str(&v.to_string());
        }
        out.push_str(&format!(",{s}\n"));
        smooth.push(s);
    }
    fs::write(path, out)?;
    Ok(smooth)
}
