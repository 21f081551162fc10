//! Side-by-side method comparison: a results table, per-pair metric deltas,
//! and the list of test rows one model corrects relative to another.

use crate::attack::PerturbMode;
use crate::error::{Error, Result};
use crate::eval::MetricsReport;
use crate::trainers::Method;

/// Test-set outcome of one trained configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub label: String,
    pub method: Method,
    pub mode: Option<PerturbMode>,
    pub test: MetricsReport,
    pub labels: Vec<usize>,
    pub groups: Vec<usize>,
    pub clean_pred: Vec<usize>,
    pub adv_pred: Vec<usize>,
}

/// Configurations trained by a full comparison, weakest first.
pub const STANDARD_SET: [(Method, Option<PerturbMode>); 5] = [
    (Method::Erm, None),
    (Method::AdvErm, Some(PerturbMode::Batch)),
    (Method::Gdro, None),
    (Method::AdvGdro, Some(PerturbMode::Batch)),
    (Method::AdvGdro, Some(PerturbMode::Group)),
];

pub fn label(method: Method, mode: Option<PerturbMode>) -> String {
    match mode {
        Some(m) if method.is_adversarial() => format!("{method}-{m}"),
        _ => method.to_string(),
    }
}

/// `(stronger, weaker)` label pairs reported for a full comparison.
pub const STANDARD_PAIRS: [(&str, &str); 7] = [
    ("gdro", "erm"),
    ("adv_erm-batch", "erm"),
    ("adv_gdro-batch", "adv_erm-batch"),
    ("adv_gdro-group", "adv_erm-batch"),
    ("adv_gdro-group", "adv_gdro-batch"),
    ("adv_gdro-group", "gdro"),
    ("adv_gdro-group", "erm"),
];

pub const TABLE_HEADER: &str = "method,mode,average_acc,adversarial_acc,robust_acc,robust_adv_acc";

fn metrics(r: &MetricsReport) -> [f64; 4] {
    [r.average_acc, r.adversarial_acc, r.robust_acc, r.robust_adv_acc]
}

/// One row per method and perturbation mode, in the layout
/// `erm`, `adv_erm` (batch, group), `gdro`, `adv_gdro` (batch, group).
/// Configurations that were not run are written as `-`.
pub fn table_csv(results: &[RunResult]) -> String {
    let mut s = format!("{TABLE_HEADER}\n");
    let layout = [
        (Method::Erm, None),
        (Method::AdvErm, Some(PerturbMode::Batch)),
        (Method::AdvErm, Some(PerturbMode::Group)),
        (Method::Gdro, None),
        (Method::AdvGdro, Some(PerturbMode::Batch)),
        (Method::AdvGdro, Some(PerturbMode::Group)),
    ];
    for (method, mode) in layout {
        let mode_s = mode.map_or_else(|| "-".to_string(), |m| m.to_string());
        match results.iter().find(|r| r.method == method && r.mode == mode) {
            Some(r) => {
                let m = metrics(&r.test);
                s.push_str(&format!("{method},{mode_s},{},{},{},{}\n", m[0], m[1], m[2], m[3]));
            }
            None => s.push_str(&format!("{method},{mode_s},-,-,-,-\n")),
        }
    }
    s
}

/// Rows for an arbitrary list of runs, in the given order.
pub fn runs_table_csv(results: &[RunResult]) -> String {
    let mut s = String::from("run,method,mode,average_acc,adversarial_acc,robust_acc,robust_adv_acc\n");
    for r in results {
        let m = metrics(&r.test);
        let mode = r.mode.map_or_else(|| "-".to_string(), |m| m.to_string());
        s.push_str(&format!("{},{},{mode},{},{},{},{}\n", r.label, r.method, m[0], m[1], m[2], m[3]));
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct Delta {
    pub stronger: String,
    pub weaker: String,
    /// `stronger - weaker` for average, adversarial, robust, robust adversarial accuracy.
    pub values: [f64; 4],
}

pub fn delta(stronger: &RunResult, weaker: &RunResult) -> Delta {
    let a = metrics(&stronger.test);
    let b = metrics(&weaker.test);
    Delta {
        stronger: stronger.label.clone(),
        weaker: weaker.label.clone(),
        values: [a[0] - b[0], a[1] - b[1], a[2] - b[2], a[3] - b[3]],
    }
}

pub fn deltas_csv(deltas: &[Delta]) -> String {
    let mut s = String::from("stronger,weaker,d_average_acc,d_adversarial_acc,d_robust_acc,d_robust_adv_acc\n");
    for d in deltas {
        let v = d.values;
        s.push_str(&format!("{},{},{},{},{},{}\n", d.stronger, d.weaker, v[0], v[1], v[2], v[3]));
    }
    s
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Correction {
    pub stronger: String,
    pub weaker: String,
    pub row: usize,
    pub group: usize,
    pub label: usize,
    pub weaker_pred: usize,
    pub stronger_pred: usize,
}

/// Test rows the weaker run gets wrong and the stronger run gets right (clean inputs).
pub fn corrections(stronger: &RunResult, weaker: &RunResult) -> Result<Vec<Correction>> {
    if stronger.labels != weaker.labels || stronger.groups != weaker.groups {
        return Err(Error::Comparison(format!(
            "runs `{}` and `{}` were evaluated on different test sets",
            stronger.label, weaker.label
        )));
    }
    let n = stronger.labels.len();
    if stronger.clean_pred.len() != n || weaker.clean_pred.len() != n {
        return Err(Error::Comparison("prediction count differs from test size".into()));
    }
    Ok((0..n)
        .filter(|&i| weaker.clean_pred[i] != weaker.labels[i] && stronger.clean_pred[i] == stronger.labels[i])
        .map(|i| Correction {
            stronger: stronger.label.clone(),
            weaker: weaker.label.clone(),
            row: i,
            group: stronger.groups[i],
            label: stronger.labels[i],
            weaker_pred: weaker.clean_pred[i],
            stronger_pred: stronger.clean_pred[i],
        })
        .collect())
}

pub fn corrections_csv(list: &[Correction]) -> String {
    let mut s = String::from("stronger,weaker,row,group,label,weaker_pred,stronger_pred\n");
    for c in list {
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            c.stronger, c.weaker, c.row, c.group, c.label, c.weaker_pred, c.stronger_pred
        ));
    }
    s
}

/// Deltas and corrections for the standard pairs present in `results`.
pub fn standard_pairs(results: &[RunResult]) -> Result<(Vec<Delta>, Vec<Correction>)> {
    let find = |l: &str| results.iter().find(|r| r.label == l);
    let mut ds = Vec::new();
    let mut cs = Vec::new();
    for (s, w) in STANDARD_PAIRS {
        if let (Some(a), Some(b)) = (find(s), find(w)) {
            ds.push(delta(a, b));
            cs.extend(corrections(a, b)?);
        }
    }
    Ok((ds, cs))
}

/// Every ordered pair `(later, earlier)` of the given runs.
pub fn all_pairs(results: &[RunResult]) -> Result<(Vec<Delta>, Vec<Correction>)> {
    let mut ds = Vec::new();
    let mut cs = Vec::new();
    for j in 0..results.len() {
        for i in 0..j {
            ds.push(delta(&results[j], &results[i]));
            cs.extend(corrections(&results[j], &results[i])?);
        }
    }
    Ok((ds, cs))
}
