//! Empirical suboptimality of the adversarial group DRO average iterate on a
//! convex instance, compared against the analytic rate bound.
//!
//! The instance is a two-class linear softmax model under an L∞ attack. For a
//! row with sign `s = 2y - 1` the worst-case loss has the closed form
//! `softplus(-s (u·x + c) + eps ‖u‖₁)` with `u = w₁ - w₀`, `c = b₁ - b₀`,
//! attained at `delta = -eps * s * sign(u)`. The loss depends on `θ` only
//! through `z = (u, c)`, and the smallest `θ` producing a given `z` has norm
//! `‖z‖ / √2`, so the minimax value over `‖θ‖ ≤ B` equals the minimax value
//! over `‖z‖ ≤ √2 B`. The oracle solves that reduced problem.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::{AttackConfig, PerturbMode};
use crate::data::{GroupedDataset, Split};
use crate::error::{Error, Result};
use crate::model::{Activation, ModelParams};
use crate::rng::{derive_seed, RngState};
use crate::tensor::{sign, Tensor};
use crate::trainers::{train, Method, ModelSpec, TrainConfig};

/// Convex two-class instance with a bounded parameter ball.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvexInstance {
    pub dataset: GroupedDataset,
    pub b_theta: f64,
    pub epsilon: f64,
}

/// Generator settings for [`ConvexInstance::synthetic`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceSpec {
    pub groups: usize,
    pub per_group: usize,
    pub epsilon: f64,
    pub b_theta: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for InstanceSpec {
    fn default() -> Self {
        Self {
            groups: 2,
            per_group: 100,
            epsilon: 0.05,
            b_theta: 1.0,
            noise: 1.0,
            seed: 0,
        }
    }
}

impl ConvexInstance {
    /// Two-dimensional inputs; group `g` places its class signal mostly on
    /// one axis, rotating from `(1, 0.3)` towards `(0.3, 1)` across groups.
    pub fn synthetic(spec: &InstanceSpec) -> Result<Self> {
        if spec.groups == 0 || spec.per_group == 0 {
            return Err(Error::Parameter("convex instance needs groups and rows".into()));
        }
        if !(spec.b_theta > 0.0) || !(spec.epsilon >= 0.0) || !(spec.noise >= 0.0) {
            return Err(Error::Parameter("b_theta > 0, epsilon >= 0 and noise >= 0 required".into()));
        }
        let mut rng = RngState::derived(spec.seed, "convex-instance");
        let mut rows = Vec::with_capacity(spec.groups * spec.per_group);
        let mut labels = Vec::with_capacity(rows.capacity());
        let mut groups = Vec::with_capacity(rows.capacity());
        for g in 0..spec.groups {
            let t = if spec.groups == 1 { 0.5 } else { g as f64 / (spec.groups - 1) as f64 };
            let mean = [1.0 - 0.7 * t, 0.3 + 0.7 * t];
            for i in 0..spec.per_group {
                let y = i % 2;
                let s = 2.0 * y as f64 - 1.0;
                rows.push(vec![
                    s * mean[0] + spec.noise * rng.standard_normal(),
                    s * mean[1] + spec.noise * rng.standard_normal(),
                ]);
                labels.push(y);
                groups.push(g);
            }
        }
        let dataset = GroupedDataset::new(Tensor::from_rows(&rows)?, labels, groups, 2, spec.groups, Split::Train)?;
        Ok(Self {
            dataset,
            b_theta: spec.b_theta,
            epsilon: spec.epsilon,
        })
    }

    pub fn num_groups(&self) -> usize {
        self.dataset.num_groups
    }

    fn z_radius(&self) -> f64 {
        std::f64::consts::SQRT_2 * self.b_theta
    }
}

fn softplus(a: f64) -> f64 {
    if a > 0.0 {
        a + (-a).exp().ln_1p()
    } else {
        a.exp().ln_1p()
    }
}

fn sigmoid(a: f64) -> f64 {
    if a >= 0.0 {
        1.0 / (1.0 + (-a).exp())
    } else {
        let e = a.exp();
        e / (1.0 + e)
    }
}

/// `z = (u, c)` of a linear two-class model.
fn reduce(params: &ModelParams) -> Result<Vec<f64>> {
    if !params.is_linear() || params.num_classes() != 2 {
        return Err(Error::Unsupported(
            "closed-form adversarial loss needs a linear two-class model".into(),
        ));
    }
    let l = &params.layers()[0];
    let d = l.d_in();
    let w = l.weight.data();
    let b = l.bias.data();
    let mut z: Vec<f64> = (0..d).map(|j| w[j * 2 + 1] - w[j * 2]).collect();
    z.push(b[1] - b[0]);
    Ok(z)
}

/// Per-group worst-case losses at `z`, and optionally their gradients in `z`.
fn group_losses(inst: &ConvexInstance, z: &[f64], want_grad: bool) -> (Vec<f64>, Vec<Vec<f64>>) {
    let ds = &inst.dataset;
    let d = ds.dim();
    let m = ds.num_groups;
    let (u, c) = (&z[..d], z[d]);
    let l1: f64 = u.iter().map(|v| v.abs()).sum();
    let su: Vec<f64> = u.iter().map(|&v| sign(v)).collect();
    let mut losses = vec![0.0; m];
    let mut grads = if want_grad { vec![vec![0.0; d + 1]; m] } else { Vec::new() };
    for g in 0..m {
        let rows = ds.group_rows(g);
        for &i in rows {
            let x = ds.features.row(i);
            let s = 2.0 * ds.labels[i] as f64 - 1.0;
            let score: f64 = u.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + c;
            let a = -s * score + inst.epsilon * l1;
            losses[g] += softplus(a);
            if want_grad {
                let p = sigmoid(a);
                let gr = &mut grads[g];
                for j in 0..d {
                    gr[j] += p * (-s * x[j] + inst.epsilon * su[j]);
                }
                gr[d] += -s * p;
            }
        }
        let n = rows.len() as f64;
        losses[g] /= n;
        if want_grad {
            for v in &mut grads[g] {
                *v /= n;
            }
        }
    }
    (losses, grads)
}

/// Exact per-group expected adversarial loss of a linear two-class model.
pub fn worst_case_adv_loss(params: &ModelParams, inst: &ConvexInstance) -> Result<Vec<f64>> {
    if params.input_dim() != inst.dataset.dim() {
        return Err(Error::dim("worst_case_adv_loss", &[params.input_dim()], &[inst.dataset.dim()]));
    }
    inst.dataset.require_nonempty_groups()?;
    Ok(group_losses(inst, &reduce(params)?, false).0)
}

/// Maximiser of the L∞ attack on a linear two-class model, one row per example.
pub fn closed_form_perturbation(params: &ModelParams, x: &Tensor, y: &[usize], epsilon: f64) -> Result<Tensor> {
    let z = reduce(params)?;
    let d = z.len() - 1;
    if x.cols() != d || x.rows() != y.len() {
        return Err(Error::dim("closed_form_perturbation", &[y.len(), d], x.shape()));
    }
    let mut out = Tensor::zeros(x.shape());
    for (i, &yi) in y.iter().enumerate() {
        let s = 2.0 * yi as f64 - 1.0;
        for j in 0..d {
            out.data_mut()[i * d + j] = -epsilon * s * sign(z[j]);
        }
    }
    Ok(out)
}

/// Result of the deterministic minimax solve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinimaxOracle {
    /// `max_g F_g` at the returned point; an upper bound on the minimax value.
    pub value: f64,
    /// Certified upper bound on `value - minimax value`.
    pub certificate: f64,
    pub converged: bool,
    pub iterations: usize,
    pub method: String,
    /// Minimiser in reduced coordinates `(u, c)`.
    pub z: Vec<f64>,
}

fn project(z: &mut [f64], r: f64) {
    let n = z.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n > r {
        let s = r / n;
        z.iter_mut().for_each(|v| *v *= s);
    }
}

fn lse(f: &[f64], tau: f64) -> (f64, Vec<f64>) {
    let mx = f.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = f.iter().map(|v| ((v - mx) / tau).exp()).collect();
    let s: f64 = e.iter().sum();
    (mx + tau * s.ln(), e.iter().map(|v| v / s).collect())
}

fn smoothed(inst: &ConvexInstance, z: &[f64], tau: f64) -> (f64, Vec<f64>, Vec<f64>, Vec<Vec<f64>>) {
    let (f, gr) = group_losses(inst, z, true);
    let (val, q) = lse(&f, tau);
    let mut g = vec![0.0; z.len()];
    for (qg, grg) in q.iter().zip(&gr) {
        for (a, b) in g.iter_mut().zip(grg) {
            *a += qg * b;
        }
    }
    (val, g, f, gr)
}

/// Duality certificate at `z` for weights `q`:
/// `max_g F_g - Σ q_g F_g + ⟨h, z⟩ + R‖h‖` with `h = Σ q_g ∇F_g`.
fn certificate(z: &[f64], f: &[f64], gr: &[Vec<f64>], q: &[f64], r: f64) -> f64 {
    let mut h = vec![0.0; z.len()];
    for (qg, grg) in q.iter().zip(gr) {
        for (a, b) in h.iter_mut().zip(grg) {
            *a += qg * b;
        }
    }
    let primal = f.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mix: f64 = q.iter().zip(f).map(|(a, b)| a * b).sum();
    let inner: f64 = h.iter().zip(z).map(|(a, b)| a * b).sum();
    let hn = h.iter().map(|v| v * v).sum::<f64>().sqrt();
    (primal - mix + inner + r * hn).max(0.0)
}

/// Minimises `max_g F_g` over the ball by accelerated projected gradient on
/// log-sum-exp smoothings with a shrinking temperature. Convergence is
/// declared only when the duality certificate falls to `tol`.
pub fn solve_minimax(inst: &ConvexInstance, tol: f64) -> Result<MinimaxOracle> {
    inst.dataset.require_nonempty_groups()?;
    let r = inst.z_radius();
    let n = inst.dataset.dim() + 1;
    let mut z = vec![0.0; n];
    let mut best: Option<(f64, f64, Vec<f64>)> = None;
    let mut iterations = 0;
    let mut tau = 0.1;
    let mut lip = 1.0;

    let consider = |z: &[f64], tau: f64, best: &mut Option<(f64, f64, Vec<f64>)>| {
        let (f, gr) = group_losses(inst, z, true);
        let q = lse(&f, tau).1;
        let cert = certificate(z, &f, &gr, &q, r);
        let val = f.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if best.as_ref().is_none_or(|b| cert < b.1) {
            *best = Some((val, cert, z.to_vec()));
        }
        cert
    };

    while tau >= 1e-10 {
        let mut y = z.clone();
        let mut z_prev = z.clone();
        let mut t = 1.0f64;
        let mut prev_obj = f64::INFINITY;
        for _ in 0..20_000 {
            iterations += 1;
            let (sy, gy, _, _) = smoothed(inst, &y, tau);
            let mut z_new;
            loop {
                z_new = y.iter().zip(&gy).map(|(a, b)| a - b / lip).collect::<Vec<_>>();
                project(&mut z_new, r);
                let diff: Vec<f64> = z_new.iter().zip(&y).map(|(a, b)| a - b).collect();
                let lin: f64 = gy.iter().zip(&diff).map(|(a, b)| a * b).sum();
                let sq: f64 = diff.iter().map(|v| v * v).sum();
                let (sz, _, _, _) = smoothed(inst, &z_new, tau);
                if sz <= sy + lin + 0.5 * lip * sq + 1e-15 * sy.abs() || lip > 1e14 {
                    break;
                }
                lip *= 2.0;
            }
            let obj = smoothed(inst, &z_new, tau).0;
            if obj > prev_obj {
                // Restart momentum on non-monotone progress.
                t = 1.0;
                y = z.clone();
                prev_obj = f64::INFINITY;
                continue;
            }
            let step: f64 = z_new.iter().zip(&z).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            prev_obj = obj;
            z_prev.clone_from(&z);
            z = z_new;
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
            let beta = (t - 1.0) / t_next;
            y = z.iter().zip(&z_prev).map(|(a, b)| a + beta * (a - b)).collect();
            t = t_next;
            lip *= 0.95;
            if step < 1e-14 {
                break;
            }
        }
        if consider(&z, tau, &mut best) <= tol {
            break;
        }
        tau *= 0.25;
    }

    let (value, cert, z) = best.expect("at least one stage ran");
    Ok(MinimaxOracle {
        value,
        certificate: cert,
        converged: cert <= tol,
        iterations,
        method: "log-sum-exp continuation, accelerated projected gradient, duality certificate".into(),
        z,
    })
}

/// Analytic bound `2m sqrt(10 (B_Θ² B_∇² + B_L² ln m) / T)`.
pub fn analytic_bound(m: usize, b_theta: f64, b_grad: f64, b_loss: f64, t: usize) -> f64 {
    let m_f = m as f64;
    2.0 * m_f * (10.0 * (b_theta.powi(2) * b_grad.powi(2) + b_loss.powi(2) * m_f.ln()) / t as f64).sqrt()
}

/// Run settings for the stochastic side of the harness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapConfig {
    /// `eta_theta = theta_rate / sqrt(T)`.
    pub theta_rate: f64,
    /// `eta_q = q_rate / sqrt(T)`.
    pub q_rate: f64,
    pub batch_size: usize,
    pub pgd_steps: usize,
    pub seed: u64,
    #[doc(hidden)]
    #[serde(default)]
    pub corrupt_skip_renormalize: bool,
}

impl Default for GapConfig {
    fn default() -> Self {
        Self {
            theta_rate: 1.0,
            q_rate: 1.0,
            batch_size: 8,
            pgd_steps: 5,
            seed: 0,
            corrupt_skip_renormalize: false,
        }
    }
}

impl GapConfig {
    /// Training configuration for a run of length `t`. The attack uses
    /// step `2 eps` so one sign step reaches the exact maximiser of a linear model.
    pub fn train_config(&self, inst: &ConvexInstance, t: usize, replicate: usize) -> TrainConfig {
        let root = (t as f64).sqrt();
        let attack = AttackConfig {
            epsilon: inst.epsilon,
            eta_delta: 2.0 * inst.epsilon,
            steps: self.pgd_steps,
            sigma: inst.epsilon * inst.epsilon,
            mode: PerturbMode::Batch,
            clamp_domain: false,
            normalize_group_weight: false,
        };
        TrainConfig {
            eta_theta: self.theta_rate / root,
            total_steps: t,
            batch_size: self.batch_size,
            attack: Some(attack),
            eta_q: Some(self.q_rate / root),
            seed: derive_seed(self.seed, &format!("convergence/{t}/{replicate}")),
            eval_every: t.max(1),
            theta_radius: Some(inst.b_theta),
            model: ModelSpec {
                hidden: vec![],
                activation: Activation::Identity,
            },
            eval_attack: attack,
            track_bounds: true,
            corrupt_skip_renormalize: self.corrupt_skip_renormalize,
            ..TrainConfig::new(Method::AdvGdro)
        }
    }
}

/// Outcome of one replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Replicate {
    pub gap: f64,
    pub max_loss: f64,
    pub max_grad: f64,
    pub mean_saturation: f64,
}

/// Per-`T` gap statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapEstimate {
    pub t: usize,
    pub gaps: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub median: f64,
    pub max_loss: f64,
    pub max_grad: f64,
    pub mean_saturation: f64,
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// One run of `t` steps; gap of its average iterate against `minimax_value`.
pub fn run_replicate(
    inst: &ConvexInstance,
    cfg: &GapConfig,
    minimax_value: f64,
    t: usize,
    replicate: usize,
) -> Result<Replicate> {
    let tc = cfg.train_config(inst, t, replicate);
    let rec = train(&tc, &inst.dataset, None)?;
    let avg = rec.average_params()?;
    let worst = worst_case_adv_loss(&avg, inst)?
        .into_iter()
        .fold(f64::NEG_INFINITY, f64::max);
    let fold = |f: fn(&crate::trainers::StepRecord) -> Option<f64>| {
        rec.steps.iter().filter_map(f).fold(0.0, f64::max)
    };
    let sat = if rec.steps.is_empty() {
        0.0
    } else {
        rec.steps.iter().map(|s| s.saturation).sum::<f64>() / rec.steps.len() as f64
    };
    Ok(Replicate {
        gap: worst - minimax_value,
        max_loss: fold(|s| s.max_example_loss),
        max_grad: fold(|s| s.max_example_grad_norm),
        mean_saturation: sat,
    })
}

/// Mean, dispersion and measured constants over `replicates` runs of length `t`.
pub fn estimate_gap(
    inst: &ConvexInstance,
    cfg: &GapConfig,
    oracle: &MinimaxOracle,
    t: usize,
    replicates: usize,
) -> Result<GapEstimate> {
    if replicates == 0 || t == 0 {
        return Err(Error::Parameter("need at least one replicate and one step".into()));
    }
    let reps: Vec<Replicate> = (0..replicates)
        .into_par_iter()
        .map(|r| run_replicate(inst, cfg, oracle.value, t, r))
        .collect::<Result<_>>()?;
    let gaps: Vec<f64> = reps.iter().map(|r| r.gap).collect();
    let n = gaps.len() as f64;
    let mean = gaps.iter().sum::<f64>() / n;
    let var = if gaps.len() > 1 {
        gaps.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    Ok(GapEstimate {
        t,
        median: median(&gaps),
        mean,
        std: var.sqrt(),
        max_loss: reps.iter().map(|r| r.max_loss).fold(0.0, f64::max),
        max_grad: reps.iter().map(|r| r.max_grad).fold(0.0, f64::max),
        mean_saturation: reps.iter().map(|r| r.mean_saturation).sum::<f64>() / n,
        gaps,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub t: usize,
    pub epsilon_t_mean: f64,
    pub epsilon_t_std: f64,
    pub epsilon_t_median: f64,
    pub bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub m: usize,
    pub b_theta: f64,
    pub b_grad: f64,
    pub b_loss: f64,
    pub epsilon: f64,
    pub replicates: usize,
    pub minimax_value: f64,
    pub oracle_method: String,
    pub oracle_certificate: f64,
    pub oracle_converged: bool,
    pub mean_saturation: f64,
    pub rows: Vec<ReportRow>,
    pub estimates: Vec<GapEstimate>,
}

/// Full harness: oracle, every `T` in `ts`, bounds from constants measured over all runs.
pub fn run_report(inst: &ConvexInstance, cfg: &GapConfig, ts: &[usize], replicates: usize) -> Result<ConvergenceReport> {
    let oracle = solve_minimax(inst, 1e-6)?;
    let estimates: Vec<GapEstimate> = ts
        .par_iter()
        .map(|&t| estimate_gap(inst, cfg, &oracle, t, replicates))
        .collect::<Result<_>>()?;
    Ok(assemble(inst, &oracle, replicates, estimates))
}

pub fn assemble(
    inst: &ConvexInstance,
    oracle: &MinimaxOracle,
    replicates: usize,
    estimates: Vec<GapEstimate>,
) -> ConvergenceReport {
    let m = inst.num_groups();
    let b_loss = estimates.iter().map(|e| e.max_loss).fold(0.0, f64::max);
    let b_grad = estimates.iter().map(|e| e.max_grad).fold(0.0, f64::max);
    let rows = estimates
        .iter()
        .map(|e| ReportRow {
            t: e.t,
            epsilon_t_mean: e.mean,
            epsilon_t_std: e.std,
            epsilon_t_median: e.median,
            bound: analytic_bound(m, inst.b_theta, b_grad, b_loss, e.t),
        })
        .collect();
    let mean_saturation = if estimates.is_empty() {
        0.0
    } else {
        estimates.iter().map(|e| e.mean_saturation).sum::<f64>() / estimates.len() as f64
    };
    ConvergenceReport {
        m,
        b_theta: inst.b_theta,
        b_grad,
        b_loss,
        epsilon: inst.epsilon,
        replicates,
        minimax_value: oracle.value,
        oracle_method: oracle.method.clone(),
        oracle_certificate: oracle.certificate,
        oracle_converged: oracle.converged,
        mean_saturation,
        rows,
        estimates,
    }
}

/// Mean gap within the bound, per row.
pub fn check_bound(report: &ConvergenceReport) -> Vec<bool> {
    report.rows.iter().map(|r| r.epsilon_t_mean <= r.bound).collect()
}

/// Number of increases along `v`.
pub fn inversions(v: &[f64]) -> usize {
    v.windows(2).filter(|w| w[1] > w[0]).count()
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Parameter("slope needs at least two paired points".into()));
    }
    if x.iter().chain(y).any(|&v| !(v > 0.0)) {
        return Err(Error::Numeric("log-log slope needs positive values".into()));
    }
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    Ok(sxy / sxx)
}

impl ConvergenceReport {
    pub fn medians(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.epsilon_t_median).collect()
    }

    pub fn slope(&self) -> Result<f64> {
        let t: Vec<f64> = self.rows.iter().map(|r| r.t as f64).collect();
        let e: Vec<f64> = self.rows.iter().map(|r| r.epsilon_t_mean).collect();
        loglog_slope(&t, &e)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("T,epsilon_T_mean,epsilon_T_std,bound\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{},{}\n", r.t, r.epsilon_t_mean, r.epsilon_t_std, r.bound));
        }
        s
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Io(e.to_string()))
    }
}
