//! ERM, adversarial ERM, group DRO and adversarial group DRO on one step loop.
//!
//! Every step consumes the training stream in the same order regardless of
//! method: one group index, `batch_size` row indices, then `batch_size * d`
//! standard normals for the attack start. Methods that do not need a component
//! still draw it, so runs that differ only by a degenerate setting (`eps = 0`,
//! one group) follow identical streams and identical parameter trajectories.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attack::{init_perturbation, pgd_step, pgd_step_rows, AttackConfig, PerturbMode, Perturbation};
use crate::data::{sample_rows, Batch, GroupedDataset};
use crate::dro::GroupWeights;
use crate::error::{Error, Result};
use crate::eval::{evaluate, MetricsReport};
use crate::model::{Activation, ModelParams};
use crate::rng::RngState;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Erm,
    AdvErm,
    Gdro,
    AdvGdro,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Erm, Method::AdvErm, Method::Gdro, Method::AdvGdro];

    pub fn is_adversarial(self) -> bool {
        matches!(self, Method::AdvErm | Method::AdvGdro)
    }

    pub fn is_dro(self) -> bool {
        matches!(self, Method::Gdro | Method::AdvGdro)
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Erm => "erm",
            Method::AdvErm => "adv_erm",
            Method::Gdro => "gdro",
            Method::AdvGdro => "adv_gdro",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "erm" => Ok(Method::Erm),
            "adv_erm" => Ok(Method::AdvErm),
            "gdro" => Ok(Method::Gdro),
            "adv_gdro" => Ok(Method::AdvGdro),
            other => Err(Error::Config(format!("unknown method `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    /// Pick one group uniformly, then a batch from that group.
    UniformGroup,
    /// Draw the batch from the whole dataset; each row carries its group's weight.
    MixtureBatch,
}

impl fmt::Display for Sampling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Sampling::UniformGroup => "uniform_group",
            Sampling::MixtureBatch => "mixture_batch",
        })
    }
}

impl FromStr for Sampling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform_group" => Ok(Sampling::UniformGroup),
            "mixture_batch" => Ok(Sampling::MixtureBatch),
            other => Err(Error::Config(format!("unknown sampling `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            hidden: vec![16],
            activation: Activation::Relu,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub method: Method,
    pub eta_theta: f64,
    pub total_steps: usize,
    pub batch_size: usize,
    /// Present exactly for the adversarial methods.
    pub attack: Option<AttackConfig>,
    /// Present exactly for the DRO methods.
    pub eta_q: Option<f64>,
    pub seed: u64,
    pub eval_every: usize,
    pub sampling: Sampling,
    pub momentum: f64,
    /// Project parameters onto this L2 ball after every update.
    pub theta_radius: Option<f64>,
    pub model: ModelSpec,
    /// Attack used for validation passes; always run in batch mode.
    pub eval_attack: AttackConfig,
    /// Record per-example loss and gradient-norm maxima (costs one backward pass per row).
    pub track_bounds: bool,
    /// Skips renormalising q. Only for mutation tests of the convergence check.
    #[doc(hidden)]
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub corrupt_skip_renormalize: bool,
}

impl TrainConfig {
    /// Defaults for `method`: feature-input settings (`eta_theta = 0.001`,
    /// batch 110), `eps = 2/255`, 5 PGD steps of 0.01, `eta_q = 0.01`.
    pub fn new(method: Method) -> Self {
        Self {
            method,
            eta_theta: 0.001,
            total_steps: 1000,
            batch_size: 110,
            attack: method
                .is_adversarial()
                .then(|| AttackConfig::standard(PerturbMode::Group)),
            eta_q: method.is_dro().then_some(0.01),
            seed: 0,
            eval_every: 100,
            sampling: Sampling::UniformGroup,
            momentum: 0.0,
            theta_radius: None,
            model: ModelSpec::default(),
            eval_attack: AttackConfig::standard(PerturbMode::Batch),
            track_bounds: false,
            corrupt_skip_renormalize: false,
        }
    }

    /// From-scratch settings: `eta_theta = 0.1`, batch 128.
    pub fn from_scratch(method: Method) -> Self {
        Self {
            eta_theta: 0.1,
            batch_size: 128,
            ..Self::new(method)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.method.is_adversarial() != self.attack.is_some() {
            return Err(Error::Config(format!(
                "method {} {} an attack configuration",
                self.method,
                if self.method.is_adversarial() { "requires" } else { "does not take" }
            )));
        }
        if self.method.is_dro() != self.eta_q.is_some() {
            return Err(Error::Config(format!(
                "method {} {} eta_q",
                self.method,
                if self.method.is_dro() { "requires" } else { "does not take" }
            )));
        }
        if let Some(a) = &self.attack {
            a.validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        self.eval_attack
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        if let Some(q) = self.eta_q {
            if !(q >= 0.0) || !q.is_finite() {
                return Err(Error::Config(format!("eta_q must be >= 0, got {q}")));
            }
        }
        if !(self.eta_theta >= 0.0) || !self.eta_theta.is_finite() {
            return Err(Error::Config(format!("eta_theta must be >= 0, got {}", self.eta_theta)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if let Some(r) = self.theta_radius {
            if !(r > 0.0) || !r.is_finite() {
                return Err(Error::Config(format!("theta_radius must be > 0, got {r}")));
            }
        }
        if self.model.hidden.contains(&0) {
            return Err(Error::Config("hidden layer widths must be positive".into()));
        }
        Ok(())
    }

    /// Validation metric used for model selection.
    pub fn selection_metric(&self, r: &MetricsReport) -> f64 {
        if self.method.is_adversarial() {
            r.robust_adv_acc
        } else {
            r.robust_acc
        }
    }
}

/// Per-step log entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    /// Group drawn this step (drawn and unused for ERM methods and mixture batches).
    pub group: usize,
    /// Unweighted mean loss at the attacked batch, before the update.
    pub loss: f64,
    /// Group weights after the update (empty for ERM methods).
    pub q: Vec<f64>,
    /// Fraction of perturbation coordinates on the ball boundary.
    pub saturation: f64,
    pub max_example_loss: Option<f64>,
    pub max_example_grad_norm: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSnapshot {
    pub step: usize,
    pub report: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestCheckpoint {
    pub step: usize,
    pub metric: f64,
    pub params: ModelParams,
}

/// Running sum of parameter vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AverageIterate {
    sum: Vec<f64>,
    count: usize,
}

impl AverageIterate {
    pub fn new(num_params: usize) -> Self {
        Self {
            sum: vec![0.0; num_params],
            count: 0,
        }
    }

    pub fn push(&mut self, params: &ModelParams) {
        for (s, v) in self.sum.iter_mut().zip(params.flatten()) {
            *s += v;
        }
        self.count += 1;
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// Mean of the pushed iterates in flat layout; `None` before the first push.
    pub fn mean_flat(&self) -> Option<Vec<f64>> {
        (self.count > 0).then(|| self.sum.iter().map(|s| s / self.count as f64).collect())
    }

    pub fn mean(&self, like: &ModelParams) -> Result<Option<ModelParams>> {
        self.mean_flat().map(|f| like.with_flat(&f)).transpose()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub config: TrainConfig,
    pub initial_params: ModelParams,
    pub final_params: ModelParams,
    pub final_weights: Option<GroupWeights>,
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalSnapshot>,
    pub best: Option<BestCheckpoint>,
    pub average: AverageIterate,
    pub steps_per_epoch: usize,
}

impl RunRecord {
    /// Selected model: best validation checkpoint, else the final parameters.
    pub fn selected_params(&self) -> &ModelParams {
        self.best.as_ref().map_or(&self.final_params, |b| &b.params)
    }

    pub fn average_params(&self) -> Result<ModelParams> {
        Ok(self
            .average
            .mean(&self.final_params)?
            .unwrap_or_else(|| self.initial_params.clone()))
    }

    pub fn steps_csv(&self) -> String {
        let m = self.final_weights.as_ref().map_or(0, GroupWeights::len);
        let mut s = String::from("step,method,g,loss");
        for g in 0..m {
            s.push_str(&format!(",q_{g}"));
        }
        s.push('\n');
        for r in &self.steps {
            s.push_str(&format!("{},{},{},{}", r.step, self.config.method, r.group, r.loss));
            for v in &r.q {
                s.push_str(&format!(",{v}"));
            }
            s.push('\n');
        }
        s
    }

    pub fn evals_csv(&self) -> String {
        let mut s = format!("step,epoch,{}\n", MetricsReport::CSV_HEADER);
        for e in &self.evals {
            s.push_str(&format!(
                "{},{},{}\n",
                e.step,
                e.step / self.steps_per_epoch.max(1),
                e.report.csv_row()
            ));
        }
        s
    }
}

/// `theta - eta * scale * grad`.
fn sgd(params: &ModelParams, grad: &ModelParams, eta: f64, scale: f64) -> Result<ModelParams> {
    let mut next = params.clone();
    next.axpy(-(eta * scale), grad)?;
    Ok(next)
}

/// One plain SGD step on the batch mean loss.
pub fn erm_step(params: &ModelParams, batch: &Batch, cfg: &TrainConfig) -> Result<ModelParams> {
    let g = params.loss_and_grads(&batch.x, &batch.y)?;
    sgd(params, &g.grad_theta, cfg.eta_theta, 1.0)
}

/// Batch-mode attack with weight 1, then SGD on the attacked batch.
pub fn adv_erm_step(
    params: &ModelParams,
    batch: &Batch,
    cfg: &TrainConfig,
    rng: &mut RngState,
) -> Result<ModelParams> {
    let attack = cfg
        .attack
        .ok_or_else(|| Error::Config("adv_erm needs an attack configuration".into()))?
        .as_batch();
    let mut p = init_perturbation(rng, batch.x.shape(), &attack)?;
    for _ in 0..attack.steps {
        p = pgd_step(params, &batch.x, &batch.y, &p, &attack, 1.0)?;
    }
    let x_adv = p.apply(&batch.x, attack.clamp_domain)?;
    let g = params.loss_and_grads(&x_adv, &batch.y)?;
    sgd(params, &g.grad_theta, cfg.eta_theta, 1.0)
}

/// Group DRO step: the adversarial group DRO step with the attack removed.
pub fn gdro_step(
    params: &ModelParams,
    weights: &GroupWeights,
    ds: &GroupedDataset,
    cfg: &TrainConfig,
    rng: &mut RngState,
) -> Result<(ModelParams, GroupWeights)> {
    if cfg.method != Method::Gdro {
        return Err(Error::Config(format!("gdro_step called with method {}", cfg.method)));
    }
    let mut st = TrainerState::from_parts(params.clone(), Some(weights.clone()), rng.clone());
    st.advance(ds, cfg)?;
    *rng = st.rng;
    Ok((st.params, st.weights.expect("dro method keeps weights")))
}

/// One iteration of adversarial group DRO.
pub fn adv_gdro_step(
    params: &ModelParams,
    weights: &GroupWeights,
    ds: &GroupedDataset,
    cfg: &TrainConfig,
    rng: &mut RngState,
) -> Result<(ModelParams, GroupWeights)> {
    if cfg.method != Method::AdvGdro {
        return Err(Error::Config(format!("adv_gdro_step called with method {}", cfg.method)));
    }
    let mut st = TrainerState::from_parts(params.clone(), Some(weights.clone()), rng.clone());
    st.advance(ds, cfg)?;
    *rng = st.rng;
    Ok((st.params, st.weights.expect("dro method keeps weights")))
}

/// Mutable state of one run: parameters, group weights, momentum buffer, stream.
#[derive(Debug, Clone)]
pub struct TrainerState {
    pub params: ModelParams,
    pub weights: Option<GroupWeights>,
    velocity: Option<ModelParams>,
    pub rng: RngState,
}

impl TrainerState {
    pub fn from_parts(params: ModelParams, weights: Option<GroupWeights>, rng: RngState) -> Self {
        Self {
            params,
            weights,
            velocity: None,
            rng,
        }
    }

    /// Fresh state for `cfg`: initialised model, uniform q, training stream.
    pub fn init(cfg: &TrainConfig, ds: &GroupedDataset) -> Result<Self> {
        let mut init_rng = RngState::derived(cfg.seed, "init");
        let params = ModelParams::init(
            ds.dim(),
            &cfg.model.hidden,
            ds.num_classes.max(2),
            cfg.model.activation,
            &mut init_rng,
        )?;
        let weights = cfg
            .eta_q
            .map(|eta| GroupWeights::init_uniform(ds.num_groups, eta))
            .transpose()?;
        Ok(Self::from_parts(params, weights, RngState::derived(cfg.seed, "train")))
    }

    fn apply_update(&mut self, grad: &ModelParams, scale: f64, cfg: &TrainConfig) -> Result<()> {
        if cfg.momentum == 0.0 {
            self.params = sgd(&self.params, grad, cfg.eta_theta, scale)?;
        } else {
            let v = self.velocity.get_or_insert_with(|| grad.zeros_like());
            v.scale(cfg.momentum);
            v.axpy(scale, grad)?;
            self.params.axpy(-cfg.eta_theta, v)?;
        }
        if let Some(r) = cfg.theta_radius {
            self.params.project_l2(r);
        }
        if !self.params.is_finite() {
            return Err(Error::Numeric("parameters became non-finite".into()));
        }
        Ok(())
    }

    /// One training step under the fixed draw order.
    pub fn advance(&mut self, ds: &GroupedDataset, cfg: &TrainConfig) -> Result<StepRecord> {
        let m = ds.num_groups;
        let group = self.rng.index(m);
        let per_group = cfg.method.is_dro() && cfg.sampling == Sampling::UniformGroup;
        let rows = sample_rows(ds, &mut self.rng, cfg.batch_size, per_group.then_some(group))?;
        let batch = ds.batch(&rows)?;
        let attack = cfg.attack.unwrap_or_else(AttackConfig::none);
        let mut delta = init_perturbation(&mut self.rng, batch.x.shape(), &attack)?;

        // Attack against the current parameters and q.
        if cfg.attack.is_some() {
            match (&self.weights, cfg.sampling) {
                (Some(w), Sampling::MixtureBatch) => {
                    let rw: Vec<f64> = batch
                        .groups
                        .iter()
                        .map(|&g| attack.step_weight(w.get(g), m))
                        .collect();
                    for _ in 0..attack.steps {
                        delta = pgd_step_rows(&self.params, &batch.x, &batch.y, &delta, &attack, &rw)?;
                    }
                }
                (weights, _) => {
                    let w = match weights {
                        Some(w) if cfg.method.is_dro() => attack.step_weight(w.get(group), m),
                        _ => 1.0,
                    };
                    let step_cfg = if cfg.method.is_dro() { attack } else { attack.as_batch() };
                    for _ in 0..attack.steps {
                        delta = pgd_step(&self.params, &batch.x, &batch.y, &delta, &step_cfg, w)?;
                    }
                }
            }
        } else {
            delta = Perturbation::zeros(batch.x.shape());
        }
        let x_adv = if cfg.attack.is_some() {
            delta.apply(&batch.x, attack.clamp_domain)?
        } else {
            batch.x.clone()
        };

        let grads = self.params.loss_and_grads(&x_adv, &batch.y)?;
        let loss = grads.loss.value;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite training loss at group {group}")));
        }

        let (max_example_loss, max_example_grad_norm) = if cfg.track_bounds {
            let (l, g) = per_example_bounds(&self.params, &x_adv, &batch.y, &grads.per_example_loss)?;
            (Some(l), Some(g))
        } else {
            (None, None)
        };

        match (&mut self.weights, cfg.sampling) {
            (None, _) => {
                self.apply_update(&grads.grad_theta, 1.0, cfg)?;
            }
            (Some(w), Sampling::UniformGroup) => {
                if cfg.corrupt_skip_renormalize {
                    w.eg_update_unnormalized(group, loss)?;
                } else {
                    w.eg_update(group, loss)?;
                }
                let qg = w.get(group);
                self.apply_update(&grads.grad_theta, qg, cfg)?;
            }
            (Some(w), Sampling::MixtureBatch) => {
                let mut sums = vec![0.0; m];
                let mut counts = vec![0usize; m];
                for (&g, &l) in batch.groups.iter().zip(&grads.per_example_loss) {
                    sums[g] += l;
                    counts[g] += 1;
                }
                let obs: Vec<(usize, f64)> = (0..m)
                    .filter(|&g| counts[g] > 0)
                    .map(|g| (g, sums[g] / counts[g] as f64))
                    .collect();
                w.eg_update_many(&obs)?;
                let row_w: Vec<f64> = batch.groups.iter().map(|&g| w.get(g)).collect();
                let weighted = self
                    .params
                    .weighted_loss_and_grads(&x_adv, &batch.y, Some(&row_w))?;
                self.apply_update(&weighted.grad_theta, 1.0, cfg)?;
            }
        }

        Ok(StepRecord {
            step: 0,
            group,
            loss,
            q: self.weights.as_ref().map_or_else(Vec::new, |w| w.q().to_vec()),
            saturation: delta.saturated_fraction(),
            max_example_loss,
            max_example_grad_norm,
        })
    }
}

/// Largest per-row loss and largest per-row parameter-gradient norm.
fn per_example_bounds(
    params: &ModelParams,
    x: &crate::tensor::Tensor,
    y: &[usize],
    losses: &[f64],
) -> Result<(f64, f64)> {
    let max_loss = losses.iter().copied().fold(0.0, f64::max);
    let mut max_norm: f64 = 0.0;
    for i in 0..x.rows() {
        let xi = x.select_rows(&[i])?;
        let g = params.loss_and_grads(&xi, &y[i..=i])?;
        max_norm = max_norm.max(g.grad_theta.norm2());
    }
    Ok((max_loss, max_norm))
}

/// Runs `cfg.total_steps` steps with validation every `cfg.eval_every` steps
/// (and once before training). The best validation checkpoint is kept.
pub fn train(cfg: &TrainConfig, train_ds: &GroupedDataset, val: Option<&GroupedDataset>) -> Result<RunRecord> {
    cfg.validate()?;
    if train_ds.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    if cfg.method.is_dro() {
        train_ds.require_nonempty_groups()?;
    }
    if let Some(v) = val {
        if v.dim() != train_ds.dim() {
            return Err(Error::Data(format!(
                "validation dim {} differs from training dim {}",
                v.dim(),
                train_ds.dim()
            )));
        }
    }

    let mut state = TrainerState::init(cfg, train_ds)?;
    let initial_params = state.params.clone();
    let mut eval_rng = RngState::derived(cfg.seed, "eval");
    let mut average = AverageIterate::new(initial_params.num_params());
    let mut steps = Vec::with_capacity(cfg.total_steps);
    let mut evals = Vec::new();
    let mut best: Option<BestCheckpoint> = None;

    let mut validate = |step: usize, params: &ModelParams, evals: &mut Vec<EvalSnapshot>, best: &mut Option<BestCheckpoint>| -> Result<()> {
        if let Some(v) = val {
            let report = evaluate(params, v, Some(&cfg.eval_attack), &mut eval_rng)?;
            let metric = cfg.selection_metric(&report);
            if best.as_ref().is_none_or(|b| metric > b.metric) {
                *best = Some(BestCheckpoint {
                    step,
                    metric,
                    params: params.clone(),
                });
            }
            evals.push(EvalSnapshot { step, report });
        }
        Ok(())
    };

    validate(0, &state.params, &mut evals, &mut best)?;
    for t in 1..=cfg.total_steps {
        let mut rec = state.advance(train_ds, cfg)?;
        rec.step = t;
        steps.push(rec);
        average.push(&state.params);
        if t % cfg.eval_every == 0 || t == cfg.total_steps {
            validate(t, &state.params, &mut evals, &mut best)?;
        }
    }

    Ok(RunRecord {
        config: cfg.clone(),
        initial_params,
        final_params: state.params,
        final_weights: state.weights,
        steps,
        evals,
        best,
        average,
        steps_per_epoch: train_ds.len().div_ceil(cfg.batch_size),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, Split, SpuriousSpec};
    use crate::tensor::Tensor;

    fn small_data(seed: u64) -> GroupedDataset {
        let spec = SpuriousSpec {
            train_sizes: [40, 10, 8, 30],
            val_sizes: [6; 4],
            test_sizes: [6; 4],
            core_dims: 2,
            spurious_dims: 1,
            noise_dims: 1,
            core_strength: 1.0,
            spurious_strength: 2.0,
            seed,
        };
        generate(&spec).unwrap().train
    }

    fn cfg(method: Method) -> TrainConfig {
        TrainConfig {
            eta_theta: 0.05,
            total_steps: 20,
            batch_size: 8,
            eval_every: 5,
            seed: 11,
            model: ModelSpec {
                hidden: vec![],
                activation: Activation::Identity,
            },
            ..TrainConfig::new(method)
        }
    }

    #[test]
    fn config_invariants() {
        let mut c = cfg(Method::Erm);
        c.eta_q = Some(0.01);
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = cfg(Method::AdvGdro);
        c.attack = None;
        assert!(c.validate().is_err());
        let mut c = cfg(Method::Gdro);
        c.eta_q = None;
        assert!(c.validate().is_err());
        assert!(cfg(Method::AdvGdro).validate().is_ok());
        let mut c = cfg(Method::Erm);
        c.batch_size = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn standard_default_rates() {
        let a = TrainConfig::from_scratch(Method::Erm);
        assert_eq!((a.eta_theta, a.batch_size), (0.1, 128));
        let b = TrainConfig::new(Method::AdvGdro);
        assert_eq!((b.eta_theta, b.batch_size), (0.001, 110));
        assert_eq!(b.eta_q, Some(0.01));
    }

    #[test]
    fn zero_rate_keeps_params() {
        let ds = small_data(1);
        let mut c = cfg(Method::Erm);
        c.eta_theta = 0.0;
        let mut rng = RngState::new(0);
        let p = ModelParams::init(ds.dim(), &[], 2, Activation::Identity, &mut rng).unwrap();
        let b = crate::data::sample_batch(&ds, &mut rng, 8, None).unwrap();
        assert_eq!(erm_step(&p, &b, &c).unwrap(), p);
    }

    #[test]
    fn erm_step_matches_scalar_calculus() {
        // One feature, logits [0, w x]: loss = softplus(-w x) for label 1.
        let w = Tensor::from_rows(&[vec![0.0, 0.5]]).unwrap();
        let p = ModelParams::new(vec![crate::model::Layer::new(w, Tensor::zeros(&[2])).unwrap()], vec![]).unwrap();
        let x = Tensor::from_rows(&[vec![2.0]]).unwrap();
        let batch = Batch { x, y: vec![1], groups: vec![0], rows: vec![0] };
        let mut c = cfg(Method::Erm);
        c.eta_theta = 0.1;
        let next = erm_step(&p, &batch, &c).unwrap();
        // d/dw1 = -(1 - sigmoid(w1 x - w0 x)) x with w1 x = 1
        let s = 1.0 / (1.0 + (-1.0f64).exp());
        let dw1 = -(1.0 - s) * 2.0;
        let dw0 = (1.0 - s) * 2.0;
        let got = next.layers()[0].weight.data();
        assert!((got[1] - (0.5 - 0.1 * dw1)).abs() < 1e-15);
        assert!((got[0] - (0.0 - 0.1 * dw0)).abs() < 1e-15);
    }

    #[test]
    fn small_step_descends() {
        let ds = small_data(2);
        let mut rng = RngState::new(3);
        let p = ModelParams::init(ds.dim(), &[], 2, Activation::Identity, &mut rng).unwrap();
        let b = crate::data::sample_batch(&ds, &mut rng, 16, None).unwrap();
        let mut c = cfg(Method::Erm);
        c.eta_theta = 1e-3;
        let before = p.loss_and_grads(&b.x, &b.y).unwrap().loss.value;
        let next = erm_step(&p, &b, &c).unwrap();
        let after = next.loss_and_grads(&b.x, &b.y).unwrap().loss.value;
        assert!(after <= before);
    }

    #[test]
    fn degenerate_attack_equals_erm_step() {
        let ds = small_data(3);
        let mut rng = RngState::new(4);
        let p = ModelParams::init(ds.dim(), &[3], 2, Activation::Relu, &mut rng).unwrap();
        let b = crate::data::sample_batch(&ds, &mut rng, 8, None).unwrap();
        let mut c = cfg(Method::AdvErm);
        c.attack = Some(AttackConfig { epsilon: 0.0, ..c.attack.unwrap() });
        assert_eq!(adv_erm_step(&p, &b, &c, &mut rng).unwrap(), erm_step(&p, &b, &c).unwrap());
        let mut c = cfg(Method::AdvErm);
        c.attack = Some(AttackConfig { steps: 0, sigma: 0.0, ..c.attack.unwrap() });
        assert_eq!(adv_erm_step(&p, &b, &c, &mut rng).unwrap(), erm_step(&p, &b, &c).unwrap());
    }

    #[test]
    fn higher_loss_group_gains_weight_when_sampled() {
        // Group 1 rows sit on the wrong side of a fixed model, so its loss is always larger.
        let x = Tensor::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
        let ds = GroupedDataset::new(x, vec![1, 0], vec![0, 1], 2, 2, Split::Train).unwrap();
        let w = Tensor::from_rows(&[vec![-1.0, 1.0]]).unwrap();
        let mut p = ModelParams::new(vec![crate::model::Layer::new(w, Tensor::zeros(&[2])).unwrap()], vec![]).unwrap();
        let mut c = cfg(Method::Gdro);
        c.eta_theta = 0.0;
        c.eta_q = Some(0.1);
        let mut q = GroupWeights::init_uniform(2, 0.1).unwrap();
        let mut rng = RngState::new(5);
        for _ in 0..30 {
            let probe = rng.clone().index(2);
            let before = q.get(1);
            let (np, nq) = gdro_step(&p, &q, &ds, &c, &mut rng).unwrap();
            if probe == 1 {
                assert!(nq.get(1) > before);
            }
            p = np;
            q = nq;
        }
    }

    #[test]
    fn zero_steps_gives_initial_params() {
        let ds = small_data(4);
        let mut c = cfg(Method::AdvGdro);
        c.total_steps = 0;
        let r = train(&c, &ds, Some(&ds)).unwrap();
        assert_eq!(r.final_params, r.initial_params);
        assert!(r.steps.is_empty());
        assert_eq!(r.evals.len(), 1);
        assert_eq!(r.average_params().unwrap(), r.initial_params);
    }

    #[test]
    fn runs_are_deterministic() {
        let ds = small_data(5);
        for m in Method::ALL {
            let a = train(&cfg(m), &ds, Some(&ds)).unwrap();
            let b = train(&cfg(m), &ds, Some(&ds)).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn average_iterate_matches_snapshots() {
        let ds = small_data(6);
        let c = TrainConfig { total_steps: 50, ..cfg(Method::AdvGdro) };
        let mut st = TrainerState::init(&c, &ds).unwrap();
        let mut snaps = Vec::new();
        let mut avg = AverageIterate::new(st.params.num_params());
        for _ in 0..50 {
            st.advance(&ds, &c).unwrap();
            snaps.push(st.params.flatten());
            avg.push(&st.params);
        }
        let mean = avg.mean_flat().unwrap();
        for k in 0..mean.len() {
            let direct: f64 = snaps.iter().map(|s| s[k]).sum::<f64>() / 50.0;
            assert!((direct - mean[k]).abs() < 1e-10);
        }
        let r = train(&c, &ds, None).unwrap();
        assert_eq!(r.average.mean_flat().unwrap(), mean);
    }

    #[test]
    fn replay_from_checkpointed_state() {
        let ds = small_data(7);
        let c = cfg(Method::AdvGdro);
        let mut st = TrainerState::init(&c, &ds).unwrap();
        for _ in 0..5 {
            st.advance(&ds, &c).unwrap();
        }
        let saved = st.clone();
        let mut a = saved.clone();
        let mut b = saved;
        a.advance(&ds, &c).unwrap();
        b.advance(&ds, &c).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.weights, b.weights);
    }

    #[test]
    fn empty_group_rejected_at_startup() {
        let x = Tensor::from_rows(&[vec![1.0], vec![2.0]]).unwrap();
        let ds = GroupedDataset::new(x, vec![0, 1], vec![0, 0], 2, 2, Split::Train).unwrap();
        assert!(matches!(train(&cfg(Method::Gdro), &ds, None), Err(Error::Data(_))));
        assert!(train(&cfg(Method::Erm), &ds, None).is_ok());
    }

    #[test]
    fn mixture_batches_keep_simplex() {
        let ds = small_data(8);
        let c = TrainConfig { sampling: Sampling::MixtureBatch, ..cfg(Method::AdvGdro) };
        let r = train(&c, &ds, None).unwrap();
        for s in &r.steps {
            assert!((s.q.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn momentum_changes_trajectory_only_when_enabled() {
        let ds = small_data(9);
        let plain = train(&cfg(Method::Erm), &ds, None).unwrap();
        let with = train(&TrainConfig { momentum: 0.9, ..cfg(Method::Erm) }, &ds, None).unwrap();
        assert_ne!(plain.final_params, with.final_params);
    }

    #[test]
    fn projection_bounds_parameters() {
        let ds = small_data(10);
        let c = TrainConfig { theta_radius: Some(0.3), eta_theta: 1.0, ..cfg(Method::AdvGdro) };
        let mut st = TrainerState::init(&c, &ds).unwrap();
        for _ in 0..20 {
            st.advance(&ds, &c).unwrap();
            assert!(st.params.norm2() <= 0.3 + 1e-12);
        }
    }
}
