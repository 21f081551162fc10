//! L-infinity PGD with Gaussian start, in batch and group-weighted variants.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::rng::RngState;
use crate::tensor::{sign, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PerturbMode {
    /// Every row steps with weight 1.
    Batch,
    /// Steps are scaled by the row's group weight.
    Group,
}

impl fmt::Display for PerturbMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PerturbMode::Batch => "batch",
            PerturbMode::Group => "group",
        })
    }
}

impl FromStr for PerturbMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "batch" => Ok(PerturbMode::Batch),
            "group" => Ok(PerturbMode::Group),
            other => Err(Error::Parameter(format!("unknown perturbation mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    /// Radius of the L-infinity ball.
    pub epsilon: f64,
    /// Ascent step size.
    pub eta_delta: f64,
    pub steps: usize,
    /// Std of the Gaussian start.
    pub sigma: f64,
    pub mode: PerturbMode,
    /// Clamp `x + delta` into `[0, 1]` (image-like features only).
    pub clamp_domain: bool,
    /// Multiply the group weight by the group count so uniform weights give unit steps.
    pub normalize_group_weight: bool,
}

impl AttackConfig {
    /// `eps = 2/255`, `sigma = eps^2`, `eta_delta = 0.01`, 5 steps.
    pub fn standard(mode: PerturbMode) -> Self {
        let epsilon = 2.0 / 255.0;
        Self {
            epsilon,
            eta_delta: 0.01,
            steps: 5,
            sigma: epsilon * epsilon,
            mode,
            clamp_domain: false,
            normalize_group_weight: false,
        }
    }

    /// Attack that never moves the input.
    pub fn none() -> Self {
        Self {
            epsilon: 0.0,
            eta_delta: 0.0,
            steps: 0,
            sigma: 0.0,
            mode: PerturbMode::Batch,
            clamp_domain: false,
            normalize_group_weight: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return Err(Error::Parameter(format!("epsilon must be >= 0, got {}", self.epsilon)));
        }
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return Err(Error::Parameter(format!("sigma must be >= 0, got {}", self.sigma)));
        }
        if self.steps > 0 && !(self.eta_delta > 0.0 && self.eta_delta.is_finite()) {
            return Err(Error::Parameter(format!(
                "eta_delta must be > 0 when steps > 0, got {}",
                self.eta_delta
            )));
        }
        Ok(())
    }

    /// Step weight of a group with weight `q_g` among `m` groups.
    pub fn step_weight(&self, q_g: f64, m: usize) -> f64 {
        match self.mode {
            PerturbMode::Batch => 1.0,
            PerturbMode::Group if self.normalize_group_weight => q_g * m as f64,
            PerturbMode::Group => q_g,
        }
    }

    /// Same configuration evaluated as a plain batch-mode attack.
    pub fn as_batch(&self) -> Self {
        Self {
            mode: PerturbMode::Batch,
            ..*self
        }
    }
}

/// Per-row additive noise, always inside the epsilon ball.
#[derive(Debug, Clone, PartialEq)]
pub struct Perturbation {
    pub delta: Tensor,
    pub epsilon: f64,
}

impl Perturbation {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            delta: Tensor::zeros(shape),
            epsilon: 0.0,
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.delta.max_abs()
    }

    /// Fraction of coordinates sitting on the ball boundary.
    pub fn saturated_fraction(&self) -> f64 {
        if self.delta.is_empty() || self.epsilon == 0.0 {
            return 0.0;
        }
        let hit = self
            .delta
            .data()
            .iter()
            .filter(|v| v.abs() == self.epsilon)
            .count();
        hit as f64 / self.delta.len() as f64
    }

    /// `x + delta`, optionally clamped into `[0, 1]`.
    pub fn apply(&self, x: &Tensor, clamp_domain: bool) -> Result<Tensor> {
        let out = x.add(&self.delta)?;
        if clamp_domain {
            out.clamp(0.0, 1.0)
        } else {
            Ok(out)
        }
    }
}

/// Gaussian draw with std `cfg.sigma`, projected into the ball.
///
/// Always consumes `prod(shape)` normals from `rng`.
pub fn init_perturbation(rng: &mut RngState, shape: &[usize], cfg: &AttackConfig) -> Result<Perturbation> {
    cfg.validate()?;
    let raw = rng.sample_gaussian(shape, cfg.sigma)?;
    Ok(Perturbation {
        delta: raw.clamp(-cfg.epsilon, cfg.epsilon)?,
        epsilon: cfg.epsilon,
    })
}

/// One signed ascent step with the same weight for every row.
pub fn pgd_step(
    params: &ModelParams,
    x: &Tensor,
    y: &[usize],
    p: &Perturbation,
    cfg: &AttackConfig,
    group_weight: f64,
) -> Result<Perturbation> {
    let w = match cfg.mode {
        PerturbMode::Batch => 1.0,
        PerturbMode::Group => group_weight,
    };
    step_with(params, x, y, p, cfg, |_| w)
}

/// One ascent step where row `i` is scaled by `row_weights[i]` in group mode.
pub fn pgd_step_rows(
    params: &ModelParams,
    x: &Tensor,
    y: &[usize],
    p: &Perturbation,
    cfg: &AttackConfig,
    row_weights: &[f64],
) -> Result<Perturbation> {
    if row_weights.len() != x.rows() {
        return Err(Error::dim("pgd_step_rows", x.shape(), &[row_weights.len()]));
    }
    match cfg.mode {
        PerturbMode::Batch => step_with(params, x, y, p, cfg, |_| 1.0),
        PerturbMode::Group => step_with(params, x, y, p, cfg, |i| row_weights[i]),
    }
}

fn step_with(
    params: &ModelParams,
    x: &Tensor,
    y: &[usize],
    p: &Perturbation,
    cfg: &AttackConfig,
    weight_of_row: impl Fn(usize) -> f64,
) -> Result<Perturbation> {
    if p.delta.shape() != x.shape() {
        return Err(Error::dim("pgd_step", x.shape(), p.delta.shape()));
    }
    let x_adv = p.apply(x, cfg.clamp_domain)?;
    let grads = params.loss_and_grads(&x_adv, y)?;
    let eps = cfg.epsilon;
    let d = x.cols();
    let mut delta = p.delta.clone();
    for (i, (row, grow)) in delta
        .data_mut()
        .chunks_mut(d)
        .zip(grads.grad_x.data().chunks(d))
        .enumerate()
    {
        let step = cfg.eta_delta * weight_of_row(i);
        for (v, &g) in row.iter_mut().zip(grow) {
            *v = (*v + step * sign(g)).clamp(-eps, eps);
        }
    }
    Ok(Perturbation {
        delta,
        epsilon: eps,
    })
}

/// Gaussian start followed by `cfg.steps` PGD steps. Returns `(x_adv, delta)`.
pub fn run_attack(
    params: &ModelParams,
    x: &Tensor,
    y: &[usize],
    cfg: &AttackConfig,
    group_weight: f64,
    rng: &mut RngState,
) -> Result<(Tensor, Perturbation)> {
    let mut p = init_perturbation(rng, x.shape(), cfg)?;
    for _ in 0..cfg.steps {
        p = pgd_step(params, x, y, &p, cfg, group_weight)?;
    }
    Ok((p.apply(x, cfg.clamp_domain)?, p))
}

/// [`run_attack`] with a weight per row.
pub fn run_attack_rows(
    params: &ModelParams,
    x: &Tensor,
    y: &[usize],
    cfg: &AttackConfig,
    row_weights: &[f64],
    rng: &mut RngState,
) -> Result<(Tensor, Perturbation)> {
    let mut p = init_perturbation(rng, x.shape(), cfg)?;
    for _ in 0..cfg.steps {
        p = pgd_step_rows(params, x, y, &p, cfg, row_weights)?;
    }
    Ok((p.apply(x, cfg.clamp_domain)?, p))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Activation, Layer};

    fn binary_linear(rng: &mut RngState, d: usize) -> ModelParams {
        ModelParams::init(d, &[], 2, Activation::Identity, rng).unwrap()
    }

    fn cfg(eps: f64, eta: f64, steps: usize, sigma: f64, mode: PerturbMode) -> AttackConfig {
        AttackConfig {
            epsilon: eps,
            eta_delta: eta,
            steps,
            sigma,
            mode,
            clamp_domain: false,
            normalize_group_weight: false,
        }
    }

    #[test]
    fn zero_sigma_start_is_zero() {
        let mut rng = RngState::new(1);
        let p = init_perturbation(&mut rng, &[3, 2], &cfg(0.1, 0.01, 1, 0.0, PerturbMode::Batch)).unwrap();
        assert_eq!(p.max_abs(), 0.0);
    }

    #[test]
    fn wide_start_is_projected() {
        let mut rng = RngState::new(2);
        let p = init_perturbation(&mut rng, &[50, 4], &cfg(0.1, 0.01, 1, 10.0, PerturbMode::Batch)).unwrap();
        assert!(p.delta.data().iter().all(|v| (-0.1..=0.1).contains(v)));
        assert!(p.saturated_fraction() > 0.9);
    }

    #[test]
    fn standard_settings() {
        let c = AttackConfig::standard(PerturbMode::Group);
        assert!((c.epsilon - 0.00784).abs() < 1e-5);
        assert!((c.sigma - 6.15e-5).abs() < 1e-7);
        assert_eq!(c.steps, 5);
        assert_eq!(c.eta_delta, 0.01);
    }

    #[test]
    fn invalid_configs() {
        assert!(cfg(-0.1, 0.01, 1, 0.0, PerturbMode::Batch).validate().is_err());
        assert!(cfg(0.1, 0.0, 1, 0.0, PerturbMode::Batch).validate().is_err());
        assert!(cfg(0.1, 0.0, 0, 0.0, PerturbMode::Batch).validate().is_ok());
        assert!(cfg(0.1, 0.1, 1, -1.0, PerturbMode::Batch).validate().is_err());
    }

    #[test]
    fn zero_group_weight_leaves_delta() {
        let mut rng = RngState::new(3);
        let params = binary_linear(&mut rng, 3);
        let x = rng.sample_gaussian(&[4, 3], 1.0).unwrap();
        let y = vec![0, 1, 1, 0];
        let c = cfg(0.2, 0.05, 1, 0.1, PerturbMode::Group);
        let p = init_perturbation(&mut rng, x.shape(), &c).unwrap();
        let q = pgd_step(&params, &x, &y, &p, &c, 0.0).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn saturated_entry_stays_on_boundary() {
        // logits = [0, x0]; label 0 so increasing x0 raises the loss.
        let w = Tensor::from_rows(&[vec![0.0, 1.0]]).unwrap();
        let params = ModelParams::new(vec![Layer::new(w, Tensor::zeros(&[2])).unwrap()], vec![]).unwrap();
        let x = Tensor::from_rows(&[vec![0.3]]).unwrap();
        let c = cfg(0.1, 0.05, 1, 0.0, PerturbMode::Batch);
        let p = Perturbation {
            delta: Tensor::from_rows(&[vec![0.1]]).unwrap(),
            epsilon: 0.1,
        };
        let q = pgd_step(&params, &x, &[0], &p, &c, 1.0).unwrap();
        assert_eq!(q.delta.data(), &[0.1]);
    }

    #[test]
    fn no_op_attacks() {
        let mut rng = RngState::new(4);
        let params = ModelParams::init(3, &[4], 2, Activation::Relu, &mut rng).unwrap();
        let x = rng.sample_gaussian(&[5, 3], 1.0).unwrap();
        let y = vec![0, 1, 0, 1, 1];
        let (xa, _) = run_attack(&params, &x, &y, &cfg(0.5, 0.1, 0, 0.0, PerturbMode::Batch), 1.0, &mut rng).unwrap();
        assert_eq!(xa, x);
        let (xb, _) = run_attack(&params, &x, &y, &cfg(0.0, 0.1, 7, 1.0, PerturbMode::Batch), 1.0, &mut rng).unwrap();
        assert_eq!(xb, x);
    }

    /// Closed-form maximiser for a two-class linear model: every coordinate moves
    /// by `eps` against the margin direction `w_y - w_other`.
    fn closed_form_delta(params: &ModelParams, y: &[usize], eps: f64) -> Vec<f64> {
        let w = &params.layers()[0].weight;
        let d = w.shape()[0];
        let mut out = Vec::new();
        for &yi in y {
            for k in 0..d {
                let margin_dir = w.get(k, yi) - w.get(k, 1 - yi);
                out.push(-eps * sign(margin_dir));
            }
        }
        out
    }

    #[test]
    fn linear_attack_reaches_closed_form() {
        let mut rng = RngState::new(5);
        let params = binary_linear(&mut rng, 4);
        let x = rng.sample_gaussian(&[6, 4], 1.0).unwrap();
        let y: Vec<usize> = (0..6).map(|i| i % 2).collect();
        let c = cfg(0.1, 0.03, 4, 0.0, PerturbMode::Batch);
        let (_, p) = run_attack(&params, &x, &y, &c, 1.0, &mut rng).unwrap();
        assert_eq!(p.delta.data(), closed_form_delta(&params, &y, 0.1).as_slice());
    }

    #[test]
    fn group_weight_one_matches_batch_bitwise() {
        let mut rng = RngState::new(6);
        let params = ModelParams::init(3, &[5], 2, Activation::Tanh, &mut rng).unwrap();
        let x = rng.sample_gaussian(&[8, 3], 1.0).unwrap();
        let y: Vec<usize> = (0..8).map(|i| i % 2).collect();
        let batch = cfg(0.1, 0.03, 5, 0.01, PerturbMode::Batch);
        let group = AttackConfig { mode: PerturbMode::Group, ..batch };
        let a = run_attack(&params, &x, &y, &batch, 0.37, &mut RngState::new(9)).unwrap();
        let b = run_attack(&params, &x, &y, &group, 1.0, &mut RngState::new(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn step_weight_modes() {
        let mut c = cfg(0.1, 0.1, 1, 0.0, PerturbMode::Batch);
        assert_eq!(c.step_weight(0.25, 4), 1.0);
        c.mode = PerturbMode::Group;
        assert_eq!(c.step_weight(0.25, 4), 0.25);
        c.normalize_group_weight = true;
        assert_eq!(c.step_weight(0.25, 4), 1.0);
    }

    #[test]
    fn domain_clamp() {
        let mut rng = RngState::new(7);
        let params = binary_linear(&mut rng, 2);
        let x = Tensor::from_rows(&[vec![0.0, 1.0], vec![0.5, 0.99]]).unwrap();
        let c = AttackConfig {
            clamp_domain: true,
            ..cfg(0.1, 0.1, 2, 0.0, PerturbMode::Batch)
        };
        let (xa, _) = run_attack(&params, &x, &[0, 1], &c, 1.0, &mut rng).unwrap();
        assert!(xa.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(128))]

            #[test]
            fn projection_invariant(
                seed in any::<u64>(),
                eps in 0.0f64..0.5,
                eta in 0.001f64..1.0,
                w in 0.0f64..1.0,
                sigma in 0.0f64..2.0,
            ) {
                let mut rng = RngState::new(seed);
                let params = ModelParams::init(3, &[4], 3, Activation::Relu, &mut rng).unwrap();
                let x = rng.sample_gaussian(&[5, 3], 1.0).unwrap();
                let y: Vec<usize> = (0..5).map(|i| i % 3).collect();
                let c = cfg(eps, eta, 1, sigma, PerturbMode::Group);
                let mut p = init_perturbation(&mut rng, x.shape(), &c).unwrap();
                prop_assert!(p.max_abs() <= eps);
                for _ in 0..3 {
                    p = pgd_step(&params, &x, &y, &p, &c, w).unwrap();
                    prop_assert!(p.max_abs() <= eps);
                }
            }

            #[test]
            fn displacement_monotone_in_weight(
                seed in any::<u64>(),
                w1 in 0.0f64..1.0,
                w2 in 0.0f64..1.0,
            ) {
                let (lo, hi) = if w1 <= w2 { (w1, w2) } else { (w2, w1) };
                let mut rng = RngState::new(seed);
                let params = binary_linear(&mut rng, 3);
                let x = rng.sample_gaussian(&[4, 3], 1.0).unwrap();
                let y = vec![0, 1, 0, 1];
                // Large radius so projection never binds and the raw step is visible.
                let c = cfg(100.0, 0.1, 1, 0.0, PerturbMode::Group);
                let p = Perturbation::zeros(x.shape());
                let a = pgd_step(&params, &x, &y, &p, &c, lo).unwrap();
                let b = pgd_step(&params, &x, &y, &p, &c, hi).unwrap();
                for (da, db) in a.delta.data().iter().zip(b.delta.data()) {
                    prop_assert!(da.abs() <= db.abs());
                }
            }
        }
    }
}
