//! Flat `key = value` run configuration.
//!
//! Keys (all optional; unset keys take the defaults shown):
//!
//! | key | default | meaning |
//! |---|---|---|
//! | `method` | `adv_gdro` | `erm`, `adv_erm`, `gdro`, `adv_gdro` |
//! | `steps` | `1000` | total steps |
//! | `batch_size` | `128` | rows per step |
//! | `eta_theta` | `0.1` | SGD rate |
//! | `eta_q` | `0.01` | group-weight rate (DRO methods only) |
//! | `eps` | `2/255` | L∞ budget, float or fraction (adversarial methods only) |
//! | `pgd_steps` | `5` | attack steps (adversarial only) |
//! | `eta_delta` | `0.01` | attack step size (adversarial only) |
//! | `sigma` | `eps²` | start-noise standard deviation (adversarial only) |
//! | `perturb_mode` | `group` | `group` or `batch` (adversarial only) |
//! | `normalize_group_weight` | `false` | scale group-mode attack steps by `m` |
//! | `clamp_domain` | `false` | clamp attacked inputs to `[0, 1]` |
//! | `sampling` | `uniform_group` | or `mixture_batch` (DRO methods only) |
//! | `seed` | `0` | root seed |
//! | `eval_every` | `100` | steps between validation passes |
//! | `eval_eps` | training `eps`, else `2/255` | budget of the evaluation attack |
//! | `momentum` | `0` | heavy-ball coefficient |
//! | `hidden` | `16` | comma-separated widths, `-` for a linear model |
//! | `activation` | `relu` | `relu`, `tanh`, `identity` |

use std::collections::BTreeMap;

use crate::attack::{AttackConfig, PerturbMode};
use crate::data::parse_key_values;
use crate::error::{Error, Result};
use crate::model::Activation;
use crate::trainers::{Method, ModelSpec, TrainConfig};

pub const TRAIN_KEYS: &[&str] = &[
    "method",
    "steps",
    "batch_size",
    "eta_theta",
    "eta_q",
    "eps",
    "pgd_steps",
    "eta_delta",
    "sigma",
    "perturb_mode",
    "normalize_group_weight",
    "clamp_domain",
    "sampling",
    "seed",
    "eval_every",
    "eval_eps",
    "momentum",
    "hidden",
    "activation",
];

const ATTACK_KEYS: &[&str] = &[
    "eps",
    "pgd_steps",
    "eta_delta",
    "sigma",
    "perturb_mode",
    "normalize_group_weight",
    "clamp_domain",
];

const DRO_KEYS: &[&str] = &["eta_q", "sampling"];

/// Accepts a float (`0.00784`) or an exact fraction (`2/255`).
pub fn parse_epsilon(s: &str) -> Result<f64> {
    let s = s.trim();
    let v = match s.split_once('/') {
        Some((a, b)) => {
            let num: f64 = a.trim().parse().map_err(|_| Error::Config(format!("bad numerator in `{s}`")))?;
            let den: f64 = b.trim().parse().map_err(|_| Error::Config(format!("bad denominator in `{s}`")))?;
            if den == 0.0 {
                return Err(Error::Config(format!("zero denominator in `{s}`")));
            }
            num / den
        }
        None => s.parse().map_err(|_| Error::Config(format!("bad epsilon `{s}`")))?,
    };
    if !v.is_finite() || v < 0.0 {
        return Err(Error::Config(format!("epsilon must be finite and >= 0, got `{s}`")));
    }
    Ok(v)
}

/// Parses a config file, rejecting unknown keys. Values stay as strings.
pub fn parse_config(text: &str, allowed: &[&str]) -> Result<BTreeMap<String, String>> {
    let kv = parse_key_values(text).map_err(|e| Error::Config(e.to_string()))?;
    let mut out = BTreeMap::new();
    for (k, (line, v)) in kv {
        if !allowed.contains(&k.as_str()) {
            return Err(Error::Config(format!("line {line}: unknown key `{k}`")));
        }
        out.insert(k, v);
    }
    Ok(out)
}

/// `base` with every entry of `overrides` replacing it.
pub fn layer(base: &BTreeMap<String, String>, overrides: &BTreeMap<String, String>) -> BTreeMap<String, String> {
    let mut out = base.clone();
    out.extend(overrides.iter().map(|(k, v)| (k.clone(), v.clone())));
    out
}

fn num<T: std::str::FromStr>(kv: &BTreeMap<String, String>, key: &str) -> Result<Option<T>> {
    kv.get(key)
        .map(|v| {
            v.parse()
                .map_err(|_| Error::Config(format!("`{key}` has invalid value `{v}`")))
        })
        .transpose()
}

fn flag(kv: &BTreeMap<String, String>, key: &str) -> Result<Option<bool>> {
    kv.get(key)
        .map(|v| match v.as_str() {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            _ => Err(Error::Config(format!("`{key}` must be true or false, got `{v}`"))),
        })
        .transpose()
}

pub fn parse_hidden(s: &str) -> Result<Vec<usize>> {
    let s = s.trim();
    if s.is_empty() || s == "-" {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|w| {
            w.trim()
                .parse::<usize>()
                .ok()
                .filter(|&v| v > 0)
                .ok_or_else(|| Error::Config(format!("bad hidden width `{w}`")))
        })
        .collect()
}

/// Builds a validated training configuration from resolved keys.
pub fn resolve_train(kv: &BTreeMap<String, String>) -> Result<TrainConfig> {
    if let Some(k) = kv.keys().find(|k| !TRAIN_KEYS.contains(&k.as_str())) {
        return Err(Error::Config(format!("unknown key `{k}`")));
    }
    let method: Method = kv.get("method").map_or(Ok(Method::AdvGdro), |m| m.parse())?;
    if !method.is_adversarial() {
        if let Some(k) = ATTACK_KEYS.iter().find(|k| kv.contains_key(**k)) {
            return Err(Error::Config(format!("`{k}` is not accepted by method {method}")));
        }
    }
    if !method.is_dro() {
        if let Some(k) = DRO_KEYS.iter().find(|k| kv.contains_key(**k)) {
            return Err(Error::Config(format!("`{k}` is not accepted by method {method}")));
        }
    }

    let mut cfg = TrainConfig::from_scratch(method);
    if let Some(v) = num(kv, "steps")? {
        cfg.total_steps = v;
    }
    if let Some(v) = num(kv, "batch_size")? {
        cfg.batch_size = v;
    }
    if let Some(v) = num(kv, "eta_theta")? {
        cfg.eta_theta = v;
    }
    if let Some(v) = num(kv, "seed")? {
        cfg.seed = v;
    }
    if let Some(v) = num(kv, "eval_every")? {
        cfg.eval_every = v;
    }
    if let Some(v) = num(kv, "momentum")? {
        cfg.momentum = v;
    }
    if method.is_dro() {
        if let Some(v) = num(kv, "eta_q")? {
            cfg.eta_q = Some(v);
        }
        if let Some(v) = kv.get("sampling") {
            cfg.sampling = v.parse()?;
        }
    }
    let eps = kv.get("eps").map(|e| parse_epsilon(e)).transpose()?;
    if method.is_adversarial() {
        let mode: PerturbMode = kv
            .get("perturb_mode")
            .map_or(Ok(PerturbMode::Group), |m| m.parse().map_err(|e: Error| Error::Config(e.to_string())))?;
        let mut a = AttackConfig::standard(mode);
        if let Some(e) = eps {
            a.epsilon = e;
            a.sigma = e * e;
        }
        if let Some(v) = num(kv, "pgd_steps")? {
            a.steps = v;
        }
        if let Some(v) = num(kv, "eta_delta")? {
            a.eta_delta = v;
        }
        if let Some(v) = num(kv, "sigma")? {
            a.sigma = v;
        }
        if let Some(v) = flag(kv, "normalize_group_weight")? {
            a.normalize_group_weight = v;
        }
        if let Some(v) = flag(kv, "clamp_domain")? {
            a.clamp_domain = v;
        }
        cfg.attack = Some(a);
    }
    let eval_eps = match kv.get("eval_eps") {
        Some(e) => parse_epsilon(e)?,
        None => cfg.attack.map_or(2.0 / 255.0, |a| a.epsilon),
    };
    cfg.eval_attack = AttackConfig {
        epsilon: eval_eps,
        sigma: eval_eps * eval_eps,
        clamp_domain: cfg.attack.is_some_and(|a| a.clamp_domain),
        ..AttackConfig::standard(PerturbMode::Batch)
    };
    let hidden = kv.get("hidden").map_or(Ok(vec![16]), |h| parse_hidden(h))?;
    let activation: Activation = kv
        .get("activation")
        .map_or(Ok(Activation::Relu), |a| a.parse().map_err(|e: Error| Error::Config(e.to_string())))?;
    cfg.model = ModelSpec { hidden, activation };
    cfg.validate()?;
    Ok(cfg)
}

/// The keys that reproduce `cfg` through [`resolve_train`].
pub fn train_keys(cfg: &TrainConfig) -> BTreeMap<String, String> {
    let mut kv = BTreeMap::new();
    let mut put = |k: &str, v: String| {
        kv.insert(k.to_string(), v);
    };
    put("method", cfg.method.to_string());
    put("steps", cfg.total_steps.to_string());
    put("batch_size", cfg.batch_size.to_string());
    put("eta_theta", cfg.eta_theta.to_string());
    put("seed", cfg.seed.to_string());
    put("eval_every", cfg.eval_every.to_string());
    put("eval_eps", cfg.eval_attack.epsilon.to_string());
    put("momentum", cfg.momentum.to_string());
    put(
        "hidden",
        if cfg.model.hidden.is_empty() {
            "-".into()
        } else {
            cfg.model.hidden.iter().map(|h| h.to_string()).collect::<Vec<_>>().join(",")
        },
    );
    put("activation", cfg.model.activation.to_string());
    if let Some(q) = cfg.eta_q {
        put("eta_q", q.to_string());
        put("sampling", cfg.sampling.to_string());
    }
    if let Some(a) = cfg.attack {
        put("eps", a.epsilon.to_string());
        put("pgd_steps", a.steps.to_string());
        put("eta_delta", a.eta_delta.to_string());
        put("sigma", a.sigma.to_string());
        put("perturb_mode", a.mode.to_string());
        put("normalize_group_weight", a.normalize_group_weight.to_string());
        put("clamp_domain", a.clamp_domain.to_string());
    }
    kv
}

pub fn to_text(kv: &BTreeMap<String, String>) -> String {
    kv.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kv(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn fractions_are_exact() {
        assert_eq!(parse_epsilon("2/255").unwrap(), 2.0 / 255.0);
        assert_eq!(parse_epsilon(" 8 / 255 ").unwrap(), 8.0 / 255.0);
        assert_eq!(parse_epsilon("0.00784").unwrap(), 0.00784);
        for bad in ["1/0", "-1", "x/2", "nan", "inf", "", "1/2/3"] {
            assert!(parse_epsilon(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn standard_attack_flags() {
        let c = resolve_train(&kv(&[
            ("method", "adv_gdro"),
            ("perturb_mode", "group"),
            ("eps", "0.00784"),
            ("pgd_steps", "5"),
            ("eta_delta", "0.01"),
            ("eta_q", "0.01"),
        ]))
        .unwrap();
        let a = c.attack.unwrap();
        assert_eq!((a.epsilon, a.steps, a.eta_delta, a.mode), (0.00784, 5, 0.01, PerturbMode::Group));
        assert_eq!(c.eta_q, Some(0.01));
    }

    #[test]
    fn method_invariants() {
        assert!(matches!(resolve_train(&kv(&[("method", "erm"), ("eta_q", "0.01")])), Err(Error::Config(_))));
        assert!(resolve_train(&kv(&[("method", "gdro"), ("eps", "2/255")])).is_err());
        assert!(resolve_train(&kv(&[("method", "erm")])).unwrap().attack.is_none());
        assert!(resolve_train(&kv(&[("bogus", "1")])).is_err());
        assert!(resolve_train(&kv(&[("steps", "-3")])).is_err());
    }

    #[test]
    fn precedence() {
        let file = parse_config("steps = 10\nseed = 4\n# comment\n", TRAIN_KEYS).unwrap();
        let flags = kv(&[("seed", "9")]);
        let c = resolve_train(&layer(&file, &flags)).unwrap();
        assert_eq!((c.total_steps, c.seed), (10, 9));
        assert_eq!(c.batch_size, 128);
        assert!(parse_config("nope = 1\n", TRAIN_KEYS).is_err());
        assert!(parse_config("steps 10\n", TRAIN_KEYS).is_err());
    }

    #[test]
    fn keys_roundtrip() {
        for m in Method::ALL {
            let c = resolve_train(&kv(&[("method", m.name()), ("hidden", "-"), ("seed", "3")])).unwrap();
            let text = to_text(&train_keys(&c));
            let back = resolve_train(&parse_config(&text, TRAIN_KEYS).unwrap()).unwrap();
            assert_eq!(back, c);
        }
    }
}
