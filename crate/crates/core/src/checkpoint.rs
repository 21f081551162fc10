//! Versioned plain-text checkpoints.
//!
//! ```text
//! ADVGDRO-CKPT
//! version 1
//! seed 7
//! step 300
//! metric 0.8125
//! activations relu
//! layer 2 1
//! w 0.5 -0.25
//! b 0.1
//! ...
//! q 0.4 0.6
//! ```
//!
//! Weights are written row-major (`d_in` rows of `d_out` values) using the
//! shortest representation that parses back to the same `f64`. `activations`
//! is `-` for a linear model, `q` is `-` when the run kept no group weights,
//! and `metric` is `-` when no validation set was used.

use crate::dro::GroupWeights;
use crate::error::{Error, Result};
use crate::model::{Activation, Layer, ModelParams};
use crate::tensor::Tensor;

pub const MAGIC: &str = "ADVGDRO-CKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub seed: u64,
    pub step: usize,
    pub metric: Option<f64>,
    pub params: ModelParams,
    pub q: Option<Vec<f64>>,
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ")
}

impl Checkpoint {
    pub fn new(seed: u64, step: usize, metric: Option<f64>, params: ModelParams, weights: Option<&GroupWeights>) -> Self {
        Self {
            seed,
            step,
            metric,
            params,
            q: weights.map(|w| w.q().to_vec()),
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{MAGIC}\nversion {VERSION}\nseed {}\nstep {}\n", self.seed, self.step);
        s.push_str(&format!(
            "metric {}\n",
            self.metric.map_or_else(|| "-".to_string(), |m| m.to_string())
        ));
        let acts: Vec<&str> = self.params.activations().iter().map(|a| a.name()).collect();
        s.push_str(&format!(
            "activations {}\n",
            if acts.is_empty() { "-".to_string() } else { acts.join(",") }
        ));
        for l in self.params.layers() {
            s.push_str(&format!("layer {} {}\n", l.d_in(), l.d_out()));
            s.push_str(&format!("w {}\n", join(l.weight.data())));
            s.push_str(&format!("b {}\n", join(l.bias.data())));
        }
        s.push_str(&format!(
            "q {}\n",
            self.q.as_deref().map_or_else(|| "-".to_string(), join)
        ));
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim_end_matches('\r')));
        let mut next = |what: &str| {
            lines
                .next()
                .ok_or_else(|| Error::parse(0, format!("checkpoint truncated before `{what}`")))
        };
        let (n, magic) = next("magic")?;
        if magic != MAGIC {
            return Err(Error::parse(n, "not a checkpoint file"));
        }
        let (n, v) = next("version")?;
        let version: u32 = field(n, v, "version")?
            .parse()
            .map_err(|_| Error::parse(n, "bad version"))?;
        if version != VERSION {
            return Err(Error::parse(n, format!("unsupported checkpoint version {version}")));
        }
        let (n, v) = next("seed")?;
        let seed = field(n, v, "seed")?
            .parse()
            .map_err(|_| Error::parse(n, "bad seed"))?;
        let (n, v) = next("step")?;
        let step = field(n, v, "step")?
            .parse()
            .map_err(|_| Error::parse(n, "bad step"))?;
        let (n, v) = next("metric")?;
        let metric = match field(n, v, "metric")? {
            "-" => None,
            m => Some(float(n, m)?),
        };
        let (n, v) = next("activations")?;
        let activations: Vec<Activation> = match field(n, v, "activations")? {
            "-" => Vec::new(),
            a => a
                .split(',')
                .map(|s| s.parse().map_err(|_| Error::parse(n, format!("bad activation `{s}`"))))
                .collect::<Result<_>>()?,
        };

        let mut layers = Vec::new();
        let q = loop {
            let (n, v) = next("q")?;
            if let Some(rest) = v.strip_prefix("q ") {
                break match rest.trim() {
                    "-" => None,
                    r => Some(floats(n, r)?),
                };
            }
            let dims = field(n, v, "layer")?;
            let (a, b) = dims
                .split_once(' ')
                .ok_or_else(|| Error::parse(n, "layer needs `d_in d_out`"))?;
            let d_in: usize = a.parse().map_err(|_| Error::parse(n, "bad d_in"))?;
            let d_out: usize = b.trim().parse().map_err(|_| Error::parse(n, "bad d_out"))?;
            if d_in == 0 || d_out == 0 || d_in.checked_mul(d_out).is_none_or(|p| p > 1 << 22) {
                return Err(Error::parse(n, format!("unreasonable layer size {d_in}x{d_out}")));
            }
            let (wn, wl) = next("w")?;
            let w = floats(wn, field(wn, wl, "w")?)?;
            if w.len() != d_in * d_out {
                return Err(Error::parse(wn, format!("expected {} weights, got {}", d_in * d_out, w.len())));
            }
            let (bn, bl) = next("b")?;
            let b = floats(bn, field(bn, bl, "b")?)?;
            if b.len() != d_out {
                return Err(Error::parse(bn, format!("expected {d_out} biases, got {}", b.len())));
            }
            layers.push(Layer::new(Tensor::new(vec![d_in, d_out], w)?, Tensor::new(vec![d_out], b)?)?);
        };
        if let Some((n, extra)) = lines.find(|(_, l)| !l.trim().is_empty()) {
            return Err(Error::parse(n, format!("unexpected trailing content `{extra}`")));
        }
        let params = ModelParams::new(layers, activations).map_err(|e| Error::parse(0, e.to_string()))?;
        Ok(Self {
            seed,
            step,
            metric,
            params,
            q,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

fn field<'a>(line: usize, text: &'a str, key: &str) -> Result<&'a str> {
    text.strip_prefix(key)
        .and_then(|r| r.strip_prefix(' '))
        .map(str::trim)
        .ok_or_else(|| Error::parse(line, format!("expected `{key} ...`, got `{text}`")))
}

fn float(line: usize, s: &str) -> Result<f64> {
    let v: f64 = s.parse().map_err(|_| Error::parse(line, format!("bad number `{s}`")))?;
    if !v.is_finite() {
        return Err(Error::parse(line, format!("non-finite value `{s}`")));
    }
    Ok(v)
}

fn floats(line: usize, s: &str) -> Result<Vec<f64>> {
    s.split_whitespace().map(|t| float(line, t)).collect()
}
