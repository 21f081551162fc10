//! Linear and MLP classifiers with softmax cross-entropy.
//!
//! Backpropagation is written out by hand: one forward pass caches the
//! pre-activations, one backward pass yields gradients for every weight, every
//! bias and the input batch.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the pre-activation.
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Identity => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Identity => "identity",
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            "identity" => Ok(Activation::Identity),
            other => Err(Error::Parameter(format!("unknown activation `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// `d_in x d_out`
    pub weight: Tensor,
    /// `d_out`
    pub bias: Tensor,
}

impl Layer {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        if weight.shape().len() != 2 || bias.shape() != [weight.shape()[1]] {
            return Err(Error::dim("Layer::new", weight.shape(), bias.shape()));
        }
        Ok(Self { weight, bias })
    }

    pub fn d_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.weight.shape()[1]
    }

    fn affine(&self, h: &Tensor) -> Result<Tensor> {
        let mut z = h.matmul(&self.weight)?;
        let c = self.d_out();
        let b = self.bias.data();
        for row in z.data_mut().chunks_mut(c) {
            for (v, &bj) in row.iter_mut().zip(b) {
                *v += bj;
            }
        }
        Ok(z)
    }
}

/// Parameters of a feed-forward classifier. `activations[i]` follows hidden
/// layer `i`; the final layer is always linear, so a model with one layer and
/// no activations is a linear classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    layers: Vec<Layer>,
    activations: Vec<Activation>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub batch_size: usize,
}

/// Output of one backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub loss: LossValue,
    /// Unweighted cross-entropy of each row.
    pub per_example_loss: Vec<f64>,
    pub grad_theta: ModelParams,
    pub grad_x: Tensor,
}

impl ModelParams {
    pub fn new(layers: Vec<Layer>, activations: Vec<Activation>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Parameter("model needs at least one layer".into()));
        }
        if activations.len() + 1 != layers.len() {
            return Err(Error::Parameter(format!(
                "{} layers need {} hidden activations, got {}",
                layers.len(),
                layers.len() - 1,
                activations.len()
            )));
        }
        for pair in layers.windows(2) {
            if pair[0].d_out() != pair[1].d_in() {
                return Err(Error::dim(
                    "ModelParams::new",
                    pair[0].weight.shape(),
                    pair[1].weight.shape(),
                ));
            }
        }
        Ok(Self {
            layers,
            activations,
        })
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init(
        input_dim: usize,
        hidden: &[usize],
        num_classes: usize,
        activation: Activation,
        rng: &mut RngState,
    ) -> Result<Self> {
        if input_dim == 0 || num_classes < 2 || hidden.contains(&0) {
            return Err(Error::Parameter(format!(
                "bad architecture: input {input_dim}, hidden {hidden:?}, classes {num_classes}"
            )));
        }
        let mut dims = vec![input_dim];
        dims.extend_from_slice(hidden);
        dims.push(num_classes);
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for w in dims.windows(2) {
            let (d_in, d_out) = (w[0], w[1]);
            let limit = (6.0 / (d_in + d_out) as f64).sqrt();
            let data = (0..d_in * d_out)
                .map(|_| rng.uniform(-limit, limit))
                .collect();
            layers.push(Layer::new(
                Tensor::new(vec![d_in, d_out], data)?,
                Tensor::zeros(&[d_out]),
            )?);
        }
        Self::new(layers, vec![activation; hidden.len()])
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].d_in()
    }

    pub fn num_classes(&self) -> usize {
        self.layers[self.layers.len() - 1].d_out()
    }

    pub fn hidden_layers(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn is_linear(&self) -> bool {
        self.layers.len() == 1
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    /// Parameters in layer order, weight before bias.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(l.weight.data());
            out.extend_from_slice(l.bias.data());
        }
        out
    }

    /// Same architecture, parameters taken from `flat` (layout of [`flatten`](Self::flatten)).
    pub fn with_flat(&self, flat: &[f64]) -> Result<Self> {
        if flat.len() != self.num_params() {
            return Err(Error::dim("with_flat", &[self.num_params()], &[flat.len()]));
        }
        let mut out = self.clone();
        let mut off = 0;
        for l in &mut out.layers {
            let n = l.weight.len();
            l.weight.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
            let n = l.bias.len();
            l.bias.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(out)
    }

    fn same_shape(&self, other: &ModelParams) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.weight.shape() == b.weight.shape())
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &ModelParams) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::Parameter("parameter shapes differ".into()));
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight.axpy(alpha, &b.weight)?;
            a.bias.axpy(alpha, &b.bias)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        for l in &mut self.layers {
            l.weight.data_mut().iter_mut().for_each(|v| *v *= s);
            l.bias.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn zeros_like(&self) -> ModelParams {
        let mut z = self.clone();
        for l in &mut z.layers {
            l.weight.data_mut().iter_mut().for_each(|v| *v = 0.0);
            l.bias.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        z
    }

    pub fn norm2(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| l.weight.sum_sq() + l.bias.sum_sq())
            .sum::<f64>()
            .sqrt()
    }

    /// Projects onto `{theta : ||theta||_2 <= radius}`.
    pub fn project_l2(&mut self, radius: f64) {
        let n = self.norm2();
        if n > radius {
            self.scale(radius / n);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.is_finite() && l.bias.is_finite())
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape().len() != 2 || x.cols() != self.input_dim() {
            return Err(Error::dim(
                "forward",
                x.shape(),
                self.layers[0].weight.shape(),
            ));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.affine(&h)?;
            h = match self.activations.get(i) {
                Some(&act) => z.map(|v| act.apply(v)),
                None => z,
            };
        }
        Ok(h)
    }

    /// Activations feeding the final linear layer.
    pub fn penultimate(&self, x: &Tensor) -> Result<Tensor> {
        if self.is_linear() {
            return Err(Error::Unsupported(
                "penultimate representation of a model without hidden layers".into(),
            ));
        }
        self.check_input(x)?;
        let mut h = x.clone();
        for (layer, &act) in self.layers.iter().zip(&self.activations) {
            h = layer.affine(&h)?.map(|v| act.apply(v));
        }
        Ok(h)
    }

    /// Argmax class per row; ties go to the lowest class index.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let logits = self.forward(x)?;
        Ok((0..logits.rows())
            .map(|i| argmax(logits.row(i)))
            .collect())
    }

    /// Mean cross-entropy with gradients for parameters and inputs.
    pub fn loss_and_grads(&self, x: &Tensor, y: &[usize]) -> Result<Gradients> {
        self.weighted_loss_and_grads(x, y, None)
    }

    /// Loss `(1/n) sum_i w_i * CE_i` and its gradients. `None` means unit weights.
    pub fn weighted_loss_and_grads(
        &self,
        x: &Tensor,
        y: &[usize],
        weights: Option<&[f64]>,
    ) -> Result<Gradients> {
        self.check_input(x)?;
        let n = x.rows();
        if y.len() != n {
            return Err(Error::dim("loss_and_grads", x.shape(), &[y.len()]));
        }
        if let Some(w) = weights {
            if w.len() != n {
                return Err(Error::dim("loss_and_grads", &[n], &[w.len()]));
            }
        }
        let c = self.num_classes();
        if let Some((i, &bad)) = y.iter().enumerate().find(|(_, &l)| l >= c) {
            return Err(Error::Data(format!(
                "label {bad} at row {i} out of range for {c} classes"
            )));
        }

        // Forward, caching layer inputs and pre-activations.
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.affine(&h)?;
            let next = match self.activations.get(i) {
                Some(&act) => z.map(|v| act.apply(v)),
                None => z.clone(),
            };
            inputs.push(h);
            pre.push(z);
            h = next;
        }
        let logits = h;

        // Softmax cross-entropy with max shift.
        let inv_n = 1.0 / n as f64;
        let mut per_example = Vec::with_capacity(n);
        let mut dz = vec![0.0; n * c];
        let mut total = 0.0;
        for i in 0..n {
            let row = logits.row(i);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|&v| (v - m).exp()).sum();
            let lse = m + sum.ln();
            let ce = (lse - row[y[i]]).max(0.0);
            per_example.push(ce);
            let w = weights.map_or(1.0, |w| w[i]);
            total += w * ce;
            let scale = w * inv_n;
            for j in 0..c {
                let p = (row[j] - m).exp() / sum;
                let target = if j == y[i] { 1.0 } else { 0.0 };
                dz[i * c + j] = scale * (p - target);
            }
        }
        let loss = LossValue {
            value: total * inv_n,
            batch_size: n,
        };

        let mut grad_layers = Vec::with_capacity(self.layers.len());
        let mut delta = Tensor::new(vec![n, c], dz)?;
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let gw = inputs[l].transpose()?.matmul(&delta)?;
            let d_out = layer.d_out();
            let mut gb = vec![0.0; d_out];
            for row in delta.data().chunks(d_out) {
                for (g, &v) in gb.iter_mut().zip(row) {
                    *g += v;
                }
            }
            grad_layers.push(Layer::new(gw, Tensor::new(vec![d_out], gb)?)?);
            let dh = delta.matmul(&layer.weight.transpose()?)?;
            delta = if l > 0 {
                let act = self.activations[l - 1];
                let z = &pre[l - 1];
                let mut d = dh;
                for (v, &zv) in d.data_mut().iter_mut().zip(z.data()) {
                    *v *= act.derivative(zv);
                }
                d
            } else {
                dh
            };
        }
        grad_layers.reverse();

        Ok(Gradients {
            loss,
            per_example_loss: per_example,
            grad_theta: ModelParams {
                layers: grad_layers,
                activations: self.activations.clone(),
            },
            grad_x: delta,
        })
    }
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}
