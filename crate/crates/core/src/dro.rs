//! Group weights on the probability simplex.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mixture weights `q` over `m` groups together with their update rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupWeights {
    q: Vec<f64>,
    pub eta_q: f64,
}

/// Per-group mean loss and the number of rows behind it.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GroupRisks {
    pub per_group_loss: Vec<f64>,
    pub per_group_count: Vec<usize>,
}

impl GroupWeights {
    pub fn init_uniform(m: usize, eta_q: f64) -> Result<Self> {
        if m == 0 {
            return Err(Error::Parameter("group count must be at least 1".into()));
        }
        if !(eta_q >= 0.0) || !eta_q.is_finite() {
            return Err(Error::Parameter(format!("eta_q must be >= 0, got {eta_q}")));
        }
        Ok(Self {
            q: vec![1.0 / m as f64; m],
            eta_q,
        })
    }

    pub fn q(&self) -> &[f64] {
        &self.q
    }

    pub fn get(&self, g: usize) -> f64 {
        self.q[g]
    }

    pub fn len(&self) -> usize {
        self.q.len()
    }

    pub fn is_empty(&self) -> bool {
        self.q.is_empty()
    }

    /// Exponentiated-gradient step on group `g` followed by renormalisation.
    pub fn eg_update(&mut self, g: usize, observed_loss: f64) -> Result<()> {
        self.eg_update_many(&[(g, observed_loss)])
    }

    /// Multiplies every listed group by `exp(eta_q * loss)`, then renormalises once.
    pub fn eg_update_many(&mut self, observations: &[(usize, f64)]) -> Result<()> {
        self.scale_groups(observations)?;
        self.renormalize()
    }

    /// Multiplicative step without the renormalisation. Used by the
    /// convergence harness to demonstrate that the bound check catches it.
    #[doc(hidden)]
    pub fn eg_update_unnormalized(&mut self, g: usize, observed_loss: f64) -> Result<()> {
        self.scale_groups(&[(g, observed_loss)])
    }

    fn scale_groups(&mut self, observations: &[(usize, f64)]) -> Result<()> {
        for &(g, loss) in observations {
            if g >= self.q.len() {
                return Err(Error::Parameter(format!(
                    "group {g} out of range for {} groups",
                    self.q.len()
                )));
            }
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss {loss} observed for group {g}"
                )));
            }
        }
        for &(g, loss) in observations {
            self.q[g] *= (self.eta_q * loss).exp();
        }
        if self.q.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("group weight overflowed".into()));
        }
        Ok(())
    }

    fn renormalize(&mut self) -> Result<()> {
        let total: f64 = self.q.iter().sum();
        if !(total > 0.0) || !total.is_finite() {
            return Err(Error::Numeric(format!("group weights sum to {total}")));
        }
        for v in &mut self.q {
            *v /= total;
        }
        Ok(())
    }
}

impl GroupRisks {
    pub fn new(m: usize) -> Self {
        Self {
            per_group_loss: vec![0.0; m],
            per_group_count: vec![0; m],
        }
    }

    /// Accumulates per-row losses into per-group means.
    pub fn from_rows(m: usize, groups: &[usize], losses: &[f64]) -> Result<Self> {
        let mut sums = vec![0.0; m];
        let mut counts = vec![0usize; m];
        for (&g, &l) in groups.iter().zip(losses) {
            if g >= m {
                return Err(Error::Data(format!("group {g} out of range for {m} groups")));
            }
            sums[g] += l;
            counts[g] += 1;
        }
        let per_group_loss = sums
            .iter()
            .zip(&counts)
            .map(|(&s, &c)| if c > 0 { s / c as f64 } else { 0.0 })
            .collect();
        Ok(Self {
            per_group_loss,
            per_group_count: counts,
        })
    }
}

/// Worst group and its mean loss. Ties resolve to the lowest index.
pub fn worst_group_risk(r: &GroupRisks) -> Result<(usize, f64)> {
    if r.per_group_loss.is_empty() {
        return Err(Error::Evaluation("no groups".into()));
    }
    if let Some(g) = r.per_group_count.iter().position(|&c| c == 0) {
        return Err(Error::Evaluation(format!("group {g} is empty")));
    }
    let mut best = 0;
    for (g, &v) in r.per_group_loss.iter().enumerate().skip(1) {
        if v > r.per_group_loss[best] {
            best = g;
        }
    }
    Ok((best, r.per_group_loss[best]))
}
