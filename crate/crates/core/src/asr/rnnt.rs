//! Transducer loss over a T×(U+1) lattice in log space.

use crate::error::{Error, Result};
use crate::tensor::{Graph, Var};

/// Log-probabilities and forward/backward sums of one utterance's lattice.
/// Blank is the last output index.
#[derive(Debug, Clone)]
pub struct TransducerLattice {
    pub frames: usize,
    pub labels: Vec<usize>,
    pub outputs: usize,
    /// `(t·(U+1) + u)·outputs + k`
    pub log_probs: Vec<f64>,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

pub(crate) fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

impl TransducerLattice {
    /// `logits` holds T·(U+1) rows of `outputs` values, row `t·(U+1) + u`.
    pub fn from_logits(logits: &[f64], frames: usize, labels: &[usize], outputs: usize) -> Result<Self> {
        let u1 = labels.len() + 1;
        if frames == 0 || outputs < 2 {
            return Err(Error::invalid("transducer lattice needs T >= 1 and at least one label plus blank"));
        }
        if logits.len() != frames * u1 * outputs {
            return Err(Error::shape(
                "rnnt_loss",
                format!("{} logits for T={frames}, U+1={u1}, V+1={outputs}", logits.len()),
            ));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= outputs - 1) {
            return Err(Error::invalid(format!("label {bad} collides with blank or exceeds vocabulary")));
        }
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "rnnt_loss" });
        }
        let mut log_probs = Vec::with_capacity(logits.len());
        for row in logits.chunks(outputs) {
            let lse = crate::tensor::log_sum_exp(row);
            log_probs.extend(row.iter().map(|v| v - lse));
        }
        let mut lat = Self {
            frames,
            labels: labels.to_vec(),
            outputs,
            log_probs,
            alpha: vec![f64::NEG_INFINITY; frames * u1],
            beta: vec![f64::NEG_INFINITY; frames * u1],
        };
        lat.forward();
        lat.backward();
        Ok(lat)
    }

    fn u1(&self) -> usize {
        self.labels.len() + 1
    }

    pub fn blank(&self, t: usize, u: usize) -> f64 {
        self.log_probs[(t * self.u1() + u) * self.outputs + self.outputs - 1]
    }

    /// Log-probability of emitting label `u` (0-based) from node (t, u).
    pub fn emit(&self, t: usize, u: usize) -> f64 {
        self.log_probs[(t * self.u1() + u) * self.outputs + self.labels[u]]
    }

    fn forward(&mut self) {
        let (t_max, u1) = (self.frames, self.u1());
        for t in 0..t_max {
            for u in 0..u1 {
                let v = if t == 0 && u == 0 {
                    0.0
                } else {
                    let from_blank = if t > 0 {
                        self.alpha[(t - 1) * u1 + u] + self.blank(t - 1, u)
                    } else {
                        f64::NEG_INFINITY
                    };
                    let from_label = if u > 0 {
                        self.alpha[t * u1 + u - 1] + self.emit(t, u - 1)
                    } else {
                        f64::NEG_INFINITY
                    };
                    log_add(from_blank, from_label)
                };
                self.alpha[t * u1 + u] = v;
            }
        }
    }

    fn backward(&mut self) {
        let (t_max, u1) = (self.frames, self.u1());
        for t in (0..t_max).rev() {
            for u in (0..u1).rev() {
                let v = if t == t_max - 1 && u == u1 - 1 {
                    self.blank(t, u)
                } else {
                    let via_blank = if t + 1 < t_max {
                        self.blank(t, u) + self.beta[(t + 1) * u1 + u]
                    } else {
                        f64::NEG_INFINITY
                    };
                    let via_label = if u + 1 < u1 {
                        self.emit(t, u) + self.beta[t * u1 + u + 1]
                    } else {
                        f64::NEG_INFINITY
                    };
                    log_add(via_blank, via_label)
                };
                self.beta[t * u1 + u] = v;
            }
        }
    }

    /// ln P(labels | input) from the forward pass.
    pub fn log_likelihood(&self) -> f64 {
        let (t, u) = (self.frames - 1, self.u1() - 1);
        self.alpha[t * self.u1() + u] + self.blank(t, u)
    }

    /// ln P(labels | input) from the backward pass.
    pub fn log_likelihood_backward(&self) -> f64 {
        self.beta[0]
    }

    pub fn loss(&self) -> f64 {
        -self.log_likelihood()
    }

    /// Gradient of the loss with respect to the unnormalised logits.
    pub fn grad_logits(&self) -> Vec<f64> {
        let (t_max, u1, k) = (self.frames, self.u1(), self.outputs);
        let ll = self.log_likelihood();
        let mut grad = vec![0.0; self.log_probs.len()];
        for t in 0..t_max {
            for u in 0..u1 {
                let node = t * u1 + u;
                let a = self.alpha[node];
                let row = &mut grad[node * k..(node + 1) * k];
                // d loss / d log_prob for the two outgoing edges
                let next_blank = if t + 1 < t_max {
                    self.beta[(t + 1) * u1 + u]
                } else if u == u1 - 1 {
                    0.0
                } else {
                    f64::NEG_INFINITY
                };
                row[k - 1] = -(a + self.blank(t, u) + next_blank - ll).exp();
                if u + 1 < u1 {
                    row[self.labels[u]] = -(a + self.emit(t, u) + self.beta[node + 1] - ll).exp();
                }
                // through the log-softmax
                let total: f64 = row.iter().sum();
                let lp = &self.log_probs[node * k..(node + 1) * k];
                for (g, l) in row.iter_mut().zip(lp) {
                    *g -= l.exp() * total;
                }
            }
        }
        grad
    }
}

/// Transducer negative log-likelihood of `labels` given joint logits
/// (T·(U+1) rows × (V+1) outputs, blank last).
pub fn rnnt_loss(g: &mut Graph, logits: Var, frames: usize, labels: &[usize]) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    let outputs = match shape.as_slice() {
        [_, c] => *c,
        s => return Err(Error::shape("rnnt_loss", format!("expected a matrix, got {s:?}"))),
    };
    let lat = TransducerLattice::from_logits(g.value(logits).data(), frames, labels, outputs)?;
    let value = lat.loss();
    let grad = lat.grad_logits();
    g.scalar_with_grad("rnnt_loss", logits, value, grad)
}
