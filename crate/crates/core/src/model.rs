//! Softmax-linear and one-hidden-layer ReLU classifiers with hand-written
//! backpropagation.
//!
//! Parameters live in one flat vector so optimizers and finite-difference
//! checks can treat every architecture uniformly. Layouts (row-major):
//!
//! * `Linear`: `W (K×d) | b (K)`
//! * `Mlp`:    `W1 (h×d) | b1 (h) | W2 (K×h) | b2 (K)`

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::seed::Rng;

pub const DEFAULT_HIDDEN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Architecture {
    Linear,
    Mlp { hidden: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub arch: Architecture,
    pub dim: usize,
    pub classes: usize,
    pub dropout_rate: f64,
    pub theta: Vec<f64>,
}

/// Parameter gradients, laid out exactly like [`ModelParams::theta`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<f64>);

/// Intermediate values of one forward pass, reused by [`backprop`].
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub logits: Vec<f64>,
    hidden_pre: Vec<f64>,
    hidden_out: Vec<f64>,
    /// Per-unit dropout scale: 0 for dropped units, `1/(1-rate)` otherwise.
    mask: Vec<f64>,
}

pub struct BackpropItem<'a> {
    pub features: &'a [f64],
    pub trace: &'a Trace,
    pub dlogits: &'a [f64],
}

impl ModelParams {
    pub fn zeros(arch: Architecture, dim: usize, classes: usize) -> Result<Self> {
        if dim == 0 || classes < 2 {
            return Err(Error::invalid("model needs dim >= 1 and classes >= 2"));
        }
        if let Architecture::Mlp { hidden: 0 } = arch {
            return Err(Error::invalid("MLP hidden width must be positive"));
        }
        let n = param_count(arch, dim, classes);
        Ok(ModelParams {
            arch,
            dim,
            classes,
            dropout_rate: 0.0,
            theta: vec![0.0; n],
        })
    }

    /// He-normal weights, zero biases.
    pub fn init(arch: Architecture, dim: usize, classes: usize, rng: &mut Rng) -> Result<Self> {
        let mut p = Self::zeros(arch, dim, classes)?;
        let mut fill = |slice: &mut [f64], fan_in: usize| {
            let scale = (2.0 / fan_in as f64).sqrt();
            for w in slice {
                let z: f64 = StandardNormal.sample(rng);
                *w = z * scale;
            }
        };
        match arch {
            Architecture::Linear => {
                let (w, _) = p.theta.split_at_mut(classes * dim);
                fill(w, dim);
            }
            Architecture::Mlp { hidden } => {
                let (w1, rest) = p.theta.split_at_mut(hidden * dim);
                fill(w1, dim);
                let (_, rest) = rest.split_at_mut(hidden);
                let (w2, _) = rest.split_at_mut(classes * hidden);
                fill(w2, hidden);
            }
        }
        Ok(p)
    }

    pub fn with_dropout(mut self, rate: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid(format!("dropout rate {rate} not in [0, 1)")));
        }
        self.dropout_rate = rate;
        Ok(self)
    }

    pub fn hidden(&self) -> usize {
        match self.arch {
            Architecture::Linear => 0,
            Architecture::Mlp { hidden } => hidden,
        }
    }

    pub fn len(&self) -> usize {
        self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        check_len(
            "parameter vector",
            param_count(self.arch, self.dim, self.classes),
            self.theta.len(),
        )?;
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::invalid("dropout rate must be in [0, 1)"));
        }
        if self.theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite model parameter"));
        }
        Ok(())
    }

    /// Adds `delta` to every output bias. Used to model an output-format
    /// mismatch that style adaptation has to undo.
    pub fn shift_output_bias(&mut self, delta: &[f64]) -> Result<()> {
        check_len("bias shift", self.classes, delta.len())?;
        let k = self.classes;
        let n = self.theta.len();
        for (b, d) in self.theta[n - k..].iter_mut().zip(delta) {
            *b += d;
        }
        Ok(())
    }
}

fn param_count(arch: Architecture, dim: usize, classes: usize) -> usize {
    match arch {
        Architecture::Linear => classes * dim + classes,
        Architecture::Mlp { hidden } => hidden * dim + hidden + classes * hidden + classes,
    }
}

fn check_logits(logits: &[f64]) -> Result<()> {
    if logits.is_empty() {
        return Err(Error::invalid("empty logit vector"));
    }
    if logits.iter().any(|l| !l.is_finite()) {
        return Err(Error::invalid("non-finite logit"));
    }
    Ok(())
}

/// Temperature softmax with max-subtraction.
pub fn softmax(logits: &[f64], temperature: f64) -> Result<Vec<f64>> {
    check_logits(logits)?;
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::invalid(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    Ok(softmax_t(logits, temperature))
}

pub(crate) fn softmax_t(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|l| ((l - max) / temperature).exp()).collect();
    let z: f64 = out.iter().sum();
    for p in &mut out {
        *p /= z;
    }
    out
}

pub(crate) fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - max - lse).collect()
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

pub fn forward_trace(params: &ModelParams, features: &[f64], mode: Mode, rng: Option<&mut Rng>) -> Result<Trace> {
    check_len("features", params.dim, features.len())?;
    check_len(
        "parameter vector",
        param_count(params.arch, params.dim, params.classes),
        params.theta.len(),
    )?;
    let (d, k) = (params.dim, params.classes);
    let theta = &params.theta;
    match params.arch {
        Architecture::Linear => {
            let (w, b) = theta.split_at(k * d);
            let logits = (0..k).map(|c| b[c] + dot(&w[c * d..(c + 1) * d], features)).collect();
            Ok(Trace {
                logits,
                hidden_pre: Vec::new(),
                hidden_out: Vec::new(),
                mask: Vec::new(),
            })
        }
        Architecture::Mlp { hidden: h } => {
            let (w1, rest) = theta.split_at(h * d);
            let (b1, rest) = rest.split_at(h);
            let (w2, b2) = rest.split_at(k * h);
            let hidden_pre: Vec<f64> = (0..h).map(|i| b1[i] + dot(&w1[i * d..(i + 1) * d], features)).collect();
            let mask = dropout_mask(h, params.dropout_rate, mode, rng)?;
            let hidden_out: Vec<f64> = hidden_pre.iter().zip(&mask).map(|(z, m)| z.max(0.0) * m).collect();
            let logits = (0..k)
                .map(|c| b2[c] + dot(&w2[c * h..(c + 1) * h], &hidden_out))
                .collect();
            Ok(Trace {
                logits,
                hidden_pre,
                hidden_out,
                mask,
            })
        }
    }
}

fn dropout_mask(h: usize, rate: f64, mode: Mode, rng: Option<&mut Rng>) -> Result<Vec<f64>> {
    if mode == Mode::Eval || rate == 0.0 {
        return Ok(vec![1.0; h]);
    }
    let rng = rng.ok_or_else(|| Error::invalid("train-mode dropout needs a random source"))?;
    let keep = 1.0 / (1.0 - rate);
    Ok((0..h)
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn forward(params: &ModelParams, features: &[f64], mode: Mode, rng: Option<&mut Rng>) -> Result<Vec<f64>> {
    forward_trace(params, features, mode, rng).map(|t| t.logits)
}

/// Deterministic logits (no dropout).
pub fn eval_logits(params: &ModelParams, features: &[f64]) -> Result<Vec<f64>> {
    forward(params, features, Mode::Eval, None)
}

/// Draws a class from `softmax(logits / temperature)`; temperature 0 is greedy.
pub fn sample_from_logits(logits: &[f64], temperature: f64, rng: &mut Rng) -> Result<usize> {
    check_logits(logits)?;
    if temperature < 0.0 || temperature.is_nan() {
        return Err(Error::invalid(format!("temperature must be >= 0, got {temperature}")));
    }
    if temperature == 0.0 {
        return Ok(argmax(logits));
    }
    let probs = softmax_t(logits, temperature);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return Ok(i);
        }
    }
    // u landed in the rounding gap above the cumulative sum.
    Ok(probs.iter().rposition(|p| *p > 0.0).unwrap_or(0))
}

pub fn sample_prediction(params: &ModelParams, features: &[f64], temperature: f64, rng: &mut Rng) -> Result<usize> {
    let logits = eval_logits(params, features)?;
    sample_from_logits(&logits, temperature, rng)
}

/// Gradient of the batch-mean loss given per-sample logit gradients.
pub fn backprop(params: &ModelParams, batch: &[BackpropItem<'_>]) -> Result<Gradients> {
    let (d, k) = (params.dim, params.classes);
    let mut g = vec![0.0; params.theta.len()];
    if batch.is_empty() {
        return Ok(Gradients(g));
    }
    let scale = 1.0 / batch.len() as f64;
    for item in batch {
        check_len("features", d, item.features.len())?;
        check_len("logit gradient", k, item.dlogits.len())?;
        match params.arch {
            Architecture::Linear => {
                let (gw, gb) = g.split_at_mut(k * d);
                for c in 0..k {
                    let dl = item.dlogits[c] * scale;
                    gb[c] += dl;
                    for (gw, x) in gw[c * d..(c + 1) * d].iter_mut().zip(item.features) {
                        *gw += dl * x;
                    }
                }
            }
            Architecture::Mlp { hidden: h } => {
                check_len("trace hidden layer", h, item.trace.hidden_out.len())?;
                let w2 = &params.theta[h * d + h..h * d + h + k * h];
                let (gw1, rest) = g.split_at_mut(h * d);
                let (gb1, rest) = rest.split_at_mut(h);
                let (gw2, gb2) = rest.split_at_mut(k * h);
                let mut dhidden = vec![0.0; h];
                for (c, gb) in gb2.iter_mut().enumerate() {
                    let dl = item.dlogits[c] * scale;
                    *gb += dl;
                    let row = c * h..(c + 1) * h;
                    for ((gw, a), (w, dh)) in gw2[row.clone()]
                        .iter_mut()
                        .zip(&item.trace.hidden_out)
                        .zip(w2[row].iter().zip(dhidden.iter_mut()))
                    {
                        *gw += dl * a;
                        *dh += w * dl;
                    }
                }
                for i in 0..h {
                    if item.trace.hidden_pre[i] <= 0.0 || item.trace.mask[i] == 0.0 {
                        continue;
                    }
                    let dz = dhidden[i] * item.trace.mask[i];
                    gb1[i] += dz;
                    for (gw, x) in gw1[i * d..(i + 1) * d].iter_mut().zip(item.features) {
                        *gw += dz * x;
                    }
                }
            }
        }
    }
    Ok(Gradients(g))
}
