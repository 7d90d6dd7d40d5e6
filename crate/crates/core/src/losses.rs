//! Cross-entropy and the calibration losses (label smoothing, margin-based
//! label smoothing, confidence penalty), plus the knowledge-gated combination
//! `CE + gate * alpha * R`.
//!
//! Every function returns the loss value together with its gradient with
//! respect to the logits; parameter gradients come from [`crate::model::backprop`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{argmax, log_softmax};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossKind {
    #[serde(rename = "ce")]
    Ce,
    #[serde(rename = "ls")]
    Ls,
    #[serde(rename = "mbls")]
    Mbls,
    #[serde(rename = "ecp")]
    Ecp,
}

/// What the gate switches on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CalTerm {
    /// Only the regularizer of the calibration loss: `(ε/(1-ε))·KL(u‖p)`,
    /// the margin hinge, or `-β·H(p)`. With `alpha = 1` the gated loss
    /// equals the calibration loss (up to constants for LS).
    #[default]
    Regularizer,
    /// The whole calibration loss, CE included, added on top of CE.
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSpec {
    pub kind: LossKind,
    pub epsilon: f64,
    pub gamma: f64,
    pub margin: f64,
    pub beta: f64,
    pub alpha: f64,
    pub cal_term: CalTerm,
}

impl Default for LossSpec {
    fn default() -> Self {
        LossSpec::multi_choice(LossKind::Ce)
    }
}

impl LossSpec {
    /// Hyperparameters used for multiple-choice tasks.
    pub fn multi_choice(kind: LossKind) -> Self {
        LossSpec {
            kind,
            epsilon: 0.1,
            gamma: 0.1,
            margin: 0.0,
            beta: 0.1,
            alpha: 1.0,
            cal_term: CalTerm::Regularizer,
        }
    }

    /// Hyperparameters used for open-ended tasks.
    pub fn open_ended(kind: LossKind) -> Self {
        LossSpec {
            kind,
            epsilon: 0.15,
            gamma: 0.15,
            margin: 10.0,
            beta: 0.15,
            alpha: 1.0,
            cal_term: CalTerm::Regularizer,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let nonneg = |name: &str, v: f64| {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::invalid(format!(
                    "{name} must be a finite nonnegative number, got {v}"
                )))
            }
        };
        match self.kind {
            LossKind::Ce => {}
            LossKind::Ls => check_epsilon(self.epsilon)?,
            LossKind::Mbls => {
                nonneg("gamma", self.gamma)?;
                nonneg("margin", self.margin)?;
            }
            LossKind::Ecp => nonneg("beta", self.beta)?,
        }
        nonneg("alpha", self.alpha)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossResult {
    pub value: f64,
    pub dlogits: Vec<f64>,
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if (0.0..1.0).contains(&epsilon) {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "label smoothing epsilon {epsilon} not in [0, 1)"
        )))
    }
}

fn check_inputs(logits: &[f64], target: usize) -> Result<()> {
    if logits.len() < 2 {
        return Err(Error::invalid("need at least 2 logits"));
    }
    if logits.iter().any(|l| !l.is_finite()) {
        return Err(Error::invalid("non-finite logit"));
    }
    if target >= logits.len() {
        return Err(Error::invalid(format!(
            "target {target} out of range for {} classes",
            logits.len()
        )));
    }
    Ok(())
}

fn probs_from(logp: &[f64]) -> Vec<f64> {
    logp.iter().map(|l| l.exp()).collect()
}

pub fn ce_loss(logits: &[f64], target: usize) -> Result<LossResult> {
    check_inputs(logits, target)?;
    let logp = log_softmax(logits);
    let mut dlogits = probs_from(&logp);
    dlogits[target] -= 1.0;
    Ok(LossResult {
        value: -logp[target],
        dlogits,
    })
}

pub fn ls_loss(logits: &[f64], target: usize, epsilon: f64) -> Result<LossResult> {
    check_inputs(logits, target)?;
    check_epsilon(epsilon)?;
    if epsilon == 0.0 {
        return ce_loss(logits, target);
    }
    let k = logits.len() as f64;
    let logp = log_softmax(logits);
    let p = probs_from(&logp);
    let weight = |i: usize| {
        if i == target {
            1.0 - epsilon + epsilon / k
        } else {
            epsilon / k
        }
    };
    let value = -logp.iter().enumerate().map(|(i, lp)| weight(i) * lp).sum::<f64>();
    // The smoothed target sums to 1, so the gradient is p minus that target.
    let dlogits = p.iter().enumerate().map(|(i, pi)| pi - weight(i)).collect();
    Ok(LossResult { value, dlogits })
}

pub fn mbls_loss(logits: &[f64], target: usize, gamma: f64, margin: f64) -> Result<LossResult> {
    let mut out = ce_loss(logits, target)?;
    if gamma == 0.0 {
        return Ok(out);
    }
    let (penalty, grad) = margin_penalty(logits, gamma, margin);
    out.value += penalty;
    for (d, g) in out.dlogits.iter_mut().zip(grad) {
        *d += g;
    }
    Ok(out)
}

pub fn ecp_loss(logits: &[f64], target: usize, beta: f64) -> Result<LossResult> {
    let mut out = ce_loss(logits, target)?;
    if beta == 0.0 {
        return Ok(out);
    }
    let (penalty, grad) = entropy_penalty(logits, beta);
    out.value += penalty;
    for (d, g) in out.dlogits.iter_mut().zip(grad) {
        *d += g;
    }
    Ok(out)
}

/// `gamma * Σ_k max(0, max_j l_j - l_k - margin)`. The max term's gradient
/// goes to the lowest-index maximal logit; exact kinks get subgradient 0.
fn margin_penalty(logits: &[f64], gamma: f64, margin: f64) -> (f64, Vec<f64>) {
    let top = argmax(logits);
    let max = logits[top];
    let mut grad = vec![0.0; logits.len()];
    let mut value = 0.0;
    for (k, l) in logits.iter().enumerate() {
        let gap = max - l - margin;
        if gap > 0.0 {
            value += gap;
            grad[top] += gamma;
            grad[k] -= gamma;
        }
    }
    (gamma * value, grad)
}

/// `-beta * H(p)` with `0·log 0 = 0`.
fn entropy_penalty(logits: &[f64], beta: f64) -> (f64, Vec<f64>) {
    let logp = log_softmax(logits);
    let p = probs_from(&logp);
    let plogp: Vec<f64> = p
        .iter()
        .zip(&logp)
        .map(|(pi, lp)| if *pi == 0.0 { 0.0 } else { pi * lp })
        .collect();
    let entropy = -plogp.iter().sum::<f64>();
    // dH/dl_i = -p_i (log p_i + H)
    let grad = plogp
        .iter()
        .zip(&p)
        .map(|(pl, pi)| beta * (pl + pi * entropy))
        .collect();
    (-beta * entropy, grad)
}

/// `(ε/(1-ε)) · KL(u‖p)` where `u` is uniform over the classes.
fn smoothing_penalty(logits: &[f64], epsilon: f64) -> (f64, Vec<f64>) {
    let k = logits.len() as f64;
    let logp = log_softmax(logits);
    let scale = epsilon / (1.0 - epsilon);
    let kl = logp.iter().map(|lp| (-k.ln() - lp) / k).sum::<f64>();
    let grad = logp.iter().map(|lp| scale * (lp.exp() - 1.0 / k)).collect();
    (scale * kl, grad)
}

/// The calibration regularizer `R` of `spec` alone.
pub fn regularizer(logits: &[f64], spec: &LossSpec) -> Result<LossResult> {
    spec.validate()?;
    if logits.iter().any(|l| !l.is_finite()) {
        return Err(Error::invalid("non-finite logit"));
    }
    let (value, dlogits) = match spec.kind {
        LossKind::Ce => (0.0, vec![0.0; logits.len()]),
        LossKind::Ls => smoothing_penalty(logits, spec.epsilon),
        LossKind::Mbls => margin_penalty(logits, spec.gamma, spec.margin),
        LossKind::Ecp => entropy_penalty(logits, spec.beta),
    };
    Ok(LossResult { value, dlogits })
}

/// The full (ungated) loss named by `spec.kind`.
pub fn spec_loss(logits: &[f64], target: usize, spec: &LossSpec) -> Result<LossResult> {
    match spec.kind {
        LossKind::Ce => ce_loss(logits, target),
        LossKind::Ls => ls_loss(logits, target, spec.epsilon),
        LossKind::Mbls => mbls_loss(logits, target, spec.gamma, spec.margin),
        LossKind::Ecp => ecp_loss(logits, target, spec.beta),
    }
}

/// `CE + gate · alpha · L_cal`, with `gate` in {0, 1}.
pub fn gated_loss(logits: &[f64], target: usize, spec: &LossSpec, gate: u8) -> Result<LossResult> {
    if gate > 1 {
        return Err(Error::invalid(format!("gate must be 0 or 1, got {gate}")));
    }
    spec.validate()?;
    let mut out = ce_loss(logits, target)?;
    if gate == 0 || spec.alpha == 0.0 || spec.kind == LossKind::Ce {
        return Ok(out);
    }
    let cal = match spec.cal_term {
        CalTerm::Regularizer => regularizer(logits, spec)?,
        CalTerm::Full => spec_loss(logits, target, spec)?,
    };
    out.value += spec.alpha * cal.value;
    for (d, g) in out.dlogits.iter_mut().zip(cal.dlogits) {
        *d += spec.alpha * g;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    // logits (ln 4, 0) give p = (0.8, 0.2)
    fn p80() -> [f64; 2] {
        [4f64.ln(), 0.0]
    }

    #[test]
    fn ce_examples() {
        assert!(ce_loss(&[50.0, 0.0], 0).unwrap().value < 1e-20);
        assert!((ce_loss(&p80(), 0).unwrap().value - 0.223144).abs() < 1e-4);
        let k = 5;
        let v = ce_loss(&vec![0.3; k], 2).unwrap().value;
        assert!((v - (k as f64).ln()).abs() < 1e-12);
        assert!(ce_loss(&[0.0, 1.0], 2).is_err());
    }

    #[test]
    fn ls_examples() {
        let logits = [0.4, -1.0, 2.0];
        assert_eq!(ls_loss(&logits, 1, 0.0).unwrap(), ce_loss(&logits, 1).unwrap());
        let v = ls_loss(&[1.0; 4], 3, 0.3).unwrap().value;
        assert!((v - 4f64.ln()).abs() < 1e-12);
        // 0.95·(-ln 0.8) + 0.05·(-ln 0.2)
        let want = 0.95 * -(0.8f64.ln()) + 0.05 * -(0.2f64.ln());
        let got = ls_loss(&p80(), 0, 0.1).unwrap().value;
        assert!((got - want).abs() < 1e-12);
        assert!((got - 0.29246).abs() < 1e-4);
        assert!(ls_loss(&p80(), 0, 1.0).is_err());
        assert!(ls_loss(&p80(), 0, -0.1).is_err());
    }

    #[test]
    fn mbls_examples() {
        let ce = ce_loss(&[1.5; 3], 0).unwrap();
        assert_eq!(mbls_loss(&[1.5; 3], 0, 0.1, 0.0).unwrap(), ce);
        let logits = [2.0, 0.0, 0.0];
        assert_eq!(
            mbls_loss(&logits, 0, 0.1, 5.0).unwrap().value,
            ce_loss(&logits, 0).unwrap().value
        );
        let v = mbls_loss(&logits, 0, 0.1, 0.0).unwrap().value;
        let ce = -(2f64.exp() / (2f64.exp() + 2.0)).ln();
        assert!((v - (ce + 0.4)).abs() < 1e-12);
        assert!((v - 0.6395).abs() < 1e-3);
    }

    #[test]
    fn ecp_examples() {
        let v = ecp_loss(&[800.0, 0.0, 0.0], 0, 0.5).unwrap().value;
        assert_eq!(v, 0.0);
        let k = 3f64;
        let v = ecp_loss(&[0.0; 3], 1, 0.2).unwrap().value;
        assert!((v - 0.8 * k.ln()).abs() < 1e-12);
        let h = -(0.8 * 0.8f64.ln() + 0.2 * 0.2f64.ln());
        assert!((h - 0.50040).abs() < 1e-5);
        let v = ecp_loss(&p80(), 0, 0.1).unwrap().value;
        assert!((v - 0.17310).abs() < 1e-4);
    }

    #[test]
    fn gated_examples() {
        let logits = [0.3, -0.2, 1.7];
        let ce = ce_loss(&logits, 2).unwrap();
        for kind in [LossKind::Ls, LossKind::Mbls, LossKind::Ecp] {
            let spec = LossSpec::multi_choice(kind);
            assert_eq!(gated_loss(&logits, 2, &spec, 0).unwrap(), ce);
            let spec = LossSpec { alpha: 0.0, ..spec };
            assert_eq!(gated_loss(&logits, 2, &spec, 1).unwrap(), ce);
        }
        let spec = LossSpec::multi_choice(LossKind::Ls);
        let kl: f64 = [0.8f64, 0.2].iter().map(|p| 0.5 * (0.5 / p).ln()).sum();
        let got = gated_loss(&p80(), 0, &spec, 1).unwrap().value;
        assert!((got - (-(0.8f64.ln()) + kl / 9.0)).abs() < 1e-12);
        assert!(gated_loss(&logits, 0, &spec, 2).is_err());
    }

    #[test]
    fn full_cal_term_adds_whole_loss() {
        let logits = [0.3, -0.2, 1.7];
        let spec = LossSpec {
            cal_term: CalTerm::Full,
            ..LossSpec::multi_choice(LossKind::Ecp)
        };
        let got = gated_loss(&logits, 1, &spec, 1).unwrap().value;
        let want = ce_loss(&logits, 1).unwrap().value + ecp_loss(&logits, 1, 0.1).unwrap().value;
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn zero_strength_reduces_to_ce_exactly() {
        let logits = [0.9, -2.0, 0.1, 0.0];
        let ce = ce_loss(&logits, 3).unwrap();
        assert_eq!(ls_loss(&logits, 3, 0.0).unwrap(), ce);
        assert_eq!(mbls_loss(&logits, 3, 0.0, 1.0).unwrap(), ce);
        assert_eq!(ecp_loss(&logits, 3, 0.0).unwrap(), ce);
    }

    #[test]
    fn presets() {
        let mc = LossSpec::multi_choice(LossKind::Mbls);
        assert_eq!((mc.epsilon, mc.gamma, mc.margin, mc.beta), (0.1, 0.1, 0.0, 0.1));
        let oe = LossSpec::open_ended(LossKind::Mbls);
        assert_eq!((oe.epsilon, oe.gamma, oe.margin, oe.beta), (0.15, 0.15, 10.0, 0.15));
    }
}
