//! Post-hoc and inference-time baselines: temperature scaling, MC dropout,
//! and deep-ensemble averaging.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::exec::Exec;
use crate::metrics::{ece, PredictionRecord, DEFAULT_BINS};
use crate::model::{argmax, eval_logits, forward, log_softmax, softmax, softmax_t, Mode, ModelParams};
use crate::seed::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TsObjective {
    #[default]
    Ece,
    Nll,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TemperatureSearch {
    pub t_min: f64,
    pub t_max: f64,
    pub steps: usize,
}

impl Default for TemperatureSearch {
    fn default() -> Self {
        TemperatureSearch {
            t_min: 0.05,
            t_max: 10.0,
            steps: 200,
        }
    }
}

impl TemperatureSearch {
    /// Log-uniform grid from `t_min` to `t_max`, plus `T = 1` when it lies in
    /// range, so the fit can never do worse than leaving logits unscaled.
    pub fn grid(&self) -> Result<Vec<f64>> {
        if !(self.t_min > 0.0) || !(self.t_max >= self.t_min) || self.steps < 2 {
            return Err(Error::invalid(format!(
                "bad temperature search: t_min={} t_max={} steps={}",
                self.t_min, self.t_max, self.steps
            )));
        }
        let (lo, hi) = (self.t_min.ln(), self.t_max.ln());
        let mut grid: Vec<f64> = (0..self.steps)
            .map(|i| (lo + (hi - lo) * i as f64 / (self.steps - 1) as f64).exp())
            .collect();
        if (self.t_min..=self.t_max).contains(&1.0) && !grid.contains(&1.0) {
            grid.push(1.0);
            grid.sort_by(f64::total_cmp);
        }
        Ok(grid)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemperatureFit {
    pub t_star: f64,
    pub objective: TsObjective,
    /// `(T, objective(T))` for every grid point, in increasing `T`.
    pub curve: Vec<(f64, f64)>,
}

impl TemperatureFit {
    pub fn best_value(&self) -> f64 {
        self.curve
            .iter()
            .find(|(t, _)| *t == self.t_star)
            .map(|(_, v)| *v)
            .unwrap_or(f64::NAN)
    }
}

/// Objective value of the validation set at temperature `t`.
pub fn temperature_objective(logits: &[Vec<f64>], labels: &[usize], t: f64, objective: TsObjective) -> Result<f64> {
    match objective {
        TsObjective::Ece => {
            let records: Vec<PredictionRecord> = logits
                .iter()
                .zip(labels)
                .map(|(l, &y)| {
                    let p = softmax_t(l, t);
                    let top = argmax(&p);
                    PredictionRecord::new(p[top].clamp(0.0, 1.0), top == y)
                })
                .collect();
            ece(&records, DEFAULT_BINS)
        }
        TsObjective::Nll => {
            let total: f64 = logits
                .iter()
                .zip(labels)
                .map(|(l, &y)| {
                    let scaled: Vec<f64> = l.iter().map(|v| v / t).collect();
                    -log_softmax(&scaled)[y]
                })
                .sum();
            Ok(total / logits.len() as f64)
        }
    }
}

/// Grid search for the temperature minimizing `objective` on validation
/// logits. Ties go to the smallest temperature.
pub fn fit_temperature(
    val_logits: &[Vec<f64>],
    val_labels: &[usize],
    objective: TsObjective,
    search: &TemperatureSearch,
    exec: Exec,
) -> Result<TemperatureFit> {
    if val_logits.is_empty() {
        return Err(Error::invalid("empty validation set"));
    }
    check_len("validation labels", val_logits.len(), val_labels.len())?;
    let k = val_logits[0].len();
    for (l, &y) in val_logits.iter().zip(val_labels) {
        check_len("validation logits", k, l.len())?;
        if y >= k {
            return Err(Error::invalid(format!("label {y} out of range for {k} classes")));
        }
        if l.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite validation logit"));
        }
    }
    let grid = search.grid()?;
    let values: Result<Vec<f64>> = exec
        .map(&grid, |&t| temperature_objective(val_logits, val_labels, t, objective))
        .into_iter()
        .collect();
    let curve: Vec<(f64, f64)> = grid.into_iter().zip(values?).collect();
    let mut best = curve[0];
    for &(t, v) in &curve[1..] {
        if v < best.1 {
            best = (t, v);
        }
    }
    Ok(TemperatureFit {
        t_star: best.0,
        objective,
        curve,
    })
}

pub fn apply_temperature(logits: &[f64], t: f64) -> Result<Vec<f64>> {
    softmax(logits, t)
}

/// Mean of `n_passes` train-mode (dropout-on) softmax outputs.
pub fn mc_dropout_predict(params: &ModelParams, features: &[f64], n_passes: usize, rng: &mut Rng) -> Result<Vec<f64>> {
    if n_passes == 0 {
        return Err(Error::invalid("need at least one MC-dropout pass"));
    }
    let mut mean = vec![0.0; params.classes];
    for _ in 0..n_passes {
        let logits = forward(params, features, Mode::Train, Some(&mut *rng))?;
        for (m, p) in mean.iter_mut().zip(softmax_t(&logits, 1.0)) {
            *m += p;
        }
    }
    for m in &mut mean {
        *m /= n_passes as f64;
    }
    Ok(mean)
}

/// Arithmetic mean of per-model eval-mode softmax outputs.
pub fn ensemble_predict(models: &[ModelParams], features: &[f64]) -> Result<Vec<f64>> {
    let first = models.first().ok_or_else(|| Error::invalid("empty ensemble"))?;
    let mut mean = vec![0.0; first.classes];
    for m in models {
        check_len("ensemble member classes", first.classes, m.classes)?;
        let logits = eval_logits(m, features)?;
        for (acc, p) in mean.iter_mut().zip(softmax_t(&logits, 1.0)) {
            *acc += p;
        }
    }
    for m in &mut mean {
        *m /= models.len() as f64;
    }
    Ok(mean)
}
