//! Fine-tuning loop with per-sample knowledge gating.

use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::knowledge::{
    gate, gate_quality_lenient, nll_of, update_threshold, CalibrationSet, GateQuality, DEFAULT_GRID_SIZE,
};
use crate::losses::{gated_loss, LossSpec};
use crate::metrics::{confidence_auroc, ece, PredictionRecord, DEFAULT_BINS};
use crate::model::{argmax, backprop, eval_logits, forward_trace, softmax_t, BackpropItem, Mode, ModelParams};
use crate::seed::{self, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Optimizer {
    Sgd {
        lr: f64,
    },
    Adam {
        lr: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_adam_eps")]
        eps: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}

impl Optimizer {
    pub fn adam(lr: f64) -> Self {
        Optimizer::Adam {
            lr,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_adam_eps(),
        }
    }

    fn lr(&self) -> f64 {
        match *self {
            Optimizer::Sgd { lr } | Optimizer::Adam { lr, .. } => lr,
        }
    }
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::adam(1e-3)
    }
}

struct OptimizerState {
    opt: Optimizer,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl OptimizerState {
    fn new(opt: Optimizer, n: usize) -> Self {
        OptimizerState {
            opt,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, theta: &mut [f64], grad: &[f64]) {
        match self.opt {
            Optimizer::Sgd { lr } => {
                for (p, g) in theta.iter_mut().zip(grad) {
                    *p -= lr * g;
                }
            }
            Optimizer::Adam { lr, beta1, beta2, eps } => {
                self.t += 1;
                let c1 = 1.0 - beta1.powi(self.t);
                let c2 = 1.0 - beta2.powi(self.t);
                for i in 0..theta.len() {
                    self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * grad[i];
                    self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * grad[i] * grad[i];
                    let mhat = self.m[i] / c1;
                    let vhat = self.v[i] / c2;
                    theta[i] -= lr * mhat / (vhat.sqrt() + eps);
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GatingMode {
    /// Plain cross-entropy for every sample.
    #[default]
    None,
    /// Calibration term where the NLL gate marks the sample as known.
    Cognition,
    /// Calibration term on a random subset of matching expected size.
    Random,
    /// Calibration term on every sample.
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    pub steps: usize,
    pub batch_size: usize,
    pub loss: LossSpec,
    pub gating: GatingMode,
    /// Leading plain-CE steps before the initial threshold is computed.
    /// `None` means 5% of `steps`.
    pub style_adapt_steps: Option<usize>,
    /// Steps between threshold refreshes; `None` means once per epoch.
    pub update_interval: Option<usize>,
    /// Steps between dynamics rows; `None` means `steps / 20`.
    pub eval_interval: Option<usize>,
    pub grid_size: usize,
    /// Gate probability for `GatingMode::Random`.
    pub random_gate_fraction: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: Optimizer::adam(1.5e-4),
            steps: 1000,
            batch_size: 32,
            loss: LossSpec::default(),
            gating: GatingMode::None,
            style_adapt_steps: None,
            update_interval: None,
            eval_interval: None,
            grid_size: DEFAULT_GRID_SIZE,
            random_gate_fraction: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("train.batch_size must be at least 1");
        }
        let lr = self.optimizer.lr();
        if !(lr > 0.0) || !lr.is_finite() {
            return bad("train.optimizer.lr must be positive");
        }
        if self.grid_size < 2 {
            return bad("train.grid_size must be at least 2");
        }
        if self.style_adapt_steps.is_some_and(|s| s > self.steps) {
            return bad("train.style_adapt_steps exceeds train.steps");
        }
        if self.update_interval == Some(0) || self.eval_interval == Some(0) {
            return bad("train.update_interval and train.eval_interval must be positive");
        }
        if self.gating == GatingMode::Random {
            match self.random_gate_fraction {
                Some(f) if (0.0..=1.0).contains(&f) => {}
                Some(_) => return bad("train.random_gate_fraction must lie in [0, 1]"),
                None => return bad("random gating needs train.random_gate_fraction"),
            }
        }
        self.loss
            .validate()
            .map_err(|e| Error::Config(format!("train.loss: {e}")))
    }

    pub fn adapt_steps(&self) -> usize {
        self.style_adapt_steps.unwrap_or(self.steps / 20).min(self.steps)
    }

    fn eval_every(&self) -> usize {
        self.eval_interval.unwrap_or((self.steps / 20).max(1))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    Ood,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::Ood => "ood",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Evaluation of one split at one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicsRow {
    pub step: usize,
    pub split: Split,
    pub accuracy: f64,
    pub mean_conf: f64,
    pub conf_correct: f64,
    pub conf_incorrect: f64,
    pub ece: f64,
    pub auroc: f64,
    pub threshold: f64,
    pub gated_fraction: f64,
}

pub const DYNAMICS_HEADER: [&str; 10] = [
    "step",
    "split",
    "accuracy",
    "mean_conf",
    "conf_correct",
    "conf_incorrect",
    "ece",
    "auroc",
    "threshold",
    "gated_fraction",
];

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DynamicsLog {
    pub rows: Vec<DynamicsRow>,
}

impl DynamicsLog {
    pub fn last(&self, split: Split) -> Option<&DynamicsRow> {
        self.rows.iter().rev().find(|r| r.split == split)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &DynamicsRow> {
        self.rows.iter().filter(move |r| r.split == split)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv_to(file)
    }

    pub fn write_csv_to<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(DYNAMICS_HEADER)?;
        for r in &self.rows {
            w.write_record([
                r.step.to_string(),
                r.split.to_string(),
                r.accuracy.to_string(),
                r.mean_conf.to_string(),
                r.conf_correct.to_string(),
                r.conf_incorrect.to_string(),
                r.ece.to_string(),
                r.auroc.to_string(),
                r.threshold.to_string(),
                r.gated_fraction.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<csv writer>", e))?;
        Ok(())
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut r = csv::Reader::from_path(path)?;
        if r.headers()?.iter().ne(DYNAMICS_HEADER) {
            return Err(Error::invalid(format!(
                "{}: unexpected dynamics header",
                path.display()
            )));
        }
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let f = |i: usize| -> Result<f64> {
                rec[i]
                    .parse()
                    .map_err(|_| Error::invalid(format!("bad number {:?}", &rec[i])))
            };
            let split = match &rec[1] {
                "train" => Split::Train,
                "test" => Split::Test,
                "ood" => Split::Ood,
                other => return Err(Error::invalid(format!("unknown split {other:?}"))),
            };
            rows.push(DynamicsRow {
                step: rec[0].parse().map_err(|_| Error::invalid("bad step"))?,
                split,
                accuracy: f(2)?,
                mean_conf: f(3)?,
                conf_correct: f(4)?,
                conf_incorrect: f(5)?,
                ece: f(6)?,
                auroc: f(7)?,
                threshold: f(8)?,
                gated_fraction: f(9)?,
            });
        }
        Ok(DynamicsLog { rows })
    }
}

/// Eval-mode prediction records for every sample.
pub fn predict_records(params: &ModelParams, dataset: &Dataset, exec: Exec) -> Result<Vec<PredictionRecord>> {
    exec.map(&dataset.samples, |s| {
        let logits = eval_logits(params, &s.features)?;
        let p = softmax_t(&logits, 1.0);
        let top = argmax(&p);
        Ok(PredictionRecord {
            confidence: p[top].clamp(0.0, 1.0),
            correct: top == s.label,
            logits: Some(logits),
        })
    })
    .into_iter()
    .collect()
}

/// Summary statistics of a record set, in dynamics-row form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub accuracy: f64,
    pub mean_conf: f64,
    pub conf_correct: f64,
    pub conf_incorrect: f64,
    pub ece: f64,
    /// 0.5 when either class of predictions is empty.
    pub auroc: f64,
}

pub fn summarize(records: &[PredictionRecord]) -> Result<Summary> {
    if records.is_empty() {
        return Err(Error::invalid("cannot summarize an empty split"));
    }
    let n = records.len() as f64;
    let (mut n_ok, mut sum_ok, mut sum_bad) = (0usize, 0.0, 0.0);
    for r in records {
        if r.correct {
            n_ok += 1;
            sum_ok += r.confidence;
        } else {
            sum_bad += r.confidence;
        }
    }
    let n_bad = records.len() - n_ok;
    let accuracy = n_ok as f64 / n;
    let conf_correct = if n_ok == 0 { 0.0 } else { sum_ok / n_ok as f64 };
    let conf_incorrect = if n_bad == 0 { 0.0 } else { sum_bad / n_bad as f64 };
    Ok(Summary {
        accuracy,
        // Composed from the per-class means so the mixture identity holds.
        mean_conf: accuracy * conf_correct + (1.0 - accuracy) * conf_incorrect,
        conf_correct,
        conf_incorrect,
        ece: ece(records, DEFAULT_BINS)?,
        auroc: confidence_auroc(records).unwrap_or(0.5),
    })
}

/// Per-sample gate indicators with `P(gate = 1) = fraction`.
pub fn random_gate(batch_len: usize, fraction: f64, rng: &mut Rng) -> Vec<u8> {
    (0..batch_len)
        .map(|_| u8::from(rng.random::<f64>() < fraction))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GatePoint {
    pub step: usize,
    pub quality: GateQuality,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub log: DynamicsLog,
    /// Mean batch loss of every optimizer step.
    pub loss_trace: Vec<f64>,
    /// Gate agreement with oracle tags on the training set at each eval step
    /// after style adaptation.
    pub gate_trace: Vec<GatePoint>,
    pub t0: f64,
    pub final_threshold: f64,
    /// Share of gated samples over the post-adaptation steps.
    pub mean_gated_fraction: f64,
    /// Per-sample loss evaluations that fed an update.
    pub samples_used: usize,
}

impl TrainOutcome {
    pub fn mean_gate_quality(&self) -> Option<GateQuality> {
        if self.gate_trace.is_empty() {
            return None;
        }
        let n = self.gate_trace.len() as f64;
        let sum = |f: fn(&GateQuality) -> f64| self.gate_trace.iter().map(|g| f(&g.quality)).sum::<f64>() / n;
        Some(GateQuality {
            accuracy: sum(|q| q.accuracy),
            tpr: sum(|q| q.tpr),
            tnr: sum(|q| q.tnr),
        })
    }
}

struct Batcher {
    order: Vec<usize>,
    pos: usize,
    rng: Rng,
}

impl Batcher {
    fn new(n: usize, rng: Rng) -> Self {
        let mut b = Batcher {
            order: (0..n).collect(),
            pos: n,
            rng,
        };
        b.refill();
        b
    }

    fn refill(&mut self) {
        self.order.shuffle(&mut self.rng);
        self.pos = 0;
    }

    fn next(&mut self, size: usize) -> Vec<usize> {
        let size = size.min(self.order.len());
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.order.len() {
                self.refill();
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// One optimizer step on `batch` with per-sample gates. Returns the mean loss.
fn gated_step(
    params: &mut ModelParams,
    opt: &mut OptimizerState,
    dataset: &Dataset,
    batch: &[usize],
    gates: &[u8],
    loss: &LossSpec,
    dropout_rng: &mut Rng,
) -> Result<f64> {
    let mut traces = Vec::with_capacity(batch.len());
    let mut grads = Vec::with_capacity(batch.len());
    let mut total = 0.0;
    for (&i, &g) in batch.iter().zip(gates) {
        let s = &dataset.samples[i];
        let trace = forward_trace(params, &s.features, Mode::Train, Some(&mut *dropout_rng))?;
        let l = gated_loss(&trace.logits, s.label, loss, g)?;
        total += l.value;
        traces.push(trace);
        grads.push(l.dlogits);
    }
    let items: Vec<BackpropItem<'_>> = batch
        .iter()
        .zip(traces.iter().zip(&grads))
        .map(|(&i, (trace, dlogits))| BackpropItem {
            features: &dataset.samples[i].features,
            trace,
            dlogits,
        })
        .collect();
    let g = backprop(params, &items)?;
    opt.step(&mut params.theta, &g.0);
    if params.theta.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("training diverged to non-finite parameters"));
    }
    Ok(total / batch.len() as f64)
}

/// Plain cross-entropy minibatch training.
pub fn fit_plain(
    params: &ModelParams,
    dataset: &Dataset,
    steps: usize,
    batch_size: usize,
    optimizer: Optimizer,
    seed: u64,
) -> Result<ModelParams> {
    if dataset.is_empty() {
        return Err(Error::invalid("cannot train on an empty dataset"));
    }
    let mut params = params.clone();
    let mut opt = OptimizerState::new(optimizer, params.len());
    let mut batcher = Batcher::new(dataset.len(), seed::rng(seed, "shuffle"));
    let mut dropout_rng = seed::rng(seed, "dropout");
    let ce = LossSpec::default();
    for _ in 0..steps {
        let batch = batcher.next(batch_size);
        let gates = vec![0; batch.len()];
        gated_step(&mut params, &mut opt, dataset, &batch, &gates, &ce, &mut dropout_rng)?;
    }
    Ok(params)
}

/// Runs `steps` plain-CE steps, then computes the initial threshold on the
/// calibration set.
pub fn style_adaptation(
    params: &ModelParams,
    dataset: &Dataset,
    cal: &mut CalibrationSet,
    steps: usize,
    config: &TrainConfig,
    exec: Exec,
) -> Result<(ModelParams, f64)> {
    let adapted = if steps == 0 {
        params.clone()
    } else {
        fit_plain(params, dataset, steps, config.batch_size, config.optimizer, config.seed)?
    };
    let t0 = update_threshold(cal, &adapted, config.grid_size, exec)?;
    Ok((adapted, t0))
}

/// Fine-tunes `params` on `dataset`.
///
/// The first `adapt_steps()` steps are plain CE (style adaptation); then the
/// initial threshold is computed on `cal` and each sample's loss is gated per
/// `config.gating`. The threshold is refreshed every `update_interval` steps.
/// `evals` are logged every `eval_interval` steps, plus step 0 and the last
/// step.
pub fn train(
    params: &ModelParams,
    dataset: &Dataset,
    config: &TrainConfig,
    cal: &mut CalibrationSet,
    evals: &[(Split, &Dataset)],
    exec: Exec,
) -> Result<TrainOutcome> {
    config.validate()?;
    params.validate()?;
    if dataset.is_empty() {
        return Err(Error::invalid("cannot train on an empty dataset"));
    }
    if cal.samples.is_empty() {
        return Err(Error::invalid("empty calibration set"));
    }
    crate::error::check_len("dataset dim", params.dim, dataset.dim)?;
    crate::error::check_len("dataset classes", params.classes, dataset.classes)?;
    for (split, ds) in evals {
        if ds.is_empty() {
            return Err(Error::invalid(format!("{split} evaluation set is empty")));
        }
    }

    let mut outcome = TrainOutcome {
        params: params.clone(),
        log: DynamicsLog::default(),
        loss_trace: Vec::with_capacity(config.steps),
        gate_trace: Vec::new(),
        t0: f64::NAN,
        final_threshold: f64::NAN,
        mean_gated_fraction: 0.0,
        samples_used: 0,
    };
    if config.steps == 0 {
        return Ok(outcome);
    }

    let adapt = config.adapt_steps();
    let epoch = dataset.len().div_ceil(config.batch_size.min(dataset.len()));
    let update_every = config.update_interval.unwrap_or(epoch).max(1);
    let eval_every = config.eval_every();
    let has_tags = dataset.samples.iter().any(|s| s.oracle_tag.is_some());

    let mut params = params.clone();
    let mut opt = OptimizerState::new(config.optimizer, params.len());
    let mut batcher = Batcher::new(dataset.len(), seed::rng(config.seed, "shuffle"));
    let mut dropout_rng = seed::rng(config.seed, "dropout");
    let mut gate_rng = seed::rng(config.seed, "random-gate");
    let ce = LossSpec::default();

    let mut t = update_threshold(cal, &params, config.grid_size, exec)?;
    if adapt == 0 {
        outcome.t0 = t;
    }
    let (mut window_gated, mut window_seen) = (0usize, 0usize);
    let (mut total_gated, mut total_seen) = (0usize, 0usize);

    let log_point =
        |step: usize, params: &ModelParams, t: f64, fraction: f64, outcome: &mut TrainOutcome| -> Result<()> {
            for (split, ds) in evals {
                let s = summarize(&predict_records(params, ds, exec)?)?;
                outcome.log.rows.push(DynamicsRow {
                    step,
                    split: *split,
                    accuracy: s.accuracy,
                    mean_conf: s.mean_conf,
                    conf_correct: s.conf_correct,
                    conf_incorrect: s.conf_incorrect,
                    ece: s.ece,
                    auroc: s.auroc,
                    threshold: t,
                    gated_fraction: fraction,
                });
            }
            if has_tags && step >= adapt {
                if let Some(quality) = gate_quality_lenient(dataset, params, t, exec)? {
                    outcome.gate_trace.push(GatePoint { step, quality });
                }
            }
            Ok(())
        };

    log_point(0, &params, t, 0.0, &mut outcome)?;

    for step in 1..=config.steps {
        let batch = batcher.next(config.batch_size);
        let gated_phase = step > adapt;
        let gates: Vec<u8> = if !gated_phase {
            vec![0; batch.len()]
        } else {
            match config.gating {
                GatingMode::None => vec![0; batch.len()],
                GatingMode::Uniform => vec![1; batch.len()],
                GatingMode::Random => {
                    random_gate(batch.len(), config.random_gate_fraction.unwrap_or(0.0), &mut gate_rng)
                }
                GatingMode::Cognition => batch
                    .iter()
                    .map(|&i| nll_of(&params, &dataset.samples[i]).map(|n| gate(n, t)))
                    .collect::<Result<_>>()?,
            }
        };
        let spec = if gated_phase { &config.loss } else { &ce };
        let loss = gated_step(&mut params, &mut opt, dataset, &batch, &gates, spec, &mut dropout_rng)?;
        outcome.loss_trace.push(loss);
        outcome.samples_used += batch.len();
        if gated_phase {
            let g = gates.iter().map(|&g| g as usize).sum::<usize>();
            window_gated += g;
            window_seen += batch.len();
            total_gated += g;
            total_seen += batch.len();
        }

        if step == adapt {
            t = update_threshold(cal, &params, config.grid_size, exec)?;
            outcome.t0 = t;
        } else if gated_phase && (step - adapt).is_multiple_of(update_every) {
            t = update_threshold(cal, &params, config.grid_size, exec)?;
        }

        if step % eval_every == 0 || step == config.steps {
            let fraction = if window_seen == 0 {
                0.0
            } else {
                window_gated as f64 / window_seen as f64
            };
            log_point(step, &params, t, fraction, &mut outcome)?;
            window_gated = 0;
            window_seen = 0;
        }
    }

    outcome.final_threshold = t;
    outcome.mean_gated_fraction = if total_seen == 0 {
        0.0
    } else {
        total_gated as f64 / total_seen as f64
    };
    outcome.params = params;
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Sample;
    use crate::losses::LossKind;
    use crate::model::Architecture;
    use rand::SeedableRng;

    fn blobs(n: usize, seed: u64) -> Dataset {
        let mut rng = Rng::seed_from_u64(seed);
        let samples = (0..n as u64)
            .map(|id| {
                let label = (id % 3) as usize;
                let center = [[2.0, 0.0], [-1.0, 1.7], [-1.0, -1.7]][label];
                Sample {
                    id,
                    features: center.iter().map(|c| c + 0.6 * (rng.random::<f64>() - 0.5)).collect(),
                    label,
                    oracle_tag: None,
                }
            })
            .collect();
        Dataset::new(samples, 3, 2).unwrap()
    }

    fn setup() -> (ModelParams, Dataset, CalibrationSet) {
        let ds = blobs(120, 1);
        let cal = CalibrationSet::new(Dataset::new(ds.samples[..30].to_vec(), 3, 2).unwrap());
        let p = ModelParams::init(Architecture::Mlp { hidden: 8 }, 2, 3, &mut Rng::seed_from_u64(2)).unwrap();
        (p, ds, cal)
    }

    #[test]
    fn zero_steps_is_identity() {
        let (p, ds, mut cal) = setup();
        let cfg = TrainConfig {
            steps: 0,
            ..Default::default()
        };
        let out = train(&p, &ds, &cfg, &mut cal, &[(Split::Train, &ds)], Exec::Sequential).unwrap();
        assert_eq!(out.params, p);
        assert!(out.log.rows.is_empty());
    }

    #[test]
    fn loss_decreases_on_separable_task() {
        let (p, ds, mut cal) = setup();
        let cfg = TrainConfig {
            steps: 400,
            optimizer: Optimizer::adam(1e-2),
            ..Default::default()
        };
        let out = train(&p, &ds, &cfg, &mut cal, &[], Exec::Sequential).unwrap();
        let k = cfg.steps / 10;
        let head = out.loss_trace[..k].iter().sum::<f64>() / k as f64;
        let tail = out.loss_trace[cfg.steps - k..].iter().sum::<f64>() / k as f64;
        assert!(tail < head, "head {head} tail {tail}");
        assert_eq!(out.samples_used, cfg.steps * cfg.batch_size);
    }

    #[test]
    fn vanilla_equals_cognition_with_zero_alpha() {
        let (p, ds, cal) = setup();
        let vanilla = TrainConfig {
            steps: 150,
            gating: GatingMode::None,
            loss: LossSpec::default(),
            ..Default::default()
        };
        let cognition = TrainConfig {
            gating: GatingMode::Cognition,
            loss: LossSpec {
                alpha: 0.0,
                ..LossSpec::multi_choice(LossKind::Ls)
            },
            ..vanilla.clone()
        };
        let a = train(
            &p,
            &ds,
            &vanilla,
            &mut cal.clone(),
            &[(Split::Train, &ds)],
            Exec::Sequential,
        )
        .unwrap();
        let b = train(
            &p,
            &ds,
            &cognition,
            &mut cal.clone(),
            &[(Split::Train, &ds)],
            Exec::Sequential,
        )
        .unwrap();
        let bits = |o: &TrainOutcome| o.params.theta.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert_eq!(a.loss_trace, b.loss_trace);
    }

    #[test]
    fn training_is_reproducible_across_exec_modes() {
        let (p, ds, cal) = setup();
        let cfg = TrainConfig {
            steps: 120,
            gating: GatingMode::Cognition,
            loss: LossSpec::multi_choice(LossKind::Ecp),
            eval_interval: Some(10),
            ..Default::default()
        };
        let a = train(&p, &ds, &cfg, &mut cal.clone(), &[(Split::Test, &ds)], Exec::Sequential).unwrap();
        let b = train(&p, &ds, &cfg, &mut cal.clone(), &[(Split::Test, &ds)], Exec::Parallel).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.log, b.log);
        let steps: Vec<usize> = a.log.split(Split::Test).map(|r| r.step).collect();
        assert!(steps.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(steps.first(), Some(&0));
        assert_eq!(steps.last(), Some(&120));
    }

    #[test]
    fn dynamics_confidence_identity() {
        let (p, ds, mut cal) = setup();
        let cfg = TrainConfig {
            steps: 60,
            eval_interval: Some(5),
            ..Default::default()
        };
        let out = train(&p, &ds, &cfg, &mut cal, &[(Split::Train, &ds)], Exec::Sequential).unwrap();
        for r in &out.log.rows {
            let mix = r.accuracy * r.conf_correct + (1.0 - r.accuracy) * r.conf_incorrect;
            assert!((r.mean_conf - mix).abs() < 1e-9);
            assert!(r.ece.is_finite() && r.auroc.is_finite() && r.threshold.is_finite());
        }
    }

    #[test]
    fn random_gating_needs_a_fraction() {
        let (p, ds, mut cal) = setup();
        let cfg = TrainConfig {
            gating: GatingMode::Random,
            ..Default::default()
        };
        assert!(matches!(
            train(&p, &ds, &cfg, &mut cal, &[], Exec::Sequential),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn random_gate_extremes_and_rate() {
        let mut rng = Rng::seed_from_u64(11);
        assert!(random_gate(50, 0.0, &mut rng).iter().all(|&g| g == 0));
        assert!(random_gate(50, 1.0, &mut rng).iter().all(|&g| g == 1));
        let n = 10_000;
        let k = random_gate(n, 0.3, &mut rng).iter().filter(|&&g| g == 1).count() as f64;
        let sd = (n as f64 * 0.3 * 0.7).sqrt();
        assert!((k - 3000.0).abs() <= 3.0 * sd, "{k}");
    }

    #[test]
    fn style_adaptation_zero_steps_keeps_params() {
        let (p, ds, mut cal) = setup();
        let (q, t0) = style_adaptation(&p, &ds, &mut cal, 0, &TrainConfig::default(), Exec::Sequential).unwrap();
        assert_eq!(q, p);
        assert!(t0.is_finite());
        let (q1, t1) = style_adaptation(&p, &ds, &mut cal, 20, &TrainConfig::default(), Exec::Sequential).unwrap();
        let (q2, t2) = style_adaptation(&p, &ds, &mut cal, 20, &TrainConfig::default(), Exec::Sequential).unwrap();
        assert_eq!((q1, t1), (q2, t2));
    }

    #[test]
    fn dynamics_csv_header() {
        let log = DynamicsLog {
            rows: vec![DynamicsRow {
                step: 3,
                split: Split::Ood,
                accuracy: 0.5,
                mean_conf: 0.75,
                conf_correct: 0.8,
                conf_incorrect: 0.7,
                ece: 0.25,
                auroc: 0.5,
                threshold: 1.25,
                gated_fraction: 0.0,
            }],
        };
        let mut buf = Vec::new();
        log.write_csv_to(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "step,split,accuracy,mean_conf,conf_correct,conf_incorrect,ece,auroc,threshold,gated_fraction\n\
             3,ood,0.5,0.75,0.8,0.7,0.25,0.5,1.25,0\n"
        );
    }
}
