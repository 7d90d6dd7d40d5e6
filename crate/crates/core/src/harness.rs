//! Experiment orchestration: configs, the method matrix, sweeps and reports.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::seq::IndexedRandom;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::datagen::{self, PoolPair, SyntheticTaskSpec};
use crate::error::{Error, Result};
use crate::exec::{self, Exec};
use crate::knowledge::{CalibrationSet, GateQuality, SlickConfig};
use crate::losses::{LossKind, LossSpec};
use crate::metrics::PredictionRecord;
use crate::model::{argmax, Architecture, ModelParams, DEFAULT_HIDDEN};
use crate::posthoc::{self, TemperatureSearch, TsObjective};
use crate::seed;
use crate::trainer::{self, DynamicsLog, GatingMode, Optimizer, Split, Summary, TrainConfig, TrainOutcome};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "VanillaSFT")]
    VanillaSft,
    #[serde(rename = "CoLS")]
    CoLs,
    #[serde(rename = "CoMbLS")]
    CoMbls,
    #[serde(rename = "CoECP")]
    CoEcp,
    #[serde(rename = "UniformLS")]
    UniformLs,
    #[serde(rename = "UniformMbLS")]
    UniformMbls,
    #[serde(rename = "UniformECP")]
    UniformEcp,
    #[serde(rename = "RandomLS")]
    RandomLs,
    #[serde(rename = "RandomMbLS")]
    RandomMbls,
    #[serde(rename = "RandomECP")]
    RandomEcp,
    #[serde(rename = "TS")]
    Ts,
    #[serde(rename = "MCD")]
    Mcd,
    Ensemble,
}

impl Method {
    pub const ALL: [Method; 13] = [
        Method::VanillaSft,
        Method::CoLs,
        Method::CoMbls,
        Method::CoEcp,
        Method::UniformLs,
        Method::UniformMbls,
        Method::UniformEcp,
        Method::RandomLs,
        Method::RandomMbls,
        Method::RandomEcp,
        Method::Ts,
        Method::Mcd,
        Method::Ensemble,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::VanillaSft => "VanillaSFT",
            Method::CoLs => "CoLS",
            Method::CoMbls => "CoMbLS",
            Method::CoEcp => "CoECP",
            Method::UniformLs => "UniformLS",
            Method::UniformMbls => "UniformMbLS",
            Method::UniformEcp => "UniformECP",
            Method::RandomLs => "RandomLS",
            Method::RandomMbls => "RandomMbLS",
            Method::RandomEcp => "RandomECP",
            Method::Ts => "TS",
            Method::Mcd => "MCD",
            Method::Ensemble => "Ensemble",
        }
    }

    /// Gating mode and calibration loss of the fine-tuning run behind this method.
    pub fn gating(self) -> (GatingMode, LossKind) {
        use GatingMode as G;
        use LossKind as L;
        match self {
            Method::VanillaSft | Method::Ts | Method::Mcd | Method::Ensemble => (G::None, L::Ce),
            Method::CoLs => (G::Cognition, L::Ls),
            Method::CoMbls => (G::Cognition, L::Mbls),
            Method::CoEcp => (G::Cognition, L::Ecp),
            Method::UniformLs => (G::Uniform, L::Ls),
            Method::UniformMbls => (G::Uniform, L::Mbls),
            Method::UniformEcp => (G::Uniform, L::Ecp),
            Method::RandomLs => (G::Random, L::Ls),
            Method::RandomMbls => (G::Random, L::Mbls),
            Method::RandomEcp => (G::Random, L::Ecp),
        }
    }

    /// The cognition-gated method a random-gated one takes its gate rate from.
    pub fn cognition_partner(self) -> Option<Method> {
        match self {
            Method::RandomLs => Some(Method::CoLs),
            Method::RandomMbls => Some(Method::CoMbls),
            Method::RandomEcp => Some(Method::CoEcp),
            _ => None,
        }
    }

    /// Training stream seed. Temperature scaling shares the vanilla stream
    /// because it rescales the vanilla model.
    pub fn seed(self, experiment_seed: u64) -> u64 {
        let m = if self == Method::Ts { Method::VanillaSft } else { self };
        seed::derive(experiment_seed, m.as_str())
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub hidden: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: Optimizer,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            hidden: DEFAULT_HIDDEN,
            steps: 3000,
            batch_size: 64,
            optimizer: Optimizer::adam(1e-2),
        }
    }
}

/// Knowledge probing settings; the input noise is relative to the pretraining
/// pool's feature spread.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SlickSettings {
    pub n_perturbations: usize,
    pub n_samples: usize,
    pub temperature: f64,
    pub noise_scale: f64,
}

impl Default for SlickSettings {
    fn default() -> Self {
        let d = SlickConfig::default();
        SlickSettings {
            n_perturbations: d.n_perturbations,
            n_samples: d.n_samples,
            temperature: d.temperature,
            noise_scale: 0.05,
        }
    }
}

/// Gate scale per regularizer; unset entries use `train.loss.alpha`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlphaSettings {
    pub ls: Option<f64>,
    pub mbls: Option<f64>,
    pub ecp: Option<f64>,
}

impl AlphaSettings {
    pub fn for_kind(&self, kind: LossKind, fallback: f64) -> f64 {
        let v = match kind {
            LossKind::Ls => self.ls,
            LossKind::Mbls => self.mbls,
            LossKind::Ecp => self.ecp,
            LossKind::Ce => None,
        };
        v.unwrap_or(fallback)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSettings {
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    /// Fine-tuning set size, drawn from the known/unknown pools.
    pub train_size: usize,
    pub unknown_fraction: f64,
    /// Size of the threshold calibration subset of the fine-tuning set.
    pub cal_size: usize,
    pub ood_shift: f64,
    /// Added to the first output bias of the pretrained model after pool
    /// tagging, as an output-format mismatch.
    pub style_shift: f64,
    pub mcd_dropout: f64,
    pub mcd_passes: usize,
    pub ensemble_size: usize,
    pub ts_objective: TsObjective,
    pub ts_search: TemperatureSearch,
    /// Record wall-clock seconds in reports. Off by default so reports are
    /// byte-reproducible.
    pub timing: bool,
    pub alpha: AlphaSettings,
}

impl Default for ExperimentSettings {
    fn default() -> Self {
        ExperimentSettings {
            methods: Method::ALL.to_vec(),
            seeds: vec![0, 1, 2],
            out_dir: PathBuf::from("cogcalib-out"),
            train_size: 500,
            unknown_fraction: 0.5,
            cal_size: 100,
            ood_shift: 1.0,
            style_shift: 0.0,
            mcd_dropout: 0.02,
            mcd_passes: 4,
            ensemble_size: 3,
            ts_objective: TsObjective::Ece,
            ts_search: TemperatureSearch::default(),
            timing: false,
            alpha: AlphaSettings {
                ls: Some(10.0),
                mbls: Some(2.5),
                ecp: Some(15.0),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub task: SyntheticTaskSpec,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub slick: SlickSettings,
    pub experiment: ExperimentSettings,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.task.validate()?;
        self.train.validate()?;
        let e = &self.experiment;
        if e.methods.is_empty() {
            return bad("experiment.methods must not be empty".into());
        }
        if e.seeds.is_empty() {
            return bad("experiment.seeds must not be empty".into());
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(s) = e.seeds.iter().find(|s| !seen.insert(**s)) {
            return bad(format!("experiment.seeds lists {s} twice"));
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(m) = e.methods.iter().find(|m| !seen.insert(**m)) {
            return bad(format!("experiment.methods lists {m} twice"));
        }
        if !(0.0..=1.0).contains(&e.unknown_fraction) {
            return bad("experiment.unknown_fraction must lie in [0, 1]".into());
        }
        if e.train_size == 0 || e.cal_size == 0 || e.cal_size > e.train_size {
            return bad("experiment.cal_size must be in 1..=train_size".into());
        }
        let n_unknown = (e.unknown_fraction * e.train_size as f64).round() as usize;
        if n_unknown > self.task.unknown_size || e.train_size - n_unknown > self.task.known_size {
            return bad(format!(
                "experiment.train_size {} with unknown_fraction {} needs {} unknown and {} known samples \
                 but the task pools hold {} and {}",
                e.train_size,
                e.unknown_fraction,
                n_unknown,
                e.train_size - n_unknown,
                self.task.unknown_size,
                self.task.known_size
            ));
        }
        if !(e.ood_shift >= 0.0) || !e.style_shift.is_finite() {
            return bad("experiment.ood_shift must be >= 0 and style_shift finite".into());
        }
        if !(0.0..1.0).contains(&e.mcd_dropout) || e.mcd_passes == 0 || e.ensemble_size == 0 {
            return bad("experiment.mcd_dropout must be in [0, 1); mcd_passes and ensemble_size >= 1".into());
        }
        let a = e.alpha;
        if [a.ls, a.mbls, a.ecp]
            .iter()
            .flatten()
            .any(|v| !(*v >= 0.0) || !v.is_finite())
        {
            return bad("experiment.alpha entries must be finite and >= 0".into());
        }
        e.ts_search
            .grid()
            .map_err(|err| Error::Config(format!("experiment.ts_search: {err}")))?;
        let p = &self.pretrain;
        if p.hidden == 0 || p.batch_size == 0 {
            return bad("pretrain.hidden and pretrain.batch_size must be positive".into());
        }
        let s = &self.slick;
        if s.n_perturbations == 0 || !(s.temperature >= 0.0) || !(s.noise_scale >= 0.0) {
            return bad("slick.n_perturbations must be positive, temperature and noise_scale >= 0".into());
        }
        Ok(())
    }
}

/// Everything a seed's method runs share.
#[derive(Debug, Clone)]
pub struct TaskData {
    pub seed: u64,
    pub spec: SyntheticTaskSpec,
    pub pretrained: ModelParams,
    pub slick: SlickConfig,
    pub pools: PoolPair,
    /// Mixed fine-tuning set.
    pub train: Dataset,
    pub cal: Dataset,
    pub test: Dataset,
    pub val: Dataset,
    pub ood: Dataset,
}

impl TaskData {
    pub fn evals(&self) -> [(Split, &Dataset); 3] {
        [
            (Split::Train, &self.train),
            (Split::Test, &self.test),
            (Split::Ood, &self.ood),
        ]
    }
}

pub fn pretrain_model(spec: &SyntheticTaskSpec, pool: &Dataset, cfg: &PretrainConfig) -> Result<ModelParams> {
    let init = ModelParams::init(
        Architecture::Mlp { hidden: cfg.hidden },
        spec.dim,
        spec.classes,
        &mut seed::rng(spec.seed, "init"),
    )?;
    trainer::fit_plain(
        &init,
        pool,
        cfg.steps,
        cfg.batch_size,
        cfg.optimizer,
        seed::derive(spec.seed, "pretrain"),
    )
}

pub fn slick_config(settings: &SlickSettings, pretrain_pool: &Dataset) -> SlickConfig {
    SlickConfig {
        n_perturbations: settings.n_perturbations,
        n_samples: settings.n_samples,
        temperature: settings.temperature,
        noise_sigma: settings.noise_scale * datagen::feature_std(pretrain_pool),
    }
}

fn random_subset(ds: &Dataset, n: usize, rng: &mut seed::Rng) -> Result<Dataset> {
    let mut sub = Dataset::new(
        ds.samples.choose_multiple(rng, n).cloned().collect(),
        ds.classes,
        ds.dim,
    )?;
    sub.sort_by_id();
    Ok(sub)
}

/// Generates data, pretrains, tags pools and draws the fine-tuning set.
pub fn prepare_task(config: &ExperimentConfig, seed: u64, exec: Exec) -> Result<TaskData> {
    let e = &config.experiment;
    let spec = config.task.with_seed(seed);
    let pool = datagen::make_pretrain_pool(&spec)?;
    let mut pretrained = pretrain_model(&spec, &pool, &config.pretrain)?;
    let slick = slick_config(&config.slick, &pool);
    let pools = datagen::make_finetune_pools(&spec, &pretrained, &slick, exec)?;
    if e.style_shift != 0.0 {
        let mut delta = vec![0.0; spec.classes];
        delta[0] = e.style_shift;
        pretrained.shift_output_bias(&delta)?;
    }
    let n_unknown = (e.unknown_fraction * e.train_size as f64).round() as usize;
    let train = datagen::mix_pools(
        &pools,
        n_unknown,
        e.train_size - n_unknown,
        &mut seed::rng(seed, "train-mix"),
    )?;
    let cal = random_subset(&train, e.cal_size, &mut seed::rng(seed, "cal"))?;
    Ok(TaskData {
        seed,
        test: datagen::make_test_set(&spec)?,
        val: datagen::make_val_set(&spec)?,
        ood: datagen::make_ood_set(&spec, e.ood_shift)?,
        spec,
        pretrained,
        slick,
        pools,
        train,
        cal,
    })
}

/// Metrics of one evaluation split.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitMetrics {
    pub split: Split,
    pub accuracy: f64,
    pub ece: f64,
    pub auroc: f64,
}

impl SplitMetrics {
    fn from_summary(split: Split, s: &Summary) -> Self {
        SplitMetrics {
            split,
            accuracy: s.accuracy,
            ece: s.ece,
            auroc: s.auroc,
        }
    }
}

/// Output of one (method, seed) cell.
#[derive(Debug, Clone)]
pub struct CellOutput {
    pub splits: Vec<SplitMetrics>,
    pub threshold: f64,
    pub gate: Option<GateQuality>,
    /// Dynamics logs keyed by path relative to the run directory.
    pub logs: Vec<(PathBuf, DynamicsLog)>,
    pub gated_fraction: f64,
    pub seconds: f64,
}

const REPORT_SPLITS: [Split; 2] = [Split::Test, Split::Ood];

fn train_config_for(config: &ExperimentConfig, method: Method, seed: u64, random_fraction: Option<f64>) -> TrainConfig {
    let (gating, kind) = method.gating();
    TrainConfig {
        gating,
        loss: LossSpec {
            kind,
            alpha: config.experiment.alpha.for_kind(kind, config.train.loss.alpha),
            ..config.train.loss
        },
        random_gate_fraction: random_fraction,
        seed,
        ..config.train.clone()
    }
}

fn run_training(task: &TaskData, params: &ModelParams, tc: &TrainConfig) -> Result<TrainOutcome> {
    let mut cal = CalibrationSet::new(task.cal.clone());
    trainer::train(params, &task.train, tc, &mut cal, &task.evals(), Exec::Sequential)
}

fn records_from_probs(ds: &Dataset, probs: impl Fn(&[f64]) -> Result<Vec<f64>>) -> Result<Vec<PredictionRecord>> {
    ds.samples
        .iter()
        .map(|s| {
            let p = probs(&s.features)?;
            let top = argmax(&p);
            Ok(PredictionRecord::new(p[top].clamp(0.0, 1.0), top == s.label))
        })
        .collect()
}

/// Trains and evaluates one method on one seed's task. `random_fraction` is
/// the partner cognition run's gated fraction, required for random gating.
pub fn run_method(
    config: &ExperimentConfig,
    task: &TaskData,
    method: Method,
    random_fraction: Option<f64>,
) -> Result<CellOutput> {
    let start = Instant::now();
    let mseed = method.seed(task.seed);
    let e = &config.experiment;
    let base = |out: &TrainOutcome, splits: Vec<SplitMetrics>, logs: Vec<(PathBuf, DynamicsLog)>| CellOutput {
        splits,
        threshold: out.final_threshold,
        gate: out.mean_gate_quality(),
        logs,
        gated_fraction: out.mean_gated_fraction,
        seconds: 0.0,
    };
    let from_log = |out: &TrainOutcome| -> Result<Vec<SplitMetrics>> {
        REPORT_SPLITS
            .iter()
            .map(|&split| {
                let r = out
                    .log
                    .last(split)
                    .ok_or_else(|| Error::invalid(format!("no {split} rows logged")))?;
                Ok(SplitMetrics {
                    split,
                    accuracy: r.accuracy,
                    ece: r.ece,
                    auroc: r.auroc,
                })
            })
            .collect()
    };
    let dyn_path = PathBuf::from("dynamics.csv");

    let mut cell = match method {
        Method::Ts => {
            let tc = train_config_for(config, method, mseed, None);
            let out = run_training(task, &task.pretrained, &tc)?;
            let val = trainer::predict_records(&out.params, &task.val, Exec::Sequential)?;
            let logits: Vec<Vec<f64>> = val.iter().map(|r| r.logits.clone().unwrap_or_default()).collect();
            let labels: Vec<usize> = task.val.samples.iter().map(|s| s.label).collect();
            let fit = posthoc::fit_temperature(&logits, &labels, e.ts_objective, &e.ts_search, Exec::Sequential)?;
            let splits = REPORT_SPLITS
                .iter()
                .map(|&split| {
                    let ds = if split == Split::Test { &task.test } else { &task.ood };
                    let recs = records_from_probs(ds, |x| {
                        posthoc::apply_temperature(&crate::model::eval_logits(&out.params, x)?, fit.t_star)
                    })?;
                    Ok(SplitMetrics::from_summary(split, &trainer::summarize(&recs)?))
                })
                .collect::<Result<Vec<_>>>()?;
            base(&out, splits, vec![(dyn_path, out.log.clone())])
        }
        Method::Mcd => {
            let params = task.pretrained.clone().with_dropout(e.mcd_dropout)?;
            let tc = train_config_for(config, method, mseed, None);
            let out = run_training(task, &params, &tc)?;
            let splits = REPORT_SPLITS
                .iter()
                .map(|&split| {
                    let ds = if split == Split::Test { &task.test } else { &task.ood };
                    let recs: Vec<PredictionRecord> = ds
                        .samples
                        .iter()
                        .map(|s| {
                            let mut rng = seed::rng_idx(mseed, "mc-dropout", s.id);
                            let p = posthoc::mc_dropout_predict(&out.params, &s.features, e.mcd_passes, &mut rng)?;
                            let top = argmax(&p);
                            Ok(PredictionRecord::new(p[top].clamp(0.0, 1.0), top == s.label))
                        })
                        .collect::<Result<_>>()?;
                    Ok(SplitMetrics::from_summary(split, &trainer::summarize(&recs)?))
                })
                .collect::<Result<Vec<_>>>()?;
            base(&out, splits, vec![(dyn_path, out.log.clone())])
        }
        Method::Ensemble => {
            let outs = (0..e.ensemble_size)
                .map(|i| {
                    let tc = train_config_for(config, method, seed::derive_idx(mseed, "member", i as u64), None);
                    run_training(task, &task.pretrained, &tc)
                })
                .collect::<Result<Vec<_>>>()?;
            let members: Vec<ModelParams> = outs.iter().map(|o| o.params.clone()).collect();
            let splits = REPORT_SPLITS
                .iter()
                .map(|&split| {
                    let ds = if split == Split::Test { &task.test } else { &task.ood };
                    let recs = records_from_probs(ds, |x| posthoc::ensemble_predict(&members, x))?;
                    Ok(SplitMetrics::from_summary(split, &trainer::summarize(&recs)?))
                })
                .collect::<Result<Vec<_>>>()?;
            let logs = outs
                .iter()
                .enumerate()
                .map(|(i, o)| (PathBuf::from(format!("member{i}")).join("dynamics.csv"), o.log.clone()))
                .collect();
            base(&outs[0], splits, logs)
        }
        _ => {
            if method.gating().0 == GatingMode::Random && random_fraction.is_none() {
                return Err(Error::Config(format!(
                    "{method} needs the gate rate of its cognition run"
                )));
            }
            let tc = train_config_for(config, method, mseed, random_fraction);
            let out = run_training(task, &task.pretrained, &tc)?;
            let splits = from_log(&out)?;
            base(&out, splits, vec![(dyn_path, out.log.clone())])
        }
    };
    if e.timing {
        cell.seconds = start.elapsed().as_secs_f64();
    }
    Ok(cell)
}

/// One `report.csv` row. `None` numbers are written as empty fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: Method,
    pub seed: u64,
    /// `test`, `ood`, or `error` for a failed cell.
    pub split: String,
    pub accuracy: Option<f64>,
    pub ece: Option<f64>,
    pub auroc: Option<f64>,
    pub threshold: Option<f64>,
    pub gate_acc: Option<f64>,
    pub gate_tpr: Option<f64>,
    pub gate_tnr: Option<f64>,
    pub seconds: Option<f64>,
}

pub const REPORT_HEADER: [&str; 11] = [
    "method",
    "seed",
    "split",
    "accuracy",
    "ece",
    "auroc",
    "threshold",
    "gate_acc",
    "gate_tpr",
    "gate_tnr",
    "seconds",
];

pub const ERROR_SPLIT: &str = "error";

fn split_rank(s: &str) -> usize {
    match s {
        "train" => 0,
        "test" => 1,
        "ood" => 2,
        _ => 3,
    }
}

impl ReportRow {
    fn error(method: Method, seed: u64) -> Self {
        ReportRow {
            method,
            seed,
            split: ERROR_SPLIT.to_string(),
            accuracy: None,
            ece: None,
            auroc: None,
            threshold: None,
            gate_acc: None,
            gate_tpr: None,
            gate_tnr: None,
            seconds: None,
        }
    }

    pub fn is_error(&self) -> bool {
        self.split == ERROR_SPLIT
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_report_csv(rows: &[ReportRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(REPORT_HEADER)?;
    for r in rows {
        w.write_record([
            r.method.to_string(),
            r.seed.to_string(),
            r.split.clone(),
            fmt_opt(r.accuracy),
            fmt_opt(r.ece),
            fmt_opt(r.auroc),
            fmt_opt(r.threshold),
            fmt_opt(r.gate_acc),
            fmt_opt(r.gate_tpr),
            fmt_opt(r.gate_tnr),
            fmt_opt(r.seconds),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_report_csv(path: &Path) -> Result<Vec<ReportRow>> {
    let mut r = csv::Reader::from_path(path)?;
    if r.headers()?.iter().ne(REPORT_HEADER) {
        return Err(Error::invalid(format!("{}: unexpected report header", path.display())));
    }
    let num = |s: &str| -> Result<Option<f64>> {
        if s.is_empty() {
            Ok(None)
        } else {
            s.parse()
                .map(Some)
                .map_err(|_| Error::invalid(format!("bad number {s:?}")))
        }
    };
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        rows.push(ReportRow {
            method: rec[0].parse()?,
            seed: rec[1]
                .parse()
                .map_err(|_| Error::invalid(format!("bad seed {:?}", &rec[1])))?,
            split: rec[2].to_string(),
            accuracy: num(&rec[3])?,
            ece: num(&rec[4])?,
            auroc: num(&rec[5])?,
            threshold: num(&rec[6])?,
            gate_acc: num(&rec[7])?,
            gate_tpr: num(&rec[8])?,
            gate_tnr: num(&rec[9])?,
            seconds: num(&rec[10])?,
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Some(MeanStd { mean, std })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryEntry {
    pub method: Method,
    pub split: String,
    pub n_seeds: usize,
    pub accuracy: Option<MeanStd>,
    pub ece: Option<MeanStd>,
    pub auroc: Option<MeanStd>,
    pub threshold: Option<MeanStd>,
    pub gate_acc: Option<MeanStd>,
    pub gate_tpr: Option<MeanStd>,
    pub gate_tnr: Option<MeanStd>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    /// True when at least one cell failed.
    pub partial: bool,
    pub failed_cells: Vec<String>,
    pub entries: Vec<SummaryEntry>,
}

pub fn summarize_rows(rows: &[ReportRow]) -> RunSummary {
    let mut groups: BTreeMap<(Method, usize, String), Vec<&ReportRow>> = BTreeMap::new();
    let mut failed = Vec::new();
    for r in rows {
        if r.is_error() {
            failed.push(format!("{}/seed{}", r.method, r.seed));
        } else {
            groups
                .entry((r.method, split_rank(&r.split), r.split.clone()))
                .or_default()
                .push(r);
        }
    }
    let entries = groups
        .into_iter()
        .map(|((method, _, split), rs)| {
            let col =
                |f: fn(&ReportRow) -> Option<f64>| MeanStd::of(&rs.iter().filter_map(|r| f(r)).collect::<Vec<_>>());
            SummaryEntry {
                method,
                split,
                n_seeds: rs.len(),
                accuracy: col(|r| r.accuracy),
                ece: col(|r| r.ece),
                auroc: col(|r| r.auroc),
                threshold: col(|r| r.threshold),
                gate_acc: col(|r| r.gate_acc),
                gate_tpr: col(|r| r.gate_tpr),
                gate_tnr: col(|r| r.gate_tnr),
            }
        })
        .collect();
    RunSummary {
        partial: !failed.is_empty(),
        failed_cells: failed,
        entries,
    }
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub rows: Vec<ReportRow>,
    pub summary: RunSummary,
    /// Files written, in write order.
    pub files: Vec<PathBuf>,
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn cell_rows(method: Method, seed: u64, cell: &Result<CellOutput>) -> Vec<ReportRow> {
    match cell {
        Err(_) => vec![ReportRow::error(method, seed)],
        Ok(c) => c
            .splits
            .iter()
            .map(|s| ReportRow {
                method,
                seed,
                split: s.split.to_string(),
                accuracy: Some(s.accuracy),
                ece: Some(s.ece),
                auroc: Some(s.auroc),
                threshold: Some(c.threshold),
                gate_acc: c.gate.map(|g| g.accuracy),
                gate_tpr: c.gate.map(|g| g.tpr),
                gate_tnr: c.gate.map(|g| g.tnr),
                seconds: Some(c.seconds),
            })
            .collect(),
    }
}

/// Runs every (method, seed) cell, computing all cells of all seeds as
/// independent jobs. Returns the cells keyed by (method, seed), including
/// cognition runs added only to supply random-gating rates.
pub fn run_matrix(config: &ExperimentConfig, exec: Exec) -> Result<BTreeMap<(Method, u64), Result<CellOutput>>> {
    config.validate()?;
    let e = &config.experiment;
    let tasks: Vec<Result<TaskData>> = exec.map_range(e.seeds.len(), |i| prepare_task(config, e.seeds[i], exec));

    let mut first: Vec<Method> = e
        .methods
        .iter()
        .copied()
        .filter(|m| m.cognition_partner().is_none())
        .collect();
    for m in &e.methods {
        if let Some(p) = m.cognition_partner() {
            if !first.contains(&p) {
                first.push(p);
            }
        }
    }
    let second: Vec<Method> = e
        .methods
        .iter()
        .copied()
        .filter(|m| m.cognition_partner().is_some())
        .collect();

    let fail = |task: &Result<TaskData>| -> Error {
        match task {
            Err(err) => Error::invalid(format!("task preparation failed: {err}")),
            Ok(_) => unreachable!(),
        }
    };

    let jobs: Vec<(usize, Method)> = (0..tasks.len())
        .flat_map(|i| first.iter().map(move |&m| (i, m)))
        .collect();
    let results = exec.map_range(jobs.len(), |j| {
        let (i, m) = jobs[j];
        match &tasks[i] {
            Ok(t) => run_method(config, t, m, None),
            Err(_) => Err(fail(&tasks[i])),
        }
    });
    let mut cells: BTreeMap<(Method, u64), Result<CellOutput>> = BTreeMap::new();
    for ((i, m), r) in jobs.into_iter().zip(results) {
        cells.insert((m, e.seeds[i]), r);
    }

    let jobs: Vec<(usize, Method)> = (0..tasks.len())
        .flat_map(|i| second.iter().map(move |&m| (i, m)))
        .collect();
    let results = exec.map_range(jobs.len(), |j| {
        let (i, m) = jobs[j];
        let partner = m.cognition_partner().expect("random method");
        match (&tasks[i], cells.get(&(partner, e.seeds[i]))) {
            (Ok(t), Some(Ok(co))) => run_method(config, t, m, Some(co.gated_fraction)),
            (Ok(_), _) => Err(Error::invalid(format!("{partner} run failed"))),
            (Err(_), _) => Err(fail(&tasks[i])),
        }
    });
    for ((i, m), r) in jobs.into_iter().zip(results) {
        cells.insert((m, e.seeds[i]), r);
    }
    cells.retain(|(m, _), _| e.methods.contains(m));
    Ok(cells)
}

/// Runs the full method matrix and writes `report.csv`, `summary.json` and
/// per-run dynamics under `experiment.out_dir`.
pub fn run_experiment(config: &ExperimentConfig, exec: Exec) -> Result<RunReport> {
    config.validate()?;
    let cells = exec::with_thread_cap(|| run_matrix(config, exec))??;
    let out = &config.experiment.out_dir;
    create_dir(out)?;
    let mut files = Vec::new();
    let mut rows = Vec::new();
    for ((method, seed), cell) in &cells {
        rows.extend(cell_rows(*method, *seed, cell));
        if let Ok(c) = cell {
            let dir = out.join("runs").join(method.as_str()).join(format!("seed{seed}"));
            for (rel, log) in &c.logs {
                let path = dir.join(rel);
                create_dir(path.parent().unwrap_or(&dir))?;
                log.write_csv(&path)?;
                files.push(path);
            }
        }
    }
    rows.sort_by_key(|r| (r.method, r.seed, split_rank(&r.split)));
    let report = out.join("report.csv");
    write_report_csv(&rows, &report)?;
    files.push(report);
    let summary = summarize_rows(&rows);
    let summary_path = out.join("summary.json");
    write_json(&summary, &summary_path)?;
    files.push(summary_path);
    Ok(RunReport { rows, summary, files })
}

/// Reads `report.csv` from a previous run directory.
pub fn load_report(dir: &Path) -> Result<Vec<ReportRow>> {
    let path = dir.join("report.csv");
    if !path.is_file() {
        return Err(Error::invalid(format!("no runs found in {}", dir.display())));
    }
    read_report_csv(&path)
}

fn ratio_label(i: usize, r: usize) -> String {
    format!("{i}:{}", r - i)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasRow {
    /// `unknown:known` parts.
    pub ratio: String,
    pub unknown_parts: usize,
    pub seed: u64,
    pub split: String,
    pub accuracy: Option<f64>,
    pub ece: Option<f64>,
    pub mean_conf: Option<f64>,
    pub auroc: Option<f64>,
}

pub const BIAS_HEADER: [&str; 7] = ["ratio", "seed", "split", "accuracy", "ece", "mean_conf", "auroc"];

#[derive(Debug, Clone)]
pub struct BiasReport {
    pub r: usize,
    pub rows: Vec<BiasRow>,
    pub files: Vec<PathBuf>,
}

impl BiasReport {
    /// Seed-ordered values of `f` for one ratio and split.
    pub fn values(&self, unknown_parts: usize, split: Split, f: fn(&BiasRow) -> Option<f64>) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.unknown_parts == unknown_parts && r.split == split.as_str())
            .filter_map(f)
            .collect()
    }
}

fn vanilla_run(
    config: &ExperimentConfig,
    params: &ModelParams,
    train: &Dataset,
    cal: Dataset,
    evals: &[(Split, &Dataset)],
    seed: u64,
) -> Result<TrainOutcome> {
    let tc = train_config_for(config, Method::VanillaSft, seed, None);
    trainer::train(
        params,
        train,
        &tc,
        &mut CalibrationSet::new(cal),
        evals,
        Exec::Sequential,
    )
}

/// Vanilla fine-tuning on each `D_{i:(r-i)}` of the known/unknown series.
pub fn run_bias_sweep(config: &ExperimentConfig, r: usize, exec: Exec) -> Result<BiasReport> {
    config.validate()?;
    if r == 0 {
        return Err(Error::Config("sweep ratio r must be >= 1".into()));
    }
    let e = &config.experiment;
    let cells = exec::with_thread_cap(|| {
        let tasks: Vec<Result<(TaskData, Vec<Dataset>)>> = exec.map_range(e.seeds.len(), |i| {
            let task = prepare_task(config, e.seeds[i], exec)?;
            let series = datagen::mix_ratio_series(
                &task.pools.known,
                &task.pools.unknown,
                r,
                &mut seed::rng(task.seed, "ratio-series"),
            )?;
            Ok((task, series))
        });
        let jobs: Vec<(usize, usize)> = (0..tasks.len()).flat_map(|s| (0..=r).map(move |i| (s, i))).collect();
        let out = exec.map_range(jobs.len(), |j| {
            let (s, i) = jobs[j];
            let (task, series) = tasks[s].as_ref().map_err(|err| Error::invalid(err.to_string()))?;
            let train = &series[i];
            let cal = random_subset(
                train,
                e.cal_size.min(train.len()),
                &mut seed::rng_idx(task.seed, "ratio-cal", i as u64),
            )?;
            let evals = [
                (Split::Train, train),
                (Split::Test, &task.test),
                (Split::Ood, &task.ood),
            ];
            vanilla_run(
                config,
                &task.pretrained,
                train,
                cal,
                &evals,
                seed::derive_idx(task.seed, "ratio-run", i as u64),
            )
        });
        jobs.into_iter().zip(out).collect::<Vec<_>>()
    })?;

    let dir = e.out_dir.join("bias");
    create_dir(&dir)?;
    let mut files = Vec::new();
    let mut rows = Vec::new();
    for ((s, i), res) in &cells {
        let seed = e.seeds[*s];
        match res {
            Ok(out) => {
                let run_dir = dir.join(format!("ratio{}-{}", i, r - i)).join(format!("seed{seed}"));
                create_dir(&run_dir)?;
                let path = run_dir.join("dynamics.csv");
                out.log.write_csv(&path)?;
                files.push(path);
                for split in REPORT_SPLITS {
                    let last = out.log.last(split);
                    rows.push(BiasRow {
                        ratio: ratio_label(*i, r),
                        unknown_parts: *i,
                        seed,
                        split: split.to_string(),
                        accuracy: last.map(|l| l.accuracy),
                        ece: last.map(|l| l.ece),
                        mean_conf: last.map(|l| l.mean_conf),
                        auroc: last.map(|l| l.auroc),
                    });
                }
            }
            Err(_) => rows.push(BiasRow {
                ratio: ratio_label(*i, r),
                unknown_parts: *i,
                seed,
                split: ERROR_SPLIT.to_string(),
                accuracy: None,
                ece: None,
                mean_conf: None,
                auroc: None,
            }),
        }
    }
    let path = dir.join("report.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(BIAS_HEADER)?;
    for row in &rows {
        w.write_record([
            row.ratio.clone(),
            row.seed.to_string(),
            row.split.clone(),
            fmt_opt(row.accuracy),
            fmt_opt(row.ece),
            fmt_opt(row.mean_conf),
            fmt_opt(row.auroc),
        ])?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    files.push(path);
    Ok(BiasReport { r, rows, files })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeletionRow {
    pub fraction: f64,
    pub seed: u64,
    pub split: String,
    pub accuracy: Option<f64>,
    pub ece: Option<f64>,
    pub delta_acc: Option<f64>,
    pub delta_ece: Option<f64>,
}

pub const DELETION_HEADER: [&str; 7] = ["fraction", "seed", "split", "accuracy", "ece", "delta_acc", "delta_ece"];

#[derive(Debug, Clone)]
pub struct DeletionReport {
    pub rows: Vec<DeletionRow>,
    pub files: Vec<PathBuf>,
}

/// Vanilla fine-tuning after deleting each fraction of the known samples of
/// the mixed fine-tuning set, reported against the same seed's 0% run.
pub fn run_deletion_sweep(config: &ExperimentConfig, fractions: &[f64], exec: Exec) -> Result<DeletionReport> {
    config.validate()?;
    if !fractions.contains(&0.0) {
        return Err(Error::Config("deletion fractions must include 0".into()));
    }
    if let Some(f) = fractions.iter().find(|f| !(0.0..=1.0).contains(*f)) {
        return Err(Error::Config(format!("deletion fraction {f} not in [0, 1]")));
    }
    let e = &config.experiment;
    let cells = exec::with_thread_cap(|| {
        let tasks: Vec<Result<TaskData>> = exec.map_range(e.seeds.len(), |i| prepare_task(config, e.seeds[i], exec));
        let jobs: Vec<(usize, usize)> = (0..tasks.len())
            .flat_map(|s| (0..fractions.len()).map(move |f| (s, f)))
            .collect();
        let out = exec.map_range(jobs.len(), |j| {
            let (s, f) = jobs[j];
            let task = tasks[s].as_ref().map_err(|err| Error::invalid(err.to_string()))?;
            let train = datagen::delete_known_fraction(
                &task.train,
                fractions[f],
                &mut seed::rng_idx(task.seed, "delete", fractions[f].to_bits()),
            )?;
            let cal = random_subset(&train, e.cal_size.min(train.len()), &mut seed::rng(task.seed, "cal"))?;
            let evals = [
                (Split::Train, &train),
                (Split::Test, &task.test),
                (Split::Ood, &task.ood),
            ];
            let run_seed = Method::VanillaSft.seed(task.seed);
            let out = vanilla_run(config, &task.pretrained, &train, cal, &evals, run_seed)?;
            Ok::<_, Error>(out.log)
        });
        jobs.into_iter().zip(out).collect::<Vec<_>>()
    })?;

    let dir = e.out_dir.join("deletion");
    create_dir(&dir)?;
    let mut files = Vec::new();
    let mut rows = Vec::new();
    let zero = fractions.iter().position(|f| *f == 0.0).expect("checked above");
    for (s, &seed) in e.seeds.iter().enumerate() {
        let base = cells
            .iter()
            .find(|((ss, f), _)| *ss == s && *f == zero)
            .and_then(|(_, r)| r.as_ref().ok());
        for (fi, &fraction) in fractions.iter().enumerate() {
            let res = &cells
                .iter()
                .find(|((ss, f), _)| *ss == s && *f == fi)
                .expect("job exists")
                .1;
            match res {
                Ok(log) => {
                    let path = dir.join(format!("delete{fraction}")).join(format!("seed{seed}"));
                    create_dir(&path)?;
                    let path = path.join("dynamics.csv");
                    log.write_csv(&path)?;
                    files.push(path);
                    for split in REPORT_SPLITS {
                        let last = log.last(split);
                        let b = base.and_then(|b| b.last(split));
                        rows.push(DeletionRow {
                            fraction,
                            seed,
                            split: split.to_string(),
                            accuracy: last.map(|l| l.accuracy),
                            ece: last.map(|l| l.ece),
                            delta_acc: last.zip(b).map(|(l, b)| l.accuracy - b.accuracy),
                            delta_ece: last.zip(b).map(|(l, b)| l.ece - b.ece),
                        });
                    }
                }
                Err(_) => rows.push(DeletionRow {
                    fraction,
                    seed,
                    split: ERROR_SPLIT.to_string(),
                    accuracy: None,
                    ece: None,
                    delta_acc: None,
                    delta_ece: None,
                }),
            }
        }
    }
    let path = dir.join("report.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(DELETION_HEADER)?;
    for row in &rows {
        w.write_record([
            row.fraction.to_string(),
            row.seed.to_string(),
            row.split.clone(),
            fmt_opt(row.accuracy),
            fmt_opt(row.ece),
            fmt_opt(row.delta_acc),
            fmt_opt(row.delta_ece),
        ])?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    files.push(path);
    Ok(DeletionReport { rows, files })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
            let json = serde_json::to_string(&m).unwrap();
            assert_eq!(json, format!("\"{}\"", m.as_str()));
        }
        assert!("CoXYZ".parse::<Method>().is_err());
    }

    #[test]
    fn method_seeds_are_independent_of_the_matrix() {
        let a = Method::CoLs.seed(7);
        assert_eq!(a, seed::derive(7, "CoLS"));
        assert_ne!(a, Method::CoEcp.seed(7));
        assert_eq!(Method::Ts.seed(7), Method::VanillaSft.seed(7));
    }

    #[test]
    fn config_rejects_unknown_keys_by_name() {
        let err = ExperimentConfig::from_toml_str("[train]\nstepz = 3\n").unwrap_err();
        assert!(err.to_string().contains("stepz"), "{err}");
        let err = ExperimentConfig::from_toml_str("[experiment]\nmethods = []\n").unwrap_err();
        assert!(err.to_string().contains("methods"), "{err}");
    }

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn summary_matches_hand_average() {
        let row = |seed, acc, ece| ReportRow {
            method: Method::CoLs,
            seed,
            split: "test".into(),
            accuracy: Some(acc),
            ece: Some(ece),
            auroc: Some(0.5),
            threshold: Some(1.0),
            gate_acc: None,
            gate_tpr: None,
            gate_tnr: None,
            seconds: Some(0.0),
        };
        let rows = vec![row(0, 0.5, 0.1), row(1, 0.7, 0.3), ReportRow::error(Method::Ts, 0)];
        let s = summarize_rows(&rows);
        assert!(s.partial);
        assert_eq!(s.failed_cells, vec!["TS/seed0".to_string()]);
        assert_eq!(s.entries.len(), 1);
        let acc = s.entries[0].accuracy.unwrap();
        assert!((acc.mean - 0.6).abs() < 1e-15);
        assert!((acc.std - (0.02f64).sqrt()).abs() < 1e-15);
        assert!(s.entries[0].gate_acc.is_none());
    }

    #[test]
    fn ratio_labels() {
        assert_eq!(ratio_label(0, 5), "0:5");
        assert_eq!(ratio_label(5, 5), "5:0");
    }
}
