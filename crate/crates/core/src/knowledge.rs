//! Knowledge-bias machinery: perturbation-based known/unknown categorization,
//! the NLL gate, and the grid-searched adaptive threshold.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::model::{argmax, eval_logits, log_softmax, sample_from_logits, ModelParams};
use crate::seed::{self, Rng};

pub use crate::data::KnowledgeTag;

pub const DEFAULT_GRID_SIZE: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SlickConfig {
    /// Independent input perturbations, the analog of re-drawn few-shot prompts.
    pub n_perturbations: usize,
    /// Tempered draws per perturbation.
    pub n_samples: usize,
    pub temperature: f64,
    /// Standard deviation of the additive Gaussian input noise.
    pub noise_sigma: f64,
}

impl Default for SlickConfig {
    fn default() -> Self {
        SlickConfig {
            n_perturbations: 10,
            n_samples: 16,
            temperature: 0.5,
            noise_sigma: 0.05,
        }
    }
}

/// Greedy and sampled accuracies behind a [`KnowledgeTag`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlickProbe {
    pub p_greedy: f64,
    pub p_sampled: f64,
}

impl SlickProbe {
    pub fn tag(self) -> KnowledgeTag {
        if self.p_greedy == 1.0 {
            KnowledgeTag::HighlyKnown
        } else if self.p_greedy > 0.0 {
            KnowledgeTag::MaybeKnown
        } else if self.p_sampled > 0.0 {
            KnowledgeTag::WeaklyKnown
        } else {
            KnowledgeTag::Unknown
        }
    }
}

pub fn slick_probe(params: &ModelParams, sample: &Sample, config: &SlickConfig, rng: &mut Rng) -> Result<SlickProbe> {
    if !(config.noise_sigma >= 0.0) {
        return Err(Error::invalid("noise_sigma must be >= 0"));
    }
    if config.n_perturbations == 0 {
        return Err(Error::invalid("need at least one perturbation"));
    }
    let noise = Normal::new(0.0, config.noise_sigma).map_err(|e| Error::invalid(format!("noise distribution: {e}")))?;
    let mut greedy_hits = 0usize;
    let mut sampled_hits = 0usize;
    let mut x = vec![0.0; sample.features.len()];
    for _ in 0..config.n_perturbations {
        for (xi, f) in x.iter_mut().zip(&sample.features) {
            *xi = f + noise.sample(rng);
        }
        let logits = eval_logits(params, &x)?;
        greedy_hits += usize::from(argmax(&logits) == sample.label);
        for _ in 0..config.n_samples {
            let y = sample_from_logits(&logits, config.temperature, rng)?;
            sampled_hits += usize::from(y == sample.label);
        }
    }
    let p_sampled = if config.n_samples == 0 {
        0.0
    } else {
        sampled_hits as f64 / (config.n_perturbations * config.n_samples) as f64
    };
    Ok(SlickProbe {
        p_greedy: greedy_hits as f64 / config.n_perturbations as f64,
        p_sampled,
    })
}

pub fn slick_categorize(
    params: &ModelParams,
    sample: &Sample,
    config: &SlickConfig,
    rng: &mut Rng,
) -> Result<KnowledgeTag> {
    slick_probe(params, sample, config, rng).map(SlickProbe::tag)
}

/// Tags many samples; each draws from its own stream keyed by sample id, so
/// the result does not depend on order or thread count.
pub fn categorize_all(
    params: &ModelParams,
    samples: &[Sample],
    config: &SlickConfig,
    seed: u64,
    exec: Exec,
) -> Result<Vec<KnowledgeTag>> {
    exec.map(samples, |s| {
        let mut rng = seed::rng_idx(seed, "slick", s.id);
        slick_categorize(params, s, config, &mut rng)
    })
    .into_iter()
    .collect()
}

pub fn nll_of(params: &ModelParams, sample: &Sample) -> Result<f64> {
    let logits = eval_logits(params, &sample.features)?;
    if sample.label >= logits.len() {
        return Err(Error::invalid(format!("label {} out of range", sample.label)));
    }
    Ok(-log_softmax(&logits)[sample.label])
}

/// 1 (known) iff `nll <= t`.
pub fn gate(nll: f64, t: f64) -> u8 {
    u8::from(nll <= t)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdState {
    pub t: f64,
    pub t0: f64,
    pub grid_size: usize,
    /// Optimizer steps between refreshes.
    pub update_interval: usize,
}

impl ThresholdState {
    pub fn new(t0: f64, grid_size: usize, update_interval: usize) -> Result<Self> {
        if !t0.is_finite() {
            return Err(Error::invalid("threshold must be finite"));
        }
        if grid_size < 2 {
            return Err(Error::invalid("grid size must be at least 2"));
        }
        Ok(ThresholdState {
            t: t0,
            t0,
            grid_size,
            update_interval: update_interval.max(1),
        })
    }
}

/// Correctness and NLL of one calibration sample under the latest model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalScore {
    pub correct: bool,
    pub nll: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSet {
    pub samples: Dataset,
    pub cache: Vec<CalScore>,
}

impl CalibrationSet {
    pub fn new(samples: Dataset) -> Self {
        CalibrationSet {
            samples,
            cache: Vec::new(),
        }
    }

    /// Re-runs inference on every sample and replaces the cache.
    pub fn refresh(&mut self, params: &ModelParams, exec: Exec) -> Result<()> {
        let scores: Result<Vec<CalScore>> = exec
            .map(&self.samples.samples, |s| {
                let logits = eval_logits(params, &s.features)?;
                Ok(CalScore {
                    correct: argmax(&logits) == s.label,
                    nll: -log_softmax(&logits)[s.label],
                })
            })
            .into_iter()
            .collect();
        self.cache = scores?;
        Ok(())
    }
}

/// Inclusive `linspace(lo, hi, m)` with exact endpoints.
pub fn threshold_grid(lo: f64, hi: f64, m: usize) -> Vec<f64> {
    (0..m)
        .map(|i| {
            if i + 1 == m {
                hi
            } else {
                lo + (hi - lo) * (i as f64 / (m - 1) as f64)
            }
        })
        .collect()
}

/// TPR and TNR of the rule `nll <= t` against correctness. A class with no
/// members gets rate 1.
pub fn rates(scores: &[CalScore], t: f64) -> (f64, f64) {
    let c = counts(scores, t);
    (c.tpr(), c.tnr())
}

#[derive(Debug, Clone, Copy)]
struct Counts {
    tp: u64,
    pos: u64,
    tn: u64,
    neg: u64,
}

impl Counts {
    fn tpr(self) -> f64 {
        if self.pos == 0 {
            1.0
        } else {
            self.tp as f64 / self.pos as f64
        }
    }

    fn tnr(self) -> f64 {
        if self.neg == 0 {
            1.0
        } else {
            self.tn as f64 / self.neg as f64
        }
    }

    /// `(TPR + TNR) · pos · neg` with missing classes scored as rate 1.
    fn scaled_score(self) -> u128 {
        let pos = self.pos.max(1) as u128;
        let neg = self.neg.max(1) as u128;
        let tp = if self.pos == 0 { 1 } else { self.tp as u128 };
        let tn = if self.neg == 0 { 1 } else { self.tn as u128 };
        tp * neg + tn * pos
    }
}

fn counts(scores: &[CalScore], t: f64) -> Counts {
    let mut c = Counts {
        tp: 0,
        pos: 0,
        tn: 0,
        neg: 0,
    };
    for s in scores {
        if s.correct {
            c.pos += 1;
            c.tp += u64::from(s.nll <= t);
        } else {
            c.neg += 1;
            c.tn += u64::from(s.nll > t);
        }
    }
    c
}

/// Grid search for the threshold maximizing `TPR + TNR` over cached scores.
/// Ties go to the smallest candidate. Scores are compared as exact integers.
pub fn threshold_from_scores(scores: &[CalScore], grid_size: usize) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::invalid("empty calibration set"));
    }
    if grid_size < 2 {
        return Err(Error::invalid("grid size must be at least 2"));
    }
    if scores.iter().any(|s| !s.nll.is_finite()) {
        return Err(Error::invalid("non-finite NLL in calibration set"));
    }
    let lo = scores.iter().map(|s| s.nll).fold(f64::INFINITY, f64::min);
    let hi = scores.iter().map(|s| s.nll).fold(f64::NEG_INFINITY, f64::max);
    let mut best_t = lo;
    let mut best = None;
    for t in threshold_grid(lo, hi, grid_size) {
        let score = counts(scores, t).scaled_score();
        if best.is_none_or(|b| score > b) {
            best = Some(score);
            best_t = t;
        }
    }
    Ok(best_t)
}

/// Refreshes the calibration cache with `params` and returns the new threshold.
pub fn update_threshold(cal: &mut CalibrationSet, params: &ModelParams, grid_size: usize, exec: Exec) -> Result<f64> {
    if cal.samples.is_empty() {
        return Err(Error::invalid("empty calibration set"));
    }
    cal.refresh(params, exec)?;
    threshold_from_scores(&cal.cache, grid_size)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateQuality {
    pub accuracy: f64,
    pub tpr: f64,
    pub tnr: f64,
}

/// Agreement between the gate and oracle tags, HighlyKnown being positive.
/// Only HighlyKnown and Unknown samples are allowed.
pub fn gate_quality(dataset: &Dataset, params: &ModelParams, t: f64) -> Result<GateQuality> {
    let labelled = oracle_positives(dataset)?;
    let gates: Result<Vec<u8>> = dataset
        .samples
        .iter()
        .map(|s| nll_of(params, s).map(|n| gate(n, t)))
        .collect();
    Ok(quality_from(&labelled, &gates?))
}

/// Same as [`gate_quality`] over the tagged subset, skipping MaybeKnown and
/// WeaklyKnown samples instead of failing.
pub fn gate_quality_lenient(
    dataset: &Dataset,
    params: &ModelParams,
    t: f64,
    exec: Exec,
) -> Result<Option<GateQuality>> {
    let kept: Vec<&Sample> = dataset
        .samples
        .iter()
        .filter(|s| matches!(s.oracle_tag, Some(KnowledgeTag::HighlyKnown | KnowledgeTag::Unknown)))
        .collect();
    if kept.is_empty() {
        return Ok(None);
    }
    let gates: Result<Vec<u8>> = exec
        .map(&kept, |s| nll_of(params, s).map(|n| gate(n, t)))
        .into_iter()
        .collect();
    let labelled: Vec<bool> = kept
        .iter()
        .map(|s| s.oracle_tag == Some(KnowledgeTag::HighlyKnown))
        .collect();
    Ok(Some(quality_from(&labelled, &gates?)))
}

fn oracle_positives(dataset: &Dataset) -> Result<Vec<bool>> {
    dataset
        .samples
        .iter()
        .map(|s| match s.oracle_tag {
            Some(KnowledgeTag::HighlyKnown) => Ok(true),
            Some(KnowledgeTag::Unknown) => Ok(false),
            Some(other) => Err(Error::invalid(format!(
                "sample {} is {other}; gate quality only scores HighlyKnown/Unknown",
                s.id
            ))),
            None => Err(Error::invalid(format!("sample {} has no oracle tag", s.id))),
        })
        .collect()
}

fn quality_from(positive: &[bool], gates: &[u8]) -> GateQuality {
    let (mut tp, mut pos, mut tn, mut neg) = (0usize, 0usize, 0usize, 0usize);
    for (&p, &g) in positive.iter().zip(gates) {
        if p {
            pos += 1;
            tp += usize::from(g == 1);
        } else {
            neg += 1;
            tn += usize::from(g == 0);
        }
    }
    let rate = |hit: usize, n: usize| if n == 0 { 1.0 } else { hit as f64 / n as f64 };
    let total = pos + neg;
    GateQuality {
        accuracy: if total == 0 {
            1.0
        } else {
            (tp + tn) as f64 / total as f64
        },
        tpr: rate(tp, pos),
        tnr: rate(tn, neg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Architecture;
    use rand::SeedableRng;

    fn score(correct: bool, nll: f64) -> CalScore {
        CalScore { correct, nll }
    }

    #[test]
    fn probe_tags_follow_the_table() {
        let t = |g, s| {
            SlickProbe {
                p_greedy: g,
                p_sampled: s,
            }
            .tag()
        };
        assert_eq!(t(1.0, 0.2), KnowledgeTag::HighlyKnown);
        assert_eq!(t(0.4, 0.0), KnowledgeTag::MaybeKnown);
        assert_eq!(t(0.0, 0.1), KnowledgeTag::WeaklyKnown);
        assert_eq!(t(0.0, 0.0), KnowledgeTag::Unknown);
    }

    #[test]
    fn forced_correct_model_is_highly_known() {
        // Bias of +100 on class 1 dominates any perturbation.
        let mut p = ModelParams::zeros(Architecture::Linear, 2, 3).unwrap();
        p.theta[7] = 100.0;
        let s = Sample {
            id: 0,
            features: vec![0.3, 0.1],
            label: 1,
            oracle_tag: None,
        };
        let mut rng = Rng::seed_from_u64(0);
        let cfg = SlickConfig {
            noise_sigma: 0.5,
            ..Default::default()
        };
        assert_eq!(
            slick_categorize(&p, &s, &cfg, &mut rng).unwrap(),
            KnowledgeTag::HighlyKnown
        );
        let wrong = Sample { label: 0, ..s };
        assert_eq!(
            slick_categorize(&p, &wrong, &cfg, &mut rng).unwrap(),
            KnowledgeTag::Unknown
        );
    }

    #[test]
    fn nll_examples() {
        let mut p = ModelParams::zeros(Architecture::Linear, 1, 2).unwrap();
        p.theta[2] = 4f64.ln();
        let s = Sample {
            id: 0,
            features: vec![0.0],
            label: 0,
            oracle_tag: None,
        };
        assert!((nll_of(&p, &s).unwrap() - 0.223144).abs() < 1e-4);
        let uniform = ModelParams::zeros(Architecture::Linear, 1, 4).unwrap();
        assert!((nll_of(&uniform, &s).unwrap() - 4f64.ln()).abs() < 1e-12);
        p.theta[2] = 800.0;
        assert_eq!(nll_of(&p, &s).unwrap(), 0.0);
    }

    #[test]
    fn gate_boundary() {
        assert_eq!(gate(0.7, 0.7), 1);
        assert_eq!(gate(0.7 + 1e-9, 0.7), 0);
    }

    #[test]
    fn threshold_separable() {
        let scores = [score(true, 0.1), score(true, 0.2), score(false, 5.0), score(false, 6.0)];
        let t = threshold_from_scores(&scores, 100).unwrap();
        let grid = threshold_grid(0.1, 6.0, 100);
        let first_perfect = grid.iter().copied().find(|&t| rates(&scores, t) == (1.0, 1.0));
        assert_eq!(Some(t), first_perfect);
        assert_eq!(rates(&scores, t), (1.0, 1.0));
    }

    #[test]
    fn threshold_hand_case() {
        let scores = [
            score(true, 0.1),
            score(true, 0.3),
            score(false, 0.35),
            score(false, 0.5),
        ];
        let grid = threshold_grid(0.1, 0.5, 5);
        let sums: Vec<f64> = grid
            .iter()
            .map(|&t| {
                let (a, b) = rates(&scores, t);
                a + b
            })
            .collect();
        assert_eq!(sums, vec![1.5, 1.5, 2.0, 1.5, 1.0]);
        let t = threshold_from_scores(&scores, 5).unwrap();
        assert!((t - 0.3).abs() < 1e-12);
    }

    #[test]
    fn threshold_degenerate_sets() {
        let all_ok = [score(true, 0.4), score(true, 0.1), score(true, 0.9)];
        assert_eq!(threshold_from_scores(&all_ok, 10).unwrap(), 0.9);
        let all_bad = [score(false, 0.4), score(false, 0.1), score(false, 0.9)];
        assert_eq!(threshold_from_scores(&all_bad, 10).unwrap(), 0.1);
        assert!(threshold_from_scores(&[], 10).is_err());
        assert!(threshold_from_scores(&all_ok, 1).is_err());
    }

    #[test]
    fn update_threshold_rejects_empty_set() {
        let p = ModelParams::zeros(Architecture::Linear, 1, 2).unwrap();
        let mut cal = CalibrationSet::new(Dataset::empty(2, 1));
        assert!(update_threshold(&mut cal, &p, 10, Exec::Sequential).is_err());
    }

    fn tagged(id: u64, x: f64, label: usize, tag: KnowledgeTag) -> Sample {
        Sample {
            id,
            features: vec![x],
            label,
            oracle_tag: Some(tag),
        }
    }

    #[test]
    fn gate_quality_examples() {
        // logit_1 - logit_0 = x; label 1 samples with large x have tiny NLL.
        let mut p = ModelParams::zeros(Architecture::Linear, 1, 2).unwrap();
        p.theta[1] = 1.0;
        let ds = Dataset::new(
            vec![
                tagged(0, 5.0, 1, KnowledgeTag::HighlyKnown),
                tagged(1, 6.0, 1, KnowledgeTag::HighlyKnown),
                tagged(2, -5.0, 1, KnowledgeTag::Unknown),
                tagged(3, -6.0, 1, KnowledgeTag::Unknown),
            ],
            2,
            1,
        )
        .unwrap();
        let perfect = gate_quality(&ds, &p, 1.0).unwrap();
        assert_eq!(
            perfect,
            GateQuality {
                accuracy: 1.0,
                tpr: 1.0,
                tnr: 1.0
            }
        );
        let everything_known = gate_quality(&ds, &p, 100.0).unwrap();
        assert_eq!(
            everything_known,
            GateQuality {
                accuracy: 0.5,
                tpr: 1.0,
                tnr: 0.0
            }
        );

        let mut bad = ds.clone();
        bad.samples[0].oracle_tag = Some(KnowledgeTag::MaybeKnown);
        assert!(gate_quality(&bad, &p, 1.0).is_err());
        let lenient = gate_quality_lenient(&bad, &p, 1.0, Exec::Sequential).unwrap().unwrap();
        assert_eq!(
            lenient,
            GateQuality {
                accuracy: 1.0,
                tpr: 1.0,
                tnr: 1.0
            }
        );
    }
}
