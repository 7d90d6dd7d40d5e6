//! Synthetic knowledge-bias tasks.
//!
//! Distribution A is a Gaussian cluster mixture used to pretrain the
//! surrogate. Distribution B rotates A's cluster centers and permutes part
//! of the label map, so B samples carry information the pretrained model
//! does not have. Fine-tuning candidates are drawn from a blend of A and B
//! and sorted into known and unknown pools by perturbation probing.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, KnowledgeTag, Sample};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::knowledge::{categorize_all, SlickConfig};
use crate::model::ModelParams;
use crate::seed::{self, Rng};

/// Id ranges keep samples from different generators disjoint.
pub mod id_base {
    pub const PRETRAIN: u64 = 0;
    pub const CANDIDATE: u64 = 1_000_000;
    pub const TEST: u64 = 2_000_000;
    pub const VALIDATION: u64 = 3_000_000;
    pub const OOD: u64 = 4_000_000;
    pub const B_ONLY: u64 = 5_000_000;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticTaskSpec {
    pub dim: usize,
    pub classes: usize,
    pub seed: u64,
    pub clusters_per_class: usize,
    /// Norm of every cluster center.
    pub center_radius: f64,
    pub cluster_std: f64,
    /// Class mixture weights; empty means uniform.
    pub class_weights: Vec<f64>,
    /// Probability that a label is replaced by a uniformly random other class.
    pub label_noise: f64,
    /// Rotation (degrees) applied to every coordinate plane to get B from A.
    pub shift_angle_deg: f64,
    /// Share of classes whose labels are cyclically permuted in B.
    pub permuted_fraction: f64,
    /// Translation of B away from A, in units of `center_radius`, along a
    /// seeded random direction.
    pub b_offset: f64,
    /// Label-noise rate inside B.
    pub b_label_noise: f64,
    /// Probability that a fine-tuning candidate or ID test sample comes from B.
    pub blend_b: f64,
    pub pretrain_size: usize,
    pub known_size: usize,
    pub unknown_size: usize,
    pub test_size: usize,
    pub val_size: usize,
    pub ood_size: usize,
    /// Maximum candidates drawn while filling the known/unknown pools.
    pub draw_budget: usize,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        SyntheticTaskSpec {
            dim: 8,
            classes: 4,
            seed: 0,
            clusters_per_class: 2,
            center_radius: 3.0,
            cluster_std: 1.0,
            class_weights: Vec::new(),
            label_noise: 0.05,
            shift_angle_deg: 60.0,
            permuted_fraction: 1.0,
            b_offset: 1.0,
            b_label_noise: 0.5,
            blend_b: 0.5,
            pretrain_size: 4000,
            known_size: 500,
            unknown_size: 500,
            test_size: 1000,
            val_size: 500,
            ood_size: 1000,
            draw_budget: 50_000,
        }
    }
}

impl SyntheticTaskSpec {
    pub fn with_seed(&self, seed: u64) -> Self {
        SyntheticTaskSpec { seed, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.classes < 2 {
            return bad("task.classes must be at least 2".into());
        }
        if self.dim == 0 || self.clusters_per_class == 0 {
            return bad("task.dim and task.clusters_per_class must be positive".into());
        }
        if !(self.cluster_std > 0.0) || !(self.center_radius >= 0.0) {
            return bad("task.cluster_std must be positive and center_radius nonnegative".into());
        }
        if ![self.label_noise, self.b_label_noise, self.blend_b]
            .iter()
            .all(|v| (0.0..=1.0).contains(v))
        {
            return bad("task.label_noise, task.b_label_noise and task.blend_b must lie in [0, 1]".into());
        }
        if !(self.b_offset >= 0.0) || !self.b_offset.is_finite() {
            return bad("task.b_offset must be a finite nonnegative number".into());
        }
        if !(0.0..=1.0).contains(&self.permuted_fraction) {
            return bad("task.permuted_fraction must lie in [0, 1]".into());
        }
        if !self.class_weights.is_empty() {
            if self.class_weights.len() != self.classes {
                return bad(format!(
                    "task.class_weights has {} entries for {} classes",
                    self.class_weights.len(),
                    self.classes
                ));
            }
            if self.class_weights.iter().any(|w| !(*w >= 0.0)) || self.class_weights.iter().sum::<f64>() <= 0.0 {
                return bad("task.class_weights must be nonnegative with a positive sum".into());
            }
        }
        for (name, v) in [
            ("pretrain_size", self.pretrain_size),
            ("known_size", self.known_size),
            ("unknown_size", self.unknown_size),
            ("test_size", self.test_size),
            ("val_size", self.val_size),
            ("ood_size", self.ood_size),
        ] {
            if v == 0 {
                return bad(format!("task.{name} must be positive"));
            }
        }
        Ok(())
    }

    /// Normalized class weights.
    pub fn weights(&self) -> Vec<f64> {
        if self.class_weights.is_empty() {
            vec![1.0 / self.classes as f64; self.classes]
        } else {
            let s: f64 = self.class_weights.iter().sum();
            self.class_weights.iter().map(|w| w / s).collect()
        }
    }
}

/// A labelled Gaussian cluster mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct Mixture {
    /// `centers[c][j]` is the j-th cluster of class c.
    pub centers: Vec<Vec<Vec<f64>>>,
    pub std: f64,
    pub weights: Vec<f64>,
    /// Observed label of a sample generated by class c.
    pub label_map: Vec<usize>,
    pub label_noise: f64,
}

impl Mixture {
    pub fn mean(&self) -> Vec<f64> {
        let d = self.centers[0][0].len();
        let mut m = vec![0.0; d];
        for (c, clusters) in self.centers.iter().enumerate() {
            for center in clusters {
                for (mi, v) in m.iter_mut().zip(center) {
                    *mi += self.weights[c] * v / clusters.len() as f64;
                }
            }
        }
        m
    }

    pub fn draw(&self, id: u64, rng: &mut Rng) -> Sample {
        let class = draw_index(&self.weights, rng);
        let center = self.centers[class].choose(rng).expect("class without clusters");
        let features = center
            .iter()
            .map(|c| {
                let z: f64 = StandardNormal.sample(rng);
                c + self.std * z
            })
            .collect();
        let k = self.label_map.len();
        let mut label = self.label_map[class];
        if rng.random::<f64>() < self.label_noise {
            let shift = rng.random_range(1..k);
            label = (label + shift) % k;
        }
        Sample {
            id,
            features,
            label,
            oracle_tag: None,
        }
    }
}

fn draw_index(weights: &[f64], rng: &mut Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
}

pub fn distribution_a(spec: &SyntheticTaskSpec) -> Mixture {
    let mut rng = seed::rng(spec.seed, "centers");
    let centers = (0..spec.classes)
        .map(|_| {
            (0..spec.clusters_per_class)
                .map(|_| {
                    let v: Vec<f64> = (0..spec.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                    v.iter().map(|x| x * spec.center_radius / norm).collect()
                })
                .collect()
        })
        .collect();
    Mixture {
        centers,
        std: spec.cluster_std,
        weights: spec.weights(),
        label_map: (0..spec.classes).collect(),
        label_noise: spec.label_noise,
    }
}

/// Rotates coordinate pairs (0,1), (2,3), ... by `deg` degrees.
fn rotate(v: &[f64], deg: f64) -> Vec<f64> {
    let (s, c) = deg.to_radians().sin_cos();
    let mut out = v.to_vec();
    for j in (0..v.len().saturating_sub(1)).step_by(2) {
        out[j] = c * v[j] - s * v[j + 1];
        out[j + 1] = s * v[j] + c * v[j + 1];
    }
    out
}

/// Labels of the first `round(permuted_fraction·K)` classes (at least two
/// when the fraction is positive) are rotated by one position.
pub fn permuted_label_map(classes: usize, permuted_fraction: f64) -> Vec<usize> {
    let mut map: Vec<usize> = (0..classes).collect();
    if permuted_fraction <= 0.0 {
        return map;
    }
    let n = ((permuted_fraction * classes as f64).round() as usize).clamp(2, classes);
    for (c, slot) in map.iter_mut().enumerate().take(n) {
        *slot = (c + 1) % n;
    }
    map
}

fn unit_direction(spec: &SyntheticTaskSpec, tag: &str) -> Vec<f64> {
    let mut rng = seed::rng(spec.seed, tag);
    let dir: Vec<f64> = (0..spec.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    dir.iter().map(|x| x / norm).collect()
}

pub fn distribution_b(spec: &SyntheticTaskSpec) -> Mixture {
    let a = distribution_a(spec);
    let offset: Vec<f64> = if spec.b_offset > 0.0 {
        unit_direction(spec, "b-direction")
            .iter()
            .map(|u| u * spec.b_offset * spec.center_radius)
            .collect()
    } else {
        vec![0.0; spec.dim]
    };
    Mixture {
        centers: a
            .centers
            .iter()
            .map(|cl| {
                cl.iter()
                    .map(|c| {
                        rotate(c, spec.shift_angle_deg)
                            .iter()
                            .zip(&offset)
                            .map(|(v, o)| v + o)
                            .collect()
                    })
                    .collect()
            })
            .collect(),
        label_map: permuted_label_map(spec.classes, spec.permuted_fraction),
        label_noise: spec.b_label_noise,
        ..a
    }
}

/// B translated by `shift_level · radius` along a fixed random direction,
/// with cluster spread scaled by `1 + shift_level`.
pub fn distribution_b_shifted(spec: &SyntheticTaskSpec, shift_level: f64) -> Result<Mixture> {
    if !(shift_level >= 0.0) || !shift_level.is_finite() {
        return Err(Error::invalid(format!("shift level must be >= 0, got {shift_level}")));
    }
    let b = distribution_b(spec);
    if shift_level == 0.0 {
        return Ok(b);
    }
    let dir = unit_direction(spec, "ood-direction");
    let step = shift_level * spec.center_radius.max(1.0);
    Ok(Mixture {
        centers: b
            .centers
            .iter()
            .map(|cl| {
                cl.iter()
                    .map(|c| c.iter().zip(&dir).map(|(v, u)| v + step * u).collect())
                    .collect()
            })
            .collect(),
        std: b.std * (1.0 + shift_level),
        ..b
    })
}

fn draw_many(mix: &Mixture, n: usize, id0: u64, rng: &mut Rng) -> Vec<Sample> {
    (0..n as u64).map(|i| mix.draw(id0 + i, rng)).collect()
}

fn draw_blend(a: &Mixture, b: &Mixture, blend_b: f64, n: usize, id0: u64, rng: &mut Rng) -> Vec<Sample> {
    (0..n as u64)
        .map(|i| {
            let from_b = rng.random::<f64>() < blend_b;
            if from_b { b } else { a }.draw(id0 + i, rng)
        })
        .collect()
}

pub fn make_pretrain_pool(spec: &SyntheticTaskSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = seed::rng(spec.seed, "pretrain-pool");
    let samples = draw_many(&distribution_a(spec), spec.pretrain_size, id_base::PRETRAIN, &mut rng);
    Dataset::new(samples, spec.classes, spec.dim)
}

/// In-distribution test set: fresh draws from the A/B blend.
pub fn make_test_set(spec: &SyntheticTaskSpec) -> Result<Dataset> {
    blend_set(spec, spec.test_size, id_base::TEST, "test")
}

/// Validation set for temperature fitting, disjoint from the test set.
pub fn make_val_set(spec: &SyntheticTaskSpec) -> Result<Dataset> {
    blend_set(spec, spec.val_size, id_base::VALIDATION, "validation")
}

fn blend_set(spec: &SyntheticTaskSpec, n: usize, id0: u64, tag: &str) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = seed::rng(spec.seed, tag);
    let samples = draw_blend(
        &distribution_a(spec),
        &distribution_b(spec),
        spec.blend_b,
        n,
        id0,
        &mut rng,
    );
    Dataset::new(samples, spec.classes, spec.dim)
}

/// `n` samples of distribution B itself.
pub fn make_b_set(spec: &SyntheticTaskSpec, n: usize) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = seed::rng(spec.seed, "ood");
    Dataset::new(
        draw_many(&distribution_b(spec), n, id_base::OOD, &mut rng),
        spec.classes,
        spec.dim,
    )
}

/// Out-of-distribution evaluation set drawn from B shifted by `shift_level`.
/// Level 0 reproduces [`make_b_set`] sample for sample.
pub fn make_ood_set(spec: &SyntheticTaskSpec, shift_level: f64) -> Result<Dataset> {
    spec.validate()?;
    let mix = distribution_b_shifted(spec, shift_level)?;
    let mut rng = seed::rng(spec.seed, "ood");
    Dataset::new(
        draw_many(&mix, spec.ood_size, id_base::OOD, &mut rng),
        spec.classes,
        spec.dim,
    )
}

/// Mean per-feature standard deviation of a dataset.
pub fn feature_std(ds: &Dataset) -> f64 {
    let n = ds.len() as f64;
    if ds.len() < 2 {
        return 0.0;
    }
    let total: f64 = (0..ds.dim)
        .map(|j| {
            let mean = ds.samples.iter().map(|s| s.features[j]).sum::<f64>() / n;
            let var = ds.samples.iter().map(|s| (s.features[j] - mean).powi(2)).sum::<f64>() / (n - 1.0);
            var.sqrt()
        })
        .sum();
    total / ds.dim as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoolPair {
    pub known: Dataset,
    pub unknown: Dataset,
}

/// Candidates are tagged in chunks of this size; the chunking does not
/// affect results, only how much is drawn past the point the pools fill.
const TAG_CHUNK: usize = 256;

/// Draws blend candidates, tags each against `pretrained`, and keeps
/// HighlyKnown samples as known and Unknown samples as unknown until both
/// pools reach their requested sizes.
pub fn make_finetune_pools(
    spec: &SyntheticTaskSpec,
    pretrained: &ModelParams,
    slick: &SlickConfig,
    exec: Exec,
) -> Result<PoolPair> {
    spec.validate()?;
    let a = distribution_a(spec);
    let b = distribution_b(spec);
    let mut rng = seed::rng(spec.seed, "candidates");
    let slick_seed = seed::derive(spec.seed, "pool-tags");
    let mut known = Vec::with_capacity(spec.known_size);
    let mut unknown = Vec::with_capacity(spec.unknown_size);
    let mut drawn = 0usize;
    while known.len() < spec.known_size || unknown.len() < spec.unknown_size {
        if drawn >= spec.draw_budget {
            let (which, have, want) = if known.len() < spec.known_size {
                ("known", known.len(), spec.known_size)
            } else {
                ("unknown", unknown.len(), spec.unknown_size)
            };
            return Err(Error::Resource(format!(
                "draw budget of {} candidates exhausted with the {which} pool at {have}/{want}",
                spec.draw_budget
            )));
        }
        let n = TAG_CHUNK.min(spec.draw_budget - drawn);
        let chunk = draw_blend(&a, &b, spec.blend_b, n, id_base::CANDIDATE + drawn as u64, &mut rng);
        drawn += n;
        let tags = categorize_all(pretrained, &chunk, slick, slick_seed, exec)?;
        for (mut s, tag) in chunk.into_iter().zip(tags) {
            s.oracle_tag = Some(tag);
            match tag {
                KnowledgeTag::HighlyKnown if known.len() < spec.known_size => known.push(s),
                KnowledgeTag::Unknown if unknown.len() < spec.unknown_size => unknown.push(s),
                _ => {}
            }
        }
    }
    Ok(PoolPair {
        known: Dataset::new(known, spec.classes, spec.dim)?,
        unknown: Dataset::new(unknown, spec.classes, spec.dim)?,
    })
}

/// The tag seed used by [`make_finetune_pools`], for re-verifying pool tags.
pub fn pool_tag_seed(spec: &SyntheticTaskSpec) -> u64 {
    seed::derive(spec.seed, "pool-tags")
}

/// Fine-tuning set with `n_unknown` unknown and `n_known` known samples drawn
/// at random from the pools.
pub fn mix_pools(pools: &PoolPair, n_unknown: usize, n_known: usize, rng: &mut Rng) -> Result<Dataset> {
    if n_unknown > pools.unknown.len() || n_known > pools.known.len() {
        return Err(Error::invalid(format!(
            "requested {n_unknown} unknown / {n_known} known but pools hold {} / {}",
            pools.unknown.len(),
            pools.known.len()
        )));
    }
    let mut samples: Vec<Sample> = pools.unknown.samples.choose_multiple(rng, n_unknown).cloned().collect();
    samples.extend(pools.known.samples.choose_multiple(rng, n_known).cloned());
    let mut ds = Dataset::new(samples, pools.known.classes, pools.known.dim)?;
    ds.sort_by_id();
    Ok(ds)
}

/// Datasets `D_{i:(r-i)}` for `i = 0..=r`, holding `i·N/r` unknown and
/// `(r-i)·N/r` known samples. Each step drops `N/r` random retained known
/// samples and adds `N/r` fresh unknown ones. `N = min(|known|, |unknown|)`
/// rounded down to a multiple of `r`.
pub fn mix_ratio_series(known: &Dataset, unknown: &Dataset, r: usize, rng: &mut Rng) -> Result<Vec<Dataset>> {
    if r == 0 {
        return Err(Error::invalid("ratio series needs r >= 1"));
    }
    let n = known.len().min(unknown.len()) / r * r;
    if n == 0 {
        return Err(Error::invalid(format!(
            "pools of {} known and {} unknown samples are too small for r = {r}",
            known.len(),
            unknown.len()
        )));
    }
    let step = n / r;
    let mut retained: Vec<Sample> = known.samples.choose_multiple(rng, n).cloned().collect();
    let mut fresh: Vec<Sample> = unknown.samples.clone();
    fresh.shuffle(rng);
    let mut fresh = fresh.into_iter();
    let mut added: Vec<Sample> = Vec::with_capacity(n);
    let mut series = Vec::with_capacity(r + 1);
    for i in 0..=r {
        if i > 0 {
            for _ in 0..step {
                let j = rng.random_range(0..retained.len());
                retained.swap_remove(j);
            }
            added.extend(fresh.by_ref().take(step));
        }
        let mut samples = retained.clone();
        samples.extend(added.iter().cloned());
        let mut ds = Dataset::new(samples, known.classes, known.dim)?;
        ds.sort_by_id();
        series.push(ds);
    }
    Ok(series)
}

/// Removes `floor(fraction · #known)` random HighlyKnown samples.
pub fn delete_known_fraction(dataset: &Dataset, fraction: f64, rng: &mut Rng) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::invalid(format!("deletion fraction {fraction} not in [0, 1]")));
    }
    if let Some(s) = dataset.samples.iter().find(|s| s.oracle_tag.is_none()) {
        return Err(Error::invalid(format!("sample {} has no oracle tag", s.id)));
    }
    let known: Vec<usize> = (0..dataset.len())
        .filter(|&i| dataset.samples[i].oracle_tag == Some(KnowledgeTag::HighlyKnown))
        .collect();
    let n_delete = (fraction * known.len() as f64).floor() as usize;
    let doomed: std::collections::HashSet<usize> = known.choose_multiple(rng, n_delete).copied().collect();
    let samples = dataset
        .samples
        .iter()
        .enumerate()
        .filter(|(i, _)| !doomed.contains(i))
        .map(|(_, s)| s.clone())
        .collect();
    Dataset::new(samples, dataset.classes, dataset.dim)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn small_spec() -> SyntheticTaskSpec {
        SyntheticTaskSpec {
            pretrain_size: 3000,
            ..Default::default()
        }
    }

    #[test]
    fn pretrain_pool_size_and_determinism() {
        let spec = small_spec();
        let a = make_pretrain_pool(&spec).unwrap();
        assert_eq!(a.len(), 3000);
        assert_eq!(a, make_pretrain_pool(&spec).unwrap());
        assert_ne!(a, make_pretrain_pool(&spec.with_seed(1)).unwrap());
    }

    #[test]
    fn class_frequencies_follow_weights() {
        let spec = SyntheticTaskSpec {
            label_noise: 0.0,
            class_weights: vec![0.1, 0.2, 0.3, 0.4],
            pretrain_size: 20_000,
            ..Default::default()
        };
        let ds = make_pretrain_pool(&spec).unwrap();
        let n = ds.len() as f64;
        for (c, w) in spec.weights().iter().enumerate() {
            let count = ds.samples.iter().filter(|s| s.label == c).count() as f64;
            let sd = (n * w * (1.0 - w)).sqrt();
            assert!((count - n * w).abs() <= 3.0 * sd, "class {c}: {count} vs {}", n * w);
        }
    }

    #[test]
    fn label_map_permutes_a_third() {
        assert_eq!(permuted_label_map(6, 1.0 / 3.0), vec![1, 0, 2, 3, 4, 5]);
        assert_eq!(permuted_label_map(4, 1.0 / 3.0), vec![1, 0, 2, 3]);
        assert_eq!(permuted_label_map(9, 1.0 / 3.0), vec![1, 2, 0, 3, 4, 5, 6, 7, 8]);
        assert_eq!(permuted_label_map(3, 0.0), vec![0, 1, 2]);
    }

    #[test]
    fn ood_shift_zero_is_b() {
        let spec = small_spec();
        let b = make_b_set(&spec, spec.ood_size).unwrap();
        assert_eq!(make_ood_set(&spec, 0.0).unwrap(), b);
        assert_eq!(make_ood_set(&spec, 0.7).unwrap(), make_ood_set(&spec, 0.7).unwrap());
        assert!(make_ood_set(&spec, -1.0).is_err());
    }

    #[test]
    fn ood_displacement_grows_with_shift() {
        let spec = small_spec();
        let base = distribution_b(&spec).mean();
        let mut last = -1.0;
        for level in [0.0, 0.25, 0.5, 1.0, 2.0] {
            let ds = make_ood_set(&spec, level).unwrap();
            let n = ds.len() as f64;
            let mean: Vec<f64> = (0..spec.dim)
                .map(|j| ds.samples.iter().map(|s| s.features[j]).sum::<f64>() / n)
                .collect();
            let disp = mean.iter().zip(&base).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            if level > 0.0 {
                assert!(disp > last, "level {level}: {disp} <= {last}");
            }
            last = disp;
        }
    }

    fn tagged_pool(n: usize, tag: KnowledgeTag, id0: u64) -> Dataset {
        let samples = (0..n as u64)
            .map(|i| Sample {
                id: id0 + i,
                features: vec![i as f64],
                label: 0,
                oracle_tag: Some(tag),
            })
            .collect();
        Dataset::new(samples, 2, 1).unwrap()
    }

    #[test]
    fn ratio_series_counts_and_incremental_structure() {
        let known = tagged_pool(103, KnowledgeTag::HighlyKnown, 0);
        let unknown = tagged_pool(120, KnowledgeTag::Unknown, 1000);
        let mut rng = Rng::seed_from_u64(5);
        let series = mix_ratio_series(&known, &unknown, 5, &mut rng).unwrap();
        assert_eq!(series.len(), 6);
        let n = 100;
        for (i, d) in series.iter().enumerate() {
            assert_eq!(d.len(), n);
            assert_eq!(d.count_tag(KnowledgeTag::Unknown), i * n / 5);
            assert_eq!(d.count_tag(KnowledgeTag::HighlyKnown), (5 - i) * n / 5);
        }
        for w in series.windows(2) {
            let next: std::collections::HashSet<u64> = w[1].samples.iter().map(|s| s.id).collect();
            let prev_known: Vec<u64> = w[0]
                .samples
                .iter()
                .filter(|s| s.oracle_tag == Some(KnowledgeTag::HighlyKnown))
                .map(|s| s.id)
                .collect();
            let kept = prev_known.iter().filter(|id| next.contains(id)).count();
            assert_eq!(kept, prev_known.len() - n / 5);
            // Every unknown sample stays once added.
            for s in &w[0].samples {
                if s.oracle_tag == Some(KnowledgeTag::Unknown) {
                    assert!(next.contains(&s.id));
                }
            }
        }
        assert!(mix_ratio_series(&known, &tagged_pool(3, KnowledgeTag::Unknown, 900), 5, &mut rng).is_err());
    }

    #[test]
    fn deletion_counts() {
        let mut samples = tagged_pool(41, KnowledgeTag::HighlyKnown, 0).samples;
        samples.extend(tagged_pool(10, KnowledgeTag::Unknown, 100).samples);
        let ds = Dataset::new(samples, 2, 1).unwrap();
        let mut rng = Rng::seed_from_u64(9);
        assert_eq!(delete_known_fraction(&ds, 0.0, &mut rng).unwrap(), ds);
        for f in [0.25, 0.5, 0.75] {
            let out = delete_known_fraction(&ds, f, &mut rng).unwrap();
            let expect = 41 - (f * 41.0f64).floor() as usize;
            assert_eq!(out.count_tag(KnowledgeTag::HighlyKnown), expect);
            assert_eq!(out.count_tag(KnowledgeTag::Unknown), 10);
        }
        let mut untagged = ds.clone();
        untagged.samples[3].oracle_tag = None;
        assert!(delete_known_fraction(&untagged, 0.5, &mut rng).is_err());
    }
}
