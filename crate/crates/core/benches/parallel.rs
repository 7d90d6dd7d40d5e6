use std::hint::black_box;

use cogcalib::harness::{self, ExperimentConfig, Method};
use cogcalib::posthoc::{self, TemperatureSearch, TsObjective};
use cogcalib::{datagen, knowledge, trainer, Exec};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

#[allow(clippy::field_reassign_with_default)]
fn small_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.task.pretrain_size = 2000;
    cfg.task.known_size = 200;
    cfg.task.unknown_size = 200;
    cfg.pretrain.steps = 1000;
    cfg.train.steps = 200;
    cfg.experiment.train_size = 200;
    cfg.experiment.cal_size = 50;
    cfg
}

fn kernels(c: &mut Criterion) {
    let cfg = small_config();
    let task = harness::prepare_task(&cfg, 0, Exec::default()).unwrap();
    let tag_seed = datagen::pool_tag_seed(&task.spec);
    let val_logits: Vec<Vec<f64>> = trainer::predict_records(&task.pretrained, &task.val, Exec::Sequential)
        .unwrap()
        .into_iter()
        .map(|r| r.logits.unwrap())
        .collect();
    let val_labels: Vec<usize> = task.val.samples.iter().map(|s| s.label).collect();
    let search = TemperatureSearch::default();

    let mut g = c.benchmark_group("slick_tagging");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                knowledge::categorize_all(&task.pretrained, &task.pools.known.samples, &task.slick, tag_seed, exec)
            })
        });
    }
    g.finish();

    let mut g = c.benchmark_group("evaluate_test_set");
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| trainer::predict_records(black_box(&task.pretrained), &task.test, exec))
        });
    }
    g.finish();

    let mut g = c.benchmark_group("temperature_fit");
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| posthoc::fit_temperature(&val_logits, &val_labels, TsObjective::Ece, &search, exec))
        });
    }
    g.finish();
}

fn matrix(c: &mut Criterion) {
    let mut cfg = small_config();
    cfg.experiment.methods = vec![Method::VanillaSft, Method::CoLs, Method::Ts];
    cfg.experiment.seeds = vec![0, 1];
    let mut g = c.benchmark_group("method_matrix");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| harness::run_matrix(&cfg, exec))
        });
    }
    g.finish();
}

criterion_group!(benches, kernels, matrix);
criterion_main!(benches);
