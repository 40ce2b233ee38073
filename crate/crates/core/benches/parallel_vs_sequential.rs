//! Rayon fan-out against the sequential loop for the two hot paths:
//! per-group gradients of a mixed-task batch and per-task evaluation.

use criterion::{black_box, criterion_group, criterion_main, Criterion};
use hint_core::corpus::tasks::{format_example, make_task_suite, PromptMode};
use hint_core::hypernet::HintVariant;
use hint_core::numerics::Tape;
use hint_core::parallel::{par_map, seq_map};
use hint_core::training::{predict_task, Setting};
use hint_core::transformer::ModelConfig;
use hint_core::HintModel;

fn gradients(c: &mut Criterion) {
    let model = HintModel::new(ModelConfig::desk(), 0).unwrap();
    let suite = make_task_suite(0);
    let items: Vec<_> = suite
        .iter()
        .map(|t| format_example(t, &t.eval_instances[0].input, PromptMode::DefOnly).unwrap())
        .collect();
    let work = |f: &hint_core::corpus::tasks::Formatted| {
        let mut tape = Tape::new();
        let losses = model
            .losses_on(&mut tape, &f.hyper_input, &[(&f.model_input, &f.target)], Some(HintVariant::FULL))
            .unwrap();
        let g = tape.backward(losses[0]).unwrap();
        tape.param_grads(&g, model.store.len()).global_norm()
    };
    let mut group = c.benchmark_group("batch_gradients");
    group.sample_size(10);
    group.bench_function("parallel", |b| b.iter(|| black_box(par_map(&items, work))));
    group.bench_function("sequential", |b| b.iter(|| black_box(seq_map(&items, work))));
    group.finish();
}

fn evaluation(c: &mut Criterion) {
    let model = HintModel::new(ModelConfig::desk(), 0).unwrap();
    let mut suite = make_task_suite(0);
    for t in &mut suite {
        t.eval_instances.truncate(4);
    }
    let work = |t: &hint_core::corpus::SyntheticTask| predict_task(&model, t, Setting::Hint, 0, true).unwrap();
    let mut group = c.benchmark_group("evaluate");
    group.sample_size(10);
    group.bench_function("parallel", |b| b.iter(|| black_box(par_map(&suite, work))));
    group.bench_function("sequential", |b| b.iter(|| black_box(seq_map(&suite, work))));
    group.finish();
}

criterion_group!(benches, gradients, evaluation);
criterion_main!(benches);
