use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rrnco_bench::{base_map, random_distances, random_tensor};
use rrnco_core::baselines::{held_karp_atsp, nearest_neighbor, or_opt_improve};
use rrnco_core::instancegen::make_instance;
use rrnco_core::model::{rollout, DecodeMode};
use rrnco_core::numerics::Graph;
use rrnco_core::{ModelConfig, ParamStore, Policy, Sampler, Task};

fn generation(c: &mut Criterion) {
    let map = base_map(1000);
    let mut group = c.benchmark_group("generate");
    for task in [Task::Atsp, Task::Acvrp, Task::Acvrptw] {
        let mut seed = 0u64;
        group.bench_function(BenchmarkId::new("n100", task), |b| {
            b.iter(|| {
                seed += 1;
                make_instance(&map, task, 100, Sampler::Uniform, seed).unwrap()
            })
        });
    }
    group.finish();
}

fn mixing(c: &mut Criterion) {
    let mut group = c.benchmark_group("aafm");
    for n in [20, 100] {
        let mut store = ParamStore::new();
        for (name, rows, cols) in [("q", n, 128), ("k", n, 128), ("v", n, 128), ("a", n, n)] {
            store.add(name, random_tensor(rows, cols, rows as u64 * 31 + cols as u64)).unwrap();
        }
        group.bench_function(BenchmarkId::new("forward_backward", n), |b| {
            b.iter(|| {
                let mut g = Graph::new(&store);
                let (q, k, v, a) = (g.p("q"), g.p("k"), g.p("v"), g.p("a"));
                let out = g.aafm(q, k, v, a);
                let loss = g.sum(out);
                black_box(g.backward(loss))
            })
        });
    }
    group.finish();
}

fn exact_and_local(c: &mut Criterion) {
    let mut group = c.benchmark_group("solvers");
    for n in [10, 13] {
        let d = random_distances(n, n as u64);
        group.bench_function(BenchmarkId::new("held_karp", n), |b| b.iter(|| held_karp_atsp(black_box(&d)).unwrap()));
    }
    let d = random_distances(100, 5);
    let start = nearest_neighbor(&d, 0);
    group.bench_function("or_opt_n100", |b| b.iter(|| or_opt_improve(black_box(&start), &d, 10_000)));
    group.finish();
}

fn rollouts(c: &mut Criterion) {
    let map = base_map(200);
    let inst = make_instance(&map, Task::Atsp, 20, Sampler::Uniform, 3).unwrap();
    let policy = Policy::new(ModelConfig::desk(Task::Atsp), 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    c.bench_function("greedy_rollout_desk_n20_x20", |b| {
        b.iter(|| rollout(&policy, &inst, 20, DecodeMode::Greedy, &mut rng).unwrap())
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = generation, mixing, exact_and_local, rollouts
}
criterion_main!(benches);
