//! Desk-scale acceptance suite: geometry, generation, numerics, model
//! symmetry, environments, exact solvers, learning and the table client.
//!
//! Every check compares the library against an independent reference or a
//! frozen value and reports one pass/fail line.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::baselines::{held_karp_atsp, nearest_neighbor, or_opt_improve, tour_cost};
use crate::envs::{route_cost, EnvState};
use crate::geodata::{bbox_for_area, haversine, EARTH_RADIUS_KM};
use crate::ingest::{
    synth_basemap, FixtureTransport, IngestError, OsrmClient, OsrmEndpoint, SynthConfig, TableTransport,
};
use crate::instancegen::{
    make_dataset, make_instance, sample_indices_cluster, sample_indices_uniform, subsample_matrices, Features,
};
use crate::model::{encode, neural_adaptive_bias, route_log_prob, BiasKind, InitContext, Knn, ModelConfig, ModelError, Policy};
use crate::numerics::{grad_check, Graph, NumericsError, ParamStore, Tensor, Var};
use crate::trainer::{greedy_costs, train, TrainConfig, AUGMENT_FACTOR, MILESTONE_RATIOS};
use crate::{GeoPoint, Matrix, RoutingInstance, Sampler, Task};

const OSRM_FIXTURE: &str = include_str!("../tests/fixtures/osrm3/responses/table.txt");

#[derive(Debug, Clone, Serialize)]
pub struct CheckOutcome {
    pub id: usize,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl std::fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "[{tag}] {:>2} {}: {} ({:.1}s)", self.id, self.name, self.detail, self.seconds)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SuiteOptions {
    /// Include the three training runs (several minutes on one core).
    pub learning: bool,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self { learning: true }
    }
}

type CheckResult = Result<(bool, String), String>;

fn timed(id: usize, name: &'static str, f: impl FnOnce() -> CheckResult) -> CheckOutcome {
    let t = Instant::now();
    let (passed, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
    CheckOutcome {
        id,
        name,
        passed,
        detail,
        seconds: t.elapsed().as_secs_f64(),
    }
}

/// Runs every check, handing each outcome to `report` as soon as it is known.
pub fn run(opts: SuiteOptions, mut report: impl FnMut(&CheckOutcome)) -> Vec<CheckOutcome> {
    let mut out = Vec::new();
    let mut push = |o: CheckOutcome| {
        report(&o);
        out.push(o);
    };
    push(timed(1, "geometry", geometry));
    push(timed(2, "generation throughput", generation_throughput));
    push(timed(3, "gather correctness", gather_correctness));
    push(timed(4, "mixing shift invariance", mixing_shifts));
    push(timed(5, "permutation equivariance", equivariance));
    push(timed(6, "gradients", gradients));
    push(timed(7, "environments", environments));
    push(timed(8, "exact and local-search oracles", oracles));
    if opts.learning {
        for o in learning() {
            push(o);
        }
    }
    push(timed(11, "hyperparameter constants", constants));
    push(timed(12, "table client", table_client));
    out
}

fn geometry() -> CheckResult {
    let p = |lat, lon| GeoPoint::new(lat, lon).map_err(|e| e.to_string());
    let anchors = [
        (p(0.0, 0.0)?, p(0.0, 0.0)?, 0.0),
        (p(0.0, 0.0)?, p(0.0, 1.0)?, 111.195),
        (p(0.0, 0.0)?, p(90.0, 0.0)?, 10007.543),
    ];
    let worst = anchors
        .iter()
        .map(|&(a, b, km)| (haversine(a, b, EARTH_RADIUS_KM) - km).abs())
        .fold(0.0, f64::max);
    let half = |lat| -> Result<f64, String> {
        let b = bbox_for_area(p(lat, 10.0)?, 10.0).map_err(|e| e.to_string())?;
        Ok((b.lon_max - b.lon_min) / 2.0)
    };
    let ratio_err = (half(60.0)? - 2.0 * half(0.0)?).abs();
    Ok((
        worst <= 1e-3 && ratio_err <= 1e-5,
        format!("anchor error {worst:.2e} km, lon half-width error {ratio_err:.2e} deg"),
    ))
}

fn generation_throughput() -> CheckResult {
    let map = synth_basemap(&SynthConfig::new(1000, 5)).map_err(|e| e.to_string())?;
    let t = Instant::now();
    let data = make_dataset(std::slice::from_ref(&map), Task::Atsp, 100, Sampler::Uniform, 1000, 9)
        .map_err(|e| e.to_string())?;
    let secs = t.elapsed().as_secs_f64();
    let ok = data.len() == 1000 && data.iter().all(|i| i.n() == 100);
    Ok((
        ok && secs < 1.0,
        format!("1000 x n=100 in {:.3}s ({:.3} ms each)", secs, secs),
    ))
}

fn gather_correctness() -> CheckResult {
    let maps: Vec<_> = (0..4)
        .map(|s| synth_basemap(&SynthConfig::new(150, 40 + s)))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut mismatches = 0usize;
    for trial in 0..10_000 {
        let map = &maps[trial % maps.len()];
        let n_sub = rng.gen_range(2..=100);
        let idx = if trial % 2 == 0 {
            sample_indices_uniform(map.n_tot(), n_sub, &mut rng)
        } else {
            let k = rng.gen_range(1..=n_sub.min(8));
            sample_indices_cluster(map.n_tot(), n_sub, k, &map.coords_norm_f64(), &mut rng)
        }
        .map_err(|e| e.to_string())?;
        let (dist, dur) = subsample_matrices(map, &idx).map_err(|e| e.to_string())?;
        let s = idx.as_slice();
        for i in 0..n_sub {
            for j in 0..n_sub {
                if dist.get(i, j) != f64::from(map.dist.get(s[i], s[j])) || dur.get(i, j) != f64::from(map.dur.get(s[i], s[j])) {
                    mismatches += 1;
                }
            }
        }
    }
    Ok((mismatches == 0, format!("10000 subsets, {mismatches} mismatched entries")))
}

fn uniform_tensor(rows: usize, cols: usize, lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| rng.gen_range(lo..hi))
}

/// Direct evaluation of the mixing formula with plain exponentials.
fn mixing_reference(q: &Tensor, k: &Tensor, v: &Tensor, a: &Tensor) -> Tensor {
    let (n, e) = q.shape();
    Tensor::from_fn(n, e, |i, c| {
        let (mut num, mut den) = (0.0, 0.0);
        for j in 0..n {
            let w = (a.get(i, j) + k.get(j, c)).exp();
            num += w * v.get(j, c);
            den += w;
        }
        num / den / (1.0 + (-q.get(i, c)).exp())
    })
}

fn rel_diff(a: &Tensor, b: &Tensor) -> f64 {
    let scale = a.data().iter().map(|x| x.abs()).fold(1e-12, f64::max);
    a.max_abs_diff(b) / scale
}

fn mixing_shifts() -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let store = ParamStore::new();
    let (mut shift_err, mut ref_err) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let n = rng.gen_range(1..=8);
        let e = rng.gen_range(1..=16);
        let q = uniform_tensor(n, e, -3.0, 3.0, &mut rng);
        let k = uniform_tensor(n, e, -3.0, 3.0, &mut rng);
        let v = uniform_tensor(n, e, -3.0, 3.0, &mut rng);
        let a = uniform_tensor(n, n, -3.0, 3.0, &mut rng);
        let row_shift: Vec<f64> = (0..n).map(|_| rng.gen_range(-20.0..20.0)).collect();
        let feat_shift: Vec<f64> = (0..e).map(|_| rng.gen_range(-20.0..20.0)).collect();
        let a2 = Tensor::from_fn(n, n, |i, j| a.get(i, j) + row_shift[i]);
        let k2 = Tensor::from_fn(n, e, |j, c| k.get(j, c) + feat_shift[c]);
        let mut g = Graph::new(&store);
        let [qv, kv, vv, av, a2v, k2v] = [&q, &k, &v, &a, &a2, &k2].map(|t| g.constant(t.clone()));
        let base = g.aafm(qv, kv, vv, av);
        let by_row = g.aafm(qv, kv, vv, a2v);
        let by_feat = g.aafm(qv, k2v, vv, av);
        let b = g.value(base);
        shift_err = shift_err.max(rel_diff(b, g.value(by_row))).max(rel_diff(b, g.value(by_feat)));
        ref_err = ref_err.max(rel_diff(&mixing_reference(&q, &k, &v, &a), b));
    }
    Ok((
        shift_err <= 1e-6 && ref_err <= 1e-9,
        format!("100 cases, shift rel err {shift_err:.2e}, reference rel err {ref_err:.2e}"),
    ))
}

/// Relabels nodes so that new node `i` is old node `perm[i]`.
fn permuted(inst: &RoutingInstance, perm: &[usize]) -> Result<RoutingInstance, String> {
    let n = inst.n();
    let pick = |m: &Matrix<f64>| Matrix::from_fn(n, |i, j| m.get(perm[i], perm[j]));
    let features = Features {
        demands: inst.demands.as_ref().map(|d| perm.iter().map(|&p| d[p]).collect()),
        capacity: inst.capacity,
        tw: inst.tw.as_ref().map(|t| perm.iter().map(|&p| t[p]).collect()),
    };
    RoutingInstance::from_parts(
        inst.task,
        perm.iter().map(|&p| inst.coords[p]).collect(),
        pick(&inst.dist),
        pick(&inst.dur),
        features,
        "permuted",
        inst.seed,
    )
    .map_err(|e| e.to_string())
}

fn row_permutation_error(base: &Tensor, moved: &Tensor, perm: &[usize]) -> f64 {
    let mut worst = 0.0f64;
    for (i, &p) in perm.iter().enumerate() {
        for (x, y) in moved.row(i).iter().zip(base.row(p)) {
            worst = worst.max((x - y).abs());
        }
    }
    worst
}

fn equivariance() -> CheckResult {
    let map = synth_basemap(&SynthConfig::new(60, 8)).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut enc_err, mut bias_err) = (0.0f64, 0.0f64);
    for task in [Task::Atsp, Task::Acvrp] {
        let policy = Policy::new(ModelConfig::full(task), 11).map_err(|e| e.to_string())?;
        let inst = make_instance(&map, task, 5, Sampler::Uniform, 21).map_err(|e| e.to_string())?;
        let mut g = Graph::new(&policy.params);
        let enc = encode(&mut g, &policy.config, &inst, &mut Knn::TopK);
        let bias = neural_adaptive_bias(&mut g, &inst.dist, &inst.angle);
        for _ in 0..50 {
            let mut perm: Vec<usize> = (0..5).collect();
            // depot-based tasks keep the depot at index 0
            let lo = usize::from(task != Task::Atsp);
            perm[lo..].shuffle(&mut rng);
            let other = permuted(&inst, &perm)?;
            let mut h = Graph::new(&policy.params);
            let e2 = encode(&mut h, &policy.config, &other, &mut Knn::TopK);
            let b2 = neural_adaptive_bias(&mut h, &other.dist, &other.angle);
            enc_err = enc_err
                .max(row_permutation_error(g.value(enc.row), h.value(e2.row), &perm))
                .max(row_permutation_error(g.value(enc.col), h.value(e2.col), &perm));
            let (ba, bb) = (g.value(bias), h.value(b2));
            for i in 0..5 {
                for j in 0..5 {
                    bias_err = bias_err.max((bb.get(i, j) - ba.get(perm[i], perm[j])).abs());
                }
            }
        }
    }
    Ok((
        enc_err <= 1e-4 && bias_err <= 1e-4,
        format!("2 tasks x 50 permutations, encoder err {enc_err:.2e}, bias err {bias_err:.2e}"),
    ))
}

type OpBuilder = fn(&mut Graph, &[Var]) -> Result<Var, NumericsError>;

struct OpCase {
    name: &'static str,
    shapes: &'static [(usize, usize)],
    positive: bool,
    build: OpBuilder,
}

fn op_cases() -> Vec<OpCase> {
    macro_rules! case {
        ($name:expr, $shapes:expr, $pos:expr, |$g:ident, $x:ident| $body:expr) => {
            OpCase {
                name: $name,
                shapes: $shapes,
                positive: $pos,
                build: |$g: &mut Graph, $x: &[Var]| Ok($body),
            }
        };
    }
    vec![
        case!("matmul", &[(3, 4), (4, 2)], false, |g, x| g.matmul(x[0], x[1])),
        case!("matmul_nt", &[(3, 4), (2, 4)], false, |g, x| g.matmul_nt(x[0], x[1])),
        case!("add", &[(3, 4), (3, 4)], false, |g, x| g.add(x[0], x[1])),
        case!("sub", &[(3, 4), (3, 4)], false, |g, x| g.sub(x[0], x[1])),
        case!("mul", &[(3, 4), (3, 4)], false, |g, x| g.mul(x[0], x[1])),
        case!("add_row", &[(3, 4), (1, 4)], false, |g, x| g.add_row(x[0], x[1])),
        case!("mul_col", &[(3, 4), (3, 1)], false, |g, x| g.mul_col(x[0], x[1])),
        case!("scale", &[(3, 4)], false, |g, x| g.scale(x[0], -1.7)),
        case!("add_scalar", &[(3, 4)], false, |g, x| g.add_scalar(x[0], 0.3)),
        case!("one_minus", &[(3, 4)], false, |g, x| g.one_minus(x[0])),
        case!("relu", &[(3, 4)], false, |g, x| g.relu(x[0])),
        case!("sigmoid", &[(3, 4)], false, |g, x| g.sigmoid(x[0])),
        case!("tanh", &[(3, 4)], false, |g, x| g.tanh(x[0])),
        case!("exp", &[(3, 4)], false, |g, x| g.exp(x[0])),
        case!("log", &[(3, 4)], true, |g, x| g.log(x[0])),
        OpCase {
            name: "softmax_masked",
            shapes: &[(2, 5)],
            positive: false,
            build: |g, x| g.softmax_masked(x[0], [true, false, true, true, false].repeat(2)),
        },
        OpCase {
            name: "log_softmax_masked",
            shapes: &[(2, 5)],
            positive: false,
            build: |g, x| {
                let l = g.log_softmax_masked(x[0], [true, false, true, true, false].repeat(2))?;
                Ok(g.pick_cols(l, vec![2, 3]))
            },
        },
        case!("concat_cols", &[(3, 2), (3, 3)], false, |g, x| g.concat_cols(&[x[0], x[1]])),
        case!("slice_cols", &[(3, 5)], false, |g, x| g.slice_cols(x[0], 1, 3)),
        case!("gather_rows", &[(4, 3)], false, |g, x| g.gather_rows(x[0], vec![2, 0, 2, 3])),
        case!("pick_cols", &[(3, 5)], false, |g, x| g.pick_cols(x[0], vec![4, 1, 1])),
        case!("scatter_rows", &[(2, 3)], false, |g, x| g.scatter_rows(x[0], vec![3, 0], 5)),
        case!("transpose", &[(3, 4)], false, |g, x| g.transpose(x[0])),
        case!("reshape", &[(3, 4)], false, |g, x| g.reshape(x[0], 2, 6)),
        case!("sum", &[(3, 4)], false, |g, x| g.sum(x[0])),
        case!("mean", &[(3, 4)], false, |g, x| g.mean(x[0])),
        case!("linear", &[(3, 4), (4, 5), (1, 5)], false, |g, x| g.linear(x[0], x[1], Some(x[2]))),
        case!("instance_norm", &[(5, 4), (1, 4), (1, 4)], false, |g, x| g.instance_norm(x[0], x[1], x[2])),
        case!("aafm", &[(4, 3), (4, 3), (4, 3), (4, 4)], false, |g, x| g.aafm(x[0], x[1], x[2], x[3])),
    ]
}

/// Worst relative gradient error over all core operations, each reduced to
/// a scalar through a fixed random weighting.
fn op_gradient_errors() -> Result<Vec<(&'static str, f64)>, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut out = Vec::new();
    for case in op_cases() {
        let mut store = ParamStore::new();
        for (i, &(r, c)) in case.shapes.iter().enumerate() {
            let t = Tensor::from_fn(r, c, |_, _| {
                let m = rng.gen_range(0.2..1.0);
                if case.positive || rng.gen_bool(0.5) {
                    m
                } else {
                    -m
                }
            });
            store.add(format!("x{i}"), t).map_err(|e| e.to_string())?;
        }
        let build = case.build;
        let k = case.shapes.len();
        let objective = move |g: &mut Graph| -> Result<Var, NumericsError> {
            let xs: Vec<Var> = (0..k).map(|i| g.p(&format!("x{i}"))).collect();
            let y = build(g, &xs)?;
            let (r, c) = g.value(y).shape();
            let mut wr = ChaCha8Rng::seed_from_u64(99);
            let w = g.constant(Tensor::from_fn(r, c, |_, _| wr.gen_range(-1.0..1.0)));
            let prod = g.mul(y, w);
            Ok(g.sum(prod))
        };
        let rep = grad_check(&mut store, objective, 1e-6, usize::MAX, &mut rng).map_err(|e| e.to_string())?;
        out.push((case.name, rep.max_rel_err));
    }
    Ok(out)
}

fn gradients() -> CheckResult {
    let t = Instant::now();
    let ops = op_gradient_errors()?;
    let (worst_op, op_err) = ops
        .iter()
        .copied()
        .fold(("", 0.0f64), |acc, (n, e)| if e > acc.1 { (n, e) } else { acc });

    let cfg = ModelConfig {
        embed_dim: 8,
        n_heads: 2,
        n_layers: 2,
        ff_dim: 16,
        ..ModelConfig::full(Task::Atsp)
    };
    let mut policy = Policy::new(cfg.clone(), 12).map_err(|e| e.to_string())?;
    let map = synth_basemap(&SynthConfig::new(30, 12)).map_err(|e| e.to_string())?;
    let inst = make_instance(&map, Task::Atsp, 4, Sampler::Uniform, 13).map_err(|e| e.to_string())?;
    let actions = [2, 0, 3, 1];
    let objective = |g: &mut Graph| -> Result<Var, NumericsError> {
        route_log_prob(g, &cfg, &inst, &actions).map_err(|e| match e {
            ModelError::Numerics(n) => n,
            other => panic!("route log-probability failed: {other}"),
        })
    };
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let rep = grad_check(&mut policy.params, objective, 1e-5, usize::MAX, &mut rng).map_err(|e| e.to_string())?;
    let secs = t.elapsed().as_secs_f64();
    Ok((
        rep.max_rel_err <= 1e-3 && op_err <= 1e-5 && secs < 300.0,
        format!(
            "model {} coords max rel err {:.2e}; {} ops max rel err {:.2e} ({worst_op})",
            rep.checked,
            rep.max_rel_err,
            ops.len(),
            op_err
        ),
    ))
}

fn for_each_permutation(items: &mut Vec<usize>, k: usize, f: &mut impl FnMut(&[usize])) {
    if k == items.len() {
        f(items);
        return;
    }
    for i in k..items.len() {
        items.swap(k, i);
        for_each_permutation(items, k + 1, f);
        items.swap(k, i);
    }
}

fn closed_tour_cost(dist: &Matrix<f64>, tour: &[usize]) -> f64 {
    let n = tour.len();
    (0..n).map(|k| dist.get(tour[k], tour[(k + 1) % n])).sum()
}

fn random_atsp(n: usize, rng: &mut impl Rng, integral: bool) -> Result<RoutingInstance, String> {
    let dist = Matrix::from_fn(n, |i, j| match (i == j, integral) {
        (true, _) => 0.0,
        (false, true) => rng.gen_range(1..=100) as f64,
        (false, false) => rng.gen_range(0.01..1.0),
    });
    let coords = (0..n).map(|_| [rng.gen(), rng.gen()]).collect();
    let none = Features {
        demands: None,
        capacity: None,
        tw: None,
    };
    RoutingInstance::from_parts(Task::Atsp, coords, dist.clone(), dist, none, "random", 0).map_err(|e| e.to_string())
}

/// Walks a depot-based route and checks load and time windows from scratch.
fn route_is_feasible(inst: &RoutingInstance, actions: &[usize]) -> bool {
    let cap = inst.capacity.unwrap_or(f64::INFINITY);
    let (mut load, mut clock, mut at) = (0.0, 0.0, 0);
    let mut seen = vec![false; inst.n()];
    for &a in actions {
        if a == 0 {
            if let Some(tw) = &inst.tw {
                if clock + inst.dur.get(at, 0) > tw[0][1] + 1e-9 {
                    return false;
                }
            }
            load = 0.0;
            clock = 0.0;
        } else {
            if seen[a] {
                return false;
            }
            seen[a] = true;
            load += inst.demand(a);
            if load > cap + 1e-9 {
                return false;
            }
            if let Some(tw) = &inst.tw {
                clock = (clock + inst.dur.get(at, a)).max(tw[a][0]);
                if clock > tw[a][1] + 1e-9 {
                    return false;
                }
            }
        }
        at = a;
    }
    at == 0 && seen.iter().skip(1).all(|&s| s)
}

fn environments() -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (mut tours, mut cost_mismatch) = (0usize, 0usize);
    for n in 2..=6 {
        for _ in 0..5 {
            let inst = random_atsp(n, &mut rng, false)?;
            let mut items: Vec<usize> = (0..n).collect();
            let mut err = None;
            for_each_permutation(&mut items, 0, &mut |tour| {
                tours += 1;
                let reference = closed_tour_cost(&inst.dist, tour);
                match route_cost(&inst, tour) {
                    Ok(c) if (c - reference).abs() <= 1e-12 * reference.max(1.0) => {}
                    Ok(_) => cost_mismatch += 1,
                    Err(e) => err = Some(e.to_string()),
                }
            });
            if let Some(e) = err {
                return Err(e);
            }
        }
    }

    let maps: Vec<_> = (0..3)
        .map(|s| synth_basemap(&SynthConfig::new(120, 60 + s)))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let (mut rollouts, mut violations, mut dead_ends) = (0usize, 0usize, 0usize);
    for k in 0..1000u64 {
        let task = if k % 2 == 0 { Task::Acvrp } else { Task::Acvrptw };
        let n = rng.gen_range(5..=30);
        let inst = make_instance(&maps[k as usize % 3], task, n, Sampler::Uniform, 1000 + k).map_err(|e| e.to_string())?;
        for _ in 0..10 {
            rollouts += 1;
            let mut env = EnvState::reset(&inst, 0).map_err(|e| e.to_string())?;
            while !env.done {
                let Ok(mask) = env.checked_mask() else {
                    dead_ends += 1;
                    break;
                };
                let open: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
                env.step(open[rng.gen_range(0..open.len())]).map_err(|e| e.to_string())?;
            }
            if env.done && !route_is_feasible(&inst, &env.actions) {
                violations += 1;
            }
        }
    }
    Ok((
        cost_mismatch == 0 && violations == 0 && dead_ends == 0,
        format!(
            "{tours} tours, {cost_mismatch} cost mismatches; {rollouts} rollouts, {violations} violations, {dead_ends} dead ends"
        ),
    ))
}

fn brute_force_optimum(dist: &Matrix<f64>) -> f64 {
    let n = dist.n();
    let mut rest: Vec<usize> = (1..n).collect();
    let mut best = f64::INFINITY;
    for_each_permutation(&mut rest, 0, &mut |p| {
        let mut tour = vec![0];
        tour.extend_from_slice(p);
        best = best.min(closed_tour_cost(dist, &tour));
    });
    best
}

fn oracles() -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (mut hk_mismatch, mut worse, mut below) = (0usize, 0usize, 0usize);
    for _ in 0..200 {
        let n = rng.gen_range(5..=8);
        let inst = random_atsp(n, &mut rng, true)?;
        let (hk, tour) = held_karp_atsp(&inst.dist).map_err(|e| e.to_string())?;
        if hk != brute_force_optimum(&inst.dist) || closed_tour_cost(&inst.dist, &tour) != hk {
            hk_mismatch += 1;
        }
        let start = rng.gen_range(0..n);
        let nn = nearest_neighbor(&inst.dist, start);
        let improved = or_opt_improve(&nn, &inst.dist, 10_000);
        let (before, after) = (tour_cost(&inst.dist, &nn), tour_cost(&inst.dist, &improved));
        if after > before {
            worse += 1;
        }
        if after < hk {
            below += 1;
        }
    }
    Ok((
        hk_mismatch + worse + below == 0,
        format!("200 instances: {hk_mismatch} exact mismatches, {worse} or-opt increases, {below} below optimum"),
    ))
}

struct LearningRun {
    label: &'static str,
    initial_gap: f64,
    final_gap: f64,
    seconds: f64,
}

fn mean_gap(costs: &[f64], optimal: &[f64]) -> f64 {
    costs.iter().zip(optimal).map(|(c, o)| 100.0 * (c - o) / o).sum::<f64>() / costs.len() as f64
}

fn learning_runs() -> Result<Vec<LearningRun>, String> {
    let synth = |seeds: std::ops::RangeInclusive<u64>| -> Result<Vec<_>, String> {
        seeds.map(|s| synth_basemap(&SynthConfig::new(200, s)).map_err(|e| e.to_string())).collect()
    };
    let maps = synth(1..=4)?;
    let held_out = synth(101..=102)?;
    let test = make_dataset(&held_out, Task::Atsp, 10, Sampler::Uniform, 100, 77).map_err(|e| e.to_string())?;
    let validation = make_dataset(&held_out, Task::Atsp, 10, Sampler::Uniform, 64, 78).map_err(|e| e.to_string())?;
    let optimal: Vec<f64> = test
        .iter()
        .map(|i| held_karp_atsp(&i.dist).map(|r| r.0))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let cfg = TrainConfig::desk(Task::Atsp);
    let variants = [
        ("gated+neural", InitContext::Gated, BiasKind::Neural),
        ("coords-only", InitContext::Coords, BiasKind::Heuristic),
        ("dist-only", InitContext::Dist, BiasKind::Heuristic),
    ];
    let mut runs = Vec::new();
    for (label, init_context, bias) in variants {
        let t = Instant::now();
        let model = ModelConfig {
            init_context,
            bias,
            ..ModelConfig::desk(Task::Atsp)
        };
        let mut policy = Policy::new(model, 0).map_err(|e| e.to_string())?;
        let gap = |p: &Policy| greedy_costs(p, &test, 10).map(|c| mean_gap(&c, &optimal)).map_err(|e| e.to_string());
        let initial_gap = gap(&policy)?;
        train(&mut policy, &maps, &validation, &cfg, None).map_err(|e| e.to_string())?;
        runs.push(LearningRun {
            label,
            initial_gap,
            final_gap: gap(&policy)?,
            seconds: t.elapsed().as_secs_f64(),
        });
    }
    Ok(runs)
}

fn learning() -> Vec<CheckOutcome> {
    let t = Instant::now();
    let runs = learning_runs();
    let seconds = t.elapsed().as_secs_f64();
    let (nine, ten) = match runs {
        Err(e) => ((false, format!("error: {e}")), (false, format!("error: {e}"))),
        Ok(runs) => {
            let main = &runs[0];
            let improvement = (main.initial_gap - main.final_gap) / main.initial_gap;
            let nine = (
                main.final_gap <= 10.0 && improvement >= 0.5 && main.seconds < 1800.0,
                format!(
                    "{}: gap {:.2}% -> {:.2}% ({:.0}% better) in {:.0}s",
                    main.label,
                    main.initial_gap,
                    main.final_gap,
                    100.0 * improvement,
                    main.seconds
                ),
            );
            let best_ablation = runs[1].final_gap.min(runs[2].final_gap);
            let ten = (
                main.final_gap <= best_ablation + 0.5,
                runs.iter()
                    .map(|r| format!("{} {:.2}%", r.label, r.final_gap))
                    .collect::<Vec<_>>()
                    .join(", "),
            );
            (nine, ten)
        }
    };
    vec![
        CheckOutcome {
            id: 9,
            name: "desk-scale learning",
            passed: nine.0,
            detail: nine.1,
            seconds,
        },
        CheckOutcome {
            id: 10,
            name: "ablation ordering",
            passed: ten.0,
            detail: ten.1,
            seconds,
        },
    ]
}

fn constants() -> CheckResult {
    let model = serde_json::to_value(ModelConfig::full(Task::Atsp)).map_err(|e| e.to_string())?;
    let train_cfg = TrainConfig::full(Task::Atsp);
    let tc = serde_json::to_value(&train_cfg).map_err(|e| e.to_string())?;
    let expect = [
        (&model["knn_k"], 25.0),
        (&model["embed_dim"], 128.0),
        (&model["n_heads"], 8.0),
        (&model["n_layers"], 12.0),
        (&model["ff_dim"], 512.0),
        (&tc["lr"], 4e-4),
        (&tc["gamma"], 0.1),
        (&tc["augment_factor"], 8.0),
    ];
    let dump_ok = expect.iter().all(|(v, x)| v.as_f64() == Some(*x));
    let milestones_ok = MILESTONE_RATIOS == [0.9, 0.975] && train_cfg.milestones == [180, 195] && tc["milestones"] == serde_json::json!([180, 195]);
    let ok = dump_ok && milestones_ok && AUGMENT_FACTOR == 8 && train_cfg.augment;
    Ok((ok, format!("config dumps: model {model}, milestones {}", tc["milestones"])))
}

/// Serves any table request with values derived from the coordinates in the URL.
struct CoordinateTable;

impl TableTransport for CoordinateTable {
    fn get(&self, url: &str) -> Result<String, IngestError> {
        let bad = || IngestError::MissingFixture(url.to_string());
        let rest = url.split("/table/v1/driving/").nth(1).ok_or_else(bad)?;
        let (coords, query) = rest.split_once('?').ok_or_else(bad)?;
        let pts: Vec<(f64, f64)> = coords
            .split(';')
            .filter_map(|c| c.split_once(','))
            .filter_map(|(a, b)| Some((a.parse().ok()?, b.parse().ok()?)))
            .collect();
        let list = |key: &str| -> Option<Vec<usize>> {
            let part = query.split('&').find_map(|p| p.strip_prefix(key))?;
            part.split(';').map(|x| x.parse().ok()).collect()
        };
        let (src, dst) = (list("sources=").ok_or_else(bad)?, list("destinations=").ok_or_else(bad)?);
        let value = |a: (f64, f64), b: (f64, f64), salt: f64| {
            if a == b {
                0.0
            } else {
                ((a.0 - b.0).abs() * 7919.0 + (a.1 - b.1).abs() * 104_729.0 + a.1 * 3.0 + salt).round() / 10.0
            }
        };
        let grid = |salt: f64| -> Vec<Vec<f64>> {
            src.iter()
                .map(|&i| dst.iter().map(|&j| value(pts[i], pts[j], salt)).collect())
                .collect()
        };
        Ok(serde_json::json!({"code": "Ok", "distances": grid(0.0), "durations": grid(5.0)}).to_string())
    }
}

fn table_client() -> CheckResult {
    let err = |e: IngestError| e.to_string();
    let points = [(52.52, 13.405), (52.5163, 13.3777), (52.5079, 13.3887)]
        .iter()
        .map(|&(lat, lon)| GeoPoint::new(lat, lon))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| e.to_string())?;
    let client = OsrmClient::with_transport(
        OsrmEndpoint::new("http://osrm.test").map_err(err)?,
        FixtureTransport::from_texts([OSRM_FIXTURE]),
    );
    let raw = client.fetch_table(&points).map_err(err)?;
    let dist = [[0.0, 2712.4, 2455.8], [2801.3, 0.0, 1604.9], [2390.6, 1571.2, 0.0]];
    let dur = [[0.0, 412.3, 389.9], [430.1, 0.0, 301.7], [377.4, 288.2, 0.0]];
    let bit_exact = (0..3).all(|i| {
        (0..3).all(|j| {
            raw.dist.get(i, j).to_bits() == f64::to_bits(dist[i][j]) && raw.dur.get(i, j).to_bits() == f64::to_bits(dur[i][j])
        })
    });

    let many: Vec<GeoPoint> = (0..7)
        .map(|k| GeoPoint::new(48.1 + 0.003 * k as f64, 11.5 + 0.0021 * ((k * 3) % 7) as f64))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let whole = OsrmClient::with_transport(OsrmEndpoint::new("http://mock").map_err(err)?, CoordinateTable)
        .fetch_table(&many)
        .map_err(err)?;
    let mut chunk_mismatch = Vec::new();
    for size in 2..=6 {
        let ep = OsrmEndpoint::new("http://mock").map_err(err)?.with_max_table_size(size).map_err(err)?;
        let chunked = OsrmClient::with_transport(ep, CoordinateTable).fetch_table(&many).map_err(err)?;
        if chunked != whole {
            chunk_mismatch.push(size);
        }
    }
    Ok((
        bit_exact && chunk_mismatch.is_empty(),
        format!("fixture bit-exact: {bit_exact}; chunk sizes 2..=6 differing from single call: {chunk_mismatch:?}"),
    ))
}
