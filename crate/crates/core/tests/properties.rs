use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rrnco_core::baselines::{nearest_neighbor, or_opt_improve, tour_cost};
use rrnco_core::ingest::{synth_basemap, SynthConfig};
use rrnco_core::instancegen::{make_instance, sample_indices_uniform, subsample_matrices};
use rrnco_core::trainer::pomo_advantage;
use rrnco_core::numerics::Graph;
use rrnco_core::{EnvState, Matrix, ParamStore, RoutingInstance, Sampler, Solution, Task, Tensor};

fn tensor(rows: usize, cols: usize, vals: &[f64]) -> Tensor {
    Tensor::from_fn(rows, cols, |r, c| vals[(r * cols + c) % vals.len()])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gathered_matrices_match_base_entries(seed in any::<u64>(), n_sub in 2usize..20) {
        let map = synth_basemap(&SynthConfig::new(30, seed % 7)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let idx = sample_indices_uniform(30, n_sub, &mut rng).unwrap();
        let (dist, dur) = subsample_matrices(&map, &idx).unwrap();
        let s = idx.as_slice();
        for i in 0..n_sub {
            for j in 0..n_sub {
                prop_assert_eq!(dist.get(i, j), f64::from(map.dist.get(s[i], s[j])));
                prop_assert_eq!(dur.get(i, j), f64::from(map.dur.get(s[i], s[j])));
            }
        }
    }

    #[test]
    fn advantages_are_centred(rows in prop::collection::vec(prop::collection::vec(-1e3f64..1e3, 2..12), 1..6)) {
        let adv = pomo_advantage(&rows).unwrap();
        for (a, r) in adv.iter().zip(&rows) {
            let scale = r.iter().map(|x| x.abs()).fold(1.0, f64::max);
            prop_assert!(a.iter().sum::<f64>().abs() <= 1e-9 * scale * a.len() as f64);
        }
    }

    #[test]
    fn masked_softmax_is_a_distribution(
        vals in prop::collection::vec(-30f64..30.0, 1..40),
        mask_bits in prop::collection::vec(any::<bool>(), 40),
        pin in 0usize..40,
    ) {
        let n = vals.len();
        let mut mask: Vec<bool> = mask_bits[..n].to_vec();
        mask[pin % n] = true;
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.constant(Tensor::from_vec(1, n, vals.clone()));
        let p = g.softmax_masked(x, mask.clone()).unwrap();
        let lp = g.log_softmax_masked(x, mask.clone()).unwrap();
        let (p, lp) = (g.value(p), g.value(lp));
        let mut total = 0.0f64;
        for j in 0..n {
            let pj = p.get(0, j);
            if mask[j] {
                prop_assert!(pj >= 0.0);
                prop_assert!((pj.ln() - lp.get(0, j)).abs() < 1e-9 || pj == 0.0);
            } else {
                prop_assert_eq!(pj, 0.0);
            }
            total += pj;
        }
        prop_assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn attention_ignores_per_row_score_shifts(
        vals in prop::collection::vec(-2f64..2.0, 8),
        shift in -50f64..50.0,
        n in 2usize..7,
    ) {
        let store = ParamStore::new();
        let q = tensor(n, 3, &vals);
        let k = tensor(n, 3, &vals[2..]);
        let v = tensor(n, 3, &vals[1..]);
        let a = tensor(n, n, &vals[3..]);
        let mut g = Graph::new(&store);
        let (qv, kv, vv) = (g.constant(q), g.constant(k), g.constant(v));
        let av = g.constant(a.clone());
        let base = g.aafm(qv, kv, vv, av);
        let shifted = g.constant(Tensor::from_fn(n, n, |i, j| a.get(i, j) + shift * (i + 1) as f64));
        let moved = g.aafm(qv, kv, vv, shifted);
        prop_assert!(g.value(base).max_abs_diff(g.value(moved)) < 1e-9);
    }

    #[test]
    fn segment_relocation_never_worsens(seed in any::<u64>(), n in 3usize..25) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Matrix::from_fn(n, |i, j| if i == j { 0.0 } else { rng.gen_range(1.0..100.0) });
        let tour = nearest_neighbor(&dist, 0);
        let better = or_opt_improve(&tour, &dist, 1000);
        prop_assert!(tour_cost(&dist, &better) <= tour_cost(&dist, &tour) + 1e-9);
        let mut sorted = better.clone();
        sorted.sort_unstable();
        prop_assert_eq!(sorted, (0..n).collect::<Vec<_>>());
    }
}

fn random_feasible_route(inst: &RoutingInstance, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let start = match inst.task {
        Task::Atsp => rng.gen_range(0..inst.n()),
        _ => RoutingInstance::DEPOT,
    };
    let mut env = EnvState::reset(inst, start).unwrap();
    while !env.done {
        let mask = env.checked_mask().unwrap();
        let open: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
        let a = open[rng.gen_range(0..open.len())];
        env.step(a).unwrap();
    }
    env.actions.clone()
}

/// Re-walks a depot-based route and checks load and windows from scratch.
fn independently_feasible(inst: &RoutingInstance, actions: &[usize]) -> bool {
    let cap = inst.capacity.unwrap();
    let mut load = 0.0;
    let mut clock = 0.0;
    let mut at = 0;
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

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn masked_rollouts_stay_feasible(seed in any::<u64>(), n in 3usize..16, task_pick in 0usize..3) {
        let task = [Task::Atsp, Task::Acvrp, Task::Acvrptw][task_pick];
        let map = synth_basemap(&SynthConfig::new(40, seed % 5)).unwrap();
        let inst = make_instance(&map, task, n, Sampler::Uniform, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        for _ in 0..4 {
            let actions = random_feasible_route(&inst, &mut rng);
            if task != Task::Atsp {
                prop_assert!(independently_feasible(&inst, &actions));
            }
            prop_assert!(Solution::checked(&inst, actions).is_ok());
        }
    }
}
