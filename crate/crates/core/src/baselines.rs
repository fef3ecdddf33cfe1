//! Reference solvers: exact dynamic programs, enumeration, nearest neighbour
//! and direction-preserving segment relocation.

use thiserror::Error;

use crate::envs::{route_cost, EnvError, EnvState, Solution};
use crate::instancegen::{RoutingInstance, Task};
use crate::matrix::Matrix;

/// Largest ATSP size accepted by [`held_karp_atsp`].
pub const HELD_KARP_MAX: usize = 14;
/// Largest customer count accepted by [`cvrp_bruteforce`].
pub const CVRP_BRUTEFORCE_MAX: usize = 9;
/// Largest ATSP size accepted by [`brute_force_atsp`].
pub const BRUTE_FORCE_MAX: usize = 10;

const IMPROVE_EPS: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("instance has {n} nodes; this solver accepts at most {max}")]
    TooLarge { n: usize, max: usize },
    #[error("instance needs at least {min} nodes")]
    TooSmall { min: usize },
    #[error("{method} does not support {task}")]
    Unsupported { method: &'static str, task: Task },
    #[error(transparent)]
    Env(#[from] EnvError),
}

/// Cost of the closed tour `tour[0] -> ... -> tour[last] -> tour[0]`.
pub fn tour_cost(dist: &Matrix<f64>, tour: &[usize]) -> f64 {
    if tour.len() < 2 {
        return 0.0;
    }
    let open: f64 = tour.windows(2).map(|w| dist.get(w[0], w[1])).sum();
    open + dist.get(tour[tour.len() - 1], tour[0])
}

/// Exact ATSP by dynamic programming over subsets; the tour starts at 0.
pub fn held_karp_atsp(dist: &Matrix<f64>) -> Result<(f64, Vec<usize>), BaselineError> {
    let n = dist.n();
    if n > HELD_KARP_MAX {
        return Err(BaselineError::TooLarge { n, max: HELD_KARP_MAX });
    }
    if n == 0 {
        return Err(BaselineError::TooSmall { min: 1 });
    }
    if n == 1 {
        return Ok((0.0, vec![0]));
    }
    // Nodes 1..n map to bits 0..m.
    let m = n - 1;
    let full = (1usize << m) - 1;
    let mut dp = vec![f64::INFINITY; (full + 1) * m];
    let mut parent = vec![usize::MAX; (full + 1) * m];
    for j in 0..m {
        dp[(1 << j) * m + j] = dist.get(0, j + 1);
    }
    for mask in 1..=full {
        for j in 0..m {
            let cur = dp[mask * m + j];
            if mask & (1 << j) == 0 || !cur.is_finite() {
                continue;
            }
            for k in 0..m {
                if mask & (1 << k) != 0 {
                    continue;
                }
                let next = mask | (1 << k);
                let c = cur + dist.get(j + 1, k + 1);
                if c < dp[next * m + k] {
                    dp[next * m + k] = c;
                    parent[next * m + k] = j;
                }
            }
        }
    }
    let mut best = (f64::INFINITY, 0);
    for j in 0..m {
        let c = dp[full * m + j] + dist.get(j + 1, 0);
        if c < best.0 {
            best = (c, j);
        }
    }
    let mut tour = Vec::with_capacity(n);
    let (mut mask, mut j) = (full, best.1);
    while j != usize::MAX {
        tour.push(j + 1);
        let p = parent[mask * m + j];
        mask &= !(1 << j);
        j = p;
    }
    tour.push(0);
    tour.reverse();
    Ok((best.0, tour))
}

/// Exact ATSP by enumerating all `(N-1)!` tours that start at 0.
pub fn brute_force_atsp(dist: &Matrix<f64>) -> Result<(f64, Vec<usize>), BaselineError> {
    let n = dist.n();
    if n > BRUTE_FORCE_MAX {
        return Err(BaselineError::TooLarge { n, max: BRUTE_FORCE_MAX });
    }
    if n == 0 {
        return Err(BaselineError::TooSmall { min: 1 });
    }
    fn rec(dist: &Matrix<f64>, tour: &mut Vec<usize>, used: &mut [bool], best: &mut (f64, Vec<usize>)) {
        let n = dist.n();
        if tour.len() == n {
            let c = tour_cost(dist, tour);
            if c < best.0 {
                *best = (c, tour.clone());
            }
            return;
        }
        for j in 1..n {
            if !used[j] {
                used[j] = true;
                tour.push(j);
                rec(dist, tour, used, best);
                tour.pop();
                used[j] = false;
            }
        }
    }
    let mut best = (f64::INFINITY, Vec::new());
    let mut used = vec![false; n];
    used[0] = true;
    rec(dist, &mut vec![0], &mut used, &mut best);
    Ok(best)
}

/// Greedy tour from `start`: always the closest unvisited node, lowest
/// index on ties.
pub fn nearest_neighbor(dist: &Matrix<f64>, start: usize) -> Vec<usize> {
    let n = dist.n();
    let mut visited = vec![false; n];
    let mut tour = vec![start];
    visited[start] = true;
    let mut cur = start;
    for _ in 1..n {
        let mut best: Option<usize> = None;
        for j in 0..n {
            if !visited[j] && best.is_none_or(|b| dist.get(cur, j) < dist.get(cur, b)) {
                best = Some(j);
            }
        }
        let j = best.expect("an unvisited node remains");
        visited[j] = true;
        tour.push(j);
        cur = j;
    }
    tour
}

/// Best-improvement relocation of segments of 1 to 3 consecutive nodes to
/// another position, keeping their direction. `tour[0]` stays first.
pub fn or_opt_improve(tour: &[usize], dist: &Matrix<f64>, max_iters: usize) -> Vec<usize> {
    let mut t = tour.to_vec();
    let n = t.len();
    if n < 4 {
        return t;
    }
    let d = |a: usize, b: usize| dist.get(a, b);
    for _ in 0..max_iters {
        // (delta, segment start, segment length, insert-after node)
        let mut best: Option<(f64, usize, usize, usize)> = None;
        for len in 1..=3usize.min(n - 2) {
            for i in 1..=n - len {
                let (first, last) = (t[i], t[i + len - 1]);
                let a = t[i - 1];
                let b = t[(i + len) % n];
                let removal = d(a, b) - d(a, first) - d(last, b);
                for k in 0..n {
                    // insertion edge (c, e) of the tour without the segment
                    if k >= i - 1 && k < i + len {
                        continue;
                    }
                    let c = t[k];
                    let e = t[(k + 1) % n];
                    let delta = removal + d(c, first) + d(last, e) - d(c, e);
                    if delta < -IMPROVE_EPS && best.is_none_or(|bst| delta < bst.0) {
                        best = Some((delta, i, len, c));
                    }
                }
            }
        }
        let Some((_, i, len, after)) = best else { break };
        let segment: Vec<usize> = t.drain(i..i + len).collect();
        let pos = t.iter().position(|&x| x == after).expect("insertion node present") + 1;
        t.splice(pos..pos, segment);
    }
    t
}

/// Exact capacitated routing over ordered partitions into feasible trips.
///
/// Each customer subset's cheapest depot round trip comes from a path DP;
/// a second DP over subsets picks the best partition. Returns the cost and
/// the action sequence (trips joined by depot returns).
pub fn cvrp_bruteforce(inst: &RoutingInstance) -> Result<(f64, Vec<usize>), BaselineError> {
    if inst.task != Task::Acvrp {
        return Err(BaselineError::Unsupported {
            method: "cvrp_bruteforce",
            task: inst.task,
        });
    }
    let m = inst.n() - 1;
    if m > CVRP_BRUTEFORCE_MAX {
        return Err(BaselineError::TooLarge {
            n: m,
            max: CVRP_BRUTEFORCE_MAX,
        });
    }
    if m == 0 {
        return Ok((0.0, Vec::new()));
    }
    let cap = inst.capacity.unwrap_or(1.0);
    let dist = &inst.dist;
    let full = (1usize << m) - 1;
    let mut path = vec![f64::INFINITY; (full + 1) * m];
    let mut parent = vec![usize::MAX; (full + 1) * m];
    for j in 0..m {
        path[(1 << j) * m + j] = dist.get(0, j + 1);
    }
    for mask in 1..=full {
        for j in 0..m {
            let cur = path[mask * m + j];
            if mask & (1 << j) == 0 || !cur.is_finite() {
                continue;
            }
            for k in 0..m {
                if mask & (1 << k) == 0 {
                    let next = mask | (1 << k);
                    let c = cur + dist.get(j + 1, k + 1);
                    if c < path[next * m + k] {
                        path[next * m + k] = c;
                        parent[next * m + k] = j;
                    }
                }
            }
        }
    }
    let load = |mask: usize| (0..m).filter(|&j| mask & (1 << j) != 0).map(|j| inst.demand(j + 1)).sum::<f64>();
    let mut trip = vec![(f64::INFINITY, 0usize); full + 1];
    for mask in 1..=full {
        if load(mask) > cap + 1e-9 {
            continue;
        }
        for j in 0..m {
            let c = path[mask * m + j] + dist.get(j + 1, 0);
            if c < trip[mask].0 {
                trip[mask] = (c, j);
            }
        }
    }
    let mut best = vec![(f64::INFINITY, 0usize); full + 1];
    best[0] = (0.0, 0);
    for mask in 1..=full {
        let low = mask & mask.wrapping_neg();
        let rest = mask ^ low;
        // enumerate subsets of `rest`, each joined with the lowest bit
        let mut sub = rest;
        loop {
            let t = sub | low;
            let c = trip[t].0 + best[mask ^ t].0;
            if c < best[mask].0 {
                best[mask] = (c, t);
            }
            if sub == 0 {
                break;
            }
            sub = (sub - 1) & rest;
        }
    }
    let mut actions = Vec::new();
    let mut mask = full;
    while mask != 0 {
        let t = best[mask].1;
        let mut seq = Vec::new();
        let (mut sm, mut j) = (t, trip[t].1);
        while j != usize::MAX {
            seq.push(j + 1);
            let p = parent[sm * m + j];
            sm &= !(1 << j);
            j = p;
        }
        seq.reverse();
        actions.extend(seq);
        actions.push(RoutingInstance::DEPOT);
        mask ^= t;
    }
    Ok((best[full].0, actions))
}

/// Builds a route through the environment, taking the feasible node with
/// the highest `score` at every step (lowest index on ties). `first` is the
/// forced first action (start node for ATSP, first customer otherwise).
pub fn construct<F>(inst: &RoutingInstance, first: usize, mut score: F) -> Result<Solution, BaselineError>
where
    F: FnMut(&EnvState, usize) -> f64,
{
    let mut env = crate::model::start_env(inst, first)?;
    while !env.done {
        let mask = env.checked_mask()?;
        let mut best: Option<(usize, f64)> = None;
        for (j, _) in mask.iter().enumerate().filter(|(_, &ok)| ok) {
            let s = score(&env, j);
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((j, s));
            }
        }
        env.step(best.expect("checked mask has a feasible node").0)?;
    }
    Ok(Solution::checked(inst, env.actions)?)
}

/// Nearest feasible node; the depot only when no customer fits.
pub fn nearest_feasible(inst: &RoutingInstance) -> Result<Solution, BaselineError> {
    if inst.task == Task::Atsp {
        return Ok(Solution::checked(inst, nearest_neighbor(&inst.dist, 0))?);
    }
    let first = (1..inst.n())
        .min_by(|&a, &b| inst.dist.get(0, a).total_cmp(&inst.dist.get(0, b)))
        .ok_or(BaselineError::TooSmall { min: 2 })?;
    construct(inst, first, |env, j| {
        if j == RoutingInstance::DEPOT {
            f64::MIN
        } else {
            -env.instance().dist.get(env.current_node, j)
        }
    })
}

/// Nearest-neighbour construction followed by segment relocation. For
/// ACVRP each trip is improved on its own, so loads are unchanged.
pub fn nn_or_opt(inst: &RoutingInstance, max_iters: usize) -> Result<Solution, BaselineError> {
    match inst.task {
        Task::Atsp => {
            let tour = or_opt_improve(&nearest_neighbor(&inst.dist, 0), &inst.dist, max_iters);
            Ok(Solution::checked(inst, tour)?)
        }
        Task::Acvrp => {
            let start = nearest_feasible(inst)?;
            let mut actions = Vec::with_capacity(start.actions.len());
            for trip in start.actions.split(|&a| a == RoutingInstance::DEPOT).filter(|t| !t.is_empty()) {
                let mut cycle = vec![RoutingInstance::DEPOT];
                cycle.extend_from_slice(trip);
                let better = or_opt_improve(&cycle, &inst.dist, max_iters);
                actions.extend_from_slice(&better[1..]);
                actions.push(RoutingInstance::DEPOT);
            }
            Ok(Solution::checked(inst, actions)?)
        }
        Task::Acvrptw => Err(BaselineError::Unsupported {
            method: "or-opt",
            task: inst.task,
        }),
    }
}

/// Exact solution when the instance is small enough.
pub fn exact(inst: &RoutingInstance) -> Result<Solution, BaselineError> {
    match inst.task {
        Task::Atsp => {
            let (_, tour) = held_karp_atsp(&inst.dist)?;
            Ok(Solution::checked(inst, tour)?)
        }
        Task::Acvrp => {
            let (_, actions) = cvrp_bruteforce(inst)?;
            Ok(Solution::checked(inst, actions)?)
        }
        Task::Acvrptw => Err(BaselineError::Unsupported {
            method: "exact",
            task: inst.task,
        }),
    }
}

/// Checks a solution's claimed cost against an environment replay.
pub fn verify(inst: &RoutingInstance, sol: &Solution) -> Result<bool, EnvError> {
    Ok(route_cost(inst, &sol.actions)? == sol.cost)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instancegen::Features;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_dist(n: usize, rng: &mut impl Rng) -> Matrix<f64> {
        Matrix::from_fn(n, |i, j| if i == j { 0.0 } else { rng.gen_range(0.01..1.0) })
    }

    /// Shortest-path closure, so the triangle inequality holds.
    fn metric_closure(d: &Matrix<f64>) -> Matrix<f64> {
        let n = d.n();
        let mut m = d.clone();
        for k in 0..n {
            for i in 0..n {
                for j in 0..n {
                    let via = m.get(i, k) + m.get(k, j);
                    if via < m.get(i, j) {
                        m.set(i, j, via);
                    }
                }
            }
        }
        m
    }

    fn cvrp(dist: Matrix<f64>, demands: Vec<f64>) -> RoutingInstance {
        let n = dist.n();
        let coords = (0..n).map(|i| [i as f64 / n as f64, 0.5]).collect();
        let features = Features {
            demands: Some(demands),
            capacity: Some(1.0),
            tw: None,
        };
        RoutingInstance::from_parts(Task::Acvrp, coords, dist.clone(), dist, features, "t", 0).unwrap()
    }

    #[test]
    fn three_nodes_is_min_of_two_orientations() {
        let d = Matrix::from_rows(&[vec![0.0, 1.0, 5.0], vec![5.0, 0.0, 1.0], vec![1.0, 5.0, 0.0]]).unwrap();
        let (c, t) = held_karp_atsp(&d).unwrap();
        assert_eq!(c, 3.0);
        assert_eq!(t, vec![0, 1, 2]);
    }

    #[test]
    fn held_karp_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for n in 2..=8 {
            let d = random_dist(n, &mut rng);
            let (hk, tour) = held_karp_atsp(&d).unwrap();
            let (bf, _) = brute_force_atsp(&d).unwrap();
            assert_eq!(hk, bf, "n={n}");
            assert!((tour_cost(&d, &tour) - hk).abs() < 1e-12);
        }
        assert!(matches!(
            held_karp_atsp(&Matrix::zeros(15)),
            Err(BaselineError::TooLarge { n: 15, max: 14 })
        ));
    }

    #[test]
    fn nearest_neighbor_greedy_trap() {
        // From 0 the cheap arc to 1 forces the expensive 3 -> 0 closing arc.
        let d = Matrix::from_rows(&[
            vec![0.0, 1.0, 2.0, 3.0],
            vec![9.0, 0.0, 1.0, 9.0],
            vec![9.0, 9.0, 0.0, 1.0],
            vec![20.0, 1.0, 1.0, 0.0],
        ])
        .unwrap();
        let tour = nearest_neighbor(&d, 0);
        assert_eq!(tour, vec![0, 1, 2, 3]);
        assert_eq!(tour_cost(&d, &tour), 23.0);
        let (opt, best) = held_karp_atsp(&d).unwrap();
        assert_eq!(opt, 13.0);
        assert_eq!(best, vec![0, 2, 3, 1]);
        assert_eq!(nearest_neighbor(&Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap(), 1), vec![1, 0]);
    }

    #[test]
    fn nearest_neighbor_breaks_ties_low() {
        let d = Matrix::from_fn(4, |i, j| if i == j { 0.0 } else { 1.0 });
        assert_eq!(nearest_neighbor(&d, 2), vec![2, 0, 1, 3]);
    }

    #[test]
    fn or_opt_is_monotone_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let d = random_dist(10, &mut rng);
            let start = nearest_neighbor(&d, 0);
            let better = or_opt_improve(&start, &d, 1000);
            let mut sorted = better.clone();
            sorted.sort_unstable();
            assert_eq!(sorted, (0..10).collect::<Vec<_>>());
            assert_eq!(better[0], 0);
            assert!(tour_cost(&d, &better) <= tour_cost(&d, &start) + 1e-12);
            assert!(tour_cost(&d, &better) >= held_karp_atsp(&d).unwrap().0 - 1e-12);
        }
    }

    #[test]
    fn or_opt_keeps_optimal_tour() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = random_dist(5, &mut rng);
        let (c, t) = held_karp_atsp(&d).unwrap();
        let out = or_opt_improve(&t, &d, 100);
        assert_eq!(out, t);
        assert_eq!(tour_cost(&d, &out), c);
    }

    #[test]
    fn or_opt_repairs_a_displaced_node() {
        // Optimal cycle 0-1-2-3-4-5 (all unit arcs); node 3 moved elsewhere.
        let n = 6;
        let d = Matrix::from_fn(n, |i, j| if (i + 1) % n == j { 1.0 } else if i == j { 0.0 } else { 10.0 });
        let out = or_opt_improve(&[0, 1, 2, 4, 3, 5], &d, 10);
        assert_eq!(tour_cost(&d, &out), 6.0);
    }

    #[test]
    fn cvrp_single_customer() {
        let d = Matrix::from_rows(&[vec![0.0, 0.3], vec![0.5, 0.0]]).unwrap();
        let inst = cvrp(d, vec![0.0, 0.4]);
        assert_eq!(cvrp_bruteforce(&inst).unwrap(), (0.8, vec![1, 0]));
    }

    #[test]
    fn cvrp_unconstrained_matches_held_karp_on_metric_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for n in 3..=8 {
            let d = metric_closure(&random_dist(n, &mut rng));
            let inst = cvrp(d.clone(), (0..n).map(|i| if i == 0 { 0.0 } else { 0.05 }).collect());
            let (c, actions) = cvrp_bruteforce(&inst).unwrap();
            let (hk, _) = held_karp_atsp(&d).unwrap();
            assert!((c - hk).abs() < 1e-12, "n={n}: {c} vs {hk}");
            assert!((route_cost(&inst, &actions).unwrap() - c).abs() < 1e-12);
        }
    }

    #[test]
    fn capacity_never_lowers_the_optimum() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let d = random_dist(7, &mut rng);
            let loose = cvrp(d.clone(), (0..7).map(|i| if i == 0 { 0.0 } else { 0.1 }).collect());
            let tight = cvrp(d, (0..7).map(|i| if i == 0 { 0.0 } else { 0.4 }).collect());
            let (cl, _) = cvrp_bruteforce(&loose).unwrap();
            let (ct, at) = cvrp_bruteforce(&tight).unwrap();
            assert!(ct >= cl - 1e-12);
            assert!((route_cost(&tight, &at).unwrap() - ct).abs() < 1e-12);
        }
    }

    #[test]
    fn heuristics_are_feasible_and_verified() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..10 {
            let d = random_dist(9, &mut rng);
            let inst = cvrp(d, (0..9).map(|i| if i == 0 { 0.0 } else { rng.gen_range(0.05..0.5) }).collect());
            let nn = nearest_feasible(&inst).unwrap();
            let oo = nn_or_opt(&inst, 100).unwrap();
            let ex = exact(&inst).unwrap();
            for s in [&nn, &oo, &ex] {
                assert!(verify(&inst, s).unwrap());
            }
            assert!(oo.cost <= nn.cost + 1e-12);
            assert!(ex.cost <= oo.cost + 1e-12);
        }
    }
}
