//! Exact routing state machines for ATSP, ACVRP and ACVRPTW.
//!
//! Costs are measured on the distance matrix; durations only drive
//! time-window feasibility. Returning to the depot refills the vehicle and,
//! when customers remain, starts the next trip with the clock at 0.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::instancegen::{RoutingInstance, Task, TW_HORIZON};

/// Slack for floating-point capacity and time comparisons.
const FEAS_EPS: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum EnvError {
    #[error("start node {start} is not valid for {task} with {n} nodes")]
    InvalidStart { task: Task, start: usize, n: usize },
    #[error("environment is already done")]
    Done,
    #[error("action {0} is not feasible in the current state")]
    Infeasible(usize),
    #[error("no feasible action from node {0}")]
    DeadEnd(usize),
    #[error("route is incomplete")]
    Incomplete,
}

#[derive(Debug, Clone)]
pub struct EnvState<'a> {
    instance: &'a RoutingInstance,
    pub current_node: usize,
    pub visited: Vec<bool>,
    pub remaining_capacity: f64,
    pub clock: f64,
    pub step_count: usize,
    pub done: bool,
    pub start_node: usize,
    /// Actions taken so far; for ATSP this starts with the start node, for
    /// the depot-based tasks it excludes the initial depot.
    pub actions: Vec<usize>,
    unvisited_customers: usize,
}

impl<'a> EnvState<'a> {
    pub fn reset(instance: &'a RoutingInstance, start_node: usize) -> Result<Self, EnvError> {
        let n = instance.n();
        let task = instance.task;
        let valid = match task {
            Task::Atsp => start_node < n,
            Task::Acvrp | Task::Acvrptw => start_node == RoutingInstance::DEPOT,
        };
        if !valid {
            return Err(EnvError::InvalidStart {
                task,
                start: start_node,
                n,
            });
        }
        let mut visited = vec![false; n];
        visited[start_node] = true;
        let (actions, unvisited) = match task {
            Task::Atsp => (vec![start_node], n - 1),
            _ => (Vec::new(), n - 1),
        };
        Ok(Self {
            instance,
            current_node: start_node,
            visited,
            remaining_capacity: instance.capacity.unwrap_or(0.0),
            clock: 0.0,
            step_count: usize::from(task == Task::Atsp),
            done: false,
            start_node,
            actions,
            unvisited_customers: unvisited,
        })
    }

    pub fn instance(&self) -> &'a RoutingInstance {
        self.instance
    }

    fn customer_feasible(&self, i: usize) -> bool {
        let inst = self.instance;
        if self.visited[i] {
            return false;
        }
        match inst.task {
            Task::Atsp => true,
            Task::Acvrp => inst.demand(i) <= self.remaining_capacity + FEAS_EPS,
            Task::Acvrptw => {
                if inst.demand(i) > self.remaining_capacity + FEAS_EPS {
                    return false;
                }
                let tw = inst.tw.as_ref().expect("ACVRPTW has windows");
                let depot = RoutingInstance::DEPOT;
                let arrive = (self.clock + inst.dur.get(self.current_node, i)).max(tw[i][0]);
                arrive <= tw[i][1] + FEAS_EPS && arrive + inst.dur.get(i, depot) <= tw[depot][1] + FEAS_EPS
            }
        }
    }

    pub fn feasible_mask(&self) -> Result<Vec<bool>, EnvError> {
        if self.done {
            return Err(EnvError::Done);
        }
        let n = self.instance.n();
        let depot = RoutingInstance::DEPOT;
        Ok((0..n)
            .map(|i| match self.instance.task {
                Task::Atsp => !self.visited[i],
                _ if i == depot => self.current_node != depot,
                _ => self.customer_feasible(i),
            })
            .collect())
    }

    /// Like [`feasible_mask`](Self::feasible_mask) but reports an all-false
    /// mask as a dead end.
    pub fn checked_mask(&self) -> Result<Vec<bool>, EnvError> {
        let mask = self.feasible_mask()?;
        if mask.iter().any(|&b| b) {
            Ok(mask)
        } else {
            Err(EnvError::DeadEnd(self.current_node))
        }
    }

    pub fn step(&mut self, action: usize) -> Result<(), EnvError> {
        if self.done {
            return Err(EnvError::Done);
        }
        let n = self.instance.n();
        let depot = RoutingInstance::DEPOT;
        let feasible = action < n
            && match self.instance.task {
                Task::Atsp => !self.visited[action],
                _ if action == depot => self.current_node != depot,
                _ => self.customer_feasible(action),
            };
        if !feasible {
            return Err(EnvError::Infeasible(action));
        }
        let inst = self.instance;
        let prev = self.current_node;
        match inst.task {
            Task::Atsp => {
                self.unvisited_customers -= 1;
                self.done = self.unvisited_customers == 0;
            }
            _ if action == depot => {
                self.remaining_capacity = inst.capacity.unwrap_or(0.0);
                self.done = self.unvisited_customers == 0;
                self.clock = if self.done {
                    self.clock + inst.dur.get(prev, depot)
                } else {
                    0.0
                };
            }
            _ => {
                self.remaining_capacity = (self.remaining_capacity - inst.demand(action)).max(0.0);
                if let Some(tw) = &inst.tw {
                    self.clock = (self.clock + inst.dur.get(prev, action)).max(tw[action][0]);
                }
                self.unvisited_customers -= 1;
            }
        }
        self.visited[action] = true;
        self.current_node = action;
        self.step_count += 1;
        self.actions.push(action);
        Ok(())
    }

    /// Dynamic context features seen by the decoder.
    pub fn dynamic_features(&self) -> Vec<f64> {
        let inst = self.instance;
        match inst.task {
            Task::Atsp => vec![self.step_count as f64 / inst.n() as f64],
            Task::Acvrp => vec![self.remaining_capacity / inst.capacity.unwrap_or(1.0)],
            Task::Acvrptw => vec![
                self.remaining_capacity / inst.capacity.unwrap_or(1.0),
                self.clock / TW_HORIZON,
            ],
        }
    }
}

/// Number of dynamic context features for a task.
pub fn dynamic_dim(task: Task) -> usize {
    match task {
        Task::Atsp | Task::Acvrp => 1,
        Task::Acvrptw => 2,
    }
}

/// Node sequence whose consecutive arcs make up the route's cost.
fn closed_sequence(instance: &RoutingInstance, actions: &[usize]) -> Vec<usize> {
    match instance.task {
        Task::Atsp => {
            let mut seq = actions.to_vec();
            seq.extend(actions.first());
            seq
        }
        _ => std::iter::once(RoutingInstance::DEPOT).chain(actions.iter().copied()).collect(),
    }
}

/// Cost of a complete route after replaying it through the environment.
pub fn route_cost(instance: &RoutingInstance, actions: &[usize]) -> Result<f64, EnvError> {
    let start = match instance.task {
        Task::Atsp => *actions.first().ok_or(EnvError::Incomplete)?,
        _ => RoutingInstance::DEPOT,
    };
    let mut env = EnvState::reset(instance, start)?;
    let rest = if instance.task == Task::Atsp { &actions[1..] } else { actions };
    for &a in rest {
        env.step(a)?;
    }
    if !env.done {
        return Err(EnvError::Incomplete);
    }
    let seq = closed_sequence(instance, actions);
    Ok(seq.windows(2).map(|w| instance.dist.get(w[0], w[1])).sum())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Solution {
    pub actions: Vec<usize>,
    pub cost: f64,
    pub feasible: bool,
}

impl Solution {
    /// Validates `actions` and records their cost.
    pub fn checked(instance: &RoutingInstance, actions: Vec<usize>) -> Result<Self, EnvError> {
        let cost = route_cost(instance, &actions)?;
        Ok(Self {
            actions,
            cost,
            feasible: true,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instancegen::Features;
    use crate::matrix::Matrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(n: usize, rng: &mut impl Rng) -> Matrix<f64> {
        Matrix::from_fn(n, |i, j| if i == j { 0.0 } else { rng.gen_range(0.01..1.0) })
    }

    fn instance(task: Task, dist: Matrix<f64>, features: Features) -> RoutingInstance {
        let n = dist.n();
        let coords = (0..n).map(|i| [i as f64 / n as f64, 0.5]).collect();
        RoutingInstance::from_parts(task, coords, dist.clone(), dist, features, "test", 0).unwrap()
    }

    fn atsp(n: usize, seed: u64) -> RoutingInstance {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        instance(Task::Atsp, random_matrix(n, &mut rng), Features::default())
    }

    fn cvrp(demands: Vec<f64>) -> RoutingInstance {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = demands.len();
        instance(
            Task::Acvrp,
            random_matrix(n, &mut rng),
            Features {
                demands: Some(demands),
                capacity: Some(1.0),
                tw: None,
            },
        )
    }

    #[test]
    fn atsp_reset_and_last_node() {
        let inst = atsp(5, 0);
        let mut env = EnvState::reset(&inst, 3).unwrap();
        assert_eq!(env.visited, vec![false, false, false, true, false]);
        assert_eq!(env.current_node, 3);
        for a in [0, 1, 4] {
            env.step(a).unwrap();
        }
        assert_eq!(env.feasible_mask().unwrap(), vec![false, false, true, false, false]);
        env.step(2).unwrap();
        assert!(env.done);
        assert_eq!(env.step_count, 5);
        assert_eq!(env.feasible_mask(), Err(EnvError::Done));
    }

    #[test]
    fn cvrp_reset_rules() {
        let inst = cvrp(vec![0.0, 0.2, 0.2, 0.2]);
        assert!(matches!(EnvState::reset(&inst, 1), Err(EnvError::InvalidStart { .. })));
        let env = EnvState::reset(&inst, 0).unwrap();
        assert_eq!(env.remaining_capacity, 1.0);
        assert_eq!(env.clock, 0.0);
        assert_eq!(env.feasible_mask().unwrap(), vec![false, true, true, true]);
    }

    #[test]
    fn cvrp_low_capacity_only_depot() {
        let inst = cvrp(vec![0.0, 0.2, 0.2, 0.2]);
        let mut env = EnvState::reset(&inst, 0).unwrap();
        env.step(1).unwrap();
        env.remaining_capacity = 0.1;
        assert_eq!(env.feasible_mask().unwrap(), vec![true, false, false, false]);
        env.step(0).unwrap();
        assert_eq!(env.remaining_capacity, 1.0);
    }

    #[test]
    fn infeasible_action_is_rejected() {
        let inst = cvrp(vec![0.0, 0.6, 0.6]);
        let mut env = EnvState::reset(&inst, 0).unwrap();
        assert_eq!(env.step(0), Err(EnvError::Infeasible(0)));
        env.step(1).unwrap();
        assert_eq!(env.step(2), Err(EnvError::Infeasible(2)));
    }

    #[test]
    fn tw_waiting_rule() {
        let dist = Matrix::from_fn(3, |i, j| if i == j { 0.0 } else { 0.1 });
        let inst = instance(
            Task::Acvrptw,
            dist,
            Features {
                demands: Some(vec![0.0, 0.1, 0.1]),
                capacity: Some(1.0),
                tw: Some(vec![[0.0, TW_HORIZON], [0.5, 1.0], [0.0, 4.0]]),
            },
        );
        let mut env = EnvState::reset(&inst, 0).unwrap();
        env.step(1).unwrap();
        assert_eq!(env.clock, 0.5);
        env.step(0).unwrap();
        assert_eq!(env.clock, 0.0);
        env.step(2).unwrap();
        env.step(0).unwrap();
        assert!(env.done);
        assert!((env.clock - 0.2).abs() < 1e-12);
    }

    /// Independent restatement of the one-step TW rules.
    fn brute_first_moves(inst: &RoutingInstance, clock: f64, at: usize, visited: &[bool], cap: f64) -> Vec<usize> {
        let tw = inst.tw.as_ref().unwrap();
        let mut out = vec![];
        for j in 0..inst.n() {
            if j == 0 {
                if at != 0 {
                    out.push(0);
                }
                continue;
            }
            if visited[j] || inst.demand(j) > cap {
                continue;
            }
            let mut t = clock + inst.dur.get(at, j);
            if t < tw[j][0] {
                t = tw[j][0];
            }
            if t <= tw[j][1] && t + inst.dur.get(j, 0) <= tw[0][1] {
                out.push(j);
            }
        }
        out
    }

    #[test]
    fn tw_closed_window_is_masked() {
        let dist = Matrix::from_fn(4, |i, j| if i == j { 0.0 } else { 0.5 });
        let inst = instance(
            Task::Acvrptw,
            dist,
            Features {
                demands: Some(vec![0.0, 0.1, 0.1, 0.1]),
                capacity: Some(1.0),
                tw: Some(vec![[0.0, TW_HORIZON], [0.0, 2.0], [1.5, 3.0], [0.0, 0.8]]),
            },
        );
        // walk every reachable state to depth 4 and compare masks
        fn walk(env: &EnvState, inst: &RoutingInstance, depth: usize, hit_closed: &mut bool) {
            if env.done || depth == 0 {
                return;
            }
            let mask = env.feasible_mask().unwrap();
            let got: Vec<usize> = (0..4).filter(|&i| mask[i]).collect();
            let want = brute_first_moves(inst, env.clock, env.current_node, &env.visited, env.remaining_capacity);
            assert_eq!(got, want);
            if env.current_node != 0 && !env.visited[3] {
                assert!(!mask[3]);
                *hit_closed = true;
            }
            for a in got {
                let mut next = env.clone();
                next.step(a).unwrap();
                walk(&next, inst, depth - 1, hit_closed);
            }
        }
        let env = EnvState::reset(&inst, 0).unwrap();
        let mut hit_closed = false;
        walk(&env, &inst, 6, &mut hit_closed);
        assert!(hit_closed);
    }

    #[test]
    fn route_costs() {
        let inst = atsp(2, 4);
        let c = route_cost(&inst, &[0, 1]).unwrap();
        assert_eq!(c, inst.dist.get(0, 1) + inst.dist.get(1, 0));

        let inst = atsp(4, 5);
        let tour = [2, 0, 3, 1];
        let mut by_hand = 0.0;
        for k in 0..4 {
            by_hand += inst.dist.get(tour[k], tour[(k + 1) % 4]);
        }
        assert!((route_cost(&inst, &tour).unwrap() - by_hand).abs() < 1e-15);

        let inst = cvrp(vec![0.0, 0.3, 0.3]);
        let c = route_cost(&inst, &[1, 2, 0]).unwrap();
        assert_eq!(c, inst.dist.get(0, 1) + inst.dist.get(1, 2) + inst.dist.get(2, 0));
        assert_eq!(route_cost(&inst, &[1, 2]), Err(EnvError::Incomplete));
        assert_eq!(route_cost(&atsp(4, 5), &[0, 1, 2]), Err(EnvError::Incomplete));
    }
}
