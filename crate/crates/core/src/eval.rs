//! Solving datasets with a named method and reporting gaps to a reference.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::{exact, nearest_feasible, nn_or_opt, BaselineError};
use crate::envs::{EnvError, Solution};
use crate::instancegen::RoutingInstance;
use crate::model::{max_starts, rollout, DecodeMode, ModelError, Policy};
use crate::trainer::augment_x8;

/// Iteration cap for segment relocation.
pub const OR_OPT_ITERS: usize = 10_000;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("method `model` needs a checkpoint")]
    MissingPolicy,
    #[error("unknown method {0:?} (expected nn, oropt, heldkarp or model)")]
    UnknownMethod(String),
    #[error("empty dataset")]
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Nn,
    Oropt,
    Heldkarp,
    Model,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Nn => "nn",
            Method::Oropt => "oropt",
            Method::Heldkarp => "heldkarp",
            Method::Model => "model",
        })
    }
}

impl FromStr for Method {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "nn" => Ok(Method::Nn),
            "oropt" => Ok(Method::Oropt),
            "heldkarp" => Ok(Method::Heldkarp),
            "model" => Ok(Method::Model),
            other => Err(EvalError::UnknownMethod(other.to_string())),
        }
    }
}

/// Decoding options for the learned policy.
#[derive(Debug, Clone, Copy)]
pub struct ModelOptions<'p> {
    pub policy: &'p Policy,
    /// Greedy rollouts per instance (capped by the number of valid starts).
    pub n_starts: usize,
    /// Also decode the seven coordinate symmetries and keep the best.
    pub augment: bool,
}

pub fn solve(inst: &RoutingInstance, method: Method, model: Option<&ModelOptions>) -> Result<Solution, EvalError> {
    match method {
        Method::Nn => Ok(nearest_feasible(inst)?),
        Method::Oropt => Ok(nn_or_opt(inst, OR_OPT_ITERS)?),
        Method::Heldkarp => Ok(exact(inst)?),
        Method::Model => {
            let opts = model.ok_or(EvalError::MissingPolicy)?;
            let variants: Vec<RoutingInstance> = if opts.augment {
                augment_x8(&inst.coords).into_iter().map(|c| inst.with_coords(c)).collect()
            } else {
                vec![inst.clone()]
            };
            let starts = opts.n_starts.min(max_starts(inst)).max(1);
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let mut best: Option<Solution> = None;
            for v in &variants {
                for t in rollout(opts.policy, v, starts, DecodeMode::Greedy, &mut rng)? {
                    if best.as_ref().is_none_or(|b| t.cost() < b.cost) {
                        best = Some(Solution::checked(inst, t.actions)?);
                    }
                }
            }
            Ok(best.expect("at least one rollout"))
        }
    }
}

/// Relative gap in percent.
pub fn gap_percent(cost: f64, reference: f64) -> f64 {
    100.0 * (cost - reference) / reference
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceResult {
    pub index: usize,
    pub cost: f64,
    pub reference_cost: f64,
    pub gap_percent: f64,
}

/// Dataset-level comparison of one method against a reference method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub method: Method,
    pub reference: Method,
    pub task: String,
    pub n_instances: usize,
    pub mean_cost: f64,
    pub reference_mean_cost: f64,
    /// Mean of per-instance gaps, in percent.
    pub gap_percent: f64,
    /// Wall time of the evaluated method only, in seconds.
    pub time_s: f64,
    pub reference_time_s: f64,
    pub instances: Vec<InstanceResult>,
}

fn solve_all(instances: &[RoutingInstance], method: Method, model: Option<&ModelOptions>) -> Result<(Vec<f64>, f64), EvalError> {
    let start = Instant::now();
    let costs = instances
        .par_iter()
        .map(|inst| solve(inst, method, model).map(|s| s.cost))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((costs, start.elapsed().as_secs_f64()))
}

pub fn evaluate(
    instances: &[RoutingInstance],
    method: Method,
    reference: Method,
    model: Option<&ModelOptions>,
) -> Result<EvalReport, EvalError> {
    let first = instances.first().ok_or(EvalError::Empty)?;
    let (costs, time_s) = solve_all(instances, method, model)?;
    let (refs, reference_time_s) = solve_all(instances, reference, model)?;
    let rows: Vec<InstanceResult> = costs
        .iter()
        .zip(&refs)
        .enumerate()
        .map(|(index, (&cost, &reference_cost))| InstanceResult {
            index,
            cost,
            reference_cost,
            gap_percent: gap_percent(cost, reference_cost),
        })
        .collect();
    let k = rows.len() as f64;
    Ok(EvalReport {
        method,
        reference,
        task: first.task.to_string(),
        n_instances: rows.len(),
        mean_cost: costs.iter().sum::<f64>() / k,
        reference_mean_cost: refs.iter().sum::<f64>() / k,
        gap_percent: rows.iter().map(|r| r.gap_percent).sum::<f64>() / k,
        time_s,
        reference_time_s,
        instances: rows,
    })
}

impl EvalReport {
    /// Per-instance rows as CSV with a header line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("index,cost,reference_cost,gap_percent\n");
        for r in &self.instances {
            out.push_str(&format!("{},{},{},{}\n", r.index, r.cost, r.reference_cost, r.gap_percent));
        }
        out
    }
}

/// Checks that `value` has the report layout: required keys with the right
/// JSON types and one per-instance row per instance.
pub fn validate_report_json(value: &serde_json::Value) -> Result<(), String> {
    let obj = value.as_object().ok_or("report must be an object")?;
    let methods = ["nn", "oropt", "heldkarp", "model"];
    for key in ["method", "reference"] {
        let m = obj.get(key).and_then(|v| v.as_str()).ok_or(format!("{key} must be a string"))?;
        if !methods.contains(&m) {
            return Err(format!("{key} has unknown method {m:?}"));
        }
    }
    obj.get("task").and_then(|v| v.as_str()).ok_or("task must be a string")?;
    for key in ["mean_cost", "reference_mean_cost", "gap_percent", "time_s", "reference_time_s"] {
        obj.get(key).and_then(|v| v.as_f64()).ok_or(format!("{key} must be a number"))?;
    }
    let n = obj
        .get("n_instances")
        .and_then(|v| v.as_u64())
        .ok_or("n_instances must be a non-negative integer")?;
    let rows = obj.get("instances").and_then(|v| v.as_array()).ok_or("instances must be an array")?;
    if rows.len() as u64 != n {
        return Err("instances length differs from n_instances".into());
    }
    for r in rows {
        for key in ["cost", "reference_cost", "gap_percent"] {
            r.get(key).and_then(|v| v.as_f64()).ok_or(format!("instance {key} must be a number"))?;
        }
        r.get("index").and_then(|v| v.as_u64()).ok_or("instance index must be an integer")?;
    }
    let known = [
        "method",
        "reference",
        "task",
        "n_instances",
        "mean_cost",
        "reference_mean_cost",
        "gap_percent",
        "time_s",
        "reference_time_s",
        "instances",
    ];
    if let Some(extra) = obj.keys().find(|k| !known.contains(&k.as_str())) {
        return Err(format!("unexpected key {extra:?}"));
    }
    Ok(())
}
