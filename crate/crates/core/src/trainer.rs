//! Policy-gradient training with a shared multi-start baseline.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::derive_seed;
use crate::geodata::BaseMap;
use crate::instancegen::{make_instance, InstanceError, RoutingInstance, Sampler, Task};
use crate::model::{
    decode_routes, encode, rollout, sample_from_logp, start_actions, DecodeMode, Knn, ModelError, Policy,
};
use crate::numerics::{Gradients, Graph, NumericsError, ParamStore, Tensor, Var};

pub use crate::model::Trajectory;

/// Milestones as fractions of the epoch budget (180 and 195 of 200).
pub const MILESTONE_RATIOS: [f64; 2] = [0.9, 0.975];

/// Number of coordinate variants produced by [`augment_x8`].
pub const AUGMENT_FACTOR: usize = 8;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("need at least two starts per group, got {0}")]
    TooFewStarts(usize),
    #[error("shape mismatch between log-probabilities and advantages")]
    Shape,
    #[error("non-finite {what} at epoch {epoch}, step {step}: {detail}")]
    NonFinite {
        what: &'static str,
        epoch: usize,
        step: usize,
        detail: String,
    },
    #[error("no training base maps")]
    NoMaps,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Instance(#[from] InstanceError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub task: Task,
    /// Nodes per training instance (depot included).
    pub n_nodes: usize,
    pub sampler: Sampler,
    pub batch_size: usize,
    pub instances_per_epoch: usize,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub milestones: Vec<usize>,
    pub gamma: f64,
    pub n_starts: usize,
    pub augment: bool,
    pub augment_factor: usize,
    pub grad_clip: f64,
    pub validation_size: usize,
    pub seed: u64,
}

/// Milestones at fixed fractions of `epochs`.
pub fn scaled_milestones(epochs: usize) -> Vec<usize> {
    MILESTONE_RATIOS.iter().map(|r| (r * epochs as f64).floor() as usize).collect()
}

impl TrainConfig {
    /// Full-scale schedule.
    pub fn full(task: Task) -> Self {
        Self {
            task,
            n_nodes: 100,
            sampler: Sampler::Uniform,
            batch_size: 256,
            instances_per_epoch: 100_000,
            epochs: 200,
            lr: 4e-4,
            weight_decay: 1e-6,
            milestones: scaled_milestones(200),
            gamma: 0.1,
            n_starts: 100,
            augment: true,
            augment_factor: AUGMENT_FACTOR,
            grad_clip: 1.0,
            validation_size: 128,
            seed: 1234,
        }
    }

    /// Single-CPU schedule on 10-node instances.
    pub fn desk(task: Task) -> Self {
        Self {
            n_nodes: 10,
            batch_size: 64,
            instances_per_epoch: 2000,
            epochs: 20,
            milestones: scaled_milestones(20),
            n_starts: 8,
            augment: false,
            ..Self::full(task)
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let err = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.batch_size == 0 || self.instances_per_epoch == 0 || self.epochs == 0 {
            return err("batch_size, instances_per_epoch and epochs must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || self.weight_decay < 0.0 || !(self.gamma > 0.0) {
            return err("lr and gamma must be positive, weight_decay non-negative");
        }
        if self.n_starts < 2 {
            return err("n_starts must be at least 2");
        }
        if self.n_nodes < 2 {
            return err("n_nodes must be at least 2");
        }
        if self.milestones.iter().any(|&m| m >= self.epochs) || self.milestones.windows(2).any(|w| w[0] > w[1]) {
            return err("milestones must be sorted and below epochs");
        }
        if self.augment && !(1..=AUGMENT_FACTOR).contains(&self.augment_factor) {
            return err("augment_factor must be between 1 and 8");
        }
        if !(self.grad_clip > 0.0) {
            return err("grad_clip must be positive");
        }
        Ok(())
    }
}

/// `lr` after `epoch` completed epochs.
pub fn lr_at(base: f64, milestones: &[usize], gamma: f64, epoch: usize) -> f64 {
    let k = milestones.iter().filter(|&&m| epoch >= m).count();
    base * gamma.powi(k as i32)
}

/// Reward minus the mean reward of its row.
pub fn pomo_advantage(rewards: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, TrainError> {
    rewards
        .iter()
        .map(|row| {
            if row.len() < 2 {
                return Err(TrainError::TooFewStarts(row.len()));
            }
            let mean = row.iter().sum::<f64>() / row.len() as f64;
            Ok(row.iter().map(|r| r - mean).collect())
        })
        .collect()
}

/// `-mean(adv * logps)`; advantages enter as constants.
pub fn reinforce_loss(g: &mut Graph, logps: Var, adv: &Tensor) -> Result<Var, TrainError> {
    if g.value(logps).shape() != adv.shape() {
        return Err(TrainError::Shape);
    }
    if !adv.all_finite() || !g.value(logps).all_finite() {
        return Err(NumericsError::NonFinite(f64::NAN).into());
    }
    let a = g.constant(adv.clone());
    let prod = g.mul(logps, a);
    let m = g.mean(prod);
    Ok(g.scale(m, -1.0))
}

/// The eight symmetries of the unit square; variant 0 is the identity.
pub fn augment_x8(coords: &[[f64; 2]]) -> Vec<Vec<[f64; 2]>> {
    let maps: [fn(f64, f64) -> [f64; 2]; 8] = [
        |x, y| [x, y],
        |x, y| [1.0 - x, y],
        |x, y| [x, 1.0 - y],
        |x, y| [1.0 - x, 1.0 - y],
        |x, y| [y, x],
        |x, y| [1.0 - y, x],
        |x, y| [y, 1.0 - x],
        |x, y| [1.0 - y, 1.0 - x],
    ];
    maps.iter().map(|f| coords.iter().map(|c| f(c[0], c[1])).collect()).collect()
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: i32,
}

impl Adam {
    pub fn new(params: &ParamStore, weight_decay: f64) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|(_, _, t)| Tensor::zeros(t.rows(), t.cols())).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (((p, g), m), v) in params.iter_mut().zip(grads.iter()).zip(&mut self.m).zip(&mut self.v) {
            let (p, g, m, v) = (p.data_mut(), g.data(), m.data_mut(), v.data_mut());
            for k in 0..p.len() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let update = (m[k] / c1) / ((v[k] / c2).sqrt() + self.eps);
                p[k] -= lr * (update + self.weight_decay * p[k]);
            }
        }
    }
}

/// Scales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

/// One instance's contribution to a training step.
pub struct InstanceOutcome {
    pub grads: Gradients,
    pub loss: f64,
    pub mean_cost: f64,
}

/// Sampled multi-start rollouts, advantages and gradients for one instance
/// (and its coordinate variants when augmenting).
pub fn instance_gradients(policy: &Policy, inst: &RoutingInstance, cfg: &TrainConfig, seed: u64) -> Result<InstanceOutcome, TrainError> {
    let firsts = start_actions(inst, cfg.n_starts)?;
    let variants: Vec<RoutingInstance> = if cfg.augment {
        augment_x8(&inst.coords)
            .into_iter()
            .take(cfg.augment_factor)
            .map(|c| inst.with_coords(c))
            .collect()
    } else {
        vec![inst.clone()]
    };
    let mut total = Gradients::zeros_like(&policy.params);
    let (mut loss_sum, mut cost_sum) = (0.0, 0.0);
    for (v, variant) in variants.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, v as u64));
        let mut knn_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1000 + v as u64));
        let mut g = Graph::new(&policy.params);
        let enc = encode(&mut g, &policy.config, variant, &mut Knn::Sample(&mut knn_rng));
        let (trajs, records) = decode_routes(&mut g, &policy.config, variant, &enc, &firsts, |_, _, row| {
            sample_from_logp(row, &mut rng)
        })?;
        let s = firsts.len();
        let mut per_route = None;
        for rec in &records {
            let spread = g.scatter_rows(rec.logp, rec.routes.clone(), s);
            per_route = Some(match per_route {
                None => spread,
                Some(acc) => g.add(acc, spread),
            });
        }
        let rewards: Vec<f64> = trajs.iter().map(|t| t.reward).collect();
        let adv = pomo_advantage(&[rewards.clone()])?.remove(0);
        let loss = match per_route {
            Some(lp) => {
                let lp = g.transpose(lp);
                reinforce_loss(&mut g, lp, &Tensor::from_vec(1, s, adv))?
            }
            None => g.constant(Tensor::scalar(0.0)),
        };
        loss_sum += g.scalar(loss);
        cost_sum += -rewards.iter().sum::<f64>() / s as f64;
        total.add_assign(&g.backward(loss));
    }
    let k = variants.len() as f64;
    total.scale(1.0 / k);
    Ok(InstanceOutcome {
        grads: total,
        loss: loss_sum / k,
        mean_cost: cost_sum / k,
    })
}

/// Mean over instances of the best greedy multi-start cost.
pub fn greedy_mean_cost(policy: &Policy, instances: &[RoutingInstance], n_starts: usize) -> Result<f64, ModelError> {
    let costs = greedy_costs(policy, instances, n_starts)?;
    Ok(costs.iter().sum::<f64>() / costs.len().max(1) as f64)
}

/// Best greedy multi-start cost per instance.
pub fn greedy_costs(policy: &Policy, instances: &[RoutingInstance], n_starts: usize) -> Result<Vec<f64>, ModelError> {
    instances
        .par_iter()
        .map(|inst| {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let s = n_starts.min(crate::model::max_starts(inst));
            let trajs = rollout(policy, inst, s, DecodeMode::Greedy, &mut rng)?;
            Ok(trajs.iter().map(Trajectory::cost).fold(f64::INFINITY, f64::min))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub mean_cost: f64,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationRecord {
    pub epoch: usize,
    pub val_cost: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub epochs: Vec<EpochMetrics>,
    pub validation: Vec<ValidationRecord>,
    pub initial_val_cost: Option<f64>,
    pub best_val_cost: Option<f64>,
    pub best_epoch: Option<usize>,
}

/// Files written by [`train`] into a run directory.
pub struct RunFiles {
    pub dir: PathBuf,
}

impl RunFiles {
    pub fn metrics(&self) -> PathBuf {
        self.dir.join("metrics.jsonl")
    }
    pub fn validation(&self) -> PathBuf {
        self.dir.join("validation.jsonl")
    }
    pub fn epoch_checkpoint(&self, epoch: usize) -> PathBuf {
        self.dir.join(format!("epoch_{epoch:04}.ckpt"))
    }
    pub fn best_checkpoint(&self) -> PathBuf {
        self.dir.join("best.ckpt")
    }
    pub fn last_checkpoint(&self) -> PathBuf {
        self.dir.join("last.ckpt")
    }
    pub fn model_config(&self) -> PathBuf {
        self.dir.join("model_config.json")
    }
    pub fn train_config(&self) -> PathBuf {
        self.dir.join("train_config.json")
    }
}

fn append_jsonl<T: Serialize>(w: &mut Option<BufWriter<File>>, item: &T) -> Result<(), TrainError> {
    if let Some(w) = w {
        serde_json::to_writer(&mut *w, item).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
        w.flush()?;
    }
    Ok(())
}

/// Trains `policy` in place on fresh instances drawn from `maps`.
///
/// Per-instance gradients are computed in parallel and summed in instance
/// order, so the result does not depend on the worker count. Each epoch is
/// checkpointed into `out` when given, along with the best validation
/// checkpoint.
pub fn train(
    policy: &mut Policy,
    maps: &[BaseMap],
    validation: &[RoutingInstance],
    cfg: &TrainConfig,
    out: Option<&Path>,
) -> Result<TrainReport, TrainError> {
    cfg.validate()?;
    if maps.is_empty() {
        return Err(TrainError::NoMaps);
    }
    if policy.config.task != cfg.task {
        return Err(ModelError::TaskMismatch {
            expected: policy.config.task,
            found: cfg.task,
        }
        .into());
    }
    let files = out.map(|d| RunFiles { dir: d.to_path_buf() });
    let (mut metrics_w, mut val_w) = (None, None);
    if let Some(f) = &files {
        fs::create_dir_all(&f.dir)?;
        fs::write(f.model_config(), serde_json::to_string_pretty(&policy.config).expect("serialises"))?;
        fs::write(f.train_config(), serde_json::to_string_pretty(cfg).expect("serialises"))?;
        metrics_w = Some(BufWriter::new(File::create(f.metrics())?));
        val_w = Some(BufWriter::new(File::create(f.validation())?));
    }

    let mut report = TrainReport::default();
    if !validation.is_empty() {
        report.initial_val_cost = Some(greedy_mean_cost(policy, validation, cfg.n_starts)?);
    }
    let mut adam = Adam::new(&policy.params, cfg.weight_decay);
    let steps = cfg.instances_per_epoch.div_ceil(cfg.batch_size);
    let mut counter: u64 = 0;
    for epoch in 0..cfg.epochs {
        let lr = lr_at(cfg.lr, &cfg.milestones, cfg.gamma, epoch);
        let (mut loss_acc, mut cost_acc, mut seen) = (0.0, 0.0, 0usize);
        for step in 0..steps {
            let b = cfg.batch_size.min(cfg.instances_per_epoch - step * cfg.batch_size);
            let seeds: Vec<u64> = (0..b as u64).map(|k| derive_seed(cfg.seed, counter + k)).collect();
            counter += b as u64;
            let outcomes = seeds
                .par_iter()
                .map(|&seed| {
                    let map = &maps[(seed % maps.len() as u64) as usize];
                    let inst = make_instance(map, cfg.task, cfg.n_nodes, cfg.sampler, seed)?;
                    instance_gradients(policy, &inst, cfg, derive_seed(seed, 7))
                })
                .collect::<Result<Vec<_>, TrainError>>()?;
            let mut grads = Gradients::zeros_like(&policy.params);
            let mut batch_loss = 0.0;
            for o in &outcomes {
                grads.add_assign(&o.grads);
                batch_loss += o.loss;
                cost_acc += o.mean_cost;
            }
            grads.scale(1.0 / b as f64);
            batch_loss /= b as f64;
            if !batch_loss.is_finite() || !grads.all_finite() {
                return Err(TrainError::NonFinite {
                    what: "loss or gradient",
                    epoch,
                    step,
                    detail: format!("loss {batch_loss}, grad norm {}", grads.global_norm()),
                });
            }
            clip_grad_norm(&mut grads, cfg.grad_clip);
            adam.step(&mut policy.params, &grads, lr);
            if !policy.params.all_finite() {
                return Err(TrainError::NonFinite {
                    what: "parameter",
                    epoch,
                    step,
                    detail: "after optimizer step".into(),
                });
            }
            loss_acc += batch_loss * b as f64;
            seen += b;
        }
        let m = EpochMetrics {
            epoch,
            mean_cost: cost_acc / seen as f64,
            loss: loss_acc / seen as f64,
            lr,
        };
        log::info!("epoch {epoch}: cost {:.4} loss {:.4} lr {lr:e}", m.mean_cost, m.loss);
        append_jsonl(&mut metrics_w, &m)?;
        report.epochs.push(m);
        if let Some(f) = &files {
            policy.save(f.epoch_checkpoint(epoch))?;
            policy.save(f.last_checkpoint())?;
        }
        if !validation.is_empty() {
            let val_cost = greedy_mean_cost(policy, validation, cfg.n_starts)?;
            let rec = ValidationRecord { epoch, val_cost };
            append_jsonl(&mut val_w, &rec)?;
            report.validation.push(rec);
            if report.best_val_cost.is_none_or(|b| val_cost < b) {
                report.best_val_cost = Some(val_cost);
                report.best_epoch = Some(epoch);
                if let Some(f) = &files {
                    policy.save(f.best_checkpoint())?;
                }
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{synth_basemap, SynthConfig};
    use crate::model::ModelConfig;
    use crate::numerics::grad_check;

    #[test]
    fn advantage_examples() {
        assert_eq!(pomo_advantage(&[vec![1.0, 2.0, 3.0]]).unwrap(), vec![vec![-1.0, 0.0, 1.0]]);
        assert_eq!(pomo_advantage(&[vec![4.0; 5]]).unwrap(), vec![vec![0.0; 5]]);
        assert!(matches!(pomo_advantage(&[vec![1.0]]), Err(TrainError::TooFewStarts(1))));
    }

    #[test]
    fn loss_examples() {
        let mut store = ParamStore::new();
        store.add("lp", Tensor::from_vec(1, 1, vec![-2.0])).unwrap();
        let mut g = Graph::new(&store);
        let lp = g.p("lp");
        let loss = reinforce_loss(&mut g, lp, &Tensor::scalar(1.0)).unwrap();
        assert_eq!(g.scalar(loss), 2.0);

        let mut store = ParamStore::new();
        store.add("lp", Tensor::from_vec(2, 3, vec![-1.0, -2.0, -0.5, -3.0, -0.1, -1.0])).unwrap();
        let mut g = Graph::new(&store);
        let lp = g.p("lp");
        let loss = reinforce_loss(&mut g, lp, &Tensor::zeros(2, 3)).unwrap();
        assert_eq!(g.scalar(loss), 0.0);
        assert_eq!(g.backward(loss).global_norm(), 0.0);
    }

    /// Two-logit softmax policy: raising the log-probability of the action
    /// with positive advantage must lower the loss.
    #[test]
    fn loss_gradient_sign() {
        let mut store = ParamStore::new();
        store.add("theta", Tensor::from_vec(1, 2, vec![0.3, -0.2])).unwrap();
        let objective = |g: &mut Graph| {
            let th = g.p("theta");
            let lp = g.log_softmax_masked(th, vec![true, true])?;
            let lp0 = g.pick_cols(lp, vec![0]);
            Ok(reinforce_loss(g, lp0, &Tensor::scalar(1.0)).unwrap())
        };
        let grads = {
            let mut g = Graph::new(&store);
            let l = objective(&mut g).unwrap();
            g.backward(l)
        };
        assert!(grads.get(0).get(0, 0) < 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let report = grad_check(&mut store, objective, 1e-5, 10, &mut rng).unwrap();
        assert!(report.max_rel_err < 1e-6);
    }

    #[test]
    fn augmentation_properties() {
        let coords = vec![[0.125, 0.75], [0.0, 1.0], [0.375, 0.25]];
        let v = augment_x8(&coords);
        assert_eq!(v.len(), 8);
        assert_eq!(v[0], coords);
        let twice: Vec<[f64; 2]> = v[1].iter().map(|c| [1.0 - c[0], c[1]]).collect();
        assert_eq!(twice, coords);
        assert!(v.iter().flatten().all(|c| (0.0..=1.0).contains(&c[0]) && (0.0..=1.0).contains(&c[1])));
        let distinct: std::collections::HashSet<String> = v.iter().map(|x| format!("{x:?}")).collect();
        assert_eq!(distinct.len(), 8);
    }

    #[test]
    fn milestone_schedule() {
        assert_eq!(scaled_milestones(200), vec![180, 195]);
        assert_eq!(scaled_milestones(20), vec![18, 19]);
        let m = scaled_milestones(20);
        assert_eq!(lr_at(4e-4, &m, 0.1, 17), 4e-4);
        assert_eq!(lr_at(4e-4, &m, 0.1, 18), 4e-5);
        assert!((lr_at(4e-4, &m, 0.1, 19) - 4e-6).abs() < 1e-20);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        store.add("x", Tensor::from_vec(1, 2, vec![1.0, -1.0])).unwrap();
        let mut grads = Gradients::zeros_like(&store);
        {
            let mut g = Graph::new(&store);
            let x = g.p("x");
            let s = g.sum(x);
            grads.add_assign(&g.backward(s));
        }
        let mut adam = Adam::new(&store, 0.0);
        adam.step(&mut store, &grads, 0.1);
        let x = store.by_path("x").unwrap();
        assert!((x.get(0, 0) - 0.9).abs() < 1e-7);
        assert!((x.get(0, 1) + 1.1).abs() < 1e-7);
    }

    #[test]
    fn clipping_caps_norm() {
        let mut store = ParamStore::new();
        store.add("x", Tensor::from_vec(1, 2, vec![3.0, 4.0])).unwrap();
        let mut g = Graph::new(&store);
        let x = g.p("x");
        let sq = g.mul(x, x);
        let s = g.sum(sq);
        let mut grads = g.backward(s);
        assert_eq!(clip_grad_norm(&mut grads, 1.0), 10.0);
        assert!((grads.global_norm() - 1.0).abs() < 1e-12);
    }

    fn tiny_setup() -> (Policy, Vec<BaseMap>, TrainConfig) {
        let mcfg = ModelConfig {
            embed_dim: 8,
            n_heads: 2,
            n_layers: 1,
            ff_dim: 8,
            knn_k: 4,
            ..ModelConfig::full(Task::Atsp)
        };
        let policy = Policy::new(mcfg, 1).unwrap();
        let maps = vec![synth_basemap(&SynthConfig::new(30, 3)).unwrap()];
        let cfg = TrainConfig {
            instances_per_epoch: 8,
            batch_size: 4,
            epochs: 1,
            milestones: vec![],
            n_starts: 4,
            n_nodes: 6,
            ..TrainConfig::desk(Task::Atsp)
        };
        (policy, maps, cfg)
    }

    #[test]
    fn one_epoch_keeps_parameters_finite_and_is_reproducible() {
        let (policy, maps, cfg) = tiny_setup();
        let mut a = policy.clone();
        let mut b = policy.clone();
        let dir = tempfile::tempdir().unwrap();
        let report = train(&mut a, &maps, &[], &cfg, Some(dir.path())).unwrap();
        train(&mut b, &maps, &[], &cfg, None).unwrap();
        assert!(a.params.all_finite());
        assert_eq!(a.params, b.params);
        assert_ne!(a.params, policy.params);
        assert_eq!(report.epochs.len(), 1);
        let line = fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
        let v: serde_json::Value = serde_json::from_str(line.trim()).unwrap();
        for key in ["epoch", "mean_cost", "loss", "lr"] {
            assert!(v.get(key).is_some(), "{key}");
        }
        assert!(dir.path().join("epoch_0000.ckpt").exists());
    }

    #[test]
    fn augmented_step_runs() {
        let (policy, maps, mut cfg) = tiny_setup();
        cfg.augment = true;
        let inst = make_instance(&maps[0], Task::Atsp, 6, Sampler::Uniform, 5).unwrap();
        let out = instance_gradients(&policy, &inst, &cfg, 9).unwrap();
        assert!(out.grads.all_finite() && out.loss.is_finite());
    }

    #[test]
    fn config_validation() {
        let mut cfg = TrainConfig::desk(Task::Atsp);
        cfg.milestones = vec![20];
        assert!(cfg.validate().is_err());
        cfg = TrainConfig::desk(Task::Atsp);
        cfg.n_starts = 1;
        assert!(cfg.validate().is_err());
        assert!(TrainConfig::full(Task::Acvrp).validate().is_ok());
    }
}
