//! The routing policy.
//!
//! Encoder: an initial embedding that fuses coordinate and nearest-neighbour
//! distance features through a learned gate, a pairwise bias network over
//! (distance, angle), and a stack of attention-free mixing layers that keep
//! separate row (outgoing) and column (incoming) node streams.
//!
//! Decoder: multi-head attention from the current context over column
//! embeddings, an identity-style residual of the context, an MLP residual,
//! and clipped compatibility scores penalised by `log(distance)`.

use std::path::Path;

use rand::seq::index;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::envs::{dynamic_dim, route_cost, EnvError, EnvState};
use crate::instancegen::{RoutingInstance, Task};
use crate::matrix::Matrix;
use crate::numerics::{load_checkpoint, save_checkpoint, Graph, NumericsError, ParamStore, Tensor, Var};

/// Guard added to distances before taking logs or inverses.
pub const DIST_EPS: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("policy was built for {expected}, instance is {found}")]
    TaskMismatch { expected: Task, found: Task },
    #[error("{starts} starts requested but only {max} available")]
    TooManyStarts { starts: usize, max: usize },
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Which per-node spatial signal seeds the encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitContext {
    Coords,
    Dist,
    Gated,
}

/// How the pairwise mixing bias is produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasKind {
    /// Learned network over (distance, angle).
    Neural,
    /// `-alpha * ln(N) * d_ij` with a learnable `alpha`.
    Heuristic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub task: Task,
    pub embed_dim: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub ff_dim: usize,
    pub knn_k: usize,
    pub clip_c: f64,
    pub init_context: InitContext,
    pub bias: BiasKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::full(Task::Atsp)
    }
}

impl ModelConfig {
    /// Full-size configuration.
    pub fn full(task: Task) -> Self {
        Self {
            task,
            embed_dim: 128,
            n_heads: 8,
            n_layers: 12,
            ff_dim: 512,
            knn_k: 25,
            clip_c: 10.0,
            init_context: InitContext::Gated,
            bias: BiasKind::Neural,
        }
    }

    /// Small configuration that trains in minutes on one CPU core.
    pub fn desk(task: Task) -> Self {
        Self {
            embed_dim: 32,
            n_heads: 4,
            n_layers: 2,
            ff_dim: 64,
            ..Self::full(task)
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.embed_dim == 0 || self.n_heads == 0 || self.ff_dim == 0 || self.knn_k == 0 {
            return err("dimensions must be positive");
        }
        if self.embed_dim % self.n_heads != 0 {
            return err("embed_dim must be divisible by n_heads");
        }
        if !(self.clip_c.is_finite() && self.clip_c > 0.0) {
            return err("clip_c must be positive");
        }
        Ok(())
    }

    fn head_dim(&self) -> usize {
        self.embed_dim / self.n_heads
    }

    fn context_dim(&self) -> usize {
        self.embed_dim + dynamic_dim(self.task)
    }
}

/// One constructed route.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub actions: Vec<usize>,
    /// Sum of log-probabilities of the decoded (non-forced) steps.
    pub logp_sum: f64,
    /// Negative route cost.
    pub reward: f64,
}

impl Trajectory {
    pub fn cost(&self) -> f64 {
        -self.reward
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeMode {
    Greedy,
    Sample,
}

/// k-NN distance feature mode.
pub enum Knn<'r> {
    /// The `k` smallest distances.
    TopK,
    /// `k` neighbours drawn without replacement with probability
    /// proportional to inverse distance.
    Sample(&'r mut dyn RngCore),
}

/// Per-node k-NN distance features, `N x k`.
///
/// Each row holds the selected off-diagonal distances sorted ascending. When
/// `N - 1 < k` only `N - 1` neighbours exist and the remaining columns are 0.
pub fn knn_distance_features(dist: &Matrix<f64>, k: usize, mode: &mut Knn) -> Tensor {
    let n = dist.n();
    let take = k.min(n.saturating_sub(1));
    let mut out = Tensor::zeros(n, k);
    let mut cand: Vec<(usize, f64)> = Vec::with_capacity(n);
    for i in 0..n {
        cand.clear();
        cand.extend((0..n).filter(|&j| j != i).map(|j| (j, dist.get(i, j))));
        let mut picked: Vec<f64> = match mode {
            Knn::TopK => cand.iter().map(|c| c.1).collect(),
            Knn::Sample(rng) => {
                let weights: Vec<f64> = cand.iter().map(|c| 1.0 / c.1.max(DIST_EPS)).collect();
                index::sample_weighted(rng, cand.len(), |j| weights[j], take)
                    .expect("inverse distances are positive and finite")
                    .into_iter()
                    .map(|j| cand[j].1)
                    .collect()
            }
        };
        picked.sort_by(f64::total_cmp);
        for (c, v) in picked.into_iter().take(take).enumerate() {
            out.set(i, c, v);
        }
    }
    out
}

/// Parameter initialisation helpers.
struct Init<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl Init<'_> {
    fn linear(&mut self, path: &str, fan_in: usize, fan_out: usize, bias: bool) -> Result<(), NumericsError> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let rng = &mut self.rng;
        let w = Tensor::from_fn(fan_in, fan_out, |_, _| rng.gen_range(-bound..bound));
        self.store.add(format!("{path}.w"), w)?;
        if bias {
            let b = Tensor::from_fn(1, fan_out, |_, _| rng.gen_range(-bound..bound));
            self.store.add(format!("{path}.b"), b)?;
        }
        Ok(())
    }

    fn norm(&mut self, path: &str, dim: usize) -> Result<(), NumericsError> {
        self.store.add(format!("{path}.gamma"), Tensor::full(1, dim, 1.0))?;
        self.store.add(format!("{path}.beta"), Tensor::zeros(1, dim))?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Policy {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let e = config.embed_dim;
        let mut params = ParamStore::new();
        let mut init = Init {
            store: &mut params,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        init.linear("init.coord", 2, e, true)?;
        let nf = config.task.node_feature_dim();
        if nf > 0 {
            init.linear("init.node", nf, e, true)?;
        }
        for s in ["row", "col"] {
            if config.init_context != InitContext::Coords {
                init.linear(&format!("init.{s}.dist"), config.knn_k, e, true)?;
            }
            if config.init_context == InitContext::Gated {
                init.linear(&format!("init.{s}.gate1"), 2 * e, e, true)?;
                init.linear(&format!("init.{s}.gate2"), e, e, true)?;
            }
            init.linear(&format!("init.{s}.comb1"), 2 * e, e, true)?;
            init.linear(&format!("init.{s}.comb2"), e, e, true)?;
        }
        match config.bias {
            BiasKind::Neural => {
                init.linear("bias.dist1", 1, e, true)?;
                init.linear("bias.dist2", e, e, true)?;
                init.linear("bias.angle1", 1, e, true)?;
                init.linear("bias.angle2", e, e, true)?;
                init.linear("bias.gate", 2 * e, 1, true)?;
                init.linear("bias.out", e, 1, true)?;
            }
            BiasKind::Heuristic => {
                init.store.add("bias.alpha", Tensor::scalar(1.0))?;
            }
        }
        for l in 0..config.n_layers {
            for s in ["row", "col"] {
                let p = format!("enc.{l}.{s}");
                for proj in ["q", "k", "v"] {
                    init.linear(&format!("{p}.{proj}"), e, e, false)?;
                }
                init.norm(&format!("{p}.norm1"), e)?;
                init.linear(&format!("{p}.ff1"), e, config.ff_dim, true)?;
                init.linear(&format!("{p}.ff2"), config.ff_dim, e, true)?;
                init.norm(&format!("{p}.norm2"), e)?;
            }
        }
        let c = config.context_dim();
        init.linear("dec.query", c, e, false)?;
        init.linear("dec.key", e, e, false)?;
        init.linear("dec.value", e, e, false)?;
        init.linear("dec.out", e, e, true)?;
        init.linear("dec.idt", c, e, false)?;
        init.linear("dec.mlp1", e, config.ff_dim, true)?;
        init.linear("dec.mlp2", config.ff_dim, e, true)?;
        init.linear("dec.logit", e, e, false)?;
        Ok(Self { config, params })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ModelError> {
        let meta = serde_json::to_value(&self.config).expect("config serialises");
        save_checkpoint(path, &self.params, &meta)?;
        Ok(())
    }

    /// Loads a checkpoint and checks it against the parameter layout its
    /// embedded config implies.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        let (params, meta) = load_checkpoint(path)?;
        let config: ModelConfig =
            serde_json::from_value(meta).map_err(|e| ModelError::Config(format!("checkpoint config: {e}")))?;
        let reference = Self::new(config.clone(), 0)?;
        let layout_ok = reference.params.len() == params.len()
            && reference
                .params
                .iter()
                .zip(params.iter())
                .all(|((_, a, ta), (_, b, tb))| a == b && ta.shape() == tb.shape());
        if !layout_ok {
            return Err(ModelError::Config("checkpoint parameters do not match its config".into()));
        }
        Ok(Self { config, params })
    }

    fn check_task(&self, inst: &RoutingInstance) -> Result<(), ModelError> {
        if inst.task != self.config.task {
            return Err(ModelError::TaskMismatch {
                expected: self.config.task,
                found: inst.task,
            });
        }
        Ok(())
    }
}

fn linear(g: &mut Graph, path: &str, x: Var) -> Var {
    let w = g.p(&format!("{path}.w"));
    let b = g.params().id(&format!("{path}.b")).map(|id| g.param(id));
    g.linear(x, w, b)
}

fn mlp(g: &mut Graph, p1: &str, p2: &str, x: Var) -> Var {
    let h = linear(g, p1, x);
    let h = g.relu(h);
    linear(g, p2, h)
}

fn norm(g: &mut Graph, path: &str, x: Var) -> Var {
    let gamma = g.p(&format!("{path}.gamma"));
    let beta = g.p(&format!("{path}.beta"));
    g.instance_norm(x, gamma, beta)
}

/// `g * a + (1 - g) * b` with `g = sigmoid(MLP([a; b]))`, MLP `2E -> E -> E`.
pub fn contextual_gate(g: &mut Graph, prefix: &str, a: Var, b: Var) -> Var {
    assert_eq!(g.value(a).shape(), g.value(b).shape(), "contextual_gate: shape mismatch");
    let both = g.concat_cols(&[a, b]);
    let logits = mlp(g, &format!("{prefix}.gate1"), &format!("{prefix}.gate2"), both);
    let gate = g.sigmoid(logits);
    let ga = g.mul(gate, a);
    let inv = g.one_minus(gate);
    let gb = g.mul(inv, b);
    g.add(ga, gb)
}

/// Row and column embeddings before the mixing layers.
pub fn initial_embed(g: &mut Graph, cfg: &ModelConfig, inst: &RoutingInstance, knn: &mut Knn) -> (Var, Var) {
    let n = inst.n();
    let e = cfg.embed_dim;
    let coords = g.constant(Tensor::from_fn(n, 2, |i, c| inst.coords[i][c]));
    let f_coord = linear(g, "init.coord", coords);
    let f_node = if cfg.task.node_feature_dim() > 0 {
        let rows = inst.node_features();
        let x = g.constant(Tensor::from_rows(&rows));
        linear(g, "init.node", x)
    } else {
        g.constant(Tensor::zeros(n, e))
    };
    let transposed = inst.dist.transpose();
    let mut out = [f_coord; 2];
    for (k, (s, dist)) in [("row", &inst.dist), ("col", &transposed)].into_iter().enumerate() {
        let h = if cfg.init_context == InitContext::Coords {
            f_coord
        } else {
            let feats = g.constant(knn_distance_features(dist, cfg.knn_k, knn));
            let f_dist = linear(g, &format!("init.{s}.dist"), feats);
            match cfg.init_context {
                InitContext::Dist => f_dist,
                _ => contextual_gate(g, &format!("init.{s}"), f_coord, f_dist),
            }
        };
        let joined = g.concat_cols(&[h, f_node]);
        out[k] = mlp(g, &format!("init.{s}.comb1"), &format!("init.{s}.comb2"), joined);
    }
    (out[0], out[1])
}

/// Learned pairwise bias `N x N` from distance and angle matrices.
///
/// Each scalar entry is lifted to `E` dims per signal, the two embeddings are
/// fused by a scalar sigmoid gate and projected back to one value.
pub fn neural_adaptive_bias(g: &mut Graph, dist: &Matrix<f64>, angle: &Matrix<f64>) -> Var {
    let n = dist.n();
    assert_eq!(angle.n(), n, "neural_adaptive_bias: shape mismatch");
    let d = g.constant(Tensor::from_vec(n * n, 1, dist.as_slice().to_vec()));
    let phi = g.constant(Tensor::from_vec(n * n, 1, angle.as_slice().to_vec()));
    let d_emb = mlp(g, "bias.dist1", "bias.dist2", d);
    let p_emb = mlp(g, "bias.angle1", "bias.angle2", phi);
    let both = g.concat_cols(&[d_emb, p_emb]);
    let gl = linear(g, "bias.gate", both);
    let gate = g.sigmoid(gl);
    let hd = g.mul_col(d_emb, gate);
    let inv = g.one_minus(gate);
    let hp = g.mul_col(p_emb, inv);
    let h = g.add(hd, hp);
    let a = linear(g, "bias.out", h);
    g.reshape(a, n, n)
}

/// `-alpha * ln(N) * d_ij`.
pub fn heuristic_bias(g: &mut Graph, dist: &Matrix<f64>) -> Var {
    let n = dist.n();
    let d = g.constant(Tensor::from_vec(n * n, 1, dist.as_slice().to_vec()));
    let alpha = g.p("bias.alpha");
    let a = g.matmul(d, alpha);
    let a = g.scale(a, -(n as f64).ln());
    g.reshape(a, n, n)
}

fn mixing_half(g: &mut Graph, prefix: &str, x: Var, other: Var, bias: Var) -> Var {
    let q = linear(g, &format!("{prefix}.q"), x);
    let k = linear(g, &format!("{prefix}.k"), other);
    let v = linear(g, &format!("{prefix}.v"), other);
    let m = g.aafm(q, k, v, bias);
    let h = g.add(x, m);
    let h = norm(g, &format!("{prefix}.norm1"), h);
    let f = mlp(g, &format!("{prefix}.ff1"), &format!("{prefix}.ff2"), h);
    let h2 = g.add(h, f);
    norm(g, &format!("{prefix}.norm2"), h2)
}

/// Encoder output plus decoder projections that stay fixed during decoding.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub row: Var,
    pub col: Var,
    head_keys: Vec<Var>,
    head_values: Vec<Var>,
    logit_keys: Var,
}

pub fn encode(g: &mut Graph, cfg: &ModelConfig, inst: &RoutingInstance, knn: &mut Knn) -> Encoded {
    let (mut row, mut col) = initial_embed(g, cfg, inst, knn);
    let a = match cfg.bias {
        BiasKind::Neural => neural_adaptive_bias(g, &inst.dist, &inst.angle),
        BiasKind::Heuristic => heuristic_bias(g, &inst.dist),
    };
    let at = g.transpose(a);
    for l in 0..cfg.n_layers {
        let r = mixing_half(g, &format!("enc.{l}.row"), row, col, a);
        let c = mixing_half(g, &format!("enc.{l}.col"), col, row, at);
        row = r;
        col = c;
    }
    let keys = linear(g, "dec.key", col);
    let values = linear(g, "dec.value", col);
    let dh = cfg.head_dim();
    let head_keys = (0..cfg.n_heads).map(|h| g.slice_cols(keys, h * dh, dh)).collect();
    let head_values = (0..cfg.n_heads).map(|h| g.slice_cols(values, h * dh, dh)).collect();
    let logit_keys = linear(g, "dec.logit", col);
    Encoded {
        row,
        col,
        head_keys,
        head_values,
        logit_keys,
    }
}

/// Decoder input for a batch of partial routes over one instance.
pub struct StepContext<'a> {
    /// Last visited node per route.
    pub current: &'a [usize],
    /// `routes x dynamic_dim` state features.
    pub dynamic: Tensor,
    /// Row-major `routes x N` feasibility.
    pub mask: Vec<bool>,
}

/// Log-probabilities `routes x N` of the next node; masked entries are `-inf`.
pub fn decode_step(
    g: &mut Graph,
    cfg: &ModelConfig,
    inst: &RoutingInstance,
    enc: &Encoded,
    ctx: StepContext,
) -> Result<Var, ModelError> {
    let n = inst.n();
    let s = ctx.current.len();
    let last = g.gather_rows(enc.row, ctx.current.to_vec());
    let dynamic = g.constant(ctx.dynamic);
    let hc = g.concat_cols(&[last, dynamic]);
    let q = linear(g, "dec.query", hc);
    let dh = cfg.head_dim();
    let mut heads = Vec::with_capacity(cfg.n_heads);
    for h in 0..cfg.n_heads {
        let qh = g.slice_cols(q, h * dh, dh);
        let sc = g.matmul_nt(qh, enc.head_keys[h]);
        let sc = g.scale(sc, 1.0 / (dh as f64).sqrt());
        let att = g.softmax_masked(sc, ctx.mask.clone())?;
        heads.push(g.matmul(att, enc.head_values[h]));
    }
    let joined = g.concat_cols(&heads);
    let attended = linear(g, "dec.out", joined);
    let idt = linear(g, "dec.idt", hc);
    let h1 = g.add(attended, idt);
    let m = mlp(g, "dec.mlp1", "dec.mlp2", h1);
    let qc = g.add(h1, m);
    let compat = g.matmul_nt(qc, enc.logit_keys);
    let compat = g.scale(compat, 1.0 / (cfg.embed_dim as f64).sqrt());
    let penalty = g.constant(Tensor::from_fn(s, n, |r, j| {
        -(inst.dist.get(ctx.current[r], j) + DIST_EPS).ln()
    }));
    let raw = g.add(compat, penalty);
    let t = g.tanh(raw);
    let scores = g.scale(t, cfg.clip_c);
    Ok(g.log_softmax_masked(scores, ctx.mask)?)
}

/// Per-step record of the log-probabilities of the chosen actions.
#[derive(Debug, Clone)]
pub struct StepRecord {
    /// Routes that were still active at this step.
    pub routes: Vec<usize>,
    /// `routes.len() x 1` log-probabilities.
    pub logp: Var,
}

/// Valid first actions: start nodes for ATSP, first customers otherwise.
pub fn max_starts(inst: &RoutingInstance) -> usize {
    match inst.task {
        Task::Atsp => inst.n(),
        _ => inst.n() - 1,
    }
}

/// The first `n_starts` forced first actions.
pub fn start_actions(inst: &RoutingInstance, n_starts: usize) -> Result<Vec<usize>, ModelError> {
    let max = max_starts(inst);
    if n_starts == 0 || n_starts > max {
        return Err(ModelError::TooManyStarts { starts: n_starts, max });
    }
    let offset = usize::from(inst.task != Task::Atsp);
    Ok((offset..offset + n_starts).collect())
}

/// Environment after the forced first action.
pub fn start_env(inst: &RoutingInstance, first: usize) -> Result<EnvState<'_>, EnvError> {
    match inst.task {
        Task::Atsp => EnvState::reset(inst, first),
        _ => {
            let mut env = EnvState::reset(inst, RoutingInstance::DEPOT)?;
            env.step(first)?;
            Ok(env)
        }
    }
}

/// Decodes one route per first action. `choose(route, step, logp_row)`
/// picks the next node given that route's log-probabilities.
pub fn decode_routes<F>(
    g: &mut Graph,
    cfg: &ModelConfig,
    inst: &RoutingInstance,
    enc: &Encoded,
    firsts: &[usize],
    mut choose: F,
) -> Result<(Vec<Trajectory>, Vec<StepRecord>), ModelError>
where
    F: FnMut(usize, usize, &[f64]) -> usize,
{
    let n = inst.n();
    let d = dynamic_dim(inst.task);
    let mut envs = firsts
        .iter()
        .map(|&f| start_env(inst, f))
        .collect::<Result<Vec<_>, _>>()?;
    let mut logp_sum = vec![0.0; firsts.len()];
    let mut records = Vec::new();
    for step in 0.. {
        let active: Vec<usize> = (0..envs.len()).filter(|&r| !envs[r].done).collect();
        if active.is_empty() {
            break;
        }
        let mut mask = Vec::with_capacity(active.len() * n);
        let mut dynamic = Vec::with_capacity(active.len() * d);
        let mut current = Vec::with_capacity(active.len());
        for &r in &active {
            mask.extend(envs[r].checked_mask()?);
            dynamic.extend(envs[r].dynamic_features());
            current.push(envs[r].current_node);
        }
        let ctx = StepContext {
            current: &current,
            dynamic: Tensor::from_vec(active.len(), d, dynamic),
            mask,
        };
        let logp = decode_step(g, cfg, inst, enc, ctx)?;
        let mut actions = Vec::with_capacity(active.len());
        for (k, &r) in active.iter().enumerate() {
            let row = g.value(logp).row(k);
            let a = choose(r, step, row);
            envs[r].step(a)?;
            logp_sum[r] += row[a];
            actions.push(a);
        }
        let picked = g.pick_cols(logp, actions);
        records.push(StepRecord { routes: active, logp: picked });
    }
    let trajectories = envs
        .into_iter()
        .zip(logp_sum)
        .map(|(env, lp)| {
            let cost = route_cost(inst, &env.actions)?;
            Ok(Trajectory {
                actions: env.actions,
                logp_sum: lp,
                reward: -cost,
            })
        })
        .collect::<Result<Vec<_>, ModelError>>()?;
    Ok((trajectories, records))
}

/// Index of the largest finite entry, lowest index on ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, &v) in row.iter().enumerate() {
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    best
}

/// Draws an index from log-probabilities.
pub fn sample_from_logp(row: &[f64], rng: &mut dyn RngCore) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &lp) in row.iter().enumerate() {
        if lp == f64::NEG_INFINITY {
            continue;
        }
        acc += lp.exp();
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}

/// Multi-start construction with a fresh graph.
///
/// Greedy mode uses top-k neighbour features and argmax decoding, so it is
/// fully deterministic. Sample mode draws neighbours and actions from `rng`.
pub fn rollout(
    policy: &Policy,
    inst: &RoutingInstance,
    n_starts: usize,
    mode: DecodeMode,
    rng: &mut dyn RngCore,
) -> Result<Vec<Trajectory>, ModelError> {
    policy.check_task(inst)?;
    let firsts = start_actions(inst, n_starts)?;
    let mut g = Graph::new(&policy.params);
    match mode {
        DecodeMode::Greedy => {
            let enc = encode(&mut g, &policy.config, inst, &mut Knn::TopK);
            Ok(decode_routes(&mut g, &policy.config, inst, &enc, &firsts, |_, _, row| argmax(row))?.0)
        }
        DecodeMode::Sample => {
            let mut knn_rng = ChaCha8Rng::seed_from_u64(rng.next_u64());
            let enc = encode(&mut g, &policy.config, inst, &mut Knn::Sample(&mut knn_rng));
            Ok(decode_routes(&mut g, &policy.config, inst, &enc, &firsts, |_, _, row| sample_from_logp(row, rng))?.0)
        }
    }
}

/// Mean per-step log-probability of a fixed route, as a differentiable scalar.
pub fn route_log_prob(g: &mut Graph, cfg: &ModelConfig, inst: &RoutingInstance, actions: &[usize]) -> Result<Var, ModelError> {
    let enc = encode(g, cfg, inst, &mut Knn::TopK);
    let (_, records) = decode_routes(g, cfg, inst, &enc, &actions[..1], |_, step, _| actions[step + 1])?;
    let parts: Vec<Var> = records.iter().map(|r| r.logp).collect();
    let all = g.concat_cols(&parts);
    Ok(g.mean(all))
}
