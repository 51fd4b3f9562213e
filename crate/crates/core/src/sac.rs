//! Context-conditioned soft actor-critic over grid graphs.

use crate::env::{DispatchState, Policy, Transition};
use crate::grid::GridGraph;
use crate::matrix::Matrix;
use crate::nn::{
    clip_global_norm, global_norm, normalized_adjacency, Activation, Adam, AdamConfig, Bound, GaussianHead, GraphBatch,
    GraphEncoder, Mlp, NnError, ParamSet, Tape, Var,
};
use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::rc::Rc;
use thiserror::Error;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

#[derive(Debug, Error)]
pub enum SacError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("non-finite output from {0}")]
    NonFinite(String),
    #[error("replay buffer holds {have} transitions, batch needs {need}")]
    Underfilled { have: usize, need: usize },
    #[error("latent vector has {got} entries, network expects {expected}")]
    LatentShape { expected: usize, got: usize },
    #[error("invalid config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SacConfig {
    /// Discount in (0, 1).
    pub gamma: f64,
    /// Entropy weight, > 0.
    pub alpha: f64,
    /// Fraction of the online critic mixed into the target per environment round, in (0, 1].
    pub target_rate: f64,
    /// Environment rounds between target updates; 0 disables them.
    pub target_period: u64,
    pub batch_size: usize,
    pub critic_lr: f64,
    pub actor_lr: f64,
    pub gcn_hidden: usize,
    pub hidden: usize,
    pub buffer_capacity: usize,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
}

impl Default for SacConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            alpha: 0.2,
            target_rate: 0.005,
            target_period: 1000,
            batch_size: 64,
            critic_lr: 3e-4,
            actor_lr: 3e-4,
            gcn_hidden: 16,
            hidden: 64,
            buffer_capacity: 100_000,
            grad_clip: 10.0,
        }
    }
}

impl SacConfig {
    pub fn validate(&self) -> Result<(), SacError> {
        let bad = |m: &str| Err(SacError::Config(m.into()));
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad("gamma must lie in (0, 1)");
        }
        if !(self.alpha >= 0.0) {
            return bad("alpha must be nonnegative");
        }
        if !(self.target_rate > 0.0 && self.target_rate <= 1.0) {
            return bad("target_rate must lie in (0, 1]");
        }
        if self.batch_size == 0 || self.buffer_capacity < self.batch_size {
            return bad("batch_size must be positive and fit in the buffer");
        }
        if !(self.critic_lr >= 0.0 && self.actor_lr >= 0.0) {
            return bad("learning rates must be nonnegative");
        }
        if self.gcn_hidden == 0 || self.hidden == 0 {
            return bad("layer widths must be positive");
        }
        Ok(())
    }

    /// Mixing weight of one target update: the per-round rate compounded over a period.
    pub fn target_mix(&self) -> f64 {
        1.0 - (1.0 - self.target_rate).powi(self.target_period.min(i32::MAX as u64) as i32)
    }
}

/// Stacked node features and normalized adjacency blocks for a batch of graphs.
#[derive(Debug, Clone)]
pub struct GraphInputs {
    pub x: Matrix,
    pub graphs: Rc<GraphBatch>,
}

impl GraphInputs {
    pub fn new(gs: &[&GridGraph]) -> Self {
        assert!(!gs.is_empty(), "empty graph batch");
        let n = gs[0].n_nodes();
        let f = gs[0].n_features();
        let mut data = Vec::with_capacity(gs.len() * n * f);
        let mut blocks = Vec::with_capacity(gs.len());
        for g in gs {
            assert_eq!((g.n_nodes(), g.n_features()), (n, f), "graphs in a batch must share a shape");
            data.extend_from_slice(g.eig.as_slice());
            blocks.push(normalized_adjacency(&g.adj, None));
        }
        Self { x: Matrix::from_vec(gs.len() * n, f, data), graphs: Rc::new(GraphBatch::new(n, blocks)) }
    }

    pub fn len(&self) -> usize {
        self.graphs.n_graphs()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Repeats a `1×d` row `n` times.
pub fn broadcast_row(tape: &mut Tape, row: Var, n: usize) -> Var {
    tape.gather_rows(row, &vec![0; n])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Actor {
    pub encoder: GraphEncoder,
    pub trunk: Mlp,
    pub head: GaussianHead,
    pub act_dim: usize,
    pub z_dim: usize,
}

/// A reparameterized squashed sample: `a = tanh(μ + σε)` and its log-density.
pub struct ActorSample {
    pub action: Var,
    pub log_prob: Var,
    pub log_std: Var,
}

impl Actor {
    pub fn new(
        params: &mut ParamSet,
        n_features: usize,
        act_dim: usize,
        z_dim: usize,
        cfg: &SacConfig,
        rng: &mut impl Rng,
    ) -> Self {
        let encoder = GraphEncoder::new(params, "actor.enc", n_features, cfg.gcn_hidden, rng);
        let trunk = Mlp::new(
            params,
            "actor.trunk",
            &[encoder.out_dim + z_dim, cfg.hidden, cfg.hidden],
            Activation::Relu,
            Activation::Relu,
            rng,
        );
        let head = GaussianHead::new(params, "actor.head", cfg.hidden, act_dim, rng);
        head.mean.shrink(params, 0.1);
        head.log_std.shrink(params, 0.1);
        Self { encoder, trunk, head, act_dim, z_dim }
    }

    /// `(μ, log σ)` of the pre-squash Gaussian, one row per graph.
    pub fn dist(&self, tape: &mut Tape, bound: &Bound, inp: &GraphInputs, z: Option<Var>) -> (Var, Var) {
        let x = tape.constant(inp.x.clone());
        let h = self.encoder.forward(tape, bound, x, &inp.graphs);
        let h = match z {
            Some(z) => tape.concat_cols(&[h, z]),
            None => h,
        };
        let h = self.trunk.forward(tape, bound, h);
        self.head.forward(tape, bound, h)
    }

    /// Squashed sample with noise `eps` (`B × act_dim`); zero noise gives the deterministic action.
    pub fn sample(&self, tape: &mut Tape, bound: &Bound, inp: &GraphInputs, z: Option<Var>, eps: &Matrix) -> ActorSample {
        let (mu, ls) = self.dist(tape, bound, inp, z);
        let sigma = tape.exp(ls);
        let e = tape.constant(eps.clone());
        let se = tape.mul(sigma, e);
        let u = tape.add(mu, se);
        let action = tape.tanh(u);
        // ln(1 − tanh²u) = 2(ln 2 − u − softplus(−2u))
        let m2u = tape.scale(u, -2.0);
        let sp = tape.softplus(m2u);
        let spu = tape.add(u, sp);
        let jac = tape.scale(spu, 2.0);
        let jac = tape.add_scalar(jac, -2.0 * std::f64::consts::LN_2);
        let base = eps.map(|x| -0.5 * x * x - HALF_LN_2PI);
        let base = tape.constant(base);
        let el = tape.sub(base, ls);
        let el = tape.add(el, jac);
        let log_prob = tape.sum_cols(el);
        ActorSample { action, log_prob, log_std: ls }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Critic {
    pub encoder: GraphEncoder,
    pub net: Mlp,
}

impl Critic {
    fn new(params: &mut ParamSet, name: &str, n_features: usize, act_dim: usize, z_dim: usize, cfg: &SacConfig, rng: &mut impl Rng) -> Self {
        let encoder = GraphEncoder::new(params, &format!("{name}.enc"), n_features, cfg.gcn_hidden, rng);
        let net = Mlp::new(
            params,
            &format!("{name}.net"),
            &[encoder.out_dim + act_dim + z_dim, cfg.hidden, cfg.hidden, 1],
            Activation::Relu,
            Activation::Identity,
            rng,
        );
        Self { encoder, net }
    }

    /// `Q(s, a, z)` as a `B×1` column.
    pub fn q(&self, tape: &mut Tape, bound: &Bound, inp: &GraphInputs, action: Var, z: Option<Var>) -> Var {
        let x = tape.constant(inp.x.clone());
        let h = self.encoder.forward(tape, bound, x, &inp.graphs);
        let h = match z {
            Some(z) => tape.concat_cols(&[h, action, z]),
            None => tape.concat_cols(&[h, action]),
        };
        self.net.forward(tape, bound, h)
    }
}

/// Two independent Q networks sharing one parameter set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwinCritic {
    pub q: [Critic; 2],
}

impl TwinCritic {
    pub fn new(params: &mut ParamSet, n_features: usize, act_dim: usize, z_dim: usize, cfg: &SacConfig, rng: &mut impl Rng) -> Self {
        let a = Critic::new(params, "q0", n_features, act_dim, z_dim, cfg, rng);
        let b = Critic::new(params, "q1", n_features, act_dim, z_dim, cfg, rng);
        Self { q: [a, b] }
    }

    pub fn both(&self, tape: &mut Tape, bound: &Bound, inp: &GraphInputs, action: Var, z: Option<Var>) -> (Var, Var) {
        let a = self.q[0].q(tape, bound, inp, action, z);
        let b = self.q[1].q(tape, bound, inp, action, z);
        (a, b)
    }

    pub fn min(&self, tape: &mut Tape, bound: &Bound, inp: &GraphInputs, action: Var, z: Option<Var>) -> Var {
        let (a, b) = self.both(tape, bound, inp, action, z);
        tape.min(a, b)
    }
}

/// One replay entry: squashed action, scaled reward and the graphs on either side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Experience {
    pub graph: GridGraph,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_graph: GridGraph,
    pub done: bool,
    pub task: usize,
}

impl Experience {
    pub fn from_transition(tr: &Transition, task: usize) -> Self {
        Self {
            graph: tr.graph.clone(),
            action: tr.raw.clone(),
            reward: tr.reward,
            next_graph: tr.next_graph.clone(),
            done: tr.done,
            task,
        }
    }
}

/// Ring buffer with uniform sampling.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Experience>,
    next: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self { capacity, items: Vec::new(), next: 0 }
    }

    pub fn push(&mut self, e: Experience) {
        if self.items.len() < self.capacity {
            self.items.push(e);
        } else {
            self.items[self.next] = e;
        }
        self.next = (self.next + 1) % self.capacity;
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// `n` distinct entries chosen uniformly.
    pub fn sample(&self, n: usize, rng: &mut impl Rng) -> Result<Vec<&Experience>, SacError> {
        if self.items.len() < n {
            return Err(SacError::Underfilled { have: self.items.len(), need: n });
        }
        Ok(index::sample(rng, self.items.len(), n).into_iter().map(|i| &self.items[i]).collect())
    }
}

#[derive(Debug, Clone)]
pub struct SacBatch {
    pub inputs: GraphInputs,
    pub next_inputs: GraphInputs,
    pub actions: Matrix,
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
}

impl SacBatch {
    pub fn new(items: &[&Experience]) -> Self {
        let g: Vec<&GridGraph> = items.iter().map(|e| &e.graph).collect();
        let ng: Vec<&GridGraph> = items.iter().map(|e| &e.next_graph).collect();
        let rows: Vec<Vec<f64>> = items.iter().map(|e| e.action.clone()).collect();
        Self {
            inputs: GraphInputs::new(&g),
            next_inputs: GraphInputs::new(&ng),
            actions: Matrix::from_rows(&rows),
            rewards: items.iter().map(|e| e.reward).collect(),
            dones: items.iter().map(|e| e.done).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActMode {
    Stochastic,
    Deterministic,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SacMetrics {
    pub critic_loss: f64,
    pub actor_loss: f64,
    /// `−mean log π` over the batch.
    pub entropy: f64,
    pub critic_grad_norm: f64,
    pub actor_grad_norm: f64,
}

fn gaussian(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Matrix::from_vec(rows, cols, data)
}

pub struct SacAgent {
    pub config: SacConfig,
    pub actor: Actor,
    pub actor_params: ParamSet,
    pub critic: TwinCritic,
    pub critic_params: ParamSet,
    pub target_params: ParamSet,
    actor_opt: Adam,
    critic_opt: Adam,
    rounds: u64,
}

impl SacAgent {
    pub fn new(n_features: usize, act_dim: usize, z_dim: usize, config: SacConfig, rng: &mut impl Rng) -> Result<Self, SacError> {
        config.validate()?;
        let mut actor_params = ParamSet::new();
        let actor = Actor::new(&mut actor_params, n_features, act_dim, z_dim, &config, rng);
        let mut critic_params = ParamSet::new();
        let critic = TwinCritic::new(&mut critic_params, n_features, act_dim, z_dim, &config, rng);
        let target_params = critic_params.clone();
        let actor_opt = Adam::new(AdamConfig::with_lr(config.actor_lr), &actor_params);
        let critic_opt = Adam::new(AdamConfig::with_lr(config.critic_lr), &critic_params);
        Ok(Self { config, actor, actor_params, critic, critic_params, target_params, actor_opt, critic_opt, rounds: 0 })
    }

    pub fn z_dim(&self) -> usize {
        self.actor.z_dim
    }

    pub fn act_dim(&self) -> usize {
        self.actor.act_dim
    }

    fn z_var(&self, tape: &mut Tape, z: &Matrix) -> Result<Option<Var>, SacError> {
        if z.cols() != self.z_dim() {
            return Err(SacError::LatentShape { expected: self.z_dim(), got: z.cols() });
        }
        Ok((self.z_dim() > 0).then(|| tape.constant(z.clone())))
    }

    /// Squashed action in `(−1, 1)^dim` and its log-probability.
    pub fn act(&self, graph: &GridGraph, z: &[f64], mode: ActMode, rng: &mut impl Rng) -> Result<(Vec<f64>, f64), SacError> {
        let mut tape = Tape::new();
        let bound = self.actor_params.bind_frozen(&mut tape);
        let inp = GraphInputs::new(&[graph]);
        let zv = self.z_var(&mut tape, &Matrix::row_vector(z))?;
        let eps = match mode {
            ActMode::Stochastic => gaussian(1, self.act_dim(), rng),
            ActMode::Deterministic => Matrix::zeros(1, self.act_dim()),
        };
        let s = self.actor.sample(&mut tape, &bound, &inp, zv, &eps);
        let a = tape.value(s.action).as_slice().to_vec();
        let lp = tape.scalar(s.log_prob);
        if !a.iter().all(|x| x.is_finite()) || !lp.is_finite() {
            let (mu, ls) = self.actor.dist(&mut tape, &bound, &inp, zv);
            let stage = if !tape.value(mu).is_finite() { "actor mean head" } else if !tape.value(ls).is_finite() { "actor log-std head" } else { "actor squashing" };
            return Err(SacError::NonFinite(stage.into()));
        }
        // keep strictly inside the open interval when tanh rounds to ±1
        let a = a.into_iter().map(|x| x.clamp(-1.0 + 1e-12, 1.0 - 1e-12)).collect();
        Ok((a, lp))
    }

    /// Soft Bellman targets `r + γ(1−d)[min Q̄(s′, a′, z′) − α ln π(a′|s′, z′)]` with `a′` drawn using `eps`.
    pub fn targets(&self, batch: &SacBatch, z_next: &Matrix, eps: &Matrix) -> Result<Vec<f64>, SacError> {
        let mut tape = Tape::new();
        let ab = self.actor_params.bind_frozen(&mut tape);
        let tb = self.target_params.bind_frozen(&mut tape);
        let zv = self.z_var(&mut tape, z_next)?;
        let s = self.actor.sample(&mut tape, &ab, &batch.next_inputs, zv, eps);
        let q = self.critic.min(&mut tape, &tb, &batch.next_inputs, s.action, zv);
        let (q, lp) = (tape.value(q), tape.value(s.log_prob));
        let y: Vec<f64> = (0..batch.len())
            .map(|i| {
                let cont = if batch.dones[i] { 0.0 } else { 1.0 };
                batch.rewards[i] + self.config.gamma * cont * (q[(i, 0)] - self.config.alpha * lp[(i, 0)])
            })
            .collect();
        if y.iter().any(|v| !v.is_finite()) {
            return Err(SacError::NonFinite("target critic".into()));
        }
        Ok(y)
    }

    /// `J_Q = mean_i ½·½[(Q₁ − y)² + (Q₂ − y)²]`.
    pub fn critic_loss(&self, tape: &mut Tape, critic: &Bound, batch: &SacBatch, z: Option<Var>, y: &[f64]) -> Var {
        let a = tape.constant(batch.actions.clone());
        let (q1, q2) = self.critic.both(tape, critic, &batch.inputs, a, z);
        let y = tape.constant(Matrix::column_vector(y));
        let d1 = tape.sub(q1, y);
        let d2 = tape.sub(q2, y);
        let s1 = tape.square(d1);
        let s2 = tape.square(d2);
        let s = tape.add(s1, s2);
        let m = tape.mean(s);
        tape.scale(m, 0.25)
    }

    /// `J_π = mean[α ln π(a|s, z) − min Q(s, a, z)]` with `a` reparameterized by `eps`.
    /// Bind the critic frozen so only the actor receives gradients.
    pub fn actor_loss(
        &self,
        tape: &mut Tape,
        actor: &Bound,
        critic: &Bound,
        inp: &GraphInputs,
        z: Option<Var>,
        eps: &Matrix,
    ) -> (Var, ActorSample) {
        let s = self.actor.sample(tape, actor, inp, z, eps);
        let q = self.critic.min(tape, critic, inp, s.action, z);
        let alp = tape.scale(s.log_prob, self.config.alpha);
        let d = tape.sub(alp, q);
        (tape.mean(d), s)
    }

    pub fn update_critic(&mut self, mut grads: Vec<Matrix>) -> Result<f64, SacError> {
        let norm = self.clip(&mut grads);
        self.critic_opt.step(&mut self.critic_params, &grads)?;
        Ok(norm)
    }

    pub fn update_actor(&mut self, mut grads: Vec<Matrix>) -> Result<f64, SacError> {
        let norm = self.clip(&mut grads);
        self.actor_opt.step(&mut self.actor_params, &grads)?;
        Ok(norm)
    }

    fn clip(&self, grads: &mut [Matrix]) -> f64 {
        if self.config.grad_clip > 0.0 {
            clip_global_norm(grads, self.config.grad_clip)
        } else {
            global_norm(grads)
        }
    }

    /// Counts environment rounds and applies every target update that fell due.
    pub fn observe_rounds(&mut self, n: u64) -> Result<usize, SacError> {
        if self.config.target_period == 0 {
            return Ok(0);
        }
        let before = self.rounds / self.config.target_period;
        self.rounds += n;
        let due = (self.rounds / self.config.target_period - before) as usize;
        let mix = self.config.target_mix();
        for _ in 0..due {
            self.target_params.soft_update_from(&self.critic_params, mix)?;
        }
        Ok(due)
    }

    pub fn rounds(&self) -> u64 {
        self.rounds
    }

    /// One critic update then one actor update on `batch` with a fixed latent per row.
    pub fn train_step(&mut self, batch: &SacBatch, z: &Matrix, rng: &mut impl Rng) -> Result<SacMetrics, SacError> {
        let (b, ad) = (batch.len(), self.act_dim());
        let y = self.targets(batch, z, &gaussian(b, ad, rng))?;

        let mut tape = Tape::new();
        let cb = self.critic_params.bind(&mut tape);
        let zv = self.z_var(&mut tape, z)?;
        let jq = self.critic_loss(&mut tape, &cb, batch, zv, &y);
        let critic_loss = tape.scalar(jq);
        let grads = cb.grads(&tape.backward(jq), &self.critic_params);
        let critic_grad_norm = self.update_critic(grads)?;

        let mut tape = Tape::new();
        let ab = self.actor_params.bind(&mut tape);
        let cb = self.critic_params.bind_frozen(&mut tape);
        let zv = self.z_var(&mut tape, z)?;
        let (jp, s) = self.actor_loss(&mut tape, &ab, &cb, &batch.inputs, zv, &gaussian(b, ad, rng));
        let actor_loss = tape.scalar(jp);
        let entropy = -tape.value(s.log_prob).sum() / b as f64;
        let grads = ab.grads(&tape.backward(jp), &self.actor_params);
        let actor_grad_norm = self.update_actor(grads)?;
        if !(critic_loss.is_finite() && actor_loss.is_finite()) {
            return Err(SacError::NonFinite("loss".into()));
        }
        Ok(SacMetrics { critic_loss, actor_loss, entropy, critic_grad_norm, actor_grad_norm })
    }
}

/// Adapter that lets an agent drive [`crate::env::rollout`].
pub struct AgentPolicy<'a> {
    pub agent: &'a SacAgent,
    pub mode: ActMode,
    pub rng: ChaCha8Rng,
    pub error: Option<SacError>,
}

impl<'a> AgentPolicy<'a> {
    pub fn new(agent: &'a SacAgent, mode: ActMode, rng: ChaCha8Rng) -> Self {
        Self { agent, mode, rng, error: None }
    }
}

impl Policy for AgentPolicy<'_> {
    fn act(&mut self, _state: &DispatchState, graph: &GridGraph, z: &[f64]) -> Vec<f64> {
        match self.agent.act(graph, z, self.mode, &mut self.rng) {
            Ok((a, _)) => a,
            Err(e) => {
                self.error.get_or_insert(e);
                vec![0.0; self.agent.act_dim()]
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{state_graph, reset, N_FEATURES};
    use crate::grid::three_bus_ring;
    use crate::nn::grad_check;
    use crate::scenario::{expected_sample, make_demo_families};
    use rand::SeedableRng;

    fn small_cfg() -> SacConfig {
        SacConfig { gcn_hidden: 4, hidden: 6, batch_size: 4, ..SacConfig::default() }
    }

    fn random_graph(rng: &mut ChaCha8Rng) -> GridGraph {
        let n = 3;
        let mut adj = Matrix::zeros(n, n);
        for (i, j) in [(0, 1), (1, 2), (0, 2)] {
            if rng.gen_bool(0.8) {
                adj[(i, j)] = 1.0;
                adj[(j, i)] = 1.0;
            }
        }
        let eig = Matrix::from_vec(n, N_FEATURES, (0..n * N_FEATURES).map(|_| rng.gen_range(-1.0..1.0)).collect());
        GridGraph { adj, eig }
    }

    fn random_batch(rng: &mut ChaCha8Rng, b: usize, ad: usize) -> SacBatch {
        let items: Vec<Experience> = (0..b)
            .map(|i| Experience {
                graph: random_graph(rng),
                action: (0..ad).map(|_| rng.gen_range(-0.9..0.9)).collect(),
                reward: rng.gen_range(-2.0..0.0),
                next_graph: random_graph(rng),
                done: i == b - 1,
                task: 0,
            })
            .collect();
        SacBatch::new(&items.iter().collect::<Vec<_>>())
    }

    /// Final layer weights zero, bias `c`, so the net outputs `c` everywhere.
    fn make_constant(params: &mut ParamSet, critic: &TwinCritic, c: f64) {
        for q in &critic.q {
            let last = q.net.last();
            params.get_mut(last.w).as_mut_slice().iter_mut().for_each(|x| *x = 0.0);
            params.get_mut(last.b).as_mut_slice().iter_mut().for_each(|x| *x = c);
        }
    }

    #[test]
    fn deterministic_zero_head_gives_zero_action() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut agent = SacAgent::new(N_FEATURES, 3, 2, small_cfg(), &mut rng).unwrap();
        let m = agent.actor.head.mean.clone();
        agent.actor_params.get_mut(m.w).as_mut_slice().iter_mut().for_each(|x| *x = 0.0);
        agent.actor_params.get_mut(m.b).as_mut_slice().iter_mut().for_each(|x| *x = 0.0);
        let g = random_graph(&mut rng);
        let (a, _) = agent.act(&g, &[0.3, -0.1], ActMode::Deterministic, &mut rng).unwrap();
        assert_eq!(a, vec![0.0; 3]);
        let r1 = agent.act(&g, &[0.3, -0.1], ActMode::Stochastic, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let r2 = agent.act(&g, &[0.3, -0.1], ActMode::Stochastic, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(r1, r2);
        assert!(r1.0.iter().all(|x| x.abs() < 1.0));
        assert!(matches!(agent.act(&g, &[0.0], ActMode::Deterministic, &mut rng), Err(SacError::LatentShape { .. })));
    }

    /// Squashed density of a 1-d Gaussian evaluated independently of the tape.
    fn squashed_density(a: f64, mu: f64, sigma: f64) -> f64 {
        let u = a.atanh();
        let g = (-(u - mu).powi(2) / (2.0 * sigma * sigma)).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt());
        g / (1.0 - a * a)
    }

    fn one_dim_actor(rng: &mut ChaCha8Rng) -> (SacAgent, GridGraph) {
        let agent = SacAgent::new(N_FEATURES, 1, 0, small_cfg(), rng).unwrap();
        (agent, random_graph(rng))
    }

    fn mu_sigma(agent: &SacAgent, g: &GridGraph) -> (f64, f64) {
        let mut tape = Tape::new();
        let b = agent.actor_params.bind_frozen(&mut tape);
        let (mu, ls) = agent.actor.dist(&mut tape, &b, &GraphInputs::new(&[g]), None);
        (tape.scalar(mu), tape.scalar(ls).exp())
    }

    #[test]
    fn squashed_log_prob_matches_density_and_normalizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (agent, g) = one_dim_actor(&mut rng);
        let (mu, sigma) = mu_sigma(&agent, &g);
        for _ in 0..20 {
            let (a, lp) = agent.act(&g, &[], ActMode::Stochastic, &mut rng).unwrap();
            let d = squashed_density(a[0], mu, sigma);
            assert!((lp - d.ln()).abs() < 1e-8, "{lp} vs {}", d.ln());
        }
        // trapezoid over a fine grid in atanh space to resolve the endpoints
        let n = 200_000;
        let (lo, hi) = (mu - 12.0 * sigma, mu + 12.0 * sigma);
        let h = (hi - lo) / n as f64;
        let mut total = 0.0;
        for k in 0..=n {
            let u = lo + k as f64 * h;
            let a = u.tanh();
            let w = if k == 0 || k == n { 0.5 } else { 1.0 };
            total += w * squashed_density(a, mu, sigma) * (1.0 - a * a) * h;
        }
        assert!((total - 1.0).abs() < 1e-3, "{total}");
    }

    #[test]
    fn monte_carlo_entropy_matches_quadrature() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (agent, g) = one_dim_actor(&mut rng);
        let (mu, sigma) = mu_sigma(&agent, &g);
        let n = 100_000;
        let mut tape = Tape::new();
        let b = agent.actor_params.bind_frozen(&mut tape);
        let gs: Vec<&GridGraph> = vec![&g; n];
        let s = agent.actor.sample(&mut tape, &b, &GraphInputs::new(&gs), None, &gaussian(n, 1, &mut rng));
        let mc = -tape.value(s.log_prob).sum() / n as f64;
        // H = −∫ p ln p, integrated in u = atanh(a)
        let m = 200_000;
        let (lo, hi) = (mu - 12.0 * sigma, mu + 12.0 * sigma);
        let h = (hi - lo) / m as f64;
        let mut ent = 0.0;
        for k in 0..=m {
            let u = lo + k as f64 * h;
            let a = u.tanh();
            let p = squashed_density(a, mu, sigma);
            let w = if k == 0 || k == m { 0.5 } else { 1.0 };
            if p > 0.0 && a.abs() < 1.0 {
                ent -= w * p * p.ln() * (1.0 - a * a) * h;
            }
        }
        assert!((mc - ent).abs() < 0.01 * ent.abs().max(0.1), "{mc} vs {ent}");
    }

    #[test]
    fn degenerate_discount_targets_are_rewards() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = SacConfig { gamma: 1e-300, alpha: 0.0, ..small_cfg() };
        let mut agent = SacAgent::new(N_FEATURES, 2, 1, cfg, &mut rng).unwrap();
        let batch = random_batch(&mut rng, 5, 2);
        let z = Matrix::zeros(5, 1);
        let y = agent.targets(&batch, &z, &gaussian(5, 2, &mut rng)).unwrap();
        for (a, b) in y.iter().zip(&batch.rewards) {
            assert!((a - b).abs() < 1e-12);
        }
        let critic = agent.critic.clone();
        make_constant(&mut agent.critic_params, &critic, 0.0);
        let mut tape = Tape::new();
        let cb = agent.critic_params.bind(&mut tape);
        let zv = agent.z_var(&mut tape, &z).unwrap();
        let j = agent.critic_loss(&mut tape, &cb, &batch, zv, &y);
        let expect = batch.rewards.iter().map(|r| 0.5 * r * r).sum::<f64>() / 5.0;
        assert!((tape.scalar(j) - expect).abs() < 1e-12);
    }

    #[test]
    fn constant_nets_give_hand_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (c, gamma) = (1.7, 0.9);
        let cfg = SacConfig { gamma, alpha: 0.0, ..small_cfg() };
        let mut agent = SacAgent::new(N_FEATURES, 2, 0, cfg, &mut rng).unwrap();
        let critic = agent.critic.clone();
        make_constant(&mut agent.critic_params, &critic, c);
        make_constant(&mut agent.target_params, &critic, c);
        let mut batch = random_batch(&mut rng, 1, 2);
        batch.rewards[0] = 0.0;
        batch.dones[0] = false;
        let z = Matrix::zeros(1, 0);
        let y = agent.targets(&batch, &z, &gaussian(1, 2, &mut rng)).unwrap();
        let mut tape = Tape::new();
        let cb = agent.critic_params.bind(&mut tape);
        let j = agent.critic_loss(&mut tape, &cb, &batch, None, &y);
        let expect = 0.5 * (c - gamma * c).powi(2);
        assert!((tape.scalar(j) - expect).abs() < 1e-12);
    }

    #[test]
    fn losses_pass_gradient_checks() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let agent = SacAgent::new(N_FEATURES, 2, 2, small_cfg(), &mut rng).unwrap();
        let batch = random_batch(&mut rng, 3, 2);
        let z = Matrix::from_vec(3, 2, (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let y = agent.targets(&batch, &z, &gaussian(3, 2, &mut rng)).unwrap();
        let err = grad_check(
            &agent.critic_params,
            |tape, b| {
                let zv = tape.constant(z.clone());
                agent.critic_loss(tape, b, &batch, Some(zv), &y)
            },
            1e-6,
        );
        assert!(err < 1e-4, "critic {err}");
        let eps = gaussian(3, 2, &mut rng);
        let critic_params = agent.critic_params.clone();
        let err = grad_check(
            &agent.actor_params,
            |tape, b| {
                let cb = critic_params.bind_frozen(tape);
                let zv = tape.constant(z.clone());
                agent.actor_loss(tape, b, &cb, &batch.inputs, Some(zv), &eps).0
            },
            1e-6,
        );
        assert!(err < 1e-4, "actor {err}");
    }

    #[test]
    fn swapping_twins_leaves_losses_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let agent = SacAgent::new(N_FEATURES, 2, 0, small_cfg(), &mut rng).unwrap();
        let batch = random_batch(&mut rng, 4, 2);
        let y: Vec<f64> = batch.rewards.clone();
        let mut swapped = agent.critic_params.clone();
        let names = agent.critic_params.names().to_vec();
        for (k, name) in names.iter().enumerate() {
            let other = if let Some(rest) = name.strip_prefix("q0") { format!("q1{rest}") } else { format!("q0{}", &name[2..]) };
            let j = names.iter().position(|n| *n == other).unwrap();
            *swapped.get_mut(crate::nn::ParamId::from_index(k)) = agent.critic_params.values()[j].clone();
        }
        let eval = |p: &ParamSet| {
            let mut tape = Tape::new();
            let cb = p.bind_frozen(&mut tape);
            let ab = agent.actor_params.bind_frozen(&mut tape);
            let jq = agent.critic_loss(&mut tape, &cb, &batch, None, &y);
            let eps = Matrix::zeros(4, 2);
            let (jp, _) = agent.actor_loss(&mut tape, &ab, &cb, &batch.inputs, None, &eps);
            (tape.scalar(jq), tape.scalar(jp))
        };
        assert_eq!(eval(&agent.critic_params), eval(&swapped));
    }

    #[test]
    fn soft_update_directions() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cfg = SacConfig { target_rate: 1.0, target_period: 3, ..small_cfg() };
        let mut agent = SacAgent::new(N_FEATURES, 2, 0, cfg, &mut rng).unwrap();
        agent.critic_params.get_mut(crate::nn::ParamId::from_index(0)).as_mut_slice()[0] += 1.0;
        assert_eq!(agent.observe_rounds(2).unwrap(), 0);
        assert_ne!(agent.target_params.checksum(), agent.critic_params.checksum());
        assert_eq!(agent.observe_rounds(1).unwrap(), 1);
        assert_eq!(agent.target_params.checksum(), agent.critic_params.checksum());

        let mut t = ParamSet::new();
        t.push("w", Matrix::filled(1, 1, 0.0));
        let mut o = ParamSet::new();
        o.push("w", Matrix::filled(1, 1, 2.0));
        t.soft_update_from(&o, 0.5).unwrap();
        assert_eq!(t.values()[0][(0, 0)], 1.0);
        t.soft_update_from(&o, 0.0).unwrap();
        assert_eq!(t.values()[0][(0, 0)], 1.0);

        let cfg = SacConfig { target_period: 0, ..small_cfg() };
        let mut agent = SacAgent::new(N_FEATURES, 2, 0, cfg, &mut rng).unwrap();
        let before = agent.target_params.checksum();
        agent.critic_params.get_mut(crate::nn::ParamId::from_index(0)).as_mut_slice()[0] += 1.0;
        agent.observe_rounds(1_000_000).unwrap();
        assert_eq!(agent.target_params.checksum(), before);
    }

    #[test]
    fn train_step_is_deterministic() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(8);
            let mut agent = SacAgent::new(N_FEATURES, 2, 1, small_cfg(), &mut rng).unwrap();
            let batch = random_batch(&mut rng, 4, 2);
            let z = Matrix::zeros(4, 1);
            (0..3).map(|_| agent.train_step(&batch, &z, &mut rng).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn critic_loss_decreases_on_frozen_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cfg = SacConfig { critic_lr: 1e-3, ..small_cfg() };
        let mut agent = SacAgent::new(N_FEATURES, 2, 0, cfg, &mut rng).unwrap();
        let batch = random_batch(&mut rng, 16, 2);
        let y = agent.targets(&batch, &Matrix::zeros(16, 0), &gaussian(16, 2, &mut rng)).unwrap();
        let mut losses = Vec::new();
        for _ in 0..201 {
            let mut tape = Tape::new();
            let cb = agent.critic_params.bind(&mut tape);
            let j = agent.critic_loss(&mut tape, &cb, &batch, None, &y);
            losses.push(tape.scalar(j));
            let g = cb.grads(&tape.backward(j), &agent.critic_params);
            agent.update_critic(g).unwrap();
        }
        let down = losses.windows(2).filter(|w| w[1] < w[0]).count();
        assert!(down as f64 >= 0.9 * 200.0, "{down}/200");
    }

    #[test]
    fn entropy_rises_against_zero_critic() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let cfg = SacConfig { actor_lr: 1e-2, alpha: 1.0, ..small_cfg() };
        let mut agent = SacAgent::new(N_FEATURES, 2, 0, cfg, &mut rng).unwrap();
        let critic = agent.critic.clone();
        make_constant(&mut agent.critic_params, &critic, 0.0);
        // start narrow: the squashed entropy peaks near σ ≈ 1
        let ls = agent.actor.head.log_std.b;
        agent.actor_params.get_mut(ls).as_mut_slice().iter_mut().for_each(|x| *x = -2.0);
        let batch = random_batch(&mut rng, 8, 2);
        let mean_log_std = |agent: &SacAgent| {
            let mut tape = Tape::new();
            let b = agent.actor_params.bind_frozen(&mut tape);
            let (_, ls) = agent.actor.dist(&mut tape, &b, &batch.inputs, None);
            tape.value(ls).sum() / 16.0
        };
        let start = mean_log_std(&agent);
        for _ in 0..100 {
            let mut tape = Tape::new();
            let ab = agent.actor_params.bind(&mut tape);
            let cb = agent.critic_params.bind_frozen(&mut tape);
            let (j, _) = agent.actor_loss(&mut tape, &ab, &cb, &batch.inputs, None, &gaussian(8, 2, &mut rng));
            let g = ab.grads(&tape.backward(j), &agent.actor_params);
            agent.update_actor(g).unwrap();
        }
        assert!(mean_log_std(&agent) > start + 0.1);
    }

    #[test]
    fn actions_stay_inside_box_on_real_env() {
        let spec = three_bus_ring();
        let fam = &make_demo_families(4, &spec)[0];
        let s = reset(&spec, &expected_sample(fam)).unwrap();
        let g = state_graph(&s, &spec);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let agent = SacAgent::new(N_FEATURES, crate::env::action_dim(&spec), 2, small_cfg(), &mut rng).unwrap();
        for _ in 0..50 {
            let (a, _) = agent.act(&g, &[3.0, -3.0], ActMode::Stochastic, &mut rng).unwrap();
            assert!(a.iter().all(|x| x.abs() < 1.0));
            let bx = crate::env::feasible_action_box(&s, &spec);
            let act = crate::env::project_action(&a, &bx, &spec).unwrap();
            assert!(bx.contains(&act.to_vec(), 1e-9));
        }
    }

    #[test]
    fn replay_buffer_ring_and_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut buf = ReplayBuffer::new(5);
        for i in 0..8 {
            buf.push(Experience {
                graph: random_graph(&mut rng),
                action: vec![0.0],
                reward: i as f64,
                next_graph: random_graph(&mut rng),
                done: false,
                task: 0,
            });
        }
        assert_eq!(buf.len(), 5);
        let mut r: Vec<f64> = buf.sample(5, &mut rng).unwrap().iter().map(|e| e.reward).collect();
        r.sort_by(f64::total_cmp);
        assert_eq!(r, vec![3.0, 4.0, 5.0, 6.0, 7.0]);
        assert!(buf.sample(6, &mut rng).is_err());
    }
}
