//! Probabilistic context inference over trajectory graphs, joint meta-training with the
//! base learner, and posterior-sampling adaptation.

use crate::env::{action_dim, rollout, EnvConfig, EpisodeTrace, EnvError, N_FEATURES};
use crate::grid::GridSpec;
use crate::matrix::Matrix;
use crate::nn::{kl_gaussian, kl_to_standard, Activation, Adam, AdamConfig, Bound, Checkpoint, GraphEncoder, Mlp, NnError, ParamSet, Tape, Var};
use crate::sac::{broadcast_row, ActMode, AgentPolicy, Experience, GraphInputs, ReplayBuffer, SacAgent, SacBatch, SacConfig, SacError};
use crate::scenario::{self, ScenarioFamily, ScenarioSample};
use crate::seed::{derive_seed, stream};
use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, VecDeque};
use std::io::Write;
use std::path::Path;
use thiserror::Error;

/// Floor added to every per-transition variance.
const MIN_VAR: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum MetaError {
    #[error(transparent)]
    Sac(#[from] SacError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("non-finite encoder output")]
    NonFinite,
    #[error("meta-training needs at least {need} families, got {got}")]
    TooFewFamilies { need: usize, got: usize },
    #[error("checkpoint does not match this model: {0}")]
    Checkpoint(String),
    #[error("base-learner parameters changed during adaptation")]
    FrozenViolated,
    #[error("invalid config: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetaConfig {
    /// KL weight.
    pub beta: f64,
    pub z_dim: usize,
    pub encoder_lr: f64,
    /// Tasks per gradient step; 0 uses every task.
    pub tasks_per_batch: usize,
    /// Transitions drawn from the recency buffer per inference; 0 uses all of it.
    pub context_len: usize,
    /// Episodes kept per task in the recency buffer.
    pub memory_episodes: usize,
    pub gcn_hidden: usize,
    pub hidden: usize,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            beta: 0.1,
            z_dim: 5,
            encoder_lr: 3e-4,
            tasks_per_batch: 0,
            context_len: 0,
            memory_episodes: 1,
            gcn_hidden: 16,
            hidden: 64,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<(), MetaError> {
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(MetaError::Config("beta must be a nonnegative number".into()));
        }
        if self.z_dim == 0 || self.memory_episodes == 0 || self.gcn_hidden == 0 || self.hidden == 0 {
            return Err(MetaError::Config("z_dim, memory_episodes and widths must be positive".into()));
        }
        if !(self.encoder_lr >= 0.0) {
            return Err(MetaError::Config("encoder_lr must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Diagonal Gaussian over the latent context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorZ {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    /// Transitions fused into this posterior.
    pub n_transitions: usize,
}

impl PosteriorZ {
    pub fn prior(d: usize) -> Self {
        Self { mu: vec![0.0; d], sigma: vec![1.0; d], n_transitions: 0 }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Vec<f64> {
        self.mu.iter().zip(&self.sigma).map(|(m, s)| m + s * rng.sample::<f64, _>(StandardNormal)).collect()
    }

    pub fn variance(&self) -> Vec<f64> {
        self.sigma.iter().map(|s| s * s).collect()
    }

    pub fn kl_to_prior(&self) -> Result<f64, NnError> {
        let d = self.mu.len();
        kl_gaussian(&self.mu, &self.sigma, &vec![0.0; d], &vec![1.0; d])
    }
}

/// Taped inputs for a list of context transitions.
pub struct ContextInputs {
    pub states: GraphInputs,
    pub next_states: GraphInputs,
    /// `[action ‖ reward]` per transition.
    pub extras: Matrix,
}

impl ContextInputs {
    pub fn new(items: &[&Experience]) -> Self {
        let s: Vec<_> = items.iter().map(|e| &e.graph).collect();
        let n: Vec<_> = items.iter().map(|e| &e.next_graph).collect();
        let rows: Vec<Vec<f64>> = items
            .iter()
            .map(|e| {
                let mut r = e.action.clone();
                r.push(e.reward);
                r
            })
            .collect();
        Self { states: GraphInputs::new(&s), next_states: GraphInputs::new(&n), extras: Matrix::from_rows(&rows) }
    }

    pub fn len(&self) -> usize {
        self.extras.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Per-transition Gaussian factors from a GCN over both graphs of each transition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextEncoder {
    pub gcn: GraphEncoder,
    pub trunk: Mlp,
    pub z_dim: usize,
}

impl ContextEncoder {
    pub fn new(params: &mut ParamSet, name: &str, act_dim: usize, cfg: &MetaConfig, rng: &mut impl Rng) -> Self {
        let gcn = GraphEncoder::new(params, &format!("{name}.gcn"), N_FEATURES, cfg.gcn_hidden, rng);
        let trunk = Mlp::new(
            params,
            &format!("{name}.trunk"),
            &[2 * gcn.out_dim + act_dim + 1, cfg.hidden, cfg.hidden, 2 * cfg.z_dim],
            Activation::Relu,
            Activation::Identity,
            rng,
        );
        Self { gcn, trunk, z_dim: cfg.z_dim }
    }

    /// Per-transition features before the output layer split, `m × 2·d_z`.
    pub fn raw(&self, tape: &mut Tape, bound: &Bound, ctx: &ContextInputs) -> Var {
        let xs = tape.constant(ctx.states.x.clone());
        let hs = self.gcn.forward(tape, bound, xs, &ctx.states.graphs);
        let xn = tape.constant(ctx.next_states.x.clone());
        let hn = self.gcn.forward(tape, bound, xn, &ctx.next_states.graphs);
        let ex = tape.constant(ctx.extras.clone());
        let h = tape.concat_cols(&[hs, ex, hn]);
        self.trunk.forward(tape, bound, h)
    }

    /// Per-transition `(μ_τ, σ²_τ)`, each `m × d_z`.
    pub fn factors(&self, tape: &mut Tape, bound: &Bound, ctx: &ContextInputs) -> (Var, Var) {
        let r = self.raw(tape, bound, ctx);
        let mu = tape.slice_cols(r, 0, self.z_dim);
        let v = tape.slice_cols(r, self.z_dim, 2 * self.z_dim);
        let v = tape.softplus(v);
        let var = tape.add_scalar(v, MIN_VAR);
        (mu, var)
    }

    /// Posterior `(μ, σ²)` as `1 × d_z` rows: the product of the standard-normal prior
    /// with every factor, so precisions add.
    pub fn posterior(&self, tape: &mut Tape, bound: &Bound, ctx: &ContextInputs) -> (Var, Var) {
        let (mu, var) = self.factors(tape, bound, ctx);
        fuse(tape, mu, var)
    }
}

/// Precision-weighted product of `m` Gaussian rows with `N(0, I)`.
pub fn fuse(tape: &mut Tape, mu: Var, var: Var) -> (Var, Var) {
    let (m, d) = tape.value(mu).shape();
    let ones = tape.constant(Matrix::filled(m, d, 1.0));
    let prec = tape.div(ones, var);
    let wm = tape.mul(mu, prec);
    let sp = tape.block_mean_rows(prec, m);
    let sp = tape.scale(sp, m as f64);
    let sw = tape.block_mean_rows(wm, m);
    let sw = tape.scale(sw, m as f64);
    let total = tape.add_scalar(sp, 1.0);
    let one = tape.constant(Matrix::filled(1, d, 1.0));
    let post_var = tape.div(one, total);
    let post_mu = tape.mul(sw, post_var);
    (post_mu, post_var)
}

/// Gradient-phase and collection schedule for [`meta_train`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSchedule {
    pub iterations: usize,
    pub episodes_per_task: usize,
    pub train_steps: usize,
    /// Leading iterations that act uniformly at random.
    pub warmup_iterations: usize,
    /// Iterations between checkpoints; 0 saves only at the end.
    pub checkpoint_every: usize,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self { iterations: 100, episodes_per_task: 1, train_steps: 16, warmup_iterations: 4, checkpoint_every: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub iteration: usize,
    pub env_rounds: u64,
    /// Mean episode cost over this iteration's collection rollouts.
    pub rollout_cost: f64,
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub kl: f64,
    pub entropy: f64,
    pub critic_grad_norm: f64,
    pub actor_grad_norm: f64,
    pub encoder_grad_norm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StepMetrics {
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub kl: f64,
    pub entropy: f64,
    pub critic_grad_norm: f64,
    pub actor_grad_norm: f64,
    pub encoder_grad_norm: f64,
}

/// Base learner plus context encoder.
pub struct MetaLearner {
    pub config: MetaConfig,
    pub agent: SacAgent,
    pub encoder: ContextEncoder,
    pub encoder_params: ParamSet,
    encoder_opt: Adam,
}

fn gaussian(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Matrix::from_vec(rows, cols, data)
}

impl MetaLearner {
    pub fn new(act_dim: usize, sac: SacConfig, config: MetaConfig, seed: u64) -> Result<Self, MetaError> {
        config.validate()?;
        let mut rng = stream(seed, "init");
        let agent = SacAgent::new(N_FEATURES, act_dim, config.z_dim, sac, &mut rng)?;
        let mut encoder_params = ParamSet::new();
        let encoder = ContextEncoder::new(&mut encoder_params, "encoder", act_dim, &config, &mut rng);
        let encoder_opt = Adam::new(AdamConfig::with_lr(config.encoder_lr), &encoder_params);
        Ok(Self { config, agent, encoder, encoder_params, encoder_opt })
    }

    pub fn for_spec(spec: &GridSpec, sac: SacConfig, config: MetaConfig, seed: u64) -> Result<Self, MetaError> {
        Self::new(action_dim(spec), sac, config, seed)
    }

    /// Closed-form posterior over `items`; the prior when empty.
    pub fn encode_context(&self, items: &[&Experience]) -> Result<PosteriorZ, MetaError> {
        if items.is_empty() {
            return Ok(PosteriorZ::prior(self.config.z_dim));
        }
        let mut tape = Tape::new();
        let b = self.encoder_params.bind_frozen(&mut tape);
        let ctx = ContextInputs::new(items);
        let (mu, var) = self.encoder.posterior(&mut tape, &b, &ctx);
        let mu = tape.value(mu).as_slice().to_vec();
        let sigma: Vec<f64> = tape.value(var).as_slice().iter().map(|v| v.sqrt()).collect();
        if mu.iter().chain(&sigma).any(|x| !x.is_finite()) {
            return Err(MetaError::NonFinite);
        }
        Ok(PosteriorZ { mu, sigma, n_transitions: items.len() })
    }

    pub fn encode_trace(&self, trace: &EpisodeTrace) -> Result<PosteriorZ, MetaError> {
        let items = experiences(trace, trace.family_id);
        self.encode_context(&items.iter().collect::<Vec<_>>())
    }

    /// Base-learner fingerprint used to enforce the frozen contract.
    pub fn base_checksum(&self) -> String {
        format!("{}:{}:{}", self.agent.actor_params.checksum(), self.agent.critic_params.checksum(), self.agent.target_params.checksum())
    }

    /// One joint update: encoder and critic on `J_Q + β·KL`, then actor on `J_π` with `z` detached.
    pub fn gradient_step(&mut self, tasks: &[(&ReplayBuffer, Vec<&Experience>)], rng: &mut impl Rng) -> Result<StepMetrics, MetaError> {
        let bsz = self.agent.config.batch_size;
        let ad = self.agent.act_dim();
        let d = self.config.z_dim;
        let mut tape = Tape::new();
        let eb = self.encoder_params.bind(&mut tape);
        let cb = self.agent.critic_params.bind(&mut tape);
        let mut total: Option<Var> = None;
        let mut kl_sum = 0.0;
        let mut jq_sum = 0.0;
        let mut per_task = Vec::with_capacity(tasks.len());
        for (buffer, ctx_items) in tasks {
            let (mu, var) = if ctx_items.is_empty() {
                (tape.constant(Matrix::zeros(1, d)), tape.constant(Matrix::filled(1, d, 1.0)))
            } else {
                self.encoder.posterior(&mut tape, &eb, &ContextInputs::new(ctx_items))
            };
            let sd = tape.sqrt(var);
            let e = tape.constant(gaussian(1, d, rng));
            let se = tape.mul(sd, e);
            let z = tape.add(mu, se);
            let zb = broadcast_row(&mut tape, z, bsz);
            let z_val = tape.value(zb).clone();
            let batch = SacBatch::new(&buffer.sample(bsz, rng)?);
            let y = self.agent.targets(&batch, &z_val, &gaussian(bsz, ad, rng))?;
            let jq = self.agent.critic_loss(&mut tape, &cb, &batch, Some(zb), &y);
            let kl = kl_to_standard(&mut tape, mu, var);
            let kl_w = tape.scale(kl, self.config.beta);
            jq_sum += tape.scalar(jq);
            kl_sum += tape.scalar(kl);
            let term = tape.add(jq, kl_w);
            total = Some(match total {
                Some(t) => tape.add(t, term),
                None => term,
            });
            per_task.push((batch, z_val));
        }
        let n = tasks.len().max(1) as f64;
        let total = total.ok_or_else(|| MetaError::Config("gradient step without tasks".into()))?;
        let loss = tape.scale(total, 1.0 / n);
        let g = tape.backward(loss);
        let mut eg = eb.grads(&g, &self.encoder_params);
        let cg = cb.grads(&g, &self.agent.critic_params);
        let encoder_grad_norm = if self.agent.config.grad_clip > 0.0 {
            crate::nn::clip_global_norm(&mut eg, self.agent.config.grad_clip)
        } else {
            crate::nn::global_norm(&eg)
        };
        self.encoder_opt.step(&mut self.encoder_params, &eg)?;
        let critic_grad_norm = self.agent.update_critic(cg)?;

        let mut tape = Tape::new();
        let ab = self.agent.actor_params.bind(&mut tape);
        let cb = self.agent.critic_params.bind_frozen(&mut tape);
        let mut total: Option<Var> = None;
        let mut ent = 0.0;
        for (batch, z_val) in &per_task {
            let zc = tape.constant(z_val.clone());
            let (jp, s) = self.agent.actor_loss(&mut tape, &ab, &cb, &batch.inputs, Some(zc), &gaussian(bsz, ad, rng));
            ent += -tape.value(s.log_prob).sum() / bsz as f64;
            total = Some(match total {
                Some(t) => tape.add(t, jp),
                None => jp,
            });
        }
        let jp = tape.scale(total.expect("tasks nonempty"), 1.0 / n);
        let actor_loss = tape.scalar(jp);
        let ag = ab.grads(&tape.backward(jp), &self.agent.actor_params);
        let actor_grad_norm = self.agent.update_actor(ag)?;
        let m = StepMetrics {
            critic_loss: jq_sum / n,
            actor_loss,
            kl: kl_sum / n,
            entropy: ent / n,
            critic_grad_norm,
            actor_grad_norm,
            encoder_grad_norm,
        };
        if !(m.critic_loss.is_finite() && m.actor_loss.is_finite() && m.kl.is_finite()) {
            return Err(MetaError::NonFinite);
        }
        Ok(m)
    }

    /// Roll out one episode acting with a fixed latent.
    pub fn rollout(
        &self,
        spec: &GridSpec,
        sample: &ScenarioSample,
        z: &[f64],
        env: &EnvConfig,
        mode: ActMode,
        rng: ChaCha8Rng,
    ) -> Result<EpisodeTrace, MetaError> {
        let mut policy = AgentPolicy::new(&self.agent, mode, rng);
        let trace = rollout(&mut policy, spec, sample, z, env)?;
        if let Some(e) = policy.error {
            return Err(e.into());
        }
        Ok(trace)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::default();
        ck.insert("actor", &self.agent.actor_params);
        ck.insert("critic", &self.agent.critic_params);
        ck.insert("target", &self.agent.target_params);
        ck.insert("encoder", &self.encoder_params);
        ck.meta.insert("sac_config".into(), serde_json::to_string(&self.agent.config).expect("config serializes"));
        ck.meta.insert("meta_config".into(), serde_json::to_string(&self.config).expect("config serializes"));
        ck.meta.insert("act_dim".into(), self.agent.act_dim().to_string());
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, MetaError> {
        let get = |k: &str| ck.meta.get(k).ok_or_else(|| MetaError::Checkpoint(format!("missing {k}")));
        let sac: SacConfig = serde_json::from_str(get("sac_config")?).map_err(|e| MetaError::Checkpoint(e.to_string()))?;
        let meta: MetaConfig = serde_json::from_str(get("meta_config")?).map_err(|e| MetaError::Checkpoint(e.to_string()))?;
        let act_dim: usize = get("act_dim")?.parse().map_err(|_| MetaError::Checkpoint("bad act_dim".into()))?;
        let mut m = Self::new(act_dim, sac, meta, 0)?;
        ck.restore("actor", &mut m.agent.actor_params)?;
        ck.restore("critic", &mut m.agent.critic_params)?;
        ck.restore("target", &mut m.agent.target_params)?;
        ck.restore("encoder", &mut m.encoder_params)?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<(), MetaError> {
        Ok(self.to_checkpoint().save(path)?)
    }

    pub fn load(path: &Path) -> Result<Self, MetaError> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Replay entries for every transition of `trace`.
pub fn experiences(trace: &EpisodeTrace, task: usize) -> Vec<Experience> {
    trace.transitions.iter().map(|t| Experience::from_transition(t, task)).collect()
}

/// Per-task state kept across iterations.
struct TaskData {
    buffer: ReplayBuffer,
    memory: VecDeque<Vec<Experience>>,
}

impl TaskData {
    fn context(&self) -> Vec<&Experience> {
        self.memory.iter().flatten().collect()
    }
}

pub struct TrainOutcome {
    pub log: Vec<TrainRecord>,
    /// Final collection trace per task.
    pub last_traces: Vec<EpisodeTrace>,
}

/// Offline meta-training over `families`.
///
/// Each iteration collects `episodes_per_task` episodes per family with `z` drawn from the
/// posterior over that family's recency buffer, then runs `train_steps` joint updates.
/// `on_iteration` sees the learner after each iteration and may write checkpoints.
pub fn meta_train(
    learner: &mut MetaLearner,
    spec: &GridSpec,
    families: &[ScenarioFamily],
    env: &EnvConfig,
    schedule: &TrainSchedule,
    seed: u64,
    mut on_iteration: impl FnMut(&MetaLearner, &TrainRecord) -> Result<(), MetaError>,
) -> Result<TrainOutcome, MetaError> {
    if families.is_empty() {
        return Err(MetaError::TooFewFamilies { need: 1, got: 0 });
    }
    let mut rng = stream(seed, "meta-train");
    let mut tasks: Vec<TaskData> = families
        .iter()
        .map(|_| TaskData { buffer: ReplayBuffer::new(learner.agent.config.buffer_capacity), memory: VecDeque::new() })
        .collect();
    let ad = learner.agent.act_dim();
    let mut log = Vec::with_capacity(schedule.iterations);
    let mut last_traces = vec![None; families.len()];
    let mut episode = 0u64;

    for it in 0..schedule.iterations {
        let mut cost = 0.0;
        let mut n_eps = 0;
        for (i, fam) in families.iter().enumerate() {
            for _ in 0..schedule.episodes_per_task {
                let post = learner.encode_context(&tasks[i].context())?;
                let z = post.sample(&mut rng);
                let smp = scenario::sample(fam, derive_seed(seed, &format!("sample/{i}/{episode}")));
                let act_rng = stream(seed, &format!("act/{i}/{episode}"));
                episode += 1;
                let trace = if it < schedule.warmup_iterations {
                    let mut r = act_rng;
                    let mut random = |_: &_, _: &_, _: &[f64]| (0..ad).map(|_| r.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
                    rollout(&mut random, spec, &smp, &z, env)?
                } else {
                    learner.rollout(spec, &smp, &z, env, ActMode::Stochastic, act_rng)?
                };
                cost += trace.total_cost;
                n_eps += 1;
                let exps = experiences(&trace, i);
                for e in &exps {
                    tasks[i].buffer.push(e.clone());
                }
                tasks[i].memory.push_back(exps);
                while tasks[i].memory.len() > learner.config.memory_episodes {
                    tasks[i].memory.pop_front();
                }
                learner.agent.observe_rounds(trace.len() as u64)?;
                last_traces[i] = Some(trace);
            }
        }

        let mut sums = StepMetrics::default();
        let mut steps = 0;
        let ready = tasks.iter().all(|t| t.buffer.len() >= learner.agent.config.batch_size);
        if ready {
            for _ in 0..schedule.train_steps {
                let chosen: Vec<usize> = match learner.config.tasks_per_batch {
                    0 => (0..tasks.len()).collect(),
                    k if k >= tasks.len() => (0..tasks.len()).collect(),
                    k => {
                        let mut v = index::sample(&mut rng, tasks.len(), k).into_vec();
                        v.sort_unstable();
                        v
                    }
                };
                let batch: Vec<(&ReplayBuffer, Vec<&Experience>)> = chosen
                    .iter()
                    .map(|&i| {
                        let ctx = tasks[i].context();
                        let ctx = match learner.config.context_len {
                            0 => ctx,
                            k if k >= ctx.len() => ctx,
                            k => {
                                let mut idx = index::sample(&mut rng, ctx.len(), k).into_vec();
                                idx.sort_unstable();
                                idx.into_iter().map(|j| ctx[j]).collect()
                            }
                        };
                        (&tasks[i].buffer, ctx)
                    })
                    .collect();
                let m = learner.gradient_step(&batch, &mut rng)?;
                sums.critic_loss += m.critic_loss;
                sums.actor_loss += m.actor_loss;
                sums.kl += m.kl;
                sums.entropy += m.entropy;
                sums.critic_grad_norm += m.critic_grad_norm;
                sums.actor_grad_norm += m.actor_grad_norm;
                sums.encoder_grad_norm += m.encoder_grad_norm;
                steps += 1;
            }
        }
        let k = steps.max(1) as f64;
        let rec = TrainRecord {
            iteration: it,
            env_rounds: learner.agent.rounds(),
            rollout_cost: cost / n_eps.max(1) as f64,
            critic_loss: sums.critic_loss / k,
            actor_loss: sums.actor_loss / k,
            kl: sums.kl / k,
            entropy: sums.entropy / k,
            critic_grad_norm: sums.critic_grad_norm / k,
            actor_grad_norm: sums.actor_grad_norm / k,
            encoder_grad_norm: sums.encoder_grad_norm / k,
        };
        on_iteration(learner, &rec)?;
        log.push(rec);
    }
    Ok(TrainOutcome { log, last_traces: last_traces.into_iter().flatten().collect() })
}

pub fn write_log_jsonl<W: Write>(log: &[TrainRecord], mut out: W) -> Result<(), MetaError> {
    for r in log {
        serde_json::to_writer(&mut out, r).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptRound {
    pub round: usize,
    pub cost: f64,
    pub z: Vec<f64>,
    pub posterior: PosteriorZ,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptOptions {
    pub rounds: usize,
    /// Draw `z` from the posterior each round; otherwise act on its mean.
    pub sample_z: bool,
}

impl Default for AdaptOptions {
    fn default() -> Self {
        Self { rounds: 5, sample_z: true }
    }
}

pub struct AdaptOutcome {
    pub rounds: Vec<AdaptRound>,
    pub traces: Vec<EpisodeTrace>,
    pub posterior: PosteriorZ,
}

/// Meta-test adaptation with the base learner frozen.
///
/// Round 0 acts on the prior; after each round its trajectory joins the context and the
/// posterior is re-encoded. `samples(r)` supplies the episode of round `r`.
pub fn meta_test(
    learner: &MetaLearner,
    spec: &GridSpec,
    mut samples: impl FnMut(usize) -> ScenarioSample,
    env: &EnvConfig,
    opts: &AdaptOptions,
    seed: u64,
) -> Result<AdaptOutcome, MetaError> {
    let before = learner.base_checksum();
    let mut rng = stream(seed, "adapt");
    let mut context: Vec<Experience> = Vec::new();
    let mut rounds = Vec::with_capacity(opts.rounds + 1);
    let mut traces = Vec::with_capacity(opts.rounds + 1);
    let mut post = PosteriorZ::prior(learner.config.z_dim);
    for r in 0..=opts.rounds {
        post = learner.encode_context(&context.iter().collect::<Vec<_>>())?;
        let z = if opts.sample_z { post.sample(&mut rng) } else { post.mu.clone() };
        let smp = samples(r);
        let trace = learner.rollout(spec, &smp, &z, env, ActMode::Deterministic, stream(seed, &format!("adapt-act/{r}")))?;
        rounds.push(AdaptRound { round: r, cost: trace.total_cost, z, posterior: post.clone() });
        context.extend(experiences(&trace, smp.family_id));
        traces.push(trace);
    }
    if learner.base_checksum() != before {
        return Err(MetaError::FrozenViolated);
    }
    Ok(AdaptOutcome { rounds, traces, posterior: post })
}

/// Posterior mean per trace grouped by family.
pub fn family_embeddings(learner: &MetaLearner, traces: &[EpisodeTrace]) -> Result<BTreeMap<usize, Vec<PosteriorZ>>, MetaError> {
    let mut out: BTreeMap<usize, Vec<PosteriorZ>> = BTreeMap::new();
    for t in traces {
        out.entry(t.family_id).or_default().push(learner.encode_trace(t)?);
    }
    Ok(out)
}

pub fn centroid(points: &[Vec<f64>]) -> Vec<f64> {
    let d = points.first().map_or(0, Vec::len);
    let mut c = vec![0.0; d];
    for p in points {
        for (a, b) in c.iter_mut().zip(p) {
            *a += b / points.len() as f64;
        }
    }
    c
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Mean pairwise distance between family centroids over mean distance of points to their own
/// centroid; above 1 when families separate.
pub fn separation_ratio(groups: &BTreeMap<usize, Vec<Vec<f64>>>) -> f64 {
    let cents: Vec<Vec<f64>> = groups.values().map(|g| centroid(g)).collect();
    let mut inter = 0.0;
    let mut pairs = 0;
    for i in 0..cents.len() {
        for j in i + 1..cents.len() {
            inter += euclidean(&cents[i], &cents[j]);
            pairs += 1;
        }
    }
    let mut intra = 0.0;
    let mut n = 0;
    for (g, c) in groups.values().zip(&cents) {
        for p in g {
            intra += euclidean(p, c);
            n += 1;
        }
    }
    let inter = inter / pairs.max(1) as f64;
    let intra = intra / n.max(1) as f64;
    if intra == 0.0 {
        if inter > 0.0 {
            f64::INFINITY
        } else {
            0.0
        }
    } else {
        inter / intra
    }
}

/// CSV rows `family_id, sample_id, mu_0.., sigma_0..`.
pub fn write_embeddings_csv<W: Write>(rows: &[(usize, String, PosteriorZ)], out: W) -> Result<(), MetaError> {
    let mut w = csv::Writer::from_writer(out);
    let d = rows.first().map_or(0, |r| r.2.mu.len());
    let mut header = vec!["family_id".to_string(), "sample_id".to_string()];
    header.extend((0..d).map(|k| format!("mu_{k}")));
    header.extend((0..d).map(|k| format!("sigma_{k}")));
    w.write_record(&header)?;
    for (f, s, p) in rows {
        let mut r = vec![f.to_string(), s.clone()];
        r.extend(p.mu.iter().map(|x| x.to_string()));
        r.extend(p.sigma.iter().map(|x| x.to_string()));
        w.write_record(&r)?;
    }
    w.flush()?;
    Ok(())
}
