//! Supervised prefix-to-embedding matcher for within-episode adaptation.

use crate::env::{project_action, state_graph, DispatchEnv, EnvConfig, EpisodeTrace, N_FEATURES};
use crate::grid::GridSpec;
use crate::matrix::Matrix;
use crate::meta::{euclidean, experiences, ContextInputs, MetaError, MetaLearner};
use crate::nn::{Activation, Adam, AdamConfig, Bound, GraphEncoder, Mlp, NnError, ParamSet, Tape, Var};
use crate::sac::{ActMode, Experience};
use crate::scenario::ScenarioSample;
use crate::seed::stream;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::io::Write;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DiscriminatorError {
    #[error("trace {0} has no transitions")]
    EmptyTrace(String),
    #[error("prefix is empty")]
    EmptyPrefix,
    #[error("no training examples")]
    NoTrainingData,
    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Diverged { epoch: usize, loss: f64 },
    #[error("no family centroids")]
    NoCentroids,
    #[error(transparent)]
    Meta(#[from] MetaError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Env(#[from] crate::env::EnvError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    HeldOut,
}

/// Train/held-out assignment from the first digest byte of the trace id.
pub fn split_of(trace_id: &str, train_fraction: f64) -> Split {
    let d = Sha256::digest(trace_id.as_bytes());
    if (d[0] as f64 + 0.5) / 256.0 < train_fraction {
        Split::Train
    } else {
        Split::HeldOut
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrefixExample {
    /// Index into [`PrefixDataset::traces`].
    pub trace: usize,
    pub len: usize,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetTrace {
    pub id: String,
    pub family_id: usize,
    pub items: Vec<Experience>,
    /// Posterior mean over the whole trace.
    pub target: Vec<f64>,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrefixDataset {
    pub traces: Vec<DatasetTrace>,
    pub examples: Vec<PrefixExample>,
}

impl PrefixDataset {
    pub fn prefix(&self, e: &PrefixExample) -> Vec<&Experience> {
        self.traces[e.trace].items[..e.len].iter().collect()
    }

    pub fn target(&self, e: &PrefixExample) -> &[f64] {
        &self.traces[e.trace].target
    }

    pub fn split(&self, s: Split) -> Vec<&PrefixExample> {
        self.examples.iter().filter(|e| e.split == s).collect()
    }

    /// Mean target per family over training traces.
    pub fn centroids(&self) -> BTreeMap<usize, Vec<f64>> {
        let mut groups: BTreeMap<usize, Vec<Vec<f64>>> = BTreeMap::new();
        for t in self.traces.iter().filter(|t| t.split == Split::Train) {
            groups.entry(t.family_id).or_default().push(t.target.clone());
        }
        groups.into_iter().map(|(k, v)| (k, crate::meta::centroid(&v))).collect()
    }

    /// CSV rows `trace_id, family_id, split, z_0..`.
    pub fn write_targets_csv<W: Write>(&self, out: W) -> Result<(), DiscriminatorError> {
        let mut w = csv::Writer::from_writer(out);
        let d = self.traces.first().map_or(0, |t| t.target.len());
        let mut header = vec!["trace_id".to_string(), "family_id".into(), "split".into()];
        header.extend((0..d).map(|k| format!("z_{k}")));
        w.write_record(&header)?;
        for t in &self.traces {
            let split = match t.split {
                Split::Train => "train",
                Split::HeldOut => "held_out",
            };
            let mut r = vec![t.id.clone(), t.family_id.to_string(), split.to_string()];
            r.extend(t.target.iter().map(|x| x.to_string()));
            w.write_record(&r)?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

/// One example per prefix length of every trace, targeting the full-trace posterior mean.
pub fn build_dataset(traces: &[EpisodeTrace], learner: &MetaLearner, train_fraction: f64) -> Result<PrefixDataset, DiscriminatorError> {
    let mut out = PrefixDataset { traces: Vec::with_capacity(traces.len()), examples: Vec::new() };
    for tr in traces {
        if tr.is_empty() {
            return Err(DiscriminatorError::EmptyTrace(tr.id.clone()));
        }
        let items = experiences(tr, tr.family_id);
        let target = learner.encode_context(&items.iter().collect::<Vec<_>>())?.mu;
        let split = split_of(&tr.id, train_fraction);
        let k = out.traces.len();
        out.examples.extend((1..=items.len()).map(|len| PrefixExample { trace: k, len, split }));
        out.traces.push(DatasetTrace { id: tr.id.clone(), family_id: tr.family_id, items, target, split });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscriminatorConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub gcn_hidden: usize,
    pub hidden: usize,
    pub train_fraction: f64,
    /// Take one gradient step per stage during guided rollouts, toward the current posterior mean.
    pub online_update: bool,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self { lr: 1e-3, epochs: 100, batch_size: 32, gcn_hidden: 16, hidden: 64, train_fraction: 0.7, online_update: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorNet {
    pub gcn: GraphEncoder,
    pub per_transition: Mlp,
    pub head: Mlp,
    pub z_dim: usize,
}

impl DiscriminatorNet {
    pub fn new(params: &mut ParamSet, act_dim: usize, z_dim: usize, cfg: &DiscriminatorConfig, rng: &mut impl Rng) -> Self {
        let gcn = GraphEncoder::new(params, "disc.gcn", N_FEATURES, cfg.gcn_hidden, rng);
        let per_transition = Mlp::new(
            params,
            "disc.item",
            &[2 * gcn.out_dim + act_dim + 1, cfg.hidden],
            Activation::Relu,
            Activation::Relu,
            rng,
        );
        let head = Mlp::new(params, "disc.head", &[cfg.hidden, cfg.hidden, z_dim], Activation::Relu, Activation::Identity, rng);
        Self { gcn, per_transition, head, z_dim }
    }

    /// One output row per prefix; `items` stacks the prefixes and `segment[k]` names the prefix of item `k`.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, ctx: &ContextInputs, segment: &[usize], lens: &[usize]) -> Var {
        let xs = tape.constant(ctx.states.x.clone());
        let hs = self.gcn.forward(tape, bound, xs, &ctx.states.graphs);
        let xn = tape.constant(ctx.next_states.x.clone());
        let hn = self.gcn.forward(tape, bound, xn, &ctx.next_states.graphs);
        let ex = tape.constant(ctx.extras.clone());
        let h = tape.concat_cols(&[hs, ex, hn]);
        let h = self.per_transition.forward(tape, bound, h);
        let pooled = tape.scatter_sum_rows(h, segment, lens.len());
        let inv = tape.constant(Matrix::column_vector(&lens.iter().map(|&l| 1.0 / l as f64).collect::<Vec<_>>()));
        let pooled = tape.mul_col(pooled, inv);
        self.head.forward(tape, bound, pooled)
    }
}

pub struct Discriminator {
    pub config: DiscriminatorConfig,
    pub net: DiscriminatorNet,
    pub params: ParamSet,
    opt: Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean training loss per epoch.
    pub curve: Vec<f64>,
    pub held_out_loss: Option<f64>,
}

fn stack(prefixes: &[Vec<&Experience>]) -> (ContextInputs, Vec<usize>, Vec<usize>) {
    let mut all = Vec::new();
    let mut seg = Vec::new();
    let mut lens = Vec::with_capacity(prefixes.len());
    for (k, p) in prefixes.iter().enumerate() {
        all.extend(p.iter().copied());
        seg.extend(std::iter::repeat(k).take(p.len()));
        lens.push(p.len());
    }
    (ContextInputs::new(&all), seg, lens)
}

impl Discriminator {
    pub fn new(act_dim: usize, z_dim: usize, config: DiscriminatorConfig, seed: u64) -> Self {
        let mut rng = stream(seed, "disc-init");
        let mut params = ParamSet::new();
        let net = DiscriminatorNet::new(&mut params, act_dim, z_dim, &config, &mut rng);
        let opt = Adam::new(AdamConfig::with_lr(config.lr), &params);
        Self { config, net, params, opt }
    }

    /// `L_dr = mean_k ‖ẑ_k − z*_k‖²`.
    pub fn loss(&self, tape: &mut Tape, bound: &Bound, prefixes: &[Vec<&Experience>], targets: &Matrix) -> Var {
        let (ctx, seg, lens) = stack(prefixes);
        let z = self.net.forward(tape, bound, &ctx, &seg, &lens);
        let t = tape.constant(targets.clone());
        let d = tape.sub(z, t);
        let sq = tape.square(d);
        let s = tape.sum(sq);
        tape.scale(s, 1.0 / prefixes.len() as f64)
    }

    pub fn infer(&self, prefix: &[&Experience]) -> Result<Vec<f64>, DiscriminatorError> {
        Ok(self.infer_many(&[prefix.to_vec()])?.remove(0))
    }

    pub fn infer_many(&self, prefixes: &[Vec<&Experience>]) -> Result<Vec<Vec<f64>>, DiscriminatorError> {
        if prefixes.is_empty() || prefixes.iter().any(Vec::is_empty) {
            return Err(DiscriminatorError::EmptyPrefix);
        }
        let mut tape = Tape::new();
        let b = self.params.bind_frozen(&mut tape);
        let (ctx, seg, lens) = stack(prefixes);
        let z = self.net.forward(&mut tape, &b, &ctx, &seg, &lens);
        let m = tape.value(z);
        Ok((0..m.rows()).map(|i| m.row(i).to_vec()).collect())
    }

    fn step(&mut self, prefixes: &[Vec<&Experience>], targets: &Matrix) -> Result<f64, DiscriminatorError> {
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape);
        let l = self.loss(&mut tape, &b, prefixes, targets);
        let v = tape.scalar(l);
        let g = b.grads(&tape.backward(l), &self.params);
        self.opt.step(&mut self.params, &g)?;
        Ok(v)
    }

    pub fn train(&mut self, data: &PrefixDataset, seed: u64) -> Result<TrainReport, DiscriminatorError> {
        let mut train: Vec<&PrefixExample> = data.split(Split::Train);
        if train.is_empty() {
            return Err(DiscriminatorError::NoTrainingData);
        }
        let mut rng = stream(seed, "disc-train");
        let mut curve = Vec::with_capacity(self.config.epochs);
        let bs = self.config.batch_size.max(1);
        for epoch in 0..self.config.epochs {
            train.shuffle(&mut rng);
            let mut total = 0.0;
            for chunk in train.chunks(bs) {
                let prefixes: Vec<Vec<&Experience>> = chunk.iter().map(|e| data.prefix(e)).collect();
                let rows: Vec<Vec<f64>> = chunk.iter().map(|e| data.target(e).to_vec()).collect();
                let l = self.step(&prefixes, &Matrix::from_rows(&rows))?;
                total += l * chunk.len() as f64;
            }
            let mean = total / train.len() as f64;
            if !mean.is_finite() {
                return Err(DiscriminatorError::Diverged { epoch, loss: mean });
            }
            curve.push(mean);
        }
        let held = data.split(Split::HeldOut);
        let held_out_loss = if held.is_empty() { None } else { Some(self.evaluate(data, &held)?.mse) };
        Ok(TrainReport { curve, held_out_loss })
    }

    pub fn evaluate(&self, data: &PrefixDataset, examples: &[&PrefixExample]) -> Result<Evaluation, DiscriminatorError> {
        let cents = data.centroids();
        let mut sq = 0.0;
        let mut correct = 0usize;
        for chunk in examples.chunks(256) {
            let prefixes: Vec<Vec<&Experience>> = chunk.iter().map(|e| data.prefix(e)).collect();
            let preds = self.infer_many(&prefixes)?;
            for (e, z) in chunk.iter().zip(&preds) {
                sq += euclidean(z, data.target(e)).powi(2);
                if !cents.is_empty() && nearest_family(z, &cents)?.0 == data.traces[e.trace].family_id {
                    correct += 1;
                }
            }
        }
        let n = examples.len().max(1) as f64;
        Ok(Evaluation { n: examples.len(), mse: sq / n, rmse: (sq / n).sqrt(), accuracy: correct as f64 / n })
    }

    /// One gradient step toward `target` on a single prefix.
    pub fn online_step(&mut self, prefix: &[&Experience], target: &[f64]) -> Result<f64, DiscriminatorError> {
        if prefix.is_empty() {
            return Err(DiscriminatorError::EmptyPrefix);
        }
        self.step(&[prefix.to_vec()], &Matrix::row_vector(target))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub n: usize,
    pub mse: f64,
    pub rmse: f64,
    pub accuracy: f64,
}

/// Closest centroid; ties go to the lowest family id.
pub fn nearest_family(z: &[f64], centroids: &BTreeMap<usize, Vec<f64>>) -> Result<(usize, BTreeMap<usize, f64>), DiscriminatorError> {
    let mut best: Option<(usize, f64)> = None;
    let mut dists = BTreeMap::new();
    for (&id, c) in centroids {
        let d = euclidean(z, c);
        dists.insert(id, d);
        if best.map_or(true, |(_, b)| d < b) {
            best = Some((id, d));
        }
    }
    best.map(|(id, _)| (id, dists)).ok_or(DiscriminatorError::NoCentroids)
}

/// Episode where `z` is re-inferred from the growing prefix before every stage
/// (the prior mean before the first). Returns the trace cost and the latents used.
pub fn guided_rollout(
    learner: &MetaLearner,
    disc: &mut Discriminator,
    spec: &GridSpec,
    sample: &ScenarioSample,
    env_cfg: &EnvConfig,
) -> Result<(f64, Vec<Vec<f64>>), DiscriminatorError> {
    let mut env = DispatchEnv::new(spec.clone(), env_cfg.clone());
    let mut state = env.reset(sample)?;
    let mut prefix: Vec<Experience> = Vec::new();
    let mut zs = Vec::new();
    let mut total = 0.0;
    let mut rng = stream(sample.seed, "guided");
    while !env.is_done() {
        let z = if prefix.is_empty() { vec![0.0; learner.config.z_dim] } else { disc.infer(&prefix.iter().collect::<Vec<_>>())? };
        let graph = state_graph(&state, spec);
        let (raw, _) = learner.agent.act(&graph, &z, ActMode::Deterministic, &mut rng).map_err(MetaError::from)?;
        let action = project_action(&raw, &env.action_box()?, spec)?;
        let out = env.step(&action)?;
        total += out.breakdown.total;
        prefix.push(Experience {
            graph,
            action: raw,
            reward: out.reward,
            next_graph: state_graph(&out.next_state, spec),
            done: out.done,
            task: sample.family_id,
        });
        if disc.config.online_update {
            let refs: Vec<&Experience> = prefix.iter().collect();
            let target = learner.encode_context(&refs)?.mu;
            disc.online_step(&refs, &target)?;
        }
        zs.push(z);
        state = out.next_state;
    }
    Ok((total, zs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{rollout, NetworkModel};
    use crate::grid::three_bus_ring;
    use crate::meta::MetaConfig;
    use crate::nn::grad_check;
    use crate::sac::SacConfig;
    use crate::scenario::{make_demo_families, sample};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn learner() -> MetaLearner {
        let s = SacConfig { gcn_hidden: 4, hidden: 8, batch_size: 4, ..SacConfig::default() };
        let m = MetaConfig { z_dim: 2, gcn_hidden: 4, hidden: 8, ..MetaConfig::default() };
        MetaLearner::new(3, s, m, 0).unwrap()
    }

    fn traces(n: usize, horizon: usize) -> Vec<EpisodeTrace> {
        let spec = three_bus_ring();
        let fams = make_demo_families(horizon, &spec);
        let env = EnvConfig { network: NetworkModel::CopperPlate, reward_scale: 2000.0, ..Default::default() };
        (0..n)
            .map(|k| {
                let mut r = ChaCha8Rng::seed_from_u64(k as u64);
                let smp = sample(&fams[k % 2], k as u64);
                let mut p = |_: &_, _: &_, _: &[f64]| (0..3).map(|_| r.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
                rollout(&mut p, &spec, &smp, &[], &env).unwrap()
            })
            .collect()
    }

    fn small_cfg() -> DiscriminatorConfig {
        DiscriminatorConfig { gcn_hidden: 4, hidden: 8, ..DiscriminatorConfig::default() }
    }

    #[test]
    fn dataset_construction() {
        let l = learner();
        let tr = traces(2, 5);
        let one = build_dataset(&tr[..1], &l, 0.5).unwrap();
        assert_eq!(one.examples.len(), 5);
        assert_eq!(one.traces[0].target, l.encode_trace(&tr[0]).unwrap().mu);
        let two = build_dataset(&tr, &l, 0.5).unwrap();
        assert_eq!(two.examples.len(), 10);
        assert_eq!(two.prefix(&two.examples[2]).len(), 3);
        let mut empty = tr[0].clone();
        empty.transitions.clear();
        assert!(matches!(build_dataset(&[empty], &l, 0.5), Err(DiscriminatorError::EmptyTrace(_))));
    }

    #[test]
    fn split_is_deterministic() {
        assert_eq!(split_of("f0-s1", 0.5), split_of("f0-s1", 0.5));
        assert_eq!(split_of("anything", 1.0), Split::Train);
        assert_eq!(split_of("anything", 0.0), Split::HeldOut);
    }

    #[test]
    fn nearest_family_rules() {
        let mut c = BTreeMap::new();
        c.insert(0, vec![0.0, 0.0]);
        c.insert(1, vec![4.0, 0.0]);
        let (id, d) = nearest_family(&[1.0, 0.0], &c).unwrap();
        assert_eq!((id, d[&0]), (0, 1.0));
        assert_eq!(nearest_family(&[2.0, 0.0], &c).unwrap().0, 0);
        assert_eq!(nearest_family(&[4.0, 0.0], &c).unwrap(), (1, [(0, 4.0), (1, 0.0)].into_iter().collect()));
        assert!(nearest_family(&[0.0], &BTreeMap::new()).is_err());
    }

    #[test]
    fn loss_gradient_checks() {
        let tr = traces(2, 3);
        let d = Discriminator::new(3, 2, small_cfg(), 1);
        let items: Vec<Experience> = experiences(&tr[0], 0);
        let items2: Vec<Experience> = experiences(&tr[1], 1);
        let prefixes = vec![items.iter().take(2).collect::<Vec<_>>(), items2.iter().collect()];
        let targets = Matrix::from_rows(&[vec![0.5, -1.0], vec![0.1, 0.2]]);
        let err = grad_check(&d.params, |tape, b| d.loss(tape, b, &prefixes, &targets), 1e-6);
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn fits_a_constant_target_and_is_deterministic() {
        let tr = traces(4, 4);
        let l = learner();
        let mut data = build_dataset(&tr, &l, 1.0).unwrap();
        for t in &mut data.traces {
            t.target = vec![0.3, -0.7];
        }
        let mut d = Discriminator::new(3, 2, DiscriminatorConfig { epochs: 3000, lr: 1e-3, ..small_cfg() }, 2);
        let before = d.params.checksum();
        let mut zero = Discriminator::new(3, 2, DiscriminatorConfig { epochs: 0, ..small_cfg() }, 2);
        zero.train(&data, 0).unwrap();
        assert_eq!(zero.params.checksum(), before);
        let rep = d.train(&data, 0).unwrap();
        assert_eq!(rep.curve.len(), 3000);
        let all: Vec<&PrefixExample> = data.examples.iter().collect();
        let ev = d.evaluate(&data, &all).unwrap();
        assert!(ev.mse < 1e-4, "{}", ev.mse);
        let p = data.prefix(&data.examples[1]);
        assert_eq!(d.infer(&p).unwrap(), d.infer(&p).unwrap());
        assert!(d.infer(&[]).is_err());
        let full = data.prefix(&data.examples[3]);
        assert_eq!(d.infer(&full[..1]).unwrap().len(), 2);
    }

    #[test]
    fn guided_rollout_runs_with_online_updates() {
        let spec = three_bus_ring();
        let fam = &make_demo_families(4, &spec)[0];
        let l = learner();
        let mut d = Discriminator::new(3, 2, DiscriminatorConfig { online_update: true, ..small_cfg() }, 3);
        let before = d.params.checksum();
        let env = EnvConfig { network: NetworkModel::CopperPlate, reward_scale: 2000.0, ..Default::default() };
        let (cost, zs) = guided_rollout(&l, &mut d, &spec, &sample(fam, 1), &env).unwrap();
        assert!(cost > 0.0);
        assert_eq!(zs.len(), 4);
        assert_eq!(zs[0], vec![0.0; 2]);
        assert_ne!(d.params.checksum(), before);
    }
}
