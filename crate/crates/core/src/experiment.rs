//! Desk-scale learning study on the three-bus ring: meta-training, oracle comparison,
//! latent geometry, adaptation and discriminator evaluation.

use crate::baselines::{ops_oracle, optimality, BaselineError, DpDiscretization, OracleNetwork};
use crate::discriminator::{build_dataset, Discriminator, DiscriminatorConfig, DiscriminatorError, PrefixExample, Split};
use crate::env::{nominal_stage_cost, EnvConfig, EpisodeTrace, NetworkModel};
use crate::grid::{three_bus_ring, GridSpec};
use crate::meta::{
    euclidean, family_embeddings, meta_test, meta_train, separation_ratio, AdaptOptions, MetaConfig, MetaError,
    MetaLearner, TrainOutcome, TrainSchedule,
};
use crate::sac::{ActMode, SacConfig};
use crate::scenario::{expected_sample, make_demo_families, sample, ScenarioFamily};
use crate::seed::{derive_seed, stream};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::time::Instant;

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Meta(#[from] MetaError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error(transparent)]
    Discriminator(#[from] DiscriminatorError),
    #[error("need at least two training families, got {0}")]
    TooFewFamilies(usize),
}

/// Everything a desk run needs besides the seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Desk {
    pub spec: GridSpec,
    pub train: Vec<ScenarioFamily>,
    pub held_out: ScenarioFamily,
    pub env: EnvConfig,
    pub sac: SacConfig,
    pub meta: MetaConfig,
    pub schedule: TrainSchedule,
    pub oracle: DpDiscretization,
    /// Adaptation rounds before the evaluation episode is scored.
    pub eval_rounds: usize,
}

impl Desk {
    /// Three-bus ring, eight stages, noiseless evening-peak and renewable-light
    /// families for training and renewable-heavy held out.
    pub fn standard() -> Self {
        let spec = three_bus_ring();
        let all = make_demo_families(8, &spec);
        let noiseless = |f: &ScenarioFamily| {
            let mut f = f.clone();
            f.sigma = 0.0;
            f.outages.clear();
            f
        };
        let train = vec![noiseless(&all[0]), noiseless(&all[2])];
        let scale = nominal_stage_cost(&spec, &expected_sample(&train[0]).profile);
        Self {
            env: EnvConfig { network: NetworkModel::CopperPlate, reward_scale: scale, ..EnvConfig::default() },
            sac: SacConfig {
                alpha: 0.05,
                target_period: 1,
                critic_lr: 1e-3,
                actor_lr: 1e-3,
                ..SacConfig::default()
            },
            meta: MetaConfig { beta: 0.01, encoder_lr: 1e-3, ..MetaConfig::default() },
            schedule: TrainSchedule { iterations: 100, episodes_per_task: 1, train_steps: 8, warmup_iterations: 5, checkpoint_every: 0 },
            oracle: DpDiscretization {
                energy_res: 2.5,
                tg_res: 10.0,
                re_step: 0.125,
                network: OracleNetwork::CopperPlate,
                guard: 5_000_000,
            },
            eval_rounds: 2,
            held_out: all[1].clone(),
            train,
            spec,
        }
    }

    pub fn train(&self, seed: u64) -> Result<(MetaLearner, TrainOutcome, f64), ExperimentError> {
        if self.train.len() < 2 {
            return Err(ExperimentError::TooFewFamilies(self.train.len()));
        }
        let t = Instant::now();
        let mut learner = MetaLearner::for_spec(&self.spec, self.sac.clone(), self.meta.clone(), seed)?;
        let out = meta_train(&mut learner, &self.spec, &self.train, &self.env, &self.schedule, seed, |_, _| Ok(()))?;
        Ok((learner, out, t.elapsed().as_secs_f64()))
    }

    /// Adapted agent cost against the DP oracle on each training family's expected profile.
    pub fn family_optimality(&self, learner: &MetaLearner) -> Result<Vec<FamilyScore>, ExperimentError> {
        let opts = AdaptOptions { rounds: self.eval_rounds, sample_z: false };
        let mut out = Vec::new();
        for f in &self.train {
            let smp = expected_sample(f);
            let ops = ops_oracle(&self.spec, &smp, &self.oracle)?.cost;
            let run = meta_test(learner, &self.spec, |_| smp.clone(), &self.env, &opts, 0)?;
            let agent = run.rounds.last().map_or(f64::INFINITY, |r| r.cost);
            out.push(FamilyScore {
                family_id: f.id,
                label: f.label.clone(),
                ops_cost: ops,
                agent_cost: agent,
                optimality: optimality(ops, agent)?,
            });
        }
        Ok(out)
    }

    /// Stochastic-policy traces per training family, each with a fresh prior draw of `z`.
    pub fn exploration_traces(&self, learner: &MetaLearner, per_family: usize, seed: u64) -> Result<Vec<EpisodeTrace>, ExperimentError> {
        let mut rng = stream(seed, "explore");
        let mut traces = Vec::with_capacity(per_family * self.train.len());
        for f in &self.train {
            for k in 0..per_family {
                let smp = sample(f, derive_seed(seed, &format!("explore/{}/{k}", f.id)));
                let z: Vec<f64> = (0..learner.config.z_dim).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
                let act = stream(seed, &format!("explore-act/{}/{k}", f.id));
                traces.push(learner.rollout(&self.spec, &smp, &z, &self.env, ActMode::Stochastic, act)?);
            }
        }
        Ok(traces)
    }

    /// Inter-centroid distance over intra-family spread of per-trace posterior means.
    pub fn separation(&self, learner: &MetaLearner, per_family: usize, seed: u64) -> Result<f64, ExperimentError> {
        let traces = self.exploration_traces(learner, per_family, seed)?;
        let groups: BTreeMap<usize, Vec<Vec<f64>>> = family_embeddings(learner, &traces)?
            .into_iter()
            .map(|(k, v)| (k, v.into_iter().map(|p| p.mu).collect()))
            .collect();
        Ok(separation_ratio(&groups))
    }

    /// `trials` adaptation runs on the held-out family; each trial replays one sample.
    pub fn adaptation(&self, learner: &MetaLearner, trials: usize, rounds: usize, seed: u64) -> Result<AdaptationSummary, ExperimentError> {
        let opts = AdaptOptions { rounds, sample_z: true };
        let mut curves = Vec::with_capacity(trials);
        for k in 0..trials {
            let s = derive_seed(seed, &format!("adapt-trial/{k}"));
            let smp = sample(&self.held_out, s);
            let run = meta_test(learner, &self.spec, |_| smp.clone(), &self.env, &opts, s)?;
            curves.push(run.rounds.iter().map(|r| r.cost).collect::<Vec<f64>>());
        }
        let n = curves.len().max(1) as f64;
        let mean_curve: Vec<f64> = (0..=rounds).map(|r| curves.iter().map(|c| c[r]).sum::<f64>() / n).collect();
        let round0 = mean_curve[0];
        let later = if rounds == 0 { round0 } else { mean_curve[1..].iter().sum::<f64>() / rounds as f64 };
        Ok(AdaptationSummary { trials, mean_curve, round0, later })
    }

    /// Train a discriminator on prefixes of exploration traces and score held-out prefixes.
    pub fn discriminator_study(
        &self,
        learner: &MetaLearner,
        per_family: usize,
        cfg: &DiscriminatorConfig,
        seed: u64,
    ) -> Result<DiscriminatorStudy, ExperimentError> {
        let traces = self.exploration_traces(learner, per_family, derive_seed(seed, "disc-traces"))?;
        let data = build_dataset(&traces, learner, cfg.train_fraction)?;
        let mut disc = Discriminator::new(learner.agent.act_dim(), learner.config.z_dim, cfg.clone(), derive_seed(seed, "disc"));
        let report = disc.train(&data, derive_seed(seed, "disc-train"))?;
        let held = data.split(Split::HeldOut);
        let horizon = data.traces.first().map_or(0, |t| t.items.len());
        let pick = |len: usize| -> Vec<&PrefixExample> { held.iter().copied().filter(|e| e.len == len).collect() };
        let single = disc.evaluate(&data, &pick(1))?;
        let half = disc.evaluate(&data, &pick(horizon.div_ceil(2)))?;
        let full = disc.evaluate(&data, &pick(horizon))?;
        let cents = data.centroids();
        let cs: Vec<&Vec<f64>> = cents.values().collect();
        let mut dists = Vec::new();
        for i in 0..cs.len() {
            for j in i + 1..cs.len() {
                dists.push(euclidean(cs[i], cs[j]));
            }
        }
        let inter = if dists.is_empty() { 0.0 } else { dists.iter().sum::<f64>() / dists.len() as f64 };
        Ok(DiscriminatorStudy {
            held_out_prefixes: held.len(),
            accuracy_single: single.accuracy,
            accuracy_half: half.accuracy,
            rmse_full: full.rmse,
            half_centroid_distance: inter / 2.0,
            final_train_loss: report.curve.last().copied().unwrap_or(f64::NAN),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyScore {
    pub family_id: usize,
    pub label: String,
    pub ops_cost: f64,
    pub agent_cost: f64,
    pub optimality: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptationSummary {
    pub trials: usize,
    /// Mean cost per round across trials.
    pub mean_curve: Vec<f64>,
    pub round0: f64,
    /// Mean over rounds `1..=rounds`.
    pub later: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorStudy {
    pub held_out_prefixes: usize,
    pub accuracy_single: f64,
    pub accuracy_half: f64,
    pub rmse_full: f64,
    pub half_centroid_distance: f64,
    pub final_train_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub train_seconds: f64,
    pub scores: Vec<FamilyScore>,
    pub separation: f64,
}

impl SeedRun {
    pub fn min_optimality(&self) -> f64 {
        self.scores.iter().map(|s| s.optimality).fold(f64::INFINITY, f64::min)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeskReport {
    pub runs: Vec<SeedRun>,
    pub adaptation: AdaptationSummary,
    pub discriminator: DiscriminatorStudy,
}

/// Train once per seed, then run adaptation and the discriminator study on the first seed's learner.
pub fn run_desk(desk: &Desk, seeds: &[u64], mut progress: impl FnMut(&str)) -> Result<DeskReport, ExperimentError> {
    let mut runs = Vec::new();
    let mut first = None;
    for &seed in seeds {
        let (learner, _, secs) = desk.train(seed)?;
        let scores = desk.family_optimality(&learner)?;
        let separation = desk.separation(&learner, 20, seed)?;
        let run = SeedRun { seed, train_seconds: secs, scores, separation };
        progress(&format!(
            "seed {seed}: trained in {secs:.1}s, min optimality {:.2}%, separation {:.2}",
            run.min_optimality(),
            run.separation
        ));
        runs.push(run);
        if first.is_none() {
            first = Some((learner, seed));
        }
    }
    let (learner, seed) = first.ok_or(ExperimentError::TooFewFamilies(0))?;
    let adaptation = desk.adaptation(&learner, 10, 5, seed)?;
    progress(&format!("adaptation: round 0 {:.1}, rounds 1..5 {:.1}", adaptation.round0, adaptation.later));
    let discriminator = desk.discriminator_study(&learner, 120, &DiscriminatorConfig::default(), seed)?;
    progress(&format!(
        "discriminator: {} held-out prefixes, acc len-1 {:.3}, acc half {:.3}, rmse {:.4} vs {:.4}",
        discriminator.held_out_prefixes,
        discriminator.accuracy_single,
        discriminator.accuracy_half,
        discriminator.rmse_full,
        discriminator.half_centroid_distance
    ));
    Ok(DeskReport { runs, adaptation, discriminator })
}
