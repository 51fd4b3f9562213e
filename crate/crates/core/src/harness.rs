//! Experiment configuration, run manifests and the five pipeline commands behind the CLI.

use crate::baselines::{mpc_episode_cost, ops_oracle, optimality, BaselineError, DpDiscretization, MpcConfig, OracleNetwork};
use crate::discriminator::{guided_rollout, Discriminator, DiscriminatorConfig, DiscriminatorError};
use crate::env::{nominal_stage_cost, EnvConfig, NetworkModel};
use crate::experiment::{Desk, ExperimentError};
use crate::grid::{three_bus_ring, GridError, GridSpec};
use crate::meta::{
    meta_test, meta_train, write_embeddings_csv, write_log_jsonl, AdaptOptions, MetaConfig, MetaError,
    MetaLearner, TrainSchedule,
};
use crate::sac::SacConfig;
use crate::scenario::{expected_sample, load_families, make_demo_families, sample, ScenarioError, ScenarioFamily};
use crate::seed::derive_seed;
use crate::verify::{self, Check};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("config {path}: {message}")]
    Config { path: PathBuf, message: String },
    #[error("referenced path does not exist: {0}")]
    MissingPath(PathBuf),
    #[error("unknown family id {0}")]
    UnknownFamily(usize),
    #[error("family {id} has horizon {got}, expected {want}")]
    Horizon { id: usize, got: usize, want: usize },
    #[error("{0} of the verification checks failed")]
    VerifyFailed(usize),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Meta(#[from] MetaError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error(transparent)]
    Discriminator(#[from] DiscriminatorError),
    #[error(transparent)]
    Experiment(#[from] ExperimentError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Sampled episodes per family in `eval`.
    pub episodes: usize,
    /// Adaptation rounds before an evaluation episode is scored.
    pub rounds: usize,
    pub adapt_trials: usize,
    pub adapt_rounds: usize,
    /// Traces per training family for the embedding export.
    pub embedding_traces: usize,
    /// Draw `z` from the posterior in `adapt`; the evaluation episode always uses the mean.
    pub adapt_sample_z: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { episodes: 3, rounds: 2, adapt_trials: 10, adapt_rounds: 5, embedding_traces: 10, adapt_sample_z: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub run_id: String,
    pub seed: u64,
    /// Output root; the run writes into `out/run_id`.
    pub out: PathBuf,
    /// Grid TOML; the built-in three-bus ring when absent.
    pub grid: Option<PathBuf>,
    /// Scenario family TOML files; the demonstration families when empty.
    pub families: Vec<PathBuf>,
    pub horizon: usize,
    pub train_families: Vec<usize>,
    pub held_out_family: usize,
    /// Zero the noise and outages of training families.
    pub noiseless_training: bool,
    pub env: EnvConfig,
    pub sac: SacConfig,
    pub meta: MetaConfig,
    pub schedule: TrainSchedule,
    pub discriminator: DiscriminatorConfig,
    pub oracle: DpDiscretization,
    pub mpc: MpcConfig,
    pub mpc_horizons: Vec<usize>,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let desk = Desk::standard();
        Self {
            run_id: "desk".into(),
            seed: 1,
            out: PathBuf::from("runs"),
            grid: None,
            families: Vec::new(),
            horizon: 8,
            train_families: vec![0, 2],
            held_out_family: 1,
            noiseless_training: true,
            env: EnvConfig { reward_scale: 0.0, ..desk.env },
            sac: desk.sac,
            meta: desk.meta,
            schedule: desk.schedule,
            discriminator: DiscriminatorConfig::default(),
            oracle: desk.oracle,
            mpc: MpcConfig { network: OracleNetwork::CopperPlate, ..MpcConfig::default() },
            mpc_horizons: vec![1, 2, 4, 8],
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parse a TOML file; relative paths inside resolve against its directory and must exist.
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let mut cfg: Self =
            toml::from_str(&text).map_err(|e| HarnessError::Config { path: path.to_path_buf(), message: e.to_string() })?;
        let base = path.parent().unwrap_or(Path::new("."));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(g) = cfg.grid.as_mut() {
            fix(g);
        }
        cfg.families.iter_mut().for_each(fix);
        cfg.check_paths()?;
        Ok(cfg)
    }

    pub fn check_paths(&self) -> Result<(), HarnessError> {
        for p in self.grid.iter().chain(&self.families) {
            if !p.exists() {
                return Err(HarnessError::MissingPath(p.clone()));
            }
        }
        Ok(())
    }

    pub fn run_dir(&self) -> PathBuf {
        self.out.join(&self.run_id)
    }

    /// SHA-256 of the resolved configuration serialized as TOML.
    pub fn hash(&self) -> String {
        let text = toml::to_string(self).unwrap_or_default();
        hex(&Sha256::digest(text.as_bytes()))
    }

    pub fn grid_spec(&self) -> Result<GridSpec, HarnessError> {
        Ok(match &self.grid {
            Some(p) => GridSpec::load(p)?,
            None => three_bus_ring(),
        })
    }

    pub fn all_families(&self, spec: &GridSpec) -> Result<Vec<ScenarioFamily>, HarnessError> {
        let fams = if self.families.is_empty() {
            make_demo_families(self.horizon, spec)
        } else {
            let mut v = Vec::new();
            for p in &self.families {
                v.extend(load_families(p)?);
            }
            v
        };
        for f in &fams {
            if f.horizon != self.horizon {
                return Err(HarnessError::Horizon { id: f.id, got: f.horizon, want: self.horizon });
            }
            f.check_against(spec)?;
        }
        Ok(fams)
    }

    pub fn family(&self, fams: &[ScenarioFamily], id: usize) -> Result<ScenarioFamily, HarnessError> {
        fams.iter().find(|f| f.id == id).cloned().ok_or(HarnessError::UnknownFamily(id))
    }

    /// Resolved study setup. A non-positive reward scale is replaced by the nominal
    /// stage cost of the first training family's expected profile.
    pub fn desk(&self) -> Result<Desk, HarnessError> {
        let spec = self.grid_spec()?;
        let fams = self.all_families(&spec)?;
        let mut train = Vec::new();
        for &id in &self.train_families {
            let mut f = self.family(&fams, id)?;
            if self.noiseless_training {
                f.sigma = 0.0;
                f.outages.clear();
            }
            train.push(f);
        }
        let held_out = self.family(&fams, self.held_out_family)?;
        let mut env = self.env.clone();
        if env.reward_scale <= 0.0 {
            let first = train.first().ok_or(ExperimentError::TooFewFamilies(0))?;
            env.reward_scale = nominal_stage_cost(&spec, &expected_sample(first).profile).max(1.0);
        }
        Ok(Desk {
            spec,
            train,
            held_out,
            env,
            sac: self.sac.clone(),
            meta: self.meta.clone(),
            schedule: self.schedule.clone(),
            oracle: self.oracle.clone(),
            eval_rounds: self.eval.rounds,
        })
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub config_hash: String,
    pub version: String,
    pub seed: u64,
    /// Phase name to checkpoint paths, relative to the run directory.
    pub checkpoints: BTreeMap<String, Vec<String>>,
    pub files: Vec<String>,
    /// Phase name to wall-clock seconds.
    pub timings: BTreeMap<String, f64>,
}

impl RunManifest {
    pub const FILE: &'static str = "manifest.json";

    /// The manifest already in `dir`, or a fresh one.
    pub fn open(dir: &Path, cfg: &ExperimentConfig) -> Self {
        let existing = fs::read_to_string(dir.join(Self::FILE)).ok().and_then(|s| serde_json::from_str::<Self>(&s).ok());
        let mut m = existing.unwrap_or_default();
        m.run_id = cfg.run_id.clone();
        m.config_hash = cfg.hash();
        m.version = env!("CARGO_PKG_VERSION").to_string();
        m.seed = cfg.seed;
        m
    }

    pub fn record_file(&mut self, name: &str) {
        if !self.files.iter().any(|f| f == name) {
            self.files.push(name.to_string());
            self.files.sort();
        }
    }

    /// Write through a temporary file and rename it into place.
    pub fn save(&self, dir: &Path) -> Result<(), HarnessError> {
        let tmp = dir.join(".manifest.json.tmp");
        let text = serde_json::to_string_pretty(self)?;
        fs::write(&tmp, text).map_err(io_err(&tmp))?;
        let dst = dir.join(Self::FILE);
        fs::rename(&tmp, &dst).map_err(io_err(&dst))
    }
}

/// Output sink for one command: every file written goes through here and into the manifest.
pub struct Run {
    pub cfg: ExperimentConfig,
    pub dir: PathBuf,
    pub manifest: RunManifest,
}

impl Run {
    pub fn start(cfg: ExperimentConfig) -> Result<Self, HarnessError> {
        let dir = cfg.run_dir();
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let manifest = RunManifest::open(&dir, &cfg);
        Ok(Self { cfg, dir, manifest })
    }

    pub fn write(&mut self, name: &str, f: impl FnOnce(&mut Vec<u8>) -> Result<(), HarnessError>) -> Result<PathBuf, HarnessError> {
        let mut buf = Vec::new();
        f(&mut buf)?;
        let path = self.dir.join(name);
        if let Some(p) = path.parent() {
            fs::create_dir_all(p).map_err(io_err(p))?;
        }
        fs::write(&path, buf).map_err(io_err(&path))?;
        self.manifest.record_file(name);
        Ok(path)
    }

    pub fn finish(&mut self, phase: &str, started: Instant) -> Result<(), HarnessError> {
        self.manifest.timings.insert(phase.to_string(), started.elapsed().as_secs_f64());
        self.manifest.save(&self.dir)
    }

    fn checkpoint(&mut self, phase: &str, name: &str, learner: &MetaLearner) -> Result<(), HarnessError> {
        let path = self.dir.join(name);
        if let Some(p) = path.parent() {
            fs::create_dir_all(p).map_err(io_err(p))?;
        }
        learner.save(&path)?;
        self.manifest.record_file(name);
        let list = self.manifest.checkpoints.entry(phase.to_string()).or_default();
        if !list.iter().any(|c| c == name) {
            list.push(name.to_string());
        }
        Ok(())
    }

    pub fn default_checkpoint(&self) -> PathBuf {
        self.dir.join("checkpoints/final.json")
    }
}

fn load_learner(path: &Path) -> Result<MetaLearner, HarnessError> {
    if !path.exists() {
        return Err(HarnessError::MissingPath(path.to_path_buf()));
    }
    Ok(MetaLearner::load(path)?)
}

/// Meta-training. Writes periodic and final checkpoints, the training log and
/// posterior embeddings of exploration traces.
pub fn cmd_train(cfg: ExperimentConfig, mut progress: impl FnMut(&str)) -> Result<RunManifest, HarnessError> {
    let started = Instant::now();
    let desk = cfg.desk()?;
    let mut run = Run::start(cfg)?;
    let seed = run.cfg.seed;
    let mut learner = MetaLearner::for_spec(&desk.spec, desk.sac.clone(), desk.meta.clone(), seed)?;
    let every = desk.schedule.checkpoint_every;
    let dir = run.dir.clone();
    let mut periodic = Vec::new();
    let outcome = meta_train(&mut learner, &desk.spec, &desk.train, &desk.env, &desk.schedule, seed, |l, rec| {
        if every > 0 && (rec.iteration + 1) % every == 0 {
            let name = format!("checkpoints/iter_{:05}.json", rec.iteration + 1);
            let path = dir.join(&name);
            fs::create_dir_all(dir.join("checkpoints"))?;
            l.save(&path)?;
            periodic.push(name);
        }
        if rec.iteration % 10 == 0 {
            progress(&format!("iteration {} cost {:.1} critic {:.4}", rec.iteration, rec.rollout_cost, rec.critic_loss));
        }
        Ok(())
    })?;
    for name in periodic {
        run.manifest.record_file(&name);
        run.manifest.checkpoints.entry("train".into()).or_default().push(name);
    }
    run.checkpoint("train", "checkpoints/final.json", &learner)?;
    run.write("train_log.jsonl", |b| Ok(write_log_jsonl(&outcome.log, b)?))?;

    let traces = desk.exploration_traces(&learner, run.cfg.eval.embedding_traces, derive_seed(seed, "embeddings"))?;
    let rows = traces
        .iter()
        .map(|t| Ok((t.family_id, t.id.clone(), learner.encode_trace(t)?)))
        .collect::<Result<Vec<_>, MetaError>>()?;
    run.write("embeddings.csv", |b| Ok(write_embeddings_csv(&rows, b)?))?;
    run.finish("train", started)?;
    Ok(run.manifest)
}

/// One evaluation table row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalRow {
    pub family_id: usize,
    pub label: String,
    pub meta_grl: f64,
    pub mpc: Vec<(usize, f64)>,
    pub ops: Option<f64>,
    pub optimality: Option<f64>,
}

/// Mean episode cost per family for the meta-learner, each MPC horizon and the oracle.
pub fn cmd_eval(
    cfg: ExperimentConfig,
    checkpoint: Option<&Path>,
    families: Option<&[usize]>,
) -> Result<(RunManifest, Vec<EvalRow>), HarnessError> {
    let started = Instant::now();
    let desk = cfg.desk()?;
    let mut run = Run::start(cfg)?;
    let ck = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| run.default_checkpoint());
    let learner = load_learner(&ck)?;
    let all = run.cfg.all_families(&desk.spec)?;
    let ids: Vec<usize> = families.map(<[usize]>::to_vec).unwrap_or_else(|| run.cfg.train_families.clone());
    let opts = AdaptOptions { rounds: run.cfg.eval.rounds, sample_z: false };
    let mut rows = Vec::new();
    for id in ids {
        let fam = match desk.train.iter().find(|f| f.id == id) {
            Some(f) => f.clone(),
            None => run.cfg.family(&all, id)?,
        };
        let n = run.cfg.eval.episodes.max(1);
        let mut agent = 0.0;
        let mut mpc = vec![0.0; run.cfg.mpc_horizons.len()];
        let mut ops = Some(0.0);
        for e in 0..n {
            let s = derive_seed(run.cfg.seed, &format!("eval/{id}/{e}"));
            let smp = sample(&fam, s);
            let out = meta_test(&learner, &desk.spec, |_| smp.clone(), &desk.env, &opts, s)?;
            agent += out.rounds.last().map_or(f64::NAN, |r| r.cost);
            for (k, &h) in run.cfg.mpc_horizons.iter().enumerate() {
                let mc = MpcConfig { horizon: h.min(smp.horizon()), ..run.cfg.mpc.clone() };
                mpc[k] += mpc_episode_cost(&desk.spec, &fam, &smp, &mc)?.0;
            }
            ops = match (ops, ops_oracle(&desk.spec, &smp, &desk.oracle)) {
                (Some(acc), Ok(r)) => Some(acc + r.cost),
                (_, Err(BaselineError::Infeasible { .. }) | Err(BaselineError::TooLarge { .. })) => None,
                (_, Err(e)) => return Err(e.into()),
                (None, Ok(_)) => None,
            };
        }
        let nf = n as f64;
        let ops = ops.map(|c| c / nf);
        let agent = agent / nf;
        rows.push(EvalRow {
            family_id: id,
            label: fam.label.clone(),
            meta_grl: agent,
            mpc: run.cfg.mpc_horizons.iter().zip(&mpc).map(|(&h, c)| (h, c / nf)).collect(),
            optimality: ops.and_then(|o| optimality(o, agent).ok()),
            ops,
        });
    }
    let horizons = run.cfg.mpc_horizons.clone();
    run.write("eval.csv", |b| {
        let mut w = csv::Writer::from_writer(b);
        let mut header = vec!["family_id".to_string(), "label".into(), "meta_grl".into()];
        header.extend(horizons.iter().map(|h| format!("mpc_{h}")));
        header.extend(["ops".to_string(), "optimality_pct".into()]);
        w.write_record(&header)?;
        for r in &rows {
            let mut rec = vec![r.family_id.to_string(), r.label.clone(), r.meta_grl.to_string()];
            rec.extend(r.mpc.iter().map(|(_, c)| c.to_string()));
            rec.push(r.ops.map_or("unavailable".into(), |c| c.to_string()));
            rec.push(r.optimality.map_or("unavailable".into(), |c| format!("{c:.4}")));
            w.write_record(&rec)?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    })?;
    run.finish("eval", started)?;
    Ok((run.manifest, rows))
}

/// Adaptation curves on a new family; optionally the discriminator-guided variant per trial.
pub fn cmd_adapt(
    cfg: ExperimentConfig,
    checkpoint: Option<&Path>,
    family: Option<usize>,
    rounds: Option<usize>,
    with_discriminator: bool,
) -> Result<(RunManifest, Vec<f64>), HarnessError> {
    let started = Instant::now();
    let desk = cfg.desk()?;
    let mut run = Run::start(cfg)?;
    let ck = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| run.default_checkpoint());
    let learner = load_learner(&ck)?;
    let all = run.cfg.all_families(&desk.spec)?;
    let fam = match family {
        Some(id) => run.cfg.family(&all, id)?,
        None => desk.held_out.clone(),
    };
    let k = rounds.unwrap_or(run.cfg.eval.adapt_rounds);
    let opts = AdaptOptions { rounds: k, sample_z: run.cfg.eval.adapt_sample_z };
    let trials = run.cfg.eval.adapt_trials.max(1);
    let mut rows = Vec::new();
    let mut guided = Vec::new();
    let mut disc = None;
    if with_discriminator {
        let per = (run.cfg.eval.embedding_traces * 4).max(8);
        let traces = desk.exploration_traces(&learner, per, derive_seed(run.cfg.seed, "disc-traces"))?;
        let data = crate::discriminator::build_dataset(&traces, &learner, run.cfg.discriminator.train_fraction)?;
        let mut d = Discriminator::new(learner.agent.act_dim(), learner.config.z_dim, run.cfg.discriminator.clone(), derive_seed(run.cfg.seed, "disc"));
        d.train(&data, derive_seed(run.cfg.seed, "disc-train"))?;
        disc = Some(d);
    }
    for t in 0..trials {
        let s = derive_seed(run.cfg.seed, &format!("adapt-trial/{t}"));
        let smp = sample(&fam, s);
        let out = meta_test(&learner, &desk.spec, |_| smp.clone(), &desk.env, &opts, s)?;
        rows.push(out.rounds.iter().map(|r| r.cost).collect::<Vec<f64>>());
        if let Some(d) = disc.as_mut() {
            guided.push(guided_rollout(&learner, d, &desk.spec, &smp, &desk.env)?.0);
        }
    }
    let curve: Vec<f64> = (0..=k).map(|r| rows.iter().map(|c| c[r]).sum::<f64>() / rows.len() as f64).collect();
    run.write("adapt.csv", |b| {
        let mut w = csv::Writer::from_writer(b);
        w.write_record(["round", "mean_cost", "trials"])?;
        for (r, c) in curve.iter().enumerate() {
            w.write_record([r.to_string(), c.to_string(), rows.len().to_string()])?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    })?;
    run.write("adapt_trials.csv", |b| {
        let mut w = csv::Writer::from_writer(b);
        w.write_record(["trial", "round", "cost"])?;
        for (t, c) in rows.iter().enumerate() {
            for (r, x) in c.iter().enumerate() {
                w.write_record([t.to_string(), r.to_string(), x.to_string()])?;
            }
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    })?;
    if with_discriminator {
        run.write("adapt_guided.csv", |b| {
            let mut w = csv::Writer::from_writer(b);
            w.write_record(["trial", "guided_cost", "round0_cost"])?;
            for (t, g) in guided.iter().enumerate() {
                w.write_record([t.to_string(), g.to_string(), rows[t][0].to_string()])?;
            }
            w.flush().map_err(csv::Error::from)?;
            Ok(())
        })?;
    }
    run.finish("adapt", started)?;
    Ok((run.manifest, curve))
}

/// Perfect-foresight oracle on each family's expected profile; one schedule CSV per family.
pub fn cmd_oracle(cfg: ExperimentConfig, families: Option<&[usize]>) -> Result<(RunManifest, Vec<(usize, f64)>), HarnessError> {
    let started = Instant::now();
    let spec = cfg.grid_spec()?;
    let all = cfg.all_families(&spec)?;
    let mut run = Run::start(cfg)?;
    let ids: Vec<usize> = families.map(<[usize]>::to_vec).unwrap_or_else(|| all.iter().map(|f| f.id).collect());
    let mut costs = Vec::new();
    for id in ids {
        let f = run.cfg.family(&all, id)?;
        let smp = expected_sample(&f);
        let res = ops_oracle(&spec, &smp, &run.cfg.oracle)?;
        run.write(&format!("oracle/family_{id}.csv"), |b| Ok(res.write_csv(&spec, b)?))?;
        costs.push((id, res.cost));
    }
    run.write("oracle/summary.csv", |b| {
        let mut w = csv::Writer::from_writer(b);
        w.write_record(["family_id", "ops_cost"])?;
        for (id, c) in &costs {
            w.write_record([id.to_string(), c.to_string()])?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    })?;
    run.finish("oracle", started)?;
    Ok((run.manifest, costs))
}

/// Run the property suite; writes `verify.json` when an output directory is given.
/// Failing checks are reported in the result, not as an error.
pub fn cmd_verify(out: Option<&Path>) -> Result<Vec<Check>, HarnessError> {
    let checks = verify::run_all();
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let path = dir.join("verify.json");
        let mut f = fs::File::create(&path).map_err(io_err(&path))?;
        serde_json::to_writer_pretty(&mut f, &checks)?;
        f.write_all(b"\n").map_err(io_err(&path))?;
    }
    Ok(checks)
}

/// A configuration small enough for smoke tests: two iterations, tiny networks.
pub fn tiny_config(out: &Path) -> ExperimentConfig {
    ExperimentConfig {
        run_id: "tiny".into(),
        out: out.to_path_buf(),
        horizon: 4,
        sac: SacConfig { hidden: 8, gcn_hidden: 4, batch_size: 8, ..ExperimentConfig::default().sac },
        meta: MetaConfig { hidden: 8, gcn_hidden: 4, z_dim: 2, ..MetaConfig::default() },
        schedule: TrainSchedule { iterations: 4, episodes_per_task: 1, train_steps: 2, warmup_iterations: 2, checkpoint_every: 2 },
        discriminator: DiscriminatorConfig { epochs: 2, hidden: 8, gcn_hidden: 4, ..DiscriminatorConfig::default() },
        oracle: DpDiscretization { energy_res: 10.0, tg_res: 20.0, re_step: 0.5, ..ExperimentConfig::default().oracle },
        mpc: MpcConfig { outer_iters: 10, inner_iters: 50, network: OracleNetwork::CopperPlate, ..MpcConfig::default() },
        mpc_horizons: vec![1, 4],
        env: EnvConfig { network: NetworkModel::CopperPlate, reward_scale: 0.0, ..EnvConfig::default() },
        eval: EvalConfig { episodes: 1, rounds: 1, adapt_trials: 2, adapt_rounds: 2, embedding_traces: 2, adapt_sample_z: true },
        ..ExperimentConfig::default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = ExperimentConfig::default();
        let text = toml::to_string(&cfg).unwrap();
        let back: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn missing_grid_names_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("exp.toml");
        fs::write(&p, "grid = \"nowhere/grid.toml\"\n").unwrap();
        let err = ExperimentConfig::load(&p).unwrap_err().to_string();
        assert!(err.contains("nowhere/grid.toml"), "{err}");
    }

    #[test]
    fn oracle_against_itself_is_full_optimality() {
        let dir = tempfile::tempdir().unwrap();
        let (_, costs) = cmd_oracle(tiny_config(dir.path()), Some(&[0])).unwrap();
        assert_eq!(optimality(costs[0].1, costs[0].1).unwrap(), 100.0);
    }

    #[test]
    fn manifest_lists_checkpoints_and_files() {
        let dir = tempfile::tempdir().unwrap();
        let m = cmd_train(tiny_config(dir.path()), |_| {}).unwrap();
        assert!(m.checkpoints["train"].len() >= 2);
        for f in &m.files {
            assert!(dir.path().join("tiny").join(f).exists(), "{f}");
        }
        assert!(m.files.contains(&"train_log.jsonl".to_string()));
    }
}
