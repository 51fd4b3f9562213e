//! Multi-stage dispatch environment: state, bounded actions, stage cost,
//! device dynamics and network coupling.

use crate::grid::{apply_outage, BusKind, GridError, GridGraph, GridSpec};
use crate::matrix::Matrix;
use crate::powerflow::{
    check_dc_limits, check_limits, solve_ac_from, solve_dc, InjectionSet, PowerFlowConfig, PowerFlowError,
    ViolationReport,
};
use crate::scenario::{Profile, ScenarioSample};
use serde::{Deserialize, Serialize};
use std::io::Write;
use thiserror::Error;

/// Node feature columns, in order.
pub const FEATURE_NAMES: [&str; 8] = ["p_load", "q_load", "re_max", "p_tg_prev", "soc", "is_slack", "tod_sin", "tod_cos"];
pub const N_FEATURES: usize = FEATURE_NAMES.len();

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("sample/spec mismatch: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    PowerFlow(#[from] PowerFlowError),
    #[error("step called on a finished episode")]
    Finished,
    #[error("step called before reset")]
    NotReset,
    #[error("action has {got} components, expected {expected}")]
    ActionShape { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NetworkModel {
    #[default]
    Ac,
    Dc,
    CopperPlate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub network: NetworkModel,
    /// $ per MWh of violation; `None` means ten times the largest linear thermal cost coefficient.
    pub penalty_weight: Option<f64>,
    pub nonconvergence_penalty: f64,
    /// Rewards are `−total cost / reward_scale`.
    pub reward_scale: f64,
    /// End the episode at the first power-flow failure.
    pub hard_fail: bool,
    #[serde(skip)]
    pub powerflow: PowerFlowConfig,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            network: NetworkModel::Ac,
            penalty_weight: None,
            nonconvergence_penalty: 1e4,
            reward_scale: 1.0,
            hard_fail: false,
            powerflow: PowerFlowConfig::default(),
        }
    }
}

impl EnvConfig {
    pub fn penalty_weight(&self, spec: &GridSpec) -> f64 {
        self.penalty_weight
            .unwrap_or_else(|| 10.0 * spec.thermal.iter().map(|g| g.cost.1).fold(0.0, f64::max).max(1.0))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DispatchState {
    pub t: usize,
    pub horizon: usize,
    /// Thermal outputs of the previous stage, MW.
    pub p_tg_prev: Vec<f64>,
    /// Stored energy per storage unit, MWh.
    pub energy: Vec<f64>,
    pub load_p: Vec<f64>,
    pub load_q: Vec<f64>,
    pub re_max: Vec<f64>,
    /// In-service flag per line, in spec order.
    pub in_service: Vec<bool>,
}

impl DispatchState {
    pub fn is_terminal(&self) -> bool {
        self.t >= self.horizon
    }

    pub fn time_of_day(&self) -> (f64, f64) {
        let a = 2.0 * std::f64::consts::PI * self.t as f64 / self.horizon.max(1) as f64;
        (a.sin(), a.cos())
    }
}

/// Absolute setpoints. `u_es > 0` discharges, `u_es < 0` charges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DispatchAction {
    pub p_tg: Vec<f64>,
    pub p_re: Vec<f64>,
    pub u_es: Vec<f64>,
}

impl DispatchAction {
    pub fn zeros(spec: &GridSpec) -> Self {
        Self { p_tg: vec![0.0; spec.thermal.len()], p_re: vec![0.0; spec.renewable.len()], u_es: vec![0.0; spec.storage.len()] }
    }

    /// `[TG.., RE.., ES..]`.
    pub fn to_vec(&self) -> Vec<f64> {
        self.p_tg.iter().chain(&self.p_re).chain(&self.u_es).copied().collect()
    }

    pub fn from_vec(spec: &GridSpec, v: &[f64]) -> Result<Self, EnvError> {
        let (g, r, s) = (spec.thermal.len(), spec.renewable.len(), spec.storage.len());
        if v.len() != g + r + s {
            return Err(EnvError::ActionShape { expected: g + r + s, got: v.len() });
        }
        Ok(Self { p_tg: v[..g].to_vec(), p_re: v[g..g + r].to_vec(), u_es: v[g + r..].to_vec() })
    }

    pub fn charge(&self, k: usize) -> f64 {
        (-self.u_es[k]).max(0.0)
    }

    pub fn discharge(&self, k: usize) -> f64 {
        self.u_es[k].max(0.0)
    }
}

pub fn action_dim(spec: &GridSpec) -> usize {
    spec.thermal.len() + spec.renewable.len() + spec.storage.len()
}

/// Per-component bounds in action-vector order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    /// Thermal units whose ramp window missed the static range; their bounds collapse to the nearest static limit.
    pub empty: Vec<usize>,
}

impl ActionBox {
    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn contains(&self, v: &[f64], tol: f64) -> bool {
        v.iter().zip(self.lo.iter().zip(&self.hi)).all(|(x, (l, h))| *x >= l - tol && *x <= h + tol)
    }

    pub fn clamp(&self, v: &[f64]) -> Vec<f64> {
        v.iter().zip(self.lo.iter().zip(&self.hi)).map(|(x, (l, h))| x.clamp(*l, *h)).collect()
    }
}

/// Thermal ramp/static window for unit `k`, collapsed to the nearest static bound if empty.
fn tg_window(spec: &GridSpec, k: usize, prev: f64) -> (f64, f64, bool) {
    let g = &spec.thermal[k];
    let lo = g.p_bounds.0.max(prev + g.ramp.0);
    let hi = g.p_bounds.1.min(prev + g.ramp.1);
    if lo <= hi {
        (lo, hi, false)
    } else {
        let p = if prev + g.ramp.1 < g.p_bounds.0 { g.p_bounds.0 } else { g.p_bounds.1 };
        (p, p, true)
    }
}

pub fn feasible_action_box(state: &DispatchState, spec: &GridSpec) -> ActionBox {
    let dt = spec.dt();
    let mut lo = Vec::with_capacity(action_dim(spec));
    let mut hi = Vec::with_capacity(action_dim(spec));
    let mut empty = Vec::new();
    for k in 0..spec.thermal.len() {
        let (l, h, e) = tg_window(spec, k, state.p_tg_prev[k]);
        if e {
            empty.push(k);
        }
        lo.push(l);
        hi.push(h);
    }
    for k in 0..spec.renewable.len() {
        lo.push(0.0);
        hi.push(state.re_max[k]);
    }
    for (k, s) in spec.storage.iter().enumerate() {
        let e = state.energy[k];
        let charge = s.charge_max().min(((s.e_max() - e) / (s.eta_c() * dt)).max(0.0));
        let discharge = s.discharge_max().min(((e - s.e_min()) * s.eta_d() / dt).max(0.0));
        lo.push(-charge);
        hi.push(discharge);
    }
    ActionBox { lo, hi, empty }
}

/// Affine map of `raw ∈ [−1, 1]^dim` onto the box; `−1 ↦ lo`, `+1 ↦ hi`.
pub fn project_action(raw: &[f64], bx: &ActionBox, spec: &GridSpec) -> Result<DispatchAction, EnvError> {
    if raw.len() != bx.dim() {
        return Err(EnvError::ActionShape { expected: bx.dim(), got: raw.len() });
    }
    let v: Vec<f64> = raw
        .iter()
        .zip(bx.lo.iter().zip(&bx.hi))
        .map(|(r, (l, h))| {
            let r = r.clamp(-1.0, 1.0);
            (l + (r + 1.0) * 0.5 * (h - l)).clamp(*l, *h)
        })
        .collect();
    DispatchAction::from_vec(spec, &v)
}

/// Inverse of [`project_action`]; degenerate components map to 0.
pub fn raw_from_action(action: &DispatchAction, bx: &ActionBox) -> Vec<f64> {
    action
        .to_vec()
        .iter()
        .zip(bx.lo.iter().zip(&bx.hi))
        .map(|(x, (l, h))| if h > l { (2.0 * (x - l) / (h - l) - 1.0).clamp(-1.0, 1.0) } else { 0.0 })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub c_tg: f64,
    pub c_re: f64,
    pub c_es: f64,
    pub penalty: f64,
    pub total: f64,
}

/// Operating cost of one stage, without penalties.
pub fn stage_cost(action: &DispatchAction, state: &DispatchState, spec: &GridSpec) -> CostBreakdown {
    let dt = spec.dt();
    let c_tg = spec
        .thermal
        .iter()
        .zip(&action.p_tg)
        .map(|(g, &p)| g.cost.0 * p * p * dt + g.cost.1 * p * dt + g.cost.2)
        .sum();
    let c_re = spec
        .renewable
        .iter()
        .zip(action.p_re.iter().zip(&state.re_max))
        .map(|(r, (&p, &m))| r.curtailment_penalty * (m - p).max(0.0) * dt)
        .sum();
    let c_es = spec.storage.iter().zip(&action.u_es).map(|(s, u)| s.degradation_cost * u.abs() * dt).sum();
    CostBreakdown { c_tg, c_re, c_es, penalty: 0.0, total: c_tg + c_re + c_es }
}

fn profile_row(p: &Profile, t: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    (p.load_p.row(t).to_vec(), p.load_q.row(t).to_vec(), p.re_max.row(t).to_vec())
}

fn check_sample(spec: &GridSpec, sample: &ScenarioSample) -> Result<(), EnvError> {
    let p = &sample.profile;
    if sample.horizon() == 0 {
        return Err(EnvError::Mismatch("empty horizon".into()));
    }
    if p.load_p.cols() != spec.n_buses() || p.load_q.cols() != spec.n_buses() {
        return Err(EnvError::Mismatch(format!("{} load columns for {} buses", p.load_p.cols(), spec.n_buses())));
    }
    if p.re_max.cols() != spec.renewable.len() {
        return Err(EnvError::Mismatch(format!(
            "{} renewable columns for {} units",
            p.re_max.cols(),
            spec.renewable.len()
        )));
    }
    if p.load_q.rows() != p.load_p.rows() || p.re_max.rows() != p.load_p.rows() {
        return Err(EnvError::Mismatch("profile row counts differ".into()));
    }
    Ok(())
}

/// Initial state: zero thermal output, storage at its initial fraction, stage-0
/// outages applied.
pub fn reset(spec: &GridSpec, sample: &ScenarioSample) -> Result<DispatchState, EnvError> {
    check_sample(spec, sample)?;
    let all: Vec<usize> = sample.outages.iter().map(|o| o.line).collect();
    apply_outage(spec, &all)?;
    let active = apply_outage(spec, &sample.outages_at(0))?;
    let (load_p, load_q, re_max) = profile_row(&sample.profile, 0);
    Ok(DispatchState {
        t: 0,
        horizon: sample.horizon(),
        p_tg_prev: vec![0.0; spec.thermal.len()],
        energy: spec.storage.iter().map(|s| s.initial_energy()).collect(),
        load_p,
        load_q,
        re_max,
        in_service: active.in_service_mask(),
    })
}

fn adjacency_of(spec: &GridSpec, in_service: &[bool]) -> Matrix {
    let n = spec.n_buses();
    let mut a = Matrix::zeros(n, n);
    for (l, &on) in spec.lines.iter().zip(in_service) {
        if on {
            a[(l.from_bus, l.to_bus)] = 1.0;
            a[(l.to_bus, l.from_bus)] = 1.0;
        }
    }
    a
}

/// Per-bus feature matrix; powers in per-unit on the system base.
pub fn node_features(state: &DispatchState, spec: &GridSpec) -> Matrix {
    let n = spec.n_buses();
    let base = spec.base_mva();
    let mut x = Matrix::zeros(n, N_FEATURES);
    let (s, c) = state.time_of_day();
    for i in 0..n {
        x[(i, 0)] = state.load_p[i] / base;
        x[(i, 1)] = state.load_q[i] / base;
        x[(i, 5)] = if spec.buses[i].bus_kind == BusKind::Slack { 1.0 } else { 0.0 };
        x[(i, 6)] = s;
        x[(i, 7)] = c;
    }
    for (k, r) in spec.renewable.iter().enumerate() {
        x[(r.bus, 2)] += state.re_max[k] / base;
    }
    for (k, g) in spec.thermal.iter().enumerate() {
        x[(g.bus, 3)] += state.p_tg_prev[k] / base;
    }
    let mut counts = vec![0usize; n];
    for (k, st) in spec.storage.iter().enumerate() {
        x[(st.bus, 4)] += (state.energy[k] - st.e_min()) / (st.e_max() - st.e_min());
        counts[st.bus] += 1;
    }
    for i in 0..n {
        if counts[i] > 1 {
            x[(i, 4)] /= counts[i] as f64;
        }
    }
    x
}

pub fn state_graph(state: &DispatchState, spec: &GridSpec) -> GridGraph {
    GridGraph { adj: adjacency_of(spec, &state.in_service), eig: node_features(state, spec) }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepOutcome {
    pub next_state: DispatchState,
    pub reward: f64,
    pub breakdown: CostBreakdown,
    pub violations: ViolationReport,
    /// Action after the slack unit took up the balance.
    pub applied: DispatchAction,
    /// MW by which the slack unit left its feasible window.
    pub slack_excess: f64,
    pub converged: bool,
    pub done: bool,
}

/// Output the slack unit needs to balance a lossless network, MW.
pub fn lossless_slack_output(load_p: &[f64], action: &DispatchAction, slack_tg: Option<usize>) -> f64 {
    let mut need = load_p.iter().sum::<f64>() - action.p_re.iter().sum::<f64>() - action.u_es.iter().sum::<f64>();
    for (k, p) in action.p_tg.iter().enumerate() {
        if Some(k) != slack_tg {
            need -= p;
        }
    }
    need
}

/// Net active injection per bus in per-unit.
pub fn net_injections(spec: &GridSpec, load_p: &[f64], action: &DispatchAction) -> Vec<f64> {
    let base = spec.base_mva();
    let mut p: Vec<f64> = load_p.iter().map(|l| -l).collect();
    for (g, x) in spec.thermal.iter().zip(&action.p_tg) {
        p[g.bus] += x;
    }
    for (r, x) in spec.renewable.iter().zip(&action.p_re) {
        p[r.bus] += x;
    }
    for (s, x) in spec.storage.iter().zip(&action.u_es) {
        p[s.bus] += x;
    }
    p.iter().map(|x| x / base).collect()
}

/// One environment instance; owns its episode state.
#[derive(Debug, Clone)]
pub struct DispatchEnv {
    spec: GridSpec,
    active: GridSpec,
    config: EnvConfig,
    sample: Option<ScenarioSample>,
    state: Option<DispatchState>,
    last_vt: Option<(Vec<f64>, Vec<f64>)>,
    done: bool,
}

impl DispatchEnv {
    pub fn new(spec: GridSpec, config: EnvConfig) -> Self {
        Self { active: spec.clone(), spec, config, sample: None, state: None, last_vt: None, done: false }
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn state(&self) -> Option<&DispatchState> {
        self.state.as_ref()
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn reset(&mut self, sample: &ScenarioSample) -> Result<DispatchState, EnvError> {
        let state = reset(&self.spec, sample)?;
        self.active = apply_outage(&self.spec, &sample.outages_at(0))?;
        self.sample = Some(sample.clone());
        self.state = Some(state.clone());
        self.last_vt = None;
        self.done = false;
        Ok(state)
    }

    pub fn action_box(&self) -> Result<ActionBox, EnvError> {
        let s = self.state.as_ref().ok_or(EnvError::NotReset)?;
        Ok(feasible_action_box(s, &self.spec))
    }

    pub fn graph(&self) -> Result<GridGraph, EnvError> {
        let s = self.state.as_ref().ok_or(EnvError::NotReset)?;
        Ok(state_graph(s, &self.spec))
    }

    /// Advance one stage with an already projected action.
    pub fn step(&mut self, action: &DispatchAction) -> Result<StepOutcome, EnvError> {
        if self.done {
            return Err(EnvError::Finished);
        }
        let state = self.state.clone().ok_or(EnvError::NotReset)?;
        let spec = &self.spec.clone();
        if action.to_vec().len() != action_dim(spec) {
            return Err(EnvError::ActionShape { expected: action_dim(spec), got: action.to_vec().len() });
        }
        let bx = feasible_action_box(&state, spec);
        let base = spec.base_mva();
        let dt = spec.dt();
        let slack_tg = spec.slack_generator();

        let mut applied = action.clone();
        let mut violations = ViolationReport::default();
        let mut converged = true;

        // active power the slack unit must supply, MW
        let slack_need: Option<f64> = match self.config.network {
            NetworkModel::CopperPlate | NetworkModel::Dc => {
                let need = lossless_slack_output(&state.load_p, action, slack_tg);
                if self.config.network == NetworkModel::Dc {
                    let inj = net_injections(spec, &state.load_p, action);
                    match solve_dc(&self.active, &inj) {
                        Ok(dc) => violations = check_dc_limits(&dc, &self.active),
                        Err(PowerFlowError::SingularSusceptance) | Err(PowerFlowError::ZeroSusceptance(_)) => {
                            converged = false
                        }
                        Err(e) => return Err(e.into()),
                    }
                }
                converged.then_some(need)
            }
            NetworkModel::Ac => self.solve_ac(&state, action, slack_tg, &mut violations, &mut converged)?,
        };

        let mut slack_excess = 0.0;
        match (slack_tg, slack_need) {
            (Some(s), Some(p)) => {
                let q = p.clamp(bx.lo[s], bx.hi[s]);
                slack_excess = (p - q).abs();
                applied.p_tg[s] = q;
            }
            (Some(s), None) => applied.p_tg[s] = action.p_tg[s].clamp(bx.lo[s], bx.hi[s]),
            (None, Some(p)) => slack_excess = p.abs(),
            (None, None) => {}
        }

        let mut breakdown = stage_cost(&applied, &state, spec);
        let severity = violations.severity();
        let mut penalty = self.config.penalty_weight(spec) * dt * (slack_excess + base * severity);
        if !converged {
            penalty += self.config.nonconvergence_penalty;
        }
        breakdown.penalty = penalty;
        breakdown.total += penalty;
        let reward = -breakdown.total / self.config.reward_scale;

        let next_state = self.advance(&state, &applied)?;
        let done = next_state.is_terminal() || (!converged && self.config.hard_fail);
        self.done = done;
        self.state = Some(next_state.clone());
        Ok(StepOutcome { next_state, reward, breakdown, violations, applied, slack_excess, converged, done })
    }

    fn solve_ac(
        &mut self,
        state: &DispatchState,
        action: &DispatchAction,
        slack_tg: Option<usize>,
        violations: &mut ViolationReport,
        converged: &mut bool,
    ) -> Result<Option<f64>, EnvError> {
        let spec = &self.spec;
        let n = spec.n_buses();
        let base = spec.base_mva();
        let mut without_slack = action.clone();
        if let Some(s) = slack_tg {
            without_slack.p_tg[s] = 0.0;
        }
        let p = net_injections(spec, &state.load_p, &without_slack);
        let q: Vec<f64> = state.load_q.iter().map(|x| -x / base).collect();
        let inj = InjectionSet { p, q, v_set: vec![1.0; n] };
        let start = self.last_vt.as_ref().map(|(u, th)| (u.as_slice(), th.as_slice()));
        let sol = match solve_ac_from(&self.active, &inj, &self.config.powerflow, start) {
            Ok(sol) if sol.converged => sol,
            Ok(_) | Err(PowerFlowError::SingularJacobian { .. }) => {
                *converged = false;
                return Ok(None);
            }
            Err(e) => return Err(e.into()),
        };
        let slack_bus = spec.slack_bus().ok_or(PowerFlowError::NoSlack)?;
        // slack bus injection minus everything else connected there
        let others = inj.p[slack_bus] * base;
        let need = sol.slack_p * base - others;

        let mut q_tg = vec![0.0; spec.thermal.len()];
        for i in 0..n {
            if spec.buses[i].bus_kind == BusKind::Load {
                continue;
            }
            let units: Vec<usize> = (0..spec.thermal.len()).filter(|&k| spec.thermal[k].bus == i).collect();
            if units.is_empty() {
                continue;
            }
            let q_gen = sol.q_injection[i] + state.load_q[i] / base;
            for &k in &units {
                q_tg[k] = q_gen / units.len() as f64;
            }
        }
        *violations = check_limits(&sol, &self.active, &q_tg);
        self.last_vt = Some((sol.voltage.clone(), sol.angle.clone()));
        Ok(Some(need))
    }

    fn advance(&mut self, state: &DispatchState, applied: &DispatchAction) -> Result<DispatchState, EnvError> {
        let spec = &self.spec;
        let dt = spec.dt();
        let sample = self.sample.as_ref().ok_or(EnvError::NotReset)?;
        let energy = spec
            .storage
            .iter()
            .enumerate()
            .map(|(k, s)| state.energy[k] + (s.eta_c() * applied.charge(k) - applied.discharge(k) / s.eta_d()) * dt)
            .collect();
        let t = state.t + 1;
        let row = t.min(state.horizon - 1);
        let (load_p, load_q, re_max) = profile_row(&sample.profile, row);
        if t < state.horizon {
            let new = sample.outages_at(t);
            if !new.is_empty() {
                self.active = apply_outage(&self.active, &new)?;
                self.last_vt = None;
            }
        }
        Ok(DispatchState {
            t,
            horizon: state.horizon,
            p_tg_prev: applied.p_tg.clone(),
            energy,
            load_p,
            load_q,
            re_max,
            in_service: self.active.in_service_mask(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub t: usize,
    pub state: DispatchState,
    pub action: DispatchAction,
    /// Squashed policy output in `[−1, 1]^dim` that produced `action`, when one exists.
    pub raw: Vec<f64>,
    pub reward: f64,
    pub next_state: DispatchState,
    pub graph: GridGraph,
    pub next_graph: GridGraph,
    pub breakdown: CostBreakdown,
    pub severity: f64,
    pub converged: bool,
    pub done: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTrace {
    pub id: String,
    pub family_id: usize,
    pub sample_seed: u64,
    pub transitions: Vec<Transition>,
    pub total_cost: f64,
    pub total_penalty: f64,
    pub terminated_early: bool,
}

#[derive(Serialize)]
struct TraceLine<'a> {
    trace: &'a str,
    t: usize,
    action: Vec<f64>,
    reward: f64,
    breakdown: &'a CostBreakdown,
    severity: f64,
}

impl EpisodeTrace {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    /// One JSON object per transition.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for tr in &self.transitions {
            let line = TraceLine {
                trace: &self.id,
                t: tr.t,
                action: tr.action.to_vec(),
                reward: tr.reward,
                breakdown: &tr.breakdown,
                severity: tr.severity,
            };
            serde_json::to_writer(&mut out, &line)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// A policy emits a squashed action in `[−1, 1]^dim` given the state, its graph and a latent vector.
pub trait Policy {
    fn act(&mut self, state: &DispatchState, graph: &GridGraph, z: &[f64]) -> Vec<f64>;
}

impl<F: FnMut(&DispatchState, &GridGraph, &[f64]) -> Vec<f64>> Policy for F {
    fn act(&mut self, state: &DispatchState, graph: &GridGraph, z: &[f64]) -> Vec<f64> {
        self(state, graph, z)
    }
}

pub fn trace_id(sample: &ScenarioSample) -> String {
    format!("f{}-s{}", sample.family_id, sample.seed)
}

/// Roll a squashed-action policy through one episode.
pub fn rollout(
    policy: &mut impl Policy,
    spec: &GridSpec,
    sample: &ScenarioSample,
    z: &[f64],
    config: &EnvConfig,
) -> Result<EpisodeTrace, EnvError> {
    rollout_with(spec, sample, config, |state, graph, bx| {
        let raw = policy.act(state, graph, z);
        let action = project_action(&raw, bx, spec)?;
        Ok((action, raw))
    })
}

/// Roll out a policy that returns absolute setpoints; they are clamped into the box.
pub fn rollout_absolute(
    mut policy: impl FnMut(&DispatchState) -> DispatchAction,
    spec: &GridSpec,
    sample: &ScenarioSample,
    config: &EnvConfig,
) -> Result<EpisodeTrace, EnvError> {
    rollout_with(spec, sample, config, |state, _, bx| {
        let a = policy(state);
        let clamped = DispatchAction::from_vec(spec, &bx.clamp(&a.to_vec()))?;
        let raw = raw_from_action(&clamped, bx);
        Ok((clamped, raw))
    })
}

/// Generic episode loop; `decide` maps `(state, graph, box)` to `(action, raw)`.
pub fn rollout_with(
    spec: &GridSpec,
    sample: &ScenarioSample,
    config: &EnvConfig,
    mut decide: impl FnMut(&DispatchState, &GridGraph, &ActionBox) -> Result<(DispatchAction, Vec<f64>), EnvError>,
) -> Result<EpisodeTrace, EnvError> {
    let mut env = DispatchEnv::new(spec.clone(), config.clone());
    let mut state = env.reset(sample)?;
    let mut transitions = Vec::with_capacity(sample.horizon());
    let (mut total_cost, mut total_penalty) = (0.0, 0.0);
    let mut terminated_early = false;
    loop {
        let graph = state_graph(&state, spec);
        let bx = feasible_action_box(&state, spec);
        let (action, raw) = decide(&state, &graph, &bx)?;
        let out = env.step(&action)?;
        total_cost += out.breakdown.total;
        total_penalty += out.breakdown.penalty;
        let next_graph = state_graph(&out.next_state, spec);
        let done = out.done;
        if done && !out.next_state.is_terminal() {
            terminated_early = true;
        }
        transitions.push(Transition {
            t: state.t,
            state,
            action: out.applied,
            raw,
            reward: out.reward,
            next_state: out.next_state.clone(),
            graph,
            next_graph,
            breakdown: out.breakdown,
            severity: out.violations.severity(),
            converged: out.converged,
            done,
        });
        state = out.next_state;
        if done {
            break;
        }
    }
    Ok(EpisodeTrace {
        id: trace_id(sample),
        family_id: sample.family_id,
        sample_seed: sample.seed,
        transitions,
        total_cost,
        total_penalty,
        terminated_early,
    })
}

/// Mean stage cost of serving the profile's net load with thermal units sharing it in
/// proportion to capacity; a rough magnitude used to scale rewards.
pub fn nominal_stage_cost(spec: &GridSpec, profile: &Profile) -> f64 {
    let cap: f64 = spec.thermal.iter().map(|g| g.p_bounds.1).sum::<f64>().max(1e-9);
    let dt = spec.dt();
    let t_len = profile.horizon();
    let mut total = 0.0;
    for t in 0..t_len {
        let net = profile.net_load(t).max(0.0);
        for g in &spec.thermal {
            let p = (net * g.p_bounds.1 / cap).clamp(g.p_bounds.0, g.p_bounds.1);
            total += g.cost.0 * p * p * dt + g.cost.1 * p * dt + g.cost.2;
        }
    }
    (total / t_len.max(1) as f64).max(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{apply_outage, three_bus_ring, BusSpec, GridMeta, LineSpec, StorageUnit, ThermalGenerator};
    use crate::scenario::{make_demo_families, sample as draw, Outage};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn flat_sample(spec: &GridSpec, t_len: usize, load: f64, re: f64) -> ScenarioSample {
        let n = spec.n_buses();
        let mut lp = Matrix::zeros(t_len, n);
        for t in 0..t_len {
            for i in 1..n {
                lp[(t, i)] = load;
            }
        }
        ScenarioSample {
            family_id: 0,
            seed: 0,
            profile: Profile {
                load_q: lp.scale(0.2),
                load_p: lp,
                re_max: Matrix::filled(t_len, spec.renewable.len(), re),
            },
            outages: vec![],
        }
    }

    fn state_with_energy(spec: &GridSpec, e: f64) -> DispatchState {
        let mut s = reset(spec, &flat_sample(spec, 4, 10.0, 5.0)).unwrap();
        s.energy = vec![e];
        s
    }

    #[test]
    fn reset_initial_conditions() {
        let spec = three_bus_ring();
        let s = reset(&spec, &flat_sample(&spec, 4, 0.0, 0.0)).unwrap();
        assert_eq!(s.t, 0);
        assert_eq!(s.p_tg_prev, vec![0.0]);
        assert_eq!(s.energy, vec![0.5 * spec.storage[0].e_max()]);
        assert!(s.load_p.iter().chain(&s.load_q).all(|&x| x == 0.0));

        let mut smp = flat_sample(&spec, 4, 10.0, 0.0);
        smp.outages = vec![Outage { line: 2, stage: 0 }];
        let s = reset(&spec, &smp).unwrap();
        assert_eq!(s.in_service, apply_outage(&spec, &[2]).unwrap().in_service_mask());

        let mut bad = flat_sample(&spec, 4, 1.0, 0.0);
        bad.profile.re_max = Matrix::zeros(4, 2);
        assert!(matches!(reset(&spec, &bad), Err(EnvError::Mismatch(_))));
    }

    #[test]
    fn box_examples() {
        let mut spec = three_bus_ring();
        let s = state_with_energy(&spec, spec.storage[0].e_max());
        assert_eq!(feasible_action_box(&s, &spec).lo[2], 0.0);

        spec.thermal[0].p_bounds = (20.0, 180.0);
        spec.thermal[0].ramp = (-5.0, 5.0);
        let mut s2 = s.clone();
        s2.p_tg_prev = vec![20.0];
        let b = feasible_action_box(&s2, &spec);
        assert_eq!((b.lo[0], b.hi[0]), (20.0, 25.0));

        spec.meta.interval_hours = 0.25;
        spec.storage[0].efficiencies = (0.95, 0.9);
        spec.storage[0].power_bounds = (30.0, 30.0);
        let s3 = state_with_energy(&spec, spec.storage[0].e_min() + 1.0);
        assert!((feasible_action_box(&s3, &spec).hi[2] - 3.6).abs() < 1e-12);

        // ramp window that misses the static range collapses onto P_min
        let mut s4 = s2.clone();
        s4.p_tg_prev = vec![0.0];
        let b = feasible_action_box(&s4, &spec);
        assert_eq!((b.lo[0], b.hi[0], b.empty.clone()), (20.0, 20.0, vec![0]));
    }

    #[test]
    fn projection_examples() {
        let spec = three_bus_ring();
        let bx = ActionBox { lo: vec![0.0, 0.0, -10.0], hi: vec![10.0, 4.0, 10.0], empty: vec![] };
        let mid = project_action(&[0.0; 3], &bx, &spec).unwrap();
        assert_eq!(mid.to_vec(), vec![5.0, 2.0, 0.0]);
        let top = project_action(&[1.0; 3], &bx, &spec).unwrap();
        assert_eq!(top.to_vec(), bx.hi);
        assert_eq!(project_action(&[0.5, 0.0, 0.0], &bx, &spec).unwrap().p_tg[0], 7.5);
        // idempotent through the inverse map
        let a = project_action(&[0.3, -0.7, 0.9], &bx, &spec).unwrap();
        let again = project_action(&raw_from_action(&a, &bx), &bx, &spec).unwrap();
        for (x, y) in a.to_vec().iter().zip(again.to_vec()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn stage_cost_examples() {
        let mut spec = three_bus_ring();
        let s = reset(&spec, &flat_sample(&spec, 2, 0.0, 0.0)).unwrap();
        let zero = DispatchAction::zeros(&spec);
        let c = stage_cost(&zero, &s, &spec);
        assert_eq!(c.total, spec.thermal[0].cost.2);

        spec.meta.interval_hours = 0.25;
        spec.thermal[0].cost = (0.01, 1.0, 5.0);
        let mut a = zero.clone();
        a.p_tg[0] = 10.0;
        assert!((stage_cost(&a, &s, &spec).c_tg - 7.75).abs() < 1e-12);

        let s = reset(&spec, &flat_sample(&spec, 2, 0.0, 12.0)).unwrap();
        let mut a = zero;
        a.p_re[0] = 12.0;
        assert_eq!(stage_cost(&a, &s, &spec).c_re, 0.0);
    }

    #[test]
    fn zero_step_lossless() {
        let mut spec = three_bus_ring();
        for l in &mut spec.lines {
            l.conductance = 0.0;
        }
        let cfg = EnvConfig { reward_scale: 7.0, ..EnvConfig::default() };
        let mut env = DispatchEnv::new(spec.clone(), cfg);
        env.reset(&flat_sample(&spec, 3, 0.0, 0.0)).unwrap();
        let out = env.step(&DispatchAction::zeros(&spec)).unwrap();
        assert!(out.violations.is_empty());
        assert!(out.converged);
        assert!(out.slack_excess < 1e-9);
        assert!((out.reward + spec.thermal[0].cost.2 / 7.0).abs() < 1e-9);
    }

    #[test]
    fn discharge_energy_example() {
        let mut spec = three_bus_ring();
        spec.meta.interval_hours = 0.25;
        spec.storage[0].efficiencies = (0.9, 0.8);
        let mut env = DispatchEnv::new(spec.clone(), EnvConfig { network: NetworkModel::CopperPlate, ..Default::default() });
        let s0 = env.reset(&flat_sample(&spec, 3, 10.0, 0.0)).unwrap();
        let mut a = DispatchAction::zeros(&spec);
        a.u_es[0] = 4.0;
        let out = env.step(&a).unwrap();
        assert!((s0.energy[0] - out.next_state.energy[0] - 1.25).abs() < 1e-12);
    }

    fn two_bus(load_limit: f64) -> GridSpec {
        let bus = |id, kind| BusSpec { id, bus_kind: kind, voltage_bounds: (0.9, 1.1), angle_bounds: (-1.2, 1.2) };
        GridSpec {
            meta: GridMeta { base_mva: 100.0, interval_hours: 1.0 },
            buses: vec![bus(0, BusKind::Slack), bus(1, BusKind::Load)],
            lines: vec![LineSpec {
                id: 0,
                from_bus: 0,
                to_bus: 1,
                conductance: 0.0,
                susceptance: -10.0,
                flow_limit: load_limit,
                in_service: true,
            }],
            thermal: vec![ThermalGenerator {
                bus: 0,
                p_bounds: (0.0, 1000.0),
                q_bounds: (-1000.0, 1000.0),
                ramp: (-1000.0, 1000.0),
                cost: (0.0, 1.0, 0.0),
            }],
            renewable: vec![],
            storage: vec![StorageUnit {
                bus: 1,
                power_bounds: (1.0, 1.0),
                energy_bounds: (0.0, 2.0),
                efficiencies: (1.0, 1.0),
                degradation_cost: 0.0,
                initial_soc_fraction: 0.5,
            }],
        }
    }

    fn single_stage(spec: &GridSpec, load: f64) -> ScenarioSample {
        let lp = Matrix::from_rows(&[vec![0.0, load]]);
        ScenarioSample {
            family_id: 0,
            seed: 0,
            profile: Profile { load_q: Matrix::zeros(1, 2), load_p: lp, re_max: Matrix::zeros(1, spec.renewable.len()) },
            outages: vec![],
        }
    }

    #[test]
    fn newton_crash_is_penalized_and_continues() {
        // past the 2-bus transfer limit (5 pu) no solution exists
        let spec = two_bus(1.0);
        let mut smp = single_stage(&spec, 900.0);
        smp.profile.load_p = Matrix::from_rows(&[vec![0.0, 900.0], vec![0.0, 10.0]]);
        smp.profile.load_q = Matrix::zeros(2, 2);
        smp.profile.re_max = Matrix::zeros(2, 0);
        let mut env = DispatchEnv::new(spec.clone(), EnvConfig::default());
        env.reset(&smp).unwrap();
        let out = env.step(&DispatchAction::zeros(&spec)).unwrap();
        assert!(!out.converged);
        assert!(out.breakdown.penalty >= 1e4);
        assert!(!out.done);
        let out2 = env.step(&DispatchAction::zeros(&spec)).unwrap();
        assert!(out2.converged);
        assert!(out2.done);
    }

    #[test]
    fn hard_fail_terminates_early() {
        let spec = two_bus(1.0);
        let mut smp = single_stage(&spec, 900.0);
        smp.profile.load_p = Matrix::from_rows(&[vec![0.0, 900.0], vec![0.0, 10.0]]);
        smp.profile.load_q = Matrix::zeros(2, 2);
        smp.profile.re_max = Matrix::zeros(2, 0);
        let cfg = EnvConfig { hard_fail: true, ..Default::default() };
        let tr = rollout(&mut |_: &DispatchState, _: &GridGraph, _: &[f64]| vec![0.0; 2], &spec, &smp, &[], &cfg).unwrap();
        assert_eq!(tr.len(), 1);
        assert!(tr.terminated_early);
    }

    #[test]
    fn monotone_penalty_over_limit() {
        for network in [NetworkModel::Ac, NetworkModel::Dc] {
            let spec = two_bus(0.5);
            let mut last = -1.0;
            for k in 0..8 {
                let load = 40.0 + 10.0 * k as f64;
                let mut env = DispatchEnv::new(spec.clone(), EnvConfig { network, ..Default::default() });
                env.reset(&single_stage(&spec, load)).unwrap();
                let out = env.step(&DispatchAction::zeros(&spec)).unwrap();
                let sev = out.violations.severity();
                assert!(sev >= last, "{network:?} load {load}: {sev} < {last}");
                last = sev;
            }
            assert!(last > 0.0);
        }
    }

    fn random_policy(seed: u64) -> impl FnMut(&DispatchState, &GridGraph, &[f64]) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        move |_, _, _| (0..3).map(|_| rng.gen_range(-1.0..=1.0)).collect()
    }

    #[test]
    fn rollout_determinism_and_cost_sum() {
        let spec = three_bus_ring();
        let fam = &make_demo_families(6, &spec)[3];
        let smp = draw(fam, 5);
        let cfg = EnvConfig::default();
        let a = rollout(&mut random_policy(1), &spec, &smp, &[0.0], &cfg).unwrap();
        let b = rollout(&mut random_policy(1), &spec, &smp, &[0.0], &cfg).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert_eq!(a.len(), 6);

        let zero = rollout(&mut |_: &DispatchState, _: &GridGraph, _: &[f64]| vec![-1.0; 3], &spec, &smp, &[], &cfg).unwrap();
        let sum: f64 = zero.transitions.iter().map(|t| t.breakdown.total).sum();
        assert!((sum - zero.total_cost).abs() < 1e-9 * sum.abs().max(1.0));
        for t in &zero.transitions {
            let base = stage_cost(&t.action, &t.state, &spec);
            assert!((base.total + t.breakdown.penalty - t.breakdown.total).abs() < 1e-9);
        }

        let one = ScenarioSample { profile: smp.profile.window(0, 1), ..smp.clone() };
        let tr = rollout(&mut random_policy(2), &spec, &one, &[], &cfg).unwrap();
        assert_eq!(tr.len(), 1);
        assert_eq!(tr.total_cost, tr.transitions[0].breakdown.total);
        assert!(tr.transitions[0].next_state.is_terminal());
    }

    #[test]
    fn features_and_jsonl() {
        let spec = three_bus_ring();
        let smp = flat_sample(&spec, 4, 50.0, 20.0);
        let s = reset(&spec, &smp).unwrap();
        let g = state_graph(&s, &spec);
        assert_eq!(g.eig.shape(), (3, N_FEATURES));
        assert_eq!(g.eig[(1, 0)], 0.5);
        assert_eq!(g.eig[(1, 2)], 0.2);
        assert_eq!(g.eig[(0, 5)], 1.0);
        assert_eq!(g.eig[(2, 4)], 0.5);
        let tr = rollout(&mut random_policy(3), &spec, &smp, &[], &EnvConfig::default()).unwrap();
        let mut buf = Vec::new();
        tr.write_jsonl(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 4);
        let v: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert!(v["breakdown"]["total"].is_number() && v["severity"].is_number());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn rollout_invariants(seed in 0u64..10_000, fam_idx in 0usize..5, net in 0usize..3) {
            let spec = three_bus_ring();
            let fam = &make_demo_families(6, &spec)[fam_idx];
            let smp = draw(fam, seed);
            let network = [NetworkModel::Ac, NetworkModel::Dc, NetworkModel::CopperPlate][net];
            let cfg = EnvConfig { network, reward_scale: 250.0, ..Default::default() };
            let tr = rollout(&mut random_policy(seed), &spec, &smp, &[], &cfg).unwrap();
            let st = &spec.storage[0];
            let mut delta = 0.0;
            for t in &tr.transitions {
                let bx = feasible_action_box(&t.state, &spec);
                prop_assert!(bx.contains(&t.action.to_vec(), 1e-9));
                prop_assert!(t.action.charge(0) * t.action.discharge(0) == 0.0);
                prop_assert!((-t.reward * 250.0 - t.breakdown.total).abs() <= 1e-9 * t.breakdown.total.abs().max(1.0));
                delta += (st.eta_c() * t.action.charge(0) - t.action.discharge(0) / st.eta_d()) * spec.dt();
                prop_assert!(t.next_state.energy[0] >= st.e_min() - 1e-9 && t.next_state.energy[0] <= st.e_max() + 1e-9);
            }
            let e0 = tr.transitions[0].state.energy[0];
            let et = tr.transitions.last().unwrap().next_state.energy[0];
            prop_assert!(((et - e0) - delta).abs() < 1e-9);
        }
    }
}
