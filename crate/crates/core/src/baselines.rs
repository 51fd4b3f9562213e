//! Comparators: the exact lattice oracle with full hindsight, receding-horizon MPC,
//! and the optimality ratio.

use crate::env::{
    feasible_action_box, lossless_slack_output, net_injections, stage_cost, DispatchAction, DispatchState, EnvConfig,
    NetworkModel,
};
use crate::grid::GridSpec;
use crate::powerflow::{check_dc_limits, dc_ptdf, solve_dc};
use crate::scenario::{forecast_expectation, Profile, ScenarioFamily, ScenarioSample};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("instance too large for oracle: {0} evaluations in one stage (guard {1})")]
    TooLarge(usize, usize),
    #[error("no feasible schedule on the lattice")]
    Infeasible,
    #[error("oracle needs a thermal unit at the slack bus")]
    NoSlackUnit,
    #[error("invalid discretization: {0}")]
    Discretization(String),
    #[error("optimality needs positive costs, got F_ops={0}, F={1}")]
    NonPositive(f64, f64),
    #[error(transparent)]
    Env(#[from] crate::env::EnvError),
    #[error(transparent)]
    Grid(#[from] crate::grid::GridError),
    #[error(transparent)]
    Scenario(#[from] crate::scenario::ScenarioError),
    #[error(transparent)]
    PowerFlow(#[from] crate::powerflow::PowerFlowError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// `F_ops / F × 100`.
pub fn optimality(f_ops: f64, f: f64) -> Result<f64, BaselineError> {
    if !(f_ops > 0.0 && f > 0.0) {
        return Err(BaselineError::NonPositive(f_ops, f));
    }
    Ok(f_ops / f * 100.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OracleNetwork {
    Dc,
    #[default]
    CopperPlate,
}

impl OracleNetwork {
    pub fn env_model(self) -> NetworkModel {
        match self {
            OracleNetwork::Dc => NetworkModel::Dc,
            OracleNetwork::CopperPlate => NetworkModel::CopperPlate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DpDiscretization {
    /// Storage energy grid step, MWh.
    pub energy_res: f64,
    /// Thermal setpoint grid step for non-slack units, MW.
    pub tg_res: f64,
    /// Renewable dispatch grid step as a fraction of the available ceiling.
    pub re_step: f64,
    pub network: OracleNetwork,
    /// Maximum state × decision evaluations per stage.
    pub guard: usize,
}

impl Default for DpDiscretization {
    fn default() -> Self {
        Self { energy_res: 5.0, tg_res: 10.0, re_step: 0.25, network: OracleNetwork::CopperPlate, guard: 1_000_000 }
    }
}

impl DpDiscretization {
    /// Same lattice with every resolution halved.
    pub fn refined(&self) -> Self {
        Self { energy_res: self.energy_res / 2.0, tg_res: self.tg_res / 2.0, re_step: self.re_step / 2.0, ..self.clone() }
    }

    fn validate(&self) -> Result<(), BaselineError> {
        if !(self.energy_res > 0.0 && self.tg_res > 0.0 && self.re_step > 0.0 && self.re_step <= 1.0) {
            return Err(BaselineError::Discretization(format!("{self:?}")));
        }
        Ok(())
    }
}

/// `lo, lo+res, …` up to `hi`, plus `hi` itself.
fn grid_points(lo: f64, hi: f64, res: f64) -> Vec<f64> {
    let mut v = Vec::new();
    let mut k = 0usize;
    loop {
        let x = lo + k as f64 * res;
        if x >= hi {
            break;
        }
        v.push(x);
        k += 1;
    }
    v.push(hi);
    v
}

fn sorted_unique(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(f64::total_cmp);
    v.dedup();
    v
}

/// Candidate decisions for one stage from one state.
pub struct StageLattice {
    /// Per storage unit: (next energy, signed power).
    pub storage: Vec<Vec<(f64, f64)>>,
    /// Per renewable unit: dispatched MW.
    pub renewable: Vec<Vec<f64>>,
    /// Per non-slack thermal unit (others hold a single placeholder).
    pub thermal: Vec<Vec<f64>>,
}

/// Lattice choices available from `state` under `disc`.
pub fn stage_lattice(state: &DispatchState, spec: &GridSpec, disc: &DpDiscretization, slack: usize) -> StageLattice {
    let bx = feasible_action_box(state, spec);
    let dt = spec.dt();
    let ng = spec.thermal.len();
    let nr = spec.renewable.len();
    let tol = 1e-9;

    let storage = spec
        .storage
        .iter()
        .enumerate()
        .map(|(k, s)| {
            let e = state.energy[k];
            let (lo, hi) = (bx.lo[ng + nr + k], bx.hi[ng + nr + k]);
            let mut targets = grid_points(s.e_min(), s.e_max(), disc.energy_res);
            targets.push(e);
            sorted_unique(targets)
                .into_iter()
                .filter_map(|target| {
                    let u = if target >= e { -(target - e) / (s.eta_c() * dt) } else { (e - target) * s.eta_d() / dt };
                    (u >= lo - tol && u <= hi + tol).then(|| (target, u.clamp(lo, hi)))
                })
                .collect()
        })
        .collect();

    let levels = {
        let mut f = grid_points(0.0, 1.0, disc.re_step);
        f.dedup();
        f
    };
    let renewable = (0..nr).map(|k| sorted_unique(levels.iter().map(|f| f * state.re_max[k]).collect())).collect();

    let thermal = (0..ng)
        .map(|k| {
            if k == slack {
                return vec![0.0];
            }
            let g = &spec.thermal[k];
            let (lo, hi) = (bx.lo[k], bx.hi[k]);
            let mut pts: Vec<f64> =
                grid_points(g.p_bounds.0, g.p_bounds.1, disc.tg_res).into_iter().filter(|p| *p >= lo && *p <= hi).collect();
            pts.extend([lo, hi]);
            if state.p_tg_prev[k] >= lo && state.p_tg_prev[k] <= hi {
                pts.push(state.p_tg_prev[k]);
            }
            sorted_unique(pts)
        })
        .collect();
    StageLattice { storage, renewable, thermal }
}

/// Stage state at `t` of `sample` given carried quantities.
fn stage_state(spec: &GridSpec, sample: &ScenarioSample, t: usize, prev: Vec<f64>, energy: Vec<f64>, mask: &[bool]) -> DispatchState {
    let p = &sample.profile;
    let _ = spec;
    DispatchState {
        t,
        horizon: sample.horizon(),
        p_tg_prev: prev,
        energy,
        load_p: p.load_p.row(t).to_vec(),
        load_q: p.load_q.row(t).to_vec(),
        re_max: p.re_max.row(t).to_vec(),
        in_service: mask.to_vec(),
    }
}

/// Topology in force at stage `t` of `sample`.
pub fn topology_at(spec: &GridSpec, sample: &ScenarioSample, t: usize) -> Result<GridSpec, BaselineError> {
    let lines: Vec<usize> = sample.outages.iter().filter(|o| o.stage <= t).map(|o| o.line).collect();
    Ok(crate::grid::apply_outage(spec, &lines)?)
}

/// Complete a lattice choice into a full action; `None` if the slack unit leaves its window
/// or the network check fails.
pub fn complete_action(
    state: &DispatchState,
    spec: &GridSpec,
    topo: &GridSpec,
    network: OracleNetwork,
    slack: usize,
    mut action: DispatchAction,
) -> Option<DispatchAction> {
    let bx = feasible_action_box(state, spec);
    let need = lossless_slack_output(&state.load_p, &action, Some(slack));
    if need < bx.lo[slack] - 1e-9 || need > bx.hi[slack] + 1e-9 {
        return None;
    }
    action.p_tg[slack] = need.clamp(bx.lo[slack], bx.hi[slack]);
    if network == OracleNetwork::Dc {
        let inj = net_injections(spec, &state.load_p, &action);
        let dc = solve_dc(topo, &inj).ok()?;
        if !check_dc_limits(&dc, topo).is_empty() {
            return None;
        }
    }
    Some(action)
}

fn next_energy(spec: &GridSpec, state: &DispatchState, action: &DispatchAction) -> Vec<f64> {
    let dt = spec.dt();
    spec.storage
        .iter()
        .enumerate()
        .map(|(k, s)| state.energy[k] + (s.eta_c() * action.charge(k) - action.discharge(k) / s.eta_d()) * dt)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    pub cost: f64,
    pub schedule: Vec<DispatchAction>,
    /// Largest number of lattice states held at any stage.
    pub max_states: usize,
}

impl OracleResult {
    /// One row per stage: `stage, tg_0.., re_0.., es_0..`.
    pub fn write_csv<W: Write>(&self, spec: &GridSpec, out: W) -> Result<(), BaselineError> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["stage".to_string()];
        header.extend((0..spec.thermal.len()).map(|k| format!("tg_{k}")));
        header.extend((0..spec.renewable.len()).map(|k| format!("re_{k}")));
        header.extend((0..spec.storage.len()).map(|k| format!("es_{k}")));
        w.write_record(&header)?;
        for (t, a) in self.schedule.iter().enumerate() {
            let mut row = vec![t.to_string()];
            row.extend(a.to_vec().iter().map(|x| x.to_string()));
            w.write_record(&row)?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

type Key = Vec<u64>;

struct Node {
    cost: f64,
    parent: usize,
    action: Option<DispatchAction>,
    prev: Vec<f64>,
    energy: Vec<f64>,
}

fn key_of(prev: &[f64], energy: &[f64]) -> Key {
    prev.iter().chain(energy).map(|x| x.to_bits()).collect()
}

/// Minimum total stage cost over the lattice with every uncertainty revealed.
///
/// Forward dynamic programming over `(storage energies, previous thermal outputs)`;
/// the slack unit closes the balance and must stay inside its ramp/static window.
pub fn ops_oracle(spec: &GridSpec, sample: &ScenarioSample, disc: &DpDiscretization) -> Result<OracleResult, BaselineError> {
    disc.validate()?;
    let slack = spec.slack_generator().ok_or(BaselineError::NoSlackUnit)?;
    let t_len = sample.horizon();
    let init_prev = vec![0.0; spec.thermal.len()];
    let init_energy: Vec<f64> = spec.storage.iter().map(|s| s.initial_energy()).collect();

    let mut layers: Vec<Vec<Node>> = vec![vec![Node {
        cost: 0.0,
        parent: usize::MAX,
        action: None,
        prev: init_prev,
        energy: init_energy,
    }]];
    let mut max_states = 1;

    for t in 0..t_len {
        let topo = topology_at(spec, sample, t)?;
        let mask = topo.in_service_mask();
        let mut index: BTreeMap<Key, usize> = BTreeMap::new();
        let mut next: Vec<Node> = Vec::new();
        let mut evaluations = 0usize;
        for (pi, node) in layers[t].iter().enumerate() {
            let state = stage_state(spec, sample, t, node.prev.clone(), node.energy.clone(), &mask);
            let lat = stage_lattice(&state, spec, disc, slack);
            let combos = lattice_size(&lat);
            evaluations += combos;
            if evaluations > disc.guard {
                return Err(BaselineError::TooLarge(evaluations, disc.guard));
            }
            for_each_choice(&lat, spec, |action| {
                let Some(action) = complete_action(&state, spec, &topo, disc.network, slack, action) else { return };
                let cost = node.cost + stage_cost(&action, &state, spec).total;
                let energy = snap_energy(spec, &state, &action, &lat);
                let key = key_of(&action.p_tg, &energy);
                match index.get(&key) {
                    Some(&j) if next[j].cost <= cost => {}
                    Some(&j) => {
                        next[j] = Node { cost, parent: pi, prev: action.p_tg.clone(), energy, action: Some(action) };
                    }
                    None => {
                        index.insert(key, next.len());
                        next.push(Node { cost, parent: pi, prev: action.p_tg.clone(), energy, action: Some(action) });
                    }
                }
            });
        }
        if next.is_empty() {
            return Err(BaselineError::Infeasible);
        }
        max_states = max_states.max(next.len());
        layers.push(next);
    }

    let last = layers.last().expect("at least one layer");
    let (mut idx, best) = last
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.cost.total_cmp(&b.1.cost))
        .expect("nonempty layer");
    let cost = best.cost;
    let mut schedule = Vec::with_capacity(t_len);
    for t in (1..=t_len).rev() {
        let node = &layers[t][idx];
        schedule.push(node.action.clone().expect("non-root node has an action"));
        idx = node.parent;
    }
    schedule.reverse();
    Ok(OracleResult { cost, schedule, max_states })
}

fn lattice_size(lat: &StageLattice) -> usize {
    lat.storage.iter().map(Vec::len).chain(lat.renewable.iter().map(Vec::len)).chain(lat.thermal.iter().map(Vec::len)).product()
}

/// Calls `f` with every action in the lattice product, in a fixed order; the slack entry is a placeholder.
pub fn for_each_choice(lat: &StageLattice, spec: &GridSpec, mut f: impl FnMut(DispatchAction)) {
    let dims: Vec<usize> =
        lat.thermal.iter().map(Vec::len).chain(lat.renewable.iter().map(Vec::len)).chain(lat.storage.iter().map(Vec::len)).collect();
    if dims.iter().any(|&d| d == 0) {
        return;
    }
    let (ng, nr) = (spec.thermal.len(), spec.renewable.len());
    let mut idx = vec![0usize; dims.len()];
    loop {
        let mut a = DispatchAction::zeros(spec);
        for k in 0..ng {
            a.p_tg[k] = lat.thermal[k][idx[k]];
        }
        for k in 0..nr {
            a.p_re[k] = lat.renewable[k][idx[ng + k]];
        }
        for k in 0..spec.storage.len() {
            a.u_es[k] = lat.storage[k][idx[ng + nr + k]].1;
        }
        f(a);
        let mut d = dims.len();
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            if idx[d] < dims[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

/// Next energies snapped onto the lattice target the storage choice was built from.
fn snap_energy(spec: &GridSpec, state: &DispatchState, action: &DispatchAction, lat: &StageLattice) -> Vec<f64> {
    let exact = next_energy(spec, state, action);
    exact
        .iter()
        .enumerate()
        .map(|(k, &e)| {
            lat.storage[k].iter().find(|(_, u)| *u == action.u_es[k]).map(|(target, _)| *target).unwrap_or(e)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MpcConfig {
    pub horizon: usize,
    pub network: OracleNetwork,
    pub outer_iters: usize,
    pub inner_iters: usize,
    /// Initial projected-gradient step, MW per unit gradient.
    pub step: f64,
    /// Constraint violation accepted as feasible, MW or MWh.
    pub tolerance: f64,
}

impl Default for MpcConfig {
    fn default() -> Self {
        Self { horizon: 4, network: OracleNetwork::Dc, outer_iters: 60, inner_iters: 400, step: 1.0, tolerance: 1e-4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MpcReport {
    pub action: DispatchAction,
    /// Planned objective over the lookahead window.
    pub planned_cost: f64,
    pub max_violation: f64,
    pub iterations: usize,
    /// The iteration cap was hit before the constraints were met.
    pub warning: bool,
}

/// `c + Σ coef·x[idx]`.
#[derive(Debug, Clone, Default)]
struct Affine {
    terms: Vec<(usize, f64)>,
    c: f64,
}

impl Affine {
    fn eval(&self, x: &[f64]) -> f64 {
        self.c + self.terms.iter().map(|(i, a)| a * x[*i]).sum::<f64>()
    }
    fn scaled(&self, s: f64) -> Affine {
        Affine { terms: self.terms.iter().map(|(i, a)| (*i, a * s)).collect(), c: self.c * s }
    }
    fn plus(&self, other: &Affine) -> Affine {
        let mut terms = self.terms.clone();
        terms.extend_from_slice(&other.terms);
        Affine { terms, c: self.c + other.c }
    }
}

/// Deterministic lookahead problem over stages `0..n`.
struct Lookahead {
    n_vars: usize,
    lo: Vec<f64>,
    hi: Vec<f64>,
    /// Thermal output expressions per stage and unit.
    tg: Vec<Vec<Affine>>,
    /// `(a, b, c)` thermal cost coefficients with Δt folded in.
    tg_cost: Vec<(f64, f64, f64)>,
    /// Linear objective terms and constant.
    linear: Affine,
    /// Constraints `expr ≤ 0`.
    cons: Vec<Affine>,
    /// Variable index of renewable / charge / discharge / thermal per stage.
    layout: Vec<StageVars>,
}

#[derive(Debug, Clone)]
struct StageVars {
    re: Vec<usize>,
    pc: Vec<usize>,
    pd: Vec<usize>,
    tg: Vec<Option<usize>>,
}

impl Lookahead {
    fn build(state: &DispatchState, spec: &GridSpec, fc: &Profile, ptdf: Option<(&GridSpec, &crate::matrix::Matrix)>) -> Self {
        let n = fc.horizon();
        let dt = spec.dt();
        let slack = spec.slack_generator();
        let (ng, nr, ns) = (spec.thermal.len(), spec.renewable.len(), spec.storage.len());
        let mut lo = Vec::new();
        let mut hi = Vec::new();
        let mut layout = Vec::with_capacity(n);
        let push = |l: f64, h: f64, lo: &mut Vec<f64>, hi: &mut Vec<f64>| {
            lo.push(l);
            hi.push(h.max(l));
            lo.len() - 1
        };
        for t in 0..n {
            let re = (0..nr).map(|k| push(0.0, fc.re_max[(t, k)], &mut lo, &mut hi)).collect();
            let pc = spec.storage.iter().map(|s| push(0.0, s.charge_max(), &mut lo, &mut hi)).collect();
            let pd = spec.storage.iter().map(|s| push(0.0, s.discharge_max(), &mut lo, &mut hi)).collect();
            let tg = (0..ng)
                .map(|k| {
                    if Some(k) == slack {
                        None
                    } else {
                        let g = &spec.thermal[k];
                        let (mut l, mut h) = g.p_bounds;
                        if t == 0 {
                            l = l.max(state.p_tg_prev[k] + g.ramp.0);
                            h = h.min(state.p_tg_prev[k] + g.ramp.1);
                        }
                        Some(push(l, h, &mut lo, &mut hi))
                    }
                })
                .collect();
            layout.push(StageVars { re, pc, pd, tg });
        }
        let n_vars = lo.len();

        let mut tg_exprs = Vec::with_capacity(n);
        let mut linear = Affine::default();
        let mut cons = Vec::new();
        let mut energy: Vec<Affine> = state.energy.iter().map(|&e| Affine { terms: vec![], c: e }).collect();
        for t in 0..n {
            let v = &layout[t];
            let load: f64 = fc.load_p.row(t).iter().sum();
            let mut slack_expr = Affine { terms: vec![], c: load };
            for &i in &v.re {
                slack_expr.terms.push((i, -1.0));
            }
            for k in 0..ns {
                slack_expr.terms.push((v.pd[k], -1.0));
                slack_expr.terms.push((v.pc[k], 1.0));
            }
            for i in v.tg.iter().flatten() {
                slack_expr.terms.push((*i, -1.0));
            }
            let exprs: Vec<Affine> = (0..ng)
                .map(|k| match v.tg[k] {
                    Some(i) => Affine { terms: vec![(i, 1.0)], c: 0.0 },
                    None => slack_expr.clone(),
                })
                .collect();
            if let Some(s) = slack {
                let g = &spec.thermal[s];
                cons.push(exprs[s].scaled(-1.0).plus(&Affine { terms: vec![], c: g.p_bounds.0 }));
                cons.push(exprs[s].plus(&Affine { terms: vec![], c: -g.p_bounds.1 }));
            }
            for (k, g) in spec.thermal.iter().enumerate() {
                let prev = if t == 0 {
                    Affine { terms: vec![], c: state.p_tg_prev[k] }
                } else {
                    tg_exprs_last(&tg_exprs, k)
                };
                let diff = exprs[k].plus(&prev.scaled(-1.0));
                cons.push(diff.plus(&Affine { terms: vec![], c: -g.ramp.1 }));
                cons.push(diff.scaled(-1.0).plus(&Affine { terms: vec![], c: g.ramp.0 }));
            }
            for (k, r) in spec.renewable.iter().enumerate() {
                linear.c += r.curtailment_penalty * fc.re_max[(t, k)] * dt;
                linear.terms.push((v.re[k], -r.curtailment_penalty * dt));
            }
            for (k, s) in spec.storage.iter().enumerate() {
                linear.terms.push((v.pc[k], s.degradation_cost * dt));
                linear.terms.push((v.pd[k], s.degradation_cost * dt));
                energy[k].terms.push((v.pc[k], s.eta_c() * dt));
                energy[k].terms.push((v.pd[k], -dt / s.eta_d()));
                cons.push(energy[k].plus(&Affine { terms: vec![], c: -s.e_max() }));
                cons.push(energy[k].scaled(-1.0).plus(&Affine { terms: vec![], c: s.e_min() }));
            }
            if let Some((topo, m)) = ptdf {
                // bus injections in per-unit as affine expressions
                let base = spec.base_mva();
                let nb = spec.n_buses();
                let mut inj: Vec<Affine> =
                    (0..nb).map(|i| Affine { terms: vec![], c: -fc.load_p[(t, i)] / base }).collect();
                for (k, g) in spec.thermal.iter().enumerate() {
                    inj[g.bus] = inj[g.bus].plus(&exprs[k].scaled(1.0 / base));
                }
                for (k, r) in spec.renewable.iter().enumerate() {
                    inj[r.bus].terms.push((v.re[k], 1.0 / base));
                }
                for (k, s) in spec.storage.iter().enumerate() {
                    inj[s.bus].terms.push((v.pd[k], 1.0 / base));
                    inj[s.bus].terms.push((v.pc[k], -1.0 / base));
                }
                for (l, line) in topo.in_service_lines().enumerate() {
                    let mut flow = Affine::default();
                    for (i, e) in inj.iter().enumerate() {
                        let f = m[(l, i)];
                        if f != 0.0 {
                            flow = flow.plus(&e.scaled(f));
                        }
                    }
                    // constraints in MW so tolerances are comparable
                    cons.push(flow.scaled(base).plus(&Affine { terms: vec![], c: -line.flow_limit * base }));
                    cons.push(flow.scaled(-base).plus(&Affine { terms: vec![], c: -line.flow_limit * base }));
                }
            }
            tg_exprs.push(exprs);
        }
        let tg_cost = spec.thermal.iter().map(|g| (g.cost.0 * dt, g.cost.1 * dt, g.cost.2)).collect();
        Lookahead { n_vars, lo, hi, tg: tg_exprs, tg_cost, linear, cons, layout }
    }

    fn objective(&self, x: &[f64], grad: Option<&mut [f64]>) -> f64 {
        let mut f = self.linear.eval(x);
        let mut g_local = grad;
        if let Some(g) = g_local.as_deref_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
            for (i, a) in &self.linear.terms {
                g[*i] += a;
            }
        }
        for stage in &self.tg {
            for (k, e) in stage.iter().enumerate() {
                let (a, b, c) = self.tg_cost[k];
                let p = e.eval(x);
                f += a * p * p + b * p + c;
                if let Some(g) = g_local.as_deref_mut() {
                    let d = 2.0 * a * p + b;
                    for (i, coef) in &e.terms {
                        g[*i] += d * coef;
                    }
                }
            }
        }
        f
    }

    fn max_violation(&self, x: &[f64]) -> f64 {
        self.cons.iter().map(|c| c.eval(x)).fold(0.0, f64::max)
    }

    /// Augmented Lagrangian value and gradient.
    fn lagrangian(&self, x: &[f64], lambda: &[f64], rho: f64, grad: &mut [f64]) -> f64 {
        let mut f = self.objective(x, Some(grad));
        for (c, &l) in self.cons.iter().zip(lambda) {
            let s = (l + rho * c.eval(x)).max(0.0);
            f += (s * s - l * l) / (2.0 * rho);
            if s > 0.0 {
                for (i, a) in &c.terms {
                    grad[*i] += s * a;
                }
            }
        }
        f
    }

    fn project(&self, x: &mut [f64]) {
        for ((v, l), h) in x.iter_mut().zip(&self.lo).zip(&self.hi) {
            *v = v.clamp(*l, *h);
        }
    }
}

fn tg_exprs_last(exprs: &[Vec<Affine>], k: usize) -> Affine {
    exprs.last().expect("previous stage")[k].clone()
}

/// Receding-horizon decision: plan `min(n, T − t)` stages on expected conditions
/// (current stage as observed) and return the first stage.
pub fn mpc_policy(
    state: &DispatchState,
    spec: &GridSpec,
    family: &ScenarioFamily,
    config: &MpcConfig,
) -> Result<MpcReport, BaselineError> {
    let n = config.horizon.max(1).min(state.horizon - state.t);
    let mut fc = forecast_expectation(family, state.t, n)?;
    fc.load_p.row_mut(0).copy_from_slice(&state.load_p);
    fc.load_q.row_mut(0).copy_from_slice(&state.load_q);
    fc.re_max.row_mut(0).copy_from_slice(&state.re_max);
    mpc_plan(state, spec, &fc, config)
}

/// MPC on an explicit forecast whose first row is the current stage.
pub fn mpc_plan(state: &DispatchState, spec: &GridSpec, fc: &Profile, config: &MpcConfig) -> Result<MpcReport, BaselineError> {
    let mut topo = spec.clone();
    for (l, &on) in topo.lines.iter_mut().zip(&state.in_service) {
        l.in_service = on;
    }
    let ptdf = match config.network {
        OracleNetwork::Dc => Some(dc_ptdf(&topo)?),
        OracleNetwork::CopperPlate => None,
    };
    let prob = Lookahead::build(state, spec, fc, ptdf.as_ref().map(|m| (&topo, m)));

    // start from the cheapest-looking corner: all renewable, idle storage, thermal at previous output
    let mut x = vec![0.0; prob.n_vars];
    for v in &prob.layout {
        for &i in &v.re {
            x[i] = prob.hi[i];
        }
        for (k, i) in v.tg.iter().enumerate() {
            if let Some(i) = i {
                x[*i] = state.p_tg_prev[k];
            }
        }
    }
    prob.project(&mut x);

    let mut lambda = vec![0.0; prob.cons.len()];
    let mut rho = 1.0;
    let mut grad = vec![0.0; prob.n_vars];
    let mut trial = vec![0.0; prob.n_vars];
    let mut tgrad = vec![0.0; prob.n_vars];
    let mut iterations = 0;
    let mut prev_viol = f64::INFINITY;
    let mut step = config.step;
    for _ in 0..config.outer_iters {
        for _ in 0..config.inner_iters {
            iterations += 1;
            let f = prob.lagrangian(&x, &lambda, rho, &mut grad);
            let mut accepted = false;
            for _ in 0..60 {
                for i in 0..prob.n_vars {
                    trial[i] = x[i] - step * grad[i];
                }
                prob.project(&mut trial);
                let d2: f64 = trial.iter().zip(&x).map(|(a, b)| (a - b).powi(2)).sum();
                let lin: f64 = trial.iter().zip(&x).zip(&grad).map(|((a, b), g)| g * (a - b)).sum();
                let ft = prob.lagrangian(&trial, &lambda, rho, &mut tgrad);
                if ft <= f + lin + d2 / (2.0 * step) + 1e-12 * f.abs() {
                    accepted = true;
                    break;
                }
                step *= 0.5;
            }
            let moved: f64 = trial.iter().zip(&x).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            if accepted {
                x.copy_from_slice(&trial);
            }
            step *= 1.5;
            if !accepted || moved < 1e-9 {
                break;
            }
        }
        let viol = prob.max_violation(&x);
        for (l, c) in lambda.iter_mut().zip(&prob.cons) {
            *l = (*l + rho * c.eval(&x)).max(0.0);
        }
        if viol <= config.tolerance && prev_viol <= config.tolerance {
            break;
        }
        if viol > 0.25 * prev_viol {
            rho = (rho * 4.0).min(1e7);
        }
        prev_viol = viol;
    }

    let max_violation = prob.max_violation(&x);
    let v0 = &prob.layout[0];
    let mut action = DispatchAction::zeros(spec);
    for (k, e) in prob.tg[0].iter().enumerate() {
        action.p_tg[k] = e.eval(&x);
    }
    for (k, &i) in v0.re.iter().enumerate() {
        action.p_re[k] = x[i];
    }
    for k in 0..spec.storage.len() {
        action.u_es[k] = x[v0.pd[k]] - x[v0.pc[k]];
    }
    Ok(MpcReport {
        action,
        planned_cost: prob.objective(&x, None),
        max_violation,
        iterations,
        warning: max_violation > config.tolerance,
    })
}

/// Cost of running MPC-n through `sample` in an environment using the same network model.
pub fn mpc_episode_cost(
    spec: &GridSpec,
    family: &ScenarioFamily,
    sample: &ScenarioSample,
    config: &MpcConfig,
) -> Result<(f64, usize), BaselineError> {
    let env_cfg = EnvConfig { network: config.network.env_model(), ..EnvConfig::default() };
    let mut warnings = 0;
    let mut err = None;
    let trace = crate::env::rollout_absolute(
        |s| match mpc_policy(s, spec, family, config) {
            Ok(r) => {
                warnings += r.warning as usize;
                r.action
            }
            Err(e) => {
                err.get_or_insert(e);
                DispatchAction::zeros(spec)
            }
        },
        spec,
        sample,
        &env_cfg,
    )?;
    if let Some(e) = err {
        return Err(e);
    }
    Ok((trace.total_cost, warnings))
}

/// Replays an oracle schedule through the environment; returns the episode cost.
pub fn replay_schedule(
    spec: &GridSpec,
    sample: &ScenarioSample,
    schedule: &[DispatchAction],
    network: OracleNetwork,
) -> Result<f64, BaselineError> {
    let cfg = EnvConfig { network: network.env_model(), ..EnvConfig::default() };
    let trace = crate::env::rollout_absolute(|s| schedule[s.t].clone(), spec, sample, &cfg)?;
    Ok(trace.total_cost)
}
