//! Property suite shared by the `verify` command and the acceptance tests.
//!
//! Every check builds its own small instances and compares against an oracle that does
//! not reuse the code under test where that is practical.

use crate::baselines::{
    mpc_episode_cost, ops_oracle, optimality, DpDiscretization, MpcConfig, OracleNetwork,
};
use crate::discriminator::{Discriminator, DiscriminatorConfig};
use crate::env::{rollout, stage_cost, DispatchAction, DispatchState, EnvConfig, NetworkModel, N_FEATURES};
use crate::grid::{three_bus_ring, BusKind, BusSpec, GridGraph, GridMeta, GridSpec, LineSpec, StorageUnit, ThermalGenerator};
use crate::matrix::Matrix;
use crate::meta::{ContextInputs, MetaConfig, MetaLearner};
use crate::nn::{gcn_forward, grad_check, kl_to_standard, Activation, ParamSet};
use crate::powerflow::{admittance, bus_injections, solve_ac, solve_dc, InjectionSet, PowerFlowConfig};
use crate::sac::{Experience, SacAgent, SacBatch, SacConfig};
use crate::scenario::{expected_sample, make_demo_families, sample, Profile, ScenarioSample};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;
use std::time::Instant;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub module: &'static str,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

fn timed(module: &'static str, name: &'static str, f: impl FnOnce() -> Result<String, String>) -> Check {
    let t = Instant::now();
    let (passed, detail) = match f() {
        Ok(d) => (true, d),
        Err(d) => (false, d),
    };
    Check { module, name, passed, detail, seconds: t.elapsed().as_secs_f64() }
}

/// The fast suite run by `metagrl verify`.
pub fn run_all() -> Vec<Check> {
    vec![
        reference_values(),
        gradient_integrity(),
        gcn_correctness(),
        kl_formula(),
        power_flow_validity(),
        environment_conservation(),
        oracle_exactness(),
        mpc_sanity(),
    ]
}

pub fn reference_values() -> Check {
    timed("baselines", "optimality reference values", || {
        let cases = [
            (4.534e6, 4.873e6, 93.04),
            (6.716e6, 7.179e6, 93.55),
            (5.072e6, 5.516e6, 91.95),
            (6.054e6, 6.490e6, 93.28),
            (6.364e6, 7.195e6, 88.45),
        ];
        let mut out = Vec::new();
        for (ops, f, want) in cases {
            let got = optimality(ops, f).map_err(|e| e.to_string())?;
            if (got - want).abs() > 0.01 {
                return Err(format!("optimality({ops}, {f}) = {got:.4}, expected {want}"));
            }
            out.push(format!("{got:.2}"));
        }
        Ok(out.join(" "))
    })
}

fn random_graph(n: usize, rng: &mut impl Rng) -> GridGraph {
    let mut adj = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i + 1..n {
            if rng.gen_bool(0.6) {
                adj[(i, j)] = 1.0;
                adj[(j, i)] = 1.0;
            }
        }
    }
    let eig = Matrix::from_vec(n, N_FEATURES, (0..n * N_FEATURES).map(|_| rng.gen_range(-1.0..1.0)).collect());
    GridGraph { adj, eig }
}

fn random_experiences(n_nodes: usize, count: usize, act_dim: usize, rng: &mut impl Rng) -> Vec<Experience> {
    (0..count)
        .map(|k| Experience {
            graph: random_graph(n_nodes, rng),
            action: (0..act_dim).map(|_| rng.gen_range(-0.95..0.95)).collect(),
            reward: rng.gen_range(-2.0..0.0),
            next_graph: random_graph(n_nodes, rng),
            done: k + 1 == count,
            task: 0,
        })
        .collect()
}

fn gaussian(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
}

/// Central-difference checks of the critic, actor, KL and discriminator losses.
pub fn gradient_integrity() -> Check {
    timed("nn", "gradient integrity", || {
        let mut worst = [0.0f64; 4];
        for seed in 0..4u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let n = rng.gen_range(2..=4);
            let ad = rng.gen_range(1..=3);
            let zd = rng.gen_range(1..=3);
            let sac = SacConfig { gcn_hidden: 4, hidden: 6, alpha: 0.3, gamma: 0.9, ..SacConfig::default() };
            let agent = SacAgent::new(N_FEATURES, ad, zd, sac, &mut rng).map_err(|e| e.to_string())?;
            let items = random_experiences(n, 3, ad, &mut rng);
            let batch = SacBatch::new(&items.iter().collect::<Vec<_>>());
            let z = gaussian(3, zd, &mut rng);
            let y = agent.targets(&batch, &z, &gaussian(3, ad, &mut rng)).map_err(|e| e.to_string())?;
            let e = grad_check(
                &agent.critic_params,
                |tape, b| {
                    let zv = tape.constant(z.clone());
                    agent.critic_loss(tape, b, &batch, Some(zv), &y)
                },
                1e-6,
            );
            worst[0] = worst[0].max(e);
            let eps = gaussian(3, ad, &mut rng);
            let critic = agent.critic_params.clone();
            let e = grad_check(
                &agent.actor_params,
                |tape, b| {
                    let cb = critic.bind_frozen(tape);
                    let zv = tape.constant(z.clone());
                    agent.actor_loss(tape, b, &cb, &batch.inputs, Some(zv), &eps).0
                },
                1e-6,
            );
            worst[1] = worst[1].max(e);

            let meta = MetaConfig { z_dim: zd, gcn_hidden: 4, hidden: 6, beta: 0.1, ..MetaConfig::default() };
            let learner = MetaLearner::new(ad, SacConfig { gcn_hidden: 4, hidden: 6, ..SacConfig::default() }, meta, seed)
                .map_err(|e| e.to_string())?;
            let ctx = ContextInputs::new(&items.iter().collect::<Vec<_>>());
            let e = grad_check(
                &learner.encoder_params,
                |tape, b| {
                    let (mu, var) = learner.encoder.posterior(tape, b, &ctx);
                    let k = kl_to_standard(tape, mu, var);
                    tape.scale(k, 0.1)
                },
                1e-6,
            );
            worst[2] = worst[2].max(e);

            let disc = Discriminator::new(ad, zd, DiscriminatorConfig { gcn_hidden: 4, hidden: 6, ..Default::default() }, seed);
            let prefixes = vec![items.iter().take(1).collect::<Vec<_>>(), items.iter().collect()];
            let targets = gaussian(2, zd, &mut rng);
            let e = grad_check(&disc.params, |tape, b| disc.loss(tape, b, &prefixes, &targets), 1e-6);
            worst[3] = worst[3].max(e);
        }
        let detail = format!("max rel err J_Q {:.1e}, J_pi {:.1e}, beta*KL {:.1e}, L_dr {:.1e}", worst[0], worst[1], worst[2], worst[3]);
        if worst.iter().all(|&w| w < 1e-4) {
            Ok(detail)
        } else {
            Err(detail)
        }
    })
}

/// Per-dimension quadrature of `∫ q log(q/p)` for `q = N(μ, v)`, `p = N(0, 1)`.
fn kl_quadrature(mu: &[f64], var: &[f64]) -> f64 {
    let mut total = 0.0;
    for (&m, &v) in mu.iter().zip(var) {
        let s = v.sqrt();
        let (a, b, n) = (m - 12.0 * s, m + 12.0 * s, 20_000usize);
        let h = (b - a) / n as f64;
        let f = |x: f64| {
            let lq = -0.5 * (x - m) * (x - m) / v - 0.5 * (2.0 * std::f64::consts::PI * v).ln();
            let lp = -0.5 * x * x - 0.5 * (2.0 * std::f64::consts::PI).ln();
            lq.exp() * (lq - lp)
        };
        let mut acc = f(a) + f(b);
        for k in 1..n {
            acc += f(a + k as f64 * h) * if k % 2 == 1 { 4.0 } else { 2.0 };
        }
        total += acc * h / 3.0;
    }
    total
}

/// Compares a closed-form KL to the standard normal against quadrature on random inputs.
pub fn kl_agreement(kl: impl Fn(&[f64], &[f64]) -> f64) -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let d = rng.gen_range(1..=5);
        let mu: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let var: Vec<f64> = (0..d).map(|_| rng.gen_range(0.05..3.0)).collect();
        let want = kl_quadrature(&mu, &var);
        let got = kl(&mu, &var);
        worst = worst.max((got - want).abs() / want.abs().max(1e-12));
    }
    if worst < 1e-6 {
        Ok(worst)
    } else {
        Err(format!("closed form differs from quadrature by {worst:.2e}"))
    }
}

/// The taped KL used in training, evaluated forward.
pub fn taped_kl(mu: &[f64], var: &[f64]) -> f64 {
    let mut tape = crate::nn::Tape::new();
    let m = tape.constant(Matrix::row_vector(mu));
    let v = tape.constant(Matrix::row_vector(var));
    let k = kl_to_standard(&mut tape, m, v);
    tape.scalar(k)
}

pub fn kl_formula() -> Check {
    timed("meta", "KL closed form against quadrature", || {
        let e = kl_agreement(taped_kl)?;
        Ok(format!("max rel err {e:.1e} over 20 random posteriors"))
    })
}

pub fn gcn_correctness() -> Check {
    timed("nn", "GCN hand example and permutation equivariance", || {
        let (a, b) = (0.37, -1.25);
        let adj = Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]);
        let out = gcn_forward(&Matrix::column_vector(&[a, b]), &adj, &Matrix::filled(1, 1, 1.0), Activation::Identity, None);
        let want = a / 2.0 + b / 2.0;
        for i in 0..2 {
            if (out[(i, 0)] - want).abs() > 1e-12 {
                return Err(format!("two-node output {} vs {want}", out[(i, 0)]));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut params = ParamSet::new();
        let t1 = params.push_glorot("t1", N_FEATURES, 5, &mut rng);
        let t2 = params.push_glorot("t2", 5, 4, &mut rng);
        for trial in 0..100 {
            let n = rng.gen_range(2..=8);
            let g = random_graph(n, &mut rng);
            let mut perm: Vec<usize> = (0..n).collect();
            rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
            let x = g.eig.permute_rows(&perm);
            let mut adj = Matrix::zeros(n, n);
            for i in 0..n {
                for j in 0..n {
                    adj[(i, j)] = g.adj[(perm[i], perm[j])];
                }
            }
            let run = |x: &Matrix, adj: &Matrix| {
                let h = gcn_forward(x, adj, params.get(t1), Activation::Relu, None);
                gcn_forward(&h, adj, params.get(t2), Activation::Relu, None)
            };
            let base = run(&g.eig, &g.adj).permute_rows(&perm);
            if run(&x, &adj) != base {
                return Err(format!("graph {trial}: permuted output differs"));
            }
        }
        Ok("hand example to 1e-12; 100/100 permutations bit-identical".into())
    })
}

fn two_bus() -> GridSpec {
    let bus = |id, kind| BusSpec { id, bus_kind: kind, voltage_bounds: (0.9, 1.1), angle_bounds: (-1.0, 1.0) };
    GridSpec {
        meta: GridMeta { base_mva: 100.0, interval_hours: 1.0 },
        buses: vec![bus(0, BusKind::Slack), bus(1, BusKind::Load)],
        lines: vec![LineSpec { id: 0, from_bus: 0, to_bus: 1, conductance: 0.0, susceptance: -10.0, flow_limit: 5.0, in_service: true }],
        thermal: vec![],
        renewable: vec![],
        storage: vec![],
    }
}

/// Bisection on `10·cos θ·sin θ + load = 0`; with zero reactive load the far-end voltage is `cos θ`.
fn two_bus_bisection(load: f64) -> (f64, f64) {
    let f = |t: f64| 10.0 * t.cos() * t.sin() + load;
    let (mut lo, mut hi) = (-std::f64::consts::FRAC_PI_4, 0.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(lo) * f(mid) <= 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let th = 0.5 * (lo + hi);
    (th.cos(), th)
}

pub fn power_flow_validity() -> Check {
    timed("powerflow", "AC oracle, residuals, DC small-angle limit", || {
        let cfg = PowerFlowConfig::default();
        let s = two_bus();
        let mut worst_bis: f64 = 0.0;
        for load in [0.1, 0.5, 1.0, 2.0, 3.5] {
            let mut inj = InjectionSet::zeros(2);
            inj.p[1] = -load;
            let sol = solve_ac(&s, &inj, &cfg).map_err(|e| e.to_string())?;
            if !sol.converged {
                return Err(format!("two-bus load {load} did not converge"));
            }
            let (u, th) = two_bus_bisection(load);
            worst_bis = worst_bis.max((sol.voltage[1] - u).abs()).max((sol.angle[1] - th).abs());
        }
        if worst_bis > 1e-6 {
            return Err(format!("two-bus deviation {worst_bis:.2e}"));
        }

        let ring = three_bus_ring();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut worst_res: f64 = 0.0;
        let mut converged = 0;
        for _ in 0..50 {
            let mut inj = InjectionSet::zeros(3);
            inj.p = vec![0.0, -rng.gen_range(0.0..1.2), rng.gen_range(-1.0..0.5)];
            inj.q = vec![0.0, -rng.gen_range(0.0..0.3), -rng.gen_range(0.0..0.3)];
            let sol = solve_ac(&ring, &inj, &cfg).map_err(|e| e.to_string())?;
            if !sol.converged {
                continue;
            }
            converged += 1;
            let (g, b) = admittance(&ring);
            let (p, q) = bus_injections(&g, &b, &sol.voltage, &sol.angle);
            for i in 1..3 {
                worst_res = worst_res.max((p[i] - inj.p[i]).abs()).max((q[i] - inj.q[i]).abs());
            }
        }
        if worst_res > 1e-8 || converged == 0 {
            return Err(format!("residual {worst_res:.2e} over {converged} converged cases"));
        }

        let mut lossless = three_bus_ring();
        for l in &mut lossless.lines {
            l.conductance = 0.0;
        }
        let eps = 1e-3;
        let mut inj = InjectionSet::zeros(3);
        inj.p = vec![0.0, -0.6 * eps, 0.25 * eps];
        let tight = PowerFlowConfig { tolerance: 1e-15, ..cfg };
        let ac = solve_ac(&lossless, &inj, &tight).map_err(|e| e.to_string())?;
        let dc = solve_dc(&lossless, &inj.p).map_err(|e| e.to_string())?;
        let diff = ac.angle.iter().zip(&dc.angle).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let norm = dc.angle.iter().map(|a| a * a).sum::<f64>().sqrt();
        let ratio = diff / norm;
        if ratio >= 1e-2 {
            return Err(format!("DC/AC angle ratio {ratio:.2e}"));
        }
        Ok(format!("bisection dev {worst_bis:.1e}; residual {worst_res:.1e} ({converged} cases); DC/AC ratio {ratio:.1e}"))
    })
}

pub fn environment_conservation() -> Check {
    timed("env", "energy telescoping and complementarity", || {
        let spec = three_bus_ring();
        let fams = make_demo_families(8, &spec);
        let st = &spec.storage[0];
        let dt = spec.dt();
        let mut worst_tel: f64 = 0.0;
        for k in 0..1000u64 {
            let fam = &fams[(k % fams.len() as u64) as usize];
            let smp = sample(fam, k);
            let network = [NetworkModel::CopperPlate, NetworkModel::Dc, NetworkModel::Ac][(k % 3) as usize];
            let cfg = EnvConfig { network, reward_scale: 1000.0, ..EnvConfig::default() };
            let mut rng = ChaCha8Rng::seed_from_u64(k);
            let mut policy = |_: &DispatchState, _: &GridGraph, _: &[f64]| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
            let tr = rollout(&mut policy, &spec, &smp, &[], &cfg).map_err(|e| e.to_string())?;
            let mut flow = 0.0;
            for t in &tr.transitions {
                let a = &t.action;
                if a.charge(0) * a.discharge(0) != 0.0 {
                    return Err(format!("rollout {k} stage {}: simultaneous charge and discharge", t.t));
                }
                let step = (st.eta_c() * a.charge(0) - a.discharge(0) / st.eta_d()) * dt;
                if t.next_state.energy[0] != t.state.energy[0] + step {
                    return Err(format!("rollout {k} stage {}: energy update off", t.t));
                }
                flow += step;
            }
            let e0 = tr.transitions[0].state.energy[0];
            let et = tr.transitions.last().map(|t| t.next_state.energy[0]).unwrap_or(e0);
            worst_tel = worst_tel.max((et - e0 - flow).abs());
        }
        if worst_tel > 1e-9 {
            return Err(format!("telescoping gap {worst_tel:.2e}"));
        }
        Ok(format!("1000 rollouts; per-step identity exact; telescoped gap {worst_tel:.1e}"))
    })
}

/// Random single-thermal, single-storage instance for oracle checks.
pub fn tiny_instance(rng: &mut impl Rng, horizon: usize) -> (GridSpec, ScenarioSample) {
    let mut spec = three_bus_ring();
    spec.renewable.clear();
    let pmax = rng.gen_range(80.0..200.0);
    let ramp = rng.gen_range(30.0..pmax);
    spec.thermal = vec![ThermalGenerator {
        bus: 0,
        p_bounds: (0.0, pmax),
        q_bounds: (-100.0, 100.0),
        ramp: (-ramp, ramp),
        cost: (rng.gen_range(0.01..0.2), rng.gen_range(5.0..30.0), rng.gen_range(0.0..50.0)),
    }];
    let emax = rng.gen_range(20.0..60.0);
    spec.storage = vec![StorageUnit {
        bus: 2,
        power_bounds: (rng.gen_range(10.0..30.0), rng.gen_range(10.0..30.0)),
        energy_bounds: (0.0, emax),
        efficiencies: (rng.gen_range(0.85..1.0), rng.gen_range(0.85..1.0)),
        degradation_cost: rng.gen_range(0.0..5.0),
        initial_soc_fraction: rng.gen_range(0.0..1.0),
    }];
    let rows: Vec<Vec<f64>> = (0..horizon)
        .map(|_| {
            let l = rng.gen_range(0.0..0.6 * ramp.min(pmax));
            let split = rng.gen_range(0.0..1.0);
            vec![0.0, l * split, l * (1.0 - split)]
        })
        .collect();
    let load_p = Matrix::from_rows(&rows);
    let smp = ScenarioSample {
        family_id: 0,
        seed: 0,
        profile: Profile { load_q: load_p.scale(0.0), load_p, re_max: Matrix::zeros(horizon, 0) },
        outages: vec![],
    };
    (spec, smp)
}

/// Brute force over every storage-target sequence on the lattice `{lo + k·res} ∪ {hi} ∪ {current}`.
pub fn exhaustive_minimum(spec: &GridSpec, smp: &ScenarioSample, res: f64) -> Option<f64> {
    let st = &spec.storage[0];
    let g = &spec.thermal[0];
    let dt = spec.dt();
    let (lo, hi) = st.energy_bounds;
    let mut grid = Vec::new();
    let mut k = 0;
    while lo + k as f64 * res < hi {
        grid.push(lo + k as f64 * res);
        k += 1;
    }
    grid.push(hi);
    let horizon = smp.horizon();
    let tol = 1e-9;
    let mut best: Option<f64> = None;

    // depth-first over stages carrying (energy, previous output, cost so far)
    let mut stack = vec![(0usize, st.initial_energy(), 0.0f64, 0.0f64)];
    while let Some((t, e, prev, cost)) = stack.pop() {
        if t == horizon {
            best = Some(best.map_or(cost, |b: f64| b.min(cost)));
            continue;
        }
        let mut targets = grid.clone();
        if !targets.contains(&e) {
            targets.push(e);
        }
        let load: f64 = smp.profile.load_p.row(t).iter().sum();
        let cmax = st.charge_max().min((hi - e) / (st.eta_c() * dt));
        let dmax = st.discharge_max().min((e - lo) * st.eta_d() / dt);
        let (plo, phi) = ((prev + g.ramp.0).max(g.p_bounds.0), (prev + g.ramp.1).min(g.p_bounds.1));
        for target in targets {
            let u = if target >= e { -(target - e) / (st.eta_c() * dt) } else { (e - target) * st.eta_d() / dt };
            if u < -cmax - tol || u > dmax + tol {
                continue;
            }
            let u = u.clamp(-cmax, dmax);
            let p = load - u;
            if p < plo - tol || p > phi + tol {
                continue;
            }
            let p = p.clamp(plo, phi);
            let action = DispatchAction { p_tg: vec![p], p_re: vec![], u_es: vec![u] };
            let state = DispatchState {
                t,
                horizon,
                p_tg_prev: vec![prev],
                energy: vec![e],
                load_p: smp.profile.load_p.row(t).to_vec(),
                load_q: smp.profile.load_q.row(t).to_vec(),
                re_max: vec![],
                in_service: spec.in_service_mask(),
            };
            stack.push((t + 1, target, p, cost + stage_cost(&action, &state, spec).total));
        }
    }
    best
}

pub fn oracle_exactness() -> Check {
    timed("baselines", "DP oracle exactness and refinement", || {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let mut compared = 0;
        let mut attempts = 0;
        while compared < 50 {
            attempts += 1;
            if attempts > 500 {
                return Err(format!("only {compared} feasible instances in 500 draws"));
            }
            let (spec, smp) = tiny_instance(&mut rng, 4);
            let res = spec.storage[0].energy_bounds.1 / rng.gen_range(3..=8) as f64;
            let brute = exhaustive_minimum(&spec, &smp, res);
            let disc = DpDiscretization { energy_res: res, ..Default::default() };
            let dp = ops_oracle(&spec, &smp, &disc);
            match (brute, dp) {
                (None, Err(_)) => continue,
                (Some(b), Ok(d)) => {
                    if b != d.cost {
                        return Err(format!("instance {attempts}: DP {} vs enumeration {b}", d.cost));
                    }
                    compared += 1;
                }
                (b, d) => return Err(format!("instance {attempts}: feasibility disagrees ({b:?} vs {:?})", d.map(|r| r.cost))),
            }
        }
        let mut refined = 0;
        let spec = three_bus_ring();
        let fams = make_demo_families(4, &spec);
        for k in 0..10u64 {
            let fam = &fams[(k % fams.len() as u64) as usize];
            let mut smp = sample(fam, k);
            smp.outages.clear();
            let coarse = DpDiscretization { energy_res: 20.0, tg_res: 40.0, re_step: 0.5, ..Default::default() };
            let a = ops_oracle(&spec, &smp, &coarse).map_err(|e| e.to_string())?.cost;
            let b = ops_oracle(&spec, &smp, &coarse.refined()).map_err(|e| e.to_string())?.cost;
            if b > a {
                return Err(format!("refinement raised cost {a} -> {b} on sample {k}"));
            }
            refined += 1;
        }
        Ok(format!("{compared} instances equal bit-for-bit; {refined} refinements monotone"))
    })
}

pub fn mpc_sanity() -> Check {
    timed("baselines", "MPC ordering and full-horizon gap", || {
        let spec = three_bus_ring();
        let horizon = 8;
        let mut lines = Vec::new();
        for mut fam in make_demo_families(horizon, &spec) {
            fam.sigma = 0.0;
            fam.outages.clear();
            let smp = expected_sample(&fam);
            let disc = DpDiscretization { energy_res: 2.5, re_step: 0.125, network: OracleNetwork::Dc, ..Default::default() };
            let ops = ops_oracle(&spec, &smp, &disc).map_err(|e| e.to_string())?.cost;
            let mut costs = Vec::new();
            for n in [1, 2, 4, horizon] {
                let cfg = MpcConfig { horizon: n, ..MpcConfig::default() };
                costs.push(mpc_episode_cost(&spec, &fam, &smp, &cfg).map_err(|e| e.to_string())?.0);
            }
            for w in costs.windows(2) {
                if w[1] > w[0] * 1.01 {
                    return Err(format!("{}: MPC costs {costs:?} not non-increasing", fam.label));
                }
            }
            let full = *costs.last().expect("four horizons");
            if full > ops * 1.02 {
                return Err(format!("{}: MPC-full {full:.1} vs OPS {ops:.1}", fam.label));
            }
            lines.push(format!("{} {:.1}%", fam.label, 100.0 * (full - ops) / ops));
        }
        Ok(format!("MPC-full minus OPS: {}", lines.join(", ")))
    })
}

/// Plain-text table of results.
pub fn render(checks: &[Check]) -> String {
    let mut s = String::new();
    for c in checks {
        s += &format!(
            "{:<5} {:<11} {:<48} {:>7.2}s  {}\n",
            if c.passed { "PASS" } else { "FAIL" },
            c.module,
            c.name,
            c.seconds,
            c.detail
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exhaustive_oracle_agrees_on_a_few_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut n = 0;
        for _ in 0..40 {
            let (spec, smp) = tiny_instance(&mut rng, 3);
            let res = spec.storage[0].energy_bounds.1 / 4.0;
            if let (Some(b), Ok(d)) = (exhaustive_minimum(&spec, &smp, res), ops_oracle(&spec, &smp, &DpDiscretization { energy_res: res, ..Default::default() })) {
                assert_eq!(b, d.cost);
                n += 1;
            }
        }
        assert!(n >= 5);
    }

    #[test]
    fn reference_values_and_gcn_pass() {
        assert!(reference_values().passed);
        let g = gcn_correctness();
        assert!(g.passed, "{}", g.detail);
    }
}
