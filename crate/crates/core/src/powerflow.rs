//! AC Newton–Raphson and linear DC power flow, plus limit checking.
//!
//! Lines are series admittances `y = G + jB` (per-unit). The bus admittance
//! matrix is assembled from in-service lines only. Slack bus angle is the
//! reference (0 rad); generator buses are PV, load buses PQ.

use crate::grid::{BusKind, GridSpec};
use crate::matrix::Matrix;
use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use std::io::Write;

#[derive(Debug, thiserror::Error)]
pub enum PowerFlowError {
    #[error("grid has no slack bus")]
    NoSlack,
    #[error("injection vectors have {got} entries, grid has {expected} buses")]
    Shape { expected: usize, got: usize },
    #[error("singular Jacobian at Newton iteration {iteration}")]
    SingularJacobian { iteration: usize },
    #[error("reduced susceptance matrix is singular")]
    SingularSusceptance,
    #[error("line {0} has zero susceptance")]
    ZeroSusceptance(usize),
}

/// Net per-bus injections in per-unit. Entries at the slack bus (and `q` at
/// PV buses) are ignored by the solver.
#[derive(Debug, Clone, PartialEq)]
pub struct InjectionSet {
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    /// Voltage magnitude setpoints, used at slack and generator buses.
    pub v_set: Vec<f64>,
}

impl InjectionSet {
    pub fn zeros(n: usize) -> Self {
        Self { p: vec![0.0; n], q: vec![0.0; n], v_set: vec![1.0; n] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerFlowConfig {
    pub tolerance: f64,
    pub max_iters: usize,
    pub flat_start: bool,
}

impl Default for PowerFlowConfig {
    fn default() -> Self {
        Self { tolerance: 1e-8, max_iters: 30, flat_start: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LineFlow {
    pub line_id: usize,
    pub p_from: f64,
    pub q_from: f64,
    pub p_to: f64,
    pub q_to: f64,
    pub loss: f64,
}

impl LineFlow {
    pub fn apparent_max(&self) -> f64 {
        self.p_from.hypot(self.q_from).max(self.p_to.hypot(self.q_to))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PowerFlowSolution {
    pub voltage: Vec<f64>,
    pub angle: Vec<f64>,
    /// In-service lines only.
    pub flows: Vec<LineFlow>,
    /// Injections recomputed from `(U, θ)` at every bus.
    pub p_injection: Vec<f64>,
    pub q_injection: Vec<f64>,
    pub slack_p: f64,
    pub slack_q: f64,
    pub converged: bool,
    pub iterations: usize,
    pub mismatch: f64,
}

impl PowerFlowSolution {
    pub fn total_loss(&self) -> f64 {
        self.flows.iter().map(|f| f.loss).sum()
    }

    /// CSV rows `bus,U,theta` for debugging.
    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["bus", "U", "theta"])?;
        for (i, (u, th)) in self.voltage.iter().zip(&self.angle).enumerate() {
            w.write_record([i.to_string(), format!("{u:.10}"), format!("{th:.10}")])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Dense bus admittance matrix split into `(G, B)`.
pub fn admittance(spec: &GridSpec) -> (Matrix, Matrix) {
    let n = spec.n_buses();
    let mut g = Matrix::zeros(n, n);
    let mut b = Matrix::zeros(n, n);
    for l in spec.in_service_lines() {
        let (f, t) = (l.from_bus, l.to_bus);
        g[(f, f)] += l.conductance;
        g[(t, t)] += l.conductance;
        g[(f, t)] -= l.conductance;
        g[(t, f)] -= l.conductance;
        b[(f, f)] += l.susceptance;
        b[(t, t)] += l.susceptance;
        b[(f, t)] -= l.susceptance;
        b[(t, f)] -= l.susceptance;
    }
    (g, b)
}

/// Active and reactive injections implied by `(U, θ)`.
pub fn bus_injections(g: &Matrix, b: &Matrix, u: &[f64], th: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = u.len();
    let mut p = vec![0.0; n];
    let mut q = vec![0.0; n];
    for i in 0..n {
        for j in 0..n {
            let (gij, bij) = (g[(i, j)], b[(i, j)]);
            if gij == 0.0 && bij == 0.0 {
                continue;
            }
            let (s, c) = (th[i] - th[j]).sin_cos();
            p[i] += u[i] * u[j] * (gij * c + bij * s);
            q[i] += u[i] * u[j] * (gij * s - bij * c);
        }
    }
    (p, q)
}

fn line_flows(spec: &GridSpec, u: &[f64], th: &[f64]) -> Vec<LineFlow> {
    spec.in_service_lines()
        .map(|l| {
            let (f, t) = (l.from_bus, l.to_bus);
            let (gl, bl) = (l.conductance, l.susceptance);
            let end = |a: usize, z: usize| {
                let (s, c) = (th[a] - th[z]).sin_cos();
                let p = u[a] * u[a] * gl - u[a] * u[z] * (gl * c + bl * s);
                let q = -u[a] * u[a] * bl - u[a] * u[z] * (gl * s - bl * c);
                (p, q)
            };
            let (p_from, q_from) = end(f, t);
            let (p_to, q_to) = end(t, f);
            LineFlow { line_id: l.id, p_from, q_from, p_to, q_to, loss: p_from + p_to }
        })
        .collect()
}

/// Solve the AC power flow by Newton–Raphson in polar coordinates.
///
/// Non-convergence within `max_iters` (or a non-finite iterate) returns a
/// solution with `converged == false`; a singular Jacobian is an error.
pub fn solve_ac(
    spec: &GridSpec,
    inj: &InjectionSet,
    config: &PowerFlowConfig,
) -> Result<PowerFlowSolution, PowerFlowError> {
    solve_ac_from(spec, inj, config, None)
}

/// As [`solve_ac`], optionally starting from a previous `(U, θ)` when
/// `config.flat_start` is false.
pub fn solve_ac_from(
    spec: &GridSpec,
    inj: &InjectionSet,
    config: &PowerFlowConfig,
    start: Option<(&[f64], &[f64])>,
) -> Result<PowerFlowSolution, PowerFlowError> {
    let n = spec.n_buses();
    for len in [inj.p.len(), inj.q.len(), inj.v_set.len()] {
        if len != n {
            return Err(PowerFlowError::Shape { expected: n, got: len });
        }
    }
    let slack = spec.slack_bus().ok_or(PowerFlowError::NoSlack)?;
    let (g, b) = admittance(spec);

    let kinds: Vec<BusKind> = spec.buses.iter().map(|b| b.bus_kind).collect();
    let pvpq: Vec<usize> = (0..n).filter(|&i| i != slack).collect();
    let pq: Vec<usize> = (0..n).filter(|&i| kinds[i] == BusKind::Load).collect();

    let mut u: Vec<f64> = (0..n).map(|i| if kinds[i] == BusKind::Load { 1.0 } else { inj.v_set[i] }).collect();
    let mut th = vec![0.0; n];
    if let (false, Some((u0, th0))) = (config.flat_start, start) {
        for i in 0..n {
            if kinds[i] == BusKind::Load {
                u[i] = u0[i];
            }
            th[i] = th0[i];
        }
        th[slack] = 0.0;
    }

    let np = pvpq.len();
    let dim = np + pq.len();
    let mut iterations = 0;
    let mut converged = false;
    let mut mismatch_norm;

    loop {
        let (p, q) = bus_injections(&g, &b, &u, &th);
        let mut mis = DVector::zeros(dim);
        for (k, &i) in pvpq.iter().enumerate() {
            mis[k] = inj.p[i] - p[i];
        }
        for (k, &i) in pq.iter().enumerate() {
            mis[np + k] = inj.q[i] - q[i];
        }
        mismatch_norm = mis.amax();
        if !mismatch_norm.is_finite() {
            break;
        }
        if mismatch_norm <= config.tolerance {
            converged = true;
            break;
        }
        if iterations >= config.max_iters {
            break;
        }
        iterations += 1;

        let mut jac = DMatrix::zeros(dim, dim);
        // columns: θ of pvpq, then U of pq
        for (r, &i) in pvpq.iter().enumerate() {
            for (c, &k) in pvpq.iter().enumerate() {
                jac[(r, c)] = dp_dtheta(&g, &b, &u, &th, &p, &q, i, k);
            }
            for (c, &k) in pq.iter().enumerate() {
                jac[(r, np + c)] = dp_du(&g, &b, &u, &th, &p, i, k);
            }
        }
        for (r, &i) in pq.iter().enumerate() {
            for (c, &k) in pvpq.iter().enumerate() {
                jac[(np + r, c)] = dq_dtheta(&g, &b, &u, &th, &p, i, k);
            }
            for (c, &k) in pq.iter().enumerate() {
                jac[(np + r, np + c)] = dq_du(&g, &b, &u, &th, &q, i, k);
            }
        }
        let step = jac.lu().solve(&mis).ok_or(PowerFlowError::SingularJacobian { iteration: iterations })?;
        for (k, &i) in pvpq.iter().enumerate() {
            th[i] += step[k];
        }
        for (k, &i) in pq.iter().enumerate() {
            u[i] += step[np + k];
        }
    }

    let (p, q) = bus_injections(&g, &b, &u, &th);
    let flows = line_flows(spec, &u, &th);
    Ok(PowerFlowSolution {
        slack_p: p[slack],
        slack_q: q[slack],
        voltage: u,
        angle: th,
        flows,
        p_injection: p,
        q_injection: q,
        converged,
        iterations,
        mismatch: mismatch_norm,
    })
}

#[allow(clippy::too_many_arguments)]
fn dp_dtheta(g: &Matrix, b: &Matrix, u: &[f64], th: &[f64], _p: &[f64], q: &[f64], i: usize, k: usize) -> f64 {
    if i == k {
        -q[i] - b[(i, i)] * u[i] * u[i]
    } else {
        let (s, c) = (th[i] - th[k]).sin_cos();
        u[i] * u[k] * (g[(i, k)] * s - b[(i, k)] * c)
    }
}

fn dp_du(g: &Matrix, b: &Matrix, u: &[f64], th: &[f64], p: &[f64], i: usize, k: usize) -> f64 {
    if i == k {
        p[i] / u[i] + g[(i, i)] * u[i]
    } else {
        let (s, c) = (th[i] - th[k]).sin_cos();
        u[i] * (g[(i, k)] * c + b[(i, k)] * s)
    }
}

fn dq_dtheta(g: &Matrix, b: &Matrix, u: &[f64], th: &[f64], p: &[f64], i: usize, k: usize) -> f64 {
    if i == k {
        p[i] - g[(i, i)] * u[i] * u[i]
    } else {
        let (s, c) = (th[i] - th[k]).sin_cos();
        -u[i] * u[k] * (g[(i, k)] * c + b[(i, k)] * s)
    }
}

fn dq_du(g: &Matrix, b: &Matrix, u: &[f64], th: &[f64], q: &[f64], i: usize, k: usize) -> f64 {
    if i == k {
        q[i] / u[i] - b[(i, i)] * u[i]
    } else {
        let (s, c) = (th[i] - th[k]).sin_cos();
        u[i] * (g[(i, k)] * s - b[(i, k)] * c)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DcSolution {
    pub angle: Vec<f64>,
    /// `(line id, P_ij)` for in-service lines, per-unit.
    pub flows: Vec<(usize, f64)>,
    pub slack_injection: f64,
}

/// Reduced DC susceptance matrix `B'` with the slack row/column removed, and
/// the bus order of its rows.
fn reduced_susceptance(spec: &GridSpec) -> Result<(DMatrix<f64>, Vec<usize>, usize), PowerFlowError> {
    let n = spec.n_buses();
    let slack = spec.slack_bus().ok_or(PowerFlowError::NoSlack)?;
    let mut bp = DMatrix::zeros(n, n);
    for l in spec.in_service_lines() {
        if l.susceptance == 0.0 {
            return Err(PowerFlowError::ZeroSusceptance(l.id));
        }
        let (f, t, bl) = (l.from_bus, l.to_bus, l.susceptance);
        bp[(f, f)] -= bl;
        bp[(t, t)] -= bl;
        bp[(f, t)] += bl;
        bp[(t, f)] += bl;
    }
    let keep: Vec<usize> = (0..n).filter(|&i| i != slack).collect();
    let mut red = DMatrix::zeros(keep.len(), keep.len());
    for (r, &i) in keep.iter().enumerate() {
        for (c, &j) in keep.iter().enumerate() {
            red[(r, c)] = bp[(i, j)];
        }
    }
    Ok((red, keep, slack))
}

/// Linear DC power flow: solves `B'θ = P` with the slack absorbing imbalance.
pub fn solve_dc(spec: &GridSpec, active_inj: &[f64]) -> Result<DcSolution, PowerFlowError> {
    let n = spec.n_buses();
    if active_inj.len() != n {
        return Err(PowerFlowError::Shape { expected: n, got: active_inj.len() });
    }
    let (red, keep, slack) = reduced_susceptance(spec)?;
    let rhs = DVector::from_iterator(keep.len(), keep.iter().map(|&i| active_inj[i]));
    let sol = if keep.is_empty() {
        DVector::zeros(0)
    } else {
        red.lu().solve(&rhs).ok_or(PowerFlowError::SingularSusceptance)?
    };
    let mut angle = vec![0.0; n];
    for (k, &i) in keep.iter().enumerate() {
        angle[i] = sol[k];
    }
    let flows = spec
        .in_service_lines()
        .map(|l| (l.id, -l.susceptance * (angle[l.from_bus] - angle[l.to_bus])))
        .collect();
    let slack_injection = -keep.iter().map(|&i| active_inj[i]).sum::<f64>();
    let _ = slack;
    Ok(DcSolution { angle, flows, slack_injection })
}

/// Power transfer distribution factors: `ptdf[(l, i)]` is the DC flow on the
/// `l`-th in-service line per unit injected at bus `i` and withdrawn at the slack.
pub fn dc_ptdf(spec: &GridSpec) -> Result<Matrix, PowerFlowError> {
    let n = spec.n_buses();
    let n_lines = spec.in_service_lines().count();
    let mut out = Matrix::zeros(n_lines, n);
    for i in 0..n {
        let mut inj = vec![0.0; n];
        inj[i] = 1.0;
        let dc = solve_dc(spec, &inj)?;
        for (l, (_, f)) in dc.flows.iter().enumerate() {
            out[(l, i)] = *f;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LimitQuantity {
    Voltage,
    Angle,
    LineFlow,
    ReactivePower,
    SlackPower,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LimitViolation {
    pub element: usize,
    pub quantity: LimitQuantity,
    pub value: f64,
    pub bound: f64,
    pub excess: f64,
    /// `excess / bound_range`.
    pub normalized: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ViolationReport {
    pub entries: Vec<LimitViolation>,
}

impl ViolationReport {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Sum of normalized excesses.
    pub fn severity(&self) -> f64 {
        self.entries.iter().map(|e| e.normalized).sum()
    }

    pub fn of(&self, quantity: LimitQuantity) -> impl Iterator<Item = &LimitViolation> {
        self.entries.iter().filter(move |e| e.quantity == quantity)
    }

    /// Record `value` against `[lo, hi]` if it lies outside.
    pub fn check_range(&mut self, element: usize, quantity: LimitQuantity, value: f64, lo: f64, hi: f64) {
        let range = (hi - lo).abs().max(f64::EPSILON);
        if value > hi {
            let excess = value - hi;
            self.entries.push(LimitViolation { element, quantity, value, bound: hi, excess, normalized: excess / range });
        } else if value < lo {
            let excess = lo - value;
            self.entries.push(LimitViolation { element, quantity, value, bound: lo, excess, normalized: excess / range });
        }
    }

    pub fn extend(&mut self, other: ViolationReport) {
        self.entries.extend(other.entries);
    }
}

/// Voltage, angle, line-flow and thermal reactive-power limit check.
/// `q_tg` holds reactive output of every thermal unit in per-unit.
pub fn check_limits(sol: &PowerFlowSolution, spec: &GridSpec, q_tg: &[f64]) -> ViolationReport {
    let mut report = ViolationReport::default();
    for (i, bus) in spec.buses.iter().enumerate() {
        let (lo, hi) = bus.voltage_bounds;
        report.check_range(i, LimitQuantity::Voltage, sol.voltage[i], lo, hi);
        let (lo, hi) = bus.angle_bounds;
        report.check_range(i, LimitQuantity::Angle, sol.angle[i], lo, hi);
    }
    for f in &sol.flows {
        if let Some(k) = spec.line_index(f.line_id) {
            let limit = spec.lines[k].flow_limit;
            report.check_range(f.line_id, LimitQuantity::LineFlow, f.apparent_max(), 0.0, limit);
        }
    }
    let base = spec.base_mva();
    for (k, (g, &q)) in spec.thermal.iter().zip(q_tg).enumerate() {
        report.check_range(k, LimitQuantity::ReactivePower, q, g.q_bounds.0 / base, g.q_bounds.1 / base);
    }
    report
}

/// Angle and active line-flow check for a DC solution.
pub fn check_dc_limits(sol: &DcSolution, spec: &GridSpec) -> ViolationReport {
    let mut report = ViolationReport::default();
    for (i, bus) in spec.buses.iter().enumerate() {
        let (lo, hi) = bus.angle_bounds;
        report.check_range(i, LimitQuantity::Angle, sol.angle[i], lo, hi);
    }
    for &(id, p) in &sol.flows {
        if let Some(k) = spec.line_index(id) {
            report.check_range(id, LimitQuantity::LineFlow, p.abs(), 0.0, spec.lines[k].flow_limit);
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{BusSpec, GridMeta, LineSpec};

    fn bus(id: usize, kind: BusKind) -> BusSpec {
        BusSpec { id, bus_kind: kind, voltage_bounds: (0.9, 1.05), angle_bounds: (-1.0, 1.0) }
    }

    fn line(id: usize, a: usize, b: usize, g: f64, bb: f64) -> LineSpec {
        LineSpec { id, from_bus: a, to_bus: b, conductance: g, susceptance: bb, flow_limit: 1.0, in_service: true }
    }

    fn grid(buses: Vec<BusSpec>, lines: Vec<LineSpec>) -> GridSpec {
        GridSpec {
            meta: GridMeta { base_mva: 100.0, interval_hours: 1.0 },
            buses,
            lines,
            thermal: vec![],
            renewable: vec![],
            storage: vec![],
        }
    }

    fn two_bus() -> GridSpec {
        grid(vec![bus(0, BusKind::Slack), bus(1, BusKind::Load)], vec![line(0, 0, 1, 0.0, -10.0)])
    }

    /// Bisection on `10·cos θ·sin θ + load = 0` over `[-π/4, 0]`; with `Q = 0`
    /// the PQ bus voltage is `U₂ = cos θ`.
    fn two_bus_oracle(load: f64) -> Option<(f64, f64)> {
        let f = |t: f64| 10.0 * t.cos() * t.sin() + load;
        let (mut lo, mut hi) = (-std::f64::consts::FRAC_PI_4, 0.0);
        if f(lo) * f(hi) > 0.0 {
            return None;
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if f(lo) * f(mid) <= 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        let th = 0.5 * (lo + hi);
        Some((th.cos(), th))
    }

    #[test]
    fn zero_injections_flat_solution() {
        let s = crate::grid::three_bus_ring();
        let sol = solve_ac(&s, &InjectionSet::zeros(3), &PowerFlowConfig::default()).unwrap();
        assert!(sol.converged);
        assert_eq!(sol.iterations, 0);
        assert!(sol.voltage.iter().all(|&u| u == 1.0));
        assert!(sol.angle.iter().all(|&t| t == 0.0));
        assert!(sol.flows.iter().all(|f| f.p_from == 0.0 && f.q_from == 0.0));
    }

    #[test]
    fn two_bus_matches_bisection_oracle() {
        let s = two_bus();
        let mut inj = InjectionSet::zeros(2);
        inj.p[1] = -0.5;
        let sol = solve_ac(&s, &inj, &PowerFlowConfig::default()).unwrap();
        assert!(sol.converged);
        let (u2, th2) = two_bus_oracle(0.5).unwrap();
        assert!((sol.voltage[1] - u2).abs() < 1e-6, "{} vs {u2}", sol.voltage[1]);
        assert!((sol.angle[1] - th2).abs() < 1e-6, "{} vs {th2}", sol.angle[1]);
    }

    #[test]
    fn overload_flags_nonconvergence() {
        let s = two_bus();
        // the oracle has no root past the nose point (5 pu transfer)
        assert!(two_bus_oracle(0.5 * 2.0).is_some());
        let mut load = 0.5;
        while two_bus_oracle(load).is_some() {
            load *= 2.0;
        }
        let mut inj = InjectionSet::zeros(2);
        inj.p[1] = -load;
        match solve_ac(&s, &inj, &PowerFlowConfig::default()) {
            Ok(sol) => assert!(!sol.converged),
            Err(e) => assert!(matches!(e, PowerFlowError::SingularJacobian { .. })),
        }
    }

    #[test]
    fn converged_solution_reverifies_residuals_and_balance() {
        let s = crate::grid::three_bus_ring();
        let mut inj = InjectionSet::zeros(3);
        inj.p = vec![0.0, -0.6, -0.3];
        inj.q = vec![0.0, -0.1, -0.05];
        let sol = solve_ac(&s, &inj, &PowerFlowConfig::default()).unwrap();
        assert!(sol.converged);
        let (g, b) = admittance(&s);
        let (p, q) = bus_injections(&g, &b, &sol.voltage, &sol.angle);
        for i in 1..3 {
            assert!((p[i] - inj.p[i]).abs() <= 1e-8);
            assert!((q[i] - inj.q[i]).abs() <= 1e-8);
        }
        let net: f64 = sol.p_injection.iter().sum();
        assert!((net - sol.total_loss()).abs() <= 1e-7, "{net} vs {}", sol.total_loss());
        assert!(sol.total_loss() > 0.0);
    }

    #[test]
    fn newton_is_deterministic() {
        let s = crate::grid::three_bus_ring();
        let mut inj = InjectionSet::zeros(3);
        inj.p = vec![0.0, -0.4, -0.7];
        let a = solve_ac(&s, &inj, &PowerFlowConfig::default()).unwrap();
        let b = solve_ac(&s, &inj, &PowerFlowConfig::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn dc_zero_and_two_bus() {
        let s = two_bus();
        let z = solve_dc(&s, &[0.0, 0.0]).unwrap();
        assert_eq!(z.angle, vec![0.0, 0.0]);
        assert_eq!(z.flows, vec![(0, 0.0)]);
        let d = solve_dc(&s, &[0.0, -0.3]).unwrap();
        assert!((d.angle[1] + 0.03).abs() < 1e-15);
        assert!((d.flows[0].1 - 0.3).abs() < 1e-15);
        assert!((d.slack_injection - 0.3).abs() < 1e-15);
    }

    #[test]
    fn dc_ring_superposition() {
        // symmetric ring, +P at bus 1 and -P at bus 2: two parallel paths 1→2
        // (direct, x) and 1→0→2 (2x) carry 2/3 and 1/3 of P.
        let s = grid(
            vec![bus(0, BusKind::Slack), bus(1, BusKind::Load), bus(2, BusKind::Load)],
            vec![line(0, 0, 1, 0.0, -10.0), line(1, 1, 2, 0.0, -10.0), line(2, 2, 0, 0.0, -10.0)],
        );
        let p = 0.3;
        let d = solve_dc(&s, &[0.0, p, -p]).unwrap();
        let flow = |id: usize| d.flows.iter().find(|f| f.0 == id).unwrap().1;
        assert!((flow(1) - 2.0 * p / 3.0).abs() < 1e-12);
        assert!((flow(0) + p / 3.0).abs() < 1e-12);
        assert!((flow(2) + p / 3.0).abs() < 1e-12);
        assert!(d.slack_injection.abs() < 1e-15);
    }

    #[test]
    fn dc_matches_ac_small_angle_limit() {
        let mut s = crate::grid::three_bus_ring();
        for l in &mut s.lines {
            l.conductance = 0.0;
        }
        let eps = 1e-3;
        let mut inj = InjectionSet::zeros(3);
        inj.p = vec![0.0, -0.6 * eps, 0.25 * eps];
        let ac = solve_ac(&s, &inj, &PowerFlowConfig::default()).unwrap();
        let dc = solve_dc(&s, &inj.p).unwrap();
        let diff: f64 = ac.angle.iter().zip(&dc.angle).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = dc.angle.iter().map(|a| a * a).sum::<f64>().sqrt();
        assert!(diff / norm < 1e-2, "ratio {}", diff / norm);
    }

    #[test]
    fn ptdf_reproduces_dc_flows() {
        let s = crate::grid::three_bus_ring();
        let inj = [0.0, -0.4, 0.1];
        let ptdf = dc_ptdf(&s).unwrap();
        let dc = solve_dc(&s, &inj).unwrap();
        for (l, (_, f)) in dc.flows.iter().enumerate() {
            let lin: f64 = (0..3).map(|i| ptdf[(l, i)] * inj[i]).sum();
            assert!((lin - f).abs() < 1e-12);
        }
    }

    fn flat_solution(n: usize) -> PowerFlowSolution {
        PowerFlowSolution {
            voltage: vec![1.0; n],
            angle: vec![0.0; n],
            flows: vec![],
            p_injection: vec![0.0; n],
            q_injection: vec![0.0; n],
            slack_p: 0.0,
            slack_q: 0.0,
            converged: true,
            iterations: 0,
            mismatch: 0.0,
        }
    }

    #[test]
    fn limits_within_bounds_empty() {
        let s = two_bus();
        let r = check_limits(&flat_solution(2), &s, &[]);
        assert!(r.is_empty());
        assert_eq!(r.severity(), 0.0);
    }

    #[test]
    fn overvoltage_single_entry() {
        let s = two_bus();
        let mut sol = flat_solution(2);
        sol.voltage[1] = 1.10;
        let r = check_limits(&sol, &s, &[]);
        assert_eq!(r.entries.len(), 1);
        let e = &r.entries[0];
        assert_eq!(e.quantity, LimitQuantity::Voltage);
        assert!((e.excess - 0.05).abs() < 1e-12);
    }

    #[test]
    fn line_overload_normalized_excess() {
        let s = two_bus();
        let mut sol = flat_solution(2);
        sol.flows.push(LineFlow { line_id: 0, p_from: 1.2, q_from: 0.0, p_to: -1.2, q_to: 0.0, loss: 0.0 });
        let r = check_limits(&sol, &s, &[]);
        assert_eq!(r.entries.len(), 1);
        assert_eq!(r.entries[0].quantity, LimitQuantity::LineFlow);
        assert!((r.entries[0].normalized - 0.2).abs() < 1e-12);
        assert!((r.severity() - 0.2).abs() < 1e-12);
    }

    #[test]
    fn csv_dump_has_header_and_rows() {
        let mut buf = Vec::new();
        flat_solution(2).write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("bus,U,theta\n"));
        assert_eq!(text.lines().count(), 3);
    }
}
