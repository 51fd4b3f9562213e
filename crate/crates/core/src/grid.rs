//! Static grid description, topology edits and the `(Adj, Eig)` graph snapshot.
//!
//! Units: powers in MW / MVAr, energies in MWh, cost coefficients in
//! $/MW²h, $/MWh and $, line parameters and voltages in per-unit on
//! `base_mva`, angles in radians. The thermal down-ramp is stored as a
//! nonpositive number so that `ramp.0 <= P(t) - P(t-1) <= ramp.1`.

use crate::matrix::Matrix;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeSet, VecDeque};
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum GridError {
    #[error("unknown line id {0}")]
    UnknownLine(usize),
    #[error("islanding: taking lines {0:?} out of service disconnects the network")]
    Islanding(Vec<usize>),
    #[error("node feature matrix has {got} rows, grid has {expected} buses")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("invalid grid spec: {0}")]
    Invalid(String),
    #[error("failed to read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("failed to parse grid spec: {0}")]
    Parse(#[from] toml::de::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BusKind {
    Slack,
    Generator,
    Load,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BusSpec {
    pub id: usize,
    pub bus_kind: BusKind,
    /// `(U_min, U_max)` in per-unit.
    pub voltage_bounds: (f64, f64),
    /// `(θ_min, θ_max)` in radians.
    pub angle_bounds: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LineSpec {
    pub id: usize,
    pub from_bus: usize,
    pub to_bus: usize,
    /// Series conductance, per-unit.
    pub conductance: f64,
    /// Series susceptance, per-unit (negative for an inductive line).
    pub susceptance: f64,
    /// Apparent power limit, per-unit.
    pub flow_limit: f64,
    pub in_service: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThermalGenerator {
    pub bus: usize,
    pub p_bounds: (f64, f64),
    pub q_bounds: (f64, f64),
    /// `(P_D, P_U)`: MW per interval, `P_D <= 0 <= P_U`.
    pub ramp: (f64, f64),
    /// `(a, b, c)` of `a·P²·Δt + b·P·Δt + c`.
    pub cost: (f64, f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenewableUnit {
    pub bus: usize,
    pub capacity: f64,
    pub curtailment_penalty: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StorageUnit {
    pub bus: usize,
    /// `(P_c,max, P_d,max)` in MW.
    pub power_bounds: (f64, f64),
    /// `(E_min, E_max)` in MWh.
    pub energy_bounds: (f64, f64),
    /// `(η_c, η_d)`.
    pub efficiencies: (f64, f64),
    pub degradation_cost: f64,
    pub initial_soc_fraction: f64,
}

impl StorageUnit {
    pub fn charge_max(&self) -> f64 {
        self.power_bounds.0
    }
    pub fn discharge_max(&self) -> f64 {
        self.power_bounds.1
    }
    pub fn e_min(&self) -> f64 {
        self.energy_bounds.0
    }
    pub fn e_max(&self) -> f64 {
        self.energy_bounds.1
    }
    pub fn eta_c(&self) -> f64 {
        self.efficiencies.0
    }
    pub fn eta_d(&self) -> f64 {
        self.efficiencies.1
    }
    pub fn initial_energy(&self) -> f64 {
        self.initial_soc_fraction * self.e_max()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridMeta {
    pub base_mva: f64,
    /// Dispatch interval Δt in hours.
    pub interval_hours: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub meta: GridMeta,
    pub buses: Vec<BusSpec>,
    pub lines: Vec<LineSpec>,
    #[serde(default)]
    pub thermal: Vec<ThermalGenerator>,
    #[serde(default)]
    pub renewable: Vec<RenewableUnit>,
    #[serde(default)]
    pub storage: Vec<StorageUnit>,
}

/// One violated invariant.
#[derive(Debug, Clone, PartialEq)]
pub struct SpecViolation {
    pub element: String,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<SpecViolation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, element: impl Into<String>, message: impl Into<String>) {
        self.violations.push(SpecViolation { element: element.into(), message: message.into() });
    }

    pub fn contains(&self, message: &str) -> bool {
        self.violations.iter().any(|v| v.message == message)
    }
}

impl GridSpec {
    pub fn from_toml_str(text: &str) -> Result<Self, GridError> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, GridError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|source| GridError::Io { path: path.display().to_string(), source })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("grid spec is always representable as TOML")
    }

    pub fn n_buses(&self) -> usize {
        self.buses.len()
    }

    pub fn dt(&self) -> f64 {
        self.meta.interval_hours
    }

    pub fn base_mva(&self) -> f64 {
        self.meta.base_mva
    }

    pub fn slack_bus(&self) -> Option<usize> {
        self.buses.iter().position(|b| b.bus_kind == BusKind::Slack)
    }

    /// Index of the thermal unit that balances the network (first unit at the slack bus).
    pub fn slack_generator(&self) -> Option<usize> {
        let slack = self.slack_bus()?;
        self.thermal.iter().position(|g| g.bus == slack)
    }

    pub fn line_index(&self, id: usize) -> Option<usize> {
        self.lines.iter().position(|l| l.id == id)
    }

    pub fn in_service_lines(&self) -> impl Iterator<Item = &LineSpec> {
        self.lines.iter().filter(|l| l.in_service)
    }

    /// In-service neighbour set Ω_i of every bus.
    pub fn neighbors(&self) -> Vec<BTreeSet<usize>> {
        let mut out = vec![BTreeSet::new(); self.n_buses()];
        for l in self.in_service_lines() {
            if l.from_bus < out.len() && l.to_bus < out.len() && l.from_bus != l.to_bus {
                out[l.from_bus].insert(l.to_bus);
                out[l.to_bus].insert(l.from_bus);
            }
        }
        out
    }

    pub fn is_connected(&self) -> bool {
        let n = self.n_buses();
        if n == 0 {
            return true;
        }
        let nb = self.neighbors();
        let mut seen = vec![false; n];
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        while let Some(i) = queue.pop_front() {
            for &j in &nb[i] {
                if !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    pub fn in_service_mask(&self) -> Vec<bool> {
        self.lines.iter().map(|l| l.in_service).collect()
    }

    /// Adjacency of the in-service topology: symmetric 0/1 with zero diagonal.
    pub fn adjacency(&self) -> Matrix {
        let n = self.n_buses();
        let mut adj = Matrix::zeros(n, n);
        for (i, nb) in self.neighbors().iter().enumerate() {
            for &j in nb {
                adj[(i, j)] = 1.0;
            }
        }
        adj
    }
}

/// Check every invariant of a grid spec and report all violations.
pub fn validate_spec(spec: &GridSpec) -> ValidationReport {
    let mut report = ValidationReport::default();
    let n = spec.n_buses();
    if n == 0 {
        report.push("grid", "no buses");
        return report;
    }
    if !(spec.meta.base_mva > 0.0) {
        report.push("meta", "base_mva must be positive");
    }
    if !(spec.meta.interval_hours > 0.0) {
        report.push("meta", "interval_hours must be positive");
    }

    for (k, b) in spec.buses.iter().enumerate() {
        let el = format!("bus {}", b.id);
        if b.id != k {
            report.push(&el, "bus ids must be 0..n in order");
        }
        if !(b.voltage_bounds.0 < b.voltage_bounds.1) {
            report.push(&el, "voltage bounds not increasing");
        }
        if !(b.angle_bounds.0 < b.angle_bounds.1) {
            report.push(&el, "angle bounds not increasing");
        }
    }
    match spec.buses.iter().filter(|b| b.bus_kind == BusKind::Slack).count() {
        0 => report.push("grid", "no slack bus"),
        1 => {}
        _ => report.push("grid", "multiple slack buses"),
    }

    let mut line_ids = BTreeSet::new();
    for l in &spec.lines {
        let el = format!("line {}", l.id);
        if !line_ids.insert(l.id) {
            report.push(&el, "duplicate line id");
        }
        if l.from_bus == l.to_bus {
            report.push(&el, "self-loop line");
        }
        if l.from_bus >= n || l.to_bus >= n {
            report.push(&el, "line references unknown bus");
        }
        if !(l.flow_limit > 0.0) {
            report.push(&el, "flow limit must be positive");
        }
    }

    for (k, g) in spec.thermal.iter().enumerate() {
        let el = format!("thermal {k}");
        if g.bus >= n {
            report.push(&el, "device references unknown bus");
        }
        if !(g.p_bounds.0 <= g.p_bounds.1) {
            report.push(&el, "active power bounds not ordered");
        }
        if !(g.q_bounds.0 <= g.q_bounds.1) {
            report.push(&el, "reactive power bounds not ordered");
        }
        if !(g.ramp.0 <= 0.0 && 0.0 <= g.ramp.1) {
            report.push(&el, "ramp must satisfy P_D <= 0 <= P_U");
        }
        if !(g.cost.0 >= 0.0) {
            report.push(&el, "quadratic cost coefficient must be nonnegative");
        }
    }
    for (k, r) in spec.renewable.iter().enumerate() {
        let el = format!("renewable {k}");
        if r.bus >= n {
            report.push(&el, "device references unknown bus");
        }
        if !(r.capacity > 0.0) {
            report.push(&el, "capacity must be positive");
        }
        if !(r.curtailment_penalty >= 0.0) {
            report.push(&el, "curtailment penalty must be nonnegative");
        }
    }
    for (k, s) in spec.storage.iter().enumerate() {
        let el = format!("storage {k}");
        if s.bus >= n {
            report.push(&el, "device references unknown bus");
        }
        if !(0.0 <= s.e_min() && s.e_min() < s.e_max()) {
            report.push(&el, "energy bounds must satisfy 0 <= E_min < E_max");
        }
        let eff_ok = |e: f64| e > 0.0 && e <= 1.0;
        if !(eff_ok(s.eta_c()) && eff_ok(s.eta_d())) {
            report.push(&el, "efficiencies must lie in (0, 1]");
        }
        if !(s.charge_max() >= 0.0 && s.discharge_max() >= 0.0) {
            report.push(&el, "power bounds must be nonnegative");
        }
        let e0 = s.initial_energy();
        if !(s.e_min() <= e0 && e0 <= s.e_max()) {
            report.push(&el, "initial energy outside bounds");
        }
    }

    let refs_ok = spec.lines.iter().all(|l| l.from_bus < n && l.to_bus < n);
    if refs_ok && !spec.is_connected() {
        report.push("grid", "in-service network is not connected");
    }
    report
}

/// Return a copy of `spec` with `line_ids` taken out of service.
pub fn apply_outage(spec: &GridSpec, line_ids: &[usize]) -> Result<GridSpec, GridError> {
    let mut out = spec.clone();
    for &id in line_ids {
        let k = spec.line_index(id).ok_or(GridError::UnknownLine(id))?;
        out.lines[k].in_service = false;
    }
    if !out.is_connected() {
        return Err(GridError::Islanding(line_ids.to_vec()));
    }
    Ok(out)
}

/// Return a copy of `spec` with `line_ids` put back in service.
pub fn restore_lines(spec: &GridSpec, line_ids: &[usize]) -> Result<GridSpec, GridError> {
    let mut out = spec.clone();
    for &id in line_ids {
        let k = spec.line_index(id).ok_or(GridError::UnknownLine(id))?;
        out.lines[k].in_service = true;
    }
    Ok(out)
}

/// Graph snapshot `G(Adj, Eig)` consumed by every network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridGraph {
    pub adj: Matrix,
    pub eig: Matrix,
}

impl GridGraph {
    pub fn n_nodes(&self) -> usize {
        self.adj.rows()
    }

    pub fn n_features(&self) -> usize {
        self.eig.cols()
    }

    pub fn degree(&self, i: usize) -> usize {
        self.adj.row(i).iter().filter(|&&a| a != 0.0).count()
    }
}

/// Build the graph snapshot from the in-service topology at call time.
pub fn build_graph(spec: &GridSpec, node_features: &Matrix) -> Result<GridGraph, GridError> {
    if node_features.rows() != spec.n_buses() {
        return Err(GridError::ShapeMismatch { expected: spec.n_buses(), got: node_features.rows() });
    }
    Ok(GridGraph { adj: spec.adjacency(), eig: node_features.clone() })
}

/// Three-bus ring used by the examples and tests: a cheap slack thermal unit,
/// a renewable unit at bus 1 and a storage unit at bus 2. The coefficients are
/// illustrative defaults.
pub fn three_bus_ring() -> GridSpec {
    GridSpec::from_toml_str(include_str!("../data/three_bus.toml")).expect("bundled three-bus spec parses")
}
