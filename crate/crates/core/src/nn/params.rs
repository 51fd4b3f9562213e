//! Named parameter tensors, Adam, and versioned checkpoints.

use super::tape::{Gradients, Tape, Var};
use super::NnError;
use crate::matrix::Matrix;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamId(usize);

impl ParamId {
    /// Ids are handed out in insertion order starting at 0.
    pub fn from_index(k: usize) -> Self {
        Self(k)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Matrix>,
}

/// Tape handles for every tensor of a [`ParamSet`].
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// One gradient per parameter; zeros for parameters the loss did not touch.
    pub fn grads(&self, g: &Gradients, params: &ParamSet) -> Vec<Matrix> {
        self.vars.iter().zip(&params.values).map(|(&v, p)| g.get_or_zeros(v, p)).collect()
    }
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    /// Glorot-uniform initialized `rows × cols` tensor.
    pub fn push_glorot(&mut self, name: impl Into<String>, rows: usize, cols: usize, rng: &mut impl Rng) -> ParamId {
        let a = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.gen_range(-a..a)).collect();
        self.push(name, Matrix::from_vec(rows, cols, data))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Matrix] {
        &self.values
    }

    pub fn n_scalars(&self) -> usize {
        self.values.iter().map(Matrix::len).sum()
    }

    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound { vars: self.values.iter().map(|v| tape.leaf(v.clone())).collect() }
    }

    /// Binds the tensors as constants so no gradient reaches them.
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        Bound { vars: self.values.iter().map(|v| tape.constant(v.clone())).collect() }
    }

    /// `self ← λ·online + (1−λ)·self`.
    pub fn soft_update_from(&mut self, online: &ParamSet, lambda: f64) -> Result<(), NnError> {
        self.check_layout(online)?;
        for (t, o) in self.values.iter_mut().zip(&online.values) {
            *t = t.zip_map(o, |a, b| lambda * b + (1.0 - lambda) * a);
        }
        Ok(())
    }

    fn check_layout(&self, other: &ParamSet) -> Result<(), NnError> {
        if self.names.len() != other.names.len() {
            return Err(NnError::Layout(format!("{} tensors vs {}", self.names.len(), other.names.len())));
        }
        for ((n, a), (m, b)) in self.names.iter().zip(&self.values).zip(other.names.iter().zip(&other.values)) {
            if n != m {
                return Err(NnError::MissingParam(n.clone()));
            }
            if a.shape() != b.shape() {
                return Err(NnError::ShapeMismatch { param: n.clone(), expected: a.shape(), got: b.shape() });
            }
        }
        Ok(())
    }

    /// Replace all values with those of `other`, which must have the same layout.
    pub fn assign(&mut self, other: &ParamSet) -> Result<(), NnError> {
        self.check_layout(other)?;
        self.values.clone_from(&other.values);
        Ok(())
    }

    /// SHA-256 over names, shapes and the exact bit patterns of every value.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (n, v) in self.names.iter().zip(&self.values) {
            h.update(n.as_bytes());
            h.update((v.rows() as u64).to_le_bytes());
            h.update((v.cols() as u64).to_le_bytes());
            for x in v.as_slice() {
                h.update(x.to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(Matrix::is_finite)
    }
}

pub fn global_norm(grads: &[Matrix]) -> f64 {
    grads.iter().map(|g| g.as_slice().iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt()
}

/// Rescales `grads` in place so their global norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Matrix], max_norm: f64) -> f64 {
    let n = global_norm(grads);
    if n > max_norm && n.is_finite() {
        let s = max_norm / n;
        for g in grads.iter_mut() {
            g.as_mut_slice().iter_mut().for_each(|x| *x *= s);
        }
    }
    n
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 3e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    t: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamSet) -> Self {
        let zeros: Vec<Matrix> = params.values.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
        Self { config, m: zeros.clone(), v: zeros, t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &[Matrix]) -> Result<(), NnError> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(NnError::Layout(format!("{} gradients for {} parameters", grads.len(), params.len())));
        }
        for ((name, p), g) in params.names.iter().zip(&params.values).zip(grads) {
            if g.shape() != p.shape() {
                return Err(NnError::ShapeMismatch { param: name.clone(), expected: p.shape(), got: g.shape() });
            }
            if !g.is_finite() {
                return Err(NnError::NonFiniteGradient(name.clone()));
            }
        }
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for (((p, g), m), v) in params.values.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let (ps, gs, ms, vs) = (p.as_mut_slice(), g.as_slice(), m.as_mut_slice(), v.as_mut_slice());
            for k in 0..ps.len() {
                ms[k] = beta1 * ms[k] + (1.0 - beta1) * gs[k];
                vs[k] = beta2 * vs[k] + (1.0 - beta2) * gs[k] * gs[k];
                let mh = ms[k] / c1;
                let vh = vs[k] / c2;
                ps[k] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// Named parameter groups plus free-form metadata, stored as JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub meta: BTreeMap<String, String>,
    pub groups: BTreeMap<String, ParamSet>,
}

impl Default for Checkpoint {
    fn default() -> Self {
        Self { version: CHECKPOINT_VERSION, meta: BTreeMap::new(), groups: BTreeMap::new() }
    }
}

impl Checkpoint {
    pub fn insert(&mut self, group: &str, params: &ParamSet) {
        self.groups.insert(group.to_string(), params.clone());
    }

    /// Copies a stored group into `into`, rejecting any name or shape difference.
    pub fn restore(&self, group: &str, into: &mut ParamSet) -> Result<(), NnError> {
        let stored = self.groups.get(group).ok_or_else(|| NnError::MissingParam(group.to_string()))?;
        into.assign(stored)
    }

    pub fn save(&self, path: &Path) -> Result<(), NnError> {
        let text = serde_json::to_string(self).map_err(|e| NnError::Format(e.to_string()))?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, text).map_err(|e| NnError::Io(format!("{}: {e}", tmp.display())))?;
        std::fs::rename(&tmp, path).map_err(|e| NnError::Io(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, NnError> {
        let text = std::fs::read_to_string(path).map_err(|e| NnError::Io(format!("{}: {e}", path.display())))?;
        let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| NnError::Format(e.to_string()))?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(NnError::Version { found: ck.version, expected: CHECKPOINT_VERSION });
        }
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(v: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.push("w", Matrix::filled(1, 1, v));
        p
    }

    #[test]
    fn soft_update_endpoints() {
        let online = one(2.0);
        let mut t = one(0.0);
        t.soft_update_from(&online, 0.0).unwrap();
        assert_eq!(t.values()[0].as_slice(), &[0.0]);
        t.soft_update_from(&online, 0.5).unwrap();
        assert_eq!(t.values()[0].as_slice(), &[1.0]);
        t.soft_update_from(&online, 1.0).unwrap();
        assert_eq!(t, online);
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut p = one(1.5);
        let mut opt = Adam::new(AdamConfig::with_lr(0.1), &p);
        for _ in 0..5 {
            opt.step(&mut p, &[Matrix::zeros(1, 1)]).unwrap();
        }
        assert_eq!(p.values()[0].as_slice(), &[1.5]);
    }

    #[test]
    fn adam_constant_gradient_step_tends_to_lr() {
        let mut p = one(0.0);
        let lr = 0.01;
        let mut opt = Adam::new(AdamConfig::with_lr(lr), &p);
        let mut last = 0.0;
        for _ in 0..2000 {
            let before = p.values()[0].as_slice()[0];
            opt.step(&mut p, &[Matrix::filled(1, 1, 3.0)]).unwrap();
            last = before - p.values()[0].as_slice()[0];
        }
        assert!((last - lr).abs() < 1e-6 * lr + 1e-9, "step {last}");
    }

    #[test]
    fn adam_nan_names_parameter() {
        let mut p = one(0.0);
        let mut opt = Adam::new(AdamConfig::default(), &p);
        let err = opt.step(&mut p, &[Matrix::filled(1, 1, f64::NAN)]).unwrap_err();
        assert!(err.to_string().contains('w'));
    }

    #[test]
    fn checkpoint_round_trip_and_shape_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        let mut ck = Checkpoint::default();
        ck.insert("actor", &one(4.0));
        ck.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        let mut p = one(0.0);
        loaded.restore("actor", &mut p).unwrap();
        assert_eq!(p.values()[0].as_slice(), &[4.0]);

        let mut wrong = ParamSet::new();
        wrong.push("w", Matrix::zeros(2, 1));
        assert!(matches!(loaded.restore("actor", &mut wrong), Err(NnError::ShapeMismatch { .. })));
        assert!(loaded.restore("critic", &mut p).is_err());
    }

    #[test]
    fn checksum_tracks_bits() {
        let a = one(1.0);
        let b = one(1.0 + f64::EPSILON);
        assert_eq!(a.checksum(), one(1.0).checksum());
        assert_ne!(a.checksum(), b.checksum());
    }
}
