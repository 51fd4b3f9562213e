//! Dense, graph-convolution and Gaussian building blocks.

use super::params::{Bound, ParamId, ParamSet};
use super::tape::{GraphBatch, Tape, Var};
use super::NnError;
use crate::matrix::Matrix;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::rc::Rc;

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::Tanh => tape.tanh(x),
            Activation::Identity => x,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
    pub act: Activation,
}

impl Dense {
    pub fn new(params: &mut ParamSet, name: &str, fan_in: usize, fan_out: usize, act: Activation, rng: &mut impl Rng) -> Self {
        let w = params.push_glorot(format!("{name}.w"), fan_in, fan_out, rng);
        let b = params.push(format!("{name}.b"), Matrix::zeros(1, fan_out));
        Self { w, b, act }
    }

    /// Weights and bias scaled by `s`; used to start output layers near zero.
    pub fn shrink(&self, params: &mut ParamSet, s: f64) {
        for id in [self.w, self.b] {
            let m = params.get_mut(id);
            m.as_mut_slice().iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Var {
        let h = tape.matmul(x, bound.var(self.w));
        let h = tape.add_row(h, bound.var(self.b));
        self.act.apply(tape, h)
    }
}

/// Stack of dense layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

impl Mlp {
    /// `sizes = [in, hidden.., out]`; hidden layers use `hidden_act`, the last `out_act`.
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        sizes: &[usize],
        hidden_act: Activation,
        out_act: Activation,
        rng: &mut impl Rng,
    ) -> Self {
        let n = sizes.len() - 1;
        let layers = (0..n)
            .map(|k| {
                let act = if k + 1 == n { out_act } else { hidden_act };
                Dense::new(params, &format!("{name}.{k}"), sizes[k], sizes[k + 1], act, rng)
            })
            .collect();
        Self { layers }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, mut x: Var) -> Var {
        for l in &self.layers {
            x = l.forward(tape, bound, x);
        }
        x
    }

    pub fn last(&self) -> &Dense {
        self.layers.last().expect("empty mlp")
    }
}

/// `Â = D^{-1/2} (A_e + I) D^{-1/2}` with `A_e` the adjacency weighted by `edge_weights` (default 1).
pub fn normalized_adjacency(adj: &Matrix, edge_weights: Option<&Matrix>) -> Matrix {
    let n = adj.rows();
    let mut a = match edge_weights {
        Some(e) => adj.zip_map(e, |x, w| x * w),
        None => adj.clone(),
    };
    for i in 0..n {
        a[(i, i)] = 1.0;
    }
    let d: Vec<f64> = (0..n).map(|i| a.row(i).iter().sum::<f64>().sqrt().recip()).collect();
    for i in 0..n {
        for j in 0..n {
            a[(i, j)] *= d[i] * d[j];
        }
    }
    a
}

/// One graph convolution: `σ(Â · X · Θ)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GcnLayer {
    pub theta: ParamId,
    pub act: Activation,
}

impl GcnLayer {
    pub fn new(params: &mut ParamSet, name: &str, fan_in: usize, fan_out: usize, act: Activation, rng: &mut impl Rng) -> Self {
        let theta = params.push_glorot(format!("{name}.theta"), fan_in, fan_out, rng);
        Self { theta, act }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var, graphs: &Rc<GraphBatch>) -> Var {
        let h = tape.matmul(x, bound.var(self.theta));
        let h = tape.graph_aggregate(h, graphs);
        self.act.apply(tape, h)
    }
}

/// Untaped single-graph convolution, for inspection and tests.
pub fn gcn_forward(eig: &Matrix, adj: &Matrix, theta: &Matrix, act: Activation, edge_weights: Option<&Matrix>) -> Matrix {
    let graphs = Rc::new(GraphBatch::new(adj.rows(), vec![normalized_adjacency(adj, edge_weights)]));
    let mut tape = Tape::new();
    let x = tape.constant(eig.clone());
    let t = tape.constant(theta.clone());
    let h = tape.matmul(x, t);
    let h = tape.graph_aggregate(h, &graphs);
    let y = act.apply(&mut tape, h);
    tape.value(y).clone()
}

/// Two GCN layers followed by mean pooling over each graph's nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphEncoder {
    pub layers: Vec<GcnLayer>,
    pub out_dim: usize,
}

impl GraphEncoder {
    pub fn new(params: &mut ParamSet, name: &str, in_dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let layers = vec![
            GcnLayer::new(params, &format!("{name}.gcn0"), in_dim, hidden, Activation::Relu, rng),
            GcnLayer::new(params, &format!("{name}.gcn1"), hidden, hidden, Activation::Relu, rng),
        ];
        Self { layers, out_dim: hidden }
    }

    /// `x` stacks the node features of all graphs in `graphs`; returns one pooled row per graph.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var, graphs: &Rc<GraphBatch>) -> Var {
        let mut h = x;
        for l in &self.layers {
            h = l.forward(tape, bound, h, graphs);
        }
        tape.block_mean_rows(h, graphs.n_nodes())
    }
}

/// Mean and clamped log-standard-deviation heads sharing one input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianHead {
    pub mean: Dense,
    pub log_std: Dense,
    pub clamp: (f64, f64),
}

impl GaussianHead {
    pub fn new(params: &mut ParamSet, name: &str, fan_in: usize, dim: usize, rng: &mut impl Rng) -> Self {
        let mean = Dense::new(params, &format!("{name}.mu"), fan_in, dim, Activation::Identity, rng);
        let log_std = Dense::new(params, &format!("{name}.log_std"), fan_in, dim, Activation::Identity, rng);
        Self { mean, log_std, clamp: (LOG_STD_MIN, LOG_STD_MAX) }
    }

    /// Returns `(μ, log σ)`.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> (Var, Var) {
        let mu = self.mean.forward(tape, bound, x);
        let ls = self.log_std.forward(tape, bound, x);
        let ls = tape.clamp(ls, self.clamp.0, self.clamp.1);
        (mu, ls)
    }
}

/// `z = μ + σ ⊙ ε` with `ε` a constant.
pub fn reparam_sample(tape: &mut Tape, mu: Var, sigma: Var, eps: Matrix) -> Var {
    let e = tape.constant(eps);
    let s = tape.mul(sigma, e);
    tape.add(mu, s)
}

/// Closed-form `KL(N(μ_q, σ_q²) ‖ N(μ_p, σ_p²))` summed over dimensions.
pub fn kl_gaussian(mu_q: &[f64], sigma_q: &[f64], mu_p: &[f64], sigma_p: &[f64]) -> Result<f64, NnError> {
    if sigma_q.iter().chain(sigma_p).any(|s| !(*s > 0.0)) {
        return Err(NnError::NonPositiveSigma);
    }
    Ok(mu_q
        .iter()
        .zip(sigma_q)
        .zip(mu_p.iter().zip(sigma_p))
        .map(|((mq, sq), (mp, sp))| (sp / sq).ln() + (sq * sq + (mq - mp).powi(2)) / (2.0 * sp * sp) - 0.5)
        .sum())
}

/// Taped `KL(N(μ, v) ‖ N(0, I))` summed over all entries, with `v` the variance.
pub fn kl_to_standard(tape: &mut Tape, mu: Var, var: Var) -> Var {
    // ½ Σ (v + μ² − 1 − ln v)
    let m2 = tape.square(mu);
    let lv = tape.ln(var);
    let a = tape.add(var, m2);
    let b = tape.sub(a, lv);
    let b = tape.add_scalar(b, -1.0);
    let s = tape.sum(b);
    tape.scale(s, 0.5)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gcn_single_node_identity() {
        let eig = Matrix::from_rows(&[vec![0.3, -2.0]]);
        let out = gcn_forward(&eig, &Matrix::zeros(1, 1), &Matrix::identity(2), Activation::Identity, None);
        assert_eq!(out, eig);
    }

    #[test]
    fn gcn_two_nodes_average() {
        let (a, b) = (1.7, -0.4);
        let eig = Matrix::from_rows(&[vec![a], vec![b]]);
        let adj = Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]);
        let out = gcn_forward(&eig, &adj, &Matrix::identity(1), Activation::Identity, None);
        assert!((out[(0, 0)] - (a / 2.0 + b / 2.0)).abs() < 1e-12);
        assert!((out[(1, 0)] - (a / 2.0 + b / 2.0)).abs() < 1e-12);
    }

    #[test]
    fn edge_weights_change_mixing() {
        let adj = Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]);
        let w = Matrix::from_rows(&[vec![0.0, 3.0], vec![3.0, 0.0]]);
        let a = normalized_adjacency(&adj, Some(&w));
        assert!((a[(0, 1)] - 0.75).abs() < 1e-12);
        assert!((a[(0, 0)] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn kl_closed_forms() {
        assert_eq!(kl_gaussian(&[0.0], &[1.0], &[0.0], &[1.0]).unwrap(), 0.0);
        assert!((kl_gaussian(&[1.0], &[1.0], &[0.0], &[1.0]).unwrap() - 0.5).abs() < 1e-15);
        let v = kl_gaussian(&[0.0], &[2.0], &[0.0], &[1.0]).unwrap();
        assert!((v - (4.0 - 1.0 - 4f64.ln()) / 2.0).abs() < 1e-12);
        assert!((v - 0.8069).abs() < 1e-4);
        assert!(kl_gaussian(&[0.0], &[0.0], &[0.0], &[1.0]).is_err());
    }

    #[test]
    fn taped_kl_matches_closed_form() {
        let mut t = Tape::new();
        let mu = t.leaf(Matrix::row_vector(&[0.3, -1.0]));
        let var = t.leaf(Matrix::row_vector(&[0.5, 2.0]));
        let k = kl_to_standard(&mut t, mu, var);
        let expect = kl_gaussian(&[0.3, -1.0], &[0.5f64.sqrt(), 2f64.sqrt()], &[0.0; 2], &[1.0; 2]).unwrap();
        assert!((t.scalar(k) - expect).abs() < 1e-12);
    }

    #[test]
    fn reparam_zero_noise_and_clamped_sigma() {
        let mut t = Tape::new();
        let mu = t.leaf(Matrix::row_vector(&[1.0, 2.0]));
        let sig = t.leaf(Matrix::row_vector(&[0.7, 0.7]));
        let z = reparam_sample(&mut t, mu, sig, Matrix::zeros(1, 2));
        assert_eq!(t.value(z).as_slice(), &[1.0, 2.0]);

        let ls = t.constant(Matrix::row_vector(&[-50.0]));
        let ls = t.clamp(ls, LOG_STD_MIN, LOG_STD_MAX);
        let s = t.exp(ls);
        let m = t.constant(Matrix::row_vector(&[0.5]));
        let z = reparam_sample(&mut t, m, s, Matrix::row_vector(&[3.0]));
        assert!((t.scalar(z) - 0.5).abs() < 3.0 * LOG_STD_MIN.exp() + 1e-15);
    }

    #[test]
    fn reparam_gradient_skips_noise() {
        let mut t = Tape::new();
        let mu = t.leaf(Matrix::row_vector(&[0.0]));
        let sig = t.leaf(Matrix::row_vector(&[2.0]));
        let z = reparam_sample(&mut t, mu, sig, Matrix::row_vector(&[0.25]));
        let g = t.backward(z);
        assert_eq!(g.get(mu).unwrap().as_slice(), &[1.0]);
        assert_eq!(g.get(sig).unwrap().as_slice(), &[0.25]);
    }

    #[test]
    fn reparam_monte_carlo_mean() {
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (mu, sigma, n) = (0.8, 1.3, 100_000);
        let mut sum = 0.0;
        for _ in 0..n {
            let e: f64 = StandardNormal.sample(&mut rng);
            let mut t = Tape::new();
            let m = t.constant(Matrix::row_vector(&[mu]));
            let s = t.constant(Matrix::row_vector(&[sigma]));
            let z = reparam_sample(&mut t, m, s, Matrix::row_vector(&[e]));
            sum += t.scalar(z);
        }
        let mean = sum / n as f64;
        assert!((mean - mu).abs() < 3.0 * sigma / (n as f64).sqrt());
    }
}
