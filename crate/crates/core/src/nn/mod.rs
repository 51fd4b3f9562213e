//! Reverse-mode autodiff and the network pieces shared by every learner.

pub mod layers;
pub mod params;
pub mod tape;

pub use layers::{
    gcn_forward, kl_gaussian, kl_to_standard, normalized_adjacency, reparam_sample, Activation, Dense, GaussianHead,
    GcnLayer, GraphEncoder, Mlp,
};
pub use params::{clip_global_norm, global_norm, Adam, AdamConfig, Bound, Checkpoint, ParamId, ParamSet};
pub use tape::{GraphBatch, Gradients, Tape, Var};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("standard deviation must be positive")]
    NonPositiveSigma,
    #[error("parameter `{param}` has shape {got:?}, expected {expected:?}")]
    ShapeMismatch { param: String, expected: (usize, usize), got: (usize, usize) },
    #[error("missing parameter or group `{0}`")]
    MissingParam(String),
    #[error("parameter layout mismatch: {0}")]
    Layout(String),
    #[error("checkpoint version {found}, expected {expected}")]
    Version { found: u32, expected: u32 },
    #[error("io: {0}")]
    Io(String),
    #[error("checkpoint format: {0}")]
    Format(String),
}

/// Largest relative difference between the reverse-mode gradient of `loss` and central
/// differences with step `delta`, over every scalar of `params`.
///
/// Relative error is `|a − n| / max(|a|, |n|, 1e-6)`.
pub fn grad_check(params: &ParamSet, loss: impl Fn(&mut Tape, &Bound) -> Var, delta: f64) -> f64 {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let l = loss(&mut tape, &bound);
    let analytic = bound.grads(&tape.backward(l), params);

    let eval = |p: &ParamSet| {
        let mut t = Tape::new();
        let b = p.bind(&mut t);
        let l = loss(&mut t, &b);
        t.scalar(l)
    };

    let mut work = params.clone();
    let mut worst = 0.0_f64;
    for (k, a) in analytic.iter().enumerate() {
        for i in 0..a.len() {
            let id = ParamId::from_index(k);
            let x0 = work.get(id).as_slice()[i];
            work.get_mut(id).as_mut_slice()[i] = x0 + delta;
            let fp = eval(&work);
            work.get_mut(id).as_mut_slice()[i] = x0 - delta;
            let fm = eval(&work);
            work.get_mut(id).as_mut_slice()[i] = x0;
            let num = (fp - fm) / (2.0 * delta);
            let an = a.as_slice()[i];
            let rel = (an - num).abs() / an.abs().max(num.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::Matrix;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::rc::Rc;

    fn rand_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize, lo: f64, hi: f64) -> Matrix {
        Matrix::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(lo..hi)).collect())
    }

    fn random_graph(rng: &mut ChaCha8Rng, n: usize, p: f64) -> Matrix {
        let mut a = Matrix::zeros(n, n);
        for i in 0..n {
            for j in i + 1..n {
                if rng.gen_bool(p) {
                    a[(i, j)] = 1.0;
                    a[(j, i)] = 1.0;
                }
            }
        }
        a
    }

    #[test]
    fn quadratic_norm_exact() {
        let mut p = ParamSet::new();
        p.push("x", Matrix::row_vector(&[0.5, -1.5, 2.0]));
        let err = grad_check(&p, |t, b| {
            let sq = t.square(b.var(ParamId::from_index(0)));
            t.sum(sq)
        }, 1e-5);
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn every_op_passes_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for trial in 0..5 {
            let (r, c) = (rng.gen_range(1..4), rng.gen_range(1..4));
            let mut p = ParamSet::new();
            let a = p.push("a", rand_matrix(&mut rng, r, c, -1.0, 1.0));
            let b = p.push("b", rand_matrix(&mut rng, r, c, 0.5, 1.5));
            let row = p.push("row", rand_matrix(&mut rng, 1, c, -1.0, 1.0));
            let col = p.push("col", rand_matrix(&mut rng, r, 1, -1.0, 1.0));
            let w = p.push("w", rand_matrix(&mut rng, c, 2, -1.0, 1.0));
            let idx: Vec<usize> = (0..r + 1).map(|_| rng.gen_range(0..r)).collect();
            let seg: Vec<usize> = (0..r).map(|_| rng.gen_range(0..2)).collect();

            type Case = Box<dyn Fn(&mut Tape, &Bound) -> Var>;
            let cases: Vec<(&str, Case)> = vec![
                ("add", Box::new(move |t, bd| t.add(bd.var(a), bd.var(b)))),
                ("sub", Box::new(move |t, bd| t.sub(bd.var(a), bd.var(b)))),
                ("mul", Box::new(move |t, bd| t.mul(bd.var(a), bd.var(b)))),
                ("div", Box::new(move |t, bd| t.div(bd.var(a), bd.var(b)))),
                ("min", Box::new(move |t, bd| t.min(bd.var(a), bd.var(b)))),
                ("add_row", Box::new(move |t, bd| t.add_row(bd.var(a), bd.var(row)))),
                ("mul_col", Box::new(move |t, bd| t.mul_col(bd.var(a), bd.var(col)))),
                ("matmul", Box::new(move |t, bd| t.matmul(bd.var(a), bd.var(w)))),
                ("scale", Box::new(move |t, bd| t.scale(bd.var(a), -2.5))),
                ("add_scalar", Box::new(move |t, bd| t.add_scalar(bd.var(a), 0.3))),
                ("tanh", Box::new(move |t, bd| t.tanh(bd.var(a)))),
                ("relu", Box::new(move |t, bd| t.relu(bd.var(a)))),
                ("exp", Box::new(move |t, bd| t.exp(bd.var(a)))),
                ("ln", Box::new(move |t, bd| t.ln(bd.var(b)))),
                ("softplus", Box::new(move |t, bd| t.softplus(bd.var(a)))),
                ("square", Box::new(move |t, bd| t.square(bd.var(a)))),
                ("sqrt", Box::new(move |t, bd| t.sqrt(bd.var(b)))),
                ("clamp", Box::new(move |t, bd| t.clamp(bd.var(a), -0.5, 0.5))),
                ("mean", Box::new(move |t, bd| t.mean(bd.var(a)))),
                ("sum_cols", Box::new(move |t, bd| t.sum_cols(bd.var(a)))),
                ("concat", Box::new(move |t, bd| t.concat_cols(&[bd.var(a), bd.var(col), bd.var(b)]))),
                ("slice", Box::new(move |t, bd| t.slice_cols(bd.var(a), 0, c.min(2)))),
                ("gather", {
                    let idx = idx.clone();
                    Box::new(move |t, bd| t.gather_rows(bd.var(a), &idx))
                }),
                ("scatter", {
                    let seg = seg.clone();
                    Box::new(move |t, bd| t.scatter_sum_rows(bd.var(a), &seg, 2))
                }),
            ];
            for (name, f) in cases {
                // random output weights turn any output into a scalar with a generic gradient
                let probe_seed = trial * 100 + name.len() as u64;
                let err = grad_check(&p, |t, bd| {
                    let y = f(t, bd);
                    let (yr, yc) = t.value(y).shape();
                    let mut prng = ChaCha8Rng::seed_from_u64(probe_seed);
                    let probe = t.constant(rand_matrix(&mut prng, yr, yc, -1.0, 1.0));
                    let z = t.mul(y, probe);
                    t.sum(z)
                }, 1e-6);
                assert!(err < 1e-4, "op {name} trial {trial}: rel err {err}");
            }
        }
    }

    #[test]
    fn graph_ops_pass_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 4;
        let blocks = (0..3).map(|_| normalized_adjacency(&random_graph(&mut rng, n, 0.5), None)).collect();
        let graphs = Rc::new(GraphBatch::new(n, blocks));
        let mut p = ParamSet::new();
        let x = p.push("x", rand_matrix(&mut rng, 3 * n, 3, -1.0, 1.0));
        let probe = rand_matrix(&mut rng, 3, 3, -1.0, 1.0);
        let err = grad_check(&p, |t, bd| {
            let h = t.graph_aggregate(bd.var(x), &graphs);
            let m = t.block_mean_rows(h, n);
            let pr = t.constant(probe.clone());
            let z = t.mul(m, pr);
            t.sum(z)
        }, 1e-6);
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn dense_tanh_network_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut p = ParamSet::new();
        let mlp = Mlp::new(&mut p, "mlp", &[3, 5, 2], Activation::Tanh, Activation::Tanh, &mut rng);
        let x = rand_matrix(&mut rng, 4, 3, -1.0, 1.0);
        let err = grad_check(&p, |t, bd| {
            let xi = t.constant(x.clone());
            let y = mlp.forward(t, bd, xi);
            let y2 = t.square(y);
            t.mean(y2)
        }, 1e-5);
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn gcn_gaussian_kl_composite_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 3;
        let adj = random_graph(&mut rng, n, 0.7);
        let graphs = Rc::new(GraphBatch::new(n, vec![normalized_adjacency(&adj, None); 2]));
        let mut p = ParamSet::new();
        let enc = GraphEncoder::new(&mut p, "enc", 4, 6, &mut rng);
        let head = GaussianHead::new(&mut p, "head", 6, 2, &mut rng);
        let x = rand_matrix(&mut rng, 2 * n, 4, -1.0, 1.0);
        let eps = rand_matrix(&mut rng, 2, 2, -1.0, 1.0);
        let err = grad_check(&p, |t, bd| {
            let xi = t.constant(x.clone());
            let g = enc.forward(t, bd, xi, &graphs);
            let (mu, ls) = head.forward(t, bd, g);
            let s = t.exp(ls);
            let z = reparam_sample(t, mu, s, eps.clone());
            let var = t.square(s);
            let kl = kl_to_standard(t, mu, var);
            let z2 = t.square(z);
            let zl = t.sum(z2);
            t.add(kl, zl)
        }, 1e-6);
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn gcn_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..100 {
            let n = rng.gen_range(2..8);
            let adj = random_graph(&mut rng, n, 0.4);
            let eig = rand_matrix(&mut rng, n, 3, -1.0, 1.0);
            let theta = rand_matrix(&mut rng, 3, 2, -1.0, 1.0);
            let mut perm: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                perm.swap(i, rng.gen_range(0..=i));
            }
            let mut padj = Matrix::zeros(n, n);
            for i in 0..n {
                for j in 0..n {
                    padj[(i, j)] = adj[(perm[i], perm[j])];
                }
            }
            let out = gcn_forward(&eig, &adj, &theta, Activation::Tanh, None);
            let pout = gcn_forward(&eig.permute_rows(&perm), &padj, &theta, Activation::Tanh, None);
            assert_eq!(pout, out.permute_rows(&perm));
        }
    }

    proptest! {
        #[test]
        fn kl_nonnegative(
            mq in proptest::collection::vec(-5.0f64..5.0, 3),
            sq in proptest::collection::vec(0.01f64..5.0, 3),
            mp in proptest::collection::vec(-5.0f64..5.0, 3),
            sp in proptest::collection::vec(0.01f64..5.0, 3),
        ) {
            prop_assert!(kl_gaussian(&mq, &sq, &mp, &sp).unwrap() >= -1e-12);
        }
    }
}
