//! Reverse-mode gradients through a two-layer graph convolution, checked by finite differences.

use metagrl::matrix::Matrix;
use metagrl::nn::{grad_check, gcn_forward, Activation, ParamSet, Tape};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::rc::Rc;

fn main() {
    // path graph 0 - 1 - 2
    let adj = Matrix::from_rows(&[vec![0.0, 1.0, 0.0], vec![1.0, 0.0, 1.0], vec![0.0, 1.0, 0.0]]);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Matrix::from_rows(&[vec![1.0, 0.2], vec![-0.5, 0.9], vec![0.3, -0.4]]);

    let mut params = ParamSet::new();
    let t1 = params.push_glorot("theta1", 2, 4, &mut rng);
    let t2 = params.push_glorot("theta2", 4, 1, &mut rng);
    let h = gcn_forward(&x, &adj, params.get(t1), Activation::Relu, None);
    println!("first-layer embeddings:\n{h:?}");

    let graphs = Rc::new(metagrl::nn::GraphBatch::new(3, vec![metagrl::nn::normalized_adjacency(&adj, None)]));
    let loss = |tape: &mut Tape, b: &metagrl::nn::Bound| {
        let xv = tape.constant(x.clone());
        let a = tape.matmul(xv, b.var(t1));
        let a = tape.graph_aggregate(a, &graphs);
        let a = tape.tanh(a);
        let o = tape.matmul(a, b.var(t2));
        let o = tape.graph_aggregate(o, &graphs);
        let o = tape.square(o);
        tape.mean(o)
    };
    let err = grad_check(&params, loss, 1e-6);
    println!("max relative gradient error {err:.2e}");
}
