//! Randomly drawn computation graphs and a central-difference gradient check.
#![allow(dead_code)]

use crl_autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::new(shape, data).unwrap()
}

/// One layer of a randomly drawn computation graph.
#[derive(Debug, Clone, Copy)]
enum Layer {
    Tanh,
    LeakyRelu,
    Softplus,
    Sigmoid,
    SquareScaled,
    SelfProduct,
    ExpTanh,
    Abs,
}

const LAYERS: [Layer; 8] = [
    Layer::Tanh,
    Layer::LeakyRelu,
    Layer::Softplus,
    Layer::Sigmoid,
    Layer::SquareScaled,
    Layer::SelfProduct,
    Layer::ExpTanh,
    Layer::Abs,
];

pub struct Program {
    x: Tensor,
    target: Tensor,
    layers: Vec<(ParamId, ParamId, Layer)>,
    head: (ParamId, ParamId),
    log_var: ParamId,
    width: usize,
}

pub fn build_program(seed: u64) -> (ParamStore, Program) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let depth = rng.random_range(1..=4);
    let width = rng.random_range(2..=5);
    let batch = rng.random_range(2..=6);
    let mut store = ParamStore::new();
    let mut layers = Vec::new();
    let mut fan_in = 3;
    for d in 0..depth {
        let w = store.insert(format!("w{d}"), random_tensor(&mut rng, &[fan_in, width], 0.8));
        let b = store.insert(format!("b{d}"), random_tensor(&mut rng, &[1, width], 0.5));
        let layer = LAYERS[rng.random_range(0..LAYERS.len())];
        layers.push((w, b, layer));
        fan_in = width;
    }
    let hw = store.insert("head_w", random_tensor(&mut rng, &[width, 2], 0.8));
    let hb = store.insert("head_b", random_tensor(&mut rng, &[1, 2], 0.5));
    let log_var = store.insert("log_var", random_tensor(&mut rng, &[1, 2], 0.5));
    let program = Program {
        x: random_tensor(&mut rng, &[batch, 3], 1.5),
        target: random_tensor(&mut rng, &[batch, 2], 1.5),
        layers,
        head: (hw, hb),
        log_var,
        width,
    };
    (store, program)
}

pub fn forward(store: &ParamStore, p: &Program) -> (Tape, Var) {
    let mut t = Tape::new();
    let mut h = t.leaf(p.x.clone());
    for &(w, b, layer) in &p.layers {
        let wv = t.param(store, w);
        let bv = t.param(store, b);
        let z = t.affine(h, wv, bv).unwrap();
        h = match layer {
            Layer::Tanh => t.tanh(z),
            Layer::LeakyRelu => t.leaky_relu(z, 0.2),
            Layer::Softplus => t.softplus(z),
            Layer::Sigmoid => t.sigmoid(z),
            Layer::SquareScaled => {
                let s = t.square(z);
                t.scale(s, 0.3)
            }
            Layer::SelfProduct => {
                let a = t.tanh(z);
                t.mul(a, z).unwrap()
            }
            Layer::ExpTanh => {
                let a = t.tanh(z);
                t.exp(a)
            }
            Layer::Abs => {
                let a = t.abs(z);
                t.add_const(a, 0.1)
            }
        };
    }
    assert_eq!(t.value(h).shape()[1], p.width);
    let hw = t.param(store, p.head.0);
    let hb = t.param(store, p.head.1);
    let out = t.affine(h, hw, hb).unwrap();
    let target = t.leaf(p.target.clone());
    let lv = t.param(store, p.log_var);
    let nll = t.gaussian_nll(target, out, lv).unwrap();
    let loss = t.mean(nll);
    (t, loss)
}

pub fn loss_value(store: &ParamStore, p: &Program) -> f64 {
    let (t, l) = forward(store, p);
    t.value(l).item()
}

pub fn max_rel_err(store: &ParamStore, p: &Program, h: f64) -> f64 {
    let (t, l) = forward(store, p);
    let grads = t.backward(l).unwrap().param_grads(&t, store);
    let mut worst: f64 = 0.0;
    for id in store.ids() {
        for k in 0..store.get(id).numel() {
            let mut plus = store.clone();
            plus.get_mut(id).data_mut()[k] += h;
            let mut minus = store.clone();
            minus.get_mut(id).data_mut()[k] -= h;
            let fd = (loss_value(&plus, p) - loss_value(&minus, p)) / (2.0 * h);
            let an = grads[id.0].data()[k];
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1.0);
            worst = worst.max(rel);
        }
    }
    worst
}

