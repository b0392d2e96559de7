//! Compare tape gradients with central differences for a small composite
//! expression in f64.

use semcomm::tensor::{Graph, Padding, Tensor};

fn loss(g: &mut Graph<f64>, x: semcomm::tensor::Var, w: semcomm::tensor::Var) -> semcomm::tensor::Var {
    let c = g.conv2d(x, w, None, 1, Padding::Same).unwrap();
    let n = g.group_norm(c, 1, 1e-5).unwrap();
    let s = g.silu(n).unwrap();
    let sq = g.mul(s, s).unwrap();
    g.sum(sq).unwrap()
}

fn main() {
    let x = Tensor::<f64>::from_fn(&[1, 2, 5, 5], |i| ((i * 7919) % 23) as f64 / 11.0 - 1.0);
    let w = Tensor::<f64>::from_fn(&[3, 2, 3, 3], |i| ((i * 104_729) % 17) as f64 / 8.0 - 1.0);
    let mut g = Graph::new();
    let (xv, wv) = (g.param(x.clone()), g.param(w.clone()));
    let l = loss(&mut g, xv, wv);
    g.backward(l).unwrap();
    let analytic = g.grad(wv).unwrap().to_vec();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for j in 0..w.numel() {
        let eval = |d: f64| {
            let mut w2 = w.clone();
            w2.data_mut()[j] += d;
            let mut g = Graph::new();
            let (xv, wv) = (g.constant(x.clone()), g.constant(w2));
            let l = loss(&mut g, xv, wv);
            g.value(l).data()[0]
        };
        let numeric = (eval(h) - eval(-h)) / (2.0 * h);
        worst = worst.max((analytic[j] - numeric).abs() / analytic[j].abs().max(1e-3));
    }
    println!("{} weight gradients, worst relative error {worst:.2e}", w.numel());
}
