//! Central finite differences against the tape, in f64.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use semcomm::tensor::{Graph, Padding, PoolKind, Result, Tensor, Var};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
pub const CASES: usize = 50;
/// Coordinates probed per input per case.
const PROBES: usize = 6;

type Build = fn(&mut Graph<f64>, &[Var]) -> Result<Var>;

pub struct OpCase {
    pub name: &'static str,
    /// Input shapes for one randomized case.
    pub shapes: fn(&mut ChaCha8Rng) -> Vec<Vec<usize>>,
    /// Inputs drawn from `(0.1, 2)` instead of a standard normal.
    pub positive: bool,
    pub build: Build,
}

#[derive(Debug)]
pub struct OpReport {
    pub name: &'static str,
    pub cases: usize,
    pub worst: f64,
}

fn run_graph(build: Build, inputs: &[Tensor<f64>], proj: &Tensor<f64>, grads: bool) -> (f64, Vec<Vec<f64>>) {
    let mut g = Graph::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| if grads { g.param(t.clone()) } else { g.constant(t.clone()) }).collect();
    let out = build(&mut g, &vars).expect("op");
    let p = g.constant(proj.clone());
    let weighted = g.mul(out, p).expect("projection shape");
    let loss = g.sum(weighted).expect("sum");
    let value = g.value(loss).data()[0];
    if !grads {
        return (value, Vec::new());
    }
    g.backward(loss).expect("backward");
    let gs = vars.iter().map(|&v| g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; g.value(v).numel()])).collect();
    (value, gs)
}

fn output_shape(build: Build, inputs: &[Tensor<f64>]) -> Vec<usize> {
    let mut g = Graph::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = build(&mut g, &vars).expect("op");
    g.shape(out).to_vec()
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

pub fn check(case: &OpCase, seed: u64) -> OpReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..CASES {
        let shapes = (case.shapes)(&mut rng);
        let inputs: Vec<Tensor<f64>> = shapes
            .iter()
            .map(|s| {
                let n: usize = s.iter().product();
                let data = (0..n)
                    .map(|_| if case.positive { rng.gen_range(0.1..2.0) } else { rng.gen_range(-1.5..1.5) })
                    .collect();
                Tensor::new(s, data).unwrap()
            })
            .collect();
        let out_shape = output_shape(case.build, &inputs);
        let m: usize = out_shape.iter().product();
        let proj = Tensor::new(&out_shape, (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let (_, analytic) = run_graph(case.build, &inputs, &proj, true);
        for (k, input) in inputs.iter().enumerate() {
            for _ in 0..PROBES.min(input.numel()) {
                let j = rng.gen_range(0..input.numel());
                let mut plus = inputs.clone();
                plus[k].data_mut()[j] += STEP;
                let mut minus = inputs.clone();
                minus[k].data_mut()[j] -= STEP;
                let fp = run_graph(case.build, &plus, &proj, false).0;
                let fm = run_graph(case.build, &minus, &proj, false).0;
                let numeric = (fp - fm) / (2.0 * STEP);
                worst = worst.max(relative_error(analytic[k][j], numeric));
            }
        }
    }
    OpReport { name: case.name, cases: CASES, worst }
}

fn r(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.gen_range(lo..=hi)
}

fn nchw(rng: &mut ChaCha8Rng) -> Vec<usize> {
    vec![r(rng, 1, 2), r(rng, 1, 3), r(rng, 3, 6), r(rng, 3, 6)]
}

fn same(rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let s = nchw(rng);
    vec![s.clone(), s]
}

fn one(rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    vec![nchw(rng)]
}

fn conv_shapes(rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let (n, c, h, w, f) = (r(rng, 1, 2), r(rng, 1, 3), r(rng, 3, 6), r(rng, 3, 6), r(rng, 1, 3));
    let k = [1, 3][r(rng, 0, 1)];
    vec![vec![n, c, h, w], vec![f, c, k, k], vec![f]]
}

fn even_nchw(rng: &mut ChaCha8Rng) -> Vec<usize> {
    vec![r(rng, 1, 2), r(rng, 1, 3), 2 * r(rng, 1, 3), 2 * r(rng, 1, 3)]
}

fn gn_shapes(rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let c = 2 * r(rng, 1, 3);
    vec![vec![r(rng, 1, 2), c, r(rng, 2, 4), r(rng, 2, 4)]]
}

fn affine_shapes(rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let s = nchw(rng);
    vec![s.clone(), vec![s[1]], vec![s[1]]]
}

fn modulate_shapes(rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let s = nchw(rng);
    vec![s.clone(), vec![s[0], s[1]], vec![s[0], s[1]]]
}

fn bmm_shapes(rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let (b, m, k, n) = (r(rng, 1, 3), r(rng, 1, 4), r(rng, 1, 4), r(rng, 1, 4));
    vec![vec![b, m, k], vec![b, k, n]]
}

fn bmm_t_shapes(rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let (b, m, k, n) = (r(rng, 1, 3), r(rng, 1, 4), r(rng, 1, 4), r(rng, 1, 4));
    vec![vec![b, k, m], vec![b, n, k]]
}

fn rank3(rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    vec![vec![r(rng, 1, 3), r(rng, 1, 4), r(rng, 1, 5)]]
}

fn linear_shapes(rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let (n, i, o) = (r(rng, 1, 3), r(rng, 1, 5), r(rng, 1, 5));
    vec![vec![n, i], vec![o, i], vec![o]]
}

fn concat_shapes(rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let s = nchw(rng);
    let mut t = s.clone();
    t[1] = r(rng, 1, 3);
    vec![s, t]
}

fn slice_shapes(rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut s = nchw(rng);
    s[1] = r(rng, 2, 4);
    vec![s]
}

pub fn op_cases() -> Vec<OpCase> {
    vec![
        OpCase { name: "conv2d", shapes: conv_shapes, positive: false, build: |g, v| g.conv2d(v[0], v[1], Some(v[2]), 1, Padding::Same) },
        OpCase { name: "conv2d_stride2", shapes: conv_shapes, positive: false, build: |g, v| g.conv2d(v[0], v[1], Some(v[2]), 2, Padding::Same) },
        OpCase { name: "linear", shapes: linear_shapes, positive: false, build: |g, v| g.linear(v[0], v[1], Some(v[2])) },
        OpCase { name: "group_norm", shapes: gn_shapes, positive: false, build: |g, v| g.group_norm(v[0], 2, 1e-5) },
        OpCase { name: "channel_affine", shapes: affine_shapes, positive: false, build: |g, v| g.channel_affine(v[0], v[1], v[2]) },
        OpCase { name: "modulate", shapes: modulate_shapes, positive: false, build: |g, v| g.modulate(v[0], v[1], v[2]) },
        OpCase { name: "avg_pool", shapes: one, positive: false, build: |g, v| g.pool2d(v[0], PoolKind::Avg, 3, 1, Padding::Same) },
        OpCase { name: "max_pool", shapes: one, positive: false, build: |g, v| g.pool2d(v[0], PoolKind::Max, 3, 1, Padding::Same) },
        OpCase { name: "silu", shapes: one, positive: false, build: |g, v| g.silu(v[0]) },
        OpCase { name: "tanh", shapes: one, positive: false, build: |g, v| g.tanh(v[0]) },
        OpCase { name: "softmax", shapes: rank3, positive: false, build: |g, v| g.softmax(v[0]) },
        OpCase { name: "exp", shapes: one, positive: false, build: |g, v| g.exp(v[0]) },
        OpCase { name: "sqrt", shapes: one, positive: true, build: |g, v| g.sqrt(v[0]) },
        OpCase { name: "add", shapes: same, positive: false, build: |g, v| g.add(v[0], v[1]) },
        OpCase { name: "sub", shapes: same, positive: false, build: |g, v| g.sub(v[0], v[1]) },
        OpCase { name: "mul", shapes: same, positive: false, build: |g, v| g.mul(v[0], v[1]) },
        OpCase { name: "scale", shapes: one, positive: false, build: |g, v| g.scale(v[0], -1.7) },
        OpCase { name: "add_scalar", shapes: one, positive: false, build: |g, v| g.add_scalar(v[0], 0.3) },
        OpCase { name: "bmm", shapes: bmm_shapes, positive: false, build: |g, v| g.bmm(v[0], v[1], false, false) },
        OpCase { name: "bmm_transposed", shapes: bmm_t_shapes, positive: false, build: |g, v| g.bmm(v[0], v[1], true, true) },
        OpCase { name: "l2_normalize", shapes: rank3, positive: false, build: |g, v| g.l2_normalize(v[0], 1e-6) },
        OpCase {
            name: "reshape",
            shapes: one,
            positive: false,
            build: |g, v| {
                let n = g.value(v[0]).numel();
                let r = g.reshape(v[0], &[n])?;
                g.silu(r)
            },
        },
        OpCase { name: "concat_channels", shapes: concat_shapes, positive: false, build: |g, v| g.concat_channels(v[0], v[1]) },
        OpCase { name: "slice_channels", shapes: slice_shapes, positive: false, build: |g, v| g.slice_channels(v[0], 1, 1) },
        OpCase { name: "upsample2x", shapes: |rng| vec![even_nchw(rng)], positive: false, build: |g, v| g.upsample2x(v[0]) },
        OpCase {
            name: "sum",
            shapes: one,
            positive: false,
            build: |g, v| {
                let m = g.mul(v[0], v[0])?;
                g.sum(m)
            },
        },
        OpCase {
            name: "mean",
            shapes: one,
            positive: false,
            build: |g, v| {
                let m = g.mul(v[0], v[0])?;
                g.mean(m)
            },
        },
        OpCase {
            name: "sum_per_sample",
            shapes: one,
            positive: false,
            build: |g, v| {
                let m = g.mul(v[0], v[0])?;
                g.sum_per_sample(m)
            },
        },
    ]
}
