use rand::Rng;
use rand_distr::StandardNormal;

use super::{finite_difference_check_inputs, Graph, Var};
use crate::error::Result;
use crate::rng::RngStream;
use crate::tensor::Tensor;

pub(crate) fn randn(rng: &mut RngStream, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

/// Projects an arbitrary-shaped node onto a scalar through fixed random
/// weights, so every output entry contributes a distinct gradient.
fn project(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let w = randn(&mut RngStream::new(seed ^ 0xabc), &shape);
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    g.sum(p)
}

type Build = fn(&mut Graph, &[Var]) -> Result<Var>;

struct Case {
    name: &'static str,
    shapes: fn(&mut RngStream) -> Vec<Vec<usize>>,
    positive: bool,
    build: Build,
}

fn dims(rng: &mut RngStream) -> (usize, usize) {
    (rng.gen_range(1..=8), rng.gen_range(1..=8))
}

fn cases() -> Vec<Case> {
    vec![
        Case {
            name: "matmul",
            shapes: |r| {
                let (m, k) = dims(r);
                let n = r.gen_range(1..=8);
                vec![vec![m, k], vec![k, n]]
            },
            positive: false,
            build: |g, x| g.matmul(x[0], x[1]),
        },
        Case { name: "add", shapes: |r| { let (a, b) = dims(r); vec![vec![a, b], vec![a, b]] }, positive: false, build: |g, x| g.add(x[0], x[1]) },
        Case { name: "add_row", shapes: |r| { let (a, b) = dims(r); vec![vec![a, b], vec![b]] }, positive: false, build: |g, x| g.add(x[0], x[1]) },
        Case { name: "sub_scalar", shapes: |r| { let (a, b) = dims(r); vec![vec![], vec![a, b]] }, positive: false, build: |g, x| g.sub(x[0], x[1]) },
        Case { name: "mul", shapes: |r| { let (a, b) = dims(r); vec![vec![a, b], vec![a, b]] }, positive: false, build: |g, x| g.mul(x[0], x[1]) },
        Case { name: "mul_row", shapes: |r| { let (a, b) = dims(r); vec![vec![b], vec![a, b]] }, positive: false, build: |g, x| g.mul(x[0], x[1]) },
        Case { name: "scale", shapes: |r| { let (a, b) = dims(r); vec![vec![a, b]] }, positive: false, build: |g, x| g.scale(x[0], -1.7) },
        Case { name: "offset", shapes: |r| { let (a, b) = dims(r); vec![vec![a, b]] }, positive: false, build: |g, x| g.offset(x[0], 0.3) },
        Case { name: "exp", shapes: |r| { let (a, b) = dims(r); vec![vec![a, b]] }, positive: false, build: |g, x| g.exp(x[0]) },
        Case { name: "log", shapes: |r| { let (a, b) = dims(r); vec![vec![a, b]] }, positive: true, build: |g, x| g.log(x[0]) },
        Case { name: "tanh", shapes: |r| { let (a, b) = dims(r); vec![vec![a, b]] }, positive: false, build: |g, x| g.tanh(x[0]) },
        Case { name: "sigmoid", shapes: |r| { let (a, b) = dims(r); vec![vec![a, b]] }, positive: false, build: |g, x| g.sigmoid(x[0]) },
        Case { name: "softplus", shapes: |r| { let (a, b) = dims(r); vec![vec![a, b]] }, positive: false, build: |g, x| g.softplus(x[0]) },
        Case { name: "leaky_relu", shapes: |r| { let (a, b) = dims(r); vec![vec![a, b]] }, positive: false, build: |g, x| g.leaky_relu(x[0], 0.01) },
        Case { name: "square", shapes: |r| { let (a, b) = dims(r); vec![vec![a, b]] }, positive: false, build: |g, x| g.square(x[0]) },
        Case { name: "clamp", shapes: |r| { let (a, b) = dims(r); vec![vec![a, b]] }, positive: false, build: |g, x| g.clamp(x[0], -0.5, 0.5) },
        Case { name: "softmax", shapes: |r| { let (a, b) = dims(r); vec![vec![a, b]] }, positive: false, build: |g, x| g.softmax(x[0]) },
        Case { name: "log_softmax", shapes: |r| { let (a, b) = dims(r); vec![vec![a, b]] }, positive: false, build: |g, x| g.log_softmax(x[0]) },
        Case { name: "layer_norm", shapes: |r| { let (a, b) = dims(r); vec![vec![a, b.max(2)]] }, positive: false, build: |g, x| g.layer_norm(x[0]) },
        Case { name: "sum", shapes: |r| { let (a, b) = dims(r); vec![vec![a, b]] }, positive: false, build: |g, x| g.sum(x[0]) },
        Case { name: "mean", shapes: |r| { let (a, b) = dims(r); vec![vec![a, b]] }, positive: false, build: |g, x| g.mean(x[0]) },
        Case { name: "sum_last", shapes: |r| { let (a, b) = dims(r); vec![vec![a, b]] }, positive: false, build: |g, x| g.sum_last(x[0]) },
        Case {
            name: "concat",
            shapes: |r| {
                let (a, b) = dims(r);
                vec![vec![a, b], vec![a, 0], vec![a, r.gen_range(1..=8)]]
            },
            positive: false,
            build: |g, x| g.concat(x),
        },
        Case {
            name: "slice",
            shapes: |r| { let (a, b) = dims(r); vec![vec![a, b + 2]] },
            positive: false,
            build: |g, x| {
                let w = g.shape(x[0])[1];
                g.slice(x[0], 1, w - 2)
            },
        },
        Case { name: "reshape", shapes: |r| { let (a, b) = dims(r); vec![vec![a, b]] }, positive: false, build: |g, x| { let n = g.value(x[0]).numel(); g.reshape(x[0], &[n]) } },
        Case {
            name: "gather_rows",
            shapes: |r| { let (a, b) = dims(r); vec![vec![a, b]] },
            positive: false,
            build: |g, x| {
                let n = g.shape(x[0])[0];
                g.gather_rows(x[0], vec![n - 1, 0, n / 2, 0])
            },
        },
        Case {
            name: "segment_sum",
            shapes: |r| { let (a, b) = dims(r); vec![vec![a, b]] },
            positive: false,
            build: |g, x| {
                let n = g.shape(x[0])[0];
                g.segment_sum(x[0], (0..n).map(|i| i % 3).collect(), 3)
            },
        },
        Case {
            name: "gaussian_log_density",
            shapes: |r| { let (a, b) = dims(r); vec![vec![a, b], vec![a, b], vec![b]] },
            positive: false,
            build: |g, x| g.gaussian_log_density(x[0], x[1], x[2]),
        },
        Case {
            name: "linear_scan",
            shapes: |r| {
                let (t, n) = dims(r);
                let b = r.gen_range(1..=3);
                vec![vec![n], vec![b, t, n], vec![b, n]]
            },
            positive: false,
            build: |g, x| g.linear_scan(x[0], x[1], x[2]),
        },
    ]
}

fn check_case(case: &Case, seed: u64) -> Result<f64> {
    let mut rng = RngStream::new(seed).split_named(case.name);
    let shapes = (case.shapes)(&mut rng);
    let points: Vec<Tensor> = shapes
        .iter()
        .map(|s| {
            let t = randn(&mut rng, s);
            if case.positive {
                t.map(|v| v.abs() + 0.5)
            } else {
                t
            }
        })
        .collect();
    let build = case.build;
    finite_difference_check_inputs(
        |g, xs| {
            let y = build(g, xs)?;
            project(g, y, seed)
        },
        &points,
        1e-6,
    )
}

/// Finite-difference check of every differentiable op on random inputs
/// (shapes up to 8x8), one entry per op with the worst error over `seeds`.
pub fn op_gradcheck_suite(seeds: u64) -> Result<Vec<(String, f64)>> {
    let mut out = Vec::new();
    for case in cases() {
        let mut worst = 0.0f64;
        for seed in 0..seeds {
            worst = worst.max(check_case(&case, seed)?);
        }
        out.push((case.name.to_string(), worst));
    }
    Ok(out)
}
