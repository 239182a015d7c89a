//! Finite-difference checks of every differentiable op.

use std::rc::Rc;

use openslot::graph::{Graph, Var};
use openslot::loss;
use openslot::nn::{GruCell, LayerNorm, Linear, Mlp, ParamStore};
use openslot::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-4;

/// Input domain of one operand.
#[derive(Clone, Copy)]
pub enum Domain {
    /// Uniform in `[-2, 2]`, at least `0.05` from zero (keeps off relu/abs kinks).
    Signed,
    /// Uniform in `[0.5, 2]`, at least `0.05` from one (the clamp kink).
    Positive,
    /// Uniform in `[0.1, 0.9]`, for probabilities.
    Unit,
}

impl Domain {
    fn sample(self, rng: &mut ChaCha8Rng) -> f64 {
        match self {
            Domain::Signed => {
                let m = rng.random_range(0.05..2.0);
                if rng.random::<bool>() { m } else { -m }
            }
            Domain::Positive => loop {
                let v = rng.random_range(0.5..2.0);
                if (v - 1.0f64).abs() >= 0.05 {
                    break v;
                }
            },
            Domain::Unit => rng.random_range(0.1..0.9),
        }
    }
}

type Build = Box<dyn Fn(&mut Graph, &[Var], &mut ChaCha8Rng) -> Result<Var>>;

pub struct Case {
    pub name: &'static str,
    pub inputs: Vec<((usize, usize), Domain)>,
    pub build: Build,
}

fn case(
    name: &'static str,
    inputs: &[((usize, usize), Domain)],
    build: impl Fn(&mut Graph, &[Var], &mut ChaCha8Rng) -> Result<Var> + 'static,
) -> Case {
    Case {
        name,
        inputs: inputs.to_vec(),
        build: Box::new(build),
    }
}

const S: Domain = Domain::Signed;
const P: Domain = Domain::Positive;
const U: Domain = Domain::Unit;

fn onehot_rows(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    let mut d = vec![0.0; r * c];
    for i in 0..r {
        d[i * c + rng.random_range(0..c)] = 1.0;
    }
    Tensor::from_matrix(r, c, d).unwrap()
}

fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    Tensor::from_matrix(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Every op and loss, plus the composite layers built from them.
pub fn cases() -> Vec<Case> {
    vec![
        case("matmul", &[((3, 4), S), ((4, 2), S)], |g, x, _| g.matmul(x[0], x[1])),
        case("matmul_nt", &[((3, 4), S), ((5, 4), S)], |g, x, _| g.matmul_nt(x[0], x[1])),
        case("transpose", &[((3, 4), S)], |g, x, _| g.transpose(x[0])),
        case("add", &[((3, 4), S), ((3, 4), S)], |g, x, _| g.add(x[0], x[1])),
        case("add_row_broadcast", &[((3, 4), S), ((1, 4), S)], |g, x, _| g.add(x[0], x[1])),
        case("add_col_broadcast", &[((3, 4), S), ((3, 1), S)], |g, x, _| g.add(x[0], x[1])),
        case("sub", &[((3, 4), S), ((1, 4), S)], |g, x, _| g.sub(x[0], x[1])),
        case("mul", &[((3, 4), S), ((3, 1), S)], |g, x, _| g.mul(x[0], x[1])),
        case("div", &[((3, 4), S), ((3, 4), P)], |g, x, _| g.div(x[0], x[1])),
        case("div_broadcast", &[((3, 4), S), ((1, 4), P)], |g, x, _| g.div(x[0], x[1])),
        case("scale", &[((3, 4), S)], |g, x, _| Ok(g.scale(x[0], -1.7))),
        case("add_scalar", &[((3, 4), S)], |g, x, _| Ok(g.add_scalar(x[0], 0.3))),
        case("relu", &[((3, 4), S)], |g, x, _| Ok(g.relu(x[0]))),
        case("sigmoid", &[((3, 4), S)], |g, x, _| Ok(g.sigmoid(x[0]))),
        case("tanh", &[((3, 4), S)], |g, x, _| Ok(g.tanh(x[0]))),
        case("exp", &[((3, 4), S)], |g, x, _| Ok(g.exp(x[0]))),
        case("ln", &[((3, 4), P)], |g, x, _| Ok(g.ln(x[0]))),
        case("square", &[((3, 4), S)], |g, x, _| Ok(g.square(x[0]))),
        // Kinks at -3, 3 and 1 are never within 2 * STEP of a sample.
        case("clamp_inactive", &[((3, 4), S)], |g, x, _| Ok(g.clamp(x[0], -3.0, 3.0))),
        case("clamp_active", &[((3, 4), P)], |g, x, _| Ok(g.clamp(x[0], 0.0, 1.0))),
        case("softmax_rows", &[((3, 4), S)], |g, x, _| g.softmax(x[0], 1)),
        case("softmax_cols", &[((3, 4), S)], |g, x, _| g.softmax(x[0], 0)),
        case("log_softmax_rows", &[((3, 4), S)], |g, x, _| g.log_softmax(x[0], 1)),
        case("log_softmax_cols", &[((3, 4), S)], |g, x, _| g.log_softmax(x[0], 0)),
        case("logsumexp_rows", &[((3, 4), S)], |g, x, _| g.logsumexp(x[0], 1)),
        case("logsumexp_cols", &[((3, 4), S)], |g, x, _| g.logsumexp(x[0], 0)),
        case("layer_norm", &[((3, 5), S)], |g, x, _| g.layer_norm(x[0], 1e-5)),
        case("sum", &[((3, 4), S)], |g, x, _| Ok(g.sum(x[0]))),
        case("mean", &[((3, 4), S)], |g, x, _| Ok(g.mean(x[0]))),
        case("sum_axis_rows", &[((3, 4), S)], |g, x, _| g.sum_axis(x[0], 1)),
        case("sum_axis_cols", &[((3, 4), S)], |g, x, _| g.sum_axis(x[0], 0)),
        case("gather_rows", &[((4, 3), S)], |g, x, _| g.gather_rows(x[0], Rc::from(vec![2, 0, 2, 3, 1]))),
        case("scatter_add_rows", &[((5, 3), S)], |g, x, _| {
            g.scatter_add_rows(x[0], Rc::from(vec![1, 0, 1, 3, 1]), 4)
        }),
        case("slice_cols", &[((3, 5), S)], |g, x, _| g.slice_cols(x[0], 1, 4)),
        case("concat_cols", &[((3, 2), S), ((3, 3), S)], |g, x, _| g.concat_cols(&[x[0], x[1]])),
        case("reshape", &[((3, 4), S)], |g, x, _| g.reshape(x[0], 2, 6)),
        case("cross_entropy", &[((4, 5), S)], |g, x, rng| {
            let t = onehot_rows(rng, 4, 5);
            loss::cross_entropy(g, x[0], &t)
        }),
        case("cross_entropy_soft", &[((4, 5), S)], |g, x, _| {
            loss::cross_entropy(g, x[0], &Tensor::from_matrix(4, 5, vec![0.2; 20]).unwrap())
        }),
        case("cross_entropy_rows", &[((4, 5), S)], |g, x, rng| {
            let t = onehot_rows(rng, 4, 5);
            loss::cross_entropy_rows(g, x[0], &t)
        }),
        case("weighted_cross_entropy", &[((4, 5), S)], |g, x, rng| {
            let t = onehot_rows(rng, 4, 5);
            loss::weighted_cross_entropy(g, x[0], &t, &[1.0, 1e4, 0.5, 0.0])
        }),
        case("bce", &[((3, 4), U)], |g, x, rng| {
            let t = Tensor::from_matrix(3, 4, (0..12).map(|_| f64::from(rng.random::<bool>() as u8)).collect()).unwrap();
            loss::bce(g, x[0], &t)
        }),
        case("mse", &[((3, 4), S)], |g, x, rng| {
            let t = random(rng, 3, 4);
            loss::mse(g, x[0], &t)
        }),
        case("linear_mlp", &[((3, 4), S)], |g, x, rng| {
            let mlp = Mlp::new("m", &[4, 6, 2]);
            let mut store = ParamStore::new();
            mlp.init(&mut store, rng);
            let b = store.bind(g, "", false);
            mlp.forward(g, &b, x[0])
        }),
        case("linear_no_bias", &[((3, 4), S)], |g, x, rng| {
            let l = Linear::new("l", 4, 3);
            let mut store = ParamStore::new();
            l.init(&mut store, rng);
            let b = store.bind(g, "", false);
            l.forward_no_bias(g, &b, x[0])
        }),
        case("layer_norm_affine", &[((3, 5), S)], |g, x, _| {
            let ln = LayerNorm::new("n", 5);
            let mut store = ParamStore::new();
            ln.init(&mut store);
            let b = store.bind(g, "", false);
            ln.forward(g, &b, x[0])
        }),
        case("gru_cell", &[((3, 4), S), ((3, 5), S)], |g, x, rng| {
            let cell = GruCell::new("gru", 5, 4);
            let mut store = ParamStore::new();
            cell.init(&mut store, rng);
            let b = store.bind(g, "", false);
            cell.forward(g, &b, x[0], x[1])
        }),
    ]
}

/// Worst relative error `|a - n| / max(|a|, |n|, 1e-3)` over all input
/// entries, for loss `sum(out * W)` with random `W`.
pub fn check(case: &Case, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values: Vec<Tensor> = case
        .inputs
        .iter()
        .map(|&((r, c), d)| Tensor::from_matrix(r, c, (0..r * c).map(|_| d.sample(&mut rng)).collect()).unwrap())
        .collect();
    let build_seed: u64 = rng.random();
    let weight_seed: u64 = rng.random();
    let eval = |vals: &[Tensor], with_grad: bool| -> Result<(f64, Vec<Tensor>)> {
        let mut g = Graph::new();
        let xs: Vec<Var> = vals.iter().map(|v| g.param(v.clone())).collect();
        let out = (case.build)(&mut g, &xs, &mut ChaCha8Rng::seed_from_u64(build_seed))?;
        let ov = g.value(out).clone();
        let (r, c) = (ov.rows(), ov.cols());
        let w = g.constant(random(&mut ChaCha8Rng::seed_from_u64(weight_seed), r, c));
        let wo = g.mul(out, w)?;
        let l = g.sum(wo);
        let value = g.value(l).item();
        if !with_grad {
            return Ok((value, Vec::new()));
        }
        let grads = g.backward(l)?;
        let gs = xs
            .iter()
            .zip(vals)
            .map(|(&x, v)| grads.get(x).cloned().unwrap_or_else(|| Tensor::zeros(v.shape())))
            .collect();
        Ok((value, gs))
    };
    let (_, analytic) = eval(&values, true)?;
    let mut worst = 0.0f64;
    for (k, v) in values.iter().enumerate() {
        for j in 0..v.len() {
            let at = |d: f64| -> Result<f64> {
                let mut v = values.clone();
                v[k].data_mut()[j] += d;
                Ok(eval(&v, false)?.0)
            };
            // Fourth-order central difference.
            let numeric = (-at(2.0 * STEP)? + 8.0 * at(STEP)? - 8.0 * at(-STEP)? + at(-2.0 * STEP)?) / (12.0 * STEP);
            let a = analytic[k].data()[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

/// `(worst error, op name)` over every case and `seeds` seeds.
pub fn run_suite(seeds: u64) -> Result<(f64, &'static str)> {
    let mut worst = (0.0, "");
    for c in cases() {
        for seed in 0..seeds {
            let e = check(&c, seed)?;
            if e > worst.0 {
                worst = (e, c.name);
            }
        }
    }
    Ok(worst)
}
