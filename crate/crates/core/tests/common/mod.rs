//! Central finite-difference probes shared by the gradient tests and the
//! acceptance suite. Every probe returns the normwise relative error
//! `max_k |analytic_k - numeric_k| / max(max_k |numeric_k|, 1e-8)`.

#![allow(dead_code)]

use netcause::balance::{sinkhorn_divergence, SinkhornConfig};
use netcause::estimator::{loss_ly, EstimatorConfig, EstimatorModel, Variant, WassBatch};
use netcause::graph::Graph;
use netcause::propensity::{
    sparsity_penalty_var, IndividualPSModel, NeighborhoodPSModel, PropensityConfig,
};
use netcause::synth::{generate, sample_features, GenConfig};
use netcause::tensor::{Activation, Linear, Mlp, ParamStore, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-6;

pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-8);
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max)
        / scale
}

/// Central differences of `f` at `x`, one coordinate at a time.
pub fn numeric_grad(mut f: impl FnMut(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    let mut x = x.to_vec();
    (0..x.len())
        .map(|k| {
            let orig = x[k];
            x[k] = orig + H;
            let up = f(&x);
            x[k] = orig - H;
            let down = f(&x);
            x[k] = orig;
            (up - down) / (2.0 * H)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op {
    MatMul,
    Add,
    AddRowBroadcast,
    Sub,
    Mul,
    MulConst,
    Scale,
    AddScalar,
    Concat,
    Sigmoid,
    LogSigmoid,
    Relu,
    Log,
    Exp,
    SelectRows,
    Clamp,
    Square,
    SoftmaxRows,
    Sum,
    Mean,
    WeightedSum,
    RowSum,
    ColMean,
    StandardizeCols,
    LinearLayer,
    MlpLayer,
    SparsityPenalty,
}

pub const OPS: [Op; 27] = [
    Op::MatMul,
    Op::Add,
    Op::AddRowBroadcast,
    Op::Sub,
    Op::Mul,
    Op::MulConst,
    Op::Scale,
    Op::AddScalar,
    Op::Concat,
    Op::Sigmoid,
    Op::LogSigmoid,
    Op::Relu,
    Op::Log,
    Op::Exp,
    Op::SelectRows,
    Op::Clamp,
    Op::Square,
    Op::SoftmaxRows,
    Op::Sum,
    Op::Mean,
    Op::WeightedSum,
    Op::RowSum,
    Op::ColMean,
    Op::StandardizeCols,
    Op::LinearLayer,
    Op::MlpLayer,
    Op::SparsityPenalty,
];

/// Uniform entries in `[-2, 2]` kept at least `gap` away from every kink.
fn draw(rng: &mut ChaCha8Rng, rows: usize, cols: usize, kinks: &[f64], gap: f64) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| loop {
            let v: f64 = rng.gen_range(-2.0..2.0);
            if kinks.iter().all(|k| (v - k).abs() >= gap) {
                break v;
            }
        })
        .collect();
    Tensor::new(rows, cols, data).unwrap()
}

fn positive(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.gen_range(0.3..3.0)).collect();
    Tensor::new(rows, cols, data).unwrap()
}

/// Inputs of one probe plus the graph builder applied to them.
struct Probe {
    inputs: Vec<Tensor>,
    build: Box<dyn Fn(&mut Tape, &[Var]) -> Var>,
}

fn probe(op: Op, rng: &mut ChaCha8Rng) -> Probe {
    let r = rng.gen_range(2..6);
    let c = rng.gen_range(1..5);
    let k = rng.gen_range(1..5);
    let none: &[f64] = &[];
    let one = |rng: &mut ChaCha8Rng| vec![draw(rng, r, c, none, 0.0)];
    let two = |rng: &mut ChaCha8Rng| vec![draw(rng, r, c, none, 0.0), draw(rng, r, c, none, 0.0)];
    macro_rules! unary {
        ($inputs:expr, $f:expr) => {{
            let f = $f;
            Probe {
                inputs: $inputs,
                build: Box::new(move |t: &mut Tape, v: &[Var]| f(t, v[0]).unwrap()),
            }
        }};
    }
    macro_rules! binary {
        ($inputs:expr, $f:expr) => {{
            let f = $f;
            Probe {
                inputs: $inputs,
                build: Box::new(move |t: &mut Tape, v: &[Var]| f(t, v[0], v[1]).unwrap()),
            }
        }};
    }
    match op {
        Op::MatMul => binary!(
            vec![draw(rng, r, k, none, 0.0), draw(rng, k, c, none, 0.0)],
            Tape::matmul
        ),
        Op::Add => binary!(two(rng), Tape::add),
        Op::AddRowBroadcast => binary!(
            vec![draw(rng, r, c, none, 0.0), draw(rng, 1, c, none, 0.0)],
            Tape::add
        ),
        Op::Sub => binary!(two(rng), Tape::sub),
        Op::Mul => binary!(two(rng), Tape::mul),
        Op::MulConst => {
            let cst = draw(rng, r, c, none, 0.0);
            unary!(one(rng), move |t: &mut Tape, a| t.mul_const(a, cst.clone()))
        }
        Op::Scale => {
            let s: f64 = rng.gen_range(-3.0..3.0);
            unary!(one(rng), move |t: &mut Tape, a| t.scale(a, s))
        }
        Op::AddScalar => {
            let s: f64 = rng.gen_range(-3.0..3.0);
            unary!(one(rng), move |t: &mut Tape, a| t.add_scalar(a, s))
        }
        Op::Concat => binary!(
            vec![draw(rng, r, c, none, 0.0), draw(rng, r, k, none, 0.0)],
            Tape::concat
        ),
        Op::Sigmoid => unary!(one(rng), Tape::sigmoid),
        Op::LogSigmoid => unary!(one(rng), Tape::log_sigmoid),
        Op::Relu => unary!(vec![draw(rng, r, c, &[0.0], 0.05)], Tape::relu),
        Op::Log => unary!(vec![positive(rng, r, c)], Tape::log),
        Op::Exp => unary!(one(rng), Tape::exp),
        Op::SelectRows => {
            let idx: Vec<usize> = (0..rng.gen_range(1..8))
                .map(|_| rng.gen_range(0..r))
                .collect();
            unary!(one(rng), move |t: &mut Tape, a| t.select_rows(a, &idx))
        }
        Op::Clamp => unary!(
            vec![draw(rng, r, c, &[-1.0, 1.0], 0.05)],
            |t: &mut Tape, a| t.clamp(a, -1.0, 1.0)
        ),
        Op::Square => unary!(one(rng), Tape::square),
        Op::SoftmaxRows => unary!(one(rng), Tape::softmax_rows),
        Op::Sum => unary!(one(rng), Tape::sum),
        Op::Mean => unary!(one(rng), Tape::mean),
        Op::WeightedSum => {
            let w = draw(rng, r, c, none, 0.0);
            unary!(one(rng), move |t: &mut Tape, a| t
                .weighted_sum(a, w.clone()))
        }
        Op::RowSum => unary!(one(rng), Tape::row_sum),
        Op::ColMean => unary!(one(rng), Tape::col_mean),
        Op::StandardizeCols => {
            unary!(
                vec![draw(rng, r.max(3), c, none, 0.0)],
                |t: &mut Tape, a| t.standardize_cols(a, 1e-8)
            )
        }
        Op::LinearLayer | Op::MlpLayer => {
            let mut store = ParamStore::new();
            let mut init = ChaCha8Rng::seed_from_u64(rng.gen());
            let layer: Box<dyn Fn(&mut Tape, &[Var], Var) -> Var> = if op == Op::LinearLayer {
                let lin = Linear::new(&mut store, "l", k, c, true, &mut init);
                Box::new(move |t, p, x| lin.forward(t, p, x).unwrap())
            } else {
                let mlp = Mlp::new(
                    &mut store,
                    "m",
                    &[k, 4, 3, c],
                    &[Activation::Relu, Activation::Sigmoid, Activation::Identity],
                    &mut init,
                );
                Box::new(move |t, p, x| mlp.forward(t, p, x).unwrap())
            };
            // Random biases keep relu inputs off their kink.
            let mut inputs = vec![draw(rng, r, k, none, 0.0)];
            for p in store.tensors() {
                let (pr, pc) = p.shape();
                inputs.push(draw(rng, pr, pc, none, 0.0));
            }
            Probe {
                inputs,
                build: Box::new(move |t, v| layer(t, &v[1..], v[0])),
            }
        }
        Op::SparsityPenalty => {
            let data = (0..r * c).map(|_| rng.gen_range(0.05..0.95)).collect();
            let rho: f64 = rng.gen_range(0.02..0.5);
            unary!(
                vec![Tensor::new(r, c, data).unwrap()],
                move |t: &mut Tape, a| sparsity_penalty_var(t, a, rho)
            )
        }
    }
}

/// Gradient of `<R, op(inputs)>` for a random `R`, analytic against numeric.
pub fn op_probe_error(op: Op, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = probe(op, &mut rng);
    let shape = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = p.inputs.iter().map(|x| tape.leaf(x.clone())).collect();
        let out = (p.build)(&mut tape, &vars);
        tape.value(out).shape()
    };
    let weights = draw(&mut rng, shape.0, shape.1, &[], 0.0);
    let eval = |inputs: &[Tensor]| -> (f64, Vec<Tensor>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
        let out = (p.build)(&mut tape, &vars);
        let root = tape.weighted_sum(out, weights.clone()).unwrap();
        let g = tape.backward(root).unwrap();
        (
            tape.value(root).item(),
            vars.iter().map(|&v| g.wrt(v)).collect(),
        )
    };
    let (_, grads) = eval(&p.inputs);
    let analytic: Vec<f64> = grads.iter().flat_map(|g| g.data().to_vec()).collect();
    let flat: Vec<f64> = p.inputs.iter().flat_map(|x| x.data().to_vec()).collect();
    let numeric = numeric_grad(
        |x| {
            let mut at = 0;
            let inputs: Vec<Tensor> = p
                .inputs
                .iter()
                .map(|t| {
                    let (r, c) = t.shape();
                    let v = Tensor::new(r, c, x[at..at + r * c].to_vec()).unwrap();
                    at += r * c;
                    v
                })
                .collect();
            eval(&inputs).0
        },
        &flat,
    );
    rel_err(&analytic, &numeric)
}

/// Gradient error over every parameter of a store, where `loss` returns the
/// value and analytic parameter gradients for the current store.
fn store_error(
    store: &mut ParamStore,
    mut loss: impl FnMut(&ParamStore) -> (f64, Vec<Tensor>),
) -> f64 {
    let (_, grads) = loss(store);
    let analytic: Vec<f64> = grads.iter().flat_map(|g| g.data().to_vec()).collect();
    let mut numeric = Vec::with_capacity(analytic.len());
    for p in 0..store.len() {
        for k in 0..store.get(p).len() {
            let orig = store.get(p).data()[k];
            store.get_mut(p).data_mut()[k] = orig + H;
            let up = loss(store).0;
            store.get_mut(p).data_mut()[k] = orig - H;
            let down = loss(store).0;
            store.get_mut(p).data_mut()[k] = orig;
            numeric.push((up - down) / (2.0 * H));
        }
    }
    rel_err(&analytic, &numeric)
}

fn randomize_biases(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    for p in 0..store.len() {
        if store.names()[p].ends_with("bias") {
            store
                .get_mut(p)
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = rng.gen_range(-0.5..0.5));
        }
    }
}

fn small_inputs(seed: u64, rng: &mut ChaCha8Rng) -> (Tensor, Vec<f64>, Vec<f64>) {
    let n = rng.gen_range(6..14);
    let x = sample_features(n, 3, seed).unwrap();
    let t: Vec<f64> = (0..n)
        .map(|i| {
            if i < 2 {
                i as f64
            } else {
                rng.gen_range(0..2) as f64
            }
        })
        .collect();
    let z: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
    (x, t, z)
}

/// Treatment propensity loss (cross-entropy plus sparsity) over all parameters.
pub fn lt_probe_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (x, t, _) = small_inputs(seed, &mut rng);
    let cfg = PropensityConfig {
        hidden: 4,
        bins: 4,
        beta: 0.5,
        seed,
        ..Default::default()
    };
    let mut m = IndividualPSModel::new(&x, &cfg);
    randomize_biases(m.params_mut(), &mut rng);
    let mut store = m.params().clone();
    store_error(&mut store, |s| {
        *m.params_mut() = s.clone();
        let e = m.loss(&x, &t).unwrap();
        (e.total, e.grads)
    })
}

/// Exposure density loss (negative log-likelihood plus sparsity).
pub fn lz_probe_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (x, _, z) = small_inputs(seed, &mut rng);
    let cfg = PropensityConfig {
        hidden: 4,
        bins: 4,
        beta: 0.5,
        seed,
        ..Default::default()
    };
    let mut m = NeighborhoodPSModel::new(&x, &cfg);
    randomize_biases(m.params_mut(), &mut rng);
    // The density head starts at zero; move it off the uniform point.
    for p in 0..m.params().len() {
        m.params_mut()
            .get_mut(p)
            .data_mut()
            .iter_mut()
            .for_each(|v| *v += rng.gen_range(-0.3..0.3));
    }
    let mut store = m.params().clone();
    store_error(&mut store, |s| {
        *m.params_mut() = s.clone();
        let e = m.loss(&x, &z).unwrap();
        (e.total, e.grads)
    })
}

/// Outcome loss with a positive Wasserstein weight, through Sinkhorn.
pub fn ly_probe_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(8..13);
    let graph = Graph::small_world(n, 4, 0.2, seed).unwrap();
    let ds = generate(
        &graph,
        &GenConfig {
            seed,
            feature_dim: 3,
            ..Default::default()
        },
    )
    .unwrap();
    let cfg = EstimatorConfig {
        variant: Variant::Both,
        lambda: rng.gen_range(0.1..1.0),
        hidden: 4,
        gcn_dim: 2,
        wass_batch: n,
        sinkhorn: SinkhornConfig {
            eps: 0.5,
            max_iters: 5000,
            tol: 1e-13,
            ..SinkhornConfig::default()
        },
        seed,
        ..Default::default()
    };
    let mut model = EstimatorModel::new(&ds, &cfg);
    randomize_biases(model.params_mut(), &mut rng);
    let prep = model.prepare(&ds).unwrap();
    let y = model.standardize_y(&ds.y);
    let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(0.2..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let w: Vec<f64> = raw.iter().map(|v| v / total).collect();
    let batch = WassBatch::draw(n, n, &mut rng);
    let mut store = model.params().clone();
    store_error(&mut store, |s| {
        *model.params_mut() = s.clone();
        let l = loss_ly(
            &model,
            &prep,
            &y,
            &w,
            cfg.lambda,
            Some(&batch),
            &cfg.sinkhorn,
        )
        .unwrap();
        (l.total, l.grads)
    })
}

/// Sinkhorn divergence gradient with respect to the first point cloud.
pub fn sinkhorn_probe_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, m, d) = (
        rng.gen_range(2..9),
        rng.gen_range(2..9),
        rng.gen_range(1..4),
    );
    let a = draw(&mut rng, n, d, &[], 0.0);
    let b = draw(&mut rng, m, d, &[], 0.0);
    let mass = |rng: &mut ChaCha8Rng, k: usize| {
        let raw: Vec<f64> = (0..k).map(|_| rng.gen_range(0.2..1.0)).collect();
        let s: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / s).collect::<Vec<_>>()
    };
    let (ma, mb) = (mass(&mut rng, n), mass(&mut rng, m));
    let cfg = SinkhornConfig {
        eps: 0.5,
        max_iters: 5000,
        tol: 1e-13,
        ..SinkhornConfig::default()
    };
    let out = sinkhorn_divergence(&a, &ma, &b, &mb, &cfg).unwrap();
    let numeric = numeric_grad(
        |x| {
            let pts = Tensor::new(n, d, x.to_vec()).unwrap();
            sinkhorn_divergence(&pts, &ma, &b, &mb, &cfg)
                .unwrap()
                .divergence
        },
        a.data(),
    );
    rel_err(out.grad_a_points.data(), &numeric)
}
