//! Finite-difference oracles for every traced primitive: first derivatives
//! and Hessian-vector products through the recorded backward pass.

mod common;

use common::{central_diff, max_rel_err, random_tensor, rng};
use gaitmeta::autodiff::{ConvGeom, PoolGeom, Tensor, Trace, Var};
use gaitmeta::Result;
use rand::Rng;

const TRIALS: usize = 20;
const H: f64 = 1e-5;
const TOL: f64 = 1e-4;
const FLOOR: f64 = 1e-6;

type Build = for<'t> fn(&[Var<'t>]) -> Result<Var<'t>>;

#[derive(Clone, Copy)]
enum Domain {
    Any,
    Positive,
    /// Magnitude in [0.2, 2] with random sign; keeps kinks and poles out of reach of `h`.
    AwayFromZero,
}

struct Case {
    name: &'static str,
    shapes: &'static [&'static [usize]],
    domain: Domain,
    build: Build,
}

fn sample(rng: &mut impl Rng, shape: &[usize], domain: Domain) -> Tensor {
    match domain {
        Domain::Any => random_tensor(rng, shape, -1.5, 1.5),
        Domain::Positive => random_tensor(rng, shape, 0.2, 2.0),
        Domain::AwayFromZero => {
            let mag = random_tensor(rng, shape, 0.2, 2.0);
            let signs = random_tensor(rng, shape, -1.0, 1.0);
            mag.zip_map(&signs, "sign", |m, s| m.copysign(s)).unwrap()
        }
    }
}

const CONV: ConvGeom = ConvGeom {
    batch: 2,
    channels: 2,
    len: 6,
    kernel: 3,
    pad_left: 1,
    out_len: 6,
};
const POOL: PoolGeom = PoolGeom {
    batch: 2,
    len: 5,
    feat: 3,
    segments: 2,
};

fn cases() -> Vec<Case> {
    vec![
        Case { name: "add", shapes: &[&[3, 2], &[3, 2]], domain: Domain::Any, build: |v| v[0].add(v[1]) },
        Case { name: "sub", shapes: &[&[3, 2], &[3, 2]], domain: Domain::Any, build: |v| v[0].sub(v[1]) },
        Case { name: "mul", shapes: &[&[3, 2], &[3, 2]], domain: Domain::Any, build: |v| v[0].mul(v[1]) },
        Case { name: "div", shapes: &[&[3, 2], &[3, 2]], domain: Domain::AwayFromZero, build: |v| v[0].div(v[1]) },
        Case { name: "neg", shapes: &[&[4]], domain: Domain::Any, build: |v| v[0].neg() },
        Case { name: "scale", shapes: &[&[4]], domain: Domain::Any, build: |v| v[0].scale(-2.5) },
        Case { name: "add_scalar", shapes: &[&[4]], domain: Domain::Any, build: |v| v[0].add_scalar(0.7) },
        Case { name: "exp", shapes: &[&[4]], domain: Domain::Any, build: |v| v[0].exp() },
        Case { name: "log", shapes: &[&[4]], domain: Domain::Positive, build: |v| v[0].log() },
        Case { name: "sqrt", shapes: &[&[4]], domain: Domain::Positive, build: |v| v[0].sqrt() },
        Case { name: "square", shapes: &[&[4]], domain: Domain::Any, build: |v| v[0].square() },
        Case { name: "recip", shapes: &[&[4]], domain: Domain::AwayFromZero, build: |v| v[0].recip_safe() },
        Case { name: "relu", shapes: &[&[2, 3]], domain: Domain::AwayFromZero, build: |v| v[0].relu()?.mul(v[0]) },
        Case { name: "matmul", shapes: &[&[3, 4], &[4, 2]], domain: Domain::Any, build: |v| v[0].matmul(v[1]) },
        Case { name: "matmul_tn", shapes: &[&[4, 3], &[4, 2]], domain: Domain::Any, build: |v| v[0].matmul_t(v[1], true, false) },
        Case { name: "matmul_nt", shapes: &[&[3, 4], &[2, 4]], domain: Domain::Any, build: |v| v[0].matmul_t(v[1], false, true) },
        Case { name: "matmul_tt", shapes: &[&[4, 3], &[2, 4]], domain: Domain::Any, build: |v| v[0].matmul_t(v[1], true, true) },
        Case { name: "broadcast_rows", shapes: &[&[3]], domain: Domain::Any, build: |v| v[0].broadcast_rows(4)?.square() },
        Case { name: "sum_rows", shapes: &[&[4, 3]], domain: Domain::Any, build: |v| v[0].sum_rows()?.square() },
        Case { name: "broadcast_cols", shapes: &[&[3]], domain: Domain::Any, build: |v| v[0].broadcast_cols(2)?.exp() },
        Case { name: "sum_cols", shapes: &[&[4, 3]], domain: Domain::Any, build: |v| v[0].sum_cols()?.square() },
        Case { name: "sum", shapes: &[&[2, 3]], domain: Domain::Any, build: |v| v[0].sum()?.square() },
        Case { name: "mean", shapes: &[&[2, 3]], domain: Domain::Any, build: |v| v[0].mean()?.exp() },
        Case { name: "broadcast_scalar", shapes: &[&[1]], domain: Domain::Any, build: |v| v[0].broadcast_scalar(&[2, 2])?.square() },
        Case { name: "reshape", shapes: &[&[2, 3]], domain: Domain::Any, build: |v| v[0].reshape(&[3, 2])?.square() },
        Case { name: "concat", shapes: &[&[3, 2], &[3, 1]], domain: Domain::Any, build: |v| v[0].concat_cols(v[1])?.square() },
        Case { name: "slice_cols", shapes: &[&[3, 4]], domain: Domain::Any, build: |v| v[0].slice_cols(1, 2)?.square() },
        Case { name: "pad_cols", shapes: &[&[3, 2]], domain: Domain::Any, build: |v| v[0].pad_cols(1, 5)?.exp() },
        Case { name: "gather", shapes: &[&[3, 4]], domain: Domain::Any, build: |v| v[0].gather(&[2, 0, 3])?.square() },
        Case { name: "im2col", shapes: &[&[2, 2, 6]], domain: Domain::Any, build: |v| v[0].im2col(CONV)?.square() },
        Case { name: "col2im", shapes: &[&[12, 6]], domain: Domain::Any, build: |v| v[0].col2im(CONV)?.square() },
        Case { name: "segment_pool", shapes: &[&[10, 3]], domain: Domain::Any, build: |v| v[0].segment_pool(POOL)?.square() },
        Case { name: "segment_unpool", shapes: &[&[2, 6]], domain: Domain::Any, build: |v| v[0].segment_unpool(POOL)?.square() },
        Case { name: "softmax", shapes: &[&[3, 5]], domain: Domain::Any, build: |v| v[0].softmax_rows() },
        Case { name: "log_softmax", shapes: &[&[3, 4]], domain: Domain::Any, build: |v| v[0].log_softmax_rows() },
        Case {
            name: "conv1d",
            shapes: &[&[2, 2, 6], &[3, 2, 3], &[3]],
            domain: Domain::Any,
            build: |v| v[0].conv1d(v[1], Some(v[2]), CONV),
        },
        Case {
            name: "batch_norm",
            shapes: &[&[6, 3], &[3], &[3]],
            domain: Domain::Any,
            build: |v| Ok(v[0].batch_norm(v[1], v[2], 1e-5)?.0.square()?),
        },
    ]
}

/// Scalar objective `sum(build(inputs) ⊙ proj)`.
fn objective<'t>(build: Build, inputs: &[Var<'t>], proj: &Tensor) -> Result<Var<'t>> {
    let out = build(inputs)?;
    let p = out.trace().constant(proj.clone());
    out.mul(p)?.sum()
}

fn value_at(case: &Case, inputs: &[Tensor], proj: &Tensor) -> f64 {
    let t = Trace::new();
    let vars: Vec<_> = inputs.iter().map(|x| t.constant(x.clone())).collect();
    objective(case.build, &vars, proj).unwrap().value().item()
}

fn grad_at(case: &Case, inputs: &[Tensor], proj: &Tensor, which: usize) -> Tensor {
    let t = Trace::new();
    let vars: Vec<_> = inputs.iter().map(|x| t.param(x.clone())).collect();
    let s = objective(case.build, &vars, proj).unwrap();
    t.backward(s, &[vars[which]]).unwrap().get(&vars[which]).unwrap().clone()
}

#[test]
fn every_primitive_matches_central_differences() {
    let mut rng = rng(0xC0FFEE);
    for case in cases() {
        for trial in 0..TRIALS {
            let inputs: Vec<Tensor> = case.shapes.iter().map(|s| sample(&mut rng, s, case.domain)).collect();
            let out_shape = {
                let t = Trace::new();
                let vars: Vec<_> = inputs.iter().map(|x| t.constant(x.clone())).collect();
                (case.build)(&vars).unwrap().shape()
            };
            let proj = random_tensor(&mut rng, &out_shape, -1.0, 1.0);
            for which in 0..inputs.len() {
                let auto = grad_at(&case, &inputs, &proj, which);
                let numeric = central_diff(&inputs[which], H, |x| {
                    let mut ins = inputs.clone();
                    ins[which] = x.clone();
                    value_at(&case, &ins, &proj)
                });
                let err = max_rel_err(auto.data(), &numeric, FLOOR);
                assert!(err <= TOL, "{} trial {trial} input {which}: rel err {err:.3e}", case.name);
            }
        }
    }
}

#[test]
fn every_primitive_hessian_vector_product_matches_differenced_gradients() {
    let mut rng = rng(0xBEEF);
    for case in cases() {
        for trial in 0..TRIALS {
            let inputs: Vec<Tensor> = case.shapes.iter().map(|s| sample(&mut rng, s, case.domain)).collect();
            let out_shape = {
                let t = Trace::new();
                let vars: Vec<_> = inputs.iter().map(|x| t.constant(x.clone())).collect();
                (case.build)(&vars).unwrap().shape()
            };
            let proj = random_tensor(&mut rng, &out_shape, -1.0, 1.0);
            for which in 0..inputs.len() {
                let dir = random_tensor(&mut rng, inputs[which].shape(), -1.0, 1.0);

                let t = Trace::new();
                let vars: Vec<_> = inputs.iter().map(|x| t.param(x.clone())).collect();
                let s = objective(case.build, &vars, &proj).unwrap();
                let g = t.grad_with_graph(s, &[vars[which]]).unwrap()[0];
                let gv = g.mul(t.constant(dir.clone())).unwrap().sum().unwrap();
                let hv = t.backward(gv, &[vars[which]]).unwrap().get(&vars[which]).unwrap().clone();

                let shifted = |sign: f64| {
                    let mut ins = inputs.clone();
                    ins[which] = inputs[which].zip_map(&dir, "shift", |a, d| a + sign * H * d).unwrap();
                    grad_at(&case, &ins, &proj, which)
                };
                let (gp, gm) = (shifted(1.0), shifted(-1.0));
                let numeric: Vec<f64> = gp.data().iter().zip(gm.data()).map(|(p, m)| (p - m) / (2.0 * H)).collect();
                let err = max_rel_err(hv.data(), &numeric, FLOOR);
                assert!(err <= TOL, "{} trial {trial} input {which}: HVP rel err {err:.3e}", case.name);
            }
        }
    }
}
