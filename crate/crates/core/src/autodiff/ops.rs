use super::kernels::ConvGeom;
use super::tensor::Tensor;
use super::trace::{Trace, Var};
use crate::error::{Error, Result};

/// Operator kinds available to [`eval_primitive`].
///
/// Composite operators (convolution, batch normalization, softmax, mean) are
/// lowered onto the elementary primitives of the trace, so they inherit exact
/// first and second derivatives.
#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Exp,
    Log,
    Sqrt,
    Square,
    Relu,
    /// `[m,k] · [k,n]`.
    MatMul,
    /// Inputs `x: [B,C,L]`, `weight: [O,C,K]`, optional `bias: [O]`;
    /// output `[B*L_out, O]` (time-major rows).
    Conv1d { padding: usize },
    /// Inputs `x: [N,F]`, `gamma: [F]`, `beta: [F]`; batch statistics.
    BatchNorm { eps: f64 },
    /// Concatenation of two `[m, *]` matrices along the feature axis.
    Concat,
    /// Row-wise softmax of a `[m,n]` matrix.
    Softmax,
    Mean,
    Sum,
}

impl Op {
    fn arity(&self) -> (usize, usize) {
        match self {
            Op::Add | Op::Sub | Op::Mul | Op::Div | Op::MatMul | Op::Concat => (2, 2),
            Op::Conv1d { .. } => (2, 3),
            Op::BatchNorm { .. } => (3, 3),
            _ => (1, 1),
        }
    }

    pub(crate) fn apply<'t>(&self, inputs: &[Var<'t>]) -> Result<Var<'t>> {
        let (lo, hi) = self.arity();
        if inputs.len() < lo || inputs.len() > hi {
            return Err(Error::invalid(format!(
                "{self:?} takes {lo}..={hi} inputs, got {}",
                inputs.len()
            )));
        }
        let x = inputs[0];
        match self {
            Op::Add => x.add(inputs[1]),
            Op::Sub => x.sub(inputs[1]),
            Op::Mul => x.mul(inputs[1]),
            Op::Div => x.div(inputs[1]),
            Op::Neg => x.neg(),
            Op::Exp => x.exp(),
            Op::Log => x.log(),
            Op::Sqrt => x.sqrt(),
            Op::Square => x.square(),
            Op::Relu => x.relu(),
            Op::MatMul => x.matmul(inputs[1]),
            Op::Conv1d { padding } => {
                let xs = x.shape();
                let ws = inputs[1].shape();
                if xs.len() != 3 || ws.len() != 3 {
                    return Err(Error::shape("conv1d", &xs, &ws));
                }
                let geom = ConvGeom::symmetric(xs[0], xs[1], xs[2], ws[2], *padding)
                    .ok_or_else(|| Error::shape("conv1d", &xs, &ws))?;
                x.conv1d(inputs[1], inputs.get(2).copied(), geom)
            }
            Op::BatchNorm { eps } => Ok(x.batch_norm(inputs[1], inputs[2], *eps)?.0),
            Op::Concat => x.concat_cols(inputs[1]),
            Op::Softmax => x.softmax_rows(),
            Op::Mean => x.mean(),
            Op::Sum => x.sum(),
        }
    }
}

/// Evaluates one operator on concrete tensors, outside of any caller trace.
pub fn eval_primitive(op: &Op, inputs: &[Tensor]) -> Result<Tensor> {
    let trace = Trace::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| trace.constant(t.clone())).collect();
    Ok(op.apply(&vars)?.value())
}

impl<'t> Var<'t> {
    /// Applies an [`Op`] with `self` as the first input.
    pub fn apply(self, op: &Op, rest: &[Var<'t>]) -> Result<Var<'t>> {
        let mut inputs = Vec::with_capacity(rest.len() + 1);
        inputs.push(self);
        inputs.extend_from_slice(rest);
        op.apply(&inputs)
    }
}
