//! Weighted multi-task loss: gait-phase cross-entropy, incline RMSE and
//! locomotion-mode cross-entropy.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tensor, Var};
use crate::dataset::LabeledBatch;
use crate::domain::LabelSet;
use crate::error::{Error, Result};
use crate::meta::Learner;
use crate::network::{forward_traced, BatchStats, ForwardMode, HeadVars, ModelConfig};
use crate::params::{BoundParams, ParameterSet};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub w_gait: f64,
    pub w_inc: f64,
    pub w_loc: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_gait: 0.6,
            w_inc: 0.2,
            w_loc: 0.2,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.w_gait, self.w_inc, self.w_loc];
        if all.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::invalid(format!("loss weights must be finite and nonnegative, got {all:?}")));
        }
        Ok(())
    }
}

/// Scalar values of each loss term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Cross-entropy, nats.
    pub gait: f64,
    /// RMSE, degrees.
    pub inc: f64,
    /// Cross-entropy, nats.
    pub loc: f64,
    pub total: f64,
}

/// Traced loss terms; `total` is differentiable with respect to the parameters.
#[derive(Clone, Copy)]
pub struct LossTerms<'t> {
    pub gait: Var<'t>,
    pub inc: Var<'t>,
    pub loc: Var<'t>,
    pub total: Var<'t>,
}

impl LossTerms<'_> {
    pub fn breakdown(&self) -> LossBreakdown {
        LossBreakdown {
            gait: self.gait.value().item(),
            inc: self.inc.value().item(),
            loc: self.loc.value().item(),
            total: self.total.value().item(),
        }
    }
}

/// Per-sample targets in the index form the loss functions consume.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Targets {
    pub phase: Vec<usize>,
    pub mode: Vec<usize>,
    pub incline: Vec<f64>,
}

impl Targets {
    pub fn from_labels<'a>(labels: impl IntoIterator<Item = &'a LabelSet>) -> Self {
        let mut t = Targets::default();
        for l in labels {
            t.phase.push(l.phase.index());
            t.mode.push(l.mode.index());
            t.incline.push(l.incline);
        }
        t
    }

    pub fn len(&self) -> usize {
        self.phase.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phase.is_empty()
    }
}

/// Mean negative log-likelihood of `labels` under row-wise softmax of `logits: [B, C]`.
pub fn cross_entropy<'t>(logits: Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::shape("cross_entropy", &shape, &[labels.len()]));
    }
    let (rows, cols) = (shape[0], shape[1]);
    if rows == 0 {
        return Err(Error::invalid("cross_entropy of an empty batch"));
    }
    let mut onehot = vec![0.0; rows * cols];
    for (i, &y) in labels.iter().enumerate() {
        if y >= cols {
            return Err(Error::invalid(format!("label {y} out of range for {cols} classes")));
        }
        onehot[i * cols + y] = 1.0;
    }
    let mask = logits.trace().constant(Tensor::new(&shape, onehot)?);
    logits.log_softmax_rows()?.mul(mask)?.sum()?.scale(-1.0 / rows as f64)
}

/// `sqrt(mean((pred - target)^2))` over all elements of `pred` (`[B]` or `[B, 1]`).
/// The gradient is defined as zero where the error is exactly zero.
pub fn rmse<'t>(pred: Var<'t>, target: &[f64]) -> Result<Var<'t>> {
    let shape = pred.shape();
    let n: usize = shape.iter().product();
    if n != target.len() {
        return Err(Error::shape("rmse", &shape, &[target.len()]));
    }
    if n == 0 {
        return Err(Error::invalid("rmse of an empty batch"));
    }
    let t = pred.trace().constant(Tensor::new(&shape, target.to_vec())?);
    pred.sub(t)?.square()?.mean()?.sqrt()
}

/// `w_gait * gait + w_inc * inc + w_loc * loc`.
pub fn compose<'t>(w: &LossWeights, gait: Var<'t>, inc: Var<'t>, loc: Var<'t>) -> Result<LossTerms<'t>> {
    let total = gait.scale(w.w_gait)?.add(inc.scale(w.w_inc)?)?.add(loc.scale(w.w_loc)?)?;
    Ok(LossTerms { gait, inc, loc, total })
}

pub fn weighted_loss<'t>(output: &HeadVars<'t>, targets: &Targets, w: &LossWeights) -> Result<LossTerms<'t>> {
    if targets.is_empty() {
        return Err(Error::invalid("loss on an empty batch"));
    }
    let gait = cross_entropy(output.gait, &targets.phase)?;
    let inc = rmse(output.incline, &targets.incline)?;
    let loc = cross_entropy(output.loc, &targets.mode)?;
    compose(w, gait, inc, loc)
}

/// The network under the weighted loss, as a [`Learner`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GaitLearner {
    pub model: ModelConfig,
    pub weights: LossWeights,
}

impl GaitLearner {
    pub fn new(model: ModelConfig, weights: LossWeights) -> Result<Self> {
        model.validate()?;
        weights.validate()?;
        Ok(Self { model, weights })
    }

    pub fn terms<'t>(
        &self,
        params: &BoundParams<'t>,
        state: &ParameterSet,
        batch: &LabeledBatch,
        mode: ForwardMode,
    ) -> Result<(LossTerms<'t>, Option<BatchStats>)> {
        let trace = params
            .vars()
            .first()
            .ok_or_else(|| Error::invalid("empty parameter set"))?
            .trace();
        let x = trace.constant(batch.x.clone());
        let (heads, stats) = forward_traced(&self.model, params, state, x, mode)?;
        Ok((weighted_loss(&heads, &batch.targets, &self.weights)?, stats))
    }
}

impl Learner for GaitLearner {
    type Batch = LabeledBatch;

    fn loss<'t>(
        &self,
        params: &BoundParams<'t>,
        state: &ParameterSet,
        batch: &LabeledBatch,
        mode: ForwardMode,
    ) -> Result<(Var<'t>, Option<BatchStats>)> {
        let (terms, stats) = self.terms(params, state, batch, mode)?;
        Ok((terms.total, stats))
    }

    fn stats_momentum(&self) -> f64 {
        self.model.bn_momentum
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Trace;

    #[test]
    fn uniform_logits_give_log_c() {
        let t = Trace::new();
        let l = t.constant(Tensor::zeros(&[3, 4]));
        let ce = cross_entropy(l, &[0, 1, 3]).unwrap().value().item();
        assert!((ce - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn confident_correct_logits_give_near_zero() {
        let t = Trace::new();
        let l = t.constant(Tensor::new(&[1, 4], vec![0.0, 0.0, 800.0, 0.0]).unwrap());
        assert_eq!(cross_entropy(l, &[2]).unwrap().value().item(), 0.0);
    }

    #[test]
    fn label_out_of_range_is_rejected() {
        let t = Trace::new();
        let l = t.constant(Tensor::zeros(&[1, 4]));
        assert!(cross_entropy(l, &[4]).is_err());
    }

    #[test]
    fn rmse_arithmetic() {
        let t = Trace::new();
        let p = t.constant(Tensor::vector(&[0.0, 0.0]));
        assert!((rmse(p, &[3.0, 4.0]).unwrap().value().item() - 12.5f64.sqrt()).abs() < 1e-15);
        let q = t.constant(Tensor::vector(&[1.5, -2.0]));
        assert_eq!(rmse(q, &[1.5, -2.0]).unwrap().value().item(), 0.0);
        let e = t.constant(Tensor::vector(&[]));
        assert!(rmse(e, &[]).is_err());
    }

    #[test]
    fn rmse_gradient_at_zero_error_is_zero() {
        let t = Trace::new();
        let p = t.param(Tensor::vector(&[2.0, 3.0]));
        let l = rmse(p, &[2.0, 3.0]).unwrap();
        let g = t.backward(l, &[p]).unwrap();
        assert_eq!(g.get(&p).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn composition_with_default_weights() {
        let t = Trace::new();
        let terms = compose(
            &LossWeights::default(),
            t.constant(Tensor::scalar(1.0)),
            t.constant(Tensor::scalar(2.0)),
            t.constant(Tensor::scalar(3.0)),
        )
        .unwrap();
        assert!((terms.total.value().item() - 1.6).abs() <= 1e-12);
    }

    #[test]
    fn negative_weights_are_rejected() {
        let w = LossWeights { w_inc: -0.1, ..LossWeights::default() };
        assert!(w.validate().is_err());
    }
}
