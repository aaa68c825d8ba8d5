//! Model-agnostic meta-learning: per-task gradient adaptation, the
//! second-order meta-update over the summed query losses, and few-shot
//! fine-tuning of a learned initialization.

use std::fs::File;
use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tensor, Trace, Var};
use crate::error::{Error, Result};
use crate::network::{BatchStats, ForwardMode};
use crate::params::{BoundParams, ParameterSet};

/// A differentiable loss over a parameter set.
pub trait Learner: Sync {
    type Batch: Sync;

    /// Loss on `batch` with `params` bound on a trace. `state` carries
    /// non-trainable buffers. Train-mode calls may report batch statistics.
    fn loss<'t>(
        &self,
        params: &BoundParams<'t>,
        state: &ParameterSet,
        batch: &Self::Batch,
        mode: ForwardMode,
    ) -> Result<(Var<'t>, Option<BatchStats>)>;

    /// Momentum applied when folding batch statistics into running buffers.
    fn stats_momentum(&self) -> f64 {
        0.1
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetaConfig {
    /// Inner (task adaptation) step size.
    pub alpha: f64,
    /// Outer (meta-update) step size.
    pub beta: f64,
    pub inner_steps: usize,
    pub epochs: usize,
    /// Support windows per episode.
    pub n_support: usize,
    /// Query windows per episode.
    pub n_query: usize,
    /// Treat inner gradients as constants in the meta-update.
    pub first_order: bool,
    pub seed: u64,
    /// Write a checkpoint every this many epochs; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            alpha: 3e-4,
            beta: 1e-3,
            inner_steps: 1,
            epochs: 200,
            n_support: 80,
            n_query: 120,
            first_order: false,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) || !(self.beta > 0.0) {
            return Err(Error::invalid("alpha and beta must be positive"));
        }
        if self.inner_steps == 0 {
            return Err(Error::invalid("inner_steps must be at least 1"));
        }
        if self.n_support == 0 || self.n_query == 0 {
            return Err(Error::invalid("episodes need nonempty support and query sets"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FineTuneConfig {
    pub learning_rate: f64,
    pub steps: usize,
    /// Seconds of calibration recording per walking condition.
    pub calibration_duration: f64,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            steps: 4,
            calibration_duration: 3.5,
        }
    }
}

/// Support and query batches for one task, with the identities of the
/// windows they were drawn from.
#[derive(Clone, Debug)]
pub struct Episode<B, Id = ()> {
    pub support: B,
    pub query: B,
    pub support_ids: Vec<Id>,
    pub query_ids: Vec<Id>,
}

/// `p - lr * g` for every trainable tensor; buffers are carried over.
pub fn sgd_step(params: &ParameterSet, grads: &[Tensor], lr: f64) -> Result<ParameterSet> {
    if grads.len() != params.len() {
        return Err(Error::invalid(format!(
            "{} gradients for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    let mut out = params.clone();
    for ((name, p), g) in params.params().iter().zip(grads) {
        out.set(name, p.zip_map(g, "sgd_step", |p, g| p - lr * g)?)?;
    }
    Ok(out)
}

fn check_finite(loss: &Var<'_>, epoch: usize, task: usize) -> Result<f64> {
    let value = loss.value().item();
    if !value.is_finite() {
        return Err(Error::NonFinite {
            epoch,
            task: format!("#{task}"),
            value,
        });
    }
    Ok(value)
}

/// Result of adapting on a trace.
pub struct Adapted<'t> {
    pub params: BoundParams<'t>,
    /// Support loss at the starting parameters.
    pub support_loss: f64,
    /// Batch statistics of the first support forward.
    pub stats: Option<BatchStats>,
}

/// `steps` gradient-descent steps on the support loss, recorded on the trace.
/// With `first_order`, the inner gradients enter as constants.
#[allow(clippy::too_many_arguments)]
pub fn inner_adapt_traced<'t, L: Learner>(
    learner: &L,
    theta: &BoundParams<'t>,
    state: &ParameterSet,
    support: &L::Batch,
    alpha: f64,
    steps: usize,
    first_order: bool,
    (epoch, task): (usize, usize),
) -> Result<Adapted<'t>> {
    let trace = theta
        .vars()
        .first()
        .ok_or_else(|| Error::invalid("no parameters to adapt"))?
        .trace();
    let mut current = theta.clone();
    let mut support_loss = f64::NAN;
    let mut first_stats = None;
    for step in 0..steps {
        let (loss, stats) = learner.loss(&current, state, support, ForwardMode::Train)?;
        let value = check_finite(&loss, epoch, task)?;
        if step == 0 {
            support_loss = value;
            first_stats = stats;
        }
        let grads: Vec<Var<'t>> = if first_order {
            let g = trace.backward(loss, current.vars())?;
            current.vars().iter().map(|v| trace.constant(g.get(v).unwrap().clone())).collect()
        } else {
            trace.grad_with_graph(loss, current.vars())?
        };
        let next = current
            .vars()
            .iter()
            .zip(&grads)
            .map(|(p, g)| p.sub(g.scale(alpha)?))
            .collect::<Result<Vec<_>>>()?;
        current = current.with_vars(next);
    }
    Ok(Adapted {
        params: current,
        support_loss,
        stats: first_stats,
    })
}

/// Gradient steps on `support` starting from a copy of `theta`, updating
/// only the tensors for which `trainable` holds. Buffers are not touched.
pub fn fine_tune<L: Learner>(
    learner: &L,
    theta: &ParameterSet,
    support: &L::Batch,
    lr: f64,
    steps: usize,
    trainable: impl Fn(&str) -> bool,
) -> Result<ParameterSet> {
    let mut params = theta.clone();
    for step in 0..steps {
        let trace = Trace::new();
        let bound = params.bind(&trace);
        let (loss, _) = learner.loss(&bound, &params, support, ForwardMode::Train)?;
        check_finite(&loss, 0, step)?;
        let g = trace.backward(loss, bound.vars())?;
        let grads: Vec<Tensor> = params
            .params()
            .iter()
            .zip(bound.vars())
            .map(|((name, t), v)| {
                if trainable(name) {
                    g.get(v).unwrap().clone()
                } else {
                    Tensor::zeros(t.shape())
                }
            })
            .collect();
        let mut next = sgd_step(&params, &grads, lr)?;
        for (name, t) in params.params() {
            if !trainable(name) {
                next.set(name, t.clone())?;
            }
        }
        params = next;
    }
    Ok(params)
}

/// `steps` full-batch gradient steps on the support loss; `theta` is not mutated.
pub fn inner_adapt<L: Learner>(
    learner: &L,
    theta: &ParameterSet,
    support: &L::Batch,
    alpha: f64,
    steps: usize,
) -> Result<ParameterSet> {
    if !(alpha >= 0.0) {
        return Err(Error::invalid("alpha must be nonnegative"));
    }
    fine_tune(learner, theta, support, alpha, steps, |_| true)
}

/// Per-task contribution to a meta-update.
pub struct TaskGradient {
    pub grads: Vec<Tensor>,
    pub support_loss: f64,
    pub query_loss: f64,
    pub stats: Option<BatchStats>,
}

/// Gradient of the post-adaptation query loss of one episode with respect to `theta`.
pub fn task_meta_gradient<L: Learner, Id>(
    learner: &L,
    theta: &ParameterSet,
    episode: &Episode<L::Batch, Id>,
    cfg: &MetaConfig,
    (epoch, task): (usize, usize),
) -> Result<TaskGradient> {
    let trace = Trace::new();
    let bound = theta.bind(&trace);
    let adapted = inner_adapt_traced(
        learner,
        &bound,
        theta,
        &episode.support,
        cfg.alpha,
        cfg.inner_steps,
        cfg.first_order,
        (epoch, task),
    )?;
    let (query, _) = learner.loss(&adapted.params, theta, &episode.query, ForwardMode::Train)?;
    let query_loss = check_finite(&query, epoch, task)?;
    let g = trace.backward(query, bound.vars())?;
    Ok(TaskGradient {
        grads: bound.vars().iter().map(|v| g.get(v).unwrap().clone()).collect(),
        support_loss: adapted.support_loss,
        query_loss,
        stats: adapted.stats,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub support_loss: f64,
    pub query_loss: f64,
    pub wall_s: f64,
}

/// Gradient of the summed query losses over `episodes`. Tasks are processed
/// independently and summed in list order, so the result does not depend on
/// the thread count.
pub fn meta_gradient<L: Learner, Id: Sync>(
    learner: &L,
    theta: &ParameterSet,
    episodes: &[Episode<L::Batch, Id>],
    cfg: &MetaConfig,
    epoch: usize,
) -> Result<(Vec<Tensor>, Vec<TaskGradient>)> {
    if episodes.is_empty() {
        return Err(Error::invalid("meta-update needs at least one task"));
    }
    let per_task = episodes
        .par_iter()
        .enumerate()
        .map(|(i, ep)| task_meta_gradient(learner, theta, ep, cfg, (epoch, i)))
        .collect::<Result<Vec<_>>>()?;
    let mut total: Vec<Vec<f64>> = per_task[0].grads.iter().map(|g| g.to_vec()).collect();
    for t in &per_task[1..] {
        for (acc, g) in total.iter_mut().zip(&t.grads) {
            for (a, v) in acc.iter_mut().zip(g.data()) {
                *a += v;
            }
        }
    }
    let grads = total
        .into_iter()
        .zip(theta.params())
        .map(|(v, (_, p))| Tensor::new(p.shape(), v))
        .collect::<Result<Vec<_>>>()?;
    Ok((grads, per_task))
}

/// One meta-update: adapt on every task's support set, sum the query losses
/// of the adapted parameters, and step `theta` by `beta` along the gradient
/// of that sum. The support-batch statistics of all tasks are pooled into
/// one update of the running statistics.
pub fn meta_epoch<L: Learner, Id: Sync>(
    learner: &L,
    theta: &ParameterSet,
    episodes: &[Episode<L::Batch, Id>],
    cfg: &MetaConfig,
    epoch: usize,
) -> Result<(ParameterSet, EpochLog)> {
    let start = Instant::now();
    let (grads, per_task) = meta_gradient(learner, theta, episodes, cfg, epoch)?;
    let mut next = sgd_step(theta, &grads, cfg.beta)?;
    let stats: Vec<BatchStats> = per_task.iter().filter_map(|t| t.stats.clone()).collect();
    if !stats.is_empty() {
        BatchStats::pool(&stats)?.update_running(&mut next, learner.stats_momentum())?;
    }
    let n = per_task.len() as f64;
    let log = EpochLog {
        epoch,
        support_loss: per_task.iter().map(|t| t.support_loss).sum::<f64>() / n,
        query_loss: per_task.iter().map(|t| t.query_loss).sum::<f64>() / n,
        wall_s: start.elapsed().as_secs_f64(),
    };
    Ok((next, log))
}

/// Where [`meta_train`] writes its log and checkpoints.
#[derive(Clone, Debug, Default)]
pub struct TrainOutputs {
    /// CSV with columns `epoch,support_loss,query_loss,wall_s`.
    pub log: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
}

/// Runs `cfg.epochs` meta-updates from `init`. `sample(epoch)` supplies that
/// epoch's episodes, one per training task.
pub fn meta_train<L: Learner, Id: Sync>(
    learner: &L,
    init: &ParameterSet,
    mut sample: impl FnMut(usize) -> Result<Vec<Episode<L::Batch, Id>>>,
    cfg: &MetaConfig,
    outputs: &TrainOutputs,
) -> Result<(ParameterSet, Vec<EpochLog>)> {
    cfg.validate()?;
    let mut log_file = match &outputs.log {
        Some(path) => {
            let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
            writeln!(f, "epoch,support_loss,query_loss,wall_s").map_err(|e| Error::io(path, e))?;
            Some((f, path))
        }
        None => None,
    };
    let mut theta = init.clone();
    let mut logs = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let episodes = sample(epoch)?;
        let (next, log) = meta_epoch(learner, &theta, &episodes, cfg, epoch)?;
        theta = next;
        if let Some((f, path)) = log_file.as_mut() {
            writeln!(f, "{},{},{},{:.6}", log.epoch, log.support_loss, log.query_loss, log.wall_s)
                .map_err(|e| Error::io(path.to_path_buf(), e))?;
        }
        if let Some(dir) = &outputs.checkpoint_dir {
            if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 {
                theta.save(&dir.join(format!("epoch_{epoch:04}.mgait")))?;
            }
        }
        logs.push(log);
    }
    Ok((theta, logs))
}

/// Few-shot adaptation on a calibration batch with plain SGD, followed by
/// `evaluate` on the adapted parameters.
pub fn meta_test<L: Learner, M>(
    learner: &L,
    theta: &ParameterSet,
    calibration: &L::Batch,
    ft: &FineTuneConfig,
    evaluate: impl FnOnce(&ParameterSet) -> Result<M>,
) -> Result<(ParameterSet, M)> {
    let adapted = fine_tune(learner, theta, calibration, ft.learning_rate, ft.steps, |_| true)?;
    let metrics = evaluate(&adapted)?;
    Ok((adapted, metrics))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// `(theta - a)^2` for a scalar parameter.
    struct Quadratic;

    impl Learner for Quadratic {
        type Batch = f64;

        fn loss<'t>(
            &self,
            params: &BoundParams<'t>,
            _: &ParameterSet,
            a: &f64,
            _: ForwardMode,
        ) -> Result<(Var<'t>, Option<BatchStats>)> {
            let th = params.get("theta")?;
            Ok((th.add_scalar(-a)?.square()?, None))
        }
    }

    fn scalar_set(v: f64) -> ParameterSet {
        let mut p = ParameterSet::new();
        p.push_param("theta", Tensor::scalar(v));
        p
    }

    fn cfg(alpha: f64) -> MetaConfig {
        MetaConfig {
            alpha,
            beta: 1.0,
            ..MetaConfig::default()
        }
    }

    #[test]
    fn inner_step_closed_form() {
        let out = inner_adapt(&Quadratic, &scalar_set(1.0), &0.0, 0.1, 1).unwrap();
        assert!((out.get("theta").unwrap().item() - 0.8).abs() < 1e-15);
        let out = inner_adapt(&Quadratic, &scalar_set(1.0), &0.0, 0.1, 2).unwrap();
        assert!((out.get("theta").unwrap().item() - 0.64).abs() < 1e-15);
        let out = inner_adapt(&Quadratic, &scalar_set(1.0), &0.0, 0.0, 1).unwrap();
        assert_eq!(out.get("theta").unwrap().item(), 1.0);
    }

    #[test]
    fn inner_adapt_leaves_input_untouched() {
        let theta = scalar_set(1.0);
        let before = theta.clone();
        let _ = inner_adapt(&Quadratic, &theta, &0.0, 0.3, 3).unwrap();
        assert!(theta.bit_eq(&before));
    }

    #[test]
    fn two_level_quadratic_meta_gradient() {
        let ep = Episode::<f64> { support: 1.0, query: 0.0, support_ids: vec![], query_ids: vec![] };
        let (g, _) = meta_gradient(&Quadratic, &scalar_set(0.0), &[ep.clone()], &cfg(0.25), 1).unwrap();
        assert!((g[0].item() - 0.5).abs() <= 1e-10);
        let (next, _) = meta_epoch(&Quadratic, &scalar_set(0.0), &[ep], &cfg(0.25), 1).unwrap();
        assert!((next.get("theta").unwrap().item() + 0.5).abs() <= 1e-10);
    }

    #[test]
    fn first_order_drops_the_curvature_term() {
        let ep = Episode::<f64> { support: 1.0, query: 0.0, support_ids: vec![], query_ids: vec![] };
        let c = MetaConfig { first_order: true, ..cfg(0.25) };
        let (g, _) = meta_gradient(&Quadratic, &scalar_set(0.0), &[ep], &c, 1).unwrap();
        // dQ/dθ' evaluated at θ' = 0.5
        assert!((g[0].item() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn sgd_step_arithmetic() {
        let p = scalar_set(1.0);
        let out = sgd_step(&p, &[Tensor::scalar(2.0)], 0.1).unwrap();
        assert!((out.get("theta").unwrap().item() - 0.8).abs() < 1e-15);
        assert!(sgd_step(&p, &[Tensor::scalar(2.0)], 0.0).unwrap().bit_eq(&p));
        assert!(sgd_step(&p, &[Tensor::vector(&[1.0, 2.0])], 0.1).is_err());
    }

    #[test]
    fn zero_epochs_return_init() {
        let init = scalar_set(0.3);
        let c = MetaConfig { epochs: 0, ..cfg(0.1) };
        let (out, logs) = meta_train(&Quadratic, &init, |_| Ok(Vec::<Episode<f64>>::new()), &c, &TrainOutputs::default()).unwrap();
        assert!(out.bit_eq(&init));
        assert!(logs.is_empty());
    }

    #[test]
    fn non_finite_loss_reports_epoch_and_task() {
        let ep = Episode::<f64> { support: f64::INFINITY, query: 0.0, support_ids: vec![], query_ids: vec![] };
        let err = meta_epoch(&Quadratic, &scalar_set(0.0), &[ep], &cfg(0.1), 7).err().unwrap();
        assert!(matches!(err, Error::NonFinite { epoch: 7, ref task, .. } if task == "#0"));
    }
}
