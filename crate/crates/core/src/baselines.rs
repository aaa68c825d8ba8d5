//! Comparison regimes: random initialization (RI), direct evaluation of a
//! pooled pre-trained model (DE), transfer learning with a frozen feature
//! extractor (TL) and standard fine-tuning of every layer (SFT), plus the
//! Adam optimizer used for pre-training.

use std::fmt;
use std::fs::File;
use std::io::Write;
use std::path::PathBuf;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tensor, Trace};
use crate::error::{Error, Result};
use crate::meta::{fine_tune, Learner};
use crate::network::{layer_of, ForwardMode};
use crate::params::ParameterSet;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BaselineKind {
    RI,
    DE,
    TL,
    SFT,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 4] = [BaselineKind::RI, BaselineKind::DE, BaselineKind::TL, BaselineKind::SFT];

    /// Fine-tuning SGD learning rate.
    pub fn default_learning_rate(self) -> f64 {
        match self {
            BaselineKind::RI => 1.5e-4,
            BaselineKind::DE => 0.0,
            BaselineKind::TL => 8e-4,
            BaselineKind::SFT => 1e-6,
        }
    }

    pub fn needs_pretraining(self) -> bool {
        self != BaselineKind::RI
    }

    pub fn freeze_mask(self) -> FreezeMask {
        match self {
            BaselineKind::RI | BaselineKind::SFT => FreezeMask::none(),
            BaselineKind::DE => FreezeMask::all(),
            BaselineKind::TL => FreezeMask::layers(&["conv", "bn"]),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            BaselineKind::RI => "RI",
            BaselineKind::DE => "DE",
            BaselineKind::TL => "TL",
            BaselineKind::SFT => "SFT",
        }
    }
}

impl fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BaselineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BaselineKind::ALL
            .into_iter()
            .find(|k| k.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::invalid(format!("unknown baseline {s:?}")))
    }
}

/// Which layers stay fixed during fine-tuning.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum FreezeMask {
    Layers(Vec<String>),
    All,
}

impl FreezeMask {
    pub fn none() -> Self {
        FreezeMask::Layers(Vec::new())
    }

    pub fn all() -> Self {
        FreezeMask::All
    }

    pub fn layers(names: &[&str]) -> Self {
        FreezeMask::Layers(names.iter().map(|s| s.to_string()).collect())
    }

    pub fn is_trainable(&self, param: &str) -> bool {
        match self {
            FreezeMask::All => false,
            FreezeMask::Layers(frozen) => !frozen.iter().any(|l| l == layer_of(param)),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &ParameterSet) -> Self {
        Self::with_betas(params, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(params: &ParameterSet, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Tensor> = params.params().iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            beta1,
            beta2,
            eps,
        }
    }
}

/// Bias-corrected Adam update.
pub fn adam_step(params: &ParameterSet, grads: &[Tensor], state: &AdamState, lr: f64) -> Result<(ParameterSet, AdamState)> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::invalid(format!(
            "{} gradients and {} moments for {} parameters",
            grads.len(),
            state.m.len(),
            params.len()
        )));
    }
    let step = state.step + 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(step as i32);
    let c2 = 1.0 - b2.powi(step as i32);
    let mut out = params.clone();
    let mut m_next = Vec::with_capacity(grads.len());
    let mut v_next = Vec::with_capacity(grads.len());
    for (i, ((name, p), g)) in params.params().iter().zip(grads).enumerate() {
        let m = state.m[i].zip_map(g, "adam_step", |m, g| b1 * m + (1.0 - b1) * g)?;
        let v = state.v[i].zip_map(g, "adam_step", |v, g| b2 * v + (1.0 - b2) * g * g)?;
        let update = m.zip_map(&v, "adam_step", |m, v| {
            let m_hat = if c1 > 0.0 { m / c1 } else { m };
            let v_hat = if c2 > 0.0 { v / c2 } else { v };
            lr * m_hat / (v_hat.sqrt() + state.eps)
        })?;
        out.set(name, p.zip_map(&update, "adam_step", |p, u| p - u)?)?;
        m_next.push(m);
        v_next.push(v);
    }
    Ok((
        out,
        AdamState {
            m: m_next,
            v: v_next,
            step,
            ..*state
        },
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 200,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainLog {
    pub epoch: usize,
    pub loss: f64,
    pub wall_s: f64,
}

/// Supervised training on a pooled set of examples with Adam. `batch(ids)`
/// assembles the examples with the given indices. The log records the mean
/// minibatch loss of every epoch.
pub fn pretrain<L: Learner>(
    learner: &L,
    init: &ParameterSet,
    n_examples: usize,
    batch: impl Fn(&[usize]) -> Result<L::Batch>,
    cfg: &PretrainConfig,
    log_path: Option<&PathBuf>,
) -> Result<(ParameterSet, Vec<PretrainLog>)> {
    if n_examples == 0 {
        return Err(Error::invalid("pre-training on an empty dataset"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::invalid("batch size must be at least 1"));
    }
    let mut log_file = match log_path {
        Some(path) => {
            let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
            writeln!(f, "epoch,loss,wall_s").map_err(|e| Error::io(path, e))?;
            Some((f, path))
        }
        None => None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n_examples).collect();
    let mut params = init.clone();
    let mut state = AdamState::new(&params);
    let mut logs = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let b = batch(chunk)?;
            let trace = Trace::new();
            let bound = params.bind(&trace);
            let (loss, stats) = learner.loss(&bound, &params, &b, ForwardMode::Train)?;
            let value = loss.value().item();
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    epoch,
                    task: format!("batch {batches}"),
                    value,
                });
            }
            let g = trace.backward(loss, bound.vars())?;
            let grads: Vec<Tensor> = bound.vars().iter().map(|v| g.get(v).unwrap().clone()).collect();
            let (next, next_state) = adam_step(&params, &grads, &state, cfg.learning_rate)?;
            params = next;
            state = next_state;
            if let Some(stats) = stats {
                stats.update_running(&mut params, learner.stats_momentum())?;
            }
            total += value;
            batches += 1;
        }
        let log = PretrainLog {
            epoch,
            loss: total / batches as f64,
            wall_s: start.elapsed().as_secs_f64(),
        };
        if let Some((f, path)) = log_file.as_mut() {
            writeln!(f, "{},{},{:.6}", log.epoch, log.loss, log.wall_s).map_err(|e| Error::io(path.to_path_buf(), e))?;
        }
        logs.push(log);
    }
    Ok((params, logs))
}

/// Fine-tunes `start` per `kind` and evaluates the result. RI expects a fresh
/// initialization as `start`; the others expect pre-trained parameters.
pub fn run_baseline<L: Learner, M>(
    kind: BaselineKind,
    learner: &L,
    start: &ParameterSet,
    calibration: &L::Batch,
    learning_rate: f64,
    steps: usize,
    evaluate: impl FnOnce(&ParameterSet) -> Result<M>,
) -> Result<(ParameterSet, M)> {
    if kind == BaselineKind::DE && steps > 0 {
        return Err(Error::invalid("direct evaluation takes no fine-tuning steps"));
    }
    let mask = kind.freeze_mask();
    let adapted = fine_tune(learner, start, calibration, learning_rate, steps, |n| mask.is_trainable(n))?;
    let metrics = evaluate(&adapted)?;
    Ok((adapted, metrics))
}
