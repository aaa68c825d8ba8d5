//! Multi-head 1D-CNN: a shared convolutional feature extractor feeding a
//! locomotion-mode head whose softmax output is appended to the shared
//! features for the gait-phase and incline heads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ConvGeom, PoolGeom, Tensor, Trace, Var};
use crate::domain::{Mode, Phase};
use crate::error::{Error, Result};
use crate::params::{BoundParams, ParameterSet};

pub const IN_CHANNELS: usize = 4;
pub const N_MODES: usize = Mode::COUNT;
pub const N_PHASES: usize = Phase::COUNT;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Frames per input window.
    pub window_len: usize,
    pub conv_out_channels: usize,
    pub conv_kernel: usize,
    pub encoder_width: usize,
    pub head_width: usize,
    /// Number of equal time segments averaged after batch norm; 1 is a
    /// global average over the window.
    pub pool_segments: usize,
    pub bn_eps: f64,
    pub bn_momentum: f64,
    /// Subtract each window's per-channel mean before the convolution.
    pub center_windows: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            window_len: 100,
            conv_out_channels: 16,
            conv_kernel: 9,
            encoder_width: 64,
            head_width: 32,
            pool_segments: 10,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
            center_windows: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let widths = [
            self.conv_out_channels,
            self.conv_kernel,
            self.encoder_width,
            self.head_width,
            self.pool_segments,
        ];
        if widths.contains(&0) {
            return Err(Error::invalid("model widths must all be at least 1"));
        }
        if self.window_len < self.conv_kernel {
            return Err(Error::invalid(format!(
                "window length {} is shorter than the kernel {}",
                self.window_len, self.conv_kernel
            )));
        }
        if self.pool_segments > self.window_len {
            return Err(Error::invalid("more pooling segments than frames"));
        }
        if !(self.bn_eps > 0.0) || !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::invalid("bn_eps must be positive and bn_momentum in [0, 1]"));
        }
        Ok(())
    }

    fn pooled_width(&self) -> usize {
        self.pool_segments * self.conv_out_channels
    }

    /// `(name, shape, fan_in)` of every trainable tensor in canonical order;
    /// a fan-in of zero marks a bias or normalization parameter.
    pub fn param_layout(&self) -> Vec<(String, Vec<usize>, usize)> {
        let (o, k, e, h) = (
            self.conv_out_channels,
            self.conv_kernel,
            self.encoder_width,
            self.head_width,
        );
        let mut out = vec![
            ("conv.weight".to_string(), vec![o, IN_CHANNELS, k], IN_CHANNELS * k),
            ("conv.bias".to_string(), vec![o], 0),
            ("bn.gamma".to_string(), vec![o], 0),
            ("bn.beta".to_string(), vec![o], 0),
            ("encoder.weight".to_string(), vec![e, self.pooled_width()], self.pooled_width()),
            ("encoder.bias".to_string(), vec![e], 0),
        ];
        for (head, fan_in, width) in [
            ("head_loc", e, N_MODES),
            ("head_gait", e + N_MODES, N_PHASES),
            ("head_inc", e + N_MODES, 1),
        ] {
            out.push((format!("{head}.fc1.weight"), vec![h, fan_in], fan_in));
            out.push((format!("{head}.fc1.bias"), vec![h], 0));
            out.push((format!("{head}.fc2.weight"), vec![width, h], h));
            out.push((format!("{head}.fc2.bias"), vec![width], 0));
        }
        out
    }
}

/// Which layer a parameter belongs to, for freeze masks.
pub fn layer_of(name: &str) -> &str {
    name.split('.').next().unwrap_or(name)
}

/// Scaled-uniform weights with bound `sqrt(1/fan_in)`, zero biases,
/// unit `bn.gamma`, zero `bn.beta`, and running statistics at (0, 1).
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ParameterSet> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = ParameterSet::new();
    for (name, shape, fan_in) in config.param_layout() {
        let n: usize = shape.iter().product();
        let value = if name == "bn.gamma" {
            Tensor::ones(&shape)
        } else if fan_in == 0 {
            Tensor::zeros(&shape)
        } else {
            let bound = (1.0 / fan_in as f64).sqrt();
            Tensor::new(&shape, (0..n).map(|_| rng.random_range(-bound..bound)).collect())?
        };
        set.push_param(name, value);
    }
    let o = config.conv_out_channels;
    set.push_buffer("bn.running_mean", Tensor::zeros(&[o]));
    set.push_buffer("bn.running_var", Tensor::ones(&[o]));
    Ok(set)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ForwardMode {
    /// Batch statistics in batch norm.
    Train,
    /// Running statistics in batch norm.
    Eval,
}

/// Traced network outputs.
#[derive(Clone, Copy)]
pub struct HeadVars<'t> {
    /// `[B, 5]`
    pub loc: Var<'t>,
    /// `[B, 4]`
    pub gait: Var<'t>,
    /// `[B, 1]`, degrees.
    pub incline: Var<'t>,
}

/// Concrete network outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiHeadOutput {
    pub loc_logits: Tensor,
    pub gait_logits: Tensor,
    pub incline: Tensor,
}

impl MultiHeadOutput {
    pub fn batch(&self) -> usize {
        self.incline.len()
    }
}

impl From<HeadVars<'_>> for MultiHeadOutput {
    fn from(h: HeadVars<'_>) -> Self {
        Self {
            loc_logits: h.loc.value(),
            gait_logits: h.gait.value(),
            incline: h.incline.value(),
        }
    }
}

/// Batch-norm statistics observed during a train-mode forward.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Tensor,
    /// Biased (population) variance.
    pub var: Tensor,
    /// Rows the statistics were computed over.
    pub count: usize,
}

impl BatchStats {
    /// Statistics of the union of the batches: count-weighted mean and the
    /// population variance by the law of total variance.
    pub fn pool(batches: &[BatchStats]) -> Result<BatchStats> {
        let first = batches.first().ok_or_else(|| Error::invalid("pooling no batch statistics"))?;
        let total: usize = batches.iter().map(|b| b.count).sum();
        if total == 0 {
            return Err(Error::invalid("pooling empty batch statistics"));
        }
        let len = first.mean.len();
        let mut mean = vec![0.0; len];
        for b in batches {
            if b.mean.shape() != first.mean.shape() || b.var.shape() != first.mean.shape() {
                return Err(Error::shape("pool", b.mean.shape(), first.mean.shape()));
            }
            let w = b.count as f64 / total as f64;
            for (m, v) in mean.iter_mut().zip(b.mean.data()) {
                *m += w * v;
            }
        }
        let mut var = vec![0.0; len];
        for b in batches {
            let w = b.count as f64 / total as f64;
            for (i, out) in var.iter_mut().enumerate() {
                let d = b.mean.data()[i] - mean[i];
                *out += w * (b.var.data()[i] + d * d);
            }
        }
        Ok(BatchStats {
            mean: Tensor::new(first.mean.shape(), mean)?,
            var: Tensor::new(first.mean.shape(), var)?,
            count: total,
        })
    }

    /// Exponential moving update of `bn.running_*` in `params`, with the
    /// unbiased variance estimate.
    pub fn update_running(&self, params: &mut ParameterSet, momentum: f64) -> Result<()> {
        let n = self.count as f64;
        let correction = if self.count > 1 { n / (n - 1.0) } else { 1.0 };
        let rm = params
            .buffer("bn.running_mean")
            .ok_or_else(|| Error::invalid("missing bn.running_mean"))?
            .zip_map(&self.mean, "running_mean", |r, m| (1.0 - momentum) * r + momentum * m)?;
        let rv = params
            .buffer("bn.running_var")
            .ok_or_else(|| Error::invalid("missing bn.running_var"))?
            .zip_map(&self.var, "running_var", |r, v| (1.0 - momentum) * r + momentum * v * correction)?;
        params.set_buffer("bn.running_mean", rm)?;
        params.set_buffer("bn.running_var", rv)
    }
}

fn linear<'t>(x: Var<'t>, p: &BoundParams<'t>, prefix: &str) -> Result<Var<'t>> {
    let w = p.get(&format!("{prefix}.weight"))?;
    let b = p.get(&format!("{prefix}.bias"))?;
    x.matmul_t(w, false, true)?.add_row(b)
}

fn mlp<'t>(x: Var<'t>, p: &BoundParams<'t>, head: &str) -> Result<Var<'t>> {
    let hidden = linear(x, p, &format!("{head}.fc1"))?.relu()?;
    linear(hidden, p, &format!("{head}.fc2"))
}

/// Forward pass on a trace. `buffers` supplies the running statistics used
/// in eval mode; in train mode the batch statistics are returned.
pub fn forward_traced<'t>(
    config: &ModelConfig,
    params: &BoundParams<'t>,
    buffers: &ParameterSet,
    x: Var<'t>,
    mode: ForwardMode,
) -> Result<(HeadVars<'t>, Option<BatchStats>)> {
    let shape = x.shape();
    if shape.len() != 3 || shape[1] != IN_CHANNELS || shape[2] != config.window_len {
        return Err(Error::shape("forward", &shape, &[0, IN_CHANNELS, config.window_len]));
    }
    let batch = shape[0];
    if batch == 0 {
        return Err(Error::invalid("forward on an empty batch"));
    }
    let trace = x.trace();
    let len = config.window_len;
    let x = if config.center_windows {
        let rows = x.reshape(&[batch * IN_CHANNELS, len])?;
        let mean = rows.sum_cols()?.scale(1.0 / len as f64)?.broadcast_cols(len)?;
        rows.sub(mean)?.reshape(&[batch, IN_CHANNELS, len])?
    } else {
        x
    };
    let geom = ConvGeom::same(batch, IN_CHANNELS, len, config.conv_kernel);
    let conv = x.conv1d(params.get("conv.weight")?, Some(params.get("conv.bias")?), geom)?;

    let gamma = params.get("bn.gamma")?;
    let beta = params.get("bn.beta")?;
    let (normed, stats) = match mode {
        ForwardMode::Train => {
            let (y, mean, var) = conv.batch_norm(gamma, beta, config.bn_eps)?;
            let count = batch * len;
            (y, Some(BatchStats { mean, var, count }))
        }
        ForwardMode::Eval => {
            let rm = buffers
                .buffer("bn.running_mean")
                .ok_or_else(|| Error::invalid("missing bn.running_mean"))?;
            let rv = buffers
                .buffer("bn.running_var")
                .ok_or_else(|| Error::invalid("missing bn.running_var"))?;
            let inv_std = rv.map(|v| 1.0 / (v + config.bn_eps).sqrt());
            let rows = batch * len;
            let centered = conv.sub(trace.constant(rm.clone()).broadcast_rows(rows)?)?;
            let scale = trace.constant(inv_std).mul(gamma)?.broadcast_rows(rows)?;
            (centered.mul(scale)?.add_row(beta)?, None)
        }
    };

    let pooled = normed.segment_pool(PoolGeom {
        batch,
        len,
        feat: config.conv_out_channels,
        segments: config.pool_segments,
    })?;
    let z = linear(pooled, params, "encoder")?.relu()?;
    let loc = mlp(z, params, "head_loc")?;
    let shared = z.concat_cols(loc.softmax_rows()?)?;
    let gait = mlp(shared, params, "head_gait")?;
    let incline = mlp(shared, params, "head_inc")?;
    Ok((HeadVars { loc, gait, incline }, stats))
}

/// Untraced forward on a `[B, 4, k]` batch.
pub fn forward(config: &ModelConfig, params: &ParameterSet, batch: &Tensor, mode: ForwardMode) -> Result<MultiHeadOutput> {
    let trace = Trace::new();
    let bound = params.bind_constants(&trace);
    let x = trace.constant(batch.clone());
    Ok(forward_traced(config, &bound, params, x, mode)?.0.into())
}

/// Index of the largest element; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prediction {
    pub mode: Mode,
    pub phase: Phase,
    pub incline: f64,
}

pub fn predict(output: &MultiHeadOutput) -> Vec<Prediction> {
    let loc = output.loc_logits.data().chunks(N_MODES);
    let gait = output.gait_logits.data().chunks(N_PHASES);
    loc.zip(gait)
        .zip(output.incline.data())
        .map(|((l, g), &inc)| Prediction {
            mode: Mode::from_index(argmax(l)).expect("mode index in range"),
            phase: Phase::from_index(argmax(g)).expect("phase index in range"),
            incline: inc,
        })
        .collect()
}
