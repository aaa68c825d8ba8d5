mod common;

use gaitmeta::autodiff::Trace;
use gaitmeta::network::{forward, forward_traced, init_params, ForwardMode, ModelConfig, N_MODES};
use gaitmeta::params::ParameterSet;

/// Straight-line reimplementation of the network with scalar loops.
struct Naive<'a> {
    cfg: &'a ModelConfig,
    p: &'a ParameterSet,
}

impl Naive<'_> {
    fn t(&self, name: &str) -> &[f64] {
        self.p.get(name).unwrap().data()
    }

    fn linear(&self, x: &[f64], prefix: &str, out: usize) -> Vec<f64> {
        let w = self.t(&format!("{prefix}.weight"));
        let b = self.t(&format!("{prefix}.bias"));
        let inp = x.len();
        (0..out)
            .map(|o| b[o] + (0..inp).map(|i| w[o * inp + i] * x[i]).sum::<f64>())
            .collect()
    }

    fn mlp(&self, x: &[f64], head: &str, out: usize) -> Vec<f64> {
        let h: Vec<f64> = self
            .linear(x, &format!("{head}.fc1"), self.cfg.head_width)
            .into_iter()
            .map(|v| v.max(0.0))
            .collect();
        self.linear(&h, &format!("{head}.fc2"), out)
    }

    /// Conv outputs indexed `[b][t][o]`.
    fn conv(&self, x: &[f64], batch: usize) -> Vec<Vec<Vec<f64>>> {
        let (l, k, oc) = (self.cfg.window_len, self.cfg.conv_kernel, self.cfg.conv_out_channels);
        let pad = (k - 1) / 2;
        let w = self.t("conv.weight");
        let b = self.t("conv.bias");
        (0..batch)
            .map(|bi| {
                (0..l)
                    .map(|t| {
                        (0..oc)
                            .map(|o| {
                                let mut acc = b[o];
                                for c in 0..4 {
                                    for j in 0..k {
                                        let src = t as isize + j as isize - pad as isize;
                                        if src >= 0 && (src as usize) < l {
                                            acc += w[(o * 4 + c) * k + j] * x[(bi * 4 + c) * l + src as usize];
                                        }
                                    }
                                }
                                acc
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect()
    }

    /// Returns `(loc, gait, incline)` per sample and the batch mean/variance.
    #[allow(clippy::type_complexity)]
    fn run(&self, x: &[f64], batch: usize, train: bool) -> (Vec<(Vec<f64>, Vec<f64>, f64)>, Vec<f64>, Vec<f64>) {
        let (l, oc, s) = (self.cfg.window_len, self.cfg.conv_out_channels, self.cfg.pool_segments);
        let centered: Vec<f64>;
        let x = if self.cfg.center_windows {
            centered = x
                .chunks(l)
                .flat_map(|row| {
                    let m = row.iter().sum::<f64>() / l as f64;
                    row.iter().map(move |v| v - m)
                })
                .collect();
            &centered[..]
        } else {
            x
        };
        let conv = self.conv(x, batch);
        let n = (batch * l) as f64;
        let mut mean = vec![0.0; oc];
        let mut var = vec![0.0; oc];
        for o in 0..oc {
            mean[o] = conv.iter().flatten().map(|row| row[o]).sum::<f64>() / n;
            var[o] = conv.iter().flatten().map(|row| (row[o] - mean[o]).powi(2)).sum::<f64>() / n;
        }
        let (m, v) = if train {
            (mean.clone(), var.clone())
        } else {
            (
                self.p.buffer("bn.running_mean").unwrap().to_vec(),
                self.p.buffer("bn.running_var").unwrap().to_vec(),
            )
        };
        let gamma = self.t("bn.gamma");
        let beta = self.t("bn.beta");
        let mut out = Vec::new();
        for bi in 0..batch {
            let mut pooled = vec![0.0; s * oc];
            for seg in 0..s {
                let (lo, hi) = (seg * l / s, (seg + 1) * l / s);
                for o in 0..oc {
                    let mut acc = 0.0;
                    for t in lo..hi {
                        acc += (conv[bi][t][o] - m[o]) / (v[o] + self.cfg.bn_eps).sqrt() * gamma[o] + beta[o];
                    }
                    pooled[seg * oc + o] = acc / (hi - lo) as f64;
                }
            }
            let z: Vec<f64> = self
                .linear(&pooled, "encoder", self.cfg.encoder_width)
                .into_iter()
                .map(|v| v.max(0.0))
                .collect();
            let loc = self.mlp(&z, "head_loc", N_MODES);
            let mx = loc.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = loc.iter().map(|v| (v - mx).exp()).collect();
            let sum: f64 = e.iter().sum();
            let mut shared = z.clone();
            shared.extend(e.iter().map(|v| v / sum));
            let gait = self.mlp(&shared, "head_gait", 4);
            let inc = self.mlp(&shared, "head_inc", 1)[0];
            out.push((loc, gait, inc));
        }
        (out, mean, var)
    }
}

fn small_config(seed: u64) -> ModelConfig {
    ModelConfig {
        window_len: 20 + (seed as usize % 3) * 7,
        conv_out_channels: 3 + seed as usize % 3,
        conv_kernel: [3, 5, 4][seed as usize % 3],
        encoder_width: 6,
        head_width: 5,
        pool_segments: 1 + seed as usize % 4,
        center_windows: seed % 2 == 0,
        ..ModelConfig::default()
    }
}

fn perturbed_params(cfg: &ModelConfig, seed: u64) -> ParameterSet {
    let mut rng = common::rng(seed + 100);
    let mut p = init_params(cfg, seed).unwrap();
    for (name, t) in p.params().to_vec() {
        p.set(&name, common::random_tensor(&mut rng, t.shape(), -0.6, 0.6)).unwrap();
    }
    let oc = cfg.conv_out_channels;
    p.set_buffer("bn.running_mean", common::random_tensor(&mut rng, &[oc], -1.0, 1.0)).unwrap();
    p.set_buffer("bn.running_var", common::random_tensor(&mut rng, &[oc], 0.5, 2.0)).unwrap();
    p
}

#[test]
fn forward_matches_scalar_loop_oracle() {
    for seed in 0..6 {
        let cfg = small_config(seed);
        let p = perturbed_params(&cfg, seed);
        let batch = 3;
        let mut rng = common::rng(seed);
        let x = common::random_tensor(&mut rng, &[batch, 4, cfg.window_len], 40.0, 60.0);
        for train in [false, true] {
            let mode = if train { ForwardMode::Train } else { ForwardMode::Eval };
            let got = forward(&cfg, &p, &x, mode).unwrap();
            let (want, _, _) = Naive { cfg: &cfg, p: &p }.run(x.data(), batch, train);
            for (b, (loc, gait, inc)) in want.iter().enumerate() {
                for (i, v) in loc.iter().enumerate() {
                    assert!((got.loc_logits.data()[b * N_MODES + i] - v).abs() <= 1e-12, "loc seed {seed}");
                }
                for (i, v) in gait.iter().enumerate() {
                    assert!((got.gait_logits.data()[b * 4 + i] - v).abs() <= 1e-12, "gait seed {seed}");
                }
                assert!((got.incline.data()[b] - inc).abs() <= 1e-12, "incline seed {seed}");
            }
        }
    }
}

#[test]
fn train_mode_reports_batch_statistics() {
    let cfg = small_config(1);
    let p = perturbed_params(&cfg, 1);
    let mut rng = common::rng(9);
    let x = common::random_tensor(&mut rng, &[4, 4, cfg.window_len], -1.0, 1.0);
    let (_, mean, var) = Naive { cfg: &cfg, p: &p }.run(x.data(), 4, true);
    let trace = Trace::new();
    let bound = p.bind_constants(&trace);
    let (_, stats) = forward_traced(&cfg, &bound, &p, trace.constant(x), ForwardMode::Train).unwrap();
    let stats = stats.unwrap();
    assert_eq!(stats.count, 4 * cfg.window_len);
    for o in 0..cfg.conv_out_channels {
        assert!((stats.mean.data()[o] - mean[o]).abs() <= 1e-12);
        assert!((stats.var.data()[o] - var[o]).abs() <= 1e-12);
    }
}

#[test]
fn running_statistics_use_unbiased_variance() {
    let cfg = small_config(0);
    let mut p = perturbed_params(&cfg, 0);
    let before_mean = p.buffer("bn.running_mean").unwrap().to_vec();
    let before_var = p.buffer("bn.running_var").unwrap().to_vec();
    let mut rng = common::rng(3);
    let x = common::random_tensor(&mut rng, &[2, 4, cfg.window_len], -1.0, 1.0);
    let trace = Trace::new();
    let bound = p.bind_constants(&trace);
    let (_, stats) = forward_traced(&cfg, &bound, &p, trace.constant(x), ForwardMode::Train).unwrap();
    let stats = stats.unwrap();
    stats.update_running(&mut p, 0.1).unwrap();
    let n = stats.count as f64;
    for o in 0..cfg.conv_out_channels {
        let m = 0.9 * before_mean[o] + 0.1 * stats.mean.data()[o];
        let v = 0.9 * before_var[o] + 0.1 * stats.var.data()[o] * n / (n - 1.0);
        assert!((p.buffer("bn.running_mean").unwrap().data()[o] - m).abs() <= 1e-15);
        assert!((p.buffer("bn.running_var").unwrap().data()[o] - v).abs() <= 1e-14);
    }
}

#[test]
fn eval_mode_is_independent_of_batch_composition() {
    let cfg = small_config(2);
    let p = perturbed_params(&cfg, 2);
    let mut rng = common::rng(4);
    let x = common::random_tensor(&mut rng, &[5, 4, cfg.window_len], -1.0, 1.0);
    let all = forward(&cfg, &p, &x, ForwardMode::Eval).unwrap();
    let one = gaitmeta::autodiff::Tensor::new(&[1, 4, cfg.window_len], x.data()[..4 * cfg.window_len].to_vec()).unwrap();
    let single = forward(&cfg, &p, &one, ForwardMode::Eval).unwrap();
    for (a, b) in all.gait_logits.data()[..4].iter().zip(single.gait_logits.data()) {
        assert!((a - b).abs() <= 1e-12);
    }
}
