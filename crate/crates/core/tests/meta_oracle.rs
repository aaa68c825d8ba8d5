mod common;

use gaitmeta::autodiff::{Tensor, Var};
use gaitmeta::dataset::LabeledBatch;
use gaitmeta::domain::{LabelSet, Mode, Phase};
use gaitmeta::meta::{inner_adapt, meta_gradient, task_meta_gradient, Episode, Learner, MetaConfig};
use gaitmeta::network::{init_params, BatchStats, ForwardMode, ModelConfig};
use gaitmeta::objective::{GaitLearner, LossWeights, Targets};
use gaitmeta::params::{BoundParams, ParameterSet};
use gaitmeta::Result;
use rand::Rng;

pub fn tiny_model() -> ModelConfig {
    ModelConfig {
        window_len: 8,
        conv_out_channels: 1,
        conv_kernel: 2,
        encoder_width: 2,
        head_width: 2,
        pool_segments: 1,
        ..ModelConfig::default()
    }
}

fn random_batch(rng: &mut impl Rng, n: usize, k: usize) -> LabeledBatch {
    let x = common::random_tensor(rng, &[n, 4, k], -2.0, 2.0);
    let labels: Vec<LabelSet> = (0..n)
        .map(|_| {
            let mode = Mode::from_index(rng.random_range(0..5)).unwrap();
            LabelSet {
                mode,
                phase: Phase::from_index(rng.random_range(0..4)).unwrap(),
                incline: rng.random_range(-10.0..10.0),
            }
        })
        .collect();
    LabeledBatch {
        x,
        targets: Targets::from_labels(&labels),
        labels,
    }
}

fn perturb(p: &ParameterSet, rng: &mut impl Rng) -> ParameterSet {
    let mut q = p.clone();
    for (name, t) in p.params().to_vec() {
        q.set(&name, common::random_tensor(rng, t.shape(), -0.8, 0.8)).unwrap();
    }
    q
}

fn query_loss_after_step(learner: &GaitLearner, theta: &ParameterSet, ep: &Episode<LabeledBatch>, alpha: f64) -> f64 {
    let adapted = inner_adapt(learner, theta, &ep.support, alpha, 1).unwrap();
    let trace = gaitmeta::autodiff::Trace::new();
    let bound = adapted.bind_constants(&trace);
    learner.loss(&bound, &adapted, &ep.query, ForwardMode::Train).unwrap().0.value().item()
}

#[test]
fn meta_gradient_matches_finite_differences() {
    let model = tiny_model();
    let learner = GaitLearner::new(model.clone(), LossWeights::default()).unwrap();
    let base = init_params(&model, 0).unwrap();
    assert!(base.num_scalars() <= 100, "{} parameters", base.num_scalars());
    let cfg = MetaConfig { alpha: 0.1, ..MetaConfig::default() };
    for seed in 0..3 {
        let mut rng = common::rng(seed);
        let theta = perturb(&base, &mut rng);
        let ep = Episode {
            support: random_batch(&mut rng, 6, model.window_len),
            query: random_batch(&mut rng, 6, model.window_len),
            support_ids: vec![],
            query_ids: vec![],
        };
        let g = task_meta_gradient(&learner, &theta, &ep, &cfg, (1, 0)).unwrap().grads;
        let h = 1e-4;
        let (mut num, mut den) = (0.0f64, 0.0f64);
        for (pi, (name, t)) in theta.params().iter().enumerate() {
            let fd = common::central_diff(t, h, |v| {
                let mut p = theta.clone();
                p.set(name, v.clone()).unwrap();
                query_loss_after_step(&learner, &p, &ep, cfg.alpha)
            });
            for (a, n) in g[pi].data().iter().zip(&fd) {
                num += (a - n).powi(2);
                den += n.powi(2);
            }
        }
        let rel = (num / den).sqrt();
        assert!(rel <= 1e-3, "seed {seed}: relative error {rel}");
    }
}

/// `sum_i w_i * c_i` over the batch coefficients: linear in the parameters.
struct Linear;

impl Learner for Linear {
    type Batch = Vec<f64>;

    fn loss<'t>(
        &self,
        params: &BoundParams<'t>,
        _: &ParameterSet,
        c: &Vec<f64>,
        _: ForwardMode,
    ) -> Result<(Var<'t>, Option<BatchStats>)> {
        let w = params.get("w")?;
        let coef = w.trace().constant(Tensor::vector(c));
        Ok((w.mul(coef)?.sum()?, None))
    }
}

#[test]
fn first_order_equals_second_order_for_linear_losses() {
    let mut theta = ParameterSet::new();
    theta.push_param("w", Tensor::vector(&[0.3, -1.2, 2.0]));
    let ep = Episode {
        support: vec![1.0, 2.0, -0.5],
        query: vec![-3.0, 0.25, 4.0],
        support_ids: Vec::<()>::new(),
        query_ids: vec![],
    };
    for steps in 1..4 {
        let second = MetaConfig { alpha: 0.7, inner_steps: steps, ..MetaConfig::default() };
        let first = MetaConfig { first_order: true, ..second.clone() };
        let a = task_meta_gradient(&Linear, &theta, &ep, &second, (1, 0)).unwrap().grads;
        let b = task_meta_gradient(&Linear, &theta, &ep, &first, (1, 0)).unwrap().grads;
        for (x, y) in a[0].data().iter().zip(b[0].data()) {
            assert!((x - y).abs() <= 1e-10);
        }
        assert_eq!(a[0].data(), &[-3.0, 0.25, 4.0]);
    }
}

#[test]
fn meta_gradient_is_independent_of_thread_count() {
    let model = ModelConfig {
        window_len: 16,
        conv_out_channels: 3,
        conv_kernel: 3,
        encoder_width: 5,
        head_width: 4,
        pool_segments: 2,
        ..ModelConfig::default()
    };
    let learner = GaitLearner::new(model.clone(), LossWeights::default()).unwrap();
    let theta = init_params(&model, 3).unwrap();
    let mut rng = common::rng(11);
    let episodes: Vec<Episode<LabeledBatch>> = (0..6)
        .map(|_| Episode {
            support: random_batch(&mut rng, 5, 16),
            query: random_batch(&mut rng, 7, 16),
            support_ids: vec![],
            query_ids: vec![],
        })
        .collect();
    let cfg = MetaConfig { alpha: 0.05, ..MetaConfig::default() };
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| meta_gradient(&learner, &theta, &episodes, &cfg, 1).unwrap().0)
    };
    let one = run(1);
    let four = run(4);
    for (a, b) in one.iter().zip(&four) {
        assert_eq!(a.data(), b.data());
    }
}
