//! Leave-one-subject-out evaluation: metrics, confidence intervals, scenario
//! grids and report files.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::baselines::{pretrain, BaselineKind, PretrainConfig, PretrainLog};
use crate::dataset::{
    assemble, calibration_split, group_tasks, sample_episode, task_windows, CalibrationSpec, EpisodeSpec, TaskEntry,
    WindowId,
};
use crate::domain::{LabelSet, Mode};
use crate::error::{Error, Result};
use crate::meta::{fine_tune, meta_train, EpochLog, MetaConfig, TrainOutputs};
use crate::network::{forward, init_params, predict, ForwardMode, ModelConfig, Prediction, N_PHASES};
use crate::objective::{GaitLearner, LossWeights};
use crate::params::ParameterSet;
use crate::synth::{mix_seed, Benchmark, SessionRecording};

/// Counts over gait phases; rows are true phases, columns predicted phases.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; N_PHASES]; N_PHASES],
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn diagonal(&self) -> u64 {
        (0..N_PHASES).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_sum(&self, true_phase: usize) -> u64 {
        self.counts[true_phase].iter().sum()
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (a, b) in self.counts.iter_mut().flatten().zip(other.counts.iter().flatten()) {
            *a += b;
        }
    }
}

/// Sufficient statistics for the three metrics over a set of query samples.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Tally {
    pub n: u64,
    pub gait_correct: u64,
    pub loc_correct: u64,
    pub sq_err: f64,
    pub confusion: ConfusionMatrix,
}

impl Tally {
    pub fn add(&mut self, pred: &Prediction, label: &LabelSet) {
        self.n += 1;
        self.gait_correct += (pred.phase == label.phase) as u64;
        self.loc_correct += (pred.mode == label.mode) as u64;
        let e = pred.incline - label.incline;
        self.sq_err += e * e;
        self.confusion.counts[label.phase.index()][pred.phase.index()] += 1;
    }

    pub fn merge(&mut self, other: &Tally) {
        self.n += other.n;
        self.gait_correct += other.gait_correct;
        self.loc_correct += other.loc_correct;
        self.sq_err += other.sq_err;
        self.confusion.merge(&other.confusion);
    }

    pub fn metrics(&self) -> Option<Metrics> {
        (self.n > 0).then(|| Metrics {
            gait_acc: self.gait_correct as f64 / self.n as f64,
            loc_acc: self.loc_correct as f64 / self.n as f64,
            incline_rmse: (self.sq_err / self.n as f64).sqrt(),
            confusion: self.confusion,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub gait_acc: f64,
    pub loc_acc: f64,
    /// Degrees.
    pub incline_rmse: f64,
    pub confusion: ConfusionMatrix,
}

impl Metrics {
    pub fn get(&self, metric: Metric) -> f64 {
        match metric {
            Metric::GaitAcc => self.gait_acc,
            Metric::LocAcc => self.loc_acc,
            Metric::InclineRmse => self.incline_rmse,
        }
    }
}

pub fn metrics(predictions: &[Prediction], labels: &[LabelSet]) -> Result<Metrics> {
    if predictions.len() != labels.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let mut t = Tally::default();
    for (p, l) in predictions.iter().zip(labels) {
        t.add(p, l);
    }
    t.metrics().ok_or_else(|| Error::invalid("metrics of an empty query set"))
}

/// Mean and 95% normal-approximation half-width, `1.96 * s / sqrt(N)` with
/// the unbiased sample standard deviation.
pub fn confidence_interval(values: &[f64]) -> Result<(f64, f64)> {
    if values.len() < 2 {
        return Err(Error::invalid(format!(
            "a confidence interval needs at least 2 values, got {}",
            values.len()
        )));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    Ok((mean, 1.96 * var.sqrt() / n.sqrt()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    MAML,
    RI,
    DE,
    TL,
    SFT,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::MAML, Method::RI, Method::DE, Method::TL, Method::SFT];

    pub fn baseline(self) -> Option<BaselineKind> {
        match self {
            Method::MAML => None,
            Method::RI => Some(BaselineKind::RI),
            Method::DE => Some(BaselineKind::DE),
            Method::TL => Some(BaselineKind::TL),
            Method::SFT => Some(BaselineKind::SFT),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Method::MAML => "MAML",
            Method::RI => "RI",
            Method::DE => "DE",
            Method::TL => "TL",
            Method::SFT => "SFT",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::invalid(format!("unknown method {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scenario {
    S1,
    S2,
    S3,
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "S1" => Ok(Scenario::S1),
            "S2" => Ok(Scenario::S2),
            "S3" => Ok(Scenario::S3),
            _ => Err(Error::invalid(format!("unknown scenario {s:?}"))),
        }
    }
}

pub const FIXED_DURATION_S: f64 = 3.5;
pub const FIXED_STEPS: usize = 4;

/// A grid of calibration durations and fine-tuning step counts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub scenario: Scenario,
    pub durations: Vec<f64>,
    pub steps: Vec<usize>,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
}

impl ScenarioConfig {
    pub fn new(scenario: Scenario) -> Self {
        let (durations, steps) = match scenario {
            Scenario::S1 => (vec![1.5, 2.0, 2.5, 3.0, 3.5], vec![FIXED_STEPS]),
            Scenario::S2 => (vec![FIXED_DURATION_S], vec![0, 1, 2, 3, 4]),
            Scenario::S3 => (vec![FIXED_DURATION_S], vec![FIXED_STEPS]),
        };
        Self {
            scenario,
            durations,
            steps,
            methods: Method::ALL.to_vec(),
            seeds: vec![0, 1, 2, 3, 4],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fixed_steps = self.steps == [FIXED_STEPS];
        let fixed_duration = self.durations == [FIXED_DURATION_S];
        let ok = match self.scenario {
            Scenario::S1 => fixed_steps,
            Scenario::S2 => fixed_duration,
            Scenario::S3 => fixed_steps && fixed_duration,
        };
        if !ok {
            return Err(Error::invalid(format!(
                "{:?} grid must fix {}",
                self.scenario,
                match self.scenario {
                    Scenario::S1 => "steps = 4",
                    Scenario::S2 => "duration = 3.5 s",
                    Scenario::S3 => "duration = 3.5 s and steps = 4",
                }
            )));
        }
        if self.durations.is_empty() || self.steps.is_empty() || self.methods.is_empty() || self.seeds.is_empty() {
            return Err(Error::invalid("scenario grid, methods and seeds must be nonempty"));
        }
        if self.durations.iter().any(|d| !(*d > 0.0) || !d.is_finite()) {
            return Err(Error::invalid("calibration durations must be positive"));
        }
        Ok(())
    }

    /// `(duration_s, steps)` pairs in grid order.
    pub fn operating_points(&self) -> Vec<(f64, usize)> {
        let mut out = Vec::new();
        for &d in &self.durations {
            for &s in &self.steps {
                out.push((d, s));
            }
        }
        out
    }
}

/// Fine-tuning learning rate of each method.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MethodRates {
    pub maml: f64,
    pub ri: f64,
    pub tl: f64,
    pub sft: f64,
}

impl Default for MethodRates {
    fn default() -> Self {
        Self {
            maml: MetaConfig::default().alpha,
            ri: BaselineKind::RI.default_learning_rate(),
            tl: BaselineKind::TL.default_learning_rate(),
            sft: BaselineKind::SFT.default_learning_rate(),
        }
    }
}

impl MethodRates {
    pub fn get(&self, m: Method) -> f64 {
        match m {
            Method::MAML => self.maml,
            Method::RI => self.ri,
            Method::DE => 0.0,
            Method::TL => self.tl,
            Method::SFT => self.sft,
        }
    }
}

/// Everything a LOSO run needs besides the data and the scenario grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub meta: MetaConfig,
    /// Window stride of the grid episodes are drawn from.
    pub episode_stride: usize,
    pub pretrain: PretrainConfig,
    /// Window stride of the pooled pre-training set.
    pub pretrain_stride: usize,
    pub calibration: CalibrationSpec,
    pub rates: MethodRates,
    /// Query windows per forward pass during evaluation.
    pub eval_chunk: usize,
    /// Held-out subjects to run; empty means all.
    pub folds: Vec<u32>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            loss: LossWeights::default(),
            meta: MetaConfig::default(),
            episode_stride: 10,
            pretrain: PretrainConfig::default(),
            pretrain_stride: 10,
            calibration: CalibrationSpec::default(),
            rates: MethodRates::default(),
            eval_chunk: 256,
            folds: Vec::new(),
        }
    }
}

impl ExperimentConfig {
    /// A reduced budget that runs a full nine-fold comparison on one core
    /// in minutes.
    pub fn desk() -> Self {
        let d = Self::default();
        Self {
            loss: d.loss,
            model: ModelConfig {
                conv_out_channels: 8,
                encoder_width: 32,
                head_width: 16,
                ..d.model
            },
            meta: MetaConfig {
                alpha: 0.6,
                beta: 0.006,
                epochs: 40,
                n_support: 40,
                n_query: 60,
                ..d.meta
            },
            episode_stride: 10,
            pretrain: PretrainConfig {
                epochs: 4,
                batch_size: 200,
                learning_rate: 3e-3,
                ..d.pretrain
            },
            pretrain_stride: 40,
            calibration: CalibrationSpec {
                query_stride: 100,
                ..d.calibration
            },
            rates: MethodRates {
                maml: 0.6,
                ri: 1.5,
                tl: 0.1,
                sft: 0.005,
            },
            eval_chunk: 256,
            folds: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.meta.validate()?;
        if self.episode_stride == 0 || self.pretrain_stride == 0 || self.eval_chunk == 0 {
            return Err(Error::invalid("strides and eval_chunk must be at least 1"));
        }
        if self.calibration.window_len != self.model.window_len {
            return Err(Error::invalid("calibration window length differs from the model's"));
        }
        let r = &self.rates;
        if [r.maml, r.ri, r.tl, r.sft].iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::invalid("fine-tuning rates must be finite and nonnegative"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Metric {
    GaitAcc,
    LocAcc,
    InclineRmse,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::GaitAcc, Metric::LocAcc, Metric::InclineRmse];

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::GaitAcc => "gait_acc",
            Metric::LocAcc => "loc_acc",
            Metric::InclineRmse => "incline_rmse",
        }
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Metric::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown metric {s:?}")))
    }
}

/// One row of `results.csv`. `None` for subject, mode or seed means the row
/// aggregates over all of them; `ci` is present only on rows averaged over
/// seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct ResultRecord {
    pub method: Method,
    pub subject: Option<u32>,
    pub mode: Option<Mode>,
    pub metric: Metric,
    pub value: f64,
    pub ci: Option<f64>,
    pub duration_s: f64,
    pub steps: usize,
    pub seed: Option<u64>,
}

pub const RESULTS_HEADER: &str = "method,subject,mode,metric,value,ci,duration_s,steps,seed";

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_else(|| "ALL".into())
}

impl ResultRecord {
    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{:?},{},{:?},{},{}",
            self.method,
            opt(self.subject),
            opt(self.mode),
            self.metric.as_str(),
            self.value,
            self.ci.map(|c| format!("{c:?}")).unwrap_or_default(),
            self.duration_s,
            self.steps,
            opt(self.seed),
        )
    }

    pub fn parse_row(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split(',').collect();
        let bad = |what: &str| Error::invalid(format!("malformed results row ({what}): {line:?}"));
        if f.len() != 9 {
            return Err(bad("field count"));
        }
        fn all_or<T: FromStr>(s: &str) -> std::result::Result<Option<T>, ()> {
            if s == "ALL" {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|_| ())
            }
        }
        Ok(Self {
            method: f[0].parse()?,
            subject: all_or(f[1]).map_err(|_| bad("subject"))?,
            mode: all_or(f[2]).map_err(|_| bad("mode"))?,
            metric: f[3].parse()?,
            value: f[4].parse().map_err(|_| bad("value"))?,
            ci: if f[5].is_empty() { None } else { Some(f[5].parse().map_err(|_| bad("ci"))?) },
            duration_s: f[6].parse().map_err(|_| bad("duration_s"))?,
            steps: f[7].parse().map_err(|_| bad("steps"))?,
            seed: all_or(f[8]).map_err(|_| bad("seed"))?,
        })
    }
}

pub fn parse_results(text: &str) -> Result<Vec<ResultRecord>> {
    let mut lines = text.lines();
    if lines.next() != Some(RESULTS_HEADER) {
        return Err(Error::invalid("results.csv header mismatch"));
    }
    lines.filter(|l| !l.is_empty()).map(ResultRecord::parse_row).collect()
}

/// Key of one evaluated cell: method, duration (bits), steps, seed, subject.
type CellKey = (Method, u64, usize, u64, u32);

/// Per-mode tallies of one cell.
type ModeTallies = [Tally; Mode::COUNT];

/// Result of [`run_loso`].
#[derive(Clone, Debug, Default)]
pub struct LosoReport {
    pub records: Vec<ResultRecord>,
    /// Gait-phase confusion of each method at its largest operating point,
    /// summed over folds and seeds.
    pub confusion: Vec<(Method, ConfusionMatrix)>,
    /// Wall-clock seconds per held-out subject.
    pub fold_seconds: Vec<(u32, f64)>,
}

/// Union of the scenarios' `(method, duration, steps)` cells, deduplicated,
/// in first-seen order.
fn cells(scenarios: &[ScenarioConfig]) -> Vec<(Method, f64, usize)> {
    let mut out: Vec<(Method, f64, usize)> = Vec::new();
    for sc in scenarios {
        for (d, s) in sc.operating_points() {
            for &m in &sc.methods {
                if !out.iter().any(|&(m2, d2, s2)| m2 == m && d2 == d && s2 == s) {
                    out.push((m, d, s));
                }
            }
        }
    }
    out
}

fn audit(sessions: &[SessionRecording], ids: impl IntoIterator<Item = usize>, held_out: u32) -> Result<()> {
    for s in ids {
        if sessions[s].task.subject == held_out {
            return Err(Error::invalid(format!(
                "training data of fold {held_out} contains session {s} of the held-out subject"
            )));
        }
    }
    Ok(())
}

/// Evaluates parameters on query windows, tallying by true mode.
pub fn evaluate_windows(
    model: &ModelConfig,
    params: &ParameterSet,
    sessions: &[SessionRecording],
    ids: &[WindowId],
    chunk: usize,
) -> Result<ModeTallies> {
    let mut tallies = [Tally::default(); Mode::COUNT];
    for part in ids.chunks(chunk.max(1)) {
        let batch = assemble(sessions, part, model.window_len)?;
        let out = forward(model, params, &batch.x, ForwardMode::Eval)?;
        for (p, l) in predict(&out).iter().zip(&batch.labels) {
            tallies[l.mode.index()].add(p, l);
        }
    }
    Ok(tallies)
}

fn total(t: &ModeTallies) -> Tally {
    let mut all = Tally::default();
    for m in t {
        all.merge(m);
    }
    all
}

/// Models trained on every subject but `held_out`.
pub struct FoldModels {
    pub maml: Option<ParameterSet>,
    pub maml_log: Vec<EpochLog>,
    pub pretrained: Option<ParameterSet>,
    pub pretrain_log: Vec<PretrainLog>,
}

/// Meta-trains and pre-trains on all subjects except `held_out`.
pub fn train_fold(
    bench: &Benchmark,
    tasks: &[TaskEntry],
    exp: &ExperimentConfig,
    held_out: u32,
    need_maml: bool,
    need_pretrained: bool,
) -> Result<FoldModels> {
    let sessions = &bench.sessions;
    let learner = GaitLearner::new(exp.model.clone(), exp.loss)?;
    let train: Vec<&TaskEntry> = tasks.iter().filter(|t| t.task.subject != held_out).collect();
    audit(sessions, train.iter().flat_map(|t| t.sessions.iter().copied()), held_out)?;
    let k = exp.model.window_len;

    let (maml, maml_log) = if need_maml {
        let init = init_params(&exp.model, mix_seed(&[exp.meta.seed, held_out as u64, 1]))?;
        let spec = EpisodeSpec {
            window_len: k,
            stride: exp.episode_stride,
            n_support: exp.meta.n_support,
            n_query: exp.meta.n_query,
        };
        let sample = |epoch: usize| {
            train
                .iter()
                .enumerate()
                .map(|(i, t)| {
                    let seed = mix_seed(&[exp.meta.seed, held_out as u64, epoch as u64, i as u64]);
                    let ep = sample_episode(sessions, t, &spec, seed)?;
                    audit(
                        sessions,
                        ep.support_ids.iter().chain(&ep.query_ids).map(|w| w.session as usize),
                        held_out,
                    )?;
                    Ok(ep)
                })
                .collect::<Result<Vec<_>>>()
        };
        let (theta, log) = meta_train(&learner, &init, sample, &exp.meta, &TrainOutputs::default())?;
        (Some(theta), log)
    } else {
        (None, Vec::new())
    };

    let (pretrained, pretrain_log) = if need_pretrained {
        let all: Vec<usize> = train.iter().flat_map(|t| t.sessions.iter().copied()).collect();
        let pool = task_windows(sessions, &all, k, exp.pretrain_stride)?;
        audit(sessions, pool.iter().map(|w| w.session as usize), held_out)?;
        let init = init_params(&exp.model, mix_seed(&[exp.pretrain.seed, held_out as u64, 2]))?;
        let cfg = PretrainConfig {
            seed: mix_seed(&[exp.pretrain.seed, held_out as u64, 3]),
            ..exp.pretrain.clone()
        };
        let batch = |idx: &[usize]| {
            let ids: Vec<WindowId> = idx.iter().map(|&i| pool[i]).collect();
            assemble(sessions, &ids, k)
        };
        let (theta, log) = pretrain(&learner, &init, pool.len(), batch, &cfg, None)?;
        (Some(theta), log)
    } else {
        (None, Vec::new())
    };
    Ok(FoldModels {
        maml,
        maml_log,
        pretrained,
        pretrain_log,
    })
}

/// Adapts and evaluates every method of the scenarios on one held-out subject.
pub fn evaluate_fold(
    bench: &Benchmark,
    tasks: &[TaskEntry],
    exp: &ExperimentConfig,
    scenarios: &[ScenarioConfig],
    held_out: u32,
    models: &FoldModels,
) -> Result<BTreeMap<CellKey, ModeTallies>> {
    let sessions = &bench.sessions;
    let learner = GaitLearner::new(exp.model.clone(), exp.loss)?;
    let test: Vec<&TaskEntry> = tasks.iter().filter(|t| t.task.subject == held_out).collect();
    if test.is_empty() {
        return Err(Error::invalid(format!("no recordings of subject {held_out}")));
    }
    let grid = cells(scenarios);
    let longest = grid.iter().map(|c| c.1).fold(0.0, f64::max);
    let mut seeds: Vec<u64> = scenarios.iter().flat_map(|s| s.seeds.iter().copied()).collect();
    seeds.sort_unstable();
    seeds.dedup();

    let mut out = BTreeMap::new();
    for &seed in &seeds {
        let split_seed = mix_seed(&[seed, held_out as u64]);
        let spec = |d: f64| CalibrationSpec {
            duration_s: d,
            reserved_s: exp.calibration.reserved_s.max(longest),
            ..exp.calibration
        };
        let query = calibration_split(sessions, &test, &spec(longest), split_seed)?.query;
        let ri_init = init_params(&exp.model, mix_seed(&[seed, held_out as u64, 4]))?;
        // Identical parameters give identical tallies.
        let mut memo: Vec<(ParameterSet, ModeTallies)> = Vec::new();
        let mut durations: Vec<f64> = Vec::new();
        for c in &grid {
            if !durations.contains(&c.1) {
                durations.push(c.1);
            }
        }
        for &d in &durations {
            let calib_ids = calibration_split(sessions, &test, &spec(d), split_seed)?.calibration;
            let calib = assemble(sessions, &calib_ids, exp.model.window_len)?;
            // Fine-tuning is stateless across steps, so longer runs continue
            // from the latest shorter one.
            let mut progress: Vec<(Method, usize, ParameterSet)> = Vec::new();
            for &(method, _, steps) in grid.iter().filter(|c| c.1 == d) {
                if !scenarios.iter().any(|s| s.methods.contains(&method) && s.seeds.contains(&seed)) {
                    continue;
                }
                let start = match method {
                    Method::MAML => models.maml.as_ref(),
                    Method::RI => Some(&ri_init),
                    _ => models.pretrained.as_ref(),
                }
                .ok_or_else(|| Error::invalid(format!("{method} has no trained starting point")))?;
                let (steps_run, trainable) = match method.baseline() {
                    Some(BaselineKind::DE) => (0, BaselineKind::DE.freeze_mask()),
                    Some(kind) => (steps, kind.freeze_mask()),
                    None => (steps, crate::baselines::FreezeMask::none()),
                };
                let (from, done) = match progress.iter().find(|p| p.0 == method && p.1 <= steps_run) {
                    Some((_, done, p)) => (p, *done),
                    None => (start, 0),
                };
                let adapted = fine_tune(&learner, from, &calib, exp.rates.get(method), steps_run - done, |n| {
                    trainable.is_trainable(n)
                })?;
                progress.retain(|p| p.0 != method);
                progress.push((method, steps_run, adapted.clone()));
                let tallies = match memo.iter().find(|(p, _)| p.bit_eq(&adapted)) {
                    Some((_, t)) => *t,
                    None => {
                        let t = evaluate_windows(&exp.model, &adapted, sessions, &query, exp.eval_chunk)?;
                        memo.push((adapted, t));
                        t
                    }
                };
                out.insert((method, d.to_bits(), steps, seed, held_out), tallies);
            }
        }
    }
    Ok(out)
}

/// Runs the scenarios over every held-out subject, training each fold's
/// models with [`train_fold`]. `on_fold` receives the per-seed records of each
/// fold as soon as it completes.
pub fn run_loso(
    bench: &Benchmark,
    exp: &ExperimentConfig,
    scenarios: &[ScenarioConfig],
    on_fold: impl FnMut(u32, &[ResultRecord]) -> Result<()>,
) -> Result<LosoReport> {
    let tasks = group_tasks(&bench.sessions);
    let (need_maml, need_pre) = needed_models(scenarios);
    run_loso_with(
        bench,
        exp,
        scenarios,
        |held_out| train_fold(bench, &tasks, exp, held_out, need_maml, need_pre),
        on_fold,
    )
}

/// Whether the scenarios need meta-trained and pre-trained models.
pub fn needed_models(scenarios: &[ScenarioConfig]) -> (bool, bool) {
    let methods: Vec<Method> = scenarios.iter().flat_map(|s| s.methods.iter().copied()).collect();
    (
        methods.contains(&Method::MAML),
        methods.iter().any(|m| m.baseline().is_some_and(|b| b.needs_pretraining())),
    )
}

/// [`run_loso`] with fold models supplied by `models(held_out)`.
pub fn run_loso_with(
    bench: &Benchmark,
    exp: &ExperimentConfig,
    scenarios: &[ScenarioConfig],
    mut models: impl FnMut(u32) -> Result<FoldModels>,
    mut on_fold: impl FnMut(u32, &[ResultRecord]) -> Result<()>,
) -> Result<LosoReport> {
    exp.validate()?;
    if scenarios.is_empty() {
        return Err(Error::invalid("no scenarios to run"));
    }
    for s in scenarios {
        s.validate()?;
    }
    let subjects = bench.subjects();
    if subjects.len() < 2 {
        return Err(Error::invalid("leave-one-subject-out needs at least 2 subjects"));
    }
    let folds: Vec<u32> = if exp.folds.is_empty() {
        subjects.clone()
    } else {
        for f in &exp.folds {
            if !subjects.contains(f) {
                return Err(Error::invalid(format!("fold {f} is not a subject of the benchmark")));
            }
        }
        exp.folds.clone()
    };
    let tasks = group_tasks(&bench.sessions);
    let mut cells_all: BTreeMap<CellKey, ModeTallies> = BTreeMap::new();
    let mut fold_seconds = Vec::new();
    for &held_out in &folds {
        let start = Instant::now();
        let fold_models = models(held_out)?;
        let fold = evaluate_fold(bench, &tasks, exp, scenarios, held_out, &fold_models)?;
        on_fold(held_out, &per_seed_records(&fold))?;
        cells_all.extend(fold);
        fold_seconds.push((held_out, start.elapsed().as_secs_f64()));
    }
    let report = LosoReport {
        records: aggregate(&cells_all, scenarios)?,
        confusion: confusion_at_largest(&cells_all),
        fold_seconds,
    };
    audit_report(&report)?;
    Ok(report)
}

/// Checks invariants every report must satisfy: metric ranges and DE
/// constant across operating points.
pub fn audit_report(report: &LosoReport) -> Result<()> {
    for r in &report.records {
        let ok = match r.metric {
            Metric::GaitAcc | Metric::LocAcc => (0.0..=1.0).contains(&r.value),
            Metric::InclineRmse => r.value >= 0.0 && r.value.is_finite(),
        };
        if !ok {
            return Err(Error::invalid(format!("out-of-range record {}", r.to_csv_row())));
        }
    }
    let mut de: BTreeMap<(Option<u32>, Option<Mode>, Metric, Option<u64>), f64> = BTreeMap::new();
    for r in report.records.iter().filter(|r| r.method == Method::DE) {
        let v = *de.entry((r.subject, r.mode, r.metric, r.seed)).or_insert(r.value);
        if v.to_bits() != r.value.to_bits() {
            return Err(Error::invalid(format!("DE varies across operating points: {}", r.to_csv_row())));
        }
    }
    Ok(())
}

fn push_metrics(out: &mut Vec<ResultRecord>, base: &ResultRecord, m: &Metrics) {
    for metric in Metric::ALL {
        out.push(ResultRecord {
            metric,
            value: m.get(metric),
            ..base.clone()
        });
    }
}

fn per_seed_records(cells: &BTreeMap<CellKey, ModeTallies>) -> Vec<ResultRecord> {
    let mut out = Vec::new();
    for (&(method, d, steps, seed, subject), tallies) in cells {
        let base = ResultRecord {
            method,
            subject: Some(subject),
            mode: None,
            metric: Metric::GaitAcc,
            value: 0.0,
            ci: None,
            duration_s: f64::from_bits(d),
            steps,
            seed: Some(seed),
        };
        if let Some(m) = total(tallies).metrics() {
            push_metrics(&mut out, &base, &m);
        }
        for mode in Mode::ALL {
            if let Some(m) = tallies[mode.index()].metrics() {
                push_metrics(&mut out, &ResultRecord { mode: Some(mode), ..base.clone() }, &m);
            }
        }
    }
    out
}

/// Builds every record from the evaluated cells.
///
/// Per subject: one row per seed and a seed average with its CI. Across
/// subjects (`subject = ALL`): query samples of all folds are pooled per seed,
/// then averaged over seeds with a CI over seeds.
fn aggregate(cells: &BTreeMap<CellKey, ModeTallies>, scenarios: &[ScenarioConfig]) -> Result<Vec<ResultRecord>> {
    let mut out = per_seed_records(cells);
    // (method, duration, steps, subject or ALL, mode or ALL, metric) -> per-seed values
    let mut series: BTreeMap<(Method, u64, usize, Option<u32>, Option<usize>, Metric), Vec<f64>> = BTreeMap::new();
    let mut pooled: BTreeMap<(Method, u64, usize, u64), ModeTallies> = BTreeMap::new();
    for (&(method, d, steps, seed, subject), tallies) in cells {
        let p = pooled
            .entry((method, d, steps, seed))
            .or_insert([Tally::default(); Mode::COUNT]);
        for (a, b) in p.iter_mut().zip(tallies) {
            a.merge(b);
        }
        for r in [None].into_iter().chain(Mode::ALL.map(|m| Some(m.index()))) {
            let t = match r {
                None => total(tallies),
                Some(i) => tallies[i],
            };
            if let Some(m) = t.metrics() {
                for metric in Metric::ALL {
                    series.entry((method, d, steps, Some(subject), r, metric)).or_default().push(m.get(metric));
                }
            }
        }
    }
    for (&(method, d, steps, seed), tallies) in &pooled {
        let base = ResultRecord {
            method,
            subject: None,
            mode: None,
            metric: Metric::GaitAcc,
            value: 0.0,
            ci: None,
            duration_s: f64::from_bits(d),
            steps,
            seed: Some(seed),
        };
        for r in [None].into_iter().chain(Mode::ALL.map(|m| Some(m.index()))) {
            let t = match r {
                None => total(tallies),
                Some(i) => tallies[i],
            };
            if let Some(m) = t.metrics() {
                let mode = r.and_then(Mode::from_index);
                push_metrics(&mut out, &ResultRecord { mode, ..base.clone() }, &m);
                for metric in Metric::ALL {
                    series.entry((method, d, steps, None, r, metric)).or_default().push(m.get(metric));
                }
            }
        }
    }
    let single_seed = scenarios.iter().all(|s| s.seeds.len() < 2);
    for ((method, d, steps, subject, r, metric), values) in series {
        let (value, ci) = if single_seed || values.len() < 2 {
            (values.iter().sum::<f64>() / values.len() as f64, None)
        } else {
            let (m, h) = confidence_interval(&values)?;
            (m, Some(h))
        };
        out.push(ResultRecord {
            method,
            subject,
            mode: r.and_then(Mode::from_index),
            metric,
            value,
            ci,
            duration_s: f64::from_bits(d),
            steps,
            seed: None,
        });
    }
    Ok(out)
}

fn confusion_at_largest(cells: &BTreeMap<CellKey, ModeTallies>) -> Vec<(Method, ConfusionMatrix)> {
    let mut out = Vec::new();
    for method in Method::ALL {
        let keys: Vec<&CellKey> = cells.keys().filter(|k| k.0 == method).collect();
        let Some(point) = keys.iter().map(|k| (f64::from_bits(k.1), k.2)).reduce(|a, b| {
            if b.0 > a.0 || (b.0 == a.0 && b.1 > a.1) {
                b
            } else {
                a
            }
        }) else {
            continue;
        };
        let mut cm = ConfusionMatrix::default();
        for k in keys.into_iter().filter(|k| f64::from_bits(k.1) == point.0 && k.2 == point.1) {
            cm.merge(&total(&cells[k]).confusion);
        }
        out.push((method, cm));
    }
    out
}

/// Seed-averaged value and CI of one method/operating point, as in `summary.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryEntry {
    pub method: Method,
    pub duration_s: f64,
    pub steps: usize,
    pub metric: String,
    /// Mean over seeds of the pooled all-subject value.
    pub mean: f64,
    pub ci_over_seeds: Option<f64>,
    /// Mean over subjects of each subject's seed average.
    pub subject_mean: f64,
    pub ci_over_subjects: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub ci_level: f64,
    pub entries: Vec<SummaryEntry>,
}

pub fn summarize(records: &[ResultRecord]) -> Result<Summary> {
    let mut entries = Vec::new();
    let mut keys: Vec<(Method, u64, usize, Metric)> = records
        .iter()
        .filter(|r| r.mode.is_none() && r.seed.is_none() && r.subject.is_none())
        .map(|r| (r.method, r.duration_s.to_bits(), r.steps, r.metric))
        .collect();
    keys.dedup();
    for (method, d, steps, metric) in keys {
        let same = |r: &&ResultRecord| {
            r.method == method
                && r.duration_s.to_bits() == d
                && r.steps == steps
                && r.metric == metric
                && r.mode.is_none()
                && r.seed.is_none()
        };
        let pooled = records.iter().filter(same).find(|r| r.subject.is_none()).unwrap();
        let per_subject: Vec<f64> = records
            .iter()
            .filter(same)
            .filter(|r| r.subject.is_some())
            .map(|r| r.value)
            .collect();
        let (subject_mean, ci_over_subjects) = if per_subject.len() >= 2 {
            let (m, h) = confidence_interval(&per_subject)?;
            (m, Some(h))
        } else {
            (per_subject.iter().sum::<f64>() / per_subject.len().max(1) as f64, None)
        };
        entries.push(SummaryEntry {
            method,
            duration_s: f64::from_bits(d),
            steps,
            metric: metric.as_str().into(),
            mean: pooled.value,
            ci_over_seeds: pooled.ci,
            subject_mean,
            ci_over_subjects,
        });
    }
    Ok(Summary { ci_level: 0.95, entries })
}

/// Writes `results.csv`, `confusion.csv` and `summary.json` into `out_dir`.
pub fn emit_report(report: &LosoReport, out_dir: &Path) -> Result<()> {
    if report.records.is_empty() {
        return Err(Error::invalid("no records to report"));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut results = String::from(RESULTS_HEADER);
    results.push('\n');
    for r in &report.records {
        results.push_str(&r.to_csv_row());
        results.push('\n');
    }
    let path = out_dir.join("results.csv");
    fs::write(&path, results).map_err(|e| Error::io(&path, e))?;

    let mut confusion = String::from("method,true_phase,pred_phase,count\n");
    for (method, cm) in &report.confusion {
        for t in 0..N_PHASES {
            for p in 0..N_PHASES {
                confusion.push_str(&format!("{method},G{},G{},{}\n", t + 1, p + 1, cm.counts[t][p]));
            }
        }
    }
    let path = out_dir.join("confusion.csv");
    fs::write(&path, confusion).map_err(|e| Error::io(&path, e))?;

    let summary = summarize(&report.records)?;
    let path = out_dir.join("summary.json");
    fs::write(&path, serde_json::to_string_pretty(&summary)?).map_err(|e| Error::io(&path, e))?;
    Ok(())
}
