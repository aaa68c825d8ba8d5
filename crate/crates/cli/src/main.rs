use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use gaitmeta::baselines::pretrain;
use gaitmeta::dataset::{assemble, group_tasks, sample_episode, task_windows, EpisodeSpec, TaskEntry, WindowId};
use gaitmeta::eval::{
    emit_report, needed_models, run_loso_with, train_fold, ExperimentConfig, FoldModels, Method, ResultRecord,
    Scenario, ScenarioConfig, RESULTS_HEADER,
};
use gaitmeta::meta::{meta_train, TrainOutputs};
use gaitmeta::network::init_params;
use gaitmeta::objective::GaitLearner;
use gaitmeta::params::ParameterSet;
use gaitmeta::synth::{build_benchmark, mix_seed, Benchmark, BenchmarkConfig};

const SCHEMA_VERSION: u32 = 1;

#[derive(Parser)]
#[command(name = "gaitmeta", version, about = "Meta-learned gait phase estimation on a synthetic benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic benchmark and its manifest.
    Generate(Common),
    /// Meta-train (maml) or pre-train (supervised) and write a checkpoint.
    Train(Common),
    /// Leave-one-subject-out evaluation of a scenario.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// S1, S2 or S3; overrides `evaluate.scenario`.
        #[arg(long)]
        scenario: Option<String>,
    },
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; defaults apply to every omitted key.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; for `generate` this is the dataset directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Cohort seed for `generate`, training seed otherwise.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; 1 is bit-reproducible, as is any other count.
    #[arg(long)]
    threads: Option<usize>,
    /// Override a configuration key, e.g. `experiment.meta.epochs=10`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    schema_version: u32,
    #[serde(default)]
    cohort_seed: u64,
    #[serde(default)]
    benchmark: BenchmarkConfig,
    #[serde(default)]
    paths: Paths,
    #[serde(default)]
    experiment: ExperimentConfig,
    #[serde(default)]
    train: TrainSection,
    #[serde(default)]
    evaluate: EvaluateSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct Paths {
    dataset: PathBuf,
    out: PathBuf,
    /// Directory of per-fold checkpoints written by an earlier `evaluate`;
    /// fold models are trained when absent.
    checkpoints: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            dataset: "data".into(),
            out: "runs".into(),
            checkpoints: None,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum TrainMethod {
    #[default]
    Maml,
    Supervised,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TrainSection {
    method: TrainMethod,
    /// Subject excluded from training; none trains on everyone.
    held_out: Option<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct EvaluateSection {
    scenario: Scenario,
    /// Scenario defaults when omitted.
    durations: Option<Vec<f64>>,
    steps: Option<Vec<usize>>,
    methods: Vec<Method>,
    seeds: Vec<u64>,
}

impl Default for EvaluateSection {
    fn default() -> Self {
        let s = ScenarioConfig::new(Scenario::S3);
        Self {
            scenario: Scenario::S3,
            durations: None,
            steps: None,
            methods: s.methods,
            seeds: s.seeds,
        }
    }
}

impl EvaluateSection {
    fn scenario_config(&self) -> ScenarioConfig {
        let base = ScenarioConfig::new(self.scenario);
        ScenarioConfig {
            scenario: self.scenario,
            durations: self.durations.clone().unwrap_or(base.durations),
            steps: self.steps.clone().unwrap_or(base.steps),
            methods: self.methods.clone(),
            seeds: self.seeds.clone(),
        }
    }
}

/// Sets `a.b.c = value` in a JSON document, creating objects on the way.
fn set_path(doc: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut node = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if part.is_empty() {
            bail!("empty component in key {key:?}");
        }
        let obj = match node {
            Value::Object(map) => map,
            Value::Null => {
                *node = Value::Object(Default::default());
                node.as_object_mut().unwrap()
            }
            _ => bail!("{key:?}: {:?} is not an object", parts[..i].join(".")),
        };
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.entry(part.to_string()).or_insert(Value::Null);
    }
    Ok(())
}

fn load_config(common: &Common, seed_keys: &[&str]) -> Result<RunConfig> {
    let mut doc: Value = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => serde_json::json!({ "schema_version": SCHEMA_VERSION }),
    };
    for kv in &common.overrides {
        let (key, raw) = kv.split_once('=').with_context(|| format!("--set expects KEY=VALUE, got {kv:?}"))?;
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        set_path(&mut doc, key.trim(), value)?;
    }
    if let Some(seed) = common.seed {
        for key in seed_keys {
            set_path(&mut doc, key, Value::from(seed))?;
        }
    }
    let cfg: RunConfig = serde_json::from_value(doc).context("invalid configuration")?;
    if cfg.schema_version != SCHEMA_VERSION {
        bail!("unsupported schema_version {} (expected {SCHEMA_VERSION})", cfg.schema_version);
    }
    cfg.experiment.validate()?;
    Ok(cfg)
}

fn set_threads(threads: Option<usize>) -> Result<()> {
    if let Some(n) = threads {
        if n == 0 {
            bail!("--threads must be at least 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn out_dir(common: &Common, cfg: &RunConfig) -> PathBuf {
    common.out.clone().unwrap_or_else(|| cfg.paths.out.clone())
}

fn write_config(dir: &Path, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(cfg)?).with_context(|| format!("writing {}", path.display()))
}

fn load_benchmark(cfg: &RunConfig) -> Result<Benchmark> {
    Benchmark::load(&cfg.paths.dataset)
        .with_context(|| format!("loading the benchmark from {}", cfg.paths.dataset.display()))
}

fn cmd_generate(common: &Common) -> Result<()> {
    let cfg = load_config(common, &["cohort_seed"])?;
    let dir = common.out.clone().unwrap_or_else(|| cfg.paths.dataset.clone());
    let manifest = build_benchmark(cfg.cohort_seed, &cfg.benchmark, &dir)?;
    println!(
        "{} ({} subjects, {} sessions)",
        dir.join("manifest.json").display(),
        manifest.subjects.len(),
        manifest.sessions.len()
    );
    Ok(())
}

fn cmd_train(common: &Common) -> Result<()> {
    let cfg = load_config(common, &["experiment.meta.seed", "experiment.pretrain.seed"])?;
    let exp = &cfg.experiment;
    let bench = load_benchmark(&cfg)?;
    let out = out_dir(common, &cfg);
    write_config(&out, &cfg)?;
    let held_out = cfg.train.held_out;
    if let Some(s) = held_out {
        if !bench.subjects().contains(&s) {
            bail!("held-out subject {s} is not in the benchmark");
        }
    }
    let tasks: Vec<TaskEntry> = group_tasks(&bench.sessions)
        .into_iter()
        .filter(|t| Some(t.task.subject) != held_out)
        .collect();
    let learner = GaitLearner::new(exp.model.clone(), exp.loss)?;
    let k = exp.model.window_len;
    let (name, theta) = match cfg.train.method {
        TrainMethod::Maml => {
            let init = init_params(&exp.model, exp.meta.seed)?;
            let spec = EpisodeSpec {
                window_len: k,
                stride: exp.episode_stride,
                n_support: exp.meta.n_support,
                n_query: exp.meta.n_query,
            };
            let sample = |epoch: usize| {
                tasks
                    .iter()
                    .enumerate()
                    .map(|(i, t)| {
                        let seed = mix_seed(&[exp.meta.seed, epoch as u64, i as u64]);
                        sample_episode(&bench.sessions, t, &spec, seed)
                    })
                    .collect()
            };
            let checkpoint_dir = out.join("checkpoints");
            if exp.meta.checkpoint_every > 0 {
                fs::create_dir_all(&checkpoint_dir)?;
            }
            let outputs = TrainOutputs {
                log: Some(out.join("maml_log.csv")),
                checkpoint_dir: Some(checkpoint_dir),
            };
            ("maml", meta_train(&learner, &init, sample, &exp.meta, &outputs)?.0)
        }
        TrainMethod::Supervised => {
            let sessions: Vec<usize> = tasks.iter().flat_map(|t| t.sessions.iter().copied()).collect();
            let pool = task_windows(&bench.sessions, &sessions, k, exp.pretrain_stride)?;
            let init = init_params(&exp.model, exp.pretrain.seed)?;
            let batch = |idx: &[usize]| {
                let ids: Vec<WindowId> = idx.iter().map(|&i| pool[i]).collect();
                assemble(&bench.sessions, &ids, k)
            };
            let log = out.join("pretrain_log.csv");
            ("pretrained", pretrain(&learner, &init, pool.len(), batch, &exp.pretrain, Some(&log))?.0)
        }
    };
    let path = out.join(format!("{name}.mgait"));
    theta.save(&path)?;
    println!("{}", path.display());
    Ok(())
}

fn fold_checkpoint(dir: &Path, held_out: u32, kind: &str) -> PathBuf {
    dir.join(format!("fold{held_out:02}_{kind}.mgait"))
}

fn cmd_evaluate(common: &Common, scenario: Option<&str>) -> Result<()> {
    let mut cfg = load_config(common, &["experiment.meta.seed", "experiment.pretrain.seed"])?;
    if let Some(s) = scenario {
        let sc: Scenario = s.parse()?;
        if sc != cfg.evaluate.scenario {
            cfg.evaluate.durations = None;
            cfg.evaluate.steps = None;
        }
        cfg.evaluate.scenario = sc;
    }
    let exp = &cfg.experiment;
    let scenarios = [cfg.evaluate.scenario_config()];
    scenarios[0].validate()?;
    let bench = load_benchmark(&cfg)?;
    let out = out_dir(common, &cfg);
    write_config(&out, &cfg)?;
    let fold_dir = out.join("folds");
    fs::create_dir_all(&fold_dir)?;

    let tasks = group_tasks(&bench.sessions);
    let (need_maml, need_pre) = needed_models(&scenarios);
    let models = |held_out: u32| -> gaitmeta::Result<FoldModels> {
        let load = |kind: &str, needed: bool| -> gaitmeta::Result<Option<ParameterSet>> {
            match (&cfg.paths.checkpoints, needed) {
                (Some(dir), true) => ParameterSet::load(&fold_checkpoint(dir, held_out, kind)).map(Some),
                _ => Ok(None),
            }
        };
        let fold = if cfg.paths.checkpoints.is_some() {
            FoldModels {
                maml: load("maml", need_maml)?,
                maml_log: Vec::new(),
                pretrained: load("pretrained", need_pre)?,
                pretrain_log: Vec::new(),
            }
        } else {
            train_fold(&bench, &tasks, exp, held_out, need_maml, need_pre)?
        };
        if let Some(p) = &fold.maml {
            p.save(&fold_checkpoint(&fold_dir, held_out, "maml"))?;
        }
        if let Some(p) = &fold.pretrained {
            p.save(&fold_checkpoint(&fold_dir, held_out, "pretrained"))?;
        }
        Ok(fold)
    };
    let partial = out.join("partial_results.csv");
    fs::write(&partial, format!("{RESULTS_HEADER}\n"))?;
    let on_fold = |held_out: u32, records: &[ResultRecord]| -> gaitmeta::Result<()> {
        use std::io::Write;
        let mut f = fs::OpenOptions::new()
            .append(true)
            .open(&partial)
            .map_err(|e| gaitmeta::Error::Io { path: partial.clone(), source: e })?;
        for r in records {
            writeln!(f, "{}", r.to_csv_row()).map_err(|e| gaitmeta::Error::Io { path: partial.clone(), source: e })?;
        }
        eprintln!("fold {held_out} done");
        Ok(())
    };
    let report = run_loso_with(&bench, exp, &scenarios, models, on_fold)?;
    emit_report(&report, &out)?;
    fs::remove_file(&partial)?;
    println!("{}", out.join("results.csv").display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Generate(c) => {
            set_threads(c.threads)?;
            cmd_generate(c)
        }
        Command::Train(c) => {
            set_threads(c.threads)?;
            cmd_train(c)
        }
        Command::Evaluate { common, scenario } => {
            set_threads(common.threads)?;
            cmd_evaluate(common, scenario.as_deref())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
