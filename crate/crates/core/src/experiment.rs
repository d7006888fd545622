//! Experiment configuration, multi-seed runs, sweeps, comparisons and
//! plot-data export.
//!
//! A run directory holds:
//!
//! ```text
//! config.toml          snapshot sufficient to reproduce the run
//! summary.json         final accuracy per seed, mean and standard deviation
//! seed-<s>/metrics.jsonl   one RoundLog per round
//! seed-<s>/manifest.jsonl  one record per client task
//! seed-<s>/final.ckpt      global model checkpoint
//! ```

use std::fmt::Write as _;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::acgan::{AcganConfig, AcganModel, Group};
use crate::data::{make_synthetic_mixture, make_tiny_digits_with, LabeledDataset};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_on, proxy_fid, spike_ratio, test_union, EvalReport};
use crate::protocol::{run_round, ConsolidationConfig, RoundPlan, RoundRecord, ServerState};
use crate::rng::{derive_seed, rng_for, tag};
use crate::taskstream::{build_task_streams, LocalData, TaskStream};
use crate::trainers::{ClientState, Method, TrainerOptions};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Mixture,
    TinyDigits,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    /// Mixture only; tiny digits always has 10.
    pub num_classes: usize,
    pub samples_per_class: usize,
    /// Mixture only; tiny digits is 64-dimensional.
    pub data_dim: usize,
    /// Tiny digits only.
    pub noise_std: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            kind: DatasetKind::Mixture,
            num_classes: 10,
            samples_per_class: 400,
            data_dim: 4,
            noise_std: crate::data::DIGIT_NOISE_STD,
        }
    }
}

impl DatasetConfig {
    pub fn num_classes(&self) -> usize {
        match self.kind {
            DatasetKind::Mixture => self.num_classes,
            DatasetKind::TinyDigits => 10,
        }
    }

    pub fn data_dim(&self) -> usize {
        match self.kind {
            DatasetKind::Mixture => self.data_dim,
            DatasetKind::TinyDigits => 64,
        }
    }

    pub fn build(&self, seed: u64) -> Result<LabeledDataset> {
        match self.kind {
            DatasetKind::Mixture => {
                make_synthetic_mixture(self.num_classes, self.samples_per_class, self.data_dim, seed)
            }
            DatasetKind::TinyDigits => make_tiny_digits_with(self.samples_per_class, self.noise_std, seed),
        }
    }
}

/// Network sizes; the data dimension comes from the dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub noise_dim: usize,
    pub gen_hidden: usize,
    pub trunk_hidden: usize,
    pub feature_dim: usize,
    pub leak: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let a = AcganConfig::default();
        Self {
            noise_dim: a.noise_dim,
            gen_hidden: a.gen_hidden,
            trunk_hidden: a.trunk_hidden,
            feature_dim: a.feature_dim,
            leak: a.leak,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub no_consolidation: bool,
    pub no_consistency: bool,
    pub no_replay: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub mu: f64,
    pub consistency_weights: [f64; 3],
    pub kd_temperature: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        let t = TrainerOptions::default();
        Self {
            batch_size: t.batch_size,
            lr: t.lr,
            mu: t.mu,
            consistency_weights: t.consistency_weights,
            kd_temperature: t.kd_temperature,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Run directory name under `output_dir`; defaults to the method label.
    pub name: Option<String>,
    pub method: Method,
    pub num_clients: usize,
    pub classes_per_task: usize,
    pub num_tasks: usize,
    pub local_iterations: usize,
    pub rounds: usize,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    /// Evaluate the global model every this many rounds; the last round is always evaluated.
    pub eval_every: usize,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub training: TrainingConfig,
    pub consolidation: ConsolidationConfig,
    pub ablation: AblationConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: None,
            method: Method::Fedcil,
            num_clients: 5,
            classes_per_task: 2,
            num_tasks: 5,
            local_iterations: 40,
            rounds: 50,
            seeds: vec![1, 2, 3],
            output_dir: PathBuf::from("runs"),
            eval_every: 1,
            dataset: DatasetConfig::default(),
            model: ModelConfig::default(),
            training: TrainingConfig::default(),
            consolidation: ConsolidationConfig::default(),
            ablation: AblationConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.as_ref().display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_clients", self.num_clients),
            ("classes_per_task", self.classes_per_task),
            ("num_tasks", self.num_tasks),
            ("local_iterations", self.local_iterations),
            ("rounds", self.rounds),
            ("eval_every", self.eval_every),
            ("training.batch_size", self.training.batch_size),
            ("dataset.samples_per_class", self.dataset.samples_per_class),
            ("model.noise_dim", self.model.noise_dim),
            ("model.gen_hidden", self.model.gen_hidden),
            ("model.trunk_hidden", self.model.trunk_hidden),
            ("model.feature_dim", self.model.feature_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.rounds.is_multiple_of(self.num_tasks) {
            return Err(Error::Config(format!(
                "rounds ({}) must be divisible by num_tasks ({})",
                self.rounds, self.num_tasks
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        let needed = self.classes_per_task * self.num_tasks;
        if needed > self.dataset.num_classes() {
            return Err(Error::Config(format!(
                "{} tasks × {} classes need {needed} classes, dataset has {}",
                self.num_tasks,
                self.classes_per_task,
                self.dataset.num_classes()
            )));
        }
        if self.dataset.kind == DatasetKind::Mixture && (self.dataset.num_classes < 2 || self.dataset.data_dim < 2) {
            return Err(Error::Config("mixture needs ≥2 classes and ≥2 dimensions".into()));
        }
        for (name, v) in [
            ("training.lr", self.training.lr),
            ("consolidation.lr", self.consolidation.lr),
            ("training.kd_temperature", self.training.kd_temperature),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be a positive number")));
            }
        }
        if !(self.training.mu.is_finite() && self.training.mu >= 0.0) {
            return Err(Error::Config("training.mu must be non-negative".into()));
        }
        if self.training.consistency_weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config("consistency weights must be non-negative".into()));
        }
        if self.consolidation.batch_size == 0 {
            return Err(Error::Config("consolidation.batch_size must be positive".into()));
        }
        Ok(())
    }

    /// Method name plus active ablations, e.g. `fedcil-no_replay`.
    pub fn label(&self) -> String {
        if let Some(n) = &self.name {
            return n.clone();
        }
        let mut s = self.method.name().to_string();
        for (on, tag) in [
            (self.ablation.no_consolidation, "no_consolidation"),
            (self.ablation.no_consistency, "no_consistency"),
            (self.ablation.no_replay, "no_replay"),
        ] {
            if on {
                s.push('-');
                s.push_str(tag);
            }
        }
        s
    }

    pub fn rounds_per_task(&self) -> usize {
        self.rounds / self.num_tasks
    }

    pub fn acgan_config(&self) -> AcganConfig {
        AcganConfig {
            data_dim: self.dataset.data_dim(),
            noise_dim: self.model.noise_dim,
            gen_hidden: self.model.gen_hidden,
            trunk_hidden: self.model.trunk_hidden,
            feature_dim: self.model.feature_dim,
            leak: self.model.leak,
        }
    }

    pub fn trainer_options(&self) -> TrainerOptions {
        TrainerOptions {
            batch_size: self.training.batch_size,
            lr: self.training.lr,
            mu: self.training.mu,
            consistency_weights: self.training.consistency_weights,
            no_consistency: self.ablation.no_consistency,
            no_replay: self.ablation.no_replay,
            kd_temperature: self.training.kd_temperature,
        }
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join(self.label())
    }
}

/// One line of `metrics.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    pub seed: u64,
    pub protocol: RoundRecord,
    pub eval: Option<EvalReport>,
    /// Global generator against the test union, for methods that synchronise a generator.
    pub proxy_fid: Option<f64>,
}

/// In-memory result of one seed.
#[derive(Clone, Debug)]
pub struct SeedResult {
    pub seed: u64,
    pub logs: Vec<RoundLog>,
    pub streams: Vec<TaskStream>,
    pub final_model: AcganModel,
    pub final_eval: EvalReport,
    pub final_proxy_fid: Option<f64>,
}

impl SeedResult {
    pub fn final_accuracy(&self) -> f64 {
        self.final_eval.accuracy
    }

    /// Classification-loss spike ratio averaged over clients.
    pub fn spike_ratio(&self, round_len: usize) -> Result<f64> {
        let clients = self.logs.first().map_or(0, |l| l.protocol.clients.len());
        if clients == 0 {
            return Err(Error::Evaluation("no client traces".into()));
        }
        let mut total = 0.0;
        for c in 0..clients {
            let trace: Vec<f64> = self
                .logs
                .iter()
                .flat_map(|l| l.protocol.clients[c].steps.iter().map(|s| s.l_ce))
                .collect();
            total += spike_ratio(&trace, round_len)?;
        }
        Ok(total / clients as f64)
    }

    /// Global accuracy after each evaluated round.
    pub fn accuracy_curve(&self) -> Vec<f64> {
        self.logs
            .iter()
            .filter_map(|l| l.eval.as_ref().map(|e| e.accuracy))
            .collect()
    }

    pub fn metrics_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for l in &self.logs {
            out.push_str(&serde_json::to_string(l).map_err(|e| Error::Format(e.to_string()))?);
            out.push('\n');
        }
        Ok(out)
    }
}

/// Builds the dataset, streams, server and clients for `seed` and runs every round.
pub fn run_seed(config: &ExperimentConfig, seed: u64) -> Result<SeedResult> {
    config.validate()?;
    let dataset = Arc::new(config.dataset.build(seed)?);
    let streams = build_task_streams(
        &dataset,
        config.num_clients,
        config.classes_per_task,
        config.num_tasks,
        seed,
    )?;
    let acfg = config.acgan_config();
    let method = config.method;
    let global = AcganModel::new(acfg.clone(), &[], &mut rng_for(seed, &[tag::INIT]))?;
    let mut server = ServerState::new(
        global,
        config.consolidation.clone(),
        method.consolidates() && !config.ablation.no_consolidation,
        method.sync_group(),
        seed,
    );
    let opts = config.trainer_options();
    let mut clients = streams
        .iter()
        .map(|s| {
            let data = LocalData::new(dataset.clone(), Arc::new(s.clone()));
            ClientState::new(s.client_id, method, opts.clone(), acfg.clone(), data, seed)
        })
        .collect::<Result<Vec<_>>>()?;
    let pv = server.broadcast();
    for c in &mut clients {
        c.receive_broadcast(&pv, 0)?;
    }

    let per_task = config.rounds_per_task();
    let selected: Vec<usize> = (0..clients.len()).collect();
    let with_generator = method.sync_group() == Group::All;
    let mut logs = Vec::with_capacity(config.rounds);
    for round in 0..config.rounds {
        let plan = RoundPlan {
            round,
            local_iterations: config.local_iterations,
            selected: selected.clone(),
            task_boundary: (round + 1) % per_task == 0,
        };
        let record = run_round(&mut server, &mut clients, &plan)?;
        let last = round + 1 == config.rounds;
        let (eval, fid) = if last || (round + 1) % config.eval_every == 0 {
            let tasks: Vec<usize> = record.clients.iter().map(|c| c.task).collect();
            let (x, y) = test_union(&dataset, &streams, &tasks)?;
            let mut eval = evaluate_on(server.model(), &x, &y, dataset.num_classes(), round)?;
            eval.local_accuracy = record.clients.iter().map(|c| c.local_accuracy).collect();
            let fid = if with_generator {
                let g = server
                    .model()
                    .generate(&y, derive_seed(seed, &[tag::EVAL, round as u64]))?;
                Some(proxy_fid(&x, &g)?)
            } else {
                None
            };
            (Some(eval), fid)
        } else {
            (None, None)
        };
        logs.push(RoundLog {
            seed,
            protocol: record,
            eval,
            proxy_fid: fid,
        });
    }
    let last = logs.last().expect("at least one round");
    let final_eval = last.eval.clone().expect("last round is evaluated");
    let final_proxy_fid = last.proxy_fid;
    Ok(SeedResult {
        seed,
        logs,
        streams,
        final_model: server.model().clone(),
        final_eval,
        final_proxy_fid,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub label: String,
    pub method: Method,
    pub seeds: Vec<u64>,
    pub final_accuracy: Vec<f64>,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub spike_ratio: Vec<f64>,
    pub final_proxy_fid: Vec<Option<f64>>,
}

#[derive(Clone, Debug)]
pub struct RunArtifact {
    pub dir: PathBuf,
    pub summary: RunSummary,
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn summarize(config: &ExperimentConfig, results: &[SeedResult]) -> Result<RunSummary> {
    let acc: Vec<f64> = results.iter().map(SeedResult::final_accuracy).collect();
    let (mean, std) = mean_std(&acc);
    Ok(RunSummary {
        label: config.label(),
        method: config.method,
        seeds: results.iter().map(|r| r.seed).collect(),
        final_accuracy: acc,
        mean_accuracy: mean,
        std_accuracy: std,
        spike_ratio: results
            .iter()
            .map(|r| r.spike_ratio(config.local_iterations))
            .collect::<Result<_>>()?,
        final_proxy_fid: results.iter().map(|r| r.final_proxy_fid).collect(),
    })
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn jsonl<T: Serialize>(items: &[T]) -> Result<String> {
    let mut out = String::new();
    for it in items {
        out.push_str(&serde_json::to_string(it).map_err(|e| Error::Format(e.to_string()))?);
        out.push('\n');
    }
    Ok(out)
}

/// Runs every seed and writes all artifacts under [`ExperimentConfig::run_dir`].
pub fn run(config: &ExperimentConfig) -> Result<RunArtifact> {
    config.validate()?;
    let dir = config.run_dir();
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write(&dir.join("config.toml"), config.to_toml_string()?)?;
    let mut results = Vec::with_capacity(config.seeds.len());
    for &seed in &config.seeds {
        let r = run_seed(config, seed)?;
        let seed_dir = dir.join(format!("seed-{seed}"));
        std::fs::create_dir_all(&seed_dir).map_err(|e| Error::io(&seed_dir, e))?;
        write(&seed_dir.join("metrics.jsonl"), r.metrics_jsonl()?)?;
        let manifest: Vec<_> = r.streams.iter().flat_map(|s| s.manifest()).collect();
        write(&seed_dir.join("manifest.jsonl"), jsonl(&manifest)?)?;
        r.final_model
            .to_parameter_vector(Group::All)
            .write_checkpoint(seed_dir.join("final.ckpt"))?;
        results.push(r);
    }
    let summary = summarize(config, &results)?;
    write(
        &dir.join("summary.json"),
        serde_json::to_string_pretty(&summary).map_err(|e| Error::Format(e.to_string()))?,
    )?;
    Ok(RunArtifact { dir, summary })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub local_iterations: usize,
    pub rounds: usize,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    /// Variance of round-to-round global accuracy changes, averaged over seeds.
    pub delta_variance: f64,
}

/// Variance of successive differences of `curve`.
pub fn delta_variance(curve: &[f64]) -> f64 {
    let deltas: Vec<f64> = curve.windows(2).map(|w| w[1] - w[0]).collect();
    if deltas.is_empty() {
        return 0.0;
    }
    let n = deltas.len() as f64;
    let mean = deltas.iter().sum::<f64>() / n;
    deltas.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n
}

/// Runs `base` once per value of `T`. With `hold_budget`, rounds are rescaled
/// so that `T × R` matches the base configuration (rounded to a multiple of
/// the task count); otherwise `R` stays fixed.
pub fn sweep_local_iterations(
    base: &ExperimentConfig,
    t_values: &[usize],
    hold_budget: bool,
) -> Result<Vec<SweepRow>> {
    base.validate()?;
    if t_values.is_empty() {
        return Err(Error::Config("no local-iteration values to sweep".into()));
    }
    let budget = base.local_iterations * base.rounds;
    let mut rows = Vec::with_capacity(t_values.len());
    for &t in t_values {
        let mut cfg = base.clone();
        cfg.local_iterations = t;
        if hold_budget && t != base.local_iterations {
            let per_task = (budget / t.max(1) / base.num_tasks).max(1);
            cfg.rounds = per_task * base.num_tasks;
        }
        cfg.name = Some(format!("{}-T{t}", base.label()));
        cfg.validate()?;
        let results = cfg
            .seeds
            .iter()
            .map(|&s| run_seed(&cfg, s))
            .collect::<Result<Vec<_>>>()?;
        let acc: Vec<f64> = results.iter().map(SeedResult::final_accuracy).collect();
        let (mean, std) = mean_std(&acc);
        let dv = results
            .iter()
            .map(|r| delta_variance(&r.accuracy_curve()))
            .sum::<f64>()
            / results.len() as f64;
        rows.push(SweepRow {
            local_iterations: t,
            rounds: cfg.rounds,
            mean_accuracy: mean,
            std_accuracy: std,
            delta_variance: dv,
        });
    }
    Ok(rows)
}

/// Runs each configuration over its seeds and reports mean ± std of the final accuracy.
pub fn compare_methods(configs: &[ExperimentConfig]) -> Result<Vec<RunSummary>> {
    for c in configs {
        c.validate()?;
    }
    configs
        .iter()
        .map(|c| {
            let results = c
                .seeds
                .iter()
                .map(|&s| run_seed(c, s))
                .collect::<Result<Vec<_>>>()?;
            summarize(c, &results)
        })
        .collect()
}

/// Full FedCIL and its three single-component ablations.
pub fn ablation_set(base: &ExperimentConfig) -> Vec<ExperimentConfig> {
    let mut full = base.clone();
    full.method = Method::Fedcil;
    full.name = None;
    full.ablation = AblationConfig::default();
    let with = |f: fn(&mut AblationConfig)| {
        let mut c = full.clone();
        f(&mut c.ablation);
        c
    };
    vec![
        full.clone(),
        with(|a| a.no_consolidation = true),
        with(|a| a.no_consistency = true),
        with(|a| a.no_replay = true),
    ]
}

pub fn summary_csv(rows: &[RunSummary]) -> String {
    let mut out = String::from("label,method,mean_accuracy,std_accuracy,seeds,final_accuracy\n");
    for r in rows {
        let per_seed: Vec<String> = r.final_accuracy.iter().map(|a| format!("{a:.6}")).collect();
        let seeds: Vec<String> = r.seeds.iter().map(u64::to_string).collect();
        let _ = writeln!(
            out,
            "{},{},{:.6},{:.6},{},{}",
            r.label,
            r.method,
            r.mean_accuracy,
            r.std_accuracy,
            seeds.join(" "),
            per_seed.join(" ")
        );
    }
    out
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("local_iterations,rounds,mean_accuracy,std_accuracy,delta_variance\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{:.6},{:.6},{:.8}",
            r.local_iterations, r.rounds, r.mean_accuracy, r.std_accuracy, r.delta_variance
        );
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlotKind {
    LossTrace,
    GradNorm,
    FidTrace,
    Confusion,
    PostSyncAccuracy,
}

impl PlotKind {
    pub const ALL: [PlotKind; 5] = [
        PlotKind::LossTrace,
        PlotKind::GradNorm,
        PlotKind::FidTrace,
        PlotKind::Confusion,
        PlotKind::PostSyncAccuracy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PlotKind::LossTrace => "loss_trace",
            PlotKind::GradNorm => "grad_norm",
            PlotKind::FidTrace => "fid_trace",
            PlotKind::Confusion => "confusion",
            PlotKind::PostSyncAccuracy => "post_sync_accuracy",
        }
    }
}

impl FromStr for PlotKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PlotKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = PlotKind::ALL.iter().map(|k| k.name()).collect();
                Error::Usage(format!("unknown plot kind {s:?}; expected one of {}", names.join(", ")))
            })
    }
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<RoundLog>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut logs = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let log = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), i + 1)))?;
        logs.push(log);
    }
    Ok(logs)
}

/// CSV text for `kind` from one seed's round logs.
pub fn plot_csv(logs: &[RoundLog], kind: PlotKind) -> Result<String> {
    let mut out = String::new();
    match kind {
        PlotKind::LossTrace | PlotKind::GradNorm => {
            let col = if kind == PlotKind::LossTrace { "l_ce,l_dis,l_gen" } else { "grad_norm" };
            let _ = writeln!(out, "round,client,iter,{col}");
            for l in logs {
                for c in &l.protocol.clients {
                    for s in &c.steps {
                        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
                        let _ = if kind == PlotKind::LossTrace {
                            writeln!(
                                out,
                                "{},{},{},{},{},{}",
                                l.protocol.round,
                                c.client_id,
                                s.iter,
                                s.l_ce,
                                opt(s.l_dis),
                                opt(s.l_gen)
                            )
                        } else {
                            writeln!(out, "{},{},{},{}", l.protocol.round, c.client_id, s.iter, s.grad_norm)
                        };
                    }
                }
            }
        }
        PlotKind::FidTrace => {
            out.push_str("round,proxy_fid\n");
            for l in logs {
                if let Some(f) = l.proxy_fid {
                    let _ = writeln!(out, "{},{f}", l.protocol.round);
                }
            }
        }
        PlotKind::Confusion => {
            let eval = logs
                .iter()
                .rev()
                .find_map(|l| l.eval.as_ref())
                .ok_or_else(|| Error::Evaluation("no evaluated round in log".into()))?;
            let c = eval.confusion.len();
            let header: Vec<String> = (0..c).map(|t| format!("true_{t}")).collect();
            let _ = writeln!(out, "predicted,{}", header.join(","));
            for (p, row) in eval.confusion.iter().enumerate() {
                let cells: Vec<String> = row.iter().map(u64::to_string).collect();
                let _ = writeln!(out, "{p},{}", cells.join(","));
            }
        }
        PlotKind::PostSyncAccuracy => {
            out.push_str("round,client,task,post_sync_accuracy,local_accuracy\n");
            for l in logs {
                for c in &l.protocol.clients {
                    let _ = writeln!(
                        out,
                        "{},{},{},{},{}",
                        l.protocol.round, c.client_id, c.task, c.post_sync_accuracy, c.local_accuracy
                    );
                }
            }
        }
    }
    Ok(out)
}

/// Writes `<kind>-seed-<s>.csv` into `out_dir` for every seed directory of `run_dir`.
pub fn export_plot_data(run_dir: impl AsRef<Path>, kind: PlotKind, out_dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let run_dir = run_dir.as_ref();
    let out_dir = out_dir.as_ref();
    let mut seed_dirs: Vec<PathBuf> = std::fs::read_dir(run_dir)
        .map_err(|e| Error::io(run_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && p.join("metrics.jsonl").is_file())
        .collect();
    seed_dirs.sort();
    if seed_dirs.is_empty() {
        return Err(Error::Usage(format!("{} holds no seed runs", run_dir.display())));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::with_capacity(seed_dirs.len());
    for d in seed_dirs {
        let logs = read_metrics(d.join("metrics.jsonl"))?;
        let stem = d.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let path = out_dir.join(format!("{}-{stem}.csv", kind.name()));
        write(&path, plot_csv(&logs, kind)?)?;
        written.push(path);
    }
    Ok(written)
}
