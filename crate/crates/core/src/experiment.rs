//! Experiment configs and the subcommands behind the command-line tool.
//!
//! Every subcommand reads one JSON [`ExperimentConfig`] and writes its
//! artifacts under the output directory:
//!
//! | subcommand | artifacts |
//! |---|---|
//! | `gen-data` | dataset JSON-lines files at the configured paths |
//! | `pretrain` | `backbone.ckpt`, `pretrain_history.csv` |
//! | `finetune` | `results.csv`, `timings.csv`, `runs/<tag>/seed<k>/{history.csv,delta.ckpt}` |
//! | `ablate` | `ablate.csv`, `ablate_timings.csv`, `ablate/<variant>/seed<k>/...` |
//! | `diagnose` | `diagnose.csv`, `hist/<tag>_seed<k>.csv`, `hist/overlay_seed<k>.svg` |
//! | `profile` | `profile.csv` |
//! | `report` | `report.csv` (and `ablate_report.csv` when ablations exist) |
//!
//! CSV files carry a `digest` column holding the config digest. Wall-clock
//! measurements are kept out of `results.csv` so that it is reproducible
//! byte for byte.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{gen_data, split, Dataset, GenConfig};
use crate::diagnostics::{
    extract_features, feature_shift, load_checkpoint, performance_gap, profile, save_checkpoint, save_delta, CheckpointKind,
    FeatureSample, Histogram, Score,
};
use crate::error::{bail, LabError, Result};
use crate::graph::Graph;
use crate::model::{pretrain_masked_nodes, HeadKind, Model, ModelConfig, PretrainConfig, TaskKind};
use crate::peft::{instrument, Ablations, Insertion, Method, PeftSpec};
use crate::training::{evaluate, fit, Metric, TrainConfig};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataPaths {
    /// Pretraining corpus; labels are ignored.
    pub pretrain: String,
    pub train: String,
    pub valid: String,
    pub test: String,
}

/// How `gen-data` produces the files named in [`DataPaths`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratePlan {
    pub task: GenConfig,
    pub pretrain: Option<GenConfig>,
    pub ratios: [f64; 3],
    pub split_seed: u64,
}

impl Default for GeneratePlan {
    fn default() -> Self {
        GeneratePlan {
            task: GenConfig::default(),
            pretrain: None,
            ratios: [0.8, 0.1, 0.1],
            split_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReportOptions {
    pub bins: usize,
    pub eps: f64,
    /// Logarithm base of JS divergences.
    pub js_base: f64,
    pub profile_passes: usize,
    /// Spec the ablation grid is built around; defaults to a rank-4 G-Adapter.
    pub ablate_base: Option<PeftSpec>,
}

impl Default for ReportOptions {
    fn default() -> Self {
        ReportOptions {
            bins: 100,
            eps: 1e-8,
            js_base: std::f64::consts::E,
            profile_passes: 100,
            ablate_base: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub name: String,
    pub data: DataPaths,
    pub generate: Option<GeneratePlan>,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub peft: Vec<PeftSpec>,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    pub output: String,
    pub report: ReportOptions,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            name: "experiment".into(),
            data: DataPaths::default(),
            generate: None,
            model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
            peft: Vec::new(),
            train: TrainConfig::default(),
            seeds: (0..6).collect(),
            output: "out".into(),
            report: ReportOptions::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| LabError::Config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.seeds.is_empty() {
            bail!(Config, "seeds list is empty");
        }
        for spec in &self.peft {
            spec.validate(&self.model)?;
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON form, ignoring the output location.
    pub fn digest(&self) -> String {
        let mut canonical = self.clone();
        canonical.output.clear();
        let json = serde_json::to_string(&canonical).expect("config serializes");
        let hash = Sha256::digest(json.as_bytes());
        hash.iter().fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Subcommand {
    GenData,
    Pretrain,
    Finetune,
    Ablate,
    Diagnose,
    Profile,
    Report,
}

impl std::str::FromStr for Subcommand {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "gen-data" => Subcommand::GenData,
            "pretrain" => Subcommand::Pretrain,
            "finetune" => Subcommand::Finetune,
            "ablate" => Subcommand::Ablate,
            "diagnose" => Subcommand::Diagnose,
            "profile" => Subcommand::Profile,
            "report" => Subcommand::Report,
            _ => bail!(Config, "unknown subcommand '{s}'"),
        })
    }
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Overrides the config's output directory.
    pub out: Option<PathBuf>,
    /// Worker slots for independent runs; 0 or 1 runs serially.
    pub jobs: usize,
    pub seed_offset: u64,
}

/// A loaded config with every path resolved.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub digest: String,
    base_dir: PathBuf,
    pub out: PathBuf,
    jobs: usize,
}

impl Experiment {
    pub fn load(config_path: &Path, options: &RunOptions) -> Result<Self> {
        let text = std::fs::read_to_string(config_path).map_err(|e| LabError::io(config_path, e))?;
        let config = ExperimentConfig::from_json(&text)?;
        let base_dir = config_path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self::new(config, base_dir, options))
    }

    /// Paths in `config` are resolved against `base_dir`.
    pub fn new(mut config: ExperimentConfig, base_dir: PathBuf, options: &RunOptions) -> Self {
        for s in &mut config.seeds {
            *s += options.seed_offset;
        }
        let out = options.out.clone().unwrap_or_else(|| base_dir.join(&config.output));
        Experiment {
            digest: config.digest(),
            config,
            base_dir,
            out,
            jobs: options.jobs,
        }
    }

    fn path(&self, p: &str) -> Result<PathBuf> {
        if p.is_empty() {
            bail!(Config, "a required data path is not set");
        }
        Ok(self.base_dir.join(p))
    }

    fn out_path(&self, rel: &str) -> Result<PathBuf> {
        let p = self.out.join(rel);
        if let Some(parent) = p.parent() {
            std::fs::create_dir_all(parent).map_err(|e| LabError::io(parent, e))?;
        }
        Ok(p)
    }

    fn write(&self, rel: &str, bytes: &[u8]) -> Result<PathBuf> {
        let p = self.out_path(rel)?;
        std::fs::write(&p, bytes).map_err(|e| LabError::io(&p, e))?;
        Ok(p)
    }

    fn write_csv(&self, rel: &str, header: &[&str], rows: &[Vec<String>]) -> Result<PathBuf> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| LabError::Report(format!("writing {rel}: {e}"));
        w.write_record(std::iter::once("digest").chain(header.iter().copied())).map_err(csv_err)?;
        for row in rows {
            w.write_record(std::iter::once(self.digest.as_str()).chain(row.iter().map(String::as_str)))
                .map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| LabError::Report(format!("writing {rel}: {e}")))?;
        self.write(rel, &bytes)
    }

    pub fn run(&self, command: Subcommand) -> Result<()> {
        log::info!("{command:?} with config digest {}", &self.digest[..12]);
        match command {
            Subcommand::GenData => self.gen_data(),
            Subcommand::Pretrain => self.pretrain().map(|_| ()),
            Subcommand::Finetune => self.finetune().map(|_| ()),
            Subcommand::Ablate => self.ablate().map(|_| ()),
            Subcommand::Diagnose => self.diagnose().map(|_| ()),
            Subcommand::Profile => self.profile().map(|_| ()),
            Subcommand::Report => self.report().map(|_| ()),
        }
    }

    pub fn gen_data(&self) -> Result<()> {
        let Some(plan) = &self.config.generate else {
            bail!(Config, "config has no 'generate' section");
        };
        let ds = gen_data(&plan.task)?;
        let [train, valid, test] = split(&ds, plan.ratios, plan.split_seed)?;
        for (part, path) in [(&train, &self.config.data.train), (&valid, &self.config.data.valid), (&test, &self.config.data.test)] {
            part.write(self.path(path)?)?;
        }
        if let Some(corpus) = &plan.pretrain {
            gen_data(corpus)?.write(self.path(&self.config.data.pretrain)?)?;
        }
        Ok(())
    }

    fn read(&self, path: &str) -> Result<Dataset> {
        Dataset::read(self.path(path)?)
    }

    fn backbone_config(&self) -> ModelConfig {
        ModelConfig {
            head: HeadKind::MaskedNode,
            ..self.config.model.clone()
        }
    }

    /// Pretrains the backbone and writes `backbone.ckpt`.
    pub fn pretrain(&self) -> Result<Model> {
        let corpus = self.read(&self.config.data.pretrain)?;
        let mut model = Model::new(self.backbone_config())?;
        let history = pretrain_masked_nodes(&mut model, &corpus.graphs, &self.config.pretrain)?;
        self.write("backbone.ckpt", &save_checkpoint(&model, CheckpointKind::Full)?)?;
        let rows: Vec<Vec<String>> = history
            .iter()
            .enumerate()
            .map(|(e, l)| vec![e.to_string(), l.to_string()])
            .collect();
        self.write_csv("pretrain_history.csv", &["epoch", "loss"], &rows)?;
        Ok(model)
    }

    pub fn load_backbone(&self) -> Result<Model> {
        let path = self.out.join("backbone.ckpt");
        if !path.exists() {
            bail!(Load, "missing backbone checkpoint {}; run pretrain first", path.display());
        }
        let bytes = std::fs::read(&path).map_err(|e| LabError::io(&path, e))?;
        load_checkpoint(&bytes, &Model::new(self.backbone_config())?)
    }

    fn task_data(&self) -> Result<TaskData> {
        let train = self.read(&self.config.data.train)?;
        let valid = self.read(&self.config.data.valid)?;
        let test = self.read(&self.config.data.test)?;
        if valid.task != train.task || test.task != train.task {
            bail!(Data, "train, valid and test sets have different task kinds");
        }
        Ok(TaskData {
            task: train.task,
            train: train.graphs,
            valid: valid.graphs,
            test: test.graphs,
        })
    }

    fn execute(&self, jobs: &[RunJob], backbone: &Model, data: &TaskData, dir: &str) -> Result<Vec<RunOutcome>> {
        let ctx = RunContext {
            backbone,
            data,
            model: &self.config.model,
            train: &self.config.train,
        };
        let outcomes: Vec<RunOutcome> = if self.jobs > 1 {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(self.jobs)
                .build()
                .map_err(|e| LabError::Config(format!("thread pool: {e}")))?;
            pool.install(|| jobs.par_iter().map(|j| run_job(&ctx, j)).collect::<Result<_>>())?
        } else {
            jobs.iter().map(|j| run_job(&ctx, j)).collect::<Result<_>>()?
        };
        for o in &outcomes {
            let run_dir = format!("{dir}/{}/seed{}", o.job.variant, o.job.seed);
            self.write(&format!("{run_dir}/delta.ckpt"), &o.delta)?;
            self.write_csv(&format!("{run_dir}/history.csv"), &["epoch", "train_loss", "eval_metric"], &o.history)?;
        }
        Ok(outcomes)
    }

    /// Runs every (spec, seed) pair.
    pub fn finetune(&self) -> Result<Vec<RunOutcome>> {
        if self.config.peft.is_empty() {
            bail!(Config, "no fine-tuning specs configured");
        }
        let backbone = self.load_backbone()?;
        let data = self.task_data()?;
        let jobs: Vec<RunJob> = self
            .config
            .peft
            .iter()
            .flat_map(|spec| {
                self.config.seeds.iter().map(|&seed| RunJob {
                    variant: spec.tag(),
                    spec: spec.clone(),
                    seed,
                })
            })
            .collect();
        let outcomes = self.execute(&jobs, &backbone, &data, "runs")?;
        self.write_results("results.csv", "timings.csv", &outcomes)?;
        Ok(outcomes)
    }

    /// Insertion-position and component ablations around one spec.
    pub fn ablate(&self) -> Result<Vec<RunOutcome>> {
        let base = self
            .config
            .report
            .ablate_base
            .clone()
            .unwrap_or_else(|| PeftSpec::new(Method::Gadapter, 4));
        let grid = ablation_grid(&base);
        let backbone = self.load_backbone()?;
        let data = self.task_data()?;
        let jobs: Vec<RunJob> = grid
            .iter()
            .flat_map(|(variant, spec)| {
                self.config.seeds.iter().map(|&seed| RunJob {
                    variant: variant.clone(),
                    spec: spec.clone(),
                    seed,
                })
            })
            .collect();
        for (_, spec) in &grid {
            spec.validate(&self.config.model)?;
        }
        let outcomes = self.execute(&jobs, &backbone, &data, "ablate")?;
        self.write_results("ablate.csv", "ablate_timings.csv", &outcomes)?;
        Ok(outcomes)
    }

    fn write_results(&self, results: &str, timings: &str, outcomes: &[RunOutcome]) -> Result<()> {
        let rows: Vec<Vec<String>> = outcomes.iter().map(RunOutcome::csv_row).collect();
        self.write_csv(results, &RESULT_HEADER, &rows)?;
        let times: Vec<Vec<String>> = outcomes
            .iter()
            .map(|o| vec![o.job.variant.clone(), o.job.seed.to_string(), format!("{:.3}", o.wall_seconds)])
            .collect();
        self.write_csv(timings, &["variant", "seed", "wall_seconds"], &times)?;
        Ok(())
    }

    /// Rebuilds the fine-tuned model of one finetune run from its delta.
    pub fn load_run(&self, backbone: &Model, task: TaskKind, spec: &PeftSpec, seed: u64) -> Result<Model> {
        let path = self.out.join(format!("runs/{}/seed{seed}/delta.ckpt", spec.tag()));
        if !path.exists() {
            bail!(Load, "missing run checkpoint {}; run finetune first", path.display());
        }
        let bytes = std::fs::read(&path).map_err(|e| LabError::io(&path, e))?;
        let base = fresh_model(backbone, &self.config.model, task, spec, seed)?;
        load_checkpoint(&bytes, &base)
    }

    /// JS divergence of every method's test-set features against full
    /// fine-tuning, per seed.
    pub fn diagnose(&self) -> Result<Vec<ShiftRow>> {
        let Some(full) = self.config.peft.iter().find(|s| s.method == Method::Full) else {
            bail!(Config, "diagnose needs a full fine-tuning spec in 'peft'");
        };
        let backbone = self.load_backbone()?;
        let data = self.task_data()?;
        let opts = &self.config.report;
        let mut rows = Vec::new();
        for &seed in &self.config.seeds {
            let reference = self.load_run(&backbone, data.task, full, seed)?;
            let ref_features = extract_features(&reference, &reference.prepare_all(&data.test)?)?;
            let mut curves: Vec<(String, Histogram)> = Vec::new();
            let mut compare = |tag: String, features: Vec<FeatureSample>, curves: &mut Vec<(String, Histogram)>| -> Result<()> {
                let (_, h_ref, h) = feature_shift(&ref_features, &features, opts.bins, opts.eps)?;
                let js = crate::diagnostics::js_divergence_base(&h_ref, &h, opts.js_base)?;
                if curves.is_empty() {
                    curves.push((full.tag(), h_ref.clone()));
                }
                self.write_histogram(&format!("hist/{tag}_seed{seed}.csv"), &h)?;
                curves.push((tag.clone(), h));
                rows.push(ShiftRow { tag, seed, js });
                Ok(())
            };
            let pre = extract_features(&backbone, &backbone.prepare_all(&data.test)?)?;
            compare("pretrained".into(), pre, &mut curves)?;
            for spec in self.config.peft.iter().filter(|s| s.method != Method::Full) {
                let model = self.load_run(&backbone, data.task, spec, seed)?;
                let features = extract_features(&model, &model.prepare_all(&data.test)?)?;
                compare(spec.tag(), features, &mut curves)?;
            }
            self.write(&format!("hist/overlay_seed{seed}.svg"), overlay_svg(&curves).as_bytes())?;
        }
        let csv: Vec<Vec<String>> = rows
            .iter()
            .map(|r| vec![r.tag.clone(), r.seed.to_string(), r.js.to_string(), self.config.report.js_base.to_string()])
            .collect();
        self.write_csv("diagnose.csv", &["method", "seed", "js_vs_full", "log_base"], &csv)?;
        Ok(rows)
    }

    fn write_histogram(&self, rel: &str, h: &Histogram) -> Result<()> {
        let rows: Vec<Vec<String>> = (0..h.bins())
            .map(|i| vec![h.edges[i].to_string(), h.edges[i + 1].to_string(), h.probs[i].to_string()])
            .collect();
        self.write_csv(rel, &["bin_lo", "bin_hi", "prob"], &rows)?;
        Ok(())
    }

    /// Inference time, checkpoint sizes and trainable ratio for every spec,
    /// using the first seed's runs.
    pub fn profile(&self) -> Result<Vec<(String, crate::diagnostics::Profile)>> {
        let backbone = self.load_backbone()?;
        let data = self.task_data()?;
        let seed = self.config.seeds[0];
        let mut out = Vec::new();
        let plain = fresh_model(&backbone, &self.config.model, data.task, &PeftSpec::new(Method::Full, 1), seed)?;
        let inputs = plain.prepare_all(&data.test)?;
        out.push(("backbone".to_string(), profile(&plain, &inputs, data.task, self.config.report.profile_passes)?));
        for spec in &self.config.peft {
            let model = self.load_run(&backbone, data.task, spec, seed)?;
            let inputs = model.prepare_all(&data.test)?;
            out.push((spec.tag(), profile(&model, &inputs, data.task, self.config.report.profile_passes)?));
        }
        let rows: Vec<Vec<String>> = out
            .iter()
            .map(|(tag, p)| {
                vec![
                    tag.clone(),
                    format!("{:.4}", p.ms_per_sample),
                    p.checkpoint_bytes_full.to_string(),
                    p.checkpoint_bytes_delta.to_string(),
                    p.gamma.to_string(),
                ]
            })
            .collect();
        self.write_csv(
            "profile.csv",
            &["method", "ms_per_sample", "checkpoint_bytes_full", "checkpoint_bytes_delta", "gamma"],
            &rows,
        )?;
        Ok(out)
    }

    /// Mean and standard deviation over seeds plus the gap to full
    /// fine-tuning, from `results.csv` (and `ablate.csv` if present).
    pub fn report(&self) -> Result<Vec<ReportRow>> {
        let results = self.out.join("results.csv");
        if !results.exists() {
            bail!(Report, "missing {}; run finetune first", results.display());
        }
        let rows = self.summarize(&results, "report.csv")?;
        let ablate = self.out.join("ablate.csv");
        if ablate.exists() {
            self.summarize(&ablate, "ablate_report.csv")?;
        }
        Ok(rows)
    }

    fn summarize(&self, source: &Path, target: &str) -> Result<Vec<ReportRow>> {
        let text = std::fs::read_to_string(source).map_err(|e| LabError::io(source, e))?;
        let table = parse_csv(&text)?;
        let mut groups: BTreeMap<String, (Metric, Vec<f64>)> = BTreeMap::new();
        let mut order = Vec::new();
        for row in &table {
            let digest = field(row, "digest")?;
            if digest != self.digest {
                bail!(Report, "{} was produced by config {digest}, not {}", source.display(), self.digest);
            }
            let variant = field(row, "variant")?.to_string();
            let metric = parse_metric(field(row, "metric")?)?;
            let value: f64 = field(row, "value")?
                .parse()
                .map_err(|_| LabError::Report(format!("bad metric value in {}", source.display())))?;
            if !groups.contains_key(&variant) {
                order.push(variant.clone());
            }
            groups.entry(variant).or_insert((metric, Vec::new())).1.push(value);
        }
        let full_key = groups.keys().find(|k| k.starts_with("full")).cloned();
        let mut out = Vec::new();
        for variant in order {
            let (metric, values) = &groups[&variant];
            let (mean, std) = mean_std(values);
            let gap = match &full_key {
                Some(fk) => {
                    let (fm, fv) = &groups[fk];
                    let key = self.config.name.clone();
                    let peft = BTreeMap::from([(key.clone(), Score { metric: *metric, value: mean })]);
                    let full = BTreeMap::from([(key, Score { metric: *fm, value: mean_std(fv).0 })]);
                    Some(performance_gap(&peft, &full)?)
                }
                None => None,
            };
            out.push(ReportRow {
                variant,
                metric: *metric,
                runs: values.len(),
                mean,
                std,
                gap_vs_full: gap,
            });
        }
        let csv: Vec<Vec<String>> = out
            .iter()
            .map(|r| {
                vec![
                    r.variant.clone(),
                    r.metric.name().to_string(),
                    r.runs.to_string(),
                    r.mean.to_string(),
                    r.std.to_string(),
                    r.gap_vs_full.map_or_else(String::new, |g| g.to_string()),
                ]
            })
            .collect();
        self.write_csv(target, &["variant", "metric", "runs", "mean", "std", "gap_vs_full"], &csv)?;
        Ok(out)
    }
}

/// Train/valid/test graphs of one task.
#[derive(Clone, Debug)]
pub struct TaskData {
    pub task: TaskKind,
    pub train: Vec<Graph>,
    pub valid: Vec<Graph>,
    pub test: Vec<Graph>,
}

struct RunContext<'a> {
    backbone: &'a Model,
    data: &'a TaskData,
    model: &'a ModelConfig,
    train: &'a TrainConfig,
}

#[derive(Clone, Debug)]
pub struct RunJob {
    pub variant: String,
    pub spec: PeftSpec,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub job: RunJob,
    pub gamma: f64,
    pub mu: f64,
    pub metric: Metric,
    pub test_value: f64,
    pub best_eval: Option<f64>,
    pub best_epoch: Option<usize>,
    pub wall_seconds: f64,
    pub delta: Vec<u8>,
    history: Vec<Vec<String>>,
}

const RESULT_HEADER: [&str; 12] = [
    "variant",
    "method",
    "structure",
    "insertion",
    "r",
    "gamma",
    "mu",
    "seed",
    "metric",
    "value",
    "best_eval",
    "best_epoch",
];

impl RunOutcome {
    fn csv_row(&self) -> Vec<String> {
        let spec = &self.job.spec;
        vec![
            self.job.variant.clone(),
            spec.method.name().to_string(),
            spec.effective_structure().map_or_else(|| "none".into(), |s| s.to_string()),
            spec.effective_insertion().map_or("none", Insertion::name).to_string(),
            if spec.uses_bottleneck() { spec.r.to_string() } else { String::new() },
            self.gamma.to_string(),
            self.mu.to_string(),
            self.job.seed.to_string(),
            self.metric.name().to_string(),
            self.test_value.to_string(),
            self.best_eval.map_or_else(String::new, |v| v.to_string()),
            self.best_epoch.map_or_else(String::new, |v| v.to_string()),
        ]
    }
}

/// A downstream model on top of `backbone`, instrumented with `spec`.
pub fn fresh_model(backbone: &Model, config: &ModelConfig, task: TaskKind, spec: &PeftSpec, seed: u64) -> Result<Model> {
    let mut model = Model::new(ModelConfig {
        head: task.head(),
        seed,
        ..config.clone()
    })?;
    model.load_backbone(backbone)?;
    Ok(instrument(model, spec, seed)?.0)
}

/// Effective training config of a run: its seed, and μ = 0 under the
/// Bregman ablation.
pub fn run_train_config(base: &TrainConfig, spec: &PeftSpec, seed: u64) -> TrainConfig {
    let mut cfg = base.clone();
    cfg.seed = seed;
    if spec.ablations.no_breg {
        cfg.mu = 0.0;
    }
    cfg
}

fn run_job(ctx: &RunContext<'_>, job: &RunJob) -> Result<RunOutcome> {
    let start = Instant::now();
    let task = ctx.data.task;
    let mut model = fresh_model(ctx.backbone, ctx.model, task, &job.spec, job.seed)?;
    let mask = crate::peft::FreezeMask {
        trainable: model.params.trainable_names(),
    };
    let gamma = crate::peft::trainable_ratio(&model, &mask);
    let train = model.prepare_all(&ctx.data.train)?;
    let valid = model.prepare_all(&ctx.data.valid)?;
    let test = model.prepare_all(&ctx.data.test)?;
    let cfg = run_train_config(ctx.train, &job.spec, job.seed);
    let report = fit(&mut model, &train, &valid, task, &cfg)?;
    let metric = Metric::default_for(task);
    let test_value = evaluate(&model, &test, task, metric)?;
    log::info!("{} seed {}: test {} = {test_value:.4}", job.variant, job.seed, metric.name());
    let history = report
        .history()
        .iter()
        .map(|e| {
            vec![
                e.epoch.to_string(),
                e.train_loss.to_string(),
                e.eval_metric.map_or_else(String::new, |v| v.to_string()),
            ]
        })
        .collect();
    Ok(RunOutcome {
        job: job.clone(),
        gamma,
        mu: cfg.mu,
        metric,
        test_value,
        best_eval: report.best_metric,
        best_epoch: report.best_epoch,
        wall_seconds: start.elapsed().as_secs_f64(),
        delta: save_delta(&model, &mask)?,
        history,
    })
}

/// Baseline, five alternative insertion positions and six component
/// ablations: twelve variants.
pub fn ablation_grid(base: &PeftSpec) -> Vec<(String, PeftSpec)> {
    let mut grid = vec![("baseline".to_string(), base.clone())];
    let default_insertion = base.effective_insertion();
    for ins in Insertion::ALL {
        if Some(ins) != default_insertion {
            grid.push((ins.name().to_string(), base.clone().with_insertion(ins)));
        }
    }
    let flags: [(&str, Ablations); 6] = [
        ("no_s", Ablations { no_s: true, ..base.ablations }),
        ("no_pre_ln", Ablations { no_pre_ln: true, ..base.ablations }),
        ("no_post_ln", Ablations { no_post_ln: true, ..base.ablations }),
        (
            "no_ln",
            Ablations {
                no_pre_ln: true,
                no_post_ln: true,
                ..base.ablations
            },
        ),
        ("no_act", Ablations { no_act: true, ..base.ablations }),
        ("no_breg", Ablations { no_breg: true, ..base.ablations }),
    ];
    for (name, abl) in flags {
        grid.push((name.to_string(), base.clone().with_ablations(abl)));
    }
    grid
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShiftRow {
    pub tag: String,
    pub seed: u64,
    pub js: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub variant: String,
    pub metric: Metric,
    pub runs: usize,
    pub mean: f64,
    /// Sample standard deviation; 0 for a single run.
    pub std: f64,
    pub gap_vs_full: Option<f64>,
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn parse_metric(s: &str) -> Result<Metric> {
    match s {
        "auc" => Ok(Metric::Auc),
        "ap" => Ok(Metric::Ap),
        "rmse" => Ok(Metric::Rmse),
        _ => bail!(Report, "unknown metric '{s}'"),
    }
}

type CsvRow = BTreeMap<String, String>;

fn parse_csv(text: &str) -> Result<Vec<CsvRow>> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let header = reader
        .headers()
        .map_err(|e| LabError::Report(format!("bad CSV header: {e}")))?
        .clone();
    reader
        .records()
        .map(|rec| {
            let rec = rec.map_err(|e| LabError::Report(format!("bad CSV row: {e}")))?;
            Ok(header.iter().zip(rec.iter()).map(|(c, v)| (c.to_string(), v.to_string())).collect())
        })
        .collect()
}

fn field<'r>(row: &'r CsvRow, name: &str) -> Result<&'r str> {
    row.get(name)
        .map(String::as_str)
        .ok_or_else(|| LabError::Report(format!("CSV lacks column '{name}'")))
}

const PALETTE: [&str; 8] = ["#1b1b1b", "#d62728", "#1f77b4", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2"];

/// Line plot of histograms sharing one set of bins.
pub fn overlay_svg(curves: &[(String, Histogram)]) -> String {
    let (w, h, pad) = (640.0, 360.0, 40.0);
    let ymax = curves
        .iter()
        .flat_map(|(_, c)| c.probs.iter().copied())
        .fold(f64::MIN_POSITIVE, f64::max);
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    );
    for (k, (name, c)) in curves.iter().enumerate() {
        let n = c.bins().max(1) as f64;
        let points: Vec<String> = c
            .probs
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let x = pad + (w - 2.0 * pad) * (i as f64 + 0.5) / n;
                let y = h - pad - (h - 2.0 * pad) * p / ymax;
                format!("{x:.1},{y:.1}")
            })
            .collect();
        let color = PALETTE[k % PALETTE.len()];
        let _ = writeln!(
            svg,
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>",
            points.join(" ")
        );
        let _ = writeln!(
            svg,
            "<text x=\"{}\" y=\"{}\" font-size=\"11\" fill=\"{color}\">{name}</text>",
            w - 200.0,
            pad + 14.0 * k as f64
        );
    }
    let _ = writeln!(
        svg,
        "<line x1=\"{pad}\" y1=\"{0}\" x2=\"{1}\" y2=\"{0}\" stroke=\"#888\"/>",
        h - pad,
        w - pad
    );
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ablation_grid_has_twelve_variants() {
        let grid = ablation_grid(&PeftSpec::new(Method::Gadapter, 4));
        assert_eq!(grid.len(), 12);
        let names: std::collections::BTreeSet<_> = grid.iter().map(|(n, _)| n.clone()).collect();
        assert_eq!(names.len(), 12);
        let tags: std::collections::BTreeSet<_> = grid.iter().map(|(_, s)| s.tag()).collect();
        assert_eq!(tags.len(), 12);
    }

    #[test]
    fn digest_ignores_output_and_tracks_content() {
        let a = ExperimentConfig::default();
        let b = ExperimentConfig {
            output: "elsewhere".into(),
            ..a.clone()
        };
        assert_eq!(a.digest(), b.digest());
        let c = ExperimentConfig {
            seeds: vec![7],
            ..a.clone()
        };
        assert_ne!(a.digest(), c.digest());
    }

    #[test]
    fn unknown_subcommand_is_an_error() {
        assert!("finetune".parse::<Subcommand>().is_ok());
        assert!(matches!("train".parse::<Subcommand>(), Err(LabError::Config(_))));
    }

    #[test]
    fn mean_std_examples() {
        assert_eq!(mean_std(&[2.0]), (2.0, 0.0));
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn csv_parsing() {
        let rows = parse_csv("digest,a,b\nx,1,2\n").unwrap();
        assert_eq!(field(&rows[0], "b").unwrap(), "2");
        assert!(parse_csv("a,b\n1\n").is_err());
    }
}
