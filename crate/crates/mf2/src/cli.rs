//! The `mf2` command line.
//!
//! Every command except `data` writes into a run directory: `record.json`,
//! `report.txt`, `log.jsonl` and, for commands that train,
//! `checkpoint.json`. The directory name is derived from a hash of the
//! command, the resolved configuration and every input file, so repeated
//! runs of the same inputs land in the same place and are refused unless
//! `--force` is given.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use mf2_core::annotation::curation::{balance_classes, filter_samples, split_by_video};
use mf2_core::annotation::mock::MockClient;
use mf2_core::annotation::{AnnotationClient, CaptionType, ClientError};
use mf2_core::data::{DatasetManifest, Split};
use mf2_core::dfn::Tap;
use mf2_core::model::Mf2Model;
use serde::Serialize;
use serde_json::Value;

use crate::annotate::{annotate_concurrent, RemoteClient};
use crate::checkpoint::Checkpoint;
use crate::config::{parse_config, ClientKind, RunConfig};
use crate::error::{Error, Result};
use crate::files::{
    self, index_captions, load_captions, load_manifest, save_manifest, ManifestFile,
};
use crate::harness::{
    self, build_model, evaluate_timed, finetune_dfn, pretrain, run_ablations, Dataset, EpochLog,
    Observer, Task, Variant,
};
use crate::record::{ablation_table, recognition_report, InputHasher, RunRecord};

pub const RUN_ROOT_ENV: &str = "MF2_RUN_ROOT";
const DEFAULT_RUN_ROOT: &str = "runs";

#[derive(Debug, Parser)]
#[command(
    name = "mf2",
    version,
    about = "Multilevel face model: data curation, captioning, training and evaluation"
)]
pub struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Config override, applied after the file (repeatable), e.g. `train.lr=0.01`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Seed for every random choice; overrides `seed` in the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Write into an existing run directory.
    #[arg(long, global = true)]
    pub force: bool,
    /// Output directory; overrides `run_dir` and the derived location.
    #[arg(long, global = true, value_name = "DIR")]
    pub run_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate, filter, balance and split manifests.
    #[command(subcommand)]
    Data(DataCommand),
    /// Caption every sample of a manifest.
    Annotate(AnnotateArgs),
    /// Pretrain a model on captioned data.
    Train(TrainArgs),
    /// Attach side adapters to a checkpoint and fine-tune them.
    Finetune(FinetuneArgs),
    /// Score a checkpoint from images alone.
    Eval(EvalArgs),
    /// Run the ablation variants on the same data.
    Ablate(AblateArgs),
    /// Pretrain on AUs, then fine-tune adapters for emotion.
    Transition(DataArgs),
}

#[derive(Debug, Subcommand)]
pub enum DataCommand {
    /// Write a procedural fixture dataset (manifest plus PNG images).
    Fixture {
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        videos: usize,
        #[arg(long, default_value_t = 2)]
        frames: usize,
        /// Image side in pixels; defaults to `encoders.image_size`.
        #[arg(long)]
        image_size: Option<usize>,
    },
    /// Keep samples that carry both AU and emotion labels.
    Filter {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Subsample emotion classes towards the smallest one.
    Balance {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Allowed excess over the smallest class; defaults to `data.tolerance`.
        #[arg(long)]
        tolerance: Option<f64>,
    },
    /// Video-disjoint split into `train.jsonl` and `val.jsonl`.
    Split {
        #[arg(long = "in")]
        input: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Defaults to `data.train_fraction`.
        #[arg(long)]
        train_fraction: Option<f64>,
    },
}

#[derive(Debug, Args)]
pub struct AnnotateArgs {
    /// Manifest to caption; defaults to `data.train_manifest`.
    #[arg(long = "in")]
    pub input: Option<PathBuf>,
    /// Caption file; defaults to `captions.jsonl` in the run directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Comma-separated caption types.
    #[arg(long, value_delimiter = ',')]
    pub types: Option<Vec<CaptionType>>,
    #[arg(long, value_parser = parse_client)]
    pub client: Option<ClientKind>,
    /// Environment variable holding the remote endpoint.
    #[arg(long)]
    pub endpoint_env: Option<String>,
}

/// Dataset locations; each overrides the matching `data.*` key.
#[derive(Debug, Args, Default)]
pub struct DataArgs {
    /// Training manifest.
    #[arg(long)]
    pub train: Option<PathBuf>,
    /// Validation manifest, used to pick the best epoch and for the scores.
    #[arg(long)]
    pub val: Option<PathBuf>,
    /// Caption records for the training samples.
    #[arg(long)]
    pub captions: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value = "both", value_parser = parse_task)]
    pub task: Task,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Checkpoint to start from.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long = "dfn.r")]
    pub dfn_r: Option<usize>,
    #[arg(long = "dfn.gate")]
    pub dfn_gate: Option<f64>,
    /// `blockwise` or `cls`.
    #[arg(long = "dfn.tap", value_parser = parse_tap)]
    pub dfn_tap: Option<Tap>,
    #[arg(long, default_value = "both", value_parser = parse_task)]
    pub task: Task,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint to score; defaults to `eval.checkpoint`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// `val` or `train`, picking `data.val_manifest` or `data.train_manifest`.
    #[arg(long, value_parser = parse_split)]
    pub split: Option<Split>,
    /// Manifest to score, instead of the split's.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// `all` or a comma list of full_finetune, w/o_emo_vl, w/o_au_vl, dfn_finetune.
    #[arg(long, default_value = "all", value_parser = parse_variants)]
    pub variants: VariantList,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VariantList(pub Vec<Variant>);

fn parse_variants(s: &str) -> std::result::Result<VariantList, String> {
    Variant::parse_list(s).map(VariantList)
}

fn parse_client(s: &str) -> std::result::Result<ClientKind, String> {
    match s {
        "mock" => Ok(ClientKind::Mock),
        "remote" => Ok(ClientKind::Remote),
        _ => Err(format!("unknown client {s:?} (expected mock or remote)")),
    }
}

fn parse_task(s: &str) -> std::result::Result<Task, String> {
    s.parse()
}

fn parse_tap(s: &str) -> std::result::Result<Tap, String> {
    match s {
        "blockwise" => Ok(Tap::Blockwise),
        "cls" | "cls_last_layer" => Ok(Tap::ClsLastLayer),
        _ => Err(format!("unknown tap {s:?} (expected blockwise or cls)")),
    }
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    match s {
        "val" => Ok(Split::Val),
        "train" => Ok(Split::Train),
        _ => Err(format!("unknown split {s:?} (expected val or train)")),
    }
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code: 0 on success, 1 on a domain error, 2 on a
/// usage error.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            let line = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{line}");
            if matches!(e, Error::Usage(_)) {
                2
            } else {
                1
            }
        }
    }
}

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = parse_config(cli.config.as_deref(), &cli.set)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(d) = &cli.run_dir {
        cfg.run_dir = Some(d.clone());
    }
    Ok(cfg)
}

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = resolve_config(&cli)?;
    match &cli.command {
        Command::Data(cmd) => run_data(&cfg, cmd),
        Command::Annotate(a) => {
            apply_annotate_args(&mut cfg, a);
            run_annotate(&cfg, a, cli.force)
        }
        Command::Train(a) => {
            apply_data_args(&mut cfg, &a.data);
            run_train(&cfg, a.task, cli.force)
        }
        Command::Finetune(a) => {
            apply_data_args(&mut cfg, &a.data);
            if let Some(r) = a.dfn_r {
                cfg.dfn.r = r;
            }
            if let Some(g) = a.dfn_gate {
                cfg.dfn.gate = g;
            }
            if let Some(t) = a.dfn_tap {
                cfg.dfn.tap = t;
            }
            let ck = a
                .checkpoint
                .clone()
                .ok_or_else(|| Error::Usage("finetune needs --checkpoint".into()))?;
            run_finetune(&cfg, &ck, a.task, cli.force)
        }
        Command::Eval(a) => {
            if let Some(c) = &a.checkpoint {
                cfg.eval.checkpoint = Some(c.clone());
            }
            if let Some(s) = a.split {
                cfg.eval.split = s;
            }
            run_eval(&cfg, a.manifest.as_deref(), cli.force)
        }
        Command::Ablate(a) => {
            apply_data_args(&mut cfg, &a.data);
            run_ablate(&cfg, &a.variants.0, cli.force)
        }
        Command::Transition(d) => {
            apply_data_args(&mut cfg, d);
            run_transition_cmd(&cfg, cli.force)
        }
    }
}

fn apply_data_args(cfg: &mut RunConfig, d: &DataArgs) {
    if let Some(p) = &d.train {
        cfg.data.train_manifest = Some(p.clone());
    }
    if let Some(p) = &d.val {
        cfg.data.val_manifest = Some(p.clone());
    }
    if let Some(p) = &d.captions {
        cfg.data.captions = Some(p.clone());
    }
}

fn apply_annotate_args(cfg: &mut RunConfig, a: &AnnotateArgs) {
    if let Some(p) = &a.input {
        cfg.data.train_manifest = Some(p.clone());
    }
    if let Some(t) = &a.types {
        cfg.annotate.types = t.clone();
    }
    if let Some(c) = a.client {
        cfg.annotate.client = c;
    }
    if let Some(e) = &a.endpoint_env {
        cfg.annotate.endpoint_env = e.clone();
    }
}

fn run_data(cfg: &RunConfig, cmd: &DataCommand) -> Result<()> {
    let report = |what: &str, m: &DatasetManifest, path: &Path| {
        println!("{what}: {} samples -> {}", m.len(), path.display());
    };
    match cmd {
        DataCommand::Fixture {
            out,
            videos,
            frames,
            image_size,
        } => {
            let size = image_size.unwrap_or(cfg.encoders.image_size);
            let f = files::write_fixture(out, *videos, *frames, cfg.seed, size)?;
            report("fixture", &f.manifest, &out.join("manifest.jsonl"));
        }
        DataCommand::Filter { input, out } => {
            let src = load_manifest(input)?;
            let m = filter_samples(&src.manifest);
            save_manifest(out, &m, &src.root)?;
            report("filter", &m, out);
        }
        DataCommand::Balance {
            input,
            out,
            tolerance,
        } => {
            let src = load_manifest(input)?;
            let m = balance_classes(
                &src.manifest,
                tolerance.unwrap_or(cfg.data.tolerance),
                cfg.seed,
            )?;
            save_manifest(out, &m, &src.root)?;
            report("balance", &m, out);
        }
        DataCommand::Split {
            input,
            out,
            train_fraction,
        } => {
            let src = load_manifest(input)?;
            let (train, val) = split_by_video(
                &src.manifest,
                train_fraction.unwrap_or(cfg.data.train_fraction),
                cfg.seed,
            )?;
            let (tp, vp) = (out.join("train.jsonl"), out.join("val.jsonl"));
            save_manifest(&tp, &train, &src.root)?;
            save_manifest(&vp, &val, &src.root)?;
            report("train", &train, &tp);
            report("val", &val, &vp);
        }
    }
    Ok(())
}

/// An open run directory.
struct Run {
    dir: PathBuf,
    command: String,
    config: Value,
    input_hash: String,
    start: Instant,
    log: BufWriter<File>,
}

fn config_value(cfg: &RunConfig) -> Value {
    serde_json::to_value(cfg).expect("configs serialize")
}

fn hash_manifest(h: &mut InputHasher, path: &Path) -> Result<()> {
    h.add_file(path)?;
    let m = load_manifest(path)?;
    for r in m.manifest.samples() {
        h.add_file(&m.image_path(r))?;
    }
    Ok(())
}

impl Run {
    fn open(
        cfg: &RunConfig,
        command: &str,
        inputs: &[PathBuf],
        manifests: &[PathBuf],
        force: bool,
    ) -> Result<Self> {
        let config = config_value(cfg);
        let mut h = InputHasher::new();
        h.add("command", command.as_bytes());
        h.add("config", config.to_string().as_bytes());
        for p in manifests {
            hash_manifest(&mut h, p)?;
        }
        for p in inputs {
            h.add_file(p)?;
        }
        let input_hash = h.finish();
        let dir = match &cfg.run_dir {
            Some(d) => d.clone(),
            None => {
                let root = std::env::var_os(RUN_ROOT_ENV)
                    .filter(|v| !v.is_empty())
                    .map_or_else(|| PathBuf::from(DEFAULT_RUN_ROOT), PathBuf::from);
                root.join(format!("{command}-{}", &input_hash[..12]))
            }
        };
        if dir.join("record.json").exists() && !force {
            return Err(Error::RunExists(dir));
        }
        fs::create_dir_all(&dir).map_err(Error::io(&dir))?;
        let log_path = dir.join("log.jsonl");
        let log = File::create(&log_path).map_err(Error::io(&log_path))?;
        Ok(Self {
            dir,
            command: command.to_string(),
            config,
            input_hash,
            start: Instant::now(),
            log: BufWriter::new(log),
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn event<T: Serialize>(&mut self, value: &T) -> Result<()> {
        let line = serde_json::to_string(value).expect("log events serialize");
        let path = self.path("log.jsonl");
        writeln!(self.log, "{line}").map_err(Error::io(&path))
    }

    fn record(&self) -> RunRecord {
        RunRecord {
            command: self.command.clone(),
            config: self.config.clone(),
            input_hash: self.input_hash.clone(),
            ..RunRecord::default()
        }
    }

    fn save_checkpoint(&self, model: &Mf2Model) -> Result<String> {
        Checkpoint::from_model(model, self.config.clone()).save(&self.path("checkpoint.json"))?;
        Ok("checkpoint.json".into())
    }

    fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        let path = self.path(name);
        let text = serde_json::to_string_pretty(value).expect("outputs serialize");
        fs::write(&path, text + "\n").map_err(Error::io(&path))
    }

    fn finish(mut self, mut record: RunRecord, report: &str) -> Result<()> {
        record.wall_seconds = self.start.elapsed().as_secs_f64();
        let record = record.seal();
        let report_path = self.path("report.txt");
        fs::write(&report_path, report).map_err(Error::io(&report_path))?;
        record.save(&self.path("record.json"))?;
        self.event(&serde_json::json!({
            "event": "done",
            "command": record.command,
            "content_hash": record.content_hash,
        }))?;
        let path = self.path("log.jsonl");
        self.log.flush().map_err(Error::io(&path))?;
        print!("{report}");
        println!("run directory: {}", self.dir.display());
        Ok(())
    }
}

/// Streams epochs to the run log and optionally keeps the best model on
/// disk.
struct RunObserver<'a> {
    run: &'a mut Run,
    save_best: bool,
    error: Option<Error>,
}

impl Observer for RunObserver<'_> {
    fn epoch(&mut self, phase: &str, log: &EpochLog) {
        #[derive(Serialize)]
        struct Line<'a> {
            event: &'static str,
            phase: &'a str,
            #[serde(flatten)]
            log: &'a EpochLog,
        }
        if let Err(e) = self.run.event(&Line {
            event: "epoch",
            phase,
            log,
        }) {
            self.error.get_or_insert(e);
        }
    }

    fn best(&mut self, _phase: &str, model: &Mf2Model) -> Result<()> {
        if self.save_best {
            self.run.save_checkpoint(model)?;
        }
        Ok(())
    }
}

impl RunObserver<'_> {
    fn finish(self) -> Result<()> {
        self.error.map_or(Ok(()), Err)
    }
}

fn required(path: &Option<PathBuf>, what: &str, flag: &str) -> Result<PathBuf> {
    path.clone()
        .ok_or_else(|| Error::Usage(format!("no {what}; pass {flag} or set it in the config")))
}

/// Training data with captions, optional validation data without.
fn load_training_data(
    cfg: &RunConfig,
) -> Result<(Dataset, Option<Dataset>, Vec<PathBuf>, Vec<PathBuf>)> {
    let train_path = required(&cfg.data.train_manifest, "training manifest", "--train")?;
    let captions_path = required(&cfg.data.captions, "caption file", "--captions")?;
    let tokenizer = cfg.encoders.tokenizer()?;
    let captions = index_captions(&load_captions(&captions_path, &tokenizer)?);
    let train = Dataset::from_manifest(&load_manifest(&train_path)?, Some(&captions))?;
    train.require_captions()?;
    let mut manifests = vec![train_path];
    let val = match &cfg.data.val_manifest {
        Some(p) => {
            manifests.push(p.clone());
            Some(Dataset::from_manifest(&load_manifest(p)?, None)?)
        }
        None => None,
    };
    Ok((train, val, manifests, vec![captions_path]))
}

fn run_annotate(cfg: &RunConfig, a: &AnnotateArgs, force: bool) -> Result<()> {
    let input = required(&cfg.data.train_manifest, "manifest to caption", "--in")?;
    let source: ManifestFile = load_manifest(&input)?;
    let tokenizer = cfg.encoders.tokenizer()?;
    let mut run = Run::open(cfg, "annotate", &[], &[input], force)?;
    let remote;
    let mock = MockClient::new(cfg.seed);
    let client: &(dyn AnnotationClient + Sync) = match cfg.annotate.client {
        ClientKind::Mock => &mock,
        ClientKind::Remote => {
            remote = RemoteClient::from_env(&cfg.annotate.endpoint_env)
                .map_err(mf2_core::annotation::AnnotateError::Client)?;
            &remote
        }
    };
    let outcome = annotate_concurrent(
        source.manifest.samples(),
        client,
        &cfg.annotate.types,
        &tokenizer,
        &cfg.annotate.budgets,
        cfg.annotate.workers,
        |r| {
            files::read_png(&source.image_path(r))
                .map_err(|e| ClientError::Transport(e.to_string()))
        },
    )?;
    let out = a.out.clone().unwrap_or_else(|| run.path("captions.jsonl"));
    files::save_captions(&out, &outcome.records)?;
    for f in &outcome.failures {
        run.event(&serde_json::json!({ "event": "annotation_failed", "failure": f }))?;
        eprintln!("warning: {f}");
    }
    let mut report = format!(
        "{} caption(s) written to {}\n",
        outcome.records.len(),
        out.display()
    );
    for t in CaptionType::ALL {
        let n = outcome
            .records
            .iter()
            .filter(|r| r.caption_type == t)
            .count();
        report.push_str(&format!("  {t}: {n}\n"));
    }
    report.push_str(&format!("{} failure(s)\n", outcome.failures.len()));
    let mut record = run.record();
    record.annotation = Some(crate::record::AnnotationSummary {
        captions: out.to_string_lossy().into_owned(),
        records: outcome.records.len(),
        failures: outcome.failures,
    });
    run.finish(record, &report)
}

fn run_train(cfg: &RunConfig, task: Task, force: bool) -> Result<()> {
    let (train, val, manifests, inputs) = load_training_data(cfg)?;
    let mut run = Run::open(cfg, "train", &inputs, &manifests, force)?;
    let mut model = build_model(cfg)?;
    let mut obs = RunObserver {
        run: &mut run,
        save_best: true,
        error: None,
    };
    let phase = pretrain(cfg, &mut model, task, &train, val.as_ref(), &mut obs);
    obs.finish()?;
    let phase = phase?;
    let checkpoint = run.save_checkpoint(&model)?;
    let report = recognition_report(&[(format!("{} ({task})", phase.name), &phase.metrics)]);
    let mut record = run.record();
    record.metrics = Some(phase.metrics.clone());
    record.phases = vec![phase];
    record.checkpoint = Some(checkpoint);
    run.finish(record, &report)
}

fn run_finetune(cfg: &RunConfig, checkpoint: &Path, task: Task, force: bool) -> Result<()> {
    let (train, val, manifests, mut inputs) = load_training_data(cfg)?;
    inputs.push(checkpoint.to_path_buf());
    let (_, mut model, _) = Checkpoint::load_model(checkpoint, true)?;
    let mut run = Run::open(cfg, "finetune", &inputs, &manifests, force)?;
    let mut obs = RunObserver {
        run: &mut run,
        save_best: true,
        error: None,
    };
    let phase = finetune_dfn(
        cfg,
        &cfg.dfn,
        &mut model,
        task,
        &train,
        val.as_ref(),
        &mut obs,
    );
    obs.finish()?;
    let phase = phase?;
    let ck = run.save_checkpoint(&model)?;
    run.write_json("freeze_report.json", &phase.freeze)?;
    let report = recognition_report(&[(format!("{} ({task})", phase.name), &phase.metrics)]);
    let mut record = run.record();
    record.metrics = Some(phase.metrics.clone());
    record.freeze = phase.freeze.clone();
    record.phases = vec![phase];
    record.checkpoint = Some(ck);
    run.finish(record, &report)
}

fn run_eval(cfg: &RunConfig, manifest: Option<&Path>, force: bool) -> Result<()> {
    let checkpoint = cfg
        .eval
        .checkpoint
        .clone()
        .ok_or_else(|| Error::Usage("eval needs --checkpoint".into()))?;
    let manifest = match manifest {
        Some(p) => p.to_path_buf(),
        None => match cfg.eval.split {
            Split::Train => required(&cfg.data.train_manifest, "training manifest", "--manifest")?,
            _ => required(&cfg.data.val_manifest, "validation manifest", "--manifest")?,
        },
    };
    let (_, model, _) = Checkpoint::load_model(&checkpoint, true)?;
    let data = Dataset::from_manifest(&load_manifest(&manifest)?, None)?;
    let run = Run::open(cfg, "eval", &[checkpoint], &[manifest], force)?;
    model.reset_text_calls();
    let metrics = evaluate_timed(&model, &data, cfg.eval.batch_size)?;
    let calls = model.text_calls();
    let report = recognition_report(&[("eval".to_string(), &metrics)]);
    let mut record = run.record();
    record.metrics = Some(metrics);
    record.text_encoder_calls = Some(calls);
    run.finish(record, &report)
}

fn run_ablate(cfg: &RunConfig, variants: &[Variant], force: bool) -> Result<()> {
    if variants.is_empty() {
        return Err(Error::Usage("no variants selected".into()));
    }
    let (train, val, manifests, inputs) = load_training_data(cfg)?;
    let mut run = Run::open(cfg, "ablate", &inputs, &manifests, force)?;
    let mut obs = RunObserver {
        run: &mut run,
        save_best: false,
        error: None,
    };
    let records = run_ablations(cfg, variants, &train, val.as_ref(), &mut obs);
    obs.finish()?;
    let records = records?;
    let rows: Vec<(String, &_)> = records
        .iter()
        .map(|r| (r.variant.to_string(), &r.finetune.metrics))
        .collect();
    let report = format!(
        "Ablation (TP trainable parameters, TT/IT seconds per epoch)\n\n{}\n{}",
        ablation_table(&records),
        recognition_report(&rows)
    );
    let mut record = run.record();
    record.ablations = records;
    run.finish(record, &report)
}

fn run_transition_cmd(cfg: &RunConfig, force: bool) -> Result<()> {
    let (train, val, manifests, inputs) = load_training_data(cfg)?;
    let mut run = Run::open(cfg, "transition", &inputs, &manifests, force)?;
    let mut obs = RunObserver {
        run: &mut run,
        save_best: false,
        error: None,
    };
    let result = harness::run_transition_with_model(cfg, &train, val.as_ref(), &mut obs);
    obs.finish()?;
    let (t, model) = result?;
    let ck = run.save_checkpoint(&model)?;
    run.write_json("freeze_report.json", &t.finetune.freeze)?;
    let report = recognition_report(&[
        ("untrained".to_string(), &t.baseline),
        ("pretrain (au)".to_string(), &t.pretrain.metrics),
        ("dfn_finetune (emotion)".to_string(), &t.finetune.metrics),
    ]);
    let mut record = run.record();
    record.metrics = Some(t.finetune.metrics.clone());
    record.baseline = Some(t.baseline);
    record.freeze = t.finetune.freeze.clone();
    record.phases = vec![t.pretrain, t.finetune];
    record.checkpoint = Some(ck);
    run.finish(record, &report)
}
