//! Subcommand front end. Every artifact-producing command first writes a
//! `manifest.json` holding the resolved configuration, then its outputs,
//! all under `--out-dir`. `replay` reruns a manifest into a new directory.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalproto::{
    eval_pairs, eval_rank1, length_distance_matrix, LengthSpec, ModelDiscriminator,
    ModelEmbedder, Protocol, SelectionReport, SelectionSpec,
};
use crate::model::{load_checkpoint, save_checkpoint, DiscInput, ModelConfig, ModelParams};
use crate::synthgen::{build_dataset, builtin_glyphs};
use crate::trainer::{
    pretrain, run_ablation, save_ablation_csv, train_discriminator, Mode, RunSpec, TrainConfig,
    WriterPool,
};
use crate::trajio::{load_jsonl, split_by_writer, writer_order, RawTrajectory};

pub const MANIFEST: &str = "manifest.json";

/// Every tunable key, flat. Loaded from a TOML file, then `--set`
/// overrides; unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    // model
    pub enc_dim: usize,
    pub enc_depth: usize,
    pub enc_heads: usize,
    pub dec_dim: usize,
    pub dec_depth: usize,
    pub dec_heads: usize,
    pub proj_hidden: usize,
    pub proj_out: usize,
    pub disc_depth: usize,
    pub disc_heads: usize,
    pub disc_mlp_hidden: usize,
    pub mlp_ratio: usize,
    pub disc_input: DiscInput,
    // training
    pub mask_ratio: f64,
    pub lambda: f64,
    pub temperature: f64,
    pub batch_writers: usize,
    pub pretrain_epochs: usize,
    pub disc_epochs: usize,
    pub disc_batch_pairs: usize,
    pub disc_views: usize,
    pub learning_rate: f64,
    pub style_jitter: f64,
    pub seed: u64,
    pub freeze_encoder_step2: bool,
    pub mode: Mode,
    /// Share of writers, in file order, used for training; the rest are
    /// held out for evaluation.
    pub train_fraction: f64,
    // evaluation
    pub n_writers: usize,
    pub chars_per_writer: usize,
    pub n_selections: usize,
    pub selection_seed: u64,
    pub protocol: Protocol,
    pub lengths: Vec<usize>,
    pub pairs_per_cell: usize,
    pub length_seed: u64,
    pub same_trajectory: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::from_parts(
            &ModelConfig::desk(),
            &TrainConfig::default(),
            &SelectionSpec::default(),
            &LengthSpec::default(),
        )
    }
}

impl RunConfig {
    pub fn from_parts(m: &ModelConfig, t: &TrainConfig, s: &SelectionSpec, l: &LengthSpec) -> Self {
        Self {
            enc_dim: m.enc_dim,
            enc_depth: m.enc_depth,
            enc_heads: m.enc_heads,
            dec_dim: m.dec_dim,
            dec_depth: m.dec_depth,
            dec_heads: m.dec_heads,
            proj_hidden: m.proj_hidden,
            proj_out: m.proj_out,
            disc_depth: m.disc_depth,
            disc_heads: m.disc_heads,
            disc_mlp_hidden: m.disc_mlp_hidden,
            mlp_ratio: m.mlp_ratio,
            disc_input: m.disc_input,
            mask_ratio: t.mask_ratio,
            lambda: t.lambda,
            temperature: t.temperature,
            batch_writers: t.batch_writers,
            pretrain_epochs: t.pretrain_epochs,
            disc_epochs: t.disc_epochs,
            disc_batch_pairs: t.disc_batch_pairs,
            disc_views: t.disc_views,
            learning_rate: t.learning_rate,
            style_jitter: t.style_jitter,
            seed: t.seed,
            freeze_encoder_step2: t.freeze_encoder_step2,
            mode: t.mode,
            train_fraction: 0.8,
            n_writers: s.n_writers,
            chars_per_writer: s.chars_per_writer,
            n_selections: s.n_selections,
            selection_seed: s.seed,
            protocol: s.protocol,
            lengths: l.lengths.clone(),
            pairs_per_cell: l.pairs_per_cell,
            length_seed: l.seed,
            same_trajectory: l.same_trajectory,
        }
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            enc_dim: self.enc_dim,
            enc_depth: self.enc_depth,
            enc_heads: self.enc_heads,
            dec_dim: self.dec_dim,
            dec_depth: self.dec_depth,
            dec_heads: self.dec_heads,
            proj_hidden: self.proj_hidden,
            proj_out: self.proj_out,
            disc_depth: self.disc_depth,
            disc_heads: self.disc_heads,
            disc_mlp_hidden: self.disc_mlp_hidden,
            mlp_ratio: self.mlp_ratio,
            disc_input: self.disc_input,
            ..ModelConfig::default()
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            mask_ratio: self.mask_ratio,
            lambda: self.lambda,
            temperature: self.temperature,
            batch_writers: self.batch_writers,
            pretrain_epochs: self.pretrain_epochs,
            disc_epochs: self.disc_epochs,
            disc_batch_pairs: self.disc_batch_pairs,
            disc_views: self.disc_views,
            learning_rate: self.learning_rate,
            style_jitter: self.style_jitter,
            seed: self.seed,
            freeze_encoder_step2: self.freeze_encoder_step2,
            mode: self.mode,
        }
    }

    pub fn selection(&self) -> SelectionSpec {
        SelectionSpec {
            n_writers: self.n_writers,
            chars_per_writer: self.chars_per_writer,
            n_selections: self.n_selections,
            seed: self.selection_seed,
            protocol: self.protocol,
        }
    }

    pub fn length(&self) -> LengthSpec {
        LengthSpec {
            lengths: self.lengths.clone(),
            pairs_per_cell: self.pairs_per_cell,
            seed: self.length_seed,
            same_trajectory: self.same_trajectory,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model().validate()?;
        self.train().validate()?;
        self.selection().validate()?;
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config(format!(
                "train_fraction {} outside (0,1)",
                self.train_fraction
            )));
        }
        Ok(())
    }

    /// Defaults, then the keys of `file`, then each `key=value` override.
    /// Override values are read as TOML and fall back to bare strings.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match file {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                toml::from_str::<toml::Table>(&text)
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            let (k, v) = split_assignment(o)?;
            table.insert(k.to_string(), parse_value(v));
        }
        let cfg: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn with(&self, key: &str, value: toml::Value) -> Result<Self> {
        let mut table = toml::Table::try_from(self).expect("config serializes");
        table.insert(key.to_string(), value);
        let cfg: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Training and held-out records by `train_fraction` of the writers.
    pub fn split(&self, records: &[RawTrajectory]) -> (Vec<RawTrajectory>, Vec<RawTrajectory>) {
        let n = writer_order(records).len();
        let k = ((n as f64) * self.train_fraction).round() as usize;
        split_by_writer(records, k)
    }
}

fn split_assignment(s: &str) -> Result<(&str, &str)> {
    s.split_once('=')
        .map(|(k, v)| (k.trim(), v.trim()))
        .filter(|(k, _)| !k.is_empty())
        .ok_or_else(|| Error::Config(format!("expected key=value, got {s:?}")))
}

fn parse_value(v: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {v}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(v.to_string()))
}

/// One grid axis, `key=v1,v2,...`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridAxis {
    pub key: String,
    pub values: Vec<String>,
}

impl std::str::FromStr for GridAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (k, v) = split_assignment(s)?;
        let values: Vec<String> = v.split(',').map(|x| x.trim().to_string()).collect();
        if values.iter().any(String::is_empty) {
            return Err(Error::Config(format!("empty value in grid axis {s:?}")));
        }
        Ok(Self {
            key: k.to_string(),
            values,
        })
    }
}

/// The cartesian product of the axes applied to `base`, labelled
/// `key=value` joined by `;`.
pub fn expand_grid(base: &RunConfig, axes: &[GridAxis]) -> Result<Vec<RunSpec>> {
    let mut runs = vec![(String::new(), base.clone())];
    for axis in axes {
        let mut next = Vec::new();
        for (label, cfg) in &runs {
            for v in &axis.values {
                let cfg = cfg.with(&axis.key, parse_value(v))?;
                let part = format!("{}={v}", axis.key);
                let label = if label.is_empty() { part } else { format!("{label};{part}") };
                next.push((label, cfg));
            }
        }
        runs = next;
    }
    Ok(runs
        .into_iter()
        .map(|(label, c)| RunSpec {
            label: if label.is_empty() { "base".into() } else { label },
            model: c.model(),
            train: c.train(),
        })
        .collect())
}

/// Everything needed to rerun a command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: String,
    pub seed: u64,
    pub job: Job,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Job {
    GenSynthetic {
        writers: usize,
        chars: usize,
        seed: u64,
        file_name: String,
    },
    Pretrain {
        data: PathBuf,
        config: RunConfig,
    },
    TrainDisc {
        data: PathBuf,
        checkpoint: PathBuf,
        config: RunConfig,
    },
    Eval {
        data: PathBuf,
        checkpoint: PathBuf,
        config: RunConfig,
    },
    Ablate {
        data: PathBuf,
        grid: Vec<GridAxis>,
        config: RunConfig,
    },
    DistanceMatrix {
        data: PathBuf,
        checkpoint: PathBuf,
        config: RunConfig,
    },
}

impl Job {
    fn seed(&self) -> u64 {
        match self {
            Job::GenSynthetic { seed, .. } => *seed,
            Job::Pretrain { config, .. }
            | Job::TrainDisc { config, .. }
            | Job::Eval { config, .. }
            | Job::Ablate { config, .. }
            | Job::DistanceMatrix { config, .. } => config.seed,
        }
    }
}

pub fn save_manifest(m: &Manifest, dir: &Path) -> Result<()> {
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(m).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Runs `job`, writing the manifest and every artifact into `out_dir`.
/// Returns the summary printed to standard output.
pub fn execute(job: &Job, out_dir: &Path) -> Result<String> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    save_manifest(
        &Manifest {
            version: env!("CARGO_PKG_VERSION").into(),
            seed: job.seed(),
            job: job.clone(),
        },
        out_dir,
    )?;
    match job {
        Job::GenSynthetic {
            writers,
            chars,
            seed,
            file_name,
        } => {
            let path = out_dir.join(file_name);
            let s = build_dataset(*writers, *chars, &builtin_glyphs(), *seed, &path)?;
            Ok(format!(
                "{} records, {} train writers ({} records), {} held-out writers ({} records) -> {}",
                s.records,
                s.train_writers,
                s.train_records,
                s.val_writers,
                s.val_records,
                path.display()
            ))
        }
        Job::Pretrain { data, config } => {
            let (train, _) = config.split(&load_jsonl(data)?);
            let pool = WriterPool::new(&train)?;
            let mut params = ModelParams::init(&config.model(), config.seed)?;
            let log = pretrain(&pool, &config.train(), &mut params)?;
            log.save_csv(out_dir.join("pretrain_log.csv"))?;
            save_checkpoint(&params, out_dir.join("pretrain.ckpt"))?;
            let last = log.records.last();
            Ok(format!(
                "epochs {}  l_re {}  l_cl {}  l_total {}",
                log.records.len(),
                fmt_opt(last.and_then(|r| r.l_re)),
                fmt_opt(last.and_then(|r| r.l_cl)),
                fmt_opt(last.and_then(|r| r.l_total)),
            ))
        }
        Job::TrainDisc {
            data,
            checkpoint,
            config,
        } => {
            let (train, _) = config.split(&load_jsonl(data)?);
            let pool = WriterPool::new(&train)?;
            let mut params = load_checkpoint(checkpoint)?;
            let log = train_discriminator(&pool, &config.train(), &mut params)?;
            log.save_csv(out_dir.join("disc_log.csv"))?;
            save_checkpoint(&params, out_dir.join("model.ckpt"))?;
            Ok(format!(
                "epochs {}  l_ce {}",
                log.records.len(),
                fmt_opt(log.records.last().and_then(|r| r.l_ce))
            ))
        }
        Job::Eval {
            data,
            checkpoint,
            config,
        } => {
            let params = load_checkpoint(checkpoint)?;
            let (_, held_out) = config.split(&load_jsonl(data)?);
            let spec = config.selection();
            let report = evaluate(&params, &held_out, &spec)?;
            let name = match spec.protocol {
                Protocol::Rank1 => "eval_rank1.csv",
                Protocol::Pairs => "eval_pairs.csv",
            };
            report.save_csv(out_dir.join(name))?;
            Ok(summarize(&report, spec.protocol))
        }
        Job::Ablate { data, grid, config } => {
            let (train, held_out) = config.split(&load_jsonl(data)?);
            let runs = expand_grid(config, grid)?;
            let rows = run_ablation(&runs, &train, &held_out, &config.selection())?;
            let path = out_dir.join("ablation.csv");
            save_ablation_csv(&rows, &path)?;
            Ok(fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?)
        }
        Job::DistanceMatrix {
            data,
            checkpoint,
            config,
        } => {
            let params = load_checkpoint(checkpoint)?;
            let (_, held_out) = config.split(&load_jsonl(data)?);
            let m = length_distance_matrix(
                &ModelEmbedder::projector(&params),
                &held_out,
                &config.length(),
            )?;
            let path = out_dir.join("distance_matrix.csv");
            m.save_csv(&path)?;
            Ok(fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?)
        }
    }
}

fn evaluate(
    params: &ModelParams,
    records: &[RawTrajectory],
    spec: &SelectionSpec,
) -> Result<SelectionReport> {
    match spec.protocol {
        Protocol::Rank1 => eval_rank1(&ModelEmbedder::projector(params), records, spec),
        Protocol::Pairs => eval_pairs(
            &ModelEmbedder::discriminator_input(params),
            &ModelDiscriminator(params),
            records,
            spec,
        ),
    }
}

fn summarize(r: &SelectionReport, protocol: Protocol) -> String {
    let cell = |s: Option<crate::evalproto::Summary>| s.map_or("n/a".to_string(), |s| s.percent());
    match protocol {
        Protocol::Rank1 => format!("selections {}  rank1 {}", r.selections.len(), cell(r.rank1())),
        Protocol::Pairs => format!(
            "selections {}  accuracy {}  precision {}  undefined precision {}",
            r.selections.len(),
            cell(r.accuracy()),
            cell(r.precision()),
            r.undefined_precision()
        ),
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("-".into(), |v| format!("{v:.6}"))
}

#[derive(Parser, Debug)]
#[command(name = "cmae", version, about = "Character-level open-set writer identification")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug)]
pub struct ConfigArgs {
    /// TOML file of configuration keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one key, e.g. `--set pretrain_epochs=100`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic-writer JSONL dataset.
    GenSynthetic {
        #[arg(long)]
        writers: usize,
        #[arg(long)]
        chars: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// STEP 1 on the training writers; writes pretrain.ckpt.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// STEP 2 from a pretrained checkpoint; writes model.ckpt.
    TrainDisc {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Selection protocol on the held-out writers.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        protocol: Option<Protocol>,
        #[arg(long)]
        selections: Option<usize>,
        #[arg(long)]
        writers: Option<usize>,
        #[arg(long)]
        chars: Option<usize>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train and evaluate every point of a configuration grid.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        /// `key=v1,v2,...`; repeat for a cartesian product.
        #[arg(long, required = true)]
        grid: Vec<GridAxis>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Mean same-writer embedding distance per pair of crop lengths.
    DistanceMatrix {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Rerun a manifest into a new output directory.
    Replay {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn absolute(p: &Path) -> Result<PathBuf> {
    std::path::absolute(p).map_err(|e| Error::io(p, e))
}

/// Turns parsed arguments into a job and its output directory.
pub fn plan(command: Command) -> Result<(Job, PathBuf)> {
    let resolve = |c: &ConfigArgs| RunConfig::resolve(c.config.as_deref(), &c.set);
    Ok(match command {
        Command::GenSynthetic {
            writers,
            chars,
            seed,
            out,
        } => {
            let file_name = out
                .file_name()
                .ok_or_else(|| Error::Config(format!("--out {} has no file name", out.display())))?
                .to_string_lossy()
                .into_owned();
            let dir = match out.parent() {
                Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
                _ => PathBuf::from("."),
            };
            let job = Job::GenSynthetic {
                writers,
                chars,
                seed,
                file_name,
            };
            (job, dir)
        }
        Command::Pretrain { data, cfg } => (
            Job::Pretrain {
                data: absolute(&data)?,
                config: resolve(&cfg)?,
            },
            cfg.out_dir,
        ),
        Command::TrainDisc {
            data,
            checkpoint,
            cfg,
        } => (
            Job::TrainDisc {
                data: absolute(&data)?,
                checkpoint: absolute(&checkpoint)?,
                config: resolve(&cfg)?,
            },
            cfg.out_dir,
        ),
        Command::Eval {
            data,
            checkpoint,
            protocol,
            selections,
            writers,
            chars,
            cfg,
        } => {
            let mut set = cfg.set.clone();
            if let Some(p) = protocol {
                set.push(format!("protocol={}", if p == Protocol::Rank1 { "rank1" } else { "pairs" }));
            }
            set.extend(selections.map(|v| format!("n_selections={v}")));
            set.extend(writers.map(|v| format!("n_writers={v}")));
            set.extend(chars.map(|v| format!("chars_per_writer={v}")));
            (
                Job::Eval {
                    data: absolute(&data)?,
                    checkpoint: absolute(&checkpoint)?,
                    config: RunConfig::resolve(cfg.config.as_deref(), &set)?,
                },
                cfg.out_dir,
            )
        }
        Command::Ablate { data, grid, cfg } => {
            let config = resolve(&cfg)?;
            expand_grid(&config, &grid)?;
            (
                Job::Ablate {
                    data: absolute(&data)?,
                    grid,
                    config,
                },
                cfg.out_dir,
            )
        }
        Command::DistanceMatrix {
            data,
            checkpoint,
            cfg,
        } => (
            Job::DistanceMatrix {
                data: absolute(&data)?,
                checkpoint: absolute(&checkpoint)?,
                config: resolve(&cfg)?,
            },
            cfg.out_dir,
        ),
        Command::Replay { manifest, out_dir } => {
            let m = load_manifest(&manifest)?;
            let version = env!("CARGO_PKG_VERSION");
            if m.version != version {
                return Err(Error::Config(format!(
                    "manifest was written by version {}, this is {version}",
                    m.version
                )));
            }
            (m.job, out_dir)
        }
    })
}

/// Exit status for an error: 2 for configuration problems, 1 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        _ => 1,
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit status.
pub fn run<I, T>(args: I) -> i32
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
    match plan(cli.command).and_then(|(job, dir)| execute(&job, &dir)) {
        Ok(summary) => {
            println!("{summary}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
