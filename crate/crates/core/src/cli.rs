//! Command-line front end: `gen-data`, `train`, `decode`, `bench`, `inspect`.
//!
//! Settings come from an optional TOML file with `[model]`, `[task]`,
//! `[train]`, `[decode]` and `[bench]` tables; command-line flags win over the
//! file, and the file wins over built-in defaults.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bench::{inspect_dump, run_bench, write_bench_csv, write_inspect_csv, BenchOptions};
use crate::data::{read_dataset, write_dataset, TaskConfig, TaskGenerator, Utterance};
use crate::decoder::{edit_distance, prefix_beam_search, DecodeOptions, EditCounts, SkipMode};
use crate::encoder::ModelConfig;
use crate::error::{Error, Result};
use crate::train::{load_checkpoint, save_checkpoint, train, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "blankskip", version, about = "Blank-triggered layer skipping for CTC encoders")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic train/test split and a manifest.
    GenData(GenDataArgs),
    /// Train an encoder and write a checkpoint plus a training log.
    Train(TrainArgs),
    /// Beam-search decode a dataset and report token error rate.
    Decode(DecodeArgs),
    /// Measure skip ratio, effective depth, timings and TER over thresholds.
    Bench(BenchArgs),
    /// Dump per-frame blank probabilities, skip flags and argmax tokens.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// TOML config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory for train.jsonl, test.jsonl and manifest.json.
    #[arg(long)]
    pub out: PathBuf,
    /// Task seed [default: 1234].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Training utterances [default: 2000].
    #[arg(long)]
    pub num_train: Option<usize>,
    /// Test utterances [default: 200].
    #[arg(long)]
    pub num_test: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory holding train.jsonl and test.jsonl.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for checkpoint.json and train_log.jsonl.
    #[arg(long)]
    pub out: PathBuf,
    /// Include the distillation term [default: true].
    #[arg(long)]
    pub use_kl: Option<bool>,
    /// Include the intermediate CTC loss [default: true].
    #[arg(long)]
    pub use_mtl: Option<bool>,
    /// Weight of the distillation term [default: 0.5].
    #[arg(long)]
    pub lambda_kl: Option<f64>,
    /// Factorized blank/non-blank output heads [default: false].
    #[arg(long)]
    pub factorized: Option<bool>,
    /// Training epochs [default: 30].
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Adam learning rate [default: 0.001].
    #[arg(long)]
    pub lr: Option<f64>,
    /// Utterances per step [default: 8].
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Initialization and shuffling seed [default: 42].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Stop once held-out greedy TER reaches this value [default: none].
    #[arg(long)]
    pub target_ter: Option<f64>,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    /// TOML config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset file (JSON lines).
    #[arg(long)]
    pub data: PathBuf,
    /// Skip threshold for both the encoder and the decoder; 1.0 disables skipping [default: 1.0].
    #[arg(long)]
    pub tau: Option<f64>,
    /// Beam width [default: 8].
    #[arg(long)]
    pub beam: Option<usize>,
    /// Hypotheses kept per utterance [default: 1].
    #[arg(long)]
    pub nbest: Option<usize>,
    /// How the decoder treats skipped frames [default: blank-certain].
    #[arg(long, value_enum)]
    pub skip_mode: Option<SkipModeArg>,
    /// Hypotheses file (JSON lines).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
pub enum SkipModeArg {
    BlankCertain,
    Ignore,
}

impl From<SkipModeArg> for SkipMode {
    fn from(m: SkipModeArg) -> Self {
        match m {
            SkipModeArg::BlankCertain => SkipMode::BlankCertain,
            SkipModeArg::Ignore => SkipMode::Ignore,
        }
    }
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// TOML config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset file (JSON lines).
    #[arg(long)]
    pub data: PathBuf,
    /// Comma-separated thresholds.
    #[arg(long, value_delimiter = ',', default_value = "1.0,0.99,0.95")]
    pub tau_list: Vec<f64>,
    /// Beam width [default: 8].
    #[arg(long)]
    pub beam: Option<usize>,
    /// Seconds per input frame used for the real-time factor [default: 0.01].
    #[arg(long)]
    pub frame_period: Option<f64>,
    /// Timing passes; the median is reported [default: 3].
    #[arg(long)]
    pub repeats: Option<usize>,
    /// CSV report.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset file (JSON lines).
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub utt_id: String,
    /// Skip threshold [default: the checkpoint's tau_skip].
    #[arg(long)]
    pub tau: Option<f64>,
    /// `jsonl` writes one record, `csv` one row per frame.
    #[arg(long, value_enum, default_value = "jsonl")]
    pub format: DumpFormat,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum DumpFormat {
    Jsonl,
    Csv,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    pub frame_period_s: Option<f64>,
    pub repeats: Option<usize>,
}

/// Everything a config file can set.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CliConfig {
    /// Holds the `[model]` and `[task]` tables as well as `[train]`.
    pub train: TrainConfig,
    pub decode: DecodeOptions,
    pub bench: BenchSection,
}

impl CliConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        if let Some(k) = table
            .keys()
            .find(|k| !["model", "task", "train", "decode", "bench"].contains(&k.as_str()))
        {
            return Err(Error::Config(format!("unknown section `{k}`")));
        }
        let take = |t: &mut toml::Table, k: &str| t.remove(k).unwrap_or_else(|| toml::Value::Table(Default::default()));
        let mut train = match take(&mut table, "train") {
            toml::Value::Table(t) => t,
            _ => return Err(Error::Config("`train` must be a table".into())),
        };
        for k in ["model", "task"] {
            if train.contains_key(k) {
                return Err(Error::Config(format!("unknown field `{k}` in [train]")));
            }
            train.insert(k.to_string(), take(&mut table, k));
        }
        section::<ModelConfig>(train["model"].clone(), "model")?;
        section::<TaskConfig>(train["task"].clone(), "task")?;
        Ok(Self {
            train: section(toml::Value::Table(train), "train")?,
            decode: section(take(&mut table, "decode"), "decode")?,
            bench: section(take(&mut table, "bench"), "bench")?,
        })
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                Self::from_toml(&text).map_err(|e| match e {
                    Error::Config(m) => Error::Config(format!("{}: {m}", p.display())),
                    other => other,
                })
            }
        }
    }
}

fn section<T: serde::de::DeserializeOwned>(v: toml::Value, name: &str) -> Result<T> {
    v.try_into()
        .map_err(|e: toml::de::Error| Error::Config(format!("[{name}] {}", e.message())))
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code: 0 success, 1 usage error, 2 runtime failure.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

pub fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Decode(a) => decode(a),
        Command::Bench(a) => bench(a),
        Command::Inspect(a) => inspect(a),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

/// Hex SHA-256 of the task config's JSON form.
pub fn config_hash(task: &TaskConfig) -> Result<String> {
    let json = serde_json::to_vec(task)?;
    Ok(Sha256::digest(json).iter().map(|b| format!("{b:02x}")).collect())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub config_hash: String,
    pub num_train: usize,
    pub num_test: usize,
    pub task: TaskConfig,
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let mut task = CliConfig::load(a.config.as_deref())?.train.task;
    if let Some(s) = a.seed {
        task.seed = s;
    }
    if let Some(n) = a.num_train {
        task.num_train = n;
    }
    if let Some(n) = a.num_test {
        task.num_test = n;
    }
    let (train_set, test_set) = TaskGenerator::new(task.clone())?.generate();
    create_dir(&a.out)?;
    write_dataset(a.out.join("train.jsonl"), &train_set)?;
    write_dataset(a.out.join("test.jsonl"), &test_set)?;
    let manifest = Manifest {
        seed: task.seed,
        config_hash: config_hash(&task)?,
        num_train: train_set.len(),
        num_test: test_set.len(),
        task,
    };
    let path = a.out.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    println!(
        "wrote {} train / {} test utterances to {}",
        manifest.num_train,
        manifest.num_test,
        a.out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct LogHeader<'a> {
    lambda_kl: f64,
    use_kl: bool,
    use_mtl: bool,
    config: &'a TrainConfig,
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let mut cfg = CliConfig::load(a.config.as_deref())?.train;
    macro_rules! set {
        ($($flag:ident => $($field:ident).+),* $(,)?) => {
            $(if let Some(v) = a.$flag { cfg.$($field).+ = v; })*
        };
    }
    set!(use_kl => use_kl, use_mtl => use_mtl, lambda_kl => lambda_kl, factorized => model.factorized_heads,
        epochs => epochs, lr => learning_rate, batch_size => batch_size, seed => seed);
    if a.target_ter.is_some() {
        cfg.target_ter = a.target_ter;
    }
    cfg.validate()?;
    let train_set = read_dataset(a.data.join("train.jsonl"))?;
    let test_set = read_dataset(a.data.join("test.jsonl"))?;

    create_dir(&a.out)?;
    let log_path = a.out.join("train_log.jsonl");
    let mut log = create(&log_path)?;
    let header = LogHeader {
        lambda_kl: cfg.lambda_kl,
        use_kl: cfg.use_kl,
        use_mtl: cfg.use_mtl,
        config: &cfg,
    };
    serde_json::to_writer(&mut log, &header)?;
    writeln!(log).map_err(|e| Error::io(&log_path, e))?;

    let mut log_err = None;
    let result = train(&cfg, &train_set, &test_set, |rec| {
        eprintln!(
            "epoch {:>3}  loss {:.4}  ctc {:.4}  ctc_in {:.4}  kl {:.4}  heldout TER {:.4}",
            rec.epoch, rec.loss, rec.ctc, rec.ctc_in, rec.kl, rec.heldout_ter
        );
        let line = serde_json::to_string(rec).expect("records serialize");
        if let Err(e) = writeln!(log, "{line}").and_then(|_| log.flush()) {
            log_err.get_or_insert(e);
        }
    });
    if let Some(e) = log_err {
        return Err(Error::io(&log_path, e));
    }
    let ckpt = result?;
    save_checkpoint(a.out.join("checkpoint.json"), &ckpt)?;
    println!("wrote {}", a.out.join("checkpoint.json").display());
    Ok(())
}

#[derive(Serialize)]
struct NBestEntry {
    labels: Vec<usize>,
    log_prob: f64,
}

#[derive(Serialize)]
struct DecodeRecord<'a> {
    id: &'a str,
    reference: &'a [usize],
    nbest: Vec<NBestEntry>,
    errors: usize,
}

/// Corpus-level result of [`decode_dataset`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecodeSummary {
    pub edits: EditCounts,
    pub ref_tokens: usize,
    pub utterances: usize,
}

impl DecodeSummary {
    pub fn ter(&self) -> f64 {
        self.edits.error_rate(self.ref_tokens)
    }
}

/// Decodes every utterance, writing one JSON line per utterance to `out`.
pub fn decode_dataset<W: Write>(
    encoder: &crate::encoder::Encoder,
    data: &[Utterance],
    opts: &DecodeOptions,
    mut out: W,
) -> Result<DecodeSummary> {
    opts.validate()?;
    let mut summary = DecodeSummary {
        edits: EditCounts::default(),
        ref_tokens: 0,
        utterances: data.len(),
    };
    for u in data {
        let enc = encoder.encode_skip(&u.features, opts.tau_decode)?;
        let nbest = prefix_beam_search(&enc.p, opts)?;
        let edits = edit_distance(&u.labels, &nbest[0].0);
        summary.edits += edits;
        summary.ref_tokens += u.labels.len();
        let rec = DecodeRecord {
            id: &u.id,
            reference: u.labels.tokens(),
            nbest: nbest
                .iter()
                .map(|(l, lp)| NBestEntry {
                    labels: l.tokens().to_vec(),
                    log_prob: *lp,
                })
                .collect(),
            errors: edits.errors(),
        };
        serde_json::to_writer(&mut out, &rec)?;
        writeln!(out).map_err(|e| Error::io("hypotheses", e))?;
    }
    out.flush().map_err(|e| Error::io("hypotheses", e))?;
    Ok(summary)
}

fn decode(a: DecodeArgs) -> Result<()> {
    let mut opts = CliConfig::load(a.config.as_deref())?.decode;
    if let Some(t) = a.tau {
        opts.tau_decode = t;
    }
    if let Some(b) = a.beam {
        opts.beam_width = b;
    }
    if let Some(n) = a.nbest {
        opts.nbest = n;
    }
    if let Some(m) = a.skip_mode {
        opts.skip_mode = m.into();
    }
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let data = read_dataset(&a.data)?;
    let s = decode_dataset(&ckpt.encoder, &data, &opts, create(&a.out)?)?;
    println!(
        "TER {:.6} ({} errors / {} tokens; sub {} ins {} del {}) over {} utterances",
        s.ter(),
        s.edits.errors(),
        s.ref_tokens,
        s.edits.substitutions,
        s.edits.insertions,
        s.edits.deletions,
        s.utterances
    );
    Ok(())
}

fn bench(a: BenchArgs) -> Result<()> {
    let file = CliConfig::load(a.config.as_deref())?;
    let defaults = BenchOptions::default();
    let mut opts = BenchOptions {
        decode: file.decode,
        frame_period_s: a
            .frame_period
            .or(file.bench.frame_period_s)
            .unwrap_or(defaults.frame_period_s),
        repeats: a.repeats.or(file.bench.repeats).unwrap_or(defaults.repeats),
    };
    if let Some(b) = a.beam {
        opts.decode.beam_width = b;
    }
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let data = read_dataset(&a.data)?;
    let rows = run_bench(&ckpt.encoder, &data, &a.tau_list, &opts)?;
    write_bench_csv(create(&a.out)?, &rows, opts.frame_period_s)?;
    for r in &rows {
        let tau = r.tau.map_or_else(|| "baseline".to_string(), |t| t.to_string());
        println!(
            "{tau:>8}  skip {:.4}  layers {:.3}  TER {:.4}  rtf {:.5}",
            r.skip_ratio, r.effective_layers, r.ter, r.rtf
        );
    }
    Ok(())
}

fn inspect(a: InspectArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let data = read_dataset(&a.data)?;
    let utt = data.iter().find(|u| u.id == a.utt_id).ok_or_else(|| {
        let ids: Vec<&str> = data.iter().map(|u| u.id.as_str()).collect();
        Error::InvalidArgument(format!("unknown utterance id {:?}; available: {}", a.utt_id, ids.join(", ")))
    })?;
    let tau = a.tau.unwrap_or(ckpt.config().tau_skip);
    let rec = inspect_dump(&ckpt.encoder, utt, tau)?;
    let mut out = create(&a.out)?;
    match a.format {
        DumpFormat::Jsonl => {
            serde_json::to_writer(&mut out, &rec)?;
            writeln!(out).map_err(|e| Error::io(&a.out, e))?;
            out.flush().map_err(|e| Error::io(&a.out, e))?;
        }
        DumpFormat::Csv => write_inspect_csv(out, &rec)?,
    }
    Ok(())
}
