//! Synthetic speech-like task: fixed per-token prototype patterns separated by
//! noisy silence, so most frames are blank under a CTC alignment.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ctc::LabelSeq;
use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    pub vocab_size: usize,
    pub input_dim: usize,
    /// Inclusive `[min, max]` frames per token instance.
    pub prototype_len: [usize; 2],
    pub silence_len: [usize; 2],
    pub tokens_per_utterance: [usize; 2],
    pub noise_std: f64,
    pub seed: u64,
    pub num_train: usize,
    pub num_test: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            vocab_size: 8,
            input_dim: 16,
            prototype_len: [6, 10],
            silence_len: [4, 20],
            tokens_per_utterance: [5, 12],
            noise_std: 0.05,
            seed: 1234,
            num_train: 2000,
            num_test: 200,
        }
    }
}

impl TaskConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, r) in [
            ("prototype_len", self.prototype_len),
            ("silence_len", self.silence_len),
            ("tokens_per_utterance", self.tokens_per_utterance),
        ] {
            if r[0] > r[1] {
                return Err(Error::Config(format!("{name} range {r:?} is empty")));
            }
        }
        if self.prototype_len[0] == 0 || self.tokens_per_utterance[0] == 0 {
            return Err(Error::Config("prototypes and utterances need at least one frame/token".into()));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::Config(format!("noise_std {} must be >= 0", self.noise_std)));
        }
        if self.vocab_size == 0 || self.input_dim == 0 {
            return Err(Error::Config("vocab_size and input_dim must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub labels: LabelSeq,
    /// `[frames, input_dim]`
    pub features: Tensor,
}

/// Where one token instance sits inside an utterance.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub token: usize,
    pub start: usize,
    pub len: usize,
}

/// Holds the frozen prototypes for one task seed.
#[derive(Clone, Debug)]
pub struct TaskGenerator {
    cfg: TaskConfig,
    /// One `[max_len, input_dim]` pattern per token, index 0 = token 1.
    prototypes: Vec<Tensor>,
}

impl TaskGenerator {
    pub fn new(cfg: TaskConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::new(cfg.seed).fork(0x5052_4f54);
        let prototypes = (0..cfg.vocab_size)
            .map(|_| rng.normal_tensor(&[cfg.prototype_len[1], cfg.input_dim], 1.0))
            .collect();
        Ok(Self { cfg, prototypes })
    }

    pub fn config(&self) -> &TaskConfig {
        &self.cfg
    }

    /// Token `k`'s pattern stretched to `len` frames by linear interpolation.
    pub fn prototype(&self, token: usize, len: usize) -> Vec<Vec<f64>> {
        let proto = &self.prototypes[token - 1];
        let max = proto.rows();
        (0..len)
            .map(|i| {
                let u = if len == 1 { 0.0 } else { i as f64 * (max - 1) as f64 / (len - 1) as f64 };
                let lo = u.floor() as usize;
                let hi = (lo + 1).min(max - 1);
                let frac = u - lo as f64;
                proto
                    .row(lo)
                    .iter()
                    .zip(proto.row(hi))
                    .map(|(a, b)| a + frac * (b - a))
                    .collect()
            })
            .collect()
    }

    pub fn gen_with_segments(&self, rng: &mut Rng, id: impl Into<String>) -> (Utterance, Vec<Segment>) {
        let c = &self.cfg;
        let n_tokens = rng.int_in(c.tokens_per_utterance[0], c.tokens_per_utterance[1]);
        let tokens: Vec<usize> = (0..n_tokens).map(|_| rng.int_in(1, c.vocab_size)).collect();

        let mut rows: Vec<Vec<f64>> = Vec::new();
        let silence = |rows: &mut Vec<Vec<f64>>, rng: &mut Rng| {
            let n = rng.int_in(c.silence_len[0], c.silence_len[1]);
            rows.extend((0..n).map(|_| vec![0.0; c.input_dim]));
        };
        let mut segments = Vec::with_capacity(n_tokens);
        silence(&mut rows, rng);
        for &tok in &tokens {
            let len = rng.int_in(c.prototype_len[0], c.prototype_len[1]);
            segments.push(Segment {
                token: tok,
                start: rows.len(),
                len,
            });
            rows.extend(self.prototype(tok, len));
            silence(&mut rows, rng);
        }
        if c.noise_std > 0.0 {
            for r in &mut rows {
                for v in r.iter_mut() {
                    *v += c.noise_std * rng.normal();
                }
            }
        }
        let features = Tensor::from_rows(&rows).expect("utterance has at least one token frame");
        let labels = LabelSeq::new(tokens).expect("tokens drawn from 1..=vocab");
        (
            Utterance {
                id: id.into(),
                labels,
                features,
            },
            segments,
        )
    }

    pub fn gen_utterance(&self, rng: &mut Rng, id: impl Into<String>) -> Utterance {
        self.gen_with_segments(rng, id).0
    }

    /// Deterministic train/test split for the configured seed.
    pub fn generate(&self) -> (Vec<Utterance>, Vec<Utterance>) {
        let base = Rng::new(self.cfg.seed);
        let mut train_rng = base.fork(1);
        let mut test_rng = base.fork(2);
        let train = (0..self.cfg.num_train)
            .map(|i| self.gen_utterance(&mut train_rng, format!("train-{i:05}")))
            .collect();
        let test = (0..self.cfg.num_test)
            .map(|i| self.gen_utterance(&mut test_rng, format!("test-{i:05}")))
            .collect();
        (train, test)
    }
}

/// One utterance drawn with the prototypes of `cfg.seed`.
pub fn gen_utterance(rng: &mut Rng, cfg: &TaskConfig) -> Result<Utterance> {
    Ok(TaskGenerator::new(cfg.clone())?.gen_utterance(rng, "utt"))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    id: String,
    labels: Vec<usize>,
    features: Vec<Vec<f64>>,
}

pub fn write_dataset(path: impl AsRef<Path>, utterances: &[Utterance]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for u in utterances {
        let rec = Record {
            id: u.id.clone(),
            labels: u.labels.tokens().to_vec(),
            features: u.features.to_rows(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Vec<Utterance>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_record(&line).map_err(|msg| Error::Parse { line: i + 1, msg })?);
    }
    Ok(out)
}

fn parse_record(line: &str) -> std::result::Result<Utterance, String> {
    let rec: Record = serde_json::from_str(line).map_err(|e| e.to_string())?;
    let labels = LabelSeq::new(rec.labels).map_err(|e| e.to_string())?;
    let features = Tensor::from_rows(&rec.features).map_err(|e| e.to_string())?;
    Ok(Utterance {
        id: rec.id,
        labels,
        features,
    })
}
