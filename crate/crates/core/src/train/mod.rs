//! Multi-task CTC training: final-head CTC, intermediate-head CTC and a
//! distillation term pulling the intermediate distribution toward the
//! (detached) final one.

mod checkpoint;
mod optim;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use optim::Adam;

use serde::{Deserialize, Serialize};

use crate::ctc::{self, greedy_decode};
use crate::data::{TaskConfig, Utterance};
use crate::decoder::{edit_distance, EditCounts};
use crate::encoder::{Bound, Encoder, ModelConfig};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Rng, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub task: TaskConfig,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lambda_kl: f64,
    pub use_kl: bool,
    pub use_mtl: bool,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub clip_norm: f64,
    /// Linear warmup length in optimizer steps; 0 disables it.
    pub warmup_steps: usize,
    pub seed: u64,
    /// Stop after the first epoch whose held-out greedy TER is at or below this.
    pub target_ter: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            task: TaskConfig::default(),
            learning_rate: 1e-3,
            epochs: 30,
            batch_size: 8,
            lambda_kl: 0.5,
            use_kl: true,
            use_mtl: true,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            clip_norm: 5.0,
            warmup_steps: 0,
            seed: 42,
            target_ter: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.task.validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be >= 1".into()));
        }
        if !(self.lambda_kl >= 0.0) {
            return Err(Error::Config(format!("lambda_kl {} must be >= 0", self.lambda_kl)));
        }
        if !(self.learning_rate > 0.0) || !(self.clip_norm > 0.0) {
            return Err(Error::Config("learning_rate and clip_norm must be positive".into()));
        }
        if self.model.vocab_size != self.task.vocab_size || self.model.input_dim != self.task.input_dim {
            return Err(Error::Config(format!(
                "model (vocab {}, input {}) does not match task (vocab {}, input {})",
                self.model.vocab_size, self.model.input_dim, self.task.vocab_size, self.task.input_dim
            )));
        }
        Ok(())
    }

    pub fn loss_options(&self) -> LossOptions {
        LossOptions {
            lambda_kl: self.lambda_kl,
            use_kl: self.use_kl,
            use_mtl: self.use_mtl,
            kl_frame_weights: None,
        }
    }
}

/// Per-frame weights for the distillation term, computed from the detached
/// final-head log-probabilities `[frames, vocab + 1]`.
pub type KlFrameWeights = fn(&Tensor) -> Vec<f64>;

#[derive(Clone, Copy, Debug)]
pub struct LossOptions {
    pub lambda_kl: f64,
    pub use_kl: bool,
    pub use_mtl: bool,
    /// `None` weights every frame equally.
    pub kl_frame_weights: Option<KlFrameWeights>,
}

/// Scalar loss node plus the batch-mean value of each component.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub ctc: f64,
    pub ctc_in: f64,
    pub kl: f64,
    pub total_value: f64,
}

/// `L_ctc + L_ctc_in + λ·KL` averaged over the batch. Each utterance runs the
/// full-depth encoder; skipping is inference-only.
pub fn total_loss(
    g: &mut Graph,
    encoder: &Encoder,
    bound: &Bound,
    batch: &[&Utterance],
    opts: &LossOptions,
) -> Result<LossTerms> {
    if batch.is_empty() {
        return Err(Error::Empty("total_loss"));
    }
    let mut ctc_terms = Vec::with_capacity(batch.len());
    let mut ctc_in_terms = Vec::new();
    let mut kl_terms = Vec::new();
    for utt in batch {
        let wrap = |e: Error| Error::Utterance {
            id: utt.id.clone(),
            source: Box::new(e),
        };
        let f = encoder.forward(g, bound, &utt.features, None).map_err(wrap)?;
        ctc_terms.push(ctc::ctc_loss_node(g, f.log_p, &utt.labels).map_err(wrap)?);
        if opts.use_mtl {
            ctc_in_terms.push(ctc::ctc_loss_node(g, f.log_p_in, &utt.labels).map_err(wrap)?);
        }
        if opts.use_kl {
            let target = g.value(f.log_p).clone();
            let weights = opts.kl_frame_weights.map(|w| w(&target));
            kl_terms.push(ctc::kl_frame_loss_node(g, f.log_p_in, &target, weights.as_deref()).map_err(wrap)?);
        }
    }
    let n = batch.len() as f64;
    let mean = |g: &mut Graph, terms: &[Var]| -> Result<Option<Var>> {
        if terms.is_empty() {
            return Ok(None);
        }
        let joined = g.concat_rows(terms)?;
        let s = g.sum(joined);
        Ok(Some(g.scale(s, 1.0 / n)))
    };
    let ctc = mean(g, &ctc_terms)?.expect("batch is nonempty");
    let ctc_in = mean(g, &ctc_in_terms)?;
    let kl = mean(g, &kl_terms)?;

    let mut total = ctc;
    if let Some(v) = ctc_in {
        total = g.add(total, v)?;
    }
    if let Some(v) = kl {
        let weighted = g.scale(v, opts.lambda_kl);
        total = g.add(total, weighted)?;
    }
    let val = |g: &Graph, v: Option<Var>| v.map_or(0.0, |v| g.value(v).item());
    Ok(LossTerms {
        total,
        ctc: g.value(ctc).item(),
        ctc_in: val(g, ctc_in),
        kl: val(g, kl),
        total_value: g.value(total).item(),
    })
}

/// Corpus token error rate of greedy final-head decoding on full-depth encodes.
pub fn greedy_ter(encoder: &Encoder, data: &[Utterance]) -> Result<f64> {
    let mut counts = EditCounts::default();
    let mut ref_tokens = 0;
    for u in data {
        let r = encoder.encode_full(&u.features)?;
        counts += edit_distance(&u.labels, &greedy_decode(&r.p));
        ref_tokens += u.labels.len();
    }
    Ok(counts.errors() as f64 / ref_tokens.max(1) as f64)
}

/// Per-epoch training record; also the line format of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub ctc: f64,
    pub ctc_in: f64,
    pub kl: f64,
    pub heldout_ter: f64,
}

/// Trains from a fresh initialization. `on_epoch` sees each record as it is produced.
pub fn train(
    config: &TrainConfig,
    train_set: &[Utterance],
    heldout: &[Utterance],
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<Checkpoint> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let root = Rng::new(config.seed);
    let mut encoder = Encoder::new(config.model.clone(), &mut root.fork(1))?;
    let mut adam = Adam::new(config, encoder.params());
    let opts = config.loss_options();
    let mut step = 0;
    let mut history = Vec::new();

    for epoch in 1..=config.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        root.fork(1000 + epoch as u64).shuffle(&mut order);
        let (mut sum, mut sum_ctc, mut sum_in, mut sum_kl, mut batches) = (0.0, 0.0, 0.0, 0.0, 0usize);

        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Utterance> = chunk.iter().map(|&i| &train_set[i]).collect();
            let mut g = Graph::new();
            let bound = encoder.params().bind(&mut g, true);
            let terms = total_loss(&mut g, &encoder, &bound, &batch, &opts)?;
            if !terms.total_value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step,
                    ctc: terms.ctc,
                    ctc_in: terms.ctc_in,
                    kl: terms.kl,
                });
            }
            g.backward(terms.total)?;
            let params = encoder.params_mut();
            params.zero_grads();
            params.accumulate_grads(&g, &bound);
            adam.step(params);
            step += 1;

            sum += terms.total_value;
            sum_ctc += terms.ctc;
            sum_in += terms.ctc_in;
            sum_kl += terms.kl;
            batches += 1;
        }
        let b = batches as f64;
        let heldout_ter = if heldout.is_empty() { f64::NAN } else { greedy_ter(&encoder, heldout)? };
        let rec = EpochRecord {
            epoch,
            step,
            loss: sum / b,
            ctc: sum_ctc / b,
            ctc_in: sum_in / b,
            kl: sum_kl / b,
            heldout_ter,
        };
        on_epoch(&rec);
        history.push(rec);
        if let Some(target) = config.target_ter {
            if heldout_ter <= target {
                break;
            }
        }
    }
    encoder.params_mut().zero_grads();
    Ok(Checkpoint::new(encoder, step, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::TaskGenerator;

    fn tiny() -> TrainConfig {
        let model = ModelConfig {
            model_dim: 8,
            num_layers: 2,
            split_layer: 1,
            num_heads: 2,
            ffn_dim: 16,
            vocab_size: 3,
            input_dim: 4,
            ..ModelConfig::default()
        };
        let task = TaskConfig {
            vocab_size: 3,
            input_dim: 4,
            tokens_per_utterance: [1, 3],
            silence_len: [2, 6],
            num_train: 4,
            num_test: 2,
            ..TaskConfig::default()
        };
        TrainConfig {
            model,
            task,
            batch_size: 2,
            epochs: 1,
            ..TrainConfig::default()
        }
    }

    fn batch_terms(cfg: &TrainConfig, opts: LossOptions) -> (Graph, Bound, LossTerms, Encoder) {
        let enc = Encoder::new(cfg.model.clone(), &mut Rng::new(3)).unwrap();
        let (train, _) = TaskGenerator::new(cfg.task.clone()).unwrap().generate();
        let batch: Vec<&Utterance> = train.iter().collect();
        let mut g = Graph::new();
        let b = enc.params().bind(&mut g, true);
        let t = total_loss(&mut g, &enc, &b, &batch, &opts).unwrap();
        (g, b, t, enc)
    }

    #[test]
    fn decomposition_is_exact_sum() {
        let cfg = tiny();
        let (_, _, t, _) = batch_terms(&cfg, cfg.loss_options());
        let recon = t.ctc + t.ctc_in + 0.5 * t.kl;
        assert!((t.total_value - recon).abs() < 1e-12);
        assert!(t.kl > 0.0);
    }

    #[test]
    fn term_removal() {
        let cfg = tiny();
        let opts = LossOptions {
            use_kl: false,
            use_mtl: false,
            ..cfg.loss_options()
        };
        let (_, _, t, _) = batch_terms(&cfg, opts);
        assert_eq!(t.total_value, t.ctc);
        assert_eq!((t.ctc_in, t.kl), (0.0, 0.0));
    }

    #[test]
    fn kl_only_backward_leaves_final_head_untouched() {
        let cfg = tiny();
        let enc = Encoder::new(cfg.model.clone(), &mut Rng::new(3)).unwrap();
        let (train, _) = TaskGenerator::new(cfg.task.clone()).unwrap().generate();
        let mut g = Graph::new();
        let b = enc.params().bind(&mut g, true);
        let f = enc.forward(&mut g, &b, &train[0].features, None).unwrap();
        let target = g.value(f.log_p).clone();
        let kl = ctc::kl_frame_loss_node(&mut g, f.log_p_in, &target, None).unwrap();
        g.backward(kl).unwrap();
        for name in enc.params().names().filter(|n| n.starts_with("head_out") || n.starts_with("layers.1")) {
            let v = b.get(name).unwrap();
            assert!(g.grad(v).is_none(), "{name} received gradient");
        }
        let v = b.get("head_in.w").unwrap();
        assert!(g.grad(v).unwrap().iter().any(|x| *x != 0.0));
    }

    #[test]
    fn intermediate_head_trains_without_kl() {
        let cfg = tiny();
        let opts = LossOptions {
            lambda_kl: 0.0,
            ..cfg.loss_options()
        };
        let (mut g, b, t, _) = batch_terms(&cfg, opts);
        g.backward(t.total).unwrap();
        let v = b.get("head_in.w").unwrap();
        assert!(g.grad(v).unwrap().iter().any(|x| *x != 0.0));
    }

    #[test]
    fn infeasible_utterance_is_named() {
        let cfg = tiny();
        let enc = Encoder::new(cfg.model.clone(), &mut Rng::new(3)).unwrap();
        let utt = Utterance {
            id: "short-one".into(),
            labels: ctc::LabelSeq::new(vec![1, 2, 3, 1]).unwrap(),
            features: Tensor::zeros(&[4, 4]),
        };
        let mut g = Graph::new();
        let b = enc.params().bind(&mut g, true);
        let err = total_loss(&mut g, &enc, &b, &[&utt], &cfg.loss_options()).unwrap_err();
        assert!(err.to_string().contains("short-one"), "{err}");
    }

    #[test]
    fn same_seed_same_weights() {
        let cfg = tiny();
        let (train, test) = TaskGenerator::new(cfg.task.clone()).unwrap().generate();
        let a = train_fn(&cfg, &train, &test);
        let b = train_fn(&cfg, &train, &test);
        assert_eq!(a.encoder.params(), b.encoder.params());
    }

    fn train_fn(cfg: &TrainConfig, train_set: &[Utterance], test: &[Utterance]) -> Checkpoint {
        super::train(cfg, train_set, test, |_| {}).unwrap()
    }

    #[test]
    fn config_rejects_mismatch() {
        let mut cfg = tiny();
        cfg.task.vocab_size = 5;
        assert!(cfg.validate().is_err());
        let cfg = TrainConfig {
            lambda_kl: -1.0,
            ..tiny()
        };
        assert!(cfg.validate().is_err());
    }
}
