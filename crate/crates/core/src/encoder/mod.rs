//! Conformer-style encoder split at layer `K`, with an intermediate CTC head
//! whose blank posterior decides, per frame, whether layers `K+1..=L` run.
//!
//! The lower stack always runs on every frame. Frames whose intermediate
//! blank probability clears the threshold over the whole gating window are
//! *skipped*: their lower-stack output is carried forward unchanged and their
//! output distribution is the intermediate one. The remaining frames are
//! gathered into a compact sequence, run through the upper stack (attention
//! sees only those frames), and scattered back.

mod config;
mod mask;
mod params;

pub use config::ModelConfig;
pub use mask::{compute_skip_mask, SkipMask};
pub use params::{Bound, ParamStore};

use crate::ctc::{self, FactorizedHead, FactorizedVars, PosteriorGrid};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Rng, Tensor, Var};

/// Output heads of the encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Head {
    Intermediate,
    Final,
}

impl Head {
    fn prefix(self) -> &'static str {
        match self {
            Head::Intermediate => "head_in",
            Head::Final => "head_out",
        }
    }
}

/// Stacks `stride` consecutive frames into one; a trailing remainder is dropped.
pub fn subsample(features: &Tensor, stride: usize) -> Result<Tensor> {
    let (t, d) = (features.rows(), features.cols());
    if stride == 0 || t < stride {
        return Err(Error::InvalidArgument(format!(
            "cannot subsample {t} frames with stride {stride}"
        )));
    }
    let out_t = t / stride;
    let data = features.data()[..out_t * stride * d].to_vec();
    Tensor::new(&[out_t, stride * d], data)
}

/// Sinusoidal absolute position table `[frames, dim]`.
pub fn positional_encoding(frames: usize, dim: usize) -> Tensor {
    let mut data = vec![0.0; frames * dim];
    for t in 0..frames {
        for i in 0..dim {
            let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            let angle = t as f64 * rate;
            data[t * dim + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::from_parts(vec![frames, dim], data)
}

fn linear(g: &mut Graph, b: &Bound, name: &str, x: Var) -> Result<Var> {
    let w = b.get(&format!("{name}.w"))?;
    let bias = b.get(&format!("{name}.b"))?;
    let y = g.matmul(x, w)?;
    g.add_row(y, bias)
}

fn norm(g: &mut Graph, b: &Bound, name: &str, x: Var) -> Result<Var> {
    let gain = b.get(&format!("{name}.g"))?;
    let bias = b.get(&format!("{name}.b"))?;
    let y = g.layer_norm(x);
    let y = g.mul_row(y, gain)?;
    g.add_row(y, bias)
}

fn self_attention(g: &mut Graph, b: &Bound, name: &str, x: Var, cfg: &ModelConfig) -> Result<Var> {
    let q = linear(g, b, &format!("{name}.q"), x)?;
    let k = linear(g, b, &format!("{name}.k"), x)?;
    let v = linear(g, b, &format!("{name}.v"), x)?;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.num_heads);
    for h in 0..cfg.num_heads {
        let qh = g.slice_cols(q, h * dh, dh)?;
        let kh = g.slice_cols(k, h * dh, dh)?;
        let vh = g.slice_cols(v, h * dh, dh)?;
        let scores = g.matmul_nt(qh, kh)?;
        let scores = g.scale(scores, scale);
        let att = g.softmax(scores);
        heads.push(g.matmul(att, vh)?);
    }
    let ctx = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
    linear(g, b, &format!("{name}.o"), ctx)
}

fn conv_module(g: &mut Graph, b: &Bound, name: &str, x: Var, cfg: &ModelConfig) -> Result<Var> {
    let d = cfg.model_dim;
    let y = linear(g, b, &format!("{name}.pw1"), x)?;
    let a = g.slice_cols(y, 0, d)?;
    let gate = g.slice_cols(y, d, d)?;
    let gate = g.sigmoid(gate);
    let y = g.mul(a, gate)?;
    let y = g.depthwise_conv(y, b.get(&format!("{name}.dw.w"))?)?;
    let y = g.add_row(y, b.get(&format!("{name}.dw.b"))?)?;
    let y = norm(g, b, &format!("{name}.dw_norm"), y)?;
    let s = g.sigmoid(y);
    let y = g.mul(y, s)?;
    linear(g, b, &format!("{name}.pw2"), y)
}

fn feed_forward(g: &mut Graph, b: &Bound, name: &str, x: Var) -> Result<Var> {
    let y = linear(g, b, &format!("{name}.w1"), x)?;
    let y = g.gelu(y);
    linear(g, b, &format!("{name}.w2"), y)
}

/// One pre-norm block: attention, optional depthwise convolution, then
/// feed-forward, each wrapped in a residual connection. `prefix` names the
/// block's weights (e.g. `layers.0`).
pub fn conformer_block(g: &mut Graph, b: &Bound, prefix: &str, x: Var, cfg: &ModelConfig) -> Result<Var> {
    let y = norm(g, b, &format!("{prefix}.attn_norm"), x)?;
    let y = self_attention(g, b, &format!("{prefix}.attn"), y, cfg)?;
    let mut x = g.add(x, y)?;
    if cfg.use_conv_block {
        let y = norm(g, b, &format!("{prefix}.conv_norm"), x)?;
        let y = conv_module(g, b, &format!("{prefix}.conv"), y, cfg)?;
        x = g.add(x, y)?;
    }
    let y = norm(g, b, &format!("{prefix}.ffn_norm"), x)?;
    let y = feed_forward(g, b, &format!("{prefix}.ffn"), y)?;
    g.add(x, y)
}

/// Graph handles produced by one encoder pass.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    pub h_in: Var,
    pub log_p_in: Var,
    pub h: Var,
    pub log_p: Var,
    pub mask: SkipMask,
}

/// Materialized result of an encoder pass.
#[derive(Clone, Debug)]
pub struct EncodeResult {
    pub h_in: Tensor,
    pub p_in: PosteriorGrid,
    pub h: Tensor,
    pub p: PosteriorGrid,
    pub skip_mask: SkipMask,
    pub upper_frames_computed: usize,
}

impl EncodeResult {
    pub fn frames(&self) -> usize {
        self.skip_mask.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    config: ModelConfig,
    params: ParamStore,
}

impl Encoder {
    /// Fresh randomly initialized model.
    pub fn new(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let params = init_params(&config, rng);
        Ok(Self { config, params })
    }

    /// Wraps loaded weights, rejecting any missing, extra or misshapen tensor.
    pub fn from_parts(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let reference = init_params(&config, &mut Rng::new(0));
        reference.check_compatible(&params)?;
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Subsampling, input projection and position encoding.
    pub fn embed(&self, g: &mut Graph, b: &Bound, features: &Tensor) -> Result<Var> {
        if features.cols() != self.config.input_dim {
            return Err(Error::Shape {
                op: "encoder input",
                lhs: vec![self.config.input_dim],
                rhs: features.shape().to_vec(),
            });
        }
        let frames = subsample(features, self.config.subsample_stride)?;
        let t = frames.rows();
        let x = g.constant(frames);
        let x = linear(g, b, "input", x)?;
        let pe = g.constant(positional_encoding(t, self.config.model_dim));
        g.add(x, pe)
    }

    /// Layers `1..=K`.
    pub fn lower(&self, g: &mut Graph, b: &Bound, mut x: Var) -> Result<Var> {
        for i in 0..self.config.split_layer {
            x = conformer_block(g, b, &format!("layers.{i}"), x, &self.config)?;
        }
        Ok(x)
    }

    /// Layers `K+1..=L`.
    pub fn upper(&self, g: &mut Graph, b: &Bound, mut x: Var) -> Result<Var> {
        for i in self.config.split_layer..self.config.num_layers {
            x = conformer_block(g, b, &format!("layers.{i}"), x, &self.config)?;
        }
        Ok(x)
    }

    /// Normalized representation the given head projects from.
    pub fn head_features(&self, g: &mut Graph, b: &Bound, which: Head, h: Var) -> Result<Var> {
        norm(g, b, &format!("{}.norm", which.prefix()), h)
    }

    /// `[frames, vocab + 1]` log-probabilities from one head.
    pub fn head(&self, g: &mut Graph, b: &Bound, which: Head, h: Var) -> Result<Var> {
        let p = which.prefix();
        let x = self.head_features(g, b, which, h)?;
        if self.config.factorized_heads {
            let vars = FactorizedVars {
                gate: b.get(&format!("{p}.gate"))?,
                gate_bias: b.get(&format!("{p}.gate_b"))?,
                token: b.get(&format!("{p}.token"))?,
                token_bias: b.get(&format!("{p}.token_b"))?,
            };
            ctc::factorized_log_probs(g, x, vars)
        } else {
            let logits = g.matmul_nt(x, b.get(&format!("{p}.w"))?)?;
            let logits = g.add_row(logits, b.get(&format!("{p}.b"))?)?;
            Ok(g.log_softmax(logits))
        }
    }

    /// Owned copy of a factorized head's weights, if the model uses them.
    pub fn factorized_head(&self, which: Head) -> Option<FactorizedHead> {
        if !self.config.factorized_heads {
            return None;
        }
        let p = which.prefix();
        let get = |n: &str| self.params.get(&format!("{p}.{n}")).cloned();
        Some(FactorizedHead {
            gate: get("gate")?.into_data(),
            gate_bias: get("gate_b")?.item(),
            token: get("token")?,
            token_bias: get("token_b")?.into_data(),
        })
    }

    /// Builds the encoder on `g`. With `tau = None` every frame runs the full
    /// depth; otherwise the blank-gated skip mask decides.
    pub fn forward(&self, g: &mut Graph, b: &Bound, features: &Tensor, tau: Option<f64>) -> Result<ForwardVars> {
        let x = self.embed(g, b, features)?;
        let h_in = self.lower(g, b, x)?;
        let log_p_in = self.head(g, b, Head::Intermediate, h_in)?;
        let frames = g.value(h_in).rows();

        let mask = match tau {
            None => SkipMask::all_keep(frames),
            Some(tau) => {
                if !(tau > 0.0 && tau <= 1.0) {
                    return Err(Error::InvalidArgument(format!("tau {tau} outside (0, 1]")));
                }
                let lp = g.value(log_p_in);
                let blanks: Vec<f64> = (0..frames).map(|t| lp.row(t)[ctc::BLANK].exp()).collect();
                compute_skip_mask(&blanks, tau, self.config.window_len)
            }
        };

        let kept = mask.kept_indices();
        let (h, log_p) = if kept.len() == frames {
            let h = self.upper(g, b, h_in)?;
            let log_p = self.head(g, b, Head::Final, h)?;
            (h, log_p)
        } else if kept.is_empty() {
            (h_in, log_p_in)
        } else {
            let compact = g.gather_rows(h_in, &kept)?;
            let upper = self.upper(g, b, compact)?;
            let h = g.scatter_rows(h_in, upper, &kept)?;
            let log_p_kept = self.head(g, b, Head::Final, upper)?;
            let log_p = g.scatter_rows(log_p_in, log_p_kept, &kept)?;
            (h, log_p)
        };
        Ok(ForwardVars {
            h_in,
            log_p_in,
            h,
            log_p,
            mask,
        })
    }

    fn encode(&self, features: &Tensor, tau: Option<f64>) -> Result<EncodeResult> {
        let mut g = Graph::new();
        let b = self.params.bind(&mut g, false);
        let f = self.forward(&mut g, &b, features, tau)?;
        let upper_frames_computed = f.mask.len() - f.mask.skipped();
        Ok(EncodeResult {
            h_in: g.value(f.h_in).clone(),
            p_in: PosteriorGrid::from_tensor_unchecked(g.value(f.log_p_in).clone()),
            h: g.value(f.h).clone(),
            p: PosteriorGrid::from_tensor_unchecked(g.value(f.log_p).clone()),
            skip_mask: f.mask,
            upper_frames_computed,
        })
    }

    /// All layers on all frames.
    pub fn encode_full(&self, features: &Tensor) -> Result<EncodeResult> {
        self.encode(features, None)
    }

    /// Blank-gated execution of the upper layers at threshold `tau`.
    pub fn encode_skip(&self, features: &Tensor, tau: f64) -> Result<EncodeResult> {
        self.encode(features, Some(tau))
    }
}

fn init_params(cfg: &ModelConfig, rng: &mut Rng) -> ParamStore {
    let mut p = ParamStore::default();
    let d = cfg.model_dim;
    let lin = |p: &mut ParamStore, rng: &mut Rng, name: &str, fan_in: usize, fan_out: usize| {
        p.insert(format!("{name}.w"), rng.normal_tensor(&[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt()));
        p.insert(format!("{name}.b"), Tensor::zeros(&[fan_out]));
    };
    let norm = |p: &mut ParamStore, name: &str, dim: usize| {
        p.insert(format!("{name}.g"), Tensor::full(&[dim], 1.0));
        p.insert(format!("{name}.b"), Tensor::zeros(&[dim]));
    };

    lin(&mut p, rng, "input", cfg.input_dim * cfg.subsample_stride, d);
    for i in 0..cfg.num_layers {
        let l = format!("layers.{i}");
        norm(&mut p, &format!("{l}.attn_norm"), d);
        for proj in ["q", "k", "v", "o"] {
            lin(&mut p, rng, &format!("{l}.attn.{proj}"), d, d);
        }
        if cfg.use_conv_block {
            norm(&mut p, &format!("{l}.conv_norm"), d);
            lin(&mut p, rng, &format!("{l}.conv.pw1"), d, 2 * d);
            p.insert(
                format!("{l}.conv.dw.w"),
                rng.normal_tensor(&[cfg.conv_kernel, d], 1.0 / (cfg.conv_kernel as f64).sqrt()),
            );
            p.insert(format!("{l}.conv.dw.b"), Tensor::zeros(&[d]));
            norm(&mut p, &format!("{l}.conv.dw_norm"), d);
            lin(&mut p, rng, &format!("{l}.conv.pw2"), d, d);
        }
        norm(&mut p, &format!("{l}.ffn_norm"), d);
        lin(&mut p, rng, &format!("{l}.ffn.w1"), d, cfg.ffn_dim);
        lin(&mut p, rng, &format!("{l}.ffn.w2"), cfg.ffn_dim, d);
    }
    let std = 1.0 / (d as f64).sqrt();
    for head in [Head::Intermediate, Head::Final] {
        let h = head.prefix();
        norm(&mut p, &format!("{h}.norm"), d);
        if cfg.factorized_heads {
            p.insert(format!("{h}.gate"), rng.normal_tensor(&[1, d], std));
            p.insert(format!("{h}.gate_b"), Tensor::zeros(&[1]));
            p.insert(format!("{h}.token"), rng.normal_tensor(&[cfg.vocab_size, d], std));
            p.insert(format!("{h}.token_b"), Tensor::zeros(&[cfg.vocab_size]));
        } else {
            p.insert(format!("{h}.w"), rng.normal_tensor(&[cfg.vocab_size + 1, d], std));
            p.insert(format!("{h}.b"), Tensor::zeros(&[cfg.vocab_size + 1]));
        }
    }
    p
}
