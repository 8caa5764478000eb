//! Connectionist temporal classification: the alignment-sum loss and its
//! gradient, the collapse map, frame-level KL distillation and the factorized
//! blank/non-blank output distribution.
//!
//! Every distribution puts the blank symbol at index 0.

use crate::error::{Error, Result};
use crate::numerics::{log_add, log_sigmoid, sigmoid, Graph, Tensor, Var};

pub const BLANK: usize = 0;

/// Per-frame log-probabilities over `{blank} ∪ vocabulary`, shape `[frames, vocab + 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorGrid {
    log_probs: Tensor,
}

impl PosteriorGrid {
    /// Row tolerance on `Σ exp(log_prob) = 1`.
    pub const ROW_TOLERANCE: f64 = 1e-9;

    pub fn new(log_probs: Tensor) -> Result<Self> {
        let shape = log_probs.shape();
        if shape.len() != 2 || shape[1] < 2 {
            return Err(Error::InvalidArgument(format!(
                "posterior grid must be [frames, vocab + 1] with vocab >= 1, got {shape:?}"
            )));
        }
        for t in 0..log_probs.rows() {
            let s: f64 = log_probs.row(t).iter().map(|v| v.exp()).sum();
            if (s - 1.0).abs() > Self::ROW_TOLERANCE {
                return Err(Error::InvalidArgument(format!(
                    "frame {t} sums to {s}, not a distribution"
                )));
            }
        }
        Ok(Self { log_probs })
    }

    pub fn from_probs(rows: &[Vec<f64>]) -> Result<Self> {
        let logs: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|p| p.ln()).collect()).collect();
        Self::new(Tensor::from_rows(&logs)?)
    }

    pub(crate) fn from_tensor_unchecked(log_probs: Tensor) -> Self {
        Self { log_probs }
    }

    pub fn frames(&self) -> usize {
        self.log_probs.rows()
    }

    /// Vocabulary size excluding blank.
    pub fn vocab_size(&self) -> usize {
        self.log_probs.cols() - 1
    }

    pub fn log_probs(&self) -> &Tensor {
        &self.log_probs
    }

    pub fn row(&self, t: usize) -> &[f64] {
        self.log_probs.row(t)
    }
}

/// Token sequence without blanks; ids in `1..=vocab`.
#[derive(Clone, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LabelSeq(Vec<usize>);

impl LabelSeq {
    pub fn new(tokens: Vec<usize>) -> Result<Self> {
        if tokens.contains(&BLANK) {
            return Err(Error::InvalidArgument("label sequence contains blank".into()));
        }
        Ok(Self(tokens))
    }

    pub fn empty() -> Self {
        Self(Vec::new())
    }

    pub fn tokens(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub(crate) fn push(&mut self, token: usize) {
        debug_assert_ne!(token, BLANK);
        self.0.push(token);
    }

    pub fn last(&self) -> Option<usize> {
        self.0.last().copied()
    }

    /// Number of adjacent equal pairs; each needs a separating blank frame.
    pub fn repeats(&self) -> usize {
        self.0.windows(2).filter(|w| w[0] == w[1]).count()
    }

    pub fn min_frames(&self) -> usize {
        self.len() + self.repeats()
    }
}

impl From<LabelSeq> for Vec<usize> {
    fn from(l: LabelSeq) -> Self {
        l.0
    }
}

/// Merges adjacent duplicates, then drops blanks.
pub fn collapse(alignment: &[usize]) -> LabelSeq {
    let mut out = LabelSeq::empty();
    let mut prev = None;
    for &tok in alignment {
        if Some(tok) != prev && tok != BLANK {
            out.push(tok);
        }
        prev = Some(tok);
    }
    out
}

/// Negative log-likelihood and its gradient w.r.t. every log-probability entry.
#[derive(Clone, Debug)]
pub struct CtcLoss {
    pub nll: f64,
    /// `∂ nll / ∂ log_probs`, row-major like the input.
    pub grad: Vec<f64>,
}

/// Core α/β recursion over a row-major `[frames, classes]` block of
/// log-scores. Rows need not be normalized.
pub fn ctc_nll(log_probs: &[f64], classes: usize, labels: &LabelSeq) -> Result<CtcLoss> {
    let frames = log_probs.len() / classes;
    if frames == 0 {
        return Err(Error::Empty("ctc_forward_loss"));
    }
    if frames < labels.min_frames() {
        return Err(Error::NoValidAlignment {
            frames,
            labels: labels.len(),
            repeats: labels.repeats(),
        });
    }
    if let Some(&bad) = labels.tokens().iter().find(|&&k| k >= classes) {
        return Err(Error::InvalidArgument(format!("label {bad} outside vocabulary of {}", classes - 1)));
    }

    let ninf = f64::NEG_INFINITY;
    let mut ext = Vec::with_capacity(2 * labels.len() + 1);
    ext.push(BLANK);
    for &k in labels.tokens() {
        ext.push(k);
        ext.push(BLANK);
    }
    let s_len = ext.len();
    let lp = |t: usize, k: usize| log_probs[t * classes + k];
    // s may also hop from s-2 when it is a token different from the one two back.
    let can_skip: Vec<bool> = (0..s_len)
        .map(|s| s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2])
        .collect();

    let mut alpha = vec![ninf; frames * s_len];
    alpha[0] = lp(0, ext[0]);
    if s_len > 1 {
        alpha[1] = lp(0, ext[1]);
    }
    for t in 1..frames {
        let (prev, cur) = alpha.split_at_mut(t * s_len);
        let prev = &prev[(t - 1) * s_len..];
        for s in 0..s_len {
            let mut a = prev[s];
            if s >= 1 {
                a = log_add(a, prev[s - 1]);
            }
            if can_skip[s] {
                a = log_add(a, prev[s - 2]);
            }
            cur[s] = if a == ninf { ninf } else { a + lp(t, ext[s]) };
        }
    }

    let mut beta = vec![ninf; frames * s_len];
    let last = frames - 1;
    beta[last * s_len + s_len - 1] = lp(last, ext[s_len - 1]);
    if s_len > 1 {
        beta[last * s_len + s_len - 2] = lp(last, ext[s_len - 2]);
    }
    for t in (0..last).rev() {
        let (cur, next) = beta.split_at_mut((t + 1) * s_len);
        let cur = &mut cur[t * s_len..];
        for s in 0..s_len {
            let mut b = next[s];
            if s + 1 < s_len {
                b = log_add(b, next[s + 1]);
            }
            if s + 2 < s_len && can_skip[s + 2] {
                b = log_add(b, next[s + 2]);
            }
            cur[s] = if b == ninf { ninf } else { b + lp(t, ext[s]) };
        }
    }

    let mut log_lik = alpha[last * s_len + s_len - 1];
    if s_len > 1 {
        log_lik = log_add(log_lik, alpha[last * s_len + s_len - 2]);
    }

    let mut grad = vec![0.0; frames * classes];
    if log_lik.is_finite() {
        for t in 0..frames {
            for s in 0..s_len {
                let a = alpha[t * s_len + s];
                let b = beta[t * s_len + s];
                if a == ninf || b == ninf {
                    continue;
                }
                let occ = (a + b - lp(t, ext[s]) - log_lik).exp();
                grad[t * classes + ext[s]] -= occ;
            }
        }
    }
    Ok(CtcLoss { nll: -log_lik, grad })
}

/// `-log p(labels | grid)`, summed over every alignment that collapses to `labels`.
pub fn ctc_forward_loss(grid: &PosteriorGrid, labels: &LabelSeq) -> Result<CtcLoss> {
    ctc_nll(grid.log_probs().data(), grid.vocab_size() + 1, labels)
}

/// CTC loss as a graph node on a `[frames, vocab + 1]` log-probability var.
pub fn ctc_loss_node(g: &mut Graph, log_probs: Var, labels: &LabelSeq) -> Result<Var> {
    let t = g.value(log_probs);
    let loss = ctc_nll(t.data(), t.cols(), labels)?;
    g.external(loss.nll, vec![(log_probs, loss.grad)])
}

/// Mean (or weighted mean) over frames of `KL(p_in ‖ p_target)`. The target is
/// a constant: no gradient reaches whatever produced it.
pub fn kl_frame_loss_node(
    g: &mut Graph,
    log_p_in: Var,
    target: &Tensor,
    frame_weights: Option<&[f64]>,
) -> Result<Var> {
    if g.shape(log_p_in) != target.shape() {
        return Err(Error::Shape {
            op: "kl_frame_loss",
            lhs: g.shape(log_p_in).to_vec(),
            rhs: target.shape().to_vec(),
        });
    }
    let frames = target.rows();
    let tgt = g.constant(target.clone());
    let diff = g.sub(log_p_in, tgt)?;
    let p = g.exp(log_p_in);
    let terms = g.mul(p, diff)?;
    let per_frame = g.row_sum(terms);
    match frame_weights {
        None => Ok(g.mean(per_frame)),
        Some(w) => {
            if w.len() != frames {
                return Err(Error::Shape {
                    op: "kl_frame_loss",
                    lhs: vec![frames],
                    rhs: vec![w.len()],
                });
            }
            let total: f64 = w.iter().sum();
            if total <= 0.0 {
                return Err(Error::InvalidArgument("frame weights sum to zero".into()));
            }
            let wv = g.constant(Tensor::from_parts(vec![frames, 1], w.to_vec()));
            let weighted = g.mul(per_frame, wv)?;
            let s = g.sum(weighted);
            Ok(g.scale(s, 1.0 / total))
        }
    }
}

/// Value-only form of [`kl_frame_loss_node`].
pub fn kl_frame_loss(
    p_in: &PosteriorGrid,
    p_final: &PosteriorGrid,
    frame_weights: Option<&[f64]>,
) -> Result<f64> {
    let mut g = Graph::new();
    let x = g.constant(p_in.log_probs().clone());
    let y = kl_frame_loss_node(&mut g, x, p_final.log_probs(), frame_weights)?;
    Ok(g.value(y).item())
}

/// Graph handles for a factorized output head.
#[derive(Clone, Copy, Debug)]
pub struct FactorizedVars {
    /// `[1, model_dim]`
    pub gate: Var,
    /// `[1]`
    pub gate_bias: Var,
    /// `[vocab, model_dim]`
    pub token: Var,
    /// `[vocab]`
    pub token_bias: Var,
}

/// Log of `concat(σ(z), (1 - σ(z)) · softmax(W h + b))` with `z = v·h + c`,
/// built in log space so extreme gates stay finite.
pub fn factorized_log_probs(g: &mut Graph, h: Var, head: FactorizedVars) -> Result<Var> {
    let frames = g.value(h).rows();
    let z = g.matmul_nt(h, head.gate)?;
    let z = g.add_row(z, head.gate_bias)?;
    let log_blank = g.log_sigmoid(z);
    let neg_z = g.scale(z, -1.0);
    let log_gate = g.log_sigmoid(neg_z);
    let logits = g.matmul_nt(h, head.token)?;
    let logits = g.add_row(logits, head.token_bias)?;
    let log_tokens = g.log_softmax(logits);
    let vocab = g.value(log_tokens).cols();
    let ones = g.constant(Tensor::full(&[1, vocab], 1.0));
    let gate_wide = g.matmul(log_gate, ones)?;
    debug_assert_eq!(g.value(gate_wide).rows(), frames);
    let log_non_blank = g.add(log_tokens, gate_wide)?;
    g.concat_cols(&[log_blank, log_non_blank])
}

/// Owned factorized head parameters: a blank gate vector and a non-blank
/// projection.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorizedHead {
    pub gate: Vec<f64>,
    pub gate_bias: f64,
    /// `vocab × model_dim`, row-major.
    pub token: Tensor,
    pub token_bias: Vec<f64>,
}

impl FactorizedHead {
    pub fn model_dim(&self) -> usize {
        self.gate.len()
    }

    pub fn vocab_size(&self) -> usize {
        self.token.rows()
    }

    /// Blank gate `σ(v·h + c)` for one frame.
    pub fn blank_prob(&self, h: &[f64]) -> f64 {
        sigmoid(dot(&self.gate, h) + self.gate_bias)
    }

    /// Full probability row for one frame; blank first.
    pub fn apply(&self, h: &[f64]) -> Result<Vec<f64>> {
        if h.len() != self.model_dim() {
            return Err(Error::Shape {
                op: "factorized_apply",
                lhs: vec![self.model_dim()],
                rhs: vec![h.len()],
            });
        }
        let pb = self.blank_prob(h);
        let logits: Vec<f64> = (0..self.vocab_size())
            .map(|k| dot(self.token.row(k), h) + self.token_bias[k])
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let mut row = Vec::with_capacity(exps.len() + 1);
        row.push(pb);
        row.extend(exps.iter().map(|e| (1.0 - pb) * e / z));
        Ok(row)
    }

    /// Log-space row, matching what [`factorized_log_probs`] produces.
    pub fn apply_log(&self, h: &[f64]) -> Result<Vec<f64>> {
        let z = dot(&self.gate, h) + self.gate_bias;
        let row = self.apply(h)?;
        let log_gate = log_sigmoid(-z);
        let mut out = vec![log_sigmoid(z)];
        let pnb_total = 1.0 - row[0];
        out.extend(row[1..].iter().map(|p| {
            if pnb_total > 0.0 {
                (p / pnb_total).ln() + log_gate
            } else {
                f64::NEG_INFINITY
            }
        }));
        Ok(out)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `p(blank)` per frame.
pub fn blank_posteriors(grid: &PosteriorGrid) -> Vec<f64> {
    (0..grid.frames()).map(|t| grid.row(t)[BLANK].exp()).collect()
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = k;
        }
    }
    best
}

/// Per-frame argmax, then [`collapse`].
pub fn greedy_decode(grid: &PosteriorGrid) -> LabelSeq {
    let path: Vec<usize> = (0..grid.frames()).map(|t| argmax(grid.row(t))).collect();
    collapse(&path)
}
