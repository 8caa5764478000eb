//! Independent reference implementations used by the integration tests.
//! Everything here is deliberately naive: enumeration instead of dynamic
//! programming, direct window checks instead of run lengths.

#![allow(dead_code)]

pub mod grad_suite;

use std::collections::BTreeMap;

use blankskip::ctc::{collapse, LabelSeq, PosteriorGrid};
use blankskip::encoder::ModelConfig;
use blankskip::numerics::{Graph, Rng, Tensor, Var};
use blankskip::Result;

/// Calls `f` with every sequence in `{0..base}^len`.
pub fn for_each_sequence(base: usize, len: usize, mut f: impl FnMut(&[usize])) {
    let mut seq = vec![0usize; len];
    loop {
        f(&seq);
        let mut i = 0;
        loop {
            if i == len {
                return;
            }
            seq[i] += 1;
            if seq[i] < base {
                break;
            }
            seq[i] = 0;
            i += 1;
        }
    }
}

/// Probability mass of every label sequence reachable from `probs`
/// (rows are frames, column 0 is blank).
pub fn sequence_masses(probs: &[Vec<f64>]) -> BTreeMap<LabelSeq, f64> {
    let classes = probs[0].len();
    let mut out = BTreeMap::new();
    for_each_sequence(classes, probs.len(), |path| {
        let p: f64 = path.iter().enumerate().map(|(t, &k)| probs[t][k]).product();
        *out.entry(collapse(path)).or_insert(0.0) += p;
    });
    out
}

/// `-ln P(labels)` by summing over every alignment; infinite if none exists.
pub fn brute_ctc_nll(probs: &[Vec<f64>], labels: &LabelSeq) -> f64 {
    let classes = probs[0].len();
    let mut total = 0.0;
    for_each_sequence(classes, probs.len(), |path| {
        if collapse(path) == *labels {
            total += path.iter().enumerate().map(|(t, &k)| probs[t][k]).product::<f64>();
        }
    });
    -total.ln()
}

/// Frame `t` is skipped iff frames `t-w+1..=t` all exceed `tau`, where
/// positions before the start count as blank probability 1.
pub fn brute_skip_mask(blank: &[f64], tau: f64, window: usize) -> Vec<bool> {
    (0..blank.len())
        .map(|t| {
            (0..window).all(|j| {
                let p = if t >= j { blank[t - j] } else { 1.0 };
                p > tau
            })
        })
        .collect()
}

/// Rows drawn from a Dirichlet-like distribution, occasionally peaked.
pub fn random_probs(rng: &mut Rng, frames: usize, classes: usize) -> Vec<Vec<f64>> {
    (0..frames)
        .map(|_| {
            let sharp = if rng.uniform() < 0.3 { 4.0 } else { 1.0 };
            let raw: Vec<f64> = (0..classes).map(|_| (sharp * rng.normal()).exp()).collect();
            let z: f64 = raw.iter().sum();
            raw.into_iter().map(|v| v / z).collect()
        })
        .collect()
}

pub fn random_grid(rng: &mut Rng, frames: usize, classes: usize) -> (Vec<Vec<f64>>, PosteriorGrid) {
    let probs = random_probs(rng, frames, classes);
    let grid = PosteriorGrid::from_probs(&probs).expect("rows are normalized");
    (probs, grid)
}

pub fn random_labels(rng: &mut Rng, max_len: usize, vocab: usize) -> LabelSeq {
    let n = rng.int_in(0, max_len);
    LabelSeq::new((0..n).map(|_| rng.int_in(1, vocab)).collect()).expect("tokens in range")
}

/// Reduces `y` to a scalar with fixed random weights so that every output
/// element contributes a distinct amount to the gradient.
pub fn project(g: &mut Graph, y: Var, rng: &mut Rng) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let w = g.constant(rng.normal_tensor(&shape, 1.0));
    let prod = g.mul(y, w)?;
    Ok(g.sum(prod))
}

/// A model small enough for finite differences over every weight.
pub fn tiny_model(conv: bool, factorized: bool) -> ModelConfig {
    ModelConfig {
        input_dim: 3,
        subsample_stride: 1,
        model_dim: 8,
        num_layers: 2,
        split_layer: 1,
        num_heads: 2,
        ffn_dim: 12,
        vocab_size: 3,
        use_conv_block: conv,
        conv_kernel: 3,
        factorized_heads: factorized,
        ..ModelConfig::default()
    }
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Textbook prefix beam search with no skipping logic at all. Returns
/// `(prefix, log_pb, log_pnb)` ranked by total descending, then prefix.
pub fn reference_prefix_search(grid: &PosteriorGrid, beam_width: usize) -> Vec<(LabelSeq, f64, f64)> {
    use blankskip::numerics::log_add;
    let ninf = f64::NEG_INFINITY;
    let total = |e: &(LabelSeq, f64, f64)| log_add(e.1, e.2);
    let mut beam = vec![(LabelSeq::empty(), 0.0, ninf)];
    for t in 0..grid.frames() {
        let row = grid.row(t);
        let mut next: BTreeMap<LabelSeq, (f64, f64)> = BTreeMap::new();
        for (prefix, pb, pnb) in &beam {
            let all = log_add(*pb, *pnb);
            let e = next.entry(prefix.clone()).or_insert((ninf, ninf));
            e.0 = log_add(e.0, all + row[0]);
            for (c, &lp) in row.iter().enumerate().skip(1) {
                let mut ext = prefix.tokens().to_vec();
                ext.push(c);
                let ext = LabelSeq::new(ext).unwrap();
                if prefix.last() == Some(c) {
                    let e = next.entry(prefix.clone()).or_insert((ninf, ninf));
                    e.1 = log_add(e.1, pnb + lp);
                    let e = next.entry(ext).or_insert((ninf, ninf));
                    e.1 = log_add(e.1, pb + lp);
                } else {
                    let e = next.entry(ext).or_insert((ninf, ninf));
                    e.1 = log_add(e.1, all + lp);
                }
            }
        }
        let mut ranked: Vec<(LabelSeq, f64, f64)> = next
            .into_iter()
            .map(|(p, (b, n))| (p, b, n))
            .filter(|e| total(e) > ninf)
            .collect();
        ranked.sort_by(|a, b| total(b).total_cmp(&total(a)).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(beam_width);
        beam = ranked;
    }
    beam
}
