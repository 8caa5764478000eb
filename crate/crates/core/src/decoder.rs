//! Frame-synchronous CTC prefix beam search with blank-threshold frame
//! skipping, and token-level edit distance.

use std::cmp::Ordering;
use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::ctc::{LabelSeq, PosteriorGrid, BLANK};
use crate::error::{Error, Result};
use crate::numerics::log_add;

/// What a frame above the decode threshold does to the beam.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipMode {
    /// The frame emits blank with probability one: all mass moves to the
    /// blank-ending slot.
    #[default]
    BlankCertain,
    /// The frame is dropped entirely.
    Ignore,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeOptions {
    pub beam_width: usize,
    /// Frames with blank probability strictly above this are skipped; 1.0 disables skipping.
    pub tau_decode: f64,
    pub nbest: usize,
    pub skip_mode: SkipMode,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        Self {
            beam_width: 8,
            tau_decode: 1.0,
            nbest: 1,
            skip_mode: SkipMode::BlankCertain,
        }
    }
}

impl DecodeOptions {
    pub fn validate(&self) -> Result<()> {
        if self.beam_width == 0 {
            return Err(Error::Config("beam_width must be >= 1".into()));
        }
        if self.nbest == 0 || self.nbest > self.beam_width {
            return Err(Error::Config(format!(
                "nbest {} must be in 1..=beam_width {}",
                self.nbest, self.beam_width
            )));
        }
        if !(self.tau_decode > 0.0 && self.tau_decode <= 1.0) {
            return Err(Error::Config(format!("tau_decode {} outside (0, 1]", self.tau_decode)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub prefix: LabelSeq,
    /// Log mass of alignments ending in blank.
    pub log_pb: f64,
    /// Log mass of alignments ending in the prefix's last token.
    pub log_pnb: f64,
}

impl Hypothesis {
    pub fn total(&self) -> f64 {
        log_add(self.log_pb, self.log_pnb)
    }
}

/// Descending total, then ascending prefix.
fn rank(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.total()
        .partial_cmp(&a.total())
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.prefix.cmp(&b.prefix))
}

struct Beam {
    hyps: Vec<Hypothesis>,
    index: HashMap<LabelSeq, usize>,
}

impl Beam {
    fn new() -> Self {
        Self {
            hyps: Vec::new(),
            index: HashMap::new(),
        }
    }

    fn slot(&mut self, prefix: &LabelSeq) -> &mut Hypothesis {
        let i = match self.index.get(prefix) {
            Some(&i) => i,
            None => {
                self.hyps.push(Hypothesis {
                    prefix: prefix.clone(),
                    log_pb: f64::NEG_INFINITY,
                    log_pnb: f64::NEG_INFINITY,
                });
                self.index.insert(prefix.clone(), self.hyps.len() - 1);
                self.hyps.len() - 1
            }
        };
        &mut self.hyps[i]
    }
}

/// One frame of prefix search over every hypothesis in `beam`.
fn extend(beam: &[Hypothesis], row: &[f64]) -> Vec<Hypothesis> {
    let mut next = Beam::new();
    for hyp in beam {
        let total = hyp.total();
        let s = next.slot(&hyp.prefix);
        s.log_pb = log_add(s.log_pb, total + row[BLANK]);
        let last = hyp.prefix.last();
        for (c, &lp) in row.iter().enumerate().skip(1) {
            if last == Some(c) {
                let s = next.slot(&hyp.prefix);
                s.log_pnb = log_add(s.log_pnb, hyp.log_pnb + lp);
                let mut ext = hyp.prefix.clone();
                ext.push(c);
                let s = next.slot(&ext);
                s.log_pnb = log_add(s.log_pnb, hyp.log_pb + lp);
            } else {
                let mut ext = hyp.prefix.clone();
                ext.push(c);
                let s = next.slot(&ext);
                s.log_pnb = log_add(s.log_pnb, total + lp);
            }
        }
    }
    next.hyps
}

/// Full ranked beam after the last frame (before n-best truncation).
pub fn beam_search_hypotheses(grid: &PosteriorGrid, opts: &DecodeOptions) -> Result<Vec<Hypothesis>> {
    opts.validate()?;
    if grid.frames() == 0 {
        return Err(Error::Empty("prefix_beam_search"));
    }
    let mut beam = vec![Hypothesis {
        prefix: LabelSeq::empty(),
        log_pb: 0.0,
        log_pnb: f64::NEG_INFINITY,
    }];
    for t in 0..grid.frames() {
        let row = grid.row(t);
        if row[BLANK].exp() > opts.tau_decode {
            if opts.skip_mode == SkipMode::BlankCertain {
                for h in &mut beam {
                    h.log_pb = h.total();
                    h.log_pnb = f64::NEG_INFINITY;
                }
            }
            continue;
        }
        let mut next = extend(&beam, row);
        next.retain(|h| h.total() > f64::NEG_INFINITY);
        next.sort_by(rank);
        next.truncate(opts.beam_width);
        beam = next;
    }
    beam.sort_by(rank);
    Ok(beam)
}

/// Ranked `(labels, total log probability)` list of at most `opts.nbest` entries.
pub fn prefix_beam_search(grid: &PosteriorGrid, opts: &DecodeOptions) -> Result<Vec<(LabelSeq, f64)>> {
    let beam = beam_search_hypotheses(grid, opts)?;
    Ok(beam
        .into_iter()
        .take(opts.nbest)
        .map(|h| {
            let total = h.total();
            (h.prefix, total)
        })
        .collect())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditCounts {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
}

impl EditCounts {
    pub fn errors(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }

    /// Errors per reference token; an empty reference counts as length one.
    pub fn error_rate(&self, ref_len: usize) -> f64 {
        self.errors() as f64 / ref_len.max(1) as f64
    }
}

impl std::ops::AddAssign for EditCounts {
    fn add_assign(&mut self, o: Self) {
        self.substitutions += o.substitutions;
        self.insertions += o.insertions;
        self.deletions += o.deletions;
    }
}

/// Levenshtein alignment of `hyp` against `reference`, split by edit kind.
pub fn edit_distance(reference: &LabelSeq, hyp: &LabelSeq) -> EditCounts {
    let (r, h) = (reference.tokens(), hyp.tokens());
    let (n, m) = (r.len(), h.len());
    let w = m + 1;
    let mut cost = vec![0usize; (n + 1) * w];
    for i in 0..=n {
        cost[i * w] = i;
    }
    for j in 0..=m {
        cost[j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = cost[(i - 1) * w + j - 1] + usize::from(r[i - 1] != h[j - 1]);
            let del = cost[(i - 1) * w + j] + 1;
            let ins = cost[i * w + j - 1] + 1;
            cost[i * w + j] = sub.min(del).min(ins);
        }
    }
    let mut counts = EditCounts::default();
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = cost[i * w + j];
        if i > 0 && j > 0 && here == cost[(i - 1) * w + j - 1] + usize::from(r[i - 1] != h[j - 1]) {
            if r[i - 1] != h[j - 1] {
                counts.substitutions += 1;
            }
            i -= 1;
            j -= 1;
        } else if i > 0 && here == cost[(i - 1) * w + j] + 1 {
            counts.deletions += 1;
            i -= 1;
        } else {
            counts.insertions += 1;
            j -= 1;
        }
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(v: &[usize]) -> LabelSeq {
        LabelSeq::new(v.to_vec()).unwrap()
    }

    fn opts(beam: usize) -> DecodeOptions {
        DecodeOptions {
            beam_width: beam,
            nbest: beam,
            ..DecodeOptions::default()
        }
    }

    #[test]
    fn single_frame_prefers_empty() {
        let grid = PosteriorGrid::from_probs(&[vec![0.6, 0.4]]).unwrap();
        let out = prefix_beam_search(&grid, &opts(2)).unwrap();
        assert!(out[0].0.is_empty());
        assert!((out[0].1.exp() - 0.6).abs() < 1e-12);
    }

    #[test]
    fn two_frames_merge_alignments() {
        let grid = PosteriorGrid::from_probs(&[vec![0.4, 0.6], vec![0.4, 0.6]]).unwrap();
        let out = prefix_beam_search(&grid, &opts(4)).unwrap();
        assert_eq!(out[0].0, seq(&[1]));
        assert!((out[0].1.exp() - 0.84).abs() < 1e-12);
        // (a, a) needs a separating blank, impossible in two frames.
        assert!(out.iter().all(|(p, _)| p != &seq(&[1, 1])));
    }

    #[test]
    fn tau_one_matches_plain_search() {
        let grid = PosteriorGrid::from_probs(&[vec![1.0, 0.0], vec![0.3, 0.7], vec![0.5, 0.5]]).unwrap();
        let plain = prefix_beam_search(&grid, &opts(4)).unwrap();
        let gated = prefix_beam_search(
            &grid,
            &DecodeOptions {
                tau_decode: 1.0,
                ..opts(4)
            },
        )
        .unwrap();
        assert_eq!(plain, gated);
    }

    #[test]
    fn skip_modes_differ_only_in_blank_mass() {
        let rows = vec![vec![0.1, 0.9], vec![0.999, 0.001], vec![0.1, 0.9]];
        let grid = PosteriorGrid::from_probs(&rows).unwrap();
        let certain = prefix_beam_search(
            &grid,
            &DecodeOptions {
                tau_decode: 0.99,
                ..opts(4)
            },
        )
        .unwrap();
        // With the blank frame forced, (a, a) is reachable.
        assert_eq!(certain[0].0, seq(&[1, 1]));
        let ignore = prefix_beam_search(
            &grid,
            &DecodeOptions {
                tau_decode: 0.99,
                skip_mode: SkipMode::Ignore,
                ..opts(4)
            },
        )
        .unwrap();
        assert_eq!(ignore[0].0, seq(&[1]));
    }

    #[test]
    fn empty_grid_and_bad_options() {
        let grid = PosteriorGrid::from_probs(&[vec![0.5, 0.5]]).unwrap();
        let bad = DecodeOptions {
            beam_width: 2,
            nbest: 3,
            ..DecodeOptions::default()
        };
        assert!(prefix_beam_search(&grid, &bad).is_err());
    }

    #[test]
    fn edit_distance_examples() {
        assert_eq!(edit_distance(&seq(&[1, 2, 3]), &seq(&[1, 2, 3])).errors(), 0);
        let c = edit_distance(&seq(&[1, 2, 3]), &seq(&[1, 4, 3]));
        assert_eq!((c.substitutions, c.insertions, c.deletions), (1, 0, 0));
        let c = edit_distance(&seq(&[1, 2]), &seq(&[1, 2, 3, 4]));
        assert_eq!((c.substitutions, c.insertions, c.deletions), (0, 2, 0));
        let c = edit_distance(&seq(&[1, 2, 3]), &seq(&[]));
        assert_eq!((c.substitutions, c.insertions, c.deletions), (0, 0, 3));
        assert_eq!(c.error_rate(3), 1.0);
    }
}
