use serde::{Deserialize, Serialize};

/// Per-frame skip decision; `true` means the frame bypasses the upper layers.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SkipMask(Vec<bool>);

impl SkipMask {
    pub fn all_keep(frames: usize) -> Self {
        Self(vec![false; frames])
    }

    pub fn from_flags(flags: Vec<bool>) -> Self {
        Self(flags)
    }

    pub fn flags(&self) -> &[bool] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_skipped(&self, t: usize) -> bool {
        self.0[t]
    }

    pub fn skipped(&self) -> usize {
        self.0.iter().filter(|&&s| s).count()
    }

    /// Indices of frames that run through the upper layers, in order.
    pub fn kept_indices(&self) -> Vec<usize> {
        self.0
            .iter()
            .enumerate()
            .filter_map(|(t, &s)| (!s).then_some(t))
            .collect()
    }

    pub fn skip_ratio(&self) -> f64 {
        if self.0.is_empty() {
            0.0
        } else {
            self.skipped() as f64 / self.0.len() as f64
        }
    }
}

/// Frame `t` is skipped iff every blank probability in `t-window+1 ..= t`
/// exceeds `tau` strictly. Positions before frame 0 count as blank-certain.
pub fn compute_skip_mask(blank_probs: &[f64], tau: f64, window: usize) -> SkipMask {
    let window = window.max(1);
    // Length of the current run of frames above threshold, seeded with the
    // virtual padding in front of the utterance.
    let pad_passes = 1.0 > tau;
    let mut run = if pad_passes { window - 1 } else { 0 };
    let flags = blank_probs
        .iter()
        .map(|&p| {
            if p > tau {
                run += 1;
            } else {
                run = 0;
            }
            run >= window
        })
        .collect();
    SkipMask(flags)
}
