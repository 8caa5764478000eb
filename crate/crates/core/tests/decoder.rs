mod common;

use blankskip::ctc::{greedy_decode, LabelSeq, PosteriorGrid};
use blankskip::decoder::{beam_search_hypotheses, prefix_beam_search, DecodeOptions, SkipMode};
use blankskip::numerics::Rng;

use common::{random_grid, sequence_masses};

fn all_prefixes(beam_width: usize) -> DecodeOptions {
    DecodeOptions {
        beam_width,
        ..DecodeOptions::default()
    }
}

/// Best label sequence by total probability; ties go to the smaller sequence.
fn exhaustive_best(probs: &[Vec<f64>]) -> (LabelSeq, f64) {
    let masses = sequence_masses(probs);
    let (seq, p) = masses
        .iter()
        .fold(None::<(&LabelSeq, f64)>, |best, (s, &p)| match best {
            Some((_, bp)) if bp >= p => best,
            _ => Some((s, p)),
        })
        .unwrap();
    (seq.clone(), p.ln())
}

#[test]
fn beam_matches_exhaustive_scoring() {
    let mut rng = Rng::new(31);
    for _ in 0..50 {
        let (probs, grid) = random_grid(&mut rng, 4, 3);
        let (best, log_p) = exhaustive_best(&probs);
        let top = &prefix_beam_search(&grid, &all_prefixes(31)).unwrap()[0];
        assert_eq!(top.0, best);
        assert!((top.1 - log_p).abs() <= 1e-9, "{} vs {log_p}", top.1);
    }
}

#[test]
fn full_beam_scores_every_sequence_exactly() {
    let mut rng = Rng::new(8);
    for _ in 0..20 {
        let t = rng.int_in(1, 4);
        let (probs, grid) = random_grid(&mut rng, t, 3);
        let masses = sequence_masses(&probs);
        let beam = beam_search_hypotheses(&grid, &all_prefixes(64)).unwrap();
        assert_eq!(beam.len(), masses.len());
        for h in &beam {
            assert!((h.total() - masses[&h.prefix].ln()).abs() <= 1e-9);
        }
    }
}

#[test]
fn beam_mass_never_exceeds_one() {
    let mut rng = Rng::new(13);
    for _ in 0..20 {
        let (probs, _) = random_grid(&mut rng, 6, 3);
        for t in 1..=probs.len() {
            let grid = PosteriorGrid::from_probs(&probs[..t]).unwrap();
            let mass: f64 = beam_search_hypotheses(&grid, &all_prefixes(200))
                .unwrap()
                .iter()
                .map(|h| h.total().exp())
                .sum();
            assert!(mass <= 1.0 + 1e-9, "{mass}");
            assert!((mass - 1.0).abs() <= 1e-9, "full beam holds all mass: {mass}");
        }
    }
}

/// One dominant symbol per frame.
fn spiky_grid(rng: &mut Rng, frames: usize, classes: usize) -> PosteriorGrid {
    let rows: Vec<Vec<f64>> = (0..frames)
        .map(|_| {
            let k = if rng.uniform() < 0.6 { 0 } else { rng.int_in(1, classes - 1) };
            let mut r = vec![0.02 / (classes - 1) as f64; classes];
            r[k] = 0.98;
            r
        })
        .collect();
    PosteriorGrid::from_probs(&rows).unwrap()
}

#[test]
fn width_one_beam_is_greedy_on_spiky_grids() {
    let mut rng = Rng::new(21);
    for _ in 0..100 {
        let grid = spiky_grid(&mut rng, 30, 5);
        let top = &prefix_beam_search(&grid, &all_prefixes(1)).unwrap()[0];
        assert_eq!(top.0, greedy_decode(&grid));
    }
}

#[test]
fn threshold_at_max_blank_changes_nothing() {
    let mut rng = Rng::new(4);
    for _ in 0..30 {
        let (_, grid) = random_grid(&mut rng, 10, 4);
        let base = beam_search_hypotheses(&grid, &all_prefixes(8)).unwrap();
        // The comparison is strict, so no frame qualifies for skipping.
        let max_blank = (0..grid.frames()).map(|t| grid.row(t)[0].exp()).fold(0.0, f64::max);
        for mode in [SkipMode::BlankCertain, SkipMode::Ignore] {
            let opts = DecodeOptions {
                tau_decode: max_blank,
                skip_mode: mode,
                ..all_prefixes(8)
            };
            assert_eq!(beam_search_hypotheses(&grid, &opts).unwrap(), base);
        }
        assert_eq!(beam_search_hypotheses(&grid, &all_prefixes(8)).unwrap(), base);
    }
}

#[test]
fn blank_certain_skip_on_confident_blanks_keeps_ranking() {
    let mut rng = Rng::new(6);
    for _ in 0..50 {
        let grid = spiky_grid(&mut rng, 25, 4);
        let full = prefix_beam_search(&grid, &all_prefixes(8)).unwrap();
        let opts = DecodeOptions {
            tau_decode: 0.95,
            ..all_prefixes(8)
        };
        let skipped = prefix_beam_search(&grid, &opts).unwrap();
        assert_eq!(skipped[0].0, full[0].0);
    }
}
