//! Cost/accuracy measurement: skip ratio, effective depth, timings, TER and
//! intermediate/final spike alignment.

use std::io::{Read, Write};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::ctc::{argmax, blank_posteriors, PosteriorGrid, BLANK};
use crate::data::Utterance;
use crate::decoder::{edit_distance, prefix_beam_search, DecodeOptions, EditCounts};
use crate::encoder::{EncodeResult, Encoder};
use crate::error::{Error, Result};

/// Average number of layers a frame passes through when a fraction `s` of
/// frames stops after layer `k` of `l`.
pub fn effective_layers(s: f64, k: usize, l: usize) -> f64 {
    s * k as f64 + (1.0 - s) * l as f64
}

/// One line of a bench report. `tau` is empty for the baseline row, which runs
/// every frame through every layer and decodes without skipping.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub tau: Option<f64>,
    pub skip_ratio: f64,
    pub effective_layers: f64,
    pub ter: f64,
    pub wall_encoder_s: f64,
    pub wall_decode_s: f64,
    pub rtf: f64,
    pub upper_frames_computed: usize,
    pub total_frames: usize,
}

impl BenchRow {
    /// Field names in CSV column order.
    pub const FIELDS: [&'static str; 9] = [
        "tau",
        "skip_ratio",
        "effective_layers",
        "ter",
        "wall_encoder_s",
        "wall_decode_s",
        "rtf",
        "upper_frames_computed",
        "total_frames",
    ];
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchOptions {
    /// Beam settings; `tau_decode` is overridden per row.
    pub decode: DecodeOptions,
    /// Seconds of "audio" per input frame, before subsampling.
    pub frame_period_s: f64,
    /// Timings are the median over this many passes.
    pub repeats: usize,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            decode: DecodeOptions::default(),
            frame_period_s: 0.01,
            repeats: 3,
        }
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn timed<T>(repeats: usize, mut f: impl FnMut() -> Result<T>) -> Result<(T, f64)> {
    let mut times = Vec::with_capacity(repeats);
    let mut out = None;
    for _ in 0..repeats.max(1) {
        let start = Instant::now();
        let v = f()?;
        times.push(start.elapsed().as_secs_f64());
        out.get_or_insert(v);
    }
    Ok((out.expect("at least one pass"), median(times)))
}

fn bench_row(encoder: &Encoder, data: &[Utterance], tau: Option<f64>, opts: &BenchOptions) -> Result<BenchRow> {
    let cfg = encoder.config();
    let (encoded, wall_encoder_s) = timed(opts.repeats, || {
        data.iter()
            .map(|u| match tau {
                Some(t) => encoder.encode_skip(&u.features, t),
                None => encoder.encode_full(&u.features),
            })
            .collect::<Result<Vec<EncodeResult>>>()
    })?;

    let decode = DecodeOptions {
        tau_decode: tau.unwrap_or(1.0),
        ..opts.decode.clone()
    };
    let (hyps, wall_decode_s) = timed(opts.repeats, || {
        encoded
            .iter()
            .map(|e| prefix_beam_search(&e.p, &decode))
            .collect::<Result<Vec<_>>>()
    })?;

    let mut edits = EditCounts::default();
    let mut ref_tokens = 0;
    for (u, h) in data.iter().zip(&hyps) {
        edits += edit_distance(&u.labels, &h[0].0);
        ref_tokens += u.labels.len();
    }
    let total_frames: usize = encoded.iter().map(EncodeResult::frames).sum();
    let upper_frames_computed: usize = encoded.iter().map(|e| e.upper_frames_computed).sum();
    let skipped: usize = encoded.iter().map(|e| e.skip_mask.skipped()).sum();
    let skip_ratio = skipped as f64 / total_frames as f64;
    let input_frames: usize = data.iter().map(|u| u.features.rows()).sum();

    Ok(BenchRow {
        tau,
        skip_ratio,
        effective_layers: effective_layers(skip_ratio, cfg.split_layer, cfg.num_layers),
        ter: edits.error_rate(ref_tokens),
        wall_encoder_s,
        wall_decode_s,
        rtf: (wall_encoder_s + wall_decode_s) / (input_frames as f64 * opts.frame_period_s),
        upper_frames_computed,
        total_frames,
    })
}

/// Baseline row first, then one row per threshold in the given order.
pub fn run_bench(encoder: &Encoder, data: &[Utterance], taus: &[f64], opts: &BenchOptions) -> Result<Vec<BenchRow>> {
    if data.is_empty() {
        return Err(Error::Empty("bench dataset"));
    }
    opts.decode.validate()?;
    if !(opts.frame_period_s > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "frame period {} must be positive",
            opts.frame_period_s
        )));
    }
    if let Some(&t) = taus.iter().find(|&&t| !(t > 0.0 && t <= 1.0)) {
        return Err(Error::InvalidArgument(format!("tau {t} outside (0, 1]")));
    }
    let mut rows = vec![bench_row(encoder, data, None, opts)?];
    for &t in taus {
        rows.push(bench_row(encoder, data, Some(t), opts)?);
    }
    Ok(rows)
}

/// Writes a `# frame_period_s=...` comment line, the header, then the rows.
pub fn write_bench_csv<W: Write>(mut w: W, rows: &[BenchRow], frame_period_s: f64) -> Result<()> {
    writeln!(w, "# frame_period_s={frame_period_s}").map_err(|e| Error::io("bench report", e))?;
    let mut csv = csv::Writer::from_writer(w);
    if rows.is_empty() {
        csv.write_record(BenchRow::FIELDS).map_err(csv_err)?;
    }
    for r in rows {
        csv.serialize(r).map_err(csv_err)?;
    }
    csv.flush().map_err(|e| Error::io("bench report", e))
}

pub fn read_bench_csv<R: Read>(r: R) -> Result<Vec<BenchRow>> {
    let mut csv = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(r);
    csv.deserialize().map(|row| row.map_err(csv_err)).collect()
}

fn csv_err(e: csv::Error) -> Error {
    Error::InvalidArgument(format!("csv: {e}"))
}

/// First frame of each maximal run of one non-blank argmax token.
pub fn spikes(grid: &PosteriorGrid) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut prev = None;
    for t in 0..grid.frames() {
        let k = argmax(grid.row(t));
        if k != BLANK && prev != Some(k) {
            out.push((t, k));
        }
        prev = Some(k);
    }
    out
}

/// Spike alignment between the intermediate and final heads.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SpikeOffset {
    /// Sum of `|Δframe|` over matched pairs.
    pub total_offset: f64,
    pub matched: usize,
    /// Spikes on either side left without a partner.
    pub unmatched: usize,
}

impl SpikeOffset {
    /// Mean absolute offset over matches; zero when nothing matched.
    pub fn mean(&self) -> f64 {
        if self.matched == 0 {
            0.0
        } else {
            self.total_offset / self.matched as f64
        }
    }
}

impl std::ops::AddAssign for SpikeOffset {
    fn add_assign(&mut self, o: Self) {
        self.total_offset += o.total_offset;
        self.matched += o.matched;
        self.unmatched += o.unmatched;
    }
}

/// Walks the final spikes in order and pairs each with the next unused
/// intermediate spike carrying the same token.
pub fn spike_offset(p_in: &PosteriorGrid, p: &PosteriorGrid) -> Result<SpikeOffset> {
    if p_in.frames() != p.frames() {
        return Err(Error::Shape {
            op: "spike_offset",
            lhs: vec![p_in.frames()],
            rhs: vec![p.frames()],
        });
    }
    let (a, b) = (spikes(p_in), spikes(p));
    let mut out = SpikeOffset::default();
    let mut j = 0;
    for &(t, k) in &b {
        match a[j..].iter().position(|&(_, ka)| ka == k) {
            Some(off) => {
                out.unmatched += off;
                out.total_offset += (a[j + off].0 as f64 - t as f64).abs();
                out.matched += 1;
                j += off + 1;
            }
            None => out.unmatched += 1,
        }
    }
    out.unmatched += a.len() - j;
    Ok(out)
}

/// Per-frame view of one utterance for external plotting; every vector has
/// one entry per post-subsampling frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InspectRecord {
    pub utt_id: String,
    pub tau: f64,
    pub blank_in: Vec<f64>,
    pub blank_final: Vec<f64>,
    pub skipped: Vec<bool>,
    pub argmax_in: Vec<usize>,
    pub argmax_final: Vec<usize>,
}

impl InspectRecord {
    pub fn frames(&self) -> usize {
        self.skipped.len()
    }
}

pub fn inspect_dump(encoder: &Encoder, utt: &Utterance, tau: f64) -> Result<InspectRecord> {
    let e = encoder.encode_skip(&utt.features, tau)?;
    let arg = |g: &PosteriorGrid| (0..g.frames()).map(|t| argmax(g.row(t))).collect();
    Ok(InspectRecord {
        utt_id: utt.id.clone(),
        tau,
        blank_in: blank_posteriors(&e.p_in),
        blank_final: blank_posteriors(&e.p),
        skipped: e.skip_mask.flags().to_vec(),
        argmax_in: arg(&e.p_in),
        argmax_final: arg(&e.p),
    })
}

const INSPECT_HEADER: [&str; 6] = ["frame", "blank_in", "blank_final", "skipped", "argmax_in", "argmax_final"];

/// One row per frame; probabilities are written with 6 significant digits.
pub fn write_inspect_csv<W: Write>(w: W, rec: &InspectRecord) -> Result<()> {
    let mut csv = csv::Writer::from_writer(w);
    csv.write_record(INSPECT_HEADER).map_err(csv_err)?;
    for t in 0..rec.frames() {
        csv.write_record([
            t.to_string(),
            format!("{:.5e}", rec.blank_in[t]),
            format!("{:.5e}", rec.blank_final[t]),
            u8::from(rec.skipped[t]).to_string(),
            rec.argmax_in[t].to_string(),
            rec.argmax_final[t].to_string(),
        ])
        .map_err(csv_err)?;
    }
    csv.flush().map_err(|e| Error::io("inspect csv", e))
}

/// Inverse of [`write_inspect_csv`]; id and threshold are not stored per row.
pub fn read_inspect_csv<R: Read>(r: R, utt_id: &str, tau: f64) -> Result<InspectRecord> {
    let mut rec = InspectRecord {
        utt_id: utt_id.to_string(),
        tau,
        blank_in: Vec::new(),
        blank_final: Vec::new(),
        skipped: Vec::new(),
        argmax_in: Vec::new(),
        argmax_final: Vec::new(),
    };
    let mut csv = csv::Reader::from_reader(r);
    for (i, row) in csv.records().enumerate() {
        let row = row.map_err(csv_err)?;
        let field = |c: usize| row.get(c).unwrap_or("");
        let bad = |c: usize| Error::Parse {
            line: i + 2,
            msg: format!("bad {} value {:?}", INSPECT_HEADER[c], field(c)),
        };
        let float = |c: usize| field(c).parse::<f64>().map_err(|_| bad(c));
        let int = |c: usize| field(c).parse::<usize>().map_err(|_| bad(c));
        rec.blank_in.push(float(1)?);
        rec.blank_final.push(float(2)?);
        rec.skipped.push(int(3)? != 0);
        rec.argmax_in.push(int(4)?);
        rec.argmax_final.push(int(5)?);
    }
    Ok(rec)
}
