//! Generation benchmarks: per-token decode time and inference-state bytes as
//! the context grows, for the recurrent model and a KV-cache baseline.
//!
//! Protocol: a length-1 prompt is prefilled, then tokens are decoded
//! greedily. Each decode step is timed individually with a monotonic clock.
//! A record is emitted every `record_every` steps; its `sec_per_token` is the
//! median over the steps of that window pooled across all repetitions.
//! `warmup` untimed steps on a throwaway state precede each repetition.
//! `position` is the context length (tokens held in the state) at the end
//! of the window.

mod attention;

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{argmax, decode_step_metered, prefill_parallel_metered, DecodeState, PaddedBatch};
use crate::memory::TransientMeter;
use crate::model::Params;

pub use attention::{AttentionBaselineConfig, AttentionModel, KvCache};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelTag {
    Mamba,
    Attention,
}

impl FromStr for ModelTag {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mamba" => Ok(Self::Mamba),
            "attention" => Ok(Self::Attention),
            other => Err(Error::InvalidArgument(format!("unknown model tag '{other}' (mamba|attention)"))),
        }
    }
}

impl fmt::Display for ModelTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Mamba => "mamba",
            Self::Attention => "attention",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Prefill,
    Decode,
}

/// One report row. Field order is the CSV column order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub model: ModelTag,
    pub phase: Phase,
    pub position: u64,
    pub sec_per_token: f64,
    pub state_bytes: u64,
    pub peak_transient_bytes: u64,
}

pub const CSV_HEADER: [&str; 6] = ["model", "phase", "position", "sec_per_token", "state_bytes", "peak_transient_bytes"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub repetitions: usize,
    pub warmup: usize,
    /// The single prompt token.
    pub prompt_token: usize,
    pub seed: u64,
    /// Defaults to a baseline matched to the model config.
    pub attention: Option<AttentionBaselineConfig>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            repetitions: 3,
            warmup: 32,
            prompt_token: usize::from(b'T'),
            seed: 0,
            attention: None,
        }
    }
}

/// A model that can be prefilled with one token and decoded step by step.
trait Decoder {
    type State;
    fn prefill(&self, token: usize, meter: &mut TransientMeter) -> Result<(Self::State, Vec<f64>)>;
    fn step(&self, state: &mut Self::State, token: usize, meter: &mut TransientMeter) -> Result<Vec<f64>>;
    fn state_bytes(&self, state: &Self::State) -> usize;
}

impl Decoder for Params {
    type State = DecodeState;
    fn prefill(&self, token: usize, meter: &mut TransientMeter) -> Result<(DecodeState, Vec<f64>)> {
        let pre = prefill_parallel_metered(self, &PaddedBatch::left_pad(&[vec![token]], 0)?, meter)?;
        Ok((pre.state, pre.logits.into_data()))
    }
    fn step(&self, state: &mut DecodeState, token: usize, meter: &mut TransientMeter) -> Result<Vec<f64>> {
        Ok(decode_step_metered(self, state, &[token], meter)?.into_data())
    }
    fn state_bytes(&self, state: &DecodeState) -> usize {
        state.size_bytes()
    }
}

impl Decoder for AttentionModel {
    type State = KvCache;
    fn prefill(&self, token: usize, meter: &mut TransientMeter) -> Result<(KvCache, Vec<f64>)> {
        let mut cache = KvCache::new(&self.config);
        let logits = self.run(&[token], &mut cache, false, meter)?;
        meter.release_values(logits.len());
        Ok((cache, logits))
    }
    fn step(&self, state: &mut KvCache, token: usize, meter: &mut TransientMeter) -> Result<Vec<f64>> {
        self.decode_step(token, state, meter)
    }
    fn state_bytes(&self, state: &KvCache) -> usize {
        state.size_bytes()
    }
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn bench_decoder<D: Decoder>(
    model: &D,
    tag: ModelTag,
    n_tokens: usize,
    record_every: usize,
    cfg: &BenchConfig,
) -> Result<Vec<BenchRecord>> {
    let windows = n_tokens / record_every;
    let reps = cfg.repetitions.max(1);
    let mut times = vec![Vec::with_capacity(record_every * reps); windows];
    let mut prefill_times = Vec::with_capacity(reps);
    let mut bytes = vec![0u64; windows];
    let mut peaks = vec![0u64; windows];
    let mut prefill_bytes = (0, 0);
    for _ in 0..reps {
        let mut meter = TransientMeter::unbounded();
        let (mut warm, mut logits) = model.prefill(cfg.prompt_token, &mut meter)?;
        for _ in 0..cfg.warmup {
            logits = model.step(&mut warm, argmax(&logits), &mut meter)?;
        }
        drop(warm);

        let mut meter = TransientMeter::unbounded();
        let start = Instant::now();
        let (mut state, mut logits) = model.prefill(cfg.prompt_token, &mut meter)?;
        prefill_times.push(start.elapsed().as_secs_f64());
        prefill_bytes = (model.state_bytes(&state) as u64, meter.peak_bytes() as u64);
        for w in 0..windows {
            let mut meter = TransientMeter::unbounded();
            for _ in 0..record_every {
                let tok = argmax(&logits);
                let start = Instant::now();
                logits = model.step(&mut state, tok, &mut meter)?;
                times[w].push(start.elapsed().as_secs_f64());
            }
            bytes[w] = model.state_bytes(&state) as u64;
            peaks[w] = meter.peak_bytes() as u64;
        }
    }
    let mut out = Vec::with_capacity(windows + 1);
    out.push(BenchRecord {
        model: tag,
        phase: Phase::Prefill,
        position: 1,
        sec_per_token: median(&mut prefill_times),
        state_bytes: prefill_bytes.0,
        peak_transient_bytes: prefill_bytes.1,
    });
    for (w, t) in times.iter_mut().enumerate() {
        out.push(BenchRecord {
            model: tag,
            phase: Phase::Decode,
            position: (1 + (w + 1) * record_every) as u64,
            sec_per_token: median(t),
            state_bytes: bytes[w],
            peak_transient_bytes: peaks[w],
        });
    }
    Ok(out)
}

/// Decodes `n_tokens` greedily after a length-1 prompt, recording every
/// `record_every` tokens. The Mamba run uses `params`; the attention run a
/// baseline initialized from `cfg.seed` and matched to `params.config` unless
/// `cfg.attention` is set.
pub fn run_generation_bench(
    tag: ModelTag,
    params: &Params,
    n_tokens: usize,
    record_every: usize,
    cfg: &BenchConfig,
) -> Result<Vec<BenchRecord>> {
    if record_every == 0 || n_tokens < record_every {
        return Err(Error::InvalidArgument(format!(
            "need n_tokens ({n_tokens}) >= record_every ({record_every}) >= 1"
        )));
    }
    match tag {
        ModelTag::Mamba => bench_decoder(params, tag, n_tokens, record_every, cfg),
        ModelTag::Attention => {
            let acfg = cfg.attention.clone().unwrap_or_else(|| AttentionBaselineConfig::matched(&params.config));
            let model = AttentionModel::new(&acfg, cfg.seed)?;
            bench_decoder(&model, tag, n_tokens, record_every, cfg)
        }
    }
}

/// Ordinary least-squares line.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    /// 1 when the data has zero variance and the fit is exact.
    pub r_squared: f64,
}

pub fn fit_line(xs: &[f64], ys: &[f64]) -> Result<LineFit> {
    if xs.len() != ys.len() || xs.len() < 3 {
        return Err(Error::InvalidArgument("a line fit needs at least 3 points".into()));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidArgument("degenerate fit: all positions are equal".into()));
    }
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_tot: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let ss_res: f64 = xs.iter().zip(ys).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
    let r_squared = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    Ok(LineFit {
        slope,
        intercept,
        r_squared,
    })
}

/// State bytes against position.
pub fn fit_memory_slope(records: &[BenchRecord]) -> Result<LineFit> {
    let xs: Vec<f64> = records.iter().map(|r| r.position as f64).collect();
    let ys: Vec<f64> = records.iter().map(|r| r.state_bytes as f64).collect();
    fit_line(&xs, &ys)
}

/// Per-token time against position.
pub fn fit_time_slope(records: &[BenchRecord]) -> Result<LineFit> {
    let xs: Vec<f64> = records.iter().map(|r| r.position as f64).collect();
    let ys: Vec<f64> = records.iter().map(|r| r.sec_per_token).collect();
    fit_line(&xs, &ys)
}

/// Running median of width `2 * half + 1`, truncated at the ends.
pub fn median_filter(xs: &[f64], half: usize) -> Vec<f64> {
    (0..xs.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(xs.len());
            median(&mut xs[lo..hi].to_vec())
        })
        .collect()
}

/// Whether the median-filtered series never drops by more than `tol`
/// (relative) from one point to the next.
pub fn is_nondecreasing(xs: &[f64], half: usize, tol: f64) -> bool {
    median_filter(xs, half).windows(2).all(|w| w[1] >= w[0] * (1.0 - tol))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Json,
}

pub fn emit_report(records: &[BenchRecord], path: &Path, format: ReportFormat) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    match format {
        ReportFormat::Csv => {
            let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
            w.write_record(CSV_HEADER)?;
            for r in records {
                w.serialize(r)?;
            }
            w.flush().map_err(|e| Error::io(path, e))?;
        }
        ReportFormat::Json => {
            let mut w = BufWriter::new(file);
            serde_json::to_writer_pretty(&mut w, records)?;
            writeln!(w).map_err(|e| Error::io(path, e))?;
            w.flush().map_err(|e| Error::io(path, e))?;
        }
    }
    Ok(())
}

pub fn read_report(path: &Path, format: ReportFormat) -> Result<Vec<BenchRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    match format {
        ReportFormat::Csv => csv::Reader::from_reader(file)
            .deserialize()
            .map(|r| r.map_err(Error::from))
            .collect(),
        ReportFormat::Json => Ok(serde_json::from_reader(file)?),
    }
}
