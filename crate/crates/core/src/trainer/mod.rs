//! Desk-scale training: packing, staged curriculum, schedule-driven AdamW,
//! JSON-lines metrics and resumable checkpoints.

mod checkpoint;
mod data;
mod stages;

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{init_params, loss_and_grad, ModelConfig, Params, TrainWindow};
use crate::optim::{adamw_step, Moments, OptimizerConfig};
use crate::schedule::{ScheduleConfig, ScheduleState};

pub use checkpoint::{
    checkpoint_bytes, load_checkpoint, parse_checkpoint, save_checkpoint, Checkpoint, TrainMeta, MAGIC,
    VERSION,
};
pub use data::{
    detokenize, detokenize_bytes, pack_tokens, split_documents, tokenize_bytes, Corpus, BYTE_VOCAB, SEPARATOR,
};
pub use stages::{Stage, StageConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    /// Coefficient of the `logsumexp^2` penalty. 0 disables it.
    pub z_loss: f64,
    pub metrics_file: String,
    pub optimizer: OptimizerConfig,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            z_loss: 0.0,
            metrics_file: "metrics.jsonl".into(),
            optimizer: OptimizerConfig::default(),
        }
    }
}

/// Everything that defines a run besides the corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    pub stages: StageConfig,
    pub trainer: TrainerConfig,
    pub seed: u64,
}

impl TrainOptions {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.schedule.validate()?;
        self.stages.validate(&self.schedule)?;
        self.trainer.optimizer.validate()?;
        if !(self.trainer.z_loss >= 0.0) {
            return Err(Error::Config(format!("trainer: z_loss must be >= 0, got {}", self.trainer.z_loss)));
        }
        if self.model.vocab_size < BYTE_VOCAB {
            return Err(Error::Config(format!(
                "model: byte-level training needs vocab_size >= {BYTE_VOCAB}, got {}",
                self.model.vocab_size
            )));
        }
        Ok(())
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    /// Tokens consumed before this step.
    pub t: u64,
    pub stage: usize,
    pub lr: f64,
    pub batch: u64,
    pub loss: f64,
    pub noise_temp: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    /// Steps run by this invocation.
    pub records: Vec<MetricRecord>,
    pub steps: u64,
    pub tokens: u64,
    /// Stage-boundary checkpoints written, in order. The last is the final one.
    pub checkpoints: Vec<PathBuf>,
    pub params: Params,
}

impl TrainReport {
    pub fn final_checkpoint(&self) -> &Path {
        self.checkpoints.last().expect("training writes a final checkpoint")
    }
}

const SAMPLER_STREAM: u64 = 0x5eed_5a3b_1e55_0001;

struct Session<'a> {
    meta: TrainMeta,
    params: Params,
    moments: Moments,
    rng: ChaCha8Rng,
    corpus: &'a Corpus,
    windows: HashMap<(String, usize), Vec<TrainWindow>>,
}

impl Session<'_> {
    fn windows(&mut self, shard: &str, seq_len: usize) -> Result<&[TrainWindow]> {
        let key = (shard.to_string(), seq_len);
        if !self.windows.contains_key(&key) {
            let docs = &self.corpus.shards[shard];
            let packed = if docs.is_empty() { Vec::new() } else { pack_tokens(docs, seq_len, SEPARATOR)? };
            if packed.is_empty() {
                return Err(Error::Config(format!("shard '{shard}' is shorter than one window of {seq_len}")));
            }
            self.windows.insert(key.clone(), packed);
        }
        Ok(&self.windows[&key])
    }

    fn sample_batch(&mut self, stage: &Stage, b: u64) -> Result<Vec<TrainWindow>> {
        let names: Vec<String> = if stage.mixture.is_empty() {
            self.corpus.shards.keys().cloned().collect()
        } else {
            stage.mixture.keys().cloned().collect()
        };
        for n in &names {
            if !self.corpus.shards.contains_key(n) {
                return Err(Error::Config(format!("stage '{}' names unknown shard '{n}'", stage.name)));
            }
        }
        // Without explicit weights shards are sampled in proportion to size.
        let mut weights = Vec::with_capacity(names.len());
        for n in &names {
            weights.push(match stage.mixture.get(n) {
                Some(&w) => w,
                None => self.windows(n, stage.seq_len)?.len() as f64,
            });
        }
        let pick = WeightedIndex::new(&weights).map_err(|e| Error::Config(format!("stage mixture: {e}")))?;
        let mut out = Vec::with_capacity(b as usize);
        for _ in 0..b {
            let shard = &names[pick.sample(&mut self.rng)];
            let n = self.windows(shard, stage.seq_len)?.len();
            let i = self.rng.gen_range(0..n);
            out.push(self.windows[&(shard.clone(), stage.seq_len)][i].clone());
        }
        Ok(out)
    }

    fn checkpoint(&mut self) -> Result<Checkpoint> {
        let t = self.meta.tokens.min(self.meta.schedule.t_total);
        self.meta.schedule_state = ScheduleState::at(t, &self.meta.schedule)?;
        self.meta.rng_word_pos = self.rng.get_word_pos().to_string();
        Ok(Checkpoint::new(self.meta.clone(), &self.params, &self.moments))
    }

    fn run(mut self, out_dir: &Path) -> Result<TrainReport> {
        fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let log_path = out_dir.join(&self.meta.trainer.metrics_file);
        let file: File = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log_path)
            .map_err(|e| Error::io(&log_path, e))?;
        let mut log = BufWriter::new(file);
        let io = |e| Error::io(&log_path, e);

        let boundaries = self.meta.stages.boundaries();
        let n_stages = boundaries.len();
        let mut records = Vec::new();
        let mut checkpoints = Vec::new();
        while self.meta.stage < n_stages {
            let si = self.meta.stage;
            let stage = self.meta.stages.stages[si].clone();
            while self.meta.tokens < boundaries[si] {
                let t = self.meta.tokens;
                let s = ScheduleState::at(t, &self.meta.schedule)?;
                let batch = self.sample_batch(&stage, s.batch)?;
                let bl = loss_and_grad(&self.params, &batch, self.meta.trainer.z_loss)?;
                if !bl.loss.is_finite() {
                    log.flush().map_err(io)?;
                    return Err(Error::NanLoss {
                        step: self.meta.step + 1,
                        tokens: t,
                    });
                }
                self.meta.step += 1;
                adamw_step(&mut self.params, &bl.grads, &mut self.moments, self.meta.step, s.lr, &self.meta.trainer.optimizer)?;
                self.meta.tokens += s.batch * stage.seq_len as u64;
                let rec = MetricRecord {
                    t,
                    stage: si,
                    lr: s.lr,
                    batch: s.batch,
                    loss: bl.loss,
                    noise_temp: s.noise_temp,
                };
                writeln!(log, "{}", serde_json::to_string(&rec)?).map_err(io)?;
                records.push(rec);
            }
            self.meta.stage += 1;
            let name = if si + 1 == n_stages {
                "final.ckpt".to_string()
            } else if self.meta.stages.stages[si + 1].decay {
                "pre-decay.ckpt".to_string()
            } else {
                format!("stage-{si}-{}.ckpt", stage.name)
            };
            log.flush().map_err(io)?;
            let path = out_dir.join(name);
            save_checkpoint(&self.checkpoint()?, &path)?;
            checkpoints.push(path);
        }
        Ok(TrainReport {
            records,
            steps: self.meta.step,
            tokens: self.meta.tokens,
            checkpoints,
            params: self.params,
        })
    }
}

/// Trains from freshly initialized parameters, writing the metrics log and
/// stage-boundary checkpoints under `out_dir`.
pub fn train(opts: &TrainOptions, corpus: &Corpus, out_dir: &Path) -> Result<TrainReport> {
    opts.validate()?;
    let params = init_params(&opts.model, opts.seed)?;
    let moments = Moments::zeros_like(&params);
    let meta = TrainMeta {
        model: opts.model.clone(),
        schedule: opts.schedule.clone(),
        stages: opts.stages.clone(),
        trainer: opts.trainer.clone(),
        seed: opts.seed,
        step: 0,
        tokens: 0,
        stage: 0,
        rng_word_pos: "0".into(),
        corpus_fingerprint: corpus.fingerprint(),
        schedule_state: ScheduleState::at(0, &opts.schedule)?,
    };
    Session {
        meta,
        params,
        moments,
        rng: ChaCha8Rng::seed_from_u64(opts.seed ^ SAMPLER_STREAM),
        corpus,
        windows: HashMap::new(),
    }
    .run(out_dir)
}

/// Continues a run from a checkpoint. The corpus must be the one the run
/// started with.
pub fn resume(checkpoint: &Checkpoint, corpus: &Corpus, out_dir: &Path) -> Result<TrainReport> {
    let meta = checkpoint.meta.clone();
    if meta.corpus_fingerprint != corpus.fingerprint() {
        return Err(Error::Config("corpus differs from the one the checkpoint was trained on".into()));
    }
    let word_pos: u128 = meta
        .rng_word_pos
        .parse()
        .map_err(|_| Error::CorruptCheckpoint("bad rng_word_pos".into()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(meta.seed ^ SAMPLER_STREAM);
    rng.set_word_pos(word_pos);
    Session {
        params: checkpoint.params()?,
        moments: checkpoint.moments()?,
        meta,
        rng,
        corpus,
        windows: HashMap::new(),
    }
    .run(out_dir)
}
