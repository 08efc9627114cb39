//! Desk-scale masked-LM training loop.
//!
//! One step: compute the keep ratio, spread it over depth, sample gates,
//! run the gated forward (bypassed blocks cost nothing in either pass),
//! take the masked cross-entropy, run backward, clip/update with Adam.
//! Validation always runs full depth, unscaled, without dropout.

mod data;
mod metrics;
mod optim;

pub use data::{mlm_batch, Corpus, MlmBatch, Split, Vocab};
pub use metrics::{
    metrics_csv, timing_csv, write_metrics, MetricsRow, METRICS_HEADER, TIMING_HEADER,
};
pub use optim::{adam_step, lr_at, LrConfig, OptimizerConfig, OptimizerState};

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    collect_grads, forward_model, load_checkpoint, load_checkpoint_config, save_checkpoint,
    ForwardOptions, GatePlan, ModelConfig, ModelWeights, Variant,
};
use crate::scalar::Scalar;
use crate::schedule::DropSchedule;
use crate::tape::Tape;

/// Progressive-drop settings inside a training config; absent means the
/// baseline full-depth run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub theta_limit: f64,
    /// Decay rate; omitted means the `100 / total_steps` heuristic.
    #[serde(default)]
    pub gamma: Option<f64>,
}

/// Complete training configuration. JSON on disk mirrors this struct.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    /// `null`/absent disables layer dropping.
    #[serde(default)]
    pub schedule: Option<ScheduleConfig>,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    pub lr: LrConfig,
    pub batch_size: usize,
    pub total_steps: usize,
    pub seed: u64,
    #[serde(default = "default_mask_prob")]
    pub mask_prob: f64,
    pub corpus_path: PathBuf,
    #[serde(default = "default_eval_interval")]
    pub eval_interval: usize,
    #[serde(default = "default_eval_batches")]
    pub eval_batches: usize,
    /// Steps between periodic checkpoints; 0 keeps only the final one.
    #[serde(default)]
    pub checkpoint_interval: usize,
}

fn default_mask_prob() -> f64 {
    0.15
}
fn default_eval_interval() -> usize {
    250
}
fn default_eval_batches() -> usize {
    8
}

impl TrainConfig {
    /// Desk-scale defaults: minutes on one CPU core.
    pub fn desk_default(corpus_path: PathBuf) -> Self {
        TrainConfig {
            model: ModelConfig {
                layers: 6,
                hidden: 64,
                heads: 4,
                vocab: 0, // resolved from the corpus
                max_seq: 64,
                variant: Variant::St,
                dropout: 0.1,
                ln_eps: 1e-5,
                init_std: 0.02,
            },
            schedule: Some(ScheduleConfig {
                theta_limit: 0.5,
                gamma: None,
            }),
            optimizer: OptimizerConfig::default(),
            lr: LrConfig {
                peak: 3e-4,
                warmup_ratio: 0.02,
                decay_rate: 0.99,
                decay_step: 1000,
            },
            batch_size: 8,
            total_steps: 5000,
            seed: 17,
            mask_prob: 0.15,
            corpus_path,
            eval_interval: 250,
            eval_batches: 8,
            checkpoint_interval: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.lr.validate()?;
        if self.batch_size == 0 || self.total_steps == 0 {
            return Err(Error::Config(
                "batch_size and total_steps must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.mask_prob) || self.mask_prob == 0.0 {
            return Err(Error::Config(format!(
                "mask probability must be in (0, 1), got {}",
                self.mask_prob
            )));
        }
        if self.eval_interval == 0 || self.eval_batches == 0 {
            return Err(Error::Config(
                "eval_interval and eval_batches must be positive".into(),
            ));
        }
        // Model is validated after vocabulary resolution.
        Ok(())
    }

    /// Fill `model.vocab` from the corpus when left at 0 and validate.
    pub fn resolve(&self, corpus: &Corpus) -> Result<TrainConfig> {
        self.validate()?;
        let mut cfg = self.clone();
        if cfg.model.vocab == 0 {
            cfg.model.vocab = corpus.vocab.size();
        } else if cfg.model.vocab < corpus.vocab.size() {
            return Err(Error::Config(format!(
                "configured vocab {} is smaller than the corpus vocabulary {}",
                cfg.model.vocab,
                corpus.vocab.size()
            )));
        }
        cfg.model.validate()?;
        if let Some(s) = &cfg.schedule {
            // Validates theta/gamma ranges (and warns outside [0.5, 0.9]).
            DropSchedule::new(
                s.theta_limit,
                s.gamma.unwrap_or(100.0 / cfg.total_steps as f64),
                cfg.total_steps,
                cfg.model.layers,
            )?;
        }
        Ok(cfg)
    }

    pub fn drop_schedule(&self) -> Result<Option<DropSchedule>> {
        self.schedule
            .as_ref()
            .map(|s| match s.gamma {
                Some(g) => DropSchedule::new(s.theta_limit, g, self.total_steps, self.model.layers),
                None => DropSchedule::with_default_gamma(
                    s.theta_limit,
                    self.total_steps,
                    self.model.layers,
                ),
            })
            .transpose()
    }
}

/// Everything a finished run leaves behind.
#[derive(Debug)]
pub struct TrainOutput {
    pub rows: Vec<MetricsRow>,
    pub metrics_path: PathBuf,
    pub timing_path: PathBuf,
    pub final_checkpoint: PathBuf,
    pub final_val_loss: f64,
    /// Cumulative executed block FLOPs over a full-depth run of equal length.
    pub cum_block_flops_fraction: f64,
    /// Mean wall ms/step over the last tenth of the run.
    pub mean_step_ms_last_tenth: f64,
}

/// Mean validation loss over the fixed validation batches: full depth, no
/// gating, no dropout.
pub fn evaluate<T: Scalar>(
    weights: &ModelWeights<T>,
    corpus: &Corpus,
    batch_size: usize,
    mask_prob: f64,
    seed: u64,
    eval_batches: usize,
) -> Result<f64> {
    let cfg = &weights.config;
    let plan = GatePlan::full_depth(cfg.layers);
    let mut total = 0.0;
    for k in 0..eval_batches {
        let batch = mlm_batch(
            corpus,
            batch_size,
            cfg.max_seq,
            mask_prob,
            seed,
            Split::Validation,
            k as u64,
        )?;
        let mut tape = Tape::new();
        let bindings = forward_model(
            &mut tape,
            weights,
            &batch.tokens,
            &plan,
            &ForwardOptions::evaluation(),
        )?;
        let loss = tape.cross_entropy_masked(bindings.logits, &batch.labels, &batch.mask)?;
        total += tape.value(loss).data()[0].to_f64();
    }
    Ok(total / eval_batches as f64)
}

/// Evaluate a saved checkpoint, verifying it matches `expected` when given.
pub fn evaluate_checkpoint(
    stem: &Path,
    expected: Option<&ModelConfig>,
    corpus: &Corpus,
    batch_size: usize,
    mask_prob: f64,
    seed: u64,
    eval_batches: usize,
) -> Result<f64> {
    let (ckpt_cfg, _) = load_checkpoint_config(stem)?;
    if let Some(exp) = expected {
        let same = ckpt_cfg.layers == exp.layers
            && ckpt_cfg.hidden == exp.hidden
            && ckpt_cfg.heads == exp.heads
            && ckpt_cfg.vocab == exp.vocab
            && ckpt_cfg.max_seq == exp.max_seq
            && ckpt_cfg.variant == exp.variant;
        if !same {
            return Err(Error::Checkpoint(format!(
                "checkpoint config {ckpt_cfg:?} does not match expected {exp:?}"
            )));
        }
    }
    let weights = load_checkpoint::<f32>(stem)?;
    evaluate(&weights, corpus, batch_size, mask_prob, seed, eval_batches)
}

/// Run the training loop in 32-bit. Artifacts land in `out_dir`:
/// `metrics.csv`, `timing.csv` and `checkpoint-final.{manifest,bin}` (plus
/// periodic checkpoints when configured).
///
/// On divergence the last good weights are saved to
/// `checkpoint-diverged.{manifest,bin}`, partial metrics are flushed, and a
/// [`Error::Divergence`] is returned.
pub fn train(cfg: &TrainConfig, out_dir: &Path) -> Result<TrainOutput> {
    std::fs::create_dir_all(out_dir)?;
    let corpus = Corpus::load(&cfg.corpus_path)?;
    let cfg = cfg.resolve(&corpus)?;
    let schedule = cfg.drop_schedule()?;
    let layers = cfg.model.layers;

    let mut weights = ModelWeights::<f32>::init(&cfg.model, cfg.seed);
    let mut opt_state = OptimizerState::<f32>::new();
    let mut rows: Vec<MetricsRow> = Vec::with_capacity(cfg.total_steps + 1);
    let metrics_path = out_dir.join("metrics.csv");
    let timing_path = out_dir.join("timing.csv");

    let eval = |w: &ModelWeights<f32>| {
        evaluate(
            w,
            &corpus,
            cfg.batch_size,
            cfg.mask_prob,
            cfg.seed,
            cfg.eval_batches,
        )
    };

    // Step-0 row: validation before any update.
    rows.push(MetricsRow {
        step: 0,
        train_loss: None,
        val_loss: Some(eval(&weights)?),
        lr: 0.0,
        theta: 1.0,
        kept_blocks: layers,
        cum_block_flops_fraction: 1.0,
        wall_ms: 0.0,
    });

    let mut kept_total = 0usize;
    let flush = |rows: &[MetricsRow]| write_metrics(rows, &metrics_path, &timing_path);
    let diverged = |rows: &Vec<MetricsRow>,
                    weights: &ModelWeights<f32>,
                    step: usize,
                    what: String|
     -> Error {
        let stem = out_dir.join("checkpoint-diverged");
        let _ = save_checkpoint(weights, &stem);
        let _ = flush(rows);
        Error::Divergence(format!("step {step}: {what} (last good weights saved)"))
    };

    for t in 1..=cfg.total_steps {
        let started = Instant::now();
        let (theta, trace) = match &schedule {
            Some(s) => (s.theta(t), Some(s.sample_gates(t, cfg.seed))),
            None => (1.0, None),
        };
        let plan = trace
            .as_ref()
            .map(|tr| tr.plan(true))
            .unwrap_or_else(|| GatePlan::full_depth(layers));
        let kept = plan.kept();
        kept_total += kept;

        let batch = mlm_batch(
            &corpus,
            cfg.batch_size,
            cfg.model.max_seq,
            cfg.mask_prob,
            cfg.seed,
            Split::Train,
            t as u64,
        )?;

        let mut tape = Tape::new();
        let bindings = forward_model(
            &mut tape,
            &weights,
            &batch.tokens,
            &plan,
            &ForwardOptions::training(cfg.model.dropout, cfg.seed, t as u64),
        )?;
        let loss_node = tape.cross_entropy_masked(bindings.logits, &batch.labels, &batch.mask)?;
        let loss = tape.value(loss_node).data()[0].to_f64();
        if !loss.is_finite() {
            return Err(diverged(&rows, &weights, t, format!("loss = {loss}")));
        }
        tape.backward(loss_node)?;
        let grads = collect_grads(&tape, &bindings);
        drop(tape);

        let lr = lr_at(t, cfg.total_steps, &cfg.lr);
        if let Err(e) = adam_step(&mut weights, &grads, &mut opt_state, lr, &cfg.optimizer) {
            return Err(diverged(&rows, &weights, t, e.to_string()));
        }

        let val_loss = if t % cfg.eval_interval == 0 || t == cfg.total_steps {
            Some(eval(&weights)?)
        } else {
            None
        };
        rows.push(MetricsRow {
            step: t,
            train_loss: Some(loss),
            val_loss,
            lr,
            theta,
            kept_blocks: kept,
            cum_block_flops_fraction: kept_total as f64 / (t * layers) as f64,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        });

        if cfg.checkpoint_interval > 0 && t % cfg.checkpoint_interval == 0 && t != cfg.total_steps
        {
            save_checkpoint(&weights, &out_dir.join(format!("checkpoint-step{t}")))?;
        }
    }

    let final_checkpoint = out_dir.join("checkpoint-final");
    save_checkpoint(&weights, &final_checkpoint)?;
    flush(&rows)?;

    let final_val_loss = rows
        .last()
        .and_then(|r| r.val_loss)
        .expect("final step always evaluates");
    let tail = (cfg.total_steps / 10).max(1);
    let step_rows = &rows[rows.len() - tail..];
    let mean_step_ms_last_tenth =
        step_rows.iter().map(|r| r.wall_ms).sum::<f64>() / step_rows.len() as f64;

    Ok(TrainOutput {
        cum_block_flops_fraction: rows
            .last()
            .map(|r| r.cum_block_flops_fraction)
            .unwrap_or(1.0),
        rows,
        metrics_path,
        timing_path,
        final_checkpoint,
        final_val_loss,
        mean_step_ms_last_tenth,
    })
}
