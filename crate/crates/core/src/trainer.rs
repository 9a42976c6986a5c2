//! Training loop: guided MLM objective, AdamW updates, linear warmup/decay
//! learning rate, per-step metrics, checkpointing, and the leave-one-out
//! ablation runner. Every run is a pure function of (corpus, config).

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{save_checkpoint, Checkpoint};
use crate::data::{derive_seed, mask_batch, BatchStream, Vocab};
use crate::error::{Error, Result};
use crate::model::{encode, init_parameters, mlm_logits, ModelConfig, ParameterStore, TapedParams};
use crate::objective::{all_patterns_assignment, alpha_at, combined_loss, GuidanceConfig};
use crate::patterns::PatternKind;
use crate::tape::Tape;
use crate::tensor::Tensor;

const MASK_SEED_TAG: u64 = 0x4D61;
const EVAL_SEED_TAG: u64 = 0xEBA7;

pub const METRICS_HEADER: &str = "step,mlm_loss,ag_loss,alpha,lr,tokens_per_sec";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub guidance: GuidanceConfig,
    pub ag_enabled: bool,
    pub lr: f64,
    pub warmup: u64,
    pub steps: u64,
    pub batch_size: usize,
    pub mask_prob: f64,
    pub bert_style_mask: bool,
    pub clip_norm: Option<f64>,
    pub seed: u64,
    /// Checkpoint interval in steps; 0 means every steps/10.
    pub checkpoint_every: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.guidance.validate(self.model.heads)?;
        if self.lr <= 0.0 {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if self.steps < self.warmup {
            return Err(Error::Config(format!(
                "total steps {} below warmup steps {}",
                self.steps, self.warmup
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        Ok(())
    }

    fn cadence(&self) -> u64 {
        if self.checkpoint_every > 0 {
            self.checkpoint_every
        } else {
            (self.steps / 10).max(1)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub mlm_loss: f64,
    pub ag_loss: f64,
    pub alpha: f64,
    pub lr: f64,
}

impl StepRecord {
    /// CSV row. The throughput column is pinned to zero so metrics stay a
    /// pure function of (corpus, config); measured throughput is reported
    /// out of band.
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.6},0.000000",
            self.step, self.mlm_loss, self.ag_loss, self.alpha, self.lr
        )
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainMetrics {
    pub records: Vec<StepRecord>,
    /// Measured wall-clock tokens per second (not part of the CSV).
    pub tokens_per_sec: f64,
}

impl TrainMetrics {
    pub fn mean_mlm(&self) -> f64 {
        if self.records.is_empty() {
            return 0.0;
        }
        self.records.iter().map(|r| r.mlm_loss).sum::<f64>() / self.records.len() as f64
    }

    /// Mean MLM loss over the last `window` records.
    pub fn tail_mean_mlm(&self, window: usize) -> f64 {
        let n = self.records.len();
        let take = window.min(n).max(1);
        self.records[n - take..].iter().map(|r| r.mlm_loss).sum::<f64>() / take as f64
    }
}

/// Learning rate at step t: linear ramp 0 to peak over `warmup`, then linear
/// decay to 0 at `total`. With warmup 0 the schedule starts at peak.
pub fn lr_at(t: u64, warmup: u64, total: u64, peak: f64) -> f64 {
    if warmup > 0 && t < warmup {
        peak * t as f64 / warmup as f64
    } else if t >= total {
        0.0
    } else if total > warmup {
        peak * (1.0 - (t - warmup) as f64 / (total - warmup) as f64)
    } else {
        peak
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper { beta1: 0.9, beta2: 0.98, eps: 1e-6, weight_decay: 0.01 }
    }
}

/// First and second moment estimates plus the update counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: ParameterStore<f32>,
    pub v: ParameterStore<f32>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ParameterStore<f32>) -> Self {
        let mut m = ParameterStore::new();
        let mut v = ParameterStore::new();
        for (name, p) in params.iter() {
            m.insert(name, Tensor::zeros(p.shape.clone()));
            v.insert(name, Tensor::zeros(p.shape.clone()));
        }
        AdamState { m, v, t: 0 }
    }
}

/// One bias-corrected Adam update with decoupled weight decay. `grads` must
/// be aligned with the parameter order.
pub fn adam_step(
    params: &mut ParameterStore<f32>,
    grads: &[(String, Tensor<f32>)],
    state: &mut AdamState,
    lr: f64,
    hyper: &AdamHyper,
) -> Result<()> {
    state.t += 1;
    let bc1 = 1.0 - hyper.beta1.powi(state.t as i32);
    let bc2 = 1.0 - hyper.beta2.powi(state.t as i32);
    for (name, grad) in grads {
        if !grad.all_finite() {
            return Err(Error::NonFinite { op: "adam_step" });
        }
        let p = params.get_mut(name);
        if p.shape != grad.shape {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                detail: format!("'{}': {:?} vs {:?}", name, p.shape, grad.shape),
            });
        }
        let m = state.m.get_mut(name);
        let v = state.v.get_mut(name);
        for i in 0..p.data.len() {
            let g = grad.data[i] as f64;
            let mi = hyper.beta1 * m.data[i] as f64 + (1.0 - hyper.beta1) * g;
            let vi = hyper.beta2 * v.data[i] as f64 + (1.0 - hyper.beta2) * g * g;
            m.data[i] = mi as f32;
            v.data[i] = vi as f32;
            let update = (mi / bc1) / ((vi / bc2).sqrt() + hyper.eps)
                + hyper.weight_decay * p.data[i] as f64;
            p.data[i] = (p.data[i] as f64 - lr * update) as f32;
        }
    }
    Ok(())
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
fn clip_gradients(grads: &mut [(String, Tensor<f32>)], max_norm: f64) {
    let mut sq = 0.0f64;
    for (_, g) in grads.iter() {
        for &x in &g.data {
            sq += x as f64 * x as f64;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = (max_norm / norm) as f32;
        for (_, g) in grads.iter_mut() {
            for x in g.data.iter_mut() {
                *x *= scale;
            }
        }
    }
}

/// Runs steps `start_step..end_step` (end capped at config.steps), updating
/// `params`/`opt` in place. A CSV header is written when starting at step 0.
/// Checkpoints land at `checkpoint_path` every cadence steps and at the end.
#[allow(clippy::too_many_arguments)]
pub fn train<W: Write>(
    config: &TrainConfig,
    vocab: &Vocab,
    lines: &[String],
    params: &mut ParameterStore<f32>,
    opt: &mut AdamState,
    start_step: u64,
    end_step: u64,
    metrics_sink: &mut W,
    checkpoint_path: Option<&Path>,
) -> Result<TrainMetrics> {
    config.validate()?;
    if vocab.len() > config.model.vocab_size {
        return Err(Error::Incompatible(format!(
            "vocab of {} tokens exceeds model vocab_size {}",
            vocab.len(),
            config.model.vocab_size
        )));
    }
    let end = end_step.min(config.steps);
    let mut stream =
        BatchStream::new(lines, vocab, config.model.max_seq_len, config.batch_size, config.seed)?;
    let delim_set = vocab.delim_set();
    let period_id = vocab.period_id();
    let cadence = config.cadence();
    let mut metrics = TrainMetrics::default();
    if start_step == 0 {
        writeln!(metrics_sink, "{}", METRICS_HEADER)?;
    }
    let started = Instant::now();
    let mut tokens_seen = 0u64;

    for t in start_step..end {
        let (ids, valid) = stream.batch_at(t);
        let mask_seed = derive_seed(config.seed, MASK_SEED_TAG, t);
        let batch =
            mask_batch(&ids, &valid, config.mask_prob, mask_seed, config.bert_style_mask, vocab.len())?;

        let alpha_now = if config.guidance.assignment.is_empty() {
            0.0
        } else {
            alpha_at(t, &config.guidance)?
        };
        let use_ag = config.ag_enabled && alpha_now > 0.0;

        let mut tape = Tape::<f32>::new();
        let taped = TapedParams::stage(&mut tape, params);
        let out = encode(
            &mut tape,
            &taped,
            &config.model,
            &batch.input_ids,
            &batch.valid_len,
            use_ag,
            None,
        )?;
        let logits = mlm_logits(&mut tape, &taped, &out.hidden)?;
        let losses = combined_loss(
            &mut tape,
            &logits,
            if use_ag { out.attention.as_deref() } else { None },
            &batch,
            &config.guidance,
            t,
            &delim_set,
            period_id,
        )
        .map_err(|e| match e {
            Error::NonFinite { op } => {
                Error::Diverged { step: t, detail: format!("non-finite value in {}", op) }
            }
            other => other,
        })?;

        let mlm_val = tape.scalar_value(losses.mlm) as f64;
        let ag_val = losses.ag.map(|id| tape.scalar_value(id) as f64).unwrap_or(0.0);
        let logged_alpha = if losses.ag.is_some() { losses.alpha } else { 0.0 };
        if !mlm_val.is_finite() || !ag_val.is_finite() {
            return Err(Error::Diverged { step: t, detail: "non-finite loss".into() });
        }

        let root = losses.total;
        let mut grad_store = tape.backward(root)?;
        let mut grads: Vec<(String, Tensor<f32>)> = Vec::with_capacity(taped.ordered().len());
        for (name, id) in taped.ordered() {
            let g = grad_store
                .take(*id)
                .unwrap_or_else(|| Tensor::zeros(params.get(name).shape.clone()));
            grads.push((name.clone(), g));
        }
        if let Some(c) = config.clip_norm {
            clip_gradients(&mut grads, c);
        }
        let lr_t = lr_at(t, config.warmup, config.steps, config.lr);
        adam_step(params, &grads, opt, lr_t, &AdamHyper::default())
            .map_err(|e| match e {
                Error::NonFinite { .. } => {
                    Error::Diverged { step: t, detail: "non-finite gradient".into() }
                }
                other => other,
            })?;

        let record =
            StepRecord { step: t, mlm_loss: mlm_val, ag_loss: ag_val, alpha: logged_alpha, lr: lr_t };
        writeln!(metrics_sink, "{}", record.csv_row())?;
        metrics_sink.flush()?;
        metrics.records.push(record);
        tokens_seen += (config.batch_size * config.model.max_seq_len) as u64;

        if let Some(path) = checkpoint_path {
            if (t + 1) % cadence == 0 || t + 1 == end {
                let ckpt = Checkpoint {
                    config: config.clone(),
                    vocab_tokens: vocab.tokens().to_vec(),
                    step: t + 1,
                    params: params.clone(),
                    opt: opt.clone(),
                };
                save_checkpoint(&ckpt, path)?;
            }
        }
    }
    let elapsed = started.elapsed().as_secs_f64();
    metrics.tokens_per_sec = if elapsed > 0.0 { tokens_seen as f64 / elapsed } else { 0.0 };
    Ok(metrics)
}

/// Fresh run from step 0 with seed-initialized parameters.
pub fn train_fresh<W: Write>(
    config: &TrainConfig,
    vocab: &Vocab,
    lines: &[String],
    metrics_sink: &mut W,
    checkpoint_path: Option<&Path>,
) -> Result<(ParameterStore<f32>, AdamState, TrainMetrics)> {
    let mut params = init_parameters(&config.model, config.seed)?;
    let mut opt = AdamState::new(&params);
    let metrics = train(
        config,
        vocab,
        lines,
        &mut params,
        &mut opt,
        0,
        config.steps,
        metrics_sink,
        checkpoint_path,
    )?;
    Ok((params, opt, metrics))
}

/// Resumes a checkpointed run to `config.steps`, appending metrics rows.
pub fn resume<W: Write>(
    ckpt: Checkpoint,
    lines: &[String],
    metrics_sink: &mut W,
    checkpoint_path: Option<&Path>,
) -> Result<(ParameterStore<f32>, AdamState, TrainMetrics)> {
    let vocab = Vocab::from_tokens(ckpt.vocab_tokens)?;
    let mut params = ckpt.params;
    let mut opt = ckpt.opt;
    let metrics = train(
        &ckpt.config,
        &vocab,
        lines,
        &mut params,
        &mut opt,
        ckpt.step,
        ckpt.config.steps,
        metrics_sink,
        checkpoint_path,
    )?;
    Ok((params, opt, metrics))
}

/// Mean masked cross-entropy over a deterministic masking of `lines`, with
/// no parameter updates. Identical inputs always yield the identical loss.
pub fn evaluate_mlm(
    model: &ModelConfig,
    params: &ParameterStore<f32>,
    vocab: &Vocab,
    lines: &[String],
    mask_prob: f64,
    eval_seed: u64,
    batch_size: usize,
) -> Result<f64> {
    if lines.is_empty() {
        return Err(Error::Ingestion("evaluation corpus is empty".into()));
    }
    if vocab.len() > model.vocab_size {
        return Err(Error::Incompatible(format!(
            "vocab of {} tokens exceeds model vocab_size {}",
            vocab.len(),
            model.vocab_size
        )));
    }
    let mut ce_sum = 0.0f64;
    let mut masked_total = 0usize;
    for (chunk_idx, chunk) in lines.chunks(batch_size.max(1)).enumerate() {
        let mut ids = Vec::with_capacity(chunk.len());
        let mut valid = Vec::with_capacity(chunk.len());
        for line in chunk {
            let (seq, vl) = crate::data::encode_sequence(line, vocab, model.max_seq_len);
            ids.push(seq);
            valid.push(vl);
        }
        let seed = derive_seed(eval_seed, EVAL_SEED_TAG, chunk_idx as u64);
        let batch = mask_batch(&ids, &valid, mask_prob, seed, false, vocab.len())?;
        let count = batch.total_masked();
        if count == 0 {
            continue;
        }
        let mut tape = Tape::<f32>::new();
        let taped = TapedParams::stage(&mut tape, params);
        let out = encode(&mut tape, &taped, model, &batch.input_ids, &batch.valid_len, false, None)?;
        let logits = mlm_logits(&mut tape, &taped, &out.hidden)?;
        let mean = crate::objective::mlm_loss(&mut tape, &logits, &batch)?;
        ce_sum += tape.scalar_value(mean) as f64 * count as f64;
        masked_total += count;
    }
    if masked_total == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(ce_sum / masked_total as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub omitted: String,
    pub loss_at_probe: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    pub probe_step: u64,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    /// Plain text table: `omitted, loss_at_probe, delta`.
    pub fn render(&self) -> String {
        let mut out = String::from("omitted, loss_at_probe, delta\n");
        for row in &self.rows {
            out.push_str(&format!(
                "{}, {:.6}, {:.6}\n",
                row.omitted, row.loss_at_probe, row.delta
            ));
        }
        out
    }
}

fn omission_label(set: &[PatternKind]) -> String {
    if set.is_empty() {
        return "(none)".to_string();
    }
    set.iter().map(|k| k.name()).collect::<Vec<_>>().join("+")
}

/// Trains one run per omission set plus the all-patterns baseline, all with
/// the same seed, stopping at `probe_step`. The reported loss is the mean
/// MLM loss over the trailing 100 steps before the probe, which smooths
/// batch noise at desk scale.
pub fn run_ablation(
    base: &TrainConfig,
    vocab: &Vocab,
    lines: &[String],
    omissions: &[Vec<PatternKind>],
    probe_step: u64,
    refill: bool,
) -> Result<AblationReport> {
    if probe_step == 0 || probe_step > base.steps {
        return Err(Error::Config(format!(
            "probe step {} outside 1..={}",
            probe_step, base.steps
        )));
    }
    let run = |omitted: &[PatternKind]| -> Result<f64> {
        let available: Vec<PatternKind> = PatternKind::ALL
            .into_iter()
            .filter(|k| !omitted.contains(k))
            .collect();
        let mut config = base.clone();
        config.guidance.assignment = all_patterns_assignment(
            config.model.heads,
            config.guidance.lambda,
            &available,
            refill,
        );
        let mut params = init_parameters(&config.model, config.seed)?;
        let mut opt = AdamState::new(&params);
        let mut sink = std::io::sink();
        let metrics =
            train(&config, vocab, lines, &mut params, &mut opt, 0, probe_step, &mut sink, None)?;
        Ok(metrics.tail_mean_mlm(100))
    };

    let baseline = run(&[])?;
    let mut rows = vec![AblationRow { omitted: "(none)".into(), loss_at_probe: baseline, delta: 0.0 }];
    for set in omissions {
        if set.is_empty() {
            continue;
        }
        let loss = run(set)?;
        rows.push(AblationRow {
            omitted: omission_label(set),
            loss_at_probe: loss,
            delta: loss - baseline,
        });
    }
    Ok(AblationReport { probe_step, rows })
}
