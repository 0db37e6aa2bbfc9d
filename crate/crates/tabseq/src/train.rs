//! Joint training: Adam with warm-up and inverse-time learning-rate decay,
//! global gradient-norm clipping, dev-set model selection, checkpointing,
//! and evaluation plumbing.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::codec::{self, EntitySpan, Relation, TagVocab};
use crate::data::{Corpus, FeatureSet};
use crate::embed::Vocabulary;
use crate::error::{Error, Result};
use crate::metrics::{score_all, ScoreReport};
use crate::model::params::ParamId;
use crate::model::{ForwardMode, Model, ModelConfig, SentenceFeatures};
use crate::table::Schedule;
use crate::tensor::{Tape, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TSQCKPT1";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Optimization hyperparameters. Defaults: batch 24, Adam at 1e-3 with
/// 1000 warm-up steps and inverse-time decay (rate 0.05 per 1000 steps),
/// gradient clipping at global norm 5.0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub decay_rate: f64,
    pub decay_steps: usize,
    pub clip_norm: f64,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Stop once training-set NER F1 and strict relation F1 both reach this
    /// value (fractions in [0,1]); `None` trains for the full epoch budget.
    pub target_train_f1: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 24,
            lr: 1e-3,
            warmup_steps: 1000,
            decay_rate: 0.05,
            decay_steps: 1000,
            clip_norm: 5.0,
            epochs: 100,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            target_train_f1: None,
        }
    }
}

impl TrainConfig {
    /// Warm-up and inverse-time decay composed multiplicatively:
    /// `lr(t) = lr · min(t/warmup, 1) / (1 + decay_rate · t/decay_steps)`.
    pub fn learning_rate(&self, step: usize) -> f64 {
        let t = step as f64;
        let warm = if self.warmup_steps == 0 { 1.0 } else { (t / self.warmup_steps as f64).min(1.0) };
        self.lr * warm / (1.0 + self.decay_rate * t / self.decay_steps as f64)
    }
}

/// Scale all gradients so the global norm does not exceed `clip`; returns
/// the pre-clip norm.
pub fn clip_global_norm(grads: &mut [Option<Vec<f64>>], clip: f64) -> f64 {
    let mut sq = 0.0;
    for g in grads.iter().flatten() {
        for &v in g {
            sq += v * v;
        }
    }
    let norm = sq.sqrt();
    if norm > clip && norm > 0.0 {
        let scale = clip / norm;
        for g in grads.iter_mut().flatten() {
            for v in g.iter_mut() {
                *v *= scale;
            }
        }
    }
    norm
}

/// Adam state: one pair of moment buffers per parameter.
pub struct Optimizer {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    pub step: usize,
}

impl Optimizer {
    pub fn new(model: &Model) -> Self {
        let sizes: Vec<usize> =
            model.store.iter().map(|(_, _, t, _)| t.numel()).collect();
        Optimizer {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }

    /// One Adam update over every trainable parameter with a gradient.
    /// `step` must already be advanced (1-based) by the caller.
    pub fn apply(
        &mut self,
        model: &mut Model,
        grads: &[Option<Vec<f64>>],
        lr: f64,
        cfg: &TrainConfig,
    ) {
        let t = self.step as f64;
        let bias1 = 1.0 - cfg.beta1.powf(t);
        let bias2 = 1.0 - cfg.beta2.powf(t);
        for (idx, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let id = ParamId(idx);
            if !model.store.is_trainable(id) {
                continue;
            }
            let old = model.store.value(id);
            let mut data = old.data().to_vec();
            let shape = old.shape().to_vec();
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            for k in 0..data.len() {
                m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g[k];
                v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
                let m_hat = m[k] / bias1;
                let v_hat = v[k] / bias2;
                data[k] -= lr * m_hat / (v_hat.sqrt() + cfg.adam_eps);
            }
            model.store.set_value(id, Tensor::new(shape, data).unwrap());
        }
    }
}

/// Lookup for precomputed per-sentence features.
#[derive(Clone, Copy, Default)]
pub struct FeatureSources<'a> {
    pub emb: Option<&'a FeatureSet>,
    pub attn: Option<&'a FeatureSet>,
}

impl<'a> FeatureSources<'a> {
    pub fn for_sentence(&self, id: usize) -> SentenceFeatures<'a> {
        SentenceFeatures {
            ctx: self.emb.and_then(|f| f.by_id.get(&id)),
            attn: self.attn.and_then(|f| f.by_id.get(&id)),
        }
    }
}

/// Decode every sentence of a corpus and score against gold.
pub fn evaluate(
    model: &Model,
    corpus: &Corpus,
    features: FeatureSources,
    schedule: Schedule,
) -> Result<EvalOutput> {
    let mut pred_e = Vec::with_capacity(corpus.sentences.len());
    let mut pred_r = Vec::with_capacity(corpus.sentences.len());
    let mut gold_e = Vec::with_capacity(corpus.sentences.len());
    let mut gold_r = Vec::with_capacity(corpus.sentences.len());
    for s in &corpus.sentences {
        let (e, r) = model.predict(&s.tokens, features.for_sentence(s.id), schedule)?;
        pred_e.push(e);
        pred_r.push(r);
        gold_e.push(s.entities.clone());
        gold_r.push(s.resolved_relations());
    }
    let report = score_all(&pred_e, &gold_e, &pred_r, &gold_r);
    Ok(EvalOutput { report, pred_entities: pred_e, pred_relations: pred_r })
}

pub struct EvalOutput {
    pub report: ScoreReport,
    pub pred_entities: Vec<Vec<EntitySpan>>,
    pub pred_relations: Vec<Vec<Relation>>,
}

/// A padded batch plus its mask, the unit the training loop consumes.
pub struct Batch<'a> {
    pub rows: Vec<Vec<String>>,
    pub mask: Vec<Vec<bool>>,
    pub ids: Vec<usize>,
    pub sentences: Vec<&'a crate::codec::Sentence>,
}

impl<'a> Batch<'a> {
    pub fn from_sentences(sentences: Vec<&'a crate::codec::Sentence>) -> Self {
        let max_len = sentences.iter().map(|s| s.len()).max().unwrap_or(0);
        let rows = sentences
            .iter()
            .map(|s| {
                let mut row = s.tokens.clone();
                row.resize(max_len, "<pad>".to_string());
                row
            })
            .collect();
        let mask = sentences
            .iter()
            .map(|s| {
                let mut m = vec![true; s.len()];
                m.resize(max_len, false);
                m
            })
            .collect();
        let ids = sentences.iter().map(|s| s.id).collect();
        Batch { rows, mask, ids, sentences }
    }
}

pub struct TrainOutcome {
    pub epochs_run: usize,
    pub steps: usize,
    pub stopped_early: bool,
    /// Best dev selection score `(NER F1 + RE F1)/2` and its epoch, when a
    /// dev set was given.
    pub best_dev: Option<(usize, f64)>,
    pub final_train_report: Option<ScoreReport>,
}

/// Train in place. With a dev set, the parameters that scored the best
/// dev `(entity F1 + relation F1)/2` are restored at the end.
pub fn train(
    model: &mut Model,
    train_set: &Corpus,
    dev_set: Option<&Corpus>,
    features: FeatureSources,
    cfg: &TrainConfig,
    seed: u64,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    if train_set.sentences.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x9e3779b97f4a7c15));
    let mut opt = Optimizer::new(model);

    let gold_tables: std::collections::HashMap<usize, codec::TagTable> = train_set
        .sentences
        .iter()
        .map(|s| {
            codec::encode(s, &model.tag_vocab, &model.config.codec).map(|t| (s.id, t))
        })
        .collect::<Result<_>>()?;

    let mut best: Option<(usize, f64, Vec<Tensor>)> = None;
    let mut outcome = TrainOutcome {
        epochs_run: 0,
        steps: 0,
        stopped_early: false,
        best_dev: None,
        final_train_report: None,
    };

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train_set.sentences.len()).collect();
        order.shuffle(&mut shuffle_rng);

        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let batch =
                Batch::from_sentences(chunk.iter().map(|&i| &train_set.sentences[i]).collect());
            let mut tape = Tape::new();
            let bind = model.store.bind(&mut tape);
            let mut outs = Vec::with_capacity(batch.sentences.len());
            for (row, (mask, s)) in
                batch.rows.iter().zip(batch.mask.iter().zip(&batch.sentences))
            {
                let real_len = mask.iter().filter(|&&m| m).count();
                outs.push(model.forward_sentence(
                    &mut tape,
                    &bind,
                    row,
                    real_len,
                    features.for_sentence(s.id),
                    ForwardMode::Train,
                    true,
                    &mut dropout_rng,
                )?);
            }
            let golds: Vec<&codec::TagTable> =
                batch.sentences.iter().map(|s| &gold_tables[&s.id]).collect();
            let loss = model.loss(&mut tape, &outs, &golds)?;
            let loss_val = tape.data(loss)[0];
            opt.step += 1;
            let lr = cfg.learning_rate(opt.step);
            if !loss_val.is_finite() {
                return Err(Error::NonFinite {
                    step: opt.step,
                    lr,
                    batch_ids: batch.ids.clone(),
                });
            }
            tape.backward(loss)?;

            let mut grads: Vec<Option<Vec<f64>>> = model
                .store
                .iter()
                .map(|(id, _, _, trainable)| {
                    if trainable {
                        tape.grad(bind[id]).map(|g| g.to_vec())
                    } else {
                        None
                    }
                })
                .collect();
            let norm = clip_global_norm(&mut grads, cfg.clip_norm);
            opt.apply(model, &grads, lr, cfg);

            if let Some(log) = log.as_mut() {
                let rec = json!({
                    "kind": "step",
                    "step": opt.step,
                    "epoch": epoch,
                    "lr": lr,
                    "loss": loss_val,
                    "grad_norm": norm,
                    "batch": batch.ids,
                });
                writeln!(log, "{}", rec)?;
            }
        }
        outcome.epochs_run = epoch + 1;
        outcome.steps = opt.step;

        if let Some(dev) = dev_set {
            let eval = evaluate(model, dev, features, Schedule::Naive)?;
            let sel = (eval.report.micro.ner.f1 + eval.report.micro.re.f1) / 2.0;
            let is_best = best.as_ref().map(|(_, s, _)| sel > *s).unwrap_or(true);
            if is_best {
                let snapshot = model.store.iter().map(|(_, _, t, _)| t.clone()).collect();
                best = Some((epoch, sel, snapshot));
            }
            if let Some(log) = log.as_mut() {
                let rec = json!({
                    "kind": "dev",
                    "epoch": epoch,
                    "ner_f1": eval.report.micro.ner.f1,
                    "re_f1": eval.report.micro.re.f1,
                    "re_plus_f1": eval.report.micro.re_plus.f1,
                    "selection": sel,
                    "best": is_best,
                });
                writeln!(log, "{}", rec)?;
            }
        }

        if let Some(target) = cfg.target_train_f1 {
            let eval = evaluate(model, train_set, features, Schedule::Naive)?;
            let ner = eval.report.micro.ner.f1;
            let rep = eval.report.micro.re_plus.f1;
            if let Some(log) = log.as_mut() {
                let rec = json!({
                    "kind": "train_eval",
                    "epoch": epoch,
                    "ner_f1": ner,
                    "re_plus_f1": rep,
                });
                writeln!(log, "{}", rec)?;
            }
            if ner >= target && rep >= target {
                outcome.stopped_early = true;
                outcome.final_train_report = Some(eval.report);
                break;
            }
            outcome.final_train_report = Some(eval.report);
        }
    }

    if let Some((epoch, sel, snapshot)) = best {
        let ids: Vec<ParamId> = model.store.iter().map(|(id, _, _, _)| id).collect();
        for (id, value) in ids.into_iter().zip(snapshot) {
            model.store.set_value(id, value);
        }
        outcome.best_dev = Some((epoch, sel));
    }
    Ok(outcome)
}

// ── checkpointing ───────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    config: ModelConfig,
    word_vocab: Vocabulary,
    char_vocab: Vocabulary,
    tag_vocab: TagVocab,
    params: Vec<ParamEntry>,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

/// Versioned container: JSON header (config, vocabularies, parameter
/// manifest) followed by raw little-endian f64 parameter blocks in
/// manifest order.
pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let header = CheckpointHeader {
        version: CHECKPOINT_VERSION,
        config: model.config.clone(),
        word_vocab: model.word_vocab.clone(),
        char_vocab: model.char_vocab.clone(),
        tag_vocab: model.tag_vocab.clone(),
        params: model
            .store
            .iter()
            .map(|(_, name, t, _)| ParamEntry { name: name.to_string(), shape: t.shape().to_vec() })
            .collect(),
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    w.write_all(&header_bytes)?;
    for (_, _, t, _) in model.store.iter() {
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format("checkpoint too short for magic".into()))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint file".into()));
    }
    let mut len_bytes = [0u8; 8];
    r.read_exact(&mut len_bytes)
        .map_err(|_| Error::Format("checkpoint too short for header".into()))?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes)
        .map_err(|_| Error::Corruption("checkpoint header truncated".into()))?;
    let mut header: CheckpointHeader = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::Format(format!("checkpoint header: {}", e)))?;
    if header.version != CHECKPOINT_VERSION {
        return Err(Error::Version(format!(
            "checkpoint version {} but this build reads {}",
            header.version, CHECKPOINT_VERSION
        )));
    }
    header.word_vocab.reindex();
    header.char_vocab.reindex();

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut model = Model::new(
        header.config,
        header.word_vocab,
        header.char_vocab,
        header.tag_vocab,
        None,
        &mut rng,
    )?;

    // the manifest must match the freshly-built store exactly
    let entries: Vec<(ParamId, String, Vec<usize>)> = model
        .store
        .iter()
        .map(|(id, name, t, _)| (id, name.to_string(), t.shape().to_vec()))
        .collect();
    if entries.len() != header.params.len() {
        return Err(Error::Version(format!(
            "checkpoint has {} parameters, model expects {}",
            header.params.len(),
            entries.len()
        )));
    }
    for ((_, name, shape), entry) in entries.iter().zip(&header.params) {
        if name != &entry.name || shape != &entry.shape {
            return Err(Error::Version(format!(
                "checkpoint parameter {} {:?} does not match model {} {:?}",
                entry.name, entry.shape, name, shape
            )));
        }
    }
    for (id, _, shape) in entries {
        let numel: usize = shape.iter().product();
        let mut bytes = vec![0u8; numel * 8];
        r.read_exact(&mut bytes)
            .map_err(|_| Error::Corruption("checkpoint parameter block truncated".into()))?;
        let data: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
            .collect();
        model.store.set_value(id, Tensor::new(shape, data)?);
    }
    Ok(model)
}
