//! Per-utterance SGD with validation-driven learning-rate decay.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::Tensor;
use crate::config::{ModelConfig, TrainConfig};
use crate::data::{CorpusPer, Utterance};
use crate::decoder::decode_joint;
use crate::error::{Error, Result};
use crate::lattice::Vocabulary;
use crate::model::Model;
use crate::params::ModelParams;
use crate::segcrf::{log_clamped, log_partition};

/// `p <- p - lr * g` for every parameter. Nothing is modified unless every
/// gradient is present, shaped like its parameter and finite.
pub fn sgd_step(
    params: &mut ModelParams,
    grads: &BTreeMap<String, Tensor>,
    lr: f64,
    utterance: &str,
) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::Invalid(format!(
            "{} gradients for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    for (name, p) in params.iter() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::Invalid(format!("no gradient for {name}")))?;
        if g.shape() != p.shape() {
            return Err(Error::Invalid(format!(
                "gradient for {name} has shape {:?}, parameter {:?}",
                g.shape(),
                p.shape()
            )));
        }
        if !g.all_finite() {
            return Err(Error::NonFiniteGradient(utterance.to_string()));
        }
    }
    for (name, p) in params.iter_mut() {
        for (w, g) in p.data_mut().iter_mut().zip(grads[name].data()) {
            *w -= lr * g;
        }
    }
    Ok(())
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_gradients(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = grads.values().map(Tensor::squared_norm).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrDecision {
    pub lr: f64,
    pub stop: bool,
}

/// Decides the learning rate for the next epoch from the validation error
/// history. An epoch improves when its error is strictly below every
/// earlier one; every `patience` consecutive non-improving epochs divide
/// the rate by `decay_factor`.
pub fn schedule_lr(history: &[f64], lr: f64, cfg: &TrainConfig) -> LrDecision {
    let mut stale = 0;
    for i in (1..history.len()).rev() {
        let best_before = history[..i].iter().copied().fold(f64::INFINITY, f64::min);
        if history[i] < best_before {
            break;
        }
        stale += 1;
    }
    let lr = if stale > 0 && stale % cfg.patience == 0 {
        lr / cfg.decay_factor
    } else {
        lr
    };
    LrDecision {
        lr,
        stop: lr < cfg.min_lr() || history.len() >= cfg.max_epochs,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training loss over the utterances updated this epoch.
    pub train_loss: f64,
    pub valid_loss: f64,
    pub valid_per: f64,
    /// Learning rate used during this epoch.
    pub lr: f64,
    pub wall_secs: f64,
}

impl EpochRecord {
    /// One `key=value` record per epoch.
    pub fn to_line(&self) -> String {
        format!(
            "epoch={} train_loss={:.6} valid_loss={:.6} valid_per={:.6} lr={} wall_secs={:.3}",
            self.epoch, self.train_loss, self.valid_loss, self.valid_per, self.lr, self.wall_secs
        )
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were kept (lowest validation error).
    pub best_epoch: usize,
    /// Training utterances skipped because no segmentation fits their labels.
    pub skipped_infeasible: usize,
    pub clip_norm: f64,
    /// Updates whose gradient norm exceeded `clip_norm`.
    pub clipped_steps: usize,
}

impl TrainReport {
    pub fn best(&self) -> Option<&EpochRecord> {
        self.epochs.iter().find(|e| e.epoch == self.best_epoch)
    }

    /// Tab-separated table with a header row; wall time is left out so
    /// identical runs give identical tables.
    pub fn loss_table(&self) -> String {
        let mut out = String::from("epoch\ttrain_loss\tvalid_loss\tvalid_per\tlr\n");
        for e in &self.epochs {
            let _ = writeln!(
                out,
                "{}\t{:e}\t{:e}\t{:e}\t{:e}",
                e.epoch, e.train_loss, e.valid_loss, e.valid_per, e.lr
            );
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub per: f64,
    /// Utterances left out of the loss mean because they are infeasible.
    pub infeasible: usize,
}

/// Mean loss and corpus error rate (joint decoding) in evaluation mode.
pub fn evaluate(model: &Model, data: &[Utterance]) -> Result<Evaluation> {
    let parts = data
        .par_iter()
        .map(|u| {
            let lattice = model.lattice(&u.frames)?;
            let hyp = decode_joint(&lattice).labels;
            let mut per = CorpusPer::default();
            per.add(hyp.as_slice(), u.labels.as_slice())?;
            let loss = if model.is_feasible(u.frames.len(), &u.labels) {
                Some(log_partition(&lattice) - log_clamped(&lattice, &u.labels)?)
            } else {
                None
            };
            Ok((loss, per))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = 0.0;
    let mut count = 0;
    let mut per = CorpusPer::default();
    for (loss, p) in parts {
        if let Some(l) = loss {
            total += l;
            count += 1;
        }
        per = per.merge(p);
    }
    Ok(Evaluation {
        loss: if count > 0 { total / count as f64 } else { f64::NAN },
        per: per.rate(),
        infeasible: data.len() - count,
    })
}

/// Everything `train` reports back.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: Model,
    pub last: Model,
    pub report: TrainReport,
}

pub fn train(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    vocab: &Vocabulary,
    train_set: &[Utterance],
    valid_set: &[Utterance],
) -> Result<TrainOutcome> {
    train_with(model_cfg, cfg, vocab, train_set, valid_set, |_, _, _| Ok(()))
}

/// Like [`train`], calling `on_epoch(record, model, is_best)` after each
/// epoch's validation.
pub fn train_with(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    vocab: &Vocabulary,
    train_set: &[Utterance],
    valid_set: &[Utterance],
    mut on_epoch: impl FnMut(&EpochRecord, &Model, bool) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model_cfg.validate()?;
    let first = train_set
        .first()
        .ok_or_else(|| Error::Invalid("training set is empty".into()))?;
    if valid_set.is_empty() {
        return Err(Error::Invalid("validation set is empty".into()));
    }
    let input_dim = first.frames.dim();
    let mut model = Model::new(model_cfg.clone(), input_dim, vocab.clone(), cfg.init_scale, cfg.seed)?;

    let mut usable = Vec::with_capacity(train_set.len());
    for u in train_set {
        if u.frames.dim() != input_dim {
            return Err(Error::Invalid(format!(
                "utterance {} has frame dimension {}, expected {input_dim}",
                u.id,
                u.frames.dim()
            )));
        }
        if model.is_feasible(u.frames.len(), &u.labels) {
            usable.push(u);
        } else {
            log::warn!(
                "skipping utterance {}: {} labels cannot fit {} encoder frames with clamp {}",
                u.id,
                u.labels.len(),
                model.output_len(u.frames.len()),
                model.clamp_len()
            );
        }
    }
    if usable.is_empty() {
        return Err(Error::Invalid("no feasible training utterance".into()));
    }
    let mut report = TrainReport {
        skipped_infeasible: train_set.len() - usable.len(),
        clip_norm: cfg.clip_norm,
        ..TrainReport::default()
    };

    let dropout = model_cfg.encoder.dropout_rate > 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..usable.len()).collect();
    let mut lr = cfg.lr_init;
    let mut history = Vec::new();
    let mut best = model.clone();
    let mut best_per = f64::INFINITY;

    for epoch in 1..=cfg.max_epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch) {
            let seeds: Vec<u64> = batch.iter().map(|_| rng.random()).collect();
            let results = batch
                .par_iter()
                .zip(&seeds)
                .map(|(&i, &seed)| {
                    let u = usable[i];
                    let (loss, grads) = model.loss_and_gradients(&u.frames, &u.labels, dropout.then_some(seed))?;
                    let mut grads = grads.into_params();
                    let norm = clip_gradients(&mut grads, cfg.clip_norm);
                    Ok((loss, grads, norm))
                })
                .collect::<Result<Vec<_>>>()?;
            let mut total: Option<BTreeMap<String, Tensor>> = None;
            for (loss, grads, norm) in results {
                loss_sum += loss;
                if norm > cfg.clip_norm {
                    report.clipped_steps += 1;
                }
                match &mut total {
                    None => total = Some(grads),
                    Some(acc) => {
                        for (name, g) in grads {
                            let a = acc.get_mut(&name).expect("same parameter set");
                            for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                                *x += y;
                            }
                        }
                    }
                }
            }
            let ids: Vec<&str> = batch.iter().map(|&i| usable[i].id.as_str()).collect();
            let total = total.expect("non-empty batch");
            sgd_step(&mut model.params, &total, lr / batch.len() as f64, &ids.join(","))?;
        }

        let eval = evaluate(&model, valid_set)?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / usable.len() as f64,
            valid_loss: eval.loss,
            valid_per: eval.per,
            lr,
            wall_secs: start.elapsed().as_secs_f64(),
        };
        let is_best = eval.per < best_per;
        if is_best {
            best_per = eval.per;
            best = model.clone();
            report.best_epoch = epoch;
        }
        log::info!("{}", record.to_line());
        on_epoch(&record, &model, is_best)?;
        report.epochs.push(record);
        history.push(eval.per);
        let next = schedule_lr(&history, lr, cfg);
        if next.stop {
            break;
        }
        lr = next.lr;
    }
    Ok(TrainOutcome {
        best,
        last: model,
        report,
    })
}
