//! Supervised fine-tuning of the encoder and rPPG head with the AMN bypassed.

use super::data::{permutation, window_starts, Prepared};
use super::eval::evaluate;
use super::losses::{finetune_loss, SoftHrBasis};
use super::optim::{clip_global_norm, lr_at, AdamW};
use super::{streams, TrainConfig, TrainState};
use crate::error::{Error, Result};
use crate::params::{ParamEntry, ParamId};
use crate::student::Student;
use crate::tensor::{Graph, Real, RngStream, Tensor};
use crate::video::VideoClip;

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneEpoch {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub val_mae: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneReport {
    pub history: Vec<FinetuneEpoch>,
    pub best_epoch: Option<usize>,
    pub best_val_mae: f64,
    pub stopped_early: bool,
}

/// Whether a parameter is updated during fine-tuning.
pub fn finetune_trainable<F: Real>(e: &ParamEntry<F>) -> bool {
    e.name.starts_with("student.") && !Student::decoder_prefixes().iter().any(|p| e.name.starts_with(p))
}

/// Whole-clip batch: windows of every clip are predicted and concatenated so
/// the loss sees the full clip.
fn clip_batch<F: Real>(student: &Student, set: &[Prepared], idx: &[usize]) -> Result<(Tensor<F>, Tensor<F>, Vec<f64>, usize)> {
    let tub = &student.cfg.tubelet;
    let len = tub.frames;
    let total = set[idx[0]].input.frames();
    let starts = window_starts(total, len, len);
    if starts.len() * len != total {
        return Err(Error::invalid(format!(
            "fine-tuning needs clips whose length ({total}) is a multiple of the window ({len})"
        )));
    }
    let mut windows: Vec<VideoClip> = Vec::with_capacity(idx.len() * starts.len());
    let mut truth = Vec::with_capacity(idx.len() * total);
    let mut hr = Vec::with_capacity(idx.len());
    for &i in idx {
        let p = &set[i];
        if p.input.frames() != total {
            return Err(Error::invalid("fine-tuning clips differ in length"));
        }
        for &s in &starts {
            windows.push(p.input.slice_frames(s, len)?);
        }
        truth.extend(p.truth.iter().map(|&v| F::c(v)));
        hr.push(p.hr_ref);
    }
    let views: Vec<&VideoClip> = windows.iter().collect();
    Ok((tub.patches(&views)?, Tensor::new(&[idx.len(), total], truth)?, hr, total))
}

/// Fine-tunes `state` in place and restores the parameters with the best
/// validation MAE.
pub fn finetune<F: Real>(
    state: &mut TrainState<F>,
    cfg: &TrainConfig,
    train: &[Prepared],
    val: &[Prepared],
) -> Result<FinetuneReport> {
    let fc = &cfg.finetune;
    if train.is_empty() {
        return Err(Error::invalid("fine-tuning needs at least one clip"));
    }
    let ids: Vec<ParamId> = state
        .store
        .ids()
        .filter(|&id| finetune_trainable(state.store.entry(id)))
        .collect();
    let mut opt = AdamW::new(fc.adamw.clone(), &state.store, ids);
    let fs = train[0].input.fps;
    let basis = SoftHrBasis::<F>::new(train[0].input.frames(), fs)?;
    let steps_per_epoch = train.len().div_ceil(fc.batch_size);

    let mut report = FinetuneReport {
        history: Vec::new(),
        best_epoch: None,
        best_val_mae: f64::INFINITY,
        stopped_early: false,
    };
    let mut best = None;
    let mut wait = 0;
    let mut step = 0u64;
    for epoch in 0..fc.epochs {
        let order = permutation(train.len(), &mut RngStream::at(cfg.seed, streams::FT_SHUFFLE, epoch as u64));
        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        for (s, chunk) in order.chunks(fc.batch_size).enumerate() {
            let (patches, truth, hr, total) = clip_batch::<F>(&state.student, train, chunk)?;
            lr = lr_at(epoch as f64 + (s as f64 + 0.5) / steps_per_epoch as f64, fc.lr, 0.0, fc.epochs as f64);
            let g = Graph::new();
            let p = state.store.bind_where(&g, finetune_trainable);
            let mut rng = RngStream::at(cfg.seed, streams::FT_DROPOUT, step);
            let pred = state
                .student
                .forward_full(&p, g.constant(patches), &mut rng, true)?
                .reshape(&[chunk.len(), total])?;
            let loss = finetune_loss(pred, g.constant(truth), &hr, cfg.loss.lambda_hr, &basis)?.mean();
            let lv = loss.value().item().as_f64();
            if !lv.is_finite() {
                return Err(Error::NonFinite {
                    what: "fine-tuning loss".into(),
                    epoch,
                    step: step as usize,
                });
            }
            let grads = g.backward(loss)?;
            let mut gs: Vec<Tensor<F>> = opt.ids.iter().map(|&id| grads.wrt(p[id])).collect();
            clip_global_norm(&mut gs, fc.clip_norm);
            opt.apply(&mut state.store, &gs, lr)?;
            loss_sum += lv;
            step += 1;
        }
        let val_mae = if val.is_empty() {
            f64::NAN
        } else {
            evaluate(&state.student, &state.store, val)?.metrics.mae
        };
        report.history.push(FinetuneEpoch {
            epoch,
            lr,
            loss: loss_sum / steps_per_epoch as f64,
            val_mae,
        });
        log::debug!("finetune epoch {epoch}: loss {:.4}, val MAE {val_mae:.2}", loss_sum / steps_per_epoch as f64);
        if val.is_empty() {
            continue;
        }
        if val_mae < report.best_val_mae - fc.min_delta || report.best_epoch.is_none() {
            report.best_val_mae = val_mae;
            report.best_epoch = Some(epoch);
            best = Some(state.store.clone());
            wait = 0;
        } else {
            wait += 1;
            if wait >= fc.patience {
                report.stopped_early = true;
                break;
            }
        }
    }
    if let Some(store) = best {
        state.store = store;
    }
    Ok(report)
}
