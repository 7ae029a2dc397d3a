//! One pretraining step: masked reconstruction plus distillation for the
//! student, then a policy-gradient update for the AMN.

use super::data::Batch;
use super::losses::{distill_loss, recon_loss};
use super::optim::clip_global_norm;
use super::{streams, MaskingStrategy, TrainConfig, TrainState};
use crate::amn::{mask_log_prob, policy_loss, random_mask, sample_mask};
use crate::error::{Error, Result};
use crate::params::Bound;
use crate::tensor::{Gradients, Real, RngStream, Tensor, Var};

/// Diagnostics of a single step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub loss_pixel: f64,
    pub loss_corr: f64,
    pub loss_distill: f64,
    pub loss_student: f64,
    pub loss_pg: f64,
    /// Pre-clip global norms.
    pub grad_norm_student: f64,
    pub grad_norm_amn: f64,
    pub mask_ratio_observed: f64,
}

fn non_finite(what: &str, state_epoch: usize, step: u64) -> Error {
    Error::NonFinite {
        what: what.to_string(),
        epoch: state_epoch,
        step: step as usize,
    }
}

fn collect<F: Real>(grads: &Gradients<F>, p: &Bound<'_, F>, ids: &[crate::params::ParamId]) -> Vec<Tensor<F>> {
    ids.iter().map(|&id| grads.wrt(p[id])).collect()
}

/// Fails unless every listed parameter has an exactly zero gradient.
fn assert_isolated<F: Real>(
    grads: &Gradients<F>,
    p: &Bound<'_, F>,
    ids: &[crate::params::ParamId],
    what: &str,
) -> Result<()> {
    for &id in ids {
        let v = p[id];
        if grads.reaches(v) && grads.wrt(v).max_abs() != F::zero() {
            return Err(Error::invalid(format!("gradient leaked into {what}")));
        }
    }
    Ok(())
}

/// Runs one step on `batch` with the given learning rates and advances the
/// step counter. A non-finite loss or gradient aborts before any update.
pub fn pretrain_step<F: Real>(
    state: &mut TrainState<F>,
    cfg: &TrainConfig,
    batch: &Batch<F>,
    lr_student: f64,
    lr_amn: f64,
) -> Result<StepRecord> {
    let pc = &cfg.pretrain;
    let w = &cfg.loss;
    let step = state.step;
    let mut mask_rng = RngStream::at(cfg.seed, streams::MASK, step);
    let mut drop_rng = RngStream::at(cfg.seed, streams::DROPOUT, step);

    let g = crate::tensor::Graph::new();
    let p = state.store.bind(&g);
    let patches = g.constant(batch.patches.clone());
    let b = batch.patches.shape()[0];
    let tokens = batch.patches.shape()[1];

    let (mask, logits): (_, Option<Var<'_, F>>) = match pc.masking {
        MaskingStrategy::Adaptive => {
            let scores = state.amn.importance_scores(&p, patches)?;
            let s = sample_mask(scores, pc.mask_ratio, cfg.amn.temperature, &mut mask_rng)?;
            (s.mask, Some(s.logits))
        }
        MaskingStrategy::Random => (random_mask(b, tokens, pc.mask_ratio, &mut mask_rng)?, None),
    };

    let out = state.student.forward_pretrain(&p, patches, &mask, &mut drop_rng, true)?;
    let recon = recon_loss(out.reconstruction, out.target)?;
    let dist = distill_loss(out.waveform, g.constant(batch.teacher.clone()))?;
    let loss = recon
        .pixel
        .scale(w.lambda_mae)
        .add(recon.corr.scale(w.lambda_mae * w.lambda_corr))?
        .add(dist.mean().scale(w.lambda_dist))?;

    let loss_student = loss.value().item().as_f64();
    if !loss_student.is_finite() {
        return Err(non_finite("student loss", state.epoch, step));
    }
    let grads = g.backward(loss)?;
    assert_isolated(&grads, &p, &state.opt_amn.ids, "AMN parameters from the student loss")?;
    let mut gs = collect(&grads, &p, &state.opt_student.ids);
    if gs.iter().any(|t| !t.is_finite()) {
        return Err(non_finite("student gradient", state.epoch, step));
    }
    drop(grads);

    let rewards: Vec<f64> = dist.value().to_f64_vec();
    let mut loss_pg = 0.0;
    let mut grad_norm_amn = 0.0;
    let mut amn_update = None;
    if let (Some(logits), false) = (logits, pc.freeze_amn) {
        let logp = mask_log_prob(logits, &mask)?;
        let pl = policy_loss(logp, &rewards, w.beta, w.alpha)?;
        loss_pg = pl.loss.value().item().as_f64();
        if !loss_pg.is_finite() {
            return Err(non_finite("policy loss", state.epoch, step));
        }
        let grads = g.backward(pl.loss)?;
        assert_isolated(&grads, &p, &state.opt_student.ids, "student parameters from the policy loss")?;
        let mut ga = collect(&grads, &p, &state.opt_amn.ids);
        if ga.iter().any(|t| !t.is_finite()) {
            return Err(non_finite("AMN gradient", state.epoch, step));
        }
        grad_norm_amn = clip_global_norm(&mut ga, pc.clip_norm);
        amn_update = Some(ga);
    }

    let grad_norm_student = clip_global_norm(&mut gs, pc.clip_norm);
    state.opt_student.apply(&mut state.store, &gs, lr_student)?;
    if let Some(ga) = amn_update {
        state.opt_amn.apply(&mut state.store, &ga, lr_amn)?;
    }
    state.step += 1;

    Ok(StepRecord {
        loss_pixel: recon.pixel.value().item().as_f64(),
        loss_corr: recon.corr.value().item().as_f64(),
        loss_distill: rewards.iter().sum::<f64>() / rewards.len().max(1) as f64,
        loss_student,
        loss_pg,
        grad_norm_student,
        grad_norm_amn,
        mask_ratio_observed: mask.observed_ratio(),
    })
}
