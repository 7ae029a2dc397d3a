//! Adaptive masking network: token importance scores, Gumbel top-k mask
//! sampling and the policy-gradient objective.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{visible_count, VisibilityMask};
use crate::params::{Bound, ParamId, ParamStore};
use crate::ssm::{MambaBlock, NORM_EPS};
use crate::student::sinusoidal_table;
use crate::tensor::{Real, RngStream, Tensor, Var};
use crate::video::TubeletConfig;

/// Logits are clamped to `[-LOGIT_CLAMP, LOGIT_CLAMP]` before sampling.
pub const LOGIT_CLAMP: f64 = 10.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AmnConfig {
    pub dim: usize,
    pub blocks: usize,
    pub state: usize,
    pub temperature: f64,
    pub prior_amplitude: f64,
    /// Prior standard deviation as a fraction of the grid width.
    pub prior_sigma: f64,
}

impl Default for AmnConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            blocks: 2,
            state: 8,
            temperature: 1.0,
            prior_amplitude: 1.0,
            prior_sigma: 0.25,
        }
    }
}

/// Fixed centre-favouring Gaussian over the spatial grid, repeated over time.
pub fn spatial_prior(tubelet: &TubeletConfig, amplitude: f64, sigma_frac: f64) -> Vec<f64> {
    let (gt, gh, gw) = tubelet.grid();
    let sigma = (sigma_frac * gw as f64).max(1e-6);
    let (cy, cx) = ((gh as f64 - 1.0) / 2.0, (gw as f64 - 1.0) / 2.0);
    let mut out = Vec::with_capacity(gt * gh * gw);
    for _ in 0..gt {
        for y in 0..gh {
            for x in 0..gw {
                let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                out.push(amplitude * (-d2 / (2.0 * sigma * sigma)).exp());
            }
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct Amn {
    pub cfg: AmnConfig,
    pub tubelet: TubeletConfig,
    pub patch_w: ParamId,
    pub patch_b: ParamId,
    pub blocks: Vec<MambaBlock>,
    pub norm: (ParamId, ParamId),
    pub head_w: ParamId,
    pub head_b: ParamId,
    pub prior: Vec<f64>,
}

impl Amn {
    /// The importance head starts at zero so initial scores equal the prior.
    pub fn init<F: Real>(
        cfg: &AmnConfig,
        tubelet: &TubeletConfig,
        store: &mut ParamStore<F>,
        rng: &mut RngStream,
    ) -> Result<Self> {
        tubelet.validate()?;
        if cfg.dim == 0 || cfg.state == 0 {
            return Err(Error::invalid("AMN widths must be positive"));
        }
        if !(cfg.temperature > 0.0) {
            return Err(Error::invalid("temperature must be positive"));
        }
        let d = cfg.dim;
        let patch_w = store.add_linear("amn.patch.w", tubelet.patch_len(), d, rng);
        let patch_b = store.add_bias("amn.patch.b", d);
        let blocks = (0..cfg.blocks)
            .map(|i| MambaBlock::init(store, &format!("amn.block.{i}"), d, d, cfg.state, rng))
            .collect();
        let norm = store.add_norm("amn.norm", d);
        let head_w = store.add("amn.head.w", Tensor::zeros(&[d, 1]), crate::params::ParamRole::Weight);
        let head_b = store.add_bias("amn.head.b", 1);
        Ok(Self {
            cfg: cfg.clone(),
            tubelet: tubelet.clone(),
            patch_w,
            patch_b,
            blocks,
            norm,
            head_w,
            head_b,
            prior: spatial_prior(tubelet, cfg.prior_amplitude, cfg.prior_sigma),
        })
    }

    /// Scores `[B, N]` for patches `[B, N, P]`.
    pub fn importance_scores<'g, F: Real>(&self, p: &Bound<'g, F>, patches: Var<'g, F>) -> Result<Var<'g, F>> {
        let s = patches.shape();
        let (n, pl) = (self.tubelet.tokens(), self.tubelet.patch_len());
        if s.len() != 3 || s[1] != n || s[2] != pl {
            return Err(Error::ShapeMismatch {
                op: "amn::importance_scores",
                lhs: s,
                rhs: vec![0, n, pl],
            });
        }
        let g = patches.graph();
        let pos = g.constant(sinusoidal_table(n, self.cfg.dim));
        let mut h = patches.matmul(p[self.patch_w])?.add(p[self.patch_b])?.add(pos)?;
        for block in &self.blocks {
            h = block.forward(p, h)?;
        }
        let prior = g.constant(Tensor::from_f64(&[n], &self.prior)?);
        h.layer_norm(2, p[self.norm.0], p[self.norm.1], NORM_EPS)?
            .matmul(p[self.head_w])?
            .add(p[self.head_b])?
            .reshape(&[s[0], n])?
            .add(prior)
    }
}

/// A sampled mask with the logits it was drawn from.
pub struct MaskSample<'g, F: Real> {
    pub mask: VisibilityMask,
    /// `clamp(S / τ, -10, 10)`, still attached to the graph.
    pub logits: Var<'g, F>,
}

/// `clamp(scores / τ, -10, 10)`.
pub fn mask_logits<'g, F: Real>(scores: Var<'g, F>, temperature: f64) -> Result<Var<'g, F>> {
    if !(temperature > 0.0) {
        return Err(Error::invalid("temperature must be positive"));
    }
    Ok(scores.scale(1.0 / temperature).clamp(-LOGIT_CLAMP, LOGIT_CLAMP))
}

/// Gumbel top-k over `[B, N]` logits: the `visible` largest perturbed logits
/// stay visible, ties going to the lower index.
pub fn gumbel_top_k<F: Real>(logits: &Tensor<F>, visible: usize, rng: &mut RngStream) -> Result<VisibilityMask> {
    if logits.rank() != 2 {
        return Err(Error::invalid(format!("logits must be [B, N], got {:?}", logits.shape())));
    }
    let (b, n) = (logits.shape()[0], logits.shape()[1]);
    if visible == 0 || visible >= n {
        return Err(Error::DegenerateMask { visible, tokens: n });
    }
    let mut sets = Vec::with_capacity(b);
    for row in logits.data().chunks(n) {
        let mut keyed: Vec<(f64, usize)> = row
            .iter()
            .enumerate()
            .map(|(i, &l)| (l.as_f64() + rng.gumbel(), i))
            .collect();
        keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        sets.push(keyed[..visible].iter().map(|&(_, i)| i).collect());
    }
    VisibilityMask::from_visible(n, sets)
}

/// Scores → clamped logits → Gumbel top-k mask keeping `⌊N(1-ρ)⌋` tokens.
pub fn sample_mask<'g, F: Real>(
    scores: Var<'g, F>,
    ratio: f64,
    temperature: f64,
    rng: &mut RngStream,
) -> Result<MaskSample<'g, F>> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::invalid(format!("mask ratio {ratio} outside (0, 1)")));
    }
    let logits = mask_logits(scores, temperature)?;
    let n = logits.shape()[1];
    let mask = gumbel_top_k(&logits.value(), visible_count(n, ratio), rng)?;
    Ok(MaskSample { mask, logits })
}

/// Uniformly random mask with the same cardinality rule.
pub fn random_mask(batch: usize, tokens: usize, ratio: f64, rng: &mut RngStream) -> Result<VisibilityMask> {
    gumbel_top_k(&Tensor::<f64>::zeros(&[batch, tokens]), visible_count(tokens, ratio), rng)
}

/// Per-sample `Σ_{visible} log softmax(logits)`, shape `[B]`.
pub fn mask_log_prob<'g, F: Real>(logits: Var<'g, F>, mask: &VisibilityMask) -> Result<Var<'g, F>> {
    let ind = logits.graph().constant(mask.visible_indicator());
    logits.log_softmax(1)?.mul(ind)?.sum_axes(&[1], false)
}

pub struct PolicyLoss<'g, F: Real> {
    pub loss: Var<'g, F>,
    pub advantages: Vec<f64>,
    /// Set when the batch has a single sample, so every advantage is zero.
    pub degenerate_batch: bool,
}

/// `-mean(log_probs · (r - mean r)·β) · α`, with rewards as constants.
pub fn policy_loss<'g, F: Real>(
    log_probs: Var<'g, F>,
    rewards: &[f64],
    beta: f64,
    alpha: f64,
) -> Result<PolicyLoss<'g, F>> {
    if log_probs.shape() != [rewards.len()] {
        return Err(Error::ShapeMismatch {
            op: "policy_loss",
            lhs: log_probs.shape(),
            rhs: vec![rewards.len()],
        });
    }
    let degenerate_batch = rewards.len() == 1;
    if degenerate_batch {
        log::warn!("policy loss with batch size 1: advantage is identically zero");
    }
    // shifted mean: identical rewards give a baseline equal to them exactly
    let r0 = rewards.first().copied().unwrap_or(0.0);
    let baseline = r0 + rewards.iter().map(|r| r - r0).sum::<f64>() / rewards.len().max(1) as f64;
    let advantages: Vec<f64> = rewards.iter().map(|r| (r - baseline) * beta).collect();
    let a = log_probs.graph().constant(Tensor::vector(&advantages));
    let loss = log_probs.mul(a)?.mean().scale(-alpha);
    Ok(PolicyLoss {
        loss,
        advantages,
        degenerate_batch,
    })
}
