//! Clip sets, per-epoch regime preparation, windowing and batch assembly.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::{streams, Regime, TrainConfig};
use crate::error::{Error, Result};
use crate::signal::estimate_hr;
use crate::synthdata::{apply_occlusions, domain_shift, gen_clip, occlusion_rng, ClipMeta, CurriculumSchedule, SceneSpec};
use crate::teacher::{diff_normalize, teacher_forward, TeacherConfig};
use crate::tensor::{Real, RngStream, Tensor};
use crate::video::{TubeletConfig, VideoClip};

/// What the student sees.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputMode {
    /// Pixel intensities as rendered.
    Raw,
    /// Frame-difference ratios, with a zero frame prepended to keep `T`.
    Diff,
}

/// A clip with its generation record and reference heart rate.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledClip {
    pub clip: VideoClip,
    pub meta: ClipMeta,
    /// Spectral HR of the ground-truth pulse over the whole clip.
    pub hr_ref: f64,
}

impl LabeledClip {
    pub fn new(clip: VideoClip, meta: ClipMeta) -> Result<Self> {
        if meta.bvp.len() != clip.frames() {
            return Err(Error::invalid(format!(
                "clip {} has {} frames but {} pulse samples",
                meta.seed,
                clip.frames(),
                meta.bvp.len()
            )));
        }
        let hr_ref = estimate_hr(&meta.bvp, clip.fps)?;
        Ok(Self { clip, meta, hr_ref })
    }

    pub fn generate(seed: u64, spec: &SceneSpec) -> Result<Self> {
        let (clip, meta) = gen_clip(seed, spec)?;
        Self::new(clip, meta)
    }
}

pub fn generate_set(seeds: Range<u64>, spec: &SceneSpec) -> Result<Vec<LabeledClip>> {
    seeds.map(|s| LabeledClip::generate(s, spec)).collect()
}

/// Student input for `clip` under `mode`.
pub fn student_input(clip: &VideoClip, mode: InputMode) -> Result<VideoClip> {
    match mode {
        InputMode::Raw => Ok(clip.clone()),
        InputMode::Diff => {
            let d = diff_normalize(clip)?;
            let (c, t, h, w) = (clip.channels(), clip.frames(), clip.height(), clip.width());
            let plane = h * w;
            let mut px = vec![0f32; c * t * plane];
            for ch in 0..c {
                let src = &d.data()[ch * (t - 1) * plane..(ch + 1) * (t - 1) * plane];
                px[(ch * t + 1) * plane..(ch + 1) * t * plane].copy_from_slice(src);
            }
            VideoClip::new(Tensor::new(&[c, t, h, w], px)?, clip.fps)
        }
    }
}

/// A clip after regime augmentation, ready for windowing.
#[derive(Clone, Debug, PartialEq)]
pub struct Prepared {
    pub input: VideoClip,
    pub teacher: Vec<f64>,
    pub truth: Vec<f64>,
    pub hr_ref: f64,
    pub meta: ClipMeta,
}

/// Teacher and student views of an (already augmented) clip.
pub fn prepare_clip(
    clip: &VideoClip,
    meta: &ClipMeta,
    hr_ref: f64,
    teacher: &TeacherConfig,
    mode: InputMode,
) -> Result<Prepared> {
    Ok(Prepared {
        input: student_input(clip, mode)?,
        teacher: teacher_forward(clip, Some(meta), teacher)?.samples,
        truth: meta.bvp.clone(),
        hr_ref,
        meta: meta.clone(),
    })
}

/// Applies `regime` for the given counters. `stage_epoch` drives the
/// occlusion ramp, `epoch` keys the random draws.
pub fn augment(
    lc: &LabeledClip,
    regime: Regime,
    cfg: &TrainConfig,
    epoch: usize,
    stage_epoch: usize,
) -> Result<(VideoClip, ClipMeta)> {
    match regime {
        Regime::Clean => Ok((lc.clip.clone(), lc.meta.clone())),
        Regime::Occluded => apply_occlusions(
            &lc.clip,
            &lc.meta,
            stage_epoch as f64,
            &cfg.occlusion,
            &mut occlusion_rng(lc.meta.seed, epoch as u64),
        ),
        Regime::DomainShift => {
            let (clip, meta) = apply_occlusions(
                &lc.clip,
                &lc.meta,
                cfg.occlusion.ramp_end,
                &cfg.occlusion,
                &mut occlusion_rng(lc.meta.seed, epoch as u64),
            )?;
            let mut rng = RngStream::at(lc.meta.seed, streams::DOMAIN, epoch as u64);
            Ok((domain_shift(&clip, &cfg.domain_shift, &mut rng)?, meta))
        }
    }
}

pub fn prepare_epoch(
    set: &[LabeledClip],
    regime: Regime,
    cfg: &TrainConfig,
    epoch: usize,
    stage_epoch: usize,
) -> Result<Vec<Prepared>> {
    set.iter()
        .map(|lc| {
            let (clip, meta) = augment(lc, regime, cfg, epoch, stage_epoch)?;
            prepare_clip(&clip, &meta, lc.hr_ref, &cfg.teacher, cfg.input)
        })
        .collect()
}

/// The schedule used for the fixed occluded validation set: every clip is
/// occluded at the final coverage.
pub fn eval_occlusion(sched: &CurriculumSchedule) -> CurriculumSchedule {
    CurriculumSchedule {
        prob_max: 1.0,
        ..sched.clone()
    }
}

/// Clean set with a fixed, fully-ramped occlusion pattern.
pub fn occluded_set(set: &[LabeledClip], cfg: &TrainConfig) -> Result<Vec<Prepared>> {
    let sched = eval_occlusion(&cfg.occlusion);
    set.iter()
        .map(|lc| {
            let mut rng = RngStream::new(lc.meta.seed, streams::OCC_EVAL);
            let (clip, meta) = apply_occlusions(&lc.clip, &lc.meta, sched.ramp_end, &sched, &mut rng)?;
            prepare_clip(&clip, &meta, lc.hr_ref, &cfg.teacher, cfg.input)
        })
        .collect()
}

pub fn clean_set(set: &[LabeledClip], cfg: &TrainConfig) -> Result<Vec<Prepared>> {
    set.iter()
        .map(|lc| prepare_clip(&lc.clip, &lc.meta, lc.hr_ref, &cfg.teacher, cfg.input))
        .collect()
}

/// Start frames of length-`len` windows at `stride` that fit in `total`.
pub fn window_starts(total: usize, len: usize, stride: usize) -> Vec<usize> {
    if len > total || stride == 0 {
        return Vec::new();
    }
    (0..=total - len).step_by(stride).collect()
}

/// A window of a prepared clip.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowRef {
    pub clip: usize,
    pub start: usize,
}

pub fn all_windows(set: &[Prepared], len: usize, stride: usize) -> Vec<WindowRef> {
    set.iter()
        .enumerate()
        .flat_map(|(clip, p)| {
            window_starts(p.input.frames(), len, stride)
                .into_iter()
                .map(move |start| WindowRef { clip, start })
        })
        .collect()
}

/// Fisher-Yates permutation of `0..n`.
pub fn permutation(n: usize, rng: &mut RngStream) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        p.swap(i, rng.below(i + 1));
    }
    p
}

/// Patches `[B, N, P]`, teacher and ground-truth windows `[B, T]`.
pub struct Batch<F: Real> {
    pub patches: Tensor<F>,
    pub teacher: Tensor<F>,
    pub truth: Tensor<F>,
}

pub fn assemble<F: Real>(set: &[Prepared], refs: &[WindowRef], tubelet: &TubeletConfig) -> Result<Batch<F>> {
    let len = tubelet.frames;
    let clips = refs
        .iter()
        .map(|r| set[r.clip].input.slice_frames(r.start, len))
        .collect::<Result<Vec<_>>>()?;
    let views: Vec<&VideoClip> = clips.iter().collect();
    let gather = |pick: fn(&Prepared) -> &Vec<f64>| {
        let mut v = Vec::with_capacity(refs.len() * len);
        for r in refs {
            v.extend(pick(&set[r.clip])[r.start..r.start + len].iter().map(|&x| F::c(x)));
        }
        Tensor::new(&[refs.len(), len], v)
    };
    Ok(Batch {
        patches: tubelet.patches(&views)?,
        teacher: gather(|p| &p.teacher)?,
        truth: gather(|p| &p.truth)?,
    })
}

/// Train, validation and test clips drawn from disjoint seed ranges.
#[derive(Clone, Debug)]
pub struct Datasets {
    pub train: Vec<LabeledClip>,
    pub val: Vec<LabeledClip>,
}

impl Datasets {
    pub fn generate(train: Range<u64>, val: Range<u64>, spec: &SceneSpec) -> Result<Self> {
        if train.start < val.end && val.start < train.end {
            return Err(Error::invalid(format!("seed ranges {train:?} and {val:?} overlap")));
        }
        Ok(Self {
            train: generate_set(train, spec)?,
            val: generate_set(val, spec)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> SceneSpec {
        SceneSpec {
            frames: 64,
            ..SceneSpec::default()
        }
    }

    #[test]
    fn diff_input_keeps_length_and_zero_first_frame() {
        let lc = LabeledClip::generate(1, &tiny()).unwrap();
        let d = student_input(&lc.clip, InputMode::Diff).unwrap();
        assert_eq!(d.pixels.shape(), lc.clip.pixels.shape());
        let plane = 32 * 32;
        assert!(d.pixels.data()[..plane].iter().all(|&v| v == 0.0));
        assert!(d.pixels.data()[plane..2 * plane].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn windows_and_permutation() {
        assert_eq!(window_starts(128, 32, 32), vec![0, 32, 64, 96]);
        assert_eq!(window_starts(128, 32, 16).len(), 7);
        assert!(window_starts(16, 32, 8).is_empty());
        let mut p = permutation(10, &mut RngStream::new(0, 0));
        p.sort();
        assert_eq!(p, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn batch_layout() {
        let cfg = TrainConfig::default();
        let set = clean_set(&[LabeledClip::generate(2, &tiny()).unwrap()], &cfg).unwrap();
        let refs = all_windows(&set, 32, 32);
        assert_eq!(refs.len(), 2);
        let b = assemble::<f32>(&set, &refs, &cfg.student.tubelet).unwrap();
        assert_eq!(b.patches.shape(), &[2, 256, 384]);
        assert_eq!(b.truth.shape(), &[2, 32]);
        assert_eq!(b.truth.data()[32] as f64 as f32, set[0].truth[32] as f32);
    }

    #[test]
    fn overlapping_ranges_rejected() {
        assert!(Datasets::generate(0..4, 3..5, &tiny()).is_err());
    }
}
