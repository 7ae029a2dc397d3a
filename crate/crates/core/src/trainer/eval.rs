//! Full-clip prediction by overlap-add and the evaluation protocol.

use super::data::{window_starts, Prepared};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::signal::{metrics, sliding_hr, standardize, Metrics};
use crate::student::Student;
use crate::tensor::Real;
use crate::video::VideoClip;

/// Window hop used when stitching predictions.
pub const EVAL_STRIDE: usize = 16;

/// Per-clip outcome.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipEval {
    pub seed: u64,
    pub pred_hr: f64,
    pub ref_hr: f64,
    pub r: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub clips: Vec<ClipEval>,
    pub metrics: Metrics,
}

/// Predicts a waveform over the whole clip. Each window is standardized and
/// weighted by `sin²(π(i+½)/L)` before being added at its offset; the
/// accumulated weight is divided out.
pub fn predict_clip<F: Real>(student: &Student, store: &ParamStore<F>, input: &VideoClip) -> Result<Vec<f64>> {
    let tub = &student.cfg.tubelet;
    let (len, total) = (tub.frames, input.frames());
    let mut starts = window_starts(total, len, EVAL_STRIDE);
    if starts.is_empty() {
        return Err(Error::invalid(format!("clip of {total} frames is shorter than a {len}-frame window")));
    }
    if *starts.last().unwrap() + len < total {
        starts.push(total - len);
    }
    let windows = starts
        .iter()
        .map(|&s| input.slice_frames(s, len))
        .collect::<Result<Vec<_>>>()?;
    let views: Vec<&VideoClip> = windows.iter().collect();
    let pred = student.predict(store, &tub.patches::<F>(&views)?)?;
    let taper: Vec<f64> = (0..len)
        .map(|i| (std::f64::consts::PI * (i as f64 + 0.5) / len as f64).sin().powi(2))
        .collect();
    let mut acc = vec![0.0; total];
    let mut weight = vec![0.0; total];
    for (k, &s) in starts.iter().enumerate() {
        let row: Vec<f64> = pred.data()[k * len..(k + 1) * len].iter().map(|v| v.as_f64()).collect();
        for (i, v) in standardize(&row).into_iter().enumerate() {
            acc[s + i] += taper[i] * v;
            weight[s + i] += taper[i];
        }
    }
    Ok(acc.iter().zip(&weight).map(|(a, w)| a / w.max(1e-12)).collect())
}

/// Heart-rate and waveform metrics of the student over `set`.
pub fn evaluate<F: Real>(student: &Student, store: &ParamStore<F>, set: &[Prepared]) -> Result<EvalReport> {
    let mut clips = Vec::with_capacity(set.len());
    let (mut ph, mut rh, mut ps, mut rs) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for p in set {
        let wave = predict_clip(student, store, &p.input)?;
        let pred_hr = sliding_hr(&wave, p.input.fps)?.bpm;
        let ref_hr = sliding_hr(&p.truth, p.input.fps)?.bpm;
        clips.push(ClipEval {
            seed: p.meta.seed,
            pred_hr,
            ref_hr,
            r: crate::signal::pearson(&wave, &p.truth, 1e-8),
        });
        ph.push(pred_hr);
        rh.push(ref_hr);
        ps.push(wave);
        rs.push(p.truth.clone());
    }
    let metrics = metrics(&ph, &rh, &ps, &rs)?;
    Ok(EvalReport { clips, metrics })
}
