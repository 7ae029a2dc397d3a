//! Frozen teachers: the synthetic ground-truth oracle and the classical CHROM
//! and POS extractors, plus DiffNormalization preprocessing.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::{hann, standardize, BvpWaveform};
use crate::synthdata::ClipMeta;
use crate::tensor::Tensor;
use crate::video::{Rect, VideoClip};

pub const DIFF_EPS: f64 = 1e-6;
pub const CHROM_WINDOW: usize = 32;
pub const POS_WINDOW: usize = 48;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TeacherKind {
    Oracle,
    Pos,
    Chrom,
}

impl std::str::FromStr for TeacherKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "oracle" => Ok(TeacherKind::Oracle),
            "pos" => Ok(TeacherKind::Pos),
            "chrom" => Ok(TeacherKind::Chrom),
            other => Err(Error::invalid(format!("unknown teacher {other:?} (oracle|pos|chrom)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherConfig {
    pub kind: TeacherKind,
    /// Use the generator's face rectangle when metadata is available.
    pub use_meta_face: bool,
    /// Centred crop fraction used otherwise.
    pub crop_fraction: f64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            kind: TeacherKind::Oracle,
            use_meta_face: true,
            crop_fraction: 0.6,
        }
    }
}

/// Frame-to-frame difference ratio `(x[t+1] - x[t]) / (x[t+1] + x[t] + eps)`,
/// standardized over the whole clip. Output is `[C, T-1, H, W]`.
pub fn diff_normalize(clip: &VideoClip) -> Result<Tensor<f32>> {
    let (c, t, h, w) = (clip.channels(), clip.frames(), clip.height(), clip.width());
    if t < 2 {
        return Err(Error::invalid(format!("diff_normalize needs at least 2 frames, got {t}")));
    }
    let plane = h * w;
    let px = clip.pixels.data();
    let mut out = Vec::with_capacity(c * (t - 1) * plane);
    for ch in 0..c {
        for f in 0..t - 1 {
            let a = &px[(ch * t + f) * plane..(ch * t + f + 1) * plane];
            let b = &px[(ch * t + f + 1) * plane..(ch * t + f + 2) * plane];
            out.extend(a.iter().zip(b).map(|(&x0, &x1)| {
                let (x0, x1) = (x0 as f64, x1 as f64);
                (x1 - x0) / (x1 + x0 + DIFF_EPS)
            }));
        }
    }
    let n = out.len() as f64;
    let mean = out.iter().sum::<f64>() / n;
    let sd = (out.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let data = out
        .iter()
        .map(|v| if sd > DIFF_EPS { ((v - mean) / sd) as f32 } else { 0.0 })
        .collect();
    Tensor::new(&[c, t - 1, h, w], data)
}

/// Per-frame mean R, G, B over a face region.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbTrace {
    pub rgb: Vec<[f64; 3]>,
    pub fs: f64,
}

impl RgbTrace {
    pub fn from_clip(clip: &VideoClip, region: Rect) -> Result<Self> {
        if clip.channels() != 3 {
            return Err(Error::invalid("RGB trace needs a three-channel clip"));
        }
        let x1 = region.x1.min(clip.width());
        let y1 = region.y1.min(clip.height());
        if region.x0 >= x1 || region.y0 >= y1 {
            return Err(Error::invalid(format!("empty face region {region:?}")));
        }
        let count = ((x1 - region.x0) * (y1 - region.y0)) as f64;
        let rgb = (0..clip.frames())
            .map(|t| {
                let mut m = [0.0; 3];
                for (c, slot) in m.iter_mut().enumerate() {
                    let mut s = 0.0;
                    for y in region.y0..y1 {
                        let row = clip.index(c, t, y, 0);
                        s += clip.pixels.data()[row + region.x0..row + x1]
                            .iter()
                            .map(|&v| v as f64)
                            .sum::<f64>();
                    }
                    *slot = s / count;
                }
                m
            })
            .collect();
        Ok(Self { rgb, fs: clip.fps })
    }

    pub fn len(&self) -> usize {
        self.rgb.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rgb.is_empty()
    }

    fn normalized(&self, start: usize, len: usize) -> [Vec<f64>; 3] {
        let mut out = [vec![0.0; len], vec![0.0; len], vec![0.0; len]];
        for c in 0..3 {
            let mean = self.rgb[start..start + len].iter().map(|p| p[c]).sum::<f64>() / len as f64;
            for i in 0..len {
                out[c][i] = if mean.abs() > 1e-12 {
                    self.rgb[start + i][c] / mean
                } else {
                    1.0
                };
            }
        }
        out
    }
}

fn std_dev(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt()
}

fn window_starts(total: usize, len: usize, hop: usize) -> Vec<usize> {
    let mut s: Vec<usize> = (0..=total - len).step_by(hop.max(1)).collect();
    if *s.last().unwrap() != total - len {
        s.push(total - len);
    }
    s
}

/// Chrominance projection with Hann-weighted 50% overlap-add.
pub fn chrom(trace: &RgbTrace) -> Result<BvpWaveform> {
    let t = trace.len();
    if t < 2 {
        return Err(Error::invalid("CHROM needs at least 2 frames"));
    }
    let len = CHROM_WINDOW.min(t);
    let win = hann(len);
    let mut out = vec![0.0; t];
    for start in window_starts(t, len, len / 2) {
        let [r, g, b] = trace.normalized(start, len);
        let x: Vec<f64> = (0..len).map(|i| 3.0 * r[i] - 2.0 * g[i]).collect();
        let y: Vec<f64> = (0..len).map(|i| 1.5 * r[i] + g[i] - 1.5 * b[i]).collect();
        let sy = std_dev(&y);
        if sy <= 1e-12 {
            continue;
        }
        let alpha = std_dev(&x) / sy;
        let mut s: Vec<f64> = (0..len).map(|i| x[i] - alpha * y[i]).collect();
        crate::signal::demean(&mut s);
        for i in 0..len {
            out[start + i] += win[i] * s[i];
        }
    }
    Ok(BvpWaveform::new(standardize(&out), trace.fs))
}

/// Plane-orthogonal-to-skin projection over sliding windows of 48 frames.
pub fn pos(trace: &RgbTrace) -> Result<BvpWaveform> {
    let t = trace.len();
    if t < 2 {
        return Err(Error::invalid("POS needs at least 2 frames"));
    }
    let len = POS_WINDOW.min(t);
    let mut out = vec![0.0; t];
    for start in 0..=t - len {
        let [r, g, b] = trace.normalized(start, len);
        let s1: Vec<f64> = (0..len).map(|i| g[i] - b[i]).collect();
        let s2: Vec<f64> = (0..len).map(|i| g[i] + b[i] - 2.0 * r[i]).collect();
        let sd2 = std_dev(&s2);
        let alpha = if sd2 > 1e-12 { std_dev(&s1) / sd2 } else { 0.0 };
        let mut h: Vec<f64> = (0..len).map(|i| s1[i] + alpha * s2[i]).collect();
        crate::signal::demean(&mut h);
        for i in 0..len {
            out[start + i] += h[i];
        }
    }
    Ok(BvpWaveform::new(standardize(&out), trace.fs))
}

/// Linear resampling to `len` points.
fn resample(x: &[f64], len: usize) -> Vec<f64> {
    if x.len() == len || x.is_empty() {
        return x.to_vec();
    }
    if x.len() == 1 || len == 1 {
        return vec![x[0]; len];
    }
    (0..len)
        .map(|i| {
            let pos = i as f64 * (x.len() - 1) as f64 / (len - 1) as f64;
            let j = (pos.floor() as usize).min(x.len() - 2);
            let f = pos - j as f64;
            x[j] * (1.0 - f) + x[j + 1] * f
        })
        .collect()
}

/// The face region a teacher reads from.
pub fn face_region(clip: &VideoClip, meta: Option<&ClipMeta>, cfg: &TeacherConfig) -> Rect {
    match meta {
        Some(m) if cfg.use_meta_face => m.face,
        _ => Rect::centered(clip.height(), clip.width(), cfg.crop_fraction),
    }
}

/// Standardized reference waveform of length `T` for `clip`.
pub fn teacher_forward(clip: &VideoClip, meta: Option<&ClipMeta>, cfg: &TeacherConfig) -> Result<BvpWaveform> {
    let t = clip.frames();
    let samples = match cfg.kind {
        TeacherKind::Oracle => {
            let meta = meta.ok_or_else(|| Error::invalid("oracle teacher requires clip metadata"))?;
            standardize(&resample(&meta.bvp, t))
        }
        TeacherKind::Pos | TeacherKind::Chrom => {
            let trace = RgbTrace::from_clip(clip, face_region(clip, meta, cfg))?;
            let wave = if cfg.kind == TeacherKind::Pos {
                pos(&trace)?
            } else {
                chrom(&trace)?
            };
            let mut s = wave.samples;
            s.resize(t, 0.0);
            s
        }
    };
    Ok(BvpWaveform::new(samples, clip.fps))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diff_example() {
        let px = Tensor::from_fn(&[1, 2, 1, 2], |i| match i {
            0 => 1.0,
            2 => 1.02,
            _ => 0.5,
        });
        let clip = VideoClip::new(px, 30.0).unwrap();
        let d = diff_normalize(&clip).unwrap();
        assert_eq!(d.shape(), &[1, 1, 1, 2]);
        // raw ratios are 0.0099 and 0; standardized they become +1 and -1
        assert!((d.data()[0] - 1.0).abs() < 1e-5 && (d.data()[1] + 1.0).abs() < 1e-5);
        let raw = (1.02 - 1.0) / (1.02 + 1.0 + DIFF_EPS);
        assert!((raw - 0.0099).abs() < 1e-4);
    }

    #[test]
    fn constant_clip_diff_is_zero() {
        let clip = VideoClip::new(Tensor::full(&[3, 5, 2, 2], 0.4), 30.0).unwrap();
        assert!(diff_normalize(&clip).unwrap().data().iter().all(|&v| v == 0.0));
        let one = VideoClip::new(Tensor::full(&[3, 1, 2, 2], 0.4), 30.0).unwrap();
        assert!(diff_normalize(&one).is_err());
    }

    #[test]
    fn constant_trace_gives_zero() {
        let trace = RgbTrace {
            rgb: vec![[0.6, 0.5, 0.4]; 64],
            fs: 30.0,
        };
        assert!(chrom(&trace).unwrap().samples.iter().all(|&v| v == 0.0));
        assert!(pos(&trace).unwrap().samples.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn oracle_needs_meta() {
        let clip = VideoClip::new(Tensor::full(&[3, 4, 4, 4], 0.4), 30.0).unwrap();
        assert!(teacher_forward(&clip, None, &TeacherConfig::default()).is_err());
    }

    #[test]
    fn resample_endpoints() {
        assert_eq!(resample(&[0.0, 1.0], 3), vec![0.0, 0.5, 1.0]);
    }
}
