//! Synthetic pulsatile face videos, the hospital occlusion simulator and the
//! curriculum schedule.

mod occlusion;

pub use occlusion::{
    apply_occlusions, occlusion_rng, schedule_at, CurriculumSchedule, Effect, Geometry, OcclusionEpisode,
    OcclusionKind, OcclusionSpec, Raster, MAX_ATTEMPTS, RETENTION,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::standardize;
use crate::tensor::{RngStream, Tensor};
use crate::video::{Rect, VideoClip};

/// Random stream id reserved for clip generation.
pub const GEN_STREAM: u64 = 1;

/// Scene parameters. Per-clip variation (heart rate, phases, skin tone,
/// placement, texture) is drawn from the clip seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub fps: f64,
    /// Ellipse centre `(x, y)` as fractions of the frame.
    pub face_center: [f64; 2],
    /// Ellipse semi-axes `(x, y)` as fractions of the frame.
    pub face_axes: [f64; 2],
    pub skin_rgb: [f64; 3],
    pub background_rgb: [f64; 3],
    /// Pulse gain for forehead, cheeks and lower face.
    pub perfusion: [f64; 3],
    /// Peak-to-peak pulse modulation as a fraction of the base intensity.
    pub pulse_amplitude: f64,
    pub noise_sigma: f64,
    pub drift_amplitude: f64,
    pub drift_period_s: f64,
    pub jitter_px: f64,
    pub hr_range: [f64; 2],
    /// Fixed heart rate; drawn from `hr_range` when absent.
    pub hr_bpm: Option<f64>,
    /// Scale of per-clip skin-tone and placement variation.
    pub variation: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            frames: 128,
            fps: 30.0,
            face_center: [0.5, 0.5],
            face_axes: [0.3, 0.4],
            skin_rgb: [0.78, 0.58, 0.47],
            background_rgb: [0.25, 0.3, 0.35],
            perfusion: [1.2, 1.0, 0.6],
            pulse_amplitude: 0.01,
            noise_sigma: 0.01,
            drift_amplitude: 0.01,
            drift_period_s: 10.0,
            jitter_px: 0.3,
            hr_range: [60.0, 200.0],
            hr_bpm: None,
            variation: 1.0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(format!("scene spec: {m}")));
        if self.height < 4 || self.width < 4 || self.frames < 2 {
            return bad("frame must be at least 4x4 and clip at least 2 frames");
        }
        if !(self.fps > 0.0) {
            return bad("fps must be positive");
        }
        if self.face_axes.iter().any(|&a| !(a > 0.0 && a <= 0.5)) {
            return bad("face axes must lie in (0, 0.5]");
        }
        if self.skin_rgb.iter().chain(&self.background_rgb).any(|c| !(0.0..=1.0).contains(c)) {
            return bad("colours must lie in [0, 1]");
        }
        let [lo, hi] = self.hr_range;
        if !(lo > 0.0 && lo <= hi) {
            return bad("hr_range must be positive and ordered");
        }
        if let Some(hr) = self.hr_bpm {
            if !(hr > 0.0) {
                return bad("hr_bpm must be positive");
            }
        }
        if self.pulse_amplitude < 0.0
            || self.noise_sigma < 0.0
            || self.drift_amplitude < 0.0
            || self.jitter_px < 0.0
            || self.variation < 0.0
            || !(self.drift_period_s > 0.0)
        {
            return bad("amplitudes must be non-negative and the drift period positive");
        }
        Ok(())
    }

    /// A harsher regime: more noise, drift and motion.
    pub fn domain_shifted(&self, factor: f64) -> Self {
        Self {
            noise_sigma: self.noise_sigma * factor,
            drift_amplitude: self.drift_amplitude * factor,
            jitter_px: self.jitter_px * factor,
            ..self.clone()
        }
    }

    /// Everything but the pulse switched off.
    pub fn quiet(&self) -> Self {
        Self {
            noise_sigma: 0.0,
            drift_amplitude: 0.0,
            jitter_px: 0.0,
            ..self.clone()
        }
    }
}

/// Face ellipse in pixel units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaceEllipse {
    pub cx: f64,
    pub cy: f64,
    pub ax: f64,
    pub ay: f64,
}

impl FaceEllipse {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        let dx = (x as f64 + 0.5 - self.cx) / self.ax;
        let dy = (y as f64 + 0.5 - self.cy) / self.ay;
        dx * dx + dy * dy <= 1.0
    }

    /// Row-major `H*W` membership mask.
    pub fn mask(&self, height: usize, width: usize) -> Vec<bool> {
        (0..height * width).map(|i| self.contains(i % width, i / width)).collect()
    }

    pub fn bounding_rect(&self, height: usize, width: usize) -> Rect {
        let x0 = (self.cx - self.ax).floor().max(0.0) as usize;
        let y0 = (self.cy - self.ay).floor().max(0.0) as usize;
        let x1 = ((self.cx + self.ax).ceil() as usize).min(width);
        let y1 = ((self.cy + self.ay).ceil() as usize).min(height);
        Rect { x0, y0, x1, y1 }
    }
}

/// Generation record kept alongside a clip.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipMeta {
    pub seed: u64,
    pub hr_bpm: f64,
    pub fps: f64,
    pub face: Rect,
    pub ellipse: FaceEllipse,
    /// Standardized ground-truth pulse, one value per frame.
    pub bvp: Vec<f64>,
    #[serde(default)]
    pub occlusions: Vec<OcclusionEpisode>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

/// Raw pulse shape `sin(ωt + φ0) + 0.3·sin(2ωt + φ)`.
pub fn pulse_shape(hr_bpm: f64, fps: f64, frames: usize, phase0: f64, phase2: f64) -> Vec<f64> {
    let w = 2.0 * std::f64::consts::PI * hr_bpm / 60.0;
    (0..frames)
        .map(|i| {
            let t = i as f64 / fps;
            (w * t + phase0).sin() + 0.3 * (2.0 * w * t + phase2).sin()
        })
        .collect()
}

fn bilinear(img: &[f64], h: usize, w: usize, x: f64, y: f64) -> f64 {
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let top = img[y0 * w + x0] * (1.0 - fx) + img[y0 * w + x1] * fx;
    let bot = img[y1 * w + x0] * (1.0 - fx) + img[y1 * w + x1] * fx;
    top * (1.0 - fy) + bot * fy
}

/// Renders one clip. The same `(seed, spec)` always yields the same bits.
pub fn gen_clip(seed: u64, spec: &SceneSpec) -> Result<(VideoClip, ClipMeta)> {
    spec.validate()?;
    let mut rng = RngStream::new(seed, GEN_STREAM);
    let (h, w, n) = (spec.height, spec.width, spec.frames);
    let var = spec.variation;

    let hr = match spec.hr_bpm {
        Some(hr) => hr,
        None => rng.range(spec.hr_range[0], spec.hr_range[1]),
    };
    let phase0 = rng.range(0.0, 2.0 * std::f64::consts::PI);
    let phase2 = rng.range(0.0, 2.0 * std::f64::consts::PI);
    let raw = pulse_shape(hr, spec.fps, n, phase0, phase2);
    let bvp = standardize(&raw);

    let ellipse = FaceEllipse {
        cx: (spec.face_center[0] + 0.04 * var * rng.range(-1.0, 1.0)) * w as f64,
        cy: (spec.face_center[1] + 0.04 * var * rng.range(-1.0, 1.0)) * h as f64,
        ax: spec.face_axes[0] * w as f64,
        ay: spec.face_axes[1] * h as f64,
    };
    let skin: Vec<f64> = spec
        .skin_rgb
        .iter()
        .map(|c| (c + 0.06 * var * rng.range(-1.0, 1.0)).clamp(0.05, 0.95))
        .collect();

    // Static base image per channel and pulse weight map.
    let mut base = vec![vec![0.0; h * w]; 3];
    let mut weight = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let tex = 0.02 * rng.normal();
            if ellipse.contains(x, y) {
                let rel = (y as f64 + 0.5 - (ellipse.cy - ellipse.ay)) / (2.0 * ellipse.ay);
                weight[i] = if rel < 1.0 / 3.0 {
                    spec.perfusion[0]
                } else if rel < 2.0 / 3.0 {
                    spec.perfusion[1]
                } else {
                    spec.perfusion[2]
                };
                for c in 0..3 {
                    base[c][i] = (skin[c] * (1.0 + tex)).clamp(0.0, 1.0);
                }
            } else {
                for c in 0..3 {
                    base[c][i] = (spec.background_rgb[c] + tex).clamp(0.0, 1.0);
                }
            }
        }
    }

    // Modulation with exact peak-to-peak amplitude.
    let (lo, hi) = raw.iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
    let span = (hi - lo).max(1e-12);
    let modulation: Vec<f64> = raw
        .iter()
        .map(|v| spec.pulse_amplitude * ((v - lo) / span - 0.5))
        .collect();
    const CHANNEL_GAIN: [f64; 3] = [0.5, 1.0, 0.3];

    let drift_phase = rng.range(0.0, 2.0 * std::f64::consts::PI);
    let jit: Vec<f64> = (0..4).map(|_| rng.range(0.0, 2.0 * std::f64::consts::PI)).collect();
    let jit_freq = [rng.range(0.1, 0.5), rng.range(0.1, 0.5)];

    let mut px = vec![0f32; 3 * n * h * w];
    let plane = h * w;
    for t in 0..n {
        let secs = t as f64 / spec.fps;
        let drift =
            spec.drift_amplitude * (2.0 * std::f64::consts::PI * secs / spec.drift_period_s + drift_phase).sin();
        let dx = spec.jitter_px * (2.0 * std::f64::consts::PI * jit_freq[0] * secs + jit[0]).sin();
        let dy = spec.jitter_px * (2.0 * std::f64::consts::PI * jit_freq[1] * secs + jit[1]).sin();
        let moving = dx != 0.0 || dy != 0.0;
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let (sx, sy) = (x as f64 - dx, y as f64 - dy);
                let pw = if moving { bilinear(&weight, h, w, sx, sy) } else { weight[i] };
                for c in 0..3 {
                    let b = if moving { bilinear(&base[c], h, w, sx, sy) } else { base[c][i] };
                    let mut v = b * (1.0 + CHANNEL_GAIN[c] * pw * modulation[t]) + drift;
                    if spec.noise_sigma > 0.0 {
                        v += spec.noise_sigma * rng.normal();
                    }
                    px[(c * n + t) * plane + i] = v.clamp(0.0, 1.0) as f32;
                }
            }
        }
    }

    let clip = VideoClip::new(Tensor::new(&[3, n, h, w], px)?, spec.fps)?;
    let meta = ClipMeta {
        seed,
        hr_bpm: hr,
        fps: spec.fps,
        face: ellipse.bounding_rect(h, w),
        ellipse,
        bvp,
        occlusions: Vec::new(),
        warnings: Vec::new(),
    };
    Ok((clip, meta))
}

/// Post-hoc degradation emulating a harsher capture setting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DomainShift {
    pub noise_sigma: f64,
    pub drift_amplitude: f64,
    pub drift_period_s: f64,
    pub jitter_px: f64,
}

impl Default for DomainShift {
    fn default() -> Self {
        Self {
            noise_sigma: 0.02,
            drift_amplitude: 0.03,
            drift_period_s: 4.0,
            jitter_px: 1.0,
        }
    }
}

/// Adds per-frame translation jitter, a global illumination drift and pixel
/// noise to an existing clip.
pub fn domain_shift(clip: &VideoClip, shift: &DomainShift, rng: &mut RngStream) -> Result<VideoClip> {
    let (c, n, h, w) = (clip.channels(), clip.frames(), clip.height(), clip.width());
    let plane = h * w;
    let phase = rng.range(0.0, 2.0 * std::f64::consts::PI);
    let mut out = clip.pixels.clone();
    let mut frame = vec![0.0; plane];
    for t in 0..n {
        let secs = t as f64 / clip.fps;
        let drift = shift.drift_amplitude
            * (2.0 * std::f64::consts::PI * secs / shift.drift_period_s.max(1e-9) + phase).sin();
        let (dx, dy) = (shift.jitter_px * rng.range(-1.0, 1.0), shift.jitter_px * rng.range(-1.0, 1.0));
        for ch in 0..c {
            let off = (ch * n + t) * plane;
            for (dst, &src) in frame.iter_mut().zip(&clip.pixels.data()[off..off + plane]) {
                *dst = src as f64;
            }
            let data = out.data_mut();
            for y in 0..h {
                for x in 0..w {
                    let v = bilinear(&frame, h, w, x as f64 - dx, y as f64 - dy) + drift
                        + shift.noise_sigma * rng.normal();
                    data[off + y * w + x] = v.clamp(0.0, 1.0) as f32;
                }
            }
        }
    }
    VideoClip::new(out, clip.fps)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn static_when_everything_off() {
        let spec = SceneSpec {
            pulse_amplitude: 0.0,
            frames: 8,
            ..SceneSpec::default().quiet()
        };
        let (clip, _) = gen_clip(4, &spec).unwrap();
        let plane = 32 * 32;
        for c in 0..3 {
            for t in 1..8 {
                for i in 0..plane {
                    assert_eq!(clip.pixels.data()[(c * 8 + t) * plane + i], clip.pixels.data()[c * 8 * plane + i]);
                }
            }
        }
    }

    #[test]
    fn deterministic() {
        let spec = SceneSpec::default();
        assert_eq!(gen_clip(11, &spec).unwrap(), gen_clip(11, &spec).unwrap());
        assert_ne!(gen_clip(11, &spec).unwrap().0, gen_clip(12, &spec).unwrap().0);
    }

    #[test]
    fn hr_within_range_and_bvp_standardized() {
        for seed in 0..20 {
            let (_, meta) = gen_clip(seed, &SceneSpec::default()).unwrap();
            assert!((60.0..=200.0).contains(&meta.hr_bpm));
            let m = meta.bvp.iter().sum::<f64>() / meta.bvp.len() as f64;
            assert!(m.abs() < 1e-9);
        }
    }

    #[test]
    fn invalid_spec_rejected() {
        let spec = SceneSpec {
            hr_range: [100.0, 50.0],
            ..Default::default()
        };
        assert!(gen_clip(0, &spec).is_err());
    }
}
