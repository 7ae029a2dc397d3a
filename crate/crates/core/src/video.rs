//! Video clips and their tubelet tiling.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// A `[C, T, H, W]` clip of intensities in `[0, 1]` with its frame rate.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    pub pixels: Tensor<f32>,
    pub fps: f64,
}

impl VideoClip {
    pub fn new(pixels: Tensor<f32>, fps: f64) -> Result<Self> {
        if pixels.rank() != 4 {
            return Err(Error::invalid(format!(
                "video clip must be [C, T, H, W], got {:?}",
                pixels.shape()
            )));
        }
        if !(fps > 0.0) {
            return Err(Error::invalid("frame rate must be positive"));
        }
        Ok(Self { pixels, fps })
    }

    pub fn channels(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn frames(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[3]
    }

    #[inline]
    pub fn index(&self, c: usize, t: usize, y: usize, x: usize) -> usize {
        ((c * self.frames() + t) * self.height() + y) * self.width() + x
    }

    #[inline]
    pub fn get(&self, c: usize, t: usize, y: usize, x: usize) -> f32 {
        self.pixels.data()[self.index(c, t, y, x)]
    }

    /// Frames `start..start + len` as a new clip.
    pub fn slice_frames(&self, start: usize, len: usize) -> Result<VideoClip> {
        let (c, t, plane) = (self.channels(), self.frames(), self.height() * self.width());
        if len == 0 || start + len > t {
            return Err(Error::invalid(format!("frames {start}..{} outside clip of {t}", start + len)));
        }
        let mut data = Vec::with_capacity(c * len * plane);
        for ch in 0..c {
            let from = (ch * t + start) * plane;
            data.extend_from_slice(&self.pixels.data()[from..from + len * plane]);
        }
        VideoClip::new(Tensor::new(&[c, len, self.height(), self.width()], data)?, self.fps)
    }
}

/// Axis-aligned pixel rectangle `[x0, x1) × [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl Rect {
    pub fn area(&self) -> usize {
        self.x1.saturating_sub(self.x0) * self.y1.saturating_sub(self.y0)
    }

    /// Centred rectangle covering `fraction` of each frame dimension.
    pub fn centered(height: usize, width: usize, fraction: f64) -> Rect {
        let h = ((height as f64 * fraction).round() as usize).clamp(1, height);
        let w = ((width as f64 * fraction).round() as usize).clamp(1, width);
        let y0 = (height - h) / 2;
        let x0 = (width - w) / 2;
        Rect {
            x0,
            y0,
            x1: x0 + w,
            y1: y0 + h,
        }
    }
}

/// Tubelet extents plus the video dimensions they tile.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TubeletConfig {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub channels: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for TubeletConfig {
    fn default() -> Self {
        Self {
            t: 2,
            h: 8,
            w: 8,
            channels: 3,
            frames: 32,
            height: 32,
            width: 32,
        }
    }
}

impl TubeletConfig {
    pub fn validate(&self) -> Result<()> {
        for (axis, video, tubelet) in [
            ("frames", self.frames, self.t),
            ("height", self.height, self.h),
            ("width", self.width, self.w),
        ] {
            if tubelet == 0 || video == 0 || video % tubelet != 0 {
                return Err(Error::Tiling {
                    axis,
                    video,
                    tubelet,
                });
            }
        }
        if self.channels == 0 {
            return Err(Error::invalid("video must have at least one channel"));
        }
        Ok(())
    }

    /// Tubelets along (time, rows, columns).
    pub fn grid(&self) -> (usize, usize, usize) {
        (self.frames / self.t, self.height / self.h, self.width / self.w)
    }

    pub fn tokens(&self) -> usize {
        let (a, b, c) = self.grid();
        a * b * c
    }

    /// Flattened tubelet length `C·t·h·w`.
    pub fn patch_len(&self) -> usize {
        self.channels * self.t * self.h * self.w
    }

    /// Checks that a clip has exactly the configured dimensions.
    pub fn check_clip(&self, clip: &VideoClip) -> Result<()> {
        let want = [self.channels, self.frames, self.height, self.width];
        if clip.pixels.shape() != want {
            return Err(Error::ShapeMismatch {
                op: "tubelet",
                lhs: clip.pixels.shape().to_vec(),
                rhs: want.to_vec(),
            });
        }
        Ok(())
    }

    /// Cuts clips into `[B, N, C·t·h·w]` patches.
    ///
    /// Tokens run time-major, then row, then column; inside a patch the order
    /// is channel, frame, row, column.
    pub fn patches<F: Real>(&self, clips: &[&VideoClip]) -> Result<Tensor<F>> {
        self.validate()?;
        let (gt, gh, gw) = self.grid();
        let p = self.patch_len();
        let n = self.tokens();
        let mut data = Vec::with_capacity(clips.len() * n * p);
        for clip in clips {
            self.check_clip(clip)?;
            let px = clip.pixels.data();
            for it in 0..gt {
                for iy in 0..gh {
                    for ix in 0..gw {
                        for c in 0..self.channels {
                            for dt in 0..self.t {
                                for dy in 0..self.h {
                                    let base = clip.index(c, it * self.t + dt, iy * self.h + dy, ix * self.w);
                                    data.extend(px[base..base + self.w].iter().map(|&v| F::c(v as f64)));
                                }
                            }
                        }
                    }
                }
            }
        }
        Tensor::new(&[clips.len(), n, p], data)
    }

    /// Spatial grid position `(row, col)` of token `i`.
    pub fn token_cell(&self, i: usize) -> (usize, usize, usize) {
        let (_, gh, gw) = self.grid();
        (i / (gh * gw), (i / gw) % gh, i % gw)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_scale_token_count() {
        let cfg = TubeletConfig {
            t: 2,
            h: 16,
            w: 16,
            channels: 3,
            frames: 128,
            height: 224,
            width: 224,
        };
        cfg.validate().unwrap();
        assert_eq!(cfg.tokens(), 12544);
    }

    #[test]
    fn desk_scale_token_count() {
        assert_eq!(TubeletConfig::default().tokens(), 256);
        assert_eq!(TubeletConfig::default().patch_len(), 384);
    }

    #[test]
    fn tiling_error_names_axis() {
        let cfg = TubeletConfig {
            height: 30,
            ..Default::default()
        };
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("height"), "{err}");
    }

    #[test]
    fn patch_layout() {
        let cfg = TubeletConfig {
            t: 1,
            h: 2,
            w: 2,
            channels: 1,
            frames: 2,
            height: 2,
            width: 4,
        };
        let px = Tensor::from_fn(&[1, 2, 2, 4], |i| i as f32);
        let clip = VideoClip::new(px, 30.0).unwrap();
        let p: Tensor<f32> = cfg.patches(&[&clip]).unwrap();
        assert_eq!(p.shape(), &[1, 4, 4]);
        // token 1 = frame 0, right half
        assert_eq!(&p.data()[4..8], &[2.0, 3.0, 6.0, 7.0]);
        // token 2 = frame 1, left half
        assert_eq!(&p.data()[8..12], &[8.0, 9.0, 12.0, 13.0]);
    }
}
