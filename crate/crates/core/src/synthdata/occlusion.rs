use serde::{Deserialize, Serialize};

use super::{ClipMeta, FaceEllipse};
use crate::error::{Error, Result};
use crate::tensor::RngStream;
use crate::video::VideoClip;

/// Per-frame probability that an active occluder is drawn.
pub const RETENTION: f64 = 0.7;
/// Occluder proposals tried before giving up on the coverage target.
pub const MAX_ATTEMPTS: usize = 50;
/// Frame size the pixel-denominated occluder dimensions refer to.
pub const REFERENCE_SIZE: f64 = 224.0;
/// Random stream ids `OCCLUSION_STREAM + epoch` are reserved for occlusion.
pub const OCCLUSION_STREAM: u64 = 1 << 32;

const ACCEPT_BELOW: f64 = 0.03;
const ACCEPT_ABOVE: f64 = 0.05;

/// Linear ramp of occlusion probability and face coverage over epochs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CurriculumSchedule {
    pub ramp_start: f64,
    pub ramp_end: f64,
    pub prob_max: f64,
    pub coverage_min: f64,
    pub coverage_max: f64,
}

impl Default for CurriculumSchedule {
    fn default() -> Self {
        Self {
            ramp_start: 50.0,
            ramp_end: 150.0,
            prob_max: 0.5,
            coverage_min: 0.10,
            coverage_max: 0.40,
        }
    }
}

/// `(occlusion probability, target coverage)` at `epoch`.
pub fn schedule_at(epoch: f64, sched: &CurriculumSchedule) -> (f64, f64) {
    let span = (sched.ramp_end - sched.ramp_start).max(f64::MIN_POSITIVE);
    let u = ((epoch - sched.ramp_start) / span).clamp(0.0, 1.0);
    (
        sched.prob_max * u,
        sched.coverage_min + (sched.coverage_max - sched.coverage_min) * u,
    )
}

/// The random stream that drives occlusion of clip `seed` at `epoch`.
pub fn occlusion_rng(seed: u64, epoch: u64) -> RngStream {
    RngStream::new(seed, OCCLUSION_STREAM + epoch)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OcclusionKind {
    Tube,
    OxygenMask,
    Tape,
    Hand,
    Shadow,
    Equipment,
    Blanket,
}

impl OcclusionKind {
    pub const ALL: [OcclusionKind; 7] = [
        OcclusionKind::Tube,
        OcclusionKind::OxygenMask,
        OcclusionKind::Tape,
        OcclusionKind::Hand,
        OcclusionKind::Shadow,
        OcclusionKind::Equipment,
        OcclusionKind::Blanket,
    ];

    /// Whether `effect` is a legal appearance for this kind.
    pub fn allows(self, effect: &Effect) -> bool {
        let within = |c: &[f32; 3], r: [(f64, f64); 3]| {
            c.iter()
                .zip(r)
                .all(|(&v, (lo, hi))| v as f64 >= lo - 1e-6 && v as f64 <= hi + 1e-6)
        };
        match (self, effect) {
            (OcclusionKind::Shadow, Effect::Shade { intensity }) => (0.3..=0.7).contains(intensity),
            (OcclusionKind::Shadow, _) | (_, Effect::Shade { .. }) => false,
            (OcclusionKind::Hand, Effect::Fill(c)) => within(c, HAND_SKIN) || within(c, HAND_GLOVE),
            (OcclusionKind::Equipment, Effect::Fill(c)) => {
                within(c, [EQUIPMENT_GRAY; 3]) && c[0] == c[1] && c[1] == c[2]
            }
            (OcclusionKind::Tube, Effect::Fill(c)) => within(c, [TUBE_WHITE; 3]) && c[0] == c[1] && c[1] == c[2],
            (kind, Effect::Fill(c)) => within(c, fill_range(kind)),
        }
    }
}

const TUBE_WHITE: (f64, f64) = (200.0 / 255.0, 1.0);
const EQUIPMENT_GRAY: (f64, f64) = (100.0 / 255.0, 180.0 / 255.0);
const HAND_SKIN: [(f64, f64); 3] = [(0.70, 0.90), (0.50, 0.70), (0.40, 0.60)];
const HAND_GLOVE: [(f64, f64); 3] = [(0.20, 0.40), (0.35, 0.55), (0.70, 0.90)];

fn fill_range(kind: OcclusionKind) -> [(f64, f64); 3] {
    match kind {
        OcclusionKind::OxygenMask => [(0.70, 0.95); 3],
        OcclusionKind::Tape => [(0.80, 1.0); 3],
        OcclusionKind::Blanket => [(0.55, 0.95); 3],
        OcclusionKind::Tube => [TUBE_WHITE; 3],
        OcclusionKind::Equipment => [EQUIPMENT_GRAY; 3],
        OcclusionKind::Hand => HAND_SKIN,
        OcclusionKind::Shadow => [(0.0, 1.0); 3],
    }
}

/// How an occluder changes the pixels it covers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Effect {
    Fill([f32; 3]),
    /// Multiplies by `1 - intensity·g`, `g` rising from 0.5 at the edge to 1.
    Shade { intensity: f64 },
}

/// Occluder shape in pixel coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Geometry {
    Bezier {
        p0: [f64; 2],
        p1: [f64; 2],
        p2: [f64; 2],
        thickness: f64,
    },
    Ellipse {
        cx: f64,
        cy: f64,
        ax: f64,
        ay: f64,
    },
    RotatedRect {
        cx: f64,
        cy: f64,
        half_w: f64,
        half_h: f64,
        angle: f64,
    },
    /// Ellipse whose radius wobbles with angle.
    Blob {
        cx: f64,
        cy: f64,
        ax: f64,
        ay: f64,
        wobble: [f64; 3],
        phase: [f64; 3],
    },
    /// Points with `(p - origin)·normal > 0`; `ramp` is the depth of full shade.
    HalfPlane {
        origin: [f64; 2],
        normal: [f64; 2],
        ramp: f64,
    },
    Block {
        x0: f64,
        y0: f64,
        x1: f64,
        y1: f64,
    },
    /// Everything below the cubic through `(k·W/3, ys[k])`.
    SplineEdge { width: f64, ys: [f64; 4] },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OcclusionSpec {
    pub kind: OcclusionKind,
    pub geometry: Geometry,
    pub effect: Effect,
}

/// Pixel footprint of one occluder.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    pub mask: Vec<bool>,
    /// Multiplicative factor for shade effects, 1 elsewhere.
    pub factor: Vec<f32>,
}

impl Geometry {
    fn inside(&self, x: f64, y: f64) -> Option<f64> {
        match *self {
            Geometry::Bezier { p0, p1, p2, thickness } => {
                let r = (thickness / 2.0).max(0.5);
                let hit = (0..=200).any(|i| {
                    let t = i as f64 / 200.0;
                    let u = 1.0 - t;
                    let bx = u * u * p0[0] + 2.0 * u * t * p1[0] + t * t * p2[0];
                    let by = u * u * p0[1] + 2.0 * u * t * p1[1] + t * t * p2[1];
                    (bx - x).powi(2) + (by - y).powi(2) <= r * r
                });
                hit.then_some(1.0)
            }
            Geometry::Ellipse { cx, cy, ax, ay } => {
                (((x - cx) / ax).powi(2) + ((y - cy) / ay).powi(2) <= 1.0).then_some(1.0)
            }
            Geometry::RotatedRect {
                cx,
                cy,
                half_w,
                half_h,
                angle,
            } => {
                let (s, c) = angle.sin_cos();
                let (dx, dy) = (x - cx, y - cy);
                let (u, v) = (c * dx + s * dy, -s * dx + c * dy);
                (u.abs() <= half_w && v.abs() <= half_h).then_some(1.0)
            }
            Geometry::Blob {
                cx,
                cy,
                ax,
                ay,
                wobble,
                phase,
            } => {
                let (u, v) = ((x - cx) / ax, (y - cy) / ay);
                let theta = v.atan2(u);
                let r = 1.0
                    + (0..3)
                        .map(|k| wobble[k] * ((k as f64 + 2.0) * theta + phase[k]).sin())
                        .sum::<f64>();
                ((u * u + v * v).sqrt() <= r).then_some(1.0)
            }
            Geometry::HalfPlane { origin, normal, ramp } => {
                let depth = (x - origin[0]) * normal[0] + (y - origin[1]) * normal[1];
                (depth > 0.0).then(|| 0.5 + 0.5 * (depth / ramp).min(1.0))
            }
            Geometry::Block { x0, y0, x1, y1 } => (x >= x0 && x < x1 && y >= y0 && y < y1).then_some(1.0),
            Geometry::SplineEdge { width, ys } => {
                let xs = [0.0, width / 3.0, 2.0 * width / 3.0, width];
                let mut edge = 0.0;
                for i in 0..4 {
                    let mut l = 1.0;
                    for j in 0..4 {
                        if i != j {
                            l *= (x - xs[j]) / (xs[i] - xs[j]);
                        }
                    }
                    edge += ys[i] * l;
                }
                (y >= edge).then_some(1.0)
            }
        }
    }
}

impl OcclusionSpec {
    pub fn rasterize(&self, height: usize, width: usize) -> Raster {
        let mut mask = vec![false; height * width];
        let mut factor = vec![1f32; height * width];
        for y in 0..height {
            for x in 0..width {
                if let Some(g) = self.geometry.inside(x as f64 + 0.5, y as f64 + 0.5) {
                    let i = y * width + x;
                    mask[i] = true;
                    if let Effect::Shade { intensity } = self.effect {
                        factor[i] = (1.0 - intensity * g) as f32;
                    }
                }
            }
        }
        Raster { mask, factor }
    }
}

/// A group of occluders sharing one active window and per-frame visibility.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OcclusionEpisode {
    pub onset: usize,
    pub duration: usize,
    /// Whether the occluders are drawn on frame `onset + i`.
    pub visible: Vec<bool>,
    pub occluders: Vec<OcclusionSpec>,
    pub target_coverage: f64,
    /// Occluded fraction of the face region on frames where drawn.
    pub coverage: f64,
}

impl OcclusionEpisode {
    pub fn drawn_on(&self, frame: usize) -> bool {
        frame >= self.onset && frame < self.onset + self.duration && self.visible[frame - self.onset]
    }
}

fn channel_color(rng: &mut RngStream, ranges: [(f64, f64); 3]) -> [f32; 3] {
    let mut c = [0f32; 3];
    for (v, (lo, hi)) in c.iter_mut().zip(ranges) {
        *v = rng.range(lo, hi) as f32;
    }
    c
}

fn gray(rng: &mut RngStream, (lo, hi): (f64, f64)) -> [f32; 3] {
    [rng.range(lo, hi) as f32; 3]
}

fn propose(kind: OcclusionKind, face: &FaceEllipse, h: usize, w: usize, rng: &mut RngStream) -> OcclusionSpec {
    use std::f64::consts::PI;
    let scale = (h.min(w) as f64 / REFERENCE_SIZE).min(1.0);
    let px = |v: f64| (v * scale).max(1.0);
    let (hf, wf) = (h as f64, w as f64);
    let in_face = |rng: &mut RngStream| {
        let a = rng.range(0.0, 2.0 * PI);
        let r = rng.uniform().sqrt();
        [face.cx + r * face.ax * a.cos(), face.cy + r * face.ay * a.sin()]
    };
    let (geometry, effect) = match kind {
        OcclusionKind::Tube => {
            let (p0, p1, p2) = (in_face(rng), in_face(rng), in_face(rng));
            (
                Geometry::Bezier {
                    p0,
                    p1,
                    p2,
                    thickness: px(rng.range(3.0, 8.0)),
                },
                Effect::Fill(gray(rng, TUBE_WHITE)),
            )
        }
        OcclusionKind::OxygenMask => (
            Geometry::Ellipse {
                cx: face.cx + rng.range(-0.3, 0.3) * face.ax,
                cy: face.cy + rng.range(0.1, 0.7) * face.ay,
                ax: 0.7 * face.ax,
                ay: rng.range(0.25, 0.45) * face.ay,
            },
            Effect::Fill(channel_color(rng, fill_range(kind))),
        ),
        OcclusionKind::Tape => {
            let c = in_face(rng);
            (
                Geometry::RotatedRect {
                    cx: c[0],
                    cy: c[1],
                    half_w: px(rng.range(10.0, 25.0)) / 2.0,
                    half_h: px(rng.range(15.0, 40.0)) / 2.0,
                    angle: rng.range(0.0, PI),
                },
                Effect::Fill(channel_color(rng, fill_range(kind))),
            )
        }
        OcclusionKind::Hand => {
            let y = face.cy + rng.range(-1.0, 1.0) * face.ay;
            let x = face.cx + rng.range(-1.0, 1.0) * face.ax;
            let (cx, cy) = match rng.below(4) {
                0 => (0.0, y),
                1 => (wf, y),
                2 => (x, 0.0),
                _ => (x, hf),
            };
            let glove = rng.bernoulli(0.5);
            (
                Geometry::Blob {
                    cx,
                    cy,
                    ax: rng.range(0.15, 0.35) * wf,
                    ay: rng.range(0.10, 0.25) * hf,
                    wobble: [rng.range(0.0, 0.1), rng.range(0.0, 0.1), rng.range(0.0, 0.1)],
                    phase: [rng.range(0.0, 2.0 * PI), rng.range(0.0, 2.0 * PI), rng.range(0.0, 2.0 * PI)],
                },
                Effect::Fill(channel_color(rng, if glove { HAND_GLOVE } else { HAND_SKIN })),
            )
        }
        OcclusionKind::Shadow => {
            let a = rng.range(0.0, 2.0 * PI);
            let normal = [a.cos(), a.sin()];
            // Edge placed so the shaded side covers a random slice of the face.
            let reach = (face.ax * normal[0]).hypot(face.ay * normal[1]);
            let d = rng.range(0.2, 1.0) * reach;
            let origin = [face.cx + normal[0] * d, face.cy + normal[1] * d];
            (
                Geometry::HalfPlane {
                    origin,
                    normal,
                    ramp: px(8.0),
                },
                Effect::Shade {
                    intensity: rng.range(0.3, 0.7),
                },
            )
        }
        OcclusionKind::Equipment => {
            let bw = rng.range(0.15, 0.30) * wf;
            let bh = rng.range(0.15, 0.30) * hf;
            let c = in_face(rng);
            (
                Geometry::Block {
                    x0: c[0] - bw / 2.0,
                    y0: c[1] - bh / 2.0,
                    x1: c[0] + bw / 2.0,
                    y1: c[1] + bh / 2.0,
                },
                Effect::Fill(gray(rng, EQUIPMENT_GRAY)),
            )
        }
        OcclusionKind::Blanket => {
            let mut ys = [0.0; 4];
            for y in &mut ys {
                *y = face.cy + rng.range(0.3, 1.0) * face.ay;
            }
            (
                Geometry::SplineEdge { width: wf, ys },
                Effect::Fill(channel_color(rng, fill_range(kind))),
            )
        }
    };
    OcclusionSpec { kind, geometry, effect }
}

fn coverage(union: &[bool], face: &[bool], face_px: usize) -> f64 {
    union.iter().zip(face).filter(|(&u, &f)| u && f).count() as f64 / face_px.max(1) as f64
}

/// Draws occluders over `clip` per the schedule at `epoch`. The BVP in the
/// returned metadata is untouched.
pub fn apply_occlusions(
    clip: &VideoClip,
    meta: &ClipMeta,
    epoch: f64,
    sched: &CurriculumSchedule,
    rng: &mut RngStream,
) -> Result<(VideoClip, ClipMeta)> {
    if clip.channels() != 3 {
        return Err(Error::invalid("occlusion needs RGB clips"));
    }
    let (prob, target) = schedule_at(epoch, sched);
    let mut meta = meta.clone();
    if prob <= 0.0 || !rng.bernoulli(prob) {
        return Ok((clip.clone(), meta));
    }
    let (n, h, w) = (clip.frames(), clip.height(), clip.width());
    let face = meta.ellipse.mask(h, w);
    let face_px = face.iter().filter(|&&f| f).count();

    let mut occluders = Vec::new();
    let mut rasters = Vec::new();
    let mut union = vec![false; h * w];
    let mut cov = 0.0;
    let mut attempts = 0;
    while attempts < MAX_ATTEMPTS && cov < target - ACCEPT_BELOW {
        attempts += 1;
        let kind = OcclusionKind::ALL[rng.below(OcclusionKind::ALL.len())];
        let spec = propose(kind, &meta.ellipse, h, w, rng);
        let raster = spec.rasterize(h, w);
        let merged: Vec<bool> = union.iter().zip(&raster.mask).map(|(&a, &b)| a || b).collect();
        let next = coverage(&merged, &face, face_px);
        if next - cov < 0.5 / face_px.max(1) as f64 || next > target + ACCEPT_ABOVE {
            continue;
        }
        union = merged;
        cov = next;
        occluders.push(spec);
        rasters.push(raster);
    }
    if cov < target - ACCEPT_ABOVE {
        let msg = format!(
            "occlusion coverage target {target:.3} unreachable after {MAX_ATTEMPTS} attempts; reached {cov:.3}"
        );
        log::warn!("clip {}: {msg}", meta.seed);
        meta.warnings.push(msg);
    }
    if occluders.is_empty() {
        return Ok((clip.clone(), meta));
    }

    let lo = (0.2 * n as f64).ceil() as usize;
    let hi = ((0.8 * n as f64).floor() as usize).max(lo);
    let duration = lo + rng.below(hi - lo + 1);
    let onset = rng.below(n - duration + 1);
    let visible: Vec<bool> = (0..duration).map(|_| rng.bernoulli(RETENTION)).collect();

    let mut px = clip.pixels.clone();
    let plane = h * w;
    // Shades first so filled occluders keep their exact colour.
    let order: Vec<usize> = (0..occluders.len())
        .filter(|&k| matches!(occluders[k].effect, Effect::Shade { .. }))
        .chain((0..occluders.len()).filter(|&k| matches!(occluders[k].effect, Effect::Fill(_))))
        .collect();
    let data = px.data_mut();
    for (i, &shown) in visible.iter().enumerate() {
        if !shown {
            continue;
        }
        let t = onset + i;
        for &k in &order {
            let r = &rasters[k];
            for c in 0..3 {
                let frame = &mut data[(c * n + t) * plane..(c * n + t + 1) * plane];
                for (j, v) in frame.iter_mut().enumerate() {
                    if r.mask[j] {
                        *v = match occluders[k].effect {
                            Effect::Fill(col) => col[c],
                            Effect::Shade { .. } => *v * r.factor[j],
                        };
                    }
                }
            }
        }
    }
    meta.occlusions.push(OcclusionEpisode {
        onset,
        duration,
        visible,
        occluders,
        target_coverage: target,
        coverage: cov,
    });
    Ok((VideoClip::new(px, clip.fps)?, meta))
}
