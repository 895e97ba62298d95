//! Deterministic synthetic scenes with exact face and gaze ground truth.
//!
//! Faces are bright ellipses with two eye sockets. The pupil inside each
//! socket is displaced by a fixed affine code of the gaze direction, so a
//! network can learn gaze from appearance while the truth stays exact.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::geometry::{iou, BBox};
use crate::image::Frame;

/// Physical layout of the projection surface and the audience.
///
/// Screen coordinates `(u, v)` are normalized to `[0, 1]^2` with `v` pointing
/// down. The screen lies in the plane `z = 0`; viewers sit at `z = D`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScreenGeometry {
    pub width_m: f64,
    pub height_m: f64,
    pub viewer_distance_m: f64,
    /// Physical extent covered by the camera frame at the viewer plane.
    pub audience_width_m: f64,
    pub audience_height_m: f64,
}

impl Default for ScreenGeometry {
    fn default() -> Self {
        Self {
            width_m: 1.6,
            height_m: 0.9,
            viewer_distance_m: 2.0,
            audience_width_m: 1.0,
            audience_height_m: 0.5,
        }
    }
}

pub fn normalize3(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

impl ScreenGeometry {
    /// 3D eye position of a viewer seen at pixel `(px, py)`.
    pub fn eye_position(&self, frame_w: usize, frame_h: usize, px: f64, py: f64) -> [f64; 3] {
        [
            (px / frame_w as f64 - 0.5) * self.audience_width_m,
            (py / frame_h as f64 - 0.5) * self.audience_height_m,
            self.viewer_distance_m,
        ]
    }

    pub fn screen_point(&self, u: f64, v: f64) -> [f64; 3] {
        [(u - 0.5) * self.width_m, (v - 0.5) * self.height_m, 0.0]
    }

    /// Unit gaze vector from `eye` towards screen point `(u, v)`.
    pub fn gaze_to(&self, eye: [f64; 3], u: f64, v: f64) -> [f64; 3] {
        let t = self.screen_point(u, v);
        normalize3([t[0] - eye[0], t[1] - eye[1], t[2] - eye[2]])
    }

    /// Where a gaze ray from `eye` meets the screen, if it points at it.
    pub fn intersect(&self, eye: [f64; 3], g: [f64; 3]) -> Option<(f64, f64)> {
        if g[2] >= 0.0 {
            return None;
        }
        let t = -eye[2] / g[2];
        let x = eye[0] + t * g[0];
        let y = eye[1] + t * g[1];
        Some((x / self.width_m + 0.5, y / self.height_m + 0.5))
    }
}

/// Face layout in units of the face radius `r` (the vertical semi-axis).
pub mod face_code {
    /// Horizontal semi-axis relative to `r`.
    pub const ASPECT: f64 = 0.9;
    pub const EYE_DX: f64 = 0.36;
    pub const EYE_DY: f64 = -0.12;
    pub const SOCKET_R: f64 = 0.24;
    pub const PUPIL_R: f64 = 0.075;
    /// Pupil displacement per unit of gaze-vector component.
    pub const GAIN: f64 = 0.25;
    pub const MAX_TRAVEL: f64 = 0.16;
    pub const MOUTH_DY: f64 = 0.45;
    pub const MOUTH_HALF_W: f64 = 0.25;
    pub const MOUTH_HALF_H: f64 = 0.045;

    /// Pupil displacement `(dx, dy)` in units of `r` for gaze `g`.
    pub fn pupil_offset(g: [f64; 3]) -> (f64, f64) {
        let (dx, dy) = (GAIN * g[0], GAIN * g[1]);
        let n = (dx * dx + dy * dy).sqrt();
        if n > MAX_TRAVEL {
            (dx * MAX_TRAVEL / n, dy * MAX_TRAVEL / n)
        } else {
            (dx, dy)
        }
    }
}

/// Tight bounding box of a face of radius `r` centred at `(cx, cy)`.
pub fn face_bbox(cx: f64, cy: f64, r: f64) -> BBox {
    let rx = face_code::ASPECT * r;
    BBox::new((cx - rx) as f32, (cy - r) as f32, (2.0 * rx) as f32, (2.0 * r) as f32)
}

/// Gaze start in pixels: the midpoint between the eyes.
pub fn gaze_start(cx: f64, cy: f64, r: f64) -> (f64, f64) {
    (cx, cy + face_code::EYE_DY * r)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaceColors {
    pub skin: [u8; 3],
    pub socket: [u8; 3],
    pub pupil: [u8; 3],
    pub mouth: [u8; 3],
}

impl FaceColors {
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let base: f64 = rng.gen_range(175.0..250.0);
        let tint = |k: f64| (base * k).clamp(0.0, 255.0) as u8;
        let skin = [tint(1.0), tint(rng.gen_range(0.8..0.95)), tint(rng.gen_range(0.65..0.85))];
        let s: u8 = rng.gen_range(85..125);
        Self {
            skin,
            socket: [s, s.saturating_sub(8), s.saturating_sub(10)],
            pupil: [rng.gen_range(0..25), rng.gen_range(0..25), rng.gen_range(0..30)],
            mouth: [rng.gen_range(80..130), 40, 45],
        }
    }
}

impl Default for FaceColors {
    fn default() -> Self {
        Self {
            skin: [225, 195, 165],
            socket: [105, 97, 95],
            pupil: [12, 10, 16],
            mouth: [110, 40, 45],
        }
    }
}

/// A flat-coloured background shape.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Shape {
    Rect { x: f64, y: f64, w: f64, h: f64 },
    Ellipse { cx: f64, cy: f64, rx: f64, ry: f64 },
}

impl Shape {
    fn contains(&self, px: f64, py: f64) -> bool {
        match *self {
            Shape::Rect { x, y, w, h } => px >= x && px < x + w && py >= y && py < y + h,
            Shape::Ellipse { cx, cy, rx, ry } => {
                let dx = (px - cx) / rx;
                let dy = (py - cy) / ry;
                dx * dx + dy * dy <= 1.0
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Distractor {
    pub shape: Shape,
    pub color: [u8; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Background {
    pub base: [u8; 3],
    /// Horizontal brightness ramp, added as `gradient * (x / width - 0.5)`.
    pub gradient: f64,
    pub distractors: Vec<Distractor>,
}

impl Default for Background {
    fn default() -> Self {
        Self {
            base: [60, 70, 80],
            gradient: 0.0,
            distractors: Vec::new(),
        }
    }
}

impl Background {
    pub fn random<R: Rng + ?Sized>(rng: &mut R, width: usize, height: usize, max_distractors: usize) -> Self {
        let b = rng.gen_range(20..140);
        let base = [
            b,
            (b as i32 + rng.gen_range(-15..15)).clamp(0, 255) as u8,
            (b as i32 + rng.gen_range(-15..25)).clamp(0, 255) as u8,
        ];
        let n = rng.gen_range(0..=max_distractors);
        let (w, h) = (width as f64, height as f64);
        let distractors = (0..n)
            .map(|_| {
                let cx = rng.gen_range(0.0..w);
                let cy = rng.gen_range(0.0..h);
                let sx = rng.gen_range(4.0..w.min(h) * 0.4);
                let sy = rng.gen_range(4.0..w.min(h) * 0.4);
                let shape = if rng.gen_bool(0.5) {
                    Shape::Rect {
                        x: cx - sx,
                        y: cy - sy,
                        w: 2.0 * sx,
                        h: 2.0 * sy,
                    }
                } else {
                    Shape::Ellipse { cx, cy, rx: sx, ry: sy }
                };
                Distractor {
                    shape,
                    color: [rng.gen(), rng.gen(), rng.gen()],
                }
            })
            .collect();
        Self {
            base,
            gradient: rng.gen_range(-40.0..40.0),
            distractors,
        }
    }
}

/// Piecewise-constant gaze target schedule on the screen.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum GazePath {
    Fixed {
        u: f64,
        v: f64,
    },
    /// `(start_s, u, v)` sorted by start time; the first entry applies before its start.
    Fixations(Vec<(f64, f64, f64)>),
}

impl GazePath {
    pub fn target(&self, t: f64) -> (f64, f64) {
        match self {
            GazePath::Fixed { u, v } => (*u, *v),
            GazePath::Fixations(list) => {
                let mut cur = list.first().map_or((0.5, 0.5), |f| (f.1, f.2));
                for &(start, u, v) in list {
                    if start <= t {
                        cur = (u, v);
                    } else {
                        break;
                    }
                }
                cur
            }
        }
    }
}

/// Face centre path: a base position plus sinusoidal sway.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FacePath {
    pub center: (f64, f64),
    pub amplitude: (f64, f64),
    pub period_s: (f64, f64),
    pub phase: f64,
}

impl FacePath {
    pub fn fixed(cx: f64, cy: f64) -> Self {
        Self {
            center: (cx, cy),
            amplitude: (0.0, 0.0),
            period_s: (1.0, 1.0),
            phase: 0.0,
        }
    }

    pub fn at(&self, t: f64) -> (f64, f64) {
        use std::f64::consts::TAU;
        (
            self.center.0 + self.amplitude.0 * (TAU * t / self.period_s.0 + self.phase).sin(),
            self.center.1 + self.amplitude.1 * (TAU * t / self.period_s.1 + 1.7 * self.phase).sin(),
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PersonSpec {
    pub path: FacePath,
    pub radius: f64,
    pub gaze: GazePath,
    pub colors: FaceColors,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub fps: f64,
    pub screen: ScreenGeometry,
    pub background: Background,
    pub persons: Vec<PersonSpec>,
    /// Standard deviation of additive pixel noise, in 8-bit units.
    pub pixel_noise: f64,
    /// Standard deviation of per-frame gaze jitter, in degrees.
    pub gaze_jitter_deg: f64,
}

/// Ground truth for one rendered face.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaceTruth {
    pub person: usize,
    pub bbox: BBox,
    pub center: (f64, f64),
    pub radius: f64,
    /// Screen point the person is looking at.
    pub target: (f64, f64),
    /// Rendered gaze vector (after jitter).
    pub gaze: [f64; 3],
    /// Gaze start in frame pixels.
    pub start: (f64, f64),
    /// Pupil displacement in pixels.
    pub pupil_offset: (f64, f64),
    /// Overlaps another face in this frame.
    pub occluded: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FrameTruth {
    pub faces: Vec<FaceTruth>,
}

/// Per-face rendering inputs.
#[derive(Clone, Copy, Debug)]
struct FaceDraw {
    cx: f64,
    cy: f64,
    r: f64,
    pupil: (f64, f64),
    colors: FaceColors,
}

impl FaceDraw {
    fn color_at(&self, x: f64, y: f64) -> Option<[u8; 3]> {
        use face_code::*;
        let (dx, dy) = ((x - self.cx) / self.r, (y - self.cy) / self.r);
        if (dx / ASPECT).powi(2) + dy * dy > 1.0 {
            return None;
        }
        for side in [-1.0, 1.0] {
            let ex = dx - side * EYE_DX;
            let ey = dy - EYE_DY;
            if ex * ex + ey * ey <= SOCKET_R * SOCKET_R {
                let px = ex - self.pupil.0;
                let py = ey - self.pupil.1;
                return Some(if px * px + py * py <= PUPIL_R * PUPIL_R {
                    self.colors.pupil
                } else {
                    self.colors.socket
                });
            }
        }
        if dx.abs() <= MOUTH_HALF_W && (dy - MOUTH_DY).abs() <= MOUTH_HALF_H {
            return Some(self.colors.mouth);
        }
        Some(self.colors.skin)
    }

    fn bbox(&self) -> BBox {
        face_bbox(self.cx, self.cy, self.r)
    }
}

const SUPERSAMPLE: usize = 4;

fn background_color(bg: &Background, width: usize, x: f64, y: f64) -> [f64; 3] {
    for d in bg.distractors.iter().rev() {
        if d.shape.contains(x, y) {
            return d.color.map(f64::from);
        }
    }
    let ramp = bg.gradient * (x / width as f64 - 0.5);
    bg.base.map(|c| c as f64 + ramp)
}

/// Renders faces over a background; later faces are painted on top.
fn rasterize(width: usize, height: usize, bg: &Background, faces: &[FaceDraw], noise_sigma: f64, noise_seed: u64) -> Vec<u8> {
    let mut acc = vec![0.0f64; width * height * 3];
    let boxes: Vec<BBox> = faces.iter().map(FaceDraw::bbox).collect();
    let inv = 1.0 / SUPERSAMPLE as f64;
    for y in 0..height {
        for x in 0..width {
            let (fx, fy) = (x as f32, y as f32);
            let near_face = boxes
                .iter()
                .any(|b| fx + 1.0 > b.x && fx < b.right() && fy + 1.0 > b.y && fy < b.bottom());
            let mut c = [0.0; 3];
            if near_face {
                for sy in 0..SUPERSAMPLE {
                    for sx in 0..SUPERSAMPLE {
                        let px = x as f64 + (sx as f64 + 0.5) * inv;
                        let py = y as f64 + (sy as f64 + 0.5) * inv;
                        let col = faces
                            .iter()
                            .rev()
                            .find_map(|f| f.color_at(px, py))
                            .map(|k| k.map(f64::from))
                            .unwrap_or_else(|| background_color(bg, width, px, py));
                        for k in 0..3 {
                            c[k] += col[k];
                        }
                    }
                }
                let n = (SUPERSAMPLE * SUPERSAMPLE) as f64;
                c = c.map(|v| v / n);
            } else {
                c = background_color(bg, width, x as f64 + 0.5, y as f64 + 0.5);
            }
            let i = (y * width + x) * 3;
            acc[i..i + 3].copy_from_slice(&c);
        }
    }
    if noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
        let normal = Normal::new(0.0, noise_sigma).expect("finite sigma");
        for v in &mut acc {
            *v += normal.sample(&mut rng);
        }
    }
    acc.iter().map(|&v| v.round().clamp(0.0, 255.0) as u8).collect()
}

fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Rotates `g` by a random small angle with per-axis deviation `sigma_deg`.
fn jitter_gaze<R: Rng + ?Sized>(g: [f64; 3], sigma_deg: f64, rng: &mut R) -> [f64; 3] {
    if sigma_deg <= 0.0 {
        return g;
    }
    let helper = if g[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
    let e1 = normalize3(cross(g, helper));
    let e2 = cross(g, e1);
    let normal = Normal::new(0.0, sigma_deg.to_radians()).expect("finite sigma");
    let (a, b) = (normal.sample(rng), normal.sample(rng));
    normalize3([
        g[0] + a * e1[0] + b * e2[0],
        g[1] + a * e1[1] + b * e2[1],
        g[2] + a * e1[2] + b * e2[2],
    ])
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

impl SyntheticScene {
    pub fn new(seed: u64, width: usize, height: usize) -> Self {
        Self {
            seed,
            width,
            height,
            fps: 30.0,
            screen: ScreenGeometry::default(),
            background: Background::default(),
            persons: Vec::new(),
            pixel_noise: 0.0,
            gaze_jitter_deg: 0.0,
        }
    }

    /// Exact truth at time `t` without rendering.
    pub fn truth(&self, t: f64) -> FrameTruth {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.seed ^ 0x6A5E, t.to_bits()));
        let mut faces: Vec<FaceTruth> = self
            .persons
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let (cx, cy) = p.path.at(t);
                let r = p.radius;
                let start = gaze_start(cx, cy, r);
                let eye = self.screen.eye_position(self.width, self.height, start.0, start.1);
                let target = p.gaze.target(t);
                let g = jitter_gaze(self.screen.gaze_to(eye, target.0, target.1), self.gaze_jitter_deg, &mut rng);
                let (ox, oy) = face_code::pupil_offset(g);
                FaceTruth {
                    person: i,
                    bbox: face_bbox(cx, cy, r),
                    center: (cx, cy),
                    radius: r,
                    target,
                    gaze: g,
                    start,
                    pupil_offset: (ox * r, oy * r),
                    occluded: false,
                }
            })
            .collect();
        for i in 0..faces.len() {
            let hit = (0..faces.len()).any(|j| j != i && iou(&faces[i].bbox, &faces[j].bbox) > 0.0);
            faces[i].occluded = hit;
        }
        FrameTruth { faces }
    }

    /// Renders the frame at time `t` (seconds) together with its truth.
    pub fn render_frame(&self, t: f64) -> (Frame, FrameTruth) {
        assert!(t >= 0.0, "time must be non-negative");
        let truth = self.truth(t);
        let draws: Vec<FaceDraw> = truth
            .faces
            .iter()
            .map(|f| FaceDraw {
                cx: f.center.0,
                cy: f.center.1,
                r: f.radius,
                pupil: (f.pupil_offset.0 / f.radius, f.pupil_offset.1 / f.radius),
                colors: self.persons[f.person].colors,
            })
            .collect();
        let rgb = rasterize(
            self.width,
            self.height,
            &self.background,
            &draws,
            self.pixel_noise,
            mix_seed(self.seed, t.to_bits()),
        );
        let mut frame = Frame::new(self.width, self.height, rgb);
        frame.index = (t * self.fps).round() as u64;
        frame.timestamp_ms = (t * 1000.0).round() as u64;
        (frame, truth)
    }

    /// Renders frame number `index` at the scene frame rate.
    pub fn render_index(&self, index: u64) -> (Frame, FrameTruth) {
        let (mut frame, truth) = self.render_frame(index as f64 / self.fps);
        frame.index = index;
        (frame, truth)
    }

    /// A seated audience in a grid with gentle sway, all following the
    /// shared `attention` schedule.
    pub fn audience(seed: u64, width: usize, height: usize, n_persons: usize, attention: GazePath) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0xA0D1));
        let mut scene = Self::new(seed, width, height);
        scene.background = Background::random(&mut rng, width, height, 0);
        scene.pixel_noise = 2.0;
        let cols = (n_persons as f64).sqrt().ceil().max(1.0) as usize;
        let rows = n_persons.div_ceil(cols).max(1);
        let cell_w = width as f64 / cols as f64;
        let cell_h = height as f64 / rows as f64;
        let radius = (0.32 * cell_w.min(cell_h / 1.1)).clamp(8.0, 45.0);
        for i in 0..n_persons {
            let (c, r) = (i % cols, i / cols);
            let cx = (c as f64 + 0.5) * cell_w + rng.gen_range(-0.06..0.06) * cell_w;
            let cy = (r as f64 + 0.5) * cell_h + rng.gen_range(-0.05..0.05) * cell_h;
            scene.persons.push(PersonSpec {
                path: FacePath {
                    center: (cx, cy),
                    amplitude: (rng.gen_range(0.04..0.1) * radius, rng.gen_range(0.02..0.06) * radius),
                    period_s: (rng.gen_range(3.0..6.0), rng.gen_range(4.0..8.0)),
                    phase: rng.gen_range(0.0..std::f64::consts::TAU),
                },
                radius: radius * rng.gen_range(0.92..1.08),
                gaze: attention.clone(),
                colors: FaceColors::random(&mut rng),
            });
        }
        scene
    }
}

/// Random fixation schedule: a new uniformly drawn target every `dwell_s`.
pub fn random_fixations(seed: u64, count: usize, dwell_s: f64, margin: f64) -> GazePath {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0xF1C5));
    GazePath::Fixations(
        (0..count)
            .map(|i| {
                (
                    i as f64 * dwell_s,
                    rng.gen_range(margin..1.0 - margin),
                    rng.gen_range(margin..1.0 - margin),
                )
            })
            .collect(),
    )
}

/// Parameters of the detection corpus generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionCorpusConfig {
    pub width: usize,
    pub height: usize,
    /// Range of face heights `2r` in pixels.
    pub face_height: (f64, f64),
    pub max_distractors: usize,
    pub max_noise: f64,
}

impl Default for DetectionCorpusConfig {
    fn default() -> Self {
        Self {
            width: 192,
            height: 144,
            face_height: (40.0, 84.0),
            max_distractors: 4,
            max_noise: 4.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledFrame {
    pub frame: Frame,
    pub truth: FrameTruth,
}

impl LabeledFrame {
    pub fn boxes(&self) -> Vec<BBox> {
        self.truth.faces.iter().map(|f| f.bbox).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectionCorpus {
    pub train: Vec<LabeledFrame>,
    pub test: Vec<LabeledFrame>,
}

/// Samples one static scene with non-overlapping faces fully inside the frame.
pub fn random_static_scene(seed: u64, cfg: &DetectionCorpusConfig, faces: std::ops::RangeInclusive<usize>) -> SyntheticScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (cfg.width as f64, cfg.height as f64);
    let want = rng.gen_range(faces.clone());
    let mut scene = SyntheticScene::new(seed, cfg.width, cfg.height);
    scene.background = Background::random(&mut rng, cfg.width, cfg.height, cfg.max_distractors);
    scene.pixel_noise = rng.gen_range(0.0..=cfg.max_noise);
    'attempt: loop {
        scene.persons.clear();
        let mut boxes: Vec<BBox> = Vec::new();
        for _ in 0..want {
            let mut placed = false;
            for _ in 0..100 {
                let hmax = cfg.face_height.1.min(h - 2.0).max(cfg.face_height.0);
                let r = rng.gen_range(cfg.face_height.0..=hmax) / 2.0;
                let rx = face_code::ASPECT * r;
                if 2.0 * rx + 2.0 > w || 2.0 * r + 2.0 > h {
                    continue;
                }
                let cx = rng.gen_range(rx + 1.0..w - rx - 1.0);
                let cy = rng.gen_range(r + 1.0..h - r - 1.0);
                let b = face_bbox(cx, cy, r);
                let grown = BBox::new(b.x - 4.0, b.y - 4.0, b.w + 8.0, b.h + 8.0);
                if boxes.iter().any(|o| grown.intersection(o).is_some()) {
                    continue;
                }
                boxes.push(b);
                scene.persons.push(PersonSpec {
                    path: FacePath::fixed(cx, cy),
                    radius: r,
                    gaze: GazePath::Fixed {
                        u: rng.gen_range(0.0..1.0),
                        v: rng.gen_range(0.0..1.0),
                    },
                    colors: FaceColors::random(&mut rng),
                });
                placed = true;
                break;
            }
            if !placed {
                continue 'attempt;
            }
        }
        break;
    }
    // Distractors must not hide faces.
    let face_boxes: Vec<BBox> = scene
        .persons
        .iter()
        .map(|p| face_bbox(p.path.center.0, p.path.center.1, p.radius))
        .collect();
    scene.background.distractors.retain(|d| {
        let b = match d.shape {
            Shape::Rect { x, y, w, h } => BBox::new(x as f32, y as f32, w as f32, h as f32),
            Shape::Ellipse { cx, cy, rx, ry } => BBox::new((cx - rx) as f32, (cy - ry) as f32, (2.0 * rx) as f32, (2.0 * ry) as f32),
        };
        face_boxes.iter().all(|f| f.intersection(&b).is_none())
    });
    scene
}

/// Detection corpus with the default frame layout.
pub fn gen_detection_corpus(n_frames: usize, faces_per_frame: std::ops::RangeInclusive<usize>, seed: u64) -> DetectionCorpus {
    gen_detection_corpus_with(&DetectionCorpusConfig::default(), n_frames, faces_per_frame, seed)
}

/// Renders `n_frames` labeled frames and splits them 80/20 by a seeded shuffle.
pub fn gen_detection_corpus_with(
    cfg: &DetectionCorpusConfig,
    n_frames: usize,
    faces_per_frame: std::ops::RangeInclusive<usize>,
    seed: u64,
) -> DetectionCorpus {
    let frames: Vec<LabeledFrame> = (0..n_frames)
        .map(|i| {
            let scene = random_static_scene(mix_seed(seed, i as u64), cfg, faces_per_frame.clone());
            let (mut frame, truth) = scene.render_frame(0.0);
            frame.index = i as u64;
            LabeledFrame { frame, truth }
        })
        .collect();
    let mut order: Vec<usize> = (0..n_frames).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x5911));
    use rand::seq::SliceRandom;
    order.shuffle(&mut rng);
    let n_train = n_frames * 4 / 5;
    let mut slots: Vec<Option<LabeledFrame>> = frames.into_iter().map(Some).collect();
    let mut take = |idx: &[usize]| -> Vec<LabeledFrame> {
        let mut idx = idx.to_vec();
        idx.sort_unstable();
        idx.iter().map(|&i| slots[i].take().expect("index used once")).collect()
    };
    let train = take(&order[..n_train]);
    let test = take(&order[n_train..]);
    DetectionCorpus { train, test }
}

/// One labeled gaze crop.
#[derive(Clone, Debug, PartialEq)]
pub struct GazeExample {
    /// `100 x 100` luma in `[0, 1]`, row-major.
    pub pixels: Vec<f32>,
    /// Gaze start in crop-normalized coordinates.
    pub start: (f64, f64),
    pub gaze: [f64; 3],
    /// `false` for face-free crops used to teach low confidence.
    pub has_face: bool,
}

/// Parameters of the gaze crop generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GazeCorpusConfig {
    /// Range of face radii in frame pixels.
    pub radius: (f64, f64),
    /// Box edge relative to the face height `2r`.
    pub box_scale: (f64, f64),
    /// Box centre jitter relative to the box edge.
    pub center_jitter: f64,
    pub max_noise: f64,
    /// Fraction of crops without a face.
    pub blank_fraction: f64,
    pub screen: ScreenGeometry,
}

impl Default for GazeCorpusConfig {
    fn default() -> Self {
        Self {
            radius: (18.0, 45.0),
            box_scale: (0.85, 1.2),
            center_jitter: 0.12,
            max_noise: 3.0,
            blank_fraction: 0.05,
            screen: ScreenGeometry::default(),
        }
    }
}

/// Renders one face at a random gaze and crops it through a jittered
/// detector-like box.
pub fn gen_gaze_example(cfg: &GazeCorpusConfig, seed: u64) -> GazeExample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = rng.gen_range(cfg.radius.0..=cfg.radius.1);
    let edge = 2.0 * r * rng.gen_range(cfg.box_scale.0..=cfg.box_scale.1);
    let size = (edge * 1.6 + 8.0).ceil() as usize;
    let (cx, cy) = (size as f64 / 2.0, size as f64 / 2.0);
    // Viewer anywhere in the audience, looking anywhere on the screen.
    let eye = [
        rng.gen_range(-0.5..0.5) * cfg.screen.audience_width_m,
        rng.gen_range(-0.5..0.5) * cfg.screen.audience_height_m,
        cfg.screen.viewer_distance_m,
    ];
    let g = cfg.screen.gaze_to(eye, rng.gen_range(-0.05..1.05), rng.gen_range(-0.05..1.05));
    let mut scene = SyntheticScene::new(seed, size, size);
    scene.background = Background::random(&mut rng, size, size, 3);
    scene.pixel_noise = rng.gen_range(0.0..=cfg.max_noise);
    let has_face = !rng.gen_bool(cfg.blank_fraction);
    let colors = FaceColors::random(&mut rng);
    let jx = rng.gen_range(-cfg.center_jitter..=cfg.center_jitter) * edge;
    let jy = rng.gen_range(-cfg.center_jitter..=cfg.center_jitter) * edge;
    let pupil = face_code::pupil_offset(g);
    let faces = if has_face {
        vec![FaceDraw { cx, cy, r, pupil, colors }]
    } else {
        Vec::new()
    };
    let rgb = rasterize(size, size, &scene.background, &faces, scene.pixel_noise, mix_seed(seed, 1));
    let frame = Frame::new(size, size, rgb);
    let bbox = BBox::from_center((cx + jx) as f32, (cy + jy) as f32, edge as f32, edge as f32);
    let crop = crate::gaze::extract_crop(&frame, &bbox).expect("box lies inside the rendered frame");
    let (sx, sy) = gaze_start(cx, cy, r);
    let b = crop.source_bbox;
    GazeExample {
        pixels: crop.pixels,
        start: ((sx - b.x as f64) / b.w as f64, (sy - b.y as f64) / b.h as f64),
        gaze: g,
        has_face,
    }
}

pub fn gen_gaze_corpus(n_crops: usize, seed: u64) -> Vec<GazeExample> {
    gen_gaze_corpus_with(&GazeCorpusConfig::default(), n_crops, seed)
}

pub fn gen_gaze_corpus_with(cfg: &GazeCorpusConfig, n_crops: usize, seed: u64) -> Vec<GazeExample> {
    (0..n_crops).map(|i| gen_gaze_example(cfg, mix_seed(seed, i as u64))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn centered_face_looking_at_centre_has_zero_pupil_offset() {
        let mut scene = SyntheticScene::new(1, 200, 100);
        let r = 30.0;
        // Place the eye midpoint at the frame centre.
        let cy = 50.0 - face_code::EYE_DY * r;
        scene.persons.push(PersonSpec {
            path: FacePath::fixed(100.0, cy),
            radius: r,
            gaze: GazePath::Fixed { u: 0.5, v: 0.5 },
            colors: FaceColors::default(),
        });
        let f = &scene.truth(0.0).faces[0];
        assert_eq!(f.gaze, [0.0, 0.0, -1.0]);
        assert_eq!(f.pupil_offset, (0.0, 0.0));
    }

    #[test]
    fn intersect_inverts_gaze_to() {
        let s = ScreenGeometry::default();
        let eye = [0.3, -0.1, s.viewer_distance_m];
        let g = s.gaze_to(eye, 0.2, 0.7);
        let (u, v) = s.intersect(eye, g).unwrap();
        assert!((u - 0.2).abs() < 1e-12 && (v - 0.7).abs() < 1e-12);
    }

    #[test]
    fn fixations_switch_at_start_times() {
        let p = GazePath::Fixations(vec![(0.0, 0.1, 0.1), (1.0, 0.9, 0.2)]);
        assert_eq!(p.target(0.5), (0.1, 0.1));
        assert_eq!(p.target(1.0), (0.9, 0.2));
    }

    #[test]
    fn pupil_travel_is_clamped() {
        let (dx, dy) = face_code::pupil_offset([0.8, 0.6, 0.0]);
        assert!(((dx * dx + dy * dy).sqrt() - face_code::MAX_TRAVEL).abs() < 1e-12);
    }
}
