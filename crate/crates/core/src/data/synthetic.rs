//! Synthetic face-like videos with injectable forgery artifacts.
//!
//! Every video draws its scene (background, face geometry, motion, colours,
//! cheek tint, sensor noise, landmark jitter) from one random stream and its
//! artifacts from a second stream of the same seed, so a fake is exactly the
//! real render of its seed plus the artifacts.
//!
//! Artifacts:
//! - spatial: a rectangular patch with a colour offset and a hard seam,
//!   attached to the face;
//! - frequency: a low-amplitude checkerboard over the face;
//! - temporal: the cheek tint is redrawn every frame instead of once per
//!   video, so each frame on its own looks like a real frame;
//! - landmark: per-frame coordinate noise unrelated to the render.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{VideoSample, CHANNELS, NUM_LANDMARKS};
use crate::error::{MglError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArtifactKind {
    Spatial,
    Frequency,
    Temporal,
    Landmark,
}

impl ArtifactKind {
    pub const ALL: [ArtifactKind; 4] = [Self::Spatial, Self::Frequency, Self::Temporal, Self::Landmark];
}

/// Artifact magnitudes at severity 1. Pixel quantities are on the `[0, 1]`
/// intensity scale; landmark noise is in pixels of a 64-pixel frame and
/// scales with frame size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArtifactStrengths {
    pub spatial_shift: f64,
    pub frequency_amplitude: f64,
    pub tint_range: f64,
    pub landmark_noise: f64,
    /// Gaussian pixel noise on every sample, real or fake.
    pub sensor_noise: f64,
}

impl Default for ArtifactStrengths {
    fn default() -> Self {
        Self { spatial_shift: 0.3, frequency_amplitude: 0.04, tint_range: 0.3, landmark_noise: 10.0, sensor_noise: 0.02 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticArtifactConfig {
    pub artifact_kinds: Vec<ArtifactKind>,
    pub severity: f64,
    pub rng_seed: u64,
    /// `(height, width)`.
    pub frame_size: (usize, usize),
    pub frames_per_video: usize,
    pub strengths: ArtifactStrengths,
}

impl SyntheticArtifactConfig {
    pub fn new(artifact_kinds: Vec<ArtifactKind>, rng_seed: u64) -> Self {
        Self {
            artifact_kinds,
            severity: 1.0,
            rng_seed,
            frame_size: (64, 64),
            frames_per_video: 8,
            strengths: ArtifactStrengths::default(),
        }
    }

    pub fn validate(&self, label: u8) -> Result<()> {
        if !(self.severity > 0.0 && self.severity <= 1.0) {
            return Err(MglError::Config(format!("severity {} is outside (0, 1]", self.severity)));
        }
        if label > 1 {
            return Err(MglError::Config(format!("label {label} is not 0 or 1")));
        }
        if label == 1 && self.artifact_kinds.is_empty() {
            return Err(MglError::Config("a fake video needs at least one artifact kind".into()));
        }
        let (h, w) = self.frame_size;
        if h < 16 || w < 16 {
            return Err(MglError::Config(format!("frame size {h}x{w} is below the 16x16 minimum")));
        }
        if self.frames_per_video == 0 {
            return Err(MglError::Config("frames_per_video must be at least 1".into()));
        }
        let s = &self.strengths;
        let all = [s.spatial_shift, s.frequency_amplitude, s.tint_range, s.landmark_noise, s.sensor_noise];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(MglError::Config("artifact strengths must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Geometry of the face ellipse in one frame, in pixels.
#[derive(Clone, Copy, Debug)]
struct Face {
    cx: f64,
    cy: f64,
    ax: f64,
    ay: f64,
}

impl Face {
    fn point(&self, u: f64, v: f64) -> (f64, f64) {
        (self.cx + u * self.ax, self.cy + v * self.ay)
    }
}

/// 68-point layout (jaw, brows, nose, eyes, mouth) on an ellipse centred at
/// `(cx, cy)` with semi-axes `(ax, ay)`. Image-left features come first in
/// each symmetric group.
pub fn landmark_template(cx: f64, cy: f64, ax: f64, ay: f64) -> Vec<(f64, f64)> {
    use std::f64::consts::PI;
    let f = Face { cx, cy, ax, ay };
    let mut pts = Vec::with_capacity(NUM_LANDMARKS);
    for i in 0..17 {
        let th = PI - PI * i as f64 / 16.0;
        pts.push(f.point(0.95 * th.cos(), 0.95 * th.sin()));
    }
    for i in 0..5 {
        let u = -0.7 + 0.1375 * i as f64;
        pts.push(f.point(u, -0.45 - 0.06 * (1.0 - ((u + 0.425) / 0.275).powi(2))));
    }
    for i in 0..5 {
        let u = 0.15 + 0.1375 * i as f64;
        pts.push(f.point(u, -0.45 - 0.06 * (1.0 - ((u - 0.425) / 0.275).powi(2))));
    }
    for i in 0..4 {
        pts.push(f.point(0.0, -0.3 + 0.1 * i as f64));
    }
    for i in 0..5 {
        pts.push(f.point(-0.15 + 0.075 * i as f64, 0.12 + 0.03 * (1.0 - ((i as f64 - 2.0) / 2.0).abs())));
    }
    let eye = |pts: &mut Vec<(f64, f64)>, cu: f64, angles: [f64; 6]| {
        for a in angles {
            let r = a.to_radians();
            pts.push(f.point(cu + 0.13 * r.cos(), -0.25 - 0.06 * r.sin()));
        }
    };
    eye(&mut pts, -0.38, [180.0, 135.0, 45.0, 0.0, -45.0, -135.0]);
    eye(&mut pts, 0.38, [180.0, 135.0, 45.0, 0.0, -45.0, -135.0]);
    for k in 0..12 {
        let r = (180.0 - 30.0 * k as f64).to_radians();
        pts.push(f.point(0.35 * r.cos(), 0.45 - 0.1 * r.sin()));
    }
    for k in 0..8 {
        let r = (180.0 - 45.0 * k as f64).to_radians();
        pts.push(f.point(0.25 * r.cos(), 0.45 - 0.05 * r.sin()));
    }
    debug_assert_eq!(pts.len(), NUM_LANDMARKS);
    pts
}

struct Scene {
    background: [f64; 3],
    gradient: (f64, f64),
    skin: [f64; 3],
    tint: [f64; 3],
    tint_side: f64,
    faces: Vec<Face>,
}

fn draw_scene(rng: &mut ChaCha8Rng, cfg: &SyntheticArtifactConfig) -> Scene {
    let (h, w) = cfg.frame_size;
    let (hf, wf) = (h as f64, w as f64);
    let scale = hf.min(wf) / 64.0;
    let background = [rng.random_range(0.1..0.45), rng.random_range(0.1..0.45), rng.random_range(0.1..0.45)];
    let gradient = (rng.random_range(-0.12..0.12), rng.random_range(-0.12..0.12));
    let base = rng.random_range(0.55..0.8);
    let skin = [base + rng.random_range(0.0..0.1), base - rng.random_range(0.0..0.08), base - rng.random_range(0.05..0.18)];
    let r = cfg.strengths.tint_range;
    let tint = [rng.random_range(-r..=r), rng.random_range(-r..=r), rng.random_range(-r..=r)];
    let tint_side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let ax = rng.random_range(14.0..18.0) * scale;
    let ay = rng.random_range(18.0..23.0) * scale;
    let mut cx = wf / 2.0 + rng.random_range(-4.0..4.0) * scale;
    let mut cy = hf / 2.0 + rng.random_range(-3.0..3.0) * scale;
    let vx = rng.random_range(-0.6..0.6) * scale;
    let vy = rng.random_range(-0.4..0.4) * scale;
    let bob = rng.random_range(0.0..1.5) * scale;
    let omega = rng.random_range(0.3..0.9);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let faces = (0..cfg.frames_per_video)
        .map(|t| {
            let tf = t as f64;
            cx += if t == 0 { 0.0 } else { vx };
            cy += if t == 0 { 0.0 } else { vy };
            let breathe = 1.0 + 0.02 * (omega * tf + phase).cos();
            let (fax, fay) = (ax * breathe, ay * breathe);
            Face {
                cx: (cx + bob * (omega * tf + phase).sin()).clamp(fax + 2.0, wf - fax - 2.0),
                cy: cy.clamp(fay + 2.0, hf - fay - 2.0),
                ax: fax,
                ay: fay,
            }
        })
        .collect();
    Scene { background, gradient, skin, tint, tint_side, faces }
}

struct SpatialPatch {
    centre: (f64, f64),
    half: (f64, f64),
    shift: [f64; 3],
}

struct Artifacts {
    spatial: Option<SpatialPatch>,
    checkerboard: f64,
    tints: Option<Vec<[f64; 3]>>,
    landmark_noise: f64,
}

fn draw_artifacts(rng: &mut ChaCha8Rng, cfg: &SyntheticArtifactConfig, scene: &Scene, label: u8) -> Artifacts {
    let mut art = Artifacts { spatial: None, checkerboard: 0.0, tints: None, landmark_noise: 0.0 };
    if label == 0 {
        return art;
    }
    let s = cfg.severity;
    let st = &cfg.strengths;
    let scale = cfg.frame_size.0.min(cfg.frame_size.1) as f64 / 64.0;
    let mut kinds = cfg.artifact_kinds.clone();
    kinds.sort();
    kinds.dedup();
    for kind in kinds {
        match kind {
            ArtifactKind::Spatial => {
                let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                let mut shift = [0.0; 3];
                for c in &mut shift {
                    *c = sign * s * st.spatial_shift * rng.random_range(0.7..1.3);
                }
                art.spatial = Some(SpatialPatch {
                    centre: (rng.random_range(-0.3..0.3), rng.random_range(-0.2..0.3)),
                    half: (rng.random_range(0.3..0.45), rng.random_range(0.2..0.35)),
                    shift,
                });
            }
            ArtifactKind::Frequency => art.checkerboard = s * st.frequency_amplitude,
            ArtifactKind::Temporal => {
                let r = st.tint_range;
                let tints = scene
                    .faces
                    .iter()
                    .map(|_| {
                        let mut t = scene.tint;
                        for v in &mut t {
                            let fresh = rng.random_range(-r..=r);
                            *v += s * (fresh - *v);
                        }
                        t
                    })
                    .collect();
                art.tints = Some(tints);
            }
            ArtifactKind::Landmark => art.landmark_noise = s * st.landmark_noise * scale,
        }
    }
    art
}

fn gaussian(dx: f64, dy: f64, sx: f64, sy: f64) -> f64 {
    (-0.5 * ((dx / sx).powi(2) + (dy / sy).powi(2))).exp()
}

fn render_frame(scene: &Scene, face: &Face, tint: &[f64; 3], art: &Artifacts, h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; CHANNELS * h * w];
    let edge = face.ax.min(face.ay) / 1.5;
    let eyes = [face.point(-0.38, -0.25), face.point(0.38, -0.25)];
    let mouth = face.point(0.0, 0.45);
    let nose = face.point(0.0, 0.1);
    let cheek = face.point(0.45 * scene.tint_side, 0.15);
    let patch = art.spatial.as_ref().map(|p| {
        let (px, py) = face.point(p.centre.0, p.centre.1);
        let (hx, hy) = (p.half.0 * face.ax, p.half.1 * face.ay);
        (px - hx, px + hx, py - hy, py + hy, &p.shift)
    });
    for y in 0..h {
        for x in 0..w {
            let (xf, yf) = (x as f64, y as f64);
            let r = (((xf - face.cx) / face.ax).powi(2) + ((yf - face.cy) / face.ay).powi(2)).sqrt();
            let alpha = (0.5 + (1.0 - r) * edge).clamp(0.0, 1.0);
            let shade = 1.0 - 0.15 * ((xf - face.cx) / face.ax).powi(2);
            let eye = eyes.iter().map(|e| gaussian(xf - e.0, yf - e.1, 0.1 * face.ax, 0.07 * face.ay)).fold(0.0, f64::max);
            let lips = gaussian(xf - mouth.0, yf - mouth.1, 0.25 * face.ax, 0.06 * face.ay);
            let nostril = gaussian(xf - nose.0, yf - nose.1, 0.08 * face.ax, 0.05 * face.ay);
            let glow = gaussian(xf - cheek.0, yf - cheek.1, 0.28 * face.ax, 0.28 * face.ax);
            let check = if (x + y) % 2 == 0 { art.checkerboard } else { -art.checkerboard };
            let (in_patch, on_seam, shift) = match patch {
                Some((x0, x1, y0, y1, shift)) => {
                    let inside = xf >= x0 && xf <= x1 && yf >= y0 && yf <= y1;
                    let seam = inside && (xf - x0 < 1.0 || x1 - xf < 1.0 || yf - y0 < 1.0 || y1 - yf < 1.0);
                    (inside, seam, Some(shift))
                }
                None => (false, false, None),
            };
            for c in 0..CHANNELS {
                let bg = scene.background[c]
                    + scene.gradient.0 * (xf / w as f64 - 0.5)
                    + scene.gradient.1 * (yf / h as f64 - 0.5);
                let mut skin = scene.skin[c] * shade + tint[c] * glow;
                skin += ([0.1, 0.1, 0.15][c] - skin) * 0.7 * eye;
                skin += ([0.55, 0.2, 0.2][c] - skin) * 0.6 * lips;
                skin -= 0.08 * nostril;
                let mut v = bg * (1.0 - alpha) + skin * alpha + check * alpha;
                if let (true, Some(shift)) = (in_patch, shift) {
                    v += if on_seam { -0.5 * shift[c] } else { shift[c] };
                }
                out[(c * h + y) * w + x] = v;
            }
        }
    }
    out
}

/// Renders one video per `config`; a fake carries every listed artifact kind.
pub fn generate_synthetic_video(config: &SyntheticArtifactConfig, label: u8) -> Result<VideoSample> {
    generate_with_id(config, label, format!("synthetic-{:016x}", config.rng_seed))
}

fn generate_with_id(config: &SyntheticArtifactConfig, label: u8, sample_id: String) -> Result<VideoSample> {
    config.validate(label)?;
    let (h, w) = config.frame_size;
    let t_len = config.frames_per_video;
    let mut base = ChaCha8Rng::seed_from_u64(config.rng_seed);
    base.set_stream(0);
    let mut extra = ChaCha8Rng::seed_from_u64(config.rng_seed);
    extra.set_stream(1);

    let scene = draw_scene(&mut base, config);
    let art = draw_artifacts(&mut extra, config, &scene, label);
    let scale = h.min(w) as f64 / 64.0;
    let pixel_noise = Normal::new(0.0, config.strengths.sensor_noise).expect("validated noise level");
    let jitter = Normal::new(0.0, 0.25 * scale).expect("positive jitter");
    let fake_noise = Normal::new(0.0, art.landmark_noise.max(0.0)).expect("non-negative noise");

    let mut frames = Vec::with_capacity(t_len * CHANNELS * h * w);
    let mut landmarks = Vec::with_capacity(t_len * NUM_LANDMARKS * 2);
    for (t, face) in scene.faces.iter().enumerate() {
        let tint = art.tints.as_ref().map_or(&scene.tint, |v| &v[t]);
        let pixels = render_frame(&scene, face, tint, &art, h, w);
        for v in pixels {
            let noisy = v + pixel_noise.sample(&mut base);
            frames.push(noisy.clamp(0.0, 1.0) as f32);
        }
        for (x, y) in landmark_template(face.cx, face.cy, face.ax, face.ay) {
            let (mut x, mut y) = (x + jitter.sample(&mut base), y + jitter.sample(&mut base));
            if art.landmark_noise > 0.0 {
                x += fake_noise.sample(&mut extra);
                y += fake_noise.sample(&mut extra);
            }
            landmarks.push(clamp_coord(x, w));
            landmarks.push(clamp_coord(y, h));
        }
    }
    let sample = VideoSample { sample_id, label, num_frames: t_len, height: h, width: w, frames, landmarks };
    sample.validate()?;
    Ok(sample)
}

fn clamp_coord(v: f64, extent: usize) -> f32 {
    (v.clamp(0.0, (extent - 1) as f64)) as f32
}

/// A labelled synthetic corpus. Each fake carries every kind of
/// `template.artifact_kinds` independently with probability 1/2; a fake that
/// draws none gets one kind chosen uniformly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub num_videos: usize,
    pub fake_fraction: f64,
    pub seed: u64,
    pub id_prefix: String,
    pub template: SyntheticArtifactConfig,
}

/// Per-sample seeds are a SplitMix64 hash of `(seed, index)`.
fn sample_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn generate_dataset(spec: &DatasetSpec) -> Result<Vec<VideoSample>> {
    if !(0.0..=1.0).contains(&spec.fake_fraction) {
        return Err(MglError::Config(format!("fake_fraction {} is outside [0, 1]", spec.fake_fraction)));
    }
    let n_fake = (spec.num_videos as f64 * spec.fake_fraction).round() as usize;
    if n_fake > 0 && spec.template.artifact_kinds.is_empty() {
        return Err(MglError::Config("fakes requested but no artifact kinds configured".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut labels: Vec<u8> = (0..spec.num_videos).map(|i| u8::from(i < n_fake)).collect();
    use rand::seq::SliceRandom;
    labels.shuffle(&mut rng);
    let mut out = Vec::with_capacity(spec.num_videos);
    for (i, &label) in labels.iter().enumerate() {
        let mut cfg = spec.template.clone();
        cfg.rng_seed = sample_seed(spec.seed, i as u64);
        if label == 1 {
            let kinds = &spec.template.artifact_kinds;
            cfg.artifact_kinds = kinds.iter().copied().filter(|_| rng.random_bool(0.5)).collect();
            if cfg.artifact_kinds.is_empty() {
                cfg.artifact_kinds.push(kinds[rng.random_range(0..kinds.len())]);
            }
        }
        out.push(generate_with_id(&cfg, label, format!("{}{i:05}", spec.id_prefix))?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn template_is_mirror_symmetric_about_the_centre() {
        let pts = landmark_template(30.0, 32.0, 15.0, 20.0);
        for (i, &j) in super::super::FLIP_PERMUTATION.iter().enumerate() {
            assert!((pts[i].0 - 30.0 + (pts[j].0 - 30.0)).abs() < 1e-9, "{i} vs {j}");
            assert!((pts[i].1 - pts[j].1).abs() < 1e-9, "{i} vs {j}");
        }
    }

    #[test]
    fn real_render_is_independent_of_requested_kinds() {
        let a = generate_synthetic_video(&SyntheticArtifactConfig::new(vec![ArtifactKind::Spatial], 5), 0).unwrap();
        let b = generate_synthetic_video(&SyntheticArtifactConfig::new(vec![], 5), 0).unwrap();
        assert!(a == b, "real renders differ");
    }

    #[test]
    fn seeds_are_spread() {
        assert_ne!(sample_seed(1, 0), sample_seed(1, 1));
        assert_ne!(sample_seed(1, 0), sample_seed(2, 0));
    }
}
