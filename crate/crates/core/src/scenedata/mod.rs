//! Synthetic crowd clips with ground truth, the motion and structure cue
//! channels derived from them, and on-disk datasets.
//!
//! A scene is a fixed camera view: background texture and perspective. Each
//! clip in a scene is a short frame sequence of elliptical, textured
//! pedestrians (some stationary, some walking) plus moving non-crowd
//! distractors. One frame per clip is labelled.

mod cues;
mod dataset;
mod pnm;
mod raster;

pub use cues::{cue_stack, edge_channel, motion_channel, motion_channel_at, Cue};
pub use dataset::{build_dataset, load_clip, ClipEntry, LoadedClip, SceneEntry, SceneManifest, Split, SplitRatios, MANIFEST_VERSION};
pub use pnm::{read_pgm, write_pgm, write_ppm};
pub use raster::{point_in_polygon, rasterize_polygons, Polygon};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Texture {
    Flat,
    Stripes,
    Blobs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    /// Pedestrians per 10 000 pixels.
    pub density: f64,
    pub fraction_stationary: f64,
    /// Pedestrian height at the bottom row relative to the top row.
    pub perspective: f64,
    pub texture: Texture,
    pub distractors: usize,
    /// Per-frame uniform pixel noise is drawn from `[-noise, noise]`.
    pub noise: f64,
    /// Seed for the background, shared by all clips of one scene.
    pub background_seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            seed: 0,
            height: 96,
            width: 128,
            frames: 10,
            density: 8.0,
            fraction_stationary: 0.3,
            perspective: 2.0,
            texture: Texture::Stripes,
            distractors: 2,
            noise: 0.02,
            background_seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(m));
        if self.frames < 2 {
            return bad(format!("a clip needs at least 2 frames, got {}", self.frames));
        }
        if self.height % 4 != 0 || self.width % 4 != 0 {
            return bad(format!("frame size {}x{} must be divisible by 4", self.height, self.width));
        }
        if self.height < 54 || self.width < 54 {
            return bad(format!("frame size {}x{} is below the 54-pixel receptive field", self.height, self.width));
        }
        if !(self.density >= 0.0 && self.density.is_finite()) {
            return bad(format!("density must be non-negative, got {}", self.density));
        }
        if !(0.0..=1.0).contains(&self.fraction_stationary) {
            return bad(format!("fraction stationary must lie in [0, 1], got {}", self.fraction_stationary));
        }
        if !(self.perspective > 0.0) {
            return bad(format!("perspective factor must be positive, got {}", self.perspective));
        }
        if !(0.0..0.5).contains(&self.noise) {
            return bad(format!("noise must lie in [0, 0.5), got {}", self.noise));
        }
        Ok(())
    }

    fn shape(&self) -> Shape {
        Shape::new(1, self.height, self.width)
    }
}

/// Ellipse occupied by one pedestrian in the labelled frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PedestrianRecord {
    pub cx: f64,
    pub cy: f64,
    pub rx: f64,
    pub ry: f64,
    pub stationary: bool,
}

impl PedestrianRecord {
    /// Whether the centre of pixel `(y, x)` lies inside the ellipse.
    pub fn covers(&self, y: usize, x: usize) -> bool {
        let dx = (x as f64 + 0.5 - self.cx) / self.rx;
        let dy = (y as f64 + 0.5 - self.cy) / self.ry;
        dx * dx + dy * dy <= 1.0
    }

    /// Rough octagonal outline, slightly larger than the ellipse.
    pub fn outline(&self) -> Polygon {
        (0..8)
            .map(|i| {
                let a = std::f64::consts::PI * (i as f64) / 4.0 + std::f64::consts::PI / 8.0;
                let s = 1.12;
                (self.cx + s * self.rx * a.cos(), self.cy + s * self.ry * a.sin())
            })
            .collect()
    }
}

/// A generated clip with both label styles.
#[derive(Debug, Clone, PartialEq)]
pub struct Clip {
    pub frames: Vec<Tensor>,
    pub label_frame_index: usize,
    /// Pixel-level truth at the labelled frame.
    pub mask: Tensor,
    /// Region-level outlines at the labelled frame.
    pub polygons: Vec<Polygon>,
    pub pedestrians: Vec<PedestrianRecord>,
}

impl Clip {
    pub fn label_frame(&self) -> &Tensor {
        &self.frames[self.label_frame_index]
    }
}

#[derive(Debug, Clone)]
struct Agent {
    cx: f64,
    cy: f64,
    vx: f64,
    vy: f64,
    level: f64,
    phase: f64,
    stationary: bool,
}

#[derive(Debug, Clone)]
struct Distractor {
    cx: f64,
    cy: f64,
    vx: f64,
    vy: f64,
    half_w: f64,
    half_h: f64,
    level: f64,
}

const BASE_HEIGHT: f64 = 12.0;
const STRIPE_PERIOD: f64 = 3.0;
const STRIPE_AMPLITUDE: f64 = 0.14;
const HEAD_LEVEL: f64 = 0.18;

fn scale_at(config: &SceneConfig, y: f64) -> f64 {
    1.0 + (config.perspective - 1.0) * (y / config.height as f64).clamp(0.0, 1.0)
}

fn radii(config: &SceneConfig, cy: f64) -> (f64, f64) {
    let h = BASE_HEIGHT * scale_at(config, cy);
    (0.2 * h, 0.5 * h)
}

/// Background for one scene; depends only on `texture`, size and `background_seed`.
pub fn render_background(config: &SceneConfig) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(config.background_seed);
    let (h, w) = (config.height as f64, config.width as f64);
    match config.texture {
        Texture::Flat => {
            let gy = rng.gen_range(-0.06..0.06);
            let gx = rng.gen_range(-0.06..0.06);
            Tensor::from_fn(config.shape(), |_, y, x| 0.5 + gy * (y as f64 / h - 0.5) + gx * (x as f64 / w - 0.5))
        }
        Texture::Stripes => {
            let period = rng.gen_range(10.0..24.0);
            let angle: f64 = rng.gen_range(0.0..std::f64::consts::PI);
            let amp = rng.gen_range(0.08..0.16);
            let (c, s) = (angle.cos(), angle.sin());
            Tensor::from_fn(config.shape(), |_, y, x| {
                let t = (x as f64 * c + y as f64 * s) / period;
                0.5 + amp * (2.0 * std::f64::consts::PI * t).sin()
            })
        }
        Texture::Blobs => {
            let blobs: Vec<(f64, f64, f64, f64)> = (0..rng.gen_range(6..12))
                .map(|_| {
                    (
                        rng.gen_range(0.0..h),
                        rng.gen_range(0.0..w),
                        rng.gen_range(8.0..20.0),
                        rng.gen_range(-0.22..0.22),
                    )
                })
                .collect();
            Tensor::from_fn(config.shape(), |_, y, x| {
                let v: f64 = blobs
                    .iter()
                    .map(|&(by, bx, s, a)| {
                        let d2 = (y as f64 - by).powi(2) + (x as f64 - bx).powi(2);
                        a * (-d2 / (2.0 * s * s)).exp()
                    })
                    .sum();
                (0.5 + v).clamp(0.0, 1.0)
            })
        }
    }
}

fn spawn_agents(config: &SceneConfig, rng: &mut ChaCha8Rng) -> Vec<Agent> {
    let (h, w) = (config.height as f64, config.width as f64);
    let count = (config.density * h * w / 10_000.0).round() as usize;
    if count == 0 {
        return Vec::new();
    }
    let groups: Vec<(f64, f64)> = (0..count.div_ceil(5))
        .map(|_| (rng.gen_range(0.15 * h..0.9 * h), rng.gen_range(0.1 * w..0.9 * w)))
        .collect();
    (0..count)
        .map(|i| {
            let (gy, gx) = groups[i % groups.len()];
            let stationary = rng.gen_bool(config.fraction_stationary);
            let (vx, vy) = if stationary {
                (0.0, 0.0)
            } else {
                let speed = rng.gen_range(0.8..1.8);
                let dir: f64 = if rng.gen_bool(0.5) { 0.0 } else { std::f64::consts::PI };
                let a = dir + rng.gen_range(-0.4..0.4);
                (speed * a.cos(), speed * a.sin())
            };
            Agent {
                cy: (gy + rng.gen_range(-14.0..14.0)).clamp(0.0, h - 1.0),
                cx: (gx + rng.gen_range(-20.0..20.0)).clamp(0.0, w - 1.0),
                vx,
                vy,
                level: rng.gen_range(0.15..0.85),
                phase: rng.gen_range(0.0..std::f64::consts::TAU),
                stationary,
            }
        })
        .collect()
}

fn spawn_distractors(config: &SceneConfig, rng: &mut ChaCha8Rng) -> Vec<Distractor> {
    let (h, w) = (config.height as f64, config.width as f64);
    (0..config.distractors)
        .map(|_| {
            let cy = rng.gen_range(0.1 * h..0.9 * h);
            let s = scale_at(config, cy);
            let speed = rng.gen_range(1.5..3.0);
            let dir = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            Distractor {
                cx: rng.gen_range(0.0..w),
                cy,
                vx: dir * speed,
                vy: rng.gen_range(-0.3..0.3),
                half_w: rng.gen_range(8.0..14.0) * s,
                half_h: rng.gen_range(4.0..7.0) * s,
                level: rng.gen_range(0.2..0.8),
            }
        })
        .collect()
}

fn agent_at(config: &SceneConfig, a: &Agent, dt: f64) -> PedestrianRecord {
    let cx = a.cx + a.vx * dt;
    let cy = a.cy + a.vy * dt;
    let (rx, ry) = radii(config, cy);
    PedestrianRecord { cx, cy, rx, ry, stationary: a.stationary }
}

fn draw_pedestrian(frame: &mut Tensor, rec: &PedestrianRecord, agent: &Agent) {
    let (h, w) = (frame.height() as isize, frame.width() as isize);
    let y0 = ((rec.cy - rec.ry).floor() as isize).max(0);
    let y1 = ((rec.cy + rec.ry).ceil() as isize).min(h - 1);
    let x0 = ((rec.cx - rec.rx).floor() as isize).max(0);
    let x1 = ((rec.cx + rec.rx).ceil() as isize).min(w - 1);
    for y in y0..=y1 {
        for x in x0..=x1 {
            let (yu, xu) = (y as usize, x as usize);
            if !rec.covers(yu, xu) {
                continue;
            }
            let rel = (y as f64 + 0.5 - rec.cy) / rec.ry;
            let v = if rel < -0.6 {
                HEAD_LEVEL
            } else {
                let t = (y as f64 + 0.5 - rec.cy) / STRIPE_PERIOD * std::f64::consts::TAU + agent.phase;
                agent.level + STRIPE_AMPLITUDE * t.sin()
            };
            frame.set(0, yu, xu, v);
        }
    }
}

fn draw_distractor(frame: &mut Tensor, d: &Distractor, dt: f64) {
    let cx = d.cx + d.vx * dt;
    let cy = d.cy + d.vy * dt;
    let (h, w) = (frame.height(), frame.width());
    for y in 0..h {
        let fy = y as f64 + 0.5;
        if (fy - cy).abs() > d.half_h {
            continue;
        }
        for x in 0..w {
            if (x as f64 + 0.5 - cx).abs() <= d.half_w {
                frame.set(0, y, x, d.level);
            }
        }
    }
}

/// Render one clip. Deterministic in `config` (including its seed).
pub fn generate_clip(config: &SceneConfig) -> Result<Clip> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let label_frame_index = rng.gen_range(0..config.frames);
    let mut agents = spawn_agents(config, &mut rng);
    // far (top) pedestrians first so nearer ones occlude them
    agents.sort_by(|a, b| a.cy.total_cmp(&b.cy));
    let distractors = spawn_distractors(config, &mut rng);
    let background = render_background(config);

    let mut frames = Vec::with_capacity(config.frames);
    for t in 0..config.frames {
        let dt = t as f64 - label_frame_index as f64;
        let mut frame = background.clone();
        for d in &distractors {
            draw_distractor(&mut frame, d, dt);
        }
        let mut placed: Vec<(PedestrianRecord, &Agent)> = agents.iter().map(|a| (agent_at(config, a, dt), a)).collect();
        placed.sort_by(|a, b| a.0.cy.total_cmp(&b.0.cy));
        for (rec, agent) in &placed {
            draw_pedestrian(&mut frame, rec, agent);
        }
        for v in frame.data_mut() {
            let n = if config.noise > 0.0 { rng.gen_range(-config.noise..=config.noise) } else { 0.0 };
            *v = (*v + n).clamp(0.0, 1.0);
        }
        frames.push(frame);
    }

    let pedestrians: Vec<PedestrianRecord> = agents.iter().map(|a| agent_at(config, a, 0.0)).collect();
    let mask = Tensor::from_fn(config.shape(), |_, y, x| {
        if pedestrians.iter().any(|p| p.covers(y, x)) {
            1.0
        } else {
            0.0
        }
    });
    let polygons = pedestrians.iter().map(PedestrianRecord::outline).collect();
    Ok(Clip { frames, label_frame_index, mask, polygons, pedestrians })
}
