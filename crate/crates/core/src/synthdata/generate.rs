use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::ActivityClass;
use crate::error::{config_err, Error, Result};

/// Generator settings. Every output is a pure function of this plus a seed.
#[derive(Clone, Debug, PartialEq)]
pub struct GenConfig {
    pub height: usize,
    pub width: usize,
    pub t_raw: usize,
    pub actors_min: usize,
    pub actors_max: usize,
    /// Key-actor speed range in pixels per frame.
    pub speed_min: f64,
    pub speed_max: f64,
    pub radius_min: f64,
    pub radius_max: f64,
    /// Maximum per-frame camera offset in pixels (each axis).
    pub jitter: f64,
    /// Non-key actors wander at this fraction of the key speed.
    pub wander: f64,
    /// Key actors take warm hues and the rest cool ones; otherwise every
    /// actor draws from the full hue circle and only motion tells them apart.
    pub key_palette: bool,
    /// Relative class frequencies used when building datasets.
    pub class_mix: [f64; ActivityClass::COUNT],
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 96,
            t_raw: 24,
            actors_min: 6,
            actors_max: 10,
            speed_min: 1.2,
            speed_max: 2.0,
            radius_min: 3.0,
            radius_max: 4.0,
            jitter: 1.0,
            wander: 0.2,
            key_palette: true,
            class_mix: [1.0; ActivityClass::COUNT],
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.t_raw == 0 {
            return Err(config_err!("frame extents and t_raw must be positive"));
        }
        if self.actors_min == 0 || self.actors_min > self.actors_max {
            return Err(config_err!(
                "actor range {}..={} is empty",
                self.actors_min,
                self.actors_max
            ));
        }
        if !(self.speed_min > 0.0 && self.speed_min <= self.speed_max) {
            return Err(config_err!("bad speed range"));
        }
        if !(self.radius_min > 0.0 && self.radius_min <= self.radius_max) {
            return Err(config_err!("bad radius range"));
        }
        if self.jitter < 0.0 || self.wander < 0.0 {
            return Err(config_err!("jitter and wander must be non-negative"));
        }
        if self.class_mix.iter().any(|w| *w < 0.0) || self.class_mix.iter().sum::<f64>() <= 0.0 {
            return Err(config_err!("class_mix needs non-negative weights with a positive sum"));
        }
        let min_side = (self.height.min(self.width)) as f64;
        if 2.0 * self.radius_max + 2.0 > min_side {
            return Err(config_err!("actors do not fit in a {}x{} frame", self.height, self.width));
        }
        Ok(())
    }
}

/// One rendered disc and its trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct ActorTrack {
    /// Per-frame centre `[x, y]` in pixel coordinates (pixel `i` has centre `i`).
    pub positions: Vec<[f32; 2]>,
    pub radius: f32,
    pub color: [f32; 3],
    /// Whether this actor's motion defines the activity class.
    pub is_key: bool,
}

/// One GroupToy clip.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoSample {
    pub(crate) t_raw: usize,
    pub(crate) height: usize,
    pub(crate) width: usize,
    /// `t_raw × height × width × 3`, values in `[0, 1]`.
    pub(crate) frames: Vec<f32>,
    pub(crate) label: ActivityClass,
    /// `t_raw × height × width` flow magnitudes; absent in inference-only splits.
    pub(crate) gt_flow: Option<Vec<f32>>,
    pub(crate) tracks: Vec<ActorTrack>,
    /// Per-frame whole-image translation `[dx, dy]`.
    pub(crate) camera_jitter: Vec<[f32; 2]>,
}

impl VideoSample {
    pub fn t_raw(&self) -> usize {
        self.t_raw
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn label(&self) -> ActivityClass {
        self.label
    }

    pub fn frames(&self) -> &[f32] {
        &self.frames
    }

    /// RGB frame `t` as `height × width × 3`.
    pub fn frame(&self, t: usize) -> &[f32] {
        let n = self.height * self.width * 3;
        &self.frames[t * n..(t + 1) * n]
    }

    pub fn gt_flow(&self) -> Option<&[f32]> {
        self.gt_flow.as_deref()
    }

    /// Flow magnitude of frame `t` as `height × width`.
    pub fn flow_frame(&self, t: usize) -> Option<&[f32]> {
        let n = self.height * self.width;
        self.gt_flow.as_ref().map(|f| &f[t * n..(t + 1) * n])
    }

    pub fn camera_jitter(&self) -> &[[f32; 2]] {
        &self.camera_jitter
    }

    /// Drops the flow modality, as for an inference-only split.
    pub fn without_flow(mut self) -> Self {
        self.gt_flow = None;
        self
    }

    /// Actor tracks. Evaluation only; nothing on the training path may use
    /// them, which the `eval-tracks` feature gate makes checkable.
    #[cfg(feature = "eval-tracks")]
    pub fn eval_tracks(&self) -> &[ActorTrack] {
        &self.tracks
    }

    /// Binary `grid_h × grid_w` mask (row-major) of attention cells touched by
    /// a key actor's disc at frame `t`, including camera offset.
    #[cfg(feature = "eval-tracks")]
    pub fn key_actor_mask(&self, t: usize, grid_h: usize, grid_w: usize) -> Vec<f64> {
        let (bh, bw) = (self.height as f64 / grid_h as f64, self.width as f64 / grid_w as f64);
        let [jx, jy] = self.camera_jitter[t];
        let mut mask = vec![0.0; grid_h * grid_w];
        for tr in self.tracks.iter().filter(|a| a.is_key) {
            let [x, y] = tr.positions[t];
            let (cx, cy) = (f64::from(x) + f64::from(jx), f64::from(y) + f64::from(jy));
            let r = f64::from(tr.radius);
            for py in 0..self.height {
                for px in 0..self.width {
                    let (dx, dy) = (px as f64 - cx, py as f64 - cy);
                    if dx * dx + dy * dy <= r * r {
                        let gy = ((py as f64 / bh) as usize).min(grid_h - 1);
                        let gx = ((px as f64 / bw) as usize).min(grid_w - 1);
                        mask[gy * grid_w + gx] = 1.0;
                    }
                }
            }
        }
        mask
    }
}

/// Mirror image about the vertical centre line: frames and flow are
/// reversed along the width, track x-coordinates reflect, camera x-offsets
/// change sign, and the label goes through [`ActivityClass::flipped`].
pub fn horizontal_flip(s: &VideoSample) -> VideoSample {
    let (h, w) = (s.height, s.width);
    let mut frames = vec![0.0f32; s.frames.len()];
    for t in 0..s.t_raw {
        for y in 0..h {
            for x in 0..w {
                let src = ((t * h + y) * w + (w - 1 - x)) * 3;
                let dst = ((t * h + y) * w + x) * 3;
                frames[dst..dst + 3].copy_from_slice(&s.frames[src..src + 3]);
            }
        }
    }
    let gt_flow = s.gt_flow.as_ref().map(|f| flip_planes(f, s.t_raw, h, w));
    let wm1 = (w - 1) as f32;
    let tracks = s
        .tracks
        .iter()
        .map(|a| ActorTrack {
            positions: a.positions.iter().map(|&[x, y]| [wm1 - x, y]).collect(),
            ..a.clone()
        })
        .collect();
    VideoSample {
        t_raw: s.t_raw,
        height: h,
        width: w,
        frames,
        label: s.label.flipped(),
        gt_flow,
        tracks,
        camera_jitter: s.camera_jitter.iter().map(|&[x, y]| [-x, y]).collect(),
    }
}

/// Reverses each row of a stack of `planes × h × w` single-channel images.
pub fn flip_planes<T: Copy>(data: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let mut out = data.to_vec();
    for p in 0..planes {
        for y in 0..h {
            let row = &mut out[(p * h + y) * w..(p * h + y + 1) * w];
            row.reverse();
        }
    }
    out
}

/// Renders one clip of `class`.
///
/// Right-oriented classes share their random draws with their left twin and
/// are rendered through the mirror, so `generate_sample(ConvergeRight, s)` is
/// exactly the flip of `generate_sample(ConvergeLeft, s)`.
pub fn generate_sample(class: ActivityClass, cfg: &GenConfig, seed: u64) -> Result<VideoSample> {
    let canonical = if class.is_mirrored_twin() { class.flipped() } else { class };
    let scene = Scene::draw(canonical, cfg, seed)?;
    Ok(scene.render(cfg, class.is_mirrored_twin(), class))
}

/// Renders the mirror world of `generate_sample(class, cfg, seed)`: the same
/// random draws with every x-coordinate reflected before rasterization.
pub fn generate_sample_mirrored(class: ActivityClass, cfg: &GenConfig, seed: u64) -> Result<VideoSample> {
    let canonical = if class.is_mirrored_twin() { class.flipped() } else { class };
    let scene = Scene::draw(canonical, cfg, seed)?;
    Ok(scene.render(cfg, !class.is_mirrored_twin(), class.flipped()))
}

/// Snap to a 1/256 pixel grid so coordinates and their mirrors are exact in `f32`.
fn snap(v: f64) -> f32 {
    ((v * 256.0).round() / 256.0) as f32
}

struct Scene {
    tracks: Vec<ActorTrack>,
    jitter: Vec<[f32; 2]>,
    texture: Texture,
}

struct Texture {
    base: [f64; 3],
    waves: [(f64, f64, f64, f64); 3],
}

impl Texture {
    fn draw(rng: &mut ChaCha8Rng) -> Self {
        let g = rng.gen_range(0.35..0.55);
        let base = [g * rng.gen_range(0.9..1.1), g, g * rng.gen_range(0.9..1.1)];
        let mut waves = [(0.0, 0.0, 0.0, 0.0); 3];
        for w in &mut waves {
            let ang = rng.gen_range(0.0..2.0 * PI);
            let freq = rng.gen_range(0.15..0.6);
            *w = (freq * ang.cos(), freq * ang.sin(), rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.03..0.06));
        }
        Self { base, waves }
    }

    fn shade(&self, u: f64, v: f64) -> f64 {
        1.0 + self
            .waves
            .iter()
            .map(|&(fx, fy, ph, amp)| amp * (fx * u + fy * v + ph).sin())
            .sum::<f64>()
    }
}

impl Scene {
    fn draw(class: ActivityClass, cfg: &GenConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((class.index() as u64 + 1) << 56));
        let (w, h, t_raw) = (cfg.width as f64, cfg.height as f64, cfg.t_raw);
        let n_actors = rng.gen_range(cfg.actors_min..=cfg.actors_max);
        let speed = rng.gen_range(cfg.speed_min..=cfg.speed_max);
        let texture = Texture::draw(&mut rng);

        let radii: Vec<f64> = (0..n_actors)
            .map(|_| rng.gen_range(cfg.radius_min..=cfg.radius_max))
            .collect();
        let r_max = cfg.radius_max;
        let key_paths = key_motion(class, cfg, speed, r_max, &mut rng);
        if key_paths.len() > n_actors {
            return Err(Error::Generation(format!(
                "{class} needs {} key actors but only {n_actors} fit the config",
                key_paths.len()
            )));
        }

        let mut paths: Vec<Vec<[f64; 2]>> = key_paths;
        let n_key = paths.len();
        for _ in n_key..n_actors {
            let start = place(&paths, &radii, r_max, w, h, &mut rng).ok_or_else(|| {
                Error::Generation(format!(
                    "cannot place {n_actors} actors without overlap in a {}x{} frame",
                    cfg.height, cfg.width
                ))
            })?;
            paths.push(wander(start, cfg.wander * speed, t_raw, &mut rng));
        }

        let mut tracks = Vec::with_capacity(n_actors);
        for (i, path) in paths.into_iter().enumerate() {
            let r = radii[i];
            let positions = path
                .into_iter()
                .map(|[x, y]| [snap(x.clamp(r, w - 1.0 - r)), snap(y.clamp(r, h - 1.0 - r))])
                .collect();
            let u: f64 = rng.gen_range(0.0..1.0);
            let hue = match (cfg.key_palette, i < n_key) {
                (false, _) => u,
                (true, true) => 0.12 * u,
                (true, false) => 0.45 + 0.25 * u,
            };
            tracks.push(ActorTrack {
                positions,
                radius: snap(r),
                color: hue_to_rgb(hue),
                is_key: i < n_key,
            });
        }

        let jitter = (0..t_raw)
            .map(|_| {
                if cfg.jitter == 0.0 {
                    [0.0, 0.0]
                } else {
                    [
                        snap(rng.gen_range(-cfg.jitter..=cfg.jitter)),
                        snap(rng.gen_range(-cfg.jitter..=cfg.jitter)),
                    ]
                }
            })
            .collect();
        Ok(Self { tracks, jitter, texture })
    }

    /// Rasterizes the scene. With `mirror`, output column `i` shows canonical
    /// column `width-1-i`, which is exactly the reflected world.
    fn render(&self, cfg: &GenConfig, mirror: bool, label: ActivityClass) -> VideoSample {
        let (h, w, t_raw) = (cfg.height, cfg.width, cfg.t_raw);
        let mut frames = vec![0.0f32; t_raw * h * w * 3];
        let mut flow = vec![0.0f32; t_raw * h * w];
        let disp = |a: &ActorTrack, t: usize| -> [f64; 2] {
            let (t0, t1) = step_pair(t, t_raw);
            let p0 = a.positions[t0];
            let p1 = a.positions[t1];
            [f64::from(p1[0] - p0[0]), f64::from(p1[1] - p0[1])]
        };
        for t in 0..t_raw {
            let [jx, jy] = self.jitter[t];
            let (jx, jy) = (f64::from(jx), f64::from(jy));
            let cam = {
                let (t0, t1) = step_pair(t, t_raw);
                let (a, b) = (self.jitter[t0], self.jitter[t1]);
                [f64::from(b[0] - a[0]), f64::from(b[1] - a[1])]
            };
            let actor_state: Vec<(f64, f64, f64, [f64; 2], [f64; 3])> = self
                .tracks
                .iter()
                .map(|a| {
                    let [x, y] = a.positions[t];
                    let d = disp(a, t);
                    (
                        f64::from(x) + jx,
                        f64::from(y) + jy,
                        f64::from(a.radius),
                        [d[0] + cam[0], d[1] + cam[1]],
                        [f64::from(a.color[0]), f64::from(a.color[1]), f64::from(a.color[2])],
                    )
                })
                .collect();
            for y in 0..h {
                let yf = y as f64;
                for i in 0..w {
                    let ic = if mirror { (w - 1 - i) as f64 } else { i as f64 };
                    let shade = self.texture.shade(ic - jx, yf - jy);
                    let mut rgb = self.texture.base.map(|b| b * shade);
                    let mut d = cam;
                    for &(ax, ay, r, ad, col) in &actor_state {
                        let (dx, dy) = (ic - ax, yf - ay);
                        let dist = (dx * dx + dy * dy).sqrt();
                        let alpha = (r + 0.5 - dist).clamp(0.0, 1.0);
                        if alpha > 0.0 {
                            for c in 0..3 {
                                rgb[c] = alpha * col[c] + (1.0 - alpha) * rgb[c];
                            }
                            d = [alpha * ad[0] + (1.0 - alpha) * d[0], alpha * ad[1] + (1.0 - alpha) * d[1]];
                        }
                    }
                    let px = (t * h + y) * w + i;
                    for c in 0..3 {
                        frames[px * 3 + c] = rgb[c].clamp(0.0, 1.0) as f32;
                    }
                    flow[px] = (d[0] * d[0] + d[1] * d[1]).sqrt() as f32;
                }
            }
        }
        let wm1 = (w - 1) as f32;
        let tracks = self
            .tracks
            .iter()
            .map(|a| ActorTrack {
                positions: if mirror {
                    a.positions.iter().map(|&[x, y]| [wm1 - x, y]).collect()
                } else {
                    a.positions.clone()
                },
                ..a.clone()
            })
            .collect();
        let camera_jitter = if mirror {
            self.jitter.iter().map(|&[x, y]| [-x, y]).collect()
        } else {
            self.jitter.clone()
        };
        VideoSample {
            t_raw,
            height: h,
            width: w,
            frames,
            label,
            gt_flow: Some(flow),
            tracks,
            camera_jitter,
        }
    }
}

/// Frames whose difference defines the displacement at `t`; the last frame
/// repeats the previous step.
fn step_pair(t: usize, t_raw: usize) -> (usize, usize) {
    if t_raw < 2 {
        (0, 0)
    } else if t + 1 < t_raw {
        (t, t + 1)
    } else {
        (t - 1, t)
    }
}

fn hue_to_rgb(hue: f64) -> [f32; 3] {
    let f = |n: f64| {
        let k = (n + hue * 6.0) % 6.0;
        let v = 1.0 - (k.min(4.0 - k).clamp(0.0, 1.0));
        (0.1 + 0.85 * v) as f32
    };
    [f(5.0), f(3.0), f(1.0)]
}

fn unit(theta: f64) -> [f64; 2] {
    [theta.cos(), theta.sin()]
}

fn linear(start: [f64; 2], dir: [f64; 2], speed: f64, t_raw: usize, delay: usize, limit: f64) -> Vec<[f64; 2]> {
    (0..t_raw)
        .map(|t| {
            let s = (speed * t.saturating_sub(delay) as f64).min(limit);
            [start[0] + dir[0] * s, start[1] + dir[1] * s]
        })
        .collect()
}

/// Paths of the key actors for one class, in the canonical orientation.
fn key_motion(class: ActivityClass, cfg: &GenConfig, speed: f64, r: f64, rng: &mut ChaCha8Rng) -> Vec<Vec<[f64; 2]>> {
    let (w, h, t_raw) = (cfg.width as f64, cfg.height as f64, cfg.t_raw);
    let lanes = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..3)
            .map(|k| h * (0.2 + 0.3 * k as f64) + rng.gen_range(-2.0..2.0))
            .collect()
    };
    match class {
        ActivityClass::ConvergeLeft | ActivityClass::ConvergeRight => {
            let target = [rng.gen_range(0.1 * w..0.22 * w), rng.gen_range(0.4 * h..0.6 * h)];
            lanes(rng)
                .into_iter()
                .map(|y| {
                    let start = [rng.gen_range(0.62 * w..0.85 * w), y];
                    let (dx, dy) = (target[0] - start[0], target[1] - start[1]);
                    let d = (dx * dx + dy * dy).sqrt();
                    linear(start, [dx / d, dy / d], speed, t_raw, 0, (d - 2.5 * r).max(0.0))
                })
                .collect()
        }
        ActivityClass::CrossL2R | ActivityClass::CrossR2L => lanes(rng)
            .into_iter()
            .map(|y| {
                let start = [rng.gen_range(r + 1.0..0.22 * w), y];
                linear(start, [1.0, 0.0], speed * 1.2, t_raw, 0, f64::INFINITY)
            })
            .collect(),
        ActivityClass::Scatter | ActivityClass::HuddleBreak => {
            let n = rng.gen_range(3..=4);
            let center = [rng.gen_range(0.38 * w..0.62 * w), rng.gen_range(0.38 * h..0.62 * h)];
            let theta0 = rng.gen_range(0.0..2.0 * PI);
            let (delay, pace) = if class == ActivityClass::Scatter {
                (0, speed)
            } else {
                (t_raw / 2, speed * 1.8)
            };
            (0..n)
                .map(|k| {
                    let dir = unit(theta0 + 2.0 * PI * k as f64 / n as f64);
                    let start = [center[0] + 2.4 * r * dir[0], center[1] + 2.4 * r * dir[1]];
                    linear(start, dir, pace, t_raw, delay, f64::INFINITY)
                })
                .collect()
        }
        ActivityClass::Chase => {
            let dir = unit(rng.gen_range(0.0..2.0 * PI));
            let pace = speed * 1.2;
            let travel = pace * (t_raw.saturating_sub(1)) as f64;
            let gap = 3.0 * r + 2.0;
            let lo = |d: f64| r + 1.0 + (-d * travel).max(0.0) + (d * gap).max(0.0);
            let hi = |extent: f64, d: f64| extent - 2.0 - r - (d * travel).max(0.0) - (-d * gap).max(0.0);
            let pick = |rng: &mut ChaCha8Rng, extent: f64, d: f64| {
                let (a, b) = (lo(d), hi(extent, d));
                if a < b {
                    rng.gen_range(a..b)
                } else {
                    extent / 2.0
                }
            };
            let leader = [pick(rng, w, dir[0]), pick(rng, h, dir[1])];
            let chaser = [leader[0] - dir[0] * gap, leader[1] - dir[1] * gap];
            vec![
                linear(leader, dir, pace, t_raw, 0, f64::INFINITY),
                linear(chaser, dir, pace, t_raw, 0, f64::INFINITY),
            ]
        }
        ActivityClass::LoneRunner => {
            let down = rng.gen_bool(0.5);
            let tilt = rng.gen_range(-PI / 6.0..PI / 6.0);
            let theta = if down { PI / 2.0 + tilt } else { -PI / 2.0 + tilt };
            let dir = unit(theta);
            let pace = (speed * 1.6).min((h - 2.0 * r - 2.0) / (t_raw.max(2) - 1) as f64).max(speed);
            let y0 = if down { r + 1.0 } else { h - 2.0 - r };
            let x0 = rng.gen_range(0.3 * w..0.7 * w);
            vec![linear([x0, y0], dir, pace, t_raw, 0, f64::INFINITY)]
        }
    }
}

/// Rejection-samples a start point clear of every existing actor's start.
fn place(paths: &[Vec<[f64; 2]>], radii: &[f64], r: f64, w: f64, h: f64, rng: &mut ChaCha8Rng) -> Option<[f64; 2]> {
    for _ in 0..2000 {
        let p = [rng.gen_range(r..w - 1.0 - r), rng.gen_range(r..h - 1.0 - r)];
        let clear = paths.iter().zip(radii).all(|(q, &rq)| {
            let (dx, dy) = (p[0] - q[0][0], p[1] - q[0][1]);
            (dx * dx + dy * dy).sqrt() >= r + rq + 1.0
        });
        if clear {
            return Some(p);
        }
    }
    None
}

/// Low-speed random walk with a slowly turning heading.
fn wander(start: [f64; 2], pace: f64, t_raw: usize, rng: &mut ChaCha8Rng) -> Vec<[f64; 2]> {
    let mut heading: f64 = rng.gen_range(0.0..2.0 * PI);
    let mut p = start;
    let mut out = Vec::with_capacity(t_raw);
    for _ in 0..t_raw {
        out.push(p);
        let turn: f64 = rng.sample(StandardNormal);
        heading += 0.4 * turn;
        p = [p[0] + pace * heading.cos(), p[1] + pace * heading.sin()];
    }
    out
}
