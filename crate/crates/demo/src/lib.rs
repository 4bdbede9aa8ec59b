//! Browser bindings for three operations of the core crate: render a
//! synthetic clip, turn its flow into attention-grid guidance maps, and
//! mirror it with the label swap.

use wasm_bindgen::prelude::*;

use flaming::flowproc::{downsample_area, quantile_suppress_normalize};
use flaming::synthdata::{generate_sample, horizontal_flip, ActivityClass, GenConfig, VideoSample};

/// Class names in index order, newline-separated.
#[wasm_bindgen]
pub fn class_names() -> String {
    ActivityClass::ALL.iter().map(|c| c.name()).collect::<Vec<_>>().join("\n")
}

#[wasm_bindgen]
pub struct Clip {
    sample: VideoSample,
}

#[wasm_bindgen]
impl Clip {
    /// Renders class `class` (index into [`class_names`]) at the default size.
    pub fn generate(class: usize, seed: u64, jitter: f64) -> Result<Clip, JsError> {
        Clip::build(class, seed, jitter).map_err(|e| JsError::new(&e))
    }

    pub fn width(&self) -> usize {
        self.sample.width()
    }

    pub fn height(&self) -> usize {
        self.sample.height()
    }

    pub fn frames(&self) -> usize {
        self.sample.t_raw()
    }

    pub fn label(&self) -> String {
        self.sample.label().name().to_string()
    }

    /// Frame `t` as RGBA bytes; key actors get a white ring when `mark_keys`.
    pub fn frame_rgba(&self, t: usize, mark_keys: bool) -> Vec<u8> {
        let t = t.min(self.frames() - 1);
        let (h, w) = (self.height(), self.width());
        let mut out: Vec<u8> = self.sample.frame(t).chunks(3).flat_map(|p| [byte(p[0]), byte(p[1]), byte(p[2]), 255]).collect();
        if mark_keys {
            let mask = self.sample.key_actor_mask(t, h, w);
            for y in 0..h {
                for x in 0..w {
                    let inside = mask[y * w + x] > 0.0;
                    let edge = inside
                        && [(0, 1), (2, 1), (1, 0), (1, 2)].iter().any(|&(dy, dx)| {
                            let (yy, xx) = ((y + dy).wrapping_sub(1), (x + dx).wrapping_sub(1));
                            yy >= h || xx >= w || mask[yy * w + xx] == 0.0
                        });
                    if edge {
                        out[(y * w + x) * 4..][..3].copy_from_slice(&[255, 255, 255]);
                    }
                }
            }
        }
        out
    }

    /// Guidance map of frame `t` as grayscale RGBA at full resolution:
    /// quantile-suppressed (unless `q` is negative), normalized, then shown
    /// at `grid_h × grid_w` blocks.
    pub fn guidance_rgba(&self, t: usize, q: f64, grid_h: usize, grid_w: usize) -> Result<Vec<u8>, JsError> {
        let map = self.guidance(t, q, grid_h, grid_w).map_err(|e| JsError::new(&e))?;
        let (h, w) = (self.height(), self.width());
        let mut out = Vec::with_capacity(h * w * 4);
        for y in 0..h {
            for x in 0..w {
                let v = byte(map[(y * grid_h / h) * grid_w + x * grid_w / w] as f32);
                out.extend([v, v, v, 255]);
            }
        }
        Ok(out)
    }

    /// Mirrored copy; directional labels swap.
    pub fn flipped(&self) -> Clip {
        Clip {
            sample: horizontal_flip(&self.sample),
        }
    }
}

impl Clip {
    pub fn build(class: usize, seed: u64, jitter: f64) -> Result<Clip, String> {
        let class = ActivityClass::from_index(class).ok_or_else(|| format!("no class {class}"))?;
        let cfg = GenConfig {
            jitter,
            ..GenConfig::default()
        };
        let sample = generate_sample(class, &cfg, seed).map_err(|e| e.to_string())?;
        Ok(Clip { sample })
    }

    /// Grid guidance values for frame `t`, row-major, max 1 unless all zero.
    pub fn guidance(&self, t: usize, q: f64, grid_h: usize, grid_w: usize) -> Result<Vec<f64>, String> {
        let t = t.min(self.frames() - 1);
        let flow = self.sample.flow_frame(t).ok_or("clip has no flow")?;
        let raw: Vec<f64> = flow.iter().map(|&v| f64::from(v)).collect();
        let cleaned = if q < 0.0 {
            let mut f = raw;
            flaming::flowproc::normalize_max(&mut f);
            f
        } else {
            quantile_suppress_normalize(&raw, q).map_err(|e| e.to_string())?
        };
        let mut small = downsample_area(&cleaned, self.height(), self.width(), grid_h, grid_w).map_err(|e| e.to_string())?;
        flaming::flowproc::normalize_max(&mut small);
        Ok(small)
    }
}

fn byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}
