//! Turns raw flow magnitudes into the attention-grid guidance maps.
//!
//! Per frame: subtract the nearest-rank `q`-quantile (this removes any
//! uniform camera-motion component), clamp at zero, normalize to max 1, then
//! area-average down to the attention grid and renormalize.

use crate::error::{config_err, contract_err, Result};

/// How the downsampled maps are scaled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum FlowNorm {
    /// Each frame is scaled to max 1 on its own.
    #[default]
    PerFrame,
    /// All frames of a clip share one scale (max over the clip is 1).
    PerClip,
}

/// Flow preprocessing settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlowPrepConfig {
    pub quantile: f64,
    /// Skip the quantile subtraction (normalize only).
    pub suppress: bool,
    pub norm: FlowNorm,
}

impl Default for FlowPrepConfig {
    fn default() -> Self {
        Self {
            quantile: 0.85,
            suppress: true,
            norm: FlowNorm::PerFrame,
        }
    }
}

/// Guidance maps on the attention grid: `frames × (height·width)`, values in
/// `[0, 1]`, each frame either all zero or with maximum exactly 1.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowMap {
    pub values: Vec<f64>,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

impl FlowMap {
    pub fn frame(&self, t: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.values[t * n..(t + 1) * n]
    }
}

/// 1-based nearest rank `ceil(q·P)`, guarded against `q·P` landing a hair
/// above an integer through rounding of `q`.
pub fn nearest_rank(q: f64, p: usize) -> usize {
    let x = q * p as f64;
    let r = (x - x.abs() * 1e-12).ceil() as usize;
    r.clamp(1, p)
}

/// Subtracts the nearest-rank `q`-quantile from every pixel, clamps
/// negatives to zero, and divides by the maximum when it is positive.
///
/// The subtraction makes the result invariant to adding a constant to every
/// pixel. The invariance is bitwise whenever `raw + c` and the differences
/// are exact in `f64`, e.g. for values on a common binary grid.
pub fn quantile_suppress_normalize(raw: &[f64], q: f64) -> Result<Vec<f64>> {
    if !(q > 0.0 && q < 1.0) {
        return Err(config_err!("quantile must lie in (0, 1), got {q}"));
    }
    if raw.is_empty() {
        return Ok(Vec::new());
    }
    if raw.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
        return Err(contract_err!("raw flow magnitudes must be finite and non-negative"));
    }
    let rank = nearest_rank(q, raw.len());
    let mut sorted = raw.to_vec();
    let (_, &mut threshold, _) = sorted.select_nth_unstable_by(rank - 1, f64::total_cmp);
    let mut out: Vec<f64> = raw.iter().map(|&v| (v - threshold).max(0.0)).collect();
    normalize_max(&mut out);
    Ok(out)
}

/// Divides by the maximum if it is positive.
pub fn normalize_max(values: &mut [f64]) {
    let max = values.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        values.iter_mut().for_each(|v| *v /= max);
    }
}

/// Block-mean downsampling of a row-major `h0 × w0` frame to `h × w`.
pub fn downsample_area(frame: &[f64], h0: usize, w0: usize, h: usize, w: usize) -> Result<Vec<f64>> {
    if h == 0 || w == 0 || !h0.is_multiple_of(h) || !w0.is_multiple_of(w) {
        return Err(config_err!("{h0}x{w0} is not divisible into a {h}x{w} grid"));
    }
    if frame.len() != h0 * w0 {
        return Err(contract_err!("frame has {} values, expected {}", frame.len(), h0 * w0));
    }
    let (bh, bw) = (h0 / h, w0 / w);
    let inv = 1.0 / (bh * bw) as f64;
    let mut out = vec![0.0; h * w];
    for y in 0..h0 {
        for x in 0..w0 {
            out[(y / bh) * w + x / bw] += frame[y * w0 + x];
        }
    }
    out.iter_mut().for_each(|v| *v *= inv);
    Ok(out)
}

/// Fallback flow estimate: per-pixel L2 norm of the RGB difference between
/// consecutive frames (`t × h × w × 3` in, `t × h × w` out). The last frame
/// repeats the previous map.
pub fn frame_difference_flow(frames: &[f32], t: usize, h: usize, w: usize) -> Result<Vec<f32>> {
    if t < 2 {
        return Err(contract_err!("frame differencing needs at least 2 frames, got {t}"));
    }
    if frames.len() != t * h * w * 3 {
        return Err(contract_err!("frame buffer does not match {t}x{h}x{w}x3"));
    }
    let plane = h * w;
    let mut out = vec![0.0f32; t * plane];
    for f in 0..t - 1 {
        for p in 0..plane {
            let a = &frames[(f * plane + p) * 3..][..3];
            let b = &frames[((f + 1) * plane + p) * 3..][..3];
            let d2: f32 = a.iter().zip(b).map(|(x, y)| (y - x) * (y - x)).sum();
            out[f * plane + p] = d2.sqrt();
        }
    }
    out.copy_within((t - 2) * plane..(t - 1) * plane, (t - 1) * plane);
    Ok(out)
}

/// Full pipeline for the given frames of one clip: suppress at full
/// resolution, downsample, renormalize. `raw` holds `frames × h0 × w0`.
pub fn flow_targets(
    raw: &[f32],
    frames: usize,
    h0: usize,
    w0: usize,
    h: usize,
    w: usize,
    cfg: &FlowPrepConfig,
) -> Result<FlowMap> {
    let plane = h0 * w0;
    if raw.len() != frames * plane {
        return Err(contract_err!("flow buffer does not match {frames}x{h0}x{w0}"));
    }
    let mut values = Vec::with_capacity(frames * h * w);
    for t in 0..frames {
        let frame: Vec<f64> = raw[t * plane..(t + 1) * plane].iter().map(|&v| f64::from(v)).collect();
        let cleaned = if cfg.suppress {
            quantile_suppress_normalize(&frame, cfg.quantile)?
        } else {
            let mut f = frame;
            normalize_max(&mut f);
            f
        };
        let mut small = downsample_area(&cleaned, h0, w0, h, w)?;
        if cfg.norm == FlowNorm::PerFrame {
            normalize_max(&mut small);
        }
        values.extend(small);
    }
    if cfg.norm == FlowNorm::PerClip {
        normalize_max(&mut values);
    }
    Ok(FlowMap {
        values,
        frames,
        height: h,
        width: w,
    })
}
