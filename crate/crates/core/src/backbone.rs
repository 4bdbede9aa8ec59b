//! Small trainable convolutional backbone: stride-2 3×3 stages with ReLU,
//! then a 1×1 compression to the encoder width, flattened to `HW×C` per frame.

use rand::Rng;

use crate::error::{config_err, Result};
use crate::numerics::{ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    /// Output channels of each stride-2 stage.
    pub widths: Vec<usize>,
    /// Width after the 1×1 compression.
    pub channels: usize,
    /// Frames enter as `(x - input_mean) / input_std`.
    pub input_mean: f64,
    pub input_std: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            widths: vec![16, 32, 64],
            channels: 32,
            input_mean: 0.435,
            input_std: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    stages: Vec<(ParamId, ParamId)>,
    compress: (ParamId, ParamId),
    pub config: BackboneConfig,
}

/// Per-frame flattened features: `values` is `frames × (height·width) × C`.
pub struct FeatureMap<'t> {
    pub values: Var<'t>,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

/// He-uniform kernel `c_out×c_in×kh×kw`.
pub(crate) fn conv_kernel<R: Rng>(shape: [usize; 4], rng: &mut R) -> Tensor {
    let fan_in = shape[1] * shape[2] * shape[3];
    Tensor::uniform(&shape, (6.0 / fan_in as f64).sqrt(), rng)
}

impl Backbone {
    pub fn new<R: Rng>(store: &mut ParamStore, config: &BackboneConfig, rng: &mut R) -> Result<Self> {
        if config.widths.is_empty() || config.widths.contains(&0) || config.channels == 0 {
            return Err(config_err!("backbone widths and channels must be positive"));
        }
        if !(config.input_std > 0.0) || !config.input_mean.is_finite() {
            return Err(config_err!("input_std must be positive and input_mean finite"));
        }
        let mut stages = Vec::new();
        let mut c_in = 3;
        for (i, &c) in config.widths.iter().enumerate() {
            let k = store.insert(format!("backbone.stage{i}.kernel"), conv_kernel([c, c_in, 3, 3], rng))?;
            let b = store.insert(format!("backbone.stage{i}.bias"), Tensor::zeros(&[c]))?;
            stages.push((k, b));
            c_in = c;
        }
        let k = store.insert("backbone.compress.kernel", conv_kernel([config.channels, c_in, 1, 1], rng))?;
        let b = store.insert("backbone.compress.bias", Tensor::zeros(&[config.channels]))?;
        Ok(Self {
            stages,
            compress: (k, b),
            config: config.clone(),
        })
    }

    /// Output grid for an `h0×w0` input; both extents must be divisible by `2^S`.
    pub fn grid(&self, h0: usize, w0: usize) -> Result<(usize, usize)> {
        let f = 1usize << self.stages.len();
        if !h0.is_multiple_of(f) || !w0.is_multiple_of(f) || h0 == 0 || w0 == 0 {
            return Err(config_err!(
                "frame size {h0}x{w0} is not divisible by {f} ({} stride-2 stages)",
                self.stages.len()
            ));
        }
        Ok((h0 / f, w0 / f))
    }

    /// Stage outputs before compression, `frames × C0 × H × W`.
    /// `frames` is channels-first: `F × 3 × H0 × W0`.
    pub fn stages<'t>(&self, tape: &'t Tape, store: &ParamStore, frames: &Tensor) -> Result<Var<'t>> {
        let s = frames.shape();
        if s.len() != 4 || s[1] != 3 {
            return Err(config_err!("backbone input must be F×3×H×W, got {:?}", s));
        }
        self.grid(s[2], s[3])?;
        let (m, sd) = (self.config.input_mean, self.config.input_std);
        let mut x = tape.constant(frames.map(|v| (v - m) / sd));
        for &(k, b) in &self.stages {
            x = x
                .conv2d(&tape.param(store, k), (2, 2), (1, 1))?
                .add_bias(&tape.param(store, b), 1)?
                .relu();
        }
        Ok(x)
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, frames: &Tensor) -> Result<FeatureMap<'t>> {
        let x = self.stages(tape, store, frames)?;
        let (k, b) = self.compress;
        let y = x
            .conv2d(&tape.param(store, k), (1, 1), (0, 0))?
            .add_bias(&tape.param(store, b), 1)?;
        let s = y.shape();
        let (f, c, h, w) = (s[0], s[1], s[2], s[3]);
        let values = y.permute(&[0, 2, 3, 1])?.reshape(&[f, h * w, c])?;
        Ok(FeatureMap {
            values,
            frames: f,
            height: h,
            width: w,
        })
    }
}

/// Converts `T×H×W×3` interleaved frames into the channels-first layout,
/// scaling intensities by `gain`.
pub fn frames_to_tensor(frames: &[f32], t: usize, h: usize, w: usize, gain: f64) -> Tensor {
    let plane = h * w;
    let mut data = vec![0.0; t * 3 * plane];
    for f in 0..t {
        for p in 0..plane {
            for c in 0..3 {
                data[(f * 3 + c) * plane + p] = f64::from(frames[(f * plane + p) * 3 + c]) * gain;
            }
        }
    }
    Tensor::new(&[t, 3, h, w], data).expect("frame extents are positive")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_difference_check, FdConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn output_grid_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let bb = Backbone::new(&mut store, &BackboneConfig::default(), &mut rng).unwrap();
        assert_eq!(bb.grid(64, 96).unwrap(), (8, 12));
        assert!(bb.grid(60, 96).is_err());
        let tape = Tape::new();
        let mean = BackboneConfig::default().input_mean;
        let fm = bb.forward(&tape, &store, &Tensor::filled(&[2, 3, 64, 96], mean)).unwrap();
        assert_eq!(fm.values.shape(), vec![2, 96, 32]);
        assert_eq!((fm.height, fm.width), (8, 12));
        // mean-gray input with zero biases maps to zero
        assert!(fm.values.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let cfg = BackboneConfig { widths: vec![3, 4], channels: 2, ..Default::default() };
        let bb = Backbone::new(&mut store, &cfg, &mut rng).unwrap();
        let bias_ids: Vec<_> = store.ids().filter(|&id| store.name(id).ends_with("bias")).collect();
        for id in bias_ids {
            *store.get_mut(id) = Tensor::uniform(store.get(id).shape(), 0.3, &mut rng);
        }
        let x = Tensor::uniform(&[1, 3, 4, 4], 1.0, &mut rng);
        let probe = Tensor::normal(&[1, 1, 2], 1.0, &mut rng);
        let report = finite_difference_check(
            |tape, store| {
                let fm = bb.forward(tape, store, &x)?;
                Ok(fm.values.mul(&tape.constant(probe.clone()))?.sum())
            },
            &store,
            &FdConfig::default(),
        )
        .unwrap();
        assert!(report.passed(), "{report}");
    }

    #[test]
    fn translation_by_a_stride_block_shifts_stage_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let cfg = BackboneConfig { widths: vec![4, 4], channels: 4, input_mean: 0.0, input_std: 1.0 };
        let bb = Backbone::new(&mut store, &cfg, &mut rng).unwrap();
        let (h0, w0) = (16, 24);
        let square = |x0: usize| {
            Tensor::from_fn(&[1, 3, h0, w0], |i| {
                let x = i % w0;
                let y = (i / w0) % h0;
                if (6..10).contains(&y) && (x0..x0 + 4).contains(&x) { 1.0 } else { 0.0 }
            })
        };
        let tape = Tape::new();
        let a = bb.stages(&tape, &store, &square(8)).unwrap().value();
        let b = bb.stages(&tape, &store, &square(12)).unwrap().value();
        let (c, h, w) = (a.shape()[1], a.shape()[2], a.shape()[3]);
        for ch in 0..c {
            for y in 0..h {
                for x in 1..w - 1 {
                    assert_eq!(a.at(&[0, ch, y, x - 1]), b.at(&[0, ch, y, x]));
                }
            }
        }
    }
}
