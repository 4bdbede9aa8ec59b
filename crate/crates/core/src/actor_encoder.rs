//! Actor encoder: `K` learnable queries refined per frame by stacked blocks of
//! self-attention over the queries and cross-attention into the frame's
//! feature grid. The cross-attention maps are kept for the flow loss.

use std::fs;
use std::path::Path;

use rand::Rng;

use crate::backbone::FeatureMap;
use crate::error::{config_err, contract_err, Error, Result};
use crate::layers::{LayerNorm, Mlp, MultiHeadAttention};
use crate::numerics::{ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub tokens: usize,
    pub channels: usize,
    pub blocks: usize,
    pub heads: usize,
    /// Feed-forward sublayer (hidden width `4C`) after cross-attention.
    pub ffn: bool,
    /// Sinusoidal grid encodings added to the cross-attention keys.
    pub pos_enc: bool,
    /// The same encodings added to the cross-attention values, so tokens
    /// carry where they looked.
    pub pos_values: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            tokens: 8,
            channels: 32,
            blocks: 3,
            heads: 4,
            ffn: true,
            pos_enc: true,
            pos_values: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Block {
    self_attn: MultiHeadAttention,
    cross_attn: MultiHeadAttention,
    norm_cross: LayerNorm,
    ffn: Option<(Mlp, LayerNorm)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActorEncoder {
    pub queries: ParamId,
    blocks: Vec<Block>,
    pub config: EncoderConfig,
}

pub struct EncoderOutput<'t> {
    /// `F×K×C`, the last block's tokens for every frame.
    pub tokens: Var<'t>,
    /// One `F×K×HW` head-averaged cross-attention map per block.
    pub attention: Vec<Var<'t>>,
}

impl EncoderOutput<'_> {
    /// Attention as a plain `L×F×K×HW` tensor.
    pub fn attention_tensor(&self) -> Tensor {
        let parts: Vec<Tensor> = self.attention.iter().map(|a| (*a.value()).clone()).collect();
        Tensor::stack(&parts).expect("blocks share one shape")
    }
}

impl ActorEncoder {
    pub fn new<R: Rng>(store: &mut ParamStore, config: &EncoderConfig, rng: &mut R) -> Result<Self> {
        let c = config.channels;
        if config.tokens == 0 || config.blocks == 0 || c == 0 {
            return Err(config_err!("encoder needs at least one token, one block and a positive width"));
        }
        if (config.pos_enc || config.pos_values) && !c.is_multiple_of(4) {
            return Err(config_err!("grid position encoding needs a width divisible by 4, got {c}"));
        }
        let queries = store.insert("encoder.queries", Tensor::normal(&[config.tokens, c], 0.02, rng))?;
        let mut blocks = Vec::with_capacity(config.blocks);
        for l in 0..config.blocks {
            let p = format!("encoder.block{l}");
            let self_attn = MultiHeadAttention::new(store, &format!("{p}.self"), c, config.heads, rng)?;
            let cross_attn = MultiHeadAttention::new(store, &format!("{p}.cross"), c, config.heads, rng)?;
            let norm_cross = LayerNorm::new(store, &format!("{p}.norm1"), c)?;
            let ffn = if config.ffn {
                Some((
                    Mlp::new(store, &format!("{p}.ffn"), [c, 4 * c, c], rng)?,
                    LayerNorm::new(store, &format!("{p}.norm2"), c)?,
                ))
            } else {
                None
            };
            blocks.push(Block {
                self_attn,
                cross_attn,
                norm_cross,
                ffn,
            });
        }
        Ok(Self {
            queries,
            blocks,
            config: config.clone(),
        })
    }

    /// Runs every frame through all blocks, starting each frame from the
    /// shared queries.
    pub fn encode<'t>(&self, tape: &'t Tape, store: &ParamStore, features: &FeatureMap<'t>) -> Result<EncoderOutput<'t>> {
        let fs = features.values.shape();
        if fs.len() != 3 || fs[2] != self.config.channels {
            return Err(config_err!(
                "encoder width {} does not match feature channels {:?}",
                self.config.channels,
                fs
            ));
        }
        let (frames, hw) = (fs[0], fs[1]);
        let placed = if self.config.pos_enc || self.config.pos_values {
            let pe = grid_encoding(features.height, features.width, self.config.channels)?;
            features.values.add(&tape.constant(pe).repeat(frames)?)?
        } else {
            features.values
        };
        let keys = if self.config.pos_enc { placed } else { features.values };
        let values = if self.config.pos_values { placed } else { features.values };
        debug_assert_eq!(hw, features.height * features.width);
        let mut z = tape.param(store, self.queries).repeat(frames)?;
        let mut attention = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let q = z.add(&block.self_attn.self_attend(tape, store, &z)?.out)?;
            let cross = block.cross_attn.forward(tape, store, &q, &keys, &values)?;
            z = block.norm_cross.forward(tape, store, &q.add(&cross.out)?)?;
            if let Some((mlp, norm)) = &block.ffn {
                z = norm.forward(tape, store, &z.add(&mlp.forward(tape, store, &z)?)?)?;
            }
            attention.push(cross.weights);
        }
        Ok(EncoderOutput { tokens: z, attention })
    }
}

/// Fixed 2D sinusoidal encodings for an `h×w` grid, `hw×c`: the first half
/// of the channels encode the row, the second half the column.
pub fn grid_encoding(h: usize, w: usize, c: usize) -> Result<Tensor> {
    if !c.is_multiple_of(4) {
        return Err(config_err!("grid encoding width {c} is not divisible by 4"));
    }
    let half = c / 2;
    let mut data = vec![0.0; h * w * c];
    for y in 0..h {
        for x in 0..w {
            let row = &mut data[(y * w + x) * c..][..c];
            for (offset, pos) in [(0, y), (half, x)] {
                for i in 0..half / 2 {
                    let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / half as f64);
                    row[offset + 2 * i] = (pos as f64 * freq).sin();
                    row[offset + 2 * i + 1] = (pos as f64 * freq).cos();
                }
            }
        }
    }
    Tensor::new(&[h * w, c], data)
}

/// Mean of the first `k_flm` token maps: `F×K×HW → F×HW`.
pub fn representative_attention<'t>(att: &Var<'t>, k_flm: usize) -> Result<Var<'t>> {
    let s = att.shape();
    if s.len() != 3 || k_flm == 0 || k_flm > s[1] {
        return Err(contract_err!("K_flm = {k_flm} is outside [1, {}]", s.get(1).copied().unwrap_or(0)));
    }
    att.slice(1, 0, k_flm)?.mean_axis(1)
}

/// Plain-tensor version over the full `L×T×K×HW` attention: returns `L×T×HW`.
pub fn representative_attention_tensor(att: &Tensor, k_flm: usize) -> Result<Tensor> {
    let s = att.shape();
    if s.len() != 4 || k_flm == 0 || k_flm > s[2] {
        return Err(contract_err!("K_flm = {k_flm} is outside [1, {}]", s.get(2).copied().unwrap_or(0)));
    }
    let (lt, k, hw) = (s[0] * s[1], s[2], s[3]);
    let mut out = vec![0.0; lt * hw];
    for r in 0..lt {
        for t in 0..k_flm {
            let src = &att.data()[(r * k + t) * hw..][..hw];
            out[r * hw..(r + 1) * hw].iter_mut().zip(src).for_each(|(d, s)| *d += s);
        }
    }
    out.iter_mut().for_each(|v| *v /= k_flm as f64);
    Tensor::new(&[s[0], s[1], hw], out)
}

/// Binary PGM (P5, maxval 255) of an `h×w` map scaled by its maximum.
pub fn encode_pgm(values: &[f64], h: usize, w: usize) -> Result<Vec<u8>> {
    if values.len() != h * w {
        return Err(contract_err!("map has {} values, expected {h}x{w}", values.len()));
    }
    let max = values.iter().copied().fold(0.0, f64::max);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| {
        if max > 0.0 {
            (v.max(0.0) / max * 255.0).round() as u8
        } else {
            0
        }
    }));
    Ok(out)
}

pub fn write_pgm(path: &Path, values: &[f64], h: usize, w: usize) -> Result<()> {
    let bytes = encode_pgm(values, h, w)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_difference_check, FdConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn features<'t>(tape: &'t Tape, frames: usize, h: usize, w: usize, c: usize, seed: u64) -> FeatureMap<'t> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureMap {
            values: tape.constant(Tensor::normal(&[frames, h * w, c], 1.0, &mut rng)),
            frames,
            height: h,
            width: w,
        }
    }

    fn encoder(cfg: &EncoderConfig, seed: u64) -> (ParamStore, ActorEncoder) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let enc = ActorEncoder::new(&mut store, cfg, &mut rng).unwrap();
        (store, enc)
    }

    #[test]
    fn output_shapes_and_row_sums() {
        let cfg = EncoderConfig { tokens: 4, channels: 8, blocks: 2, heads: 2, ..Default::default() };
        let (store, enc) = encoder(&cfg, 0);
        let tape = Tape::new();
        let out = enc.encode(&tape, &store, &features(&tape, 2, 3, 4, 8, 1)).unwrap();
        assert_eq!(out.tokens.shape(), vec![2, 4, 8]);
        let att = out.attention_tensor();
        assert_eq!(att.shape(), &[2, 2, 4, 12]);
        for row in att.data().chunks(12) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        let rep = representative_attention_tensor(&att, 3).unwrap();
        for row in rep.data().chunks(12) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn representative_attention_edge_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let att = Tensor::uniform(&[2, 3, 4, 5], 1.0, &mut rng);
        let first = representative_attention_tensor(&att, 1).unwrap();
        for l in 0..2 {
            for t in 0..3 {
                for p in 0..5 {
                    assert_eq!(first.at(&[l, t, p]), att.at(&[l, t, 0, p]));
                }
            }
        }
        let all = representative_attention_tensor(&att, 4).unwrap();
        let mean: f64 = (0..4).map(|k| att.at(&[1, 2, k, 3])).sum::<f64>() / 4.0;
        assert!((all.at(&[1, 2, 3]) - mean).abs() < 1e-15);
        assert!(representative_attention_tensor(&att, 0).is_err());
        assert!(representative_attention_tensor(&att, 5).is_err());
    }

    #[test]
    fn query_permutation_permutes_tokens_and_maps() {
        let cfg = EncoderConfig { tokens: 4, channels: 8, blocks: 2, heads: 2, ..Default::default() };
        let (mut store, enc) = encoder(&cfg, 7);
        let perm = [2, 0, 3, 1];
        let run = |store: &ParamStore| {
            let tape = Tape::new();
            let out = enc.encode(&tape, store, &features(&tape, 2, 2, 3, 8, 9)).unwrap();
            ((*out.tokens.value()).clone(), out.attention_tensor())
        };
        let (w0, a0) = run(&store);
        let z = store.get(enc.queries).clone();
        let permuted = Tensor::from_fn(&[4, 8], |i| z.at(&[perm[i / 8], i % 8]));
        *store.get_mut(enc.queries) = permuted;
        let (w1, a1) = run(&store);
        for f in 0..2 {
            for (k, &src) in perm.iter().enumerate() {
                for c in 0..8 {
                    assert!((w1.at(&[f, k, c]) - w0.at(&[f, src, c])).abs() < 1e-12);
                }
                for l in 0..2 {
                    for p in 0..6 {
                        assert!((a1.at(&[l, f, k, p]) - a0.at(&[l, f, src, p])).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let cfg = EncoderConfig { tokens: 2, channels: 4, blocks: 1, heads: 2, ..Default::default() };
        let (store, enc) = encoder(&cfg, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let probe_w = Tensor::normal(&[1, 2, 4], 1.0, &mut rng);
        let probe_a = Tensor::normal(&[1, 2, 6], 1.0, &mut rng);
        let report = finite_difference_check(
            |tape, store| {
                let out = enc.encode(tape, store, &features(tape, 1, 2, 3, 4, 13))?;
                let a = out.tokens.mul(&tape.constant(probe_w.clone()))?.sum();
                let b = out.attention[0].mul(&tape.constant(probe_a.clone()))?.sum();
                a.add(&b)
            },
            &store,
            &FdConfig::default(),
        )
        .unwrap();
        assert!(report.passed(), "{report}");
    }

    #[test]
    fn width_mismatch_is_a_config_error() {
        let (store, enc) = encoder(&EncoderConfig::default(), 0);
        let tape = Tape::new();
        assert!(matches!(
            enc.encode(&tape, &store, &features(&tape, 1, 2, 2, 16, 0)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn pgm_header_and_scaling() {
        let bytes = encode_pgm(&[0.0, 0.5, 1.0, 0.25], 2, 2).unwrap();
        assert!(bytes.starts_with(b"P5\n2 2\n255\n"));
        assert_eq!(&bytes[bytes.len() - 4..], &[0, 128, 255, 64]);
    }
}
