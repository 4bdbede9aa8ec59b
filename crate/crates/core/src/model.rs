//! The full network: backbone, actor encoder and relation module over one
//! parameter store, plus checkpoint I/O.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::actor_encoder::{representative_attention_tensor, ActorEncoder, EncoderConfig, EncoderOutput};
use crate::backbone::{Backbone, BackboneConfig, FeatureMap};
use crate::error::{config_err, contract_err, Error, Result};
use crate::numerics::{io, ParamStore, Tape, Tensor, Var};
use crate::relation::{Relation, RelationConfig, RelationOutput};
use crate::synthdata::{segment_indices, SampleMode};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub encoder: EncoderConfig,
    pub relation: RelationConfig,
    /// Frames sampled per clip.
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            encoder: EncoderConfig::default(),
            relation: RelationConfig::default(),
            frames: 6,
            height: 64,
            width: 96,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub backbone: Backbone,
    pub encoder: ActorEncoder,
    pub relation: Relation,
    /// Attention grid `(H, W)`.
    pub grid: (usize, usize),
}

pub struct ModelOutput<'t> {
    pub features: FeatureMap<'t>,
    pub encoder: EncoderOutput<'t>,
    /// `N×T×K×C`
    pub tokens: Var<'t>,
    pub relation: RelationOutput<'t>,
}

impl Model {
    /// Builds and initializes every parameter from `seed`.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        let c = config.backbone.channels;
        if config.encoder.channels != c || config.relation.channels != c {
            return Err(config_err!(
                "backbone ({c}), encoder ({}) and relation ({}) widths must agree",
                config.encoder.channels,
                config.relation.channels
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let backbone = Backbone::new(&mut store, &config.backbone, &mut rng)?;
        let encoder = ActorEncoder::new(&mut store, &config.encoder, &mut rng)?;
        let relation = Relation::new(&mut store, &config.relation, &mut rng)?;
        let grid = backbone.grid(config.height, config.width)?;
        relation.check_extents(config.frames, config.encoder.tokens)?;
        Ok(Self {
            config: config.clone(),
            store,
            backbone,
            encoder,
            relation,
            grid,
        })
    }

    pub fn classes(&self) -> usize {
        self.config.relation.classes
    }

    /// Forward pass on `(N·T)×3×H0×W0` frames, sample-major.
    pub fn forward<'t>(&self, tape: &'t Tape, frames: &Tensor, n: usize) -> Result<ModelOutput<'t>> {
        self.forward_with(tape, &self.store, frames, n)
    }

    /// Same as [`Model::forward`] but reading parameters from `store`.
    pub fn forward_with<'t>(&self, tape: &'t Tape, store: &ParamStore, frames: &Tensor, n: usize) -> Result<ModelOutput<'t>> {
        let t = self.config.frames;
        if frames.shape().first() != Some(&(n * t)) {
            return Err(config_err!("expected {} frames for {n} clips of {t}, got {:?}", n * t, frames.shape()));
        }
        let features = self.backbone.forward(tape, store, frames)?;
        let encoder = self.encoder.encode(tape, store, &features)?;
        let (k, c) = (self.config.encoder.tokens, self.config.encoder.channels);
        let tokens = encoder.tokens.reshape(&[n, t, k, c])?;
        let relation = self.relation.forward(tape, store, &tokens)?;
        Ok(ModelOutput {
            features,
            encoder,
            tokens,
            relation,
        })
    }

    /// Writes `index.tsv` (name, file, shape) and one tensor file per parameter.
    pub fn save(&self, dir: &Path) -> Result<()> {
        save_store(&self.store, dir)
    }

    /// Replaces the parameters with those stored in `dir`; names and shapes
    /// must match this model exactly.
    pub fn load_params(&mut self, dir: &Path) -> Result<()> {
        let loaded = load_store(dir)?;
        self.store.load_from(&loaded)
    }
}

/// Attention of one clip under eval-mode frame sampling.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipAttention {
    /// `L×T×K×HW`, head-averaged.
    pub per_token: Tensor,
    /// `L×T×HW`, mean over the first `k_flm` tokens.
    pub representative: Tensor,
    /// Raw frame indices that were sampled.
    pub indices: Vec<usize>,
    pub grid: (usize, usize),
}

impl Model {
    /// Runs one clip of `t_raw×H×W×3` interleaved frames.
    pub fn clip_attention(&self, frames: &[f32], t_raw: usize, k_flm: usize) -> Result<ClipAttention> {
        let (h, w) = (self.config.height, self.config.width);
        if frames.len() != t_raw * h * w * 3 {
            return Err(contract_err!("expected {t_raw}×{h}×{w}×3 frame values, got {}", frames.len()));
        }
        let indices = segment_indices(t_raw, self.config.frames, SampleMode::Eval, 0)?;
        let plane = h * w * 3;
        let picked: Vec<f32> = indices.iter().flat_map(|&f| frames[f * plane..(f + 1) * plane].iter().copied()).collect();
        let input = crate::backbone::frames_to_tensor(&picked, indices.len(), h, w, 1.0);
        let tape = Tape::new();
        let out = self.forward(&tape, &input, 1)?;
        let per_token = out.encoder.attention_tensor();
        let representative = representative_attention_tensor(&per_token, k_flm)?;
        Ok(ClipAttention {
            per_token,
            representative,
            indices,
            grid: self.grid,
        })
    }
}

pub const CHECKPOINT_INDEX: &str = "index.tsv";

pub fn save_store(store: &ParamStore, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut index = String::new();
    for (i, (_, name, t)) in store.iter().enumerate() {
        let file = format!("p{i:04}.flmt");
        let data: Vec<f32> = t.data().iter().map(|&v| v as f32).collect();
        io::write_f32(&dir.join(&file), t.shape(), &data)?;
        let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        index.push_str(&format!("{name}\t{file}\t{}\n", shape.join("x")));
    }
    let path = dir.join(CHECKPOINT_INDEX);
    fs::write(&path, index).map_err(|e| Error::io(&path, e))
}

pub fn load_store(dir: &Path) -> Result<ParamStore> {
    let path = dir.join(CHECKPOINT_INDEX);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut store = ParamStore::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 3 {
            return Err(Error::format(&path, format!("line {}: expected name, file, shape", n + 1)));
        }
        let tensor_path = dir.join(f[1]);
        let (shape, data) = io::read_f32(&tensor_path)?;
        let expect: Vec<String> = shape.iter().map(usize::to_string).collect();
        if expect.join("x") != f[2] {
            return Err(Error::format(&tensor_path, format!("shape {shape:?} disagrees with index entry {}", f[2])));
        }
        let t = Tensor::new(&shape, data.into_iter().map(f64::from).collect())?;
        store.insert(f[0], t)?;
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            backbone: BackboneConfig { widths: vec![4, 8], channels: 8, ..Default::default() },
            encoder: EncoderConfig { tokens: 4, channels: 8, blocks: 2, heads: 2, ..Default::default() },
            relation: RelationConfig {
                channels: 8,
                heads: 2,
                group: vec![crate::relation::GroupConv { k_t: 2, k_s: 2, s_t: 1, s_s: 2 }],
                ..Default::default()
            },
            frames: 3,
            height: 8,
            width: 12,
        }
    }

    #[test]
    fn forward_shapes() {
        let model = Model::new(&tiny_config(), 0).unwrap();
        assert_eq!(model.grid, (2, 3));
        let tape = Tape::new();
        let out = model.forward(&tape, &Tensor::zeros(&[6, 3, 8, 12]), 2).unwrap();
        assert_eq!(out.tokens.shape(), vec![2, 3, 4, 8]);
        assert_eq!(out.relation.fused.shape(), vec![2, 8]);
        assert_eq!(out.encoder.attention[0].shape(), vec![6, 4, 6]);
    }

    #[test]
    fn clip_attention_shapes() {
        let model = Model::new(&tiny_config(), 0).unwrap();
        let frames = vec![0.5f32; 7 * 8 * 12 * 3];
        let a = model.clip_attention(&frames, 7, 2).unwrap();
        assert_eq!(a.per_token.shape(), &[2, 3, 4, 6]);
        assert_eq!(a.representative.shape(), &[2, 3, 6]);
        assert_eq!(a.indices, vec![0, 2, 5]);
        assert!(model.clip_attention(&frames[1..], 7, 2).is_err());
    }

    #[test]
    fn width_disagreement_is_rejected() {
        let mut cfg = tiny_config();
        cfg.encoder.channels = 12;
        assert!(matches!(Model::new(&cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn checkpoint_roundtrip_is_exact_at_f32() {
        let dir = tempfile::tempdir().unwrap();
        let model = Model::new(&tiny_config(), 3).unwrap();
        model.save(dir.path()).unwrap();
        let mut other = Model::new(&tiny_config(), 4).unwrap();
        other.load_params(dir.path()).unwrap();
        for ((_, _, a), (_, _, b)) in model.store.iter().zip(other.store.iter()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(*x as f32, *y as f32);
            }
        }
        let again = tempfile::tempdir().unwrap();
        other.save(again.path()).unwrap();
        for entry in fs::read_dir(dir.path()).unwrap() {
            let name = entry.unwrap().file_name();
            assert_eq!(fs::read(dir.path().join(&name)).unwrap(), fs::read(again.path().join(&name)).unwrap());
        }
    }
}
