//! Plain-text run configuration: `key = value` lines, `#` comments, no
//! sections. One flat key space covers generation, model, loss and training
//! settings, and every key can also be set from the command line.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{config_err, Error, Result};
use crate::losses::LossConfig;
use crate::model::ModelConfig;
use crate::relation::{Detach, Fusion, GroupConv, TemporalConv};
use crate::synthdata::{ActivityClass, GenConfig, SampleMode};
use crate::training::{FlowSource, TrainConfig};

/// Every recognised key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("height", "frame height in pixels (generator and model input)"),
    ("width", "frame width in pixels"),
    ("t_raw", "frames rendered per clip"),
    ("actors_min", "fewest actors per clip"),
    ("actors_max", "most actors per clip"),
    ("speed_min", "slowest key-actor speed, pixels per frame"),
    ("speed_max", "fastest key-actor speed, pixels per frame"),
    ("radius_min", "smallest actor radius in pixels"),
    ("radius_max", "largest actor radius in pixels"),
    ("jitter", "largest camera offset per axis, pixels"),
    ("wander", "background actor speed as a fraction of key speed"),
    ("key_palette", "warm hues for key actors, cool for the rest (true/false)"),
    ("class_mix", "relative class frequencies, 8 comma-separated weights"),
    ("gen_seed", "seed for dataset generation and splitting"),
    ("frames", "frames sampled per clip (T)"),
    ("backbone_widths", "channels of each stride-2 backbone stage, comma-separated"),
    ("input_mean", "pixel value subtracted before the backbone"),
    ("input_std", "pixel scale divided out before the backbone"),
    ("channels", "token width C shared by encoder and relation module"),
    ("tokens", "actor tokens per frame (K)"),
    ("blocks", "encoder blocks (L)"),
    ("heads", "attention heads in the encoder"),
    ("ffn", "feed-forward sublayer in encoder blocks (true/false)"),
    ("pos_enc", "grid encodings on cross-attention keys (true/false)"),
    ("pos_values", "grid encodings on cross-attention values too (true/false)"),
    ("relation_heads", "attention heads in the relation module"),
    ("temporal_convs", "actor-path temporal convs as width/pad, comma-separated, e.g. 3/1,3/1"),
    ("group_convs", "group-path convs as KtxKs/StxSs, comma-separated, e.g. 3x3/1x1,3x3/1x3"),
    ("share_attention", "one self-attention shared by both relation paths (true/false)"),
    ("detach", "group-path gradient stop: conv_input, frame_classifier or none"),
    ("group_path", "enable the group path and its frame loss (true/false)"),
    ("fusion", "combine path outputs as logits or probabilities"),
    ("tau", "contrastive temperature"),
    ("k_flm", "leading tokens averaged into the representative attention"),
    ("inclusive_denominator", "include the positive pair in contrastive denominators (true/false)"),
    ("l1_flm", "L1 flow-alignment loss instead of contrastive (true/false)"),
    ("l1_tco", "L1 temporal loss instead of contrastive (true/false)"),
    ("batch_mean_gate", "gate the flow loss by batch-mean confidence (true/false)"),
    ("use_flm", "enable the flow-alignment loss (true/false)"),
    ("use_tco", "enable the temporal consistency loss (true/false)"),
    ("epochs", "training epochs"),
    ("batch", "clips per step"),
    ("beta1", "Adam first-moment decay"),
    ("beta2", "Adam second-moment decay"),
    ("eps", "Adam denominator epsilon"),
    ("weight_decay", "weight decay"),
    ("decoupled_decay", "apply weight decay to weights rather than gradients (true/false)"),
    ("lr_min", "learning rate at epoch 0"),
    ("lr_peak", "learning rate at the end of warmup"),
    ("warmup_epochs", "epochs of linear warmup"),
    ("seed", "seed for initialization, data order and augmentation"),
    ("flip", "random horizontal flip with label swap (true/false)"),
    ("brightness", "random per-clip brightness in [0.8, 1.2] (true/false)"),
    ("sampling", "training frame sampling: train (per segment) or random"),
    ("flow_source", "training flow: truth or frame_difference"),
    ("flow_quantile", "flow suppression quantile in (0, 1)"),
    ("flow_suppress", "subtract the flow quantile before normalizing (true/false)"),
    ("flow_norm", "flow normalization: per_frame or per_clip"),
    ("eval_every", "evaluate the validation split every this many epochs (0 = never)"),
];

#[derive(Clone, Debug, PartialEq)]
#[derive(Default)]
pub struct RunConfig {
    pub gen: GenConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
}


fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| config_err!("{key}: cannot parse {v:?}"))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(config_err!("{key}: expected true or false, got {v:?}")),
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|p| parse(key, p.trim())).collect()
}

fn parse_pair(key: &str, v: &str, sep: char) -> Result<(usize, usize)> {
    let (a, b) = v.split_once(sep).ok_or_else(|| config_err!("{key}: expected a{sep}b, got {v:?}"))?;
    Ok((parse(key, a.trim())?, parse(key, b.trim())?))
}

fn join<T: ToString>(items: impl IntoIterator<Item = T>) -> String {
    items.into_iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Sets one key. Unknown keys and unparsable values are config errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let (g, m, l, t) = (&mut self.gen, &mut self.model, &mut self.loss, &mut self.train);
        match key {
            "height" => {
                g.height = parse(key, v)?;
                m.height = g.height;
            }
            "width" => {
                g.width = parse(key, v)?;
                m.width = g.width;
            }
            "t_raw" => g.t_raw = parse(key, v)?,
            "actors_min" => g.actors_min = parse(key, v)?,
            "actors_max" => g.actors_max = parse(key, v)?,
            "speed_min" => g.speed_min = parse(key, v)?,
            "speed_max" => g.speed_max = parse(key, v)?,
            "radius_min" => g.radius_min = parse(key, v)?,
            "radius_max" => g.radius_max = parse(key, v)?,
            "jitter" => g.jitter = parse(key, v)?,
            "wander" => g.wander = parse(key, v)?,
            "key_palette" => g.key_palette = parse_bool(key, v)?,
            "class_mix" => {
                let w: Vec<f64> = parse_list(key, v)?;
                g.class_mix = w
                    .try_into()
                    .map_err(|_| config_err!("class_mix needs {} weights", ActivityClass::COUNT))?;
            }
            "gen_seed" => g.seed = parse(key, v)?,
            "frames" => m.frames = parse(key, v)?,
            "backbone_widths" => m.backbone.widths = parse_list(key, v)?,
            "input_mean" => m.backbone.input_mean = parse(key, v)?,
            "input_std" => m.backbone.input_std = parse(key, v)?,
            "channels" => {
                let c = parse(key, v)?;
                m.backbone.channels = c;
                m.encoder.channels = c;
                m.relation.channels = c;
            }
            "tokens" => m.encoder.tokens = parse(key, v)?,
            "blocks" => m.encoder.blocks = parse(key, v)?,
            "heads" => m.encoder.heads = parse(key, v)?,
            "ffn" => m.encoder.ffn = parse_bool(key, v)?,
            "pos_enc" => m.encoder.pos_enc = parse_bool(key, v)?,
            "pos_values" => m.encoder.pos_values = parse_bool(key, v)?,
            "relation_heads" => m.relation.heads = parse(key, v)?,
            "temporal_convs" => {
                m.relation.temporal = v
                    .split(',')
                    .map(|p| parse_pair(key, p, '/').map(|(width, pad)| TemporalConv { width, pad }))
                    .collect::<Result<_>>()?
            }
            "group_convs" => {
                m.relation.group = v
                    .split(',')
                    .map(|p| {
                        let (k, s) = p.split_once('/').ok_or_else(|| config_err!("{key}: expected KtxKs/StxSs, got {p:?}"))?;
                        let (k_t, k_s) = parse_pair(key, k, 'x')?;
                        let (s_t, s_s) = parse_pair(key, s, 'x')?;
                        Ok(GroupConv { k_t, k_s, s_t, s_s })
                    })
                    .collect::<Result<_>>()?
            }
            "share_attention" => m.relation.share_attention = parse_bool(key, v)?,
            "detach" => {
                m.relation.detach = match v {
                    "conv_input" => Detach::ConvInput,
                    "frame_classifier" => Detach::FrameClassifier,
                    "none" => Detach::None,
                    _ => return Err(config_err!("detach: expected conv_input, frame_classifier or none, got {v:?}")),
                }
            }
            "group_path" => m.relation.group_path = parse_bool(key, v)?,
            "fusion" => {
                m.relation.fusion = match v {
                    "logits" => Fusion::Logits,
                    "probabilities" => Fusion::Probabilities,
                    _ => return Err(config_err!("fusion: expected logits or probabilities, got {v:?}")),
                }
            }
            "tau" => l.tau = parse(key, v)?,
            "k_flm" => l.k_flm = parse(key, v)?,
            "inclusive_denominator" => l.inclusive_denominator = parse_bool(key, v)?,
            "l1_flm" => l.l1_flm = parse_bool(key, v)?,
            "l1_tco" => l.l1_tco = parse_bool(key, v)?,
            "batch_mean_gate" => l.batch_mean_gate = parse_bool(key, v)?,
            "use_flm" => l.use_flm = parse_bool(key, v)?,
            "use_tco" => l.use_tco = parse_bool(key, v)?,
            "epochs" => t.epochs = parse(key, v)?,
            "batch" => t.batch = parse(key, v)?,
            "beta1" => t.beta1 = parse(key, v)?,
            "beta2" => t.beta2 = parse(key, v)?,
            "eps" => t.eps = parse(key, v)?,
            "weight_decay" => t.weight_decay = parse(key, v)?,
            "decoupled_decay" => t.decoupled_decay = parse_bool(key, v)?,
            "lr_min" => t.lr_min = parse(key, v)?,
            "lr_peak" => t.lr_peak = parse(key, v)?,
            "warmup_epochs" => t.warmup_epochs = parse(key, v)?,
            "seed" => t.seed = parse(key, v)?,
            "flip" => t.flip = parse_bool(key, v)?,
            "brightness" => t.brightness = parse_bool(key, v)?,
            "sampling" => {
                t.sampling = match v {
                    "train" => SampleMode::Train,
                    "random" => SampleMode::Random,
                    _ => return Err(config_err!("sampling: expected train or random, got {v:?}")),
                }
            }
            "flow_source" => {
                t.flow_source = match v {
                    "truth" => FlowSource::Truth,
                    "frame_difference" => FlowSource::FrameDifference,
                    _ => return Err(config_err!("flow_source: expected truth or frame_difference, got {v:?}")),
                }
            }
            "flow_quantile" => t.flow_quantile = parse(key, v)?,
            "flow_suppress" => t.flow_suppress = parse_bool(key, v)?,
            "flow_norm" => {
                t.flow_per_clip = match v {
                    "per_frame" => false,
                    "per_clip" => true,
                    _ => return Err(config_err!("flow_norm: expected per_frame or per_clip, got {v:?}")),
                }
            }
            "eval_every" => t.eval_every = parse(key, v)?,
            _ => return Err(config_err!("unknown config key {key:?}")),
        }
        Ok(())
    }

    /// Current value of `key` in the same syntax [`RunConfig::set`] accepts.
    pub fn get(&self, key: &str) -> Result<String> {
        let (g, m, l, t) = (&self.gen, &self.model, &self.loss, &self.train);
        let b = |x: bool| x.to_string();
        Ok(match key {
            "height" => g.height.to_string(),
            "width" => g.width.to_string(),
            "t_raw" => g.t_raw.to_string(),
            "actors_min" => g.actors_min.to_string(),
            "actors_max" => g.actors_max.to_string(),
            "speed_min" => g.speed_min.to_string(),
            "speed_max" => g.speed_max.to_string(),
            "radius_min" => g.radius_min.to_string(),
            "radius_max" => g.radius_max.to_string(),
            "jitter" => g.jitter.to_string(),
            "wander" => g.wander.to_string(),
            "key_palette" => g.key_palette.to_string(),
            "class_mix" => join(g.class_mix),
            "gen_seed" => g.seed.to_string(),
            "frames" => m.frames.to_string(),
            "backbone_widths" => join(&m.backbone.widths),
            "input_mean" => m.backbone.input_mean.to_string(),
            "input_std" => m.backbone.input_std.to_string(),
            "channels" => m.backbone.channels.to_string(),
            "tokens" => m.encoder.tokens.to_string(),
            "blocks" => m.encoder.blocks.to_string(),
            "heads" => m.encoder.heads.to_string(),
            "ffn" => b(m.encoder.ffn),
            "pos_enc" => b(m.encoder.pos_enc),
            "pos_values" => b(m.encoder.pos_values),
            "relation_heads" => m.relation.heads.to_string(),
            "temporal_convs" => join(m.relation.temporal.iter().map(|c| format!("{}/{}", c.width, c.pad))),
            "group_convs" => join(
                m.relation
                    .group
                    .iter()
                    .map(|c| format!("{}x{}/{}x{}", c.k_t, c.k_s, c.s_t, c.s_s)),
            ),
            "share_attention" => b(m.relation.share_attention),
            "detach" => match m.relation.detach {
                Detach::ConvInput => "conv_input",
                Detach::FrameClassifier => "frame_classifier",
                Detach::None => "none",
            }
            .into(),
            "group_path" => b(m.relation.group_path),
            "fusion" => match m.relation.fusion {
                Fusion::Logits => "logits",
                Fusion::Probabilities => "probabilities",
            }
            .into(),
            "tau" => l.tau.to_string(),
            "k_flm" => l.k_flm.to_string(),
            "inclusive_denominator" => b(l.inclusive_denominator),
            "l1_flm" => b(l.l1_flm),
            "l1_tco" => b(l.l1_tco),
            "batch_mean_gate" => b(l.batch_mean_gate),
            "use_flm" => b(l.use_flm),
            "use_tco" => b(l.use_tco),
            "epochs" => t.epochs.to_string(),
            "batch" => t.batch.to_string(),
            "beta1" => t.beta1.to_string(),
            "beta2" => t.beta2.to_string(),
            "eps" => t.eps.to_string(),
            "weight_decay" => t.weight_decay.to_string(),
            "decoupled_decay" => b(t.decoupled_decay),
            "lr_min" => t.lr_min.to_string(),
            "lr_peak" => t.lr_peak.to_string(),
            "warmup_epochs" => t.warmup_epochs.to_string(),
            "seed" => t.seed.to_string(),
            "flip" => b(t.flip),
            "brightness" => b(t.brightness),
            "sampling" => match t.sampling {
                SampleMode::Train => "train",
                SampleMode::Eval => "eval",
                SampleMode::Random => "random",
            }
            .into(),
            "flow_source" => match t.flow_source {
                FlowSource::Truth => "truth",
                FlowSource::FrameDifference => "frame_difference",
            }
            .into(),
            "flow_quantile" => t.flow_quantile.to_string(),
            "flow_suppress" => b(t.flow_suppress),
            "flow_norm" => if t.flow_per_clip { "per_clip" } else { "per_frame" }.into(),
            "eval_every" => t.eval_every.to_string(),
            _ => return Err(config_err!("unknown config key {key:?}")),
        })
    }

    /// Applies `key = value` lines. Blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| config_err!("line {}: expected key = value, got {raw:?}", n + 1))?;
            self.set(k.trim(), v).map_err(|e| config_err!("line {}: {e}", n + 1))?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    /// Every key with its resolved value. Parsing this back gives `self`.
    pub fn to_text(&self) -> String {
        let mut out = String::from("# resolved run configuration\n");
        for (k, _) in KEYS {
            let _ = writeln!(out, "{k} = {}", self.get(k).expect("listed key"));
        }
        out
    }

    pub fn write_snapshot(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    /// Checks everything that can be checked without building a model.
    pub fn validate(&self) -> Result<()> {
        self.gen.validate()?;
        self.train.validate()?;
        self.loss.validate(self.model.encoder.tokens)?;
        if self.model.relation.classes != ActivityClass::COUNT {
            return Err(config_err!("the relation head must predict {} classes", ActivityClass::COUNT));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn snapshot_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.set("group_convs", "2x3/1x2").unwrap();
        cfg.set("detach", "none").unwrap();
        cfg.set("lr_peak", "0.0007").unwrap();
        cfg.set("class_mix", "1,2,3,4,5,6,7,8").unwrap();
        cfg.set("flow_norm", "per_clip").unwrap();
        let back = RunConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(RunConfig::from_text(&RunConfig::default().to_text()).unwrap(), RunConfig::default());
    }

    #[test]
    fn every_listed_key_is_gettable_and_settable() {
        let cfg = RunConfig::default();
        for (k, _) in KEYS {
            let v = cfg.get(k).unwrap();
            let mut c = RunConfig::default();
            c.set(k, &v).unwrap();
            assert_eq!(c, cfg, "{k}");
        }
    }

    #[test]
    fn unknown_keys_and_bad_values_are_config_errors() {
        assert!(matches!(RunConfig::from_text("lr_peek = 1"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_text("epochs = many"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_text("epochs"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_text("class_mix = 1,2"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_text("ffn = maybe"), Err(Error::Config(_))));
    }

    #[test]
    fn comments_and_blanks() {
        let cfg = RunConfig::from_text("# header\n\nepochs = 3  # short\n  tau=0.25\n").unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.loss.tau, 0.25);
    }

    #[test]
    fn shared_keys_move_together() {
        let cfg = RunConfig::from_text("channels = 16\nheight = 32").unwrap();
        assert_eq!(cfg.model.encoder.channels, 16);
        assert_eq!(cfg.model.relation.channels, 16);
        assert_eq!(cfg.model.height, 32);
        assert_eq!(cfg.gen.height, 32);
    }
}
