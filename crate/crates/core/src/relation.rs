//! Relation module with two paths over the actor tokens.
//!
//! The actor path convolves each token over time, pools, then lets tokens
//! attend to each other. The group path lets tokens attend to each other per
//! frame, then convolves over the (token, time) grid. Both paths use one
//! self-attention weight set unless sharing is turned off.

use rand::Rng;

use crate::backbone::conv_kernel;
use crate::error::{config_err, contract_err, Result};
use crate::layers::{Linear, Mlp, MultiHeadAttention};
use crate::numerics::{ParamId, ParamStore, Tape, Tensor, Var};

/// One temporal convolution layer of the actor path.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TemporalConv {
    pub width: usize,
    pub pad: usize,
}

/// One layer of the group path's (token, time) convolution. The kernel spans
/// `k_t` frames and `k_s` tokens; strides follow the same order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GroupConv {
    pub k_t: usize,
    pub k_s: usize,
    pub s_t: usize,
    pub s_s: usize,
}

/// Where the group path stops gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Detach {
    /// On the stacked self-attention output entering the 2D convolutions.
    #[default]
    ConvInput,
    /// On the input of the per-frame classifier instead.
    FrameClassifier,
    None,
}

/// How the two classifier outputs are combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Fusion {
    #[default]
    Logits,
    /// Average the softmax outputs; the fused vector is their log.
    Probabilities,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RelationConfig {
    pub channels: usize,
    pub classes: usize,
    pub heads: usize,
    pub temporal: Vec<TemporalConv>,
    pub group: Vec<GroupConv>,
    pub share_attention: bool,
    pub detach: Detach,
    /// With the group path off, the actor path alone produces the prediction.
    pub group_path: bool,
    pub fusion: Fusion,
}

impl Default for RelationConfig {
    fn default() -> Self {
        Self {
            channels: 32,
            classes: 8,
            heads: 4,
            temporal: vec![TemporalConv { width: 3, pad: 1 }; 2],
            group: vec![
                GroupConv { k_t: 3, k_s: 3, s_t: 1, s_s: 1 },
                GroupConv { k_t: 3, k_s: 3, s_t: 1, s_s: 3 },
            ],
            share_attention: true,
            detach: Detach::ConvInput,
            group_path: true,
            fusion: Fusion::Logits,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Relation {
    temporal: Vec<(ParamId, ParamId)>,
    group: Vec<(ParamId, ParamId)>,
    pub actor_attention: MultiHeadAttention,
    pub group_attention: MultiHeadAttention,
    actor_head: Mlp,
    group_head: Mlp,
    frame_head: Linear,
    pub config: RelationConfig,
}

pub struct RelationOutput<'t> {
    /// `N×C`
    pub f_a: Var<'t>,
    pub logits_actor: Var<'t>,
    /// Present when the group path is enabled.
    pub f_g: Option<Var<'t>>,
    pub logits_group: Option<Var<'t>>,
    /// `(N·T)×classes`
    pub frame_logits: Option<Var<'t>>,
    /// `N×classes`
    pub fused: Var<'t>,
}

impl Relation {
    pub fn new<R: Rng>(store: &mut ParamStore, config: &RelationConfig, rng: &mut R) -> Result<Self> {
        let (c, n_cls) = (config.channels, config.classes);
        if c == 0 || n_cls < 2 {
            return Err(config_err!("relation needs a positive width and at least two classes"));
        }
        let mut temporal = Vec::new();
        for (i, tc) in config.temporal.iter().enumerate() {
            if tc.width == 0 {
                return Err(config_err!("temporal conv {i} has zero width"));
            }
            // conv1d kernels are laid out w×C_in×C_out
            let bound = (6.0 / (tc.width * c) as f64).sqrt();
            let k = store.insert(format!("relation.tconv{i}.kernel"), Tensor::uniform(&[tc.width, c, c], bound, rng))?;
            let b = store.insert(format!("relation.tconv{i}.bias"), Tensor::zeros(&[c]))?;
            temporal.push((k, b));
        }
        let actor_attention = MultiHeadAttention::new(store, "relation.attn", c, config.heads, rng)?;
        let group_attention = if config.share_attention {
            actor_attention
        } else {
            MultiHeadAttention::new(store, "relation.attn_group", c, config.heads, rng)?
        };
        let mut group = Vec::new();
        for (i, g) in config.group.iter().enumerate() {
            if g.k_t == 0 || g.k_s == 0 || g.s_t == 0 || g.s_s == 0 {
                return Err(config_err!("group conv {i} has a zero kernel extent or stride"));
            }
            let k = store.insert(format!("relation.gconv{i}.kernel"), conv_kernel([c, c, g.k_s, g.k_t], rng))?;
            let b = store.insert(format!("relation.gconv{i}.bias"), Tensor::zeros(&[c]))?;
            group.push((k, b));
        }
        Ok(Self {
            temporal,
            group,
            actor_attention,
            group_attention,
            actor_head: Mlp::new(store, "relation.actor_head", [c, c, n_cls], rng)?,
            group_head: Mlp::new(store, "relation.group_head", [c, c, n_cls], rng)?,
            frame_head: Linear::new(store, "relation.frame_head", c, n_cls, rng)?,
            config: config.clone(),
        })
    }

    /// Checks that `t` frames and `k` tokens survive both convolution stacks.
    pub fn check_extents(&self, t: usize, k: usize) -> Result<()> {
        let mut tt = t;
        for (i, tc) in self.config.temporal.iter().enumerate() {
            if tt + 2 * tc.pad < tc.width {
                return Err(config_err!("temporal conv {i} (width {}) consumes all {t} frames", tc.width));
            }
            tt = tt + 2 * tc.pad - tc.width + 1;
        }
        if !self.config.group_path {
            return Ok(());
        }
        let (mut gk, mut gt) = (k, t);
        for (i, g) in self.config.group.iter().enumerate() {
            if gk < g.k_s || gt < g.k_t {
                return Err(config_err!(
                    "group conv {i} kernel {}x{} exceeds the {gt}-frame, {gk}-token grid",
                    g.k_t,
                    g.k_s
                ));
            }
            gk = (gk - g.k_s) / g.s_s + 1;
            gt = (gt - g.k_t) / g.s_t + 1;
        }
        Ok(())
    }

    /// Actor path on `N×T×K×C` tokens; returns `(f_A, logits)`.
    pub fn actor_path<'t>(&self, tape: &'t Tape, store: &ParamStore, w: &Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let s = w.shape();
        let (n, t, k, c) = (s[0], s[1], s[2], s[3]);
        let mut x = w.permute(&[0, 2, 1, 3])?.reshape(&[n * k, t, c])?;
        for (&(kern, bias), tc) in self.temporal.iter().zip(&self.config.temporal) {
            x = x
                .conv1d_temporal(&tape.param(store, kern), tc.pad)?
                .add_bias(&tape.param(store, bias), 2)?
                .relu();
        }
        let pooled = x.mean_axis(1)?.reshape(&[n, k, c])?;
        let related = pooled.add(&self.actor_attention.self_attend(tape, store, &pooled)?.out)?;
        let f_a = related.mean_axis(1)?;
        let logits = self.actor_head.forward(tape, store, &f_a)?;
        Ok((f_a, logits))
    }

    /// Group path on `N×T×K×C` tokens; returns `(f_G, logits, frame_logits)`.
    pub fn group_path<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        w: &Var<'t>,
    ) -> Result<(Var<'t>, Var<'t>, Var<'t>)> {
        let s = w.shape();
        let (n, t, k, c) = (s[0], s[1], s[2], s[3]);
        let per_frame = w.reshape(&[n * t, k, c])?;
        let u = per_frame.add(&self.group_attention.self_attend(tape, store, &per_frame)?.out)?;
        let frame_in = u.mean_axis(1)?;
        let frame_in = match self.config.detach {
            Detach::FrameClassifier => frame_in.stop_gradient(),
            _ => frame_in,
        };
        let frame_logits = self.frame_head.forward(tape, store, &frame_in)?;
        let mut grid = u.reshape(&[n, t, k, c])?.permute(&[0, 3, 2, 1])?;
        if self.config.detach == Detach::ConvInput {
            grid = grid.stop_gradient();
        }
        for (&(kern, bias), g) in self.group.iter().zip(&self.config.group) {
            grid = grid
                .conv2d(&tape.param(store, kern), (g.s_s, g.s_t), (0, 0))?
                .add_bias(&tape.param(store, bias), 1)?
                .relu();
        }
        let gs = grid.shape();
        let f_g = grid.reshape(&[n, c, gs[2] * gs[3]])?.mean_axis(2)?;
        let logits = self.group_head.forward(tape, store, &f_g)?;
        Ok((f_g, logits, frame_logits))
    }

    /// Full module on `N×T×K×C` tokens.
    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, w: &Var<'t>) -> Result<RelationOutput<'t>> {
        let s = w.shape();
        if s.len() != 4 || s[3] != self.config.channels {
            return Err(config_err!("relation expects N×T×K×{} tokens, got {:?}", self.config.channels, s));
        }
        self.check_extents(s[1], s[2])?;
        let (f_a, logits_actor) = self.actor_path(tape, store, w)?;
        if !self.config.group_path {
            return Ok(RelationOutput {
                f_a,
                fused: logits_actor,
                logits_actor,
                f_g: None,
                logits_group: None,
                frame_logits: None,
            });
        }
        let (f_g, logits_group, frame_logits) = self.group_path(tape, store, w)?;
        let fused = fuse(&logits_actor, &logits_group, self.config.fusion)?;
        Ok(RelationOutput {
            f_a,
            logits_actor,
            f_g: Some(f_g),
            logits_group: Some(logits_group),
            frame_logits: Some(frame_logits),
            fused,
        })
    }
}

/// Combines the two classifier outputs (`N×classes` each).
pub fn fuse<'t>(actor: &Var<'t>, group: &Var<'t>, mode: Fusion) -> Result<Var<'t>> {
    if actor.shape() != group.shape() {
        return Err(contract_err!("logit shapes {:?} and {:?} differ", actor.shape(), group.shape()));
    }
    match mode {
        Fusion::Logits => Ok(actor.add(group)?.scale(0.5)),
        Fusion::Probabilities => Ok(actor.softmax_rows()?.add(&group.softmax_rows()?)?.scale(0.5).log()),
    }
}

/// Elementwise mean of two logit vectors.
pub fn fuse_and_classify(actor: &[f64], group: &[f64]) -> Result<Vec<f64>> {
    if actor.len() != group.len() {
        return Err(contract_err!("logit lengths {} and {} differ", actor.len(), group.len()));
    }
    Ok(actor.iter().zip(group).map(|(a, b)| (a + b) / 2.0).collect())
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}
