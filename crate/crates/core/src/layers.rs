//! Parameterized building blocks shared by the encoder and relation module.

use rand::Rng;

use crate::error::{config_err, Result};
use crate::numerics::{ParamId, ParamStore, Tape, Tensor, Var};

/// Affine map `x·W + b` over the last axis, `W: in×out`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    /// Weights uniform in `±sqrt(1/fan_in)`, bias zero.
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Result<Self> {
        let bound = (1.0 / fan_in as f64).sqrt();
        let w = store.insert(format!("{name}.w"), Tensor::uniform(&[fan_in, fan_out], bound, rng))?;
        let b = store.insert(format!("{name}.b"), Tensor::zeros(&[fan_out]))?;
        Ok(Self { w, b, fan_in, fan_out })
    }

    /// Applies to any tensor whose last axis is `fan_in`.
    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: &Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        let rows = shape.iter().product::<usize>() / self.fan_in;
        let flat = x.reshape(&[rows, self.fan_in])?;
        let y = flat.linear(&tape.param(store, self.w), &tape.param(store, self.b))?;
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = self.fan_out;
        y.reshape(&out_shape)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

pub const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Result<Self> {
        let gamma = store.insert(format!("{name}.gamma"), Tensor::ones(&[width]))?;
        let beta = store.insert(format!("{name}.beta"), Tensor::zeros(&[width]))?;
        Ok(Self { gamma, beta })
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: &Var<'t>) -> Result<Var<'t>> {
        x.layer_norm(&tape.param(store, self.gamma), &tape.param(store, self.beta), LN_EPS)
    }
}

/// Two-layer perceptron with a ReLU in between.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Mlp {
    pub hidden: Linear,
    pub out: Linear,
}

impl Mlp {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, dims: [usize; 3], rng: &mut R) -> Result<Self> {
        Ok(Self {
            hidden: Linear::new(store, &format!("{name}.fc1"), dims[0], dims[1], rng)?,
            out: Linear::new(store, &format!("{name}.fc2"), dims[1], dims[2], rng)?,
        })
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: &Var<'t>) -> Result<Var<'t>> {
        let h = self.hidden.forward(tape, store, x)?.relu();
        self.out.forward(tape, store, &h)
    }
}

/// Multi-head attention with separate query/key/value/output projections.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub width: usize,
    pub heads: usize,
}

/// Attention output plus the post-softmax weights averaged over heads.
pub struct Attended<'t> {
    pub out: Var<'t>,
    /// `B×Nq×Nk`, each row a probability vector.
    pub weights: Var<'t>,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, width: usize, heads: usize, rng: &mut R) -> Result<Self> {
        if heads == 0 || !width.is_multiple_of(heads) {
            return Err(config_err!("width {width} is not divisible by {heads} heads"));
        }
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), width, width, rng)?,
            k: Linear::new(store, &format!("{name}.k"), width, width, rng)?,
            v: Linear::new(store, &format!("{name}.v"), width, width, rng)?,
            o: Linear::new(store, &format!("{name}.o"), width, width, rng)?,
            width,
            heads,
        })
    }

    /// `queries: B×Nq×C`, `keys`/`values: B×Nk×C`. Scores are scaled by the
    /// square root of the per-head width.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        queries: &Var<'t>,
        keys: &Var<'t>,
        values: &Var<'t>,
    ) -> Result<Attended<'t>> {
        let (qs, ks) = (queries.shape(), keys.shape());
        if qs.len() != 3 || ks.len() != 3 || qs[2] != self.width || ks[2] != self.width || qs[0] != ks[0] {
            return Err(config_err!(
                "attention of width {} cannot take queries {:?} and keys {:?}",
                self.width,
                qs,
                ks
            ));
        }
        let (b, nq, nk, h) = (qs[0], qs[1], ks[1], self.heads);
        let d = self.width / h;
        let split = |x: Var<'t>, n: usize| -> Result<Var<'t>> {
            x.reshape(&[b, n, h, d])?.permute(&[0, 2, 1, 3])?.reshape(&[b * h, n, d])
        };
        let q = split(self.q.forward(tape, store, queries)?, nq)?;
        let k = split(self.k.forward(tape, store, keys)?, nk)?;
        let v = split(self.v.forward(tape, store, values)?, nk)?;
        let scores = q.bmm(&k, true)?.scale(1.0 / (d as f64).sqrt());
        let attn = scores.softmax_rows()?;
        let mixed = attn
            .bmm(&v, false)?
            .reshape(&[b, h, nq, d])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[b, nq, self.width])?;
        let out = self.o.forward(tape, store, &mixed)?;
        let weights = attn.reshape(&[b, h, nq, nk])?.mean_axis(1)?;
        Ok(Attended { out, weights })
    }

    pub fn self_attend<'t>(&self, tape: &'t Tape, store: &ParamStore, x: &Var<'t>) -> Result<Attended<'t>> {
        self.forward(tape, store, x, x, x)
    }
}
