//! Training losses: flow alignment of attention maps, temporal consistency
//! of tokens, per-frame classification, and the confidence-gated total.
//!
//! Both contrastive losses use `h(u, v) = exp(cos(u, v) / τ)` and, by
//! default, leave the positive pair out of the denominator. The temporal
//! loss is therefore negative when tokens are already consistent.

use crate::error::{config_err, contract_err, Result};
use crate::numerics::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub tau: f64,
    pub k_flm: usize,
    /// Include the positive pair in the contrastive denominators.
    pub inclusive_denominator: bool,
    /// Mean absolute difference instead of the contrastive flow loss.
    pub l1_flm: bool,
    /// Mean absolute difference instead of the contrastive temporal loss.
    pub l1_tco: bool,
    /// Gate the flow loss by the batch-mean confidence instead of per sample.
    pub batch_mean_gate: bool,
    pub use_flm: bool,
    pub use_tco: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.5,
            k_flm: 6,
            inclusive_denominator: false,
            l1_flm: false,
            l1_tco: false,
            batch_mean_gate: false,
            use_flm: true,
            use_tco: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self, tokens: usize) -> Result<()> {
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(config_err!("temperature must be positive, got {}", self.tau));
        }
        if self.k_flm == 0 || self.k_flm > tokens {
            return Err(config_err!("k_flm = {} is outside [1, {tokens}]", self.k_flm));
        }
        Ok(())
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(config_err!("temperature must be positive, got {tau}"));
    }
    Ok(())
}

/// Per-row contrastive terms for a similarity matrix `s` (`R×R`, rows are
/// anchors, the diagonal holds positives):
/// `log Σ_j exp(s_ij/τ) − s_ii/τ`, with `j ≠ i` unless `inclusive`.
fn contrastive_rows<'t>(s: &Var<'t>, tau: f64, inclusive: bool) -> Result<Var<'t>> {
    let tape = s.tape();
    let r = s.shape()[0];
    if !inclusive && r < 2 {
        return Err(contract_err!("contrastive loss needs at least two rows when the positive is excluded"));
    }
    let scaled = s.scale(1.0 / tau);
    let sv = scaled.value();
    let keep = |i: usize, j: usize| inclusive || i != j;
    // Row shift by the largest denominator entry; a constant shift leaves
    // log-sum-exp and its gradient unchanged.
    let shift: Vec<f64> = (0..r)
        .map(|i| {
            (0..r)
                .filter(|&j| keep(i, j))
                .map(|j| sv.data()[i * r + j])
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    let shift_grid = Tensor::from_fn(&[r, r], |k| shift[k / r]);
    let mask = Tensor::from_fn(&[r, r], |k| if keep(k / r, k % r) { 1.0 } else { 0.0 });
    let eye = Tensor::from_fn(&[r, r], |k| if k / r == k % r { 1.0 } else { 0.0 });
    let ones = tape.constant(Tensor::ones(&[r, 1]));
    let denom = scaled
        .sub(&tape.constant(shift_grid))?
        .exp()
        .mul(&tape.constant(mask))?
        .matmul(&ones)?
        .reshape(&[r])?
        .log();
    let pos = scaled.mul(&tape.constant(eye))?.matmul(&ones)?.reshape(&[r])?;
    denom.add(&tape.constant(Tensor::from_vec(shift)).sub(&pos)?)
}

/// Flow-alignment terms per row of one block: `att`, `m` are `R×HW`.
pub fn flm_rows<'t>(att: &Var<'t>, m: &Var<'t>, tau: f64, inclusive: bool) -> Result<Var<'t>> {
    check_tau(tau)?;
    if att.shape() != m.shape() || att.shape().len() != 2 {
        return Err(contract_err!("attention {:?} and flow {:?} rows do not match", att.shape(), m.shape()));
    }
    contrastive_rows(&att.cosine_similarity_matrix(m)?, tau, inclusive)
}

/// Mean-absolute-difference alternative, per row.
pub fn l1_flm_rows<'t>(att: &Var<'t>, m: &Var<'t>) -> Result<Var<'t>> {
    if att.shape() != m.shape() || att.shape().len() != 2 {
        return Err(contract_err!("attention {:?} and flow {:?} rows do not match", att.shape(), m.shape()));
    }
    att.sub(m)?.abs().mean_axis(1)
}

/// Flow-alignment loss averaged over rows and then over blocks.
/// `blocks` holds one `R×HW` representative-attention map per block.
pub fn loss_flm<'t>(blocks: &[Var<'t>], m: &Var<'t>, tau: f64, inclusive: bool) -> Result<Var<'t>> {
    if blocks.is_empty() {
        return Err(contract_err!("flow loss needs at least one block"));
    }
    let mut acc: Option<Var<'t>> = None;
    for a in blocks {
        let v = flm_rows(a, m, tau, inclusive)?.mean();
        acc = Some(match acc {
            None => v,
            Some(x) => x.add(&v)?,
        });
    }
    Ok(acc.unwrap().scale(1.0 / blocks.len() as f64))
}

/// Per-sample flow loss: rows are ordered sample-major (`n·T + t`); the
/// result is `N` values, each the mean over its frames and over blocks.
pub fn flm_per_sample<'t>(blocks: &[Var<'t>], m: &Var<'t>, n: usize, cfg: &LossConfig) -> Result<Var<'t>> {
    if blocks.is_empty() {
        return Err(contract_err!("flow loss needs at least one block"));
    }
    let rows = m.shape()[0];
    if n == 0 || !rows.is_multiple_of(n) {
        return Err(contract_err!("{rows} flow rows do not split into {n} samples"));
    }
    let mut acc: Option<Var<'t>> = None;
    for a in blocks {
        let r = if cfg.l1_flm {
            l1_flm_rows(a, m)?
        } else {
            flm_rows(a, m, cfg.tau, cfg.inclusive_denominator)?
        };
        let v = r.reshape(&[n, rows / n])?.mean_axis(1)?;
        acc = Some(match acc {
            None => v,
            Some(x) => x.add(&v)?,
        });
    }
    Ok(acc.unwrap().scale(1.0 / blocks.len() as f64))
}

/// Temporal-consistency loss on `T×R×C` tokens: for each adjacent pair of
/// frames, both directions of the contrastive term averaged over the `R`
/// tokens; then the mean over the `T−1` pairs.
pub fn loss_tco<'t>(w: &Var<'t>, tau: f64, inclusive: bool) -> Result<Var<'t>> {
    check_tau(tau)?;
    let s = w.shape();
    if s.len() != 3 || s[0] < 2 {
        return Err(contract_err!("temporal loss needs T ≥ 2 frames of tokens, got {:?}", s));
    }
    let (t, r) = (s[0], s[1]);
    let frames: Vec<Var<'t>> = (0..t)
        .map(|f| w.slice(0, f, 1)?.reshape(&[r, s[2]]))
        .collect::<Result<_>>()?;
    let mut acc: Option<Var<'t>> = None;
    for pair in frames.windows(2) {
        let sim = pair[0].cosine_similarity_matrix(&pair[1])?;
        let fwd = contrastive_rows(&sim, tau, inclusive)?;
        let bwd = contrastive_rows(&sim.transpose()?, tau, inclusive)?;
        let v = fwd.add(&bwd)?.sum().scale(1.0 / r as f64);
        acc = Some(match acc {
            None => v,
            Some(x) => x.add(&v)?,
        });
    }
    Ok(acc.unwrap().scale(1.0 / (t - 1) as f64))
}

/// Mean absolute difference between same-index tokens of adjacent frames.
pub fn l1_tco<'t>(w: &Var<'t>) -> Result<Var<'t>> {
    let s = w.shape();
    if s.len() != 3 || s[0] < 2 {
        return Err(contract_err!("temporal loss needs T ≥ 2 frames of tokens, got {:?}", s));
    }
    let a = w.slice(0, 0, s[0] - 1)?;
    let b = w.slice(0, 1, s[0] - 1)?;
    Ok(a.sub(&b)?.abs().mean())
}

/// Mean cross-entropy of `N×classes` logits against labels.
pub fn cross_entropy<'t>(logits: &Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
    let s = logits.shape();
    if s.len() != 2 || s[0] != labels.len() || labels.is_empty() {
        return Err(contract_err!("{} labels for logits {:?}", labels.len(), s));
    }
    let classes = s[1];
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(contract_err!("label {bad} is out of range for {classes} classes"));
    }
    let onehot = Tensor::from_fn(s.as_slice(), |k| if labels[k / classes] == k % classes { 1.0 } else { 0.0 });
    let tape = logits.tape();
    Ok(logits.log_softmax_rows()?.mul(&tape.constant(onehot))?.sum().scale(-1.0 / labels.len() as f64))
}

/// Per-frame classification loss: `frame_logits` is `(N·T)×classes` in
/// sample-major order and every frame is scored against its sample's label.
pub fn loss_gf<'t>(frame_logits: &Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
    let rows = frame_logits.shape()[0];
    if labels.is_empty() || !rows.is_multiple_of(labels.len()) {
        return Err(contract_err!("{rows} frame rows do not split into {} samples", labels.len()));
    }
    let t = rows / labels.len();
    let expanded: Vec<usize> = labels.iter().flat_map(|&l| std::iter::repeat_n(l, t)).collect();
    cross_entropy(frame_logits, &expanded)
}

/// Maximum softmax probability of each row, as plain numbers.
pub fn confidence(logits: &Tensor) -> Vec<f64> {
    let classes = *logits.shape().last().unwrap();
    logits
        .data()
        .chunks(classes)
        .map(|row| {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = row.iter().map(|v| (v - max).exp()).sum();
            1.0 / total
        })
        .collect()
}

/// Loss values of one step.
#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub ce: f64,
    pub flm: f64,
    pub flm_per_sample: Vec<f64>,
    pub tco: f64,
    pub gf: f64,
    pub rho: Vec<f64>,
    pub batch_mean_gate: bool,
    pub total: f64,
}

impl LossBreakdown {
    /// Recomputes the total from the parts.
    pub fn recombine(&self) -> f64 {
        let n = self.rho.len().max(1) as f64;
        let gated = if self.flm_per_sample.is_empty() {
            0.0
        } else if self.batch_mean_gate {
            (1.0 - self.rho.iter().sum::<f64>() / n) * self.flm
        } else {
            self.flm_per_sample.iter().zip(&self.rho).map(|(l, r)| (1.0 - r) * l).sum::<f64>() / n
        };
        self.ce + gated + self.tco + self.gf
    }

    pub fn mean_rho(&self) -> f64 {
        self.rho.iter().sum::<f64>() / self.rho.len().max(1) as f64
    }

    pub const CSV_HEADER: &'static str = "step,l_ce,l_flm,l_tco,l_gf,mean_rho,total";

    pub fn csv_row(&self, step: usize) -> String {
        format!(
            "{step},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9}",
            self.ce,
            self.flm,
            self.tco,
            self.gf,
            self.mean_rho(),
            self.total
        )
    }
}

/// Everything the total loss reads from one forward pass.
pub struct LossInputs<'a, 't> {
    /// `N×classes`
    pub fused: &'a Var<'t>,
    /// `(N·T)×classes`, absent when the group path is off.
    pub frame_logits: Option<&'a Var<'t>>,
    /// Per block, `(N·T)×HW` representative attention.
    pub attention: &'a [Var<'t>],
    /// `(N·T)×HW` flow guidance; absent disables the flow term.
    pub flow: Option<&'a Var<'t>>,
    /// `N×T×K×C`
    pub tokens: &'a Var<'t>,
    pub labels: &'a [usize],
    /// Confidence per sample to gate with instead of the one read off
    /// `fused`. Lets a finite-difference check hold the gate fixed.
    pub confidence: Option<&'a [f64]>,
}

/// `L_CE + gate·L_flm + L_tco + L_gf` with the gate `1 − ρ` computed from
/// the fused logits and held constant during backward.
pub fn total_loss<'t>(inputs: &LossInputs<'_, 't>, cfg: &LossConfig) -> Result<(Var<'t>, LossBreakdown)> {
    check_tau(cfg.tau)?;
    let tape: &'t Tape = inputs.fused.tape();
    let n = inputs.labels.len();
    let ce = cross_entropy(inputs.fused, inputs.labels)?;
    let rho = match inputs.confidence {
        Some(r) if r.len() == n => r.to_vec(),
        Some(r) => return Err(contract_err!("{} confidences for {n} samples", r.len())),
        None => confidence(&inputs.fused.value()),
    };
    let mut total = ce;
    let mut bd = LossBreakdown {
        ce: ce.item(),
        flm: 0.0,
        flm_per_sample: Vec::new(),
        tco: 0.0,
        gf: 0.0,
        rho: rho.clone(),
        batch_mean_gate: cfg.batch_mean_gate,
        total: 0.0,
    };
    if let (true, Some(m)) = (cfg.use_flm, inputs.flow) {
        let per = flm_per_sample(inputs.attention, m, n, cfg)?;
        let flm = per.mean();
        let gated = if cfg.batch_mean_gate {
            let mean_rho = rho.iter().sum::<f64>() / n as f64;
            flm.scale(1.0 - mean_rho)
        } else {
            let gate = Tensor::from_vec(rho.iter().map(|r| 1.0 - r).collect());
            per.mul(&tape.constant(gate))?.mean()
        };
        bd.flm = flm.item();
        bd.flm_per_sample = per.value().data().to_vec();
        total = total.add(&gated)?;
    }
    if cfg.use_tco {
        let s = inputs.tokens.shape();
        let w = inputs.tokens.permute(&[1, 0, 2, 3])?.reshape(&[s[1], s[0] * s[2], s[3]])?;
        let tco = if cfg.l1_tco {
            l1_tco(&w)?
        } else {
            loss_tco(&w, cfg.tau, cfg.inclusive_denominator)?
        };
        bd.tco = tco.item();
        total = total.add(&tco)?;
    }
    if let Some(fl) = inputs.frame_logits {
        let gf = loss_gf(fl, inputs.labels)?;
        bd.gf = gf.item();
        total = total.add(&gf)?;
    }
    bd.total = total.item();
    Ok((total, bd))
}
