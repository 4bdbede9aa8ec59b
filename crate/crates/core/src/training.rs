//! Optimizer, learning-rate schedule, augmentation, and the train/evaluate
//! loops.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::actor_encoder::representative_attention;
use crate::error::{config_err, contract_err, Result};
use crate::losses::{total_loss, LossBreakdown, LossConfig, LossInputs};
use crate::metrics::{self, ConfusionMatrix, MergeMap};
use crate::model::Model;
use crate::numerics::{Gradients, ParamStore, Tape, Tensor, Var};
use crate::relation::argmax;
use crate::synthdata::{horizontal_flip, segment_indices, ActivityClass, SampleMode, StoredSample, VideoSample};

/// Where training-time flow magnitudes come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum FlowSource {
    /// Renderer ground truth, falling back to frame differences when a
    /// sample has none.
    #[default]
    Truth,
    FrameDifference,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Apply weight decay directly to the weights instead of the gradient.
    pub decoupled_decay: bool,
    pub lr_min: f64,
    pub lr_peak: f64,
    pub warmup_epochs: usize,
    pub seed: u64,
    pub flip: bool,
    pub brightness: bool,
    pub sampling: SampleMode,
    pub flow_source: FlowSource,
    pub flow_quantile: f64,
    pub flow_suppress: bool,
    pub flow_per_clip: bool,
    /// Evaluate on the held-out split every this many epochs (0 = never).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch: 4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            decoupled_decay: false,
            lr_min: 1e-6,
            lr_peak: 1e-4,
            warmup_epochs: 5,
            seed: 0,
            flip: true,
            brightness: true,
            sampling: SampleMode::Train,
            flow_source: FlowSource::Truth,
            flow_quantile: 0.85,
            flow_suppress: true,
            flow_per_clip: false,
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch == 0 {
            return Err(config_err!("epochs and batch must be positive"));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(config_err!(
                "warmup_epochs ({}) must be below epochs ({})",
                self.warmup_epochs,
                self.epochs
            ));
        }
        let rates = [self.lr_min, self.lr_peak, self.eps];
        if rates.iter().any(|r| !(*r > 0.0) || !r.is_finite()) || self.weight_decay < 0.0 {
            return Err(config_err!("learning rates and eps must be positive, weight decay non-negative"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(config_err!("Adam betas must lie in [0, 1)"));
        }
        if !(self.flow_quantile > 0.0 && self.flow_quantile < 1.0) {
            return Err(config_err!("flow quantile must lie in (0, 1)"));
        }
        if self.sampling == SampleMode::Eval {
            return Err(config_err!("training sampling must be train or random"));
        }
        Ok(())
    }
}

/// Learning rate for `epoch`: linear warmup from `lr_min` at epoch 0 to
/// `lr_peak` at `warmup_epochs`, held for one more epoch, then linear decay
/// reaching 0 at `epochs`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    let (w, e) = (cfg.warmup_epochs, cfg.epochs);
    if epoch > e {
        return Err(contract_err!("epoch {epoch} is past the {e}-epoch schedule"));
    }
    if w >= e {
        return Err(config_err!("warmup_epochs ({w}) must be below epochs ({e})"));
    }
    if epoch <= w {
        if w == 0 {
            return Ok(cfg.lr_peak);
        }
        let f = epoch as f64 / w as f64;
        return Ok(cfg.lr_min + (cfg.lr_peak - cfg.lr_min) * f);
    }
    let start = w + 1;
    if epoch <= start {
        return Ok(cfg.lr_peak);
    }
    Ok(cfg.lr_peak * (e - epoch) as f64 / (e - start) as f64)
}

/// Adam moments for every parameter of a store.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One bias-corrected Adam update. Weight decay is added to the gradient
/// (L2) unless `cfg.decoupled_decay` is set.
pub fn adam_step(store: &mut ParamStore, grads: &Gradients, state: &mut AdamState, lr: f64, cfg: &TrainConfig) -> Result<()> {
    if !(lr > 0.0) {
        return Err(contract_err!("learning rate must be positive, got {lr}"));
    }
    if grads.len() != store.len() || state.m.len() != store.len() {
        return Err(contract_err!("gradient, state and parameter counts differ"));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
    let wd = cfg.weight_decay;
    let ids: Vec<_> = store.ids().collect();
    for (i, id) in ids.into_iter().enumerate() {
        let g = grads.get(id);
        if g.shape() != store.get(id).shape() || state.m[i].shape() != g.shape() {
            return Err(contract_err!("shape mismatch for parameter {}", store.name(id)));
        }
        let p = store.get_mut(id).data_mut();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for k in 0..p.len() {
            let gk = if cfg.decoupled_decay { g.data()[k] } else { g.data()[k] + wd * p[k] };
            m[k] = b1 * m[k] + (1.0 - b1) * gk;
            v[k] = b2 * v[k] + (1.0 - b2) * gk * gk;
            let update = (m[k] / c1) / ((v[k] / c2).sqrt() + cfg.eps);
            if cfg.decoupled_decay {
                p[k] -= lr * wd * p[k];
            }
            p[k] -= lr * update;
        }
    }
    Ok(())
}

/// Frames and targets for one mini-batch.
pub struct Batch {
    /// `(N·T)×3×H0×W0`
    pub frames: Tensor,
    /// `(N·T)×HW` guidance maps, when flow is in use.
    pub flow: Option<Tensor>,
    pub labels: Vec<usize>,
    /// Raw frame indices picked from each clip.
    pub indices: Vec<Vec<usize>>,
}

fn clip_frames(s: &VideoSample, indices: &[usize], gain: f64, out: &mut Vec<f64>) {
    let (h, w) = (s.height(), s.width());
    let plane = h * w;
    for &f in indices {
        let src = s.frame(f);
        for c in 0..3 {
            out.extend((0..plane).map(|p| f64::from(src[p * 3 + c]) * gain));
        }
    }
}

/// Eval-mode batch: centre frame of each segment, no augmentation, no flow.
pub fn eval_batch(samples: &[&VideoSample], t: usize) -> Result<Batch> {
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut indices = Vec::new();
    for s in samples {
        let idx = segment_indices(s.t_raw(), t, SampleMode::Eval, 0)?;
        clip_frames(s, &idx, 1.0, &mut data);
        labels.push(s.label().index());
        indices.push(idx);
    }
    let (h, w) = (samples[0].height(), samples[0].width());
    Ok(Batch {
        frames: Tensor::new(&[samples.len() * t, 3, h, w], data)?,
        flow: None,
        labels,
        indices,
    })
}

#[cfg(feature = "flow")]
fn flow_rows(s: &VideoSample, idx: &[usize], grid: (usize, usize), cfg: &TrainConfig) -> Result<Vec<f64>> {
    use crate::flowproc::{flow_targets, frame_difference_flow, FlowNorm, FlowPrepConfig};
    let (h, w) = (s.height(), s.width());
    let plane = h * w;
    let diff;
    let raw: &[f32] = match (cfg.flow_source, s.gt_flow()) {
        (FlowSource::Truth, Some(f)) => f,
        _ => {
            let frames = s.frames();
            diff = frame_difference_flow(frames, s.t_raw(), h, w)?;
            &diff
        }
    };
    let picked: Vec<f32> = idx.iter().flat_map(|&f| raw[f * plane..(f + 1) * plane].iter().copied()).collect();
    let prep = FlowPrepConfig {
        quantile: cfg.flow_quantile,
        suppress: cfg.flow_suppress,
        norm: if cfg.flow_per_clip { FlowNorm::PerClip } else { FlowNorm::PerFrame },
    };
    Ok(flow_targets(&picked, idx.len(), h, w, grid.0, grid.1, &prep)?.values)
}

/// Train-mode batch with augmentation draws taken from `rng` in a fixed order.
pub fn train_batch(samples: &[&VideoSample], t: usize, grid: (usize, usize), with_flow: bool, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<Batch> {
    let mut data = Vec::new();
    #[cfg_attr(not(feature = "flow"), allow(unused_mut))]
    let mut flow: Vec<f64> = Vec::new();
    let mut labels = Vec::new();
    let mut indices = Vec::new();
    for &s in samples {
        let flip = rng.gen_bool(0.5);
        let gain = rng.gen_range(0.8..=1.2);
        let seg_seed: u64 = rng.gen();
        let flipped;
        let clip = if cfg.flip && flip {
            flipped = horizontal_flip(s);
            &flipped
        } else {
            s
        };
        let gain = if cfg.brightness { gain } else { 1.0 };
        let idx = segment_indices(clip.t_raw(), t, cfg.sampling, seg_seed)?;
        clip_frames(clip, &idx, gain, &mut data);
        if with_flow {
            #[cfg(feature = "flow")]
            flow.extend(flow_rows(clip, &idx, grid, cfg)?);
        }
        labels.push(clip.label().index());
        indices.push(idx);
    }
    let (h, w) = (samples[0].height(), samples[0].width());
    let n = samples.len();
    let flow = if with_flow && !flow.is_empty() {
        Some(Tensor::new(&[n * t, grid.0 * grid.1], flow)?)
    } else {
        None
    };
    Ok(Batch {
        frames: Tensor::new(&[n * t, 3, h, w], data)?,
        flow,
        labels,
        indices,
    })
}

/// Loss of a model on one batch, recorded on `tape`. `confidence` fixes the
/// flow-loss gate; `None` reads it off the predictions.
pub fn batch_loss<'t>(
    tape: &'t Tape,
    model: &Model,
    store: &ParamStore,
    batch: &Batch,
    loss_cfg: &LossConfig,
    confidence: Option<&[f64]>,
) -> Result<(Var<'t>, LossBreakdown)> {
    let n = batch.labels.len();
    let out = model.forward_with(tape, store, &batch.frames, n)?;
    let attention = out
        .encoder
        .attention
        .iter()
        .map(|a| representative_attention(a, loss_cfg.k_flm))
        .collect::<Result<Vec<_>>>()?;
    let flow = batch.flow.as_ref().map(|f| tape.constant(f.clone()));
    let inputs = LossInputs {
        fused: &out.relation.fused,
        frame_logits: out.relation.frame_logits.as_ref(),
        attention: &attention,
        flow: flow.as_ref(),
        tokens: &out.tokens,
        labels: &batch.labels,
        confidence,
    };
    total_loss(&inputs, loss_cfg)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub eval: Option<EvalSummary>,
}

impl EpochLog {
    pub fn csv_row(&self) -> String {
        let (mca, mpca, merged, loc) = match &self.eval {
            Some(e) => (e.mca, e.mpca, e.merged_mca, e.localization.unwrap_or(f64::NAN)),
            None => (f64::NAN, f64::NAN, f64::NAN, f64::NAN),
        };
        format!(
            "{},{:.9e},{:.9},{:.6},{:.6},{:.6},{:.6}",
            self.epoch, self.lr, self.train_loss, mca, mpca, merged, loc
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub steps: Vec<LossBreakdown>,
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    pub fn steps_csv(&self) -> String {
        let mut out = format!("{}\n", LossBreakdown::CSV_HEADER);
        for (i, s) in self.steps.iter().enumerate() {
            out.push_str(&s.csv_row(i));
            out.push('\n');
        }
        out
    }

    pub fn epochs_csv(&self) -> String {
        let mut out = format!("{}\n", metrics::METRICS_CSV_HEADER);
        for e in &self.epochs {
            out.push_str(&e.csv_row());
            out.push('\n');
        }
        out
    }
}

/// Trains `model` in place. Everything random (order, augmentation, frame
/// picks) comes from `cfg.seed`, so equal inputs give bitwise-equal results.
pub fn train(
    model: &mut Model,
    train_set: &[StoredSample],
    held_out: &[StoredSample],
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    progress: &mut dyn FnMut(&EpochLog),
) -> Result<TrainLog> {
    cfg.validate()?;
    loss_cfg.validate(model.config.encoder.tokens)?;
    if train_set.is_empty() {
        return Err(config_err!("training set is empty"));
    }
    check_classes(model)?;
    let with_flow = cfg!(feature = "flow") && loss_cfg.use_flm;
    let t = model.config.frames;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0f_7a11);
    let mut state = AdamState::new(&model.store);
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, cfg)?;
        shuffle(&mut order, &mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch) {
            let samples: Vec<&VideoSample> = chunk.iter().map(|&i| &train_set[i].sample).collect();
            let batch = train_batch(&samples, t, model.grid, with_flow, cfg, &mut rng)?;
            let tape = Tape::new();
            let (loss, bd) = batch_loss(&tape, model, &model.store, &batch, loss_cfg, None)?;
            let grads = tape.backward(loss, &model.store)?;
            adam_step(&mut model.store, &grads, &mut state, lr, cfg)?;
            loss_sum += bd.total;
            batches += 1;
            log.steps.push(bd);
        }
        let eval = if cfg.eval_every > 0 && !held_out.is_empty() && ((epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.epochs) {
            Some(evaluate(held_out, model, cfg.batch, loss_cfg.k_flm)?.summary())
        } else {
            None
        };
        let entry = EpochLog {
            epoch,
            lr,
            train_loss: loss_sum / batches as f64,
            eval,
        };
        progress(&entry);
        log.epochs.push(entry);
    }
    Ok(log)
}

fn shuffle(order: &mut [usize], rng: &mut ChaCha8Rng) {
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
}

fn check_classes(model: &Model) -> Result<()> {
    if model.classes() != ActivityClass::COUNT {
        return Err(config_err!(
            "model predicts {} classes but the dataset has {}",
            model.classes(),
            ActivityClass::COUNT
        ));
    }
    Ok(())
}

/// Folds each direction-mirrored pair of classes into one.
pub fn default_merge_map() -> MergeMap {
    MergeMap::new(vec![0, 0, 1, 2, 3, 4, 4, 5]).expect("onto")
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub confusion: ConfusionMatrix,
    pub predictions: Vec<usize>,
    /// Mean attention mass on key actors, when tracks are available.
    pub localization: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSummary {
    pub mca: f64,
    pub mpca: f64,
    pub merged_mca: f64,
    pub localization: Option<f64>,
}

impl EvalReport {
    pub fn summary(&self) -> EvalSummary {
        EvalSummary {
            mca: metrics::mca(&self.confusion).unwrap_or(0.0),
            mpca: metrics::mpca(&self.confusion).unwrap_or(0.0),
            merged_mca: metrics::merged_mca(&self.confusion, &default_merge_map()).unwrap_or(0.0),
            localization: self.localization,
        }
    }
}

/// Predicts every sample from eval-mode frames only; flow is never read.
pub fn evaluate(samples: &[StoredSample], model: &Model, batch: usize, k_flm: usize) -> Result<EvalReport> {
    check_classes(model)?;
    if samples.is_empty() {
        return Err(contract_err!("evaluation set is empty"));
    }
    let t = model.config.frames;
    let mut cm = ConfusionMatrix::new(ActivityClass::names());
    let mut predictions = Vec::with_capacity(samples.len());
    let mut loc_sum = 0.0;
    let mut loc_count = 0usize;
    for chunk in samples.chunks(batch.max(1)) {
        let clips: Vec<&VideoSample> = chunk.iter().map(|s| &s.sample).collect();
        let b = eval_batch(&clips, t)?;
        let tape = Tape::new();
        let out = model.forward(&tape, &b.frames, clips.len())?;
        let fused = out.relation.fused.value();
        let classes = model.classes();
        for (i, row) in fused.data().chunks(classes).enumerate() {
            let p = argmax(row);
            cm.record(b.labels[i], p);
            predictions.push(p);
        }
        if let Some(v) = localization(&out.encoder.attention, &clips, &b.indices, model, k_flm)? {
            loc_sum += v;
            loc_count += 1;
        }
    }
    Ok(EvalReport {
        confusion: cm,
        predictions,
        localization: (loc_count > 0).then(|| loc_sum / loc_count as f64),
    })
}

/// Batch mean of key-actor attention mass, using the representative map
/// averaged over blocks.
#[cfg(feature = "eval-tracks")]
fn localization(attention: &[Var<'_>], clips: &[&VideoSample], indices: &[Vec<usize>], model: &Model, k_flm: usize) -> Result<Option<f64>> {
    let (gh, gw) = model.grid;
    let hw = gh * gw;
    let t = model.config.frames;
    let k_flm = k_flm.min(model.config.encoder.tokens);
    let mut avg = vec![0.0; clips.len() * t * hw];
    for a in attention {
        let rep = representative_attention(a, k_flm)?.value();
        avg.iter_mut().zip(rep.data()).for_each(|(d, s)| *d += s / attention.len() as f64);
    }
    let mut total = 0.0;
    for (n, clip) in clips.iter().enumerate() {
        let masks: Vec<bool> = indices[n]
            .iter()
            .flat_map(|&f| clip.key_actor_mask(f, gh, gw).into_iter().map(|m| m > 0.0))
            .collect();
        total += metrics::attention_localization(&avg[n * t * hw..(n + 1) * t * hw], &masks, hw)?;
    }
    Ok(Some(total / clips.len() as f64))
}

#[cfg(not(feature = "eval-tracks"))]
fn localization(_: &[Var<'_>], _: &[&VideoSample], _: &[Vec<usize>], _: &Model, _: usize) -> Result<Option<f64>> {
    Ok(None)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_points() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(0, &cfg).unwrap(), 1e-6);
        assert!((lr_at(5, &cfg).unwrap() - 1e-4).abs() < 1e-20);
        assert_eq!(lr_at(6, &cfg).unwrap(), 1e-4);
        assert_eq!(lr_at(30, &cfg).unwrap(), 0.0);
        assert!((lr_at(18, &cfg).unwrap() - 0.5e-4).abs() < 1e-18);
        assert!(lr_at(31, &cfg).is_err());
        let mut prev = 0.0;
        for e in 0..=6 {
            let lr = lr_at(e, &cfg).unwrap();
            assert!(lr >= prev);
            prev = lr;
        }
        for e in 6..30 {
            assert!(lr_at(e + 1, &cfg).unwrap() < lr_at(e, &cfg).unwrap());
        }
    }

    fn scalar_store(v: f64) -> (ParamStore, crate::numerics::ParamId) {
        let mut s = ParamStore::new();
        let id = s.insert("p", Tensor::scalar(v)).unwrap();
        (s, id)
    }

    fn grads_of(store: &ParamStore, g: f64) -> Gradients {
        // d(g·p)/dp = g
        let tape = Tape::new();
        let id = store.id("p").unwrap();
        let loss = tape.param(store, id).scale(g).sum();
        tape.backward(loss, store).unwrap()
    }

    #[test]
    fn adam_first_step_and_zero_gradient() {
        let cfg = TrainConfig { weight_decay: 0.0, ..Default::default() };
        let (mut store, id) = scalar_store(0.5);
        let mut st = AdamState::new(&store);
        let g = grads_of(&store, 1.0);
        adam_step(&mut store, &g, &mut st, 1e-3, &cfg).unwrap();
        assert!((store.get(id).item() - (0.5 - 1e-3)).abs() < 2e-11);

        let (mut store, id) = scalar_store(0.5);
        let mut st = AdamState::new(&store);
        let g = grads_of(&store, 0.0);
        adam_step(&mut store, &g, &mut st, 1e-3, &cfg).unwrap();
        assert_eq!(store.get(id).item(), 0.5);
    }

    #[test]
    fn adam_two_steps_match_hand_recursion() {
        let cfg = TrainConfig { weight_decay: 0.0, ..Default::default() };
        let (mut store, id) = scalar_store(1.0);
        let mut st = AdamState::new(&store);
        for _ in 0..2 {
            let g = grads_of(&store, 1.0);
            adam_step(&mut store, &g, &mut st, 0.1, &cfg).unwrap();
        }
        // m1 = 0.1, v1 = 0.001; m2 = 0.19, v2 = 0.001999
        let (m2, v2) = (0.19, 0.001999);
        let step2 = (m2 / (1.0 - 0.81)) / ((v2 / (1.0 - 0.998001f64)).sqrt() + 1e-8);
        let step1 = 1.0 / (1.0 + 1e-8);
        assert!((store.get(id).item() - (1.0 - 0.1 * step1 - 0.1 * step2)).abs() < 1e-12);
    }
}
