//! The finite-difference suite behind `flaming gradcheck`: every tape op,
//! an encoder block, both relation paths, each loss and the whole training
//! objective, on instances small enough to check every coordinate.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::actor_encoder::{ActorEncoder, EncoderConfig};
use crate::backbone::FeatureMap;
use crate::config::RunConfig;
use crate::error::Result;
use crate::losses::{self, confidence};
use crate::model::Model;
use crate::numerics::{concat, finite_difference_check, stack, FdConfig, FdReport, ParamStore, Tape, Tensor, Var};
use crate::relation::{Detach, GroupConv, Relation, RelationConfig, TemporalConv};
use crate::synthdata::{balanced_specs, generate_dataset, VideoSample};
use crate::training::{batch_loss, train_batch};

#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub name: String,
    pub report: FdReport,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.report.passed()
    }
}

type Check = fn(&RunConfig, &FdConfig, u64) -> Result<FdReport>;

/// Checks in the order they run.
pub const CHECKS: &[(&str, Check)] = &[
    ("op.elementwise", op_elementwise),
    ("op.matmul", op_matmul),
    ("op.bmm", op_bmm),
    ("op.shape", op_shape),
    ("op.reductions", op_reductions),
    ("op.softmax", op_softmax),
    ("op.layer_norm", op_layer_norm),
    ("op.cosine", op_cosine),
    ("op.conv1d_temporal", op_conv1d),
    ("op.conv2d", op_conv2d),
    ("op.conv2d_strided", op_conv2d_strided),
    ("encoder.block", encoder_block),
    ("relation.actor_path", relation_actor),
    ("relation.group_path", relation_group),
    ("loss.flm", loss_flm),
    ("loss.tco", loss_tco),
    ("loss.l1_variants", loss_l1),
    ("loss.ce_gf", loss_ce_gf),
    ("objective.full", objective_full),
];

/// Runs every check; `filter` keeps only names containing it.
pub fn run(cfg: &RunConfig, fd: &FdConfig, seed: u64, filter: Option<&str>) -> Result<Vec<SuiteEntry>> {
    CHECKS
        .iter()
        .filter(|(name, _)| filter.is_none_or(|f| name.contains(f)))
        .map(|(name, check)| {
            Ok(SuiteEntry {
                name: name.to_string(),
                report: check(cfg, fd, seed)?,
            })
        })
        .collect()
}

fn rng(seed: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9).wrapping_add(salt))
}

/// Values bounded away from zero, so kinks at 0 stay outside the FD stencil.
fn off_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.2..1.5);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn store_of(entries: Vec<(&str, Tensor)>) -> Result<ParamStore> {
    let mut s = ParamStore::new();
    for (n, t) in entries {
        s.insert(n, t)?;
    }
    Ok(s)
}

fn p<'t>(tape: &'t Tape, store: &ParamStore, name: &str) -> Var<'t> {
    tape.param(store, store.id(name).expect("suite parameter"))
}

/// Contracts `y` with a fixed random probe so every output coordinate counts.
fn probe<'t>(y: &Var<'t>, seed: u64) -> Result<Var<'t>> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let t = Tensor::normal(&y.shape(), 1.0, &mut r);
    Ok(y.mul(&y.tape().constant(t))?.sum())
}

fn op_elementwise(_: &RunConfig, fd: &FdConfig, seed: u64) -> Result<FdReport> {
    let mut r = rng(seed, 1);
    let store = store_of(vec![
        ("a", off_zero(&[3, 4], &mut r)),
        ("b", off_zero(&[3, 4], &mut r)),
        ("pos", Tensor::from_fn(&[3, 4], |_| r.gen_range(0.5..2.0))),
        ("bias", Tensor::normal(&[4], 1.0, &mut r)),
    ])?;
    finite_difference_check(
        |tape, s| {
            let (a, b, pos, bias) = (p(tape, s, "a"), p(tape, s, "b"), p(tape, s, "pos"), p(tape, s, "bias"));
            let y = a.add(&b)?.mul(&a)?.sub(&b.scale(0.3))?.add_scalar(0.7);
            let z = a.relu().add(&b.abs())?.add(&pos.log())?.add(&a.scale(0.5).exp())?.add(&b.neg())?;
            let w = y.add(&z)?.add_bias(&bias, 1)?;
            probe(&w, seed ^ 11)
        },
        &store,
        fd,
    )
}

fn op_matmul(_: &RunConfig, fd: &FdConfig, seed: u64) -> Result<FdReport> {
    let mut r = rng(seed, 2);
    let store = store_of(vec![
        ("a", Tensor::normal(&[3, 5], 1.0, &mut r)),
        ("b", Tensor::normal(&[5, 2], 1.0, &mut r)),
        ("w", Tensor::normal(&[2, 4], 1.0, &mut r)),
        ("c", Tensor::normal(&[4], 1.0, &mut r)),
        ("x", Tensor::normal(&[3, 2], 1.0, &mut r)),
    ])?;
    finite_difference_check(
        |tape, s| {
            let m = p(tape, s, "a").matmul(&p(tape, s, "b"))?;
            let l = p(tape, s, "x").linear(&p(tape, s, "w"), &p(tape, s, "c"))?;
            let t = m.transpose()?.matmul(&m)?;
            probe(&m, seed)?.add(&probe(&l, seed + 1)?)?.add(&probe(&t, seed + 2)?)
        },
        &store,
        fd,
    )
}

fn op_bmm(_: &RunConfig, fd: &FdConfig, seed: u64) -> Result<FdReport> {
    let mut r = rng(seed, 3);
    let store = store_of(vec![
        ("a", Tensor::normal(&[2, 3, 4], 1.0, &mut r)),
        ("b", Tensor::normal(&[2, 4, 5], 1.0, &mut r)),
        ("c", Tensor::normal(&[2, 5, 4], 1.0, &mut r)),
    ])?;
    finite_difference_check(
        |tape, s| {
            let a = p(tape, s, "a");
            let x = a.bmm(&p(tape, s, "b"), false)?;
            let y = a.bmm(&p(tape, s, "c"), true)?;
            probe(&x, seed)?.add(&probe(&y, seed + 1)?)
        },
        &store,
        fd,
    )
}

fn op_shape(_: &RunConfig, fd: &FdConfig, seed: u64) -> Result<FdReport> {
    let mut r = rng(seed, 4);
    let store = store_of(vec![
        ("a", Tensor::normal(&[2, 3, 4], 1.0, &mut r)),
        ("b", Tensor::normal(&[2, 3, 4], 1.0, &mut r)),
        ("v", Tensor::normal(&[3, 2], 1.0, &mut r)),
    ])?;
    finite_difference_check(
        |tape, s| {
            let (a, b) = (p(tape, s, "a"), p(tape, s, "b"));
            let perm = a.permute(&[2, 0, 1])?.reshape(&[4, 6])?;
            let cat = concat(&[a, b], 1)?.slice(1, 2, 3)?;
            let st = stack(&[a, b])?.slice(0, 1, 1)?;
            let rep = p(tape, s, "v").repeat(3)?;
            probe(&perm, seed)?
                .add(&probe(&cat, seed + 1)?)?
                .add(&probe(&st, seed + 2)?)?
                .add(&probe(&rep, seed + 3)?)
        },
        &store,
        fd,
    )
}

fn op_reductions(_: &RunConfig, fd: &FdConfig, seed: u64) -> Result<FdReport> {
    let mut r = rng(seed, 5);
    let store = store_of(vec![("a", Tensor::normal(&[2, 3, 4], 1.0, &mut r))])?;
    finite_difference_check(
        |tape, s| {
            let a = p(tape, s, "a");
            let m0 = a.mean_axis(0)?;
            let m1 = a.mean_axis(1)?;
            let m2 = a.mean_axis(2)?;
            probe(&m0, seed)?
                .add(&probe(&m1, seed + 1)?)?
                .add(&probe(&m2, seed + 2)?)?
                .add(&a.mean().scale(2.0))?
                .add(&a.sum().scale(0.1))
        },
        &store,
        fd,
    )
}

fn op_softmax(_: &RunConfig, fd: &FdConfig, seed: u64) -> Result<FdReport> {
    let mut r = rng(seed, 6);
    let store = store_of(vec![("a", Tensor::normal(&[4, 5], 2.0, &mut r))])?;
    finite_difference_check(
        |tape, s| {
            let a = p(tape, s, "a");
            probe(&a.softmax_rows()?, seed)?.add(&probe(&a.log_softmax_rows()?, seed + 1)?)
        },
        &store,
        fd,
    )
}

fn op_layer_norm(_: &RunConfig, fd: &FdConfig, seed: u64) -> Result<FdReport> {
    let mut r = rng(seed, 7);
    let store = store_of(vec![
        ("x", Tensor::normal(&[2, 3, 6], 1.0, &mut r)),
        ("gamma", Tensor::uniform(&[6], 1.0, &mut r).map(|v| v + 1.5)),
        ("beta", Tensor::normal(&[6], 1.0, &mut r)),
    ])?;
    finite_difference_check(
        |tape, s| {
            let y = p(tape, s, "x").layer_norm(&p(tape, s, "gamma"), &p(tape, s, "beta"), 1e-5)?;
            probe(&y, seed)
        },
        &store,
        fd,
    )
}

fn op_cosine(_: &RunConfig, fd: &FdConfig, seed: u64) -> Result<FdReport> {
    let mut r = rng(seed, 8);
    let store = store_of(vec![
        ("a", Tensor::normal(&[3, 4], 1.0, &mut r)),
        ("b", Tensor::normal(&[5, 4], 1.0, &mut r)),
    ])?;
    finite_difference_check(
        |tape, s| {
            let (a, b) = (p(tape, s, "a"), p(tape, s, "b"));
            probe(&a.cosine_similarity_matrix(&b)?, seed)?.add(&a.slice(0, 0, 1)?.cosine_similarity(&b.slice(0, 2, 1)?)?.sum())
        },
        &store,
        fd,
    )
}

fn op_conv1d(_: &RunConfig, fd: &FdConfig, seed: u64) -> Result<FdReport> {
    let mut r = rng(seed, 9);
    let store = store_of(vec![
        ("x", Tensor::normal(&[2, 5, 3], 1.0, &mut r)),
        ("k", Tensor::normal(&[3, 3, 4], 1.0, &mut r)),
    ])?;
    finite_difference_check(
        |tape, s| {
            let x = p(tape, s, "x");
            let k = p(tape, s, "k");
            probe(&x.conv1d_temporal(&k, 1)?, seed)?.add(&probe(&x.conv1d_temporal(&k, 0)?, seed + 1)?)
        },
        &store,
        fd,
    )
}

fn op_conv2d(_: &RunConfig, fd: &FdConfig, seed: u64) -> Result<FdReport> {
    let mut r = rng(seed, 10);
    let store = store_of(vec![
        ("x", Tensor::normal(&[2, 2, 5, 6], 1.0, &mut r)),
        ("k", Tensor::normal(&[3, 2, 3, 3], 1.0, &mut r)),
        ("b", Tensor::normal(&[3], 1.0, &mut r)),
    ])?;
    finite_difference_check(
        |tape, s| {
            let x = p(tape, s, "x");
            let k = p(tape, s, "k");
            let y = x.conv2d(&k, (2, 2), (1, 1))?.add_bias(&p(tape, s, "b"), 1)?;
            probe(&y, seed)?.add(&probe(&x.conv2d(&k, (1, 1), (0, 0))?, seed + 1)?)
        },
        &store,
        fd,
    )
}

fn op_conv2d_strided(_: &RunConfig, fd: &FdConfig, seed: u64) -> Result<FdReport> {
    let mut r = rng(seed, 11);
    let store = store_of(vec![
        ("x", Tensor::normal(&[2, 6, 5], 1.0, &mut r)),
        ("k", Tensor::normal(&[3, 2, 3, 2], 1.0, &mut r)),
    ])?;
    finite_difference_check(
        |tape, s| {
            let y = p(tape, s, "x").conv2d_strided(&p(tape, s, "k"), (3, 1))?;
            probe(&y, seed)
        },
        &store,
        fd,
    )
}

fn randomize_biases(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = store
        .ids()
        .filter(|&id| {
            let n = store.name(id);
            n.ends_with(".b") || n.ends_with("bias") || n.ends_with("beta")
        })
        .collect();
    for id in ids {
        let shape = store.get(id).shape().to_vec();
        *store.get_mut(id) = Tensor::uniform(&shape, 0.3, rng);
    }
}

fn encoder_block(cfg: &RunConfig, fd: &FdConfig, seed: u64) -> Result<FdReport> {
    let mut r = rng(seed, 12);
    let ecfg = EncoderConfig {
        tokens: 2,
        channels: 4,
        blocks: 1,
        heads: 2,
        ..cfg.model.encoder.clone()
    };
    let mut store = ParamStore::new();
    let enc = ActorEncoder::new(&mut store, &ecfg, &mut r)?;
    randomize_biases(&mut store, &mut r);
    store.insert("features", Tensor::normal(&[1, 6, 4], 1.0, &mut r))?;
    finite_difference_check(
        |tape, s| {
            let fm = FeatureMap {
                values: p(tape, s, "features"),
                frames: 1,
                height: 2,
                width: 3,
            };
            let out = enc.encode(tape, s, &fm)?;
            probe(&out.tokens, seed)?.add(&probe(&out.attention[0], seed + 1)?)
        },
        &store,
        fd,
    )
}

fn small_relation(cfg: &RunConfig, detach: Detach) -> RelationConfig {
    RelationConfig {
        channels: 4,
        classes: 3,
        heads: 2,
        temporal: vec![TemporalConv { width: 3, pad: 1 }],
        group: vec![GroupConv { k_t: 2, k_s: 2, s_t: 1, s_s: 2 }],
        detach,
        group_path: true,
        ..cfg.model.relation.clone()
    }
}

fn relation_instance(cfg: &RunConfig, detach: Detach, seed: u64, salt: u64) -> Result<(ParamStore, Relation)> {
    let mut r = rng(seed, salt);
    let mut store = ParamStore::new();
    let rel = Relation::new(&mut store, &small_relation(cfg, detach), &mut r)?;
    randomize_biases(&mut store, &mut r);
    store.insert("tokens", Tensor::normal(&[2, 3, 4, 4], 1.0, &mut r))?;
    Ok((store, rel))
}

fn relation_actor(cfg: &RunConfig, fd: &FdConfig, seed: u64) -> Result<FdReport> {
    let (store, rel) = relation_instance(cfg, Detach::None, seed, 13)?;
    finite_difference_check(
        |tape, s| {
            let (f_a, logits) = rel.actor_path(tape, s, &p(tape, s, "tokens"))?;
            probe(&f_a, seed)?.add(&probe(&logits, seed + 1)?)
        },
        &store,
        fd,
    )
}

fn relation_group(cfg: &RunConfig, fd: &FdConfig, seed: u64) -> Result<FdReport> {
    // Gradient stops are invisible to finite differences, so the group path
    // is checked with detach off.
    let (store, rel) = relation_instance(cfg, Detach::None, seed, 14)?;
    finite_difference_check(
        |tape, s| {
            let (f_g, logits, frame_logits) = rel.group_path(tape, s, &p(tape, s, "tokens"))?;
            probe(&f_g, seed)?
                .add(&probe(&logits, seed + 1)?)?
                .add(&probe(&frame_logits, seed + 2)?)
        },
        &store,
        fd,
    )
}

fn loss_flm(cfg: &RunConfig, fd: &FdConfig, seed: u64) -> Result<FdReport> {
    let mut r = rng(seed, 15);
    let att = |r: &mut ChaCha8Rng| Tensor::from_fn(&[4, 6], |_| r.gen_range(0.05..1.0));
    let store = store_of(vec![("a0", att(&mut r)), ("a1", att(&mut r)), ("m", att(&mut r))])?;
    let (tau, inc) = (cfg.loss.tau, cfg.loss.inclusive_denominator);
    finite_difference_check(
        |tape, s| {
            let blocks = [p(tape, s, "a0"), p(tape, s, "a1")];
            losses::loss_flm(&blocks, &p(tape, s, "m"), tau, inc)
        },
        &store,
        fd,
    )
}

fn loss_tco(cfg: &RunConfig, fd: &FdConfig, seed: u64) -> Result<FdReport> {
    let mut r = rng(seed, 16);
    let store = store_of(vec![("w", Tensor::normal(&[3, 4, 5], 1.0, &mut r))])?;
    let (tau, inc) = (cfg.loss.tau, cfg.loss.inclusive_denominator);
    finite_difference_check(|tape, s| losses::loss_tco(&p(tape, s, "w"), tau, inc), &store, fd)
}

fn loss_l1(_: &RunConfig, fd: &FdConfig, seed: u64) -> Result<FdReport> {
    let mut r = rng(seed, 17);
    // offsets keep every |difference| away from its kink
    let a = Tensor::from_fn(&[4, 6], |_| r.gen_range(0.05..1.0));
    let m = a.map(|v| v + if v > 0.5 { -0.3 } else { 0.3 });
    let steps = off_zero(&[2, 4, 5], &mut r);
    let mut w = Tensor::normal(&[3, 4, 5], 1.0, &mut r).into_data();
    for i in 20..60 {
        w[i] = w[i - 20] + steps.data()[i - 20];
    }
    let w = Tensor::new(&[3, 4, 5], w)?;
    let store = store_of(vec![("a", a), ("m", m), ("w", w)])?;
    finite_difference_check(
        |tape, s| {
            let f = losses::l1_flm_rows(&p(tape, s, "a"), &p(tape, s, "m"))?.mean();
            f.add(&losses::l1_tco(&p(tape, s, "w"))?)
        },
        &store,
        fd,
    )
}

fn loss_ce_gf(_: &RunConfig, fd: &FdConfig, seed: u64) -> Result<FdReport> {
    let mut r = rng(seed, 18);
    let store = store_of(vec![
        ("logits", Tensor::normal(&[3, 4], 2.0, &mut r)),
        ("frames", Tensor::normal(&[6, 4], 2.0, &mut r)),
    ])?;
    let labels = [1, 3, 0];
    finite_difference_check(
        |tape, s| losses::cross_entropy(&p(tape, s, "logits"), &labels)?.add(&losses::loss_gf(&p(tape, s, "frames"), &labels)?),
        &store,
        fd,
    )
}

/// A miniature of the configured model on two rendered clips, all losses on,
/// detach off and the confidence gate held at its base value.
pub fn miniature(cfg: &RunConfig) -> Result<RunConfig> {
    let mut small = cfg.clone();
    small.apply_text(
        "height = 16\nwidth = 24\nt_raw = 6\nactors_min = 3\nactors_max = 4\nradius_min = 2\nradius_max = 2.5\n\
         speed_min = 0.5\nspeed_max = 0.8\nframes = 3\nbackbone_widths = 4,6\nchannels = 8\ntokens = 4\nblocks = 2\n\
         heads = 2\nrelation_heads = 2\ntemporal_convs = 3/1\ngroup_convs = 2x2/1x2\nk_flm = 2\nbatch = 2\ndetach = none",
    )?;
    Ok(small)
}

fn objective_full(cfg: &RunConfig, fd: &FdConfig, seed: u64) -> Result<FdReport> {
    let small = miniature(cfg)?;
    let data = generate_dataset(&balanced_specs(2, seed), &small.gen)?;
    let clips: Vec<&VideoSample> = data.iter().map(|s| &s.sample).collect();
    let mut model = Model::new(&small.model, seed)?;
    let mut r = rng(seed, 19);
    randomize_biases(&mut model.store, &mut r);
    let batch = train_batch(&clips, small.model.frames, model.grid, cfg!(feature = "flow"), &small.train, &mut r)?;
    let rho = {
        let tape = Tape::new();
        confidence(&model.forward(&tape, &batch.frames, clips.len())?.relation.fused.value())
    };
    let model = &model;
    finite_difference_check(
        |tape, s| Ok(batch_loss(tape, model, s, &batch, &small.loss, Some(&rho))?.0),
        &model.store,
        fd,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_check_passes_on_defaults() {
        let entries = run(&RunConfig::default(), &FdConfig::default(), 1, None).unwrap();
        assert_eq!(entries.len(), CHECKS.len());
        for e in entries {
            assert!(e.passed(), "{}: {}", e.name, e.report);
        }
    }

    #[test]
    fn a_wrong_gradient_is_caught() {
        // a stopped factor halves the true gradient of a·a
        let mut r = rng(3, 3);
        let store = store_of(vec![("a", off_zero(&[3], &mut r))]).unwrap();
        let rep = finite_difference_check(
            |tape, s| {
                let a = p(tape, s, "a");
                Ok(a.stop_gradient().mul(&a)?.sum())
            },
            &store,
            &FdConfig::default(),
        )
        .unwrap();
        assert!(!rep.passed());
    }
}
