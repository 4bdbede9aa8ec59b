//! Small models and the probes shared by the model tests and the acceptance run.

use std::fs;
use std::path::Path;

use flaming::config::RunConfig;
use flaming::losses::cross_entropy;
use flaming::model::Model;
use flaming::numerics::{Tape, Tensor};
use flaming::relation::Detach;
use flaming::synthdata::{balanced_specs, generate_dataset, read_dataset, write_dataset};
use flaming::training::{self, eval_batch};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn tiny() -> RunConfig {
    RunConfig::from_text(
        "height = 16\nwidth = 24\nt_raw = 6\nactors_min = 4\nactors_max = 5\nradius_min = 2\nradius_max = 2.5\n\
         speed_min = 0.5\nspeed_max = 0.8\nframes = 3\nbackbone_widths = 4,6\nchannels = 8\ntokens = 4\nblocks = 2\n\
         heads = 2\nrelation_heads = 2\ntemporal_convs = 3/1\ngroup_convs = 2x2/1x2\nk_flm = 2\nbatch = 2\n\
         epochs = 2\nwarmup_epochs = 1",
    )
    .unwrap()
}

fn frames(model: &Model, seed: u64) -> Tensor {
    let t = model.config.frames;
    Tensor::uniform(&[2 * t, 3, model.config.height, model.config.width], 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
        .map(|v| v.abs())
}

/// Largest absolute gradient of the group classifier's CE over backbone and
/// encoder parameters.
pub fn group_ce_leak(detach: Detach) -> f64 {
    let mut cfg = tiny();
    cfg.model.relation.detach = detach;
    let model = Model::new(&cfg.model, 3).unwrap();
    let input = frames(&model, 4);
    let tape = Tape::new();
    let out = model.forward(&tape, &input, 2).unwrap();
    let ce = cross_entropy(&out.relation.logits_group.unwrap(), &[1, 5]).unwrap();
    let grads = tape.backward(ce, &model.store).unwrap();
    model
        .store
        .iter()
        .filter(|(_, name, _)| name.starts_with("backbone") || name.starts_with("encoder"))
        .flat_map(|(id, _, _)| grads.get(id).data().to_vec())
        .fold(0.0, |m, g| m.max(g.abs()))
}

/// `(f_A, f_G)` before and after perturbing the actor-path attention weights.
pub fn perturb_actor_attention(share: bool) -> [(Vec<f64>, Vec<f64>); 2] {
    let mut cfg = tiny();
    cfg.model.relation.share_attention = share;
    let mut model = Model::new(&cfg.model, 5).unwrap();
    let input = frames(&model, 6);
    let run = |m: &Model| {
        let tape = Tape::new();
        let out = m.forward(&tape, &input, 2).unwrap();
        (out.relation.f_a.value().data().to_vec(), out.relation.f_g.unwrap().value().data().to_vec())
    };
    let before = run(&model);
    let v = model.relation.actor_attention.v.w;
    let bumped = model.store.get(v).map(|x| x + 0.3);
    *model.store.get_mut(v) = bumped;
    [before, run(&model)]
}

pub fn train_once(dir: &Path, cfg: &RunConfig) {
    let data = generate_dataset(&balanced_specs(6, 2), &cfg.gen).unwrap();
    let mut model = Model::new(&cfg.model, cfg.train.seed).unwrap();
    training::train(&mut model, &data, &[], &cfg.train, &cfg.loss, &mut |_| {}).unwrap();
    model.save(dir).unwrap();
}

fn sorted_files(dir: &Path) -> Vec<std::ffi::OsString> {
    let mut names: Vec<_> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    names
}

/// Two trainings with the seed of `cfg` and one with the next seed:
/// (files compared, all equal under the same seed, any file differs under the other).
pub fn checkpoint_determinism(cfg: &RunConfig) -> (usize, bool, bool) {
    let (a, b, c) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    train_once(a.path(), cfg);
    train_once(b.path(), cfg);
    let mut other = cfg.clone();
    other.train.seed += 1;
    train_once(c.path(), &other);
    let names = sorted_files(a.path());
    let read = |d: &Path, n: &std::ffi::OsString| fs::read(d.join(n)).unwrap();
    let same = sorted_files(b.path()) == names && names.iter().all(|n| read(a.path(), n) == read(b.path(), n));
    let differs = names.iter().any(|n| read(a.path(), n) != read(c.path(), n));
    (names.len(), same, differs)
}

/// Writes a split without flow files, reads it back and evaluates on it.
/// Returns (no flow file on disk, no flow after loading, clips evaluated).
pub fn evaluate_without_flow(cfg: &RunConfig) -> (bool, bool, u64) {
    let dir = tempfile::tempdir().unwrap();
    let data = generate_dataset(&balanced_specs(4, 9), &cfg.gen).unwrap();
    write_dataset(&data, dir.path(), false).unwrap();
    let absent_on_disk = fs::read_dir(dir.path())
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .all(|e| !e.path().join("flow.flmt").exists());
    let loaded = read_dataset(dir.path()).unwrap();
    let clips: Vec<_> = loaded.iter().map(|s| &s.sample).collect();
    let absent_loaded = loaded.iter().all(|s| s.sample.gt_flow().is_none())
        && eval_batch(&clips, cfg.model.frames).unwrap().flow.is_none();
    let model = Model::new(&cfg.model, 1).unwrap();
    let report = training::evaluate(&loaded, &model, 2, cfg.loss.k_flm).unwrap();
    (absent_on_disk, absent_loaded, report.confusion.total())
}
