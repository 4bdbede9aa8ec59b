//! Finite differences against backprop for the whole training objective.

use flaming::config::RunConfig;
use flaming::losses::confidence;
use flaming::model::Model;
use flaming::numerics::{finite_difference_check, FdConfig, Tape};
use flaming::relation::Detach;
use flaming::synthdata::{balanced_specs, generate_dataset, VideoSample};
use flaming::training::{batch_loss, train_batch};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny() -> RunConfig {
    RunConfig::from_text(
        "height = 16\nwidth = 24\nt_raw = 6\nactors_min = 3\nactors_max = 4\nradius_min = 2\nradius_max = 2.5\n\
         speed_min = 0.5\nspeed_max = 0.8\n\
         frames = 3\nbackbone_widths = 4,6\nchannels = 8\ntokens = 4\nblocks = 2\nheads = 2\n\
         relation_heads = 2\ntemporal_convs = 3/1\ngroup_convs = 2x2/1x2\nk_flm = 2\nbatch = 2",
    )
    .unwrap()
}

#[test]
fn full_objective_matches_finite_differences() {
    let mut cfg = tiny();
    cfg.model.relation.detach = Detach::None;
    cfg.model.encoder.pos_values = true;
    let data = generate_dataset(&balanced_specs(2, 5), &cfg.gen).unwrap();
    let clips: Vec<&VideoSample> = data.iter().map(|s| &s.sample).collect();
    let mut model = Model::new(&cfg.model, 11).unwrap();
    // nonzero biases so every path is exercised
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        if model.store.name(id).ends_with(".b") || model.store.name(id).ends_with("bias") {
            let shape = model.store.get(id).shape().to_vec();
            *model.store.get_mut(id) = flaming::numerics::Tensor::uniform(&shape, 0.1, &mut rng);
        }
    }
    let mut brng = ChaCha8Rng::seed_from_u64(3);
    let batch = train_batch(&clips, 3, model.grid, true, &cfg.train, &mut brng).unwrap();
    assert!(batch.flow.is_some());
    let rho = {
        let tape = Tape::new();
        confidence(&model.forward(&tape, &batch.frames, 2).unwrap().relation.fused.value())
    };
    let fd = FdConfig {
        max_coords_per_param: Some(4),
        ..Default::default()
    };
    let report = finite_difference_check(
        |tape, store| Ok(batch_loss(tape, &model, store, &batch, &cfg.loss, Some(&rho))?.0),
        &model.store,
        &fd,
    )
    .unwrap();
    println!("{report}");
    assert!(report.passed(), "{report}");
}
