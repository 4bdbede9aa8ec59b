mod common;

use common::fixtures::{checkpoint_determinism, evaluate_without_flow, group_ce_leak, perturb_actor_attention, tiny};
use flaming::relation::Detach;

#[test]
fn group_classifier_gradient_stops_before_the_convolutions() {
    assert_eq!(group_ce_leak(Detach::ConvInput), 0.0);
    assert!(group_ce_leak(Detach::None) > 0.0);
}

#[test]
fn shared_attention_couples_both_paths() {
    let [(a0, g0), (a1, g1)] = perturb_actor_attention(true);
    assert_ne!(a0, a1);
    assert_ne!(g0, g1);
    let [(a0, g0), (a1, g1)] = perturb_actor_attention(false);
    assert_ne!(a0, a1);
    assert_eq!(g0, g1);
}

#[test]
fn same_seed_gives_identical_checkpoints() {
    let (files, same, differs) = checkpoint_determinism(&tiny());
    assert!(files > 2);
    assert!(same);
    assert!(differs);
}

#[test]
fn evaluation_runs_without_flow_on_disk() {
    assert_eq!(evaluate_without_flow(&tiny()), (true, true, 4));
}
