mod common;

use flaming::losses::{l1_flm_rows, l1_tco, loss_flm, loss_tco};
use flaming::numerics::{Tape, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_rows(rng: &mut ChaCha8Rng, r: usize, c: usize, nonneg: bool) -> Vec<Vec<f64>> {
    (0..r)
        .map(|_| {
            (0..c)
                .map(|_| if nonneg { rng.gen_range(0.01..1.0) } else { rng.gen_range(-1.0..1.0) })
                .collect()
        })
        .collect()
}

fn var<'t>(tape: &'t Tape, rows: &[Vec<f64>]) -> Var<'t> {
    tape.constant(Tensor::from_rows(rows).unwrap())
}

fn tokens<'t>(tape: &'t Tape, w: &[Vec<Vec<f64>>]) -> Var<'t> {
    let (t, r, c) = (w.len(), w[0].len(), w[0][0].len());
    let flat: Vec<f64> = w.iter().flatten().flatten().copied().collect();
    tape.constant(Tensor::new(&[t, r, c], flat).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn flm_equals_enumeration(seed in any::<u64>(), r in 2usize..=6, hw in 2usize..=9, blocks in 1usize..=3, tau in 0.1f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let att: Vec<_> = (0..blocks).map(|_| random_rows(&mut rng, r, hw, true)).collect();
        let m = random_rows(&mut rng, r, hw, true);
        let tape = Tape::new();
        let vars: Vec<Var> = att.iter().map(|a| var(&tape, a)).collect();
        let got = loss_flm(&vars, &var(&tape, &m), tau, false).unwrap().item();
        prop_assert!((got - common::flm(&att, &m, tau)).abs() < 1e-10);
    }

    #[test]
    fn tco_equals_enumeration(seed in any::<u64>(), t in 2usize..=4, r in 2usize..=6, c in 1usize..=5, tau in 0.1f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w: Vec<_> = (0..t).map(|_| random_rows(&mut rng, r, c, false)).collect();
        let tape = Tape::new();
        let got = loss_tco(&tokens(&tape, &w), tau, false).unwrap().item();
        prop_assert!((got - common::tco(&w, tau)).abs() < 1e-10);
    }

    #[test]
    fn l1_variants_equal_enumeration(seed in any::<u64>(), t in 2usize..=4, r in 1usize..=6, c in 1usize..=5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let att = random_rows(&mut rng, r, c, true);
        let m = random_rows(&mut rng, r, c, true);
        let w: Vec<_> = (0..t).map(|_| random_rows(&mut rng, r, c, false)).collect();
        let tape = Tape::new();
        let rows = l1_flm_rows(&var(&tape, &att), &var(&tape, &m)).unwrap().mean().item();
        prop_assert!((rows - common::l1_flm(&[att], &m)).abs() < 1e-12);
        let got = l1_tco(&tokens(&tape, &w)).unwrap().item();
        prop_assert!((got - common::l1_tco(&w)).abs() < 1e-12);
    }

    #[test]
    fn flm_ignores_row_scale(seed in any::<u64>(), r in 2usize..=6, which in 0usize..6, scale in 0.01f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let att = random_rows(&mut rng, r, 5, true);
        let m = random_rows(&mut rng, r, 5, true);
        let mut scaled = m.clone();
        scaled[which % r].iter_mut().for_each(|v| *v *= scale);
        let mut scaled_att = att.clone();
        scaled_att[(which + 1) % r].iter_mut().for_each(|v| *v *= scale);
        let tape = Tape::new();
        let base = loss_flm(&[var(&tape, &att)], &var(&tape, &m), 0.5, false).unwrap().item();
        let other = loss_flm(&[var(&tape, &scaled_att)], &var(&tape, &scaled), 0.5, false).unwrap().item();
        prop_assert!((base - other).abs() < 1e-10);
    }

    #[test]
    fn losses_ignore_sample_relabelling(seed in any::<u64>(), n in 2usize..=3, t in 2usize..=3, k in 1usize..=2) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // flow rows are sample-major (n·T + t); token rows are n·K + k.
        let att = random_rows(&mut rng, n * t, 6, true);
        let m = random_rows(&mut rng, n * t, 6, true);
        let w: Vec<_> = (0..t).map(|_| random_rows(&mut rng, n * k, 4, false)).collect();
        let mut order: Vec<usize> = (0..n).collect();
        order.rotate_left(1);
        let permute = |rows: &Vec<Vec<f64>>, per: usize| -> Vec<Vec<f64>> {
            order.iter().flat_map(|&s| rows[s * per..(s + 1) * per].to_vec()).collect()
        };
        let tape = Tape::new();
        let a = loss_flm(&[var(&tape, &att)], &var(&tape, &m), 0.5, false).unwrap().item();
        let b = loss_flm(&[var(&tape, &permute(&att, t))], &var(&tape, &permute(&m, t)), 0.5, false).unwrap().item();
        prop_assert!((a - b).abs() < 1e-12);
        let pw: Vec<_> = w.iter().map(|f| permute(f, k)).collect();
        let a = loss_tco(&tokens(&tape, &w), 0.5, false).unwrap().item();
        let b = loss_tco(&tokens(&tape, &pw), 0.5, false).unwrap().item();
        prop_assert!((a - b).abs() < 1e-12);
    }
}

/// Raising the positive similarity of one anchor with its negatives fixed
/// lowers that anchor's term.
#[test]
fn flm_term_falls_as_alignment_rises() {
    let m = vec![vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0, 0.0]];
    let term = |a0: Vec<f64>| {
        let tape = Tape::new();
        let att = var(&tape, &[a0, vec![0.2, 0.9, 0.1, 0.0], vec![0.3, 0.3, 0.8, 0.1]]);
        flaming::losses::flm_rows(&att, &var(&tape, &m), 0.5, false).unwrap().value().data()[0]
    };
    // Unit anchor (a, .3, .3, rest): cosine a to the positive, .3 to both negatives.
    let mut last = f64::INFINITY;
    for step in 0..=8 {
        let a = step as f64 / 10.0;
        let v = term(vec![a, 0.3, 0.3, (1.0 - 0.18 - a * a).sqrt()]);
        assert!(v < last, "cos {a}: {v} !< {last}");
        last = v;
    }
}

#[test]
fn closed_forms_are_exact() {
    let tape = Tape::new();
    let same = var(&tape, &vec![vec![0.3, 0.1, 0.7]; 4]);
    assert_eq!(loss_flm(&[same], &same, 0.5, false).unwrap().item(), 3f64.ln());
    let w = tape.constant(Tensor::new(&[2, 2, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0]).unwrap());
    assert_eq!(loss_tco(&w, 1.0, false).unwrap().item(), -2.0);
}
