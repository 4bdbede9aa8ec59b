use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{contract_err, Result};

/// How frames are drawn from a clip.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleMode {
    /// One uniformly random frame per segment.
    Train,
    /// The centre frame of each segment.
    Eval,
    /// `T` distinct frames uniformly at random, sorted (no segments).
    Random,
}

/// Picks `t` frame indices out of `t_raw` by segment-based sampling.
///
/// The clip is cut into `t` contiguous segments whose boundaries are
/// `floor(k·t_raw/t)`. Eval mode takes `start + (len-1)/2` of each segment;
/// train mode draws one index per segment from a generator seeded by `seed`.
pub fn segment_indices(t_raw: usize, t: usize, mode: SampleMode, seed: u64) -> Result<Vec<usize>> {
    if t == 0 || t > t_raw {
        return Err(contract_err!("cannot sample {t} frames from a {t_raw}-frame clip"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if mode == SampleMode::Random {
        let mut picked = index::sample(&mut rng, t_raw, t).into_vec();
        picked.sort_unstable();
        return Ok(picked);
    }
    Ok((0..t)
        .map(|k| {
            let start = k * t_raw / t;
            let len = (k + 1) * t_raw / t - start;
            match mode {
                SampleMode::Eval => start + (len - 1) / 2,
                _ => start + rng.gen_range(0..len),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn examples() {
        assert_eq!(segment_indices(6, 3, SampleMode::Eval, 0).unwrap(), vec![0, 2, 4]);
        for mode in [SampleMode::Train, SampleMode::Eval, SampleMode::Random] {
            assert_eq!(segment_indices(6, 6, mode, 9).unwrap(), (0..6).collect::<Vec<_>>());
        }
        assert!(segment_indices(5, 6, SampleMode::Eval, 0).is_err());
        assert_eq!(segment_indices(24, 6, SampleMode::Eval, 0).unwrap(), vec![1, 5, 9, 13, 17, 21]);
    }

    proptest! {
        #[test]
        fn indices_increase_and_stay_in_segments(t_raw in 1usize..200, frac in 0.0f64..1.0, seed: u64) {
            let t = 1 + ((t_raw - 1) as f64 * frac) as usize;
            for mode in [SampleMode::Train, SampleMode::Eval, SampleMode::Random] {
                let idx = segment_indices(t_raw, t, mode, seed).unwrap();
                prop_assert_eq!(idx.len(), t);
                prop_assert!(idx.windows(2).all(|w| w[0] < w[1]));
                prop_assert!(*idx.last().unwrap() < t_raw);
                if mode != SampleMode::Random {
                    for (k, &i) in idx.iter().enumerate() {
                        prop_assert!(i >= k * t_raw / t && i < (k + 1) * t_raw / t);
                    }
                }
            }
        }
    }
}
