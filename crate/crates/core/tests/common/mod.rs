//! Direct-enumeration references, written without the tape or any of the
//! library's kernels, shared by the integration and acceptance targets.
#![allow(dead_code)]

pub mod fixtures;

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// `−log( h(a_i, b_i) / Σ_{j≠i} h(a_i, b_j) )` with `h = exp(cos/τ)`, averaged over `i`.
fn pairwise(a: &[Vec<f64>], b: &[Vec<f64>], tau: f64) -> f64 {
    let r = a.len();
    let mut total = 0.0;
    for i in 0..r {
        let pos = (cosine(&a[i], &b[i]) / tau).exp();
        let mut neg = 0.0;
        for j in 0..r {
            if j != i {
                neg += (cosine(&a[i], &b[j]) / tau).exp();
            }
        }
        total += -(pos / neg).ln();
    }
    total / r as f64
}

/// Flow-alignment loss: `blocks[l][i]` is representative attention row `i`.
pub fn flm(blocks: &[Vec<Vec<f64>>], m: &[Vec<f64>], tau: f64) -> f64 {
    blocks.iter().map(|a| pairwise(a, m, tau)).sum::<f64>() / blocks.len() as f64
}

/// Temporal-consistency loss on `w[t][i]` tokens: both directions summed,
/// averaged over the adjacent pairs.
pub fn tco(w: &[Vec<Vec<f64>>], tau: f64) -> f64 {
    let pairs = w.len() - 1;
    let mut total = 0.0;
    for t in 0..pairs {
        total += pairwise(&w[t], &w[t + 1], tau) + pairwise(&w[t + 1], &w[t], tau);
    }
    total / pairs as f64
}

pub fn l1_flm(blocks: &[Vec<Vec<f64>>], m: &[Vec<f64>]) -> f64 {
    let per_block = |a: &Vec<Vec<f64>>| {
        let mut s = 0.0;
        for (row, target) in a.iter().zip(m) {
            s += row.iter().zip(target).map(|(x, y)| (x - y).abs()).sum::<f64>() / row.len() as f64;
        }
        s / a.len() as f64
    };
    blocks.iter().map(per_block).sum::<f64>() / blocks.len() as f64
}

pub fn l1_tco(w: &[Vec<Vec<f64>>]) -> f64 {
    let mut s = 0.0;
    let mut count = 0usize;
    for t in 0..w.len() - 1 {
        for (a, b) in w[t].iter().zip(&w[t + 1]) {
            for (x, y) in a.iter().zip(b) {
                s += (x - y).abs();
                count += 1;
            }
        }
    }
    s / count as f64
}

/// Accuracy over all clips.
pub fn mca(cm: &[Vec<u64>]) -> f64 {
    let mut hit = 0;
    let mut all = 0;
    for (i, row) in cm.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            all += c;
            if i == j {
                hit += c;
            }
        }
    }
    hit as f64 / all as f64
}

/// Mean recall over classes that occur.
pub fn mpca(cm: &[Vec<u64>]) -> f64 {
    let recalls: Vec<f64> = cm
        .iter()
        .enumerate()
        .filter(|(_, row)| row.iter().sum::<u64>() > 0)
        .map(|(i, row)| row[i] as f64 / row.iter().sum::<u64>() as f64)
        .collect();
    recalls.iter().sum::<f64>() / recalls.len() as f64
}

/// Accuracy after mapping both truth and prediction through `map`.
pub fn merged_mca(cm: &[Vec<u64>], map: &[usize]) -> f64 {
    let mut hit = 0;
    let mut all = 0;
    for (i, row) in cm.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            all += c;
            if map[i] == map[j] {
                hit += c;
            }
        }
    }
    hit as f64 / all as f64
}

/// Nearest-rank suppression for `q = num/den`, rank `ceil(num·P/den)` in
/// integers, threshold found by sorting a copy.
pub fn suppress(raw: &[f64], num: usize, den: usize) -> Vec<f64> {
    let mut sorted = raw.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((num * raw.len()).div_ceil(den)).clamp(1, raw.len());
    let cut = sorted[rank - 1];
    let out: Vec<f64> = raw.iter().map(|v| (v - cut).max(0.0)).collect();
    let max = out.iter().cloned().fold(0.0, f64::max);
    if max > 0.0 {
        out.iter().map(|v| v / max).collect()
    } else {
        out
    }
}
