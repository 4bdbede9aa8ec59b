//! Classification metrics over a confusion matrix, and the share of
//! attention mass that lands on key actors.

use std::fmt::Write as _;

use crate::error::{contract_err, Result};

/// Rows are ground truth, columns are predictions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
    pub names: Vec<String>,
}

impl ConfusionMatrix {
    pub fn new(names: Vec<String>) -> Self {
        let n = names.len();
        Self {
            counts: vec![vec![0; n]; n],
            names,
        }
    }

    pub fn from_counts(counts: Vec<Vec<u64>>, names: Vec<String>) -> Result<Self> {
        if counts.len() != names.len() || counts.iter().any(|r| r.len() != names.len()) {
            return Err(contract_err!("confusion matrix must be square with one name per class"));
        }
        Ok(Self { counts, names })
    }

    /// Unnamed classes `0..n`.
    pub fn from_counts_unnamed(counts: Vec<Vec<u64>>) -> Result<Self> {
        let names = (0..counts.len()).map(|i| i.to_string()).collect();
        Self::from_counts(counts, names)
    }

    pub fn classes(&self) -> usize {
        self.names.len()
    }

    pub fn record(&mut self, truth: usize, predicted: usize) {
        self.counts[truth][predicted] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes()).map(|i| self.counts[i][i]).sum()
    }

    /// Rows labelled with class names, columns in the same order.
    pub fn render(&self) -> String {
        let width = self.names.iter().map(String::len).max().unwrap_or(1).max(5);
        let mut out = format!("{:>width$}", "truth\\pred");
        for i in 0..self.classes() {
            let _ = write!(out, " {i:>6}");
        }
        out.push('\n');
        for (i, row) in self.counts.iter().enumerate() {
            let _ = write!(out, "{:>width$}", format!("{i}:{}", self.names[i]), width = width.max(10));
            for c in row {
                let _ = write!(out, " {c:>6}");
            }
            out.push('\n');
        }
        out
    }

    /// `truth,predicted,count` for every cell.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("truth,predicted,count\n");
        for (i, row) in self.counts.iter().enumerate() {
            for (j, c) in row.iter().enumerate() {
                let _ = writeln!(out, "{},{},{c}", self.names[i], self.names[j]);
            }
        }
        out
    }
}

/// Overall accuracy: trace over total.
pub fn mca(cm: &ConfusionMatrix) -> Result<f64> {
    let total = cm.total();
    if total == 0 {
        return Err(contract_err!("accuracy of an empty confusion matrix"));
    }
    Ok(cm.trace() as f64 / total as f64)
}

/// Mean per-class recall over classes that have at least one sample.
pub fn mpca(cm: &ConfusionMatrix) -> Result<f64> {
    let recalls: Vec<f64> = cm
        .counts
        .iter()
        .enumerate()
        .filter_map(|(i, row)| {
            let n: u64 = row.iter().sum();
            (n > 0).then(|| row[i] as f64 / n as f64)
        })
        .collect();
    if recalls.is_empty() {
        return Err(contract_err!("every ground-truth row is empty"));
    }
    Ok(recalls.iter().sum::<f64>() / recalls.len() as f64)
}

/// Surjective relabelling of classes, `image[old] = merged`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MergeMap {
    pub image: Vec<usize>,
    pub merged_classes: usize,
}

impl MergeMap {
    pub fn new(image: Vec<usize>) -> Result<Self> {
        let merged_classes = image.iter().max().map_or(0, |m| m + 1);
        let mut hit = vec![false; merged_classes];
        image.iter().for_each(|&m| hit[m] = true);
        if hit.iter().any(|h| !h) {
            return Err(contract_err!("merge map is not onto 0..{merged_classes}"));
        }
        Ok(Self { image, merged_classes })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            image: (0..n).collect(),
            merged_classes: n,
        }
    }
}

/// Accuracy after folding rows and columns through `merge`.
pub fn merged_mca(cm: &ConfusionMatrix, merge: &MergeMap) -> Result<f64> {
    if merge.image.len() != cm.classes() {
        return Err(contract_err!(
            "merge map covers {} classes, matrix has {}",
            merge.image.len(),
            cm.classes()
        ));
    }
    let m = merge.merged_classes;
    let mut folded = vec![vec![0u64; m]; m];
    for (i, row) in cm.counts.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            folded[merge.image[i]][merge.image[j]] += c;
        }
    }
    mca(&ConfusionMatrix::from_counts_unnamed(folded)?)
}

/// Mean over frames of the attention mass inside the key-actor mask.
/// `att` and `masks` are `T×HW`, row-major.
pub fn attention_localization(att: &[f64], masks: &[bool], hw: usize) -> Result<f64> {
    if hw == 0 || att.len() != masks.len() || !att.len().is_multiple_of(hw) || att.is_empty() {
        return Err(contract_err!(
            "attention ({}) and mask ({}) do not form T×{hw} grids",
            att.len(),
            masks.len()
        ));
    }
    let frames = att.len() / hw;
    let mass: f64 = att.iter().zip(masks).filter(|(_, &m)| m).map(|(a, _)| a).sum();
    Ok(mass / frames as f64)
}

/// Header and row for the per-epoch metrics CSV.
pub const METRICS_CSV_HEADER: &str = "epoch,lr,train_loss,mca,mpca,merged_mca,localization";

#[cfg(test)]
mod tests {
    use super::*;

    fn cm(rows: Vec<Vec<u64>>) -> ConfusionMatrix {
        ConfusionMatrix::from_counts_unnamed(rows).unwrap()
    }

    #[test]
    fn mca_examples() {
        assert_eq!(mca(&cm(vec![vec![10, 3], vec![2, 5]])).unwrap(), 0.75);
        assert_eq!(mca(&cm(vec![vec![4, 0], vec![0, 4]])).unwrap(), 1.0);
        assert!(mca(&cm(vec![vec![0, 0], vec![0, 0]])).is_err());
    }

    #[test]
    fn mpca_examples() {
        assert_eq!(mpca(&cm(vec![vec![4, 0], vec![2, 2]])).unwrap(), 0.75);
        let balanced = cm(vec![vec![3, 1, 1], vec![0, 5, 0], vec![2, 2, 1]]);
        assert!((mpca(&balanced).unwrap() - mca(&balanced).unwrap()).abs() < 1e-15);
        // recalls 9/10, 1/2, 0/1, and an empty class that is skipped
        let skewed = cm(vec![vec![9, 1, 0, 0], vec![1, 1, 0, 0], vec![0, 1, 0, 0], vec![0, 0, 0, 0]]);
        assert!((mpca(&skewed).unwrap() - (0.9 + 0.5 + 0.0) / 3.0).abs() < 1e-15);
        assert!(mpca(&cm(vec![vec![0]])).is_err());
    }

    #[test]
    fn merged_examples() {
        let m = cm(vec![vec![5, 3, 0], vec![4, 6, 1], vec![0, 2, 7]]);
        assert_eq!(merged_mca(&m, &MergeMap::identity(3)).unwrap(), mca(&m).unwrap());
        assert_eq!(merged_mca(&m, &MergeMap::new(vec![0, 0, 0]).unwrap()).unwrap(), 1.0);
        let pair = merged_mca(&m, &MergeMap::new(vec![0, 0, 1]).unwrap()).unwrap();
        assert_eq!(pair, (5.0 + 3.0 + 4.0 + 6.0 + 7.0) / 28.0);
        assert!(pair >= mca(&m).unwrap());
        assert!(merged_mca(&m, &MergeMap::identity(2)).is_err());
        assert!(MergeMap::new(vec![0, 2]).is_err());
    }

    #[test]
    fn localization_examples() {
        let hw = 4;
        let uniform = vec![0.25; 8];
        let mask = vec![true, false, false, false, false, true, false, false];
        assert_eq!(attention_localization(&uniform, &mask, hw).unwrap(), 0.25);
        let inside = vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0];
        assert_eq!(attention_localization(&inside, &mask, hw).unwrap(), 1.0);
        let outside = vec![0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0];
        assert_eq!(attention_localization(&outside, &mask, hw).unwrap(), 0.0);
        assert!(attention_localization(&uniform, &mask[..4], hw).is_err());
    }

    #[test]
    fn render_labels_rows() {
        let m = ConfusionMatrix::from_counts(vec![vec![1, 0], vec![2, 3]], vec!["a".into(), "bb".into()]).unwrap();
        let text = m.render();
        assert_eq!(text.lines().count(), 3);
        assert!(text.contains("1:bb"));
        assert_eq!(m.to_csv().lines().count(), 5);
    }
}
