//! Classification metrics over the four classes.

use crate::model::NUM_CLASSES;

/// `confusion[true][predicted]`
pub type Confusion = [[usize; NUM_CLASSES]; NUM_CLASSES];

pub fn confusion(pairs: impl IntoIterator<Item = (usize, usize)>) -> Confusion {
    let mut m = [[0; NUM_CLASSES]; NUM_CLASSES];
    for (truth, pred) in pairs {
        m[truth][pred] += 1;
    }
    m
}

pub fn accuracy(m: &Confusion) -> f64 {
    let total: usize = m.iter().flatten().sum();
    if total == 0 {
        return 0.0;
    }
    let hits: usize = (0..NUM_CLASSES).map(|c| m[c][c]).sum();
    hits as f64 / total as f64
}

/// Per-class `2·TP / (2·TP + FP + FN)`; a class with no support and no
/// predictions scores 0.
pub fn per_class_f1(m: &Confusion) -> [f64; NUM_CLASSES] {
    let mut out = [0.0; NUM_CLASSES];
    for (c, f1) in out.iter_mut().enumerate() {
        let tp = m[c][c];
        let fn_: usize = m[c].iter().sum::<usize>() - tp;
        let fp: usize = (0..NUM_CLASSES).map(|t| m[t][c]).sum::<usize>() - tp;
        let denom = 2 * tp + fp + fn_;
        *f1 = if denom == 0 { 0.0 } else { 2.0 * tp as f64 / denom as f64 };
    }
    out
}

/// Unweighted mean of the per-class F1 scores.
pub fn macro_f1(m: &Confusion) -> f64 {
    per_class_f1(m).iter().sum::<f64>() / NUM_CLASSES as f64
}
