use pathfinding::matrix::Matrix;
use pathfinding::prelude::kuhn_munkres;

use crate::error::{Error, Result};

/// Permutation `perm` with `perm[other_index] = reference_index` maximizing
/// the label co-occurrence between two clusterings of the same samples.
pub fn align_permutation(reference: &[usize], other: &[usize], c: usize) -> Result<Vec<usize>> {
    if reference.len() != other.len() {
        return Err(Error::Shape(format!(
            "label lists differ in length: {} vs {}",
            reference.len(),
            other.len()
        )));
    }
    if let Some(&bad) = reference.iter().chain(other).find(|&&l| l >= c) {
        return Err(Error::Shape(format!("label {bad} outside {c} clusters")));
    }
    let mut co = vec![0i64; c * c];
    for (&r, &o) in reference.iter().zip(other) {
        co[o * c + r] += 1;
    }
    let m = Matrix::from_vec(c, c, co).map_err(|e| Error::Shape(e.to_string()))?;
    let (_, perm) = kuhn_munkres(&m);
    Ok(perm)
}

/// Relabels `other` into the index space of `reference`. Fails when the
/// clusterings have different cluster counts.
pub fn align_stage_labels(reference: &[usize], other: &[usize], c_ref: usize, c_other: usize) -> Result<Vec<usize>> {
    if c_ref != c_other {
        return Err(Error::Shape(format!("cluster counts differ: {c_ref} vs {c_other}")));
    }
    let perm = align_permutation(reference, other, c_ref)?;
    Ok(other.iter().map(|&l| perm[l]).collect())
}

/// Weighted vote over aligned per-stage labels. On a tie the label of the last
/// stage wins if it is among the tied classes, else the lowest tied class.
pub fn vote(labels: &[usize], weights: &[f64], c: usize) -> usize {
    let mut score = vec![0f64; c];
    for (&l, &w) in labels.iter().zip(weights) {
        score[l] += w;
    }
    let top = score.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let last = *labels.last().expect("at least one stage");
    if score[last] == top {
        return last;
    }
    score.iter().position(|&s| s == top).expect("max exists")
}

pub fn vote_labels(per_stage: &[Vec<usize>], weights: &[f64], c: usize) -> Vec<usize> {
    per_stage.iter().map(|l| vote(l, weights, c)).collect()
}
