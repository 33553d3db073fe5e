use std::cmp::Ordering;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Descending order, lower index first on ties.
fn rank_desc<T: Scalar>(row: &[T], i: usize, j: usize) -> Ordering {
    row[j].partial_cmp(&row[i]).unwrap_or(Ordering::Equal).then(i.cmp(&j))
}

/// The `k` largest entries of `row` in descending order with their indices.
/// Ties are broken by the lower index.
pub fn topk<T: Scalar>(row: &[T], k: usize) -> Result<(Vec<T>, Vec<usize>)> {
    if k == 0 || k > row.len() {
        return Err(Error::InvalidArgument(format!("top-k with k={k} over {} entries", row.len())));
    }
    let mut idx: Vec<usize> = (0..row.len()).collect();
    if k < row.len() {
        idx.select_nth_unstable_by(k - 1, |&i, &j| rank_desc(row, i, j));
        idx.truncate(k);
    }
    idx.sort_by(|&i, &j| rank_desc(row, i, j));
    Ok((idx.iter().map(|&i| row[i]).collect(), idx))
}

/// Row-wise [`topk`] over the last axis; values and indices are `[rows, k]` flattened.
pub fn topk_rows<T: Scalar>(x: &Tensor<T>, k: usize) -> Result<(Vec<T>, Vec<usize>)> {
    let n = x.last_dim();
    let mut values = Vec::with_capacity(x.rows() * k);
    let mut indices = Vec::with_capacity(x.rows() * k);
    for row in x.data().chunks(n) {
        let (v, i) = topk(row, k)?;
        values.extend(v);
        indices.extend(i);
    }
    Ok((values, indices))
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}
