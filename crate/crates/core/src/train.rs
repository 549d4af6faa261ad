//! Minibatching helpers shared by the training loops.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Shuffled minibatches covering `0..n` once. With `fill` every batch has
/// exactly `batch` entries, the last one wrapping around to the start of the
/// permutation; otherwise the final batch may be short.
pub fn epoch_batches<R: Rng + ?Sized>(n: usize, batch: usize, fill: bool, rng: &mut R) -> Vec<Vec<usize>> {
    if n == 0 || batch == 0 {
        return Vec::new();
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let steps = n.div_ceil(batch);
    (0..steps)
        .map(|s| {
            let start = s * batch;
            if fill {
                (start..start + batch).map(|i| order[i % n]).collect()
            } else {
                order[start..(start + batch).min(n)].to_vec()
            }
        })
        .collect()
}

/// Applies `f` to successive leading-axis chunks of `x` and concatenates the
/// flattened outputs.
pub fn in_chunks<F>(x: &Tensor, chunk: usize, mut f: F) -> Result<Vec<f32>>
where
    F: FnMut(&Tensor) -> Result<Tensor>,
{
    let n = *x.shape().first().ok_or(Error::Axis { axis: 0, rank: 0 })?;
    let mut out = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + chunk.max(1)).min(n);
        out.extend_from_slice(f(&x.select_rows(start, end)?)?.data());
        start = end;
    }
    Ok(out)
}

/// Arithmetic mean; zero for an empty slice.
pub fn mean(v: &[f32]) -> f32 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f32>() / v.len() as f32
    }
}
