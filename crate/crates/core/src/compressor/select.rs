use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::mask::Mask;

/// Keeps the `r` highest probabilities; equal probabilities favor the lower
/// index.
pub fn select_top_r(probs: &[f64], r: usize) -> Result<Mask> {
    let n = probs.len();
    if r > n {
        return Err(Error::InvalidConfig(format!("cannot keep {r} of {n} tokens")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut bits = vec![false; n];
    for &i in &order[..r] {
        bits[i] = true;
    }
    Ok(Mask::from_bools(&bits))
}

/// Retained count for a keep ratio: half-away rounding, clamped to `[0, n]`.
pub fn ratio_to_r(ratio: f64, n: usize) -> usize {
    let r = (ratio * n as f64).round();
    if r.is_nan() || r <= 0.0 {
        0
    } else {
        (r as usize).min(n)
    }
}

/// Average-pools every row from width `d_in` to `d_out` using windows
/// `[floor(k d_in / d_out), ceil((k + 1) d_in / d_out))`.
pub fn adapt_dim(rows: ArrayView2<'_, f32>, d_out: usize) -> Result<Array2<f32>> {
    let d_in = rows.ncols();
    if d_in == 0 || d_out == 0 {
        return Err(Error::InvalidConfig(format!("cannot pool width {d_in} to {d_out}")));
    }
    if d_in == d_out {
        return Ok(rows.to_owned());
    }
    let windows: Vec<(usize, usize)> = (0..d_out)
        .map(|k| ((k * d_in) / d_out, ((k + 1) * d_in).div_ceil(d_out)))
        .collect();
    Ok(Array2::from_shape_fn((rows.nrows(), d_out), |(i, k)| {
        let (lo, hi) = windows[k];
        let sum: f64 = (lo..hi).map(|c| f64::from(rows[[i, c]])).sum();
        (sum / (hi - lo) as f64) as f32
    }))
}
