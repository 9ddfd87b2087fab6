//! Segment mean pooling and shift-by-one upsampling.

use std::ops::Range;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};

/// Segments implied by hard boundaries: a boundary at `t` closes the segment
/// containing `t`. The last position must be a boundary.
pub fn segment_ranges(hard: &[bool]) -> Result<Vec<Range<usize>>> {
    match hard.last() {
        None => return Ok(Vec::new()),
        Some(false) => return Err(Error::Shape("final position is not a boundary".into())),
        Some(true) => {}
    }
    let mut out = Vec::new();
    let mut start = 0;
    for (t, &b) in hard.iter().enumerate() {
        if b {
            out.push(start..t + 1);
            start = t + 1;
        }
    }
    Ok(out)
}

/// Segment index of every position.
pub fn segment_of(segments: &[Range<usize>], n: usize) -> Vec<usize> {
    let mut of = vec![0; n];
    for (j, r) in segments.iter().enumerate() {
        of[r.clone()].fill(j);
    }
    of
}

/// Mean of the member rows of each segment, in order.
pub fn pool_segments(hidden: ArrayView2<f64>, segments: &[Range<usize>]) -> Array2<f64> {
    let mut out = Array2::zeros((segments.len(), hidden.ncols()));
    for (mut row, r) in out.rows_mut().into_iter().zip(segments) {
        let part = hidden.slice(ndarray::s![r.clone(), ..]);
        row.assign(&(part.sum_axis(Axis(0)) / r.len() as f64));
    }
    out
}

pub fn pool_backward(
    d_pooled: ArrayView2<f64>,
    segments: &[Range<usize>],
    n: usize,
) -> Array2<f64> {
    let mut dh = Array2::zeros((n, d_pooled.ncols()));
    for (g, r) in d_pooled.rows().into_iter().zip(segments) {
        let share = &g / r.len() as f64;
        for t in r.clone() {
            dh.row_mut(t).assign(&share);
        }
    }
    dh
}

/// In-segment pooling weights. Each is `1 + sum of the boundary values at
/// earlier positions of its own segment`: exactly 1 on hard masks, and the
/// route by which the pooled vectors depend on interior boundary decisions.
pub fn pooling_weights(values: &[f64], segments: &[Range<usize>]) -> Vec<f64> {
    let mut w = vec![1.0; values.len()];
    for r in segments {
        let mut acc = 1.0;
        for t in r.clone() {
            w[t] = acc;
            acc += values[t];
        }
    }
    w
}

/// Weighted mean of each segment's member rows.
pub fn pool_weighted(
    hidden: ArrayView2<f64>,
    segments: &[Range<usize>],
    weights: &[f64],
) -> Array2<f64> {
    let mut out = Array2::zeros((segments.len(), hidden.ncols()));
    for (mut row, r) in out.rows_mut().into_iter().zip(segments) {
        let total: f64 = weights[r.clone()].iter().sum();
        for t in r.clone() {
            row.scaled_add(weights[t] / total, &hidden.row(t));
        }
    }
    out
}

/// Returns `(d_hidden, d_values)` for [`pool_weighted`] composed with
/// [`pooling_weights`].
pub fn pool_weighted_backward(
    d_pooled: ArrayView2<f64>,
    hidden: ArrayView2<f64>,
    pooled: ArrayView2<f64>,
    segments: &[Range<usize>],
    weights: &[f64],
) -> (Array2<f64>, Vec<f64>) {
    let mut dh = Array2::zeros(hidden.dim());
    let mut d_values = vec![0.0; hidden.nrows()];
    for ((g, mean), r) in d_pooled.rows().into_iter().zip(pooled.rows()).zip(segments) {
        let total: f64 = weights[r.clone()].iter().sum();
        // d_w[t] for every member, then suffix sums give d_values
        let mut suffix = 0.0;
        for t in r.clone().rev() {
            d_values[t] = suffix;
            dh.row_mut(t).scaled_add(weights[t] / total, &g);
            suffix += g.dot(&(&hidden.row(t) - &mean)) / total;
        }
    }
    (dh, d_values)
}

/// Every position of segment `j` receives `segment_out[j - 1]` (segment 0
/// receives `null`), added to its byte-level skip state.
pub fn upsample(
    segment_out: ArrayView2<f64>,
    null: ArrayView1<f64>,
    segments: &[Range<usize>],
    byte_hidden: ArrayView2<f64>,
) -> Array2<f64> {
    let mut out = byte_hidden.to_owned();
    for (j, r) in segments.iter().enumerate() {
        let src = if j == 0 { null } else { segment_out.row(j - 1) };
        for t in r.clone() {
            out.row_mut(t).scaled_add(1.0, &src);
        }
    }
    out
}

/// Returns `(d_segment_out, d_null)`; the skip path gradient is `du` itself.
pub fn upsample_backward(
    du: ArrayView2<f64>,
    segments: &[Range<usize>],
) -> (Array2<f64>, Array1<f64>) {
    let mut d_seg = Array2::zeros((segments.len(), du.ncols()));
    let mut d_null = Array1::zeros(du.ncols());
    for (j, r) in segments.iter().enumerate() {
        let sum = du.slice(ndarray::s![r.clone(), ..]).sum_axis(Axis(0));
        if j == 0 {
            d_null += &sum;
        } else {
            d_seg.row_mut(j - 1).assign(&sum);
        }
    }
    (d_seg, d_null)
}
