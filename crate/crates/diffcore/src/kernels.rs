//! Index arithmetic shared by the forward and backward rules.

use crate::tensor::numel;

/// Numpy-style broadcast of two shapes (aligned on the trailing axis).
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for d in 0..rank {
        let da = dim_from_right(a, rank - 1 - d);
        let db = dim_from_right(b, rank - 1 - d);
        out[d] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

fn dim_from_right(shape: &[usize], from_right: usize) -> usize {
    if from_right < shape.len() {
        shape[shape.len() - 1 - from_right]
    } else {
        1
    }
}

/// Strides of `src` expressed over the axes of `out`; broadcast axes get 0.
pub(crate) fn broadcast_strides(src: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let lead = rank - src.len();
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for d in (0..src.len()).rev() {
        if src[d] != 1 {
            strides[lead + d] = acc;
        }
        acc *= src[d];
    }
    strides
}

pub(crate) fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for d in (0..shape.len()).rev() {
        strides[d] = acc;
        acc *= shape[d];
    }
    strides
}

/// Walks `shape` in row-major order, calling `f(flat, off_a, off_b)` with the
/// offsets implied by the two stride vectors.
pub(crate) fn for_each_offset2(
    shape: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let total = numel(shape);
    if total == 0 {
        return;
    }
    let rank = shape.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let last = rank - 1;
    let (inner, la, lb) = (shape[last], sa[last], sb[last]);
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    let mut flat = 0;
    loop {
        for k in 0..inner {
            f(flat, oa + k * la, ob + k * lb);
            flat += 1;
        }
        if flat == total {
            return;
        }
        // carry into the outer axes
        let mut d = last;
        loop {
            d -= 1;
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < shape[d] {
                break;
            }
            oa -= sa[d] * shape[d];
            ob -= sb[d] * shape[d];
            idx[d] = 0;
        }
    }
}

/// `(outer, len, inner)` decomposition around `axis`.
pub(crate) fn axis_layout(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (numel(&shape[..axis]), shape[axis], numel(&shape[axis + 1..]))
}

pub(crate) fn permuted_shape(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    axes.iter().map(|&a| shape[a]).collect()
}

/// Gathers `src` (with shape `shape`) into the axis order `axes`.
pub(crate) fn permute<T: Copy>(src: &[T], shape: &[usize], axes: &[usize]) -> Vec<T> {
    let out_shape = permuted_shape(shape, axes);
    let src_strides = contiguous_strides(shape);
    let strides: Vec<usize> = axes.iter().map(|&a| src_strides[a]).collect();
    let zeros = vec![0; axes.len()];
    let mut out = Vec::with_capacity(src.len());
    for_each_offset2(&out_shape, &strides, &zeros, |_, off, _| out.push(src[off]));
    out
}

pub(crate) fn inverse_axes(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}
