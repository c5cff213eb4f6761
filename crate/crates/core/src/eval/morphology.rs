use super::{check_binary, check_same_shape, Result};
use crate::tensor::Tensor;

/// Sliding max (`grow`) or min over a window of `2r + 1` along one line,
/// with samples outside the line read as 0.
fn sweep_line(src: &[bool], r: usize, grow: bool, dst: &mut [bool]) {
    let n = src.len();
    // prefix counts of set pixels make each window O(1)
    let mut prefix = vec![0usize; n + 1];
    for (i, &b) in src.iter().enumerate() {
        prefix[i + 1] = prefix[i] + b as usize;
    }
    for (i, d) in dst.iter_mut().enumerate() {
        let lo = i.saturating_sub(r);
        let hi = (i + r + 1).min(n);
        let set = prefix[hi] - prefix[lo];
        *d = if grow { set > 0 } else { set == 2 * r + 1 };
    }
}

/// Square structuring element of side `2r + 1`, applied as a row pass then
/// a column pass on every plane.
fn morph(mask: &Tensor, r: usize, grow: bool) -> Result<Tensor> {
    check_binary(mask)?;
    let s = mask.shape();
    let (h, w) = (s.h, s.w);
    let mut out = mask.clone();
    for plane in out.data_mut().chunks_exact_mut(s.plane()) {
        let bits: Vec<bool> = plane.iter().map(|&v| v != 0.0).collect();
        let mut rows = vec![false; h * w];
        for y in 0..h {
            sweep_line(&bits[y * w..(y + 1) * w], r, grow, &mut rows[y * w..(y + 1) * w]);
        }
        let mut col = vec![false; h];
        let mut res = vec![false; h];
        for x in 0..w {
            for y in 0..h {
                col[y] = rows[y * w + x];
            }
            sweep_line(&col, r, grow, &mut res);
            for y in 0..h {
                plane[y * w + x] = if res[y] { 1.0 } else { 0.0 };
            }
        }
    }
    Ok(out)
}

/// Erosion by a `(2r+1)²` square. Pixels outside the image count as 0, so
/// anything within `r` of the border is removed.
pub fn erode(mask: &Tensor, r: usize) -> Result<Tensor> {
    morph(mask, r, false)
}

/// Dilation by a `(2r+1)²` square.
pub fn dilate(mask: &Tensor, r: usize) -> Result<Tensor> {
    morph(mask, r, true)
}

/// Erosion followed by dilation.
pub fn opening(mask: &Tensor, r: usize) -> Result<Tensor> {
    dilate(&erode(mask, r)?, r)
}

/// `seg AND NOT bnd`, then an opening of radius `r`.
pub fn fuse_postprocess(seg: &Tensor, bnd: &Tensor, r: usize) -> Result<Tensor> {
    check_same_shape(seg, bnd)?;
    check_binary(seg)?;
    check_binary(bnd)?;
    let mut fused = seg.clone();
    for (f, &b) in fused.data_mut().iter_mut().zip(bnd.data()) {
        if b != 0.0 {
            *f = 0.0;
        }
    }
    opening(&fused, r)
}
