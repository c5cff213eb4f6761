use super::{DataError, Result};
use crate::mask;
use crate::tensor::Tensor;

fn check(mask_t: &Tensor) -> Result<()> {
    match mask::first_non_binary(mask_t) {
        Some(v) => Err(DataError::NonBinary(v)),
        None => Ok(()),
    }
}

/// Offsets `(dy, dx)` with `dy² + dx² ≤ r²`.
fn disk(radius: usize) -> Vec<(isize, isize)> {
    let r = radius as isize;
    let mut out = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dy * dy + dx * dx <= r * r {
                out.push((dy, dx));
            }
        }
    }
    out
}

fn stamp(src: &[bool], h: usize, w: usize, offsets: &[(isize, isize)], dst: &mut [bool]) {
    for y in 0..h {
        for x in 0..w {
            if !src[y * w + x] {
                continue;
            }
            for &(dy, dx) in offsets {
                let (yy, xx) = (y as isize + dy, x as isize + dx);
                if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                    dst[yy as usize * w + xx as usize] = true;
                }
            }
        }
    }
}

/// Dilation of every `(H, W)` plane by a Euclidean disk of `radius`.
pub fn disk_dilate(mask_t: &Tensor, radius: usize) -> Result<Tensor> {
    check(mask_t)?;
    let s = mask_t.shape();
    let offsets = disk(radius);
    let mut out = vec![false; s.numel()];
    for (src, dst) in mask_t.data().chunks_exact(s.plane()).zip(out.chunks_exact_mut(s.plane())) {
        let bits: Vec<bool> = src.iter().map(|&v| v != 0.0).collect();
        stamp(&bits, s.h, s.w, &offsets, dst);
    }
    Ok(mask::from_bools(s, &out))
}

/// Footprint edges: mask pixels with at least one 4-neighbour that is zero
/// (outside the image counts as zero), dilated by a disk of `dilation_radius`.
pub fn extract_boundary(mask_t: &Tensor, dilation_radius: usize) -> Result<Tensor> {
    check(mask_t)?;
    let s = mask_t.shape();
    let (h, w) = (s.h, s.w);
    let offsets = disk(dilation_radius);
    let mut out = vec![false; s.numel()];
    for (src, dst) in mask_t.data().chunks_exact(s.plane()).zip(out.chunks_exact_mut(s.plane())) {
        let on = |y: isize, x: isize| y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && src[y as usize * w + x as usize] != 0.0;
        let mut inner = vec![false; s.plane()];
        for y in 0..h as isize {
            for x in 0..w as isize {
                if on(y, x) && !(on(y - 1, x) && on(y + 1, x) && on(y, x - 1) && on(y, x + 1)) {
                    inner[y as usize * w + x as usize] = true;
                }
            }
        }
        stamp(&inner, h, w, &offsets, dst);
    }
    Ok(mask::from_bools(s, &out))
}
