use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{extract_boundary, DataError, Result, Sample};
use crate::tensor::Tensor;

/// Ranges and probabilities of the augmentation suite. Each transform is
/// sampled independently; setting a range to its identity value disables it.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentPolicy {
    pub hflip_p: f64,
    pub vflip_p: f64,
    /// Noise standard deviation is drawn from `[0, noise_sigma_max]`.
    pub noise_sigma_max: f64,
    /// Additive brightness offset drawn from `[-max, max]`.
    pub brightness_max: f64,
    pub gamma_range: (f64, f64),
    pub contrast_range: (f64, f64),
    pub blur_p: f64,
    /// Corner jitter as a fraction of the side length.
    pub perspective_max: f64,
    /// Disk radius for regenerating the boundary mask.
    pub boundary_radius: usize,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy {
            hflip_p: 0.5,
            vflip_p: 0.5,
            noise_sigma_max: 0.05,
            brightness_max: 0.2,
            gamma_range: (0.7, 1.4),
            contrast_range: (0.7, 1.3),
            blur_p: 0.25,
            perspective_max: 0.05,
            boundary_radius: 3,
        }
    }
}

impl AugmentPolicy {
    /// Every transform at its identity.
    pub fn identity(boundary_radius: usize) -> Self {
        AugmentPolicy {
            hflip_p: 0.0,
            vflip_p: 0.0,
            noise_sigma_max: 0.0,
            brightness_max: 0.0,
            gamma_range: (1.0, 1.0),
            contrast_range: (1.0, 1.0),
            blur_p: 0.0,
            perspective_max: 0.0,
            boundary_radius,
        }
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if lo >= hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

fn flip_h(t: &Tensor) -> Tensor {
    let s = t.shape();
    Tensor::from_fn(s, |n, c, y, x| t.get(n, c, y, s.w - 1 - x))
}

fn flip_v(t: &Tensor) -> Tensor {
    let s = t.shape();
    Tensor::from_fn(s, |n, c, y, x| t.get(n, c, s.h - 1 - y, x))
}

/// Solve the 8×8 system for the homography taking each `dst[i]` to `src[i]`.
fn homography(dst: [(f64, f64); 4], src: [(f64, f64); 4]) -> [f64; 9] {
    let mut a = [[0.0f64; 9]; 8];
    for i in 0..4 {
        let (x, y) = dst[i];
        let (u, v) = src[i];
        a[2 * i] = [x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y, u];
        a[2 * i + 1] = [0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y, v];
    }
    for col in 0..8 {
        let pivot = (col..8)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .expect("non-empty");
        a.swap(col, pivot);
        let p = a[col][col];
        for k in col..9 {
            a[col][k] /= p;
        }
        for row in 0..8 {
            if row != col {
                let f = a[row][col];
                if f != 0.0 {
                    for k in col..9 {
                        a[row][k] -= f * a[col][k];
                    }
                }
            }
        }
    }
    let mut h = [0.0; 9];
    for i in 0..8 {
        h[i] = a[i][8];
    }
    h[8] = 1.0;
    h
}

fn apply(h: &[f64; 9], x: f64, y: f64) -> (f64, f64) {
    let d = h[6] * x + h[7] * y + h[8];
    ((h[0] * x + h[1] * y + h[2]) / d, (h[3] * x + h[4] * y + h[5]) / d)
}

/// Resample through `h` (output coords → source coords). Images are sampled
/// bilinearly with edge clamping; masks by nearest neighbour with zero fill.
fn warp(t: &Tensor, h: &[f64; 9], nearest: bool) -> Tensor {
    let s = t.shape();
    let (hh, ww) = (s.h as f64, s.w as f64);
    Tensor::from_fn(s, |n, c, y, x| {
        let (u, v) = apply(h, x as f64 + 0.5, y as f64 + 0.5);
        if nearest {
            if u < 0.0 || v < 0.0 || u >= ww || v >= hh {
                0.0
            } else {
                t.get(n, c, v as usize, u as usize)
            }
        } else {
            let fx = (u - 0.5).clamp(0.0, ww - 1.0);
            let fy = (v - 0.5).clamp(0.0, hh - 1.0);
            let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(s.w - 1), (y0 + 1).min(s.h - 1));
            let (ax, ay) = ((fx - x0 as f64) as f32, (fy - y0 as f64) as f32);
            let top = t.get(n, c, y0, x0) * (1.0 - ax) + t.get(n, c, y0, x1) * ax;
            let bottom = t.get(n, c, y1, x0) * (1.0 - ax) + t.get(n, c, y1, x1) * ax;
            top * (1.0 - ay) + bottom * ay
        }
    })
}

/// 3×3 binomial blur with edge clamping.
fn blur(t: &Tensor) -> Tensor {
    let s = t.shape();
    let k = [0.25f32, 0.5, 0.25];
    let at = |n, c, y: isize, x: isize| t.get(n, c, y.clamp(0, s.h as isize - 1) as usize, x.clamp(0, s.w as isize - 1) as usize);
    Tensor::from_fn(s, |n, c, y, x| {
        let mut acc = 0.0;
        for (i, ky) in k.iter().enumerate() {
            for (j, kx) in k.iter().enumerate() {
                acc += ky * kx * at(n, c, y as isize + i as isize - 1, x as isize + j as isize - 1);
            }
        }
        acc
    })
}

/// Apply a randomly drawn augmentation to `sample`.
///
/// Geometric transforms (flips, perspective) act on the image and the
/// segmentation mask; the boundary mask is then regenerated from the warped
/// segmentation. Photometric transforms act on the image only, which is
/// finally clamped to `[0, 1]`.
pub fn augment<R: Rng + ?Sized>(sample: &Sample, rng: &mut R, policy: &AugmentPolicy) -> Result<Sample> {
    let mut image = sample.image.clone();
    let mut seg = sample.seg_mask.clone();
    let mut geometric = false;

    if rng.random_bool(policy.hflip_p.clamp(0.0, 1.0)) {
        image = flip_h(&image);
        seg = flip_h(&seg);
        geometric = true;
    }
    if rng.random_bool(policy.vflip_p.clamp(0.0, 1.0)) {
        image = flip_v(&image);
        seg = flip_v(&seg);
        geometric = true;
    }
    if policy.perspective_max > 0.0 {
        let (w, h) = (image.shape().w as f64, image.shape().h as f64);
        let corners = [(0.0, 0.0), (w, 0.0), (w, h), (0.0, h)];
        let m = policy.perspective_max;
        let jittered = corners.map(|(x, y)| (x + rng.random_range(-m..=m) * w, y + rng.random_range(-m..=m) * h));
        let hm = homography(corners, jittered);
        image = warp(&image, &hm, false);
        seg = warp(&seg, &hm, true);
        geometric = true;
    }
    seg = seg.map(|v| if v >= 0.5 { 1.0 } else { 0.0 });

    let delta = if policy.brightness_max > 0.0 {
        rng.random_range(-policy.brightness_max..=policy.brightness_max)
    } else {
        0.0
    };
    let contrast = uniform(rng, policy.contrast_range);
    let gamma = uniform(rng, policy.gamma_range);
    let sigma = if policy.noise_sigma_max > 0.0 {
        rng.random_range(0.0..=policy.noise_sigma_max)
    } else {
        0.0
    };
    let do_blur = rng.random_bool(policy.blur_p.clamp(0.0, 1.0));

    if delta != 0.0 {
        let d = delta as f32;
        image = image.map(|v| v + d);
    }
    if contrast != 1.0 {
        let mean = image.sum() / image.numel() as f32;
        let c = contrast as f32;
        image = image.map(|v| mean + c * (v - mean));
    }
    if gamma != 1.0 {
        let g = gamma as f32;
        image = image.map(|v| v.clamp(0.0, 1.0).powf(g));
    }
    if sigma > 0.0 {
        let normal = Normal::new(0.0, sigma).expect("finite sigma");
        for v in image.data_mut() {
            *v += normal.sample(rng) as f32;
        }
    }
    if do_blur {
        image = blur(&image);
    }
    image = image.map(|v| v.clamp(0.0, 1.0));

    let bnd_mask = if geometric {
        extract_boundary(&seg, policy.boundary_radius)?
    } else {
        sample.bnd_mask.clone()
    };
    Ok(Sample {
        id: sample.id,
        image,
        seg_mask: seg,
        bnd_mask,
    })
}

fn crop(t: &Tensor, y0: usize, x0: usize, size: usize) -> Tensor {
    let s = t.shape();
    Tensor::from_fn((s.n, s.c, size, size), |n, c, y, x| t.get(n, c, y0 + y, x0 + x))
}

/// Random `size × size` window, identical for the image and both masks.
pub fn random_crop<R: Rng + ?Sized>(sample: &Sample, size: usize, rng: &mut R) -> Result<Sample> {
    let (h, w) = (sample.height(), sample.width());
    if size == 0 || size > h || size > w {
        return Err(DataError::CropTooLarge { size, h, w });
    }
    if size == h && size == w {
        return Ok(sample.clone());
    }
    let y0 = rng.random_range(0..=h - size);
    let x0 = rng.random_range(0..=w - size);
    Ok(Sample {
        id: sample.id,
        image: crop(&sample.image, y0, x0, size),
        seg_mask: crop(&sample.seg_mask, y0, x0, size),
        bnd_mask: crop(&sample.bnd_mask, y0, x0, size),
    })
}
