use std::f64::consts::{FRAC_PI_2, TAU};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{extract_boundary, DataError, Result, Sample};
use crate::tensor::Tensor;

/// Parameters of the synthetic scene generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    /// Scene height and width in pixels.
    pub size: usize,
    pub channels: usize,
    /// Inclusive range of buildings per scene.
    pub buildings: (usize, usize),
    /// Inclusive range of building side lengths in pixels.
    pub building_size: (usize, usize),
    /// Amplitude of the background texture.
    pub texture_amplitude: f64,
    /// Disk radius used to derive boundary masks.
    pub boundary_radius: usize,
    /// Probability that a building is rotated away from the pixel grid.
    pub rotated_fraction: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            size: 64,
            channels: 3,
            buildings: (2, 5),
            building_size: (8, 18),
            texture_amplitude: 0.08,
            boundary_radius: 3,
            rotated_fraction: 0.5,
            seed: 7,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(DataError::InvalidConfig(msg));
        if self.size == 0 || self.channels == 0 {
            return bad("size and channels must be positive".into());
        }
        if self.buildings.0 > self.buildings.1 {
            return bad(format!("building count range {:?} is empty", self.buildings));
        }
        if self.building_size.0 > self.building_size.1 {
            return bad(format!("building size range {:?} is empty", self.building_size));
        }
        if self.building_size.0 < 3 {
            return bad("buildings must be at least 3 px on a side".into());
        }
        if !(0.0..=1.0).contains(&self.rotated_fraction) {
            return bad("rotated_fraction must lie in [0, 1]".into());
        }
        if !(self.texture_amplitude >= 0.0) {
            return bad("texture_amplitude must be non-negative".into());
        }
        Ok(())
    }
}

/// Integer rotation of offset `(x, y)` by three shears. Each shear is a
/// bijection on the pixel grid, so a rasterised footprint keeps its exact
/// pixel count at every angle.
fn shear_rotate(x: i64, y: i64, angle: f64) -> (i64, i64) {
    let a = -(angle / 2.0).tan();
    let b = angle.sin();
    let x1 = x + (a * y as f64).round() as i64;
    let y1 = y + (b * x1 as f64).round() as i64;
    let x2 = x1 + (a * y1 as f64).round() as i64;
    (x2, y1)
}

struct Wave {
    fx: f64,
    fy: f64,
    phase: f64,
}

/// Deterministic scene `index` of the stream defined by `config.seed`.
///
/// A textured background with axis-aligned and rotated rectangular
/// footprints, each with its own roof colour and a linear shading ramp.
/// Overlapping footprints merge in the mask. Pixel values are quantised to
/// multiples of 1/255 so scenes survive an 8-bit round trip unchanged.
pub fn generate_scene(config: &SceneConfig, index: usize) -> Result<Sample> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(index as u64);
    let (n, c) = (config.size, config.channels);
    let amp = config.texture_amplitude;

    let mut image = vec![0.0f64; c * n * n];
    let waves: Vec<Wave> = (0..3)
        .map(|_| Wave {
            fx: rng.random_range(0.5..4.0) / n as f64,
            fy: rng.random_range(0.5..4.0) / n as f64,
            phase: rng.random_range(0.0..TAU),
        })
        .collect();
    for ch in 0..c {
        let base: f64 = rng.random_range(0.15..0.4);
        for y in 0..n {
            for x in 0..n {
                let texture: f64 = waves
                    .iter()
                    .map(|w| (TAU * (w.fx * x as f64 + w.fy * y as f64) + w.phase + ch as f64).sin())
                    .sum::<f64>()
                    / 3.0;
                let grain: f64 = rng.random_range(-0.5..0.5);
                image[(ch * n + y) * n + x] = base + amp * (texture + grain);
            }
        }
    }

    let mut seg = vec![false; n * n];
    let count = rng.random_range(config.buildings.0..=config.buildings.1);
    for _ in 0..count {
        let bw = rng.random_range(config.building_size.0..=config.building_size.1);
        let bh = rng.random_range(config.building_size.0..=config.building_size.1);
        let angle = if rng.random_bool(config.rotated_fraction) {
            rng.random_range(0.0..FRAC_PI_2)
        } else {
            0.0
        };
        // room for the rotated footprint plus shear rounding
        let margin = ((bw * bw + bh * bh) as f64).sqrt() / 2.0 + 2.0;
        let margin = margin.ceil() as usize;
        let mut centre = || {
            if n > 2 * margin {
                rng.random_range(margin..n - margin) as i64
            } else {
                (n / 2) as i64
            }
        };
        let (cx, cy) = (centre(), centre());
        let roof: Vec<f64> = (0..c).map(|_| rng.random_range(0.6..0.95)).collect();
        let ramp: f64 = rng.random_range(0.0..0.15);
        for i in 0..bh {
            for j in 0..bw {
                let (dx, dy) = shear_rotate(j as i64 - (bw / 2) as i64, i as i64 - (bh / 2) as i64, angle);
                let (px, py) = (cx + dx, cy + dy);
                if px < 0 || py < 0 || px >= n as i64 || py >= n as i64 {
                    continue;
                }
                let p = py as usize * n + px as usize;
                seg[p] = true;
                let shade = 1.0 - ramp * j as f64 / bw as f64;
                for (ch, r) in roof.iter().enumerate() {
                    let grain: f64 = rng.random_range(-0.5..0.5);
                    image[ch * n * n + p] = r * shade + 0.3 * amp * grain;
                }
            }
        }
    }

    let image: Vec<f32> = image
        .into_iter()
        .map(|v| ((v.clamp(0.0, 1.0) * 255.0).round() / 255.0) as f32)
        .collect();
    let image = Tensor::new((1, c, n, n), image)?;
    let seg_mask = Tensor::new((1, 1, n, n), seg.iter().map(|&b| b as u8 as f32).collect())?;
    let bnd_mask = extract_boundary(&seg_mask, config.boundary_radius)?;
    Ok(Sample {
        id: index,
        image,
        seg_mask,
        bnd_mask,
    })
}
