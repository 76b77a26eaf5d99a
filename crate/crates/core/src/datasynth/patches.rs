//! Class-conditional synthetic patch textures for the four suspicious
//! morphology archetypes, rendered over Gaussian background noise.

use rand::Rng;

use super::{GeneratorConfig, MorphologyArchetype};
use crate::graphs::Patch;

use super::patterns::standard_normal;

fn background(config: &GeneratorConfig, rng: &mut impl Rng) -> Vec<f64> {
    let m = config.patch_size;
    (0..m * m)
        .map(|_| {
            (config.background_mean + config.background_noise * standard_normal(rng)).clamp(0.0, 1.0)
        })
        .collect()
}

fn add_ellipse(
    pixels: &mut [f64],
    m: usize,
    center: (f64, f64),
    radii: (f64, f64),
    angle: f64,
    intensity: f64,
) {
    let (sin, cos) = angle.sin_cos();
    for row in 0..m {
        for col in 0..m {
            let dx = col as f64 - center.0;
            let dy = row as f64 - center.1;
            let u = (dx * cos + dy * sin) / radii.0;
            let v = (-dx * sin + dy * cos) / radii.1;
            if u * u + v * v <= 1.0 {
                let p = &mut pixels[row * m + col];
                *p = p.max(intensity);
            }
        }
    }
}

fn add_gaussian_bump(pixels: &mut [f64], m: usize, center: (f64, f64), sigma: f64, amplitude: f64) {
    for row in 0..m {
        for col in 0..m {
            let dx = col as f64 - center.0;
            let dy = row as f64 - center.1;
            let d2 = dx * dx + dy * dy;
            pixels[row * m + col] += amplitude * (-d2 / (2.0 * sigma * sigma)).exp();
        }
    }
}

fn add_streak(
    pixels: &mut [f64],
    m: usize,
    center: (f64, f64),
    angle: f64,
    half_length: f64,
    width: f64,
    intensity: f64,
) {
    let dir = (angle.cos(), angle.sin());
    for row in 0..m {
        for col in 0..m {
            let dx = col as f64 - center.0;
            let dy = row as f64 - center.1;
            let along = dx * dir.0 + dy * dir.1;
            let across = -dx * dir.1 + dy * dir.0;
            if along.abs() <= half_length {
                let fall = (-(across / width) * (across / width)).exp();
                let p = &mut pixels[row * m + col];
                *p = p.max(intensity * fall);
            }
        }
    }
}

/// Renders one patch for the given morphology class. `intensity_scale`
/// multiplies every foreground structure, so 0 yields pure background.
pub fn sample_patch(
    archetype: MorphologyArchetype,
    config: &GeneratorConfig,
    rng: &mut impl Rng,
) -> Patch {
    let m = config.patch_size;
    let scale = m as f64 / 32.0;
    let k = config.intensity_scale;
    let mut pixels = background(config, rng);
    let central = |rng: &mut dyn FnMut() -> f64| {
        (
            m as f64 * (0.25 + 0.5 * rng()),
            m as f64 * (0.25 + 0.5 * rng()),
        )
    };

    match archetype {
        MorphologyArchetype::CoarseHeterogeneous => {
            // A few large irregular bright blobs, each a union of
            // overlapping ellipses.
            let blobs = rng.gen_range(2..=4usize);
            for _ in 0..blobs {
                let mut draw = || rng.gen::<f64>();
                let center = central(&mut draw);
                let lobes = rng.gen_range(2..=3usize);
                for _ in 0..lobes {
                    let off = (
                        (rng.gen::<f64>() - 0.5) * 6.0 * scale,
                        (rng.gen::<f64>() - 0.5) * 6.0 * scale,
                    );
                    let radii = (
                        (3.0 + 4.0 * rng.gen::<f64>()) * scale,
                        (3.0 + 4.0 * rng.gen::<f64>()) * scale,
                    );
                    let angle = rng.gen::<f64>() * std::f64::consts::PI;
                    let intensity = (0.7 + 0.3 * rng.gen::<f64>()) * k;
                    add_ellipse(
                        &mut pixels,
                        m,
                        (center.0 + off.0, center.1 + off.1),
                        radii,
                        angle,
                        intensity,
                    );
                }
            }
        }
        MorphologyArchetype::FinePleomorphic => {
            // Many small spots with high variance in size, shape and
            // brightness.
            let spots = rng.gen_range(4..=8usize);
            for _ in 0..spots {
                let mut draw = || rng.gen::<f64>();
                let center = central(&mut draw);
                let r = (0.8 + 2.2 * rng.gen::<f64>()) * scale;
                let aspect = 0.5 + 1.5 * rng.gen::<f64>();
                let angle = rng.gen::<f64>() * std::f64::consts::PI;
                let intensity = (0.5 + 0.5 * rng.gen::<f64>()) * k;
                add_ellipse(&mut pixels, m, center, (r, r * aspect), angle, intensity);
            }
        }
        MorphologyArchetype::Amorphous => {
            // Low-contrast blurred blobs.
            let bumps = rng.gen_range(1..=2usize);
            for _ in 0..bumps {
                let mut draw = || rng.gen::<f64>();
                let center = central(&mut draw);
                let sigma = (5.0 + 4.0 * rng.gen::<f64>()) * scale;
                let amplitude = (0.15 + 0.15 * rng.gen::<f64>()) * k;
                add_gaussian_bump(&mut pixels, m, center, sigma, amplitude);
            }
        }
        MorphologyArchetype::FineLinear => {
            // One or two thin bright streaks; branches stay nearly parallel
            // to the main streak, as along a duct.
            let streaks = rng.gen_range(1..=2usize);
            let angle = rng.gen::<f64>() * std::f64::consts::PI;
            for i in 0..streaks {
                let mut draw = || rng.gen::<f64>();
                let center = central(&mut draw);
                let jitter = if i == 0 {
                    0.0
                } else {
                    (rng.gen::<f64>() - 0.5) * 0.25
                };
                let half_length = (0.3 + 0.15 * rng.gen::<f64>()) * m as f64;
                let intensity = (0.75 + 0.25 * rng.gen::<f64>()) * k;
                add_streak(
                    &mut pixels,
                    m,
                    center,
                    angle + jitter,
                    half_length,
                    0.8 * scale,
                    intensity,
                );
            }
        }
    }

    for p in &mut pixels {
        *p = p.clamp(0.0, 1.0);
    }
    Patch::new(m, pixels)
}

/// One patch per point, all of the same morphology class.
pub fn sample_patches(
    archetype: MorphologyArchetype,
    count: usize,
    config: &GeneratorConfig,
    rng: &mut impl Rng,
) -> Vec<Patch> {
    (0..count).map(|_| sample_patch(archetype, config, rng)).collect()
}
