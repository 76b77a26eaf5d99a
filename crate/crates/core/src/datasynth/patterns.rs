//! Spatial point patterns for the five distribution archetypes, sampled
//! inside a half-ellipse stand-in for the breast region (straight edge at
//! x = 0 for the chest wall, curved boundary toward larger x).

use rand::Rng;

use super::{DatasynthError, DistributionArchetype, GeneratorConfig};

/// Breast region membership: half-ellipse anchored on the chest wall.
pub(crate) fn in_region(p: (f64, f64), extent: (f64, f64)) -> bool {
    let (w, h) = extent;
    let (a, b) = (0.95 * w, 0.47 * h);
    let x = p.0;
    let y = p.1 - 0.5 * h;
    x >= 0.02 * w && (x / a) * (x / a) + (y / b) * (y / b) <= 1.0
}

fn in_extent(p: (f64, f64), extent: (f64, f64)) -> bool {
    (0.0..=extent.0).contains(&p.0) && (0.0..=extent.1).contains(&p.1)
}

pub(crate) fn sample_in_region(rng: &mut impl Rng, extent: (f64, f64)) -> (f64, f64) {
    let (w, h) = extent;
    loop {
        let p = (rng.gen::<f64>() * 0.95 * w, (0.03 + rng.gen::<f64>() * 0.94) * h);
        if in_region(p, extent) {
            return p;
        }
    }
}

/// Standard normal via Box-Muller; one draw per call for determinism.
pub(crate) fn standard_normal(rng: &mut impl Rng) -> f64 {
    let u1: f64 = loop {
        let u = rng.gen::<f64>();
        if u > 1e-12 {
            break u;
        }
    };
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn resample_until(
    rng: &mut impl Rng,
    extent: (f64, f64),
    mut gen: impl FnMut(&mut dyn FnMut() -> f64) -> (f64, f64),
) -> (f64, f64) {
    for _ in 0..200 {
        let mut draw = || rng.gen::<f64>();
        let p = gen(&mut draw);
        if in_extent(p, extent) && in_region(p, extent) {
            return p;
        }
    }
    // Pathological parameter choices land here; stay inside the image.
    sample_in_region(rng, extent)
}

/// Samples `n` points following the archetype's geometry. All points land
/// inside the image extent and (up to clamping) the breast region.
pub fn sample_point_pattern(
    archetype: DistributionArchetype,
    n: usize,
    config: &GeneratorConfig,
    rng: &mut impl Rng,
) -> Result<Vec<(f64, f64)>, DatasynthError> {
    if n < 3 {
        return Err(DatasynthError::TooFewPoints { requested: n });
    }
    let extent = config.image_extent;
    let (w, h) = extent;
    let min_dim = w.min(h);

    let points = match archetype {
        DistributionArchetype::Diffuse => (0..n).map(|_| sample_in_region(rng, extent)).collect(),

        DistributionArchetype::Regional => {
            // Uniform over a disk sized to cover roughly the configured
            // fraction of the region area (half-ellipse: pi * a * b / 2).
            let area = std::f64::consts::PI * (0.95 * w) * (0.47 * h) / 2.0;
            let radius = (config.regional_area_frac * area / std::f64::consts::PI).sqrt();
            let center = sample_in_region(rng, extent);
            (0..n)
                .map(|_| {
                    resample_until(rng, extent, |draw| {
                        let t = 2.0 * std::f64::consts::PI * draw();
                        let r = radius * draw().sqrt();
                        (center.0 + r * t.cos(), center.1 + r * t.sin())
                    })
                })
                .collect()
        }

        DistributionArchetype::Grouped => {
            let sigma = config.grouped_sigma_frac * min_dim;
            let center = sample_in_region(rng, extent);
            (0..n)
                .map(|_| {
                    for _ in 0..200 {
                        let p = (
                            center.0 + sigma * standard_normal(rng),
                            center.1 + sigma * standard_normal(rng),
                        );
                        if in_extent(p, extent) {
                            return p;
                        }
                    }
                    center
                })
                .collect()
        }

        DistributionArchetype::Linear => {
            let (mut a, mut b) = (sample_in_region(rng, extent), sample_in_region(rng, extent));
            for _ in 0..100 {
                let d = ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt();
                if d >= 0.35 * min_dim {
                    break;
                }
                a = sample_in_region(rng, extent);
                b = sample_in_region(rng, extent);
            }
            let jitter = config.linear_jitter_frac * min_dim;
            let dir = (b.0 - a.0, b.1 - a.1);
            let len = (dir.0 * dir.0 + dir.1 * dir.1).sqrt();
            let unit = (dir.0 / len, dir.1 / len);
            let perp = (-unit.1, unit.0);
            (0..n)
                .map(|_| {
                    for _ in 0..200 {
                        let t: f64 = rng.gen();
                        let off = jitter * standard_normal(rng);
                        let p = (
                            a.0 + t * dir.0 + off * perp.0,
                            a.1 + t * dir.1 + off * perp.1,
                        );
                        if in_extent(p, extent) {
                            return p;
                        }
                    }
                    a
                })
                .collect()
        }

        DistributionArchetype::Segmental => {
            // Wedge with its apex on the chest wall, opening toward the
            // curved boundary, points spread along the wedge axis.
            let apex = (0.02 * w, (0.25 + 0.5 * rng.gen::<f64>()) * h);
            let axis_angle = (rng.gen::<f64>() - 0.5) * std::f64::consts::FRAC_PI_3;
            let (lo, hi) = config.segmental_angle_deg;
            let opening = (lo + rng.gen::<f64>() * (hi - lo)).to_radians();

            // Distance from apex to the region boundary along the axis.
            let dir = (axis_angle.cos(), axis_angle.sin());
            let mut reach = 0.0;
            let step = min_dim / 200.0;
            while reach < w + h {
                let p = (apex.0 + (reach + step) * dir.0, apex.1 + (reach + step) * dir.1);
                if !in_region(p, extent) {
                    break;
                }
                reach += step;
            }
            let reach = reach.max(0.2 * min_dim);

            (0..n)
                .map(|_| {
                    resample_until(rng, extent, |draw| {
                        let u = (0.15 + 0.8 * draw()) * reach;
                        let psi = (draw() - 0.5) * opening;
                        let ang = axis_angle + psi;
                        (apex.0 + u * ang.cos(), apex.1 + u * ang.sin())
                    })
                })
                .collect()
        }
    };
    Ok(points)
}
