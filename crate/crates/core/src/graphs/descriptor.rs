//! Patch descriptors: deterministic functions from a square intensity patch
//! to a fixed-length feature vector, standing in for a learned extractor.

use serde::{Deserialize, Serialize};

/// Square intensity patch centered on a point of interest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Patch {
    pub size: usize,
    /// Row-major `size * size` intensities.
    pub pixels: Vec<f64>,
}

impl Patch {
    pub fn new(size: usize, pixels: Vec<f64>) -> Self {
        assert_eq!(pixels.len(), size * size, "patch must be square");
        Patch { size, pixels }
    }

    pub fn zeros(size: usize) -> Self {
        Patch {
            size,
            pixels: vec![0.0; size * size],
        }
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.size + col]
    }
}

/// A pure patch-to-vector map with a stable name and output length.
pub trait PatchDescriptor {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn describe(&self, patch: &Patch) -> Vec<f64>;
}

/// Ten handcrafted patch statistics: mean, standard deviation, min, max,
/// a 4-bin gradient-orientation histogram (magnitude-weighted, normalized),
/// center intensity, and the radial intensity slope from the patch center.
#[derive(Debug, Clone, Copy, Default)]
pub struct StatsDescriptor;

impl StatsDescriptor {
    pub const DIM: usize = 10;
}

impl PatchDescriptor for StatsDescriptor {
    fn name(&self) -> &str {
        "stats10"
    }

    fn dim(&self) -> usize {
        Self::DIM
    }

    fn describe(&self, patch: &Patch) -> Vec<f64> {
        let m = patch.size;
        let n = (m * m) as f64;
        let px = &patch.pixels;

        let mean = px.iter().sum::<f64>() / n;
        let var = px.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let std = var.sqrt();
        let min = px.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = px.iter().cloned().fold(f64::NEG_INFINITY, f64::max);

        // Magnitude-weighted orientation histogram over interior central
        // differences, orientations folded to [0, pi).
        let mut hist = [0.0f64; 4];
        let mut total = 0.0;
        for row in 1..m - 1 {
            for col in 1..m - 1 {
                let gx = (patch.at(row, col + 1) - patch.at(row, col - 1)) / 2.0;
                let gy = (patch.at(row + 1, col) - patch.at(row - 1, col)) / 2.0;
                let mag = (gx * gx + gy * gy).sqrt();
                if mag == 0.0 {
                    continue;
                }
                let mut theta = gy.atan2(gx);
                if theta < 0.0 {
                    theta += std::f64::consts::PI;
                }
                if theta >= std::f64::consts::PI {
                    theta = 0.0;
                }
                let bin = ((theta / (std::f64::consts::PI / 4.0)) as usize).min(3);
                hist[bin] += mag;
                total += mag;
            }
        }
        if total > 1e-12 {
            for h in &mut hist {
                *h /= total;
            }
        }

        let center = patch.at(m / 2, m / 2);

        // Least-squares slope of intensity against radius from the center.
        let c = (m as f64 - 1.0) / 2.0;
        let mut r_mean = 0.0;
        for row in 0..m {
            for col in 0..m {
                let dr = row as f64 - c;
                let dc = col as f64 - c;
                r_mean += (dr * dr + dc * dc).sqrt();
            }
        }
        r_mean /= n;
        let mut cov = 0.0;
        let mut r_var = 0.0;
        for row in 0..m {
            for col in 0..m {
                let dr = row as f64 - c;
                let dc = col as f64 - c;
                let r = (dr * dr + dc * dc).sqrt() - r_mean;
                cov += r * (patch.at(row, col) - mean);
                r_var += r * r;
            }
        }
        let radial_slope = if r_var > 1e-12 { cov / r_var } else { 0.0 };

        vec![
            mean,
            std,
            min,
            max,
            hist[0],
            hist[1],
            hist[2],
            hist[3],
            center,
            radial_slope,
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_patch_describes_to_zeros() {
        let d = StatsDescriptor;
        let out = d.describe(&Patch::zeros(8));
        assert_eq!(out.len(), StatsDescriptor::DIM);
        assert!(out.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn constant_patch_has_no_texture() {
        let d = StatsDescriptor;
        let out = d.describe(&Patch::new(8, vec![0.7; 64]));
        assert!((out[0] - 0.7).abs() < 1e-12); // mean
        assert!(out[1].abs() < 1e-12); // std
        assert_eq!(out[2], 0.7); // min
        assert_eq!(out[3], 0.7); // max
        assert_eq!(&out[4..8], &[0.0; 4]); // no gradients
        assert_eq!(out[8], 0.7); // center
        assert!(out[9].abs() < 1e-12); // flat radial profile
    }

    #[test]
    fn horizontal_ramp_concentrates_orientation_mass() {
        // Intensity increasing with column index: gradient points along x,
        // orientation 0, so all histogram mass lands in the first bin.
        let m = 16;
        let mut px = vec![0.0; m * m];
        for row in 0..m {
            for col in 0..m {
                px[row * m + col] = col as f64 / m as f64;
            }
        }
        let out = StatsDescriptor.describe(&Patch::new(m, px));
        assert!((out[4] - 1.0).abs() < 1e-12);
        assert_eq!(&out[5..8], &[0.0; 3]);
    }

    #[test]
    fn bright_center_gives_negative_radial_slope() {
        let m = 9;
        let c = (m as f64 - 1.0) / 2.0;
        let mut px = vec![0.0; m * m];
        for row in 0..m {
            for col in 0..m {
                let dr = row as f64 - c;
                let dc = col as f64 - c;
                px[row * m + col] = 1.0 / (1.0 + (dr * dr + dc * dc).sqrt());
            }
        }
        let out = StatsDescriptor.describe(&Patch::new(m, px));
        assert!(out[9] < 0.0, "slope {}", out[9]);
    }
}
