//! Seeded synthetic data: point clusters realizing the five distribution
//! archetypes and four suspicious morphology archetypes, generated at desk
//! scale with per-cluster RNG streams so the same config always produces
//! the same dataset.

mod patches;
mod patterns;

pub use patches::{sample_patch, sample_patches};
pub use patterns::sample_point_pattern;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graphs::AnnotatedCluster;

#[derive(Debug, Error)]
pub enum DatasynthError {
    #[error("a cluster needs at least 3 points, requested {requested}")]
    TooFewPoints { requested: usize },
    #[error("generator.{field}: must satisfy {bound}, got {got}")]
    BadConfig {
        field: &'static str,
        bound: &'static str,
        got: String,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("split manifest: {0}")]
    Manifest(#[from] serde_json::Error),
}

/// Spatial arrangement of a cluster across the breast. The discriminant is
/// the graph-level class id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistributionArchetype {
    Diffuse = 0,
    Regional = 1,
    Grouped = 2,
    Linear = 3,
    Segmental = 4,
}

impl DistributionArchetype {
    pub const ALL: [DistributionArchetype; 5] = [
        DistributionArchetype::Diffuse,
        DistributionArchetype::Regional,
        DistributionArchetype::Grouped,
        DistributionArchetype::Linear,
        DistributionArchetype::Segmental,
    ];

    pub fn label(self) -> usize {
        self as usize
    }
}

/// Per-calcification shape/texture category. The discriminant is the
/// node-level class id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MorphologyArchetype {
    CoarseHeterogeneous = 0,
    FinePleomorphic = 1,
    Amorphous = 2,
    FineLinear = 3,
}

impl MorphologyArchetype {
    pub const ALL: [MorphologyArchetype; 4] = [
        MorphologyArchetype::CoarseHeterogeneous,
        MorphologyArchetype::FinePleomorphic,
        MorphologyArchetype::Amorphous,
        MorphologyArchetype::FineLinear,
    ];

    pub fn label(self) -> usize {
        self as usize
    }

    pub fn from_label(label: usize) -> Option<Self> {
        Self::ALL.get(label).copied()
    }
}

/// Everything the generator draws from, all named so tests pin defaults
/// instead of hidden constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub seed: u64,
    /// Clusters per (distribution, morphology) cell of the archetype grid.
    pub clusters_per_class: usize,
    pub points_min: usize,
    pub points_max: usize,
    /// (width, height) in pixels.
    pub image_extent: (f64, f64),
    pub patch_size: usize,
    pub background_mean: f64,
    pub background_noise: f64,
    /// Multiplies all foreground structure; 0 leaves pure background.
    pub intensity_scale: f64,
    /// Probability that a fringe node carries a contaminating morphology.
    pub fringe_contamination: f64,
    pub train_fraction: f64,
    /// Grouped-cluster Gaussian sigma, as a fraction of min(extent).
    pub grouped_sigma_frac: f64,
    /// Perpendicular jitter of linear patterns, fraction of min(extent).
    pub linear_jitter_frac: f64,
    /// Disk area fraction of the breast region for regional patterns.
    pub regional_area_frac: f64,
    /// Wedge opening range for segmental patterns, degrees.
    pub segmental_angle_deg: (f64, f64),
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            seed: 7,
            clusters_per_class: 5,
            points_min: 8,
            points_max: 20,
            image_extent: (800.0, 800.0),
            patch_size: 32,
            background_mean: 0.3,
            background_noise: 0.02,
            intensity_scale: 1.0,
            fringe_contamination: 0.10,
            train_fraction: 0.8,
            grouped_sigma_frac: 0.03,
            linear_jitter_frac: 0.01,
            regional_area_frac: 0.25,
            segmental_angle_deg: (15.0, 30.0),
        }
    }
}

impl GeneratorConfig {
    pub fn n_clusters(&self) -> usize {
        DistributionArchetype::ALL.len() * MorphologyArchetype::ALL.len() * self.clusters_per_class
    }

    pub fn validate(&self) -> Result<(), DatasynthError> {
        fn bad(field: &'static str, bound: &'static str, got: impl ToString) -> DatasynthError {
            DatasynthError::BadConfig {
                field,
                bound,
                got: got.to_string(),
            }
        }
        if self.clusters_per_class == 0 {
            return Err(bad("clusters_per_class", ">= 1", self.clusters_per_class));
        }
        if self.points_min < 3 {
            return Err(bad("points_min", ">= 3", self.points_min));
        }
        if self.points_max < self.points_min {
            return Err(bad("points_max", ">= points_min", self.points_max));
        }
        if !(self.image_extent.0 > 0.0 && self.image_extent.1 > 0.0) {
            return Err(bad("image_extent", "positive area", format!("{:?}", self.image_extent)));
        }
        if self.patch_size < 5 {
            return Err(bad("patch_size", ">= 5", self.patch_size));
        }
        if !(self.background_noise >= 0.0) {
            return Err(bad("background_noise", ">= 0", self.background_noise));
        }
        if !(self.intensity_scale >= 0.0) {
            return Err(bad("intensity_scale", ">= 0", self.intensity_scale));
        }
        if !(0.0..1.0).contains(&self.fringe_contamination) {
            return Err(bad("fringe_contamination", "in [0, 1)", self.fringe_contamination));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(bad("train_fraction", "in (0, 1)", self.train_fraction));
        }
        if !(self.grouped_sigma_frac > 0.0) {
            return Err(bad("grouped_sigma_frac", "> 0", self.grouped_sigma_frac));
        }
        if !(self.linear_jitter_frac >= 0.0) {
            return Err(bad("linear_jitter_frac", ">= 0", self.linear_jitter_frac));
        }
        if !(self.regional_area_frac > 0.0 && self.regional_area_frac <= 1.0) {
            return Err(bad("regional_area_frac", "in (0, 1]", self.regional_area_frac));
        }
        let (lo, hi) = self.segmental_angle_deg;
        if !(lo > 0.0 && hi >= lo && hi < 180.0) {
            return Err(bad("segmental_angle_deg", "0 < lo <= hi < 180", format!("{:?}", self.segmental_angle_deg)));
        }
        Ok(())
    }
}

/// Which clusters belong to the train and test splits, with the config that
/// produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub train_ids: Vec<usize>,
    pub test_ids: Vec<usize>,
    pub seed: u64,
    pub config: GeneratorConfig,
}

impl SplitManifest {
    pub fn ids(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train_ids,
            Split::Test => &self.test_ids,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl std::str::FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}, expected train or test")),
        }
    }
}

/// The archetypes assigned to each generated cluster, in id order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterProvenance {
    pub distribution: DistributionArchetype,
    pub morphology: MorphologyArchetype,
}

fn generate_cluster(
    id: usize,
    distribution: DistributionArchetype,
    morphology: MorphologyArchetype,
    config: &GeneratorConfig,
) -> Result<AnnotatedCluster, DatasynthError> {
    // Per-cluster stream so clusters can be generated independently (and in
    // parallel) without changing the output.
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ id as u64);
    let n = rng.gen_range(config.points_min..=config.points_max);
    let points = sample_point_pattern(distribution, n, config, &mut rng)?;

    // Majority morphology everywhere, except a binomial number of
    // contaminating nodes assigned to the farthest-from-centroid points.
    let mut labels = vec![morphology.label(); n];
    let contaminated: usize = (0..n)
        .map(|_| usize::from(rng.gen::<f64>() < config.fringe_contamination))
        .sum();
    if contaminated > 0 {
        let cx = points.iter().map(|p| p.0).sum::<f64>() / n as f64;
        let cy = points.iter().map(|p| p.1).sum::<f64>() / n as f64;
        let mut by_distance: Vec<usize> = (0..n).collect();
        by_distance.sort_by(|&a, &b| {
            let da = (points[a].0 - cx).powi(2) + (points[a].1 - cy).powi(2);
            let db = (points[b].0 - cx).powi(2) + (points[b].1 - cy).powi(2);
            db.partial_cmp(&da).unwrap().then(a.cmp(&b))
        });
        for &idx in by_distance.iter().take(contaminated) {
            let other = MorphologyArchetype::ALL[rng.gen_range(0..MorphologyArchetype::ALL.len() - 1)];
            // Skip over the majority class deterministically.
            let contaminant = if other.label() >= morphology.label() {
                MorphologyArchetype::from_label(other.label() + 1).unwrap_or(other)
            } else {
                other
            };
            labels[idx] = contaminant.label();
        }
    }

    let patches = labels
        .iter()
        .map(|&l| sample_patch(MorphologyArchetype::from_label(l).unwrap(), config, &mut rng))
        .collect();

    Ok(AnnotatedCluster {
        image_extent: config.image_extent,
        points,
        patches,
        node_labels: labels,
        graph_label: distribution.label(),
    })
}

/// Generates the full balanced dataset plus a stratified 80/20 split.
/// Cluster ids run distribution-major, then morphology, then replicate.
pub fn generate_dataset(
    config: &GeneratorConfig,
) -> Result<(Vec<AnnotatedCluster>, Vec<ClusterProvenance>, SplitManifest), DatasynthError> {
    config.validate()?;

    let mut clusters = Vec::with_capacity(config.n_clusters());
    let mut provenance = Vec::with_capacity(config.n_clusters());
    let mut id = 0usize;
    for distribution in DistributionArchetype::ALL {
        for morphology in MorphologyArchetype::ALL {
            for _ in 0..config.clusters_per_class {
                clusters.push(generate_cluster(id, distribution, morphology, config)?);
                provenance.push(ClusterProvenance {
                    distribution,
                    morphology,
                });
                id += 1;
            }
        }
    }

    // Stratified split: shuffle each distribution class independently with
    // the dataset-level seed, then take the leading train fraction.
    let mut split_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut train_ids = Vec::new();
    let mut test_ids = Vec::new();
    let per_class = MorphologyArchetype::ALL.len() * config.clusters_per_class;
    for class_index in 0..DistributionArchetype::ALL.len() {
        let mut ids: Vec<usize> = (class_index * per_class..(class_index + 1) * per_class).collect();
        ids.shuffle(&mut split_rng);
        let n_train = (ids.len() as f64 * config.train_fraction).round() as usize;
        train_ids.extend_from_slice(&ids[..n_train]);
        test_ids.extend_from_slice(&ids[n_train..]);
    }
    train_ids.sort_unstable();
    test_ids.sort_unstable();

    let manifest = SplitManifest {
        train_ids,
        test_ids,
        seed: config.seed,
        config: config.clone(),
    };
    Ok((clusters, provenance, manifest))
}

pub fn write_split_manifest(path: &Path, manifest: &SplitManifest) -> Result<(), DatasynthError> {
    let mut text = serde_json::to_string_pretty(manifest)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_split_manifest(path: &Path) -> Result<SplitManifest, DatasynthError> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}
