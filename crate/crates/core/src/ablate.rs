//! Ablation grids: trains one model per grid cell on a shared dataset and
//! seed, varying the task mode, graph streams, and depth, then tabulates
//! test AUCs per cell.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, TaskMode};
use crate::datasynth::Split;
use crate::eval::eval_checkpoint;
use crate::model::GraphMode;
use crate::train::{train, TrainError};

/// One grid cell: overrides applied to the base run config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationCell {
    pub name: String,
    pub task_mode: TaskMode,
    pub graph_mode: GraphMode,
    pub depth: usize,
}

/// Ablation configuration: a base run plus the grid rows. The default grid
/// varies one axis at a time around the base configuration: task-specific
/// and single-graph variants, a depth sweep, and the full model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblateConfig {
    pub run: RunConfig,
    #[serde(default)]
    pub rows: Option<Vec<AblationCell>>,
}

impl AblateConfig {
    pub fn grid(&self) -> Vec<AblationCell> {
        match &self.rows {
            Some(rows) => rows.clone(),
            None => default_grid(&self.run),
        }
    }
}

/// The standard eight-row grid: two task-specific rows, two single-graph
/// rows, a 2/4/16 depth sweep, and the full multitask multi-graph model.
pub fn default_grid(base: &RunConfig) -> Vec<AblationCell> {
    let d = base.model.depth;
    let mut rows = vec![
        AblationCell {
            name: "task_specific_morphology".into(),
            task_mode: TaskMode::MorphologyOnly,
            graph_mode: GraphMode::Multi,
            depth: d,
        },
        AblationCell {
            name: "task_specific_distribution".into(),
            task_mode: TaskMode::DistributionOnly,
            graph_mode: GraphMode::Multi,
            depth: d,
        },
        AblationCell {
            name: "single_graph_radius".into(),
            task_mode: TaskMode::Multitask,
            graph_mode: GraphMode::RadiusOnly,
            depth: d,
        },
        AblationCell {
            name: "single_graph_knn".into(),
            task_mode: TaskMode::Multitask,
            graph_mode: GraphMode::KnnOnly,
            depth: d,
        },
    ];
    for depth in [2usize, 4, 16] {
        rows.push(AblationCell {
            name: format!("depth_{depth}"),
            task_mode: TaskMode::Multitask,
            graph_mode: GraphMode::Multi,
            depth,
        });
    }
    rows.push(AblationCell {
        name: "full_model".into(),
        task_mode: TaskMode::Multitask,
        graph_mode: GraphMode::Multi,
        depth: d,
    });
    rows
}

/// Result row: test AUCs for the tasks the cell actually trains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub task_mode: TaskMode,
    pub graph_mode: GraphMode,
    pub depth: usize,
    pub distribution_auc: Option<f64>,
    pub morphology_auc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    /// Plain-text rendering, one line per row.
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<28} {:>18} {:>12} {:>6} {:>14} {:>14}\n",
            "row", "task", "graphs", "depth", "dist_auc", "morph_auc"
        ));
        for r in &self.rows {
            let fmt = |v: Option<f64>| match v {
                Some(x) => format!("{x:.4}"),
                None => "---".to_string(),
            };
            out.push_str(&format!(
                "{:<28} {:>18} {:>12} {:>6} {:>14} {:>14}\n",
                r.name,
                format!("{:?}", r.task_mode),
                format!("{:?}", r.graph_mode),
                r.depth,
                fmt(r.distribution_auc),
                fmt(r.morphology_auc)
            ));
        }
        out
    }
}

/// Runs every cell of the grid against the shared dataset in
/// `run.data_dir`, training into `out_dir/rows/<name>` and evaluating on
/// the test split.
pub fn run_ablation(config: &AblateConfig, out_dir: &Path) -> Result<AblationTable, TrainError> {
    config.run.validate()?;
    let grid = config.grid();
    let mut rows = Vec::with_capacity(grid.len());
    for cell in &grid {
        let mut run = config.run.clone();
        run.task_mode = cell.task_mode;
        run.graph_mode = cell.graph_mode;
        run.model.depth = cell.depth;

        let cell_dir = out_dir.join("rows").join(&cell.name);
        let outcome = train(&run, &cell_dir)?;
        let report = eval_checkpoint(
            &outcome.checkpoint_json,
            Path::new(&run.data_dir),
            Split::Test,
        )?;

        // Task-specific rows report only the head they trained.
        let (dist, morph) = match cell.task_mode {
            TaskMode::Multitask => (report.distribution_auc, report.morphology_auc),
            TaskMode::MorphologyOnly => (None, report.morphology_auc),
            TaskMode::DistributionOnly => (report.distribution_auc, None),
        };
        rows.push(AblationRow {
            name: cell.name.clone(),
            task_mode: cell.task_mode,
            graph_mode: cell.graph_mode,
            depth: cell.depth,
            distribution_auc: dist,
            morphology_auc: morph,
        });
    }
    let table = AblationTable { rows };
    std::fs::create_dir_all(out_dir)?;
    let mut text = serde_json::to_string_pretty(&table)?;
    text.push('\n');
    std::fs::write(out_dir.join("ablation.json"), text)?;
    Ok(table)
}
