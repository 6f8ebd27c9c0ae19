//! The recall × recall × density × cluster-count diagnostic grid.
//!
//! Each cell is one multi-restart clustering run against a noisy oracle at
//! that cell's recall pair. Cell seeds are derived from the cell coordinates
//! themselves, so any sub-grid reproduces exactly the cells of the full grid,
//! and results are independent of execution order or parallelism.

use super::csv::ResultRow;
use super::CellTemplate;
use crate::data::{Dataset, DatasetSpec};
use crate::error::{Error, Result};
use crate::pairs::{NoiseSpec, NoisyOracle};
use crate::seed;
use crate::trainer::train_clusternet;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

fn default_recall_axis() -> Vec<f64> {
    (0..=10).rev().map(|i| i as f64 / 10.0).collect()
}

fn default_densities() -> Vec<f64> {
    vec![1.0, 0.1]
}

fn default_cluster_counts() -> Vec<usize> {
    vec![10, 100]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub normalize: bool,
    /// Recall axes default to 1.0 down to 0.0 in steps of 0.1.
    #[serde(default = "default_recall_axis")]
    pub recall_similar: Vec<f64>,
    #[serde(default = "default_recall_axis")]
    pub recall_dissimilar: Vec<f64>,
    #[serde(default = "default_densities")]
    pub densities: Vec<f64>,
    #[serde(default = "default_cluster_counts")]
    pub cluster_counts: Vec<usize>,
    pub cell: CellTemplate,
    pub base_seed: u64,
}

/// Coordinates of one grid cell, in emission order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridCell {
    pub clusters: usize,
    pub density: f64,
    pub recall_similar: f64,
    pub recall_dissimilar: f64,
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, axis) in [
            ("recall_similar", &self.recall_similar),
            ("recall_dissimilar", &self.recall_dissimilar),
        ] {
            if axis.is_empty() {
                return Err(Error::InvalidConfig(format!("empty {name} axis")));
            }
            if let Some(r) = axis.iter().find(|r| !(0.0..=1.0).contains(*r)) {
                return Err(Error::InvalidConfig(format!("{name} value {r} outside [0, 1]")));
            }
        }
        if self.densities.is_empty() || self.cluster_counts.is_empty() {
            return Err(Error::InvalidConfig("empty density or cluster-count axis".into()));
        }
        if let Some(d) = self.densities.iter().find(|d| !(0.0..=1.0).contains(*d) || **d == 0.0) {
            return Err(Error::InvalidConfig(format!("density {d} outside (0, 1]")));
        }
        if let Some(m) = self.cluster_counts.iter().find(|m| **m < 2) {
            return Err(Error::InvalidConfig(format!("cluster count {m} below 2")));
        }
        Ok(())
    }

    /// Cells in fixed lexicographic order over the axes as configured:
    /// cluster count, density, recall_similar, recall_dissimilar.
    pub fn cells(&self) -> Vec<GridCell> {
        let mut cells = Vec::new();
        for &clusters in &self.cluster_counts {
            for &density in &self.densities {
                for &rs in &self.recall_similar {
                    for &rd in &self.recall_dissimilar {
                        cells.push(GridCell {
                            clusters,
                            density,
                            recall_similar: rs,
                            recall_dissimilar: rd,
                        });
                    }
                }
            }
        }
        cells
    }
}

/// Cell seed from the cell's own coordinates (bit patterns of the real
/// axes), not its position, so sub-grids reproduce full-grid cells.
pub fn cell_seed(base_seed: u64, cell: &GridCell) -> u64 {
    seed::mix(
        base_seed,
        &[
            seed::tag("cell"),
            cell.recall_similar.to_bits(),
            cell.recall_dissimilar.to_bits(),
            cell.density.to_bits(),
            cell.clusters as u64,
        ],
    )
}

fn run_cell(spec: &GridSpec, ds: &Dataset<f64>, cell: &GridCell) -> Vec<ResultRow> {
    let base = cell_seed(spec.base_seed, cell);
    let cfg = spec
        .cell
        .to_run_config(ds.shape(), cell.clusters, cell.density, base);
    let oracle = NoisyOracle::new(NoiseSpec {
        recall_similar: cell.recall_similar,
        recall_dissimilar: cell.recall_dissimilar,
        seed: seed::mix(base, &[seed::tag("grid-noise")]),
    });
    let row = |restart, init_seed, nmi, acc, wall| ResultRow {
        dataset: ds.name().to_string(),
        clusters: cell.clusters,
        density: cell.density,
        recall_similar: cell.recall_similar,
        recall_dissimilar: cell.recall_dissimilar,
        restart,
        seed: init_seed,
        nmi_train: nmi,
        acc_train: acc,
        nmi_test: None,
        acc_test: None,
        epochs: cfg.epochs,
        wall_seconds: wall,
    };
    match train_clusternet(ds, None, &oracle, &cfg) {
        Ok(result) => result
            .restarts
            .iter()
            .map(|r| row(r.restart, r.init_seed, r.nmi_train, r.acc_train, r.wall_seconds))
            .collect(),
        Err(e) => {
            log::warn!(
                "grid cell (M={}, D={}, r_s={}, r_d={}) failed: {e}",
                cell.clusters,
                cell.density,
                cell.recall_similar,
                cell.recall_dissimilar
            );
            vec![row(0, base, None, None, 0.0)]
        }
    }
}

/// Run every cell, invoking `emit` with each cell's rows as soon as that cell
/// finishes (in cell order), so partial grids survive interruption. Cell
/// failures produce metric-less rows and the grid continues.
pub fn run_grid(
    spec: &GridSpec,
    mut emit: impl FnMut(&[ResultRow]) -> Result<()>,
) -> Result<Vec<ResultRow>> {
    spec.validate()?;
    let ds = super::load_normalized(&spec.dataset, spec.normalize)?;
    ds.labels()
        .ok_or_else(|| Error::MissingLabels(ds.name().to_string()))?;
    let cells = spec.cells();
    let stride = rayon::current_num_threads().max(1);
    let mut all = Vec::new();
    for group in cells.chunks(stride) {
        let finished: Vec<Vec<ResultRow>> = group
            .par_iter()
            .map(|cell| run_cell(spec, &ds, cell))
            .collect();
        for rows in finished {
            emit(&rows)?;
            all.extend(rows);
        }
    }
    Ok(all)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::BlobSpec;
    use crate::harness::NetworkTemplate;

    fn blob_spec(classes: usize) -> DatasetSpec {
        DatasetSpec::Blobs(BlobSpec {
            num_classes: classes,
            dim: 8,
            points_per_class: 30,
            class_std: 0.05,
            center_scale: 5.0,
            seed: 4,
        })
    }

    fn quick_spec(classes: usize) -> GridSpec {
        GridSpec {
            dataset: blob_spec(classes),
            normalize: false,
            recall_similar: vec![1.0],
            recall_dissimilar: vec![1.0],
            densities: vec![1.0],
            cluster_counts: vec![classes],
            cell: CellTemplate {
                network: NetworkTemplate::Mlp { hidden: 16 },
                batch_size: 30,
                epochs: 8,
                lr: 0.1,
                momentum: 0.9,
                restarts: 2,
                margin: 2.0,
            },
            base_seed: 33,
        }
    }

    fn strip_wall(mut rows: Vec<ResultRow>) -> Vec<ResultRow> {
        for r in &mut rows {
            r.wall_seconds = 0.0;
        }
        rows
    }

    #[test]
    fn single_cell_grid_solves_separable_blobs() {
        let rows = run_grid(&quick_spec(4), |_| Ok(())).unwrap();
        assert_eq!(rows.len(), 2); // one per restart
        let best = rows
            .iter()
            .filter_map(|r| r.nmi_train)
            .fold(f64::NEG_INFINITY, f64::max);
        assert!(best >= 0.9, "best NMI {best}");
    }

    #[test]
    fn row_count_is_cells_times_restarts_and_emission_is_incremental() {
        let spec = GridSpec {
            recall_similar: vec![1.0, 0.8],
            recall_dissimilar: vec![1.0, 0.9],
            densities: vec![1.0],
            cluster_counts: vec![3, 4],
            cell: CellTemplate {
                epochs: 1,
                ..quick_spec(3).cell
            },
            ..quick_spec(3)
        };
        assert_eq!(spec.cells().len(), 8);
        let mut batches = 0usize;
        let rows = run_grid(&spec, |rows| {
            batches += 1;
            assert_eq!(rows.len(), 2);
            Ok(())
        })
        .unwrap();
        assert_eq!(batches, 8);
        assert_eq!(rows.len(), 16);
    }

    #[test]
    fn reruns_match_modulo_wall_seconds() {
        let spec = GridSpec {
            recall_similar: vec![1.0, 0.5],
            cell: CellTemplate {
                epochs: 2,
                ..quick_spec(3).cell
            },
            ..quick_spec(3)
        };
        let a = strip_wall(run_grid(&spec, |_| Ok(())).unwrap());
        let b = strip_wall(run_grid(&spec, |_| Ok(())).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn sub_grid_reproduces_full_grid_cells() {
        let full = GridSpec {
            recall_similar: vec![1.0, 0.6],
            cell: CellTemplate {
                epochs: 2,
                ..quick_spec(3).cell
            },
            ..quick_spec(3)
        };
        let sub = GridSpec {
            recall_similar: vec![0.6],
            ..full.clone()
        };
        let full_rows = strip_wall(run_grid(&full, |_| Ok(())).unwrap());
        let sub_rows = strip_wall(run_grid(&sub, |_| Ok(())).unwrap());
        let matching: Vec<ResultRow> = full_rows
            .into_iter()
            .filter(|r| r.recall_similar == 0.6)
            .collect();
        assert_eq!(matching, sub_rows);
    }

    #[test]
    fn failing_cell_yields_metricless_row_and_grid_continues() {
        // A conv template cannot consume 1x1x8 blob images, so every cell
        // fails at network construction.
        let spec = GridSpec {
            cell: CellTemplate {
                network: NetworkTemplate::Conv,
                ..quick_spec(3).cell
            },
            ..quick_spec(3)
        };
        let rows = run_grid(&spec, |_| Ok(())).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].nmi_train, None);
        assert_eq!(rows[0].acc_train, None);
    }

    #[test]
    fn invalid_axes_are_rejected() {
        for spec in [
            GridSpec {
                recall_similar: vec![],
                ..quick_spec(3)
            },
            GridSpec {
                recall_dissimilar: vec![1.2],
                ..quick_spec(3)
            },
            GridSpec {
                densities: vec![0.0],
                ..quick_spec(3)
            },
            GridSpec {
                cluster_counts: vec![1],
                ..quick_spec(3)
            },
        ] {
            assert!(run_grid(&spec, |_| Ok(())).is_err());
        }
    }
}
