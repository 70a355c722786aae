use serde::{Deserialize, Serialize};

use super::{train, TrainConfig};
use crate::corpus::Dataset;
use crate::error::{Error, Result};
use crate::eval::EvalReport;
use crate::similarity::SimilarityKind;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub taus: Vec<f64>,
    /// One temperature shared by all types instead of a per-type product.
    pub tie_tau: bool,
    pub lambdas: Vec<f64>,
    /// Only used by `ProjectedCosine`.
    pub ranks: Vec<usize>,
    /// Cells trained at the same time; 0 means the rayon default.
    pub max_parallel: usize,
}

impl GridSpec {
    pub fn defaults(d: usize) -> Self {
        Self {
            taus: vec![0.2, 0.4, 0.6, 0.8, 1.0],
            tie_tau: true,
            lambdas: vec![0.2, 0.4, 0.6, 0.8, 1.0],
            ranks: crate::similarity::default_rank_grid(d),
            max_parallel: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub index: usize,
    pub temperatures: Vec<f64>,
    pub lambda: f64,
    pub rank: Option<usize>,
}

impl GridCell {
    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        cfg.temperatures = self.temperatures.clone();
        cfg.loss.lambda = self.lambda;
        if let (Some(rank), SimilarityKind::ProjectedCosine { .. }) = (self.rank, cfg.loss.kind) {
            cfg.loss.kind = SimilarityKind::ProjectedCosine { rank };
        }
        cfg
    }
}

/// Exhaustive product of the grids, temperatures varying slowest.
pub fn grid_cells(
    spec: &GridSpec,
    kind: SimilarityKind,
    num_types: usize,
) -> Result<Vec<GridCell>> {
    if spec.taus.is_empty() || spec.lambdas.is_empty() {
        return Err(Error::Config(
            "temperature and lambda grids must be non-empty".into(),
        ));
    }
    let ranks: Vec<Option<usize>> = match kind {
        SimilarityKind::ProjectedCosine { .. } if spec.ranks.is_empty() => {
            return Err(Error::Config("rank grid must be non-empty".into()))
        }
        SimilarityKind::ProjectedCosine { .. } => spec.ranks.iter().copied().map(Some).collect(),
        _ => vec![None],
    };
    let tau_sets: Vec<Vec<f64>> = if spec.tie_tau {
        spec.taus.iter().map(|&t| vec![t]).collect()
    } else {
        let mut sets = vec![Vec::new()];
        for _ in 0..num_types {
            sets = sets
                .into_iter()
                .flat_map(|prefix: Vec<f64>| {
                    spec.taus.iter().map(move |&t| {
                        let mut s = prefix.clone();
                        s.push(t);
                        s
                    })
                })
                .collect();
        }
        sets
    };
    let mut cells = Vec::new();
    for temperatures in &tau_sets {
        for &lambda in &spec.lambdas {
            for &rank in &ranks {
                cells.push(GridCell {
                    index: cells.len(),
                    temperatures: temperatures.clone(),
                    lambda,
                    rank,
                });
            }
        }
    }
    Ok(cells)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub cell: GridCell,
    pub config: TrainConfig,
    /// Mean of validation mAP (all types) and evidence F1.
    pub score: f64,
    pub report: EvalReport,
}

/// Trains every cell with the base seed and returns the summaries best
/// first. Cells whose training fails are reported as errors.
pub fn grid_search(
    train_set: &Dataset,
    val_set: &Dataset,
    base: &TrainConfig,
    spec: &GridSpec,
) -> Result<Vec<CellSummary>> {
    let cells = grid_cells(spec, base.loss.kind, train_set.types.len())?;
    let run = |cell: &GridCell| -> Result<CellSummary> {
        let config = cell.apply(base);
        let out = train(train_set, Some(val_set), &config)?;
        let report = out.validation.expect("validation set given");
        let score = (report.all.map.unwrap_or(0.0) + report.all.f1) / 2.0;
        Ok(CellSummary {
            cell: cell.clone(),
            config,
            score,
            report,
        })
    };
    let results: Vec<Result<CellSummary>> = run_cells(&cells, spec.max_parallel, run)?;
    let mut summaries = results.into_iter().collect::<Result<Vec<_>>>()?;
    summaries.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.cell.index.cmp(&b.cell.index))
    });
    Ok(summaries)
}

#[cfg(feature = "parallel")]
fn run_cells<R: Send>(
    cells: &[GridCell],
    max_parallel: usize,
    f: impl Fn(&GridCell) -> R + Sync + Send,
) -> Result<Vec<R>> {
    use rayon::prelude::*;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(max_parallel)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(|| cells.par_iter().map(&f).collect()))
}

#[cfg(not(feature = "parallel"))]
fn run_cells<R>(
    cells: &[GridCell],
    _max_parallel: usize,
    f: impl Fn(&GridCell) -> R,
) -> Result<Vec<R>> {
    Ok(cells.iter().map(f).collect())
}
