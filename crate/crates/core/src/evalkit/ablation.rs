use std::fmt::Write as _;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::fedloop::{run_pipeline, Anchoring};
use crate::gsd::{MetadataSetting, ScopeKind};
use crate::synthdata::generate_federation;

/// Named ablation grids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grid {
    Components,
    Anchoring,
    Scope,
    Metadata,
    Tokens,
    LambdaC3,
}

impl Grid {
    pub const ALL: [Grid; 6] =
        [Grid::Components, Grid::Anchoring, Grid::Scope, Grid::Metadata, Grid::Tokens, Grid::LambdaC3];

    pub fn name(self) -> &'static str {
        match self {
            Grid::Components => "components",
            Grid::Anchoring => "anchoring",
            Grid::Scope => "scope",
            Grid::Metadata => "metadata",
            Grid::Tokens => "tokens",
            Grid::LambdaC3 => "lambda_c3",
        }
    }

    /// Cell configurations derived from `base`; each differs from `base` only
    /// in the switch the grid varies.
    pub fn cells(self, base: &ExperimentConfig) -> Vec<AblationCell> {
        let cell = |name: &str, f: &dyn Fn(&mut ExperimentConfig)| {
            let mut config = base.clone();
            f(&mut config);
            AblationCell { name: name.to_string(), config }
        };
        match self {
            Grid::Components => vec![
                cell("baseline", &|c| {
                    c.csa.enabled = false;
                    c.gsd.enabled = false;
                }),
                cell("csa_only", &|c| {
                    c.csa.enabled = true;
                    c.gsd.enabled = false;
                }),
                cell("gsd_only", &|c| {
                    c.csa.enabled = false;
                    c.gsd.enabled = true;
                }),
                cell("full", &|c| {
                    c.csa.enabled = true;
                    c.gsd.enabled = true;
                }),
            ],
            Grid::Anchoring => vec![
                cell("static", &|c| c.fed.anchoring = Anchoring::Static),
                cell("dynamic", &|c| c.fed.anchoring = Anchoring::Dynamic),
            ],
            Grid::Scope => vec![
                cell("global", &|c| c.gsd.scope = ScopeKind::Global),
                cell("local", &|c| c.gsd.scope = ScopeKind::Local),
                cell("random_stat", &|c| c.gsd.scope = ScopeKind::RandomStat),
            ],
            Grid::Metadata => vec![
                cell("clean", &|c| c.gsd.metadata = MetadataSetting::Clean),
                cell("corrupt", &|c| c.gsd.metadata = MetadataSetting::Corrupt),
                cell("pseudo_group", &|c| c.gsd.metadata = MetadataSetting::PseudoGroup),
            ],
            Grid::Tokens => [1, 4, 8, 16].into_iter().map(|l| cell(&format!("L={l}"), &|c| c.csa.tokens = l)).collect(),
            Grid::LambdaC3 => [0.0, 0.1, 0.2, 0.5]
                .into_iter()
                .map(|w| cell(&format!("lambda_c3={w}"), &|c| c.csa.lambda_c3 = w))
                .collect(),
        }
    }
}

impl FromStr for Grid {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Grid::ALL.into_iter().find(|g| g.name() == s).ok_or_else(|| {
            Error::Config(format!(
                "unknown grid `{s}`; expected one of components, anchoring, scope, metadata, tokens, lambda_c3"
            ))
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationCell {
    pub name: String,
    pub config: ExperimentConfig,
}

/// Final target metrics of one `(cell, seed)` run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRun {
    pub cell: String,
    pub seed: u64,
    pub map: f64,
    pub rank1: f64,
    pub same_id_distance: f64,
    pub diff_id_distance: f64,
}

/// Data and initialization depend on `seed` alone, so runs of different
/// cells with the same seed are paired.
pub fn run_cell(name: &str, config: &ExperimentConfig, seed: u64) -> Result<CellRun> {
    let ds = generate_federation(&config.data, config.protocol, seed)?;
    let (_, outcome) = run_pipeline(&ds, config, seed)?;
    let n = outcome.final_metrics.len() as f64;
    let avg = |f: &dyn Fn(&crate::evalkit::EvalMetrics) -> f64| outcome.final_metrics.iter().map(f).sum::<f64>() / n;
    Ok(CellRun {
        cell: name.to_string(),
        seed,
        map: avg(&|m| m.map),
        rank1: avg(&|m| m.rank1),
        same_id_distance: avg(&|m| m.same_id_distance),
        diff_id_distance: avg(&|m| m.diff_id_distance),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub cell: String,
    pub seeds: usize,
    pub map_mean: f64,
    pub map_std: f64,
    pub rank1_mean: f64,
    pub rank1_std: f64,
    pub same_id_distance: f64,
    pub diff_id_distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub grid: String,
    pub rows: Vec<AblationRow>,
    pub runs: Vec<CellRun>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 { xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (m, var.sqrt())
}

impl AblationTable {
    pub fn from_runs(grid: &str, cells: &[String], runs: Vec<CellRun>) -> Self {
        let rows = cells
            .iter()
            .map(|c| {
                let mine: Vec<&CellRun> = runs.iter().filter(|r| &r.cell == c).collect();
                let (map_mean, map_std) = mean_std(&mine.iter().map(|r| r.map).collect::<Vec<_>>());
                let (rank1_mean, rank1_std) = mean_std(&mine.iter().map(|r| r.rank1).collect::<Vec<_>>());
                AblationRow {
                    cell: c.clone(),
                    seeds: mine.len(),
                    map_mean,
                    map_std,
                    rank1_mean,
                    rank1_std,
                    same_id_distance: mean_std(&mine.iter().map(|r| r.same_id_distance).collect::<Vec<_>>()).0,
                    diff_id_distance: mean_std(&mine.iter().map(|r| r.diff_id_distance).collect::<Vec<_>>()).0,
                }
            })
            .collect();
        Self { grid: grid.to_string(), rows, runs }
    }

    pub fn row(&self, cell: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.cell == cell)
    }

    pub fn to_csv(&self) -> String {
        let mut s =
            String::from("grid,cell,seeds,map_mean,map_std,rank1_mean,rank1_std,same_id_distance,diff_id_distance\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
                self.grid,
                r.cell,
                r.seeds,
                r.map_mean,
                r.map_std,
                r.rank1_mean,
                r.rank1_std,
                r.same_id_distance,
                r.diff_id_distance
            );
        }
        s
    }

    /// One line per `(cell, seed)` run.
    pub fn runs_csv(&self) -> String {
        let mut s = String::from("grid,cell,seed,map,rank1,same_id_distance,diff_id_distance\n");
        for r in &self.runs {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                self.grid, r.cell, r.seed, r.map, r.rank1, r.same_id_distance, r.diff_id_distance
            );
        }
        s
    }

    /// Aligned columns, percentages for the retrieval metrics.
    pub fn to_text(&self) -> String {
        let w = self.rows.iter().map(|r| r.cell.len()).max().unwrap_or(4).max(4);
        let mut s = format!("{:<w$}  {:>15}  {:>15}  {:>7}  {:>7}\n", "cell", "mAP", "rank-1", "d_same", "d_diff");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<w$}  {:>7.2} ± {:<5.2}  {:>7.2} ± {:<5.2}  {:>7.4}  {:>7.4}",
                r.cell,
                100.0 * r.map_mean,
                100.0 * r.map_std,
                100.0 * r.rank1_mean,
                100.0 * r.rank1_std,
                r.same_id_distance,
                r.diff_id_distance
            );
        }
        s
    }
}

/// Runs every cell of `grid` for every seed; cells and seeds fan out over the
/// rayon pool.
pub fn ablation_harness(base: &ExperimentConfig, grid: Grid, seeds: &[u64]) -> Result<AblationTable> {
    if seeds.len() < 3 {
        return Err(Error::InvalidArgument("ablation needs at least 3 seeds".into()));
    }
    let cells = grid.cells(base);
    for c in &cells {
        c.config.validate()?;
    }
    let jobs: Vec<(&AblationCell, u64)> = cells.iter().flat_map(|c| seeds.iter().map(move |&s| (c, s))).collect();
    let runs = jobs.par_iter().map(|(c, s)| run_cell(&c.name, &c.config, *s)).collect::<Result<Vec<_>>>()?;
    let names: Vec<String> = cells.iter().map(|c| c.name.clone()).collect();
    Ok(AblationTable::from_runs(grid.name(), &names, runs))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grids_parse_and_size() {
        let base = ExperimentConfig::default();
        let sizes: Vec<usize> = Grid::ALL.iter().map(|g| g.cells(&base).len()).collect();
        assert_eq!(sizes, vec![4, 2, 3, 3, 4, 4]);
        for g in Grid::ALL {
            assert_eq!(g.name().parse::<Grid>().unwrap(), g);
        }
        assert!("colour".parse::<Grid>().is_err());
    }

    #[test]
    fn anchoring_cells_differ_only_in_anchoring() {
        let base = ExperimentConfig::default();
        let cells = Grid::Anchoring.cells(&base);
        let mut a = cells[0].config.clone();
        a.fed.anchoring = cells[1].config.fed.anchoring;
        assert_eq!(a, cells[1].config);
        assert_ne!(cells[0].config, cells[1].config);
    }

    #[test]
    fn sample_std() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn too_few_seeds() {
        assert!(ablation_harness(&ExperimentConfig::default(), Grid::Scope, &[0, 1]).is_err());
    }
}
