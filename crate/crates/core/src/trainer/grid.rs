use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{train, LossMode, TrainSpec};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::{describe_test_split, evaluate_descriptors, EvalReport, Setting};
use crate::head::Variant;
use crate::model::ModelSpec;
use crate::seed;

pub const GRID_SCHEMA_VERSION: u32 = 1;

fn classification() -> LossMode {
    LossMode::Classification
}

/// One trained configuration of the grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellSpec {
    pub variant: Variant,
    pub n_c: usize,
    pub shared: bool,
    #[serde(default = "classification")]
    pub loss_mode: LossMode,
    #[serde(default)]
    pub label_noise: f64,
}

impl CellSpec {
    /// Variant B has a single branch whatever `n_c` says.
    fn normalized(mut self) -> Self {
        if self.variant == Variant::B {
            self.n_c = 1;
        }
        self
    }
}

/// Cartesian product of cell options.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProductSpec {
    pub variants: Vec<Variant>,
    pub n_c: Vec<usize>,
    pub shared: Vec<bool>,
    #[serde(default = "default_loss_modes")]
    pub loss_modes: Vec<LossMode>,
    #[serde(default = "default_noise")]
    pub label_noise: Vec<f64>,
}

fn default_loss_modes() -> Vec<LossMode> {
    vec![LossMode::Classification]
}

fn default_noise() -> Vec<f64> {
    vec![0.0]
}

fn default_settings() -> Vec<Setting> {
    vec![Setting::Standard]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    #[serde(default)]
    pub cells: Vec<CellSpec>,
    #[serde(default)]
    pub product: Option<ProductSpec>,
    pub seeds: Vec<u64>,
    /// Inference settings reported for every run; the first one is the headline.
    #[serde(default = "default_settings")]
    pub settings: Vec<Setting>,
}

impl Default for GridSpec {
    /// Variants A to E with eight groups and a shared embedding, three seeds.
    fn default() -> Self {
        Self {
            cells: Vec::new(),
            product: Some(ProductSpec {
                variants: Variant::ALL.to_vec(),
                n_c: vec![8],
                shared: vec![true],
                loss_modes: default_loss_modes(),
                label_noise: default_noise(),
            }),
            seeds: vec![0, 1, 2],
            settings: default_settings(),
        }
    }
}

impl GridSpec {
    /// Explicit cells followed by the product, normalized, duplicates dropped.
    pub fn expand(&self) -> Vec<CellSpec> {
        let mut all: Vec<CellSpec> = self.cells.clone();
        if let Some(p) = &self.product {
            for &variant in &p.variants {
                for &n_c in &p.n_c {
                    for &shared in &p.shared {
                        for &loss_mode in &p.loss_modes {
                            for &label_noise in &p.label_noise {
                                all.push(CellSpec {
                                    variant,
                                    n_c,
                                    shared,
                                    loss_mode,
                                    label_noise,
                                });
                            }
                        }
                    }
                }
            }
        }
        let mut out: Vec<CellSpec> = Vec::new();
        for c in all.into_iter().map(CellSpec::normalized) {
            if !out.contains(&c) {
                out.push(c);
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::InvalidSpec("the grid needs at least one seed".into()));
        }
        if self.settings.is_empty() {
            return Err(Error::InvalidSpec("the grid needs at least one inference setting".into()));
        }
        if self.expand().is_empty() {
            return Err(Error::InvalidSpec("the grid has no cells".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub seed: u64,
    /// One report per grid setting, in grid order.
    pub reports: Vec<EvalReport>,
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub setting: Setting,
    pub rank1_mean: f64,
    pub rank1_sd: f64,
    pub map_mean: f64,
    pub map_sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub cell: CellSpec,
    pub runs: Vec<RunResult>,
    pub summary: Vec<MetricSummary>,
}

impl CellResult {
    pub fn rank1_mean(&self) -> f64 {
        self.summary[0].rank1_mean
    }

    pub fn summary_for(&self, setting: Setting) -> Option<&MetricSummary> {
        self.summary.iter().find(|s| s.setting == setting)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub schema_version: u32,
    pub seeds: Vec<u64>,
    pub cells: Vec<CellResult>,
}

impl GridResult {
    pub fn find(&self, cell: &CellSpec) -> Option<&CellResult> {
        let c = cell.normalized();
        self.cells.iter().find(|r| r.cell == c)
    }
}

/// Mean and sample standard deviation.
fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// The model and training specs of one cell.
pub fn cell_specs(cell: &CellSpec, base_model: &ModelSpec, base_train: &TrainSpec) -> (ModelSpec, TrainSpec) {
    let mut model = base_model.clone();
    model.head.variant = cell.variant;
    model.head.n_c = cell.n_c;
    model.head.shared_embed = cell.shared;
    model.head = model.head.normalized();
    let mut train = base_train.clone();
    train.loss_mode = cell.loss_mode;
    train.label_noise = cell.label_noise;
    (model, train)
}

/// Trains and evaluates one cell with one seed.
pub fn run_cell(
    cell: &CellSpec,
    seed_value: u64,
    base_model: &ModelSpec,
    base_train: &TrainSpec,
    data: &Dataset,
    settings: &[Setting],
) -> Result<RunResult> {
    let (model_spec, mut train_spec) = cell_specs(cell, base_model, base_train);
    train_spec.seed = seed_value;
    let (model, log) = train(&model_spec, data, &train_spec, seed::derive(seed_value, "model"))?;
    let td = describe_test_split(&model, data)?;
    let reports = settings
        .iter()
        .map(|&s| evaluate_descriptors(&td, s, None))
        .collect::<Result<Vec<_>>>()?;
    Ok(RunResult {
        seed: seed_value,
        reports,
        final_loss: log.final_loss().unwrap_or(f64::NAN),
    })
}

/// Trains every cell once per seed on the same data and budget. Runs are
/// spread over `jobs` worker threads; the result does not depend on `jobs`.
pub fn compare_variants(
    grid: &GridSpec,
    base_model: &ModelSpec,
    base_train: &TrainSpec,
    data: &Dataset,
    jobs: usize,
) -> Result<GridResult> {
    grid.validate()?;
    let cells = grid.expand();
    let tasks: Vec<(usize, u64)> = (0..cells.len())
        .flat_map(|c| grid.seeds.iter().map(move |&s| (c, s)))
        .collect();
    let results: Mutex<Vec<Option<Result<RunResult>>>> = Mutex::new((0..tasks.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let workers = jobs.clamp(1, tasks.len());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let t = next.fetch_add(1, Ordering::Relaxed);
                let Some(&(c, s)) = tasks.get(t) else { break };
                let r = run_cell(&cells[c], s, base_model, base_train, data, &grid.settings);
                let failed = r.is_err();
                results.lock().expect("no worker panicked")[t] = Some(r);
                if failed {
                    // let the other workers drain quickly
                    next.store(tasks.len(), Ordering::Relaxed);
                }
            });
        }
    });
    let results = results.into_inner().expect("no worker panicked");
    if let Some(pos) = results.iter().position(|r| matches!(r, Some(Err(_)))) {
        if let Some(Some(Err(e))) = results.into_iter().nth(pos) {
            return Err(e);
        }
        unreachable!("position points at an error");
    }
    let mut runs = results.into_iter();
    let mut out = Vec::with_capacity(cells.len());
    for cell in cells {
        let mut cell_runs = Vec::with_capacity(grid.seeds.len());
        for _ in &grid.seeds {
            match runs.next().flatten() {
                Some(r) => cell_runs.push(r?),
                None => unreachable!("every task ran because none failed"),
            }
        }
        let summary = grid
            .settings
            .iter()
            .enumerate()
            .map(|(i, &setting)| {
                let r1: Vec<f64> = cell_runs.iter().map(|r| r.reports[i].rank1).collect();
                let map: Vec<f64> = cell_runs.iter().map(|r| r.reports[i].map).collect();
                let (rank1_mean, rank1_sd) = mean_sd(&r1);
                let (map_mean, map_sd) = mean_sd(&map);
                MetricSummary {
                    setting,
                    rank1_mean,
                    rank1_sd,
                    map_mean,
                    map_sd,
                }
            })
            .collect();
        out.push(CellResult {
            cell,
            runs: cell_runs,
            summary,
        });
    }
    Ok(GridResult {
        schema_version: GRID_SCHEMA_VERSION,
        seeds: grid.seeds.clone(),
        cells: out,
    })
}
