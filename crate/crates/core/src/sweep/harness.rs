use std::fmt;
use std::fs;

use serde::{Deserialize, Serialize};

use super::config::{SweepConfig, Task};
use crate::attribution::{
    attribute, loss_gradients, random_seed_for, rank, AttributionMap, Method,
};
use crate::data::{load_splits, Dataset, Splits};
use crate::error::{Error, Result};
use crate::metrics::{self, EvalRecord};
use crate::model::{
    build_model, load_checkpoint, save_checkpoint, test_accuracy, train, Checkpoint, GradModel,
    Head, TrainConfig, TrainHistory, IMAGE_PIXELS,
};
use crate::occlusion::{Amount, Direction, OcclusionPlan, ReplacementStrategy};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Accuracy,
    Auroc,
}

impl Metric {
    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Accuracy => "accuracy",
            Metric::Auroc => "auroc",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One point of the grid. `direction` is `None` for the random method,
/// whose ranking carries no information, so its two ends are equivalent.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cell {
    pub method: Method,
    pub direction: Option<Direction>,
    pub fraction: f64,
    pub strategy: ReplacementStrategy,
}

impl Cell {
    pub fn new(
        method: Method,
        direction: Direction,
        fraction: f64,
        strategy: ReplacementStrategy,
    ) -> Self {
        Cell {
            method,
            direction: (method != Method::Random).then_some(direction),
            fraction,
            strategy,
        }
    }

    pub fn direction_label(&self) -> &'static str {
        self.direction.map_or("any", Direction::as_str)
    }

    pub fn plan(&self) -> OcclusionPlan {
        OcclusionPlan {
            amount: Amount::Fraction(self.fraction),
            direction: self.direction.unwrap_or(Direction::Highest),
            strategy: self.strategy,
        }
    }
}

/// Every cell of the configured grid, in export order.
pub fn grid(cfg: &SweepConfig) -> Vec<Cell> {
    let mut cells = Vec::new();
    for &strategy in &cfg.strategies {
        for &method in &cfg.methods {
            let directions: &[Direction] = if method == Method::Random {
                &cfg.directions[..1]
            } else {
                &cfg.directions
            };
            for &direction in directions {
                for &fraction in &cfg.fractions {
                    cells.push(Cell::new(method, direction, fraction, strategy));
                }
            }
        }
    }
    cells
}

/// Metric values of one evaluation of the test set.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CellScores {
    pub accuracy: f64,
    /// Only for binary tasks.
    pub auroc: Option<f64>,
}

impl CellScores {
    fn from_records(records: &[EvalRecord], binary: bool) -> Result<Self> {
        Ok(CellScores {
            accuracy: metrics::accuracy(records)?,
            auroc: if binary {
                Some(metrics::records_auroc(records)?)
            } else {
                None
            },
        })
    }

    pub fn metrics(&self) -> Vec<(Metric, f64)> {
        let mut out = vec![(Metric::Accuracy, self.accuracy)];
        out.extend(self.auroc.map(|v| (Metric::Auroc, v)));
        out
    }
}

/// One trained model and its test set, with the loss-gradient of every test
/// example computed once against the true label.
pub struct SeedEvaluator<'a> {
    model: &'a GradModel<f32>,
    test: &'a Dataset,
    seed: u32,
    gradients: Vec<f32>,
    batch: usize,
}

impl<'a> SeedEvaluator<'a> {
    pub fn new(
        model: &'a GradModel<f32>,
        test: &'a Dataset,
        seed: u32,
        batch: usize,
    ) -> Result<Self> {
        let batch = batch.max(1);
        let labels: Vec<usize> = test.labels().iter().map(|&l| l as usize).collect();
        let mut gradients = Vec::with_capacity(test.pixels().len());
        for (xs, ls) in test
            .pixels()
            .chunks(batch * IMAGE_PIXELS)
            .zip(labels.chunks(batch))
        {
            gradients.extend(loss_gradients(model, xs, ls)?);
        }
        Ok(SeedEvaluator {
            model,
            test,
            seed,
            gradients,
            batch,
        })
    }

    pub fn seed(&self) -> u32 {
        self.seed
    }

    pub fn gradient(&self, i: usize) -> &[f32] {
        &self.gradients[i * IMAGE_PIXELS..(i + 1) * IMAGE_PIXELS]
    }

    fn binary(&self) -> bool {
        self.model.head().label_count() == 2
    }

    pub fn attribution(&self, i: usize, method: Method) -> Result<AttributionMap<f32>> {
        let x = self.test.example(i).pixels;
        attribute(
            method,
            x,
            self.gradient(i),
            random_seed_for(self.seed as u64, i),
        )
    }

    /// Test example `i` after applying the cell's occlusion.
    pub fn occluded(&self, i: usize, cell: &Cell) -> Result<Vec<f32>> {
        let map = self.attribution(i, cell.method)?;
        cell.plan()
            .apply(self.test.example(i).pixels, &rank(&map), &self.test.stats)
    }

    fn evaluate(&self, mut inputs: impl FnMut(usize) -> Result<Vec<f32>>) -> Result<CellScores> {
        let n = self.test.len();
        let mut preds = Vec::with_capacity(n);
        let mut xs = Vec::with_capacity(self.batch * IMAGE_PIXELS);
        for start in (0..n).step_by(self.batch) {
            let end = (start + self.batch).min(n);
            xs.clear();
            for i in start..end {
                xs.extend(inputs(i)?);
            }
            preds.extend(self.model.predict_batch(&xs, end - start)?);
        }
        CellScores::from_records(&metrics::records(&preds, self.test.labels()), self.binary())
    }

    /// Scores on the unmodified test set.
    pub fn clean(&self) -> Result<CellScores> {
        self.evaluate(|i| Ok(self.test.example(i).pixels.to_vec()))
    }

    /// attribute, rank, select, occlude, then evaluate the whole test set.
    pub fn run_cell(&self, cell: &Cell) -> Result<CellScores> {
        self.evaluate(|i| self.occluded(i, cell))
    }
}

/// Scores of one cell for a single model, computing gradients from scratch.
pub fn run_cell(
    model: &GradModel<f32>,
    test: &Dataset,
    seed: u32,
    cell: &Cell,
) -> Result<CellScores> {
    SeedEvaluator::new(model, test, seed, 256)?.run_cell(cell)
}

/// One metric value of one cell for one seed. Clean-baseline rows use
/// method, direction and strategy `none` at fraction 0.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Record {
    pub task: Task,
    pub seed: u32,
    pub method: String,
    pub direction: String,
    pub fraction: f64,
    pub strategy: String,
    pub metric: Metric,
    pub value: f64,
}

impl Record {
    fn push_all(
        out: &mut Vec<Record>,
        task: Task,
        seed: u32,
        cell: Option<&Cell>,
        scores: &CellScores,
    ) {
        for (metric, value) in scores.metrics() {
            out.push(Record {
                task,
                seed,
                method: cell.map_or("none".into(), |c| c.method.to_string()),
                direction: cell.map_or("none", Cell::direction_label).into(),
                fraction: cell.map_or(0.0, |c| c.fraction),
                strategy: cell.map_or("none".into(), |c| c.strategy.to_string()),
                metric,
                value,
            });
        }
    }

    pub fn is_baseline(&self) -> bool {
        self.method == "none"
    }
}

/// Cross-seed statistics of one (cell, metric) pair.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Summary {
    pub task: Task,
    pub method: String,
    pub direction: String,
    pub fraction: f64,
    pub strategy: String,
    pub metric: Metric,
    pub mean: f64,
    /// Population standard deviation (divides by the number of seeds).
    pub std: f64,
    pub seeds: usize,
}

/// Groups records by cell and metric, in order of first appearance, and
/// averages each group over seeds taken in ascending order.
pub fn aggregate(records: &[Record]) -> Vec<Summary> {
    let mut groups: Vec<(&Record, Vec<(u32, f64)>)> = Vec::new();
    for r in records {
        let same = |g: &Record| {
            g.task == r.task
                && g.method == r.method
                && g.direction == r.direction
                && g.fraction.to_bits() == r.fraction.to_bits()
                && g.strategy == r.strategy
                && g.metric == r.metric
        };
        match groups.iter_mut().find(|(g, _)| same(g)) {
            Some((_, values)) => values.push((r.seed, r.value)),
            None => groups.push((r, vec![(r.seed, r.value)])),
        }
    }
    groups
        .into_iter()
        .map(|(key, mut values)| {
            values.sort_by_key(|&(seed, _)| seed);
            let n = values.len() as f64;
            let mean = values.iter().map(|&(_, v)| v).sum::<f64>() / n;
            let var = values
                .iter()
                .map(|&(_, v)| (v - mean) * (v - mean))
                .sum::<f64>()
                / n;
            Summary {
                task: key.task,
                method: key.method.clone(),
                direction: key.direction.clone(),
                fraction: key.fraction,
                strategy: key.strategy.clone(),
                metric: key.metric,
                mean,
                std: var.sqrt(),
                seeds: values.len(),
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepResult {
    pub records: Vec<Record>,
    pub summary: Vec<Summary>,
}

impl SweepResult {
    pub fn from_records(records: Vec<Record>) -> Self {
        let summary = aggregate(&records);
        SweepResult { records, summary }
    }

    /// Mean of one cell's metric, if it was part of the sweep.
    pub fn mean(&self, cell: &Cell, metric: Metric) -> Option<f64> {
        self.summary
            .iter()
            .find(|s| {
                s.method == cell.method.as_str()
                    && s.direction == cell.direction_label()
                    && s.fraction.to_bits() == cell.fraction.to_bits()
                    && s.strategy == cell.strategy.to_string()
                    && s.metric == metric
            })
            .map(|s| s.mean)
    }

    pub fn baseline_mean(&self, metric: Metric) -> Option<f64> {
        self.summary
            .iter()
            .find(|s| s.method == "none" && s.metric == metric)
            .map(|s| s.mean)
    }
}

/// What `train` records next to each checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub model: String,
    pub seed: u32,
    pub test_accuracy: f64,
    pub train_seconds: f64,
    pub history: TrainHistory,
}

pub fn load_task_splits(cfg: &SweepConfig) -> Result<Splits> {
    let mut splits = load_splits(&cfg.data_dir(), &cfg.task.digits(), cfg.normalization)?;
    if let Some(n) = cfg.test_limit {
        splits.test = splits.test.truncate(n);
    }
    Ok(splits)
}

/// Trains the model for `seed`, then saves its checkpoint and training record.
pub fn train_seed(
    cfg: &SweepConfig,
    seed: u32,
    splits: &Splits,
) -> Result<(GradModel<f32>, TrainRecord)> {
    let model = build_model::<f32>(cfg.architecture, cfg.task.outputs(), seed as u64)?;
    let train_cfg = TrainConfig {
        seed: seed as u64,
        ..cfg.train.clone()
    };
    let (model, history) = train(model, &splits.train, None, &train_cfg)?;
    let acc = test_accuracy(&model, &splits.test, cfg.eval_batch)?;
    save_checkpoint(
        &cfg.checkpoint_path(seed),
        &Checkpoint::from_model(&model, seed, acc),
    )?;
    let record = TrainRecord {
        model: model.id(),
        seed,
        test_accuracy: acc,
        train_seconds: history.total_seconds(),
        history,
    };
    let path = cfg.history_path(seed);
    fs::write(&path, serde_json::to_vec_pretty(&record)?).map_err(|e| Error::io(&path, e))?;
    Ok((model, record))
}

/// Loads the checkpoint for `seed`, training it first if it is missing and
/// the config allows that.
pub fn ensure_model(cfg: &SweepConfig, seed: u32, splits: &Splits) -> Result<GradModel<f32>> {
    let path = cfg.checkpoint_path(seed);
    match load_checkpoint(&path) {
        Ok(ckpt) => {
            let head = Head::for_classes(cfg.task.outputs())?;
            if ckpt.arch != cfg.architecture || ckpt.head != head || ckpt.seed != seed {
                return Err(Error::Config(format!(
                    "{} holds {}/{} seed {}, expected {}/{} seed {seed}",
                    path.display(),
                    ckpt.arch,
                    ckpt.head,
                    ckpt.seed,
                    cfg.architecture,
                    head
                )));
            }
            ckpt.to_model()
        }
        Err(Error::MissingCheckpoint(_)) if cfg.train_on_demand => {
            log::info!("no checkpoint at {}, training seed {seed}", path.display());
            Ok(train_seed(cfg, seed, splits)?.0)
        }
        Err(e) => Err(e),
    }
}

/// Runs every grid cell for every seed.
pub fn run_sweep(cfg: &SweepConfig) -> Result<SweepResult> {
    let splits = load_task_splits(cfg)?;
    run_sweep_on(cfg, &splits)
}

pub fn run_sweep_on(cfg: &SweepConfig, splits: &Splits) -> Result<SweepResult> {
    let cells = grid(cfg);
    let mut records = Vec::new();
    for seed in cfg.seed_list() {
        let model = ensure_model(cfg, seed, splits)?;
        let eval = SeedEvaluator::new(&model, &splits.test, seed, cfg.eval_batch)?;
        Record::push_all(&mut records, cfg.task, seed, None, &eval.clean()?);
        for cell in &cells {
            let scores = eval.run_cell(cell)?;
            log::info!(
                "seed {seed} {} {} {} {}: accuracy {:.4}",
                cell.method,
                cell.direction_label(),
                cell.fraction,
                cell.strategy,
                scores.accuracy
            );
            Record::push_all(&mut records, cfg.task, seed, Some(cell), &scores);
        }
    }
    Ok(SweepResult::from_records(records))
}
