use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attribution::Method;
use crate::data::Normalization;
use crate::error::{Error, Result};
use crate::model::{Architecture, TrainConfig};
use crate::occlusion::{Direction, ReplacementStrategy};

pub const DEFAULT_FRACTIONS: [f64; 6] = [0.1, 0.3, 0.5, 0.7, 0.9, 0.9971];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Task {
    /// Digits 0 and 1, two-way log-softmax head.
    #[serde(rename = "mnist-2-logsoftmax")]
    Mnist2LogSoftmax,
    /// Digits 0 and 1, single sigmoid output.
    #[serde(rename = "mnist-2-sigmoid")]
    Mnist2Sigmoid,
    /// All ten digits.
    #[serde(rename = "mnist-10")]
    Mnist10,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Mnist2LogSoftmax, Task::Mnist2Sigmoid, Task::Mnist10];

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Mnist2LogSoftmax => "mnist-2-logsoftmax",
            Task::Mnist2Sigmoid => "mnist-2-sigmoid",
            Task::Mnist10 => "mnist-10",
        }
    }

    pub fn digits(self) -> Vec<u8> {
        match self {
            Task::Mnist2LogSoftmax | Task::Mnist2Sigmoid => vec![0, 1],
            Task::Mnist10 => (0..10).collect(),
        }
    }

    /// Model outputs: 1 selects the sigmoid head.
    pub fn outputs(self) -> usize {
        match self {
            Task::Mnist2LogSoftmax => 2,
            Task::Mnist2Sigmoid => 1,
            Task::Mnist10 => 10,
        }
    }

    pub fn is_binary(self) -> bool {
        self != Task::Mnist10
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown task '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Directory holding the four MNIST IDX files.
    pub data_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
    /// Defaults to `<out_dir>/checkpoints`.
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            data_dir: None,
            out_dir: PathBuf::from("out"),
            checkpoint_dir: None,
        }
    }
}

/// Which examples `render` draws and how they are occluded.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderConfig {
    pub examples: usize,
    pub method: Method,
    pub fraction: f64,
    pub strategy: ReplacementStrategy,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            examples: 8,
            method: Method::GradOrig,
            fraction: 0.5,
            strategy: ReplacementStrategy::DatasetMean,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub task: Task,
    pub architecture: Architecture,
    /// Number of models; seeds are `first_seed..first_seed + seeds`.
    pub seeds: u32,
    pub first_seed: u32,
    pub methods: Vec<Method>,
    pub directions: Vec<Direction>,
    pub fractions: Vec<f64>,
    pub strategies: Vec<ReplacementStrategy>,
    pub normalization: Normalization,
    /// `seed` is ignored; each model trains with its own seed.
    pub train: TrainConfig,
    /// Train and save any missing checkpoint instead of failing.
    pub train_on_demand: bool,
    /// Evaluate only the first N test examples.
    pub test_limit: Option<usize>,
    pub eval_batch: usize,
    pub render: RenderConfig,
    pub paths: Paths,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            task: Task::Mnist2LogSoftmax,
            architecture: Architecture::CnnRef,
            seeds: 5,
            first_seed: 0,
            methods: Method::ALL.to_vec(),
            directions: vec![Direction::Lowest, Direction::Highest],
            fractions: DEFAULT_FRACTIONS.to_vec(),
            strategies: vec![ReplacementStrategy::DatasetMean],
            normalization: Normalization::default(),
            train: TrainConfig::default(),
            train_on_demand: false,
            test_limit: None,
            eval_batch: 256,
            render: RenderConfig::default(),
            paths: Paths::default(),
        }
    }
}

impl SweepConfig {
    pub fn for_task(task: Task) -> Self {
        SweepConfig {
            task,
            ..SweepConfig::default()
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: SweepConfig = serde_json::from_str(text)?;
        cfg.validate()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        SweepConfig::from_json(&text)
    }

    pub fn validate(self) -> Result<Self> {
        let empty = |what: &str| Error::Config(format!("'{what}' must not be empty"));
        if self.seeds == 0 {
            return Err(empty("seeds"));
        }
        if self.methods.is_empty() {
            return Err(empty("methods"));
        }
        if self.directions.is_empty() {
            return Err(empty("directions"));
        }
        if self.fractions.is_empty() {
            return Err(empty("fractions"));
        }
        if self.strategies.is_empty() {
            return Err(empty("strategies"));
        }
        if let Some(p) = self.fractions.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::Config(format!(
                "occlusion fraction {p} outside [0, 1]"
            )));
        }
        for s in &self.strategies {
            s.validate()?;
        }
        if self.eval_batch == 0 {
            return Err(Error::Config("eval_batch must be positive".into()));
        }
        if self.test_limit == Some(0) {
            return Err(Error::Config("test_limit must be positive".into()));
        }
        Ok(self)
    }

    pub fn seed_list(&self) -> Vec<u32> {
        (0..self.seeds).map(|i| self.first_seed + i).collect()
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.paths
            .checkpoint_dir
            .clone()
            .unwrap_or_else(|| self.paths.out_dir.join("checkpoints"))
    }

    pub fn checkpoint_path(&self, seed: u32) -> PathBuf {
        self.checkpoint_dir().join(format!(
            "{}-{}-seed{seed}.ocbn",
            self.task, self.architecture
        ))
    }

    /// Training record written next to each checkpoint.
    pub fn history_path(&self, seed: u32) -> PathBuf {
        self.checkpoint_path(seed).with_extension("train.json")
    }

    /// Resolves the data directory: config, then `OCCBENCH_DATA`, then `data/mnist`.
    pub fn data_dir(&self) -> PathBuf {
        self.paths
            .data_dir
            .clone()
            .or_else(|| std::env::var_os("OCCBENCH_DATA").map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("data/mnist"))
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_partial_json() {
        let cfg = SweepConfig::from_json(r#"{"task": "mnist-10", "seeds": 2}"#).unwrap();
        assert_eq!(cfg.task, Task::Mnist10);
        assert_eq!(cfg.seed_list(), vec![0, 1]);
        assert_eq!(cfg.fractions, DEFAULT_FRACTIONS.to_vec());
        assert_eq!(cfg.methods.len(), 4);
    }

    #[test]
    fn json_round_trip() {
        let mut cfg = SweepConfig::for_task(Task::Mnist2Sigmoid);
        cfg.strategies = vec![
            ReplacementStrategy::InputMax,
            ReplacementStrategy::Constant(-0.5),
        ];
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(SweepConfig::from_json(&text).unwrap(), cfg);
    }

    #[test]
    fn invalid_configs() {
        for bad in [
            r#"{"seeds": 0}"#,
            r#"{"methods": []}"#,
            r#"{"fractions": [1.5]}"#,
            r#"{"task": "cifar"}"#,
            r#"{"colour": "blue"}"#,
        ] {
            assert!(SweepConfig::from_json(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn hash_tracks_content() {
        let a = SweepConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.fractions.push(0.2);
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn checkpoint_names() {
        let cfg = SweepConfig::for_task(Task::Mnist2Sigmoid);
        assert_eq!(
            cfg.checkpoint_path(3),
            PathBuf::from("out/checkpoints/mnist-2-sigmoid-cnn-ref-seed3.ocbn")
        );
        assert_eq!(
            cfg.history_path(3),
            PathBuf::from("out/checkpoints/mnist-2-sigmoid-cnn-ref-seed3.train.json")
        );
    }
}
