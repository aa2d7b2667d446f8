//! `occbench` command line: train, sweep, render, gradcheck, selftest.
//!
//! Settings come from an optional JSON config (`--config`), then the named
//! flags, then dotted overrides such as `--train.epochs=2` or
//! `--paths.checkpoint_dir=ckpt`, which address any field of the config.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::Value;

use crate::attribution::Method;
use crate::error::{Error, Result};
use crate::occlusion::{Direction, ReplacementStrategy};
use crate::sweep::{
    ensure_model, export_all, export_images, load_task_splits, run_sweep_on, train_seed, Cell,
    SeedEvaluator, SweepConfig, Task,
};
use crate::verify;

/// Exit status of a run whose checks failed.
pub const EXIT_CHECK_FAILED: i32 = 1;
/// Exit status for missing files, bad configs and other input problems.
pub const EXIT_INPUT_ERROR: i32 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DirectionArg {
    Highest,
    Lowest,
    Both,
}

#[derive(Debug, Parser)]
#[command(
    name = "occbench",
    version,
    about = "Occlusion benchmark for loss-gradient attributions"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// JSON sweep configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Directory with the MNIST IDX files (falls back to OCCBENCH_DATA).
    #[arg(long, global = true)]
    pub data_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    /// Number of models (seeds 0..N unless first_seed is overridden).
    #[arg(long, global = true)]
    pub seeds: Option<u32>,
    #[arg(long, global = true, value_parser = parse_with::<Task>)]
    pub task: Option<Task>,
    #[arg(long, global = true, value_delimiter = ',', value_parser = parse_with::<Method>)]
    pub methods: Option<Vec<Method>>,
    #[arg(long, global = true, value_delimiter = ',')]
    pub fractions: Option<Vec<f64>>,
    /// dataset_mean, input_min, input_max or constant:<value>.
    #[arg(long, global = true, value_delimiter = ',', value_parser = parse_with::<ReplacementStrategy>)]
    pub strategies: Option<Vec<ReplacementStrategy>>,
    #[arg(long, global = true, value_enum)]
    pub direction: Option<DirectionArg>,
    /// Train missing checkpoints instead of failing.
    #[arg(long, global = true)]
    pub train_on_demand: bool,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    pub verbose: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one model per seed and report test accuracy.
    Train,
    /// Run the occlusion grid and write CSV results and a manifest.
    Sweep,
    /// Write PGM triptychs and attribution maps for a few test examples.
    Render,
    /// Compare input gradients of a trained model against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        sample_seed: u64,
    },
    /// Metric oracle and property checks; needs no data.
    Selftest {
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn parse_with<T: std::str::FromStr<Err = Error>>(s: &str) -> std::result::Result<T, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Dotted `key.path` and value pairs from the command line.
pub type Overrides = Vec<(String, String)>;

/// Splits `--a.b=value` and `--a.b value` arguments out of `args`.
pub fn split_dotted(args: Vec<OsString>) -> Result<(Vec<OsString>, Overrides)> {
    let mut plain = Vec::with_capacity(args.len());
    let mut dotted = Vec::new();
    let mut iter = args.into_iter();
    while let Some(arg) = iter.next() {
        let text = arg.to_string_lossy();
        let Some(body) = text.strip_prefix("--") else {
            plain.push(arg);
            continue;
        };
        let (key, value) = match body.split_once('=') {
            Some((k, v)) => (k.to_string(), Some(v.to_string())),
            None => (body.to_string(), None),
        };
        if !key.contains('.') {
            plain.push(arg);
            continue;
        }
        let value = match value {
            Some(v) => v,
            None => iter
                .next()
                .map(|v| v.to_string_lossy().into_owned())
                .ok_or_else(|| Error::Config(format!("--{key} needs a value")))?,
        };
        dotted.push((key, value));
    }
    Ok((plain, dotted))
}

/// Sets `path` (dot separated) inside `root`. The value is read as JSON when
/// it parses, otherwise as a string.
pub fn apply_override(root: &mut Value, path: &str, raw: &str) -> Result<()> {
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let mut parts = path.split('.').peekable();
    while let Some(part) = parts.next() {
        let obj = node.as_object_mut().ok_or_else(|| {
            Error::Config(format!(
                "override '{path}': '{part}' is not inside an object"
            ))
        })?;
        if parts.peek().is_none() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
        if node.is_null() {
            *node = Value::Object(Default::default());
        }
    }
    Err(Error::Config(format!("empty override path '{path}'")))
}

/// Builds the effective config from file, flags and dotted overrides.
pub fn resolve_config(cli: &Cli, dotted: &[(String, String)]) -> Result<SweepConfig> {
    let mut cfg = match &cli.config {
        Some(path) => SweepConfig::load(path)?,
        None => SweepConfig::default(),
    };
    if let Some(task) = cli.task {
        cfg.task = task;
    }
    if let Some(dir) = &cli.data_dir {
        cfg.paths.data_dir = Some(dir.clone());
    }
    if let Some(dir) = &cli.out_dir {
        cfg.paths.out_dir = dir.clone();
    }
    if let Some(n) = cli.seeds {
        cfg.seeds = n;
    }
    if let Some(m) = &cli.methods {
        cfg.methods = m.clone();
    }
    if let Some(f) = &cli.fractions {
        cfg.fractions = f.clone();
    }
    if let Some(s) = &cli.strategies {
        cfg.strategies = s.clone();
    }
    if let Some(d) = cli.direction {
        cfg.directions = match d {
            DirectionArg::Highest => vec![Direction::Highest],
            DirectionArg::Lowest => vec![Direction::Lowest],
            DirectionArg::Both => vec![Direction::Lowest, Direction::Highest],
        };
    }
    if cli.train_on_demand {
        cfg.train_on_demand = true;
    }
    if dotted.is_empty() {
        return cfg.validate();
    }
    let mut tree = serde_json::to_value(&cfg)?;
    for (key, value) in dotted {
        apply_override(&mut tree, key, value)?;
    }
    serde_json::from_value::<SweepConfig>(tree)?.validate()
}

fn report_failure(check: &str, detail: &str) {
    let line = serde_json::json!({ "status": "fail", "check": check, "detail": detail });
    eprintln!("{line}");
}

fn cmd_train(cfg: &SweepConfig) -> Result<i32> {
    let splits = load_task_splits(cfg)?;
    let mut accs = Vec::new();
    for seed in cfg.seed_list() {
        let (_, record) = train_seed(cfg, seed, &splits)?;
        println!(
            "{} seed {seed}: test accuracy {:.5} ({:.1}s) -> {}",
            cfg.task,
            record.test_accuracy,
            record.train_seconds,
            cfg.checkpoint_path(seed).display()
        );
        accs.push(record.test_accuracy);
    }
    println!(
        "{} mean test accuracy {:.5} over {} seeds",
        cfg.task,
        accs.iter().sum::<f64>() / accs.len() as f64,
        accs.len()
    );
    Ok(0)
}

fn cmd_sweep(cfg: &SweepConfig) -> Result<i32> {
    let splits = load_task_splits(cfg)?;
    let result = run_sweep_on(cfg, &splits)?;
    for s in &result.summary {
        println!(
            "{:<10} {:<8} {:<7} {:<14} {:<9} {:.4} +- {:.4}",
            s.method, s.direction, s.fraction, s.strategy, s.metric, s.mean, s.std
        );
    }
    for path in export_all(cfg, &result)? {
        println!("wrote {}", path.display());
    }
    Ok(0)
}

fn cmd_render(cfg: &SweepConfig) -> Result<i32> {
    let splits = load_task_splits(cfg)?;
    let seed = cfg.first_seed;
    let model = ensure_model(cfg, seed, &splits)?;
    let eval = SeedEvaluator::new(&model, &splits.test, seed, cfg.eval_batch)?;
    let r = &cfg.render;
    let cell = Cell::new(r.method, Direction::Highest, r.fraction, r.strategy);
    let examples: Vec<usize> = (0..r.examples.min(splits.test.len())).collect();
    let dir = cfg.paths.out_dir.join("images");
    for path in export_images(
        &eval,
        &splits.test,
        &examples,
        &cell,
        cfg.normalization,
        &dir,
    )? {
        println!("wrote {}", path.display());
    }
    Ok(0)
}

fn cmd_gradcheck(cfg: &SweepConfig, samples: usize, sample_seed: u64) -> Result<i32> {
    let splits = load_task_splits(cfg)?;
    let model = ensure_model(cfg, cfg.first_seed, &splits)?;
    let check = verify::gradient_check(
        &model,
        splits.test.pixels(),
        splits.test.labels(),
        samples,
        sample_seed,
    )?;
    println!(
        "gradcheck {} seed {}: {} inputs, {} coordinates compared, {} excluded at kinks",
        cfg.task,
        cfg.first_seed,
        check.examples.len(),
        check.compared,
        check.excluded
    );
    println!(
        "max relative error {:e} (tolerance {:e})",
        check.max_rel_error,
        verify::GRADCHECK_TOLERANCE
    );
    if let Some(e) = check.identity_error {
        println!(
            "log-softmax/NLL identity error {e:e} (tolerance {:e})",
            verify::IDENTITY_TOLERANCE
        );
    }
    if check.passed() {
        Ok(0)
    } else {
        report_failure("gradcheck", &serde_json::to_string(&check)?);
        Ok(EXIT_CHECK_FAILED)
    }
}

fn cmd_selftest(trials: usize, seed: u64) -> Result<i32> {
    let mut code = 0;
    for outcome in verify::selftest(trials, seed)? {
        println!(
            "{} {}: {}",
            if outcome.passed { "PASS" } else { "FAIL" },
            outcome.check,
            outcome.detail
        );
        if !outcome.passed {
            report_failure(&outcome.check, &outcome.detail);
            code = EXIT_CHECK_FAILED;
        }
    }
    Ok(code)
}

pub fn run(cli: &Cli, dotted: &[(String, String)]) -> Result<i32> {
    let cfg = resolve_config(cli, dotted)?;
    log::debug!("config {}", serde_json::to_string(&cfg)?);
    match &cli.command {
        Command::Train => cmd_train(&cfg),
        Command::Sweep => cmd_sweep(&cfg),
        Command::Render => cmd_render(&cfg),
        Command::Gradcheck {
            samples,
            sample_seed,
        } => cmd_gradcheck(&cfg, *samples, *sample_seed),
        Command::Selftest { trials, seed } => cmd_selftest(*trials, *seed),
    }
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn main_with_args(args: impl IntoIterator<Item = OsString>) -> i32 {
    let outcome = split_dotted(args.into_iter().collect()).and_then(|(plain, dotted)| {
        let cli = match Cli::try_parse_from(plain) {
            Ok(cli) => cli,
            Err(e) => {
                let _ = e.print();
                return Ok(if e.use_stderr() { EXIT_INPUT_ERROR } else { 0 });
            }
        };
        let level = if cli.verbose { "info" } else { "warn" };
        let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
            .try_init();
        run(&cli, &dotted)
    });
    match outcome {
        Ok(code) => code,
        Err(e) => {
            let kind = if e.is_input_error() {
                "input"
            } else {
                "runtime"
            };
            eprintln!(
                "{}",
                serde_json::json!({ "status": "error", "kind": kind, "message": e.to_string() })
            );
            if e.is_input_error() {
                EXIT_INPUT_ERROR
            } else {
                EXIT_CHECK_FAILED
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(list: &[&str]) -> Vec<OsString> {
        list.iter().map(OsString::from).collect()
    }

    fn config_for(list: &[&str]) -> Result<SweepConfig> {
        let (plain, dotted) = split_dotted(args(list))?;
        let cli = Cli::try_parse_from(plain).map_err(|e| Error::Config(e.to_string()))?;
        resolve_config(&cli, &dotted)
    }

    #[test]
    fn dotted_arguments_are_split_out() {
        let (plain, dotted) = split_dotted(args(&[
            "occbench",
            "sweep",
            "--train.epochs=2",
            "--paths.out_dir",
            "x",
            "--seeds",
            "1",
        ]))
        .unwrap();
        assert_eq!(plain, args(&["occbench", "sweep", "--seeds", "1"]));
        assert_eq!(
            dotted,
            vec![
                ("train.epochs".into(), "2".into()),
                ("paths.out_dir".into(), "x".into())
            ]
        );
    }

    #[test]
    fn flags_and_overrides_reach_the_config() {
        let cfg = config_for(&[
            "occbench",
            "sweep",
            "--task",
            "mnist-10",
            "--seeds",
            "2",
            "--methods",
            "grad_orig,random",
            "--fractions",
            "0.5,0.9",
            "--strategies",
            "input_max,constant:0.25",
            "--direction",
            "lowest",
            "--train.epochs=1",
            "--train.learning_rate",
            "0.05",
            "--paths.checkpoint_dir=ck",
        ])
        .unwrap();
        assert_eq!(cfg.task, Task::Mnist10);
        assert_eq!(cfg.seed_list(), vec![0, 1]);
        assert_eq!(cfg.methods, vec![Method::GradOrig, Method::Random]);
        assert_eq!(cfg.fractions, vec![0.5, 0.9]);
        assert_eq!(cfg.strategies[1], ReplacementStrategy::Constant(0.25));
        assert_eq!(cfg.directions, vec![Direction::Lowest]);
        assert_eq!(cfg.train.epochs, 1);
        assert_eq!(cfg.train.learning_rate, 0.05);
        assert_eq!(cfg.checkpoint_dir(), PathBuf::from("ck"));
    }

    #[test]
    fn bad_input_is_rejected() {
        assert!(config_for(&["occbench", "sweep", "--train.epochz=1"]).is_err());
        assert!(config_for(&["occbench", "sweep", "--fractions", "2"]).is_err());
        assert!(config_for(&["occbench", "sweep", "--methods", "saliency"]).is_err());
        assert!(config_for(&["occbench", "explode"]).is_err());
    }

    #[test]
    fn override_paths() {
        let mut v = serde_json::json!({"a": {"b": 1}, "c": null});
        apply_override(&mut v, "a.b", "[1,2]").unwrap();
        apply_override(&mut v, "c.d", "text").unwrap();
        assert_eq!(
            v,
            serde_json::json!({"a": {"b": [1, 2]}, "c": {"d": "text"}})
        );
        assert!(apply_override(&mut v, "a.b.x", "1").is_err());
    }
}
