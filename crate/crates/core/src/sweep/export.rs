use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::config::SweepConfig;
use super::harness::{Cell, Record, SeedEvaluator, Summary, SweepResult};
use crate::data::{Dataset, Normalization};
use crate::error::{Error, Result};
use crate::model::IMAGE_SIDE;
use crate::occlusion::Direction;
use crate::pgm::{minmax_scale, side_by_side, GrayImage};

pub const RECORDS_HEADER: &str = "task,seed,method,direction,fraction,strategy,metric,value";
pub const SUMMARY_HEADER: &str = "task,method,direction,fraction,strategy,metric,mean,std,seeds";

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub fn records_csv(records: &[Record]) -> String {
    let mut out = format!("{RECORDS_HEADER}\n");
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.task, r.seed, r.method, r.direction, r.fraction, r.strategy, r.metric, r.value
        );
    }
    out
}

pub fn summary_csv(summary: &[Summary]) -> String {
    let mut out = format!("{SUMMARY_HEADER}\n");
    for s in summary {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            s.task, s.method, s.direction, s.fraction, s.strategy, s.metric, s.mean, s.std, s.seeds
        );
    }
    out
}

pub fn export_csv(result: &SweepResult, path: &Path) -> Result<()> {
    write_file(path, records_csv(&result.records).as_bytes())
}

pub fn export_summary_csv(result: &SweepResult, path: &Path) -> Result<()> {
    write_file(path, summary_csv(&result.summary).as_bytes())
}

#[derive(Debug, Serialize)]
pub struct Manifest<'a> {
    pub version: &'static str,
    pub config_sha256: String,
    pub seeds: Vec<u32>,
    pub records: usize,
    pub config: &'a SweepConfig,
}

pub fn export_manifest(cfg: &SweepConfig, result: &SweepResult, path: &Path) -> Result<()> {
    let manifest = Manifest {
        version: env!("CARGO_PKG_VERSION"),
        config_sha256: cfg.hash(),
        seeds: cfg.seed_list(),
        records: result.records.len(),
        config: cfg,
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

/// Writes `results.csv`, `summary.csv` and `manifest.json` into the output
/// directory and returns their paths.
pub fn export_all(cfg: &SweepConfig, result: &SweepResult) -> Result<Vec<PathBuf>> {
    let dir = &cfg.paths.out_dir;
    let paths = vec![
        dir.join("results.csv"),
        dir.join("summary.csv"),
        dir.join("manifest.json"),
    ];
    export_csv(result, &paths[0])?;
    export_summary_csv(result, &paths[1])?;
    export_manifest(cfg, result, &paths[2])?;
    Ok(paths)
}

fn to_image(values: &[f32], norm: Normalization) -> Result<GrayImage> {
    GrayImage::new(
        IMAGE_SIDE,
        IMAGE_SIDE,
        values.iter().map(|&v| norm.invert(v)).collect(),
    )
}

/// For each example, writes a triptych (original, lowest occluded, highest
/// occluded) and the attribution map scaled to the full grey range.
pub fn export_images(
    eval: &SeedEvaluator<'_>,
    test: &Dataset,
    examples: &[usize],
    cell: &Cell,
    norm: Normalization,
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for &i in examples {
        if i >= test.len() {
            return Err(Error::Config(format!(
                "example {i} outside the test set of {}",
                test.len()
            )));
        }
        let panels = [
            to_image(test.example(i).pixels, norm)?,
            to_image(
                &eval.occluded(
                    i,
                    &Cell {
                        direction: Some(Direction::Lowest),
                        ..*cell
                    },
                )?,
                norm,
            )?,
            to_image(
                &eval.occluded(
                    i,
                    &Cell {
                        direction: Some(Direction::Highest),
                        ..*cell
                    },
                )?,
                norm,
            )?,
        ];
        let stem = format!(
            "seed{}-ex{i}-{}-{}-{}",
            eval.seed(),
            cell.method,
            cell.fraction,
            cell.strategy
        )
        .replace(':', "_");
        let triptych = dir.join(format!("{stem}.pgm"));
        side_by_side(&panels, 2)?.save(&triptych)?;

        let scores: Vec<f64> = eval
            .attribution(i, cell.method)?
            .scores
            .iter()
            .map(|&s| s as f64)
            .collect();
        let map = dir.join(format!("{stem}-map.pgm"));
        GrayImage::new(IMAGE_SIDE, IMAGE_SIDE, minmax_scale(&scores))?.save(&map)?;
        written.push(triptych);
        written.push(map);
    }
    Ok(written)
}
