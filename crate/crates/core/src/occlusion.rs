use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attribution::RankOrder;
use crate::autograd::Element;
use crate::data::DatasetStats;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// Occlude the top of the ranking.
    Highest,
    /// Occlude the bottom of the ranking.
    Lowest,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Highest => "highest",
            Direction::Lowest => "lowest",
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "highest" => Ok(Direction::Highest),
            "lowest" => Ok(Direction::Lowest),
            other => Err(Error::Config(format!("unknown direction '{other}'"))),
        }
    }
}

/// Value written into occluded features.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum ReplacementStrategy {
    /// Global scalar mean of the training pixels.
    DatasetMean,
    /// Smallest feature of the input being occluded.
    InputMin,
    /// Largest feature of the input being occluded.
    InputMax,
    Constant(f64),
}

impl ReplacementStrategy {
    pub fn validate(self) -> Result<Self> {
        match self {
            ReplacementStrategy::Constant(v) if !v.is_finite() => Err(Error::Config(format!(
                "constant replacement {v} is not finite"
            ))),
            s => Ok(s),
        }
    }
}

impl fmt::Display for ReplacementStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ReplacementStrategy::DatasetMean => f.write_str("dataset_mean"),
            ReplacementStrategy::InputMin => f.write_str("input_min"),
            ReplacementStrategy::InputMax => f.write_str("input_max"),
            ReplacementStrategy::Constant(v) => write!(f, "constant:{v}"),
        }
    }
}

impl TryFrom<String> for ReplacementStrategy {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<ReplacementStrategy> for String {
    fn from(s: ReplacementStrategy) -> String {
        s.to_string()
    }
}

impl FromStr for ReplacementStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dataset_mean" | "mean" => Ok(ReplacementStrategy::DatasetMean),
            "input_min" | "min" => Ok(ReplacementStrategy::InputMin),
            "input_max" | "max" => Ok(ReplacementStrategy::InputMax),
            other => {
                let value = other
                    .strip_prefix("constant:")
                    .and_then(|v| v.parse::<f64>().ok())
                    .ok_or_else(|| {
                        Error::Config(format!("unknown replacement strategy '{other}'"))
                    })?;
                ReplacementStrategy::Constant(value).validate()
            }
        }
    }
}

/// How many features to occlude: a fraction of all features or an exact count.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Amount {
    Fraction(f64),
    Count(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OcclusionPlan {
    pub amount: Amount,
    pub direction: Direction,
    pub strategy: ReplacementStrategy,
}

impl OcclusionPlan {
    /// Number of features this plan occludes out of `n`.
    pub fn count(&self, n: usize) -> Result<usize> {
        let k = match self.amount {
            Amount::Fraction(p) => resolve_count(p, n)?,
            Amount::Count(k) => k,
        };
        if k > n {
            return Err(Error::CountTooLarge { k, n });
        }
        Ok(k)
    }

    /// Occludes `x` according to `order`.
    pub fn apply<T: Element>(
        &self,
        x: &[T],
        order: &RankOrder,
        stats: &DatasetStats,
    ) -> Result<Vec<T>> {
        let k = self.count(x.len())?;
        let indices = select_indices(order, k, self.direction)?;
        let value = replacement_value(self.strategy, x, stats)?;
        Ok(occlude(x, indices, value))
    }
}

/// `round(p * n)`, halves rounding up.
pub fn resolve_count(p: f64, n: usize) -> Result<usize> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Config(format!(
            "occlusion fraction {p} outside [0, 1]"
        )));
    }
    Ok(((p * n as f64) + 0.5).floor() as usize)
}

/// The first `k` entries of `order` for [`Direction::Highest`], the last `k`
/// for [`Direction::Lowest`].
pub fn select_indices(order: &RankOrder, k: usize, direction: Direction) -> Result<&[u32]> {
    let n = order.len();
    if k > n {
        return Err(Error::CountTooLarge { k, n });
    }
    let all = order.as_slice();
    Ok(match direction {
        Direction::Highest => &all[..k],
        Direction::Lowest => &all[n - k..],
    })
}

pub fn replacement_value<T: Element>(
    strategy: ReplacementStrategy,
    x: &[T],
    stats: &DatasetStats,
) -> Result<T> {
    if x.is_empty() {
        return Err(Error::EmptyInput("input"));
    }
    Ok(match strategy.validate()? {
        ReplacementStrategy::DatasetMean => T::of(stats.mean),
        ReplacementStrategy::InputMin => x.iter().copied().fold(T::infinity(), T::min),
        ReplacementStrategy::InputMax => x.iter().copied().fold(T::neg_infinity(), T::max),
        ReplacementStrategy::Constant(v) => T::of(v),
    })
}

/// Copy of `x` with `value` written at every index in `indices`.
pub fn occlude<T: Element>(x: &[T], indices: &[u32], value: T) -> Vec<T> {
    let mut out = x.to_vec();
    for &i in indices {
        out[i as usize] = value;
    }
    out
}
