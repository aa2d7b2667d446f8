//! Loss-gradient attributions and feature ranking.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Element, Reduction, Tape};
use crate::error::{Error, Result};
use crate::model::{GradModel, GradTargets, Pass};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// The raw loss-gradient.
    GradOrig,
    /// Elementwise absolute value of the gradient.
    AbsGrad,
    /// Gradient times input.
    GradInp,
    /// I.i.d. uniform scores, independent of the model.
    Random,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::Random,
        Method::AbsGrad,
        Method::GradOrig,
        Method::GradInp,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::GradOrig => "grad_orig",
            Method::AbsGrad => "abs_grad",
            Method::GradInp => "grad_inp",
            Method::Random => "random",
        }
    }

    /// Which end of the score range ranks highest.
    ///
    /// With NLL/BCE losses, features whose gradient is most negative are the
    /// ones the model relies on most, so signed methods rank ascending.
    pub fn score_order(self) -> ScoreOrder {
        match self {
            Method::AbsGrad | Method::Random => ScoreOrder::Descending,
            Method::GradOrig | Method::GradInp => ScoreOrder::Ascending,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown attribution method '{s}'")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScoreOrder {
    /// Largest score ranks highest.
    Descending,
    /// Smallest (most negative) score ranks highest.
    Ascending,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttributionMap<T> {
    pub method: Method,
    /// One score per input feature, row-major like the input.
    pub scores: Vec<T>,
    /// Seed of the random scores; `None` for gradient methods.
    pub seed: Option<u64>,
}

/// Permutation of feature indices; position 0 is the highest-ranked feature.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RankOrder(Vec<u32>);

impl RankOrder {
    pub fn from_permutation(order: Vec<u32>) -> Result<Self> {
        let mut seen = vec![false; order.len()];
        for &i in &order {
            match seen.get_mut(i as usize) {
                Some(s) if !*s => *s = true,
                _ => return Err(Error::Config("rank order is not a permutation".into())),
            }
        }
        Ok(RankOrder(order))
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// `dL(D(x), t) / dx` for one example, in eval mode.
pub fn loss_gradient<T: Element>(model: &GradModel<T>, x: &[T], label: usize) -> Result<Vec<T>> {
    loss_gradients(model, x, &[label])
}

/// Per-example loss-gradients of a batch of flattened inputs.
///
/// The batch loss is the sum of per-example losses, and examples do not
/// interact in eval mode, so each block of the result is that example's own
/// gradient.
pub fn loss_gradients<T: Element>(
    model: &GradModel<T>,
    xs: &[T],
    labels: &[usize],
) -> Result<Vec<T>> {
    let mut tape = Tape::new();
    let targets = GradTargets {
        input: true,
        params: false,
    };
    let fwd = model.forward(&mut tape, xs, labels.len(), targets, Pass::Eval)?;
    let loss = model.loss_node(&mut tape, &fwd, labels, Reduction::Sum)?;
    Ok(crate::autograd::grad_wrt_input(&tape, loss, fwd.input)?.into_data())
}

/// Derives one method's scores from an input and its loss-gradient.
/// `random_seed` is only consulted by [`Method::Random`].
pub fn attribute<T: Element>(
    method: Method,
    x: &[T],
    g: &[T],
    random_seed: u64,
) -> Result<AttributionMap<T>> {
    if x.len() != g.len() {
        return Err(Error::ShapeMismatch {
            op: "attribute",
            lhs: vec![x.len()],
            rhs: vec![g.len()],
        });
    }
    let scores = match method {
        Method::GradOrig => g.to_vec(),
        Method::AbsGrad => g.iter().map(|v| v.abs()).collect(),
        Method::GradInp => g.iter().zip(x).map(|(&gi, &xi)| gi * xi).collect(),
        Method::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(random_seed);
            (0..x.len()).map(|_| T::of(rng.gen::<f64>())).collect()
        }
    };
    Ok(AttributionMap {
        method,
        scores,
        seed: (method == Method::Random).then_some(random_seed),
    })
}

/// Orders features by the method's score direction, ties broken by ascending
/// feature index.
pub fn rank<T: Element>(map: &AttributionMap<T>) -> RankOrder {
    let s = &map.scores;
    let mut order: Vec<u32> = (0..s.len() as u32).collect();
    let by_score = |a: &u32, b: &u32| {
        s[*a as usize]
            .partial_cmp(&s[*b as usize])
            .unwrap_or(Ordering::Equal)
    };
    match map.method.score_order() {
        ScoreOrder::Ascending => order.sort_by(by_score),
        ScoreOrder::Descending => order.sort_by(|a, b| by_score(b, a)),
    }
    RankOrder(order)
}

/// Seed for the random scores of one example under one model seed.
pub fn random_seed_for(model_seed: u64, example_index: usize) -> u64 {
    // splitmix64 finalizer over the packed pair
    let mut z = model_seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(example_index as u64)
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn map(method: Method, scores: Vec<f64>) -> AttributionMap<f64> {
        AttributionMap {
            method,
            scores,
            seed: None,
        }
    }

    #[test]
    fn attribute_examples() {
        let (g, x) = ([1.0, -2.0], [3.0, 4.0]);
        assert_eq!(
            attribute(Method::GradInp, &x, &g, 0).unwrap().scores,
            vec![3.0, -8.0]
        );
        assert_eq!(
            attribute(Method::AbsGrad, &x, &g, 0).unwrap().scores,
            vec![1.0, 2.0]
        );
        assert_eq!(
            attribute(Method::GradOrig, &x, &g, 0).unwrap().scores,
            vec![1.0, -2.0]
        );
        let a = attribute(Method::Random, &[0.0f32; 50], &[0.0; 50], 9).unwrap();
        let b = attribute(Method::Random, &[1.0f32; 50], &[5.0; 50], 9).unwrap();
        assert_eq!(a.scores, b.scores);
        assert_eq!(a.seed, Some(9));
        assert!(attribute(Method::GradOrig, &[1.0], &[1.0, 2.0], 0).is_err());
    }

    #[test]
    fn rank_examples() {
        let order = |m, s| rank(&map(m, s)).as_slice().to_vec();
        assert_eq!(
            order(Method::GradOrig, vec![-2.0, 3.0, -1.0, 0.0]),
            vec![0, 2, 3, 1]
        );
        assert_eq!(
            order(Method::AbsGrad, vec![2.0, 3.0, 1.0, 0.0]),
            vec![1, 0, 2, 3]
        );
        assert_eq!(order(Method::GradInp, vec![1.0; 5]), vec![0, 1, 2, 3, 4]);
        assert_eq!(order(Method::AbsGrad, vec![1.0; 5]), vec![0, 1, 2, 3, 4]);
        // -0.0 and 0.0 tie
        assert_eq!(order(Method::GradOrig, vec![0.0, -0.0, 0.0]), vec![0, 1, 2]);
    }

    #[test]
    fn random_seeds_differ_per_example_and_model() {
        let a = random_seed_for(0, 0);
        assert_ne!(a, random_seed_for(0, 1));
        assert_ne!(a, random_seed_for(1, 0));
        assert_eq!(a, random_seed_for(0, 0));
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
        }
        assert!("saliency".parse::<Method>().is_err());
    }

    proptest! {
        #[test]
        fn abs_rank_ignores_global_sign(g in prop::collection::vec(-4.0f64..4.0, 1..100)) {
            let neg: Vec<f64> = g.iter().map(|v| -v).collect();
            let x = vec![1.0; g.len()];
            let a = rank(&attribute(Method::AbsGrad, &x, &g, 0).unwrap());
            let b = rank(&attribute(Method::AbsGrad, &x, &neg, 0).unwrap());
            prop_assert_eq!(a, b);
        }

        #[test]
        fn signed_rank_reverses_under_negation(g in prop::collection::hash_set(-10_000i32..10_000, 1..100)) {
            // distinct scores: with ties the index tie-break is not reversed
            let g: Vec<f64> = g.into_iter().map(|v| v as f64 / 100.0).collect();
            let neg: Vec<f64> = g.iter().map(|v| -v).collect();
            let x = vec![1.0; g.len()];
            let mut a = rank(&attribute(Method::GradOrig, &x, &g, 0).unwrap()).as_slice().to_vec();
            a.reverse();
            let b = rank(&attribute(Method::GradOrig, &x, &neg, 0).unwrap());
            prop_assert_eq!(a, b.as_slice().to_vec());
        }

        #[test]
        fn grad_inp_keeps_sign_for_positive_inputs(
            pairs in prop::collection::vec((-3.0f64..3.0, 0.01f64..3.0), 1..80)
        ) {
            let (g, x): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let gi = attribute(Method::GradInp, &x, &g, 0).unwrap();
            for (a, b) in gi.scores.iter().zip(&g) {
                prop_assert_eq!(a.signum(), b.signum());
            }
        }

        #[test]
        fn rank_is_a_permutation_and_pure(g in prop::collection::vec(-1.0f64..1.0, 1..200), seed in any::<u64>()) {
            let x = vec![0.5; g.len()];
            for m in Method::ALL {
                let first = attribute(m, &x, &g, seed).unwrap();
                prop_assert_eq!(&first, &attribute(m, &x, &g, seed).unwrap());
                let order = rank(&first);
                prop_assert!(RankOrder::from_permutation(order.as_slice().to_vec()).is_ok());
            }
        }
    }
}
