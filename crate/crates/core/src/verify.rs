//! Checks behind the `gradcheck` and `selftest` commands.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attribution::{attribute, rank, Method};
use crate::autograd::{
    finite_diff_check, grad_wrt_input, GradCheckReport, Reduction, Tape, Tensor,
};
use crate::data::idx::{
    parse_idx_images, parse_idx_labels, write_idx_images, write_idx_labels, ByteGrid,
};
use crate::error::Result;
use crate::metrics::{auroc, auroc_bruteforce};
use crate::model::{build_model, Architecture, Checkpoint, GradModel, GradTargets, Pass};
use crate::occlusion::{occlude, select_indices, Direction};

pub const GRADCHECK_STEP: f64 = 1e-5;
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
/// Half-width of the uniform noise added to each sampled input. Flat MNIST
/// background makes max-pool windows exactly tied, and every coordinate
/// touching a tie sits on a kink; the noise breaks those ties.
pub const GRADCHECK_JITTER: f64 = 1e-2;
pub const IDENTITY_TOLERANCE: f64 = 1e-10;
pub const AUROC_TOLERANCE: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub check: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    fn new(check: &str, passed: bool, detail: String) -> Self {
        CheckOutcome {
            check: check.into(),
            passed,
            detail,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradientCheck {
    pub examples: Vec<usize>,
    /// Largest relative error over all compared coordinates.
    pub max_rel_error: f64,
    pub compared: usize,
    pub excluded: usize,
    /// Largest `|d nll / d z - (softmax(z) - onehot)|` over the examples,
    /// for log-softmax heads.
    pub identity_error: Option<f64>,
}

impl GradientCheck {
    pub fn passed(&self) -> bool {
        self.compared > 0
            && self.max_rel_error < GRADCHECK_TOLERANCE
            && self.identity_error.is_none_or(|e| e < IDENTITY_TOLERANCE)
    }
}

/// A randomized property check: `(trials, seed)` to failure count.
pub type PropertyCheck = fn(usize, u64) -> Result<usize>;

/// Finite-difference check of the input gradient of `model` (cast to f64) at
/// `samples` test inputs drawn with `seed`, each jittered by up to
/// [`GRADCHECK_JITTER`].
pub fn gradient_check(
    model: &GradModel<f32>,
    pixels: &[f32],
    labels: &[u8],
    samples: usize,
    seed: u64,
) -> Result<GradientCheck> {
    let model64: GradModel<f64> = model.cast();
    let features = pixels.len() / labels.len().max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut examples = sample(&mut rng, labels.len(), samples.min(labels.len())).into_vec();
    examples.sort_unstable();

    let mut out = GradientCheck {
        examples: examples.clone(),
        max_rel_error: 0.0,
        compared: 0,
        excluded: 0,
        identity_error: None,
    };
    for &i in &examples {
        let x: Vec<f64> = pixels[i * features..(i + 1) * features]
            .iter()
            .map(|&v| v as f64 + rng.gen_range(-GRADCHECK_JITTER..GRADCHECK_JITTER))
            .collect();
        let label = labels[i] as usize;
        let GradCheckReport {
            max_rel_error,
            compared,
            excluded,
            ..
        } = finite_diff_check(&model64, &x, label, GRADCHECK_STEP)?;
        out.max_rel_error = out.max_rel_error.max(max_rel_error);
        out.compared += compared;
        out.excluded += excluded;

        if model64.head().loss_kind() == crate::model::LossKind::Nll {
            // log_softmax is idempotent, so the model's log-probabilities
            // serve as logits whose softmax is the model's output.
            let mut tape = Tape::new();
            let fwd = model64.forward(&mut tape, &x, 1, GradTargets::default(), Pass::Eval)?;
            let z = tape.value(fwd.output).data().to_vec();
            let err = logsoftmax_identity_error(&z, label)?;
            out.identity_error = Some(out.identity_error.unwrap_or(0.0).max(err));
        }
    }
    Ok(out)
}

/// `max_i |d nll(log_softmax(z), t) / d z_i - (softmax(z)_i - [i == t])|`.
pub fn logsoftmax_identity_error(z: &[f64], target: usize) -> Result<f64> {
    let mut tape = Tape::<f64>::new();
    let zv = tape.leaf(Tensor::from_slice(&[1, z.len()], z)?, true);
    let lp = tape.log_softmax(zv)?;
    let loss = tape.nll_loss(lp, &[target], Reduction::Sum)?;
    let g = grad_wrt_input(&tape, loss, zv)?;
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let denom: f64 = z.iter().map(|v| (v - max).exp()).sum();
    Ok(g.data()
        .iter()
        .enumerate()
        .map(|(i, &gi)| {
            let expected = (z[i] - max).exp() / denom - f64::from(u8::from(i == target));
            (gi - expected).abs()
        })
        .fold(0.0, f64::max))
}

/// Rank-based against pairwise AUROC on `trials` random instances with ties.
pub fn auroc_oracle(trials: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let n = rng.gen_range(2..300);
        let levels = rng.gen_range(1..25);
        let scores: Vec<f64> = (0..n)
            .map(|_| rng.gen_range(0..levels) as f64 / levels as f64)
            .collect();
        let mut labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
        labels[0] = true;
        labels[1] = false;
        worst = worst.max((auroc(&scores, &labels)? - auroc_bruteforce(&scores, &labels)?).abs());
    }
    Ok(worst)
}

fn random_permutation(rng: &mut ChaCha8Rng, n: usize) -> Vec<u32> {
    sample(rng, n, n).into_iter().map(|i| i as u32).collect()
}

/// Occluding twice with the same selection and value equals occluding once,
/// and only the selected features change.
pub fn occlusion_idempotence(trials: usize, seed: u64) -> Result<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = 0;
    for _ in 0..trials {
        let n = rng.gen_range(1..800);
        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let g: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let order = rank(&attribute(Method::GradOrig, &x, &g, 0)?);
        let k = rng.gen_range(0..=n);
        let dir = if rng.gen_bool(0.5) {
            Direction::Highest
        } else {
            Direction::Lowest
        };
        let v = rng.gen_range(-1.0..1.0);
        let idx = select_indices(&order, k, dir)?;
        let once = occlude(&x, idx, v);
        let untouched = (0..n)
            .filter(|i| !idx.contains(&(*i as u32)))
            .all(|i| once[i] == x[i]);
        if occlude(&once, idx, v) != once || !untouched {
            failures += 1;
        }
    }
    Ok(failures)
}

/// Negating distinct signed scores reverses the grad_orig ranking; abs_grad
/// ranking is unchanged.
pub fn rank_sign_symmetry(trials: usize, seed: u64) -> Result<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = 0;
    for _ in 0..trials {
        let n = rng.gen_range(1..800);
        // a shuffled ladder gives distinct scores
        let g: Vec<f64> = random_permutation(&mut rng, n)
            .into_iter()
            .map(|i| i as f64 - n as f64 / 2.0 + 0.5)
            .collect();
        let neg: Vec<f64> = g.iter().map(|v| -v).collect();
        let x = vec![1.0; n];
        let mut a = rank(&attribute(Method::GradOrig, &x, &g, 0)?)
            .as_slice()
            .to_vec();
        a.reverse();
        let b = rank(&attribute(Method::GradOrig, &x, &neg, 0)?);
        let abs_same = rank(&attribute(Method::AbsGrad, &x, &g, 0)?)
            == rank(&attribute(Method::AbsGrad, &x, &neg, 0)?);
        if a != b.as_slice() || !abs_same {
            failures += 1;
        }
    }
    Ok(failures)
}

/// Written IDX files parse back to the same images and labels.
pub fn idx_round_trip(trials: usize, seed: u64) -> Result<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = 0;
    for _ in 0..trials {
        let (count, rows, cols) = (
            rng.gen_range(0..12),
            rng.gen_range(1..30),
            rng.gen_range(1..30),
        );
        let images: Vec<ByteGrid> = (0..count)
            .map(|_| ByteGrid {
                rows,
                cols,
                pixels: (0..rows * cols).map(|_| rng.gen()).collect(),
            })
            .collect();
        let labels: Vec<u8> = (0..count).map(|_| rng.gen_range(0..10)).collect();
        let images_back = parse_idx_images(&write_idx_images(&images))?;
        let labels_back = parse_idx_labels(&write_idx_labels(&labels))?;
        // an empty image file carries no dimensions to compare
        if (count > 0 && images_back != images)
            || images_back.len() != count
            || labels_back != labels
        {
            failures += 1;
        }
    }
    Ok(failures)
}

/// Checkpoint bytes decode to an identical checkpoint and model.
pub fn checkpoint_round_trip(trials: usize, seed: u64) -> Result<usize> {
    let mut failures = 0;
    for t in 0..trials as u64 {
        let outputs = [1, 2, 10][(t % 3) as usize];
        let model = build_model::<f32>(Architecture::MlpSmall, outputs, seed.wrapping_add(t))?;
        let ckpt = Checkpoint::from_model(&model, t as u32, 0.5 + t as f64 / 1000.0);
        let back = Checkpoint::from_bytes(&ckpt.to_bytes())?;
        if back != ckpt || back.to_model()? != model {
            failures += 1;
        }
    }
    Ok(failures)
}

/// Metric oracle plus the property checks, one outcome each.
pub fn selftest(trials: usize, seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();
    let worst = auroc_oracle(trials, seed)?;
    out.push(CheckOutcome::new(
        "auroc_oracle",
        worst <= AUROC_TOLERANCE,
        format!("{trials} instances, max |rank - pairwise| = {worst:e}"),
    ));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut identity = 0.0f64;
    for _ in 0..trials {
        let k = rng.gen_range(2..12);
        let z: Vec<f64> = (0..k).map(|_| rng.gen_range(-8.0..8.0)).collect();
        identity = identity.max(logsoftmax_identity_error(&z, rng.gen_range(0..k))?);
    }
    out.push(CheckOutcome::new(
        "logsoftmax_nll_identity",
        identity < IDENTITY_TOLERANCE,
        format!("max error {identity:e}"),
    ));
    let property_trials = (trials / 4).max(1);
    let properties: [(&str, PropertyCheck); 4] = [
        ("occlusion_idempotence", occlusion_idempotence),
        ("rank_sign_flip_symmetry", rank_sign_symmetry),
        ("idx_round_trip", idx_round_trip),
        ("checkpoint_round_trip", checkpoint_round_trip),
    ];
    for (name, check) in properties {
        let n = if name == "checkpoint_round_trip" {
            property_trials.min(30)
        } else {
            property_trials
        };
        let failures = check(n, seed)?;
        out.push(CheckOutcome::new(
            name,
            failures == 0,
            format!("{failures} of {n} trials failed"),
        ));
    }
    let model = build_model::<f64>(Architecture::MlpSmall, 2, seed)?;
    let x: Vec<f64> = (0..crate::model::IMAGE_PIXELS)
        .map(|_| rng.gen_range(-0.5..2.5))
        .collect();
    let report = finite_diff_check(&model, &x, 1, GRADCHECK_STEP)?;
    out.push(CheckOutcome::new(
        "untrained_gradcheck",
        report.compared > 0 && report.max_rel_error < GRADCHECK_TOLERANCE,
        format!(
            "max relative error {:e} over {} coordinates",
            report.max_rel_error, report.compared
        ),
    ));
    Ok(out)
}
