use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Element, Mode, Reduction, Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const IMAGE_SIDE: usize = 28;
pub const IMAGE_PIXELS: usize = IMAGE_SIDE * IMAGE_SIDE;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Architecture {
    /// conv 3x3x32 - conv 3x3x64 - maxpool 2 - fc 128 - fc K, with dropout
    /// after the pool (0.25) and after the first dense layer (0.5).
    #[serde(rename = "cnn-ref")]
    CnnRef,
    /// fc 256 - fc K.
    #[serde(rename = "mlp-small")]
    MlpSmall,
}

impl Architecture {
    pub fn as_str(self) -> &'static str {
        match self {
            Architecture::CnnRef => "cnn-ref",
            Architecture::MlpSmall => "mlp-small",
        }
    }

    /// Shapes of the parameter tensors, weights before biases, layer by layer.
    pub fn param_shapes(self, outputs: usize) -> Vec<Vec<usize>> {
        match self {
            Architecture::CnnRef => vec![
                vec![32, 1, 3, 3],
                vec![32],
                vec![64, 32, 3, 3],
                vec![64],
                vec![64 * 12 * 12, 128],
                vec![128],
                vec![128, outputs],
                vec![outputs],
            ],
            Architecture::MlpSmall => vec![
                vec![IMAGE_PIXELS, 256],
                vec![256],
                vec![256, outputs],
                vec![outputs],
            ],
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cnn-ref" => Ok(Architecture::CnnRef),
            "mlp-small" => Ok(Architecture::MlpSmall),
            other => Err(Error::UnknownArchitecture(other.to_string())),
        }
    }
}

/// Output head. The loss is fixed by the head: log-softmax pairs with
/// negative log-likelihood, a single sigmoid unit with binary cross-entropy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Head {
    LogSoftmax { classes: usize },
    Sigmoid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    Nll,
    Bce,
}

impl Head {
    pub fn for_classes(classes: usize) -> Result<Self> {
        match classes {
            0 => Err(Error::Config("a model needs at least one output".into())),
            1 => Ok(Head::Sigmoid),
            k => Ok(Head::LogSoftmax { classes: k }),
        }
    }

    pub fn outputs(self) -> usize {
        match self {
            Head::LogSoftmax { classes } => classes,
            Head::Sigmoid => 1,
        }
    }

    /// Number of distinct labels the head can predict.
    pub fn label_count(self) -> usize {
        match self {
            Head::LogSoftmax { classes } => classes,
            Head::Sigmoid => 2,
        }
    }

    pub fn loss_kind(self) -> LossKind {
        match self {
            Head::LogSoftmax { .. } => LossKind::Nll,
            Head::Sigmoid => LossKind::Bce,
        }
    }
}

impl fmt::Display for Head {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Head::LogSoftmax { classes } => write!(f, "logsoftmax-{classes}"),
            Head::Sigmoid => f.write_str("sigmoid-1"),
        }
    }
}

impl FromStr for Head {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("unknown head '{s}'"));
        match s.split_once('-') {
            Some(("sigmoid", "1")) => Ok(Head::Sigmoid),
            Some(("logsoftmax", k)) => {
                let classes: usize = k.parse().map_err(|_| bad())?;
                if classes < 2 {
                    return Err(bad());
                }
                Ok(Head::LogSoftmax { classes })
            }
            _ => Err(bad()),
        }
    }
}

/// How a forward pass treats dropout.
pub enum Pass<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

/// Which leaves of a forward pass should receive gradients.
#[derive(Clone, Copy, Debug, Default)]
pub struct GradTargets {
    pub input: bool,
    pub params: bool,
}

/// Vars created by one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub input: Var,
    pub params: Vec<Var>,
    /// Log-probabilities `[N, K]` or sigmoid probabilities `[N, 1]`.
    pub output: Var,
    pub batch: usize,
}

/// Head output for one example.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// Class probabilities for a log-softmax head; `[p]` for a sigmoid head.
    pub probs: Vec<f64>,
}

impl Prediction {
    pub fn label(&self) -> usize {
        match self.probs.as_slice() {
            [p] => usize::from(*p > 0.5),
            probs => {
                let mut best = 0;
                for (i, &p) in probs.iter().enumerate() {
                    if p > probs[best] {
                        best = i;
                    }
                }
                best
            }
        }
    }

    /// Score of the positive class ("1") for binary heads.
    pub fn positive_score(&self) -> Option<f64> {
        match self.probs.as_slice() {
            [p] => Some(*p),
            [_, p1] => Some(*p1),
            _ => None,
        }
    }
}

/// A differentiable classifier: architecture, head and parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct GradModel<T> {
    arch: Architecture,
    head: Head,
    params: Vec<Tensor<T>>,
}

/// Builds a freshly initialized model. Weights and biases are drawn from
/// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` with a ChaCha8 stream seeded by `seed`.
pub fn build_model<T: Element>(
    arch: Architecture,
    classes: usize,
    seed: u64,
) -> Result<GradModel<T>> {
    let head = Head::for_classes(classes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shapes = arch.param_shapes(head.outputs());
    let mut params = Vec::with_capacity(shapes.len());
    for pair in shapes.chunks(2) {
        let (w_shape, b_shape) = (&pair[0], &pair[1]);
        let fan_in = match w_shape.len() {
            4 => w_shape[1] * w_shape[2] * w_shape[3],
            _ => w_shape[0],
        };
        let bound = 1.0 / (fan_in as f64).sqrt();
        for shape in [w_shape, b_shape] {
            let n = shape.iter().product();
            let data = (0..n)
                .map(|_| T::of(rng.gen_range(-bound..bound)))
                .collect();
            params.push(Tensor::new(shape, data)?);
        }
    }
    Ok(GradModel { arch, head, params })
}

impl<T: Element> GradModel<T> {
    pub fn from_params(arch: Architecture, head: Head, params: Vec<Tensor<T>>) -> Result<Self> {
        let shapes = arch.param_shapes(head.outputs());
        if shapes.len() != params.len() || shapes.iter().zip(&params).any(|(s, p)| s != p.shape()) {
            return Err(Error::ShapeMismatch {
                op: "GradModel::from_params",
                lhs: shapes.iter().map(|s| s.iter().product()).collect(),
                rhs: params.iter().map(|p| p.len()).collect(),
            });
        }
        Ok(GradModel { arch, head, params })
    }

    pub fn arch(&self) -> Architecture {
        self.arch
    }

    pub fn head(&self) -> Head {
        self.head
    }

    pub fn loss_kind(&self) -> LossKind {
        self.head.loss_kind()
    }

    /// Architecture and head, e.g. `cnn-ref/logsoftmax-2`.
    pub fn id(&self) -> String {
        format!("{}/{}", self.arch, self.head)
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Element>(&self) -> GradModel<U> {
        GradModel {
            arch: self.arch,
            head: self.head,
            params: self.params.iter().map(Tensor::cast).collect(),
        }
    }

    /// Records a forward pass over `batch` flattened 28x28 images.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        inputs: &[T],
        batch: usize,
        grads: GradTargets,
        pass: Pass<'_>,
    ) -> Result<Forward> {
        let x = Tensor::from_slice(&[batch, 1, IMAGE_SIDE, IMAGE_SIDE], inputs)?;
        let input = tape.leaf(x, grads.input);
        let params: Vec<Var> = self
            .params
            .iter()
            .map(|p| tape.leaf(p.clone(), grads.params))
            .collect();
        let (mode, mut rng) = match pass {
            Pass::Eval => (Mode::Eval, None),
            Pass::Train(rng) => (Mode::Train, Some(rng)),
        };
        let mut dropout = |tape: &mut Tape<T>, v: Var, p: f64| -> Result<Var> {
            match rng.as_deref_mut() {
                Some(r) => tape.dropout(v, p, mode, r),
                None => Ok(v),
            }
        };
        let logits = match self.arch {
            Architecture::CnnRef => {
                let h = tape.conv2d(input, params[0])?;
                let h = tape.add_bias(h, params[1])?;
                let h = tape.relu(h)?;
                let h = tape.conv2d(h, params[2])?;
                let h = tape.add_bias(h, params[3])?;
                let h = tape.relu(h)?;
                let h = tape.maxpool2(h)?;
                let h = dropout(tape, h, 0.25)?;
                let h = tape.flatten(h)?;
                let h = tape.matmul(h, params[4])?;
                let h = tape.add_bias(h, params[5])?;
                let h = tape.relu(h)?;
                let h = dropout(tape, h, 0.5)?;
                let h = tape.matmul(h, params[6])?;
                tape.add_bias(h, params[7])?
            }
            Architecture::MlpSmall => {
                let h = tape.flatten(input)?;
                let h = tape.matmul(h, params[0])?;
                let h = tape.add_bias(h, params[1])?;
                let h = tape.relu(h)?;
                let h = tape.matmul(h, params[2])?;
                tape.add_bias(h, params[3])?
            }
        };
        let output = match self.head {
            Head::LogSoftmax { .. } => tape.log_softmax(logits)?,
            Head::Sigmoid => tape.sigmoid(logits)?,
        };
        Ok(Forward {
            input,
            params,
            output,
            batch,
        })
    }

    pub fn check_labels(&self, labels: &[usize]) -> Result<()> {
        let classes = self.head.label_count();
        match labels.iter().find(|&&t| t >= classes) {
            Some(&label) => Err(Error::InvalidLabel { label, classes }),
            None => Ok(()),
        }
    }

    /// Appends the training loss of `forward`'s output against `labels`.
    pub fn loss_node(
        &self,
        tape: &mut Tape<T>,
        forward: &Forward,
        labels: &[usize],
        reduction: Reduction,
    ) -> Result<Var> {
        self.check_labels(labels)?;
        match self.head {
            Head::LogSoftmax { .. } => tape.nll_loss(forward.output, labels, reduction),
            Head::Sigmoid => {
                let targets: Vec<T> = labels.iter().map(|&t| T::of(t as f64)).collect();
                tape.bce_loss(forward.output, &targets, reduction)
            }
        }
    }

    /// Loss of a single example in eval mode.
    pub fn loss(&self, x: &[T], label: usize) -> Result<T> {
        let mut tape = Tape::new();
        let fwd = self.forward(&mut tape, x, 1, GradTargets::default(), Pass::Eval)?;
        let loss = self.loss_node(&mut tape, &fwd, &[label], Reduction::Sum)?;
        Ok(tape.value(loss).data()[0])
    }

    /// Per-example losses of a batch in eval mode.
    pub fn losses(&self, xs: &[T], labels: &[usize]) -> Result<Vec<T>> {
        let mut tape = Tape::new();
        let fwd = self.forward(
            &mut tape,
            xs,
            labels.len(),
            GradTargets::default(),
            Pass::Eval,
        )?;
        let loss = self.loss_node(&mut tape, &fwd, labels, Reduction::None)?;
        Ok(tape.value(loss).data().to_vec())
    }

    pub fn predict_score(&self, x: &[T]) -> Result<Prediction> {
        Ok(self.predict_batch(x, 1)?.remove(0))
    }

    /// Eval-mode predictions for `batch` flattened images.
    pub fn predict_batch(&self, xs: &[T], batch: usize) -> Result<Vec<Prediction>> {
        let mut tape = Tape::new();
        let fwd = self.forward(&mut tape, xs, batch, GradTargets::default(), Pass::Eval)?;
        Ok(head_predictions(self.head, tape.value(fwd.output)))
    }

    /// Predictions over many images, evaluated `chunk` at a time.
    pub fn predict_all(&self, xs: &[T], chunk: usize) -> Result<Vec<Prediction>> {
        let mut out = Vec::with_capacity(xs.len() / IMAGE_PIXELS);
        for block in xs.chunks(chunk.max(1) * IMAGE_PIXELS) {
            out.extend(self.predict_batch(block, block.len() / IMAGE_PIXELS)?);
        }
        Ok(out)
    }
}

pub(crate) fn head_predictions<T: Element>(head: Head, output: &Tensor<T>) -> Vec<Prediction> {
    let k = head.outputs();
    output
        .data()
        .chunks_exact(k)
        .map(|row| Prediction {
            probs: match head {
                Head::LogSoftmax { .. } => row.iter().map(|v| v.as_f64().exp()).collect(),
                Head::Sigmoid => vec![row[0].as_f64()],
            },
        })
        .collect()
}
