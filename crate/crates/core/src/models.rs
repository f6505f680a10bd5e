//! Model zoo and local training.
//!
//! Three model kinds cover the simulator's needs: a quadratic bowl
//! F(w) = 0.5*||w - w*||^2 for convergence-theory checks (its smoothness
//! constant is exactly 1 and its gradient is exact), multinomial logistic
//! regression as the workhorse classifier, and a one-hidden-layer ReLU MLP
//! for the non-convex regime. Parameters always travel as flat `ParamVector`s
//! so aggregation rules and chain serialization stay model-agnostic.
//!
//! Every reduction over samples runs in ascending sample order and every
//! shuffle is driven by an explicit seed, so all results are bit-reproducible
//! — chain validation recomputes aggregates and compares exact bits.

use crate::error::{Result, SimError};
use crate::seeds::rng_for;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Flat 64-bit parameter vector plus the shape it instantiates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    pub values: Vec<f64>,
    pub shape_tag: ShapeTag,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ShapeTag {
    Quadratic { dim: usize },
    Logistic { input_dim: usize, classes: usize },
    Mlp { input_dim: usize, hidden: usize, classes: usize },
}

impl ShapeTag {
    pub fn param_count(&self) -> usize {
        match *self {
            ShapeTag::Quadratic { dim } => dim,
            ShapeTag::Logistic { input_dim, classes } => (input_dim + 1) * classes,
            ShapeTag::Mlp { input_dim, hidden, classes } => {
                (input_dim + 1) * hidden + (hidden + 1) * classes
            }
        }
    }
}

impl ParamVector {
    pub fn zeros(shape: ShapeTag) -> Self {
        ParamVector { values: vec![0.0; shape.param_count()], shape_tag: shape }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Model definition: the shape plus anything evaluation needs beyond weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub shape: ShapeTag,
    /// Target w* for the quadratic bowl; empty for classifiers.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub quadratic_target: Vec<f64>,
}

impl ModelSpec {
    pub fn quadratic(target: Vec<f64>) -> Self {
        let dim = target.len();
        ModelSpec { shape: ShapeTag::Quadratic { dim }, quadratic_target: target }
    }

    pub fn logistic(input_dim: usize, classes: usize) -> Self {
        ModelSpec { shape: ShapeTag::Logistic { input_dim, classes }, quadratic_target: vec![] }
    }

    pub fn mlp(input_dim: usize, hidden: usize, classes: usize) -> Self {
        ModelSpec {
            shape: ShapeTag::Mlp { input_dim, hidden, classes },
            quadratic_target: vec![],
        }
    }

    pub fn num_classes(&self) -> usize {
        match self.shape {
            ShapeTag::Quadratic { .. } => 0,
            ShapeTag::Logistic { classes, .. } | ShapeTag::Mlp { classes, .. } => classes,
        }
    }

    pub fn input_dim(&self) -> usize {
        match self.shape {
            ShapeTag::Quadratic { .. } => 0,
            ShapeTag::Logistic { input_dim, .. } | ShapeTag::Mlp { input_dim, .. } => input_dim,
        }
    }

    /// Fresh weights, uniform in [-1/sqrt(fan_in), +1/sqrt(fan_in)].
    pub fn init_weights(&self, seed: u64) -> ParamVector {
        let mut rng = rng_for("model-init", &[seed]);
        let mut values = vec![0.0; self.shape.param_count()];
        match self.shape {
            ShapeTag::Quadratic { .. } => {
                // theory checks pick their own starting point; zero is fine here
            }
            ShapeTag::Logistic { input_dim, .. } => {
                let bound = 1.0 / (input_dim as f64).sqrt();
                for v in values.iter_mut() {
                    *v = rng.gen_range(-bound..bound);
                }
            }
            ShapeTag::Mlp { input_dim, hidden, classes } => {
                let b1 = 1.0 / (input_dim as f64).sqrt();
                let n1 = (input_dim + 1) * hidden;
                for v in values[..n1].iter_mut() {
                    *v = rng.gen_range(-b1..b1);
                }
                let b2 = 1.0 / (hidden as f64).sqrt();
                let _ = classes;
                for v in values[n1..].iter_mut() {
                    *v = rng.gen_range(-b2..b2);
                }
            }
        }
        ParamVector { values, shape_tag: self.shape }
    }

    fn check_shape(&self, w: &ParamVector) -> Result<()> {
        if w.shape_tag != self.shape || w.len() != self.shape.param_count() {
            return Err(SimError::DimensionMismatch(format!(
                "weights have shape {:?} (len {}), spec expects {:?} (len {})",
                w.shape_tag,
                w.len(),
                self.shape,
                self.shape.param_count()
            )));
        }
        Ok(())
    }
}

/// A batch of rows with aligned labels. For the quadratic model the contents
/// are ignored (its loss depends on weights only) but a non-empty batch is
/// still required so call sites stay uniform.
#[derive(Debug, Clone)]
pub struct Minibatch<'a> {
    pub features: &'a [Vec<f64>],
    pub labels: &'a [usize],
}

impl<'a> Minibatch<'a> {
    pub fn new(features: &'a [Vec<f64>], labels: &'a [usize]) -> Result<Self> {
        if features.len() != labels.len() {
            return Err(SimError::DimensionMismatch(format!(
                "{} feature rows vs {} labels",
                features.len(),
                labels.len()
            )));
        }
        if features.is_empty() {
            return Err(SimError::Config("empty minibatch".into()));
        }
        Ok(Minibatch { features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

// --- logistic regression ----------------------------------------------------
// weights laid out row-major: for class c, values[c*(D+1) .. c*(D+1)+D] are
// the feature weights and values[c*(D+1)+D] is the bias.

fn logistic_logits(w: &[f64], x: &[f64], input_dim: usize, classes: usize, out: &mut [f64]) {
    for c in 0..classes {
        let row = &w[c * (input_dim + 1)..(c + 1) * (input_dim + 1)];
        let mut z = row[input_dim];
        for d in 0..input_dim {
            z += row[d] * x[d];
        }
        out[c] = z;
    }
}

/// log(sum(exp(z))) with max-shift; also returns the max.
fn log_sum_exp(z: &[f64]) -> (f64, f64) {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = z.iter().map(|v| (v - m).exp()).sum();
    (m + s.ln(), m)
}

// --- MLP --------------------------------------------------------------------
// layout: [W1 | b1 | W2 | b2] with W1 row-major (hidden x input), b1 (hidden),
// W2 row-major (classes x hidden), b2 (classes).

struct MlpView<'a> {
    w1: &'a [f64],
    b1: &'a [f64],
    w2: &'a [f64],
    b2: &'a [f64],
    input_dim: usize,
    hidden: usize,
    classes: usize,
}

fn mlp_view(w: &[f64], input_dim: usize, hidden: usize, classes: usize) -> MlpView<'_> {
    let n_w1 = input_dim * hidden;
    let n_b1 = hidden;
    let n_w2 = hidden * classes;
    MlpView {
        w1: &w[..n_w1],
        b1: &w[n_w1..n_w1 + n_b1],
        w2: &w[n_w1 + n_b1..n_w1 + n_b1 + n_w2],
        b2: &w[n_w1 + n_b1 + n_w2..],
        input_dim,
        hidden,
        classes,
    }
}

fn mlp_forward(v: &MlpView, x: &[f64], h: &mut [f64], logits: &mut [f64]) {
    for j in 0..v.hidden {
        let row = &v.w1[j * v.input_dim..(j + 1) * v.input_dim];
        let mut z = v.b1[j];
        for d in 0..v.input_dim {
            z += row[d] * x[d];
        }
        h[j] = if z > 0.0 { z } else { 0.0 };
    }
    for c in 0..v.classes {
        let row = &v.w2[c * v.hidden..(c + 1) * v.hidden];
        let mut z = v.b2[c];
        for j in 0..v.hidden {
            z += row[j] * h[j];
        }
        logits[c] = z;
    }
}

/// Mean per-sample loss of `w` on `data`: 0.5*||w - w*||^2 for the quadratic
/// bowl, mean cross-entropy for the classifiers.
pub fn eval_loss(spec: &ModelSpec, w: &ParamVector, data: &Minibatch) -> Result<f64> {
    spec.check_shape(w)?;
    match spec.shape {
        ShapeTag::Quadratic { .. } => {
            let mut s = 0.0;
            for (wi, ti) in w.values.iter().zip(spec.quadratic_target.iter()) {
                let d = wi - ti;
                s += d * d;
            }
            Ok(0.5 * s)
        }
        ShapeTag::Logistic { input_dim, classes } => {
            let mut logits = vec![0.0; classes];
            let mut total = 0.0;
            for (x, &y) in data.features.iter().zip(data.labels.iter()) {
                logistic_logits(&w.values, x, input_dim, classes, &mut logits);
                let (lse, _) = log_sum_exp(&logits);
                total += lse - logits[y];
            }
            Ok(total / data.len() as f64)
        }
        ShapeTag::Mlp { input_dim, hidden, classes } => {
            let v = mlp_view(&w.values, input_dim, hidden, classes);
            let mut h = vec![0.0; hidden];
            let mut logits = vec![0.0; classes];
            let mut total = 0.0;
            for (x, &y) in data.features.iter().zip(data.labels.iter()) {
                mlp_forward(&v, x, &mut h, &mut logits);
                let (lse, _) = log_sum_exp(&logits);
                total += lse - logits[y];
            }
            Ok(total / data.len() as f64)
        }
    }
}

/// Gradient of the mean loss at `w`.
pub fn eval_gradient(spec: &ModelSpec, w: &ParamVector, data: &Minibatch) -> Result<ParamVector> {
    spec.check_shape(w)?;
    let mut g = vec![0.0; w.len()];
    match spec.shape {
        ShapeTag::Quadratic { .. } => {
            for ((gi, wi), ti) in g.iter_mut().zip(w.values.iter()).zip(spec.quadratic_target.iter())
            {
                *gi = wi - ti;
            }
        }
        ShapeTag::Logistic { input_dim, classes } => {
            let mut logits = vec![0.0; classes];
            let inv_n = 1.0 / data.len() as f64;
            for (x, &y) in data.features.iter().zip(data.labels.iter()) {
                logistic_logits(&w.values, x, input_dim, classes, &mut logits);
                let (lse, _) = log_sum_exp(&logits);
                for c in 0..classes {
                    let p = (logits[c] - lse).exp();
                    let e = if c == y { p - 1.0 } else { p };
                    let row = &mut g[c * (input_dim + 1)..(c + 1) * (input_dim + 1)];
                    for d in 0..input_dim {
                        row[d] += e * x[d] * inv_n;
                    }
                    row[input_dim] += e * inv_n;
                }
            }
        }
        ShapeTag::Mlp { input_dim, hidden, classes } => {
            let v = mlp_view(&w.values, input_dim, hidden, classes);
            let mut h = vec![0.0; hidden];
            let mut logits = vec![0.0; classes];
            let mut dh = vec![0.0; hidden];
            let inv_n = 1.0 / data.len() as f64;
            let n_w1 = input_dim * hidden;
            let n_b1 = hidden;
            let n_w2 = hidden * classes;
            for (x, &y) in data.features.iter().zip(data.labels.iter()) {
                mlp_forward(&v, x, &mut h, &mut logits);
                let (lse, _) = log_sum_exp(&logits);
                dh.iter_mut().for_each(|d| *d = 0.0);
                for c in 0..classes {
                    let p = (logits[c] - lse).exp();
                    let e = (if c == y { p - 1.0 } else { p }) * inv_n;
                    let w2_row = &v.w2[c * hidden..(c + 1) * hidden];
                    let gw2 = &mut g[n_w1 + n_b1 + c * hidden..n_w1 + n_b1 + (c + 1) * hidden];
                    for j in 0..hidden {
                        gw2[j] += e * h[j];
                        dh[j] += e * w2_row[j];
                    }
                    g[n_w1 + n_b1 + n_w2 + c] += e;
                }
                for j in 0..hidden {
                    if h[j] > 0.0 {
                        let gw1 = &mut g[j * input_dim..(j + 1) * input_dim];
                        for d in 0..input_dim {
                            gw1[d] += dh[j] * x[d];
                        }
                        g[n_w1 + j] += dh[j];
                    }
                }
            }
        }
    }
    Ok(ParamVector { values: g, shape_tag: spec.shape })
}

/// Fraction of argmax-correct predictions; argmax ties go to the lowest
/// class index. Errors on the quadratic model, which has no classes.
pub fn eval_accuracy(spec: &ModelSpec, w: &ParamVector, data: &Minibatch) -> Result<f64> {
    spec.check_shape(w)?;
    let classes = spec.num_classes();
    if classes == 0 {
        return Err(SimError::Config("accuracy is undefined for the quadratic model".into()));
    }
    let mut logits = vec![0.0; classes];
    let mut h;
    let mut correct = 0usize;
    match spec.shape {
        ShapeTag::Logistic { input_dim, .. } => {
            for (x, &y) in data.features.iter().zip(data.labels.iter()) {
                logistic_logits(&w.values, x, input_dim, classes, &mut logits);
                if argmax_lowest(&logits) == y {
                    correct += 1;
                }
            }
        }
        ShapeTag::Mlp { input_dim, hidden, .. } => {
            let v = mlp_view(&w.values, input_dim, hidden, classes);
            h = vec![0.0; hidden];
            for (x, &y) in data.features.iter().zip(data.labels.iter()) {
                mlp_forward(&v, x, &mut h, &mut logits);
                if argmax_lowest(&logits) == y {
                    correct += 1;
                }
            }
        }
        ShapeTag::Quadratic { .. } => unreachable!(),
    }
    Ok(correct as f64 / data.len() as f64)
}

fn argmax_lowest(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in z.iter().enumerate().skip(1) {
        if *v > z[best] {
            best = i;
        }
    }
    best
}

/// E epochs of minibatch SGD over the given rows, reshuffling each epoch from
/// `seed`. A batch size larger than the shard is clamped to one full batch;
/// the final short batch of an epoch is trained on like any other. Returns
/// the updated weights; bitwise deterministic for identical inputs.
pub fn local_sgd(
    spec: &ModelSpec,
    w0: &ParamVector,
    features: &[Vec<f64>],
    labels: &[usize],
    epochs: usize,
    lr: f64,
    batch_size: usize,
    seed: u64,
) -> Result<ParamVector> {
    spec.check_shape(w0)?;
    if features.is_empty() {
        return Err(SimError::Config("cannot train on an empty shard".into()));
    }
    if epochs == 0 || lr <= 0.0 || batch_size == 0 {
        return Err(SimError::Config(format!(
            "bad training hyperparameters: epochs={epochs} lr={lr} batch={batch_size}"
        )));
    }
    let n = features.len();
    let b = batch_size.min(n);
    let mut w = w0.clone();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = rng_for("sgd-shuffle", &[seed]);
    let mut bx: Vec<Vec<f64>> = Vec::with_capacity(b);
    let mut by: Vec<usize> = Vec::with_capacity(b);
    for _ in 0..epochs {
        shuffle(&mut order, &mut rng);
        for chunk in order.chunks(b) {
            bx.clear();
            by.clear();
            for &i in chunk {
                bx.push(features[i].clone());
                by.push(labels[i]);
            }
            let batch = Minibatch::new(&bx, &by)?;
            let g = eval_gradient(spec, &w, &batch)?;
            for (wi, gi) in w.values.iter_mut().zip(g.values.iter()) {
                *wi -= lr * gi;
            }
        }
    }
    Ok(w)
}

/// Fisher-Yates driven by the caller's stream (rand's SliceRandom would also
/// do; spelled out so the exact draw sequence is pinned for reproducibility).
fn shuffle<R: Rng>(xs: &mut [usize], rng: &mut R) {
    for i in (1..xs.len()).rev() {
        let j = rng.gen_range(0..=i);
        xs.swap(i, j);
    }
}
