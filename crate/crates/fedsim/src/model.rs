//! Differentiable classifiers over flat parameter vectors.
//!
//! Three model kinds share one contract (loss / grad / predict over a
//! [`ParamVec`] and a [`Batch`]):
//!
//! - `Logistic`: multinomial logistic regression, softmax cross-entropy.
//! - `Mlp`: one ReLU hidden layer, softmax cross-entropy.
//! - `Quadratic`: `0.5 * curvature * ||w||^2`, ignores the batch. Used as an
//!   analytic oracle in tests and diagnostics; its gradient and smoothness
//!   constant are known in closed form.
//!
//! Parameter layout is layer by layer, weights (row-major, one row per
//! output unit) then biases. Losses and gradients are means over the batch,
//! accumulated in row order.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::numkit::{uniform_in, ParamVec, RngStream};

/// A mini-batch: `rows x input_dim` features plus integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    features: Vec<f64>,
    input_dim: usize,
    labels: Vec<usize>,
}

impl Batch {
    pub fn new(features: Vec<f64>, input_dim: usize, labels: Vec<usize>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Empty("batch"));
        }
        if input_dim == 0 {
            return Err(Error::invalid_argument("input_dim", "must be >= 1"));
        }
        if features.len() != labels.len() * input_dim {
            return Err(Error::DimensionMismatch {
                context: "batch features",
                expected: labels.len() * input_dim,
                got: features.len(),
            });
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid_argument("features", "non-finite value"));
        }
        Ok(Batch {
            features,
            input_dim,
            labels,
        })
    }

    pub fn rows(&self) -> usize {
        self.labels.len()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn feature_row(&self, i: usize) -> &[f64] {
        &self.features[i * self.input_dim..(i + 1) * self.input_dim]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// New batch with rows reordered by `perm` (perm[i] = source row).
    pub fn permuted(&self, perm: &[usize]) -> Result<Batch> {
        let mut features = Vec::with_capacity(self.features.len());
        let mut labels = Vec::with_capacity(self.labels.len());
        for &src in perm {
            if src >= self.rows() {
                return Err(Error::invalid_argument("perm", "row index out of range"));
            }
            features.extend_from_slice(self.feature_row(src));
            labels.push(self.labels[src]);
        }
        Batch::new(features, self.input_dim, labels)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Logistic {
        input_dim: usize,
        num_classes: usize,
    },
    Mlp {
        input_dim: usize,
        hidden: usize,
        num_classes: usize,
    },
    Quadratic {
        dim: usize,
        curvature: f64,
    },
}

/// Model whose loss is `0.5 * curvature * ||w||^2` regardless of data.
pub fn quadratic_test_model(d: usize, curvature: f64) -> Result<Model> {
    if d == 0 {
        return Err(Error::invalid_argument("d", "must be >= 1"));
    }
    if !(curvature > 0.0) {
        return Err(Error::invalid_argument("curvature", "must be > 0"));
    }
    Ok(Model::Quadratic { dim: d, curvature })
}

impl Model {
    pub fn logistic(input_dim: usize, num_classes: usize) -> Result<Model> {
        check_arch(input_dim, num_classes)?;
        Ok(Model::Logistic {
            input_dim,
            num_classes,
        })
    }

    pub fn mlp(input_dim: usize, hidden: usize, num_classes: usize) -> Result<Model> {
        check_arch(input_dim, num_classes)?;
        if hidden == 0 {
            return Err(Error::invalid_argument("hidden", "must be >= 1"));
        }
        Ok(Model::Mlp {
            input_dim,
            hidden,
            num_classes,
        })
    }

    pub fn param_count(&self) -> usize {
        match *self {
            Model::Logistic {
                input_dim,
                num_classes,
            } => num_classes * (input_dim + 1),
            Model::Mlp {
                input_dim,
                hidden,
                num_classes,
            } => hidden * (input_dim + 1) + num_classes * (hidden + 1),
            Model::Quadratic { dim, .. } => dim,
        }
    }

    pub fn num_classes(&self) -> usize {
        match *self {
            Model::Logistic { num_classes, .. } | Model::Mlp { num_classes, .. } => num_classes,
            Model::Quadratic { .. } => 1,
        }
    }

    /// Input width the model expects; `None` for data-free models.
    pub fn input_dim(&self) -> Option<usize> {
        match *self {
            Model::Logistic { input_dim, .. } | Model::Mlp { input_dim, .. } => Some(input_dim),
            Model::Quadratic { .. } => None,
        }
    }

    /// Parameter ranges per layer (weights and bias together), in layout
    /// order. Used by per-layer direction normalization.
    pub fn layer_spans(&self) -> Vec<Range<usize>> {
        match *self {
            Model::Logistic { .. } | Model::Quadratic { .. } => vec![0..self.param_count()],
            Model::Mlp {
                input_dim, hidden, ..
            } => {
                let first = hidden * (input_dim + 1);
                vec![0..first, first..self.param_count()]
            }
        }
    }

    /// Uniform init in `[-1/sqrt(fan_in), +1/sqrt(fan_in)]` per layer,
    /// drawn in parameter-layout order.
    pub fn init_params(&self, stream: &RngStream) -> ParamVec {
        let mut rng = stream.rng();
        let mut values = Vec::with_capacity(self.param_count());
        let mut fill = |n: usize, fan_in: usize, rng: &mut rand_chacha::ChaCha8Rng| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for _ in 0..n {
                values.push(uniform_in(rng, -bound, bound));
            }
        };
        match *self {
            Model::Logistic {
                input_dim,
                num_classes,
            } => fill(num_classes * (input_dim + 1), input_dim, &mut rng),
            Model::Mlp {
                input_dim,
                hidden,
                num_classes,
            } => {
                fill(hidden * (input_dim + 1), input_dim, &mut rng);
                fill(num_classes * (hidden + 1), hidden, &mut rng);
            }
            Model::Quadratic { dim, .. } => fill(dim, dim, &mut rng),
        }
        ParamVec::from_raw(values)
    }

    /// Mean cross-entropy over the batch (quadratic: `0.5*c*||w||^2`).
    pub fn loss(&self, w: &ParamVec, batch: &Batch) -> Result<f64> {
        self.check_inputs(w, batch)?;
        match *self {
            Model::Quadratic { curvature, .. } => {
                Ok(0.5 * curvature * w.values().iter().map(|v| v * v).sum::<f64>())
            }
            Model::Logistic { num_classes, .. } => {
                let mut logits = vec![0.0; num_classes];
                let mut total = 0.0;
                for i in 0..batch.rows() {
                    logistic_logits(w.values(), batch.feature_row(i), &mut logits);
                    total += log_sum_exp(&logits) - logits[batch.labels()[i]];
                }
                Ok(total / batch.rows() as f64)
            }
            Model::Mlp {
                input_dim,
                hidden,
                num_classes,
            } => {
                let lay = MlpLayout::new(input_dim, hidden, num_classes);
                let mut scratch = MlpScratch::new(hidden, num_classes);
                let mut total = 0.0;
                for i in 0..batch.rows() {
                    lay.forward(w.values(), batch.feature_row(i), &mut scratch);
                    total += log_sum_exp(&scratch.logits) - scratch.logits[batch.labels()[i]];
                }
                Ok(total / batch.rows() as f64)
            }
        }
    }

    /// Exact gradient of [`Model::loss`] with respect to `w`.
    pub fn grad(&self, w: &ParamVec, batch: &Batch) -> Result<ParamVec> {
        self.check_inputs(w, batch)?;
        match *self {
            Model::Quadratic { curvature, .. } => Ok(w.scaled(curvature)),
            Model::Logistic {
                input_dim,
                num_classes,
            } => {
                let mut g = vec![0.0; self.param_count()];
                let mut logits = vec![0.0; num_classes];
                let inv_b = 1.0 / batch.rows() as f64;
                for i in 0..batch.rows() {
                    let x = batch.feature_row(i);
                    logistic_logits(w.values(), x, &mut logits);
                    let lse = log_sum_exp(&logits);
                    for c in 0..num_classes {
                        let p = (logits[c] - lse).exp();
                        let dl = (p - if c == batch.labels()[i] { 1.0 } else { 0.0 }) * inv_b;
                        let row = &mut g[c * input_dim..(c + 1) * input_dim];
                        for (gj, xj) in row.iter_mut().zip(x) {
                            *gj += dl * xj;
                        }
                        g[num_classes * input_dim + c] += dl;
                    }
                }
                Ok(ParamVec::from_raw(g))
            }
            Model::Mlp {
                input_dim,
                hidden,
                num_classes,
            } => {
                let lay = MlpLayout::new(input_dim, hidden, num_classes);
                let mut scratch = MlpScratch::new(hidden, num_classes);
                let mut g = vec![0.0; self.param_count()];
                let inv_b = 1.0 / batch.rows() as f64;
                for i in 0..batch.rows() {
                    let x = batch.feature_row(i);
                    lay.forward(w.values(), x, &mut scratch);
                    let lse = log_sum_exp(&scratch.logits);
                    for c in 0..num_classes {
                        let p = (scratch.logits[c] - lse).exp();
                        scratch.dlogits[c] =
                            (p - if c == batch.labels()[i] { 1.0 } else { 0.0 }) * inv_b;
                    }
                    lay.backward(w.values(), x, &scratch, &mut g);
                }
                Ok(ParamVec::from_raw(g))
            }
        }
    }

    /// Argmax class per row; ties break toward the lowest class index.
    pub fn predict(&self, w: &ParamVec, batch: &Batch) -> Result<Vec<usize>> {
        self.check_inputs(w, batch)?;
        match *self {
            Model::Quadratic { .. } => Ok(vec![0; batch.rows()]),
            Model::Logistic { num_classes, .. } => {
                let mut logits = vec![0.0; num_classes];
                let mut out = Vec::with_capacity(batch.rows());
                for i in 0..batch.rows() {
                    logistic_logits(w.values(), batch.feature_row(i), &mut logits);
                    out.push(argmax(&logits));
                }
                Ok(out)
            }
            Model::Mlp {
                input_dim,
                hidden,
                num_classes,
            } => {
                let lay = MlpLayout::new(input_dim, hidden, num_classes);
                let mut scratch = MlpScratch::new(hidden, num_classes);
                let mut out = Vec::with_capacity(batch.rows());
                for i in 0..batch.rows() {
                    lay.forward(w.values(), batch.feature_row(i), &mut scratch);
                    out.push(argmax(&scratch.logits));
                }
                Ok(out)
            }
        }
    }

    fn check_inputs(&self, w: &ParamVec, batch: &Batch) -> Result<()> {
        if w.len() != self.param_count() {
            return Err(Error::DimensionMismatch {
                context: "model parameters",
                expected: self.param_count(),
                got: w.len(),
            });
        }
        if let Some(dim) = self.input_dim() {
            if batch.input_dim() != dim {
                return Err(Error::DimensionMismatch {
                    context: "batch input_dim",
                    expected: dim,
                    got: batch.input_dim(),
                });
            }
            if let Some(&bad) = batch.labels().iter().find(|&&l| l >= self.num_classes()) {
                return Err(Error::invalid_argument(
                    "batch.labels",
                    format!("label {bad} out of range for {} classes", self.num_classes()),
                ));
            }
        }
        Ok(())
    }
}

fn check_arch(input_dim: usize, num_classes: usize) -> Result<()> {
    if input_dim == 0 {
        return Err(Error::invalid_argument("input_dim", "must be >= 1"));
    }
    if num_classes < 2 {
        return Err(Error::invalid_argument("num_classes", "must be >= 2"));
    }
    Ok(())
}

// Logistic layout: W (classes x input, row-major) then bias (classes).
fn logistic_logits(w: &[f64], x: &[f64], logits: &mut [f64]) {
    let classes = logits.len();
    let input_dim = x.len();
    for (c, l) in logits.iter_mut().enumerate() {
        let row = &w[c * input_dim..(c + 1) * input_dim];
        let mut acc = w[classes * input_dim + c];
        for (wj, xj) in row.iter().zip(x) {
            acc += wj * xj;
        }
        *l = acc;
    }
}

struct MlpLayout {
    input_dim: usize,
    hidden: usize,
    num_classes: usize,
    o_b1: usize,
    o_w2: usize,
    o_b2: usize,
}

struct MlpScratch {
    pre: Vec<f64>,
    act: Vec<f64>,
    logits: Vec<f64>,
    dlogits: Vec<f64>,
}

impl MlpScratch {
    fn new(hidden: usize, num_classes: usize) -> Self {
        MlpScratch {
            pre: vec![0.0; hidden],
            act: vec![0.0; hidden],
            logits: vec![0.0; num_classes],
            dlogits: vec![0.0; num_classes],
        }
    }
}

impl MlpLayout {
    fn new(input_dim: usize, hidden: usize, num_classes: usize) -> Self {
        let o_b1 = hidden * input_dim;
        let o_w2 = o_b1 + hidden;
        let o_b2 = o_w2 + num_classes * hidden;
        MlpLayout {
            input_dim,
            hidden,
            num_classes,
            o_b1,
            o_w2,
            o_b2,
        }
    }

    fn forward(&self, w: &[f64], x: &[f64], s: &mut MlpScratch) {
        for r in 0..self.hidden {
            let row = &w[r * self.input_dim..(r + 1) * self.input_dim];
            let mut acc = w[self.o_b1 + r];
            for (wj, xj) in row.iter().zip(x) {
                acc += wj * xj;
            }
            s.pre[r] = acc;
            s.act[r] = acc.max(0.0);
        }
        for c in 0..self.num_classes {
            let row = &w[self.o_w2 + c * self.hidden..self.o_w2 + (c + 1) * self.hidden];
            let mut acc = w[self.o_b2 + c];
            for (wr, ar) in row.iter().zip(&s.act) {
                acc += wr * ar;
            }
            s.logits[c] = acc;
        }
    }

    // Accumulates one row's gradient contribution into `g`; `s.dlogits`
    // must already hold the per-logit loss derivative.
    fn backward(&self, w: &[f64], x: &[f64], s: &MlpScratch, g: &mut [f64]) {
        for c in 0..self.num_classes {
            let dl = s.dlogits[c];
            g[self.o_b2 + c] += dl;
            let row = &mut g[self.o_w2 + c * self.hidden..self.o_w2 + (c + 1) * self.hidden];
            for (gr, ar) in row.iter_mut().zip(&s.act) {
                *gr += dl * ar;
            }
        }
        for r in 0..self.hidden {
            if s.pre[r] <= 0.0 {
                continue;
            }
            let mut dact = 0.0;
            for c in 0..self.num_classes {
                dact += s.dlogits[c] * w[self.o_w2 + c * self.hidden + r];
            }
            g[self.o_b1 + r] += dact;
            let row = &mut g[r * self.input_dim..(r + 1) * self.input_dim];
            for (gj, xj) in row.iter_mut().zip(x) {
                *gj += dact * xj;
            }
        }
    }
}

/// Central finite-difference gradient, `(loss(w+h e_j) - loss(w-h e_j)) / 2h`
/// per coordinate. Only calls [`Model::loss`], so it serves as an
/// independent oracle for [`Model::grad`]. O(d) loss evaluations; test use
/// only.
pub fn finite_difference_grad(
    model: &Model,
    w: &ParamVec,
    batch: &Batch,
    h: f64,
) -> Result<ParamVec> {
    if !(h > 0.0) {
        return Err(Error::invalid_argument("h", "must be > 0"));
    }
    let mut g = Vec::with_capacity(w.len());
    for j in 0..w.len() {
        let mut plus = w.values().to_vec();
        let mut minus = w.values().to_vec();
        plus[j] += h;
        minus[j] -= h;
        let lp = model.loss(&ParamVec::from_raw(plus), batch)?;
        let lm = model.loss(&ParamVec::from_raw(minus), batch)?;
        g.push((lp - lm) / (2.0 * h));
    }
    ParamVec::new(g)
}

fn log_sum_exp(logits: &[f64]) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln()
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}
