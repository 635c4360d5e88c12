//! Two-layer ReLU classifier heads trained with Adam on softmax
//! cross-entropy, and the ν-information leakage estimate.

use std::path::Path;

use nalgebra::DVector;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataio::{self};
use crate::error::{Error, Result};
use crate::{linalg, seed, Matrix};

pub const DEFAULT_HIDDEN: usize = 128;

/// `logits = relu(x·W1 + b1)·W2 + b2`, acting on row vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpHead {
    pub w1: Matrix,
    pub b1: DVector<f64>,
    pub w2: Matrix,
    pub b2: DVector<f64>,
}

/// Parameter-shaped gradient (or Adam moment) buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub w1: Matrix,
    pub b1: DVector<f64>,
    pub w2: Matrix,
    pub b2: DVector<f64>,
}

impl Gradients {
    fn zeros_like(head: &MlpHead) -> Self {
        Self {
            w1: Matrix::zeros(head.w1.nrows(), head.w1.ncols()),
            b1: DVector::zeros(head.b1.len()),
            w2: Matrix::zeros(head.w2.nrows(), head.w2.ncols()),
            b2: DVector::zeros(head.b2.len()),
        }
    }

    fn slices(&self) -> [&[f64]; 4] {
        [self.w1.as_slice(), self.b1.as_slice(), self.w2.as_slice(), self.b2.as_slice()]
    }

    fn slices_mut(&mut self) -> [&mut [f64]; 4] {
        [self.w1.as_mut_slice(), self.b1.as_mut_slice(), self.w2.as_mut_slice(), self.b2.as_mut_slice()]
    }
}

pub(crate) struct ForwardCache {
    pub pre: Matrix,
    pub hidden: Matrix,
    pub logits: Matrix,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct HeadMeta {
    input_dim: usize,
    hidden: usize,
    n_classes: usize,
    activation: String,
}

impl MlpHead {
    /// Kaiming-normal layer weights, zero biases.
    pub fn init(input_dim: usize, hidden: usize, n_classes: usize, seed: u64) -> Self {
        let mut rng = seed::stream(seed, "mlp-init");
        let mut w1 = linalg::random_normal(input_dim, hidden, &mut rng);
        w1 *= (2.0 / input_dim as f64).sqrt();
        let mut w2 = linalg::random_normal(hidden, n_classes, &mut rng);
        w2 *= (1.0 / hidden as f64).sqrt();
        Self { w1, b1: DVector::zeros(hidden), w2, b2: DVector::zeros(n_classes) }
    }

    pub fn from_parameters(w1: Matrix, b1: DVector<f64>, w2: Matrix, b2: DVector<f64>) -> Result<Self> {
        if w1.ncols() != b1.len() || w2.nrows() != w1.ncols() || w2.ncols() != b2.len() {
            return Err(Error::Shape(format!(
                "inconsistent head shapes: W1 {}×{}, b1 {}, W2 {}×{}, b2 {}",
                w1.nrows(),
                w1.ncols(),
                b1.len(),
                w2.nrows(),
                w2.ncols(),
                b2.len()
            )));
        }
        if w1.iter().chain(b1.iter()).chain(w2.iter()).chain(b2.iter()).any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite head parameter"));
        }
        Ok(Self { w1, b1, w2, b2 })
    }

    /// An exact linear map `x·w + b` (w is d×C), encoded with hidden units
    /// `relu(x) − relu(−x)`.
    pub fn from_linear(w: &Matrix, b: &DVector<f64>) -> Result<Self> {
        let d = w.nrows();
        let mut w1 = Matrix::zeros(d, 2 * d);
        let mut w2 = Matrix::zeros(2 * d, w.ncols());
        for i in 0..d {
            w1[(i, i)] = 1.0;
            w1[(i, d + i)] = -1.0;
            w2.row_mut(i).copy_from(&w.row(i));
            w2.row_mut(d + i).copy_from(&(-w.row(i)));
        }
        Self::from_parameters(w1, DVector::zeros(2 * d), w2, b.clone())
    }

    pub fn input_dim(&self) -> usize {
        self.w1.nrows()
    }

    pub fn hidden(&self) -> usize {
        self.w1.ncols()
    }

    pub fn n_classes(&self) -> usize {
        self.w2.ncols()
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(Error::Shape(format!("input has {} columns, head expects {}", x.ncols(), self.input_dim())));
        }
        Ok(())
    }

    pub(crate) fn forward_cache(&self, x: &Matrix) -> ForwardCache {
        let mut pre = x * &self.w1;
        linalg::add_row_vector(&mut pre, &self.b1);
        let hidden = pre.map(|v| v.max(0.0));
        let mut logits = &hidden * &self.w2;
        linalg::add_row_vector(&mut logits, &self.b2);
        ForwardCache { pre, hidden, logits }
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        self.check_input(x)?;
        Ok(self.forward_cache(x).logits)
    }

    pub fn probabilities(&self, x: &Matrix) -> Result<Matrix> {
        self.forward(x).map(|l| linalg::softmax_rows(&l))
    }

    pub fn predict(&self, x: &Matrix) -> Result<Vec<usize>> {
        let logits = self.forward(x)?;
        Ok(logits.row_iter().map(|r| linalg::argmax(r.transpose().as_slice())).collect())
    }

    pub fn accuracy(&self, x: &Matrix, labels: &[usize]) -> Result<f64> {
        if labels.is_empty() {
            return Err(Error::invalid("accuracy of an empty set"));
        }
        let pred = self.predict(x)?;
        Ok(pred.iter().zip(labels).filter(|(p, y)| p == y).count() as f64 / labels.len() as f64)
    }

    /// Mean softmax cross-entropy.
    pub fn loss(&self, x: &Matrix, labels: &[usize]) -> Result<f64> {
        self.check_labels(x, labels)?;
        Ok(mean_cross_entropy(&self.forward_cache(x).logits, labels))
    }

    fn check_labels(&self, x: &Matrix, labels: &[usize]) -> Result<()> {
        self.check_input(x)?;
        if x.nrows() != labels.len() {
            return Err(Error::Shape(format!("{} rows but {} labels", x.nrows(), labels.len())));
        }
        if let Some(bad) = labels.iter().find(|&&y| y >= self.n_classes()) {
            return Err(Error::invalid(format!("label {bad} outside 0..{}", self.n_classes())));
        }
        Ok(())
    }

    /// Mean cross-entropy and its analytic gradient.
    pub fn gradient(&self, x: &Matrix, labels: &[usize]) -> Result<(f64, Gradients)> {
        self.check_labels(x, labels)?;
        let cache = self.forward_cache(x);
        let loss = mean_cross_entropy(&cache.logits, labels);
        let dlogits = cross_entropy_dlogits(&cache.logits, labels);
        Ok((loss, self.backward(x, &cache, &dlogits)))
    }

    /// Backpropagates an arbitrary `∂L/∂logits`.
    pub(crate) fn backward(&self, x: &Matrix, cache: &ForwardCache, dlogits: &Matrix) -> Gradients {
        let w2 = cache.hidden.transpose() * dlogits;
        let b2 = column_sums(dlogits);
        let mut dpre = dlogits * self.w2.transpose();
        dpre.zip_apply(&cache.pre, |g, p| {
            if p <= 0.0 {
                *g = 0.0
            }
        });
        let w1 = x.transpose() * &dpre;
        let b1 = column_sums(&dpre);
        Gradients { w1, b1, w2, b2 }
    }

    fn parameters_mut(&mut self) -> [&mut [f64]; 4] {
        [self.w1.as_mut_slice(), self.b1.as_mut_slice(), self.w2.as_mut_slice(), self.b2.as_mut_slice()]
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        dataio::save_npy(dir.join("W1.npy"), &self.w1)?;
        dataio::save_npy(dir.join("b1.npy"), &Matrix::from_row_slice(1, self.b1.len(), self.b1.as_slice()))?;
        dataio::save_npy(dir.join("W2.npy"), &self.w2)?;
        dataio::save_npy(dir.join("b2.npy"), &Matrix::from_row_slice(1, self.b2.len(), self.b2.as_slice()))?;
        let meta = HeadMeta {
            input_dim: self.input_dim(),
            hidden: self.hidden(),
            n_classes: self.n_classes(),
            activation: "relu".into(),
        };
        dataio::write_json(dir.join("meta.json"), &meta)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let meta: HeadMeta = dataio::read_json(dir.join("meta.json"))?;
        if meta.activation != "relu" {
            return Err(Error::Format(format!("unsupported activation {:?}", meta.activation)));
        }
        let vector = |m: Matrix| DVector::from_iterator(m.len(), m.iter().cloned());
        let head = Self::from_parameters(
            dataio::load_npy(dir.join("W1.npy"))?,
            vector(dataio::load_npy(dir.join("b1.npy"))?),
            dataio::load_npy(dir.join("W2.npy"))?,
            vector(dataio::load_npy(dir.join("b2.npy"))?),
        )?;
        if head.input_dim() != meta.input_dim || head.hidden() != meta.hidden || head.n_classes() != meta.n_classes {
            return Err(Error::Shape("head weights disagree with meta.json".into()));
        }
        Ok(head)
    }
}

fn column_sums(m: &Matrix) -> DVector<f64> {
    DVector::from_iterator(m.ncols(), m.column_iter().map(|c| c.sum()))
}

pub(crate) fn mean_cross_entropy(logits: &Matrix, labels: &[usize]) -> f64 {
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| -linalg::log_softmax_at(logits.row(i).transpose().as_slice(), y))
        .sum();
    total / labels.len() as f64
}

/// `(softmax − onehot) / n`.
pub(crate) fn cross_entropy_dlogits(logits: &Matrix, labels: &[usize]) -> Matrix {
    let mut d = linalg::softmax_rows(logits);
    let n = labels.len() as f64;
    for (i, &y) in labels.iter().enumerate() {
        d[(i, y)] -= 1.0;
    }
    d / n
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Learning rates tried in turn; the head with the best validation
    /// accuracy wins, ties going to the earlier rate.
    pub lr_grid: Vec<f64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub hidden: usize,
    pub patience: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_grid: vec![1e-5, 1e-4, 1e-3, 1e-2, 1e-1],
            epochs: 50,
            batch_size: 32,
            hidden: DEFAULT_HIDDEN,
            patience: 3,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn with_lr(mut self, lr: f64) -> Self {
        self.lr_grid = vec![lr];
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.lr_grid.is_empty() || self.lr_grid.iter().any(|lr| !(*lr > 0.0 && lr.is_finite())) {
            return Err(Error::invalid("learning rates must be positive and finite"));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.hidden == 0 {
            return Err(Error::invalid("epochs, batch_size and hidden must be at least 1"));
        }
        Ok(())
    }
}

/// Labelled rows: a feature matrix and one class index per row.
#[derive(Debug, Clone, Copy)]
pub struct Labeled<'a> {
    pub x: &'a Matrix,
    pub y: &'a [usize],
}

impl<'a> Labeled<'a> {
    pub fn new(x: &'a Matrix, y: &'a [usize]) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(Error::Shape(format!("{} rows but {} labels", x.nrows(), y.len())));
        }
        Ok(Self { x, y })
    }
}

/// Extra loss terms applied during training, expressed as an addition to
/// `∂L/∂logits` of the current mini-batch.
pub trait GradientHook {
    /// `batch` indexes rows of the training set; `logits` and `dlogits` are
    /// batch-aligned. `head` holds the parameters before this step.
    fn adjust(&mut self, head: &MlpHead, batch: &[usize], logits: &Matrix, dlogits: &mut Matrix) -> Result<()>;
}

/// The no-op hook.
pub struct NoHook;

impl GradientHook for NoHook {
    fn adjust(&mut self, _: &MlpHead, _: &[usize], _: &Matrix, _: &mut Matrix) -> Result<()> {
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOutcome {
    pub head: MlpHead,
    pub lr: f64,
    pub valid_accuracy: f64,
    pub epochs_run: usize,
}

struct Adam {
    m: Gradients,
    v: Gradients,
    t: i32,
}

impl Adam {
    fn new(head: &MlpHead) -> Self {
        Self { m: Gradients::zeros_like(head), v: Gradients::zeros_like(head), t: 0 }
    }

    fn step(&mut self, head: &mut MlpHead, grad: &Gradients, lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t);
        let c2 = 1.0 - cfg.beta2.powi(self.t);
        let params = head.parameters_mut();
        let ms = self.m.slices_mut();
        let vs = self.v.slices_mut();
        for (((p, m), v), g) in params.into_iter().zip(ms).zip(vs).zip(grad.slices()) {
            for i in 0..p.len() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.eps);
            }
        }
    }
}

fn check_training_set(train: &Labeled, n_classes: usize) -> Result<()> {
    if train.y.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    if let Some(bad) = train.y.iter().find(|&&y| y >= n_classes) {
        return Err(Error::invalid(format!("label {bad} outside 0..{n_classes}")));
    }
    if train.y.iter().all(|&y| y == train.y[0]) {
        return Err(Error::invalid(format!("training set contains only class {}", train.y[0])));
    }
    Ok(())
}

/// Trains one head at a single learning rate with early stopping on
/// validation accuracy, returning the best epoch's parameters.
pub fn fit(
    train: Labeled,
    valid: Labeled,
    n_classes: usize,
    lr: f64,
    cfg: &TrainConfig,
    hook: &mut dyn GradientHook,
) -> Result<FitOutcome> {
    cfg.validate()?;
    check_training_set(&train, n_classes)?;
    if valid.y.is_empty() {
        return Err(Error::invalid("empty validation set"));
    }
    let mut head = MlpHead::init(train.x.ncols(), cfg.hidden, n_classes, cfg.seed);
    head.check_labels(valid.x, valid.y)?;
    let mut adam = Adam::new(&head);
    let mut shuffle_rng = seed::stream(cfg.seed, "mlp-shuffle");
    let mut order: Vec<usize> = (0..train.y.len()).collect();

    let mut best = (head.accuracy(valid.x, valid.y)?, head.clone());
    let mut stale = 0;
    let mut epochs_run = 0;
    for _ in 0..cfg.epochs {
        epochs_run += 1;
        order.shuffle(&mut shuffle_rng);
        for batch in order.chunks(cfg.batch_size) {
            let x = train.x.select_rows(batch);
            let y: Vec<usize> = batch.iter().map(|&i| train.y[i]).collect();
            let cache = head.forward_cache(&x);
            let mut dlogits = cross_entropy_dlogits(&cache.logits, &y);
            hook.adjust(&head, batch, &cache.logits, &mut dlogits)?;
            let grad = head.backward(&x, &cache, &dlogits);
            adam.step(&mut head, &grad, lr, cfg);
        }
        if head.w1.iter().chain(head.w2.iter()).any(|v| !v.is_finite()) {
            break;
        }
        let acc = head.accuracy(valid.x, valid.y)?;
        if acc > best.0 {
            best = (acc, head.clone());
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    Ok(FitOutcome { head: best.1, lr, valid_accuracy: best.0, epochs_run })
}

/// Runs [`fit`] for every rate in the grid and keeps the best validation
/// accuracy.
pub fn train_head(train: Labeled, valid: Labeled, n_classes: usize, cfg: &TrainConfig) -> Result<FitOutcome> {
    train_head_with(train, valid, n_classes, cfg, &mut || Box::new(NoHook))
}

/// [`train_head`] with a fresh hook per learning rate.
pub fn train_head_with<'h>(
    train: Labeled,
    valid: Labeled,
    n_classes: usize,
    cfg: &TrainConfig,
    make_hook: &mut dyn FnMut() -> Box<dyn GradientHook + 'h>,
) -> Result<FitOutcome> {
    cfg.validate()?;
    let mut best: Option<FitOutcome> = None;
    for &lr in &cfg.lr_grid {
        let mut hook = make_hook();
        let outcome = fit(train, valid, n_classes, lr, cfg, hook.as_mut())?;
        if best.as_ref().is_none_or(|b| outcome.valid_accuracy > b.valid_accuracy) {
            best = Some(outcome);
        }
    }
    Ok(best.expect("grid is non-empty"))
}

/// Empirical entropy of a label marginal, in nats.
pub fn marginal_entropy(labels: &[usize]) -> f64 {
    let n = labels.len() as f64;
    let mut counts = std::collections::BTreeMap::new();
    for &y in labels {
        *counts.entry(y).or_insert(0usize) += 1;
    }
    counts.values().map(|&c| c as f64 / n).map(|p| -p * p.ln()).sum()
}

/// `max(0, H(g) − CE)` for a group probe on held-out rows, in nats.
pub fn nu_information(head_g: &MlpHead, x_test: &Matrix, g_test: &[usize]) -> Result<f64> {
    if g_test.is_empty() {
        return Err(Error::invalid("empty test set"));
    }
    let ce = head_g.loss(x_test, g_test)?;
    Ok((marginal_entropy(g_test) - ce).max(0.0))
}
