//! Fair training with a per-class Wasserstein-2 penalty between the score
//! distributions of the two groups.
//!
//! For every regularized class `k`, the scores are the softmax outputs on
//! `k` of the instances whose true class is `k`. The penalty's derivative
//! with respect to each mini-batch score is approximated on a discrete grid
//! and added to the cross-entropy gradient.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::IndexedRandom;
use serde::{Deserialize, Serialize};

use crate::dataio::{split_indices, LabeledDataset, SplitSpec};
use crate::error::{Error, Result};
use crate::fairmetrics::{detect_biased_classes, gaps, Metric, PredictionTable, DEFAULT_MIN_SUPPORT};
use crate::probes::{fit, FitOutcome, GradientHook, Labeled, MlpHead, NoHook, TrainConfig};
use crate::{linalg, seed, Matrix};

pub const DEFAULT_GRID: usize = 100;
pub const DEFAULT_AUX: usize = 16;
pub const DEFAULT_TAU: f64 = 0.1;
/// Leading step factor of the pseudo-gradient. With 2 the pseudo-gradient
/// of a one-point group equals the exact derivative of [`w2_squared`].
pub const DELTA_TAU: f64 = 2.0;

/// Squared 2-Wasserstein distance between two empirical samples.
///
/// Both inverse CDFs are step functions, `H⁻¹(τ) = x₍⌈τn⌉₎` on sorted
/// samples, so the integral is an exact sum over the merged breakpoints
/// `{i/n₀} ∪ {j/n₁}`.
pub fn w2_squared(scores0: &[f64], scores1: &[f64]) -> Result<f64> {
    if scores0.is_empty() || scores1.is_empty() {
        return Err(Error::invalid("w2 needs at least one score in each group"));
    }
    if scores0.iter().chain(scores1).any(|v| !v.is_finite()) {
        return Err(Error::invalid("w2 scores must be finite"));
    }
    let sorted = |s: &[f64]| {
        let mut v = s.to_vec();
        v.sort_by(f64::total_cmp);
        v
    };
    let (a, b) = (sorted(scores0), sorted(scores1));
    let (na, nb) = (a.len(), b.len());
    let (mut i, mut j) = (0, 0);
    let mut prev = 0.0;
    let mut total = 0.0;
    while i < na && j < nb {
        // Next breakpoint, compared as integers to avoid rounding ties.
        let (ea, eb) = ((i + 1) * nb, (j + 1) * na);
        let end = ea.min(eb) as f64 / (na * nb) as f64;
        let d = a[i] - b[j];
        total += d * d * (end - prev);
        prev = end;
        if ea <= eb {
            i += 1;
        }
        if eb <= ea {
            j += 1;
        }
    }
    Ok(total)
}

/// Discrete CDFs of one class's scores in the two groups on a shared grid
/// `η^j = min + jΔ`, `j = 0..=J`.
///
/// `H_s^j` is the fraction of group-`s` scores whose bin index is below
/// `j`, where a score `v` falls in bin `⌊(v − min)/Δ⌋` clamped to `J − 1`.
/// Hence `H_s^0 = 0` and `H_s^J = 1`. When all scores are equal the grid
/// collapses to one point and every pseudo-gradient is zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteCdf {
    pub grid: Vec<f64>,
    pub h: [Vec<f64>; 2],
    /// Normalising counts `n_{k,s}`: training instances of the class in
    /// each group.
    pub counts: [usize; 2],
}

impl DiscreteCdf {
    pub fn new(scores0: &[f64], scores1: &[f64], counts: [usize; 2], steps: usize) -> Result<Self> {
        if steps < 2 {
            return Err(Error::invalid(format!("grid needs at least 2 steps, got {steps}")));
        }
        if scores0.is_empty() || scores1.is_empty() {
            return Err(Error::invalid("discrete CDF needs scores in both groups"));
        }
        if scores0.iter().chain(scores1).any(|v| !v.is_finite()) {
            return Err(Error::invalid("scores must be finite"));
        }
        let (lo, hi) = scores0.iter().chain(scores1).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        if hi <= lo {
            return Ok(Self { grid: vec![lo], h: [vec![1.0], vec![1.0]], counts });
        }
        let delta = (hi - lo) / steps as f64;
        let grid: Vec<f64> = (0..=steps).map(|j| lo + j as f64 * delta).collect();
        let spacing = grid[1] - grid[0];
        let bin = |v: f64| locate(lo, spacing, steps, v);
        let cumulative = |scores: &[f64]| {
            let mut counts = vec![0usize; steps];
            for &v in scores {
                counts[bin(v)] += 1;
            }
            let mut h = Vec::with_capacity(steps + 1);
            let mut below = 0;
            h.push(0.0);
            for c in counts {
                below += c;
                h.push(below as f64 / scores.len() as f64);
            }
            h
        };
        Ok(Self { grid, h: [cumulative(scores0), cumulative(scores1)], counts })
    }

    pub fn is_degenerate(&self) -> bool {
        self.grid.len() < 2
    }

    pub fn diagnostic(&self) -> Option<String> {
        self.is_degenerate().then(|| format!("all scores equal {}; pseudo-gradients set to 0", self.grid[0]))
    }

    pub fn steps(&self) -> usize {
        self.grid.len() - 1
    }

    pub fn spacing(&self) -> f64 {
        if self.is_degenerate() {
            0.0
        } else {
            self.grid[1] - self.grid[0]
        }
    }

    /// Bin `j` with `η^j ≤ v < η^{j+1}`, clamped to the grid.
    pub fn bin(&self, v: f64) -> usize {
        if self.is_degenerate() {
            return 0;
        }
        locate(self.grid[0], self.spacing(), self.steps(), v)
    }

    /// `H_s(v)`, taken at the middle of the CDF jump of `v`'s bin.
    pub fn level(&self, s: usize, v: f64) -> f64 {
        if self.is_degenerate() {
            return 1.0;
        }
        let j = self.bin(v);
        0.5 * (self.h[s][j] + self.h[s][j + 1])
    }

    /// Piecewise-linear `H_s⁻¹(t)` through the points `(η^j, H_s^j)`.
    pub fn inverse(&self, s: usize, t: f64) -> f64 {
        let h = &self.h[s];
        if t <= h[0] {
            return self.grid[0];
        }
        let Some(j) = h.iter().position(|&hj| hj >= t) else {
            return self.grid[self.grid.len() - 1];
        };
        self.grid[j - 1] + self.spacing() * (t - h[j - 1]) / (h[j] - h[j - 1])
    }

    /// `cor_s(v) = H_s⁻¹(H_{1−s}(v))`.
    pub fn cor(&self, s: usize, v: f64) -> f64 {
        self.inverse(s, self.level(1 - s, v))
    }
}

fn locate(lo: f64, spacing: f64, steps: usize, v: f64) -> usize {
    let j = ((v - lo) / spacing).floor();
    if j <= 0.0 {
        0
    } else {
        (j as usize).min(steps - 1)
    }
}

/// Pseudo-derivative of the discretized squared distance with respect to a
/// score `v` of group `s` that is part of `cdf`:
/// `Δτ (v − cor_{1−s}(v)) / (n_{k,s} (H_s^{j+1} − H_s^j))`.
///
/// Zero on a degenerate grid, and zero when `v`'s bin holds no group-`s`
/// mass (a score that was not part of the CDF).
pub fn w2_pseudo_gradient(v: f64, s: usize, cdf: &DiscreteCdf) -> Result<f64> {
    if s > 1 {
        return Err(Error::invalid(format!("group {s} is not binary")));
    }
    if cdf.is_degenerate() {
        return Ok(0.0);
    }
    let j = cdf.bin(v);
    let mass = cdf.counts[s] as f64 * (cdf.h[s][j + 1] - cdf.h[s][j]);
    if mass <= 0.0 {
        return Ok(0.0);
    }
    Ok(DELTA_TAU * (v - cdf.cor(1 - s, v)) / mass)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct W2Config {
    /// Weight per regularized class. Classes absent from the map, or with
    /// weight 0, are not regularized.
    pub lambdas: BTreeMap<usize, f64>,
    /// Auxiliary scores drawn per group and class at each step.
    pub m: usize,
    /// Grid steps `J`.
    pub grid: usize,
    /// TPR-gap threshold for detecting classes to regularize.
    pub tau: f64,
    pub min_support: usize,
}

impl Default for W2Config {
    fn default() -> Self {
        Self { lambdas: BTreeMap::new(), m: DEFAULT_AUX, grid: DEFAULT_GRID, tau: DEFAULT_TAU, min_support: DEFAULT_MIN_SUPPORT }
    }
}

impl W2Config {
    pub fn with_lambda(mut self, class: usize, lambda: f64) -> Self {
        self.lambdas.insert(class, lambda);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if let Some((k, l)) = self.lambdas.iter().find(|(_, l)| !(**l >= 0.0 && l.is_finite())) {
            return Err(Error::invalid(format!("lambda for class {k} must be finite and non-negative, got {l}")));
        }
        if self.m == 0 {
            return Err(Error::invalid("m must be at least 1"));
        }
        if self.grid < 2 {
            return Err(Error::invalid("grid must have at least 2 steps"));
        }
        if self.tau.is_nan() || self.tau < 0.0 {
            return Err(Error::invalid("tau must be non-negative"));
        }
        Ok(())
    }

    /// Classes with a positive weight.
    pub fn active(&self) -> Vec<(usize, f64)> {
        self.lambdas.iter().filter(|(_, l)| **l > 0.0).map(|(k, l)| (*k, *l)).collect()
    }

    /// `λ_k` times the pseudo-gradient; zero for unregularized classes.
    pub fn class_gradient(&self, class: usize, v: f64, s: usize, cdf: &DiscreteCdf) -> Result<f64> {
        match self.lambdas.get(&class) {
            Some(&l) if l > 0.0 => Ok(l * w2_pseudo_gradient(v, s, cdf)?),
            _ => Ok(0.0),
        }
    }
}

/// Labelled rows with a binary group per row.
#[derive(Debug, Clone, Copy)]
pub struct Grouped<'a> {
    pub x: &'a Matrix,
    pub y: &'a [usize],
    pub g: &'a [usize],
}

impl<'a> Grouped<'a> {
    pub fn new(x: &'a Matrix, y: &'a [usize], g: &'a [usize]) -> Result<Self> {
        if x.nrows() != y.len() || y.len() != g.len() {
            return Err(Error::Shape(format!("{} rows, {} labels, {} groups", x.nrows(), y.len(), g.len())));
        }
        if let Some(bad) = g.iter().find(|&&s| s > 1) {
            return Err(Error::invalid(format!("group {bad} is not binary")));
        }
        Ok(Self { x, y, g })
    }

    pub fn labeled(&self) -> Labeled<'a> {
        Labeled { x: self.x, y: self.y }
    }

    pub fn table(&self, head: &MlpHead, n_classes: usize) -> Result<PredictionTable> {
        PredictionTable::new(self.y.to_vec(), head.predict(self.x)?, self.g.to_vec(), n_classes)
    }
}

/// Owned rows of one split, viewable as [`Grouped`].
#[derive(Debug, Clone, PartialEq)]
pub struct GroupedRows {
    pub x: Matrix,
    pub y: Vec<usize>,
    pub g: Vec<usize>,
}

impl GroupedRows {
    pub fn select(x: &Matrix, ds: &LabeledDataset, rows: &[usize]) -> Self {
        let (y, g) = (ds.labels(), ds.groups());
        Self { x: x.select_rows(rows), y: rows.iter().map(|&i| y[i]).collect(), g: rows.iter().map(|&i| g[i]).collect() }
    }

    pub fn view(&self) -> Result<Grouped<'_>> {
        Grouped::new(&self.x, &self.y, &self.g)
    }
}

/// Seeded train/validation/test split of features and labels.
pub fn split_rows(x: &Matrix, ds: &LabeledDataset, spec: &SplitSpec) -> Result<[GroupedRows; 3]> {
    if x.nrows() != ds.len() {
        return Err(Error::Shape(format!("{} feature rows but {} instances", x.nrows(), ds.len())));
    }
    let s = split_indices(ds.len(), spec)?;
    Ok([GroupedRows::select(x, ds, &s.train), GroupedRows::select(x, ds, &s.valid), GroupedRows::select(x, ds, &s.test)])
}

/// Counters gathered while training with the penalty.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct W2Diagnostics {
    /// Class updates applied (one per regularized class present in a batch).
    pub regularized_steps: usize,
    /// Batches without any regularized-class instance.
    pub skipped_batches: usize,
    /// Class updates dropped because all scores were equal.
    pub degenerate_grids: usize,
}

/// Adds the λ-weighted pseudo-gradients to the mini-batch logit gradients.
pub struct W2Hook<'a> {
    train: Grouped<'a>,
    active: Vec<(usize, f64)>,
    /// Training rows per `(class, group)`.
    pools: BTreeMap<(usize, usize), Vec<usize>>,
    m: usize,
    grid: usize,
    rng: seed::Rng,
    in_batch: Vec<bool>,
    pub diagnostics: W2Diagnostics,
}

impl<'a> W2Hook<'a> {
    pub fn new(train: Grouped<'a>, cfg: &W2Config, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let active = cfg.active();
        let mut pools: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
        for (i, (&y, &s)) in train.y.iter().zip(train.g).enumerate() {
            pools.entry((y, s)).or_default().push(i);
        }
        for &(k, _) in &active {
            for s in 0..2 {
                let n = pools.get(&(k, s)).map_or(0, Vec::len);
                if n < cfg.m {
                    return Err(Error::invalid(format!(
                        "class {k} has {n} training observations in group {s}, fewer than m = {}",
                        cfg.m
                    )));
                }
            }
        }
        Ok(Self {
            train,
            active,
            pools,
            m: cfg.m,
            grid: cfg.grid,
            rng: seed::stream(seed, "w2-aux"),
            in_batch: vec![false; train.y.len()],
            diagnostics: W2Diagnostics::default(),
        })
    }

    fn auxiliary(&mut self, k: usize, s: usize) -> Vec<usize> {
        let outside: Vec<usize> = self.pools[&(k, s)].iter().copied().filter(|&i| !self.in_batch[i]).collect();
        outside.choose_multiple(&mut self.rng, self.m).copied().collect()
    }
}

impl GradientHook for W2Hook<'_> {
    fn adjust(&mut self, head: &MlpHead, batch: &[usize], logits: &Matrix, dlogits: &mut Matrix) -> Result<()> {
        let present: Vec<(usize, f64)> =
            self.active.iter().copied().filter(|(k, _)| batch.iter().any(|&i| self.train.y[i] == *k)).collect();
        if present.is_empty() {
            self.diagnostics.skipped_batches += 1;
            return Ok(());
        }
        let probs = linalg::softmax_rows(logits);
        for &i in batch {
            self.in_batch[i] = true;
        }
        let result = (|| {
            for (k, lambda) in present {
                let members: Vec<usize> = (0..batch.len()).filter(|&b| self.train.y[batch[b]] == k).collect();
                let mut scores: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
                for &b in &members {
                    scores[self.train.g[batch[b]]].push(probs[(b, k)]);
                }
                for (s, group) in scores.iter_mut().enumerate() {
                    let aux = self.auxiliary(k, s);
                    if !aux.is_empty() {
                        let p = head.probabilities(&self.train.x.select_rows(&aux))?;
                        group.extend(p.column(k).iter());
                    }
                }
                let counts = [self.pools[&(k, 0)].len(), self.pools[&(k, 1)].len()];
                let cdf = DiscreteCdf::new(&scores[0], &scores[1], counts, self.grid)?;
                if cdf.is_degenerate() {
                    self.diagnostics.degenerate_grids += 1;
                    continue;
                }
                self.diagnostics.regularized_steps += 1;
                for &b in &members {
                    let pk = probs[(b, k)];
                    let dpk = lambda * w2_pseudo_gradient(pk, self.train.g[batch[b]], &cdf)?;
                    // Chain through the softmax: ∂p_k/∂z_j = p_k (δ_kj − p_j).
                    for j in 0..dlogits.ncols() {
                        let jac = pk * (f64::from(u8::from(j == k)) - probs[(b, j)]);
                        dlogits[(b, j)] += dpk * jac;
                    }
                }
            }
            Ok(())
        })();
        for &i in batch {
            self.in_batch[i] = false;
        }
        result
    }
}

/// Trains one head at one learning rate with the penalty of `cfg`. With no
/// active class this is exactly [`fit`] with the no-op hook.
pub fn fit_fair(
    train: Grouped,
    valid: Labeled,
    n_classes: usize,
    lr: f64,
    base: &TrainConfig,
    cfg: &W2Config,
) -> Result<(FitOutcome, W2Diagnostics)> {
    cfg.validate()?;
    if cfg.active().is_empty() {
        return Ok((fit(train.labeled(), valid, n_classes, lr, base, &mut NoHook)?, W2Diagnostics::default()));
    }
    let mut hook = W2Hook::new(train, cfg, base.seed)?;
    let outcome = fit(train.labeled(), valid, n_classes, lr, base, &mut hook)?;
    Ok((outcome, hook.diagnostics))
}

/// One line of the bias report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasRow {
    pub class: usize,
    pub tpr_gap_before: Option<f64>,
    pub tpr_gap_after: Option<f64>,
    pub accuracy_before: f64,
    pub accuracy_after: f64,
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasReport {
    pub rows: Vec<BiasRow>,
    /// Classes whose baseline TPR gap exceeded the threshold.
    pub detected: Vec<usize>,
    pub lr: f64,
    pub diagnostics: W2Diagnostics,
}

impl BiasReport {
    pub fn row(&self, class: usize) -> Option<&BiasRow> {
        self.rows.iter().find(|r| r.class == class)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        for row in &self.rows {
            w.serialize(row).map_err(|e| Error::Format(e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::dataio::write_json(path, self)
    }
}

#[derive(Debug, Clone)]
pub struct FairOutcome {
    pub baseline: FitOutcome,
    pub fair: FitOutcome,
    /// The configuration actually used, with λ filled in for detected
    /// classes.
    pub config: W2Config,
    pub report: BiasReport,
}

/// The three splits used by [`train_fair`]: training, model selection and
/// the held-out set the bias report is computed on.
#[derive(Debug, Clone, Copy)]
pub struct FairSplits<'a> {
    pub train: Grouped<'a>,
    pub valid: Grouped<'a>,
    pub test: Grouped<'a>,
}

/// What to do with λ when [`train_fair`] regularizes detected classes.
#[derive(Debug, Clone, PartialEq)]
pub enum LambdaChoice {
    /// Use the weights in the config as given; detection is skipped.
    Fixed,
    /// Detect biased classes on the validation split and pick one λ for all
    /// of them from the grid with [`tune_lambda`].
    Tune { grid: Vec<f64>, max_accuracy_drop: f64 },
}

pub const DEFAULT_LAMBDA_GRID: [f64; 8] = [0.3, 1.0, 2.0, 5.0, 10.0, 20.0, 50.0, 100.0];
pub const DEFAULT_MAX_ACCURACY_DROP: f64 = 0.04;

fn tpr_gaps(split: &Grouped, head: &MlpHead, n_classes: usize) -> Result<(Vec<Option<f64>>, f64)> {
    let table = split.table(head, n_classes)?;
    let report = gaps(&table)?;
    Ok(((0..n_classes).map(|k| report.gap(Metric::Tpr, k)).collect(), table.accuracy()))
}

/// Worst absolute TPR gap over `classes`, missing gaps counting as 0.
fn worst_gap(gaps: &[Option<f64>], classes: &[usize]) -> f64 {
    classes.iter().map(|&k| gaps[k].map_or(0.0, f64::abs)).fold(0.0, f64::max)
}

/// Trains fair heads for increasing λ, all classes in `classes` sharing the
/// weight, keeping only heads whose validation accuracy is within
/// `max_accuracy_drop` of `baseline_accuracy`.
///
/// Returns the smallest λ that brings every class of `classes` to a
/// validation |TPR gap| of at most `cfg.tau`. If none does, returns the λ
/// with the smallest worst |TPR gap| over all classes, or 0 when no head
/// meets the accuracy bound.
#[allow(clippy::too_many_arguments)]
pub fn tune_lambda(
    train: Grouped,
    valid: Grouped,
    n_classes: usize,
    lr: f64,
    base: &TrainConfig,
    cfg: &W2Config,
    classes: &[usize],
    grid: &[f64],
    baseline_accuracy: f64,
    max_accuracy_drop: f64,
) -> Result<(f64, Option<(FitOutcome, W2Diagnostics)>)> {
    let mut grid = grid.to_vec();
    grid.sort_by(f64::total_cmp);
    let all: Vec<usize> = (0..n_classes).collect();
    let mut best: Option<(f64, f64, FitOutcome, W2Diagnostics)> = None;
    for lambda in grid {
        let mut trial = cfg.clone();
        for &k in classes {
            trial.lambdas.insert(k, lambda);
        }
        let (outcome, diag) = fit_fair(train, valid.labeled(), n_classes, lr, base, &trial)?;
        let (g, acc) = tpr_gaps(&valid, &outcome.head, n_classes)?;
        if acc < baseline_accuracy - max_accuracy_drop {
            continue;
        }
        if worst_gap(&g, classes) <= cfg.tau {
            return Ok((lambda, Some((outcome, diag))));
        }
        let worst = worst_gap(&g, &all);
        if best.as_ref().is_none_or(|b| worst < b.1) {
            best = Some((lambda, worst, outcome, diag));
        }
    }
    Ok(match best {
        Some((lambda, _, outcome, diag)) => (lambda, Some((outcome, diag))),
        None => (0.0, None),
    })
}

/// Baseline training, biased-class detection and penalized retraining.
///
/// The baseline uses the whole learning-rate grid of `base`; the fair heads
/// reuse the baseline's rate and seed so that differences come from the
/// penalty alone.
pub fn train_fair(splits: FairSplits, n_classes: usize, cfg: &W2Config, base: &TrainConfig, lambda: &LambdaChoice) -> Result<FairOutcome> {
    cfg.validate()?;
    base.validate()?;
    let baseline = crate::probes::train_head(splits.train.labeled(), splits.valid.labeled(), n_classes, base)?;
    let lr = baseline.lr;
    let (_, valid_acc) = tpr_gaps(&splits.valid, &baseline.head, n_classes)?;

    let (config, fair, diagnostics, detected) = match lambda {
        LambdaChoice::Fixed => {
            let (fair, diag) = fit_fair(splits.train, splits.valid.labeled(), n_classes, lr, base, cfg)?;
            (cfg.clone(), fair, diag, cfg.active().into_iter().map(|(k, _)| k).collect::<Vec<_>>())
        }
        LambdaChoice::Tune { grid, max_accuracy_drop } => {
            let report = gaps(&splits.valid.table(&baseline.head, n_classes)?)?;
            let detected = detect_biased_classes(&report, cfg.tau, cfg.min_support);
            if detected.is_empty() {
                (cfg.clone(), baseline.clone(), W2Diagnostics::default(), detected)
            } else {
                let (l, best) =
                    tune_lambda(splits.train, splits.valid, n_classes, lr, base, cfg, &detected, grid, valid_acc, *max_accuracy_drop)?;
                let mut config = cfg.clone();
                for &k in &detected {
                    config.lambdas.insert(k, l);
                }
                match best {
                    Some((fair, diag)) => (config, fair, diag, detected),
                    None => (config, baseline.clone(), W2Diagnostics::default(), detected),
                }
            }
        }
    };

    let (before, acc_before) = tpr_gaps(&splits.test, &baseline.head, n_classes)?;
    let (after, acc_after) = tpr_gaps(&splits.test, &fair.head, n_classes)?;
    let rows = (0..n_classes)
        .map(|k| BiasRow {
            class: k,
            tpr_gap_before: before[k],
            tpr_gap_after: after[k],
            accuracy_before: acc_before,
            accuracy_after: acc_after,
            lambda: config.lambdas.get(&k).copied().unwrap_or(0.0),
        })
        .collect();
    let report = BiasReport { rows, detected, lr, diagnostics };
    Ok(FairOutcome { baseline, fair, config, report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn closed_form_distances() {
        assert_eq!(w2_squared(&[0.3, 0.1, 0.7], &[0.7, 0.3, 0.1]).unwrap(), 0.0);
        assert_eq!(w2_squared(&[0.0, 0.0], &[1.0, 1.0]).unwrap(), 1.0);
        assert!((w2_squared(&[0.0, 1.0], &[0.5, 0.5]).unwrap() - 0.25).abs() < 1e-15);
        // {0} vs {0, 1}: half the quantiles move by 1.
        assert!((w2_squared(&[0.0], &[0.0, 1.0]).unwrap() - 0.5).abs() < 1e-15);
        // Sizes 2 and 3: segments [0,1/3], [1/3,1/2], [1/2,2/3], [2/3,1].
        let v = w2_squared(&[0.0, 3.0], &[0.0, 1.0, 2.0]).unwrap();
        let want = 0.0 / 3.0 + 1.0 / 6.0 + 4.0 / 6.0 + 1.0 / 3.0;
        assert!((v - want).abs() < 1e-12);
    }

    #[test]
    fn empty_group_is_an_error() {
        assert!(w2_squared(&[], &[1.0]).is_err());
        assert!(w2_squared(&[1.0], &[]).is_err());
        assert!(DiscreteCdf::new(&[1.0], &[], [1, 1], 10).is_err());
    }

    #[test]
    fn cdf_invariants() {
        let mut rng = seed::rng(4);
        let a: Vec<f64> = (0..37).map(|_| rng.random()).collect();
        let b: Vec<f64> = (0..11).map(|_| rng.random::<f64>() * 0.5).collect();
        let cdf = DiscreteCdf::new(&a, &b, [37, 11], 100).unwrap();
        assert_eq!(cdf.grid.len(), 101);
        assert!(cdf.grid.windows(2).all(|w| w[1] > w[0]));
        for h in &cdf.h {
            assert!(h.windows(2).all(|w| w[1] >= w[0]));
            assert_eq!(h[0], 0.0);
            assert_eq!(h[100], 1.0);
        }
    }

    #[test]
    fn single_points_pull_toward_each_other() {
        let cdf = DiscreteCdf::new(&[0.2], &[0.8], [1, 1], 64).unwrap();
        let g0 = w2_pseudo_gradient(0.2, 0, &cdf).unwrap();
        let g1 = w2_pseudo_gradient(0.8, 1, &cdf).unwrap();
        let h = 1e-6;
        let fd0 = (w2_squared(&[0.2 + h], &[0.8]).unwrap() - w2_squared(&[0.2 - h], &[0.8]).unwrap()) / (2.0 * h);
        let fd1 = (w2_squared(&[0.2], &[0.8 + h]).unwrap() - w2_squared(&[0.2], &[0.8 - h]).unwrap()) / (2.0 * h);
        // A descent step moves the group-0 score up toward 0.8.
        assert!(g0 < 0.0 && g1 > 0.0);
        assert!((g0 - fd0).abs() <= 0.2 * fd0.abs(), "{g0} vs {fd0}");
        assert!((g1 - fd1).abs() <= 0.2 * fd1.abs(), "{g1} vs {fd1}");
    }

    #[test]
    fn identical_groups_give_gradients_within_grid_spacing() {
        let mut rng = seed::rng(9);
        for _ in 0..20 {
            let n = rng.random_range(2..40);
            let a: Vec<f64> = (0..n).map(|_| rng.random()).collect();
            let cdf = DiscreteCdf::new(&a, &a, [n, n], DEFAULT_GRID).unwrap();
            for &v in &a {
                for s in 0..2 {
                    assert!(w2_pseudo_gradient(v, s, &cdf).unwrap().abs() <= cdf.spacing() + 1e-12);
                }
            }
        }
    }

    #[test]
    fn degenerate_grid_gives_zero_with_diagnostic() {
        let cdf = DiscreteCdf::new(&[0.5, 0.5], &[0.5], [2, 1], 10).unwrap();
        assert!(cdf.is_degenerate());
        assert!(cdf.diagnostic().unwrap().contains("all scores equal"));
        assert_eq!(w2_pseudo_gradient(0.5, 0, &cdf).unwrap(), 0.0);
    }

    #[test]
    fn unregularized_class_gets_zero() {
        let cdf = DiscreteCdf::new(&[0.2], &[0.8], [1, 1], 64).unwrap();
        let cfg = W2Config::default().with_lambda(2, 1.0).with_lambda(1, 0.0);
        assert_eq!(cfg.class_gradient(0, 0.2, 0, &cdf).unwrap(), 0.0);
        assert_eq!(cfg.class_gradient(1, 0.2, 0, &cdf).unwrap(), 0.0);
        assert!(cfg.class_gradient(2, 0.2, 0, &cdf).unwrap() < 0.0);
    }

    /// Fraction of random fixtures where the pseudo-gradient and the central
    /// difference of [`w2_squared`] agree in sign.
    pub(crate) fn sign_agreement(fixtures: usize, seed: u64) -> f64 {
        let mut rng = seed::stream(seed, "w2-fixtures");
        let mut agree = 0;
        for _ in 0..fixtures {
            let n0 = rng.random_range(5..40);
            let n1 = rng.random_range(5..40);
            let shift: f64 = rng.random_range(-0.3..0.3);
            let a: Vec<f64> = (0..n0).map(|_| rng.random::<f64>()).collect();
            let b: Vec<f64> = (0..n1).map(|_| (rng.random::<f64>() + shift).clamp(0.0, 1.0)).collect();
            let s = rng.random_range(0..2);
            let (own, other) = if s == 0 { (&a, &b) } else { (&b, &a) };
            let i = rng.random_range(0..own.len());
            let cdf = DiscreteCdf::new(&a, &b, [n0, n1], DEFAULT_GRID).unwrap();
            let g = w2_pseudo_gradient(own[i], s, &cdf).unwrap();
            let h = 1e-7;
            let mut plus = own.clone();
            let mut minus = own.clone();
            plus[i] += h;
            minus[i] -= h;
            let fd = (w2_squared(&plus, other).unwrap() - w2_squared(&minus, other).unwrap()) / (2.0 * h);
            if g.signum() == fd.signum() {
                agree += 1;
            }
        }
        agree as f64 / fixtures as f64
    }

    #[test]
    fn pseudo_gradient_sign_agrees_with_finite_differences() {
        let rate = sign_agreement(1000, 0);
        assert!(rate >= 0.95, "sign agreement {rate}");
    }

    fn gaussian_head_data(seed: u64) -> (Matrix, Vec<usize>, Vec<usize>) {
        let mut rng = seed::rng(seed);
        let n = 300;
        let x = linalg::random_normal(n, 4, &mut rng);
        let y: Vec<usize> = (0..n).map(|i| usize::from(x[(i, 0)] + 0.3 * x[(i, 1)] > 0.0) + usize::from(x[(i, 2)] > 0.8)).collect();
        let g: Vec<usize> = (0..n).map(|i| usize::from(x[(i, 3)] > 0.0)).collect();
        (x, y, g)
    }

    #[test]
    fn zero_lambda_is_bit_identical_to_plain_training() {
        let (x, y, g) = gaussian_head_data(1);
        let train = Grouped::new(&x, &y, &g).unwrap();
        let base = TrainConfig { epochs: 5, hidden: 16, ..TrainConfig::default() }.with_seed(3);
        let plain = fit(train.labeled(), train.labeled(), 3, 1e-2, &base, &mut NoHook).unwrap();
        let cfg = W2Config::default().with_lambda(2, 0.0);
        let (fair, _) = fit_fair(train, train.labeled(), 3, 1e-2, &base, &cfg).unwrap();
        assert_eq!(plain.head, fair.head);
        // The hook itself is also a no-op when every weight is zero.
        let mut hook = W2Hook::new(train, &cfg, 3).unwrap();
        let hooked = fit(train.labeled(), train.labeled(), 3, 1e-2, &base, &mut hook).unwrap();
        assert_eq!(plain.head, hooked.head);
    }

    #[test]
    fn small_class_cell_is_an_error_naming_the_class() {
        let (x, y, mut g) = gaussian_head_data(2);
        for (s, &yi) in g.iter_mut().zip(&y) {
            if yi == 2 {
                *s = 0;
            }
        }
        let train = Grouped::new(&x, &y, &g).unwrap();
        let err = W2Hook::new(train, &W2Config::default().with_lambda(2, 1.0), 0).err().unwrap();
        assert!(err.to_string().contains("class 2"), "{err}");
    }

    #[test]
    fn hook_only_touches_regularized_rows_and_skips_other_batches() {
        let (x, y, g) = gaussian_head_data(3);
        let train = Grouped::new(&x, &y, &g).unwrap();
        let head = MlpHead::init(4, 8, 3, 0);
        let cfg = W2Config { m: 4, ..W2Config::default() }.with_lambda(2, 5.0);
        let mut hook = W2Hook::new(train, &cfg, 0).unwrap();
        let batch: Vec<usize> = (0..40).collect();
        let xb = x.select_rows(&batch);
        let logits = head.forward(&xb).unwrap();
        let mut d = Matrix::zeros(40, 3);
        hook.adjust(&head, &batch, &logits, &mut d).unwrap();
        for (b, &i) in batch.iter().enumerate() {
            if y[i] != 2 {
                assert!(d.row(b).iter().all(|v| *v == 0.0));
            } else {
                // Softmax Jacobian rows sum to zero.
                assert!(d.row(b).sum().abs() < 1e-12);
            }
        }
        let no_two: Vec<usize> = (0..x.nrows()).filter(|&i| y[i] != 2).take(10).collect();
        let logits = head.forward(&x.select_rows(&no_two)).unwrap();
        let mut d = Matrix::zeros(10, 3);
        hook.adjust(&head, &no_two, &logits, &mut d).unwrap();
        assert!(d.iter().all(|v| *v == 0.0));
        assert_eq!(hook.diagnostics.skipped_batches, 1);
        assert_eq!(hook.diagnostics.regularized_steps, 1);
    }

    #[test]
    fn bias_report_csv_has_expected_header() {
        let report = BiasReport {
            rows: vec![BiasRow {
                class: 2,
                tpr_gap_before: Some(-0.3),
                tpr_gap_after: Some(-0.1),
                accuracy_before: 0.9,
                accuracy_after: 0.88,
                lambda: 3.0,
            }],
            detected: vec![2],
            lr: 1e-2,
            diagnostics: W2Diagnostics::default(),
        };
        let dir = tempfile::tempdir().unwrap();
        report.write_csv(dir.path().join("bias.csv")).unwrap();
        let text = std::fs::read_to_string(dir.path().join("bias.csv")).unwrap();
        assert!(text.starts_with("class,tpr_gap_before,tpr_gap_after,accuracy_before,accuracy_after,lambda\n"));
    }

    #[test]
    fn train_fair_reports_every_class() {
        use crate::synthetic::{biased_family, BiasedFamilyConfig};
        let (a, ds) = biased_family(&BiasedFamilyConfig { n: 1500, ..Default::default() }).unwrap();
        let [tr, va, te] = split_rows(a.data(), &ds, &SplitSpec::new(0.6, 0.2, 0.2, 0).unwrap()).unwrap();
        let splits = FairSplits { train: tr.view().unwrap(), valid: va.view().unwrap(), test: te.view().unwrap() };
        let base = TrainConfig { lr_grid: vec![1e-2], epochs: 5, hidden: 16, ..TrainConfig::default() };
        let cfg = W2Config { m: 4, ..W2Config::default() }.with_lambda(2, 10.0);
        let out = train_fair(splits, 3, &cfg, &base, &LambdaChoice::Fixed).unwrap();
        assert_eq!(out.report.rows.len(), 3);
        assert_eq!(out.report.detected, vec![2]);
        assert_eq!(out.report.row(2).unwrap().lambda, 10.0);
        assert_eq!(out.report.row(0).unwrap().lambda, 0.0);
        assert!(out.report.diagnostics.regularized_steps > 0);
        assert_ne!(out.baseline.head, out.fair.head);
    }

    proptest! {
        #[test]
        fn w2_symmetric_and_non_negative(
            a in prop::collection::vec(-5.0f64..5.0, 1..20),
            b in prop::collection::vec(-5.0f64..5.0, 1..20),
        ) {
            let ab = w2_squared(&a, &b).unwrap();
            let ba = w2_squared(&b, &a).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert!((ab - ba).abs() <= 1e-12 * (1.0 + ab));
            let mut rev = a.clone();
            rev.reverse();
            prop_assert_eq!(w2_squared(&a, &rev).unwrap(), 0.0);
        }

        #[test]
        fn w2_zero_only_for_equal_sorted_samples(
            a in prop::collection::vec(-5.0f64..5.0, 1..20),
            i in any::<prop::sample::Index>(),
            bump in 1e-3f64..1.0,
        ) {
            let mut b = a.clone();
            b[i.index(a.len())] += bump;
            prop_assert!(w2_squared(&a, &b).unwrap() > 0.0);
        }

        #[test]
        fn w2_translation_invariant(
            a in prop::collection::vec(-5.0f64..5.0, 1..20),
            b in prop::collection::vec(-5.0f64..5.0, 1..20),
            c in -10.0f64..10.0,
        ) {
            let shift = |v: &[f64]| v.iter().map(|x| x + c).collect::<Vec<_>>();
            let base = w2_squared(&a, &b).unwrap();
            let moved = w2_squared(&shift(&a), &shift(&b)).unwrap();
            prop_assert!((base - moved).abs() <= 1e-9 * (1.0 + base));
        }
    }
}
