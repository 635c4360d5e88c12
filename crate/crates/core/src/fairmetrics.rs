//! Group-fairness gaps, their stability under resampling, biased-class
//! detection, concept fidelity curves and concept/annotation alignment.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::dataio::{stratified_indices, Annotation, LabeledDataset};
use crate::error::{Error, Result};
use crate::probes::{train_head, Labeled, MlpHead, TrainConfig};
use crate::sobol::ConceptSpace;
use crate::textprep::Excerpt;
use crate::{linalg, seed, Matrix};

/// Gaps are always `value(group 1) − value(group 0)`.
pub const GAP_ORIENTATION: &str = "group1_minus_group0";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionTable {
    pub y_true: Vec<usize>,
    pub y_pred: Vec<usize>,
    pub g: Vec<usize>,
    pub n_classes: usize,
}

impl PredictionTable {
    pub fn new(y_true: Vec<usize>, y_pred: Vec<usize>, g: Vec<usize>, n_classes: usize) -> Result<Self> {
        if y_true.is_empty() {
            return Err(Error::invalid("empty prediction table"));
        }
        if y_true.len() != y_pred.len() || y_true.len() != g.len() {
            return Err(Error::Shape(format!("{} labels, {} predictions, {} groups", y_true.len(), y_pred.len(), g.len())));
        }
        if let Some(bad) = y_true.iter().chain(&y_pred).find(|&&c| c >= n_classes) {
            return Err(Error::invalid(format!("class {bad} outside 0..{n_classes}")));
        }
        if let Some(bad) = g.iter().find(|&&s| s > 1) {
            return Err(Error::invalid(format!("group {bad} is not binary")));
        }
        Ok(Self { y_true, y_pred, g, n_classes })
    }

    pub fn len(&self) -> usize {
        self.y_true.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y_true.is_empty()
    }

    pub fn accuracy(&self) -> f64 {
        self.y_true.iter().zip(&self.y_pred).filter(|(a, b)| a == b).count() as f64 / self.len() as f64
    }

    /// Same table with the two groups exchanged.
    pub fn swap_groups(&self) -> Self {
        Self { g: self.g.iter().map(|s| 1 - s).collect(), ..self.clone() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Metric {
    Gp,
    Tpr,
    Pp,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Gp, Metric::Tpr, Metric::Pp];
}

impl std::fmt::Display for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Metric::Gp => "GP",
            Metric::Tpr => "TPR",
            Metric::Pp => "PP",
        })
    }
}

/// One metric for one class. A group value is absent when its denominator
/// is zero, and the gap is absent unless both values exist.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapCell {
    pub metric: Metric,
    pub class: usize,
    pub values: [Option<f64>; 2],
    /// Per-group denominators.
    pub denominators: [usize; 2],
    pub gap: Option<f64>,
    /// Instances entering the numerators, both groups together.
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub orientation: String,
    pub n_classes: usize,
    pub cells: Vec<GapCell>,
}

impl GapReport {
    pub fn cell(&self, metric: Metric, class: usize) -> Option<&GapCell> {
        self.cells.iter().find(|c| c.metric == metric && c.class == class)
    }

    pub fn gap(&self, metric: Metric, class: usize) -> Option<f64> {
        self.cell(metric, class).and_then(|c| c.gap)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::dataio::write_json(path, self)
    }

    /// One row per cell: metric, class, both group values, gap, support.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_default();
        let mut out = String::from("metric,class,value_g0,value_g1,gap,support\n");
        for c in &self.cells {
            out += &format!("{},{},{},{},{},{}\n", c.metric, c.class, fmt(c.values[0]), fmt(c.values[1]), fmt(c.gap), c.support);
        }
        let path = path.as_ref();
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// GP, TPR and PP per class and group, with group-1 minus group-0 gaps.
pub fn gaps(t: &PredictionTable) -> Result<GapReport> {
    let mut group_size = [0usize; 2];
    for &s in &t.g {
        group_size[s] += 1;
    }
    if let Some(missing) = (0..2).find(|&s| group_size[s] == 0) {
        return Err(Error::invalid(format!("group {missing} has no instances")));
    }
    let k = t.n_classes;
    let mut predicted = vec![[0usize; 2]; k];
    let mut truth = vec![[0usize; 2]; k];
    let mut hits = vec![[0usize; 2]; k];
    for i in 0..t.len() {
        let s = t.g[i];
        predicted[t.y_pred[i]][s] += 1;
        truth[t.y_true[i]][s] += 1;
        if t.y_pred[i] == t.y_true[i] {
            hits[t.y_true[i]][s] += 1;
        }
    }
    let ratio = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
    let mut cells = Vec::with_capacity(3 * k);
    for metric in Metric::ALL {
        for y in 0..k {
            let (num, den) = match metric {
                Metric::Gp => (predicted[y], group_size),
                Metric::Tpr => (hits[y], truth[y]),
                Metric::Pp => (hits[y], predicted[y]),
            };
            let values = [ratio(num[0], den[0]), ratio(num[1], den[1])];
            let gap = match values {
                [Some(a), Some(b)] => Some(b - a),
                _ => None,
            };
            cells.push(GapCell { metric, class: y, values, denominators: den, gap, support: num[0] + num[1] });
        }
    }
    Ok(GapReport { orientation: GAP_ORIENTATION.into(), n_classes: k, cells })
}

pub const DEFAULT_MIN_SUPPORT: usize = 10;

/// Classes with `|TPR gap| > τ` whose true instances number at least
/// `min_support` in each group.
pub fn detect_biased_classes(report: &GapReport, tau: f64, min_support: usize) -> Vec<usize> {
    report
        .cells
        .iter()
        .filter(|c| c.metric == Metric::Tpr)
        .filter(|c| c.denominators.iter().all(|&n| n >= min_support))
        .filter(|c| c.gap.is_some_and(|gap| gap.abs() > tau))
        .map(|c| c.class)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub df: f64,
    pub p_value: f64,
}

/// Two-sided Welch test (unequal variances), or a paired test on the
/// differences when `paired`.
pub fn t_test(a: &[f64], b: &[f64], paired: bool) -> Result<TTest> {
    if paired {
        if a.len() != b.len() {
            return Err(Error::Shape(format!("paired samples of sizes {} and {}", a.len(), b.len())));
        }
        let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
        let (mean, var) = mean_var(&diffs)?;
        let n = diffs.len() as f64;
        return Ok(finish(mean, var / n, n - 1.0));
    }
    let (ma, va) = mean_var(a)?;
    let (mb, vb) = mean_var(b)?;
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let se2 = va / na + vb / nb;
    let df = if se2 > 0.0 {
        se2 * se2 / ((va / na).powi(2) / (na - 1.0) + (vb / nb).powi(2) / (nb - 1.0))
    } else {
        na + nb - 2.0
    };
    Ok(finish(ma - mb, se2, df))
}

fn mean_var(x: &[f64]) -> Result<(f64, f64)> {
    if x.len() < 2 {
        return Err(Error::invalid("a t-test needs at least two observations per sample"));
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    Ok((mean, x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)))
}

fn finish(diff: f64, se2: f64, df: f64) -> TTest {
    if se2 == 0.0 {
        let p = if diff == 0.0 { 1.0 } else { 0.0 };
        let t = if diff == 0.0 { 0.0 } else { diff.signum() * f64::INFINITY };
        return TTest { t, df, p_value: p };
    }
    let t = diff / se2.sqrt();
    let dist = StudentsT::new(0.0, 1.0, df).expect("positive degrees of freedom");
    TTest { t, df, p_value: (2.0 * dist.cdf(-t.abs())).min(1.0) }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResampleConfig {
    pub sizes: Vec<usize>,
    pub repeats: usize,
    pub seed: u64,
    /// Compare conditions with the paired test instead of Welch's.
    pub paired: bool,
    /// Held-out share of the dataset used to score every repeat.
    pub test_frac: f64,
    pub train: TrainConfig,
}

impl Default for ResampleConfig {
    fn default() -> Self {
        Self { sizes: vec![], repeats: 50, seed: 0, paired: false, test_frac: 0.2, train: TrainConfig::default() }
    }
}

/// Gap values of one (metric, class) across repeats of one size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapSeries {
    pub size: usize,
    pub metric: Metric,
    pub class: usize,
    /// One entry per repeat; absent cells are skipped.
    pub values: Vec<f64>,
    pub mean: Option<f64>,
    pub variance: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub metric: Metric,
    pub class: usize,
    pub size_a: usize,
    pub size_b: usize,
    pub test: Option<TTest>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub seed: u64,
    /// Seed of every repeat, `[size index][repeat]`.
    pub repeat_seeds: Vec<Vec<u64>>,
    pub series: Vec<GapSeries>,
    pub comparisons: Vec<Comparison>,
}

impl StabilityReport {
    pub fn series(&self, size: usize, metric: Metric, class: usize) -> Option<&GapSeries> {
        self.series.iter().find(|s| s.size == size && s.metric == metric && s.class == class)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::dataio::write_json(path, self)
    }
}

/// Runs `fit_predict(rows, seed)` on `repeats` stratified samples per size
/// and summarizes the resulting gap distributions. `rows` index `ds`.
pub fn resample_gaps_with<F>(ds: &LabeledDataset, sizes: &[usize], repeats: usize, seed: u64, paired: bool, fit_predict: F) -> Result<StabilityReport>
where
    F: Fn(&[usize], u64) -> Result<PredictionTable> + Sync,
{
    if repeats < 2 {
        return Err(Error::invalid("resampling needs at least 2 repeats"));
    }
    if sizes.is_empty() {
        return Err(Error::invalid("no sample sizes given"));
    }
    if let Some(bad) = sizes.iter().find(|&&m| m > ds.len()) {
        return Err(Error::invalid(format!("sample size {bad} exceeds dataset size {}", ds.len())));
    }
    let repeat_seeds: Vec<Vec<u64>> = sizes
        .iter()
        .enumerate()
        .map(|(si, _)| (0..repeats).map(|r| seed::derive_indexed(seed, &format!("resample-{si}"), r as u64)).collect())
        .collect();
    let jobs: Vec<(usize, u64)> = repeat_seeds.iter().enumerate().flat_map(|(si, seeds)| seeds.iter().map(move |&s| (si, s))).collect();
    let reports = jobs
        .par_iter()
        .map(|&(si, s)| {
            let rows = stratified_indices(ds, sizes[si], s)?;
            gaps(&fit_predict(&rows, s)?)
        })
        .collect::<Result<Vec<_>>>()?;

    let k = ds.n_classes();
    let mut collected: BTreeMap<(usize, Metric, usize), Vec<f64>> = BTreeMap::new();
    for (&(si, _), report) in jobs.iter().zip(&reports) {
        for metric in Metric::ALL {
            for y in 0..k {
                let entry = collected.entry((si, metric, y)).or_default();
                if let Some(gap) = report.gap(metric, y) {
                    entry.push(gap);
                }
            }
        }
    }
    let series: Vec<GapSeries> = collected
        .iter()
        .map(|(&(si, metric, class), values)| {
            let (mean, variance) = match mean_var(values) {
                Ok((m, v)) => (Some(m), Some(v)),
                Err(_) => (values.first().copied(), None),
            };
            GapSeries { size: sizes[si], metric, class, values: values.clone(), mean, variance }
        })
        .collect();
    let mut comparisons = Vec::new();
    for a in 0..sizes.len() {
        for b in a + 1..sizes.len() {
            for metric in Metric::ALL {
                for class in 0..k {
                    let va = &collected[&(a, metric, class)];
                    let vb = &collected[&(b, metric, class)];
                    comparisons.push(Comparison {
                        metric,
                        class,
                        size_a: sizes[a],
                        size_b: sizes[b],
                        test: t_test(va, vb, paired).ok(),
                    });
                }
            }
        }
    }
    Ok(StabilityReport { seed, repeat_seeds, series, comparisons })
}

/// Resampling with the task probe: a held-out test split is fixed once;
/// each repeat trains on its stratified sample (10% of it for validation).
pub fn resample_gaps(features: &Matrix, ds: &LabeledDataset, cfg: &ResampleConfig) -> Result<StabilityReport> {
    if features.nrows() != ds.len() {
        return Err(Error::Shape(format!("{} feature rows for {} instances", features.nrows(), ds.len())));
    }
    if !(cfg.test_frac > 0.0 && cfg.test_frac < 1.0) {
        return Err(Error::invalid(format!("test fraction must lie in (0,1), got {}", cfg.test_frac)));
    }
    let (pool_rows, test_rows) = holdout(ds.len(), cfg.test_frac, seed::derive(cfg.seed, "resample-holdout"));
    let pool = ds.subset(&pool_rows);
    let pool_x = features.select_rows(&pool_rows);
    let test_x = features.select_rows(&test_rows);
    let test = ds.subset(&test_rows);
    let (test_y, test_g) = (test.labels(), test.groups());
    let pool_y = pool.labels();
    let k = ds.n_classes();
    resample_gaps_with(&pool, &cfg.sizes, cfg.repeats, cfg.seed, cfg.paired, |rows, s| {
        let (train_idx, valid_idx) = holdout(rows.len(), 0.1, s);
        let pick = |idx: &[usize]| -> (Matrix, Vec<usize>) {
            let global: Vec<usize> = idx.iter().map(|&i| rows[i]).collect();
            (pool_x.select_rows(&global), global.iter().map(|&i| pool_y[i]).collect())
        };
        let (xt, yt) = pick(&train_idx);
        let (xv, yv) = pick(&valid_idx);
        let head = train_head(Labeled::new(&xt, &yt)?, Labeled::new(&xv, &yv)?, k, &cfg.train.clone().with_seed(s))?.head;
        PredictionTable::new(test_y.clone(), head.predict(&test_x)?, test_g.clone(), k)
    })
}

/// Seeded two-way partition: `⌊n·frac⌋` rows (at least one) held out,
/// both parts ascending.
fn holdout(n: usize, frac: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::stream(seed, "holdout"));
    let take = ((n as f64 * frac + 1e-9).floor() as usize).clamp(1, n.saturating_sub(1).max(1));
    let (mut held, mut kept) = (order[..take].to_vec(), order[take..].to_vec());
    held.sort_unstable();
    kept.sort_unstable();
    (kept, held)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FidelityMode {
    Deletion,
    Insertion,
}

/// Mean observed-class logit as concepts are removed (deletion) or added
/// (insertion) cumulatively in `order`; `r + 1` points. The observed class
/// of each row is the head's prediction on its full reconstruction.
pub fn fidelity_curve(space: ConceptSpace, order: &[usize], head: &MlpHead, mode: FidelityMode) -> Result<Vec<f64>> {
    let r = space.u.ncols();
    let mut seen = vec![false; r];
    for &k in order {
        if k >= r || std::mem::replace(&mut seen[k], true) {
            return Err(Error::invalid("order must be a permutation of the concepts"));
        }
    }
    if order.len() != r {
        return Err(Error::invalid(format!("order covers {} of {r} concepts", order.len())));
    }
    let logits_of = |coefficients: &Matrix| -> Result<Matrix> {
        let mut a = coefficients * space.w;
        if let Some(mean) = space.mean {
            linalg::add_row_vector(&mut a, mean);
        }
        head.forward(&a)
    };
    let full = logits_of(space.u)?;
    let observed: Vec<usize> = full.row_iter().map(|row| linalg::argmax(row.transpose().as_slice())).collect();
    let mean_score = |logits: &Matrix| observed.iter().enumerate().map(|(i, &c)| logits[(i, c)]).sum::<f64>() / observed.len() as f64;

    let mut active = vec![mode == FidelityMode::Deletion; r];
    let mut curve = Vec::with_capacity(r + 1);
    for step in 0..=r {
        if step > 0 {
            active[order[step - 1]] = mode == FidelityMode::Insertion;
        }
        let mut coefficients = space.u.clone();
        for (k, on) in active.iter().enumerate() {
            if !on {
                coefficients.column_mut(k).fill(0.0);
            }
        }
        curve.push(mean_score(&logits_of(&coefficients)?));
    }
    Ok(curve)
}

/// Trapezoidal area under a curve sampled at evenly spaced fractions of
/// the concepts, normalized to a unit x-range.
pub fn curve_auc(curve: &[f64]) -> f64 {
    if curve.len() < 2 {
        return curve.first().copied().unwrap_or(0.0);
    }
    let steps = (curve.len() - 1) as f64;
    curve.windows(2).map(|p| (p[0] + p[1]) / 2.0).sum::<f64>() / steps
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Alignment {
    pub concept: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Precision, recall and F1 of `predicted` against `actual`; empty
/// denominators give 0.
pub fn precision_recall_f1(predicted: &[bool], actual: &[bool]) -> (f64, f64, f64) {
    let tp = predicted.iter().zip(actual).filter(|(p, a)| **p && **a).count() as f64;
    let pp = predicted.iter().filter(|p| **p).count() as f64;
    let ap = actual.iter().filter(|a| **a).count() as f64;
    let precision = if pp > 0.0 { tp / pp } else { 0.0 };
    let recall = if ap > 0.0 { tp / ap } else { 0.0 };
    let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
    (precision, recall, f1)
}

/// The concept whose presence mask best predicts the aspect mask by F1,
/// lowest index on ties.
pub fn alignment_scores(presence: &[Vec<bool>], aspect: &[bool]) -> Result<Alignment> {
    if !aspect.iter().any(|a| *a) {
        return Err(Error::invalid("no excerpt carries the aspect"));
    }
    if presence.is_empty() {
        return Err(Error::invalid("no concepts to align"));
    }
    let mut best: Option<Alignment> = None;
    for (concept, mask) in presence.iter().enumerate() {
        if mask.len() != aspect.len() {
            return Err(Error::Shape(format!("presence mask of length {} vs {} excerpts", mask.len(), aspect.len())));
        }
        let (precision, recall, f1) = precision_recall_f1(mask, aspect);
        if best.is_none_or(|b| f1 > b.f1) {
            best = Some(Alignment { concept, precision, recall, f1 });
        }
    }
    Ok(best.expect("at least one concept"))
}

/// Whether an excerpt's token span intersects an annotation of `aspect`.
pub fn overlaps_aspect(excerpt: &Excerpt, annotations: &[Annotation], aspect: &str) -> bool {
    annotations
        .iter()
        .any(|a| a.aspect == aspect && a.start < excerpt.end && excerpt.start < a.end)
}
