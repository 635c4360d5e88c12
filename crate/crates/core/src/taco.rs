//! Ratio-based concept removal and the accuracy/leakage sweep over the
//! number of removed concepts.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{split_indices, ActivationMatrix, LabeledDataset, SplitSpec};
use crate::decompose::ConceptDecomposition;
use crate::error::{Error, Result};
use crate::probes::{nu_information, train_head, Labeled, TrainConfig};
use crate::sobol::ImportanceReport;
use crate::{linalg, seed, Matrix};

pub const DEFAULT_EPSILON: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemovalPlan {
    /// Concept indices, first to be removed first.
    pub order: Vec<usize>,
    /// `(g_i + ε) / (t_i + ε)` indexed by concept.
    pub scores: Vec<f64>,
    pub epsilon: f64,
}

impl RemovalPlan {
    pub fn rank(&self) -> usize {
        self.order.len()
    }

    pub fn removed(&self, k: usize) -> &[usize] {
        &self.order[..k.min(self.order.len())]
    }

    /// Retained concepts in ascending index order.
    pub fn kept(&self, k: usize) -> Vec<usize> {
        let mut kept = self.order[k.min(self.order.len())..].to_vec();
        kept.sort_unstable();
        kept
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::dataio::write_json(path, self)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        crate::dataio::read_json(path)
    }
}

/// Orders concepts by how much more they matter to the group head than to
/// the task head.
pub fn rank_for_removal(report: &ImportanceReport, epsilon: f64) -> Result<RemovalPlan> {
    rank_by_ratio(&report.sobol_group, &report.sobol_task, epsilon)
}

/// Sort key: ratio descending, then larger group importance, then lower
/// index.
pub fn rank_by_ratio(group: &[f64], task: &[f64], epsilon: f64) -> Result<RemovalPlan> {
    if group.len() != task.len() {
        return Err(Error::Shape(format!("{} group indices vs {} task indices", group.len(), task.len())));
    }
    if epsilon.is_nan() || epsilon <= 0.0 {
        return Err(Error::invalid("ratio smoothing must be positive"));
    }
    let scores: Vec<f64> = group.iter().zip(task).map(|(g, t)| (g + epsilon) / (t + epsilon)).collect();
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .total_cmp(&scores[a])
            .then(group[b].total_cmp(&group[a]))
            .then(a.cmp(&b))
    });
    Ok(RemovalPlan { order, scores, epsilon })
}

/// `Ũ·W̃` after dropping the first `k` concepts of the plan (plus the stored
/// mean for centred decompositions). `k = 0` gives the rank-r
/// reconstruction.
pub fn remove_and_reconstruct(dec: &ConceptDecomposition, plan: &RemovalPlan, k: usize) -> Result<ActivationMatrix> {
    let r = dec.rank();
    if plan.rank() != r {
        return Err(Error::Shape(format!("plan covers {} concepts, decomposition has {r}", plan.rank())));
    }
    if k > r {
        return Err(Error::invalid(format!("cannot remove {k} of {r} concepts")));
    }
    let kept = plan.kept(k);
    let (u, w) = dec.select(&kept);
    let mut out = if kept.is_empty() { Matrix::zeros(dec.n_instances(), dec.dim()) } else { u * w };
    if let Some(mean) = &dec.mean {
        linalg::add_row_vector(&mut out, mean);
    }
    ActivationMatrix::new(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub train: TrainConfig,
    pub split: SplitSpec,
    /// One run per seed; each seed drives the split and both heads.
    pub seeds: Vec<u64>,
    /// Removal counts; defaults to `0..r`.
    pub ks: Option<Vec<usize>>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self { train: TrainConfig::default(), split: SplitSpec::default(), seeds: (0..5).collect(), ks: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub k: usize,
    pub seed: u64,
    pub acc_task: f64,
    pub acc_group: f64,
    pub nu_information: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Sample standard deviation; 0 for a single value.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub k: usize,
    pub runs: usize,
    pub acc_task: MeanStd,
    pub acc_group: MeanStd,
    pub nu_information: MeanStd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    pub summary: Vec<SweepSummary>,
}

impl SweepReport {
    fn from_rows(rows: Vec<SweepRow>) -> Self {
        let mut ks: Vec<usize> = rows.iter().map(|r| r.k).collect();
        ks.dedup();
        let summary = ks
            .into_iter()
            .map(|k| {
                let at: Vec<&SweepRow> = rows.iter().filter(|r| r.k == k).collect();
                let col = |f: fn(&SweepRow) -> f64| MeanStd::of(&at.iter().map(|r| f(r)).collect::<Vec<_>>());
                SweepSummary {
                    k,
                    runs: at.len(),
                    acc_task: col(|r| r.acc_task),
                    acc_group: col(|r| r.acc_group),
                    nu_information: col(|r| r.nu_information),
                }
            })
            .collect();
        Self { rows, summary }
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        for row in &self.rows {
            w.serialize(row).map_err(|e| Error::Format(e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write_summary(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::dataio::write_json(path, &self.summary)
    }
}

/// Retrains task and group heads on the reconstruction after each removal
/// count and records held-out accuracies and leakage.
pub fn pareto_sweep(dec: &ConceptDecomposition, plan: &RemovalPlan, ds: &LabeledDataset, cfg: &SweepConfig) -> Result<SweepReport> {
    if ds.len() != dec.n_instances() {
        return Err(Error::Shape(format!("{} instances but U has {} rows", ds.len(), dec.n_instances())));
    }
    if cfg.seeds.is_empty() {
        return Err(Error::invalid("sweep needs at least one seed"));
    }
    cfg.train.validate()?;
    let ks: Vec<usize> = cfg.ks.clone().unwrap_or_else(|| (0..dec.rank()).collect());
    if let Some(bad) = ks.iter().find(|&&k| k > dec.rank()) {
        return Err(Error::invalid(format!("cannot remove {bad} of {} concepts", dec.rank())));
    }
    let y = ds.labels();
    let g = ds.groups();
    let reconstructions = ks
        .iter()
        .map(|&k| remove_and_reconstruct(dec, plan, k).map(ActivationMatrix::into_data))
        .collect::<Result<Vec<_>>>()?;
    let jobs: Vec<(usize, u64)> = (0..ks.len()).flat_map(|ki| cfg.seeds.iter().map(move |&s| (ki, s))).collect();
    let rows = jobs
        .par_iter()
        .map(|&(ki, s)| {
            let split = split_indices(ds.len(), &SplitSpec { seed: s, ..cfg.split })?;
            sweep_point(&reconstructions[ki], &y, &g, ds.n_classes(), &split, s, &cfg.train).map(|(acc_task, acc_group, nu)| SweepRow {
                k: ks[ki],
                seed: s,
                acc_task,
                acc_group,
                nu_information: nu,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepReport::from_rows(rows))
}

fn sweep_point(
    a: &Matrix,
    y: &[usize],
    g: &[usize],
    n_classes: usize,
    split: &crate::dataio::Split,
    run_seed: u64,
    train: &TrainConfig,
) -> Result<(f64, f64, f64)> {
    let part = |rows: &[usize], labels: &[usize]| (a.select_rows(rows), rows.iter().map(|&i| labels[i]).collect::<Vec<_>>());
    let fit = |labels: &[usize], classes: usize, label: &str| -> Result<(crate::MlpHead, Matrix, Vec<usize>)> {
        let (xt, lt) = part(&split.train, labels);
        let (xv, lv) = part(&split.valid, labels);
        let (xs, ls) = part(&split.test, labels);
        let cfg = train.clone().with_seed(seed::derive(run_seed, label));
        let head = train_head(Labeled::new(&xt, &lt)?, Labeled::new(&xv, &lv)?, classes, &cfg)?.head;
        Ok((head, xs, ls))
    };
    let (task, xs, ys) = fit(y, n_classes, "sweep-task")?;
    let (group, _, gs) = fit(g, 2, "sweep-group")?;
    Ok((task.accuracy(&xs, &ys)?, group.accuracy(&xs, &gs)?, nu_information(&group, &xs, &gs)?))
}
