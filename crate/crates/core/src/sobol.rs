//! Total Sobol concept importance: masks over concept coefficients, the
//! Jansen estimator, and task/group co-importance reports.

use nalgebra::DVector;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sobol::params::JoeKuoD6;
use sobol::Sobol;

use crate::error::{Error, Result};
use crate::probes::MlpHead;
use crate::{linalg, seed, Matrix};

pub const DEFAULT_MASKS: usize = 1 << 13;
pub const DEFAULT_MAX_INSTANCES: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskGenerator {
    QmcSobol,
    PseudoRandom,
}

/// Paired mask matrices for the Jansen design: `base` (B) and `alt` (C),
/// each N×r with entries in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct MaskBatch {
    base: Matrix,
    alt: Matrix,
    generator: MaskGenerator,
    seed: u64,
}

impl MaskBatch {
    pub fn generate(generator: MaskGenerator, n: usize, rank: usize, seed: u64) -> Result<Self> {
        match generator {
            MaskGenerator::QmcSobol => Self::qmc(n, rank, seed),
            MaskGenerator::PseudoRandom => Self::pseudo_random(n, rank, seed),
        }
    }

    /// First N points of a 2r-dimensional Sobol' sequence (Joe–Kuo
    /// directions) under a seeded random digital shift; B takes the first r
    /// coordinates, C the last r.
    pub fn qmc(n: usize, rank: usize, seed: u64) -> Result<Self> {
        Self::check(n, rank)?;
        if !n.is_power_of_two() {
            return Err(Error::invalid(format!("QMC mask count must be a power of two, got {n}")));
        }
        let params = JoeKuoD6::standard();
        let dims = 2 * rank;
        if dims > params.max_dims {
            return Err(Error::invalid(format!("QMC masks support at most {} concepts", params.max_dims / 2)));
        }
        let mut rng = seed::stream(seed, "sobol-shift");
        let shift: Vec<u32> = (0..dims).map(|_| rng.random()).collect();
        let mut base = Matrix::zeros(n, rank);
        let mut alt = Matrix::zeros(n, rank);
        for (i, point) in Sobol::<u32>::new(dims, &params).take(n).enumerate() {
            for (k, (&p, &s)) in point.iter().zip(&shift).enumerate() {
                let v = ((p ^ s) as f64 + 0.5) / 4_294_967_296.0;
                if k < rank {
                    base[(i, k)] = v;
                } else {
                    alt[(i, k - rank)] = v;
                }
            }
        }
        Ok(Self { base, alt, generator: MaskGenerator::QmcSobol, seed })
    }

    pub fn pseudo_random(n: usize, rank: usize, seed: u64) -> Result<Self> {
        Self::check(n, rank)?;
        let mut rng = seed::stream(seed, "mask-uniform");
        let base = Matrix::from_fn(n, rank, |_, _| rng.random::<f64>());
        let alt = Matrix::from_fn(n, rank, |_, _| rng.random::<f64>());
        Ok(Self { base, alt, generator: MaskGenerator::PseudoRandom, seed })
    }

    fn check(n: usize, rank: usize) -> Result<()> {
        if n < 2 {
            return Err(Error::invalid("at least 2 masks are required"));
        }
        if rank == 0 {
            return Err(Error::invalid("masks need at least one concept"));
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.base.nrows()
    }

    pub fn rank(&self) -> usize {
        self.base.ncols()
    }

    pub fn generator(&self) -> MaskGenerator {
        self.generator
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn base(&self) -> &Matrix {
        &self.base
    }

    pub fn alt(&self) -> &Matrix {
        &self.alt
    }

    /// `B⁽ⁱ⁾`: B with column `i` taken from C.
    pub fn resampled(&self, i: usize) -> Matrix {
        let mut m = self.base.clone();
        m.set_column(i, &self.alt.column(i));
        m
    }

    /// Same masks with the concept axis permuted: new column k is old
    /// column `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            base: self.base.select_columns(perm),
            alt: self.alt.select_columns(perm),
            generator: self.generator,
            seed: self.seed,
        }
    }
}

/// `u ⊙ m + (1 − m)·μ`.
pub fn perturb(u: &[f64], m: &[f64], baseline: f64) -> Vec<f64> {
    assert_eq!(u.len(), m.len(), "coefficient and mask lengths differ");
    u.iter().zip(m).map(|(u, m)| u * m + (1.0 - m) * baseline).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    ObservedClassLogit,
    Top2LogitMargin,
}

impl std::str::FromStr for ScoreKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "class_logit" | "observed_class_logit" => Ok(ScoreKind::ObservedClassLogit),
            "top2" | "top2_logit_margin" => Ok(ScoreKind::Top2LogitMargin),
            other => Err(Error::invalid(format!("unknown score function {other:?}"))),
        }
    }
}

/// φ: maps a row of logits to a scalar.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreFunction {
    pub kind: ScoreKind,
    /// Fixed class for the observed-class logit; when absent each instance
    /// uses the class its unperturbed reconstruction is predicted as.
    pub class: Option<usize>,
}

impl ScoreFunction {
    pub fn top2() -> Self {
        Self { kind: ScoreKind::Top2LogitMargin, class: None }
    }

    pub fn observed_class() -> Self {
        Self { kind: ScoreKind::ObservedClassLogit, class: None }
    }

    pub fn class_logit(class: usize) -> Self {
        Self { kind: ScoreKind::ObservedClassLogit, class: Some(class) }
    }

    pub fn check(&self, head: &MlpHead) -> Result<()> {
        let c = head.n_classes();
        match (self.kind, self.class) {
            (ScoreKind::Top2LogitMargin, _) if c < 2 => Err(Error::invalid("top-2 margin needs at least two classes")),
            (ScoreKind::ObservedClassLogit, Some(k)) if k >= c => Err(Error::invalid(format!("class {k} outside 0..{c}"))),
            _ => Ok(()),
        }
    }

    /// `class` is the instance's observed class (ignored for the margin).
    pub fn score(&self, logits: &[f64], class: usize) -> f64 {
        match self.kind {
            ScoreKind::ObservedClassLogit => logits[self.class.unwrap_or(class)],
            ScoreKind::Top2LogitMargin => {
                let (mut first, mut second) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
                for &v in logits {
                    if v > first {
                        second = first;
                        first = v;
                    } else if v > second {
                        second = v;
                    }
                }
                first - second
            }
        }
    }
}

/// Raw Jansen total indices for one scalar function of the masks.
#[derive(Debug, Clone, PartialEq)]
pub struct JansenEstimate {
    pub raw: Vec<f64>,
    pub variance: f64,
}

/// `Ŝ_Ti = (1/2N) Σ_j (f(B)_j − f(B⁽ⁱ⁾)_j)² / V̂`, with V̂ the variance of
/// f over the pooled B and C evaluations. `f` maps an N×r mask matrix to N
/// scores.
pub fn jansen<F>(masks: &MaskBatch, f: F) -> Result<JansenEstimate>
where
    F: Fn(&Matrix) -> Vec<f64>,
{
    let fb = f(masks.base());
    let fc = f(masks.alt());
    let variance = pooled_variance(&fb, &fc);
    if !is_nonconstant(&fb, &fc, variance) {
        return Err(Error::ConstantScore);
    }
    let raw = (0..masks.rank())
        .map(|i| {
            let fi = f(&masks.resampled(i));
            let ss: f64 = fb.iter().zip(&fi).map(|(a, b)| (a - b).powi(2)).sum();
            ss / (2.0 * fb.len() as f64) / variance
        })
        .collect();
    Ok(JansenEstimate { raw, variance })
}

fn pooled_variance(a: &[f64], b: &[f64]) -> f64 {
    let n = (a.len() + b.len()) as f64;
    let mean = a.iter().chain(b).sum::<f64>() / n;
    a.iter().chain(b).map(|v| (v - mean).powi(2)).sum::<f64>() / n
}

fn is_nonconstant(a: &[f64], b: &[f64], variance: f64) -> bool {
    let scale = a.iter().chain(b).fold(0.0f64, |m, v| m.max(v.abs()));
    variance > (1e-12 * scale.max(f64::MIN_POSITIVE)).powi(2)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SobolConfig {
    pub n_masks: usize,
    pub generator: MaskGenerator,
    pub seed: u64,
    /// Per-instance indices are averaged over at most this many rows.
    pub max_instances: usize,
    /// Value a fully masked coefficient falls back to.
    pub baseline: f64,
}

impl Default for SobolConfig {
    fn default() -> Self {
        Self {
            n_masks: DEFAULT_MASKS,
            generator: MaskGenerator::QmcSobol,
            seed: 0,
            max_instances: DEFAULT_MAX_INSTANCES,
            baseline: 0.0,
        }
    }
}

impl SobolConfig {
    pub fn masks(&self, rank: usize) -> Result<MaskBatch> {
        MaskBatch::generate(self.generator, self.n_masks, rank, self.seed)
    }

    /// Rows whose indices are averaged: all of them, or a seeded subset.
    pub fn instance_rows(&self, n: usize) -> Vec<usize> {
        if n <= self.max_instances {
            return (0..n).collect();
        }
        let mut rng = seed::stream(self.seed, "sobol-instances");
        let mut rows = rand::seq::index::sample(&mut rng, n, self.max_instances).into_vec();
        rows.sort_unstable();
        rows
    }
}

/// Concept coefficients with the basis that maps them to the latent space.
#[derive(Debug, Clone, Copy)]
pub struct ConceptSpace<'a> {
    pub u: &'a Matrix,
    pub w: &'a Matrix,
    pub mean: Option<&'a DVector<f64>>,
}

impl<'a> ConceptSpace<'a> {
    pub fn new(u: &'a Matrix, w: &'a Matrix) -> Result<Self> {
        if u.ncols() != w.nrows() {
            return Err(Error::Shape(format!("U has {} concepts, W has {}", u.ncols(), w.nrows())));
        }
        Ok(Self { u, w, mean: None })
    }

    pub fn from_decomposition(dec: &'a crate::ConceptDecomposition) -> Self {
        Self { u: &dec.u, w: &dec.w, mean: dec.mean.as_ref() }
    }
}

/// Averaged total indices for one head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadIndices {
    pub indices: Vec<f64>,
    pub raw: Vec<f64>,
    pub mean_variance: f64,
    pub instances_used: usize,
    pub instances_skipped: usize,
}

/// The head evaluated on reconstructed activations `(U⊙M + (1−M)μ)·W`.
/// Layer 1 is folded into the basis so each mask costs r×h, not d×h.
struct MaskedHead<'a> {
    projected: Matrix,
    offset: DVector<f64>,
    head: &'a MlpHead,
}

impl<'a> MaskedHead<'a> {
    fn new(space: &ConceptSpace, head: &'a MlpHead) -> Result<Self> {
        if space.w.ncols() != head.input_dim() {
            return Err(Error::Shape(format!("basis width {} but head expects {}", space.w.ncols(), head.input_dim())));
        }
        let projected = space.w * &head.w1;
        let mut offset = head.b1.clone();
        if let Some(mean) = space.mean {
            offset += (mean.transpose() * &head.w1).transpose();
        }
        Ok(Self { projected, offset, head })
    }

    fn logits(&self, coefficients: &Matrix) -> Matrix {
        let mut pre = coefficients * &self.projected;
        linalg::add_row_vector(&mut pre, &self.offset);
        pre.apply(|v| *v = v.max(0.0));
        let mut logits = pre * &self.head.w2;
        linalg::add_row_vector(&mut logits, &self.head.b2);
        logits
    }

    fn scores(&self, u: &[f64], masks: &Matrix, baseline: f64, phi: &ScoreFunction, class: usize) -> Vec<f64> {
        let coefficients = Matrix::from_fn(masks.nrows(), masks.ncols(), |j, k| {
            let m = masks[(j, k)];
            u[k] * m + (1.0 - m) * baseline
        });
        let logits = self.logits(&coefficients);
        logits.row_iter().map(|row| phi.score(row.transpose().as_slice(), class)).collect()
    }
}

/// Total Sobol index of every concept for one head, averaged over the
/// configured instance rows. Rows whose score does not vary are skipped; if
/// every row is constant the indices are undefined.
pub fn total_sobol(space: ConceptSpace, head: &MlpHead, phi: &ScoreFunction, masks: &MaskBatch, cfg: &SobolConfig) -> Result<HeadIndices> {
    phi.check(head)?;
    let r = space.u.ncols();
    if masks.rank() != r {
        return Err(Error::Shape(format!("masks cover {} concepts, U has {r}", masks.rank())));
    }
    let masked = MaskedHead::new(&space, head)?;
    let rows = cfg.instance_rows(space.u.nrows());
    let per_row: Vec<Option<JansenEstimate>> = rows
        .par_iter()
        .map(|&i| {
            let u: Vec<f64> = space.u.row(i).iter().cloned().collect();
            let class = linalg::argmax(masked.logits(&Matrix::from_row_slice(1, r, &u)).as_slice());
            jansen(masks, |m| masked.scores(&u, m, cfg.baseline, phi, class)).ok()
        })
        .collect();

    let used: Vec<&JansenEstimate> = per_row.iter().flatten().collect();
    if used.is_empty() {
        return Err(Error::ConstantScore);
    }
    let mut raw = vec![0.0; r];
    let mut mean_variance = 0.0;
    for est in &used {
        for (acc, v) in raw.iter_mut().zip(&est.raw) {
            *acc += v;
        }
        mean_variance += est.variance;
    }
    let count = used.len() as f64;
    raw.iter_mut().for_each(|v| *v /= count);
    Ok(HeadIndices {
        indices: raw.iter().map(|v| v.max(0.0)).collect(),
        raw,
        mean_variance: mean_variance / count,
        instances_used: used.len(),
        instances_skipped: rows.len() - used.len(),
    })
}

/// Task and group indices computed with shared masks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceReport {
    pub sobol_task: Vec<f64>,
    pub sobol_group: Vec<f64>,
    pub raw_task: Vec<f64>,
    pub raw_group: Vec<f64>,
    pub n_masks: usize,
    pub seed: u64,
    pub generator: MaskGenerator,
    pub phi_task: ScoreKind,
    pub phi_group: ScoreKind,
    pub task: HeadIndices,
    pub group: HeadIndices,
}

impl ImportanceReport {
    pub fn rank(&self) -> usize {
        self.sobol_task.len()
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        crate::dataio::write_json(path, self)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        crate::dataio::read_json(path)
    }
}

pub fn co_importance(
    space: ConceptSpace,
    head_task: &MlpHead,
    head_group: &MlpHead,
    phi_task: &ScoreFunction,
    phi_group: &ScoreFunction,
    cfg: &SobolConfig,
) -> Result<ImportanceReport> {
    let masks = cfg.masks(space.u.ncols())?;
    let side = |side: &'static str| move |e: Error| Error::Head { side, source: Box::new(e) };
    let task = total_sobol(space, head_task, phi_task, &masks, cfg).map_err(side("task"))?;
    let group = total_sobol(space, head_group, phi_group, &masks, cfg).map_err(side("group"))?;
    Ok(ImportanceReport {
        sobol_task: task.indices.clone(),
        sobol_group: group.indices.clone(),
        raw_task: task.raw.clone(),
        raw_group: group.raw.clone(),
        n_masks: masks.n(),
        seed: cfg.seed,
        generator: masks.generator(),
        phi_task: phi_task.kind,
        phi_group: phi_group.kind,
        task,
        group,
    })
}
