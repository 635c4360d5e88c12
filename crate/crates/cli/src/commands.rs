//! Resolved invocations and their execution.
//!
//! Every command runs in two phases. `load` reads and checks all inputs and
//! may only fail with [`Invalid`]; nothing is written before it succeeds.
//! `execute` computes and writes artifacts into the output directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::Context;
use latent_audit::attribute::attribute_all;
use latent_audit::dataio::{self, load_dataset, load_matrix, save_dataset, save_matrix, split_indices, Instance, Split};
use latent_audit::decompose::{decompose, ConceptDecomposition};
use latent_audit::embed::{EmbedRequest, EmbeddingProvider, HttpConfig, HttpEmbedder, ToyEncoder, ToyEncoderConfig};
use latent_audit::fairmetrics::{gaps, resample_gaps, PredictionTable, ResampleConfig};
use latent_audit::probes::{train_head, Labeled};
use latent_audit::sobol::{co_importance, ConceptSpace, ScoreFunction, ScoreKind, SobolConfig};
use latent_audit::synthetic::{biased_family, block_family, BiasedFamilyConfig, BlockFamilyConfig};
use latent_audit::taco::{pareto_sweep, rank_for_removal, remove_and_reconstruct, RemovalPlan, SweepConfig};
use latent_audit::textprep::{neutralize, tokenize, ExcerptMode, ExcerptSpec, NeutralizeConfig, TargetGroup};
use latent_audit::w2reg::{split_rows, train_fair, FairSplits, LambdaChoice, W2Config};
use latent_audit::{seed, ActivationMatrix, LabeledDataset, Matrix, Method, MlpHead, SplitSpec, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::Invalid;

pub type Seeds = BTreeMap<String, u64>;

/// Where concepts come from: a saved decomposition directory or a fresh
/// decomposition of the input matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Concepts {
    Saved { dir: PathBuf },
    Fresh { method: Method, rank: usize, nmf_iters: usize },
}

impl Concepts {
    fn inputs(&self) -> Vec<PathBuf> {
        match self {
            Concepts::Saved { dir } => decomposition_files(dir),
            Concepts::Fresh { .. } => vec![],
        }
    }

    fn method(&self) -> Result<Method, Invalid> {
        match self {
            Concepts::Saved { dir } => Ok(ConceptDecomposition::load(dir)?.method),
            Concepts::Fresh { method, .. } => Ok(*method),
        }
    }

    /// Loads a saved decomposition and checks it against an `n × d` matrix,
    /// or checks that a fresh one is possible.
    fn prepare(&self, n: usize, d: Option<usize>) -> Result<Option<ConceptDecomposition>, Invalid> {
        match self {
            Concepts::Saved { dir } => {
                let dec = ConceptDecomposition::load(dir)?;
                if dec.n_instances() != n {
                    return Err(Invalid(format!("decomposition has {} rows, input has {n}", dec.n_instances())));
                }
                if let Some(d) = d.filter(|d| *d != dec.dim()) {
                    return Err(Invalid(format!("decomposition has width {}, input has {d}", dec.dim())));
                }
                Ok(Some(dec))
            }
            Concepts::Fresh { rank, .. } => {
                check_rank(*rank, n, d)?;
                Ok(None)
            }
        }
    }

    /// The saved decomposition, or a fresh one written to `out/concepts`.
    fn realize(&self, saved: Option<ConceptDecomposition>, a: &ActivationMatrix, seed: u64, out: &Path, seeds: &mut Seeds) -> anyhow::Result<ConceptDecomposition> {
        match (self, saved) {
            (_, Some(dec)) => Ok(dec),
            (Concepts::Fresh { method, rank, nmf_iters }, None) => {
                let s = derived(seeds, seed, "decompose");
                let dec = decompose(a, *method, *rank, s, *nmf_iters)?;
                dec.save(out.join("concepts"))?;
                Ok(dec)
            }
            (Concepts::Saved { dir }, None) => anyhow::bail!("decomposition {} was not loaded", dir.display()),
        }
    }
}

fn check_rank(rank: usize, n: usize, d: Option<usize>) -> Result<(), Invalid> {
    let max = d.map_or(n, |d| n.min(d));
    if rank == 0 || rank > max {
        return Err(Invalid(format!("--rank {rank} out of range (must be in 1..={max})")));
    }
    Ok(())
}

fn decomposition_files(dir: &Path) -> Vec<PathBuf> {
    let mut files: Vec<PathBuf> = ["U.npy", "W.npy", "meta.json"].iter().map(|f| dir.join(f)).collect();
    files.extend(["mean.npy", "V.npy"].iter().map(|f| dir.join(f)).filter(|p| p.exists()));
    files
}

fn derived(seeds: &mut Seeds, master: u64, label: &str) -> u64 {
    let s = seed::derive(master, label);
    seeds.insert(label.to_string(), s);
    s
}

/// A dataset given as JSON-Lines plus its header file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetPaths {
    pub labels: PathBuf,
    pub header: PathBuf,
}

impl DatasetPaths {
    fn load(&self) -> Result<LabeledDataset, Invalid> {
        Ok(load_dataset(&self.labels, &self.header)?)
    }

    fn inputs(&self) -> Vec<PathBuf> {
        vec![self.labels.clone(), self.header.clone()]
    }
}

fn load_pair(matrix: &Path, data: &DatasetPaths) -> Result<(ActivationMatrix, LabeledDataset), Invalid> {
    let a = load_matrix(matrix)?;
    let ds = data.load()?;
    if a.nrows() != ds.len() {
        return Err(Invalid(format!("{} has {} rows but {} lists {} instances", matrix.display(), a.nrows(), data.labels.display(), ds.len())));
    }
    Ok((a, ds))
}

fn texts(ds: &LabeledDataset) -> Result<Vec<(String, Vec<String>)>, Invalid> {
    ds.instances()
        .iter()
        .map(|inst| match &inst.text {
            Some(t) => Ok((inst.id.clone(), tokenize(t))),
            None => Err(Invalid(format!("instance {} has no text", inst.id))),
        })
        .collect()
}

fn score(kind: ScoreKind) -> ScoreFunction {
    match kind {
        ScoreKind::ObservedClassLogit => ScoreFunction::observed_class(),
        ScoreKind::Top2LogitMargin => ScoreFunction::top2(),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn rows(labels: &[usize], idx: &[usize]) -> Vec<usize> {
    idx.iter().map(|&i| labels[i]).collect()
}

/// Task and group heads on the input activations, trained on the same split.
fn train_heads(a: &Matrix, ds: &LabeledDataset, split: &Split, train: &TrainConfig, master: u64, seeds: &mut Seeds) -> anyhow::Result<(MlpHead, MlpHead)> {
    let (xt, xv) = (a.select_rows(&split.train), a.select_rows(&split.valid));
    let mut fit = |labels: Vec<usize>, classes: usize, label: &str| -> anyhow::Result<MlpHead> {
        let (yt, yv) = (rows(&labels, &split.train), rows(&labels, &split.valid));
        let cfg = train.clone().with_seed(derived(seeds, master, label));
        Ok(train_head(Labeled::new(&xt, &yt)?, Labeled::new(&xv, &yv)?, classes, &cfg)?.head)
    };
    let task = fit(ds.labels(), ds.n_classes(), "task-head")?;
    let group = fit(ds.groups(), 2, "group-head")?;
    Ok((task, group))
}

/// Settings shared by `rank` and by `sweep` when it computes its own plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Importance {
    pub phi: ScoreKind,
    pub sobol: SobolConfig,
    pub train: TrainConfig,
    pub split: SplitSpec,
    pub epsilon: f64,
}

impl Importance {
    fn plan(&self, dec: &ConceptDecomposition, a: &ActivationMatrix, ds: &LabeledDataset, master: u64, out: &Path, seeds: &mut Seeds) -> anyhow::Result<RemovalPlan> {
        let split = split_indices(ds.len(), &SplitSpec { seed: derived(seeds, master, "split"), ..self.split })?;
        let (task, group) = train_heads(a.data(), ds, &split, &self.train, master, seeds)?;
        let sobol = SobolConfig { seed: derived(seeds, master, "sobol"), ..self.sobol.clone() };
        let phi = score(self.phi);
        let report = co_importance(ConceptSpace::from_decomposition(dec), &task, &group, &phi, &phi, &sobol)?;
        let plan = rank_for_removal(&report, self.epsilon)?;
        report.save(out.join("importance.json"))?;
        plan.save(out.join("plan.json"))?;
        task.save(out.join("heads").join("task"))?;
        group.save(out.join("heads").join("group"))?;
        Ok(plan)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecomposeRun {
    pub matrix: PathBuf,
    pub method: Method,
    pub rank: usize,
    pub nmf_iters: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankRun {
    pub matrix: PathBuf,
    pub data: DatasetPaths,
    pub concepts: Concepts,
    pub importance: Importance,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoveRun {
    pub decomposition: PathBuf,
    pub plan: PathBuf,
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provider {
    Toy { dim: usize, buckets: usize },
    Http { endpoint: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeRun {
    pub data: DatasetPaths,
    pub concepts: Concepts,
    pub provider: Provider,
    pub mode: ExcerptMode,
    pub class: Option<usize>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FairSource {
    /// Gaps of one prediction file, one class index per line.
    Predictions { path: PathBuf },
    /// Gap distributions over stratified resamples.
    Resample { matrix: PathBuf, sizes: Vec<usize>, repeats: usize, paired: bool, train: TrainConfig },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairmetricsRun {
    pub data: DatasetPaths,
    pub source: FairSource,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaMode {
    Fixed,
    Tune { grid: Vec<f64>, max_accuracy_drop: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct W2trainRun {
    pub matrix: PathBuf,
    pub data: DatasetPaths,
    pub w2: W2Config,
    pub lambda: LambdaMode,
    pub train: TrainConfig,
    pub split: SplitSpec,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeutralizeRun {
    pub data: DatasetPaths,
    pub target: TargetGroup,
    pub names: Option<PathBuf>,
    pub indicators: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRun {
    pub matrix: PathBuf,
    pub data: DatasetPaths,
    pub concepts: Concepts,
    /// A saved removal plan; computed with `importance` when absent.
    pub plan: Option<PathBuf>,
    pub importance: Importance,
    pub repeats: usize,
    pub ks: Option<Vec<usize>>,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Block,
    Biased,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthRun {
    pub family: Family,
    pub n: usize,
    pub dim: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Invocation {
    Decompose(DecomposeRun),
    Rank(RankRun),
    Remove(RemoveRun),
    Attribute(AttributeRun),
    Fairmetrics(FairmetricsRun),
    W2train(W2trainRun),
    Neutralize(NeutralizeRun),
    Sweep(SweepRun),
    Synth(SynthRun),
}

/// Inputs that passed validation, ready for `execute`.
pub enum Loaded {
    Decompose(ActivationMatrix),
    Rank(ActivationMatrix, LabeledDataset, Option<ConceptDecomposition>),
    Remove(ConceptDecomposition, RemovalPlan),
    Attribute(Vec<(String, Vec<String>)>, Box<dyn EmbeddingProvider>, Option<ConceptDecomposition>),
    Fairmetrics(LabeledDataset, FairInput),
    W2train(ActivationMatrix, LabeledDataset),
    Neutralize(LabeledDataset, NeutralizeConfig),
    Sweep(ActivationMatrix, LabeledDataset, Option<ConceptDecomposition>, Option<RemovalPlan>),
    Synth,
}

pub enum FairInput {
    Predictions(Vec<usize>),
    Features(Matrix),
}

fn read_predictions(path: &Path, n: usize, classes: usize) -> Result<Vec<usize>, Invalid> {
    let text = std::fs::read_to_string(path).map_err(|e| Invalid(format!("cannot read {}: {e}", path.display())))?;
    let pred = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| match l.trim().parse::<usize>() {
            Ok(p) if p < classes => Ok(p),
            _ => Err(Invalid(format!("{}:{}: expected a class index below {classes}, got {l:?}", path.display(), i + 1))),
        })
        .collect::<Result<Vec<_>, _>>()?;
    if pred.len() != n {
        return Err(Invalid(format!("{} holds {} predictions for {n} instances", path.display(), pred.len())));
    }
    Ok(pred)
}

impl Invocation {
    pub fn name(&self) -> &'static str {
        match self {
            Invocation::Decompose(_) => "decompose",
            Invocation::Rank(_) => "rank",
            Invocation::Remove(_) => "remove",
            Invocation::Attribute(_) => "attribute",
            Invocation::Fairmetrics(_) => "fairmetrics",
            Invocation::W2train(_) => "w2train",
            Invocation::Neutralize(_) => "neutralize",
            Invocation::Sweep(_) => "sweep",
            Invocation::Synth(_) => "synth",
        }
    }

    pub fn master_seed(&self) -> Option<u64> {
        match self {
            Invocation::Decompose(r) => Some(r.seed),
            Invocation::Rank(r) => Some(r.seed),
            Invocation::Attribute(r) => Some(r.seed),
            Invocation::Fairmetrics(r) => Some(r.seed),
            Invocation::W2train(r) => Some(r.seed),
            Invocation::Sweep(r) => Some(r.seed),
            Invocation::Synth(r) => Some(r.seed),
            Invocation::Remove(_) | Invocation::Neutralize(_) => None,
        }
    }

    /// Files whose digests go into the manifest.
    pub fn inputs(&self) -> Vec<PathBuf> {
        match self {
            Invocation::Decompose(r) => vec![r.matrix.clone()],
            Invocation::Rank(r) => [vec![r.matrix.clone()], r.data.inputs(), r.concepts.inputs()].concat(),
            Invocation::Remove(r) => [decomposition_files(&r.decomposition), vec![r.plan.clone()]].concat(),
            Invocation::Attribute(r) => [r.data.inputs(), r.concepts.inputs()].concat(),
            Invocation::Fairmetrics(r) => {
                let extra = match &r.source {
                    FairSource::Predictions { path } => path.clone(),
                    FairSource::Resample { matrix, .. } => matrix.clone(),
                };
                [r.data.inputs(), vec![extra]].concat()
            }
            Invocation::W2train(r) => [vec![r.matrix.clone()], r.data.inputs()].concat(),
            Invocation::Neutralize(r) => [r.data.inputs(), r.names.iter().chain(&r.indicators).cloned().collect()].concat(),
            Invocation::Sweep(r) => [vec![r.matrix.clone()], r.data.inputs(), r.concepts.inputs(), r.plan.iter().cloned().collect()].concat(),
            Invocation::Synth(_) => vec![],
        }
    }

    pub fn load(&self) -> Result<Loaded, Invalid> {
        match self {
            Invocation::Decompose(r) => {
                let a = load_matrix(&r.matrix)?;
                check_rank(r.rank, a.nrows(), Some(a.ncols()))?;
                if r.method == Method::Nmf {
                    if let Some((row, col, value)) = a.first_negative() {
                        return Err(Invalid(format!("nmf needs a non-negative matrix; found {value} at row {row}, column {col}")));
                    }
                }
                Ok(Loaded::Decompose(a))
            }
            Invocation::Rank(r) => {
                let (a, ds) = load_pair(&r.matrix, &r.data)?;
                r.importance.split.validate()?;
                let dec = r.concepts.prepare(a.nrows(), Some(a.ncols()))?;
                Ok(Loaded::Rank(a, ds, dec))
            }
            Invocation::Remove(r) => {
                let dec = ConceptDecomposition::load(&r.decomposition)?;
                let plan = RemovalPlan::load(&r.plan)?;
                if plan.rank() != dec.rank() {
                    return Err(Invalid(format!("plan orders {} concepts, decomposition has {}", plan.rank(), dec.rank())));
                }
                if r.k > dec.rank() {
                    return Err(Invalid(format!("--k {} exceeds the rank {}", r.k, dec.rank())));
                }
                Ok(Loaded::Remove(dec, plan))
            }
            Invocation::Attribute(r) => {
                let method = r.concepts.method()?;
                if method != Method::Nmf {
                    return Err(Invalid(format!("attribute requires an nmf decomposition (occlusion needs non-negative coefficients), got {method}")));
                }
                let ds = r.data.load()?;
                let mut texts = texts(&ds)?;
                if let Some(k) = r.class {
                    if k >= ds.n_classes() {
                        return Err(Invalid(format!("--class {k} is outside the dataset's {} classes", ds.n_classes())));
                    }
                    texts = texts.into_iter().zip(ds.labels()).filter(|(_, y)| *y == k).map(|(t, _)| t).collect();
                    if texts.is_empty() {
                        return Err(Invalid(format!("no excerpt has class {k}")));
                    }
                }
                let provider: Box<dyn EmbeddingProvider> = match &r.provider {
                    Provider::Toy { dim, buckets } => Box::new(ToyEncoder::new(ToyEncoderConfig {
                        dim: *dim,
                        seed: seed::derive(r.seed, "toy-encoder"),
                        vocab_hash_buckets: *buckets,
                    })?),
                    Provider::Http { endpoint } => Box::new(HttpEmbedder::new(HttpConfig::new(endpoint.clone()))?),
                };
                let dim = match r.provider {
                    Provider::Toy { dim, .. } => Some(dim),
                    Provider::Http { .. } => None,
                };
                let dec = r.concepts.prepare(texts.len(), dim)?;
                Ok(Loaded::Attribute(texts, provider, dec))
            }
            Invocation::Fairmetrics(r) => {
                let ds = r.data.load()?;
                let input = match &r.source {
                    FairSource::Predictions { path } => FairInput::Predictions(read_predictions(path, ds.len(), ds.n_classes())?),
                    FairSource::Resample { matrix, sizes, repeats, .. } => {
                        let a = load_matrix(matrix)?;
                        if a.nrows() != ds.len() {
                            return Err(Invalid(format!("{} has {} rows for {} instances", matrix.display(), a.nrows(), ds.len())));
                        }
                        if *repeats < 2 {
                            return Err(Invalid(format!("--repeats must be at least 2, got {repeats}")));
                        }
                        let pool = ds.len() - (ds.len() as f64 * ResampleConfig::default().test_frac).floor() as usize;
                        if let Some(bad) = sizes.iter().find(|&&m| m < 2 || m > pool) {
                            return Err(Invalid(format!("sample size {bad} must lie in 2..={pool}")));
                        }
                        FairInput::Features(a.into_data())
                    }
                };
                Ok(Loaded::Fairmetrics(ds, input))
            }
            Invocation::W2train(r) => {
                let (a, ds) = load_pair(&r.matrix, &r.data)?;
                r.w2.validate()?;
                r.split.validate()?;
                if let Some(k) = r.w2.lambdas.keys().find(|&&k| k >= ds.n_classes()) {
                    return Err(Invalid(format!("--lambda names class {k}, dataset has {} classes", ds.n_classes())));
                }
                if r.lambda == LambdaMode::Fixed {
                    // The penalty draws m scores per group of each regularized class.
                    let split = split_indices(ds.len(), &SplitSpec { seed: seed::derive(r.seed, "split"), ..r.split })?;
                    let (y, g) = (ds.labels(), ds.groups());
                    for (k, _) in r.w2.active() {
                        for s in 0..2 {
                            let n = split.train.iter().filter(|&&i| y[i] == k && g[i] == s).count();
                            if n < r.w2.m {
                                return Err(Invalid(format!("class {k} has {n} training observations in group {s}, fewer than m = {}", r.w2.m)));
                            }
                        }
                    }
                }
                Ok(Loaded::W2train(a, ds))
            }
            Invocation::Neutralize(r) => {
                let ds = r.data.load()?;
                texts(&ds)?;
                let mut cfg = NeutralizeConfig::new(r.target);
                if let Some(p) = &r.names {
                    cfg = cfg.load_first_names(p)?;
                }
                if let Some(p) = &r.indicators {
                    cfg = cfg.load_indicator_map(p)?;
                }
                cfg.validate()?;
                Ok(Loaded::Neutralize(ds, cfg))
            }
            Invocation::Sweep(r) => {
                let (a, ds) = load_pair(&r.matrix, &r.data)?;
                r.importance.split.validate()?;
                if r.repeats == 0 {
                    return Err(Invalid("--repeats must be at least 1".into()));
                }
                let dec = r.concepts.prepare(a.nrows(), Some(a.ncols()))?;
                let rank = match (&r.concepts, &dec) {
                    (_, Some(d)) => d.rank(),
                    (Concepts::Fresh { rank, .. }, None) => *rank,
                    (Concepts::Saved { .. }, None) => unreachable!("saved decompositions are loaded"),
                };
                let plan = r.plan.as_ref().map(RemovalPlan::load).transpose()?;
                if let Some(p) = plan.as_ref().filter(|p| p.rank() != rank) {
                    return Err(Invalid(format!("plan orders {} concepts, rank is {rank}", p.rank())));
                }
                if let Some(bad) = r.ks.iter().flatten().find(|&&k| k > rank) {
                    return Err(Invalid(format!("cannot remove {bad} of {rank} concepts")));
                }
                Ok(Loaded::Sweep(a, ds, dec, plan))
            }
            Invocation::Synth(r) => {
                if r.n < 4 {
                    return Err(Invalid(format!("--n must be at least 4, got {}", r.n)));
                }
                let min_dim = match r.family {
                    Family::Block => 2 + BlockFamilyConfig::default().nuisance_scales.len(),
                    Family::Biased => 3,
                };
                if r.dim < min_dim {
                    return Err(Invalid(format!("--dim must be at least {min_dim} for this family, got {}", r.dim)));
                }
                Ok(Loaded::Synth)
            }
        }
    }

    /// Computes and writes artifacts; returns the derived seeds.
    pub fn execute(&self, loaded: Loaded, out: &Path) -> anyhow::Result<Seeds> {
        let mut seeds = Seeds::new();
        if let Some(s) = self.master_seed() {
            seeds.insert("seed".into(), s);
        }
        match (self, loaded) {
            (Invocation::Decompose(r), Loaded::Decompose(a)) => {
                let s = derived(&mut seeds, r.seed, "decompose");
                decompose(&a, r.method, r.rank, s, r.nmf_iters)?.save(out)?;
            }
            (Invocation::Rank(r), Loaded::Rank(a, ds, saved)) => {
                let dec = r.concepts.realize(saved, &a, r.seed, out, &mut seeds)?;
                r.importance.plan(&dec, &a, &ds, r.seed, out, &mut seeds)?;
            }
            (Invocation::Remove(r), Loaded::Remove(dec, plan)) => {
                let a = remove_and_reconstruct(&dec, &plan, r.k)?;
                save_matrix(out.join("A_removed.npy"), &a)?;
            }
            (Invocation::Attribute(r), Loaded::Attribute(texts, provider, saved)) => {
                let dec = match saved {
                    Some(dec) => dec,
                    None => {
                        let tokens: Vec<Vec<String>> = texts.iter().map(|(_, t)| t.clone()).collect();
                        let a = provider.embed(&EmbedRequest::new(tokens))?;
                        save_matrix(out.join("activations.npy"), &a)?;
                        r.concepts.realize(None, &a, r.seed, out, &mut seeds)?
                    }
                };
                attribute_all(&texts, &dec, provider.as_ref(), &ExcerptSpec::new(r.mode))?.save(out.join("attribution.json"))?;
            }
            (Invocation::Fairmetrics(r), Loaded::Fairmetrics(ds, input)) => match (&r.source, input) {
                (FairSource::Predictions { .. }, FairInput::Predictions(pred)) => {
                    let report = gaps(&PredictionTable::new(ds.labels(), pred, ds.groups(), ds.n_classes())?)?;
                    report.save(out.join("gaps.json"))?;
                    report.write_csv(out.join("gaps.csv"))?;
                }
                (FairSource::Resample { sizes, repeats, paired, train, .. }, FairInput::Features(x)) => {
                    let cfg = ResampleConfig {
                        sizes: sizes.clone(),
                        repeats: *repeats,
                        seed: derived(&mut seeds, r.seed, "resample"),
                        paired: *paired,
                        train: train.clone(),
                        ..ResampleConfig::default()
                    };
                    resample_gaps(&x, &ds, &cfg)?.save(out.join("stability.json"))?;
                }
                _ => anyhow::bail!("fairmetrics inputs do not match the configuration"),
            },
            (Invocation::W2train(r), Loaded::W2train(a, ds)) => {
                let split = SplitSpec { seed: derived(&mut seeds, r.seed, "split"), ..r.split };
                let [train, valid, test] = split_rows(a.data(), &ds, &split)?;
                let splits = FairSplits { train: train.view()?, valid: valid.view()?, test: test.view()? };
                let base = r.train.clone().with_seed(derived(&mut seeds, r.seed, "train"));
                let choice = match &r.lambda {
                    LambdaMode::Fixed => LambdaChoice::Fixed,
                    LambdaMode::Tune { grid, max_accuracy_drop } => LambdaChoice::Tune { grid: grid.clone(), max_accuracy_drop: *max_accuracy_drop },
                };
                let outcome = train_fair(splits, ds.n_classes(), &r.w2, &base, &choice)?;
                outcome.report.write_csv(out.join("bias_report.csv"))?;
                outcome.report.save(out.join("bias_report.json"))?;
                write_json(&out.join("w2_config.json"), &outcome.config)?;
                outcome.baseline.head.save(out.join("heads").join("baseline"))?;
                outcome.fair.head.save(out.join("heads").join("fair"))?;
            }
            (Invocation::Neutralize(_), Loaded::Neutralize(ds, cfg)) => {
                let instances: Vec<Instance> = ds
                    .instances()
                    .iter()
                    .map(|inst| Instance { text: inst.text.as_ref().map(|t| neutralize(&tokenize(t), &cfg).join(" ")), ..inst.clone() })
                    .collect();
                let neutral = LabeledDataset::new(instances, ds.class_names().to_vec(), ds.group_names().to_vec())?;
                save_dataset(out.join("neutralized.jsonl"), out.join("neutralized.header.json"), &neutral)?;
            }
            (Invocation::Sweep(r), Loaded::Sweep(a, ds, saved, plan)) => {
                let dec = r.concepts.realize(saved, &a, r.seed, out, &mut seeds)?;
                let plan = match plan {
                    Some(p) => p,
                    None => r.importance.plan(&dec, &a, &ds, r.seed, out, &mut seeds)?,
                };
                let run_seeds: Vec<u64> = (0..r.repeats).map(|i| seed::derive_indexed(r.seed, "sweep", i as u64)).collect();
                for (i, s) in run_seeds.iter().enumerate() {
                    seeds.insert(format!("sweep-{i}"), *s);
                }
                let cfg = SweepConfig { train: r.importance.train.clone(), split: r.importance.split, seeds: run_seeds, ks: r.ks.clone() };
                let report = pareto_sweep(&dec, &plan, &ds, &cfg)?;
                report.write_csv(out.join("sweep.csv"))?;
                report.write_summary(out.join("sweep_summary.json"))?;
            }
            (Invocation::Synth(r), Loaded::Synth) => {
                let (a, ds) = match r.family {
                    Family::Block => {
                        let fam = block_family(&BlockFamilyConfig { n: r.n, dim: r.dim, seed: r.seed, ..BlockFamilyConfig::default() })?;
                        dataio::save_npy(out.join("directions.npy"), &fam.directions)?;
                        (fam.activations, fam.dataset)
                    }
                    Family::Biased => biased_family(&BiasedFamilyConfig { n: r.n, dim: r.dim, seed: r.seed, ..BiasedFamilyConfig::default() })?,
                };
                save_matrix(out.join("activations.npy"), &a)?;
                save_dataset(out.join("dataset.jsonl"), out.join("dataset.header.json"), &ds)?;
            }
            _ => anyhow::bail!("loaded inputs do not match the {} command", self.name()),
        }
        Ok(seeds)
    }
}
