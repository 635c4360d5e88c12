//! Flag definitions and their resolution into [`Invocation`]s.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use latent_audit::dataio::header_path_for;
use latent_audit::sobol::ScoreKind;
use latent_audit::taco::DEFAULT_EPSILON;
use latent_audit::textprep::{ExcerptMode, TargetGroup};
use latent_audit::w2reg::{W2Config, DEFAULT_LAMBDA_GRID, DEFAULT_MAX_ACCURACY_DROP};
use latent_audit::{Method, SplitSpec};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::commands::*;
use crate::config::{merged, SobolSection, TrainSection};
use crate::Invalid;

const NMF_ITERS: usize = 500;
const TOY_DIM: usize = 16;
const TOY_BUCKETS: usize = 1024;
const RESAMPLE_REPEATS: usize = 50;
const SWEEP_REPEATS: usize = 5;

#[derive(Debug, Parser)]
#[command(name = "latent-audit", version, about = "Concept-level audits of text-classifier embeddings")]
pub struct Cli {
    /// Worker threads for parallel stages (default: one per core).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// TOML file supplying defaults for any flag of the command.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Factor an activation matrix into concept coefficients U and basis W.
    Decompose(DecomposeArgs),
    /// Rank concepts for removal by group versus task Sobol importance.
    Rank(RankArgs),
    /// Reconstruct activations with the top-k concepts of a plan removed.
    Remove(RemoveArgs),
    /// Occlusion attribution of text elements to NMF concepts.
    Attribute(AttributeArgs),
    /// Group-fairness gaps of predictions, or their spread under resampling.
    Fairmetrics(FairmetricsArgs),
    /// Train a head with the per-class Wasserstein-2 fairness penalty.
    W2train(W2trainArgs),
    /// Replace first names and gender indicators in dataset texts.
    Neutralize(NeutralizeArgs),
    /// Retrain task and group probes after each removal count.
    Sweep(SweepArgs),
    /// Write a seeded synthetic fixture.
    Synth(SynthArgs),
    /// Rerun the command recorded in a manifest.
    Replay(ReplayArgs),
}

#[derive(Debug, Args, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecomposeArgs {
    /// Activation matrix (.npy or .csv).
    #[arg(long)]
    pub matrix: Option<PathBuf>,
    /// nmf, svd, pca or ica.
    #[arg(long)]
    pub method: Option<String>,
    #[arg(long)]
    pub rank: Option<usize>,
    #[arg(long)]
    pub nmf_iters: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RankArgs {
    #[arg(long)]
    pub matrix: Option<PathBuf>,
    /// Dataset as JSON-Lines.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Dataset header (default: `<labels stem>.header.json`).
    #[arg(long)]
    pub header: Option<PathBuf>,
    /// Directory written by `decompose`; replaces --method/--rank.
    #[arg(long)]
    pub decomposition: Option<PathBuf>,
    #[arg(long)]
    pub method: Option<String>,
    #[arg(long)]
    pub rank: Option<usize>,
    #[arg(long)]
    pub nmf_iters: Option<usize>,
    /// Score function: class_logit or top2 (default).
    #[arg(long)]
    pub phi: Option<String>,
    /// Sobol mask count, a power of two.
    #[arg(long)]
    pub masks: Option<usize>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(skip)]
    pub train: Option<TrainSection>,
    #[arg(skip)]
    pub sobol: Option<SobolSection>,
}

#[derive(Debug, Args, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RemoveArgs {
    #[arg(long)]
    pub decomposition: Option<PathBuf>,
    /// Removal plan written by `rank`.
    #[arg(long)]
    pub plan: Option<PathBuf>,
    /// Number of concepts to remove.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributeArgs {
    /// Dataset whose instances carry `text`.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long)]
    pub header: Option<PathBuf>,
    #[arg(long)]
    pub decomposition: Option<PathBuf>,
    /// Must be nmf.
    #[arg(long)]
    pub method: Option<String>,
    #[arg(long)]
    pub rank: Option<usize>,
    #[arg(long)]
    pub nmf_iters: Option<usize>,
    /// Embedding sidecar URL; the built-in toy encoder is used without one.
    #[arg(long, env = "LATENT_AUDIT_ENDPOINT")]
    pub endpoint: Option<String>,
    /// Toy encoder width.
    #[arg(long)]
    pub dim: Option<usize>,
    /// Toy encoder hash buckets.
    #[arg(long)]
    pub buckets: Option<usize>,
    /// Occluded element: words (default), clauses, sentences_min6 or whole_text.
    #[arg(long)]
    pub mode: Option<String>,
    /// Only excerpts whose `y` is this class index, e.g. the class the
    /// model predicts for them; concepts are then fitted for that class.
    #[arg(long)]
    pub class: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FairmetricsArgs {
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long)]
    pub header: Option<PathBuf>,
    /// Predicted class per instance, one per line.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    /// Features for resampling; used with --sizes.
    #[arg(long)]
    pub matrix: Option<PathBuf>,
    /// Stratified sample sizes, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub sizes: Option<Vec<usize>>,
    #[arg(long)]
    pub repeats: Option<usize>,
    /// Compare sizes with the paired t-test instead of Welch's.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub paired: Option<bool>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(skip)]
    pub train: Option<TrainSection>,
}

#[derive(Debug, Args, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct W2trainArgs {
    #[arg(long)]
    pub matrix: Option<PathBuf>,
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long)]
    pub header: Option<PathBuf>,
    /// TPR-gap threshold for flagging classes.
    #[arg(long)]
    pub tau: Option<f64>,
    /// Fixed weights `class=value,...`; without it λ is tuned.
    #[arg(long)]
    pub lambda: Option<String>,
    /// Candidate λ values when tuning, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub lambda_grid: Option<Vec<f64>>,
    /// Largest validation accuracy loss accepted while tuning.
    #[arg(long)]
    pub max_drop: Option<f64>,
    /// Auxiliary scores per group and class at each step.
    #[arg(long)]
    pub m: Option<usize>,
    /// Steps of the discretized score grid.
    #[arg(long)]
    pub grid: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(skip)]
    pub train: Option<TrainSection>,
}

#[derive(Debug, Args, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NeutralizeArgs {
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long)]
    pub header: Option<PathBuf>,
    /// female (default) or male.
    #[arg(long)]
    pub target: Option<String>,
    /// First-name list, one per line.
    #[arg(long)]
    pub names: Option<PathBuf>,
    /// JSON object mapping indicators to replacements.
    #[arg(long)]
    pub indicators: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepArgs {
    #[arg(long)]
    pub matrix: Option<PathBuf>,
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long)]
    pub header: Option<PathBuf>,
    #[arg(long)]
    pub decomposition: Option<PathBuf>,
    #[arg(long)]
    pub method: Option<String>,
    #[arg(long)]
    pub rank: Option<usize>,
    #[arg(long)]
    pub nmf_iters: Option<usize>,
    /// Saved removal plan; computed from Sobol indices when absent.
    #[arg(long)]
    pub plan: Option<PathBuf>,
    #[arg(long)]
    pub phi: Option<String>,
    #[arg(long)]
    pub masks: Option<usize>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Seeds per removal count.
    #[arg(long)]
    pub repeats: Option<usize>,
    /// Removal counts, comma separated (default: 0 to rank − 1).
    #[arg(long, value_delimiter = ',')]
    pub ks: Option<Vec<usize>>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(skip)]
    pub train: Option<TrainSection>,
    #[arg(skip)]
    pub sobol: Option<SobolSection>,
}

#[derive(Debug, Args, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthArgs {
    /// block (group and task on orthogonal directions) or biased (3-class TPR gap).
    #[arg(long)]
    pub family: Option<String>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    /// manifest.json, or the directory holding it.
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

fn need<T>(value: Option<T>, key: &str) -> Result<T, Invalid> {
    value.ok_or_else(|| Invalid(format!("missing --{} (flag or config key `{}`)", key.replace('_', "-"), key)))
}

/// Absolute path of an existing input file.
fn input(path: PathBuf) -> Result<PathBuf, Invalid> {
    if !path.exists() {
        return Err(Invalid(format!("input {} does not exist", path.display())));
    }
    std::path::absolute(&path).map_err(|e| Invalid(format!("{}: {e}", path.display())))
}

fn dataset(labels: Option<PathBuf>, header: Option<PathBuf>) -> Result<DatasetPaths, Invalid> {
    let labels = input(need(labels, "labels")?)?;
    let header = input(header.unwrap_or_else(|| header_path_for(&labels)))?;
    Ok(DatasetPaths { labels, header })
}

fn method(value: &str) -> Result<Method, Invalid> {
    Ok(value.parse::<Method>()?)
}

fn phi(value: Option<String>) -> Result<ScoreKind, Invalid> {
    Ok(value.as_deref().unwrap_or("top2").parse::<ScoreKind>()?)
}

/// Parses a lowercase enum name through its serde representation.
fn named<T: DeserializeOwned>(value: &str, flag: &str, choices: &str) -> Result<T, Invalid> {
    serde_json::from_value(serde_json::Value::String(value.into())).map_err(|_| Invalid(format!("--{flag} must be one of {choices}, got {value:?}")))
}

fn concepts(decomposition: Option<PathBuf>, method_name: Option<String>, rank: Option<usize>, nmf_iters: Option<usize>) -> Result<Concepts, Invalid> {
    match decomposition {
        Some(dir) => {
            if rank.is_some() {
                return Err(Invalid("--decomposition and --rank are mutually exclusive".into()));
            }
            if !dir.join("meta.json").exists() {
                return Err(Invalid(format!("{} holds no decomposition (meta.json missing)", dir.display())));
            }
            let dir = std::path::absolute(&dir).map_err(|e| Invalid(e.to_string()))?;
            if let Some(m) = method_name {
                let saved = latent_audit::ConceptDecomposition::load(&dir)?.method;
                if method(&m)? != saved {
                    return Err(Invalid(format!("--method {m} conflicts with the saved {saved} decomposition")));
                }
            }
            Ok(Concepts::Saved { dir })
        }
        None => Ok(Concepts::Fresh {
            method: method(&need(method_name, "method")?)?,
            rank: need(rank, "rank")?,
            nmf_iters: nmf_iters.unwrap_or(NMF_ITERS),
        }),
    }
}

/// Parses `class=value,...`.
pub fn lambdas(spec: &str) -> Result<BTreeMap<usize, f64>, Invalid> {
    let bad = |part: &str| Invalid(format!("--lambda expects class=value pairs, got {part:?}"));
    let mut out = BTreeMap::new();
    for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (k, v) = part.split_once('=').ok_or_else(|| bad(part))?;
        let k: usize = k.trim().parse().map_err(|_| bad(part))?;
        let v: f64 = v.trim().parse().map_err(|_| bad(part))?;
        if out.insert(k, v).is_some() {
            return Err(Invalid(format!("--lambda names class {k} twice")));
        }
    }
    if out.is_empty() {
        return Err(bad(spec));
    }
    Ok(out)
}

fn importance(phi_name: Option<String>, masks: Option<usize>, epsilon: Option<f64>, train: Option<&TrainSection>, sobol: Option<&SobolSection>) -> Result<Importance, Invalid> {
    let epsilon = epsilon.unwrap_or(DEFAULT_EPSILON);
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Invalid(format!("--epsilon must be positive, got {epsilon}")));
    }
    Ok(Importance {
        phi: phi(phi_name)?,
        sobol: SobolSection::resolve(sobol, masks, 0)?,
        train: TrainSection::resolve(train, 0)?,
        split: SplitSpec::default(),
        epsilon,
    })
}

impl Cmd {
    pub fn name(&self) -> &'static str {
        match self {
            Cmd::Decompose(_) => "decompose",
            Cmd::Rank(_) => "rank",
            Cmd::Remove(_) => "remove",
            Cmd::Attribute(_) => "attribute",
            Cmd::Fairmetrics(_) => "fairmetrics",
            Cmd::W2train(_) => "w2train",
            Cmd::Neutralize(_) => "neutralize",
            Cmd::Sweep(_) => "sweep",
            Cmd::Synth(_) => "synth",
            Cmd::Replay(_) => "replay",
        }
    }

    /// Merges the config file under the flags and checks that everything
    /// required is present. Returns the invocation and output directory.
    pub fn resolve(self, config: Option<&Path>) -> Result<(Invocation, PathBuf), Invalid> {
        match self {
            Cmd::Decompose(a) => {
                let a = merged(&a, config)?;
                let run = DecomposeRun {
                    matrix: input(need(a.matrix, "matrix")?)?,
                    method: method(&need(a.method, "method")?)?,
                    rank: need(a.rank, "rank")?,
                    nmf_iters: a.nmf_iters.unwrap_or(NMF_ITERS),
                    seed: a.seed.unwrap_or(0),
                };
                Ok((Invocation::Decompose(run), need(a.out, "out")?))
            }
            Cmd::Rank(a) => {
                let a = merged(&a, config)?;
                let run = RankRun {
                    matrix: input(need(a.matrix, "matrix")?)?,
                    data: dataset(a.labels, a.header)?,
                    concepts: concepts(a.decomposition, a.method, a.rank, a.nmf_iters)?,
                    importance: importance(a.phi, a.masks, a.epsilon, a.train.as_ref(), a.sobol.as_ref())?,
                    seed: a.seed.unwrap_or(0),
                };
                Ok((Invocation::Rank(run), need(a.out, "out")?))
            }
            Cmd::Remove(a) => {
                let a = merged(&a, config)?;
                let dir = need(a.decomposition, "decomposition")?;
                if !dir.join("meta.json").exists() {
                    return Err(Invalid(format!("{} holds no decomposition (meta.json missing)", dir.display())));
                }
                let run = RemoveRun {
                    decomposition: std::path::absolute(&dir).map_err(|e| Invalid(e.to_string()))?,
                    plan: input(need(a.plan, "plan")?)?,
                    k: need(a.k, "k")?,
                };
                Ok((Invocation::Remove(run), need(a.out, "out")?))
            }
            Cmd::Attribute(a) => {
                let a = merged(&a, config)?;
                let method_name = a.method.or_else(|| a.decomposition.is_none().then(|| "nmf".to_string()));
                let provider = match a.endpoint.filter(|e| !e.trim().is_empty()) {
                    Some(endpoint) => Provider::Http { endpoint },
                    None => Provider::Toy { dim: a.dim.unwrap_or(TOY_DIM), buckets: a.buckets.unwrap_or(TOY_BUCKETS) },
                };
                let run = AttributeRun {
                    data: dataset(a.labels, a.header)?,
                    concepts: concepts(a.decomposition, method_name, a.rank, a.nmf_iters)?,
                    provider,
                    mode: named::<ExcerptMode>(a.mode.as_deref().unwrap_or("words"), "mode", "words, clauses, sentences_min6, whole_text")?,
                    class: a.class,
                    seed: a.seed.unwrap_or(0),
                };
                Ok((Invocation::Attribute(run), need(a.out, "out")?))
            }
            Cmd::Fairmetrics(a) => {
                let a = merged(&a, config)?;
                let seed = a.seed.unwrap_or(0);
                let source = match (a.predictions, a.sizes) {
                    (Some(_), Some(_)) => return Err(Invalid("--predictions and --sizes are mutually exclusive".into())),
                    (Some(p), None) => FairSource::Predictions { path: input(p)? },
                    (None, Some(sizes)) => FairSource::Resample {
                        matrix: input(need(a.matrix, "matrix")?)?,
                        sizes,
                        repeats: a.repeats.unwrap_or(RESAMPLE_REPEATS),
                        paired: a.paired.unwrap_or(false),
                        train: TrainSection::resolve(a.train.as_ref(), 0)?,
                    },
                    (None, None) => return Err(Invalid("give --predictions, or --matrix with --sizes".into())),
                };
                let run = FairmetricsRun { data: dataset(a.labels, a.header)?, source, seed };
                Ok((Invocation::Fairmetrics(run), need(a.out, "out")?))
            }
            Cmd::W2train(a) => {
                let a = merged(&a, config)?;
                let d = W2Config::default();
                let (lambdas, lambda) = match a.lambda {
                    Some(spec) => (lambdas(&spec)?, LambdaMode::Fixed),
                    None => {
                        let grid = a.lambda_grid.unwrap_or_else(|| DEFAULT_LAMBDA_GRID.to_vec());
                        if grid.is_empty() || grid.iter().any(|l| !(*l > 0.0 && l.is_finite())) {
                            return Err(Invalid("--lambda-grid values must be positive".into()));
                        }
                        let max_accuracy_drop = a.max_drop.unwrap_or(DEFAULT_MAX_ACCURACY_DROP);
                        if !(0.0..=1.0).contains(&max_accuracy_drop) {
                            return Err(Invalid(format!("--max-drop must lie in [0, 1], got {max_accuracy_drop}")));
                        }
                        (BTreeMap::new(), LambdaMode::Tune { grid, max_accuracy_drop })
                    }
                };
                let w2 = W2Config { lambdas, m: a.m.unwrap_or(d.m), grid: a.grid.unwrap_or(d.grid), tau: a.tau.unwrap_or(d.tau), ..d };
                w2.validate()?;
                let run = W2trainRun {
                    matrix: input(need(a.matrix, "matrix")?)?,
                    data: dataset(a.labels, a.header)?,
                    w2,
                    lambda,
                    train: TrainSection::resolve(a.train.as_ref(), 0)?,
                    split: SplitSpec { train_frac: 0.6, valid_frac: 0.2, test_frac: 0.2, seed: 0 },
                    seed: a.seed.unwrap_or(0),
                };
                Ok((Invocation::W2train(run), need(a.out, "out")?))
            }
            Cmd::Neutralize(a) => {
                let a = merged(&a, config)?;
                let run = NeutralizeRun {
                    data: dataset(a.labels, a.header)?,
                    target: named::<TargetGroup>(a.target.as_deref().unwrap_or("female"), "target", "female, male")?,
                    names: a.names.map(input).transpose()?,
                    indicators: a.indicators.map(input).transpose()?,
                };
                Ok((Invocation::Neutralize(run), need(a.out, "out")?))
            }
            Cmd::Sweep(a) => {
                let a = merged(&a, config)?;
                let run = SweepRun {
                    matrix: input(need(a.matrix, "matrix")?)?,
                    data: dataset(a.labels, a.header)?,
                    concepts: concepts(a.decomposition, a.method, a.rank, a.nmf_iters)?,
                    plan: a.plan.map(input).transpose()?,
                    importance: importance(a.phi, a.masks, a.epsilon, a.train.as_ref(), a.sobol.as_ref())?,
                    repeats: a.repeats.unwrap_or(SWEEP_REPEATS),
                    ks: a.ks,
                    seed: a.seed.unwrap_or(0),
                };
                Ok((Invocation::Sweep(run), need(a.out, "out")?))
            }
            Cmd::Synth(a) => {
                let a = merged(&a, config)?;
                let run = SynthRun {
                    family: named::<Family>(a.family.as_deref().unwrap_or("block"), "family", "block, biased")?,
                    n: a.n.unwrap_or(2000),
                    dim: a.dim.unwrap_or(8),
                    seed: a.seed.unwrap_or(0),
                };
                Ok((Invocation::Synth(run), need(a.out, "out")?))
            }
            Cmd::Replay(_) => Err(Invalid("replay takes no config file".into())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn command_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn lambda_pairs_parse() {
        let m = lambdas("2=5.0, 0=0.5").unwrap();
        assert_eq!(m, BTreeMap::from([(0, 0.5), (2, 5.0)]));
        assert!(lambdas("2").is_err());
        assert!(lambdas("x=1").is_err());
        assert!(lambdas("1=1,1=2").is_err());
        assert!(lambdas("").is_err());
    }

    #[test]
    fn missing_rank_names_the_flag() {
        let args = DecomposeArgs { method: Some("svd".into()), ..Default::default() };
        let err = Cmd::Decompose(args).resolve(None).unwrap_err();
        assert!(err.0.contains("--matrix"), "{}", err.0);
    }
}
