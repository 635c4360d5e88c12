//! Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any
//! criterion fails. Runs with `cargo test -p latent-audit-cli --test acceptance`.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use latent_audit::dataio::{split_indices, stratified_sample};
use latent_audit::decompose::{nmf_traced, truncated_svd, NmfConfig};
use latent_audit::fairmetrics::{curve_auc, fidelity_curve, gaps, t_test, FidelityMode, Metric, PredictionTable};
use latent_audit::probes::{nu_information, train_head, Labeled};
use latent_audit::sobol::{co_importance, jansen, total_sobol, ConceptSpace, MaskBatch, MaskGenerator, ScoreFunction, SobolConfig};
use latent_audit::synthetic::{biased_family, block_family, BiasedFamilyConfig, BlockFamilyConfig};
use latent_audit::taco::{rank_for_removal, remove_and_reconstruct, DEFAULT_EPSILON};
use latent_audit::w2reg::{
    split_rows, train_fair, w2_pseudo_gradient, w2_squared, DiscreteCdf, FairSplits, LambdaChoice, W2Config, DEFAULT_GRID, DEFAULT_LAMBDA_GRID,
};
use latent_audit::{linalg, seed, ActivationMatrix, LabeledDataset, Matrix, MlpHead, SplitSpec, TrainConfig};
use rand::seq::SliceRandom;
use rand::Rng;

const BIN: &str = env!("CARGO_BIN_EXE_latent-audit");

/// Outcome of one criterion: whether it holds and what was measured.
struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn within_budget(v: Verdict, elapsed: Duration, budget: Option<Duration>) -> Verdict {
    match budget {
        Some(b) if elapsed > b => verdict(false, format!("{}; over the {:.0} s budget", v.detail, b.as_secs_f64())),
        _ => v,
    }
}

// --- decomposition -------------------------------------------------------

fn decomposition() -> Verdict {
    let mut monotone = 0;
    let mut non_negative = 0;
    for s in 0..20u64 {
        let mut rng = seed::rng(seed::derive_indexed(0, "acceptance-nmf", s));
        let (n, d) = (20 + rng.random_range(0..30), 5 + rng.random_range(0..10));
        let a = Matrix::from_fn(n, d, |_, _| rng.random::<f64>());
        let (dec, trace) = nmf_traced(&ActivationMatrix::new(a).unwrap(), &NmfConfig { rank: 4, iters: 300, seed: s }).unwrap();
        monotone += usize::from(trace.windows(2).all(|w| w[1] <= w[0]));
        non_negative += usize::from(dec.u.iter().chain(dec.w.iter()).all(|&v| v >= 0.0));
    }

    let mut worst_svd: f64 = 0.0;
    for s in 0..20u64 {
        let mut rng = seed::rng(seed::derive_indexed(0, "acceptance-svd", s));
        let a = linalg::random_normal(30 + s as usize, 12, &mut rng);
        let rank = 1 + (s as usize % 8);
        let dec = truncated_svd(&ActivationMatrix::new(a.clone()).unwrap(), rank).unwrap();
        let sigma = a.clone().svd(false, false).singular_values;
        let expected = sigma.iter().skip(rank).map(|v| v * v).sum::<f64>().sqrt();
        let measured = linalg::frobenius(&(&a - dec.reconstruct()));
        worst_svd = worst_svd.max((measured - expected).abs() / expected);
        // The stored error must agree as well.
        worst_svd = worst_svd.max((dec.reconstruction_error - expected).abs() / expected);
    }

    let u: Vec<f64> = (0..12).map(|i| 0.5 + 0.25 * i as f64).collect();
    let v: Vec<f64> = (0..7).map(|j| 1.0 + (0.7 * j as f64).sin().abs()).collect();
    let a = Matrix::from_fn(12, 7, |i, j| u[i] * v[j]);
    let (dec, _) = nmf_traced(&ActivationMatrix::new(a.clone()).unwrap(), &NmfConfig { rank: 1, iters: 2000, seed: 1 }).unwrap();
    let rank1 = linalg::frobenius(&(&a - dec.reconstruct())) / linalg::frobenius(&a);

    verdict(
        monotone == 20 && non_negative == 20 && worst_svd <= 1e-8 && rank1 <= 1e-6,
        format!("monotone {monotone}/20, non-negative {non_negative}/20, SVD rel. error {worst_svd:.1e}, rank-1 rel. error {rank1:.1e}"),
    )
}

// --- Sobol ---------------------------------------------------------------

fn column(m: &Matrix, k: usize) -> Vec<f64> {
    m.column(k).iter().cloned().collect()
}

type Fixture = (&'static str, fn(&Matrix) -> Vec<f64>, [f64; 2]);

const FIXTURES: [Fixture; 3] = [
    ("single", |m| column(m, 0), [1.0, 0.0]),
    ("linear", |m| m.column(0).iter().zip(m.column(1).iter()).map(|(a, b)| 3.0 * a + 4.0 * b).collect(), [0.36, 0.64]),
    ("product", |m| m.column(0).iter().zip(m.column(1).iter()).map(|(a, b)| a * b).collect(), [4.0 / 7.0, 4.0 / 7.0]),
];

fn rms_error(generator: MaskGenerator, n: usize, trials: u64, f: fn(&Matrix) -> Vec<f64>, truth: [f64; 2]) -> f64 {
    let mut total = 0.0;
    for t in 0..trials {
        let masks = MaskBatch::generate(generator, n, 2, seed::derive_indexed(0, "acceptance-rate", t)).unwrap();
        let est = jansen(&masks, f).unwrap();
        total += est.raw.iter().zip(truth).map(|(e, s)| (e - s).powi(2)).sum::<f64>() / 2.0;
    }
    (total / trials as f64).sqrt()
}

fn sobol() -> Verdict {
    let mut worst: f64 = 0.0;
    let mut parts = Vec::new();
    for (name, f, truth) in FIXTURES {
        let est = jansen(&MaskBatch::qmc(1 << 13, 2, 0).unwrap(), f).unwrap();
        let err = est.raw.iter().zip(truth).map(|(e, s)| (e - s).abs()).fold(0.0, f64::max);
        worst = worst.max(err);
        parts.push(format!("{name} [{:.3}, {:.3}]", est.raw[0], est.raw[1]));
    }

    // Rate: independent masks give the Monte Carlo N^-1/2 law, so 4N halves
    // the error. Scrambled QMC is held to doing at least as well.
    let (_, f, truth) = FIXTURES[1];
    let (small, large, trials) = (256, 1024, 400);
    let mc = (rms_error(MaskGenerator::PseudoRandom, small, trials, f, truth), rms_error(MaskGenerator::PseudoRandom, large, trials, f, truth));
    let qmc = (rms_error(MaskGenerator::QmcSobol, small, trials, f, truth), rms_error(MaskGenerator::QmcSobol, large, trials, f, truth));
    let ratio = mc.1 / mc.0;
    let pass = worst <= 0.02 && (0.35..=0.65).contains(&ratio) && qmc.0 <= mc.0 && qmc.1 <= mc.1;
    verdict(
        pass,
        format!(
            "{}; max |error| {worst:.4}; RMS error N={small}: {:.4}, N={large}: {:.4}, ratio {ratio:.3}; QMC {:.4} / {:.4}",
            parts.join(", "),
            mc.0,
            mc.1,
            qmc.0,
            qmc.1
        ),
    )
}

// --- probes --------------------------------------------------------------

fn relative(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Worst relative disagreement between analytic and central-difference
/// gradients over every parameter of a random head.
fn gradient_check(s: u64) -> f64 {
    let mut rng = seed::rng(seed::derive_indexed(0, "acceptance-fd", s));
    let (d, h, c, n) = (5, 7, 3, 9);
    let head = MlpHead::init(d, h, c, s);
    let x = linalg::random_normal(n, d, &mut rng);
    let y: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
    let (_, grad) = head.gradient(&x, &y).unwrap();
    let step = 1e-5;
    let mut worst: f64 = 0.0;
    let loss_with = |edit: &dyn Fn(&mut MlpHead)| {
        let mut moved = head.clone();
        edit(&mut moved);
        moved.loss(&x, &y).unwrap()
    };
    macro_rules! check {
        ($field:ident) => {
            for i in 0..head.$field.len() {
                let plus = loss_with(&|m: &mut MlpHead| m.$field.as_mut_slice()[i] += step);
                let minus = loss_with(&|m: &mut MlpHead| m.$field.as_mut_slice()[i] -= step);
                worst = worst.max(relative((plus - minus) / (2.0 * step), grad.$field.as_slice()[i]));
            }
        };
    }
    check!(w1);
    check!(b1);
    check!(w2);
    check!(b2);
    worst
}

/// Features that separate the labels, with the labels then shuffled.
fn shuffled_task(rng: &mut seed::Rng, n: usize) -> (Matrix, Vec<usize>) {
    let mut y: Vec<usize> = (0..n).map(|i| i % 2).collect();
    let x = Matrix::from_fn(n, 6, |i, j| if j == 0 { 2.0 * y[i] as f64 - 1.0 } else { 0.0 } + rng.random_range(-1.0..1.0));
    y.shuffle(rng);
    (x, y)
}

fn probe() -> Verdict {
    let fd: Vec<f64> = (0..10).map(gradient_check).collect();
    let worst_fd = fd.iter().cloned().fold(0.0, f64::max);

    let cfg = TrainConfig { hidden: 32, lr_grid: vec![1e-3, 1e-2], ..TrainConfig::default() };
    let mut chance = Vec::new();
    let mut nu = Vec::new();
    for s in 0..5u64 {
        let mut rng = seed::rng(seed::derive_indexed(0, "acceptance-shuffled", s));
        let (x, y) = shuffled_task(&mut rng, 2000);
        let (xv, yv) = shuffled_task(&mut rng, 500);
        let (xt, yt) = shuffled_task(&mut rng, 2000);
        let head = train_head(Labeled::new(&x, &y).unwrap(), Labeled::new(&xv, &yv).unwrap(), 2, &cfg.clone().with_seed(s)).unwrap().head;
        chance.push(head.accuracy(&xt, &yt).unwrap());
        nu.push(nu_information(&head, &xt, &yt).unwrap());
    }
    let mean_nu = nu.iter().sum::<f64>() / nu.len() as f64;
    let pass = worst_fd <= 1e-4 && chance.iter().all(|a| (0.4..=0.6).contains(a)) && mean_nu <= 0.02;
    verdict(
        pass,
        format!(
            "worst FD rel. error {worst_fd:.1e} over 10 seeds; shuffled accuracy {}; mean nu-information {mean_nu:.4} nats",
            chance.iter().map(|a| format!("{a:.3}")).collect::<Vec<_>>().join(" ")
        ),
    )
}

// --- TaCo ----------------------------------------------------------------

struct Held {
    x: Matrix,
    y: Vec<usize>,
}

fn rows(m: &Matrix, idx: &[usize], labels: &[usize]) -> Held {
    Held { x: m.select_rows(idx), y: idx.iter().map(|&i| labels[i]).collect() }
}

/// Trains on the training rows, returns the head and its test accuracy.
fn probe_accuracy(a: &Matrix, labels: &[usize], split: &latent_audit::dataio::Split, cfg: &TrainConfig) -> (MlpHead, f64) {
    let (tr, va, te) = (rows(a, &split.train, labels), rows(a, &split.valid, labels), rows(a, &split.test, labels));
    let head = train_head(Labeled::new(&tr.x, &tr.y).unwrap(), Labeled::new(&va.x, &va.y).unwrap(), 2, cfg).unwrap().head;
    let acc = head.accuracy(&te.x, &te.y).unwrap();
    (head, acc)
}

fn probe_config(s: u64) -> TrainConfig {
    TrainConfig { lr_grid: vec![1e-3, 1e-2], hidden: 64, ..TrainConfig::default() }.with_seed(s)
}

fn taco() -> Verdict {
    let mut identified = 0;
    let mut worst_group: f64 = 0.0;
    let mut group_total = 0.0;
    let mut worst_task_change: f64 = 0.0;
    let mut worst_orth: f64 = 0.0;
    for s in 0..20u64 {
        let fam = block_family(&BlockFamilyConfig { seed: s, ..BlockFamilyConfig::default() }).unwrap();
        let (y, g) = (fam.dataset.labels(), fam.dataset.groups());
        let dec = truncated_svd(&fam.activations, 5).unwrap();
        let split = split_indices(y.len(), &SplitSpec::new(0.7, 0.1, 0.2, s).unwrap()).unwrap();
        let a = fam.activations.data();
        let cfg = probe_config(s);
        let (task_head, task_before) = probe_accuracy(a, &y, &split, &cfg);
        let (group_head, _) = probe_accuracy(a, &g, &split, &cfg);

        let sobol = SobolConfig { n_masks: 2048, max_instances: 128, seed: s, ..SobolConfig::default() };
        let phi = ScoreFunction::top2();
        let report = co_importance(ConceptSpace::from_decomposition(&dec), &task_head, &group_head, &phi, &phi, &sobol).unwrap();
        identified += usize::from(linalg::argmax(&report.sobol_group) == 0 && linalg::argmax(&report.sobol_task) == 1);

        let plan = rank_for_removal(&report, DEFAULT_EPSILON).unwrap();
        let removed = remove_and_reconstruct(&dec, &plan, 1).unwrap();
        let r = removed.data();
        let (_, group_after) = probe_accuracy(r, &g, &split, &cfg);
        let (_, task_after) = probe_accuracy(r, &y, &split, &cfg);
        worst_group = worst_group.max(group_after);
        group_total += group_after;
        worst_task_change = worst_task_change.max((task_after - task_before).abs());

        let scale = linalg::frobenius(r);
        for &k in plan.removed(1) {
            let wk = dec.w.row(k).transpose();
            worst_orth = worst_orth.max((r * &wk).norm() / (scale * wk.norm()));
        }
    }
    verdict(
        identified >= 19 && worst_group <= 0.55 && worst_task_change <= 0.03 && worst_orth < 1e-8,
        format!(
            "argmax correct in {identified}/20 seeds; after k=1 group acc worst {worst_group:.3} (mean {:.3}), worst |task change| {worst_task_change:.3}; \
             orthogonality {worst_orth:.1e}",
            group_total / 20.0
        ),
    )
}

// --- fairness metrics ----------------------------------------------------

fn hand_counted() -> bool {
    // Group 0 rows come first; three classes, two instances per class and group.
    let y = vec![0, 0, 1, 1, 2, 2, 0, 0, 1, 1, 2, 2];
    let p = vec![0, 1, 1, 1, 2, 0, 0, 0, 1, 2, 0, 0];
    let g = vec![0, 0, 0, 0, 0, 0, 1, 1, 1, 1, 1, 1];
    let r = gaps(&PredictionTable::new(y, p, g, 3).unwrap()).unwrap();
    // (hits, denominator) in group 1, then in group 0.
    let gap = |n1: u32, d1: u32, n0: u32, d0: u32| f64::from(n1) / f64::from(d1) - f64::from(n0) / f64::from(d0);
    let expected = [
        (Metric::Gp, [gap(4, 6, 2, 6), gap(1, 6, 3, 6), gap(1, 6, 1, 6)]),
        (Metric::Tpr, [gap(2, 2, 1, 2), gap(1, 2, 2, 2), gap(0, 2, 1, 2)]),
        (Metric::Pp, [gap(2, 4, 1, 2), gap(1, 1, 2, 3), gap(0, 1, 1, 1)]),
    ];
    let exact = expected.iter().all(|(m, want)| (0..3).all(|k| r.gap(*m, k) == Some(want[k])));

    // Class 1 is never predicted in group 1: its PP value is undefined there.
    let r = gaps(&PredictionTable::new(vec![0, 1, 0, 1], vec![0, 1, 0, 0], vec![0, 0, 1, 1], 2).unwrap()).unwrap();
    let undefined = r.gap(Metric::Pp, 1).is_none() && r.gap(Metric::Tpr, 1) == Some(-1.0) && r.gap(Metric::Gp, 1) == Some(-0.5);
    exact && undefined
}

fn support_ordering() -> usize {
    let mut rng = seed::rng(seed::derive(0, "acceptance-tables"));
    let mut holding = 0;
    for _ in 0..1000 {
        let (n, k) = (rng.random_range(2..300), rng.random_range(2..6));
        let y: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let p: Vec<usize> = y.iter().map(|&c| if rng.random::<f64>() < 0.6 { c } else { rng.random_range(0..k) }).collect();
        let mut g: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
        g[0] = 0;
        g[1] = 1;
        let r = gaps(&PredictionTable::new(y, p, g, k).unwrap()).unwrap();
        let ok = (0..k).all(|c| {
            let support = |m| r.cell(m, c).unwrap().support;
            support(Metric::Tpr) == support(Metric::Pp) && support(Metric::Pp) <= support(Metric::Gp)
        });
        holding += usize::from(ok);
    }
    holding
}

fn surgeons() -> usize {
    // 13347 surgeons of whom 2002 women, in 388862 records.
    let cells = [((0, 0), 11345), ((0, 1), 2002), ((1, 0), 205515), ((1, 1), 170000)];
    let (mut y, mut g) = (Vec::new(), Vec::new());
    for ((c, s), count) in cells {
        y.extend(std::iter::repeat_n(c, count));
        g.extend(std::iter::repeat_n(s, count));
    }
    let ds = LabeledDataset::from_labels(&y, &g, 2).unwrap();
    stratified_sample(&ds, 10000, 0).unwrap().cell_counts()[&(0, 1)]
}

fn null_rejections() -> f64 {
    let mut rng = seed::rng(seed::derive(0, "acceptance-null"));
    let trials = 200;
    let hits = (0..trials)
        .filter(|_| {
            let a: Vec<f64> = (0..30).map(|_| rng.random::<f64>()).collect();
            let b: Vec<f64> = (0..30).map(|_| rng.random::<f64>()).collect();
            t_test(&a, &b, false).unwrap().p_value < 0.05
        })
        .count();
    hits as f64 / trials as f64
}

fn fairness() -> Verdict {
    let exact = hand_counted();
    let ordered = support_ordering();
    let women = surgeons();
    let rate = null_rejections();
    verdict(
        exact && ordered == 1000 && women == 51 && (0.02..=0.08).contains(&rate),
        format!("hand-counted gaps exact: {exact}; support ordering {ordered}/1000; sampled women surgeons {women}; null rejection rate {rate:.3}"),
    )
}

// --- fidelity ------------------------------------------------------------

/// P(X ≥ wins) for X ~ Binomial(n, 1/2).
fn sign_test(wins: usize, n: usize) -> f64 {
    let mut c = 1.0;
    let mut tail = 0.0;
    for k in 0..=n {
        if k >= wins {
            tail += c;
        }
        c = c * (n - k) as f64 / (k + 1) as f64;
    }
    tail / 2f64.powi(n as i32)
}

fn fidelity() -> Verdict {
    let (mut wins, mut ties) = (0, 0);
    let mut endpoints = true;
    for s in 0..20u64 {
        let fam = block_family(&BlockFamilyConfig { n: 1000, seed: s, ..BlockFamilyConfig::default() }).unwrap();
        let y = fam.dataset.labels();
        let dec = truncated_svd(&fam.activations, 5).unwrap();
        let split = split_indices(y.len(), &SplitSpec::new(0.7, 0.1, 0.2, s).unwrap()).unwrap();
        let (head, _) = probe_accuracy(fam.activations.data(), &y, &split, &probe_config(s));
        let space = ConceptSpace::from_decomposition(&dec);
        let cfg = SobolConfig { n_masks: 1024, max_instances: 128, seed: s, ..SobolConfig::default() };
        let idx = total_sobol(space, &head, &ScoreFunction::observed_class(), &cfg.masks(5).unwrap(), &cfg).unwrap();
        let mut order: Vec<usize> = (0..5).collect();
        order.sort_by(|&a, &b| idx.indices[b].total_cmp(&idx.indices[a]));

        let deletion = fidelity_curve(space, &order, &head, FidelityMode::Deletion).unwrap();
        let insertion = fidelity_curve(space, &order, &head, FidelityMode::Insertion).unwrap();
        endpoints &= deletion[0] == insertion[5] && deletion[5] == insertion[0];

        // Expected AUC of a random order, estimated over ten permutations.
        let mut rng = seed::stream(s, "acceptance-random-order");
        let random = (0..10)
            .map(|_| {
                let mut perm: Vec<usize> = (0..5).collect();
                perm.shuffle(&mut rng);
                curve_auc(&fidelity_curve(space, &perm, &head, FidelityMode::Deletion).unwrap())
            })
            .sum::<f64>()
            / 10.0;
        let sobol = curve_auc(&deletion);
        if sobol < random {
            wins += 1;
        } else if sobol == random {
            ties += 1;
        }
    }
    let p = sign_test(wins, 20 - ties);
    verdict(p < 0.05 && endpoints, format!("Sobol order wins {wins}/{} seeds, one-sided p = {p:.2e}; endpoints coincide: {endpoints}", 20 - ties))
}

// --- W2reg ---------------------------------------------------------------

fn closed_forms() -> bool {
    let w = |a: &[f64], b: &[f64]| w2_squared(a, b).unwrap();
    w(&[0.3, 0.1, 0.7], &[0.7, 0.3, 0.1]) == 0.0
        && w(&[0.0, 0.0], &[1.0, 1.0]) == 1.0
        && w(&[0.0, 1.0], &[0.5]) == 0.25
        && w(&[0.0], &[0.0, 1.0]) == 0.5
        && w(&[0.25, 0.75], &[0.75, 0.25]) == 0.0
}

fn sign_agreement(fixtures: usize) -> f64 {
    let mut rng = seed::stream(0, "w2-fixtures");
    let mut agree = 0;
    for _ in 0..fixtures {
        let (n0, n1) = (rng.random_range(5..40), rng.random_range(5..40));
        let shift: f64 = rng.random_range(-0.3..0.3);
        let a: Vec<f64> = (0..n0).map(|_| rng.random::<f64>()).collect();
        let b: Vec<f64> = (0..n1).map(|_| (rng.random::<f64>() + shift).clamp(0.0, 1.0)).collect();
        let s = rng.random_range(0..2);
        let (own, other) = if s == 0 { (&a, &b) } else { (&b, &a) };
        let i = rng.random_range(0..own.len());
        let cdf = DiscreteCdf::new(&a, &b, [n0, n1], DEFAULT_GRID).unwrap();
        let g = w2_pseudo_gradient(own[i], s, &cdf).unwrap();
        let h = 1e-7;
        let (mut plus, mut minus) = (own.clone(), own.clone());
        plus[i] += h;
        minus[i] -= h;
        let fd = (w2_squared(&plus, other).unwrap() - w2_squared(&minus, other).unwrap()) / (2.0 * h);
        agree += usize::from(g.signum() == fd.signum());
    }
    agree as f64 / fixtures as f64
}

struct SeedResult {
    baseline_gap: f64,
    reduction: f64,
    accuracy_drop: f64,
    drift: f64,
}

fn biased_run(s: u64) -> SeedResult {
    let (a, ds) = biased_family(&BiasedFamilyConfig { n: 20000, seed: s, ..BiasedFamilyConfig::default() }).unwrap();
    let [train, valid, test] = split_rows(a.data(), &ds, &SplitSpec::new(0.6, 0.2, 0.2, s).unwrap()).unwrap();
    let base = TrainConfig { lr_grid: vec![1e-3, 1e-2], hidden: 64, ..TrainConfig::default() }.with_seed(s);
    let choice = LambdaChoice::Tune { grid: DEFAULT_LAMBDA_GRID.to_vec(), max_accuracy_drop: 0.04 };
    let splits = FairSplits { train: train.view().unwrap(), valid: valid.view().unwrap(), test: test.view().unwrap() };
    let out = train_fair(splits, 3, &W2Config::default(), &base, &choice).unwrap();
    let report = out.report;

    let (mut before, mut after, mut drift) = (0.0, 0.0, 0.0f64);
    for row in &report.rows {
        let (b, a) = (row.tpr_gap_before.unwrap_or(0.0).abs(), row.tpr_gap_after.unwrap_or(0.0).abs());
        if report.detected.contains(&row.class) {
            before = f64::max(before, b);
            after = f64::max(after, a);
        } else {
            drift = drift.max((row.tpr_gap_after.unwrap_or(0.0) - row.tpr_gap_before.unwrap_or(0.0)).abs());
        }
    }
    let first = &report.rows[0];
    SeedResult {
        baseline_gap: before,
        reduction: if before > 0.0 { 1.0 - after / before } else { 0.0 },
        accuracy_drop: first.accuracy_before - first.accuracy_after,
        drift,
    }
}

fn w2reg() -> Verdict {
    let exact = closed_forms();
    let agreement = sign_agreement(1000);
    let runs: Vec<SeedResult> = (0..5).map(biased_run).collect();
    let mean = |f: fn(&SeedResult) -> f64| runs.iter().map(f).sum::<f64>() / runs.len() as f64;
    let (gap, reduction, drop, drift) = (mean(|r| r.baseline_gap), mean(|r| r.reduction), mean(|r| r.accuracy_drop), mean(|r| r.drift));
    let per_seed = runs
        .iter()
        .map(|r| format!("gap {:.3} cut {:.0}% drop {:+.3} drift {:.3}", r.baseline_gap, 100.0 * r.reduction, r.accuracy_drop, r.drift))
        .collect::<Vec<_>>()
        .join("; ");
    verdict(
        exact && agreement >= 0.95 && gap >= 0.2 && reduction >= 0.5 && drop <= 0.05 && drift <= 0.05,
        format!(
            "closed forms exact: {exact}; sign agreement {agreement:.3}; over 5 seeds baseline gap {gap:.3}, reduction {:.1}%, \
             accuracy drop {drop:+.3}, unregularized drift {drift:.3} [{per_seed}]",
            100.0 * reduction
        ),
    )
}

// --- reproducibility -----------------------------------------------------

fn cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(BIN).args(args).env_remove("LATENT_AUDIT_ENDPOINT").output().map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)))
    }
}

fn artifacts(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().unwrap() != "manifest.json" {
                out.insert(path.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn reproducibility() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let fast = d.join("fast.toml");
    std::fs::write(&fast, "[train]\nlr_grid = [0.01]\nepochs = 10\nhidden = 32\n").unwrap();
    let texts = d.join("texts.jsonl");
    let lines: Vec<String> = [
        "She is a surgeon. Her patients trust her.",
        "He writes code for a bank, and he enjoys it.",
        "Mary teaches math at the local school.",
        "John is a nurse who works night shifts.",
        "The beer pours hazy amber with a thick head.",
        "Bitter finish, crisp body and a light aroma.",
    ]
    .iter()
    .enumerate()
    .map(|(i, t)| serde_json::json!({"id": format!("t{i}"), "y": i % 2, "g": (i / 2) % 2, "text": t}).to_string())
    .collect();
    std::fs::write(&texts, lines.join("\n") + "\n").unwrap();
    std::fs::write(d.join("texts.header.json"), r#"{"class_names":["a","b"],"group_names":["f","m"]}"#).unwrap();
    let predictions = d.join("pred.txt");
    std::fs::write(&predictions, "0\n1\n1\n0\n0\n1\n").unwrap();

    let (block, biased) = (d.join("block"), d.join("biased"));
    let (a, labels) = (block.join("activations.npy"), block.join("dataset.jsonl"));
    let (ba, bl) = (biased.join("activations.npy"), biased.join("dataset.jsonl"));
    let runs: Vec<(&str, Vec<String>)> = vec![
        ("synth", vec!["synth", "--n", "400", "--seed", "5", "--out", s(&block)].into_iter().map(String::from).collect()),
        ("synth-biased", ["synth", "--family", "biased", "--n", "1500", "--seed", "5", "--out", s(&biased)].map(String::from).to_vec()),
        ("decompose", ["decompose", "--method", "nmf", "--rank", "3", "--matrix", s(&d.join("nonneg.csv")), "--out", s(&d.join("nmf"))].map(String::from).to_vec()),
        (
            "rank",
            ["rank", "--config", s(&fast), "--matrix", s(&a), "--labels", s(&labels), "--method", "svd", "--rank", "4", "--masks", "256", "--out", s(&d.join("rank"))]
                .map(String::from)
                .to_vec(),
        ),
        (
            "remove",
            ["remove", "--decomposition", s(&d.join("rank/concepts")), "--plan", s(&d.join("rank/plan.json")), "--k", "1", "--out", s(&d.join("remove"))]
                .map(String::from)
                .to_vec(),
        ),
        (
            "sweep",
            ["sweep", "--config", s(&fast), "--matrix", s(&a), "--labels", s(&labels), "--decomposition", s(&d.join("rank/concepts"))]
                .into_iter()
                .chain(["--plan", s(&d.join("rank/plan.json")), "--ks", "0,1,2", "--repeats", "2", "--out", s(&d.join("sweep"))])
                .map(String::from)
                .collect(),
        ),
        (
            "fairmetrics-resample",
            ["fairmetrics", "--config", s(&fast), "--labels", s(&labels), "--matrix", s(&a), "--sizes", "100,200", "--repeats", "3", "--out", s(&d.join("stab"))]
                .map(String::from)
                .to_vec(),
        ),
        ("fairmetrics", ["fairmetrics", "--labels", s(&texts), "--predictions", s(&predictions), "--out", s(&d.join("gaps"))].map(String::from).to_vec()),
        (
            "w2train",
            ["w2train", "--config", s(&fast), "--matrix", s(&ba), "--labels", s(&bl), "--lambda-grid", "1,10", "--m", "8", "--out", s(&d.join("w2"))]
                .map(String::from)
                .to_vec(),
        ),
        ("attribute", ["attribute", "--labels", s(&texts), "--rank", "2", "--dim", "12", "--out", s(&d.join("attr"))].map(String::from).to_vec()),
        ("neutralize", ["neutralize", "--labels", s(&texts), "--out", s(&d.join("neutral"))].map(String::from).to_vec()),
    ];
    let nonneg: Vec<String> = (0..25).map(|i| (0..5).map(|j| format!("{}", ((i * 7 + j * 3) % 11) as f64 / 4.0)).collect::<Vec<_>>().join(",")).collect();
    std::fs::write(d.join("nonneg.csv"), format!("a,b,c,d,e\n{}\n", nonneg.join("\n"))).unwrap();

    let mut identical = Vec::new();
    let mut files = 0;
    let mut failures = Vec::new();
    for (name, args) in &runs {
        let args: Vec<&str> = args.iter().map(String::as_str).collect();
        if let Err(e) = cli(&args) {
            failures.push(e);
            continue;
        }
        let out = PathBuf::from(args[args.iter().position(|a| *a == "--out").unwrap() + 1]);
        let again = d.join(format!("replay-{name}"));
        if let Err(e) = cli(&["replay", "--manifest", s(&out), "--out", s(&again)]) {
            failures.push(e);
            continue;
        }
        let (first, second) = (artifacts(&out), artifacts(&again));
        if !first.is_empty() && first == second {
            files += first.len();
            identical.push(*name);
        } else {
            let differing: Vec<String> = first.iter().filter(|(k, v)| second.get(*k) != Some(v)).map(|(k, _)| k.display().to_string()).collect();
            failures.push(format!("{name}: artifacts differ after replay: {}", differing.join(", ")));
        }
    }
    // Thread count must not change any artifact.
    for name in ["rank", "sweep", "fairmetrics-resample"] {
        let out = d.join(if name == "fairmetrics-resample" { "stab" } else { name });
        let again = d.join(format!("threads-{name}"));
        match cli(&["--jobs", "3", "replay", "--manifest", s(&out), "--out", s(&again)]) {
            Ok(()) if artifacts(&out) == artifacts(&again) => {}
            Ok(()) => failures.push(format!("{name}: artifacts differ with --jobs 3")),
            Err(e) => failures.push(e),
        }
    }
    verdict(
        failures.is_empty(),
        format!("{}/{} commands replay byte-identically ({files} files), also with --jobs 3{}", identical.len(), runs.len(), if failures.is_empty() { String::new() } else { format!("; {}", failures.join("; ")) }),
    )
}

/// Name, check and time budget in seconds.
type Criterion = (&'static str, fn() -> Verdict, Option<u64>);

fn main() -> ExitCode {
    let criteria: [Criterion; 8] = [
        ("Decomposition suite", decomposition, Some(30)),
        ("Sobol suite", sobol, Some(60)),
        ("Probe suite", probe, None),
        ("TaCo end-to-end", taco, Some(300)),
        ("Fairness metrics", fairness, None),
        ("Fidelity", fidelity, None),
        ("W2reg", w2reg, Some(300)),
        ("Reproducibility", reproducibility, None),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, check, budget) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.to_lowercase().contains(&f.to_lowercase())) {
            continue;
        }
        let started = Instant::now();
        let v = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default();
            verdict(false, format!("panicked: {msg}"))
        });
        let elapsed = started.elapsed();
        let v = within_budget(v, elapsed, budget.map(Duration::from_secs));
        failed += usize::from(!v.pass);
        println!("[{}] {name} ({:.1} s): {}", if v.pass { "PASS" } else { "FAIL" }, elapsed.as_secs_f64(), v.detail);
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
