//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero when any criterion fails.

use std::f64::consts::E;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::Rng;
use spice_core::data::synth_gmm;
use spice_core::head::{init_head, init_semi_head, Mlp};
use spice_core::loss::{
    ds_ce_loss, entropy_regularizer, entropy_regularizer_logit_grad, objective_and_grad,
    CrossEntropy, DoubleSoftmaxCe, HeadLoss, TemperedCe,
};
use spice_core::metrics::{accuracy, ari};
use spice_core::numeric::{finite_diff_gradient, relative_error, softmax, softmax_rows};
use spice_core::reliability::select_reliable;
use spice_core::self_train::{predict, train_self, SelfTrainConfig};
use spice_core::semi::{confidence_mask, semi_loss_with_targets, train_semi, SemiTrainConfig};
use spice_core::{EmbeddingDataset, Matrix, RngState, SpiceError, StrategySpec, SynthSpec};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn gmm(k: usize, d: usize, n: usize, sep: f64, seed: u64) -> EmbeddingDataset {
    let spec = SynthSpec {
        k,
        d,
        n_per_cluster: n,
        center_separation: sep,
        within_sigma: 1.0,
    };
    synth_gmm(&spec, &mut RngState::new(seed)).unwrap()
}

fn truth(ds: &EmbeddingDataset) -> &[usize] {
    ds.true_labels.as_deref().unwrap()
}

fn acc(pred: &[usize], ds: &EmbeddingDataset) -> f64 {
    accuracy(pred, truth(ds)).unwrap().0
}

fn fmt(values: &[f64]) -> String {
    let parts: Vec<String> = values.iter().map(|v| format!("{v:.3}")).collect();
    format!("[{}]", parts.join(" "))
}

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

// ---------------------------------------------------------------- 1

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

fn metric_oracles() -> Verdict {
    let t = Instant::now();
    let mut rng = RngState::new(2024);
    let mut mismatches = 0;
    for _ in 0..200 {
        let k = rng.random_range(1..=5);
        let n = rng.random_range(1..=60);
        let truth: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let pred: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let best = permutations(k)
            .iter()
            .map(|perm| pred.iter().zip(&truth).filter(|&(&p, &t)| perm[p] == t).count())
            .max()
            .unwrap();
        if accuracy(&pred, &truth).unwrap().0 != best as f64 / n as f64 {
            mismatches += 1;
        }
    }
    // all four contingency cells hold one sample
    let pairs = |n: f64| n * (n - 1.0) / 2.0;
    let expected = (2.0 * pairs(2.0)) * (2.0 * pairs(2.0)) / pairs(4.0);
    let oracle = (0.0 - expected) / (2.0 * pairs(2.0) - expected);
    let value = ari(&[0, 0, 1, 1], &[0, 1, 0, 1]).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let pass = mismatches == 0 && (value - oracle).abs() <= 1e-12 && (value + 0.5).abs() <= 1e-12 && secs < 5.0;
    verdict(
        pass,
        format!("{mismatches}/200 accuracy mismatches, ari {value:.12} (oracle {oracle:.12}), {secs:.2}s"),
    )
}

// ---------------------------------------------------------------- 2

fn double_softmax_bound() -> Verdict {
    let mut rng = RngState::new(7);
    let mut violations = 0;
    let mut min_loss_margin = f64::INFINITY;
    for &k in &[2usize, 10, 200] {
        let kf = k as f64;
        let lo = 1.0 / (kf - 1.0 + E);
        let hi = E / (kf - 1.0 + E);
        let floor = -hi.ln();
        if floor <= 0.0 {
            violations += 1;
        }
        for _ in 0..10_000 {
            // random probability rows, including near one-hot ones
            let scale = rng.random_range(0.1..30.0);
            let raw: Vec<f64> = (0..k).map(|_| scale * rng.random_range(-1.0..1.0)).collect();
            let p = softmax(&raw).unwrap();
            violations += softmax(&p)
                .unwrap()
                .iter()
                .filter(|&&v| v < lo - 1e-9 || v > hi + 1e-9)
                .count();
            let row = Matrix::from_vec(1, k, p).unwrap();
            let loss = ds_ce_loss(&row, &[rng.random_range(0..k)]).unwrap();
            min_loss_margin = min_loss_margin.min(loss - floor);
        }
    }
    let pass = violations == 0 && min_loss_margin >= -1e-12;
    verdict(
        pass,
        format!("{violations} bound violations over 3x10^4 rows, min loss - floor = {min_loss_margin:.3e}"),
    )
}

// ---------------------------------------------------------------- 3

fn random_matrix(rows: usize, cols: usize, scale: f64, rng: &mut RngState) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

fn jittered(mut model: Mlp, rng: &mut RngState) -> Mlp {
    model
        .params_mut()
        .iter_mut()
        .for_each(|p| *p += rng.random_range(-0.1..0.1));
    model
}

fn with_params(model: &Mlp, params: &[f64]) -> Mlp {
    let mut m = model.clone();
    m.set_params(params).unwrap();
    m
}

fn head_loss_error(loss: &dyn HeadLoss, seed: u64) -> f64 {
    let mut rng = RngState::new(seed);
    let d = rng.random_range(2..7);
    let k = rng.random_range(2..7);
    let m = rng.random_range(1..9);
    let head = jittered(init_head(d, k, &mut rng).unwrap(), &mut rng);
    let x = random_matrix(m, d, 2.0, &mut rng);
    let y: Vec<usize> = (0..m).map(|_| rng.random_range(0..k)).collect();
    let (_, analytic) = objective_and_grad(&head, &x, &y, loss, 0.0).unwrap();
    let numeric = finite_diff_gradient(
        |p| Ok(objective_and_grad(&with_params(&head, p), &x, &y, loss, 0.0)?.0),
        head.params(),
        1e-5,
    )
    .unwrap();
    relative_error(&analytic, &numeric)
}

fn entropy_error(seed: u64) -> f64 {
    let mut rng = RngState::new(seed);
    let m = rng.random_range(1..12);
    let k = rng.random_range(2..8);
    let logits = random_matrix(m, k, 3.0, &mut rng);
    let (_, analytic) = entropy_regularizer_logit_grad(&softmax_rows(&logits));
    let numeric = finite_diff_gradient(
        |z| Ok(entropy_regularizer(&softmax_rows(&Matrix::from_vec(m, k, z.to_vec())?))),
        logits.as_slice(),
        1e-5,
    )
    .unwrap();
    relative_error(analytic.as_slice(), &numeric)
}

fn semi_error(seed: u64) -> f64 {
    let mut rng = RngState::new(seed);
    let d = rng.random_range(2..6);
    let hidden = rng.random_range(2..7);
    let k = rng.random_range(2..6);
    let b = rng.random_range(1..5);
    let mu = rng.random_range(1..4);
    let model = jittered(init_semi_head(d, hidden, k, &mut rng).unwrap(), &mut rng);
    let weak_l = random_matrix(b, d, 2.0, &mut rng);
    let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..k)).collect();
    let weak_u = random_matrix(b * mu, d, 6.0, &mut rng);
    let mut strong_u = weak_u.clone();
    strong_u
        .as_mut_slice()
        .iter_mut()
        .for_each(|v| *v += rng.random_range(-0.5..0.5));
    let targets = confidence_mask(&model.forward(&weak_u).unwrap(), 0.6);
    let analytic = semi_loss_with_targets(&model, &weak_l, &labels, &strong_u, &targets).unwrap();
    let numeric = finite_diff_gradient(
        |p| Ok(semi_loss_with_targets(&with_params(&model, p), &weak_l, &labels, &strong_u, &targets)?.total),
        model.params(),
        1e-5,
    )
    .unwrap();
    relative_error(&analytic.grads, &numeric)
}

fn gradient_checks() -> Verdict {
    let t = Instant::now();
    let worst = |f: &dyn Fn(u64) -> f64, base: u64| (0..50).map(|s| f(base + s)).fold(0.0, f64::max);
    let results = [
        ("ds-ce", worst(&|s| head_loss_error(&DoubleSoftmaxCe, s), 1000)),
        ("ce", worst(&|s| head_loss_error(&CrossEntropy, s), 2000)),
        ("tce", worst(&|s| head_loss_error(&TemperedCe { temperature: 0.2 }, s), 3000)),
        ("entropy", worst(&entropy_error, 4000)),
        ("semi", worst(&semi_error, 5000)),
    ];
    let secs = t.elapsed().as_secs_f64();
    let pass = results.iter().all(|(_, e)| *e <= 1e-4) && secs < 30.0;
    let parts: Vec<String> = results.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
    verdict(pass, format!("worst relative error {}, {secs:.2}s", parts.join(", ")))
}

// ---------------------------------------------------------------- 4, 5

struct RecoveryRun {
    acc: f64,
    baseline: f64,
    head_accs: Vec<f64>,
    selected: usize,
    secs: f64,
}

fn recovery_runs() -> Vec<RecoveryRun> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    pool.install(|| {
        SEEDS
            .iter()
            .map(|&seed| {
                let ds = gmm(10, 64, 500, 6.0, seed);
                let cfg = SelfTrainConfig {
                    seed,
                    ..SelfTrainConfig::new(10)
                };
                let t = Instant::now();
                let out = train_self(&ds, &cfg).unwrap();
                let secs = t.elapsed().as_secs_f64();
                let untrained = train_self(&ds, &SelfTrainConfig { epochs: 0, ..cfg }).unwrap();
                let head_accs = out
                    .pool
                    .heads
                    .iter()
                    .map(|h| acc(&predict(h, &ds).unwrap().0, &ds))
                    .collect();
                RecoveryRun {
                    acc: acc(&out.labels, &ds),
                    baseline: acc(&untrained.labels, &ds),
                    head_accs,
                    selected: out.pool.selected.unwrap(),
                    secs,
                }
            })
            .collect()
    })
}

fn synthetic_recovery(runs: &[RecoveryRun]) -> Verdict {
    let accs: Vec<f64> = runs.iter().map(|r| r.acc).collect();
    let bases: Vec<f64> = runs.iter().map(|r| r.baseline).collect();
    let slowest = runs.iter().map(|r| r.secs).fold(0.0, f64::max);
    let (m, b) = (median(&accs), median(&bases));
    let pass = m >= 0.95 && m > b && slowest <= 300.0;
    verdict(
        pass,
        format!(
            "median acc {m:.4} {}, untrained median {b:.4}, slowest single-thread run {slowest:.1}s",
            fmt(&accs)
        ),
    )
}

fn head_selection(runs: &[RecoveryRun]) -> Verdict {
    let gaps: Vec<f64> = runs
        .iter()
        .map(|r| r.head_accs.iter().cloned().fold(0.0, f64::max) - r.head_accs[r.selected])
        .collect();
    let pass = gaps.iter().all(|&g| g <= 0.02);
    verdict(pass, format!("best minus selected head acc per seed {}", fmt(&gaps)))
}

// ---------------------------------------------------------------- 6

fn reliability_purification() -> Verdict {
    let mut purity = Vec::new();
    let mut coverage = Vec::new();
    let mut noise = Vec::new();
    for &seed in &SEEDS {
        let ds = gmm(10, 64, 500, 6.0, seed);
        let mut rng = RngState::derive(seed, 66);
        // 15% of labels move to a uniformly chosen different class
        let noisy: Vec<usize> = truth(&ds)
            .iter()
            .map(|&t| {
                if rng.random::<f64>() < 0.15 {
                    (t + rng.random_range(1..10)) % 10
                } else {
                    t
                }
            })
            .collect();
        noise.push(1.0 - acc(&noisy, &ds));
        let set = select_reliable(&ds.features, &noisy, 50, 0.95).unwrap();
        coverage.push(set.len() as f64 / ds.len() as f64);
        purity.push(if set.is_empty() { 0.0 } else { set.purity(truth(&ds)) });
    }
    let (p, c) = (median(&purity), median(&coverage));
    verdict(
        p >= 0.98 && c >= 0.40,
        format!(
            "median purity {p:.4} {}, median coverage {c:.4} {}, planted noise {}",
            fmt(&purity),
            fmt(&coverage),
            fmt(&noise)
        ),
    )
}

// ---------------------------------------------------------------- 7, 9

fn overlapping(seed: u64) -> EmbeddingDataset {
    gmm(10, 16, 500, 3.5, seed)
}

fn self_acc(ds: &EmbeddingDataset, seed: u64, loss: &str, assignment: &str) -> (f64, Vec<usize>) {
    let cfg = SelfTrainConfig {
        seed,
        loss: StrategySpec::new(loss),
        assignment: StrategySpec::new(assignment),
        ..SelfTrainConfig::new(10)
    };
    let out = train_self(ds, &cfg).unwrap();
    (acc(&out.labels, ds), out.labels)
}

struct BoostRun {
    self_acc: f64,
    semi_acc: Option<f64>,
}

fn boost_runs() -> (Vec<BoostRun>, f64) {
    let t = Instant::now();
    let runs = SEEDS
        .iter()
        .map(|&seed| {
            let ds = overlapping(seed);
            let (self_acc, labels) = self_acc(&ds, seed, "ds-ce", "overlap");
            let set = select_reliable(&ds.features, &labels, 100, 0.95).unwrap();
            let cfg = SemiTrainConfig {
                seed,
                ..SemiTrainConfig::new(10)
            };
            let semi_acc = match train_semi(&ds, &set, &cfg) {
                Ok(out) => Some(acc(&out.labels, &ds)),
                Err(SpiceError::ClusterStarvation { .. }) => None,
                Err(e) => panic!("semi stage failed: {e}"),
            };
            BoostRun { self_acc, semi_acc }
        })
        .collect();
    (runs, t.elapsed().as_secs_f64())
}

fn semi_boost(runs: &[BoostRun], secs: f64) -> Verdict {
    let selfs: Vec<f64> = runs.iter().map(|r| r.self_acc).collect();
    // a starved seed produces no semi model and counts as no gain
    let semis: Vec<f64> = runs.iter().map(|r| r.semi_acc.unwrap_or(r.self_acc)).collect();
    let gains: Vec<f64> = semis.iter().zip(&selfs).map(|(a, b)| a - b).collect();
    let starved = runs.iter().filter(|r| r.semi_acc.is_none()).count();
    let (ms, mp, mg) = (median(&selfs), median(&semis), median(&gains));
    let in_band = (0.70..=0.90).contains(&ms);
    let pass = in_band && starved == 0 && mp >= ms && mg >= 0.02 && secs <= 600.0;
    verdict(
        pass,
        format!(
            "self median {ms:.4} {}, pipeline median {mp:.4} {}, median gain {mg:+.4}, {starved} starved, {secs:.0}s",
            fmt(&selfs),
            fmt(&semis)
        ),
    )
}

fn ablation_directions(runs: &[BoostRun]) -> Verdict {
    let ds_ce: Vec<f64> = runs.iter().map(|r| r.self_acc).collect();
    let mut tce = Vec::new();
    let mut ce = Vec::new();
    let mut strict = Vec::new();
    for &seed in &SEEDS {
        let ds = overlapping(seed);
        tce.push(self_acc(&ds, seed, "tce", "overlap").0);
        ce.push(self_acc(&ds, seed, "ce", "overlap").0);
        strict.push(self_acc(&ds, seed, "ds-ce", "non-overlap").0);
    }
    let (a, b, c, d) = (median(&ds_ce), median(&tce), median(&ce), median(&strict));
    let pass = a >= b - 0.01 && b >= c - 0.01 && a >= d - 0.01;
    verdict(
        pass,
        format!(
            "median acc ds-ce {a:.4}, tce {b:.4}, ce {c:.4}; overlap {a:.4}, non-overlap {d:.4} \
             (ties within 0.01)"
        ),
    )
}

// ---------------------------------------------------------------- 8

fn pipeline_metrics(dir: &Path) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_spice"))
        .current_dir(dir)
        .args(["pipeline", "--seed", "7"])
        .output()
        .map_err(|e| e.to_string())?;
    let report = dir.join("spice-out/report.json");
    let text = std::fs::read_to_string(&report)
        .map_err(|e| format!("exit {:?}, no report: {e}", out.status.code()))?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    Ok(serde_json::to_string(&value["metrics"]).unwrap())
}

fn determinism() -> Verdict {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    match (pipeline_metrics(a.path()), pipeline_metrics(b.path())) {
        (Ok(x), Ok(y)) => verdict(
            x == y && x.len() > 2,
            format!("metrics sections {} bytes each, identical: {}", x.len(), x == y),
        ),
        (Err(e), _) | (_, Err(e)) => verdict(false, e),
    }
}

fn main() {
    let mut results: Vec<(u32, &str, Verdict)> = Vec::new();
    let mut report = |n: u32, name: &'static str, v: Verdict| {
        println!("[{}] {n}. {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        results.push((n, name, v));
    };
    report(1, "metric oracles", metric_oracles());
    report(2, "double-softmax bounds", double_softmax_bound());
    report(3, "gradient correctness", gradient_checks());
    let recovery = recovery_runs();
    report(4, "synthetic recovery", synthetic_recovery(&recovery));
    report(5, "head selection", head_selection(&recovery));
    report(6, "reliability purification", reliability_purification());
    let (boost, secs) = boost_runs();
    report(7, "semi-supervised boost", semi_boost(&boost, secs));
    report(8, "determinism", determinism());
    report(9, "ablation directions", ablation_directions(&boost));

    let failed: Vec<u32> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    println!(
        "acceptance: {}/{} criteria passed",
        results.len() - failed.len(),
        results.len()
    );
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
