use rand::seq::SliceRandom;
use rand::Rng;
use spice_core::metrics::{accuracy, ari, evaluate, hungarian, nmi, nmi_with, NmiNorm};
use spice_core::RngState;

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

fn exhaustive_accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    let k = pred.iter().chain(truth).max().unwrap() + 1;
    let best = permutations(k)
        .iter()
        .map(|perm| pred.iter().zip(truth).filter(|&(&p, &t)| perm[p] == t).count())
        .max()
        .unwrap();
    best as f64 / pred.len() as f64
}

#[test]
fn accuracy_matches_exhaustive_search() {
    let mut rng = RngState::new(1);
    for _ in 0..200 {
        let k = rng.random_range(1..=5);
        let n = rng.random_range(1..=60);
        let truth: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let pred: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let (acc, _) = accuracy(&pred, &truth).unwrap();
        assert_eq!(acc, exhaustive_accuracy(&pred, &truth), "{pred:?} vs {truth:?}");
    }
}

#[test]
fn hungarian_finds_minimum_cost() {
    let mut rng = RngState::new(2);
    for _ in 0..100 {
        let n = rng.random_range(1..=6);
        let cost: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..n).map(|_| f64::from(rng.random_range(0u8..20))).collect())
            .collect();
        let total = |a: &[usize]| a.iter().enumerate().map(|(r, &c)| cost[r][c]).sum::<f64>();
        let best = permutations(n).iter().map(|p| total(p)).fold(f64::INFINITY, f64::min);
        assert_eq!(total(&hungarian(&cost)), best);
    }
}

#[test]
fn ari_of_crossed_pairs() {
    // every contingency cell holds one sample, so no pair agrees on both sides
    let value = ari(&[0, 0, 1, 1], &[0, 1, 0, 1]).unwrap();
    let pairs = |n: f64| n * (n - 1.0) / 2.0;
    let index = 0.0;
    let rows = 2.0 * pairs(2.0);
    let cols = 2.0 * pairs(2.0);
    let expected = rows * cols / pairs(4.0);
    let want = (index - expected) / (0.5 * (rows + cols) - expected);
    assert!((value - want).abs() < 1e-12);
    assert!((value + 0.5).abs() < 1e-12);
}

#[test]
fn metrics_ignore_label_names() {
    let mut rng = RngState::new(3);
    let truth: Vec<usize> = (0..300).map(|_| rng.random_range(0..4)).collect();
    let pred: Vec<usize> = truth
        .iter()
        .map(|&t| if rng.random::<f64>() < 0.3 { rng.random_range(0..4) } else { t })
        .collect();
    let mut rename: Vec<usize> = (0..4).collect();
    rename.shuffle(&mut rng);
    let renamed: Vec<usize> = pred.iter().map(|&p| rename[p]).collect();
    let a = evaluate(&pred, &truth).unwrap();
    let b = evaluate(&renamed, &truth).unwrap();
    assert_eq!(a.acc, b.acc);
    assert!((a.nmi - b.nmi).abs() < 1e-12);
    assert!((a.ari - b.ari).abs() < 1e-12);
    assert!((nmi(&pred, &truth).unwrap() - nmi(&truth, &pred).unwrap()).abs() < 1e-12);
}

#[test]
fn perfect_and_independent_labelings() {
    let truth: Vec<usize> = (0..1000).map(|i| i % 7).collect();
    let shifted: Vec<usize> = truth.iter().map(|&t| (t + 3) % 7).collect();
    let e = evaluate(&shifted, &truth).unwrap();
    assert_eq!(e.acc, 1.0);
    assert!((e.nmi - 1.0).abs() < 1e-12);
    assert!((e.ari - 1.0).abs() < 1e-12);

    let mut rng = RngState::new(4);
    let n = 10_000;
    let a: Vec<usize> = (0..n).map(|_| rng.random_range(0..10)).collect();
    let b: Vec<usize> = (0..n).map(|_| rng.random_range(0..10)).collect();
    assert!(nmi(&a, &b).unwrap() <= 0.05);
    assert!(nmi_with(&a, &b, NmiNorm::Arithmetic).unwrap() <= 0.05);
    assert!(ari(&a, &b).unwrap().abs() <= 0.05);
}
