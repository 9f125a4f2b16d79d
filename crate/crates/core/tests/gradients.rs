use rand::Rng;
use spice_core::head::{init_head, init_semi_head, Mlp};
use spice_core::loss::{
    entropy_regularizer, entropy_regularizer_logit_grad, objective_and_grad, CrossEntropy,
    DoubleSoftmaxCe, HeadLoss, TemperedCe,
};
use spice_core::numeric::{finite_diff_gradient, relative_error, softmax_rows};
use spice_core::semi::{confidence_mask, semi_loss, semi_loss_with_targets, SemiTrainConfig};
use spice_core::{Matrix, RngState, TransformConfig};

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;
const CONFIGS: u64 = 50;

fn random_matrix(rows: usize, cols: usize, scale: f64, rng: &mut RngState) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

fn random_labels(m: usize, k: usize, rng: &mut RngState) -> Vec<usize> {
    (0..m).map(|_| rng.random_range(0..k)).collect()
}

// Zero-initialised biases can park a ReLU exactly on its kink; jitter every
// parameter so each configuration is a generic point.
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

fn check_head_loss(loss: &dyn HeadLoss, entropy_weight: f64, seed: u64) {
    let mut rng = RngState::new(seed);
    let d = rng.random_range(2..7);
    let k = rng.random_range(2..7);
    let m = rng.random_range(1..9);
    let head = jittered(init_head(d, k, &mut rng).unwrap(), &mut rng);
    let x = random_matrix(m, d, 2.0, &mut rng);
    let y = random_labels(m, k, &mut rng);
    let (_, analytic) = objective_and_grad(&head, &x, &y, loss, entropy_weight).unwrap();
    let numeric = finite_diff_gradient(
        |p| Ok(objective_and_grad(&with_params(&head, p), &x, &y, loss, entropy_weight)?.0),
        head.params(),
        H,
    )
    .unwrap();
    let err = relative_error(&analytic, &numeric);
    assert!(err <= TOL, "{} seed {seed}: relative error {err:e}", loss.name());
}

#[test]
fn double_softmax_gradient() {
    for seed in 0..CONFIGS {
        check_head_loss(&DoubleSoftmaxCe, 0.0, seed);
    }
}

#[test]
fn cross_entropy_gradient() {
    for seed in 0..CONFIGS {
        check_head_loss(&CrossEntropy, 0.0, 100 + seed);
    }
}

#[test]
fn tempered_gradient() {
    for seed in 0..CONFIGS {
        let temperature = 0.1 + 0.9 * (seed as f64 / CONFIGS as f64);
        check_head_loss(&TemperedCe { temperature }, 0.0, 200 + seed);
    }
}

#[test]
fn entropy_regularizer_logit_gradient() {
    for seed in 0..CONFIGS {
        let mut rng = RngState::new(300 + seed);
        let m = rng.random_range(1..12);
        let k = rng.random_range(2..8);
        let logits = random_matrix(m, k, 3.0, &mut rng);
        let (value, analytic) = entropy_regularizer_logit_grad(&softmax_rows(&logits));
        assert!((value - entropy_regularizer(&softmax_rows(&logits))).abs() < 1e-15);
        let numeric = finite_diff_gradient(
            |z| {
                let z = Matrix::from_vec(m, k, z.to_vec())?;
                Ok(entropy_regularizer(&softmax_rows(&z)))
            },
            logits.as_slice(),
            H,
        )
        .unwrap();
        let err = relative_error(analytic.as_slice(), &numeric);
        assert!(err <= TOL, "seed {seed}: relative error {err:e}");
    }
}

#[test]
fn regularized_objective_gradient() {
    for seed in 0..CONFIGS {
        check_head_loss(&DoubleSoftmaxCe, 0.5 + seed as f64 / 10.0, 400 + seed);
    }
}

struct SemiCase {
    model: Mlp,
    weak_l: Matrix,
    labels: Vec<usize>,
    weak_u: Matrix,
    strong_u: Matrix,
}

fn semi_case(seed: u64) -> SemiCase {
    let mut rng = RngState::new(seed);
    let d = rng.random_range(2..6);
    let hidden = rng.random_range(2..7);
    let k = rng.random_range(2..6);
    let b = rng.random_range(1..5);
    let mu = rng.random_range(1..4);
    let model = jittered(init_semi_head(d, hidden, k, &mut rng).unwrap(), &mut rng);
    let weak_l = random_matrix(b, d, 2.0, &mut rng);
    let labels = random_labels(b, k, &mut rng);
    // large unlabeled values make confident predictions likely
    let weak_u = random_matrix(b * mu, d, 6.0, &mut rng);
    let mut strong_u = weak_u.clone();
    strong_u
        .as_mut_slice()
        .iter_mut()
        .for_each(|v| *v += rng.random_range(-0.5..0.5));
    SemiCase {
        model,
        weak_l,
        labels,
        weak_u,
        strong_u,
    }
}

#[test]
fn semi_loss_gradient() {
    let mut gated_total = 0;
    for seed in 0..CONFIGS {
        let c = semi_case(500 + seed);
        let targets = confidence_mask(&c.model.forward(&c.weak_u).unwrap(), 0.6);
        let analytic =
            semi_loss_with_targets(&c.model, &c.weak_l, &c.labels, &c.strong_u, &targets).unwrap();
        gated_total += analytic.masked;
        let numeric = finite_diff_gradient(
            |p| {
                let m = with_params(&c.model, p);
                Ok(semi_loss_with_targets(&m, &c.weak_l, &c.labels, &c.strong_u, &targets)?.total)
            },
            c.model.params(),
            H,
        )
        .unwrap();
        let err = relative_error(&analytic.grads, &numeric);
        assert!(err <= TOL, "seed {seed}: relative error {err:e}");
    }
    assert!(gated_total > 0, "no configuration exercised the consistency term");
}

#[test]
fn pseudo_targets_carry_no_gradient() {
    for seed in 0..CONFIGS {
        let c = semi_case(600 + seed);
        let targets = confidence_mask(&c.model.forward(&c.weak_u).unwrap(), 0.0);
        let base =
            semi_loss_with_targets(&c.model, &c.weak_l, &c.labels, &c.strong_u, &targets).unwrap();
        // moving the weak views without flipping any target must leave the gradient untouched
        let mut shifted = c.weak_u.clone();
        shifted.as_mut_slice().iter_mut().for_each(|v| *v *= 1.0 + 1e-7);
        let moved = confidence_mask(&c.model.forward(&shifted).unwrap(), 0.0);
        if moved != targets {
            continue;
        }
        let again =
            semi_loss_with_targets(&c.model, &c.weak_l, &c.labels, &c.strong_u, &moved).unwrap();
        assert_eq!(base.grads, again.grads);
    }
}

#[test]
fn raw_batch_objective_matches_explicit_targets() {
    let c = semi_case(700);
    let k = c.model.output_dim();
    let cfg = SemiTrainConfig {
        tau: 0.5,
        ..SemiTrainConfig::new(k)
    };
    let identity = TransformConfig::identity();
    let mut rng = RngState::new(1);
    let full = semi_loss(
        &c.model,
        (&c.weak_l, &c.labels),
        &c.weak_u,
        &cfg,
        &identity,
        &mut rng,
    )
    .unwrap();
    let targets = confidence_mask(&c.model.forward(&c.weak_u).unwrap(), 0.5);
    let explicit =
        semi_loss_with_targets(&c.model, &c.weak_l, &c.labels, &c.weak_u, &targets).unwrap();
    assert_eq!(full, explicit);
}

