//! Analytic gradients against central finite differences.

use rand::Rng;
use soul::linalg::Matrix;
use soul::nn::{LossWeights, MlpModel, Mode, ModelSpec, OptimizerState, TrainBatch};
use soul::rng_from_seed;

const STEP: f64 = 1e-5;

/// Central-difference gradient of the total loss, one parameter at a time.
fn numeric_gradient(
    model: &MlpModel,
    teacher: Option<&MlpModel>,
    batch: &TrainBatch,
    mode: Mode,
) -> Vec<f64> {
    let base = model.flat_params();
    let mut probe = model.clone();
    (0..base.len())
        .map(|i| {
            let mut plus = base.clone();
            plus[i] += STEP;
            probe.set_flat_params(&plus).unwrap();
            let lp = probe
                .loss_and_gradients(teacher, batch, LossWeights::default(), mode)
                .unwrap()
                .loss
                .total();
            let mut minus = base.clone();
            minus[i] -= STEP;
            probe.set_flat_params(&minus).unwrap();
            let lm = probe
                .loss_and_gradients(teacher, batch, LossWeights::default(), mode)
                .unwrap()
                .loss
                .total();
            (lp - lm) / (2.0 * STEP)
        })
        .collect()
}

fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

fn random_case(seed: u64, batchnorm: bool) -> (MlpModel, MlpModel, TrainBatch) {
    let mut rng = rng_from_seed(seed);
    let input_dim = rng.random_range(2..5);
    let hidden: Vec<usize> = (0..rng.random_range(1..3))
        .map(|_| rng.random_range(2..6))
        .collect();
    let spec = ModelSpec {
        input_dim,
        hidden,
        batchnorm,
        dropout: 0.2,
    };
    let mut model = MlpModel::new(&spec, &mut rng).unwrap();
    // Perturb batchnorm so eval statistics are not the identity.
    for layer in &mut model.layers {
        if let Some(bn) = &mut layer.batchnorm {
            for j in 0..bn.gamma.len() {
                bn.gamma[j] = rng.random_range(0.5..1.5);
                bn.beta[j] = rng.random_range(-0.3..0.3);
                bn.running_mean[j] = rng.random_range(-0.2..0.2);
                bn.running_var[j] = rng.random_range(0.5..2.0);
            }
        }
        for b in &mut layer.bias {
            *b = rng.random_range(-0.2..0.2);
        }
    }
    let teacher = MlpModel::new(&spec, &mut rng).unwrap();
    let n = rng.random_range(2..=8);
    let inputs = Matrix::new(
        n,
        input_dim,
        (0..n * input_dim)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect(),
    )
    .unwrap();
    let targets = (0..n).map(|_| rng.random_range(0..2u8)).collect();
    let unlabeled_start = rng.random_range(0..n);
    (
        model,
        teacher,
        TrainBatch {
            inputs,
            targets,
            unlabeled_start,
        },
    )
}

fn check(model: &MlpModel, teacher: &MlpModel, batch: &TrainBatch, mode: Mode) -> (usize, usize) {
    assert!(model.param_count() <= 200, "{} params", model.param_count());
    let analytic = model
        .loss_and_gradients(Some(teacher), batch, LossWeights::default(), mode)
        .unwrap()
        .gradients
        .flatten();
    let numeric = numeric_gradient(model, Some(teacher), batch, mode);
    let ok = analytic
        .iter()
        .zip(&numeric)
        .filter(|(a, n)| relative_error(**a, **n) <= 1e-4)
        .count();
    (ok, analytic.len())
}

#[test]
fn eval_statistics_gradients_match_finite_differences() {
    let (mut ok, mut total) = (0, 0);
    for seed in 0..25 {
        let (model, teacher, batch) = random_case(seed, true);
        let (o, t) = check(&model, &teacher, &batch, Mode::Eval);
        ok += o;
        total += t;
    }
    assert!(ok as f64 >= 0.99 * total as f64, "{ok}/{total}");
}

#[test]
fn batch_statistics_gradients_match_finite_differences() {
    let (mut ok, mut total) = (0, 0);
    for seed in 100..120 {
        let (model, teacher, batch) = random_case(seed, true);
        let (o, t) = check(&model, &teacher, &batch, Mode::Train { dropout_seed: None });
        ok += o;
        total += t;
    }
    assert!(ok as f64 >= 0.99 * total as f64, "{ok}/{total}");
}

#[test]
fn gradients_without_batchnorm() {
    for seed in 200..210 {
        let (model, teacher, batch) = random_case(seed, false);
        let (ok, total) = check(&model, &teacher, &batch, Mode::Eval);
        assert!(
            ok as f64 >= 0.99 * total as f64,
            "seed {seed}: {ok}/{total}"
        );
    }
}

#[test]
fn single_sample_tiny_model() {
    // 1 -> 1 -> 2 chain: six parameters, one sample.
    let spec = ModelSpec {
        input_dim: 1,
        hidden: vec![1],
        batchnorm: false,
        dropout: 0.0,
    };
    let mut rng = rng_from_seed(42);
    let mut model = MlpModel::new(&spec, &mut rng).unwrap();
    model.layers[0].bias[0] = 0.3;
    let batch = TrainBatch::labeled(Matrix::from_rows(&[[0.7]]).unwrap(), vec![1]);
    let analytic = model
        .loss_and_gradients(None, &batch, LossWeights::default(), Mode::Eval)
        .unwrap()
        .gradients
        .flatten();
    let numeric = numeric_gradient(&model, None, &batch, Mode::Eval);
    for (a, n) in analytic.iter().zip(&numeric) {
        assert!(relative_error(*a, *n) <= 1e-4, "{a} vs {n}");
    }
}

/// `f(x) = x^2` minimised by the same Nesterov recurrence the optimizer uses,
/// checked against an independent scalar loop.
#[test]
fn nesterov_on_scalar_quadratic() {
    let mut x = 1.0f64;
    let mut v = 0.0f64;
    for _ in 0..50 {
        let g = 2.0 * x;
        v = 0.9 * v + g;
        x -= 0.1 * (g + 0.9 * v);
    }
    assert!(x.abs() < 1e-3);

    // Same problem through OptimizerState: a 1->2 head whose first weight is x
    // and whose gradient we supply by hand.
    let spec = ModelSpec {
        input_dim: 1,
        hidden: vec![],
        batchnorm: false,
        dropout: 0.0,
    };
    let mut model = MlpModel::new(&spec, &mut rng_from_seed(0)).unwrap();
    let mut params = model.flat_params();
    params.iter_mut().for_each(|p| *p = 0.0);
    params[0] = 1.0;
    model.set_flat_params(&params).unwrap();
    let mut opt = OptimizerState::new(&model, 0.1, 0.0).unwrap();
    for _ in 0..50 {
        let mut g = soul::nn::Gradients::zeros_like(&model);
        g.layers[0].weights[(0, 0)] = 2.0 * model.layers[0].weights[(0, 0)];
        opt.step(&mut model, &g).unwrap();
    }
    assert_eq!(model.layers[0].weights[(0, 0)], x);
}
