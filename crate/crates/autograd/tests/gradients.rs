//! Finite-difference checks for every differentiable op.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wsdmil_autograd::gradcheck::check_op;
use wsdmil_autograd::{pinv_newton_schulz, Graph, Tensor, Var};

const STEP: f64 = 1e-5;

fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn assert_all_below(errs: &[f64], tol: f64, what: &str) {
    for (i, e) in errs.iter().enumerate() {
        assert!(*e < tol, "{what}: input {i} rel err {e:e} >= {tol:e}");
    }
}

#[test]
fn matmul_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let inputs = [uniform(&[4, 5], &mut rng), uniform(&[5, 3], &mut rng)];
    let errs = check_op(&inputs, |g, v| g.matmul(v[0], v[1]), STEP).unwrap();
    assert_all_below(&errs, 1e-6, "matmul");
}

#[test]
fn matmul_nt_and_batched_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let inputs = [uniform(&[2, 3, 4], &mut rng), uniform(&[2, 5, 4], &mut rng)];
    let errs = check_op(&inputs, |g, v| g.matmul_nt(v[0], v[1]), STEP).unwrap();
    assert_all_below(&errs, 1e-6, "batched matmul_nt");

    let inputs = [uniform(&[3, 2, 4], &mut rng), uniform(&[4, 3], &mut rng)];
    let errs = check_op(&inputs, |g, v| g.matmul(v[0], v[1]), STEP).unwrap();
    assert_all_below(&errs, 1e-6, "matmul with shared rhs");

    let inputs = [uniform(&[2, 4], &mut rng), uniform(&[3, 4, 2], &mut rng)];
    let errs = check_op(&inputs, |g, v| g.matmul(v[0], v[1]), STEP).unwrap();
    assert_all_below(&errs, 1e-6, "matmul with shared lhs");
}

#[test]
fn softmax_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let inputs = [uniform(&[3, 4], &mut rng)];
    for axis in [0, 1] {
        let errs = check_op(&inputs, |g, v| g.softmax(v[0], axis), STEP).unwrap();
        assert_all_below(&errs, 1e-6, "softmax");
    }
}

#[test]
fn layer_norm_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let inputs = [uniform(&[2, 6], &mut rng), uniform(&[6], &mut rng), uniform(&[6], &mut rng)];
    let errs = check_op(&inputs, |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5), STEP).unwrap();
    assert_all_below(&errs, 1e-5, "layer_norm");
}

#[test]
fn conv1d_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let inputs = [uniform(&[8], &mut rng), uniform(&[3], &mut rng)];
    let errs = check_op(&inputs, |g, v| g.conv1d_depthwise(v[0], v[1]), STEP).unwrap();
    assert_all_below(&errs, 1e-6, "conv1d");

    let inputs = [uniform(&[2, 3, 5], &mut rng), uniform(&[2, 3], &mut rng)];
    let errs = check_op(&inputs, |g, v| g.conv1d_depthwise(v[0], v[1]), STEP).unwrap();
    assert_all_below(&errs, 1e-6, "grouped conv1d");
}

#[test]
fn elementwise_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let a = uniform(&[3, 2, 4], &mut rng);
    for b in [uniform(&[3, 2, 4], &mut rng), uniform(&[2, 4], &mut rng), uniform(&[3, 1, 1], &mut rng)] {
        let inputs = [a.clone(), b];
        assert_all_below(&check_op(&inputs, |g, v| g.add(v[0], v[1]), STEP).unwrap(), 1e-6, "add");
        assert_all_below(&check_op(&inputs, |g, v| g.sub(v[0], v[1]), STEP).unwrap(), 1e-6, "sub");
        assert_all_below(&check_op(&inputs, |g, v| g.mul(v[0], v[1]), STEP).unwrap(), 1e-6, "mul");
    }
    let inputs = [a];
    assert_all_below(&check_op(&inputs, |g, v| Ok(g.tanh(v[0])), STEP).unwrap(), 1e-6, "tanh");
    assert_all_below(&check_op(&inputs, |g, v| Ok(g.sigmoid(v[0])), STEP).unwrap(), 1e-6, "sigmoid");
    assert_all_below(&check_op(&inputs, |g, v| Ok(g.scale(v[0], -2.5)), STEP).unwrap(), 1e-6, "scale");
    assert_all_below(&check_op(&inputs, |g, v| Ok(g.add_scalar(v[0], 3.0)), STEP).unwrap(), 1e-6, "add_scalar");
}

#[test]
fn relu_gradient_away_from_kink() {
    let x = Tensor::new(vec![5], vec![-0.8, -0.1, 0.2, 0.5, 0.9]).unwrap();
    let errs = check_op(&[x], |g, v| Ok(g.relu(v[0])), STEP).unwrap();
    assert_all_below(&errs, 1e-8, "relu");
}

#[test]
fn shape_op_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let inputs = [uniform(&[2, 3, 4], &mut rng)];
    let cases: Vec<(&str, Box<dyn Fn(&mut Graph, &[Var]) -> wsdmil_autograd::Result<Var>>)> = vec![
        ("transpose", Box::new(|g, v| g.transpose(v[0]))),
        ("permute", Box::new(|g, v| g.permute(v[0], &[1, 2, 0]))),
        ("reshape", Box::new(|g, v| g.reshape(v[0], &[6, 4]))),
        ("narrow", Box::new(|g, v| g.narrow(v[0], 2, 1, 2))),
        ("sum_axis", Box::new(|g, v| g.sum_axis(v[0], 1))),
        ("mean_axis", Box::new(|g, v| g.mean_axis(v[0], 0))),
        ("sum", Box::new(|g, v| Ok(g.sum(v[0])))),
        ("gather_rows", Box::new(|g, v| g.gather_rows(v[0], &[1, 0, 1]))),
        ("max_rows", Box::new(|g, v| g.max_rows(v[0]))),
        ("scatter_rows", Box::new(|g, v| g.scatter_rows(v[0], &[3, 0], 5))),
    ];
    for (name, f) in cases {
        let errs = check_op(&inputs, |g, v| f(g, v), STEP).unwrap();
        assert_all_below(&errs, 1e-6, name);
    }
}

#[test]
fn cross_entropy_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for label in 0..4 {
        let inputs = [uniform(&[4], &mut rng)];
        let errs = check_op(&inputs, |g, v| g.cross_entropy(v[0], label), STEP).unwrap();
        assert_all_below(&errs, 1e-6, "cross_entropy");
    }
}

#[test]
fn pinv_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    // generic positive matrix: the argmax column and row of the norms are unique
    let generic = Tensor::from_fn(&[5, 5], |i| rng.random_range(0.1..1.0) + if i % 6 == 0 { 2.0 } else { 0.0 });
    let errs = check_op(&[generic.clone()], |g, v| g.pinv_init(v[0]), STEP).unwrap();
    assert_all_below(&errs, 1e-6, "pinv_init");
    let errs = check_op(&[generic], |g, v| pinv_newton_schulz(g, v[0], 6), STEP).unwrap();
    assert_all_below(&errs, 1e-5, "pinv_newton_schulz");

    // row-stochastic kernels, as produced by softmax: every row sum is 1, so
    // the ∞-norm is flat along every admissible direction
    let logits = Tensor::from_fn(&[5, 5], |i| rng.random_range(-1.0..1.0) + if i % 6 == 0 { 2.0 } else { 0.0 });
    let errs = check_op(
        &[logits],
        |g, v| {
            let s = g.softmax(v[0], 1)?;
            pinv_newton_schulz(g, s, 6)
        },
        STEP,
    )
    .unwrap();
    assert_all_below(&errs, 1e-5, "softmax → pinv_newton_schulz");
}

#[test]
fn gradients_are_finite_for_finite_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut g = Graph::new();
    let x = g.leaf(&uniform(&[4, 6], &mut rng).with_grad());
    let w = g.leaf(&uniform(&[6, 6], &mut rng).with_grad());
    let gain = g.leaf(&Tensor::ones(&[6]).with_grad());
    let bias = g.leaf(&Tensor::zeros(&[6]).with_grad());
    let h = g.matmul(x, w).unwrap();
    let h = g.layer_norm(h, gain, bias, 1e-5).unwrap();
    let h = g.softmax(h, 1).unwrap();
    let h = g.tanh(h);
    let loss = g.sum(h);
    g.backward(loss).unwrap();
    for v in [x, w, gain, bias] {
        assert!(g.grad(v).unwrap().iter().all(|v| v.is_finite()));
    }
}
