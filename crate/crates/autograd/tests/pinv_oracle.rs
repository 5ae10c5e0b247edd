//! Newton–Schulz pseudoinverse against an SVD pseudoinverse.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wsdmil_autograd::{pinv_newton_schulz, Graph, Tensor, DEFAULT_PINV_ITERS};

fn well_conditioned_row_stochastic(n: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        let row: Vec<f64> = (0..n)
            .map(|j| (rng.random_range(-1.0f64..1.0) + if i == j { 3.0 } else { 0.0 }).exp())
            .collect();
        let z: f64 = row.iter().sum();
        for j in 0..n {
            data[i * n + j] = row[j] / z;
        }
    }
    Tensor::new(vec![n, n], data).unwrap()
}

fn svd_pinv(a: &Tensor) -> DMatrix<f64> {
    let n = a.shape()[0];
    DMatrix::from_row_slice(n, n, a.data()).pseudo_inverse(1e-12).unwrap()
}

fn newton_schulz(a: &Tensor, iters: usize) -> DMatrix<f64> {
    let n = a.shape()[0];
    let mut g = Graph::new();
    let v = g.constant(a.clone());
    let z = pinv_newton_schulz(&mut g, v, iters).unwrap();
    DMatrix::from_row_slice(n, n, g.value(z))
}

#[test]
fn matches_svd_pseudoinverse_on_row_stochastic_8x8() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for _ in 0..20 {
        let a = well_conditioned_row_stochastic(8, &mut rng);
        let exact = svd_pinv(&a);
        let approx = newton_schulz(&a, DEFAULT_PINV_ITERS);
        let rel = (&approx - &exact).norm() / exact.norm();
        assert!(rel < 1e-4, "Frobenius rel err {rel:e}");
    }
}

#[test]
fn residual_decreases_monotonically() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..10 {
        let a = well_conditioned_row_stochastic(8, &mut rng);
        let am = DMatrix::from_row_slice(8, 8, a.data());
        let mut prev = f64::INFINITY;
        for t in 1..=8 {
            let z = newton_schulz(&a, t);
            let resid = (&am * &z * &am - &am).norm();
            assert!(resid <= prev + 1e-14, "t={t}: {resid:e} > {prev:e}");
            prev = resid;
        }
        assert!(prev < 1e-10);
    }
}
