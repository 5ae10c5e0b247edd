#![allow(dead_code)]

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wsdmil::bag::Bag;
use wsdmil::sampler::{build_sequence, SampledSequence};
use wsdmil_autograd::{Graph, Tensor, Var};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

pub fn to_matrix(t: &Tensor) -> DMatrix<f64> {
    let [r, c] = *t.shape() else { panic!("not a matrix: {:?}", t.shape()) };
    DMatrix::from_row_slice(r, c, t.data())
}

pub fn from_matrix(m: &DMatrix<f64>) -> Tensor {
    let data: Vec<f64> = (0..m.nrows()).flat_map(|i| (0..m.ncols()).map(move |j| m[(i, j)])).collect();
    Tensor::new(vec![m.nrows(), m.ncols()], data).unwrap()
}

pub fn row_softmax(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for mut row in out.row_iter_mut() {
        let max = row.max();
        row.iter_mut().for_each(|v| *v = (*v - max).exp());
        let s = row.sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    out
}

pub fn svd_pinv(m: &DMatrix<f64>) -> DMatrix<f64> {
    m.clone().pseudo_inverse(1e-13).unwrap()
}

/// Pseudoinverse step that swaps the iterative scheme for an exact SVD.
pub fn exact_pinv(g: &mut Graph, a: Var) -> wsdmil::Result<Var> {
    let [n, _] = *g.shape(a) else { unreachable!() };
    let m = DMatrix::from_row_slice(n, n, g.value(a));
    Ok(g.constant(from_matrix(&svd_pinv(&m))))
}

pub fn frobenius(a: &DMatrix<f64>) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// A square patch grid of `side²` instances with uniform features.
pub fn grid_bag(side: i32, dim: usize, label: usize, seed: u64) -> Bag {
    let mut r = rng(seed);
    let coords: Vec<(i32, i32)> = (0..side).flat_map(|a| (0..side).map(move |b| (a, b))).collect();
    let emb = (0..coords.len() * dim).map(|_| r.random_range(-1.0..1.0)).collect();
    Bag::new("grid", emb, dim, coords, label).unwrap()
}

/// Sequence over the first `n` raster positions of a random grid bag.
pub fn random_sequence(n: usize, dim: usize, base: usize, seed: u64) -> SampledSequence {
    let side = (n as f64).sqrt().ceil() as i32;
    let bag = grid_bag(side, dim, 0, seed);
    build_sequence(&bag, &(0..n).collect::<Vec<_>>(), base).unwrap()
}

/// Copy of `seq` with every padded position overwritten by noise.
pub fn with_garbage_padding(seq: &SampledSequence, seed: u64) -> SampledSequence {
    let mut r = rng(seed);
    let f = seq.feature_dim();
    let mut out = seq.clone();
    let data = out.features.data_mut();
    for (i, &real) in seq.mask.iter().enumerate() {
        if !real {
            data[i * f..(i + 1) * f].iter_mut().for_each(|v| *v = r.random_range(-3.0..3.0));
        }
    }
    out
}
