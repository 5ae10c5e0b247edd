//! Central finite differences, used to check analytic gradients.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Relative error `‖a − b‖₂ / max(‖a‖₂, ‖b‖₂)`; zero when both are zero.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = na.max(nb);
    if denom == 0.0 {
        0.0
    } else {
        diff / denom
    }
}

/// Central-difference gradient of `f` at `x`.
pub fn numeric_grad(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + step;
            let up = f(&probe);
            probe[i] = orig - step;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// Fixed, non-constant weights used to reduce an op output to a scalar, so
/// that ops whose plain sum has zero gradient (softmax) are still exercised.
pub fn probe_weights(n: usize) -> Tensor {
    Tensor::from_fn(&[n], |i| (1.3 * i as f64 + 0.7).cos())
}

/// Checks the gradient of `build` with respect to every input.
///
/// The scalar objective is `Σ wᵢ·yᵢ` with [`probe_weights`]. Returns one
/// relative error per input.
pub fn check_op(
    inputs: &[Tensor],
    build: impl Fn(&mut Graph, &[Var]) -> Result<Var>,
    step: f64,
) -> Result<Vec<f64>> {
    let objective = |vals: &[Tensor], grad: bool| -> Result<(f64, Vec<Vec<f64>>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals
            .iter()
            .map(|t| {
                let mut t = t.clone();
                t.set_requires_grad(grad);
                g.leaf(&t)
            })
            .collect();
        let y = build(&mut g, &vars)?;
        let n = g.value(y).len();
        let w = g.constant(probe_weights(n));
        let flat = g.reshape(y, &[n])?;
        let prod = g.mul(flat, w)?;
        let loss = g.sum(prod);
        let value = g.value(loss)[0];
        let mut grads = Vec::new();
        if grad {
            g.backward(loss)?;
            for v in &vars {
                grads.push(g.grad(*v).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; g.value(*v).len()]));
            }
        }
        Ok((value, grads))
    };

    let (_, analytic) = objective(inputs, true)?;
    let mut errs = Vec::with_capacity(inputs.len());
    for (k, input) in inputs.iter().enumerate() {
        let numeric = numeric_grad(
            |x| {
                let mut vals = inputs.to_vec();
                vals[k] = Tensor::new(input.shape().to_vec(), x.to_vec()).expect("same shape");
                objective(&vals, false).map(|(v, _)| v).unwrap_or(f64::NAN)
            },
            input.data(),
            step,
        );
        errs.push(relative_error(&analytic[k], &numeric));
    }
    Ok(errs)
}
