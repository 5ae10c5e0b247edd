//! Whole-model gradient check against central finite differences.

use serde::{Deserialize, Serialize};
use wsdmil_autograd::gradcheck::relative_error;

use crate::error::{Error, Result};
use crate::model::WsdModel;
use crate::sampler::SampledSequence;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Debug hook: add 1 to the first analytic gradient entry of this
    /// parameter before comparing.
    pub corrupt: Option<String>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            step: 1e-5,
            tolerance: 1e-4,
            corrupt: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupCheck {
    pub name: String,
    pub numel: usize,
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)` over the group.
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub groups: Vec<GroupCheck>,
    pub worst: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Compares the backward pass of the cross-entropy loss with central
/// differences, one parameter group at a time.
pub fn gradcheck_model(
    model: &WsdModel,
    seq: &SampledSequence,
    label: usize,
    opts: &GradcheckOptions,
) -> Result<GradcheckReport> {
    if !(opts.step > 0.0) {
        return Err(Error::Argument("finite-difference step must be positive".into()));
    }
    let (_, mut grads, _) = model.loss_and_grads(seq, label)?;
    if let Some(name) = &opts.corrupt {
        let g = grads
            .get_mut(name)
            .ok_or_else(|| Error::Argument(format!("no parameter named {name:?} to corrupt")))?;
        g[0] += 1.0;
    }
    let mut probe = model.clone();
    let mut groups = Vec::with_capacity(grads.len());
    for (name, analytic) in &grads {
        let mut numeric = vec![0.0; analytic.len()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let orig = probe.param(name).expect("grads come from the model").data()[i];
            let set = |m: &mut WsdModel, v: f64| m.param_mut(name).expect("exists")[i] = v;
            set(&mut probe, orig + opts.step);
            let up = probe.loss(seq, label)?;
            set(&mut probe, orig - opts.step);
            let down = probe.loss(seq, label)?;
            set(&mut probe, orig);
            *slot = (up - down) / (2.0 * opts.step);
        }
        groups.push(GroupCheck {
            name: name.clone(),
            numel: analytic.len(),
            rel_err: relative_error(analytic, &numeric),
        });
    }
    let worst = groups
        .iter()
        .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
        .ok_or_else(|| Error::Argument("model has no parameters".into()))?;
    let (worst_name, max_rel_err) = (worst.name.clone(), worst.rel_err);
    Ok(GradcheckReport {
        passed: max_rel_err < opts.tolerance,
        worst: worst_name,
        max_rel_err,
        tolerance: opts.tolerance,
        groups,
    })
}
