//! The WSD-MIL model: Nyström global attention, window attention on
//! successively finer grids, a region gate, and attention pooling into a
//! linear classifier.

mod config;
pub mod layers;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wsdmil_autograd::{pinv_newton_schulz, Graph, Tensor, Var};

pub use config::{Pooling, WsdConfig, VARIANTS};
use layers::{AggregatorParams, ClassifierParams, NystromParams, SergParams, WindowParams};

use crate::error::{Error, Result};
use crate::sampler::SampledSequence;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform on ±√(6 / (fan_in + fan_out)).
    Xavier { fan_in: usize, fan_out: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

fn spec(name: impl Into<String>, shape: &[usize], init: Init) -> ParamSpec {
    ParamSpec {
        name: name.into(),
        shape: shape.to_vec(),
        init,
    }
}

fn xavier(fan_in: usize, fan_out: usize) -> Init {
    Init::Xavier { fan_in, fan_out }
}

/// Parameters the configuration actually uses, in a fixed order.
pub fn parameter_specs(c: &WsdConfig) -> Vec<ParamSpec> {
    let f = c.feature_dim;
    let mut out = Vec::new();
    if !c.disable_wsda {
        out.push(spec("nystrom.qkv", &[f, 3 * f], xavier(f, 3 * f)));
        out.push(spec("nystrom.out.weight", &[f, f], xavier(f, f)));
        out.push(spec("nystrom.out.bias", &[f], Init::Zeros));
        for grid in c.window_grids() {
            let p = format!("window{grid}");
            out.push(spec(format!("{p}.qkv"), &[f, 3 * f], xavier(f, 3 * f)));
            out.push(spec(format!("{p}.conv"), &[c.heads, 3], Init::Zeros));
            for (i, norm) in ["norm1", "norm2"].iter().enumerate() {
                out.push(spec(format!("{p}.{norm}.gain"), &[f], Init::Ones));
                out.push(spec(format!("{p}.{norm}.bias"), &[f], Init::Zeros));
                out.push(spec(format!("{p}.fc{}.weight", i + 1), &[f, f], xavier(f, f)));
                out.push(spec(format!("{p}.fc{}.bias", i + 1), &[f], Init::Zeros));
            }
        }
    }
    if !c.disable_serg {
        let (w, h) = (c.serg_windows(), c.serg_hidden());
        out.push(spec("serg.fc1.weight", &[h, w], xavier(w, h)));
        out.push(spec("serg.fc1.bias", &[h], Init::Zeros));
        out.push(spec("serg.fc2.weight", &[w, h], xavier(h, w)));
        out.push(spec("serg.fc2.bias", &[w], Init::Zeros));
    }
    if c.pooling == Pooling::Attention {
        let a = c.attention_hidden;
        out.push(spec("aggregator.v", &[a, f], xavier(f, a)));
        out.push(spec("aggregator.w", &[a], xavier(a, 1)));
    }
    out.push(spec("classifier.weight", &[c.num_classes, f], xavier(f, c.num_classes)));
    out.push(spec("classifier.bias", &[c.num_classes], Init::Zeros));
    out
}

/// Graph handles for every parameter of one pass.
#[derive(Debug, Clone, Default)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Argument(format!("model has no parameter {name:?}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    fn window(&self, grid: usize) -> Result<WindowParams> {
        let n = |s: &str| self.get(&format!("window{grid}.{s}"));
        Ok(WindowParams {
            qkv: n("qkv")?,
            conv: n("conv")?,
            norm1_gain: n("norm1.gain")?,
            norm1_bias: n("norm1.bias")?,
            fc1_weight: n("fc1.weight")?,
            fc1_bias: n("fc1.bias")?,
            norm2_gain: n("norm2.gain")?,
            norm2_bias: n("norm2.bias")?,
            fc2_weight: n("fc2.weight")?,
            fc2_bias: n("fc2.bias")?,
        })
    }
}

/// Handles produced by one forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    /// `[C]`.
    pub logits: Var,
    pub params: BoundParams,
    /// Attention weights over real instances, for attention pooling.
    pub attention: Option<Var>,
    /// Region gates, when the gate is enabled.
    pub gates: Option<Var>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WsdModel {
    pub config: WsdConfig,
    params: BTreeMap<String, Tensor>,
}

impl WsdModel {
    /// Validates the config and initializes parameters from `seed`.
    pub fn new(config: WsdConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = BTreeMap::new();
        for s in parameter_specs(&config) {
            let t = match s.init {
                Init::Zeros => Tensor::zeros(&s.shape),
                Init::Ones => Tensor::ones(&s.shape),
                Init::Xavier { fan_in, fan_out } => {
                    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    Tensor::from_fn(&s.shape, |_| rng.random_range(-a..a))
                }
            };
            params.insert(s.name, t);
        }
        Ok(WsdModel { config, params })
    }

    /// Rebuilds a model from stored tensors, checking names and shapes
    /// against the config.
    pub fn from_parts(config: WsdConfig, params: BTreeMap<String, Tensor>) -> Result<Self> {
        config.validate()?;
        let specs = parameter_specs(&config);
        if specs.len() != params.len() {
            return Err(Error::Config(format!(
                "config expects {} parameters, got {}",
                specs.len(),
                params.len()
            )));
        }
        for s in &specs {
            match params.get(&s.name) {
                Some(t) if t.shape() == s.shape.as_slice() => {
                    if !t.is_finite() {
                        return Err(Error::Data(format!("parameter {} is not finite", s.name)));
                    }
                }
                Some(t) => {
                    return Err(Error::Config(format!(
                        "parameter {} has shape {:?}, expected {:?}",
                        s.name,
                        t.shape(),
                        s.shape
                    )))
                }
                None => return Err(Error::Config(format!("missing parameter {}", s.name))),
            }
        }
        Ok(WsdModel { config, params })
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    /// Mutable access to one parameter's values.
    pub fn param_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        self.params.get_mut(name).map(|t| t.data_mut())
    }

    pub fn param_slices_mut(&mut self) -> impl Iterator<Item = (&str, &mut [f64])> {
        self.params.iter_mut().map(|(k, t)| (k.as_str(), t.data_mut()))
    }

    /// Copy with uniform noise in `±scale` added to every parameter, so
    /// zero-initialized ones take generic values.
    pub fn perturbed(&self, scale: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = self.clone();
        for (_, p) in out.param_slices_mut() {
            p.iter_mut().for_each(|v| *v += rng.random_range(-scale..scale));
        }
        out
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Records every parameter as a leaf; `trainable` controls whether
    /// gradients flow to them.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundParams {
        let vars = self
            .params
            .iter()
            .map(|(name, t)| {
                let v = if trainable {
                    g.leaf(&t.clone().with_grad())
                } else {
                    g.constant(t.clone())
                };
                (name.clone(), v)
            })
            .collect();
        BoundParams { vars }
    }

    fn input(&self, g: &mut Graph, seq: &SampledSequence) -> Result<Var> {
        let f = seq.feature_dim();
        if f != self.config.feature_dim {
            return Err(Error::Argument(format!(
                "sequence has {f} features, model expects {}",
                self.config.feature_dim
            )));
        }
        if seq.mask.len() != seq.padded_len() || seq.features.shape() != [1, seq.padded_len(), f] {
            return Err(Error::Argument("sequence features and mask disagree".into()));
        }
        Ok(g.constant(seq.features.clone().reshape(&[seq.padded_len(), f])?))
    }

    /// Nyström stage followed by the window stages; identity when the WSDA
    /// module is disabled.
    pub fn wsda_forward(&self, g: &mut Graph, bound: &BoundParams, x: Var, mask: &[bool]) -> Result<Var> {
        let c = &self.config;
        if c.disable_wsda {
            return Ok(x);
        }
        let nys = NystromParams {
            qkv: bound.get("nystrom.qkv")?,
            out_weight: bound.get("nystrom.out.weight")?,
            out_bias: bound.get("nystrom.out.bias")?,
        };
        let iters = c.pinv_iters;
        let pinv = move |g: &mut Graph, a: Var| -> Result<Var> { Ok(pinv_newton_schulz(g, a, iters)?) };
        let mut h = layers::nystrom_attention(g, x, mask, c.landmarks, &pinv, &nys)?;
        for grid in c.window_grids() {
            h = layers::window_attention(g, h, mask, grid, c.heads, &bound.window(grid)?)?;
        }
        Ok(h)
    }

    pub fn serg_forward(
        &self,
        g: &mut Graph,
        bound: &BoundParams,
        x: Var,
        mask: &[bool],
    ) -> Result<(Var, Option<Var>)> {
        if self.config.disable_serg {
            return Ok((x, None));
        }
        let p = SergParams {
            fc1_weight: bound.get("serg.fc1.weight")?,
            fc1_bias: bound.get("serg.fc1.bias")?,
            fc2_weight: bound.get("serg.fc2.weight")?,
            fc2_bias: bound.get("serg.fc2.bias")?,
        };
        let (out, gates) = layers::serg_forward(g, x, mask, self.config.serg_grid, &p)?;
        Ok((out, Some(gates)))
    }

    pub fn aggregate_and_classify(
        &self,
        g: &mut Graph,
        bound: &BoundParams,
        x: Var,
        mask: &[bool],
    ) -> Result<(Var, Option<Var>)> {
        let agg = if self.config.pooling == Pooling::Attention {
            Some(AggregatorParams {
                v: bound.get("aggregator.v")?,
                w: bound.get("aggregator.w")?,
            })
        } else {
            None
        };
        let (bag, attention) = layers::pool(g, x, mask, self.config.pooling, agg.as_ref())?;
        let cls = ClassifierParams {
            weight: bound.get("classifier.weight")?,
            bias: bound.get("classifier.bias")?,
        };
        Ok((layers::classify(g, bag, &cls)?, attention))
    }

    pub fn forward(&self, g: &mut Graph, seq: &SampledSequence, trainable: bool) -> Result<Forward> {
        let x = self.input(g, seq)?;
        let bound = self.bind(g, trainable);
        let h = self.wsda_forward(g, &bound, x, &seq.mask)?;
        let (h, gates) = self.serg_forward(g, &bound, h, &seq.mask)?;
        let (logits, attention) = self.aggregate_and_classify(g, &bound, h, &seq.mask)?;
        Ok(Forward {
            logits,
            params: bound,
            attention,
            gates,
        })
    }

    /// Logits for one sequence, without gradient tracking.
    pub fn predict(&self, seq: &SampledSequence) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, seq, false)?;
        Ok(g.value(out.logits).to_vec())
    }

    /// One forward+backward pass of the cross-entropy loss. Returns the
    /// loss, per-parameter gradients and the pass's peak live bytes.
    pub fn loss_and_grads(&self, seq: &SampledSequence, label: usize) -> Result<(f64, BTreeMap<String, Vec<f64>>, usize)> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, seq, true)?;
        let loss = g.cross_entropy(out.logits, label)?;
        g.backward(loss)?;
        let grads = out
            .params
            .iter()
            .map(|(name, v)| {
                let grad = g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; g.value(v).len()]);
                (name.to_string(), grad)
            })
            .collect();
        Ok((g.value(loss)[0], grads, g.peak_bytes()))
    }

    /// Loss value only, for finite differences.
    pub fn loss(&self, seq: &SampledSequence, label: usize) -> Result<f64> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, seq, false)?;
        let loss = g.cross_entropy(out.logits, label)?;
        Ok(g.value(loss)[0])
    }
}
