//! Training, evaluation, cross-validation and the memory benchmark.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use wsdmil_autograd::Graph;

use crate::bag::Bag;
use crate::error::{Error, Result};
use crate::metrics::{self, MeanStd};
use crate::model::{WsdConfig, WsdModel};
use crate::optim::{Adam, AdamConfig};
use crate::sampler::{self, build_sequence, check_alpha, kmeans, stratified_sample, Clustering, SampledSequence};
use crate::seeds::derive_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub folds: usize,
    pub seed: u64,
    /// Percentage of instances kept per cluster.
    pub alpha: f64,
    pub clusters: usize,
    /// Folds trained concurrently.
    pub jobs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-5,
            epochs: 100,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            folds: 5,
            seed: 0,
            alpha: 100.0,
            clusters: sampler::DEFAULT_CLUSTERS,
            jobs: 1,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.folds < 2 {
            return bad("folds must be at least 2");
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) || !(self.eps > 0.0) {
            return bad("adam betas must lie in [0, 1) and eps must be positive");
        }
        if self.clusters == 0 {
            return bad("clusters must be at least 1");
        }
        if self.jobs == 0 {
            return bad("jobs must be at least 1");
        }
        check_alpha(self.alpha).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Label-stratified fold id per bag: each class is shuffled and dealt
/// round-robin, continuing where the previous class stopped.
pub fn stratified_folds(labels: &[usize], folds: usize, seed: u64) -> Result<Vec<usize>> {
    if folds < 2 {
        return Err(Error::Argument("need at least 2 folds".into()));
    }
    if labels.len() < folds {
        return Err(Error::Argument(format!(
            "{} bags cannot fill {folds} folds",
            labels.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let mut out = vec![0; labels.len()];
    let mut next = 0;
    for members in by_class.values_mut() {
        members.shuffle(&mut rng);
        for &i in members.iter() {
            out[i] = next % folds;
            next += 1;
        }
    }
    Ok(out)
}

/// Per-bag clusterings computed once, then one stratified draw per bag and
/// fold.
pub struct BagSampler<'a> {
    bags: &'a [Bag],
    clusterings: Vec<Option<Clustering>>,
    alpha: f64,
    base: usize,
    seed: u64,
}

impl<'a> BagSampler<'a> {
    pub fn new(bags: &'a [Bag], alpha: f64, clusters: usize, base: usize, seed: u64) -> Result<Self> {
        check_alpha(alpha)?;
        let clusterings = bags
            .iter()
            .enumerate()
            .map(|(i, b)| {
                if alpha >= 100.0 {
                    Ok(None)
                } else {
                    let k = clusters.clamp(1, b.len());
                    kmeans(&b.embeddings, b.dim, k, derive_seed(seed, &[1, i as u64])).map(Some)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(BagSampler {
            bags,
            clusterings,
            alpha,
            base,
            seed,
        })
    }

    pub fn draw(&self, bag: usize, fold: usize) -> Result<SampledSequence> {
        let b = &self.bags[bag];
        let kept = match &self.clusterings[bag] {
            None => (0..b.len()).collect(),
            Some(c) => stratified_sample(c, self.alpha, derive_seed(self.seed, &[2, fold as u64, bag as u64]))?,
        };
        let mut seq = build_sequence(b, &kept, self.base)?;
        seq.alpha = self.alpha;
        Ok(seq)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Mean training loss per epoch.
    pub epoch_loss: Vec<f64>,
    pub peak_bytes: usize,
}

/// Batch-size-1 Adam training over `data` for `epochs`, shuffling the bag
/// order every epoch.
pub fn train_model(
    model: &mut WsdModel,
    data: &[(SampledSequence, usize)],
    epochs: usize,
    adam: AdamConfig,
    seed: u64,
) -> Result<TrainHistory> {
    if data.is_empty() {
        return Err(Error::Argument("no training bags".into()));
    }
    let mut opt = Adam::new(adam);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = TrainHistory {
        epoch_loss: Vec::with_capacity(epochs),
        peak_bytes: 0,
    };
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &i in &order {
            let (seq, label) = &data[i];
            let (loss, grads, peak) = model.loss_and_grads(seq, *label)?;
            if !loss.is_finite() {
                return Err(Error::Train("loss became non-finite".into()));
            }
            total += loss;
            history.peak_bytes = history.peak_bytes.max(peak);
            let items = model
                .param_slices_mut()
                .map(|(name, p)| {
                    let g = grads.get(name).map(Vec::as_slice).unwrap_or(&[]);
                    (name, p, g)
                })
                .collect();
            opt.step(items)?;
        }
        history.epoch_loss.push(total / data.len() as f64);
    }
    Ok(history)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub acc: f64,
    /// Undefined (null) when only one class is present.
    pub auc: Option<f64>,
    pub f1: f64,
    pub loss: f64,
    pub peak_bytes: usize,
    pub probs: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

pub fn evaluate(model: &WsdModel, data: &[(SampledSequence, usize)]) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::Argument("no bags to evaluate".into()));
    }
    let mut probs = Vec::with_capacity(data.len());
    let mut labels = Vec::with_capacity(data.len());
    let mut loss = 0.0;
    let mut peak = 0;
    for (seq, label) in data {
        let mut g = Graph::new();
        let out = model.forward(&mut g, seq, false)?;
        let l = g.cross_entropy(out.logits, *label)?;
        loss += g.value(l)[0];
        peak = peak.max(g.peak_bytes());
        probs.push(metrics::softmax(g.value(out.logits)));
        labels.push(*label);
    }
    let predicted: Vec<usize> = probs.iter().map(|p| metrics::argmax(p)).collect();
    Ok(Evaluation {
        acc: metrics::accuracy(&predicted, &labels),
        auc: metrics::auc(&probs, &labels),
        f1: metrics::f1(&predicted, &labels, model.config.num_classes),
        loss: loss / data.len() as f64,
        peak_bytes: peak,
        probs,
        labels,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub fold: usize,
    pub train_bags: usize,
    pub test_bags: usize,
    pub acc: f64,
    pub auc: Option<f64>,
    pub f1: f64,
    /// Max over the fold's training and evaluation passes.
    pub peak_bytes: usize,
    pub final_train_loss: f64,
}

/// Cross-validation summary: per-fold metrics plus mean and (population)
/// standard deviation across folds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub seed: u64,
    pub folds: Vec<FoldMetrics>,
    pub acc: MeanStd,
    /// Over folds where AUC is defined; null if none.
    pub auc: Option<MeanStd>,
    pub f1: MeanStd,
    pub peak_bytes: MeanStd,
    pub model: WsdConfig,
    pub train: TrainConfig,
}

impl FoldReport {
    pub fn from_folds(folds: Vec<FoldMetrics>, model: WsdConfig, train: TrainConfig) -> Result<Self> {
        let col = |f: &dyn Fn(&FoldMetrics) -> f64| folds.iter().map(f).collect::<Vec<f64>>();
        let none = || Error::Argument("no folds to summarize".into());
        let aucs: Vec<f64> = folds.iter().filter_map(|f| f.auc).collect();
        Ok(FoldReport {
            seed: train.seed,
            acc: MeanStd::of(&col(&|f| f.acc)).ok_or_else(none)?,
            auc: MeanStd::of(&aucs),
            f1: MeanStd::of(&col(&|f| f.f1)).ok_or_else(none)?,
            peak_bytes: MeanStd::of(&col(&|f| f.peak_bytes as f64)).ok_or_else(none)?,
            folds,
            model,
            train,
        })
    }
}

pub struct CvOutcome {
    pub report: FoldReport,
    /// Trained model per fold.
    pub models: Vec<WsdModel>,
}

fn run_fold(
    sampler: &BagSampler,
    labels: &[usize],
    fold_of: &[usize],
    fold: usize,
    tc: &TrainConfig,
    wc: &WsdConfig,
) -> Result<(FoldMetrics, WsdModel)> {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (i, &f) in fold_of.iter().enumerate() {
        let item = (sampler.draw(i, fold)?, labels[i]);
        if f == fold {
            test.push(item);
        } else {
            train.push(item);
        }
    }
    let mut model = WsdModel::new(wc.clone(), derive_seed(tc.seed, &[3, fold as u64]))?;
    let history = train_model(&mut model, &train, tc.epochs, tc.adam(), derive_seed(tc.seed, &[4, fold as u64]))?;
    let eval = evaluate(&model, &test)?;
    Ok((
        FoldMetrics {
            fold,
            train_bags: train.len(),
            test_bags: test.len(),
            acc: eval.acc,
            auc: eval.auc,
            f1: eval.f1,
            peak_bytes: history.peak_bytes.max(eval.peak_bytes),
            final_train_loss: *history.epoch_loss.last().expect("epochs >= 1"),
        },
        model,
    ))
}

/// Stratified k-fold cross-validation. Sampling draws are fixed per bag and
/// fold and applied to training and test bags alike.
pub fn run_cv(bags: &[Bag], tc: &TrainConfig, wc: &WsdConfig) -> Result<CvOutcome> {
    tc.validate()?;
    wc.validate()?;
    if let Some(b) = bags.iter().find(|b| b.label >= wc.num_classes) {
        return Err(Error::Data(format!(
            "bag {} has label {} but the model has {} classes",
            b.id, b.label, wc.num_classes
        )));
    }
    let labels: Vec<usize> = bags.iter().map(|b| b.label).collect();
    let fold_of = stratified_folds(&labels, tc.folds, derive_seed(tc.seed, &[0]))?;
    let sampler = BagSampler::new(bags, tc.alpha, tc.clusters, wc.sequence_base(), tc.seed)?;

    let jobs = tc.jobs.min(tc.folds);
    let mut results: Vec<Option<Result<(FoldMetrics, WsdModel)>>> = (0..tc.folds).map(|_| None).collect();
    if jobs <= 1 {
        for (fold, slot) in results.iter_mut().enumerate() {
            *slot = Some(run_fold(&sampler, &labels, &fold_of, fold, tc, wc));
        }
    } else {
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..jobs)
                .map(|j| {
                    let (sampler, labels, fold_of) = (&sampler, &labels, &fold_of);
                    s.spawn(move || {
                        (j..tc.folds)
                            .step_by(jobs)
                            .map(|fold| (fold, run_fold(sampler, labels, fold_of, fold, tc, wc)))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            for h in handles {
                for (fold, r) in h.join().expect("fold worker panicked") {
                    results[fold] = Some(r);
                }
            }
        });
    }
    let mut folds = Vec::with_capacity(tc.folds);
    let mut models = Vec::with_capacity(tc.folds);
    for r in results {
        let (m, model) = r.expect("every fold ran")?;
        folds.push(m);
        models.push(model);
    }
    Ok(CvOutcome {
        report: FoldReport::from_folds(folds, wc.clone(), tc.clone())?,
        models,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub alpha: f64,
    pub peak_bytes: usize,
    /// Relative to the alpha = 100 figure.
    pub ratio: f64,
}

/// Peak live tensor bytes of one forward+backward pass, maximized over
/// bags, for each sampling percentage.
pub fn bench_memory(bags: &[Bag], alphas: &[f64], wc: &WsdConfig, clusters: usize, seed: u64) -> Result<Vec<BenchRow>> {
    if alphas.is_empty() {
        return Err(Error::Argument("no sampling percentages given".into()));
    }
    for &a in alphas {
        check_alpha(a)?;
    }
    if bags.is_empty() {
        return Err(Error::Argument("no bags to benchmark".into()));
    }
    let model = WsdModel::new(wc.clone(), seed)?;
    let measure = |alpha: f64| -> Result<usize> {
        let mut peak = 0;
        for (i, bag) in bags.iter().enumerate() {
            let seq = sampler::sample_bag(bag, clusters, alpha, wc.sequence_base(), derive_seed(seed, &[5, i as u64]))?;
            let label = bag.label.min(wc.num_classes - 1);
            let (_, _, p) = model.loss_and_grads(&seq, label)?;
            peak = peak.max(p);
        }
        Ok(peak)
    };
    let mut measured: Vec<(f64, usize)> = Vec::new();
    let lookup = |alpha: f64, measured: &mut Vec<(f64, usize)>| -> Result<usize> {
        if let Some(&(_, p)) = measured.iter().find(|(a, _)| *a == alpha) {
            return Ok(p);
        }
        let p = measure(alpha)?;
        measured.push((alpha, p));
        Ok(p)
    };
    let full = lookup(100.0, &mut measured)?;
    alphas
        .iter()
        .map(|&alpha| {
            let peak = lookup(alpha, &mut measured)?;
            Ok(BenchRow {
                alpha,
                peak_bytes: peak,
                ratio: peak as f64 / full as f64,
            })
        })
        .collect()
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from("alpha,peak_bytes,ratio\n");
    for r in rows {
        s.push_str(&format!("{},{},{:.6}\n", r.alpha, r.peak_bytes, r.ratio));
    }
    s
}

/// True when the ratio never increases as alpha decreases down the table.
pub fn ratios_monotone(rows: &[BenchRow]) -> bool {
    let mut sorted = rows.to_vec();
    sorted.sort_by(|a, b| b.alpha.total_cmp(&a.alpha));
    sorted.windows(2).all(|w| w[1].ratio <= w[0].ratio)
}
