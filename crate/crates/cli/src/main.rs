//! `wsdmil`: generate synthetic bags, subsample them, train and evaluate
//! models, benchmark memory and check gradients.
//!
//! Exit codes: 0 success, 1 a check failed, 2 usage or config error.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use wsdmil::bag::{load_dataset, write_bag, Bag, BagEntry, BagFormat, DatasetManifest};
use wsdmil::checkpoint::{load_checkpoint, save_checkpoint};
use wsdmil::gradcheck::{gradcheck_model, GradcheckOptions};
use wsdmil::model::WsdModel;
use wsdmil::sampler::sample_bag;
use wsdmil::seeds::derive_seed;
use wsdmil::synth::{generate, write_dataset, SynthSpec};
use wsdmil::train::{bench_csv, bench_memory, evaluate, ratios_monotone, run_cv};

use config::{Failure, ModelFlags, RunConfig, SampleFlags, TrainFlags};

#[derive(Parser)]
#[command(name = "wsdmil", version, about = "Window-scale-decay MIL experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run config; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset (bags, manifest, instance ground truth).
    Generate {
        /// Synthetic dataset spec (JSON); replaces the config's `synth` section.
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        num_bags: Option<usize>,
        #[arg(long)]
        grid_side: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Cluster and subsample every bag of a dataset into a new dataset.
    Sample {
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        sampling: SampleFlags,
        #[command(flatten)]
        common: Common,
    },
    /// Cross-validate a model; writes report.json and one checkpoint per fold.
    Train {
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        sampling: SampleFlags,
        #[command(flatten)]
        training: TrainFlags,
        #[command(flatten)]
        model: ModelFlags,
        #[command(flatten)]
        common: Common,
    },
    /// Score a checkpoint on every bag of a dataset.
    Eval {
        checkpoint: PathBuf,
        manifest: PathBuf,
        /// Output JSON file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        sampling: SampleFlags,
        #[command(flatten)]
        common: Common,
    },
    /// Peak memory of one training step per sampling percentage, as CSV.
    Bench {
        manifest: PathBuf,
        /// Comma-separated sampling percentages.
        #[arg(long, value_delimiter = ',', default_value = "100,60,20")]
        alphas: Vec<String>,
        /// Output CSV file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        clusters: Option<usize>,
        #[command(flatten)]
        model: ModelFlags,
        #[command(flatten)]
        common: Common,
    },
    /// Compare analytic and finite-difference gradients on a random bag.
    Gradcheck {
        #[arg(long, default_value_t = 64)]
        instances: usize,
        /// Scale of the random perturbation applied to the initial weights.
        #[arg(long, default_value_t = 0.05)]
        perturb: f64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        /// Debug hook: corrupt the analytic gradient of this parameter.
        #[arg(long, hide = true)]
        corrupt: Option<String>,
        /// Output JSON file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        model: ModelFlags,
        #[command(flatten)]
        common: Common,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check(msg)) => {
            eprintln!("check failed: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn load_config(common: &Common) -> Result<RunConfig, Failure> {
    let mut rc = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if common.seed.is_some() {
        rc.seed = common.seed;
    }
    Ok(rc)
}

fn write_json(value: &impl Serialize, out: Option<&Path>) -> Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(value).map_err(wsdmil::Error::from)?;
    text.push('\n');
    write_text(&text, out)
}

fn write_text(text: &str, out: Option<&Path>) -> Result<(), Failure> {
    match out {
        Some(path) => fs::write(path, text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| Failure::Usage(format!("{}: {e}", dir.display())))
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Generate {
            spec,
            out,
            num_bags,
            grid_side,
            common,
        } => {
            let rc = load_config(&common)?;
            let mut synth = match spec {
                Some(path) => {
                    let text = fs::read_to_string(&path)
                        .map_err(|e| Failure::Usage(format!("spec file {}: {e}", path.display())))?;
                    serde_json::from_str::<SynthSpec>(&text)
                        .map_err(|e| Failure::Usage(format!("spec file {}: {e}", path.display())))?
                }
                None => rc.synth.clone(),
            };
            synth.seed = rc.seed.unwrap_or(synth.seed);
            synth.num_bags = num_bags.unwrap_or(synth.num_bags);
            synth.grid_side = grid_side.unwrap_or(synth.grid_side);
            let data = generate(&synth)?;
            create_dir(&out)?;
            let manifest = write_dataset(&data, &synth, &out)?;
            let positives = data.bags.iter().filter(|b| b.label == 1).count();
            eprintln!(
                "wrote {} bags ({positives} positive) to {} with seed {}",
                manifest.bags.len(),
                out.display(),
                synth.seed
            );
            write_json(&synth, Some(&out.join("spec.json")))
        }
        Command::Sample {
            manifest,
            out,
            sampling,
            common,
        } => {
            let mut rc = load_config(&common)?;
            sampling.apply(&mut rc);
            let tc = rc.train_config();
            let dataset = load_dataset(&manifest)?;
            create_dir(&out.join("bags"))?;
            let mut entries = Vec::new();
            let mut kept_total = 0;
            for (i, bag) in dataset.bags.iter().enumerate() {
                let seq = sample_bag(bag, tc.clusters, tc.alpha, 4, derive_seed(tc.seed, &[i as u64]))?;
                let mut kept = seq.kept_indices;
                kept.sort_unstable();
                kept_total += kept.len();
                let sub = subset(bag, &kept)?;
                let rel = format!("bags/{}.wsdb", bag.id);
                write_bag(&sub, out.join(&rel), BagFormat::Wsdb)?;
                entries.push(BagEntry { path: rel, label: bag.label });
            }
            let sampled = DatasetManifest {
                num_classes: dataset.manifest.num_classes,
                feature_dim: dataset.manifest.feature_dim,
                bags: entries,
                seed: Some(tc.seed),
            };
            sampled.save(out.join("manifest.json"))?;
            let total: usize = dataset.bags.iter().map(Bag::len).sum();
            eprintln!(
                "kept {kept_total} of {total} instances at alpha {} (clusters {}, seed {})",
                tc.alpha, tc.clusters, tc.seed
            );
            Ok(())
        }
        Command::Train {
            manifest,
            out,
            sampling,
            training,
            model,
            common,
        } => {
            let mut rc = load_config(&common)?;
            sampling.apply(&mut rc);
            training.apply(&mut rc);
            let dataset = load_dataset(&manifest)?;
            let wc = rc.model_config(&model, Some(&dataset))?;
            let tc = rc.train_config();
            let outcome = run_cv(&dataset.bags, &tc, &wc)?;
            create_dir(&out)?;
            for (fold, m) in outcome.models.iter().enumerate() {
                save_checkpoint(m, tc.seed, out.join(format!("fold_{fold}.wsdc")))?;
            }
            write_json(&outcome.report, Some(&out.join("report.json")))?;
            let r = &outcome.report;
            let auc = r.auc.map_or("n/a".to_string(), |a| format!("{:.4} ± {:.4}", a.mean, a.std));
            eprintln!(
                "seed {}: acc {:.4} ± {:.4}, auc {auc}, f1 {:.4} ± {:.4}",
                r.seed, r.acc.mean, r.acc.std, r.f1.mean, r.f1.std
            );
            Ok(())
        }
        Command::Eval {
            checkpoint,
            manifest,
            out,
            sampling,
            common,
        } => {
            let mut rc = load_config(&common)?;
            sampling.apply(&mut rc);
            let tc = rc.train_config();
            let (model, header) = load_checkpoint(&checkpoint)?;
            let dataset = load_dataset(&manifest)?;
            let config = &model.config;
            if dataset.manifest.feature_dim != config.feature_dim {
                return Err(Failure::Usage(format!(
                    "checkpoint expects {} features, dataset has {}",
                    config.feature_dim, dataset.manifest.feature_dim
                )));
            }
            let mut data = Vec::with_capacity(dataset.bags.len());
            for (i, bag) in dataset.bags.iter().enumerate() {
                let seed = derive_seed(tc.seed, &[i as u64]);
                let seq = sample_bag(bag, tc.clusters, tc.alpha, config.sequence_base(), seed)?;
                data.push((seq, bag.label));
            }
            let eval = evaluate(&model, &data)?;
            let report = EvalReport {
                seed: tc.seed,
                checkpoint_seed: header.seed,
                alpha: tc.alpha,
                clusters: tc.clusters,
                bags: data.len(),
                acc: eval.acc,
                auc: eval.auc,
                f1: eval.f1,
                loss: eval.loss,
                peak_bytes: eval.peak_bytes,
            };
            write_json(&report, out.as_deref())
        }
        Command::Bench {
            manifest,
            alphas,
            out,
            clusters,
            model,
            common,
        } => {
            let rc = load_config(&common)?;
            let alphas = parse_alphas(&alphas)?;
            let dataset = load_dataset(&manifest)?;
            let wc = rc.model_config(&model, Some(&dataset))?;
            let tc = rc.train_config();
            let rows = bench_memory(&dataset.bags, &alphas, &wc, clusters.unwrap_or(tc.clusters), tc.seed)?;
            let monotone = ratios_monotone(&rows);
            let mut csv = bench_csv(&rows);
            csv.push_str(&format!("# seed={}\n# ratios_monotone={monotone}\n", tc.seed));
            write_text(&csv, out.as_deref())?;
            if monotone {
                Ok(())
            } else {
                Err(Failure::Check("peak-memory ratio increased as alpha decreased".into()))
            }
        }
        Command::Gradcheck {
            instances,
            perturb,
            tolerance,
            corrupt,
            out,
            model,
            common,
        } => {
            let rc = load_config(&common)?;
            let wc = rc.model_config(&model, None)?;
            let seed = rc.train_config().seed;
            let bag = random_bag(instances, wc.feature_dim, seed)?;
            let seq = sample_bag(&bag, 1, 100.0, wc.sequence_base(), seed)?;
            let net = WsdModel::new(wc.clone(), seed)?.perturbed(perturb, derive_seed(seed, &[1]));
            let opts = GradcheckOptions {
                tolerance,
                corrupt,
                ..GradcheckOptions::default()
            };
            let report = gradcheck_model(&net, &seq, bag.label, &opts)?;
            write_json(
                &GradcheckOutput {
                    seed,
                    instances,
                    report: &report,
                },
                out.as_deref(),
            )?;
            eprintln!(
                "worst parameter {} (rel. err {:.3e}, tolerance {:.0e})",
                report.worst, report.max_rel_err, report.tolerance
            );
            if report.passed {
                Ok(())
            } else {
                Err(Failure::Check(format!("gradient mismatch in {}", report.worst)))
            }
        }
    }
}

#[derive(Serialize)]
struct EvalReport {
    seed: u64,
    checkpoint_seed: u64,
    alpha: f64,
    clusters: usize,
    bags: usize,
    acc: f64,
    auc: Option<f64>,
    f1: f64,
    loss: f64,
    peak_bytes: usize,
}

#[derive(Serialize)]
struct GradcheckOutput<'a> {
    seed: u64,
    instances: usize,
    report: &'a wsdmil::gradcheck::GradcheckReport,
}

fn parse_alphas(raw: &[String]) -> Result<Vec<f64>, Failure> {
    let alphas: Vec<f64> = raw
        .iter()
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| Failure::Usage(format!("bad sampling percentage {s:?}"))))
        .collect::<Result<_, _>>()?;
    if alphas.is_empty() {
        return Err(Failure::Usage("--alphas needs at least one value".into()));
    }
    Ok(alphas)
}

fn subset(bag: &Bag, kept: &[usize]) -> wsdmil::Result<Bag> {
    let embeddings = kept.iter().flat_map(|&i| bag.row(i).iter().copied()).collect();
    let coords = kept.iter().map(|&i| bag.coords[i]).collect();
    Bag::new(bag.id.clone(), embeddings, bag.dim, coords, bag.label)
}

/// A positive synthetic bag on the smallest square grid holding
/// `instances` tiles, truncated to exactly that many.
fn random_bag(instances: usize, dim: usize, seed: u64) -> Result<Bag, Failure> {
    if instances == 0 {
        return Err(Failure::Usage("--instances must be positive".into()));
    }
    let side = (instances as f64).sqrt().ceil() as usize;
    let spec = SynthSpec {
        num_bags: 1,
        grid_side: side.max(3),
        feature_dim: dim,
        positive_fraction: 1.0,
        blob_radii: vec![1],
        seed,
        ..SynthSpec::default()
    };
    let bag = generate(&spec)?.bags.remove(0);
    let n = instances.min(bag.len());
    Ok(Bag::new(
        bag.id,
        bag.embeddings[..n * dim].to_vec(),
        dim,
        bag.coords[..n].to_vec(),
        bag.label,
    )?)
}
