//! Run configuration: a JSON file with optional sections, overridden by
//! command-line flags.

use std::fs;
use std::path::Path;

use clap::Args;
use serde::{Deserialize, Serialize};
use wsdmil::bag::Dataset;
use wsdmil::model::{Pooling, WsdConfig};
use wsdmil::synth::SynthSpec;
use wsdmil::train::TrainConfig;

pub enum Failure {
    /// A check ran and did not pass.
    Check(String),
    /// Bad flags, config or input files.
    Usage(String),
}

impl From<wsdmil::Error> for Failure {
    fn from(e: wsdmil::Error) -> Self {
        match e {
            wsdmil::Error::Train(_) | wsdmil::Error::Tensor(_) => Failure::Check(e.to_string()),
            _ => Failure::Usage(e.to_string()),
        }
    }
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Overrides the seeds inside `synth` and `train`.
    pub seed: Option<u64>,
    /// Named variant applied on top of `model`.
    pub variant: Option<String>,
    pub synth: SynthSpec,
    pub train: TrainConfig,
    pub model: WsdConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text =
            fs::read_to_string(path).map_err(|e| Failure::Usage(format!("config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("config {}: {e}", path.display())))
    }

    pub fn train_config(&self) -> TrainConfig {
        let mut tc = self.train.clone();
        tc.seed = self.seed.unwrap_or(tc.seed);
        tc
    }

    /// Model config after the variant and flags are applied. Feature width
    /// and class count follow the dataset when one is given.
    pub fn model_config(&self, flags: &ModelFlags, dataset: Option<&Dataset>) -> Result<WsdConfig, Failure> {
        let mut wc = self.model.clone();
        if let Some(d) = dataset {
            wc.feature_dim = d.manifest.feature_dim;
            wc.num_classes = d.manifest.num_classes;
        }
        if let Some(v) = flags.variant.as_ref().or(self.variant.as_ref()) {
            wc = wc.variant(v)?;
        }
        if flags.no_wsda {
            wc.disable_wsda = true;
        }
        if flags.no_serg {
            wc.disable_serg = true;
        }
        if flags.fix_win.is_some() {
            wc.fixed_window_grid = flags.fix_win;
        }
        if let Some(p) = flags.pooling {
            wc.pooling = p;
        }
        if let Some(m) = flags.landmarks {
            wc.landmarks = m;
        }
        wc.validate()?;
        Ok(wc)
    }
}

#[derive(Args)]
pub struct SampleFlags {
    /// Percentage of instances kept per cluster.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// k-means clusters per bag.
    #[arg(long)]
    pub clusters: Option<usize>,
}

impl SampleFlags {
    pub fn apply(&self, rc: &mut RunConfig) {
        if let Some(a) = self.alpha {
            rc.train.alpha = a;
        }
        if let Some(k) = self.clusters {
            rc.train.clusters = k;
        }
    }
}

#[derive(Args)]
pub struct TrainFlags {
    #[arg(long)]
    pub folds: Option<usize>,
    /// Folds trained concurrently.
    #[arg(long)]
    pub jobs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

impl TrainFlags {
    pub fn apply(&self, rc: &mut RunConfig) {
        let t = &mut rc.train;
        t.folds = self.folds.unwrap_or(t.folds);
        t.jobs = self.jobs.unwrap_or(t.jobs);
        t.lr = self.lr.unwrap_or(t.lr);
        t.epochs = self.epochs.unwrap_or(t.epochs);
    }
}

#[derive(Args)]
pub struct ModelFlags {
    /// full, no-wsda, fixwin8, fixwin32, no-serg, no-wsda-serg, mean-pool or max-pool.
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long)]
    pub no_wsda: bool,
    #[arg(long)]
    pub no_serg: bool,
    /// Replace the multi-scale windows with one fixed grid of this side.
    #[arg(long)]
    pub fix_win: Option<usize>,
    #[arg(long, value_parser = parse_pooling)]
    pub pooling: Option<Pooling>,
    #[arg(long)]
    pub landmarks: Option<usize>,
}

fn parse_pooling(s: &str) -> Result<Pooling, String> {
    match s {
        "attention" => Ok(Pooling::Attention),
        "mean" => Ok(Pooling::Mean),
        "max" => Ok(Pooling::Max),
        _ => Err(format!("expected attention, mean or max, got {s:?}")),
    }
}
