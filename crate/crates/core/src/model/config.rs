use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Bag-level pooling applied after the attention stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    /// Learned tanh attention over instances.
    #[default]
    Attention,
    Mean,
    Max,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WsdConfig {
    pub feature_dim: usize,
    pub heads: usize,
    /// Coarsest window grid side; the finer grids are 2× and 4× this.
    pub window_base: usize,
    pub landmarks: usize,
    pub pinv_iters: usize,
    pub serg_grid: usize,
    pub serg_reduction: usize,
    pub num_classes: usize,
    pub attention_hidden: usize,
    pub disable_wsda: bool,
    pub fixed_window_grid: Option<usize>,
    pub disable_serg: bool,
    pub pooling: Pooling,
}

impl Default for WsdConfig {
    fn default() -> Self {
        WsdConfig {
            feature_dim: 16,
            heads: 8,
            window_base: 4,
            landmarks: 64,
            pinv_iters: 6,
            serg_grid: 8,
            serg_reduction: 4,
            num_classes: 2,
            attention_hidden: 128,
            disable_wsda: false,
            fixed_window_grid: None,
            disable_serg: false,
            pooling: Pooling::Attention,
        }
    }
}

/// Named model variants: the full model, its ablations and the pooling
/// baselines.
pub const VARIANTS: [&str; 8] = [
    "full",
    "no-wsda",
    "fixwin8",
    "fixwin32",
    "no-serg",
    "no-wsda-serg",
    "mean-pool",
    "max-pool",
];

impl WsdConfig {
    pub fn with_feature_dim(mut self, f: usize) -> Self {
        self.feature_dim = f;
        self
    }

    /// Applies one of [`VARIANTS`] on top of `self`.
    pub fn variant(mut self, name: &str) -> Result<Self> {
        match name {
            "full" => {}
            "no-wsda" => self.disable_wsda = true,
            "fixwin8" => self.fixed_window_grid = Some(8),
            "fixwin32" => self.fixed_window_grid = Some(32),
            "no-serg" => self.disable_serg = true,
            "no-wsda-serg" => {
                self.disable_wsda = true;
                self.disable_serg = true;
            }
            "mean-pool" | "max-pool" => {
                self.disable_wsda = true;
                self.disable_serg = true;
                self.pooling = if name == "mean-pool" { Pooling::Mean } else { Pooling::Max };
            }
            other => {
                return Err(Error::Config(format!(
                    "unknown variant {other:?}; expected one of {}",
                    VARIANTS.join(", ")
                )))
            }
        }
        Ok(self)
    }

    /// Window grids applied after the Nyström stage, coarse to fine.
    pub fn window_grids(&self) -> Vec<usize> {
        if self.disable_wsda {
            return Vec::new();
        }
        match self.fixed_window_grid {
            Some(g) => vec![g],
            None => vec![self.window_base, 2 * self.window_base, 4 * self.window_base],
        }
    }

    /// Base for the sampler's padding rule. Sequences are padded to a
    /// multiple of `(4·base)²`, which must accommodate every window grid.
    pub fn sequence_base(&self) -> usize {
        match self.fixed_window_grid {
            Some(g) if g > 4 * self.window_base => g.div_ceil(4),
            _ => self.window_base,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.feature_dim / self.heads
    }

    pub fn serg_windows(&self) -> usize {
        self.serg_grid * self.serg_grid
    }

    pub fn serg_hidden(&self) -> usize {
        self.serg_windows() / self.serg_reduction
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.feature_dim == 0 || self.heads == 0 || self.feature_dim % self.heads != 0 {
            return bad(format!(
                "feature_dim {} must be a positive multiple of heads {}",
                self.feature_dim, self.heads
            ));
        }
        if self.num_classes < 2 {
            return bad("num_classes must be at least 2".into());
        }
        if self.window_base == 0 || self.landmarks == 0 || self.attention_hidden == 0 {
            return bad("window_base, landmarks and attention_hidden must be positive".into());
        }
        if self.pinv_iters == 0 {
            return bad("pinv_iters must be at least 1".into());
        }
        if self.serg_grid == 0 || self.serg_reduction == 0 || self.serg_windows() % self.serg_reduction != 0 {
            return bad(format!(
                "serg_grid² = {} must be divisible by serg_reduction {}",
                self.serg_windows(),
                self.serg_reduction
            ));
        }
        if self.fixed_window_grid.is_some() && self.disable_wsda {
            return bad("fixed_window_grid has no effect with disable_wsda".into());
        }
        if self.pooling != Pooling::Attention && !(self.disable_wsda && self.disable_serg) {
            return bad("mean/max pooling baselines run without WSDA and SERG".into());
        }
        let side = 4 * self.sequence_base();
        if let Some(g) = self.fixed_window_grid {
            if g == 0 || side % g != 0 {
                return bad(format!("fixed_window_grid {g} must divide {side}"));
            }
        }
        if !self.disable_serg && side % self.serg_grid != 0 {
            return bad(format!("serg_grid {} must divide {side}", self.serg_grid));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_variants() {
        let c = WsdConfig::default();
        c.validate().unwrap();
        assert_eq!(c.window_grids(), vec![4, 8, 16]);
        assert_eq!((c.serg_windows(), c.serg_hidden()), (64, 16));
        for v in VARIANTS {
            WsdConfig::default().variant(v).unwrap().validate().unwrap();
        }
        let f32 = WsdConfig::default().variant("fixwin32").unwrap();
        assert_eq!((f32.window_grids(), f32.sequence_base()), (vec![32], 8));
        assert!(WsdConfig::default().variant("nope").is_err());
    }

    #[test]
    fn rejects_inconsistent_configs() {
        let mut c = WsdConfig::default();
        c.disable_wsda = true;
        c.fixed_window_grid = Some(8);
        assert!(c.validate().is_err());
        let c = WsdConfig { feature_dim: 12, ..WsdConfig::default() };
        assert!(c.validate().is_err());
        let c = WsdConfig { serg_reduction: 3, ..WsdConfig::default() };
        assert!(c.validate().is_err());
        let c = WsdConfig { fixed_window_grid: Some(6), ..WsdConfig::default() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn json_round_trip() {
        let c = WsdConfig::default().variant("max-pool").unwrap();
        let s = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<WsdConfig>(&s).unwrap(), c);
        assert!(serde_json::from_str::<WsdConfig>(r#"{"bogus": 1}"#).is_err());
    }
}
