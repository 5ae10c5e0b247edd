//! Synthetic slides: Gaussian background instances on a square patch grid,
//! and in positive slides one disk-shaped tumor region whose instances are
//! shifted along a fixed unit direction.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::bag::{encode_wsdb, Bag, BagEntry, DatasetManifest};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub num_bags: usize,
    /// The patch grid is `grid_side × grid_side`, one instance per cell.
    pub grid_side: usize,
    pub feature_dim: usize,
    pub positive_fraction: f64,
    /// Candidate tumor radii in patch units; one is drawn per positive bag.
    pub blob_radii: Vec<usize>,
    pub noise_std: f64,
    /// Shift of tumor instances along the unit direction.
    pub separation: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            num_bags: 100,
            grid_side: 24,
            feature_dim: 16,
            positive_fraction: 0.5,
            blob_radii: vec![2, 4, 8],
            noise_std: 1.0,
            separation: 3.0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Argument(m));
        if self.num_bags == 0 || self.feature_dim == 0 {
            return bad("num_bags and feature_dim must be positive".into());
        }
        if self.grid_side < 4 {
            return bad(format!("grid_side must be at least 4, got {}", self.grid_side));
        }
        if !(0.0..=1.0).contains(&self.positive_fraction) {
            return bad("positive_fraction must lie in [0, 1]".into());
        }
        if !(self.separation > 0.0 && self.separation.is_finite()) || !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad("separation must be positive and noise_std non-negative".into());
        }
        if self.positive_fraction > 0.0 && self.blob_radii.is_empty() {
            return bad("positive bags need at least one blob radius".into());
        }
        for &r in &self.blob_radii {
            if r == 0 {
                return bad("blob radii must be at least 1".into());
            }
            if 2 * r + 1 > self.grid_side {
                return bad(format!("blob radius {r} does not fit a {0}×{0} grid", self.grid_side));
            }
        }
        Ok(())
    }

    /// The tumor shift direction: the normalized all-ones vector.
    pub fn direction(&self) -> Vec<f64> {
        vec![1.0 / (self.feature_dim as f64).sqrt(); self.feature_dim]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub bags: Vec<Bag>,
    /// Per bag, per instance: inside the tumor region.
    pub tumor: Vec<Vec<bool>>,
}

pub fn bag_id(i: usize) -> String {
    format!("bag_{i:03}")
}

pub fn generate(spec: &SynthSpec) -> Result<SynthDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let positives = (spec.positive_fraction * spec.num_bags as f64).round() as usize;
    let mut labels: Vec<usize> = (0..spec.num_bags).map(|i| usize::from(i < positives)).collect();
    labels.shuffle(&mut rng);

    let side = spec.grid_side as i32;
    let f = spec.feature_dim;
    let u = spec.direction();
    let coords: Vec<(i32, i32)> = (0..side).flat_map(|r| (0..side).map(move |c| (r, c))).collect();
    let mut bags = Vec::with_capacity(spec.num_bags);
    let mut tumor = Vec::with_capacity(spec.num_bags);
    for (i, &label) in labels.iter().enumerate() {
        let mut inside = vec![false; coords.len()];
        if label == 1 {
            let r = spec.blob_radii[rng.random_range(0..spec.blob_radii.len())] as i32;
            let (cr, cc) = (rng.random_range(0..side), rng.random_range(0..side));
            for (j, &(row, col)) in coords.iter().enumerate() {
                let (dr, dc) = (row - cr, col - cc);
                inside[j] = dr * dr + dc * dc <= r * r;
            }
        }
        let mut emb = Vec::with_capacity(coords.len() * f);
        for &t in &inside {
            for &uk in &u {
                let noise: f64 = rng.sample(StandardNormal);
                let v = spec.noise_std * noise + if t { spec.separation * uk } else { 0.0 };
                // stored as f32 on disk; keep memory and disk identical
                emb.push(v as f32 as f64);
            }
        }
        bags.push(Bag::new(bag_id(i), emb, f, coords.clone(), label)?);
        tumor.push(inside);
    }
    Ok(SynthDataset { bags, tumor })
}

/// Writes `bags/<id>.wsdb`, `manifest.json` and `ground_truth.csv`
/// (`bag_id,instance_index,is_tumor`) under `dir`.
pub fn write_dataset(data: &SynthDataset, spec: &SynthSpec, dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    let dir = dir.as_ref();
    let bag_dir = dir.join("bags");
    fs::create_dir_all(&bag_dir).map_err(|e| Error::io(&bag_dir, e))?;
    let mut entries = Vec::with_capacity(data.bags.len());
    let mut truth = String::from("bag_id,instance_index,is_tumor\n");
    for (bag, inside) in data.bags.iter().zip(&data.tumor) {
        let rel = format!("bags/{}.wsdb", bag.id);
        let path = dir.join(&rel);
        fs::write(&path, encode_wsdb(bag)?).map_err(|e| Error::io(&path, e))?;
        entries.push(BagEntry { path: rel, label: bag.label });
        for (j, &t) in inside.iter().enumerate() {
            truth.push_str(&format!("{},{j},{}\n", bag.id, u8::from(t)));
        }
    }
    let truth_path = dir.join("ground_truth.csv");
    fs::write(&truth_path, truth).map_err(|e| Error::io(&truth_path, e))?;
    let manifest = DatasetManifest {
        num_classes: 2,
        feature_dim: spec.feature_dim,
        bags: entries,
        seed: Some(spec.seed),
    };
    manifest.save(dir.join("manifest.json"))?;
    Ok(manifest)
}
