//! Sweep configuration, read from TOML.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::metrics::RotationSide;
use crate::minors::{MinorCaps, MAX_ORDER};
use crate::mlp::{Layer, Regime, TrainConfig};
use crate::mnist::{self, NormalizationSpec};
use crate::spatial::PatchRegion;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Translation range of the augmented regime.
    pub max_shift: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        OptimizerConfig {
            learning_rate: t.learning_rate,
            beta1: t.beta1,
            beta2: t.beta2,
            epsilon: t.epsilon,
            weight_decay: t.weight_decay,
            batch_size: t.batch_size,
            max_shift: t.max_shift,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MinorConfig {
    pub ks: Vec<usize>,
    pub row_cap: usize,
    pub col_cap: usize,
    /// Evaluated (row, column) pairs per Jacobian.
    pub pair_budget: Option<usize>,
    pub chunk: usize,
    pub seed: u64,
}

impl Default for MinorConfig {
    fn default() -> Self {
        MinorConfig {
            ks: vec![1, 2, 3],
            row_cap: 10_000,
            col_cap: 10_000,
            pair_budget: Some(250_000),
            chunk: 500,
            seed: 42,
        }
    }
}

impl MinorConfig {
    pub fn caps(&self) -> MinorCaps {
        MinorCaps {
            row_cap: self.row_cap,
            col_cap: self.col_cap,
            pair_budget: self.pair_budget,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RotationConfig {
    pub count: usize,
    pub seed: u64,
    pub side: RotationSide,
    /// Leading evaluation images on which the rotation ratio is measured;
    /// `0` disables it.
    pub images: usize,
}

impl Default for RotationConfig {
    fn default() -> Self {
        RotationConfig {
            count: 100,
            seed: 7,
            side: RotationSide::Hidden,
            images: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SnapshotSelection {
    All,
    Final,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpatialConfig {
    pub enabled: bool,
    pub snapshots: SnapshotSelection,
    pub layers: Vec<Layer>,
    /// Leading evaluation images used for spatial conditions; `None` = all.
    pub images: Option<usize>,
    pub radii: Vec<f64>,
    pub ball_repetitions: usize,
    pub ball_ks: Vec<usize>,
    pub regions: Vec<PatchRegion>,
    pub patch_ks: Vec<usize>,
    pub min_dists: Vec<f64>,
    pub separated_ks: Vec<usize>,
    pub separated_samples: usize,
    /// Evaluated pairs per Jacobian and condition.
    pub pair_budget: Option<usize>,
    pub seed: u64,
}

impl Default for SpatialConfig {
    fn default() -> Self {
        SpatialConfig {
            enabled: true,
            snapshots: SnapshotSelection::All,
            layers: Layer::ALL.to_vec(),
            images: None,
            radii: vec![7.0, 14.0, 21.0, 28.0],
            ball_repetitions: 10,
            ball_ks: vec![2],
            regions: PatchRegion::ALL.to_vec(),
            patch_ks: vec![1, 2],
            min_dists: vec![0.0, 3.0, 5.0, 7.0, 10.0, 14.0],
            separated_ks: vec![2, 3],
            separated_samples: 10_000,
            pair_budget: Some(20_000),
            seed: 11,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub hidden_dims: Vec<usize>,
    pub seeds: Vec<u64>,
    pub regimes: Vec<Regime>,
    pub epochs: usize,
    pub eval_every: usize,
    pub eval_images: usize,
    pub eval_seed: u64,
    /// Train on the first `n` training images only.
    pub train_limit: Option<usize>,
    pub zero_row_tol: f64,
    pub output_dir: PathBuf,
    pub optimizer: OptimizerConfig,
    pub minors: MinorConfig,
    pub rotation: RotationConfig,
    pub spatial: SpatialConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            hidden_dims: vec![64, 128, 256],
            seeds: (0..5).collect(),
            regimes: vec![Regime::Standard, Regime::Augmented],
            epochs: 200,
            eval_every: 10,
            eval_images: 50,
            eval_seed: 0,
            train_limit: None,
            zero_row_tol: 1e-3,
            output_dir: PathBuf::from("runs/default"),
            optimizer: OptimizerConfig::default(),
            minors: MinorConfig::default(),
            rotation: RotationConfig::default(),
            spatial: SpatialConfig::default(),
        }
    }
}

/// One trained model: `(h, seed, regime)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellKey {
    pub h: usize,
    pub seed: u64,
    pub regime: Regime,
}

impl CellKey {
    pub fn id(&self) -> String {
        format!("h{}_s{}_{}", self.h, self.seed, self.regime)
    }
}

impl std::fmt::Display for CellKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.id())
    }
}

fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}

fn check_unique<T: Ord + Clone + std::fmt::Debug>(name: &str, items: &[T]) -> Result<()> {
    if items.is_empty() {
        return config_err(format!("{name} must not be empty"));
    }
    let set: BTreeSet<T> = items.iter().cloned().collect();
    if set.len() != items.len() {
        return config_err(format!("{name} contains duplicates: {items:?}"));
    }
    Ok(())
}

fn check_ks(name: &str, ks: &[usize], allowed: std::ops::RangeInclusive<usize>) -> Result<()> {
    check_unique(name, ks)?;
    if let Some(k) = ks.iter().find(|k| !allowed.contains(k)) {
        return config_err(format!("{name}: order {k} outside {allowed:?}"));
    }
    Ok(())
}

fn check_reals(name: &str, values: &[f64], min_exclusive: Option<f64>) -> Result<()> {
    if values.is_empty() {
        return config_err(format!("{name} must not be empty"));
    }
    for (i, v) in values.iter().enumerate() {
        let ok = v.is_finite() && min_exclusive.map_or(*v >= 0.0, |m| *v > m);
        if !ok {
            return config_err(format!("{name}: invalid value {v}"));
        }
        if values[..i].contains(v) {
            return config_err(format!("{name} contains duplicate {v}"));
        }
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    pub fn validate(&self) -> Result<()> {
        check_unique("hidden_dims", &self.hidden_dims)?;
        if self.hidden_dims.contains(&0) {
            return config_err("hidden_dims must be positive");
        }
        check_unique("seeds", &self.seeds)?;
        check_unique("regimes", &self.regimes)?;
        if self.eval_every == 0 {
            return config_err("eval_every must be >= 1");
        }
        if self.eval_images == 0 || self.eval_images > mnist::TEST_SET_SIZE {
            return config_err(format!(
                "eval_images must lie in 1..={}",
                mnist::TEST_SET_SIZE
            ));
        }
        if self.train_limit == Some(0) {
            return config_err("train_limit must be >= 1");
        }
        if !(self.zero_row_tol > 0.0) {
            return config_err("zero_row_tol must be > 0");
        }
        self.train_config(CellKey {
            h: 1,
            seed: 0,
            regime: Regime::Augmented,
        })
        .validate()
        .map_err(|e| Error::Config(e.to_string()))?;

        let m = &self.minors;
        check_ks("minors.ks", &m.ks, 1..=MAX_ORDER)?;
        if m.row_cap == 0 || m.col_cap == 0 || m.chunk == 0 || m.pair_budget == Some(0) {
            return config_err("minor caps, chunk and pair_budget must be >= 1");
        }
        let min_h = *self.hidden_dims.iter().min().expect("non-empty");
        if let Some(k) = m.ks.iter().find(|&&k| k > min_h) {
            return config_err(format!("order {k} exceeds hidden width {min_h}"));
        }
        if self.rotation.count == 0 {
            return config_err("rotation.count must be >= 1");
        }
        if self.rotation.images > self.eval_images {
            return config_err("rotation.images exceeds eval_images");
        }

        let s = &self.spatial;
        if s.enabled {
            check_unique("spatial.layers", &s.layers)?;
            if s.images.is_some_and(|n| n == 0 || n > self.eval_images) {
                return config_err("spatial.images must lie in 1..=eval_images");
            }
            // An empty family (radii, regions or min_dists) is skipped.
            if !s.radii.is_empty() {
                check_reals("spatial.radii", &s.radii, Some(0.0))?;
                check_ks("spatial.ball_ks", &s.ball_ks, 1..=MAX_ORDER)?;
                if s.ball_repetitions == 0 {
                    return config_err("spatial.ball_repetitions must be >= 1");
                }
            }
            if !s.regions.is_empty() {
                check_unique("spatial.regions", &s.regions)?;
                check_ks("spatial.patch_ks", &s.patch_ks, 1..=MAX_ORDER)?;
            }
            if !s.min_dists.is_empty() {
                check_reals("spatial.min_dists", &s.min_dists, None)?;
                check_ks("spatial.separated_ks", &s.separated_ks, 2..=3)?;
            }
            if s.separated_samples == 0 || s.pair_budget == Some(0) {
                return config_err("spatial sample counts must be >= 1");
            }
            let max_k = s
                .ball_ks
                .iter()
                .chain(&s.patch_ks)
                .chain(&s.separated_ks)
                .max();
            if max_k.is_some_and(|&k| k > min_h) {
                return config_err("spatial order exceeds hidden width");
            }
        }
        Ok(())
    }

    /// Cells in sweep order: h, then seed, then regime.
    pub fn cells(&self) -> Vec<CellKey> {
        let mut out = Vec::new();
        for &h in &self.hidden_dims {
            for &seed in &self.seeds {
                for &regime in &self.regimes {
                    out.push(CellKey { h, seed, regime });
                }
            }
        }
        out
    }

    pub fn train_config(&self, cell: CellKey) -> TrainConfig {
        let o = &self.optimizer;
        TrainConfig {
            learning_rate: o.learning_rate,
            beta1: o.beta1,
            beta2: o.beta2,
            epsilon: o.epsilon,
            weight_decay: o.weight_decay,
            batch_size: o.batch_size,
            epochs: self.epochs,
            seed: cell.seed,
            augment: cell.regime == Regime::Augmented,
            max_shift: o.max_shift,
            eval_every: self.eval_every,
            norm_mean: NormalizationSpec::MNIST.mean(),
            norm_std: NormalizationSpec::MNIST.std(),
        }
    }

    pub fn spatial_images(&self) -> usize {
        self.spatial.images.unwrap_or(self.eval_images)
    }

    /// Fingerprint of everything that determines a cell's snapshots.
    pub fn train_digest(&self, cell: CellKey) -> String {
        digest(&("train", cell, self.train_config(cell), self.train_limit))
    }

    /// Fingerprint of everything that determines the unrestricted metrics.
    pub fn analysis_digest(&self, cell: CellKey) -> String {
        digest(&(
            "analysis",
            self.train_digest(cell),
            self.eval_images,
            self.eval_seed,
            self.zero_row_tol,
            &self.minors,
            &self.rotation,
        ))
    }

    pub fn spatial_digest(&self, cell: CellKey) -> String {
        digest(&(
            "spatial",
            self.train_digest(cell),
            self.eval_images,
            self.eval_seed,
            self.zero_row_tol,
            &self.minors,
            &self.spatial,
        ))
    }
}

fn digest<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("serializable");
    hex::encode(Sha256::digest(&bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let back = ExperimentConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(cfg.cells().len(), 30);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let cfg = ExperimentConfig::from_toml_str(
            "hidden_dims = [64]\nseeds = [0]\nepochs = 0\n[minors]\nks = [2]\n",
        )
        .unwrap();
        assert_eq!(cfg.hidden_dims, vec![64]);
        assert_eq!(cfg.minors.row_cap, 10_000);
        assert_eq!(cfg.minors.ks, vec![2]);
        assert_eq!(cfg.regimes.len(), 2);
    }

    #[test]
    fn rejects_bad_configs() {
        for text in [
            "hidden_dims = []",
            "seeds = [1, 1]",
            "eval_images = 0",
            "eval_images = 10001",
            "unknown_key = 3",
            "[minors]\nks = [4]",
            "[spatial]\nseparated_ks = [1]",
            "[spatial]\nradii = [0.0]",
            "[spatial]\nmin_dists = [-1.0]",
            "[rotation]\ncount = 0",
            "[optimizer]\nmax_shift = 20",
        ] {
            let err = ExperimentConfig::from_toml_str(text).unwrap_err();
            assert!(err.is_config_error(), "{text}: {err}");
        }
    }

    #[test]
    fn digests_track_their_stage() {
        let a = ExperimentConfig::default();
        let cell = a.cells()[0];
        let mut b = a.clone();
        b.rotation.count = 400;
        assert_eq!(a.train_digest(cell), b.train_digest(cell));
        assert_ne!(a.analysis_digest(cell), b.analysis_digest(cell));
        assert_eq!(a.spatial_digest(cell), b.spatial_digest(cell));
        b.epochs = 3;
        assert_ne!(a.train_digest(cell), b.train_digest(cell));
        assert_ne!(a.spatial_digest(cell), b.spatial_digest(cell));
    }
}
