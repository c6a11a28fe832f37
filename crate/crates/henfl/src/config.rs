//! Experiment configuration: the scenario grid and everything a run needs
//! to be reproducible from a single seed.

use std::path::PathBuf;

use thiserror::Error;

use crate::dp::{DpError, PrivacyParams};
use crate::hensel::{CodecError, CompressionConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown scenario {0}; expected 1, 2 or 3")]
    UnknownScenario(u8),
    #[error("client roster must not be empty")]
    NoClients,
    #[error("batch size must be positive")]
    ZeroBatch,
    #[error("learning rate must be positive and finite, got {0}")]
    InvalidLearningRate(f64),
    #[error("input side {side} is not divisible by block rows {block}")]
    SideNotDivisible { side: usize, block: usize },
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Privacy(#[from] DpError),
}

/// The three experiment cells: full resolution, 2x2 blocks, 4x4 blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scenario {
    /// 28x28 images, 100% of the data size.
    One,
    /// 14x14 images, 25% of the data size.
    Two,
    /// 7x7 images, 6.25% of the data size.
    Three,
}

impl Scenario {
    pub fn from_id(id: u8) -> Result<Self, ConfigError> {
        match id {
            1 => Ok(Self::One),
            2 => Ok(Self::Two),
            3 => Ok(Self::Three),
            other => Err(ConfigError::UnknownScenario(other)),
        }
    }

    pub fn id(&self) -> u8 {
        match self {
            Self::One => 1,
            Self::Two => 2,
            Self::Three => 3,
        }
    }

    /// Block shape tied to the scenario by construction.
    pub fn block(&self) -> (usize, usize) {
        match self {
            Self::One => (1, 1),
            Self::Two => (2, 2),
            Self::Three => (4, 4),
        }
    }

    /// Element count of the compressed data relative to the original.
    pub fn data_size_pct(&self) -> f64 {
        match self {
            Self::One => 100.0,
            Self::Two => 25.0,
            Self::Three => 6.25,
        }
    }

    /// Default digit base. 256 keeps byte pixels exact and the 2x2 packed
    /// values within 32 bits; 4x4 blocks drop to base 16 so packed
    /// magnitudes stay within 64 bits and convert to doubles cleanly.
    pub fn default_base(&self) -> u32 {
        match self {
            Self::One | Self::Two => 256,
            Self::Three => 16,
        }
    }

    pub fn all() -> [Scenario; 3] {
        [Self::One, Self::Two, Self::Three]
    }
}

/// The canonical privacy-leakage grid, in report order.
pub const EPSILON_GRID: [f64; 3] = [2.0, 1.5, 1.25];

/// Which noise stream a prepared dataset belongs to. Train shards, the test
/// set and sample dumps draw from disjoint derived seeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataRole {
    Train { client: u64 },
    Test,
    Samples,
}

impl DataRole {
    fn tag_and_index(&self) -> (u64, u64) {
        match self {
            DataRole::Train { client } => (crate::rng::tags::NOISE_TRAIN, *client),
            DataRole::Test => (crate::rng::tags::NOISE_TEST, 0),
            DataRole::Samples => (crate::rng::tags::NOISE_SAMPLES, 0),
        }
    }
}

/// Full description of one experiment cell plus the federation
/// hyperparameters, file locations and master seed.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    pub base: u32,
    pub epsilon: f64,
    pub sensitivity: f64,
    pub input_side: usize,
    pub clients: usize,
    pub rounds: u32,
    pub local_epochs: u32,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub fast: bool,
}

impl ExperimentConfig {
    /// A cell with the documented defaults: 4 clients, 10 rounds, 1 local
    /// epoch, batch 64, learning rate 0.01, 28x28 inputs.
    pub fn new(scenario: Scenario, epsilon: f64) -> Self {
        Self {
            scenario,
            base: scenario.default_base(),
            epsilon,
            sensitivity: 1.0,
            input_side: 28,
            clients: 4,
            rounds: 10,
            local_epochs: 1,
            batch_size: 64,
            learning_rate: 0.01,
            seed: 42,
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("out"),
            fast: false,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.clients == 0 {
            return Err(ConfigError::NoClients);
        }
        if self.batch_size == 0 {
            return Err(ConfigError::ZeroBatch);
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(ConfigError::InvalidLearningRate(self.learning_rate));
        }
        let (block_rows, block_cols) = self.scenario.block();
        if !self.input_side.is_multiple_of(block_rows) || !self.input_side.is_multiple_of(block_cols)
        {
            return Err(ConfigError::SideNotDivisible {
                side: self.input_side,
                block: block_rows,
            });
        }
        self.compression()?;
        self.privacy(0)?;
        Ok(())
    }

    pub fn compression(&self) -> Result<CompressionConfig, CodecError> {
        let (block_rows, block_cols) = self.scenario.block();
        CompressionConfig::new(self.base, block_rows, block_cols)
    }

    /// Privacy parameters bound to a concrete noise seed.
    pub fn privacy(&self, seed: u64) -> Result<PrivacyParams, DpError> {
        PrivacyParams::new(self.epsilon, self.sensitivity, seed)
    }

    /// Base seed of the noise stream for `role`; per-image seeds derive
    /// from this with the image index.
    pub fn noise_seed(&self, role: DataRole) -> u64 {
        let (tag, index) = role.tag_and_index();
        crate::rng::derive_seed(self.seed, tag, index)
    }

    /// Side length of images after compression.
    pub fn compressed_side(&self) -> usize {
        self.input_side / self.scenario.block().0
    }

    /// Number of training rounds after the fast-mode override.
    pub fn effective_rounds(&self) -> u32 {
        if self.fast {
            self.rounds.min(5)
        } else {
            self.rounds
        }
    }

    /// Training images used, capped at 8000 in fast mode.
    pub fn train_limit(&self) -> Option<usize> {
        self.fast.then_some(8_000)
    }

    /// Test images used, capped at 2000 in fast mode.
    pub fn test_limit(&self) -> Option<usize> {
        self.fast.then_some(2_000)
    }

    /// Stable hash over every field; equal configs hash equal, any field
    /// change changes the hash. FNV-1a over a canonical byte encoding.
    pub fn config_hash(&self) -> u64 {
        let mut hasher = Fnv1a::new();
        self.hash_common(&mut hasher);
        hasher.write_bytes(self.data_dir.to_string_lossy().as_bytes());
        hasher.write_bytes(self.out_dir.to_string_lossy().as_bytes());
        hasher.finish()
    }

    /// Hash of only the fields that determine a prepared dataset, plus the
    /// role; this keys the preparation cache. Client count and data
    /// directory participate because sharding depends on them.
    pub fn pipeline_hash(&self, role: DataRole) -> u64 {
        let mut hasher = Fnv1a::new();
        hasher.write_u64(self.scenario.id() as u64);
        hasher.write_u64(self.base as u64);
        hasher.write_u64(self.epsilon.to_bits());
        hasher.write_u64(self.sensitivity.to_bits());
        hasher.write_u64(self.input_side as u64);
        hasher.write_u64(self.seed);
        hasher.write_u64(self.clients as u64);
        hasher.write_bytes(self.data_dir.to_string_lossy().as_bytes());
        let (tag, index) = role.tag_and_index();
        hasher.write_u64(tag);
        hasher.write_u64(index);
        hasher.write_u64(self.train_limit().map_or(u64::MAX, |l| l as u64));
        hasher.write_u64(self.test_limit().map_or(u64::MAX, |l| l as u64));
        hasher.finish()
    }

    fn hash_common(&self, hasher: &mut Fnv1a) {
        hasher.write_u64(self.scenario.id() as u64);
        hasher.write_u64(self.base as u64);
        hasher.write_u64(self.epsilon.to_bits());
        hasher.write_u64(self.sensitivity.to_bits());
        hasher.write_u64(self.input_side as u64);
        hasher.write_u64(self.clients as u64);
        hasher.write_u64(self.rounds as u64);
        hasher.write_u64(self.local_epochs as u64);
        hasher.write_u64(self.batch_size as u64);
        hasher.write_u64(self.learning_rate.to_bits());
        hasher.write_u64(self.seed);
        hasher.write_u64(self.fast as u64);
    }
}

/// Minimal FNV-1a, kept local so hashes never depend on the standard
/// library's unspecified hasher internals.
struct Fnv1a(u64);

impl Fnv1a {
    fn new() -> Self {
        Self(0xcbf2_9ce4_8422_2325)
    }

    fn write_bytes(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x100_0000_01b3);
        }
        // Length terminator so concatenated fields cannot alias.
        self.write_u64(bytes.len() as u64);
    }

    fn write_u64(&mut self, value: u64) {
        for b in value.to_le_bytes() {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x100_0000_01b3);
        }
    }

    fn finish(&self) -> u64 {
        self.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenario_grid_matches_documented_cells() {
        assert_eq!(Scenario::One.block(), (1, 1));
        assert_eq!(Scenario::Two.block(), (2, 2));
        assert_eq!(Scenario::Three.block(), (4, 4));
        assert_eq!(Scenario::One.data_size_pct(), 100.0);
        assert_eq!(Scenario::Two.data_size_pct(), 25.0);
        assert_eq!(Scenario::Three.data_size_pct(), 6.25);
        assert!(Scenario::from_id(4).is_err());
    }

    #[test]
    fn compressed_side_per_scenario() {
        assert_eq!(ExperimentConfig::new(Scenario::One, 2.0).compressed_side(), 28);
        assert_eq!(ExperimentConfig::new(Scenario::Two, 2.0).compressed_side(), 14);
        assert_eq!(ExperimentConfig::new(Scenario::Three, 2.0).compressed_side(), 7);
    }

    #[test]
    fn equal_configs_hash_equal() {
        let a = ExperimentConfig::new(Scenario::Two, 1.5);
        let b = ExperimentConfig::new(Scenario::Two, 1.5);
        assert_eq!(a.config_hash(), b.config_hash());
    }

    #[test]
    fn every_field_feeds_the_hash() {
        let base = ExperimentConfig::new(Scenario::Two, 1.5);
        let reference = base.config_hash();
        let mut variants = Vec::new();
        let mut v = base.clone();
        v.scenario = Scenario::Three;
        variants.push(v);
        let mut v = base.clone();
        v.base = 16;
        variants.push(v);
        let mut v = base.clone();
        v.epsilon = 2.0;
        variants.push(v);
        let mut v = base.clone();
        v.sensitivity = 2.0;
        variants.push(v);
        let mut v = base.clone();
        v.input_side = 14;
        variants.push(v);
        let mut v = base.clone();
        v.clients = 8;
        variants.push(v);
        let mut v = base.clone();
        v.rounds = 3;
        variants.push(v);
        let mut v = base.clone();
        v.local_epochs = 2;
        variants.push(v);
        let mut v = base.clone();
        v.batch_size = 32;
        variants.push(v);
        let mut v = base.clone();
        v.learning_rate = 0.1;
        variants.push(v);
        let mut v = base.clone();
        v.seed = 43;
        variants.push(v);
        let mut v = base.clone();
        v.data_dir = PathBuf::from("elsewhere");
        variants.push(v);
        let mut v = base.clone();
        v.out_dir = PathBuf::from("elsewhere");
        variants.push(v);
        let mut v = base.clone();
        v.fast = true;
        variants.push(v);
        for variant in variants {
            assert_ne!(variant.config_hash(), reference, "field change must rehash");
        }
    }

    #[test]
    fn pipeline_hash_separates_roles() {
        let cfg = ExperimentConfig::new(Scenario::One, 2.0);
        let train0 = cfg.pipeline_hash(DataRole::Train { client: 0 });
        let train1 = cfg.pipeline_hash(DataRole::Train { client: 1 });
        let test = cfg.pipeline_hash(DataRole::Test);
        assert_ne!(train0, train1);
        assert_ne!(train0, test);
    }

    #[test]
    fn validation_catches_bad_cells() {
        let mut cfg = ExperimentConfig::new(Scenario::Two, 2.0);
        cfg.clients = 0;
        assert!(matches!(cfg.validate(), Err(ConfigError::NoClients)));
        let mut cfg = ExperimentConfig::new(Scenario::Three, 2.0);
        cfg.input_side = 30;
        assert!(matches!(
            cfg.validate(),
            Err(ConfigError::SideNotDivisible { .. })
        ));
        let mut cfg = ExperimentConfig::new(Scenario::One, 2.0);
        cfg.epsilon = -1.0;
        assert!(cfg.validate().is_err());
    }
}
