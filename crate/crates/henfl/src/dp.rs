//! One-shot Gaussian mechanism over normalized matrices.
//!
//! Noise is calibrated as `sigma² = Δf² / ε²` and added independently to
//! every entry of a matrix whose values lie in `[0, 1]` (the normalization
//! that justifies unit sensitivity). Values are not clamped afterwards.
//! Because the whole dataset is noised exactly once before training, the
//! privacy spent stays at `1·ε` no matter how many synchronization rounds
//! follow; [`cumulative_leakage`] reports the `n·ε` composition baseline a
//! per-round mechanism would pay.

use thiserror::Error;

use crate::matrix::RealMatrix;
use crate::rng::GaussianSource;

#[derive(Debug, Error, PartialEq)]
pub enum DpError {
    #[error("epsilon must be positive and finite, got {0}")]
    InvalidEpsilon(f64),
    #[error("sensitivity must be positive and finite, got {0}")]
    InvalidSensitivity(f64),
    #[error("entry {value} at ({row}, {col}) is outside [0, 1]; normalize before noising")]
    EntryOutOfRange { row: usize, col: usize, value: f64 },
}

/// Privacy leakage `ε`, sensitivity `Δf`, and the seed of the noise stream.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrivacyParams {
    epsilon: f64,
    sensitivity: f64,
    seed: u64,
}

impl PrivacyParams {
    pub fn new(epsilon: f64, sensitivity: f64, seed: u64) -> Result<Self, DpError> {
        if !(epsilon.is_finite() && epsilon > 0.0) {
            return Err(DpError::InvalidEpsilon(epsilon));
        }
        if !(sensitivity.is_finite() && sensitivity > 0.0) {
            return Err(DpError::InvalidSensitivity(sensitivity));
        }
        Ok(Self {
            epsilon,
            sensitivity,
            seed,
        })
    }

    /// Unit sensitivity, the normalized-data case.
    pub fn with_unit_sensitivity(epsilon: f64, seed: u64) -> Result<Self, DpError> {
        Self::new(epsilon, 1.0, seed)
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn sensitivity(&self) -> f64 {
        self.sensitivity
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Noise variance `Δf² / ε²`.
    pub fn variance(&self) -> f64 {
        (self.sensitivity * self.sensitivity) / (self.epsilon * self.epsilon)
    }

    /// Noise standard deviation `Δf / ε`.
    pub fn sigma(&self) -> f64 {
        self.variance().sqrt()
    }

    /// Same parameters, different noise stream.
    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..*self }
    }
}

/// Matrix after noising: same shape as the source, entries unbounded.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisyMatrix {
    rows: usize,
    cols: usize,
    entries: Vec<f64>,
}

impl NoisyMatrix {
    pub(crate) fn from_parts(rows: usize, cols: usize, entries: Vec<f64>) -> Self {
        assert_eq!(entries.len(), rows * cols, "entry count must match shape");
        Self {
            rows,
            cols,
            entries,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }
}

/// Gaussian variance for the given parameters, `Δf² / ε²`.
pub fn gaussian_variance(params: &PrivacyParams) -> f64 {
    params.variance()
}

/// Perturb every entry of a `[0, 1]`-normalized matrix with an independent
/// draw from `N(0, Δf²/ε²)`, reading draws row-major from `source`.
///
/// Exposed separately from [`add_noise`] so callers can audit the number of
/// draws consumed: exactly one per entry.
pub fn add_noise_from_source(
    matrix: &RealMatrix,
    source: &mut GaussianSource,
) -> Result<NoisyMatrix, DpError> {
    for row in 0..matrix.rows() {
        for col in 0..matrix.cols() {
            let value = matrix.get(row, col);
            if !(0.0..=1.0).contains(&value) {
                return Err(DpError::EntryOutOfRange { row, col, value });
            }
        }
    }
    let entries = matrix.values().iter().map(|v| v + source.sample()).collect();
    Ok(NoisyMatrix {
        rows: matrix.rows(),
        cols: matrix.cols(),
        entries,
    })
}

/// [`add_noise_from_source`] with a fresh stream seeded from `params`.
pub fn add_noise(matrix: &RealMatrix, params: &PrivacyParams) -> Result<NoisyMatrix, DpError> {
    let mut source = GaussianSource::new(params.seed(), params.sigma());
    add_noise_from_source(matrix, &mut source)
}

/// Privacy leakage after `rounds` sequential applications at
/// `epsilon_per_round` each: the composition baseline `n·ε`.
pub fn cumulative_leakage(epsilon_per_round: f64, rounds: u64) -> f64 {
    rounds as f64 * epsilon_per_round
}
