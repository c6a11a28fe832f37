//! Lossless block compression of base-p digit matrices.
//!
//! A matrix whose entries are digits in `[0, p)` is tiled into `n' x m'`
//! sub-blocks; the `B = n'·m'` digits of each block are combined into a
//! single integer in `[0, p^B)` through positional weighting, shrinking the
//! element count by a factor of `B`. Because every integer in `[0, p^B)` has
//! exactly one base-p digit expansion, the packing is a bijection and the
//! inverse recovers the source matrix exactly.
//!
//! Digits are read row-major within a block, with the top-left digit taking
//! exponent 0: `[[1,2],[0,2]]` over base 3 packs to
//! `1·3⁰ + 2·3¹ + 0·3² + 2·3³ = 61`.

use num_bigint::BigUint;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CodecError {
    #[error("base must be at least 2, got {0}")]
    InvalidBase(u32),
    #[error("block dimensions must be at least 1x1, got {rows}x{cols}")]
    InvalidBlockShape { rows: usize, cols: usize },
    #[error("matrix dimensions must be at least 1x1, got {rows}x{cols}")]
    InvalidMatrixShape { rows: usize, cols: usize },
    #[error("expected {expected} entries for a {rows}x{cols} matrix, got {actual}")]
    EntryCountMismatch {
        rows: usize,
        cols: usize,
        expected: usize,
        actual: usize,
    },
    #[error("digit {digit} at index {index} is out of range for base {base}")]
    DigitOutOfRange { index: usize, digit: u32, base: u32 },
    #[error("cannot pack an empty digit block")]
    EmptyBlock,
    #[error("value at index {index} is not representable in {block_size} base-{base} digits")]
    ValueTooLarge {
        index: usize,
        base: u32,
        block_size: usize,
    },
    #[error(
        "matrix dimensions {rows}x{cols} are not divisible by block {block_rows}x{block_cols}"
    )]
    NonDivisible {
        rows: usize,
        cols: usize,
        block_rows: usize,
        block_cols: usize,
    },
    #[error("matrix base {matrix_base} does not match configured base {config_base}")]
    BaseMismatch { matrix_base: u32, config_base: u32 },
}

/// Block-compression parameters: the digit base `p` and the block shape
/// `n' x m'`. Derived quantities (`B`, block counts) are computed on demand.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CompressionConfig {
    base: u32,
    block_rows: usize,
    block_cols: usize,
}

impl CompressionConfig {
    pub fn new(base: u32, block_rows: usize, block_cols: usize) -> Result<Self, CodecError> {
        if base < 2 {
            return Err(CodecError::InvalidBase(base));
        }
        if block_rows == 0 || block_cols == 0 {
            return Err(CodecError::InvalidBlockShape {
                rows: block_rows,
                cols: block_cols,
            });
        }
        Ok(Self {
            base,
            block_rows,
            block_cols,
        })
    }

    /// The 1x1 configuration, under which compression is the identity.
    pub fn identity(base: u32) -> Result<Self, CodecError> {
        Self::new(base, 1, 1)
    }

    pub fn base(&self) -> u32 {
        self.base
    }

    pub fn block_rows(&self) -> usize {
        self.block_rows
    }

    pub fn block_cols(&self) -> usize {
        self.block_cols
    }

    /// Digits per block, `B = n'·m'`.
    pub fn block_size(&self) -> usize {
        self.block_rows * self.block_cols
    }

    /// Exclusive upper bound of packed values, `p^B`.
    pub fn packed_bound(&self) -> BigUint {
        BigUint::from(self.base).pow(self.block_size() as u32)
    }
}

/// Integer matrix with entries in `[0, p)` for its associated base `p`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DigitMatrix {
    rows: usize,
    cols: usize,
    base: u32,
    digits: Vec<u32>,
}

impl DigitMatrix {
    /// Build from row-major digits, validating the shape and every entry.
    pub fn new(rows: usize, cols: usize, base: u32, digits: Vec<u32>) -> Result<Self, CodecError> {
        if base < 2 {
            return Err(CodecError::InvalidBase(base));
        }
        if rows == 0 || cols == 0 {
            return Err(CodecError::InvalidMatrixShape { rows, cols });
        }
        if digits.len() != rows * cols {
            return Err(CodecError::EntryCountMismatch {
                rows,
                cols,
                expected: rows * cols,
                actual: digits.len(),
            });
        }
        if let Some((index, &digit)) = digits.iter().enumerate().find(|(_, &d)| d >= base) {
            return Err(CodecError::DigitOutOfRange { index, digit, base });
        }
        Ok(Self {
            rows,
            cols,
            base,
            digits,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn base(&self) -> u32 {
        self.base
    }

    pub fn digits(&self) -> &[u32] {
        &self.digits
    }

    pub fn get(&self, row: usize, col: usize) -> u32 {
        self.digits[row * self.cols + col]
    }
}

/// Reduced-dimension matrix of packed block values in `[0, p^B)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedMatrix {
    rows: usize,
    cols: usize,
    entries: Vec<BigUint>,
    config: CompressionConfig,
}

impl PackedMatrix {
    /// Build from row-major packed values, validating each against `p^B`.
    pub fn new(
        rows: usize,
        cols: usize,
        entries: Vec<BigUint>,
        config: CompressionConfig,
    ) -> Result<Self, CodecError> {
        if rows == 0 || cols == 0 {
            return Err(CodecError::InvalidMatrixShape { rows, cols });
        }
        if entries.len() != rows * cols {
            return Err(CodecError::EntryCountMismatch {
                rows,
                cols,
                expected: rows * cols,
                actual: entries.len(),
            });
        }
        let bound = config.packed_bound();
        if let Some((index, _)) = entries.iter().enumerate().find(|(_, v)| **v >= bound) {
            return Err(CodecError::ValueTooLarge {
                index,
                base: config.base(),
                block_size: config.block_size(),
            });
        }
        Ok(Self {
            rows,
            cols,
            entries,
            config,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn entries(&self) -> &[BigUint] {
        &self.entries
    }

    pub fn config(&self) -> &CompressionConfig {
        &self.config
    }

    pub fn get(&self, row: usize, col: usize) -> &BigUint {
        &self.entries[row * self.cols + col]
    }

    /// Dimensions of the matrix this unpacks to.
    pub fn source_dims(&self) -> (usize, usize) {
        (
            self.rows * self.config.block_rows(),
            self.cols * self.config.block_cols(),
        )
    }
}

/// Pack a block of digits into one integer: digit `i` contributes
/// `digit · base^i`, evaluated exactly in arbitrary precision.
pub fn pack_block(digits: &[u32], base: u32) -> Result<BigUint, CodecError> {
    if base < 2 {
        return Err(CodecError::InvalidBase(base));
    }
    if digits.is_empty() {
        return Err(CodecError::EmptyBlock);
    }
    if let Some((index, &digit)) = digits.iter().enumerate().find(|(_, &d)| d >= base) {
        return Err(CodecError::DigitOutOfRange { index, digit, base });
    }
    // Horner evaluation from the highest exponent down.
    let big_base = BigUint::from(base);
    let mut value = BigUint::ZERO;
    for &digit in digits.iter().rev() {
        value = value * &big_base + BigUint::from(digit);
    }
    Ok(value)
}

/// Recover the unique digit sequence with `pack_block(d, base) == value`,
/// zero-padded to exactly `block_size` digits.
pub fn unpack_block(value: &BigUint, base: u32, block_size: usize) -> Result<Vec<u32>, CodecError> {
    if base < 2 {
        return Err(CodecError::InvalidBase(base));
    }
    if block_size == 0 {
        return Err(CodecError::EmptyBlock);
    }
    let big_base = BigUint::from(base);
    let mut digits = Vec::with_capacity(block_size);
    let mut remaining = value.clone();
    for _ in 0..block_size {
        let remainder = &remaining % &big_base;
        // remainder < base, so it fits a single u32 limb.
        digits.push(remainder.iter_u32_digits().next().unwrap_or(0));
        remaining /= &big_base;
    }
    if remaining != BigUint::ZERO {
        return Err(CodecError::ValueTooLarge {
            index: 0,
            base,
            block_size,
        });
    }
    Ok(digits)
}

/// Compress a digit matrix by packing each `n' x m'` sub-block.
///
/// Blocks tile the matrix without overlap; output entry `(i, j)` packs the
/// sub-block whose top-left corner is `(i·n', j·m')`, digits read row-major.
/// Dimensions must be exact multiples of the block shape.
pub fn compress_matrix(
    matrix: &DigitMatrix,
    config: CompressionConfig,
) -> Result<PackedMatrix, CodecError> {
    if matrix.base() != config.base() {
        return Err(CodecError::BaseMismatch {
            matrix_base: matrix.base(),
            config_base: config.base(),
        });
    }
    if !matrix.rows().is_multiple_of(config.block_rows())
        || !matrix.cols().is_multiple_of(config.block_cols())
    {
        return Err(CodecError::NonDivisible {
            rows: matrix.rows(),
            cols: matrix.cols(),
            block_rows: config.block_rows(),
            block_cols: config.block_cols(),
        });
    }
    let out_rows = matrix.rows() / config.block_rows();
    let out_cols = matrix.cols() / config.block_cols();
    let mut entries = Vec::with_capacity(out_rows * out_cols);
    let mut block = Vec::with_capacity(config.block_size());
    for block_row in 0..out_rows {
        for block_col in 0..out_cols {
            block.clear();
            for r in 0..config.block_rows() {
                for c in 0..config.block_cols() {
                    block.push(matrix.get(
                        block_row * config.block_rows() + r,
                        block_col * config.block_cols() + c,
                    ));
                }
            }
            entries.push(pack_block(&block, config.base())?);
        }
    }
    PackedMatrix::new(out_rows, out_cols, entries, config)
}

/// Exact inverse of [`compress_matrix`].
pub fn decompress_matrix(packed: &PackedMatrix) -> Result<DigitMatrix, CodecError> {
    let config = packed.config();
    let (rows, cols) = packed.source_dims();
    let mut digits = vec![0u32; rows * cols];
    for block_row in 0..packed.rows() {
        for block_col in 0..packed.cols() {
            let block = unpack_block(
                packed.get(block_row, block_col),
                config.base(),
                config.block_size(),
            )?;
            for (i, &digit) in block.iter().enumerate() {
                let r = block_row * config.block_rows() + i / config.block_cols();
                let c = block_col * config.block_cols() + i % config.block_cols();
                digits[r * cols + c] = digit;
            }
        }
    }
    DigitMatrix::new(rows, cols, config.base(), digits)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pack_worked_example_base_three() {
        // Block [[1,2],[0,2]] read row-major: 1 + 2·3 + 0·9 + 2·27.
        let value = pack_block(&[1, 2, 0, 2], 3).unwrap();
        assert_eq!(value, BigUint::from(61u32));
    }

    #[test]
    fn pack_zero_and_singleton() {
        assert_eq!(pack_block(&[0, 0, 0, 0], 3).unwrap(), BigUint::ZERO);
        assert_eq!(pack_block(&[5], 9).unwrap(), BigUint::from(5u32));
    }

    #[test]
    fn pack_all_max_digits_is_bound_minus_one() {
        let value = pack_block(&[255, 255, 255, 255], 256).unwrap();
        assert_eq!(value, BigUint::from(4_294_967_295u64));
    }

    #[test]
    fn pack_rejects_digit_out_of_range() {
        let err = pack_block(&[1, 3, 0], 3).unwrap_err();
        assert_eq!(
            err,
            CodecError::DigitOutOfRange {
                index: 1,
                digit: 3,
                base: 3
            }
        );
    }

    #[test]
    fn pack_rejects_empty_block() {
        assert_eq!(pack_block(&[], 3).unwrap_err(), CodecError::EmptyBlock);
    }

    #[test]
    fn unpack_inverts_worked_example() {
        // Independent oracle: repeated divide-and-remainder of 61 by 3
        // yields 1, 2, 0, 2 exactly.
        let digits = unpack_block(&BigUint::from(61u32), 3, 4).unwrap();
        assert_eq!(digits, vec![1, 2, 0, 2]);
    }

    #[test]
    fn unpack_zero_pads_high_digits() {
        assert_eq!(
            unpack_block(&BigUint::ZERO, 3, 4).unwrap(),
            vec![0, 0, 0, 0]
        );
        assert_eq!(
            unpack_block(&BigUint::from(80u32), 3, 4).unwrap(),
            vec![2, 2, 2, 2]
        );
    }

    #[test]
    fn unpack_rejects_value_at_bound() {
        let err = unpack_block(&BigUint::from(81u32), 3, 4).unwrap_err();
        assert!(matches!(err, CodecError::ValueTooLarge { .. }));
    }

    #[test]
    fn compress_fig2_shape_and_corner_value() {
        // 8x8 over Z/3Z whose top-left 2x2 block is [[1,2],[0,2]].
        let mut digits = vec![0u32; 64];
        digits[0] = 1;
        digits[1] = 2;
        digits[8] = 0;
        digits[9] = 2;
        let matrix = DigitMatrix::new(8, 8, 3, digits).unwrap();
        let config = CompressionConfig::new(3, 2, 2).unwrap();
        let packed = compress_matrix(&matrix, config).unwrap();
        assert_eq!((packed.rows(), packed.cols()), (4, 4));
        assert_eq!(packed.get(0, 0), &BigUint::from(61u32));
    }

    #[test]
    fn compress_identity_config_preserves_matrix() {
        let matrix = DigitMatrix::new(2, 3, 7, vec![0, 1, 2, 3, 4, 5]).unwrap();
        let packed = compress_matrix(&matrix, CompressionConfig::identity(7).unwrap()).unwrap();
        assert_eq!((packed.rows(), packed.cols()), (2, 3));
        for (entry, &digit) in packed.entries().iter().zip(matrix.digits()) {
            assert_eq!(entry, &BigUint::from(digit));
        }
        assert_eq!(decompress_matrix(&packed).unwrap(), matrix);
    }

    #[test]
    fn compress_mnist_shape_halves_each_dimension() {
        let matrix = DigitMatrix::new(28, 28, 256, vec![17u32; 28 * 28]).unwrap();
        let config = CompressionConfig::new(256, 2, 2).unwrap();
        let packed = compress_matrix(&matrix, config).unwrap();
        assert_eq!((packed.rows(), packed.cols()), (14, 14));
    }

    #[test]
    fn compress_rejects_non_divisible_dims() {
        let matrix = DigitMatrix::new(5, 4, 3, vec![1u32; 20]).unwrap();
        let config = CompressionConfig::new(3, 2, 2).unwrap();
        let err = compress_matrix(&matrix, config).unwrap_err();
        assert_eq!(
            err,
            CodecError::NonDivisible {
                rows: 5,
                cols: 4,
                block_rows: 2,
                block_cols: 2
            }
        );
    }

    #[test]
    fn compress_rejects_base_mismatch() {
        let matrix = DigitMatrix::new(2, 2, 3, vec![1, 2, 0, 2]).unwrap();
        let config = CompressionConfig::new(4, 2, 2).unwrap();
        assert!(matches!(
            compress_matrix(&matrix, config).unwrap_err(),
            CodecError::BaseMismatch { .. }
        ));
    }

    #[test]
    fn decompress_rejects_corrupt_entry() {
        let config = CompressionConfig::new(3, 2, 2).unwrap();
        let err = PackedMatrix::new(1, 1, vec![BigUint::from(81u32)], config).unwrap_err();
        assert!(matches!(err, CodecError::ValueTooLarge { .. }));
    }

    #[test]
    fn decompress_all_zero() {
        let config = CompressionConfig::new(3, 2, 2).unwrap();
        let packed = PackedMatrix::new(2, 2, vec![BigUint::ZERO; 4], config).unwrap();
        let matrix = decompress_matrix(&packed).unwrap();
        assert_eq!((matrix.rows(), matrix.cols()), (4, 4));
        assert!(matrix.digits().iter().all(|&d| d == 0));
    }

    #[test]
    fn round_trip_recovers_non_trivial_matrix() {
        let digits: Vec<u32> = (0..64).map(|i| (i * 7 + 3) % 3).collect();
        let matrix = DigitMatrix::new(8, 8, 3, digits).unwrap();
        let config = CompressionConfig::new(3, 2, 2).unwrap();
        let packed = compress_matrix(&matrix, config).unwrap();
        assert_eq!(decompress_matrix(&packed).unwrap(), matrix);
    }

    #[test]
    fn size_ratio_is_exactly_block_size() {
        let matrix = DigitMatrix::new(28, 28, 16, vec![5u32; 28 * 28]).unwrap();
        let two = compress_matrix(&matrix, CompressionConfig::new(16, 2, 2).unwrap()).unwrap();
        let four = compress_matrix(&matrix, CompressionConfig::new(16, 4, 4).unwrap()).unwrap();
        let original = (matrix.rows() * matrix.cols()) as f64;
        assert_eq!((two.rows() * two.cols()) as f64 / original, 0.25);
        assert_eq!((four.rows() * four.cols()) as f64 / original, 0.0625);
    }
}
