//! Codec properties: exact round-trips, the packing bijection, and the
//! element-count reduction ratios.

use num_bigint::BigUint;
use proptest::collection::vec;
use proptest::prelude::*;

use henfl::hensel::{
    compress_matrix, decompress_matrix, pack_block, unpack_block, CompressionConfig, DigitMatrix,
};

fn matrix_strategy() -> impl Strategy<Value = (DigitMatrix, CompressionConfig)> {
    (
        prop_oneof![Just(2u32), Just(3u32), Just(16u32), Just(256u32)],
        1usize..=4,
        1usize..=4,
        1usize..=8,
        1usize..=8,
    )
        .prop_flat_map(|(base, block_rows, block_cols, row_blocks, col_blocks)| {
            let rows = block_rows * row_blocks;
            let cols = block_cols * col_blocks;
            vec(0u32..base, rows * cols).prop_map(move |digits| {
                (
                    DigitMatrix::new(rows, cols, base, digits).expect("generated digits in range"),
                    CompressionConfig::new(base, block_rows, block_cols)
                        .expect("generated block shape is valid"),
                )
            })
        })
}

proptest! {
    #[test]
    fn compress_then_decompress_is_identity((matrix, config) in matrix_strategy()) {
        let packed = compress_matrix(&matrix, config).expect("divisible by construction");
        let recovered = decompress_matrix(&packed).expect("compressed output is valid");
        prop_assert_eq!(recovered, matrix);
    }

    #[test]
    fn packed_element_count_shrinks_by_block_size((matrix, config) in matrix_strategy()) {
        let packed = compress_matrix(&matrix, config).expect("divisible by construction");
        prop_assert_eq!(
            packed.rows() * packed.cols() * config.block_size(),
            matrix.rows() * matrix.cols()
        );
    }

    #[test]
    fn unpack_inverts_pack_for_random_blocks(
        base in prop_oneof![Just(2u32), Just(3u32), Just(16u32), Just(256u32)],
        digits in vec(0u32..256, 1..=16),
    ) {
        let digits: Vec<u32> = digits.into_iter().map(|d| d % base).collect();
        let value = pack_block(&digits, base).expect("digits in range");
        let recovered = unpack_block(&value, base, digits.len()).expect("value in range");
        prop_assert_eq!(recovered, digits);
    }
}

#[test]
fn pack_is_a_bijection_for_base_three_pairs() {
    // All 81 digit pairs over base 3 map to 81 distinct values covering
    // [0, 81) exactly.
    let mut seen = [false; 81];
    for d0 in 0..3u32 {
        for d1 in 0..3u32 {
            for d2 in 0..3u32 {
                for d3 in 0..3u32 {
                    let value = pack_block(&[d0, d1, d2, d3], 3).unwrap();
                    let index = u32::try_from(value).unwrap() as usize;
                    assert!(index < 81, "packed value escaped [0, 81)");
                    assert!(!seen[index], "two blocks packed to {index}");
                    seen[index] = true;
                }
            }
        }
    }
    assert!(seen.iter().all(|&s| s), "packing does not cover [0, 81)");
}

#[test]
fn packing_never_overflows_at_max_width() {
    // 4x4 blocks over base 256 need exactly 128 bits.
    let digits = vec![255u32; 16];
    let value = pack_block(&digits, 256).unwrap();
    assert_eq!(value, BigUint::from(2u8).pow(128) - 1u8);
    assert_eq!(unpack_block(&value, 256, 16).unwrap(), digits);
}

#[test]
fn both_directions_are_pure() {
    let digits: Vec<u32> = (0..64).map(|i| i % 3).collect();
    let matrix = DigitMatrix::new(8, 8, 3, digits).unwrap();
    let config = CompressionConfig::new(3, 2, 2).unwrap();
    let a = compress_matrix(&matrix, config).unwrap();
    let b = compress_matrix(&matrix, config).unwrap();
    assert_eq!(a, b);
    assert_eq!(decompress_matrix(&a).unwrap(), decompress_matrix(&b).unwrap());
}
