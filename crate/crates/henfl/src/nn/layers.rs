//! Hand-written forward and backward kernels for each layer type.
//!
//! Everything operates on flat row-major slices with explicit dimensions.
//! Per-sample work is parallelized with rayon where samples are
//! independent; weight-gradient accumulation is parallelized over output
//! channels/rows instead, so every output element is produced by exactly
//! one task with a fixed summation order and results do not depend on
//! thread scheduling.

use rayon::prelude::*;

use crate::rng::{next_unit, rng_from_seed};

/// Shape of a stride-1, zero-padded square convolution that preserves the
/// spatial side (`pad = (kernel - 1) / 2`, kernel odd).
#[derive(Debug, Clone, Copy)]
pub struct ConvDims {
    pub channels_in: usize,
    pub channels_out: usize,
    pub side: usize,
    pub kernel: usize,
}

impl ConvDims {
    pub fn pad(&self) -> usize {
        (self.kernel - 1) / 2
    }

    pub fn input_len(&self) -> usize {
        self.channels_in * self.side * self.side
    }

    pub fn output_len(&self) -> usize {
        self.channels_out * self.side * self.side
    }

    pub fn weight_len(&self) -> usize {
        self.channels_out * self.channels_in * self.kernel * self.kernel
    }
}

/// out[n][oc][y][x] = bias[oc] + sum over (ic, ky, kx) of
/// weight[oc][ic][ky][kx] * in[n][ic][y+ky-pad][x+kx-pad], zero outside.
pub fn conv_forward(
    dims: ConvDims,
    input: &[f64],
    weights: &[f64],
    bias: &[f64],
    batch: usize,
    output: &mut [f64],
) {
    debug_assert_eq!(input.len(), batch * dims.input_len());
    debug_assert_eq!(weights.len(), dims.weight_len());
    debug_assert_eq!(bias.len(), dims.channels_out);
    debug_assert_eq!(output.len(), batch * dims.output_len());
    let s = dims.side;
    let k = dims.kernel;
    let pad = dims.pad();
    output
        .par_chunks_mut(dims.output_len())
        .zip(input.par_chunks(dims.input_len()))
        .for_each(|(out_sample, in_sample)| {
            for oc in 0..dims.channels_out {
                let out_channel = &mut out_sample[oc * s * s..(oc + 1) * s * s];
                out_channel.fill(bias[oc]);
                for ic in 0..dims.channels_in {
                    let in_channel = &in_sample[ic * s * s..(ic + 1) * s * s];
                    let w_block = &weights[(oc * dims.channels_in + ic) * k * k..];
                    for ky in 0..k {
                        let oy_lo = pad.saturating_sub(ky);
                        let oy_hi = (s + pad - ky).min(s);
                        for kx in 0..k {
                            let w = w_block[ky * k + kx];
                            let ox_lo = pad.saturating_sub(kx);
                            let ox_hi = (s + pad - kx).min(s);
                            for oy in oy_lo..oy_hi {
                                let iy = oy + ky - pad;
                                let in_row = &in_channel[iy * s..(iy + 1) * s];
                                let out_row = &mut out_channel[oy * s..(oy + 1) * s];
                                for ox in ox_lo..ox_hi {
                                    out_row[ox] += w * in_row[ox + kx - pad];
                                }
                            }
                        }
                    }
                }
            }
        });
}

/// Gradients of [`conv_forward`] with respect to input, weights and bias.
pub fn conv_backward(
    dims: ConvDims,
    input: &[f64],
    weights: &[f64],
    d_output: &[f64],
    batch: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let s = dims.side;
    let k = dims.kernel;
    let pad = dims.pad();

    // d_input: same loop geometry as the forward pass, transposed roles.
    let mut d_input = vec![0.0; batch * dims.input_len()];
    d_input
        .par_chunks_mut(dims.input_len())
        .zip(d_output.par_chunks(dims.output_len()))
        .for_each(|(din_sample, dout_sample)| {
            for oc in 0..dims.channels_out {
                let dout_channel = &dout_sample[oc * s * s..(oc + 1) * s * s];
                for ic in 0..dims.channels_in {
                    let din_channel = &mut din_sample[ic * s * s..(ic + 1) * s * s];
                    let w_block = &weights[(oc * dims.channels_in + ic) * k * k..];
                    for ky in 0..k {
                        let oy_lo = pad.saturating_sub(ky);
                        let oy_hi = (s + pad - ky).min(s);
                        for kx in 0..k {
                            let w = w_block[ky * k + kx];
                            let ox_lo = pad.saturating_sub(kx);
                            let ox_hi = (s + pad - kx).min(s);
                            for oy in oy_lo..oy_hi {
                                let iy = oy + ky - pad;
                                let din_row = &mut din_channel[iy * s..(iy + 1) * s];
                                let dout_row = &dout_channel[oy * s..(oy + 1) * s];
                                for ox in ox_lo..ox_hi {
                                    din_row[ox + kx - pad] += w * dout_row[ox];
                                }
                            }
                        }
                    }
                }
            }
        });

    // d_weights: one task per output channel, summing samples in order.
    let block = dims.channels_in * k * k;
    let mut d_weights = vec![0.0; dims.weight_len()];
    d_weights
        .par_chunks_mut(block)
        .enumerate()
        .for_each(|(oc, dw_block)| {
            for n in 0..batch {
                let in_sample = &input[n * dims.input_len()..(n + 1) * dims.input_len()];
                let dout_channel = &d_output
                    [(n * dims.channels_out + oc) * s * s..(n * dims.channels_out + oc + 1) * s * s];
                for ic in 0..dims.channels_in {
                    let in_channel = &in_sample[ic * s * s..(ic + 1) * s * s];
                    for ky in 0..k {
                        let oy_lo = pad.saturating_sub(ky);
                        let oy_hi = (s + pad - ky).min(s);
                        for kx in 0..k {
                            let ox_lo = pad.saturating_sub(kx);
                            let ox_hi = (s + pad - kx).min(s);
                            let mut acc = 0.0;
                            for oy in oy_lo..oy_hi {
                                let iy = oy + ky - pad;
                                let in_row = &in_channel[iy * s..(iy + 1) * s];
                                let dout_row = &dout_channel[oy * s..(oy + 1) * s];
                                for ox in ox_lo..ox_hi {
                                    acc += dout_row[ox] * in_row[ox + kx - pad];
                                }
                            }
                            dw_block[ic * k * k + ky * k + kx] += acc;
                        }
                    }
                }
            }
        });

    let mut d_bias = vec![0.0; dims.channels_out];
    for (oc, db) in d_bias.iter_mut().enumerate() {
        for n in 0..batch {
            let channel = &d_output
                [(n * dims.channels_out + oc) * s * s..(n * dims.channels_out + oc + 1) * s * s];
            *db += channel.iter().sum::<f64>();
        }
    }

    (d_input, d_weights, d_bias)
}

/// y[n][j] = bias[j] + sum_i weight[j][i] * x[n][i].
pub fn fc_forward(
    input: &[f64],
    batch: usize,
    in_dim: usize,
    weights: &[f64],
    bias: &[f64],
    out_dim: usize,
    output: &mut [f64],
) {
    debug_assert_eq!(input.len(), batch * in_dim);
    debug_assert_eq!(weights.len(), out_dim * in_dim);
    debug_assert_eq!(output.len(), batch * out_dim);
    output
        .par_chunks_mut(out_dim)
        .zip(input.par_chunks(in_dim))
        .for_each(|(out_row, in_row)| {
            for (j, out) in out_row.iter_mut().enumerate() {
                let w_row = &weights[j * in_dim..(j + 1) * in_dim];
                let mut acc = bias[j];
                for (w, x) in w_row.iter().zip(in_row) {
                    acc += w * x;
                }
                *out = acc;
            }
        });
}

/// Gradients of [`fc_forward`]; weight rows are independent tasks.
pub fn fc_backward(
    input: &[f64],
    batch: usize,
    in_dim: usize,
    weights: &[f64],
    out_dim: usize,
    d_output: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut d_input = vec![0.0; batch * in_dim];
    d_input
        .par_chunks_mut(in_dim)
        .zip(d_output.par_chunks(out_dim))
        .for_each(|(din_row, dout_row)| {
            for (j, &dout) in dout_row.iter().enumerate() {
                let w_row = &weights[j * in_dim..(j + 1) * in_dim];
                for (din, w) in din_row.iter_mut().zip(w_row) {
                    *din += dout * w;
                }
            }
        });

    let mut d_weights = vec![0.0; out_dim * in_dim];
    d_weights
        .par_chunks_mut(in_dim)
        .enumerate()
        .for_each(|(j, dw_row)| {
            for n in 0..batch {
                let dout = d_output[n * out_dim + j];
                let in_row = &input[n * in_dim..(n + 1) * in_dim];
                for (dw, x) in dw_row.iter_mut().zip(in_row) {
                    *dw += dout * x;
                }
            }
        });

    let mut d_bias = vec![0.0; out_dim];
    for (j, db) in d_bias.iter_mut().enumerate() {
        for n in 0..batch {
            *db += d_output[n * out_dim + j];
        }
    }

    (d_input, d_weights, d_bias)
}

/// In-place `max(x, 0)`.
pub fn relu_forward(values: &mut [f64]) {
    for v in values.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Masks `gradient` by the activation pattern: zero wherever the forward
/// output was zero. The sub-gradient at exactly zero is zero.
pub fn relu_backward(activated: &[f64], gradient: &mut [f64]) {
    for (g, &a) in gradient.iter_mut().zip(activated) {
        if a <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Inverted-dropout factor per element: `1/(1-rate)` with probability
/// `1-rate`, else 0. An element is kept when its uniform draw is at least
/// `rate`, so rate 0 keeps everything with factor exactly 1.
pub fn dropout_mask(len: usize, rate: f64, seed: u64) -> Vec<f64> {
    debug_assert!((0.0..1.0).contains(&rate));
    let keep_scale = 1.0 / (1.0 - rate);
    let mut rng = rng_from_seed(seed);
    (0..len)
        .map(|_| {
            if next_unit(&mut rng) >= rate {
                keep_scale
            } else {
                0.0
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{next_unit, rng_from_seed};

    fn fill_random(values: &mut [f64], seed: u64) {
        let mut rng = rng_from_seed(seed);
        for v in values.iter_mut() {
            *v = next_unit(&mut rng) * 2.0 - 1.0;
        }
    }

    /// Reference convolution with naive index arithmetic, kept deliberately
    /// different from the production loop order.
    #[allow(clippy::needless_range_loop)]
    fn conv_reference(
        dims: ConvDims,
        input: &[f64],
        weights: &[f64],
        bias: &[f64],
        batch: usize,
    ) -> Vec<f64> {
        let s = dims.side as isize;
        let k = dims.kernel as isize;
        let pad = dims.pad() as isize;
        let mut out = vec![0.0; batch * dims.output_len()];
        for n in 0..batch {
            for oc in 0..dims.channels_out {
                for oy in 0..s {
                    for ox in 0..s {
                        let mut acc = bias[oc];
                        for ic in 0..dims.channels_in {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = oy + ky - pad;
                                    let ix = ox + kx - pad;
                                    if iy >= 0 && iy < s && ix >= 0 && ix < s {
                                        let in_idx = ((n * dims.channels_in + ic) as isize * s + iy)
                                            * s
                                            + ix;
                                        let w_idx = ((oc * dims.channels_in + ic) as isize * k + ky)
                                            * k
                                            + kx;
                                        acc += input[in_idx as usize] * weights[w_idx as usize];
                                    }
                                }
                            }
                        }
                        let out_idx =
                            ((n * dims.channels_out + oc) as isize * s + oy) * s + ox;
                        out[out_idx as usize] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_forward_matches_reference() {
        let dims = ConvDims {
            channels_in: 3,
            channels_out: 4,
            side: 5,
            kernel: 3,
        };
        let batch = 2;
        let mut input = vec![0.0; batch * dims.input_len()];
        let mut weights = vec![0.0; dims.weight_len()];
        let mut bias = vec![0.0; dims.channels_out];
        fill_random(&mut input, 1);
        fill_random(&mut weights, 2);
        fill_random(&mut bias, 3);
        let mut output = vec![0.0; batch * dims.output_len()];
        conv_forward(dims, &input, &weights, &bias, batch, &mut output);
        let reference = conv_reference(dims, &input, &weights, &bias, batch);
        for (a, b) in output.iter().zip(&reference) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn fc_forward_computes_affine_map() {
        // y = [[1,2],[3,4]] x + [10, 20] at x = [1, 1].
        let weights = vec![1.0, 2.0, 3.0, 4.0];
        let bias = vec![10.0, 20.0];
        let mut out = vec![0.0; 2];
        fc_forward(&[1.0, 1.0], 1, 2, &weights, &bias, 2, &mut out);
        assert_eq!(out, vec![13.0, 27.0]);
    }

    #[test]
    fn relu_zeroes_negatives_and_their_gradients() {
        let mut x = vec![-1.0, 0.0, 2.0];
        relu_forward(&mut x);
        assert_eq!(x, vec![0.0, 0.0, 2.0]);
        let mut g = vec![5.0, 5.0, 5.0];
        relu_backward(&x, &mut g);
        assert_eq!(g, vec![0.0, 0.0, 5.0]);
    }

    #[test]
    fn dropout_rate_zero_is_identity_mask() {
        let mask = dropout_mask(100, 0.0, 7);
        assert!(mask.iter().all(|&m| m == 1.0));
    }

    #[test]
    fn dropout_mask_is_deterministic_per_seed() {
        assert_eq!(dropout_mask(50, 0.5, 3), dropout_mask(50, 0.5, 3));
        assert_ne!(dropout_mask(50, 0.5, 3), dropout_mask(50, 0.5, 4));
    }

    #[test]
    fn dropout_keep_fraction_is_near_expectation() {
        let mask = dropout_mask(100_000, 0.5, 11);
        let kept = mask.iter().filter(|&&m| m > 0.0).count();
        assert!((kept as f64 / 100_000.0 - 0.5).abs() < 0.01);
    }

    #[test]
    fn dropout_factor_expectation_is_one() {
        // Inverted scaling: E[mask] = (1-q) / (1-q) = 1, so the expected
        // post-dropout activation equals the eval-mode activation. Pooled
        // over 10^4 seeds the mean factor must sit within 2%.
        let len = 16;
        let seeds = 10_000u64;
        let mut position_means = vec![0.0; len];
        for seed in 0..seeds {
            for (m, v) in position_means.iter_mut().zip(dropout_mask(len, 0.5, seed)) {
                *m += v;
            }
        }
        for m in &mut position_means {
            *m /= seeds as f64;
        }
        let pooled = position_means.iter().sum::<f64>() / len as f64;
        assert!((pooled - 1.0).abs() < 0.02, "pooled mean factor {pooled}");
        for (i, m) in position_means.iter().enumerate() {
            assert!((m - 1.0).abs() < 0.05, "position {i}: mean factor {m}");
        }
    }

    /// Scalar objective for gradient checking: project the layer output
    /// onto fixed random weights.
    fn project(output: &[f64], projection: &[f64]) -> f64 {
        output.iter().zip(projection).map(|(o, p)| o * p).sum()
    }

    fn central_difference(mut eval: impl FnMut(f64) -> f64, h: f64) -> f64 {
        (eval(h) - eval(-h)) / (2.0 * h)
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let dims = ConvDims {
            channels_in: 2,
            channels_out: 3,
            side: 4,
            kernel: 3,
        };
        let batch = 2;
        let mut input = vec![0.0; batch * dims.input_len()];
        let mut weights = vec![0.0; dims.weight_len()];
        let mut bias = vec![0.0; dims.channels_out];
        let mut projection = vec![0.0; batch * dims.output_len()];
        fill_random(&mut input, 21);
        fill_random(&mut weights, 22);
        fill_random(&mut bias, 23);
        fill_random(&mut projection, 24);

        // Analytic gradients of J = <conv(x, w, b), projection>.
        let (d_input, d_weights, d_bias) =
            conv_backward(dims, &input, &weights, &projection, batch);

        let eval = |input: &[f64], weights: &[f64], bias: &[f64]| {
            let mut output = vec![0.0; batch * dims.output_len()];
            conv_forward(dims, input, weights, bias, batch, &mut output);
            project(&output, &projection)
        };
        let h = 1e-6;
        // The objective is linear in each argument, so central differences
        // agree to rounding error.
        for i in (0..input.len()).step_by(7) {
            let numeric = central_difference(
                |delta| {
                    let mut x = input.clone();
                    x[i] += delta;
                    eval(&x, &weights, &bias)
                },
                h,
            );
            assert!((numeric - d_input[i]).abs() < 1e-6, "d_input[{i}]");
        }
        for i in 0..weights.len() {
            let numeric = central_difference(
                |delta| {
                    let mut w = weights.clone();
                    w[i] += delta;
                    eval(&input, &w, &bias)
                },
                h,
            );
            assert!((numeric - d_weights[i]).abs() < 1e-6, "d_weights[{i}]");
        }
        for i in 0..bias.len() {
            let numeric = central_difference(
                |delta| {
                    let mut b = bias.clone();
                    b[i] += delta;
                    eval(&input, &weights, &b)
                },
                h,
            );
            assert!((numeric - d_bias[i]).abs() < 1e-6, "d_bias[{i}]");
        }
    }

    #[test]
    fn fc_backward_matches_finite_differences() {
        let (batch, in_dim, out_dim) = (3, 5, 4);
        let mut input = vec![0.0; batch * in_dim];
        let mut weights = vec![0.0; out_dim * in_dim];
        let mut bias = vec![0.0; out_dim];
        let mut projection = vec![0.0; batch * out_dim];
        fill_random(&mut input, 31);
        fill_random(&mut weights, 32);
        fill_random(&mut bias, 33);
        fill_random(&mut projection, 34);

        let (d_input, d_weights, d_bias) =
            fc_backward(&input, batch, in_dim, &weights, out_dim, &projection);

        let eval = |input: &[f64], weights: &[f64], bias: &[f64]| {
            let mut output = vec![0.0; batch * out_dim];
            fc_forward(input, batch, in_dim, weights, bias, out_dim, &mut output);
            project(&output, &projection)
        };
        let h = 1e-6;
        for i in 0..input.len() {
            let numeric = central_difference(
                |delta| {
                    let mut x = input.clone();
                    x[i] += delta;
                    eval(&x, &weights, &bias)
                },
                h,
            );
            assert!((numeric - d_input[i]).abs() < 1e-6, "d_input[{i}]");
        }
        for i in 0..weights.len() {
            let numeric = central_difference(
                |delta| {
                    let mut w = weights.clone();
                    w[i] += delta;
                    eval(&input, &w, &bias)
                },
                h,
            );
            assert!((numeric - d_weights[i]).abs() < 1e-6, "d_weights[{i}]");
        }
        for i in 0..bias.len() {
            let numeric = central_difference(
                |delta| {
                    let mut b = bias.clone();
                    b[i] += delta;
                    eval(&input, &weights, &b)
                },
                h,
            );
            assert!((numeric - d_bias[i]).abs() < 1e-6, "d_bias[{i}]");
        }
    }
}
