//! From-scratch convolutional classifier with hand-derived backprop.
//!
//! The architecture is two 3x3 convolutions (1 -> 8 -> 16 channels, stride
//! 1, padding 1 so the spatial side is preserved), each followed by ReLU,
//! inverted dropout after the second ReLU, then three fully connected
//! layers (flatten -> 128 -> 64 -> 10). The same recipe runs at input
//! sides 28, 14 and 7. Loss is mean softmax cross-entropy with a
//! log-sum-exp stabilizer, optimization plain SGD.
//!
//! Parameters live in one flat buffer in a fixed segment order
//! (conv1 w/b, conv2 w/b, fc1 w/b, fc2 w/b, fc3 w/b, each row-major), so
//! flattening to a gradient-shaped vector is the identity and bitwise
//! reproducible.

mod layers;
mod tensor;

use std::fs;
use std::ops::Range;
use std::path::Path;

use rayon::prelude::*;
use thiserror::Error;

use crate::rng::{next_unit, rng_from_seed};
use layers::{
    conv_backward, conv_forward, dropout_mask, fc_backward, fc_forward, relu_backward,
    relu_forward, ConvDims,
};
pub use tensor::Tensor;

const CHECKPOINT_MAGIC: &[u8; 8] = b"HENFLNN\0";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("invalid tensor shape {shape:?}")]
    InvalidShape { shape: Vec<usize> },
    #[error("tensor shape {shape:?} needs {expected} values, got {actual}")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),
    #[error("batch shape {shape:?} does not match expected [N, 1, {side}, {side}]")]
    BatchShape { shape: Vec<usize>, side: usize },
    #[error("batch is empty")]
    EmptyBatch,
    #[error("need one label per sample: {labels} labels for {samples} samples")]
    LabelCount { labels: usize, samples: usize },
    #[error("label {value} at index {index} is outside [0, 10)")]
    LabelOutOfRange { index: usize, value: u8 },
    #[error("non-finite loss at batch index {batch_index}")]
    NonFiniteLoss { batch_index: usize },
    #[error("gradient has {actual} components, model has {expected}")]
    GradientLength { expected: usize, actual: usize },
    #[error("parameter vector has {actual} components, architecture needs {expected}")]
    ParamLength { expected: usize, actual: usize },
    #[error("evaluation dataset is empty")]
    EmptyDataset,
    #[error("checkpoint rejected: {0}")]
    Corrupt(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

fn io_err(path: &Path, source: std::io::Error) -> NnError {
    NnError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Sizes of every layer; input side varies per scenario, the rest default
/// to the fixed recipe above.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Architecture {
    pub input_side: usize,
    pub conv1_channels: usize,
    pub conv2_channels: usize,
    pub kernel: usize,
    pub fc1_width: usize,
    pub fc2_width: usize,
    pub classes: usize,
    pub dropout_rate: f64,
}

impl Architecture {
    pub fn for_side(input_side: usize) -> Self {
        Self {
            input_side,
            conv1_channels: 8,
            conv2_channels: 16,
            kernel: 3,
            fc1_width: 128,
            fc2_width: 64,
            classes: 10,
            dropout_rate: 0.5,
        }
    }

    pub fn validate(&self) -> Result<(), NnError> {
        let fail = |msg: &str| Err(NnError::InvalidArchitecture(msg.to_string()));
        if self.input_side == 0 {
            return fail("input side must be positive");
        }
        if self.kernel == 0 || self.kernel.is_multiple_of(2) {
            return fail("kernel must be odd so padding preserves the side");
        }
        if self.conv1_channels == 0 || self.conv2_channels == 0 {
            return fail("channel counts must be positive");
        }
        if self.fc1_width == 0 || self.fc2_width == 0 || self.classes == 0 {
            return fail("layer widths must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return fail("dropout rate must lie in [0, 1)");
        }
        Ok(())
    }

    /// Flattened feature count after the convolutional stack.
    pub fn flat_dim(&self) -> usize {
        self.conv2_channels * self.input_side * self.input_side
    }

    pub fn param_count(&self) -> usize {
        self.layout().total
    }

    fn conv1_dims(&self) -> ConvDims {
        ConvDims {
            channels_in: 1,
            channels_out: self.conv1_channels,
            side: self.input_side,
            kernel: self.kernel,
        }
    }

    fn conv2_dims(&self) -> ConvDims {
        ConvDims {
            channels_in: self.conv1_channels,
            channels_out: self.conv2_channels,
            side: self.input_side,
            kernel: self.kernel,
        }
    }

    fn layout(&self) -> Layout {
        let k2 = self.kernel * self.kernel;
        let sizes = [
            self.conv1_channels * k2,                // conv1 weights (1 input channel)
            self.conv1_channels,                     // conv1 bias
            self.conv2_channels * self.conv1_channels * k2, // conv2 weights
            self.conv2_channels,                     // conv2 bias
            self.fc1_width * self.flat_dim(),        // fc1 weights
            self.fc1_width,                          // fc1 bias
            self.fc2_width * self.fc1_width,         // fc2 weights
            self.fc2_width,                          // fc2 bias
            self.classes * self.fc2_width,           // fc3 weights
            self.classes,                            // fc3 bias
        ];
        let mut ranges = Vec::with_capacity(sizes.len());
        let mut offset = 0;
        for size in sizes {
            ranges.push(offset..offset + size);
            offset += size;
        }
        Layout {
            ranges,
            total: offset,
        }
    }
}

struct Layout {
    ranges: Vec<Range<usize>>,
    total: usize,
}

#[derive(Clone, Copy)]
enum Segment {
    Conv1W = 0,
    Conv1B,
    Conv2W,
    Conv2B,
    Fc1W,
    Fc1B,
    Fc2W,
    Fc2B,
    Fc3W,
    Fc3B,
}

/// All model parameters in one flat buffer plus the architecture that
/// gives the buffer its meaning.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    arch: Architecture,
    flat: Vec<f64>,
}

impl ModelParams {
    /// He-style fan-in uniform initialization of the weights from the
    /// seeded generator (one stream, segments in layout order); biases
    /// start at zero.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self, NnError> {
        arch.validate()?;
        let layout = arch.layout();
        let mut flat = vec![0.0; layout.total];
        let mut rng = rng_from_seed(seed);
        let k2 = arch.kernel * arch.kernel;
        let weight_fans = [
            (Segment::Conv1W, k2),
            (Segment::Conv2W, arch.conv1_channels * k2),
            (Segment::Fc1W, arch.flat_dim()),
            (Segment::Fc2W, arch.fc1_width),
            (Segment::Fc3W, arch.fc2_width),
        ];
        for (segment, fan_in) in weight_fans {
            let bound = (6.0 / fan_in as f64).sqrt();
            for v in &mut flat[layout.ranges[segment as usize].clone()] {
                *v = (2.0 * next_unit(&mut rng) - 1.0) * bound;
            }
        }
        Ok(Self { arch, flat })
    }

    pub fn zeros(arch: Architecture) -> Result<Self, NnError> {
        arch.validate()?;
        let total = arch.param_count();
        Ok(Self {
            arch,
            flat: vec![0.0; total],
        })
    }

    /// Rebuild from a flat vector in the fixed segment order; inverse of
    /// [`ModelParams::flatten`].
    pub fn from_flat(arch: Architecture, flat: Vec<f64>) -> Result<Self, NnError> {
        arch.validate()?;
        let expected = arch.param_count();
        if flat.len() != expected {
            return Err(NnError::ParamLength {
                expected,
                actual: flat.len(),
            });
        }
        Ok(Self { arch, flat })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.flat
    }

    pub fn param_count(&self) -> usize {
        self.flat.len()
    }

    /// The parameters as a gradient-shaped vector, in layout order.
    pub fn flatten(&self) -> GradientVector {
        GradientVector::new(self.flat.clone())
    }

    fn segment(&self, segment: Segment) -> &[f64] {
        &self.flat[self.arch.layout().ranges[segment as usize].clone()]
    }

    /// Versioned plain-binary checkpoint: magic, version, architecture
    /// fields, length prefix, then little-endian doubles.
    pub fn save(&self, path: &Path) -> Result<(), NnError> {
        let mut bytes = Vec::with_capacity(64 + self.flat.len() * 8);
        bytes.extend_from_slice(CHECKPOINT_MAGIC);
        bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        for field in [
            self.arch.input_side,
            self.arch.conv1_channels,
            self.arch.conv2_channels,
            self.arch.kernel,
            self.arch.fc1_width,
            self.arch.fc2_width,
            self.arch.classes,
        ] {
            bytes.extend_from_slice(&(field as u32).to_le_bytes());
        }
        bytes.extend_from_slice(&self.arch.dropout_rate.to_le_bytes());
        bytes.extend_from_slice(&(self.flat.len() as u64).to_le_bytes());
        for v in &self.flat {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(path, bytes).map_err(|e| io_err(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, NnError> {
        let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
        let fail = |reason: &str| NnError::Corrupt(format!("{}: {reason}", path.display()));
        if bytes.len() < 56 {
            return Err(fail("header truncated"));
        }
        if &bytes[0..8] != CHECKPOINT_MAGIC {
            return Err(fail("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(fail(&format!("unsupported version {version}")));
        }
        let mut fields = [0usize; 7];
        for (i, field) in fields.iter_mut().enumerate() {
            let start = 12 + i * 4;
            *field = u32::from_le_bytes(bytes[start..start + 4].try_into().unwrap()) as usize;
        }
        let dropout_rate = f64::from_le_bytes(bytes[40..48].try_into().unwrap());
        let arch = Architecture {
            input_side: fields[0],
            conv1_channels: fields[1],
            conv2_channels: fields[2],
            kernel: fields[3],
            fc1_width: fields[4],
            fc2_width: fields[5],
            classes: fields[6],
            dropout_rate,
        };
        let len = u64::from_le_bytes(bytes[48..56].try_into().unwrap()) as usize;
        if bytes.len() != 56 + len * 8 {
            return Err(fail("payload length does not match length prefix"));
        }
        let flat: Vec<f64> = bytes[56..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::from_flat(arch, flat)
    }
}

/// Flat parameter-gradient vector in the model's segment order.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientVector(Vec<f64>);

impl GradientVector {
    pub fn new(components: Vec<f64>) -> Self {
        Self(components)
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    /// Euclidean norm.
    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

struct ForwardPass {
    batch: usize,
    conv1_act: Vec<f64>,
    conv2_act: Vec<f64>,
    dropout: Option<Vec<f64>>,
    dropped: Vec<f64>,
    fc1_act: Vec<f64>,
    fc2_act: Vec<f64>,
    logits: Vec<f64>,
}

fn batch_size(params: &ModelParams, batch: &Tensor) -> Result<usize, NnError> {
    let side = params.arch.input_side;
    match batch.shape() {
        [n, 1, h, w] if *h == side && *w == side => Ok(*n),
        _ => Err(NnError::BatchShape {
            shape: batch.shape().to_vec(),
            side,
        }),
    }
}

fn forward_pass(
    params: &ModelParams,
    batch: &Tensor,
    train_mode: bool,
    dropout_seed: u64,
) -> Result<ForwardPass, NnError> {
    let n = batch_size(params, batch)?;
    if n == 0 {
        return Err(NnError::EmptyBatch);
    }
    let arch = &params.arch;

    let dims1 = arch.conv1_dims();
    let mut conv1_act = vec![0.0; n * dims1.output_len()];
    conv_forward(
        dims1,
        batch.data(),
        params.segment(Segment::Conv1W),
        params.segment(Segment::Conv1B),
        n,
        &mut conv1_act,
    );
    relu_forward(&mut conv1_act);

    let dims2 = arch.conv2_dims();
    let mut conv2_act = vec![0.0; n * dims2.output_len()];
    conv_forward(
        dims2,
        &conv1_act,
        params.segment(Segment::Conv2W),
        params.segment(Segment::Conv2B),
        n,
        &mut conv2_act,
    );
    relu_forward(&mut conv2_act);

    let (dropout, dropped) = if train_mode {
        let mask = dropout_mask(conv2_act.len(), arch.dropout_rate, dropout_seed);
        let dropped = conv2_act
            .iter()
            .zip(&mask)
            .map(|(a, m)| a * m)
            .collect::<Vec<_>>();
        (Some(mask), dropped)
    } else {
        (None, conv2_act.clone())
    };

    let mut fc1_act = vec![0.0; n * arch.fc1_width];
    fc_forward(
        &dropped,
        n,
        arch.flat_dim(),
        params.segment(Segment::Fc1W),
        params.segment(Segment::Fc1B),
        arch.fc1_width,
        &mut fc1_act,
    );
    relu_forward(&mut fc1_act);

    let mut fc2_act = vec![0.0; n * arch.fc2_width];
    fc_forward(
        &fc1_act,
        n,
        arch.fc1_width,
        params.segment(Segment::Fc2W),
        params.segment(Segment::Fc2B),
        arch.fc2_width,
        &mut fc2_act,
    );
    relu_forward(&mut fc2_act);

    let mut logits = vec![0.0; n * arch.classes];
    fc_forward(
        &fc2_act,
        n,
        arch.fc2_width,
        params.segment(Segment::Fc3W),
        params.segment(Segment::Fc3B),
        arch.classes,
        &mut logits,
    );

    Ok(ForwardPass {
        batch: n,
        conv1_act,
        conv2_act,
        dropout,
        dropped,
        fc1_act,
        fc2_act,
        logits,
    })
}

/// Run the network on a `[N, 1, S, S]` batch and return `[N, 10]` logits.
/// Dropout fires only in train mode, keyed by `dropout_seed`.
pub fn forward(
    params: &ModelParams,
    batch: &Tensor,
    train_mode: bool,
    dropout_seed: u64,
) -> Result<Tensor, NnError> {
    let pass = forward_pass(params, batch, train_mode, dropout_seed)?;
    Tensor::new(vec![pass.batch, params.arch.classes], pass.logits)
}

fn check_labels(labels: &[u8], samples: usize, classes: usize) -> Result<(), NnError> {
    if labels.len() != samples {
        return Err(NnError::LabelCount {
            labels: labels.len(),
            samples,
        });
    }
    for (index, &value) in labels.iter().enumerate() {
        if value as usize >= classes {
            return Err(NnError::LabelOutOfRange { index, value });
        }
    }
    Ok(())
}

/// Mean softmax cross-entropy over the batch and its gradient with respect
/// to every parameter, computed by reverse-mode backprop through each
/// layer.
pub fn loss_and_grad(
    params: &ModelParams,
    batch: &Tensor,
    labels: &[u8],
    dropout_seed: u64,
) -> Result<(f64, GradientVector), NnError> {
    let arch = &params.arch;
    let pass = forward_pass(params, batch, true, dropout_seed)?;
    let n = pass.batch;
    check_labels(labels, n, arch.classes)?;
    let classes = arch.classes;

    // Softmax cross-entropy with log-sum-exp stabilization.
    let mut loss_sum = 0.0;
    let mut d_logits = vec![0.0; n * classes];
    for (i, row) in pass.logits.chunks_exact(classes).enumerate() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = row.iter().map(|&z| (z - max).exp()).sum();
        let lse = max + sum_exp.ln();
        let sample_loss = lse - row[labels[i] as usize];
        if !sample_loss.is_finite() {
            return Err(NnError::NonFiniteLoss { batch_index: i });
        }
        loss_sum += sample_loss;
        let d_row = &mut d_logits[i * classes..(i + 1) * classes];
        for (c, (d, &z)) in d_row.iter_mut().zip(row).enumerate() {
            let softmax = (z - lse).exp();
            let target = if c == labels[i] as usize { 1.0 } else { 0.0 };
            *d = (softmax - target) / n as f64;
        }
    }
    let loss = loss_sum / n as f64;

    let (mut d_fc2, d_w3, d_b3) = fc_backward(
        &pass.fc2_act,
        n,
        arch.fc2_width,
        params.segment(Segment::Fc3W),
        classes,
        &d_logits,
    );
    relu_backward(&pass.fc2_act, &mut d_fc2);

    let (mut d_fc1, d_w2, d_b2) = fc_backward(
        &pass.fc1_act,
        n,
        arch.fc1_width,
        params.segment(Segment::Fc2W),
        arch.fc2_width,
        &d_fc2,
    );
    relu_backward(&pass.fc1_act, &mut d_fc1);

    let (mut d_dropped, d_w1, d_b1) = fc_backward(
        &pass.dropped,
        n,
        arch.flat_dim(),
        params.segment(Segment::Fc1W),
        arch.fc1_width,
        &d_fc1,
    );
    if let Some(mask) = &pass.dropout {
        for (d, m) in d_dropped.iter_mut().zip(mask) {
            *d *= m;
        }
    }
    relu_backward(&pass.conv2_act, &mut d_dropped);

    let (mut d_conv1, d_cw2, d_cb2) = conv_backward(
        arch.conv2_dims(),
        &pass.conv1_act,
        params.segment(Segment::Conv2W),
        &d_dropped,
        n,
    );
    relu_backward(&pass.conv1_act, &mut d_conv1);

    let (_, d_cw1, d_cb1) = conv_backward(
        arch.conv1_dims(),
        batch.data(),
        params.segment(Segment::Conv1W),
        &d_conv1,
        n,
    );

    let mut gradient = Vec::with_capacity(params.param_count());
    for segment in [d_cw1, d_cb1, d_cw2, d_cb2, d_w1, d_b1, d_w2, d_b2, d_w3, d_b3] {
        gradient.extend_from_slice(&segment);
    }
    debug_assert_eq!(gradient.len(), params.param_count());
    Ok((loss, GradientVector::new(gradient)))
}

/// One plain SGD step: every parameter moves by `-lr` times its gradient
/// component, in the fixed flattening order.
pub fn sgd_step(
    params: &ModelParams,
    gradient: &GradientVector,
    learning_rate: f64,
) -> Result<ModelParams, NnError> {
    if gradient.len() != params.param_count() {
        return Err(NnError::GradientLength {
            expected: params.param_count(),
            actual: gradient.len(),
        });
    }
    let flat = params
        .flat
        .iter()
        .zip(gradient.as_slice())
        .map(|(p, g)| p - learning_rate * g)
        .collect();
    Ok(ModelParams {
        arch: params.arch,
        flat,
    })
}

/// Fraction of samples whose argmax logit matches the label, dropout
/// disabled. Ties resolve to the lowest class index.
pub fn evaluate_accuracy(
    params: &ModelParams,
    images: &Tensor,
    labels: &[u8],
) -> Result<f64, NnError> {
    let n = batch_size(params, images)?;
    check_labels(labels, n, params.arch.classes)?;
    if n == 0 {
        return Err(NnError::EmptyDataset);
    }
    let side = params.arch.input_side;
    let sample_len = side * side;
    let chunk = 256;
    let correct: usize = images
        .data()
        .par_chunks(chunk * sample_len)
        .zip(labels.par_chunks(chunk))
        .map(|(image_chunk, label_chunk)| {
            let count = label_chunk.len();
            let batch = Tensor::new(vec![count, 1, side, side], image_chunk.to_vec())
                .expect("chunk shape is consistent by construction");
            let logits = forward(params, &batch, false, 0)
                .expect("forward cannot fail on a validated chunk");
            logits
                .data()
                .chunks_exact(params.arch.classes)
                .zip(label_chunk)
                .filter(|(row, &label)| {
                    let mut best = 0;
                    for (c, &z) in row.iter().enumerate() {
                        if z > row[best] {
                            best = c;
                        }
                    }
                    best == label as usize
                })
                .count()
        })
        .sum();
    Ok(correct as f64 / n as f64)
}
