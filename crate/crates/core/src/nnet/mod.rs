//! Minimal trainable CNN engine.
//!
//! Tensors, layers (conv / relu / maxpool / fc), RoI max pooling, losses,
//! SGD-with-momentum, finite-difference gradient verification, and byte
//! codecs for persistence. Everything is plain `f64` and single-threaded;
//! identical seeds and inputs give bit-identical results. A `Sequential`
//! is immutable during forward, so inference may run from many threads.

pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod optim;
pub mod roipool;
pub mod serial;
pub mod tensor;

pub use gradcheck::{grad_check, grad_check_against, GradCheckReport};
pub use layers::{xavier_uniform, Conv2d, Fc, Layer, MaxPool2d, SeqGrads, Sequential, Trace};
pub use loss::{smooth_l1, softmax, softmax_ce_loss};
pub use optim::SgdmState;
pub use roipool::{roi_maxpool, roi_maxpool_backward, RoiPoolTrace};
pub use tensor::Tensor;

use rand::Rng;

/// The shared convolutional backbone: `blocks` repetitions of
/// [conv 3x3 `channels`, relu, maxpool 2x2]. With 32x32 inputs and two
/// blocks the output map is `channels x 8 x 8` (stride 4).
pub fn conv_backbone(in_channels: usize, channels: usize, blocks: usize, rng: &mut impl Rng) -> Sequential {
    let mut layers = Vec::with_capacity(blocks * 3 + 1);
    // Standard input normalization: unit-interval pixels to roughly
    // zero-mean, unit-variance values.
    layers.push(Layer::InputNorm { mean: 0.5, std: 0.225 });
    let mut c_in = in_channels;
    for _ in 0..blocks {
        layers.push(Layer::Conv2d(Conv2d::new(c_in, channels, 3, 1, 1, rng)));
        layers.push(Layer::Relu);
        layers.push(Layer::MaxPool2d(MaxPool2d::new(2, 2)));
        c_in = channels;
    }
    Sequential::new(layers)
}

/// Total stride of [`conv_backbone`] (pixels per feature-map cell).
pub fn backbone_stride(blocks: usize) -> usize {
    1 << blocks
}
