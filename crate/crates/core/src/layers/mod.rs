//! Network layers with hand-derived backward passes.
//!
//! Each layer family offers pure single-image functions (`conv_forward`,
//! `lsnn_forward`, ...) and a batched, caching layer struct used by
//! [`crate::model::Network`]. Batched activations are `[N, C, H, W]`.

mod conv;
mod dense;
mod local;
mod loss;
mod lsnn;
mod paramnet;
mod patches;
mod pool;

pub use conv::{conv_backward, conv_forward, Conv2d, ConvGrads};
pub use dense::{fc_backward, fc_forward, Dense, DenseGrads, Dropout, Relu};
pub use local::{local_backward, local_forward, Local2d, LocalGrads};
pub use loss::{sigmoid_bce, softmax_xent};
pub use lsnn::{
    lsnn_backward, lsnn_forward, LsnnBackward, LsnnGrads, LsnnLayer, LsnnLayerSpec, LsnnWeights,
    SmootherMode,
};
pub use paramnet::{ParamNet, ParameterNetSpec};
pub use patches::{extract_patches, fold_patches, UnrolledInput};
pub use pool::{maxpool_backward, maxpool_forward, MaxPool2};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Learning-rate group of a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    /// Kernels, classifier weights, biases.
    Main,
    /// Parameter network and free Gaussian parameters; trained at a reduced rate.
    Smoother,
}

/// A named trainable tensor with its gradient accumulator.
#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub group: ParamGroup,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor, group: ParamGroup) -> Self {
        let grad = Tensor::zeros(value.shape());
        Param {
            name: name.into(),
            value,
            grad,
            group,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().fill(0.0);
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Training or inference behaviour (dropout only).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Glorot-uniform tensor: `U(-a, a)` with `a = sqrt(6 / (fan_in + fan_out))`.
pub fn glorot(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut Rng) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.uniform(-a, a)).collect();
    Tensor::from_raw(shape.to_vec(), data)
}

pub(crate) fn expect_shape(t: &Tensor, want: &[usize], what: &str) -> Result<()> {
    if t.shape() != want {
        return Err(Error::dim(format!(
            "{what}: expected shape {want:?}, got {:?}",
            t.shape()
        )));
    }
    Ok(())
}

/// Splits `[N, C, H, W]` (or `[C, H, W]`, `[H, W]`) into `(n, c, h, w)`.
pub(crate) fn nchw(t: &Tensor, what: &str) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(Error::dim(format!(
            "{what}: expected [N, C, H, W], got {:?}",
            t.shape()
        ))),
    }
}

/// Interprets a single image as `(c, h, w)`; 1-D inputs become a single row.
pub(crate) fn chw(t: &Tensor, what: &str) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [w] => Ok((1, 1, w)),
        [h, w] => Ok((1, h, w)),
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::dim(format!(
            "{what}: expected a 1-D, 2-D or [C, H, W] input, got {:?}",
            t.shape()
        ))),
    }
}

/// Kernel extents for an input of the given rank (1-D inputs take `[k]`).
pub(crate) fn kernel_hw(kernel: &[usize], h: usize, w: usize) -> Result<(usize, usize)> {
    let (kh, kw) = match *kernel {
        [k] if h == 1 => (1, k),
        [k] => (k, k),
        [kh, kw] => (kh, kw),
        _ => return Err(Error::dim(format!("bad kernel size {kernel:?}"))),
    };
    if kh == 0 || kw == 0 || kh > h || kw > w {
        return Err(Error::dim(format!(
            "kernel {kh}x{kw} does not fit input {h}x{w}"
        )));
    }
    Ok((kh, kw))
}
