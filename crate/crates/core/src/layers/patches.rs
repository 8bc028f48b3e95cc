use crate::error::{Error, Result};
use crate::smoother::PatchGrid;
use crate::tensor::Tensor;

use super::{chw, kernel_hw};

/// Input rewritten as one row per receptive field.
///
/// `patches` is `m x K` with `K = C * kh * kw`; each row is ordered by
/// channel, then kernel row, then kernel column. Patch `p = r * out_w + c`
/// reads the window whose top-left corner is `(r, c)`. Stride 1, no padding.
#[derive(Clone, Debug)]
pub struct UnrolledInput {
    pub patches: Tensor,
    pub grid: PatchGrid,
    pub input_shape: Vec<usize>,
    pub channels: usize,
    pub kernel: (usize, usize),
}

impl UnrolledInput {
    pub fn num_patches(&self) -> usize {
        self.patches.shape()[0]
    }

    pub fn patch_len(&self) -> usize {
        self.patches.shape()[1]
    }

    pub fn out_hw(&self) -> (usize, usize) {
        (self.grid.rows(), self.grid.cols())
    }
}

/// Unrolls `x` (`[n]`, `[H, W]` or `[C, H, W]`) into patches of extent `kernel`.
pub fn extract_patches(x: &Tensor, kernel: &[usize]) -> Result<UnrolledInput> {
    let (c, h, w) = chw(x, "extract_patches")?;
    let (kh, kw) = kernel_hw(kernel, h, w)?;
    let (oh, ow) = (h - kh + 1, w - kw + 1);
    let k = c * kh * kw;
    let mut cols = vec![0.0; oh * ow * k];
    im2col(x.data(), c, h, w, kh, kw, &mut cols);
    Ok(UnrolledInput {
        patches: Tensor::from_raw(vec![oh * ow, k], cols),
        grid: PatchGrid::new(oh, ow)?,
        input_shape: x.shape().to_vec(),
        channels: c,
        kernel: (kh, kw),
    })
}

/// Adjoint of [`extract_patches`]: scatters per-patch gradients back onto
/// the input, summing where receptive fields overlap.
pub fn fold_patches(grad_patches: &Tensor, like: &UnrolledInput) -> Result<Tensor> {
    if grad_patches.shape() != like.patches.shape() {
        return Err(Error::dim(format!(
            "fold_patches: expected {:?}, got {:?}",
            like.patches.shape(),
            grad_patches.shape()
        )));
    }
    let (oh, ow) = like.out_hw();
    let (kh, kw) = like.kernel;
    let (h, w) = (oh + kh - 1, ow + kw - 1);
    let mut gx = vec![0.0; like.channels * h * w];
    col2im_add(grad_patches.data(), like.channels, h, w, kh, kw, &mut gx);
    Ok(Tensor::from_raw(like.input_shape.clone(), gx))
}

/// Dense `[m, C*kh*kw]` patch matrix for one `[C, H, W]` image.
pub(crate) fn im2col(x: &[f64], c: usize, h: usize, w: usize, kh: usize, kw: usize, out: &mut [f64]) {
    let (oh, ow) = (h - kh + 1, w - kw + 1);
    let k = c * kh * kw;
    debug_assert_eq!(out.len(), oh * ow * k);
    for r in 0..oh {
        for q in 0..ow {
            let row = &mut out[(r * ow + q) * k..(r * ow + q + 1) * k];
            let mut j = 0;
            for ch in 0..c {
                let plane = &x[ch * h * w..(ch + 1) * h * w];
                for dy in 0..kh {
                    let src = &plane[(r + dy) * w + q..(r + dy) * w + q + kw];
                    row[j..j + kw].copy_from_slice(src);
                    j += kw;
                }
            }
        }
    }
}

pub(crate) fn col2im_add(cols: &[f64], c: usize, h: usize, w: usize, kh: usize, kw: usize, gx: &mut [f64]) {
    let (oh, ow) = (h - kh + 1, w - kw + 1);
    let k = c * kh * kw;
    for r in 0..oh {
        for q in 0..ow {
            let row = &cols[(r * ow + q) * k..(r * ow + q + 1) * k];
            let mut j = 0;
            for ch in 0..c {
                let plane = &mut gx[ch * h * w..(ch + 1) * h * w];
                for dy in 0..kh {
                    let dst = &mut plane[(r + dy) * w + q..(r + dy) * w + q + kw];
                    for (d, s) in dst.iter_mut().zip(&row[j..j + kw]) {
                        *d += s;
                    }
                    j += kw;
                }
            }
        }
    }
}
