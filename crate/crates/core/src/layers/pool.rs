use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{chw, expect_shape, nchw};

fn pooled_hw(h: usize, w: usize) -> Result<(usize, usize)> {
    if !h.is_multiple_of(2) || !w.is_multiple_of(2) || h == 0 || w == 0 {
        return Err(Error::dim(format!("2x2 pooling needs even extents, got {h}x{w}")));
    }
    Ok((h / 2, w / 2))
}

/// Pools `c` planes of `h x w`; writes maxima and the flat input index of
/// each winner. Ties go to the first element in row-major window order.
fn pool_planes(x: &[f64], c: usize, h: usize, w: usize, out: &mut [f64], arg: &mut [usize]) {
    let (oh, ow) = (h / 2, w / 2);
    for ch in 0..c {
        let base = ch * h * w;
        for r in 0..oh {
            for q in 0..ow {
                let mut best = base + 2 * r * w + 2 * q;
                for idx in [
                    base + 2 * r * w + 2 * q + 1,
                    base + (2 * r + 1) * w + 2 * q,
                    base + (2 * r + 1) * w + 2 * q + 1,
                ] {
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                let o = (ch * oh + r) * ow + q;
                out[o] = x[best];
                arg[o] = best;
            }
        }
    }
}

/// 2x2 stride-2 max pooling of one image (`[H, W]` or `[C, H, W]`).
pub fn maxpool_forward(x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = chw(x, "maxpool_forward")?;
    let (oh, ow) = pooled_hw(h, w)?;
    let mut out = vec![0.0; c * oh * ow];
    let mut arg = vec![0; c * oh * ow];
    pool_planes(x.data(), c, h, w, &mut out, &mut arg);
    let shape = if x.rank() == 3 { vec![c, oh, ow] } else { vec![oh, ow] };
    Tensor::new(shape, out)
}

/// Routes each upstream value to its window's argmax.
pub fn maxpool_backward(x: &Tensor, upstream: &Tensor) -> Result<Tensor> {
    let (c, h, w) = chw(x, "maxpool_backward")?;
    let (oh, ow) = pooled_hw(h, w)?;
    if upstream.len() != c * oh * ow {
        return Err(Error::dim(format!(
            "maxpool_backward upstream {:?} does not match input {:?}",
            upstream.shape(),
            x.shape()
        )));
    }
    let mut out = vec![0.0; c * oh * ow];
    let mut arg = vec![0; c * oh * ow];
    pool_planes(x.data(), c, h, w, &mut out, &mut arg);
    let mut gx = vec![0.0; x.len()];
    for (&a, &g) in arg.iter().zip(upstream.data()) {
        gx[a] += g;
    }
    Tensor::new(x.shape().to_vec(), gx)
}

/// Batched 2x2 max pooling over `[N, C, H, W]`.
#[derive(Clone, Debug, Default)]
pub struct MaxPool2 {
    in_shape: Vec<usize>,
    argmax: Vec<usize>,
}

impl MaxPool2 {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = nchw(x, "MaxPool2")?;
        let (oh, ow) = pooled_hw(h, w)?;
        let mut out = vec![0.0; n * c * oh * ow];
        self.argmax.resize(out.len(), 0);
        pool_planes(x.data(), n * c, h, w, &mut out, &mut self.argmax);
        self.in_shape = x.shape().to_vec();
        Ok(Tensor::from_raw(vec![n, c, oh, ow], out))
    }

    pub fn backward(&self, gy: &Tensor) -> Result<Tensor> {
        let &[n, c, h, w] = self.in_shape.as_slice() else {
            return Err(Error::Contract("MaxPool2 backward before forward".into()));
        };
        expect_shape(gy, &[n, c, h / 2, w / 2], "MaxPool2 backward")?;
        let mut gx = vec![0.0; n * c * h * w];
        for (&a, &g) in self.argmax.iter().zip(gy.data()) {
            gx[a] += g;
        }
        Ok(Tensor::from_raw(self.in_shape.clone(), gx))
    }

    /// Winning input index per output cell from the last forward pass.
    pub fn argmax(&self) -> &[usize] {
        &self.argmax
    }
}
