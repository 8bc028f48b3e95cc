use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

use super::patches::{col2im_add, im2col};
use super::{expect_shape, fold_patches, glorot, nchw, Param, ParamGroup, UnrolledInput};

/// Locally connected response: every position has its own kernel.
///
/// `weights` is `[F, m, K]` (or `[m, K]` for a single filter); returns
/// `[F, out_h, out_w]` with `y[f, p] = <W[f, p], P_p>`.
pub fn local_forward(u: &UnrolledInput, weights: &Tensor) -> Result<Tensor> {
    let f = local_filters(u, weights)?;
    let (m, k) = (u.num_patches(), u.patch_len());
    let p = u.patches.data();
    let w = weights.data();
    let mut out = vec![0.0; f * m];
    for fi in 0..f {
        for pi in 0..m {
            out[fi * m + pi] = dot(&w[(fi * m + pi) * k..(fi * m + pi + 1) * k], &p[pi * k..(pi + 1) * k]);
        }
    }
    let (oh, ow) = u.out_hw();
    Tensor::new(vec![f, oh, ow], out)
}

#[derive(Clone, Debug)]
pub struct LocalGrads {
    pub weights: Tensor,
    pub input: Tensor,
}

pub fn local_backward(u: &UnrolledInput, weights: &Tensor, upstream: &Tensor) -> Result<LocalGrads> {
    let f = local_filters(u, weights)?;
    let (m, k) = (u.num_patches(), u.patch_len());
    let (oh, ow) = u.out_hw();
    expect_shape(upstream, &[f, oh, ow], "local_backward upstream")?;
    let p = u.patches.data();
    let w = weights.data();
    let g = upstream.data();
    let mut gw = vec![0.0; f * m * k];
    let mut gp = vec![0.0; m * k];
    for fi in 0..f {
        for pi in 0..m {
            let gy = g[fi * m + pi];
            let row = (fi * m + pi) * k;
            for j in 0..k {
                gw[row + j] = gy * p[pi * k + j];
                gp[pi * k + j] += gy * w[row + j];
            }
        }
    }
    let gp = Tensor::new(vec![m, k], gp)?;
    Ok(LocalGrads {
        weights: Tensor::new(weights.shape().to_vec(), gw)?,
        input: fold_patches(&gp, u)?,
    })
}

fn local_filters(u: &UnrolledInput, weights: &Tensor) -> Result<usize> {
    let (m, k) = (u.num_patches(), u.patch_len());
    match *weights.shape() {
        [mm, kk] if mm == m && kk == k => Ok(1),
        [f, mm, kk] if mm == m && kk == k => Ok(f),
        _ => Err(Error::dim(format!(
            "local weights {:?} do not match {m} patches of length {k}",
            weights.shape()
        ))),
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Batched locally connected layer (untied weights) with a per-filter bias.
#[derive(Clone, Debug)]
pub struct Local2d {
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    in_hw: (usize, usize),
    pub weight: Param,
    pub bias: Param,
    cols: Vec<f64>,
    batch: usize,
}

impl Local2d {
    pub fn new(
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        in_hw: (usize, usize),
        rng: &mut Rng,
    ) -> Result<Self> {
        if kernel == 0 || kernel > in_hw.0 || kernel > in_hw.1 {
            return Err(Error::dim(format!("kernel {kernel} does not fit {in_hw:?}")));
        }
        let m = (in_hw.0 - kernel + 1) * (in_hw.1 - kernel + 1);
        let k = in_ch * kernel * kernel;
        let w = glorot(&[out_ch, m, k], k, out_ch * kernel * kernel, rng);
        Ok(Local2d {
            in_ch,
            out_ch,
            kernel,
            in_hw,
            weight: Param::new(format!("{name}.weight"), w, ParamGroup::Main),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros(&[out_ch]), ParamGroup::Main),
            cols: Vec::new(),
            batch: 0,
        })
    }

    pub fn out_hw(&self) -> (usize, usize) {
        (self.in_hw.0 - self.kernel + 1, self.in_hw.1 - self.kernel + 1)
    }

    fn mk(&self) -> (usize, usize) {
        let (oh, ow) = self.out_hw();
        (oh * ow, self.in_ch * self.kernel * self.kernel)
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = nchw(x, "Local2d")?;
        if c != self.in_ch || (h, w) != self.in_hw {
            return Err(Error::dim(format!("Local2d got input {:?}", x.shape())));
        }
        let (m, k) = self.mk();
        let f = self.out_ch;
        self.cols.resize(n * m * k, 0.0);
        self.batch = n;
        let wt = self.weight.value.data();
        let bias = self.bias.value.data();
        let mut out = vec![0.0; n * f * m];
        let plane = c * h * w;
        for i in 0..n {
            let cols = &mut self.cols[i * m * k..(i + 1) * m * k];
            im2col(&x.data()[i * plane..(i + 1) * plane], c, h, w, self.kernel, self.kernel, cols);
            for fi in 0..f {
                let y = &mut out[(i * f + fi) * m..(i * f + fi + 1) * m];
                for (pi, yv) in y.iter_mut().enumerate() {
                    *yv = dot(&wt[(fi * m + pi) * k..(fi * m + pi + 1) * k], &cols[pi * k..(pi + 1) * k]) + bias[fi];
                }
            }
        }
        let (oh, ow) = self.out_hw();
        Ok(Tensor::from_raw(vec![n, f, oh, ow], out))
    }

    pub fn backward(&mut self, gy: &Tensor, want_input: bool) -> Result<Option<Tensor>> {
        let (oh, ow) = self.out_hw();
        let (n, f) = (self.batch, self.out_ch);
        expect_shape(gy, &[n, f, oh, ow], "Local2d backward")?;
        let (m, k) = self.mk();
        let (h, w) = self.in_hw;
        let plane = self.in_ch * h * w;
        let mut gx = want_input.then(|| vec![0.0; n * plane]);
        let mut gcols = vec![0.0; m * k];
        let wt = self.weight.value.data();
        let gw = self.weight.grad.data_mut();
        let gb = self.bias.grad.data_mut();
        for i in 0..n {
            let cols = &self.cols[i * m * k..(i + 1) * m * k];
            gcols.fill(0.0);
            for fi in 0..f {
                let g = &gy.data()[(i * f + fi) * m..(i * f + fi + 1) * m];
                gb[fi] += g.iter().sum::<f64>();
                for (pi, &gv) in g.iter().enumerate() {
                    if gv == 0.0 {
                        continue;
                    }
                    let row = (fi * m + pi) * k;
                    for j in 0..k {
                        gw[row + j] += gv * cols[pi * k + j];
                    }
                    if want_input {
                        for j in 0..k {
                            gcols[pi * k + j] += gv * wt[row + j];
                        }
                    }
                }
            }
            if let Some(gx) = gx.as_mut() {
                col2im_add(&gcols, self.in_ch, h, w, self.kernel, self.kernel, &mut gx[i * plane..(i + 1) * plane]);
            }
        }
        Ok(gx.map(|d| Tensor::from_raw(vec![n, self.in_ch, h, w], d)))
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }
}
