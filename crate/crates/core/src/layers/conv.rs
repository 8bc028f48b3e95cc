use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{gemm, Tensor};

use super::patches::{col2im_add, im2col};
use super::{chw, glorot, nchw, Param, ParamGroup};

/// Valid cross-correlation of one image with `F` shared kernels.
///
/// `x` is `[C, H, W]` (or `[H, W]`, `[n]`), `kernel` is `[F, C, kh, kw]`.
/// Returns `[F, H - kh + 1, W - kw + 1]`.
pub fn conv_forward(x: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    let geo = ConvGeometry::new(x, kernel)?;
    let mut cols = vec![0.0; geo.m() * geo.k()];
    im2col(x.data(), geo.c, geo.h, geo.w, geo.kh, geo.kw, &mut cols);
    let mut out = vec![0.0; geo.f * geo.m()];
    conv_cols_forward(kernel.data(), &cols, geo.f, geo.k(), geo.m(), &mut out);
    Tensor::new(vec![geo.f, geo.oh(), geo.ow()], out)
}

#[derive(Clone, Debug)]
pub struct ConvGrads {
    pub kernel: Tensor,
    pub input: Tensor,
}

/// Gradients of `<upstream, conv_forward(x, kernel)>`.
pub fn conv_backward(x: &Tensor, kernel: &Tensor, upstream: &Tensor) -> Result<ConvGrads> {
    let geo = ConvGeometry::new(x, kernel)?;
    super::expect_shape(upstream, &[geo.f, geo.oh(), geo.ow()], "conv_backward upstream")?;
    let (m, k) = (geo.m(), geo.k());
    let mut cols = vec![0.0; m * k];
    im2col(x.data(), geo.c, geo.h, geo.w, geo.kh, geo.kw, &mut cols);
    let mut gk = vec![0.0; geo.f * k];
    let mut gcols = vec![0.0; m * k];
    conv_cols_backward(kernel.data(), &cols, upstream.data(), geo.f, k, m, &mut gk, Some(&mut gcols));
    let mut gx = vec![0.0; x.len()];
    col2im_add(&gcols, geo.c, geo.h, geo.w, geo.kh, geo.kw, &mut gx);
    Ok(ConvGrads {
        kernel: Tensor::new(kernel.shape().to_vec(), gk)?,
        input: Tensor::new(x.shape().to_vec(), gx)?,
    })
}

struct ConvGeometry {
    c: usize,
    h: usize,
    w: usize,
    f: usize,
    kh: usize,
    kw: usize,
}

impl ConvGeometry {
    fn new(x: &Tensor, kernel: &Tensor) -> Result<Self> {
        let (c, h, w) = chw(x, "conv input")?;
        let &[f, kc, kh, kw] = kernel.shape() else {
            return Err(Error::dim(format!(
                "conv kernel must be [F, C, kh, kw], got {:?}",
                kernel.shape()
            )));
        };
        if kc != c || kh > h || kw > w {
            return Err(Error::dim(format!(
                "kernel {:?} incompatible with input {:?}",
                kernel.shape(),
                x.shape()
            )));
        }
        Ok(ConvGeometry { c, h, w, f, kh, kw })
    }

    fn oh(&self) -> usize {
        self.h - self.kh + 1
    }

    fn ow(&self) -> usize {
        self.w - self.kw + 1
    }

    fn m(&self) -> usize {
        self.oh() * self.ow()
    }

    fn k(&self) -> usize {
        self.c * self.kh * self.kw
    }
}

/// `out[F, m] = kernel[F, K] * cols[m, K]^T`.
pub(crate) fn conv_cols_forward(kernel: &[f64], cols: &[f64], f: usize, k: usize, m: usize, out: &mut [f64]) {
    gemm(f, k, m, kernel, [k as isize, 1], cols, [1, k as isize], out, 0.0);
}

/// Accumulates `gk += gy * cols` and, if requested, writes `gcols = gy^T * kernel`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_cols_backward(
    kernel: &[f64],
    cols: &[f64],
    gy: &[f64],
    f: usize,
    k: usize,
    m: usize,
    gk: &mut [f64],
    gcols: Option<&mut [f64]>,
) {
    gemm(f, m, k, gy, [m as isize, 1], cols, [k as isize, 1], gk, 1.0);
    if let Some(gcols) = gcols {
        gemm(m, f, k, gy, [1, m as isize], kernel, [k as isize, 1], gcols, 0.0);
    }
}

/// Batched convolution layer with a per-filter bias.
#[derive(Clone, Debug)]
pub struct Conv2d {
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    in_hw: (usize, usize),
    pub weight: Param,
    pub bias: Param,
    cols: Vec<f64>,
    batch: usize,
}

impl Conv2d {
    pub fn new(
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        in_hw: (usize, usize),
        group: ParamGroup,
        rng: &mut Rng,
    ) -> Result<Self> {
        if kernel == 0 || kernel > in_hw.0 || kernel > in_hw.1 {
            return Err(Error::dim(format!("kernel {kernel} does not fit {in_hw:?}")));
        }
        let fan = kernel * kernel;
        let w = glorot(&[out_ch, in_ch, kernel, kernel], in_ch * fan, out_ch * fan, rng);
        Ok(Conv2d {
            in_ch,
            out_ch,
            kernel,
            in_hw,
            weight: Param::new(format!("{name}.weight"), w, group),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros(&[out_ch]), group),
            cols: Vec::new(),
            batch: 0,
        })
    }

    pub fn out_hw(&self) -> (usize, usize) {
        (self.in_hw.0 - self.kernel + 1, self.in_hw.1 - self.kernel + 1)
    }

    pub fn out_channels(&self) -> usize {
        self.out_ch
    }

    fn k(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = nchw(x, "Conv2d")?;
        if c != self.in_ch || (h, w) != self.in_hw {
            return Err(Error::dim(format!(
                "Conv2d expects [N, {}, {}, {}], got {:?}",
                self.in_ch,
                self.in_hw.0,
                self.in_hw.1,
                x.shape()
            )));
        }
        let (oh, ow) = self.out_hw();
        let (m, k, f) = (oh * ow, self.k(), self.out_ch);
        self.cols.resize(n * m * k, 0.0);
        self.batch = n;
        let mut out = vec![0.0; n * f * m];
        let plane = c * h * w;
        for i in 0..n {
            let cols = &mut self.cols[i * m * k..(i + 1) * m * k];
            im2col(&x.data()[i * plane..(i + 1) * plane], c, h, w, self.kernel, self.kernel, cols);
            let y = &mut out[i * f * m..(i + 1) * f * m];
            conv_cols_forward(self.weight.value.data(), cols, f, k, m, y);
            for (fi, row) in y.chunks_exact_mut(m).enumerate() {
                let b = self.bias.value.data()[fi];
                row.iter_mut().for_each(|v| *v += b);
            }
        }
        Ok(Tensor::from_raw(vec![n, f, oh, ow], out))
    }

    /// Accumulates parameter gradients; returns the input gradient if asked.
    pub fn backward(&mut self, gy: &Tensor, want_input: bool) -> Result<Option<Tensor>> {
        let (oh, ow) = self.out_hw();
        let (n, f) = (self.batch, self.out_ch);
        super::expect_shape(gy, &[n, f, oh, ow], "Conv2d backward")?;
        let (m, k) = (oh * ow, self.k());
        let (h, w) = self.in_hw;
        let mut gx = want_input.then(|| vec![0.0; n * self.in_ch * h * w]);
        let mut gcols = vec![0.0; if want_input { m * k } else { 0 }];
        for i in 0..n {
            let cols = &self.cols[i * m * k..(i + 1) * m * k];
            let g = &gy.data()[i * f * m..(i + 1) * f * m];
            conv_cols_backward(
                self.weight.value.data(),
                cols,
                g,
                f,
                k,
                m,
                self.weight.grad.data_mut(),
                want_input.then_some(gcols.as_mut_slice()),
            );
            for (fi, row) in g.chunks_exact(m).enumerate() {
                self.bias.grad.data_mut()[fi] += row.iter().sum::<f64>();
            }
            if let Some(gx) = gx.as_mut() {
                let plane = self.in_ch * h * w;
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

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::gradcheck::{numeric_gradient, relative_error};

    fn random(shape: &[usize], rng: &mut Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.uniform(-1.0, 1.0)).unwrap()
    }

    #[test]
    fn identity_kernel_center_crops() {
        let mut rng = Rng::new(1);
        let x = random(&[5, 6], &mut rng);
        let mut k = Tensor::zeros(&[1, 1, 3, 3]);
        k.set(&[0, 0, 1, 1], 1.0);
        let y = conv_forward(&x, &k).unwrap();
        assert_eq!(y.shape(), &[1, 3, 4]);
        for r in 0..3 {
            for c in 0..4 {
                assert_eq!(y.get(&[0, r, c]), x.get(&[r + 1, c + 1]));
            }
        }
    }

    #[test]
    fn matches_direct_loops() {
        let mut rng = Rng::new(2);
        let x = random(&[2, 6, 7], &mut rng);
        let k = random(&[3, 2, 3, 2], &mut rng);
        let y = conv_forward(&x, &k).unwrap();
        for f in 0..3 {
            for r in 0..4 {
                for c in 0..6 {
                    let mut s = 0.0;
                    for ch in 0..2 {
                        for dy in 0..3 {
                            for dx in 0..2 {
                                s += k.get(&[f, ch, dy, dx]) * x.get(&[ch, r + dy, c + dx]);
                            }
                        }
                    }
                    assert!((y.get(&[f, r, c]) - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = Rng::new(3);
        for _ in 0..20 {
            let x = random(&[2, 5, 6], &mut rng);
            let k = random(&[2, 2, 3, 3], &mut rng);
            let up = random(&[2, 3, 4], &mut rng);
            let g = conv_backward(&x, &k, &up).unwrap();
            let loss = |x: &Tensor, k: &Tensor| -> f64 {
                let y = conv_forward(x, k).unwrap();
                y.data().iter().zip(up.data()).map(|(a, b)| a * b).sum()
            };
            let nk = numeric_gradient(k.data(), 1e-6, |v| loss(&x, &Tensor::new(k.shape().to_vec(), v.to_vec()).unwrap()));
            let nx = numeric_gradient(x.data(), 1e-6, |v| loss(&Tensor::new(x.shape().to_vec(), v.to_vec()).unwrap(), &k));
            for (a, n) in g.kernel.data().iter().zip(&nk) {
                assert!(relative_error(*a, *n) < 1e-6);
            }
            for (a, n) in g.input.data().iter().zip(&nx) {
                assert!(relative_error(*a, *n) < 1e-6);
            }
        }
    }

    #[test]
    fn batched_layer_agrees_with_pure_op() {
        let mut rng = Rng::new(4);
        let mut layer = Conv2d::new("c", 2, 3, 3, (6, 5), ParamGroup::Main, &mut rng).unwrap();
        layer.bias.value = random(&[3], &mut rng);
        let x = random(&[2, 2, 6, 5], &mut rng);
        let y = layer.forward(&x).unwrap();
        for i in 0..2 {
            let xi = Tensor::new(vec![2, 6, 5], x.data()[i * 60..(i + 1) * 60].to_vec()).unwrap();
            let yi = conv_forward(&xi, &layer.weight.value).unwrap();
            for (j, v) in yi.data().iter().enumerate() {
                let f = j / 12;
                let got = y.data()[i * 36 + j];
                assert!((got - (v + layer.bias.value.data()[f])).abs() < 1e-12);
            }
        }
        let gy = random(&[2, 3, 4, 3], &mut rng);
        let gx = layer.backward(&gy, true).unwrap().unwrap();
        let mut want_k = vec![0.0; layer.weight.len()];
        for i in 0..2 {
            let xi = Tensor::new(vec![2, 6, 5], x.data()[i * 60..(i + 1) * 60].to_vec()).unwrap();
            let gyi = Tensor::new(vec![3, 4, 3], gy.data()[i * 36..(i + 1) * 36].to_vec()).unwrap();
            let g = conv_backward(&xi, &layer.weight.value, &gyi).unwrap();
            want_k.iter_mut().zip(g.kernel.data()).for_each(|(a, b)| *a += b);
            for (a, b) in gx.data()[i * 60..(i + 1) * 60].iter().zip(g.input.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        for (a, b) in layer.weight.grad.data().iter().zip(&want_k) {
            assert!((a - b).abs() < 1e-12);
        }
        let bias_sum: f64 = gy.data()[..12].iter().chain(&gy.data()[36..48]).sum();
        assert!((layer.bias.grad.data()[0] - bias_sum).abs() < 1e-12);
    }
}
