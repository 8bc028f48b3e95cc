//! Locally smoothed layer: a locally connected layer whose per-position
//! filters are a shared kernel scaled by a per-position smoother.
//!
//! For filter `f`, position `p` and factor rank `d`, the effective filter is
//! `W_p = sum_l U[l, p] * V[l]`, so the response is
//! `y[p] = sum_l U[l, p] * <V[l], P_p>`. With a smoother of ones this is a
//! convolution; with a free smoother and `d = 1` it is exactly a locally
//! connected layer whose weight matrix has rank one.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::smoother::{
    normalized_upstream, raw_backward, smoother_forward_into, GaussianGrad, GaussianParams, PatchGrid,
    GAUSSIAN_PARAM_LEN,
};
use crate::tensor::Tensor;

use super::conv::{conv_cols_backward, conv_cols_forward};
use super::patches::{col2im_add, im2col};
use super::{expect_shape, fold_patches, glorot, nchw, Param, ParamGroup, UnrolledInput};

/// Where the smoother values come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SmootherMode {
    /// Fixed all-ones smoother; the layer is a convolution.
    Ones,
    /// `m` free learnable scalars per smoother.
    Free,
    /// Gaussian smoother with learnable mean and precision factor shared by all images.
    Location,
    /// Gaussian smoother whose parameters are supplied per image by a parameter network.
    Content,
}

impl SmootherMode {
    pub fn is_gaussian(self) -> bool {
        matches!(self, SmootherMode::Location | SmootherMode::Content)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LsnnLayerSpec {
    /// Kernel extent per axis `[kh, kw]`.
    pub kernel: [usize; 2],
    pub num_filters: usize,
    /// Number of (smoother, kernel) pairs summed per filter.
    pub factor_rank: usize,
    /// Independent smoother groups sharing the same kernels. Each group
    /// produces its own `num_filters` output maps.
    pub groups: usize,
    pub mode: SmootherMode,
    /// Divide Gaussian smoothers by their sum over positions.
    pub normalize: bool,
}

impl LsnnLayerSpec {
    pub fn new(kernel: usize, num_filters: usize, mode: SmootherMode) -> Self {
        LsnnLayerSpec {
            kernel: [kernel, kernel],
            num_filters,
            factor_rank: 1,
            groups: 1,
            mode,
            normalize: true,
        }
    }

    pub fn validate(&self, in_hw: (usize, usize)) -> Result<()> {
        if self.factor_rank == 0 || self.num_filters == 0 || self.groups == 0 {
            return Err(Error::Config(format!("degenerate LSNN spec {self:?}")));
        }
        let [kh, kw] = self.kernel;
        if kh == 0 || kw == 0 || kh > in_hw.0 || kw > in_hw.1 {
            return Err(Error::dim(format!(
                "kernel {kh}x{kw} does not fit input {}x{}",
                in_hw.0, in_hw.1
            )));
        }
        Ok(())
    }

    /// Number of smoothers: one per (group, filter, rank component).
    pub fn num_smoothers(&self) -> usize {
        self.groups * self.num_filters * self.factor_rank
    }
}

/// Factorized weights of one LSNN application.
///
/// `smoother` is `[F, d, m]` (row `l` is the `l`-th smoother over positions)
/// and `kernel` is `[F, d, K]` (row `l` is the `l`-th kernel).
#[derive(Clone, Debug)]
pub struct LsnnWeights {
    pub smoother: Tensor,
    pub kernel: Tensor,
}

impl LsnnWeights {
    fn dims(&self) -> Result<(usize, usize, usize, usize)> {
        match (self.smoother.shape(), self.kernel.shape()) {
            (&[f, d, m], &[f2, d2, k]) if f == f2 && d == d2 => Ok((f, d, m, k)),
            (s, k) => Err(Error::dim(format!("smoother {s:?} and kernel {k:?} disagree"))),
        }
    }

    /// The full `[F, m, K]` weight matrix `W_p = sum_l U[l, p] V[l]`.
    pub fn materialize(&self) -> Result<Tensor> {
        let (f, d, m, k) = self.dims()?;
        let u = self.smoother.data();
        let v = self.kernel.data();
        let mut w = vec![0.0; f * m * k];
        for fi in 0..f {
            for p in 0..m {
                let row = &mut w[(fi * m + p) * k..(fi * m + p + 1) * k];
                for l in 0..d {
                    let s = u[(fi * d + l) * m + p];
                    for (wj, vj) in row.iter_mut().zip(&v[(fi * d + l) * k..(fi * d + l + 1) * k]) {
                        *wj += s * vj;
                    }
                }
            }
        }
        Tensor::new(vec![f, m, k], w)
    }

    /// Trainable scalars when both factors are free.
    pub fn num_weights(&self) -> usize {
        self.smoother.len() + self.kernel.len()
    }
}

fn check_unrolled(u: &UnrolledInput, w: &LsnnWeights) -> Result<(usize, usize, usize, usize)> {
    let (f, d, m, k) = w.dims()?;
    if m != u.num_patches() || k != u.patch_len() {
        return Err(Error::dim(format!(
            "weights expect {m} patches of length {k}, input has {} of length {}",
            u.num_patches(),
            u.patch_len()
        )));
    }
    Ok((f, d, m, k))
}

/// `z[f*d + l, p] = <V[f, l], P_p>`.
fn kernel_responses(u: &UnrolledInput, w: &LsnnWeights, fd: usize, k: usize, m: usize) -> Vec<f64> {
    let mut z = vec![0.0; fd * m];
    conv_cols_forward(w.kernel.data(), u.patches.data(), fd, k, m, &mut z);
    z
}

/// Single-image LSNN response, `[F, out_h, out_w]`.
pub fn lsnn_forward(u: &UnrolledInput, w: &LsnnWeights) -> Result<Tensor> {
    let (f, d, m, k) = check_unrolled(u, w)?;
    let z = kernel_responses(u, w, f * d, k, m);
    let s = w.smoother.data();
    let mut out = vec![0.0; f * m];
    for fi in 0..f {
        for l in 0..d {
            let row = (fi * d + l) * m;
            for p in 0..m {
                out[fi * m + p] += s[row + p] * z[row + p];
            }
        }
    }
    let (oh, ow) = u.out_hw();
    Tensor::new(vec![f, oh, ow], out)
}

#[derive(Clone, Debug)]
pub struct LsnnGrads {
    pub smoother: Tensor,
    pub kernel: Tensor,
    pub input: Tensor,
}

/// Gradients of `<upstream, lsnn_forward(u, w)>` with respect to the smoother,
/// the kernel and the original (un-unrolled) input.
pub fn lsnn_backward(u: &UnrolledInput, w: &LsnnWeights, upstream: &Tensor) -> Result<LsnnGrads> {
    let (f, d, m, k) = check_unrolled(u, w)?;
    let (oh, ow) = u.out_hw();
    expect_shape(upstream, &[f, oh, ow], "lsnn_backward upstream")?;
    let z = kernel_responses(u, w, f * d, k, m);
    let s = w.smoother.data();
    let g = upstream.data();
    let mut gs = vec![0.0; f * d * m];
    let mut gz = vec![0.0; f * d * m];
    for fi in 0..f {
        for l in 0..d {
            let row = (fi * d + l) * m;
            for p in 0..m {
                gs[row + p] = g[fi * m + p] * z[row + p];
                gz[row + p] = g[fi * m + p] * s[row + p];
            }
        }
    }
    let mut gk = vec![0.0; f * d * k];
    let mut gp = vec![0.0; m * k];
    conv_cols_backward(w.kernel.data(), u.patches.data(), &gz, f * d, k, m, &mut gk, Some(&mut gp));
    Ok(LsnnGrads {
        smoother: Tensor::new(w.smoother.shape().to_vec(), gs)?,
        kernel: Tensor::new(w.kernel.shape().to_vec(), gk)?,
        input: fold_patches(&Tensor::new(vec![m, k], gp)?, u)?,
    })
}

#[derive(Clone, Debug)]
enum SmootherParams {
    Ones,
    /// `[G, F, d, m]`
    Free(Param),
    /// `[G * F * d, 5]`, rows `(mu1, mu2, alpha, beta, gamma)`
    Location(Param),
    Content,
}

/// Output of [`LsnnLayer::backward`].
#[derive(Clone, Debug, Default)]
pub struct LsnnBackward {
    pub input: Option<Tensor>,
    /// `[N, S * 5]` gradient for per-image Gaussian parameters (content mode).
    pub content: Option<Tensor>,
}

/// Batched LSNN layer. Output is `[N, G * F, out_h, out_w]`, group-major:
/// channel `g * F + f` is filter `f` seen through smoother group `g`.
#[derive(Clone, Debug)]
pub struct LsnnLayer {
    spec: LsnnLayerSpec,
    in_ch: usize,
    in_hw: (usize, usize),
    grid: PatchGrid,
    /// `[F, d, C, kh, kw]`
    pub kernel: Param,
    /// `[F]`, shared by all positions and groups.
    pub bias: Param,
    smoother: SmootherParams,
    batch: usize,
    cols: Vec<f64>,
    z: Vec<f64>,
    /// Raw smoother values: `[S, m]` for shared modes, `[N, S, m]` for content.
    raw: Vec<f64>,
    /// Smoother values actually applied (after optional normalization).
    eff: Vec<f64>,
    content_params: Vec<GaussianParams>,
}

impl LsnnLayer {
    pub fn new(
        name: &str,
        spec: LsnnLayerSpec,
        in_ch: usize,
        in_hw: (usize, usize),
        rng: &mut Rng,
    ) -> Result<Self> {
        spec.validate(in_hw)?;
        let [kh, kw] = spec.kernel;
        let (oh, ow) = (in_hw.0 - kh + 1, in_hw.1 - kw + 1);
        let grid = PatchGrid::new(oh, ow)?;
        let (f, d, m) = (spec.num_filters, spec.factor_rank, grid.len());
        let kernel = glorot(&[f, d, in_ch, kh, kw], in_ch * kh * kw, f * kh * kw, rng);
        let s = spec.num_smoothers();
        let smoother = match spec.mode {
            SmootherMode::Ones => SmootherParams::Ones,
            SmootherMode::Free => SmootherParams::Free(Param::new(
                format!("{name}.smoother"),
                Tensor::ones(&[spec.groups, f, d, m]),
                ParamGroup::Main,
            )),
            SmootherMode::Location => {
                let init = GaussianParams::centered().to_array();
                let t = Tensor::from_raw(
                    vec![s, GAUSSIAN_PARAM_LEN],
                    (0..s).flat_map(|_| init).collect(),
                );
                SmootherParams::Location(Param::new(format!("{name}.gaussian"), t, ParamGroup::Smoother))
            }
            SmootherMode::Content => SmootherParams::Content,
        };
        Ok(LsnnLayer {
            kernel: Param::new(format!("{name}.kernel"), kernel, ParamGroup::Main),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros(&[f]), ParamGroup::Main),
            spec,
            in_ch,
            in_hw,
            grid,
            smoother,
            batch: 0,
            cols: Vec::new(),
            z: Vec::new(),
            raw: Vec::new(),
            eff: Vec::new(),
            content_params: Vec::new(),
        })
    }

    pub fn spec(&self) -> &LsnnLayerSpec {
        &self.spec
    }

    pub fn grid(&self) -> &PatchGrid {
        &self.grid
    }

    pub fn out_hw(&self) -> (usize, usize) {
        (self.grid.rows(), self.grid.cols())
    }

    pub fn out_channels(&self) -> usize {
        self.spec.groups * self.spec.num_filters
    }

    fn patch_len(&self) -> usize {
        self.in_ch * self.spec.kernel[0] * self.spec.kernel[1]
    }

    /// Smoother values are normalized and rescaled by `m`, so a flat Gaussian
    /// reproduces the all-ones smoother exactly in expectation.
    fn apply_normalization(&self, raw: &[f64], eff: &mut [f64]) {
        if self.spec.normalize {
            let scale = raw.len() as f64 / raw.iter().sum::<f64>();
            for (e, r) in eff.iter_mut().zip(raw) {
                *e = r * scale;
            }
        } else {
            eff.copy_from_slice(raw);
        }
    }

    /// Gaussian parameters currently in force: the learned ones in location
    /// mode, or those decoded from `content` (one row of the parameter-net
    /// output) in content mode.
    pub fn gaussian_params(&self, content: Option<&[f64]>) -> Option<Vec<GaussianParams>> {
        match (&self.smoother, content) {
            (SmootherParams::Location(p), _) => Some(
                p.value
                    .data()
                    .chunks_exact(GAUSSIAN_PARAM_LEN)
                    .map(GaussianParams::from_slice)
                    .collect(),
            ),
            (SmootherParams::Content, Some(row)) => Some(
                row.chunks_exact(GAUSSIAN_PARAM_LEN)
                    .map(GaussianParams::from_slice)
                    .collect(),
            ),
            _ => None,
        }
    }

    /// Smoother values applied to one image, `[S][m]`.
    pub fn applied_smoothers(&self, content: Option<&[f64]>) -> Result<Vec<Vec<f64>>> {
        let m = self.grid.len();
        let s = self.spec.num_smoothers();
        let mut out = vec![vec![0.0; m]; s];
        match &self.smoother {
            SmootherParams::Ones => out.iter_mut().for_each(|v| v.fill(1.0)),
            SmootherParams::Free(p) => {
                for (i, v) in out.iter_mut().enumerate() {
                    v.copy_from_slice(&p.value.data()[i * m..(i + 1) * m]);
                }
            }
            _ => {
                let params = self
                    .gaussian_params(content)
                    .ok_or_else(|| Error::Contract("content smoother needs parameters".into()))?;
                let mut raw = vec![0.0; m];
                for (v, gp) in out.iter_mut().zip(&params) {
                    smoother_forward_into(gp, &self.grid, &mut raw);
                    self.apply_normalization(&raw, v);
                }
            }
        }
        Ok(out)
    }

    fn prepare_shared_smoothers(&mut self) {
        let (s, m) = (self.spec.num_smoothers(), self.grid.len());
        self.raw.resize(s * m, 0.0);
        self.eff.resize(s * m, 0.0);
        match &self.smoother {
            SmootherParams::Ones => {
                self.raw.fill(1.0);
                self.eff.fill(1.0);
            }
            SmootherParams::Free(p) => {
                self.raw.copy_from_slice(p.value.data());
                self.eff.copy_from_slice(p.value.data());
            }
            SmootherParams::Location(p) => {
                let mut raw = std::mem::take(&mut self.raw);
                let mut eff = std::mem::take(&mut self.eff);
                for (i, gp) in p.value.data().chunks_exact(GAUSSIAN_PARAM_LEN).enumerate() {
                    let r = &mut raw[i * m..(i + 1) * m];
                    smoother_forward_into(&GaussianParams::from_slice(gp), &self.grid, r);
                    self.apply_normalization(r, &mut eff[i * m..(i + 1) * m]);
                }
                self.raw = raw;
                self.eff = eff;
            }
            SmootherParams::Content => unreachable!("content smoothers are per image"),
        }
    }

    fn prepare_content_smoothers(&mut self, content: &Tensor) -> Result<()> {
        let (s, m, n) = (self.spec.num_smoothers(), self.grid.len(), self.batch);
        expect_shape(content, &[n, s * GAUSSIAN_PARAM_LEN], "LSNN content parameters")?;
        self.raw.resize(n * s * m, 0.0);
        self.eff.resize(n * s * m, 0.0);
        self.content_params.clear();
        self.content_params.extend(
            content
                .data()
                .chunks_exact(GAUSSIAN_PARAM_LEN)
                .map(GaussianParams::from_slice),
        );
        let mut raw = std::mem::take(&mut self.raw);
        let mut eff = std::mem::take(&mut self.eff);
        for (i, gp) in self.content_params.iter().enumerate() {
            let r = &mut raw[i * m..(i + 1) * m];
            smoother_forward_into(gp, &self.grid, r);
            self.apply_normalization(r, &mut eff[i * m..(i + 1) * m]);
        }
        self.raw = raw;
        self.eff = eff;
        Ok(())
    }

    /// `content` must be `[N, S * 5]` in content mode and `None` otherwise.
    pub fn forward(&mut self, x: &Tensor, content: Option<&Tensor>) -> Result<Tensor> {
        let (n, c, h, w) = nchw(x, "LsnnLayer")?;
        if c != self.in_ch || (h, w) != self.in_hw {
            return Err(Error::dim(format!("LsnnLayer got input {:?}", x.shape())));
        }
        self.batch = n;
        match (self.spec.mode, content) {
            (SmootherMode::Content, Some(t)) => self.prepare_content_smoothers(t)?,
            (SmootherMode::Content, None) => {
                return Err(Error::Contract("content mode requires Gaussian parameters".into()))
            }
            (_, Some(_)) => {
                return Err(Error::Contract("only content mode takes Gaussian parameters".into()))
            }
            (_, None) => self.prepare_shared_smoothers(),
        }
        let [kh, kw] = self.spec.kernel;
        let (f, d, g) = (self.spec.num_filters, self.spec.factor_rank, self.spec.groups);
        let (m, k) = (self.grid.len(), self.patch_len());
        let fd = f * d;
        let s = self.spec.num_smoothers();
        self.cols.resize(n * m * k, 0.0);
        self.z.resize(n * fd * m, 0.0);
        let bias = self.bias.value.data();
        let mut out = vec![0.0; n * g * f * m];
        let plane = c * h * w;
        let per_image = self.spec.mode == SmootherMode::Content;
        for i in 0..n {
            let cols = &mut self.cols[i * m * k..(i + 1) * m * k];
            im2col(&x.data()[i * plane..(i + 1) * plane], c, h, w, kh, kw, cols);
            let z = &mut self.z[i * fd * m..(i + 1) * fd * m];
            conv_cols_forward(self.kernel.value.data(), cols, fd, k, m, z);
            let eff = if per_image {
                &self.eff[i * s * m..(i + 1) * s * m]
            } else {
                &self.eff[..]
            };
            for gi in 0..g {
                for fi in 0..f {
                    let y = &mut out[((i * g + gi) * f + fi) * m..((i * g + gi) * f + fi + 1) * m];
                    y.fill(bias[fi]);
                    for l in 0..d {
                        let u = &eff[((gi * f + fi) * d + l) * m..((gi * f + fi) * d + l + 1) * m];
                        let zr = &z[(fi * d + l) * m..(fi * d + l + 1) * m];
                        for ((yv, uv), zv) in y.iter_mut().zip(u).zip(zr) {
                            *yv += uv * zv;
                        }
                    }
                }
            }
        }
        let (oh, ow) = self.out_hw();
        Ok(Tensor::from_raw(vec![n, g * f, oh, ow], out))
    }

    fn gaussian_grad(&self, params: &GaussianParams, raw: &[f64], geff: &[f64]) -> GaussianGrad {
        if self.spec.normalize {
            let m = raw.len() as f64;
            let scaled: Vec<f64> = geff.iter().map(|g| g * m).collect();
            let mut up = vec![0.0; raw.len()];
            normalized_upstream(raw, &scaled, &mut up);
            raw_backward(params, &self.grid, raw, &up)
        } else {
            raw_backward(params, &self.grid, raw, geff)
        }
    }

    pub fn backward(&mut self, gy: &Tensor, want_input: bool) -> Result<LsnnBackward> {
        let (f, d, g) = (self.spec.num_filters, self.spec.factor_rank, self.spec.groups);
        let (m, k) = (self.grid.len(), self.patch_len());
        let (fd, s, n) = (f * d, self.spec.num_smoothers(), self.batch);
        let (oh, ow) = self.out_hw();
        expect_shape(gy, &[n, g * f, oh, ow], "LsnnLayer backward")?;
        let [kh, kw] = self.spec.kernel;
        let (h, w) = self.in_hw;
        let plane = self.in_ch * h * w;
        let per_image = self.spec.mode == SmootherMode::Content;
        let needs_geff = self.spec.mode != SmootherMode::Ones;

        let mut gx = want_input.then(|| vec![0.0; n * plane]);
        let mut gcols = vec![0.0; if want_input { m * k } else { 0 }];
        let mut gz = vec![0.0; fd * m];
        let mut geff_shared = vec![0.0; if needs_geff && !per_image { s * m } else { 0 }];
        let mut geff_image = vec![0.0; if per_image { s * m } else { 0 }];
        let mut gcontent = per_image.then(|| vec![0.0; n * s * GAUSSIAN_PARAM_LEN]);

        for i in 0..n {
            let cols = &self.cols[i * m * k..(i + 1) * m * k];
            let z = &self.z[i * fd * m..(i + 1) * fd * m];
            let eff = if per_image {
                &self.eff[i * s * m..(i + 1) * s * m]
            } else {
                &self.eff[..]
            };
            let geff: &mut [f64] = if per_image {
                &mut geff_image
            } else {
                &mut geff_shared
            };
            gz.fill(0.0);
            for gi in 0..g {
                for fi in 0..f {
                    let go = &gy.data()[((i * g + gi) * f + fi) * m..((i * g + gi) * f + fi + 1) * m];
                    self.bias.grad.data_mut()[fi] += go.iter().sum::<f64>();
                    for l in 0..d {
                        let si = (gi * f + fi) * d + l;
                        let u = &eff[si * m..(si + 1) * m];
                        let zr = &z[(fi * d + l) * m..(fi * d + l + 1) * m];
                        let gzr = &mut gz[(fi * d + l) * m..(fi * d + l + 1) * m];
                        for p in 0..m {
                            gzr[p] += go[p] * u[p];
                        }
                        if needs_geff {
                            let ge = &mut geff[si * m..(si + 1) * m];
                            if per_image {
                                for p in 0..m {
                                    ge[p] = go[p] * zr[p];
                                }
                            } else {
                                for p in 0..m {
                                    ge[p] += go[p] * zr[p];
                                }
                            }
                        }
                    }
                }
            }
            conv_cols_backward(
                self.kernel.value.data(),
                cols,
                &gz,
                fd,
                k,
                m,
                self.kernel.grad.data_mut(),
                want_input.then_some(gcols.as_mut_slice()),
            );
            if let Some(gx) = gx.as_mut() {
                col2im_add(&gcols, self.in_ch, h, w, kh, kw, &mut gx[i * plane..(i + 1) * plane]);
            }
            if let Some(gc) = gcontent.as_mut() {
                for si in 0..s {
                    let raw = &self.raw[(i * s + si) * m..(i * s + si + 1) * m];
                    let params = &self.content_params[i * s + si];
                    let gg = self.gaussian_grad(params, raw, &geff_image[si * m..(si + 1) * m]);
                    let at = (i * s + si) * GAUSSIAN_PARAM_LEN;
                    gc[at..at + GAUSSIAN_PARAM_LEN].copy_from_slice(&gg.to_array());
                }
            }
        }

        match &self.smoother {
            SmootherParams::Free(_) => {
                if let SmootherParams::Free(p) = &mut self.smoother {
                    p.grad.data_mut().iter_mut().zip(&geff_shared).for_each(|(a, b)| *a += b);
                }
            }
            SmootherParams::Location(p) => {
                let grads: Vec<[f64; GAUSSIAN_PARAM_LEN]> = p
                    .value
                    .data()
                    .chunks_exact(GAUSSIAN_PARAM_LEN)
                    .enumerate()
                    .map(|(si, gp)| {
                        self.gaussian_grad(
                            &GaussianParams::from_slice(gp),
                            &self.raw[si * m..(si + 1) * m],
                            &geff_shared[si * m..(si + 1) * m],
                        )
                        .to_array()
                    })
                    .collect();
                if let SmootherParams::Location(p) = &mut self.smoother {
                    for (dst, src) in p.grad.data_mut().chunks_exact_mut(GAUSSIAN_PARAM_LEN).zip(&grads) {
                        dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
                    }
                }
            }
            SmootherParams::Ones | SmootherParams::Content => {}
        }

        Ok(LsnnBackward {
            input: gx.map(|d| Tensor::from_raw(vec![n, self.in_ch, h, w], d)),
            content: gcontent.map(|d| Tensor::from_raw(vec![n, s * GAUSSIAN_PARAM_LEN], d)),
        })
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = vec![&mut self.kernel, &mut self.bias];
        match &mut self.smoother {
            SmootherParams::Free(p) | SmootherParams::Location(p) => out.push(p),
            _ => {}
        }
        out
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut out = vec![&self.kernel, &self.bias];
        match &self.smoother {
            SmootherParams::Free(p) | SmootherParams::Location(p) => out.push(p),
            _ => {}
        }
        out
    }

    /// Trainable scalars excluding the bias.
    pub fn num_weights(&self) -> usize {
        self.params().iter().filter(|p| p.name != self.bias.name).map(|p| p.len()).sum()
    }
}

impl LsnnLayer {
    /// Weights of one smoother group as [`LsnnWeights`]; content mode needs
    /// the image's parameter row.
    pub fn weights_for_group(&self, group: usize, content: Option<&[f64]>) -> Result<LsnnWeights> {
        let (f, d, m) = (self.spec.num_filters, self.spec.factor_rank, self.grid.len());
        let all = self.applied_smoothers(content)?;
        let mut u = Vec::with_capacity(f * d * m);
        for row in &all[group * f * d..(group + 1) * f * d] {
            u.extend_from_slice(row);
        }
        Ok(LsnnWeights {
            smoother: Tensor::new(vec![f, d, m], u)?,
            kernel: self.kernel.value.clone().reshape(&[f, d, self.patch_len()])?,
        })
    }
}
