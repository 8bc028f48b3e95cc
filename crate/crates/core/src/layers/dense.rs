use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{gemm, Tensor};

use super::{expect_shape, glorot, Mode, Param, ParamGroup};

fn rows_of(x: &Tensor, width: usize, what: &str) -> Result<usize> {
    match *x.shape() {
        [d] if d == width => Ok(1),
        [n, d] if d == width => Ok(n),
        _ => Err(Error::dim(format!("{what}: expected [N, {width}], got {:?}", x.shape()))),
    }
}

/// `y = x W^T + b` for `x` of shape `[N, in]` (or `[in]`), `weight` `[out, in]`.
pub fn fc_forward(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let &[out, inp] = weight.shape() else {
        return Err(Error::dim(format!("fc weight must be 2-D, got {:?}", weight.shape())));
    };
    expect_shape(bias, &[out], "fc bias")?;
    let n = rows_of(x, inp, "fc_forward")?;
    let mut y = vec![0.0; n * out];
    for row in y.chunks_exact_mut(out) {
        row.copy_from_slice(bias.data());
    }
    gemm(n, inp, out, x.data(), [inp as isize, 1], weight.data(), [1, inp as isize], &mut y, 1.0);
    let shape = if x.rank() == 1 { vec![out] } else { vec![n, out] };
    Tensor::new(shape, y)
}

#[derive(Clone, Debug)]
pub struct DenseGrads {
    pub weight: Tensor,
    pub bias: Tensor,
    pub input: Tensor,
}

pub fn fc_backward(x: &Tensor, weight: &Tensor, upstream: &Tensor) -> Result<DenseGrads> {
    let &[out, inp] = weight.shape() else {
        return Err(Error::dim(format!("fc weight must be 2-D, got {:?}", weight.shape())));
    };
    let n = rows_of(x, inp, "fc_backward")?;
    if upstream.len() != n * out {
        return Err(Error::dim(format!("fc_backward upstream {:?}", upstream.shape())));
    }
    let mut gw = vec![0.0; out * inp];
    let mut gx = vec![0.0; n * inp];
    let g = upstream.data();
    gemm(out, n, inp, g, [1, out as isize], x.data(), [inp as isize, 1], &mut gw, 0.0);
    gemm(n, out, inp, g, [out as isize, 1], weight.data(), [inp as isize, 1], &mut gx, 0.0);
    let mut gb = vec![0.0; out];
    for row in g.chunks_exact(out) {
        gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
    }
    Ok(DenseGrads {
        weight: Tensor::new(vec![out, inp], gw)?,
        bias: Tensor::new(vec![out], gb)?,
        input: Tensor::new(x.shape().to_vec(), gx)?,
    })
}

/// Fully connected layer on `[N, in]`.
#[derive(Clone, Debug)]
pub struct Dense {
    inp: usize,
    out: usize,
    pub weight: Param,
    pub bias: Param,
    x: Option<Tensor>,
}

impl Dense {
    pub fn new(name: &str, inp: usize, out: usize, group: ParamGroup, rng: &mut Rng) -> Self {
        Dense {
            inp,
            out,
            weight: Param::new(format!("{name}.weight"), glorot(&[out, inp], inp, out, rng), group),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros(&[out]), group),
            x: None,
        }
    }

    pub fn in_features(&self) -> usize {
        self.inp
    }

    pub fn out_features(&self) -> usize {
        self.out
    }

    /// Accepts any `[N, ...]` tensor whose trailing extents multiply to `in`.
    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let n = x.shape().first().copied().unwrap_or(0);
        if x.rank() < 2 || n * self.inp != x.len() {
            return Err(Error::dim(format!("Dense({}) got {:?}", self.inp, x.shape())));
        }
        let flat = x.clone().reshape(&[n, self.inp])?;
        let y = fc_forward(&flat, &self.weight.value, &self.bias.value)?;
        self.x = Some(flat);
        Ok(y)
    }

    /// Accumulates gradients; the returned input gradient is `[N, in]`.
    pub fn backward(&mut self, gy: &Tensor) -> Result<Tensor> {
        let x = self
            .x
            .as_ref()
            .ok_or_else(|| Error::Contract("Dense backward before forward".into()))?;
        let g = fc_backward(x, &self.weight.value, gy)?;
        self.weight.grad.data_mut().iter_mut().zip(g.weight.data()).for_each(|(a, b)| *a += b);
        self.bias.grad.data_mut().iter_mut().zip(g.bias.data()).for_each(|(a, b)| *a += b);
        Ok(g.input)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }
}

/// `max(0, x)` with a cached activity mask.
#[derive(Clone, Debug, Default)]
pub struct Relu {
    mask: Vec<bool>,
}

impl Relu {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn forward(&mut self, x: &Tensor) -> Tensor {
        self.mask.clear();
        self.mask.extend(x.data().iter().map(|&v| v > 0.0));
        let data = x.data().iter().map(|&v| v.max(0.0)).collect();
        Tensor::from_raw(x.shape().to_vec(), data)
    }

    pub fn backward(&self, gy: &Tensor) -> Result<Tensor> {
        if gy.len() != self.mask.len() {
            return Err(Error::dim(format!("Relu backward got {:?}", gy.shape())));
        }
        let data = gy
            .data()
            .iter()
            .zip(&self.mask)
            .map(|(&g, &on)| if on { g } else { 0.0 })
            .collect();
        Ok(Tensor::from_raw(gy.shape().to_vec(), data))
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }
}

/// Inverted dropout: at train time units are zeroed with probability `rate`
/// and survivors scaled by `1 / (1 - rate)`; identity at eval time.
#[derive(Clone, Debug)]
pub struct Dropout {
    rate: f64,
    scale: Vec<f64>,
}

impl Dropout {
    pub fn new(rate: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        Ok(Dropout { rate, scale: Vec::new() })
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode, rng: &mut Rng) -> Tensor {
        self.scale.clear();
        if mode == Mode::Eval || self.rate == 0.0 {
            self.scale.resize(x.len(), 1.0);
            return x.clone();
        }
        let keep = 1.0 / (1.0 - self.rate);
        self.scale
            .extend((0..x.len()).map(|_| if rng.bernoulli(self.rate) { 0.0 } else { keep }));
        let data = x.data().iter().zip(&self.scale).map(|(a, s)| a * s).collect();
        Tensor::from_raw(x.shape().to_vec(), data)
    }

    pub fn backward(&self, gy: &Tensor) -> Result<Tensor> {
        if gy.len() != self.scale.len() {
            return Err(Error::dim(format!("Dropout backward got {:?}", gy.shape())));
        }
        let data = gy.data().iter().zip(&self.scale).map(|(a, s)| a * s).collect();
        Ok(Tensor::from_raw(gy.shape().to_vec(), data))
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
    fn fc_matches_loops() {
        let mut rng = Rng::new(50);
        let (x, w, b) = (random(&[3, 4], &mut rng), random(&[2, 4], &mut rng), random(&[2], &mut rng));
        let y = fc_forward(&x, &w, &b).unwrap();
        for n in 0..3 {
            for o in 0..2 {
                let want: f64 = (0..4).map(|i| x.get(&[n, i]) * w.get(&[o, i])).sum::<f64>() + b.data()[o];
                assert!((y.get(&[n, o]) - want).abs() < 1e-12);
            }
        }
        assert_eq!(fc_forward(&random(&[4], &mut rng), &w, &b).unwrap().shape(), &[2]);
        assert!(fc_forward(&random(&[3, 5], &mut rng), &w, &b).is_err());
    }

    #[test]
    fn fc_gradients_match_finite_differences() {
        let mut rng = Rng::new(51);
        for _ in 0..20 {
            let (x, w, b) = (random(&[3, 5], &mut rng), random(&[4, 5], &mut rng), random(&[4], &mut rng));
            let up = random(&[3, 4], &mut rng);
            let g = fc_backward(&x, &w, &up).unwrap();
            let loss = |x: &Tensor, w: &Tensor, b: &Tensor| -> f64 {
                let y = fc_forward(x, w, b).unwrap();
                y.data().iter().zip(up.data()).map(|(a, b)| a * b).sum()
            };
            let re = |v: &[f64], t: &Tensor| Tensor::new(t.shape().to_vec(), v.to_vec()).unwrap();
            let nw = numeric_gradient(w.data(), 1e-6, |v| loss(&x, &re(v, &w), &b));
            let nb = numeric_gradient(b.data(), 1e-6, |v| loss(&x, &w, &re(v, &b)));
            let nx = numeric_gradient(x.data(), 1e-6, |v| loss(&re(v, &x), &w, &b));
            for (a, n) in g
                .weight
                .data()
                .iter()
                .zip(&nw)
                .chain(g.bias.data().iter().zip(&nb))
                .chain(g.input.data().iter().zip(&nx))
            {
                assert!(relative_error(*a, *n) < 1e-6);
            }
        }
    }

    #[test]
    fn relu_basics() {
        let mut r = Relu::new();
        let x = Tensor::new(vec![4], vec![-2.0, 0.0, 0.5, 3.0]).unwrap();
        assert_eq!(r.forward(&x).data(), &[0.0, 0.0, 0.5, 3.0]);
        let neg = x.scale(-1.0).unwrap();
        let y = r.forward(&neg);
        for (yv, xv) in y.data().iter().zip(x.data()) {
            if *xv >= 0.0 {
                assert_eq!(*yv, 0.0);
            }
        }
        let g = r.backward(&Tensor::ones(&[4])).unwrap();
        assert_eq!(g.data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn dropout_eval_is_identity() {
        let mut rng = Rng::new(52);
        let x = random(&[5, 7], &mut rng);
        let mut d = Dropout::new(0.5).unwrap();
        assert_eq!(d.forward(&x, Mode::Eval, &mut rng), x);
        assert_eq!(d.backward(&x).unwrap(), x);
    }

    #[test]
    fn dropout_train_scales_survivors() {
        let mut rng = Rng::new(53);
        let x = Tensor::ones(&[10000]);
        let mut d = Dropout::new(0.5).unwrap();
        let y = d.forward(&x, Mode::Train, &mut rng);
        assert!(y.data().iter().all(|&v| v == 0.0 || v == 2.0));
        let kept = y.data().iter().filter(|&&v| v > 0.0).count();
        assert!((4700..5300).contains(&kept));
        let g = d.backward(&Tensor::ones(&[10000])).unwrap();
        assert_eq!(g, y);
    }
}
