//! Gaussian smoothers over a grid of patch positions.
//!
//! A smoother assigns each patch position `p` the weight
//! `U_p = exp(-(p - mu)^T L (p - mu))`, where the precision `L = Phi^T Phi`
//! is built from a symmetric factor `Phi = [[alpha, gamma], [gamma, beta]]`.
//! Positions are normalized per axis to `[0, 1]`.

use crate::error::{Error, Result};
use crate::tensor::clamped_exp;

/// Mean and symmetric precision factor of one 2-D Gaussian smoother.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianParams {
    pub mu: [f64; 2],
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

/// Number of scalars in one [`GaussianParams`], in the order
/// `mu1, mu2, alpha, beta, gamma`.
pub const GAUSSIAN_PARAM_LEN: usize = 5;

impl GaussianParams {
    pub fn new(mu: [f64; 2], alpha: f64, beta: f64, gamma: f64) -> Self {
        GaussianParams {
            mu,
            alpha,
            beta,
            gamma,
        }
    }

    /// Centered, identity precision.
    pub fn centered() -> Self {
        Self::new([0.5, 0.5], 1.0, 1.0, 0.0)
    }

    pub fn from_slice(v: &[f64]) -> Self {
        assert_eq!(v.len(), GAUSSIAN_PARAM_LEN);
        Self::new([v[0], v[1]], v[2], v[3], v[4])
    }

    pub fn to_array(&self) -> [f64; GAUSSIAN_PARAM_LEN] {
        [self.mu[0], self.mu[1], self.alpha, self.beta, self.gamma]
    }

    /// `Phi` applied to a vector.
    #[inline]
    fn phi_mul(&self, d: [f64; 2]) -> [f64; 2] {
        [
            self.alpha * d[0] + self.gamma * d[1],
            self.gamma * d[0] + self.beta * d[1],
        ]
    }
}

/// `Phi^T Phi` for the symmetric factor of `params`.
pub fn precision_from_phi(params: &GaussianParams) -> [[f64; 2]; 2] {
    let GaussianParams {
        alpha: a,
        beta: b,
        gamma: g,
        ..
    } = *params;
    let off = (a + b) * g;
    [[a * a + g * g, off], [off, b * b + g * g]]
}

/// Gradient of a scalar loss with respect to one [`GaussianParams`].
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GaussianGrad {
    pub mu: [f64; 2],
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl GaussianGrad {
    pub fn to_array(&self) -> [f64; GAUSSIAN_PARAM_LEN] {
        [self.mu[0], self.mu[1], self.alpha, self.beta, self.gamma]
    }

    pub fn mu_norm(&self) -> f64 {
        self.mu[0].hypot(self.mu[1])
    }

    pub fn norm(&self) -> f64 {
        self.to_array().iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Patch positions laid out row-major (`p = r * cols + c`) with coordinates
/// normalized per axis: `r / (rows - 1)` and `c / (cols - 1)`, or `0.5` on
/// an axis of extent 1.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid {
    rows: usize,
    cols: usize,
    coords: Vec<[f64; 2]>,
}

fn axis_coord(i: usize, extent: usize) -> f64 {
    if extent == 1 {
        0.5
    } else {
        i as f64 / (extent - 1) as f64
    }
}

impl PatchGrid {
    pub fn new(rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::dim(format!("empty patch grid {rows}x{cols}")));
        }
        let coords = (0..rows)
            .flat_map(|r| (0..cols).map(move |c| [axis_coord(r, rows), axis_coord(c, cols)]))
            .collect();
        Ok(PatchGrid { rows, cols, coords })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[[f64; 2]] {
        &self.coords
    }
}

/// Per-position weights over a [`PatchGrid`].
#[derive(Clone, Debug, PartialEq)]
pub struct Smoother {
    pub values: Vec<f64>,
    pub normalized: bool,
}

impl Smoother {
    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }
}

/// Evaluates the unnormalized Gaussian smoother at every grid position.
pub fn smoother_forward(params: &GaussianParams, grid: &PatchGrid) -> Smoother {
    let mut values = vec![0.0; grid.len()];
    smoother_forward_into(params, grid, &mut values);
    Smoother {
        values,
        normalized: false,
    }
}

/// Writes `U_p` for every grid position into `out`.
pub(crate) fn smoother_forward_into(params: &GaussianParams, grid: &PatchGrid, out: &mut [f64]) {
    debug_assert_eq!(out.len(), grid.len());
    for (u, p) in out.iter_mut().zip(grid.coords()) {
        let d = [p[0] - params.mu[0], p[1] - params.mu[1]];
        let f = params.phi_mul(d);
        let q = f[0] * f[0] + f[1] * f[1];
        *u = clamped_exp(-q);
    }
}

/// Divides the smoother by its sum so the values add to one.
pub fn smoother_normalize(s: &Smoother) -> Result<Smoother> {
    if s.normalized {
        return Err(Error::Contract("smoother is already normalized".into()));
    }
    let total = s.sum();
    Ok(Smoother {
        values: s.values.iter().map(|u| u / total).collect(),
        normalized: true,
    })
}

/// Chains `upstream = dL/dU` through the unnormalized smoother.
///
/// Uses `dU_p/dmu = 2 U_p L (p - mu)` and `dU_p/dPhi = -2 U_p (Phi d) d^T`.
/// `Phi` carries one shared off-diagonal parameter, so `gamma` collects both
/// off-diagonal entries.
pub fn smoother_backward(
    params: &GaussianParams,
    grid: &PatchGrid,
    smoother: &Smoother,
    upstream: &[f64],
) -> Result<GaussianGrad> {
    if smoother.normalized {
        return Err(Error::Contract(
            "smoother_backward needs the raw smoother; use normalized_backward".into(),
        ));
    }
    check_lengths(grid, smoother, upstream)?;
    Ok(raw_backward(params, grid, &smoother.values, upstream))
}

fn check_lengths(grid: &PatchGrid, smoother: &Smoother, upstream: &[f64]) -> Result<()> {
    if smoother.values.len() != grid.len() || upstream.len() != grid.len() {
        return Err(Error::dim(format!(
            "grid has {} positions, smoother {}, upstream {}",
            grid.len(),
            smoother.values.len(),
            upstream.len()
        )));
    }
    Ok(())
}

pub(crate) fn raw_backward(
    params: &GaussianParams,
    grid: &PatchGrid,
    values: &[f64],
    upstream: &[f64],
) -> GaussianGrad {
    let lam = precision_from_phi(params);
    let mut g = GaussianGrad::default();
    for ((p, &u), &up) in grid.coords().iter().zip(values).zip(upstream) {
        let w = up * u;
        if w == 0.0 {
            continue;
        }
        let d = [p[0] - params.mu[0], p[1] - params.mu[1]];
        g.mu[0] += 2.0 * w * (lam[0][0] * d[0] + lam[0][1] * d[1]);
        g.mu[1] += 2.0 * w * (lam[1][0] * d[0] + lam[1][1] * d[1]);
        let f = params.phi_mul(d);
        g.alpha -= 2.0 * w * f[0] * d[0];
        g.beta -= 2.0 * w * f[1] * d[1];
        g.gamma -= 2.0 * w * (f[0] * d[1] + f[1] * d[0]);
    }
    g
}

/// Chains `upstream = dL/dU_hat` through the normalized smoother
/// `U_hat_p = U_p / sum U`.
///
/// Quotient rule: `dU_hat_p = (dU_p * S - U_p * sum dU) / S^2`, which collapses
/// to an effective raw upstream `(upstream_p - <upstream, U_hat>) / S`.
pub fn normalized_backward(
    params: &GaussianParams,
    grid: &PatchGrid,
    raw: &Smoother,
    upstream: &[f64],
) -> Result<GaussianGrad> {
    if raw.normalized {
        return Err(Error::Contract(
            "normalized_backward expects the raw (unnormalized) smoother".into(),
        ));
    }
    check_lengths(grid, raw, upstream)?;
    let mut effective = vec![0.0; grid.len()];
    normalized_upstream(&raw.values, upstream, &mut effective);
    Ok(raw_backward(params, grid, &raw.values, &effective))
}

/// Converts `dL/dU_hat` into `dL/dU` given raw values.
pub(crate) fn normalized_upstream(raw: &[f64], upstream: &[f64], out: &mut [f64]) {
    let total: f64 = raw.iter().sum();
    let mean: f64 = raw.iter().zip(upstream).map(|(u, g)| u * g).sum::<f64>() / total;
    for (o, &g) in out.iter_mut().zip(upstream) {
        *o = (g - mean) / total;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    const H: f64 = 1e-6;

    fn rel_err(a: f64, n: f64) -> f64 {
        let denom = (a.abs() + n.abs()).max(1e-6);
        (a - n).abs() / denom
    }

    fn random_params(rng: &mut Rng) -> GaussianParams {
        GaussianParams::new(
            [rng.uniform(-0.2, 1.2), rng.uniform(-0.2, 1.2)],
            rng.uniform(-2.0, 2.0),
            rng.uniform(-2.0, 2.0),
            rng.uniform(-2.0, 2.0),
        )
    }

    fn loss(params: &GaussianParams, grid: &PatchGrid, up: &[f64], normalized: bool) -> f64 {
        let s = smoother_forward(params, grid);
        let s = if normalized {
            smoother_normalize(&s).unwrap()
        } else {
            s
        };
        s.values.iter().zip(up).map(|(u, g)| u * g).sum()
    }

    /// Central differences over (mu1, mu2, alpha, beta, gamma).
    fn numeric(params: &GaussianParams, grid: &PatchGrid, up: &[f64], normalized: bool) -> [f64; 5] {
        let base = params.to_array();
        let mut out = [0.0; 5];
        for i in 0..5 {
            let mut plus = base;
            let mut minus = base;
            plus[i] += H;
            minus[i] -= H;
            let lp = loss(&GaussianParams::from_slice(&plus), grid, up, normalized);
            let lm = loss(&GaussianParams::from_slice(&minus), grid, up, normalized);
            out[i] = (lp - lm) / (plus[i] - minus[i]);
        }
        out
    }

    /// Literal transcription of the quotient rule, one position at a time.
    fn quotient_rule_oracle(params: &GaussianParams, grid: &PatchGrid, up: &[f64]) -> [f64; 5] {
        let raw = smoother_forward(params, grid);
        let m = grid.len();
        // per-position derivative of U_p w.r.t. each of the five scalars
        let mut du = vec![[0.0; 5]; m];
        for p in 0..m {
            let mut onehot = vec![0.0; m];
            onehot[p] = 1.0;
            du[p] = raw_backward(params, grid, &raw.values, &onehot).to_array();
        }
        let s: f64 = raw.values.iter().sum();
        let mut sum_du = [0.0; 5];
        for d in &du {
            for j in 0..5 {
                sum_du[j] += d[j];
            }
        }
        let mut out = [0.0; 5];
        for p in 0..m {
            for j in 0..5 {
                let dhat = (du[p][j] * s - raw.values[p] * sum_du[j]) / (s * s);
                out[j] += up[p] * dhat;
            }
        }
        out
    }

    #[test]
    fn precision_examples() {
        let eye = precision_from_phi(&GaussianParams::new([0.0; 2], 1.0, 1.0, 0.0));
        assert_eq!(eye, [[1.0, 0.0], [0.0, 1.0]]);
        let zero = precision_from_phi(&GaussianParams::new([0.0; 2], 0.0, 0.0, 0.0));
        assert_eq!(zero, [[0.0; 2]; 2]);
        let l = precision_from_phi(&GaussianParams::new([0.0; 2], 2.0, 1.0, 1.0));
        assert_eq!(l, [[5.0, 3.0], [3.0, 2.0]]);
    }

    #[test]
    fn grid_coordinates() {
        let g = PatchGrid::new(3, 5).unwrap();
        assert_eq!(g.len(), 15);
        assert_eq!(g.coords()[0], [0.0, 0.0]);
        assert_eq!(g.coords()[5 + 2], [0.5, 0.5]);
        assert_eq!(g.coords()[14], [1.0, 1.0]);
        let line = PatchGrid::new(1, 3).unwrap();
        assert_eq!(line.coords(), &[[0.5, 0.0], [0.5, 0.5], [0.5, 1.0]]);
        assert!(PatchGrid::new(0, 3).is_err());
    }

    #[test]
    fn forward_examples() {
        let grid = PatchGrid::new(3, 3).unwrap();
        let s = smoother_forward(&GaussianParams::centered(), &grid);
        assert_eq!(s.values[4], 1.0);
        assert!((s.values[0] - (-0.5f64).exp()).abs() < 1e-15);
        assert!((s.values[0] - 0.606_530_659_712_633_4).abs() < 1e-15);
        let flat = smoother_forward(&GaussianParams::new([0.3, 0.9], 0.0, 0.0, 0.0), &grid);
        assert!(flat.values.iter().all(|&u| u == 1.0));
    }

    #[test]
    fn normalize_examples() {
        let grid = PatchGrid::new(4, 5).unwrap();
        let flat = smoother_forward(&GaussianParams::new([0.1, 0.2], 0.0, 0.0, 0.0), &grid);
        let n = smoother_normalize(&flat).unwrap();
        assert!(n.normalized);
        assert!(n.values.iter().all(|&v| (v - 0.05).abs() < 1e-15));
        let single = PatchGrid::new(1, 1).unwrap();
        let one = smoother_normalize(&smoother_forward(&GaussianParams::centered(), &single)).unwrap();
        assert_eq!(one.values, vec![1.0]);
        assert!(smoother_normalize(&n).is_err());
    }

    #[test]
    fn backward_symmetry_cancels() {
        let grid = PatchGrid::new(5, 5).unwrap();
        let s = smoother_forward(&GaussianParams::centered(), &grid);
        let g = smoother_backward(&GaussianParams::centered(), &grid, &s, &[1.0; 25]).unwrap();
        assert!(g.mu_norm() < 1e-15);
    }

    #[test]
    fn backward_zero_phi_has_zero_mu_grad() {
        let grid = PatchGrid::new(4, 6).unwrap();
        let p = GaussianParams::new([0.2, 0.7], 0.0, 0.0, 0.0);
        let s = smoother_forward(&p, &grid);
        let up: Vec<f64> = (0..24).map(|i| i as f64 - 3.0).collect();
        assert_eq!(smoother_backward(&p, &grid, &s, &up).unwrap().mu, [0.0, 0.0]);
        assert_eq!(normalized_backward(&p, &grid, &s, &up).unwrap().mu, [0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_wrong_flag() {
        let grid = PatchGrid::new(2, 2).unwrap();
        let p = GaussianParams::centered();
        let s = smoother_forward(&p, &grid);
        let n = smoother_normalize(&s).unwrap();
        assert!(matches!(
            smoother_backward(&p, &grid, &n, &[1.0; 4]),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            normalized_backward(&p, &grid, &n, &[1.0; 4]),
            Err(Error::Contract(_))
        ));
        assert!(smoother_backward(&p, &grid, &s, &[1.0; 3]).is_err());
    }

    #[test]
    fn uniform_upstream_gives_zero_normalized_grad() {
        let mut rng = Rng::new(17);
        for _ in 0..50 {
            let grid = PatchGrid::new(rng.range_inclusive(1, 8), rng.range_inclusive(1, 8)).unwrap();
            let p = random_params(&mut rng);
            let s = smoother_forward(&p, &grid);
            let up = vec![0.7; grid.len()];
            let g = normalized_backward(&p, &grid, &s, &up).unwrap();
            assert!(g.norm() < 1e-10, "{g:?}");
        }
    }

    #[test]
    fn both_backwards_match_finite_differences() {
        let mut rng = Rng::new(2024);
        for case in 0..100 {
            let grid = PatchGrid::new(rng.range_inclusive(1, 7), rng.range_inclusive(2, 7)).unwrap();
            let p = random_params(&mut rng);
            let up: Vec<f64> = (0..grid.len()).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let s = smoother_forward(&p, &grid);

            let raw = smoother_backward(&p, &grid, &s, &up).unwrap().to_array();
            let num = numeric(&p, &grid, &up, false);
            for j in 0..5 {
                assert!(rel_err(raw[j], num[j]) < 1e-6, "case {case} raw param {j}: {} vs {}", raw[j], num[j]);
            }

            let norm = normalized_backward(&p, &grid, &s, &up).unwrap().to_array();
            let num = numeric(&p, &grid, &up, true);
            let quot = quotient_rule_oracle(&p, &grid, &up);
            for j in 0..5 {
                assert!(rel_err(norm[j], num[j]) < 1e-6, "case {case} normalized param {j}: {} vs {}", norm[j], num[j]);
                assert!(rel_err(norm[j], quot[j]) < 1e-9, "case {case} quotient param {j}");
            }
        }
    }

    #[test]
    fn normalized_gradient_is_amplified_when_mean_escapes() {
        let mut rng = Rng::new(99);
        let grid = PatchGrid::new(10, 10).unwrap();
        let p = GaussianParams::new([3.0, 3.0], 1.5, 2.0, 0.3);
        let s = smoother_forward(&p, &grid);
        let up: Vec<f64> = (0..grid.len()).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let raw = smoother_backward(&p, &grid, &s, &up).unwrap();
        let norm = normalized_backward(&p, &grid, &s, &up).unwrap();
        assert!(norm.mu_norm() > raw.mu_norm(), "{} vs {}", norm.mu_norm(), raw.mu_norm());
    }

    proptest! {
        #[test]
        fn values_in_unit_interval(mu1 in -3.0f64..3.0, mu2 in -3.0f64..3.0,
                                   a in -5.0f64..5.0, b in -5.0f64..5.0, g in -5.0f64..5.0,
                                   rows in 1usize..9, cols in 1usize..9) {
            let grid = PatchGrid::new(rows, cols).unwrap();
            let p = GaussianParams::new([mu1, mu2], a, b, g);
            let s = smoother_forward(&p, &grid);
            for &u in &s.values {
                prop_assert!(u > 0.0 && u <= 1.0);
            }
            let n = smoother_normalize(&s).unwrap();
            prop_assert!((n.sum() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn precision_is_symmetric_psd(a in -10.0f64..10.0, b in -10.0f64..10.0, g in -10.0f64..10.0) {
            let l = precision_from_phi(&GaussianParams::new([0.0; 2], a, b, g));
            prop_assert_eq!(l[0][1], l[1][0]);
            let tr = l[0][0] + l[1][1];
            let det = l[0][0] * l[1][1] - l[0][1] * l[1][0];
            let disc = ((tr * tr / 4.0) - det).max(0.0).sqrt();
            let lo = tr / 2.0 - disc;
            prop_assert!(lo >= -1e-9 * tr.max(1.0));
        }

        #[test]
        fn negating_phi_leaves_smoother_unchanged(mu1 in -1.0f64..2.0, mu2 in -1.0f64..2.0,
                                                  a in -3.0f64..3.0, b in -3.0f64..3.0, g in -3.0f64..3.0) {
            let grid = PatchGrid::new(4, 3).unwrap();
            let s = smoother_forward(&GaussianParams::new([mu1, mu2], a, b, g), &grid);
            let t = smoother_forward(&GaussianParams::new([mu1, mu2], -a, -b, -g), &grid);
            prop_assert_eq!(s, t);
        }

        #[test]
        fn normalization_ignores_uniform_rescaling(scale in 1e-3f64..1e3, seed in any::<u64>()) {
            let mut rng = Rng::new(seed);
            let values: Vec<f64> = (0..12).map(|_| rng.uniform(0.01, 1.0)).collect();
            let a = smoother_normalize(&Smoother { values: values.clone(), normalized: false }).unwrap();
            let b = smoother_normalize(&Smoother { values: values.iter().map(|v| v * scale).collect(), normalized: false }).unwrap();
            for (x, y) in a.values.iter().zip(&b.values) {
                prop_assert!((x - y).abs() < 1e-14);
            }
        }
    }
}
