//! Reduction checks: a locally smoothed layer with an all-ones smoother is a
//! convolution, and a rank-1 locally connected layer is a locally smoothed
//! layer with a free smoother. A rank-2 locally connected layer is not.

use crate::error::Result;
use crate::layers::{conv_forward, extract_patches, local_forward, lsnn_forward, LsnnWeights};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const EQUIV_TOL: f64 = 1e-12;

fn random(shape: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.uniform(-1.0, 1.0)).expect("finite")
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Random layer geometry: `(channels, height, width, kernel, filters)`.
fn geometry(rng: &mut Rng) -> (usize, usize, usize, usize, usize) {
    let k = rng.range_inclusive(1, 4);
    (rng.range_inclusive(1, 3), k + rng.below(6), k + rng.below(6), k, rng.range_inclusive(1, 4))
}

/// `max |lsnn_ones(x) - conv(x)|` for one random instance.
pub fn ones_vs_conv(seed: u64) -> Result<f64> {
    let mut rng = Rng::new(seed);
    let (c, h, w, k, f) = geometry(&mut rng);
    let x = random(&[c, h, w], &mut rng);
    let kernel = random(&[f, c, k, k], &mut rng);
    let u = extract_patches(&x, &[k, k])?;
    let m = u.num_patches();
    let weights = LsnnWeights {
        smoother: Tensor::ones(&[f, 1, m]),
        kernel: kernel.clone().reshape(&[f, 1, c * k * k])?,
    };
    let y = lsnn_forward(&u, &weights)?;
    Ok(max_abs_diff(&y, &conv_forward(&x, &kernel)?))
}

/// `max |local(x; u v^T) - lsnn_free(x; u, v)|` for one random instance.
pub fn rank1_local_vs_free(seed: u64) -> Result<f64> {
    let mut rng = Rng::new(seed);
    let (c, h, w, k, f) = geometry(&mut rng);
    let x = random(&[c, h, w], &mut rng);
    let u = extract_patches(&x, &[k, k])?;
    let (m, kl) = (u.num_patches(), c * k * k);
    let smoother = random(&[f, 1, m], &mut rng);
    let kernel = random(&[f, 1, kl], &mut rng);
    let mut local = Vec::with_capacity(f * m * kl);
    for j in 0..f {
        for p in 0..m {
            let s = smoother.data()[j * m + p];
            local.extend(kernel.data()[j * kl..(j + 1) * kl].iter().map(|v| s * v));
        }
    }
    let local = Tensor::new(vec![f, m, kl], local)?;
    let y = lsnn_forward(&u, &LsnnWeights { smoother, kernel })?;
    Ok(max_abs_diff(&y, &local_forward(&u, &local)?))
}

/// How well the best rank-1 locally smoothed layer reproduces a rank-2
/// locally connected one.
#[derive(Clone, Copy, Debug)]
pub struct Rank2Residual {
    /// `||W - W1||_F / ||W||_F` with `W1` the truncated SVD.
    pub weight_residual: f64,
    /// `||y - y1|| / ||y||` on a random input.
    pub output_residual: f64,
    /// Squared singular values of `W` found by the power iteration.
    pub sigma_sq: [f64; 2],
}

fn matvec(w: &[f64], rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
    (0..rows).map(|r| w[r * cols..(r + 1) * cols].iter().zip(x).map(|(a, b)| a * b).sum()).collect()
}

fn matvec_t(w: &[f64], rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for r in 0..rows {
        for (o, a) in out.iter_mut().zip(&w[r * cols..(r + 1) * cols]) {
            *o += x[r] * a;
        }
    }
    out
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// Leading singular triple `(sigma, left, right)` by power iteration.
fn leading_singular(w: &[f64], rows: usize, cols: usize, rng: &mut Rng) -> (f64, Vec<f64>, Vec<f64>) {
    let mut v: Vec<f64> = (0..cols).map(|_| rng.uniform(-1.0, 1.0)).collect();
    let mut sigma = 0.0;
    for _ in 0..2000 {
        let u = matvec(w, rows, cols, &v);
        let mut next = matvec_t(w, rows, cols, &u);
        let n = norm(&next);
        next.iter_mut().for_each(|a| *a /= n);
        let done = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) < 1e-15;
        v = next;
        sigma = n.sqrt();
        if done {
            break;
        }
    }
    let mut u = matvec(w, rows, cols, &v);
    let s = norm(&u);
    u.iter_mut().for_each(|a| *a /= s);
    (sigma.max(s), u, v)
}

pub fn rank2_residual(seed: u64) -> Result<Rank2Residual> {
    let mut rng = Rng::new(seed);
    let (c, h, w, k) = (1, 8, 8, 3);
    let x = random(&[c, h, w], &mut rng);
    let u = extract_patches(&x, &[k, k])?;
    let (m, kl) = (u.num_patches(), c * k * k);
    let (u1, v1, u2, v2) = (
        random(&[m], &mut rng),
        random(&[kl], &mut rng),
        random(&[m], &mut rng),
        random(&[kl], &mut rng),
    );
    let mut wm = vec![0.0; m * kl];
    for p in 0..m {
        for q in 0..kl {
            wm[p * kl + q] = u1.data()[p] * v1.data()[q] + u2.data()[p] * v2.data()[q];
        }
    }
    let (sigma, left, right) = leading_singular(&wm, m, kl, &mut rng);
    let total_sq: f64 = wm.iter().map(|a| a * a).sum();
    let mut diff_sq = 0.0;
    for p in 0..m {
        for q in 0..kl {
            diff_sq += (wm[p * kl + q] - sigma * left[p] * right[q]).powi(2);
        }
    }
    let local = Tensor::new(vec![1, m, kl], wm)?;
    let smoother = Tensor::new(vec![1, 1, m], left.iter().map(|a| a * sigma).collect())?;
    let kernel = Tensor::new(vec![1, 1, kl], right)?;
    let y = local_forward(&u, &local)?;
    let y1 = lsnn_forward(&u, &LsnnWeights { smoother, kernel })?;
    let dy: Vec<f64> = y.data().iter().zip(y1.data()).map(|(a, b)| a - b).collect();
    Ok(Rank2Residual {
        weight_residual: (diff_sq / total_sq).sqrt(),
        output_residual: norm(&dy) / norm(y.data()),
        sigma_sq: [sigma * sigma, total_sq - sigma * sigma],
    })
}

/// Outcome of the full equivalence suite.
#[derive(Clone, Debug)]
pub struct EquivReport {
    pub ones_vs_conv: Vec<(u64, f64)>,
    pub rank1_vs_free: Vec<(u64, f64)>,
    pub rank2: Rank2Residual,
}

impl EquivReport {
    pub fn failures(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (what, runs) in [("ones-vs-conv", &self.ones_vs_conv), ("rank1-local-vs-free", &self.rank1_vs_free)] {
            for &(seed, d) in runs.iter().filter(|(_, d)| !(*d < EQUIV_TOL)) {
                out.push(format!("{what} seed={seed} max_abs_diff={d:e}"));
            }
        }
        if !(self.rank2.weight_residual > 1e-6) {
            out.push(format!("rank-2 residual {:e} is not positive", self.rank2.weight_residual));
        }
        out
    }
}

/// Runs both identities on `instances` seeds starting at `seed`, plus one
/// rank-2 counterexample.
pub fn run_equivalence(seed: u64, instances: usize) -> Result<EquivReport> {
    let seeds = (0..instances as u64).map(|i| seed.wrapping_add(i));
    Ok(EquivReport {
        ones_vs_conv: seeds.clone().map(|s| Ok((s, ones_vs_conv(s)?))).collect::<Result<_>>()?,
        rank1_vs_free: seeds.map(|s| Ok((s, rank1_local_vs_free(s)?))).collect::<Result<_>>()?,
        rank2: rank2_residual(seed)?,
    })
}
