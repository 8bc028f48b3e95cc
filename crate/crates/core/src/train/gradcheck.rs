//! Central-difference gradient verification.

use crate::error::Result;
use crate::rng::Rng;

/// Denominator floor of [`relative_error`]. With `h = 1e-6` the central
/// difference of an O(1) loss carries a few 1e-9 of absolute roundoff, so
/// below this floor the comparison becomes absolute (`tol * 1e-2`).
pub const REL_ERR_FLOOR: f64 = 1e-2;

/// `|a - n| / max(|a| + |n|, REL_ERR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(REL_ERR_FLOOR)
}

/// Central differences of `f` at `x`, one coordinate at a time. The step
/// actually taken, `(x + h) - (x - h)` in floating point, is used as the
/// divisor.
pub fn numeric_gradient(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut v = x.to_vec();
    (0..x.len())
        .map(|i| {
            let (plus, minus) = (x[i] + h, x[i] - h);
            v[i] = plus;
            let fp = f(&v);
            v[i] = minus;
            let fm = f(&v);
            v[i] = x[i];
            (fp - fm) / (plus - minus)
        })
        .collect()
}

/// A scalar loss over a set of named parameter tensors.
pub trait Differentiable {
    /// `(name, length)` of every parameter tensor, in a fixed order.
    fn param_tensors(&self) -> Vec<(String, usize)>;

    fn param_mut(&mut self, tensor: usize, index: usize) -> &mut f64;

    /// Forward pass only.
    fn loss(&mut self) -> Result<f64>;

    /// Loss and gradient of every parameter tensor, in `param_tensors` order.
    fn loss_and_grad(&mut self) -> Result<(f64, Vec<Vec<f64>>)>;

    /// Discrete activation state of the last forward pass (relu masks,
    /// pooling winners). A change under perturbation means the difference
    /// quotient straddled a kink.
    fn activation_pattern(&self) -> Vec<u64> {
        Vec::new()
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub h: f64,
    /// Parameters sampled, spread round-robin over the tensors. `None`
    /// checks every parameter.
    pub samples: Option<usize>,
    pub seed: u64,
    /// Multiplies the analytic gradient before comparison; `2.0` simulates
    /// a broken backward pass.
    pub gradient_scale: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            h: 1e-6,
            samples: Some(100),
            seed: 0,
            gradient_scale: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckEntry {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    /// Parameters skipped because a perturbation changed the activation pattern.
    pub skipped: usize,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.rel_err).fold(0.0, f64::max)
    }

    pub fn mean_rel_err(&self) -> f64 {
        if self.entries.is_empty() {
            return 0.0;
        }
        self.entries.iter().map(|e| e.rel_err).sum::<f64>() / self.entries.len() as f64
    }

    /// Entries sorted by decreasing relative error.
    pub fn worst(&self, n: usize) -> Vec<&GradCheckEntry> {
        let mut v: Vec<&GradCheckEntry> = self.entries.iter().collect();
        v.sort_by(|a, b| b.rel_err.total_cmp(&a.rel_err));
        v.truncate(n);
        v
    }

    pub fn passes(&self, tol: f64) -> bool {
        !self.entries.is_empty() && self.max_rel_err() < tol
    }
}

fn sample_indices(sizes: &[(String, usize)], samples: Option<usize>, rng: &mut Rng) -> Vec<(usize, usize)> {
    match samples {
        None => sizes
            .iter()
            .enumerate()
            .flat_map(|(t, (_, n))| (0..*n).map(move |i| (t, i)))
            .collect(),
        Some(k) => {
            let nonempty: Vec<usize> = (0..sizes.len()).filter(|&t| sizes[t].1 > 0).collect();
            let mut out = Vec::with_capacity(k);
            for j in 0..k {
                if nonempty.is_empty() {
                    break;
                }
                let t = nonempty[j % nonempty.len()];
                out.push((t, rng.below(sizes[t].1)));
            }
            out
        }
    }
}

/// Compares analytic gradients with central differences on sampled
/// parameters. The model is restored to its original parameters.
pub fn grad_check<M: Differentiable + ?Sized>(model: &mut M, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let sizes = model.param_tensors();
    let (_, grads) = model.loss_and_grad()?;
    model.loss()?;
    let pattern = model.activation_pattern();
    let mut rng = Rng::new(opts.seed);
    let mut report = GradCheckReport::default();
    for (t, i) in sample_indices(&sizes, opts.samples, &mut rng) {
        let x = *model.param_mut(t, i);
        let (plus, minus) = (x + opts.h, x - opts.h);
        *model.param_mut(t, i) = plus;
        let fp = model.loss()?;
        let kink_p = model.activation_pattern() != pattern;
        *model.param_mut(t, i) = minus;
        let fm = model.loss()?;
        let kink_m = model.activation_pattern() != pattern;
        *model.param_mut(t, i) = x;
        if kink_p || kink_m {
            report.skipped += 1;
            continue;
        }
        let numeric = (fp - fm) / (plus - minus);
        let analytic = grads[t][i] * opts.gradient_scale;
        report.entries.push(GradCheckEntry {
            tensor: sizes[t].0.clone(),
            index: i,
            analytic,
            numeric,
            rel_err: relative_error(analytic, numeric),
        });
    }
    Ok(report)
}
