//! Fitting the Gaussian proposal by stochastic gradient ascent on the IWAE
//! bound, with pathwise (reparameterized) gradients derived by hand for the
//! diagonal family.
//!
//! For `z_i = μ + σ ⊙ ε_i` and `f_i = log p(x, z_i) − log q(z_i|x)`:
//!
//! ```text
//! ∂f_i/∂μ   = ∇log p(z_i)
//! ∂f_i/∂s_d = ∇_d log p(z_i) · σ_d · ε_id + 1        (s = log σ)
//! ∇ log((1/k) Σ exp f_i) = Σ softmax(f)_i ∇f_i
//! ```

use std::io::{self, Write};

use rayon::prelude::*;
use thiserror::Error;

use crate::bounds::{BoundEstimate, BoundKind};
use crate::error::{check_dim, Error, Result};
use crate::model::{GaussianProposal, LatentPoint, TargetModel};
use crate::rng::RngStream;
use crate::stats::mean_and_se;
use crate::weights::{log_mean_exp, normalize_weights, weight_from_parts};

/// `mean + exp(log_std) ⊙ eps`.
pub fn reparam_sample(q: &GaussianProposal, eps: &[f64]) -> Result<LatentPoint> {
    q.reparam(eps)
}

/// A Monte Carlo gradient of the IWAE bound with respect to the proposal's
/// `(mean, log_std)`, with per-component standard errors.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientEstimate {
    pub d_mean: Vec<f64>,
    pub d_log_std: Vec<f64>,
    pub se_mean: Vec<f64>,
    pub se_log_std: Vec<f64>,
    /// The bound estimated from the same batches.
    pub bound: BoundEstimate,
}

impl GradientEstimate {
    pub fn norm(&self) -> f64 {
        self.d_mean
            .iter()
            .chain(&self.d_log_std)
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Directional derivative along `(dir_mean, dir_log_std)`.
    pub fn dot(&self, dir_mean: &[f64], dir_log_std: &[f64]) -> f64 {
        self.d_mean
            .iter()
            .zip(dir_mean)
            .map(|(a, b)| a * b)
            .sum::<f64>()
            + self
                .d_log_std
                .iter()
                .zip(dir_log_std)
                .map(|(a, b)| a * b)
                .sum::<f64>()
    }
}

struct BatchGradient {
    bound: f64,
    grad: Vec<f64>,
}

/// One batch of `k` reparameterized draws. Random numbers are consumed in
/// the same order as [`crate::bounds::iwae_elbo_mc`], so both see the same
/// `ε` for the same seed.
fn batch_gradient(
    t: &TargetModel,
    q: &GaussianProposal,
    k: usize,
    rng: &mut RngStream,
) -> Result<BatchGradient> {
    let d = q.dim();
    let std = q.std();
    let mut eps = vec![0.0; k * d];
    let mut z = vec![0.0; k * d];
    let mut log_w = Vec::with_capacity(k);
    for i in 0..k {
        let (e, zi) = (&mut eps[i * d..(i + 1) * d], &mut z[i * d..(i + 1) * d]);
        rng.fill_standard_normal(e);
        for j in 0..d {
            zi[j] = q.mean()[j] + std[j] * e[j];
        }
        let lp = t.log_density_unchecked(zi);
        if lp.is_nan() {
            return Err(Error::Numeric(format!(
                "target `{}` returned NaN",
                t.name()
            )));
        }
        log_w.push(weight_from_parts(lp, q.log_density_unchecked(zi))?);
    }
    let bound = log_mean_exp(&log_w)?;
    let w = normalize_weights(&log_w)?;
    let mut grad = vec![0.0; 2 * d];
    let mut g = vec![0.0; d];
    for i in 0..k {
        if w[i] == 0.0 {
            continue;
        }
        t.log_grad_into(&z[i * d..(i + 1) * d], &mut g)?;
        for j in 0..d {
            grad[j] += w[i] * g[j];
            grad[d + j] += w[i] * (g[j] * std[j] * eps[i * d + j] + 1.0);
        }
    }
    Ok(BatchGradient { bound, grad })
}

/// Pathwise gradient of `L_IWAE[q]` averaged over `n_batches` batches of `k`
/// draws (batch `i` uses substream `i`).
pub fn iwae_gradient(
    t: &TargetModel,
    q: &GaussianProposal,
    k: usize,
    n_batches: usize,
    rng: &mut RngStream,
) -> Result<GradientEstimate> {
    check_dim(t.dim(), q.dim())?;
    if !t.has_grad() {
        return Err(Error::Capability(format!(
            "target `{}` has no gradient",
            t.name()
        )));
    }
    if k == 0 || n_batches < 2 {
        return Err(Error::InvalidArgument(
            "need k ≥ 1 and n_batches ≥ 2".into(),
        ));
    }
    let streams = rng.split();
    let batches = (0..n_batches)
        .into_par_iter()
        .map(|i| batch_gradient(t, q, k, &mut streams.stream(i as u64)))
        .collect::<Result<Vec<_>>>()?;

    let d = q.dim();
    let mut means = Vec::with_capacity(2 * d);
    let mut ses = Vec::with_capacity(2 * d);
    let mut column = vec![0.0; n_batches];
    for c in 0..2 * d {
        for (slot, b) in column.iter_mut().zip(&batches) {
            *slot = b.grad[c];
        }
        let (m, se) = mean_and_se(&column);
        means.push(m);
        ses.push(se);
    }
    let bounds: Vec<f64> = batches.iter().map(|b| b.bound).collect();
    if bounds.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite IWAE batch value".into()));
    }
    let (value, std_error) = mean_and_se(&bounds);
    if means.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite gradient".into()));
    }
    Ok(GradientEstimate {
        d_log_std: means.split_off(d),
        d_mean: means,
        se_log_std: ses.split_off(d),
        se_mean: ses,
        bound: BoundEstimate {
            value,
            std_error,
            n_samples: n_batches,
            kind: BoundKind::Iwae,
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitConfig {
    pub k: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub n_batches: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            k: 1,
            steps: 2000,
            learning_rate: 0.01,
            n_batches: 32,
        }
    }
}

/// Parameters and bound at one ascent step, recorded before the update.
#[derive(Debug, Clone, PartialEq)]
pub struct FitStep {
    pub step: usize,
    pub bound: f64,
    pub mean: Vec<f64>,
    pub log_std: Vec<f64>,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FitTrace {
    pub steps: Vec<FitStep>,
}

impl FitTrace {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn bounds(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.bound).collect()
    }

    /// Header `step,bound,mean0..,log_std0..,grad_norm`, one row per step.
    pub fn write_csv<W: Write>(&self, mut w: W, dim: usize) -> io::Result<()> {
        let mut header = vec!["step".to_string(), "bound".to_string()];
        header.extend((0..dim).map(|d| format!("mean{d}")));
        header.extend((0..dim).map(|d| format!("log_std{d}")));
        header.push("grad_norm".into());
        writeln!(w, "{}", header.join(","))?;
        for s in &self.steps {
            let mut row = vec![s.step.to_string(), s.bound.to_string()];
            row.extend(s.mean.iter().map(f64::to_string));
            row.extend(s.log_std.iter().map(f64::to_string));
            row.push(s.grad_norm.to_string());
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// A fit that stopped early; the trace holds every completed step.
#[derive(Debug, Error)]
#[error("fit diverged at step {step}: {source}")]
pub struct FitFailure {
    pub step: usize,
    pub trace: FitTrace,
    #[source]
    pub source: Error,
}

/// Plain gradient ascent with a fixed learning rate on the IWAE bound.
pub fn fit_proposal(
    t: &TargetModel,
    q0: &GaussianProposal,
    cfg: &FitConfig,
    rng: &mut RngStream,
) -> std::result::Result<(GaussianProposal, FitTrace), FitFailure> {
    let fail = |step, trace, source| FitFailure {
        step,
        trace,
        source,
    };
    if cfg.steps == 0 || !(cfg.learning_rate > 0.0) {
        return Err(fail(
            0,
            FitTrace::default(),
            Error::InvalidArgument("need steps ≥ 1 and a positive learning rate".into()),
        ));
    }
    let mut q = q0.clone();
    let mut trace = FitTrace {
        steps: Vec::with_capacity(cfg.steps),
    };
    for step in 0..cfg.steps {
        let g = match iwae_gradient(t, &q, cfg.k, cfg.n_batches, rng) {
            Ok(g) => g,
            Err(e) => return Err(fail(step, trace, e)),
        };
        trace.steps.push(FitStep {
            step,
            bound: g.bound.value,
            mean: q.mean().to_vec(),
            log_std: q.log_std().to_vec(),
            grad_norm: g.norm(),
        });
        let mean: Vec<f64> = q
            .mean()
            .iter()
            .zip(&g.d_mean)
            .map(|(m, d)| m + cfg.learning_rate * d)
            .collect();
        let log_std: Vec<f64> = q
            .log_std()
            .iter()
            .zip(&g.d_log_std)
            .map(|(s, d)| s + cfg.learning_rate * d)
            .collect();
        q = match GaussianProposal::new(mean, log_std) {
            Ok(q) => q,
            Err(_) => {
                return Err(fail(
                    step,
                    trace,
                    Error::Numeric("parameters became non-finite".into()),
                ))
            }
        };
    }
    Ok((q, trace))
}
