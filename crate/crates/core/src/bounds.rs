//! Evidence lower bounds.
//!
//! `L_VAE[q]` and `L_IWAE[q]` are estimated by Monte Carlo with standard
//! errors from per-replicate values. The bounds built from the implicit
//! distributions (`q̃_IW` for a fixed batch, `q_EW`) are integrated on a grid.
//! Replicate `i` always uses substream `i`, so estimates depend only on the
//! seed, never on the worker count.

use std::fmt;

use rayon::prelude::*;

use crate::error::{check_dim, Error, Result};
use crate::implicit::{GridEvaluator, QiwContext, UNDERFLOW};
use crate::model::{GaussianProposal, LatentPoint, TargetModel};
use crate::oracle::Grid;
use crate::rng::RngStream;
use crate::stats::mean_and_se;
use crate::weights::{log_mean_exp, weight_from_parts};

/// Largest allowed deviation of a rendered `q_EW` field's mass from 1.
pub const QEW_MASS_TOLERANCE: f64 = 0.05;

/// Minimum number of outer iterations for [`vae_elbo_qew_quadrature`].
pub const QEW_MIN_SAMPLES: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundKind {
    Vae,
    Iwae,
    VaeQiwExpected,
    VaeQew,
}

impl fmt::Display for BoundKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BoundKind::Vae => "vae",
            BoundKind::Iwae => "iwae",
            BoundKind::VaeQiwExpected => "vae_qiw_expected",
            BoundKind::VaeQew => "vae_qew",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundEstimate {
    pub value: f64,
    pub std_error: f64,
    pub n_samples: usize,
    pub kind: BoundKind,
}

impl BoundEstimate {
    fn from_replicates(values: &[f64], kind: BoundKind) -> Result<Self> {
        if values.iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric(format!("NaN replicate in {kind} estimate")));
        }
        let (value, std_error) = if values.contains(&f64::NEG_INFINITY) {
            (f64::NEG_INFINITY, f64::INFINITY)
        } else {
            mean_and_se(values)
        };
        Ok(Self {
            value,
            std_error,
            n_samples: values.len(),
            kind,
        })
    }
}

/// Standard error of the difference of two independent estimates.
pub fn combined_se(a: &BoundEstimate, b: &BoundEstimate) -> f64 {
    a.std_error.hypot(b.std_error)
}

/// Log weights of the `k` points in a batch drawn from `rng`.
pub(crate) fn batch_log_weights(
    t: &TargetModel,
    q: &GaussianProposal,
    k: usize,
    rng: &mut RngStream,
    z: &mut [f64],
) -> Result<Vec<f64>> {
    (0..k)
        .map(|_| {
            q.sample_into(rng, z);
            let lp = t.log_density_unchecked(z);
            if lp.is_nan() {
                return Err(Error::Numeric(format!(
                    "target `{}` returned NaN",
                    t.name()
                )));
            }
            weight_from_parts(lp, q.log_density_unchecked(z))
        })
        .collect()
}

fn check_pair(t: &TargetModel, q: &GaussianProposal) -> Result<()> {
    check_dim(t.dim(), q.dim())
}

/// `L_VAE[q] = E_q[log p(x,z) − log q(z|x)]` from `n` draws.
pub fn vae_elbo_mc(
    t: &TargetModel,
    q: &GaussianProposal,
    n: usize,
    rng: &mut RngStream,
) -> Result<BoundEstimate> {
    check_pair(t, q)?;
    if n < 2 {
        return Err(Error::InvalidArgument("need n ≥ 2 draws".into()));
    }
    let streams = rng.split();
    let values = (0..n)
        .into_par_iter()
        .map_init(
            || vec![0.0; q.dim()],
            |z, i| {
                let lw = batch_log_weights(t, q, 1, &mut streams.stream(i as u64), z)?;
                Ok(lw[0])
            },
        )
        .collect::<Result<Vec<_>>>()?;
    BoundEstimate::from_replicates(&values, BoundKind::Vae)
}

/// `L_IWAE[q] = E[log (1/k) Σ w_i]` from `n_batches` batches of `k` draws.
pub fn iwae_elbo_mc(
    t: &TargetModel,
    q: &GaussianProposal,
    k: usize,
    n_batches: usize,
    rng: &mut RngStream,
) -> Result<BoundEstimate> {
    check_pair(t, q)?;
    if k == 0 || n_batches < 2 {
        return Err(Error::InvalidArgument(
            "need k ≥ 1 and n_batches ≥ 2".into(),
        ));
    }
    let streams = rng.split();
    let values = (0..n_batches)
        .into_par_iter()
        .map_init(
            || vec![0.0; q.dim()],
            |z, i| {
                let lw = batch_log_weights(t, q, k, &mut streams.stream(i as u64), z)?;
                let v = log_mean_exp(&lw)?;
                if v == f64::NEG_INFINITY {
                    return Err(Error::Numeric(format!(
                        "IWAE batch {i}: every importance weight is zero"
                    )));
                }
                Ok(v)
            },
        )
        .collect::<Result<Vec<_>>>()?;
    BoundEstimate::from_replicates(&values, BoundKind::Iwae)
}

/// `∫ q(z) log(p(x,z)/q(z)) dz` by quadrature.
pub fn vae_elbo_quadrature(t: &TargetModel, q: &GaussianProposal, grid: &Grid) -> Result<f64> {
    let ev = GridEvaluator::new(t, q, grid)?;
    let qf = ev.proposal_field();
    Ok(plugin_bound(ev.log_p(), qf.values(), grid.cell_volume()))
}

/// `Σ f·(log p − log f)·vol` over cells with `f ≥ 1e-300` (`0·log 0 = 0`).
fn plugin_bound(log_p: &[f64], field: &[f64], cell_volume: f64) -> f64 {
    let mut acc = 0.0;
    for (&lp, &f) in log_p.iter().zip(field) {
        if f < UNDERFLOW {
            continue;
        }
        if lp == f64::NEG_INFINITY {
            return f64::NEG_INFINITY;
        }
        acc += f * (lp - f.ln());
    }
    acc * cell_volume
}

/// `∫ q̃_IW(z|x,z_2:k) log(p(x,z)/q̃_IW(z|x,z_2:k)) dz` for one conditioning
/// batch `z_rest = z_2..z_k`. The measure `q̃_IW` is unnormalized, so this is
/// an integral rather than an expectation.
pub fn vae_bound_of_qiw_quadrature(
    t: &TargetModel,
    q: &GaussianProposal,
    z_rest: &[LatentPoint],
    grid: &Grid,
) -> Result<f64> {
    let ctx = QiwContext::from_points(t, q, z_rest)?;
    Ok(GridEvaluator::new(t, q, grid)?.vae_bound_of_qiw(&ctx))
}

/// Average of [`vae_bound_of_qiw_quadrature`] over `n_batches` freshly drawn
/// conditioning batches; in expectation this equals `L_IWAE[q]` at the same `k`.
pub fn expected_vae_bound_of_qiw(
    t: &TargetModel,
    q: &GaussianProposal,
    k: usize,
    n_batches: usize,
    grid: &Grid,
    rng: &mut RngStream,
) -> Result<BoundEstimate> {
    if n_batches < 2 {
        return Err(Error::InvalidArgument("need n_batches ≥ 2".into()));
    }
    let ev = GridEvaluator::new(t, q, grid)?;
    let streams = rng.split();
    let values = (0..n_batches)
        .into_par_iter()
        .map(|i| {
            let ctx = QiwContext::draw(t, q, k, &mut streams.stream(i as u64))?;
            Ok(ev.vae_bound_of_qiw(&ctx))
        })
        .collect::<Result<Vec<_>>>()?;
    BoundEstimate::from_replicates(&values, BoundKind::VaeQiwExpected)
}

/// `L_VAE[q_EW]` by quadrature of a rendered `q_EW` field.
///
/// The field from `samples` outer iterations is checked to have mass within
/// [`QEW_MASS_TOLERANCE`] of one, rescaled to unit mass, and plugged into
/// `Σ f·(log p − log f)·vol`.
pub fn vae_elbo_qew_quadrature(
    t: &TargetModel,
    q: &GaussianProposal,
    k: usize,
    samples: usize,
    grid: &Grid,
    rng: &mut RngStream,
) -> Result<f64> {
    if samples < QEW_MIN_SAMPLES {
        return Err(Error::InvalidArgument(format!(
            "need S ≥ {QEW_MIN_SAMPLES} outer iterations, got {samples}"
        )));
    }
    let ev = GridEvaluator::new(t, q, grid)?;
    let field = ev.qew_field(k, samples, rng)?;
    qew_bound_from_field(&ev, field.values(), true)
}

fn qew_bound_from_field(ev: &GridEvaluator<'_>, values: &[f64], check_mass: bool) -> Result<f64> {
    let vol = ev.grid().cell_volume();
    let mass = values.iter().sum::<f64>() * vol;
    if check_mass && (mass - 1.0).abs() > QEW_MASS_TOLERANCE {
        return Err(Error::Diagnostic(format!(
            "q_EW field mass {mass:.4} is not within {QEW_MASS_TOLERANCE} of 1; \
             widen the grid or raise S"
        )));
    }
    let normalized: Vec<f64> = values.iter().map(|v| v / mass).collect();
    Ok(plugin_bound(ev.log_p(), &normalized, vol))
}

/// [`vae_elbo_qew_quadrature`] with a batch-means standard error: the `S`
/// outer iterations are split into `groups` blocks, the bound is evaluated on
/// each block's field, and the spread of those values gives the error bar.
pub fn vae_elbo_qew_estimate(
    t: &TargetModel,
    q: &GaussianProposal,
    k: usize,
    samples: usize,
    groups: usize,
    grid: &Grid,
    rng: &mut RngStream,
) -> Result<BoundEstimate> {
    if samples < QEW_MIN_SAMPLES {
        return Err(Error::InvalidArgument(format!(
            "need S ≥ {QEW_MIN_SAMPLES} outer iterations, got {samples}"
        )));
    }
    qew_estimate_with(&GridEvaluator::new(t, q, grid)?, k, samples, groups, rng)
}

/// [`vae_elbo_qew_estimate`] on a prepared evaluator.
pub fn qew_estimate_with(
    ev: &GridEvaluator<'_>,
    k: usize,
    samples: usize,
    groups: usize,
    rng: &mut RngStream,
) -> Result<BoundEstimate> {
    if samples < QEW_MIN_SAMPLES {
        return Err(Error::InvalidArgument(format!(
            "need S ≥ {QEW_MIN_SAMPLES} outer iterations, got {samples}"
        )));
    }
    if groups < 2 {
        return Err(Error::InvalidArgument("need at least two groups".into()));
    }
    let (full, parts) = ev.qew_field_grouped(k, samples, groups, rng)?;
    let value = qew_bound_from_field(ev, full.values(), true)?;
    // small blocks have noisy mass; only the full field is held to the tolerance
    let part_values = parts
        .iter()
        .map(|p| qew_bound_from_field(ev, p.values(), false))
        .collect::<Result<Vec<_>>>()?;
    let (_, std_error) = mean_and_se(&part_values);
    Ok(BoundEstimate {
        value,
        std_error,
        n_samples: samples,
        kind: BoundKind::VaeQew,
    })
}
