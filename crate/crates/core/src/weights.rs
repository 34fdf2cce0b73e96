//! Log-space importance-weight arithmetic.
//!
//! Reductions run in index order so that results are bit-reproducible
//! regardless of how callers schedule the work that produced the inputs.

use crate::error::{Error, Result};
use crate::model::{GaussianProposal, LatentPoint, TargetModel};
use crate::rng::RngStream;

/// `log p(x, z) − log q(z|x)`.
pub fn log_weight(t: &TargetModel, q: &GaussianProposal, z: &[f64]) -> Result<f64> {
    let lp = t.log_density(z)?;
    let lq = q.log_density(z)?;
    weight_from_parts(lp, lq)
}

pub(crate) fn weight_from_parts(lp: f64, lq: f64) -> Result<f64> {
    if lq == f64::NEG_INFINITY {
        if lp == f64::NEG_INFINITY {
            return Err(Error::Numeric(
                "log weight is -inf - (-inf): both densities vanish".into(),
            ));
        }
        return Err(Error::Numeric(
            "proposal density vanishes where the target does not".into(),
        ));
    }
    Ok(lp - lq)
}

/// `log Σ exp(v_i)`, shifted by the maximum.
pub fn log_sum_exp(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InvalidArgument(
            "log_sum_exp of an empty list".into(),
        ));
    }
    let m = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return Ok(m);
    }
    if m.is_nan() || values.iter().any(|v| v.is_nan()) {
        return Err(Error::Numeric("NaN in log_sum_exp input".into()));
    }
    let mut s = 0.0;
    for v in values {
        s += (v - m).exp();
    }
    Ok(m + s.ln())
}

/// `log((1/k) Σ exp(v_i))`. Returns `−∞` iff every input is `−∞`.
pub fn log_mean_exp(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InvalidArgument(
            "log_mean_exp of an empty list".into(),
        ));
    }
    let m = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return Ok(m);
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::Numeric("NaN in log_mean_exp input".into()));
    }
    let mut s = 0.0;
    for v in values {
        s += (v - m).exp();
    }
    Ok(m + (s / values.len() as f64).ln())
}

/// `log(exp(a) + exp(b))`.
#[inline]
pub fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    if a > b {
        a + (b - a).exp().ln_1p()
    } else {
        b + (a - b).exp().ln_1p()
    }
}

/// Softmax of log weights: `w̃_i = w_i / Σ w_j`.
pub fn normalize_weights(log_w: &[f64]) -> Result<Vec<f64>> {
    let m = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return Err(Error::Numeric(
            "cannot normalize weights: every weight is zero".into(),
        ));
    }
    if log_w.iter().any(|v| v.is_nan()) {
        return Err(Error::Numeric("NaN log weight".into()));
    }
    let mut out: Vec<f64> = log_w.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = out.iter().sum();
    for v in out.iter_mut() {
        *v /= s;
    }
    Ok(out)
}

/// `k` proposal draws with their log importance weights.
#[derive(Debug, Clone)]
pub struct WeightBatch {
    points: Vec<LatentPoint>,
    log_w: Vec<f64>,
}

impl WeightBatch {
    /// Draws `k` points from `q` and weights them against `t`.
    pub fn draw(
        t: &TargetModel,
        q: &GaussianProposal,
        k: usize,
        rng: &mut RngStream,
    ) -> Result<Self> {
        let points = (0..k).map(|_| q.sample(rng)).collect();
        Self::from_points(t, q, points)
    }

    pub fn from_points(
        t: &TargetModel,
        q: &GaussianProposal,
        points: Vec<LatentPoint>,
    ) -> Result<Self> {
        let log_w = points
            .iter()
            .map(|z| log_weight(t, q, z))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { points, log_w })
    }

    pub fn points(&self) -> &[LatentPoint] {
        &self.points
    }

    pub fn log_w(&self) -> &[f64] {
        &self.log_w
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn log_mean_weight(&self) -> Result<f64> {
        log_mean_exp(&self.log_w)
    }

    pub fn normalized(&self) -> Result<Vec<f64>> {
        normalize_weights(&self.log_w)
    }
}
