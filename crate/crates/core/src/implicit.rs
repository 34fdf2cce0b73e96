//! The implicit distributions behind the importance-weighted bound.
//!
//! Given a conditioning batch `z_2..z_k ~ q`, the importance-weighted density
//!
//! ```text
//! q̃_IW(z | z_2:k) = p(x,z) / ( (1/k) · ( p(x,z)/q(z|x) + Σ_{j≥2} w_j ) )
//! ```
//!
//! is generally unnormalized; its average over batches, `q_EW(z)`, is a proper
//! density which sampling-importance-resampling draws from exactly. This
//! module evaluates `q̃_IW`, estimates `q_EW` pointwise and on whole grids, and
//! samples `q_EW` by SIR.

use rayon::prelude::*;

use crate::error::{check_dim, Error, Result};
use crate::model::{GaussianProposal, LatentPoint, TargetModel};
use crate::oracle::Grid;
use crate::rng::RngStream;
use crate::weights::{log_add_exp, log_sum_exp, normalize_weights, weight_from_parts};

pub use crate::field::DensityField;

/// Below this a `q̃_IW` value is treated as zero mass.
pub const UNDERFLOW: f64 = 1e-300;

/// `log q̃_IW` for a point with log target density `lp` and log weight `lw`,
/// given the log of the conditioning batch's weight sum.
#[inline]
pub(crate) fn qiw_log_value(lp: f64, lw: f64, log_rest_sum: f64, log_divisor: f64) -> f64 {
    if lp == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    lp - (log_add_exp(lw, log_rest_sum) - log_divisor)
}

/// A conditioning batch `z_2..z_k`, reduced to what `q̃_IW` needs: its log
/// weights and their log sum.
#[derive(Debug, Clone)]
pub struct QiwContext<'a> {
    target: &'a TargetModel,
    proposal: &'a GaussianProposal,
    k: usize,
    rest_log_w: Vec<f64>,
    log_rest_sum: f64,
}

impl<'a> QiwContext<'a> {
    pub fn new(
        target: &'a TargetModel,
        proposal: &'a GaussianProposal,
        k: usize,
        rest_log_w: Vec<f64>,
    ) -> Result<Self> {
        check_dim(target.dim(), proposal.dim())?;
        if k == 0 {
            return Err(Error::InvalidArgument("k must be at least 1".into()));
        }
        if rest_log_w.len() != k - 1 {
            return Err(Error::InvalidArgument(format!(
                "conditioning batch for k={k} needs {} log weights, got {}",
                k - 1,
                rest_log_w.len()
            )));
        }
        if rest_log_w.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
            return Err(Error::Numeric(
                "conditioning log weights must be finite or -inf".into(),
            ));
        }
        let log_rest_sum = if rest_log_w.is_empty() {
            f64::NEG_INFINITY
        } else {
            log_sum_exp(&rest_log_w)?
        };
        Ok(Self {
            target,
            proposal,
            k,
            rest_log_w,
            log_rest_sum,
        })
    }

    /// Builds the context from explicit points `z_2..z_k`; `k = z_rest.len() + 1`.
    pub fn from_points(
        target: &'a TargetModel,
        proposal: &'a GaussianProposal,
        z_rest: &[LatentPoint],
    ) -> Result<Self> {
        let log_w = z_rest
            .iter()
            .map(|z| crate::weights::log_weight(target, proposal, z))
            .collect::<Result<Vec<_>>>()?;
        Self::new(target, proposal, z_rest.len() + 1, log_w)
    }

    /// Draws a fresh conditioning batch of `k − 1` points from the proposal.
    pub fn draw(
        target: &'a TargetModel,
        proposal: &'a GaussianProposal,
        k: usize,
        rng: &mut RngStream,
    ) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidArgument("k must be at least 1".into()));
        }
        let log_w = draw_rest_log_weights(target, proposal, k, rng)?;
        Self::new(target, proposal, k, log_w)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn rest_log_w(&self) -> &[f64] {
        &self.rest_log_w
    }

    /// `log Σ_{j≥2} w_j`; `−∞` when `k = 1`.
    pub fn log_rest_sum(&self) -> f64 {
        self.log_rest_sum
    }

    pub fn log_density(&self, z: &[f64]) -> Result<f64> {
        let lp = self.target.log_density(z)?;
        let lq = self.proposal.log_density(z)?;
        if lp == f64::NEG_INFINITY {
            return Ok(f64::NEG_INFINITY);
        }
        let lw = weight_from_parts(lp, lq)?;
        Ok(qiw_log_value(
            lp,
            lw,
            self.log_rest_sum,
            (self.k as f64).ln(),
        ))
    }

    /// `q̃_IW(z | x, z_2:k)`.
    pub fn density(&self, z: &[f64]) -> Result<f64> {
        Ok(self.log_density(z)?.exp())
    }
}

/// Log weights of `k − 1` fresh proposal draws.
fn draw_rest_log_weights(
    t: &TargetModel,
    q: &GaussianProposal,
    k: usize,
    rng: &mut RngStream,
) -> Result<Vec<f64>> {
    let mut z = vec![0.0; q.dim()];
    (1..k)
        .map(|_| {
            q.sample_into(rng, &mut z);
            let lp = t.log_density_unchecked(&z);
            if lp.is_nan() {
                return Err(Error::Numeric(format!(
                    "target `{}` returned NaN",
                    t.name()
                )));
            }
            weight_from_parts(lp, q.log_density_unchecked(&z))
        })
        .collect()
}

/// `log Σ_{j=2}^k w_j` for `count` independent batches, one substream each.
fn draw_log_rest_sums(
    t: &TargetModel,
    q: &GaussianProposal,
    k: usize,
    count: usize,
    rng: &mut RngStream,
) -> Result<Vec<f64>> {
    let streams = rng.split();
    (0..count)
        .into_par_iter()
        .map(|s| {
            let mut r = streams.stream(s as u64);
            let lw = draw_rest_log_weights(t, q, k, &mut r)?;
            log_sum_exp(&lw)
        })
        .collect()
}

/// `q_EW(z)` estimated as the average of `q̃_IW(z | batch)` over `samples`
/// independent batches.
pub fn qew_density_mc(
    t: &TargetModel,
    q: &GaussianProposal,
    z: &[f64],
    k: usize,
    samples: usize,
    rng: &mut RngStream,
) -> Result<f64> {
    check_dim(t.dim(), q.dim())?;
    if samples == 0 || k == 0 {
        return Err(Error::InvalidArgument("need k ≥ 1 and S ≥ 1".into()));
    }
    let lq = q.log_density(z)?;
    if k == 1 {
        return Ok(lq.exp());
    }
    let lp = t.log_density(z)?;
    if lp == f64::NEG_INFINITY {
        return Ok(0.0);
    }
    let lw = weight_from_parts(lp, lq)?;
    let log_divisor = (k as f64).ln();
    let sums = draw_log_rest_sums(t, q, k, samples, rng)?;
    let total: f64 = sums
        .iter()
        .map(|&r| qiw_log_value(lp, lw, r, log_divisor).exp())
        .sum();
    Ok(total / samples as f64)
}

/// Picks the first index with positive weight whose cumulative weight reaches
/// `u`. Zero-weight entries are never returned.
pub fn categorical_index(probs: &[f64], u: f64) -> Result<usize> {
    let mut cum = 0.0;
    let mut last_positive = None;
    for (i, &p) in probs.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        cum += p;
        last_positive = Some(i);
        if cum >= u {
            return Ok(i);
        }
    }
    // rounding can leave the total a hair below u
    last_positive.ok_or_else(|| Error::Numeric("categorical with no positive weight".into()))
}

/// One draw from `q_EW` by sampling-importance-resampling: draw `k` proposals,
/// normalize their importance weights, resample one index with a single
/// uniform.
pub fn sir_sample(
    t: &TargetModel,
    q: &GaussianProposal,
    k: usize,
    rng: &mut RngStream,
) -> Result<LatentPoint> {
    check_dim(t.dim(), q.dim())?;
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    let mut points = Vec::with_capacity(k);
    let mut log_w = Vec::with_capacity(k);
    for _ in 0..k {
        let z = q.sample(rng);
        let lp = t.log_density_unchecked(&z);
        if lp.is_nan() {
            return Err(Error::Numeric(format!(
                "target `{}` returned NaN",
                t.name()
            )));
        }
        log_w.push(weight_from_parts(lp, q.log_density_unchecked(&z))?);
        points.push(z);
    }
    let probs = normalize_weights(&log_w)?;
    let j = categorical_index(&probs, rng.uniform())?;
    Ok(points.swap_remove(j))
}

/// `n` independent SIR draws, draw `i` using substream `i`.
pub fn sir_samples(
    t: &TargetModel,
    q: &GaussianProposal,
    k: usize,
    n: usize,
    rng: &mut RngStream,
) -> Result<Vec<LatentPoint>> {
    let streams = rng.split();
    (0..n)
        .into_par_iter()
        .map(|i| sir_sample(t, q, k, &mut streams.stream(i as u64)))
        .collect()
}

/// `n` independent proposal draws, draw `i` using substream `i`.
pub fn proposal_samples(q: &GaussianProposal, n: usize, rng: &mut RngStream) -> Vec<LatentPoint> {
    let streams = rng.split();
    (0..n)
        .into_par_iter()
        .map(|i| q.sample(&mut streams.stream(i as u64)))
        .collect()
}

/// Target and proposal log densities cached on every cell of a grid, so that
/// many `q̃_IW` / `q_EW` fields can be rendered without re-evaluating them.
#[derive(Debug, Clone)]
pub struct GridEvaluator<'a> {
    target: &'a TargetModel,
    proposal: &'a GaussianProposal,
    grid: Grid,
    log_p: Vec<f64>,
    log_q: Vec<f64>,
    log_w: Vec<f64>,
    divisor_offset: i64,
}

impl<'a> GridEvaluator<'a> {
    pub fn new(
        target: &'a TargetModel,
        proposal: &'a GaussianProposal,
        grid: &Grid,
    ) -> Result<Self> {
        check_dim(target.dim(), proposal.dim())?;
        check_dim(target.dim(), grid.dim())?;
        let log_p = crate::oracle::log_density_grid(target, grid)?;
        let log_q = grid.map_cells(|z| proposal.log_density_unchecked(z));
        let log_w = log_p
            .iter()
            .zip(&log_q)
            .map(|(&lp, &lq)| {
                if lp == f64::NEG_INFINITY {
                    Ok(f64::NEG_INFINITY)
                } else {
                    weight_from_parts(lp, lq)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            target,
            proposal,
            grid: grid.clone(),
            log_p,
            log_q,
            log_w,
            divisor_offset: 0,
        })
    }

    /// Replaces the `1/k` in the `q̃_IW` denominator with `1/(k + offset)`.
    /// Only for mutation tests of the verification suite.
    #[doc(hidden)]
    pub fn with_divisor_offset(mut self, offset: i64) -> Self {
        self.divisor_offset = offset;
        self
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn target(&self) -> &TargetModel {
        self.target
    }

    pub fn proposal(&self) -> &GaussianProposal {
        self.proposal
    }

    pub fn log_p(&self) -> &[f64] {
        &self.log_p
    }

    fn log_divisor(&self, k: usize) -> f64 {
        ((k as i64 + self.divisor_offset).max(1) as f64).ln()
    }

    /// The proposal density on every cell.
    pub fn proposal_field(&self) -> DensityField {
        let values = self.log_q.iter().map(|l| l.exp()).collect();
        DensityField::new(self.grid.clone(), values).expect("proposal density is finite")
    }

    /// `q̃_IW` on every cell for one conditioning batch.
    pub fn qiw_field(&self, ctx: &QiwContext<'_>) -> Result<DensityField> {
        let values = self.qiw_values(ctx.k(), ctx.log_rest_sum());
        DensityField::new(self.grid.clone(), values)
    }

    fn qiw_values(&self, k: usize, log_rest_sum: f64) -> Vec<f64> {
        let log_divisor = self.log_divisor(k);
        self.log_p
            .par_iter()
            .zip(self.log_w.par_iter())
            .map(|(&lp, &lw)| qiw_log_value(lp, lw, log_rest_sum, log_divisor).exp())
            .collect()
    }

    /// `∫ q̃_IW log(p / q̃_IW) dz` by quadrature for one conditioning batch.
    /// `q̃_IW` is unnormalized, so this is an integral, not an expectation.
    pub fn vae_bound_of_qiw(&self, ctx: &QiwContext<'_>) -> f64 {
        self.vae_bound_of_qiw_raw(ctx.k(), ctx.log_rest_sum())
    }

    pub(crate) fn vae_bound_of_qiw_raw(&self, k: usize, log_rest_sum: f64) -> f64 {
        let log_divisor = self.log_divisor(k);
        let mut acc = 0.0;
        for (&lp, &lw) in self.log_p.iter().zip(&self.log_w) {
            let log_den = log_add_exp(lw, log_rest_sum) - log_divisor;
            let qiw = if lp == f64::NEG_INFINITY {
                0.0
            } else {
                (lp - log_den).exp()
            };
            if qiw < UNDERFLOW {
                continue;
            }
            // log(p / q̃_IW) is exactly the log denominator
            acc += qiw * log_den;
        }
        acc * self.grid.cell_volume()
    }

    /// Renders `q_EW` on the grid: for each of `samples` outer iterations draw
    /// `z_2..z_k`, form `p̂ = Σ_{i≥2} w_i`, and accumulate
    /// `p(x,z) / ((1/k)(p(x,z)/q(z|x) + p̂))` at every cell; return the
    /// average. `k = 1` returns the proposal field without drawing.
    pub fn qew_field(&self, k: usize, samples: usize, rng: &mut RngStream) -> Result<DensityField> {
        let sums = self.draw_rest_sums(k, samples, rng)?;
        match sums {
            None => Ok(self.proposal_field()),
            Some(sums) => {
                let values = self.accumulate(k, &sums);
                DensityField::new(self.grid.clone(), values)
            }
        }
    }

    /// Like [`qew_field`](Self::qew_field) but additionally returns the fields
    /// of `groups` contiguous, equally sized blocks of outer iterations (for
    /// batch-means error bars).
    pub fn qew_field_grouped(
        &self,
        k: usize,
        samples: usize,
        groups: usize,
        rng: &mut RngStream,
    ) -> Result<(DensityField, Vec<DensityField>)> {
        if groups == 0 || !samples.is_multiple_of(groups) {
            return Err(Error::InvalidArgument(format!(
                "S = {samples} must split into {groups} equal groups"
            )));
        }
        let Some(sums) = self.draw_rest_sums(k, samples, rng)? else {
            let q = self.proposal_field();
            return Ok((q.clone(), vec![q; groups]));
        };
        let full = DensityField::new(self.grid.clone(), self.accumulate(k, &sums))?;
        let parts = sums
            .chunks(samples / groups)
            .map(|chunk| DensityField::new(self.grid.clone(), self.accumulate(k, chunk)))
            .collect::<Result<Vec<_>>>()?;
        Ok((full, parts))
    }

    /// Quadrature mass of each single-batch `q̃_IW` behind
    /// [`qew_field`](Self::qew_field) for the same `rng` state; their mean is
    /// the mass of that field.
    pub fn qew_batch_masses(
        &self,
        k: usize,
        samples: usize,
        rng: &mut RngStream,
    ) -> Result<Vec<f64>> {
        let vol = self.grid.cell_volume();
        Ok(match self.draw_rest_sums(k, samples, rng)? {
            None => vec![self.proposal_field().values().iter().sum::<f64>() * vol; samples],
            Some(sums) => sums
                .iter()
                .map(|&r| self.qiw_values(k, r).iter().sum::<f64>() * vol)
                .collect(),
        })
    }

    fn draw_rest_sums(
        &self,
        k: usize,
        samples: usize,
        rng: &mut RngStream,
    ) -> Result<Option<Vec<f64>>> {
        if k == 0 || samples == 0 {
            return Err(Error::InvalidArgument("need k ≥ 1 and S ≥ 1".into()));
        }
        if k == 1 {
            return Ok(None);
        }
        draw_log_rest_sums(self.target, self.proposal, k, samples, rng).map(Some)
    }

    /// Per-cell average over batches; each cell sums its batches in order.
    fn accumulate(&self, k: usize, log_rest_sums: &[f64]) -> Vec<f64> {
        let log_divisor = self.log_divisor(k);
        let n = log_rest_sums.len() as f64;
        self.log_p
            .par_iter()
            .zip(self.log_w.par_iter())
            .map(|(&lp, &lw)| {
                if lp == f64::NEG_INFINITY {
                    return 0.0;
                }
                let mut acc = 0.0;
                for &r in log_rest_sums {
                    acc += qiw_log_value(lp, lw, r, log_divisor).exp();
                }
                acc / n
            })
            .collect()
    }
}

/// `q_EW` on `grid` by the plotting procedure described on
/// [`GridEvaluator::qew_field`].
pub fn plot_qew_grid(
    t: &TargetModel,
    q: &GaussianProposal,
    k: usize,
    samples: usize,
    grid: &Grid,
    rng: &mut RngStream,
) -> Result<DensityField> {
    GridEvaluator::new(t, q, grid)?.qew_field(k, samples, rng)
}

/// `q̃_IW` on `grid` for one conditioning batch `z_2..z_k`.
pub fn qiw_field(
    t: &TargetModel,
    q: &GaussianProposal,
    z_rest: &[LatentPoint],
    grid: &Grid,
) -> Result<DensityField> {
    let ctx = QiwContext::from_points(t, q, z_rest)?;
    GridEvaluator::new(t, q, grid)?.qiw_field(&ctx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{max_abs_error, quadrature};

    #[test]
    fn batch_masses_average_to_field_mass() {
        let t = TargetModel::builtin("ring").unwrap();
        let q = GaussianProposal::standard(2);
        let g = Grid::cube(2, -6.0, 6.0, 41).unwrap();
        let ev = GridEvaluator::new(&t, &q, &g).unwrap();
        let field = ev.qew_field(4, 60, &mut RngStream::from_seed(2)).unwrap();
        let masses = ev
            .qew_batch_masses(4, 60, &mut RngStream::from_seed(2))
            .unwrap();
        let mean = masses.iter().sum::<f64>() / 60.0;
        assert!((mean - quadrature(&field)).abs() < 1e-12);
        assert!(masses.iter().any(|m| (m - 1.0).abs() > 0.05));
    }

    fn gauss1d() -> TargetModel {
        TargetModel::builtin("gauss1d").unwrap()
    }

    #[test]
    fn k1_qiw_is_the_proposal() {
        let t = TargetModel::builtin("mix2").unwrap();
        let q = GaussianProposal::new(vec![0.3, -0.2], vec![0.1, -0.3]).unwrap();
        let ctx = QiwContext::new(&t, &q, 1, vec![]).unwrap();
        for z in [[0.0, 0.0], [1.5, 1.5], [-2.0, 3.0]] {
            let a = ctx.density(&z).unwrap();
            let b = q.log_density(&z).unwrap().exp();
            assert!((a - b).abs() <= 1e-14 * b.max(1e-300));
        }
    }

    #[test]
    fn constant_weight_qiw_is_standard_normal() {
        let t = gauss1d();
        let q = GaussianProposal::standard(1);
        let ctx = QiwContext::from_points(&t, &q, &[LatentPoint::new(vec![1.7])]).unwrap();
        for z in [-2.0f64, 0.0, 0.4, 3.0] {
            let expected = (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
            assert!((ctx.density(&[z]).unwrap() - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn qiw_spot_value() {
        // w(z) = γ(z)/q(z) with γ(z) = exp(−z²/2), q = N(0.5, 1):
        let w = |z: f64| {
            let q = (-(z - 0.5) * (z - 0.5) / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt();
            (-z * z / 2.0).exp() / q
        };
        let expected = 1.0 / (0.5 * (w(0.0) + w(1.0)));
        assert!((expected - 0.43830).abs() < 2e-5);

        let t = gauss1d();
        let q = GaussianProposal::unit(vec![0.5]);
        let ctx = QiwContext::from_points(&t, &q, &[LatentPoint::new(vec![1.0])]).unwrap();
        let got = ctx.density(&[0.0]).unwrap();
        assert!((got - expected).abs() < 1e-13, "{got} vs {expected}");
    }

    #[test]
    fn qiw_is_zero_outside_target_support() {
        let t = TargetModel::uniform("box", vec![-1.0], vec![1.0]).unwrap();
        let q = GaussianProposal::standard(1);
        let ctx = QiwContext::from_points(&t, &q, &[LatentPoint::new(vec![0.2])]).unwrap();
        assert_eq!(ctx.density(&[2.0]).unwrap(), 0.0);
        assert!(ctx.density(&[0.0]).unwrap() > 0.0);
        // a conditioning batch entirely outside the support is legal
        let ctx = QiwContext::from_points(&t, &q, &[LatentPoint::new(vec![5.0])]).unwrap();
        let d = ctx.density(&[0.0]).unwrap();
        assert!((d - 2.0 * q.log_density(&[0.0]).unwrap().exp()).abs() < 1e-15);
    }

    #[test]
    fn context_validates_batch_length() {
        let t = gauss1d();
        let q = GaussianProposal::standard(1);
        assert!(QiwContext::new(&t, &q, 3, vec![0.0]).is_err());
        assert!(QiwContext::new(&t, &q, 0, vec![]).is_err());
        assert!(QiwContext::new(&t, &q, 2, vec![f64::NAN]).is_err());
    }

    #[test]
    fn qew_mc_k1_and_constant_weight_are_exact() {
        let t = gauss1d();
        let q = GaussianProposal::unit(vec![0.5]);
        let mut rng = RngStream::from_seed(1);
        let v = qew_density_mc(&t, &q, &[0.3], 1, 7, &mut rng).unwrap();
        assert_eq!(v, q.log_density(&[0.3]).unwrap().exp());

        let q = GaussianProposal::standard(1);
        let v = qew_density_mc(&t, &q, &[0.3], 5, 20, &mut rng).unwrap();
        let expected = q.log_density(&[0.3]).unwrap().exp();
        assert!((v - expected).abs() < 1e-15);
    }

    #[test]
    fn categorical_examples() {
        assert_eq!(categorical_index(&[1.0], 0.999).unwrap(), 0);
        assert_eq!(categorical_index(&[0.25, 0.75], 0.2).unwrap(), 0);
        assert_eq!(categorical_index(&[0.25, 0.75], 0.25).unwrap(), 0);
        assert_eq!(categorical_index(&[0.25, 0.75], 0.26).unwrap(), 1);
        assert_eq!(categorical_index(&[0.0, 1.0], 0.0).unwrap(), 1);
        assert_eq!(categorical_index(&[1.0, 0.0], 0.9999).unwrap(), 0);
        assert_eq!(
            categorical_index(&[0.5, 0.5 - 1e-16, 0.0], 1.0 - 1e-17).unwrap(),
            1
        );
        assert!(categorical_index(&[0.0, 0.0], 0.5).is_err());
    }

    #[test]
    fn sir_k1_returns_the_proposal_draw() {
        let t = TargetModel::builtin("ring").unwrap();
        let q = GaussianProposal::standard(2);
        let a = sir_sample(&t, &q, 1, &mut RngStream::from_seed(9)).unwrap();
        let b = q.sample(&mut RngStream::from_seed(9));
        assert_eq!(a, b);
    }

    #[test]
    fn sir_never_returns_zero_weight_points() {
        let t = TargetModel::uniform("half", vec![0.0], vec![50.0]).unwrap();
        let q = GaussianProposal::standard(1);
        let mut rng = RngStream::from_seed(2);
        let mut n = 0;
        for _ in 0..2000 {
            match sir_sample(&t, &q, 2, &mut rng) {
                Ok(z) => {
                    assert!(z[0] >= 0.0);
                    n += 1;
                }
                Err(e) => assert!(matches!(e, Error::Numeric(_))),
            }
        }
        assert!(n > 1000);
    }

    #[test]
    fn sir_with_all_zero_weights_is_an_error() {
        let t = TargetModel::uniform("far", vec![100.0], vec![101.0]).unwrap();
        let q = GaussianProposal::standard(1);
        assert!(matches!(
            sir_sample(&t, &q, 3, &mut RngStream::from_seed(0)),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn sir_samples_are_reproducible() {
        let t = TargetModel::builtin("mix2").unwrap();
        let q = GaussianProposal::standard(2);
        let a = sir_samples(&t, &q, 5, 50, &mut RngStream::from_seed(4)).unwrap();
        let b = sir_samples(&t, &q, 5, 50, &mut RngStream::from_seed(4)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn plot_k1_is_the_proposal_field() {
        let t = TargetModel::builtin("mix2").unwrap();
        let q = GaussianProposal::new(vec![0.5, 0.0], vec![0.2, -0.1]).unwrap();
        let g = Grid::cube(2, -6.0, 6.0, 41).unwrap();
        let f = plot_qew_grid(&t, &q, 1, 3, &g, &mut RngStream::from_seed(0)).unwrap();
        let ev = GridEvaluator::new(&t, &q, &g).unwrap();
        assert_eq!(max_abs_error(&f, &ev.proposal_field()).unwrap(), 0.0);
        for i in [0, 100, 800] {
            let expected = q.log_density(&g.coords(i)).unwrap().exp();
            assert!((f.values()[i] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn single_batch_plot_matches_qiw_field() {
        let t = TargetModel::builtin("mix2").unwrap();
        let q = GaussianProposal::standard(2);
        let g = Grid::cube(2, -6.0, 6.0, 41).unwrap();
        let ev = GridEvaluator::new(&t, &q, &g).unwrap();
        let field = ev.qew_field(4, 1, &mut RngStream::from_seed(8)).unwrap();
        // replay the same batch through the pointwise path
        let streams = RngStream::from_seed(8).split();
        let ctx = QiwContext::draw(&t, &q, 4, &mut streams.stream(0)).unwrap();
        for i in [0, 300, 840, 1200] {
            let z = g.coords(i);
            let v = ctx.density(&z).unwrap();
            assert!((field.values()[i] - v).abs() <= 1e-13 * v.max(1e-300));
        }
    }

    #[test]
    fn qew_field_has_unit_mass_for_constant_weights() {
        let t = gauss1d();
        let q = GaussianProposal::standard(1);
        let g = Grid::default_for_dim(1).unwrap();
        let f = plot_qew_grid(&t, &q, 3, 10, &g, &mut RngStream::from_seed(0)).unwrap();
        assert!((quadrature(&f) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn grouped_field_agrees_with_plain_field() {
        let t = TargetModel::builtin("ring").unwrap();
        let q = GaussianProposal::standard(2);
        let g = Grid::cube(2, -6.0, 6.0, 31).unwrap();
        let ev = GridEvaluator::new(&t, &q, &g).unwrap();
        let plain = ev.qew_field(5, 20, &mut RngStream::from_seed(3)).unwrap();
        let (full, parts) = ev
            .qew_field_grouped(5, 20, 4, &mut RngStream::from_seed(3))
            .unwrap();
        assert_eq!(plain, full);
        assert_eq!(parts.len(), 4);
        for i in 0..g.len() {
            let mean: f64 = parts.iter().map(|p| p.values()[i]).sum::<f64>() / 4.0;
            assert!((mean - full.values()[i]).abs() <= 1e-12 * full.values()[i].max(1e-300));
        }
        assert!(ev
            .qew_field_grouped(5, 21, 4, &mut RngStream::from_seed(3))
            .is_err());
    }

    #[test]
    fn off_by_one_divisor_breaks_normalization() {
        let t = gauss1d();
        let q = GaussianProposal::standard(1);
        let g = Grid::default_for_dim(1).unwrap();
        let ev = GridEvaluator::new(&t, &q, &g)
            .unwrap()
            .with_divisor_offset(-1);
        let f = ev.qew_field(2, 10, &mut RngStream::from_seed(0)).unwrap();
        assert!((quadrature(&f) - 0.5).abs() < 1e-6);
    }
}
