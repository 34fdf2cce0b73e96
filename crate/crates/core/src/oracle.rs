//! Deterministic quadrature on rectangular grids: normalizers, true
//! posteriors, KL divergences and field comparisons. Every Monte Carlo result
//! in the crate is checked against these.

use rayon::prelude::*;

use crate::error::{check_dim, Error, Result};
use crate::field::DensityField;
use crate::model::TargetModel;

/// Default per-dimension range of [`Grid::default_for_dim`].
pub const DEFAULT_RANGE: (f64, f64) = (-6.0, 6.0);

/// A rectangular lattice of cell midpoints.
///
/// Cell `i` along dimension `d` is centred at `lo[d] + (i + ½)·spacing[d]`
/// with `spacing[d] = (hi[d] − lo[d]) / points[d]`. Flat indices run with
/// dimension 0 fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    lo: Vec<f64>,
    hi: Vec<f64>,
    points: Vec<usize>,
    spacing: Vec<f64>,
    cell_volume: f64,
}

impl Grid {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>, points: Vec<usize>) -> Result<Self> {
        check_dim(lo.len(), hi.len())?;
        check_dim(lo.len(), points.len())?;
        if lo.is_empty() {
            return Err(Error::InvalidArgument(
                "grid dimension must be positive".into(),
            ));
        }
        for d in 0..lo.len() {
            if !(lo[d] < hi[d]) || !lo[d].is_finite() || !hi[d].is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "grid needs finite lo < hi (dimension {d})"
                )));
            }
            if points[d] == 0 {
                return Err(Error::InvalidArgument(
                    "grid needs at least one point".into(),
                ));
            }
        }
        let spacing: Vec<f64> = (0..lo.len())
            .map(|d| (hi[d] - lo[d]) / points[d] as f64)
            .collect();
        let cell_volume = spacing.iter().product();
        Ok(Self {
            lo,
            hi,
            points,
            spacing,
            cell_volume,
        })
    }

    /// The same range and resolution in every dimension.
    pub fn cube(dim: usize, lo: f64, hi: f64, points: usize) -> Result<Self> {
        Self::new(vec![lo; dim], vec![hi; dim], vec![points; dim])
    }

    /// `[−6, 6]^dim` with 801 points in 1D, 161 per dimension in 2D and 61
    /// per dimension above.
    pub fn default_for_dim(dim: usize) -> Result<Self> {
        let points = match dim {
            1 => 801,
            2 => 161,
            _ => 61,
        };
        Self::cube(dim, DEFAULT_RANGE.0, DEFAULT_RANGE.1, points)
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn lo(&self) -> &[f64] {
        &self.lo
    }

    pub fn hi(&self) -> &[f64] {
        &self.hi
    }

    pub fn points_per_dim(&self) -> &[usize] {
        &self.points
    }

    pub fn spacing(&self) -> &[f64] {
        &self.spacing
    }

    pub fn cell_volume(&self) -> f64 {
        self.cell_volume
    }

    /// Total number of cells.
    pub fn len(&self) -> usize {
        self.points.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn coord(&self, d: usize, i: usize) -> f64 {
        self.lo[d] + (i as f64 + 0.5) * self.spacing[d]
    }

    pub fn coords_into(&self, index: usize, out: &mut [f64]) {
        let mut rem = index;
        for d in 0..self.dim() {
            let i = rem % self.points[d];
            rem /= self.points[d];
            out[d] = self.coord(d, i);
        }
    }

    pub fn coords(&self, index: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.coords_into(index, &mut out);
        out
    }

    /// Flat index of the cell containing `z`, or `None` outside the grid.
    pub fn cell_index(&self, z: &[f64]) -> Option<usize> {
        let mut index = 0;
        let mut stride = 1;
        for d in 0..self.dim() {
            let t = (z[d] - self.lo[d]) / self.spacing[d];
            if !(t >= 0.0) || t >= self.points[d] as f64 {
                return None;
            }
            index += (t as usize).min(self.points[d] - 1) * stride;
            stride *= self.points[d];
        }
        Some(index)
    }

    /// Splits every cell into `factor^dim` sub-cells.
    pub fn refine(&self, factor: usize) -> Result<Self> {
        if factor == 0 {
            return Err(Error::InvalidArgument(
                "refine factor must be positive".into(),
            ));
        }
        Self::new(
            self.lo.clone(),
            self.hi.clone(),
            self.points.iter().map(|p| p * factor).collect(),
        )
    }

    /// Evaluates `f` at every cell midpoint, in parallel, results in index order.
    pub fn map_cells<F>(&self, f: F) -> Vec<f64>
    where
        F: Fn(&[f64]) -> f64 + Sync,
    {
        let dim = self.dim();
        (0..self.len())
            .into_par_iter()
            .map_init(
                || vec![0.0; dim],
                |z, i| {
                    self.coords_into(i, z);
                    f(z)
                },
            )
            .collect()
    }

    pub(crate) fn check_same(&self, other: &Grid) -> Result<()> {
        if self == other {
            Ok(())
        } else {
            Err(Error::InvalidArgument(
                "fields live on different grids".into(),
            ))
        }
    }
}

/// Midpoint rule: `Σ values · cell_volume`.
pub fn quadrature(field: &DensityField) -> f64 {
    field.values().iter().sum::<f64>() * field.grid().cell_volume()
}

/// `log ∫ exp(log p(x, z)) dz` by quadrature. When the target carries an
/// analytic normalizer the two must agree to relative 1e-3.
pub fn log_marginal(t: &TargetModel, grid: &Grid) -> Result<f64> {
    let lp = log_density_grid(t, grid)?;
    let est = log_marginal_from_values(&lp, grid.cell_volume());
    if let Some(known) = t.known_log_z() {
        if ((est - known).exp() - 1.0).abs() > 1e-3 {
            return Err(Error::Diagnostic(format!(
                "quadrature log marginal {est:.6} disagrees with analytic {known:.6} \
                 for `{}`; widen or refine the grid",
                t.name()
            )));
        }
    }
    Ok(est)
}

pub(crate) fn log_marginal_from_values(lp: &[f64], cell_volume: f64) -> f64 {
    crate::model::log_sum_exp_slice(lp) + cell_volume.ln()
}

pub(crate) fn log_density_grid(t: &TargetModel, grid: &Grid) -> Result<Vec<f64>> {
    check_dim(t.dim(), grid.dim())?;
    let lp = grid.map_cells(|z| t.log_density_unchecked(z));
    if lp.iter().any(|v| v.is_nan()) {
        return Err(Error::Numeric(format!(
            "target `{}` returned NaN on the grid",
            t.name()
        )));
    }
    Ok(lp)
}

/// `p(z|x) = exp(log p(x, z) − log p(x))` on every cell.
pub fn true_posterior_field(t: &TargetModel, grid: &Grid) -> Result<DensityField> {
    let lp = log_density_grid(t, grid)?;
    let log_z = log_marginal_from_values(&lp, grid.cell_volume());
    if !log_z.is_finite() {
        return Err(Error::Diagnostic(format!(
            "target `{}` has no mass on the grid",
            t.name()
        )));
    }
    let values = lp.iter().map(|l| (l - log_z).exp()).collect();
    DensityField::new(grid.clone(), values)
}

/// `KL(approx ‖ reference) = Σ approx · log(approx / reference) · cell_volume`.
///
/// Argument order follows `KL(q ‖ p)`: the first argument is the reference
/// `p`, the second the approximating `q`. Cells where `approx ≤ 1e-300`
/// contribute nothing; approximating mass where the reference vanishes makes
/// the result `+∞`.
pub fn kl_field(reference: &DensityField, approx: &DensityField) -> Result<f64> {
    reference.grid().check_same(approx.grid())?;
    let mass = quadrature(reference);
    if (mass - 1.0).abs() > 0.02 {
        return Err(Error::InvalidArgument(format!(
            "reference field is not normalized (mass {mass:.4})"
        )));
    }
    let mut acc = 0.0;
    for (&p, &q) in reference.values().iter().zip(approx.values()) {
        if q <= 1e-300 {
            continue;
        }
        if p <= 0.0 {
            return Ok(f64::INFINITY);
        }
        acc += q * (q.ln() - p.ln());
    }
    Ok(acc * reference.grid().cell_volume())
}

pub fn max_abs_error(a: &DensityField, b: &DensityField) -> Result<f64> {
    a.grid().check_same(b.grid())?;
    Ok(a.values()
        .iter()
        .zip(b.values())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max))
}

/// Fraction of `points` in each grid cell, plus a final entry for points
/// outside the grid.
pub fn histogram_masses<P: AsRef<[f64]>>(points: &[P], grid: &Grid) -> Vec<f64> {
    let mut counts = vec![0u64; grid.len() + 1];
    for p in points {
        match grid.cell_index(p.as_ref()) {
            Some(i) => counts[i] += 1,
            None => counts[grid.len()] += 1,
        }
    }
    let n = points.len().max(1) as f64;
    counts.into_iter().map(|c| c as f64 / n).collect()
}

/// Total-variation distance `½ Σ |a_i − b_i|` between two mass vectors.
pub fn tv_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    check_dim(a.len(), b.len())?;
    Ok(0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>())
}
