//! Nonnegative per-cell values over a [`Grid`], with CSV and ASCII PGM output.

use std::io::{self, Write};

use crate::error::{check_dim, Error, Result};
use crate::oracle::Grid;

#[derive(Debug, Clone, PartialEq)]
pub struct DensityField {
    grid: Grid,
    values: Vec<f64>,
}

impl DensityField {
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<Self> {
        check_dim(grid.len(), values.len())?;
        if let Some(v) = values.iter().find(|v| !(**v >= 0.0) || v.is_infinite()) {
            return Err(Error::Numeric(format!(
                "density field values must be finite and nonnegative, found {v}"
            )));
        }
        Ok(Self { grid, values })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn max_value(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            grid: self.grid.clone(),
            values: self.values.iter().map(|v| v * factor).collect(),
        }
    }

    /// Probability mass per cell (`value · cell_volume`), followed by the mass
    /// missing from the grid (`max(0, 1 − Σ)`), for comparison against
    /// [`histogram_masses`](crate::oracle::histogram_masses).
    pub fn cell_masses_with_outside(&self) -> Vec<f64> {
        let vol = self.grid.cell_volume();
        let mut m: Vec<f64> = self.values.iter().map(|v| v * vol).collect();
        let total: f64 = m.iter().sum();
        m.push((1.0 - total).max(0.0));
        m
    }

    /// Aggregates a field living on `coarse.refine(factor)` onto `coarse`,
    /// preserving mass.
    pub fn coarsen(&self, coarse: &Grid, factor: usize) -> Result<Self> {
        self.grid.check_same(&coarse.refine(factor)?)?;
        let dim = coarse.dim();
        let mut sums = vec![0.0; coarse.len()];
        let mut z = vec![0.0; dim];
        for (i, v) in self.values.iter().enumerate() {
            self.grid.coords_into(i, &mut z);
            let j = coarse
                .cell_index(&z)
                .expect("refined cell midpoints lie inside the coarse grid");
            sums[j] += v;
        }
        let ratio = self.grid.cell_volume() / coarse.cell_volume();
        Self::new(
            coarse.clone(),
            sums.into_iter().map(|s| s * ratio).collect(),
        )
    }

    /// One row per cell: coordinates then value, header `x[,y[,z]],value`.
    /// Rows follow the flat cell order (dimension 0 fastest).
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        const NAMES: [&str; 3] = ["x", "y", "z"];
        let dim = self.grid.dim();
        let header: Vec<String> = (0..dim)
            .map(|d| {
                NAMES
                    .get(d)
                    .map_or_else(|| format!("x{d}"), |s| s.to_string())
            })
            .collect();
        writeln!(w, "{},value", header.join(","))?;
        let mut z = vec![0.0; dim];
        for (i, v) in self.values.iter().enumerate() {
            self.grid.coords_into(i, &mut z);
            for c in &z {
                write!(w, "{c},")?;
            }
            writeln!(w, "{v}")?;
        }
        Ok(())
    }

    /// ASCII PGM (P2), maxval 255, values scaled linearly by the field
    /// maximum. Image rows run from the top of the y range downwards; a 1D
    /// field is a single row.
    pub fn write_pgm<W: Write>(&self, mut w: W) -> Result<()> {
        let (width, height) = match self.grid.points_per_dim() {
            [n] => (*n, 1),
            [nx, ny] => (*nx, *ny),
            _ => {
                return Err(Error::InvalidArgument(
                    "PGM output needs a 1D or 2D field".into(),
                ))
            }
        };
        let max = self.max_value();
        writeln!(w, "P2")?;
        writeln!(w, "{width} {height}")?;
        writeln!(w, "255")?;
        for row in (0..height).rev() {
            let line: Vec<String> = (0..width)
                .map(|col| {
                    let v = self.values[row * width + col];
                    let level = if max > 0.0 {
                        (255.0 * v / max).round() as u32
                    } else {
                        0
                    };
                    level.min(255).to_string()
                })
                .collect();
            writeln!(w, "{}", line.join(" "))?;
        }
        Ok(())
    }
}
