//! Target densities (the unnormalized joint `p(x, z)` with `x` held fixed)
//! and the diagonal Gaussian proposal family `q(z|x)`.
//!
//! Everything is in natural-log units. A zero density is `f64::NEG_INFINITY`;
//! a NaN anywhere is a bug and is reported as [`Error::Numeric`].

use std::fmt;
use std::ops::Deref;
use std::sync::Arc;

use crate::error::{check_dim, Error, Result};
use crate::kv::KvConfig;
use crate::rng::RngStream;

/// `ln(2π)`.
pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Names accepted by [`TargetModel::builtin`].
pub const BUILTIN_TARGETS: [&str; 4] = ["gauss1d", "gauss2d", "mix2", "ring"];

/// A point in latent space.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentPoint(Vec<f64>);

impl LatentPoint {
    pub fn new(coords: Vec<f64>) -> Self {
        Self(coords)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for LatentPoint {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl AsRef<[f64]> for LatentPoint {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

impl From<Vec<f64>> for LatentPoint {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

/// Diagonal Gaussian `q(z|x)` parameterized by mean and per-dimension log std.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianProposal {
    mean: Vec<f64>,
    log_std: Vec<f64>,
}

impl GaussianProposal {
    pub fn new(mean: Vec<f64>, log_std: Vec<f64>) -> Result<Self> {
        check_dim(mean.len(), log_std.len())?;
        if mean.is_empty() {
            return Err(Error::InvalidArgument(
                "proposal dimension must be positive".into(),
            ));
        }
        if mean.iter().chain(&log_std).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "proposal mean and log_std must be finite".into(),
            ));
        }
        Ok(Self { mean, log_std })
    }

    /// `N(0, I)` in `dim` dimensions.
    pub fn standard(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            log_std: vec![0.0; dim],
        }
    }

    /// Isotropic Gaussian with the given mean and unit variance.
    pub fn unit(mean: Vec<f64>) -> Self {
        let dim = mean.len();
        Self {
            mean,
            log_std: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn log_std(&self) -> &[f64] {
        &self.log_std
    }

    pub fn std(&self) -> Vec<f64> {
        self.log_std.iter().map(|s| s.exp()).collect()
    }

    pub fn log_density(&self, z: &[f64]) -> Result<f64> {
        check_dim(self.dim(), z.len())?;
        Ok(self.log_density_unchecked(z))
    }

    pub(crate) fn log_density_unchecked(&self, z: &[f64]) -> f64 {
        let mut acc = 0.0;
        for ((&zd, &m), &s) in z.iter().zip(&self.mean).zip(&self.log_std) {
            let u = (zd - m) * (-s).exp();
            acc += -0.5 * LN_2PI - s - 0.5 * u * u;
        }
        acc
    }

    /// Draws `z = mean + exp(log_std) ⊙ ε` with `ε ~ N(0, I)` from `rng`.
    pub fn sample(&self, rng: &mut RngStream) -> LatentPoint {
        let mut z = vec![0.0; self.dim()];
        self.sample_into(rng, &mut z);
        LatentPoint(z)
    }

    pub(crate) fn sample_into(&self, rng: &mut RngStream, out: &mut [f64]) {
        rng.fill_standard_normal(out);
        for ((v, &m), &s) in out.iter_mut().zip(&self.mean).zip(&self.log_std) {
            *v = m + s.exp() * *v;
        }
    }

    /// The reparameterized point `mean + exp(log_std) ⊙ eps`.
    pub fn reparam(&self, eps: &[f64]) -> Result<LatentPoint> {
        check_dim(self.dim(), eps.len())?;
        Ok(LatentPoint(
            eps.iter()
                .zip(&self.mean)
                .zip(&self.log_std)
                .map(|((&e, &m), &s)| m + s.exp() * e)
                .collect(),
        ))
    }

    pub fn to_kv(&self, cfg: &mut KvConfig) {
        cfg.set_vec("proposal.mean", &self.mean);
        cfg.set_vec("proposal.log_std", &self.log_std);
    }

    /// Reads `proposal.mean` / `proposal.log_std`. A missing `log_std` means
    /// unit variance.
    pub fn from_kv(cfg: &KvConfig) -> Result<Self> {
        let mean = cfg.require_vec("proposal.mean")?;
        let log_std = cfg
            .vec("proposal.log_std")?
            .unwrap_or_else(|| vec![0.0; mean.len()]);
        Self::new(mean, log_std)
    }
}

/// One isotropic component of a [`Family::Mixture`].
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub std: f64,
}

pub type LogDensityFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
pub type LogGradFn = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;

#[derive(Clone)]
pub enum Family {
    /// `exp(log_scale − ½ (z−m)ᵀ Σ⁻¹ (z−m))`; `chol` is the lower Cholesky factor of Σ.
    Gaussian {
        mean: Vec<f64>,
        cov: Vec<f64>,
        log_scale: f64,
        chol: Vec<f64>,
    },
    /// `Σ_c w_c N(z; m_c, σ_c² I)`.
    Mixture { components: Vec<MixtureComponent> },
    /// `exp(−(‖z‖ − radius)² / (2 width²))`.
    Ring { radius: f64, width: f64 },
    /// Indicator of the box `[lo, hi]`; `−∞` outside.
    Uniform { lo: Vec<f64>, hi: Vec<f64> },
    Custom {
        log_density: LogDensityFn,
        log_grad: Option<LogGradFn>,
    },
}

impl fmt::Debug for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Family::Gaussian {
                mean,
                cov,
                log_scale,
                ..
            } => f
                .debug_struct("Gaussian")
                .field("mean", mean)
                .field("cov", cov)
                .field("log_scale", log_scale)
                .finish(),
            Family::Mixture { components } => f
                .debug_struct("Mixture")
                .field("components", components)
                .finish(),
            Family::Ring { radius, width } => f
                .debug_struct("Ring")
                .field("radius", radius)
                .field("width", width)
                .finish(),
            Family::Uniform { lo, hi } => f
                .debug_struct("Uniform")
                .field("lo", lo)
                .field("hi", hi)
                .finish(),
            Family::Custom { log_grad, .. } => f
                .debug_struct("Custom")
                .field("has_grad", &log_grad.is_some())
                .finish_non_exhaustive(),
        }
    }
}

/// An unnormalized log-density over latent space.
#[derive(Debug, Clone)]
pub struct TargetModel {
    name: String,
    dim: usize,
    family: Family,
    known_log_z: Option<f64>,
}

impl TargetModel {
    pub fn builtin(name: &str) -> Result<Self> {
        match name {
            "gauss1d" => Self::gaussian("gauss1d", vec![0.0], vec![1.0], 0.0),
            "gauss2d" => Self::gaussian("gauss2d", vec![1.0, -0.5], vec![1.0, 0.6, 0.6, 0.8], 0.0),
            "mix2" => Self::mixture(
                "mix2",
                vec![
                    MixtureComponent {
                        weight: 0.5,
                        mean: vec![-1.5, -1.5],
                        std: 0.7,
                    },
                    MixtureComponent {
                        weight: 0.5,
                        mean: vec![1.5, 1.5],
                        std: 0.7,
                    },
                ],
            ),
            "ring" => Self::ring("ring", 2, 2.0, 0.3),
            other => Err(Error::InvalidArgument(format!(
                "unknown target `{other}` (expected one of {})",
                BUILTIN_TARGETS.join(", ")
            ))),
        }
    }

    /// Unnormalized Gaussian with full covariance `cov` (row-major, dim×dim).
    pub fn gaussian(name: &str, mean: Vec<f64>, cov: Vec<f64>, log_scale: f64) -> Result<Self> {
        let dim = mean.len();
        if dim == 0 {
            return Err(Error::InvalidArgument(
                "target dimension must be positive".into(),
            ));
        }
        check_dim(dim * dim, cov.len())?;
        let chol = cholesky(&cov, dim)?;
        let half_log_det: f64 = (0..dim).map(|i| chol[i * dim + i].ln()).sum();
        let known = log_scale + 0.5 * dim as f64 * LN_2PI + half_log_det;
        Ok(Self {
            name: name.to_string(),
            dim,
            family: Family::Gaussian {
                mean,
                cov,
                log_scale,
                chol,
            },
            known_log_z: Some(known),
        })
    }

    pub fn mixture(name: &str, components: Vec<MixtureComponent>) -> Result<Self> {
        let first = components
            .first()
            .ok_or_else(|| Error::InvalidArgument("mixture needs at least one component".into()))?;
        let dim = first.mean.len();
        if dim == 0 {
            return Err(Error::InvalidArgument(
                "target dimension must be positive".into(),
            ));
        }
        for c in &components {
            check_dim(dim, c.mean.len())?;
            if !(c.weight > 0.0 && c.std > 0.0) {
                return Err(Error::InvalidArgument(
                    "mixture weights and stds must be positive".into(),
                ));
            }
        }
        let total: f64 = components.iter().map(|c| c.weight).sum();
        Ok(Self {
            name: name.to_string(),
            dim,
            family: Family::Mixture { components },
            known_log_z: Some(total.ln()),
        })
    }

    pub fn ring(name: &str, dim: usize, radius: f64, width: f64) -> Result<Self> {
        if dim == 0 || !(width > 0.0) || !radius.is_finite() {
            return Err(Error::InvalidArgument("invalid ring parameters".into()));
        }
        Ok(Self {
            name: name.to_string(),
            dim,
            family: Family::Ring { radius, width },
            known_log_z: None,
        })
    }

    /// Constant density on the box `[lo, hi]`, zero elsewhere.
    pub fn uniform(name: &str, lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        check_dim(lo.len(), hi.len())?;
        if lo.is_empty() || lo.iter().zip(&hi).any(|(l, h)| !(l < h)) {
            return Err(Error::InvalidArgument("uniform box needs lo < hi".into()));
        }
        let known = lo.iter().zip(&hi).map(|(l, h)| (h - l).ln()).sum();
        Ok(Self {
            name: name.to_string(),
            dim: lo.len(),
            family: Family::Uniform { lo, hi },
            known_log_z: Some(known),
        })
    }

    /// Wraps arbitrary closures. Such targets cannot be serialized.
    pub fn custom(
        name: &str,
        dim: usize,
        log_density: LogDensityFn,
        log_grad: Option<LogGradFn>,
        known_log_z: Option<f64>,
    ) -> Self {
        Self {
            name: name.to_string(),
            dim,
            family: Family::Custom {
                log_density,
                log_grad,
            },
            known_log_z,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn family(&self) -> &Family {
        &self.family
    }

    pub fn known_log_z(&self) -> Option<f64> {
        self.known_log_z
    }

    pub fn has_grad(&self) -> bool {
        !matches!(self.family, Family::Custom { log_grad: None, .. })
    }

    /// `log p(x, z)`; `−∞` is a legal result, NaN is not.
    pub fn log_density(&self, z: &[f64]) -> Result<f64> {
        check_dim(self.dim, z.len())?;
        let v = self.log_density_unchecked(z);
        if v.is_nan() {
            return Err(Error::Numeric(format!(
                "target `{}` returned NaN at {z:?}",
                self.name
            )));
        }
        Ok(v)
    }

    pub(crate) fn log_density_unchecked(&self, z: &[f64]) -> f64 {
        match &self.family {
            Family::Gaussian {
                mean,
                log_scale,
                chol,
                ..
            } => {
                let u = forward_solve(chol, self.dim, z, mean);
                log_scale - 0.5 * u.iter().map(|v| v * v).sum::<f64>()
            }
            Family::Mixture { components } => {
                let d = self.dim as f64;
                let mut terms = [0.0f64; 8];
                let mut heap;
                let terms: &mut [f64] = if components.len() <= terms.len() {
                    &mut terms[..components.len()]
                } else {
                    heap = vec![0.0; components.len()];
                    &mut heap
                };
                for (t, c) in terms.iter_mut().zip(components) {
                    let sq: f64 = z.iter().zip(&c.mean).map(|(a, b)| (a - b) * (a - b)).sum();
                    *t = c.weight.ln()
                        - d * c.std.ln()
                        - 0.5 * d * LN_2PI
                        - sq / (2.0 * c.std * c.std);
                }
                log_sum_exp_slice(terms)
            }
            Family::Ring { radius, width } => {
                let r = norm(z);
                -(r - radius) * (r - radius) / (2.0 * width * width)
            }
            Family::Uniform { lo, hi } => {
                let inside = z
                    .iter()
                    .zip(lo.iter().zip(hi))
                    .all(|(v, (l, h))| *l <= *v && *v <= *h);
                if inside {
                    0.0
                } else {
                    f64::NEG_INFINITY
                }
            }
            Family::Custom { log_density, .. } => log_density(z),
        }
    }

    /// Gradient of `log p(x, z)` with respect to `z`.
    pub fn log_grad(&self, z: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim, z.len())?;
        let mut g = vec![0.0; self.dim];
        self.log_grad_into(z, &mut g)?;
        Ok(g)
    }

    pub(crate) fn log_grad_into(&self, z: &[f64], out: &mut [f64]) -> Result<()> {
        match &self.family {
            Family::Gaussian { mean, chol, .. } => {
                let u = forward_solve(chol, self.dim, z, mean);
                let v = backward_solve_transposed(chol, self.dim, &u);
                for (o, vi) in out.iter_mut().zip(v) {
                    *o = -vi;
                }
            }
            Family::Mixture { components } => {
                let d = self.dim as f64;
                let logs: Vec<f64> = components
                    .iter()
                    .map(|c| {
                        let sq: f64 = z.iter().zip(&c.mean).map(|(a, b)| (a - b) * (a - b)).sum();
                        c.weight.ln() - d * c.std.ln() - sq / (2.0 * c.std * c.std)
                    })
                    .collect();
                let lse = log_sum_exp_slice(&logs);
                out.fill(0.0);
                for (c, l) in components.iter().zip(&logs) {
                    let r = (l - lse).exp();
                    let inv_var = 1.0 / (c.std * c.std);
                    for ((o, zd), md) in out.iter_mut().zip(z).zip(&c.mean) {
                        *o -= r * (zd - md) * inv_var;
                    }
                }
            }
            Family::Ring { radius, width } => {
                let r = norm(z);
                if r == 0.0 {
                    out.fill(0.0);
                } else {
                    let s = -(r - radius) / (width * width * r);
                    for (o, zd) in out.iter_mut().zip(z) {
                        *o = s * zd;
                    }
                }
            }
            Family::Uniform { .. } => out.fill(0.0),
            Family::Custom { log_grad, .. } => {
                let f = log_grad.as_ref().ok_or_else(|| {
                    Error::Capability(format!("target `{}` has no gradient", self.name))
                })?;
                let g = f(z);
                check_dim(self.dim, g.len())?;
                out.copy_from_slice(&g);
            }
        }
        Ok(())
    }

    pub fn to_kv(&self, cfg: &mut KvConfig) -> Result<()> {
        cfg.set("target.name", self.name.clone());
        cfg.set("target.dim", self.dim.to_string());
        match &self.family {
            Family::Gaussian {
                mean,
                cov,
                log_scale,
                ..
            } => {
                cfg.set("target.kind", "gaussian");
                cfg.set_vec("target.mean", mean);
                cfg.set_vec("target.cov", cov);
                cfg.set("target.log_scale", log_scale.to_string());
            }
            Family::Mixture { components } => {
                cfg.set("target.kind", "mixture");
                cfg.set("target.components", components.len().to_string());
                for (i, c) in components.iter().enumerate() {
                    cfg.set(format!("target.component.{i}.weight"), c.weight.to_string());
                    cfg.set_vec(format!("target.component.{i}.mean"), &c.mean);
                    cfg.set(format!("target.component.{i}.std"), c.std.to_string());
                }
            }
            Family::Ring { radius, width } => {
                cfg.set("target.kind", "ring");
                cfg.set("target.radius", radius.to_string());
                cfg.set("target.width", width.to_string());
            }
            Family::Uniform { lo, hi } => {
                cfg.set("target.kind", "uniform");
                cfg.set_vec("target.lo", lo);
                cfg.set_vec("target.hi", hi);
            }
            Family::Custom { .. } => {
                return Err(Error::Config(format!(
                    "target `{}` is a custom closure and cannot be serialized",
                    self.name
                )))
            }
        }
        Ok(())
    }

    /// Reads a target from `target.*` keys, or a builtin from the shorthand
    /// `target=<name>`.
    pub fn from_kv(cfg: &KvConfig) -> Result<Self> {
        let Some(kind) = cfg.get("target.kind") else {
            return Self::builtin(cfg.require("target")?);
        };
        let name = cfg.get("target.name").unwrap_or(kind).to_string();
        let target = match kind {
            "gaussian" => Self::gaussian(
                &name,
                cfg.require_vec("target.mean")?,
                cfg.require_vec("target.cov")?,
                cfg.parse_value("target.log_scale")?.unwrap_or(0.0),
            )?,
            "mixture" => {
                let n: usize = cfg.parse_required("target.components")?;
                let components = (0..n)
                    .map(|i| {
                        Ok(MixtureComponent {
                            weight: cfg.parse_required(&format!("target.component.{i}.weight"))?,
                            mean: cfg.require_vec(&format!("target.component.{i}.mean"))?,
                            std: cfg.parse_required(&format!("target.component.{i}.std"))?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Self::mixture(&name, components)?
            }
            "ring" => Self::ring(
                &name,
                cfg.parse_value("target.dim")?.unwrap_or(2),
                cfg.parse_required("target.radius")?,
                cfg.parse_required("target.width")?,
            )?,
            "uniform" => Self::uniform(
                &name,
                cfg.require_vec("target.lo")?,
                cfg.require_vec("target.hi")?,
            )?,
            other => return Err(Error::Config(format!("unknown target kind `{other}`"))),
        };
        if let Some(dim) = cfg.parse_value::<usize>("target.dim")? {
            check_dim(dim, target.dim)?;
        }
        Ok(target)
    }
}

pub(crate) fn norm(z: &[f64]) -> f64 {
    z.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub(crate) fn log_sum_exp_slice(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn cholesky(a: &[f64], n: usize) -> Result<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            if (a[i * n + j] - a[j * n + i]).abs() > 1e-12 * a[i * n + j].abs().max(1.0) {
                return Err(Error::InvalidArgument(
                    "covariance must be symmetric".into(),
                ));
            }
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if !(s > 0.0) {
                    return Err(Error::InvalidArgument(
                        "covariance must be positive definite".into(),
                    ));
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Ok(l)
}

/// Solves `L u = z − m`.
fn forward_solve(l: &[f64], n: usize, z: &[f64], m: &[f64]) -> Vec<f64> {
    let mut u = vec![0.0; n];
    for i in 0..n {
        let mut s = z[i] - m[i];
        for k in 0..i {
            s -= l[i * n + k] * u[k];
        }
        u[i] = s / l[i * n + i];
    }
    u
}

/// Solves `Lᵀ v = u`.
fn backward_solve_transposed(l: &[f64], n: usize, u: &[f64]) -> Vec<f64> {
    let mut v = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = u[i];
        for k in i + 1..n {
            s -= l[k * n + i] * v[k];
        }
        v[i] = s / l[i * n + i];
    }
    v
}
