//! The invariant suite behind `iwpost verify`.
//!
//! Each check runs on its own substream of the seed (indexed by its position
//! in [`CHECKS`]), so adding or skipping a check never perturbs the others,
//! and the report contains no timings: the same seed gives the same bytes.

use std::io::Write;

use super::commands::{posterior_bin_masses, HIST_BINS, HIST_REFINE};
use super::{RunConfig, EXIT_FAILURE, EXIT_OK};
use crate::bounds::{
    combined_se, expected_vae_bound_of_qiw, iwae_elbo_mc, vae_elbo_mc, vae_elbo_qew_estimate,
    BoundEstimate,
};
use crate::error::Result;
use crate::field::DensityField;
use crate::implicit::{proposal_samples, sir_samples, GridEvaluator, QiwContext};
use crate::model::{GaussianProposal, TargetModel, BUILTIN_TARGETS, LN_2PI};
use crate::optim::{fit_proposal, iwae_gradient, FitConfig};
use crate::oracle::{
    histogram_masses, kl_field, log_density_grid, log_marginal, log_marginal_from_values,
    max_abs_error, quadrature, true_posterior_field, tv_distance, Grid,
};
use crate::rng::RngStream;
use crate::stats::mean_and_se;
use crate::weights::{log_mean_exp, normalize_weights};

/// Outcome of one check.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// Sample sizes for the full and `--quick` suites.
#[derive(Debug, Clone, Copy)]
struct Sizes {
    grid2: usize,
    n: usize,
    batches: usize,
    qew_samples: usize,
    a1_batches: usize,
    sir_draws: usize,
    fd_batches: usize,
    mix2_fit_steps: usize,
}

const FULL: Sizes = Sizes {
    grid2: 161,
    n: 100_000,
    batches: 10_000,
    qew_samples: 2000,
    a1_batches: 2000,
    sir_draws: 100_000,
    fd_batches: 10_000,
    mix2_fit_steps: 2000,
};

const QUICK: Sizes = Sizes {
    grid2: 81,
    n: 20_000,
    batches: 2000,
    qew_samples: 500,
    a1_batches: 500,
    sir_draws: 20_000,
    fd_batches: 2000,
    mix2_fit_steps: 500,
};

/// Outer iterations of the rendered fields in the normalization, mass and
/// convergence checks.
const FIELD_SAMPLES: usize = 500;

struct Suite {
    sizes: Sizes,
    divisor_offset: i64,
}

type Outcome = Result<(bool, String)>;
type CheckFn = fn(&Suite, &mut RngStream) -> Outcome;

const CHECKS: &[(&str, CheckFn)] = &[
    ("model.normalizers", model_normalizers),
    ("model.gradients", model_gradients),
    ("model.proposal_mode", model_proposal_mode),
    ("weights.log_mean_exp", weights_log_mean_exp),
    ("bounds.constant_weight", bounds_constant_weight),
    ("bounds.vae_spot_value", bounds_vae_spot_value),
    ("bounds.ordering_mix2", bounds_ordering_mix2),
    ("bounds.ordering_ring", bounds_ordering_ring),
    ("bounds.iwae_monotone", bounds_iwae_monotone),
    ("bounds.a1_equality", bounds_a1_equality),
    ("implicit.k1_identity", implicit_k1_identity),
    ("implicit.normalization", implicit_normalization),
    ("implicit.single_batch_mass", implicit_single_batch_mass),
    ("implicit.convergence", implicit_convergence),
    ("implicit.sir_matches_field", implicit_sir_matches_field),
    ("implicit.kl_ordering", implicit_kl_ordering),
    ("implicit.sir_beats_proposal", implicit_sir_beats_proposal),
    ("oracle.posterior_mass", oracle_posterior_mass),
    ("oracle.kl_nonnegative", oracle_kl_nonnegative),
    ("oracle.resolution", oracle_resolution),
    ("optim.finite_differences", optim_finite_differences),
    ("optim.fit_gauss1d", optim_fit_gauss1d),
    ("optim.fit_gauss1d_k10", optim_fit_gauss1d_k10),
    ("optim.fit_mix2_k50", optim_fit_mix2_k50),
    ("optim.smoothed_trace", optim_smoothed_trace),
    ("implicit.normalization_in_se", implicit_normalization_in_se),
];

/// Names of all checks, in report order.
pub fn check_names() -> Vec<&'static str> {
    CHECKS.iter().map(|(n, _)| *n).collect()
}

/// Runs every check. `divisor_offset` is forwarded to every grid evaluator
/// (a nonzero value is a deliberate bug the suite must catch).
pub fn run_checks(seed: u64, quick: bool, divisor_offset: i64) -> Vec<CheckOutcome> {
    let suite = Suite {
        sizes: if quick { QUICK } else { FULL },
        divisor_offset,
    };
    let streams = RngStream::from_seed(seed).split();
    CHECKS
        .iter()
        .enumerate()
        .map(|(i, (name, check))| {
            let (passed, detail) = match check(&suite, &mut streams.stream(i as u64)) {
                Ok(v) => v,
                Err(e) => (false, format!("error: {e}")),
            };
            CheckOutcome {
                name,
                passed,
                detail,
            }
        })
        .collect()
}

pub(crate) fn run(cfg: &RunConfig, out: &mut dyn Write) -> Result<u8> {
    let outcomes = run_checks(cfg.seed, cfg.quick, cfg.divisor_offset);
    writeln!(
        out,
        "iwpost verify: seed {}, {} suite",
        cfg.seed,
        if cfg.quick { "quick" } else { "full" }
    )?;
    for o in &outcomes {
        let mut lines = o.detail.lines();
        writeln!(
            out,
            "{}  {:<28} {}",
            if o.passed { "PASS" } else { "FAIL" },
            o.name,
            lines.next().unwrap_or("")
        )?;
        for l in lines {
            writeln!(out, "{:>36}{l}", "")?;
        }
    }
    let passed = outcomes.iter().filter(|o| o.passed).count();
    writeln!(out, "{passed} of {} checks passed", outcomes.len())?;
    Ok(if passed == outcomes.len() {
        EXIT_OK
    } else {
        EXIT_FAILURE
    })
}

impl Suite {
    fn grid2(&self) -> Result<Grid> {
        Grid::cube(2, -6.0, 6.0, self.sizes.grid2)
    }

    fn evaluator<'a>(
        &self,
        t: &'a TargetModel,
        q: &'a GaussianProposal,
        grid: &Grid,
    ) -> Result<GridEvaluator<'a>> {
        Ok(GridEvaluator::new(t, q, grid)?.with_divisor_offset(self.divisor_offset))
    }
}

fn builtin(name: &str) -> Result<TargetModel> {
    TargetModel::builtin(name)
}

fn uniform_in(rng: &mut RngStream, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.uniform()
}

fn random_proposal(rng: &mut RngStream, dim: usize) -> Result<GaussianProposal> {
    let mean = (0..dim).map(|_| uniform_in(rng, -2.0, 2.0)).collect();
    let log_std = (0..dim).map(|_| uniform_in(rng, -1.0, 0.5)).collect();
    GaussianProposal::new(mean, log_std)
}

fn normalized(f: &DensityField) -> DensityField {
    f.scaled(1.0 / quadrature(f))
}

/// `a ≤ b` up to `3·SE + slack`.
fn le(a: f64, b: f64, se: f64, slack: f64) -> bool {
    a <= b + 3.0 * se + slack
}

fn model_normalizers(_: &Suite, _: &mut RngStream) -> Outcome {
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for name in BUILTIN_TARGETS {
        let t = builtin(name)?;
        let Some(known) = t.known_log_z() else {
            continue;
        };
        let grid = Grid::default_for_dim(t.dim())?;
        let est = log_marginal_from_values(&log_density_grid(&t, &grid)?, grid.cell_volume());
        worst = worst.max(((est - known).exp() - 1.0).abs());
        count += 1;
    }
    Ok((
        worst < 1e-3,
        format!("max relative error of exp(log Z) {worst:.2e} over {count} targets (< 1e-3)"),
    ))
}

fn model_gradients(_: &Suite, rng: &mut RngStream) -> Outcome {
    const H: f64 = 1e-5;
    let mut worst: f64 = 0.0;
    for name in BUILTIN_TARGETS {
        let t = builtin(name)?;
        let d = t.dim();
        for _ in 0..100 {
            let z: Vec<f64> = (0..d).map(|_| 1.5 * rng.standard_normal()).collect();
            let g = t.log_grad(&z)?;
            for j in 0..d {
                let (mut a, mut b) = (z.clone(), z.clone());
                a[j] += H;
                b[j] -= H;
                let fd = (t.log_density(&a)? - t.log_density(&b)?) / (2.0 * H);
                worst = worst.max((g[j] - fd).abs() / g[j].abs().max(1.0));
            }
        }
    }
    Ok((
        worst < 1e-4,
        format!("max relative error vs central differences {worst:.2e} at 100 points per target (< 1e-4)"),
    ))
}

fn model_proposal_mode(_: &Suite, rng: &mut RngStream) -> Outcome {
    let mut ok = true;
    for dim in [1, 2, 3] {
        let q = random_proposal(rng, dim)?;
        let at_mean = q.log_density(q.mean())?;
        let lo: Vec<f64> = q
            .mean()
            .iter()
            .zip(q.std())
            .map(|(m, s)| m - 3.0 * s)
            .collect();
        let hi: Vec<f64> = q
            .mean()
            .iter()
            .zip(q.std())
            .map(|(m, s)| m + 3.0 * s)
            .collect();
        let grid = Grid::new(lo, hi, vec![20; dim])?;
        let best = grid
            .map_cells(|z| q.log_density_unchecked(z))
            .into_iter()
            .fold(f64::NEG_INFINITY, f64::max);
        ok &= best <= at_mean;
    }
    Ok((
        ok,
        "log q on a grid never exceeds log q(mean), dims 1-3".into(),
    ))
}

fn weights_log_mean_exp(_: &Suite, rng: &mut RngStream) -> Outcome {
    let (mut bracket, mut direct, mut shift) = (true, 0.0f64, 0.0f64);
    for _ in 0..1000 {
        let n = 1 + (rng.next_u64() % 40) as usize;
        let v: Vec<f64> = (0..n).map(|_| uniform_in(rng, -30.0, 30.0)).collect();
        let r = log_mean_exp(&v)?;
        let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        bracket &= r >= lo - 1e-12 && r <= hi + 1e-12;
        let mean = v.iter().map(|x| x.exp()).sum::<f64>() / n as f64;
        direct = direct.max((r.exp() - mean).abs() / mean);
        let c = uniform_in(rng, -500.0, 500.0);
        let a = normalize_weights(&v)?;
        let b = normalize_weights(&v.iter().map(|x| x + c).collect::<Vec<_>>())?;
        shift = shift.max(
            a.iter()
                .zip(&b)
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max),
        );
    }
    Ok((
        bracket && direct < 1e-12 && shift < 1e-9,
        format!(
            "1000 random vectors: min ≤ lme ≤ max {bracket}, relative error {direct:.1e} (< 1e-12), \
             shift drift {shift:.1e} (< 1e-9)"
        ),
    ))
}

fn bounds_constant_weight(s: &Suite, rng: &mut RngStream) -> Outcome {
    let t = builtin("gauss1d")?;
    let q = GaussianProposal::standard(1);
    let grid = Grid::default_for_dim(1)?;
    let streams = rng.split();
    let vae = vae_elbo_mc(&t, &q, s.sizes.n, &mut streams.stream(0))?;
    let iwae = iwae_elbo_mc(&t, &q, 5, s.sizes.batches, &mut streams.stream(1))?;
    let qew = vae_elbo_qew_estimate(&t, &q, 5, FIELD_SAMPLES, 10, &grid, &mut streams.stream(2))?;
    let exact = 0.5 * LN_2PI;
    let all = [vae, iwae, qew];
    let ok = all
        .iter()
        .all(|e| (e.value - exact).abs() < 1e-7 && e.std_error < 1e-12);
    Ok((
        ok,
        format!(
            "gauss1d, q = N(0,1): VAE {:.7}, IWAE(k=5) {:.7}, q_EW(k=5) {:.7}, largest SE {:.1e} \
             (all 0.9189385, SE 0)",
            vae.value,
            iwae.value,
            qew.value,
            all.iter().map(|e| e.std_error).fold(0.0, f64::max)
        ),
    ))
}

fn bounds_vae_spot_value(s: &Suite, rng: &mut RngStream) -> Outcome {
    let t = builtin("gauss1d")?;
    let q = GaussianProposal::unit(vec![0.5]);
    let e = vae_elbo_mc(&t, &q, s.sizes.n, rng)?;
    let exact = 0.5 * LN_2PI - 0.125;
    let dev = (e.value - exact).abs();
    Ok((
        dev < 3.0 * e.std_error,
        format!(
            "gauss1d, q = N(0.5,1): {:.7} ± {:.7}, |Δ| = {dev:.2e} vs 0.7939385 (< 3 SE)",
            e.value, e.std_error
        ),
    ))
}

/// `L_VAE[q] ≤ L_IWAE[q] ≤ L_VAE[q_EW] ≤ log p(x)` at each `k`, with
/// `q = N(0, I)`.
fn ordering_chain(s: &Suite, rng: &mut RngStream, target: &str, ks: &[usize]) -> Outcome {
    let t = builtin(target)?;
    let q = GaussianProposal::standard(2);
    let grid = s.grid2()?;
    let log_px = log_marginal(&t, &grid)?;
    let streams = rng.split();
    let vae = vae_elbo_mc(&t, &q, s.sizes.n, &mut streams.stream(0))?;
    let mut ok = true;
    let mut detail = format!(
        "{target}: log p(x) {log_px:.5}, L_VAE {:.5} ± {:.5}",
        vae.value, vae.std_error
    );
    for (i, &k) in ks.iter().enumerate() {
        let i = i as u64;
        let iwae = iwae_elbo_mc(&t, &q, k, s.sizes.batches, &mut streams.stream(1 + 2 * i))?;
        let ev = s.evaluator(&t, &q, &grid)?;
        let qew = qew_bound(&ev, k, s.sizes.qew_samples, &mut streams.stream(2 + 2 * i))?;
        let step = le(vae.value, iwae.value, combined_se(&vae, &iwae), 0.0)
            && le(iwae.value, qew.value, combined_se(&iwae, &qew), 1e-3)
            && le(qew.value, log_px, qew.std_error, 1e-3);
        ok &= step;
        detail += &format!(
            "\nk={k:<3} L_IWAE {:.5} ± {:.5}  L_VAE[q_EW] {:.5} ± {:.5}  {}",
            iwae.value,
            iwae.std_error,
            qew.value,
            qew.std_error,
            if step { "ordered" } else { "OUT OF ORDER" }
        );
    }
    Ok((ok, detail))
}

fn qew_bound(
    ev: &GridEvaluator<'_>,
    k: usize,
    samples: usize,
    rng: &mut RngStream,
) -> Result<BoundEstimate> {
    // same as bounds::vae_elbo_qew_estimate, but through the suite's evaluator
    crate::bounds::qew_estimate_with(ev, k, samples, 10, rng)
}

fn bounds_ordering_mix2(s: &Suite, rng: &mut RngStream) -> Outcome {
    ordering_chain(s, rng, "mix2", &[2, 5, 10, 50])
}

fn bounds_ordering_ring(s: &Suite, rng: &mut RngStream) -> Outcome {
    ordering_chain(s, rng, "ring", &[10])
}

fn bounds_iwae_monotone(s: &Suite, rng: &mut RngStream) -> Outcome {
    let t = builtin("mix2")?;
    let q = GaussianProposal::standard(2);
    let streams = rng.split();
    let ks = [1, 2, 5, 10, 50];
    let est = ks
        .iter()
        .enumerate()
        .map(|(i, &k)| iwae_elbo_mc(&t, &q, k, s.sizes.batches, &mut streams.stream(i as u64)))
        .collect::<Result<Vec<_>>>()?;
    let ok = est
        .windows(2)
        .all(|w| le(w[0].value, w[1].value, combined_se(&w[0], &w[1]), 0.0));
    let values: Vec<String> = ks
        .iter()
        .zip(&est)
        .map(|(k, e)| format!("k={k}: {:.4}", e.value))
        .collect();
    Ok((ok, format!("mix2 L_IWAE {}", values.join(", "))))
}

fn bounds_a1_equality(s: &Suite, rng: &mut RngStream) -> Outcome {
    let t = builtin("mix2")?;
    let q = GaussianProposal::standard(2);
    let grid = s.grid2()?;
    let streams = rng.split();
    let avg =
        expected_vae_bound_of_qiw(&t, &q, 5, s.sizes.a1_batches, &grid, &mut streams.stream(0))?;
    let iwae = iwae_elbo_mc(&t, &q, 5, s.sizes.batches, &mut streams.stream(1))?;
    let dev = (avg.value - iwae.value).abs();
    let se = combined_se(&avg, &iwae);
    Ok((
        dev < 3.0 * se,
        format!(
            "mix2 k=5: mean bound of q̃_IW over {} batches {:.5}, L_IWAE {:.5}, |Δ| {dev:.5} (< 3 SE = {:.5})",
            s.sizes.a1_batches,
            avg.value,
            iwae.value,
            3.0 * se
        ),
    ))
}

fn implicit_k1_identity(s: &Suite, rng: &mut RngStream) -> Outcome {
    let t = builtin("mix2")?;
    let q = random_proposal(rng, 2)?;
    let grid = s.grid2()?;
    let field = s
        .evaluator(&t, &q, &grid)?
        .qew_field(1, FIELD_SAMPLES, rng)?;
    let direct = grid.map_cells(|z| q.log_density_unchecked(z).exp());
    let err = field
        .values()
        .iter()
        .zip(&direct)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    Ok((
        err < 1e-12,
        format!("max |q_EW(k=1) − q| {err:.1e} (< 1e-12)"),
    ))
}

fn implicit_normalization(s: &Suite, rng: &mut RngStream) -> Outcome {
    let q = GaussianProposal::standard(2);
    let grid = s.grid2()?;
    let streams = rng.split();
    let mut ok = true;
    let mut parts = Vec::new();
    let mut index = 0;
    for target in ["mix2", "ring"] {
        let t = builtin(target)?;
        let ev = s.evaluator(&t, &q, &grid)?;
        for k in [2, 3, 10] {
            let field = ev.qew_field(k, FIELD_SAMPLES, &mut streams.stream(index))?;
            let batch = ev.qew_batch_masses(k, FIELD_SAMPLES, &mut streams.stream(index))?;
            index += 1;
            let mass = quadrature(&field);
            ok &= (0.98..=1.02).contains(&mass);
            parts.push(format!(
                "{target} k={k}: {mass:.4} ± {:.4}",
                mean_and_se(&batch).1
            ));
        }
    }
    Ok((
        ok,
        format!(
            "q_EW field mass ± Monte Carlo SE, S={FIELD_SAMPLES} (in [0.98, 1.02])\n{}",
            parts.join("\n")
        ),
    ))
}

/// The normalization check with a tolerance scaled to its own Monte Carlo
/// error: a wrong divisor shifts the mass by many standard errors.
fn implicit_normalization_in_se(s: &Suite, rng: &mut RngStream) -> Outcome {
    let q = GaussianProposal::standard(2);
    let grid = s.grid2()?;
    let streams = rng.split();
    let mut worst: f64 = 0.0;
    let mut index = 0;
    for target in ["mix2", "ring"] {
        let t = builtin(target)?;
        let ev = s.evaluator(&t, &q, &grid)?;
        for k in [2, 3, 10] {
            let (mass, se) =
                mean_and_se(&ev.qew_batch_masses(k, FIELD_SAMPLES, &mut streams.stream(index))?);
            index += 1;
            worst = worst.max((mass - 1.0).abs() / se);
        }
    }
    Ok((
        worst <= 3.0,
        format!("mix2 and ring, k = 2, 3, 10, S={FIELD_SAMPLES}: largest |mass − 1| / SE {worst:.2} (≤ 3)"),
    ))
}

fn implicit_single_batch_mass(s: &Suite, rng: &mut RngStream) -> Outcome {
    let q = GaussianProposal::standard(2);
    let grid = s.grid2()?;
    let streams = rng.split();
    let mut ok = true;
    let mut parts = Vec::new();
    for (ti, target) in ["mix2", "ring"].iter().enumerate() {
        let t = builtin(target)?;
        let ev = s.evaluator(&t, &q, &grid)?;
        let batches = streams.stream(ti as u64).split();
        let masses = (0..FIELD_SAMPLES)
            .map(|b| {
                let ctx = QiwContext::draw(&t, &q, 3, &mut batches.stream(b as u64))?;
                Ok(quadrature(&ev.qiw_field(&ctx)?))
            })
            .collect::<Result<Vec<f64>>>()?;
        let (mean, se) = mean_and_se(&masses);
        let lo = masses.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = masses.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        ok &= (mean - 1.0).abs() <= 0.02;
        parts.push(format!(
            "{target}: mean {mean:.4} ± {se:.4} (single batches {lo:.3}..{hi:.3})"
        ));
    }
    Ok((
        ok,
        format!(
            "k=3, average q̃_IW mass over {FIELD_SAMPLES} batches (within 0.02 of 1)\n{}",
            parts.join("\n")
        ),
    ))
}

fn implicit_convergence(s: &Suite, rng: &mut RngStream) -> Outcome {
    let t = builtin("mix2")?;
    let q = GaussianProposal::standard(2);
    let grid = s.grid2()?;
    let posterior = true_posterior_field(&t, &grid)?;
    let ev = s.evaluator(&t, &q, &grid)?;
    let streams = rng.split();
    let errs = [1, 10, 100]
        .iter()
        .enumerate()
        .map(|(i, &k)| {
            let field = ev.qew_field(k, FIELD_SAMPLES, &mut streams.stream(i as u64))?;
            max_abs_error(&field, &posterior)
        })
        .collect::<Result<Vec<_>>>()?;
    let ok = errs[0] > errs[1] && errs[1] > errs[2] && errs[2] < 0.25 * errs[0];
    Ok((
        ok,
        format!(
            "mix2 max |q_EW − p(z|x)|: k=1 {:.5}, k=10 {:.5}, k=100 {:.5} \
             (decreasing, k=100 < 25% of k=1: {:.1}%)",
            errs[0],
            errs[1],
            errs[2],
            100.0 * errs[2] / errs[0]
        ),
    ))
}

fn bins_2d() -> Result<Grid> {
    Grid::cube(2, -6.0, 6.0, HIST_BINS)
}

fn implicit_sir_matches_field(s: &Suite, rng: &mut RngStream) -> Outcome {
    let t = builtin("mix2")?;
    let q = GaussianProposal::standard(2);
    let bins = bins_2d()?;
    let streams = rng.split();
    let ev = s.evaluator(&t, &q, &bins.refine(HIST_REFINE)?)?;
    let field = ev.qew_field(10, s.sizes.qew_samples, &mut streams.stream(0))?;
    let field_masses = field
        .coarsen(&bins, HIST_REFINE)?
        .cell_masses_with_outside();
    let draws = sir_samples(&t, &q, 10, s.sizes.sir_draws, &mut streams.stream(1))?;
    let tv = tv_distance(&histogram_masses(&draws, &bins), &field_masses)?;
    Ok((
        tv < 0.05,
        format!(
            "mix2 k=10: TV({} SIR draws, rendered q_EW) {tv:.4} on {HIST_BINS}x{HIST_BINS} bins (< 0.05)",
            s.sizes.sir_draws
        ),
    ))
}

fn implicit_kl_ordering(s: &Suite, rng: &mut RngStream) -> Outcome {
    let t = builtin("mix2")?;
    let q = GaussianProposal::standard(2);
    let grid = s.grid2()?;
    let posterior = true_posterior_field(&t, &grid)?;
    let ev = s.evaluator(&t, &q, &grid)?;
    let streams = rng.split();
    let kl_q = kl_field(&posterior, &normalized(&ev.proposal_field()))?;
    let kl = |k: usize, i: u64| -> Result<f64> {
        let f = ev.qew_field(k, s.sizes.qew_samples, &mut streams.stream(i))?;
        kl_field(&posterior, &normalized(&f))
    };
    let (kl2, kl10) = (kl(2, 0)?, kl(10, 1)?);
    Ok((
        kl2 <= kl_q && kl_q - kl10 > 0.01,
        format!(
            "mix2 KL(·‖posterior): q {kl_q:.5}, q_EW k=2 {kl2:.5}, k=10 {kl10:.5} (margin at k=10 {:.5} > 0.01)",
            kl_q - kl10
        ),
    ))
}

fn implicit_sir_beats_proposal(s: &Suite, rng: &mut RngStream) -> Outcome {
    let t = builtin("mix2")?;
    let q = GaussianProposal::standard(2);
    let (bins, post) = posterior_bin_masses(&t, &Grid::default_for_dim(2)?)?;
    let streams = rng.split();
    let sir = sir_samples(&t, &q, 50, s.sizes.sir_draws, &mut streams.stream(0))?;
    let plain = proposal_samples(&q, s.sizes.sir_draws, &mut streams.stream(1));
    let tv_sir = tv_distance(&histogram_masses(&sir, &bins), &post)?;
    let tv_q = tv_distance(&histogram_masses(&plain, &bins), &post)?;
    Ok((
        tv_sir < 0.5 * tv_q,
        format!(
            "mix2, {} draws: TV(SIR k=50, posterior) {tv_sir:.4} < ½·TV(q, posterior) = {:.4}",
            s.sizes.sir_draws,
            0.5 * tv_q
        ),
    ))
}

fn oracle_posterior_mass(_: &Suite, _: &mut RngStream) -> Outcome {
    let mut worst: f64 = 0.0;
    for name in BUILTIN_TARGETS {
        let t = builtin(name)?;
        let f = true_posterior_field(&t, &Grid::default_for_dim(t.dim())?)?;
        worst = worst.max((quadrature(&f) - 1.0).abs());
    }
    Ok((
        worst < 1e-6,
        format!("max |mass − 1| of posterior fields {worst:.1e} (< 1e-6)"),
    ))
}

fn oracle_kl_nonnegative(s: &Suite, rng: &mut RngStream) -> Outcome {
    let t = builtin("mix2")?;
    let grid = s.grid2()?;
    let posterior = true_posterior_field(&t, &grid)?;
    let mut least = f64::INFINITY;
    for _ in 0..20 {
        let q = random_proposal(rng, 2)?;
        let qf = normalized(&DensityField::new(
            grid.clone(),
            grid.map_cells(|z| q.log_density_unchecked(z).exp()),
        )?);
        least = least.min(kl_field(&posterior, &qf)?);
        least = least.min(kl_field(&qf, &posterior)?);
    }
    Ok((
        least >= -1e-9,
        format!("smallest KL over 20 random proposals, both directions: {least:.3e} (≥ −1e-9)"),
    ))
}

fn oracle_resolution(_: &Suite, _: &mut RngStream) -> Outcome {
    let t = builtin("gauss1d")?;
    let coarse = Grid::default_for_dim(1)?;
    let a = log_marginal(&t, &coarse)?;
    let b = log_marginal(&t, &coarse.refine(2)?)?;
    let d = (a - b).abs();
    Ok((
        d < 1e-6,
        format!("gauss1d log p(x) change when doubling resolution {d:.1e} (< 1e-6)"),
    ))
}

fn optim_finite_differences(s: &Suite, rng: &mut RngStream) -> Outcome {
    const H: f64 = 1e-4;
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let name = BUILTIN_TARGETS[(rng.next_u64() % BUILTIN_TARGETS.len() as u64) as usize];
        let t = builtin(name)?;
        let d = t.dim();
        let k = [1, 2, 5, 10][(rng.next_u64() % 4) as usize];
        let q = random_proposal(rng, d)?;
        let dir_m: Vec<f64> = (0..d).map(|_| rng.standard_normal()).collect();
        let dir_s: Vec<f64> = (0..d).map(|_| rng.standard_normal()).collect();
        let common = rng.clone();
        let g = iwae_gradient(&t, &q, k, s.sizes.fd_batches, &mut common.clone())?;
        let shifted = |sign: f64| -> Result<f64> {
            let m = q
                .mean()
                .iter()
                .zip(&dir_m)
                .map(|(a, b)| a + sign * H * b)
                .collect();
            let l = q
                .log_std()
                .iter()
                .zip(&dir_s)
                .map(|(a, b)| a + sign * H * b)
                .collect();
            let qs = GaussianProposal::new(m, l)?;
            Ok(iwae_elbo_mc(&t, &qs, k, s.sizes.fd_batches, &mut common.clone())?.value)
        };
        let fd = (shifted(1.0)? - shifted(-1.0)?) / (2.0 * H);
        let analytic = g.dot(&dir_m, &dir_s);
        worst = worst.max((fd - analytic).abs() / analytic.abs());
        // advance so the next configuration sees different batches
        rng.split();
    }
    Ok((
        worst < 1e-2,
        format!(
            "20 random (target, k, θ, direction), {} batches: max relative error {worst:.2e} (< 1e-2)",
            s.sizes.fd_batches
        ),
    ))
}

fn fit_config(k: usize, steps: usize) -> FitConfig {
    FitConfig {
        k,
        steps,
        learning_rate: 0.01,
        n_batches: 32,
    }
}

/// Fits gauss1d from mean 2, std e and compares with the posterior N(0, 1).
fn fit_gauss1d(s: &Suite, rng: &mut RngStream, k: usize, steps: usize) -> Outcome {
    let t = builtin("gauss1d")?;
    let q0 = GaussianProposal::new(vec![2.0], vec![1.0])?;
    let streams = rng.split();
    let (q, _) = fit_proposal(&t, &q0, &fit_config(k, steps), &mut streams.stream(0))
        .map_err(|f| f.source)?;
    let (m, sd) = (q.mean()[0], q.std()[0]);
    let b = iwae_elbo_mc(&t, &q, k, s.sizes.batches, &mut streams.stream(1))?;
    let gap = 0.5 * LN_2PI - b.value;
    Ok((
        m.abs() < 0.05 && (sd - 1.0).abs() < 0.05 && gap.abs() < 0.01,
        format!(
            "k={k}, {steps} steps at lr 0.01 from mean 2, std e: mean {m:.4}, std {sd:.4}, \
             log p(x) − bound {gap:.5} (< 0.05, < 0.05, < 0.01)"
        ),
    ))
}

fn optim_fit_gauss1d(s: &Suite, rng: &mut RngStream) -> Outcome {
    fit_gauss1d(s, rng, 1, 2000)
}

// The IWAE bound flattens in the proposal parameters roughly like 1/k, so
// plain ascent at the same step size needs proportionally more steps.
fn optim_fit_gauss1d_k10(s: &Suite, rng: &mut RngStream) -> Outcome {
    fit_gauss1d(s, rng, 10, 20_000)
}

fn optim_fit_mix2_k50(s: &Suite, rng: &mut RngStream) -> Outcome {
    let t = builtin("mix2")?;
    let q0 = GaussianProposal::standard(2);
    let streams = rng.split();
    let steps = s.sizes.mix2_fit_steps;
    let mut est = Vec::new();
    for (i, k) in [1usize, 50].into_iter().enumerate() {
        let i = i as u64;
        let (q, _) = fit_proposal(&t, &q0, &fit_config(k, steps), &mut streams.stream(2 * i))
            .map_err(|f| f.source)?;
        est.push(iwae_elbo_mc(
            &t,
            &q,
            50,
            s.sizes.batches,
            &mut streams.stream(2 * i + 1),
        )?);
    }
    let ok = le(
        est[0].value,
        est[1].value,
        combined_se(&est[0], &est[1]),
        0.0,
    );
    Ok((
        ok,
        format!(
            "L_IWAE(k=50) after {steps} steps: trained at k=1 {:.5}, at k=50 {:.5}",
            est[0].value, est[1].value
        ),
    ))
}

fn optim_smoothed_trace(_: &Suite, rng: &mut RngStream) -> Outcome {
    let t = builtin("gauss1d")?;
    let q0 = GaussianProposal::new(vec![2.0], vec![1.0])?;
    let (_, trace) = fit_proposal(&t, &q0, &fit_config(1, 2000), rng).map_err(|f| f.source)?;
    let windows: Vec<(f64, f64)> = trace.bounds().chunks(100).map(mean_and_se).collect();
    let drops = windows
        .windows(2)
        .filter(|w| !le(w[0].0, w[1].0, w[0].1.hypot(w[1].1), 0.0))
        .count();
    Ok((
        drops == 0,
        format!(
            "gauss1d k=1: {} windows of 100 steps, {drops} significant decreases, \
             first {:.4}, last {:.4}",
            windows.len(),
            windows[0].0,
            windows[windows.len() - 1].0
        ),
    ))
}
