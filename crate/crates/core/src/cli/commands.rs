use std::io::Write;
use std::path::Path;

use super::{write_atomic, RunConfig, EXIT_FAILURE, EXIT_OK};
use crate::bounds::{iwae_elbo_mc, vae_elbo_mc, vae_elbo_qew_estimate, BoundEstimate};
use crate::error::{Error, Result};
use crate::field::DensityField;
use crate::implicit::{proposal_samples, sir_samples, GridEvaluator, QiwContext};
use crate::kv::KvConfig;
use crate::model::{LatentPoint, TargetModel};
use crate::optim::{fit_proposal, FitConfig};
use crate::oracle::{
    histogram_masses, log_marginal, max_abs_error, quadrature, true_posterior_field, tv_distance,
    Grid,
};
use crate::rng::RngStream;

/// Bins per dimension for sample histograms, and the refinement used to
/// integrate the posterior over each bin.
pub(crate) const HIST_BINS: usize = 20;
pub(crate) const HIST_REFINE: usize = 8;

/// Largest group count in 2..=10 that divides `samples`, for batch-means
/// error bars on the `q_EW` bound.
fn error_groups(samples: usize) -> Result<usize> {
    (2..=10).rev().find(|g| samples.is_multiple_of(*g)).ok_or_else(|| {
        Error::InvalidArgument(format!(
            "S = {samples} has no divisor in 2..=10; pick S divisible by e.g. 10"
        ))
    })
}

fn fmt_est(e: &BoundEstimate) -> String {
    format!("{:>11.7} ± {:<9.7}", e.value, e.std_error)
}

fn describe(cfg: &RunConfig) -> String {
    format!(
        "target {}, proposal mean {:?} log_std {:?}, seed {}",
        cfg.target.name(),
        cfg.proposal.mean(),
        cfg.proposal.log_std(),
        cfg.seed
    )
}

pub(crate) fn bounds(cfg: &RunConfig, out: &mut dyn Write) -> Result<u8> {
    let (t, q) = (&cfg.target, &cfg.proposal);
    let ks = cfg.ks_or(&[1, 5, 10, 50]);
    let batches = cfg.batches.unwrap_or(10_000);
    let groups = error_groups(cfg.samples)?;
    let streams = RngStream::from_seed(cfg.seed).split();

    let log_px = log_marginal(t, &cfg.grid)?;
    let vae = vae_elbo_mc(t, q, cfg.n, &mut streams.stream(0))?;
    writeln!(out, "{}", describe(cfg))?;
    writeln!(out, "log p(x) by quadrature = {log_px:.7}")?;
    writeln!(
        out,
        "{:>5}  {:<21}  {:<21}  {:<21}",
        "k", "L_VAE[q]", "L_IWAE[q]", "L_VAE[q_EW]"
    )?;

    let mut rows = Vec::with_capacity(ks.len());
    for (i, &k) in ks.iter().enumerate() {
        let i = i as u64;
        let iwae = iwae_elbo_mc(t, q, k, batches, &mut streams.stream(1 + 2 * i))?;
        let qew = vae_elbo_qew_estimate(
            t,
            q,
            k,
            cfg.samples,
            groups,
            &cfg.grid,
            &mut streams.stream(2 + 2 * i),
        )?;
        writeln!(
            out,
            "{k:>5}  {}  {}  {}",
            fmt_est(&vae),
            fmt_est(&iwae),
            fmt_est(&qew)
        )?;
        rows.push((k, iwae, qew));
    }

    let path = cfg.out.join("bounds.csv");
    write_atomic(&path, |w| {
        writeln!(w, "k,vae,vae_se,iwae,iwae_se,vae_qew,vae_qew_se,log_px")?;
        for (k, iwae, qew) in &rows {
            writeln!(
                w,
                "{k},{},{},{},{},{},{},{log_px}",
                vae.value, vae.std_error, iwae.value, iwae.std_error, qew.value, qew.std_error
            )?;
        }
        Ok(())
    })?;
    writeln!(out, "wrote {}", path.display())?;
    Ok(EXIT_OK)
}

fn write_field(dir: &Path, stem: &str, field: &DensityField, pgm: bool) -> Result<()> {
    write_atomic(
        &dir.join(format!("{stem}.csv")),
        |w| Ok(field.write_csv(w)?),
    )?;
    if pgm {
        write_atomic(&dir.join(format!("{stem}.pgm")), |w| field.write_pgm(w))?;
    }
    Ok(())
}

pub(crate) fn plot(cfg: &RunConfig, out: &mut dyn Write) -> Result<u8> {
    let (t, q, grid) = (&cfg.target, &cfg.proposal, &cfg.grid);
    if cfg.pgm && t.dim() > 2 {
        return Err(Error::InvalidArgument(format!(
            "PGM output needs dim ≤ 2 (target `{}` has {}); pass --pgm=false",
            t.name(),
            t.dim()
        )));
    }
    let ks = cfg.ks_or(&[1, 10, 100]);
    let mut root = RngStream::from_seed(cfg.seed);
    let fields = root.split();
    let batches = root.split();

    let ev = GridEvaluator::new(t, q, grid)?;
    let posterior = true_posterior_field(t, grid)?;
    writeln!(out, "{}", describe(cfg))?;
    write_field(&cfg.out, "posterior", &posterior, cfg.pgm)?;
    write_field(&cfg.out, "proposal", &ev.proposal_field(), cfg.pgm)?;

    writeln!(out, "{:>5}  {:>10}  {:>16}", "k", "mass", "max|q_EW − p|")?;
    for (i, &k) in ks.iter().enumerate() {
        let field = ev.qew_field(k, cfg.samples, &mut fields.stream(i as u64))?;
        writeln!(
            out,
            "{k:>5}  {:>10.6}  {:>16.6}",
            quadrature(&field),
            max_abs_error(&field, &posterior)?
        )?;
        write_field(&cfg.out, &format!("qew_k{k}"), &field, cfg.pgm)?;
    }

    if let Some(count) = cfg.single_batch {
        for (i, &k) in ks.iter().enumerate().filter(|(_, &k)| k >= 2) {
            for b in 0..count {
                let index = (i * count + b) as u64;
                let ctx = QiwContext::draw(t, q, k, &mut batches.stream(index))?;
                let field = ev.qiw_field(&ctx)?;
                writeln!(
                    out,
                    "single batch k={k} #{b}: mass {:.6}",
                    quadrature(&field)
                )?;
                write_field(&cfg.out, &format!("qiw_k{k}_b{b}"), &field, cfg.pgm)?;
            }
        }
    }
    writeln!(out, "wrote fields to {}", cfg.out.display())?;
    Ok(EXIT_OK)
}

fn write_points(path: &Path, points: &[LatentPoint]) -> Result<()> {
    const NAMES: [&str; 3] = ["x", "y", "z"];
    write_atomic(path, |w| {
        let dim = points.first().map_or(0, |p| p.len());
        let header: Vec<String> = (0..dim)
            .map(|d| {
                NAMES
                    .get(d)
                    .map_or_else(|| format!("x{d}"), |s| s.to_string())
            })
            .collect();
        writeln!(w, "{}", header.join(","))?;
        for p in points {
            let row: Vec<String> = p.iter().map(f64::to_string).collect();
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    })
}

/// Posterior mass of each histogram bin on `range`, plus the outside mass.
pub(crate) fn posterior_bin_masses(t: &TargetModel, range: &Grid) -> Result<(Grid, Vec<f64>)> {
    let bins = Grid::new(
        range.lo().to_vec(),
        range.hi().to_vec(),
        vec![HIST_BINS; range.dim()],
    )?;
    let fine = true_posterior_field(t, &bins.refine(HIST_REFINE)?)?;
    let masses = fine.coarsen(&bins, HIST_REFINE)?.cell_masses_with_outside();
    Ok((bins, masses))
}

pub(crate) fn sample(cfg: &RunConfig, out: &mut dyn Write) -> Result<u8> {
    let (t, q) = (&cfg.target, &cfg.proposal);
    let k = cfg.single_k(50)?;
    let streams = RngStream::from_seed(cfg.seed).split();
    let sir = sir_samples(t, q, k, cfg.n, &mut streams.stream(0))?;
    let plain = proposal_samples(q, cfg.n, &mut streams.stream(1));
    write_points(&cfg.out.join("sir_samples.csv"), &sir)?;
    write_points(&cfg.out.join("proposal_samples.csv"), &plain)?;
    writeln!(out, "{}", describe(cfg))?;
    writeln!(
        out,
        "{} SIR draws at k={k}, {} proposal draws",
        cfg.n, cfg.n
    )?;
    if t.dim() <= 2 {
        let (bins, post) = posterior_bin_masses(t, &cfg.grid)?;
        let tv_sir = tv_distance(&histogram_masses(&sir, &bins), &post)?;
        let tv_q = tv_distance(&histogram_masses(&plain, &bins), &post)?;
        writeln!(
            out,
            "TV to posterior ({HIST_BINS} bins per dimension): SIR {tv_sir:.6}, proposal {tv_q:.6}"
        )?;
    }
    writeln!(out, "wrote samples to {}", cfg.out.display())?;
    Ok(EXIT_OK)
}

pub(crate) fn fit(cfg: &RunConfig, out: &mut dyn Write) -> Result<u8> {
    let (t, q0) = (&cfg.target, &cfg.proposal);
    let fit_cfg = FitConfig {
        k: cfg.single_k(1)?,
        steps: cfg.steps,
        learning_rate: cfg.learning_rate,
        n_batches: cfg.batches.unwrap_or(32),
    };
    let streams = RngStream::from_seed(cfg.seed).split();
    let trace_path = cfg.out.join("trace.csv");
    writeln!(out, "{}", describe(cfg))?;
    let (q, trace) = match fit_proposal(t, q0, &fit_cfg, &mut streams.stream(0)) {
        Ok(v) => v,
        Err(failure) => {
            write_atomic(&trace_path, |w| Ok(failure.trace.write_csv(w, t.dim())?))?;
            writeln!(
                out,
                "{failure}; partial trace ({} steps) in {}",
                failure.trace.len(),
                trace_path.display()
            )?;
            return Ok(EXIT_FAILURE);
        }
    };
    write_atomic(&trace_path, |w| Ok(trace.write_csv(w, t.dim())?))?;

    let mut conf = KvConfig::new();
    t.to_kv(&mut conf)?;
    q.to_kv(&mut conf);
    let conf_path = cfg.out.join("proposal.conf");
    write_atomic(&conf_path, |w| {
        writeln!(
            w,
            "# fitted by iwpost fit: k={} steps={} lr={} batches={} seed={}",
            fit_cfg.k, fit_cfg.steps, fit_cfg.learning_rate, fit_cfg.n_batches, cfg.seed
        )?;
        Ok(w.write_all(conf.render().as_bytes())?)
    })?;

    let vae = vae_elbo_mc(t, &q, cfg.n, &mut streams.stream(1))?;
    let iwae = iwae_elbo_mc(t, &q, fit_cfg.k, 10_000, &mut streams.stream(2))?;
    writeln!(out, "fitted mean {:?} log_std {:?}", q.mean(), q.log_std())?;
    writeln!(out, "L_VAE[q]  = {}", fmt_est(&vae))?;
    writeln!(out, "L_IWAE[q] = {} (k={})", fmt_est(&iwae), fit_cfg.k)?;
    if t.dim() <= 3 {
        writeln!(out, "log p(x)  = {:.7}", log_marginal(t, &cfg.grid)?)?;
    }
    writeln!(
        out,
        "wrote {} and {}",
        trace_path.display(),
        conf_path.display()
    )?;
    Ok(EXIT_OK)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn error_groups_prefers_ten() {
        assert_eq!(error_groups(500).unwrap(), 10);
        assert_eq!(error_groups(63).unwrap(), 9);
        assert!(error_groups(53).is_err());
    }

    #[test]
    fn posterior_bins_hold_all_mass() {
        let t = TargetModel::builtin("mix2").unwrap();
        let (bins, m) = posterior_bin_masses(&t, &Grid::default_for_dim(2).unwrap()).unwrap();
        assert_eq!(bins.len() + 1, m.len());
        assert!((m.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
}
