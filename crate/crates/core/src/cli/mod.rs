//! The `iwpost` command line.
//!
//! ```text
//! iwpost <bounds|plot|sample|fit|verify> [--key=value ...]
//! ```
//!
//! Every flag is also accepted as a `key=value` line in a file named by
//! `--config=PATH`; flags win over the file. The seed comes from `--seed`,
//! else `IWPOST_SEED`, else 0. Exit codes: 0 success, 1 estimation or
//! verification failure, 2 usage error.

mod commands;
mod config;
pub mod verify;

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use tempfile::NamedTempFile;

use crate::error::{Error, Result};
use crate::kv::KvConfig;

pub use config::RunConfig;

pub const EXIT_OK: u8 = 0;
pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_USAGE: u8 = 2;

const USAGE: &str = "\
usage: iwpost <command> [--key=value ...]

commands:
  bounds   VAE, IWAE and q_EW bounds per k, with log p(x) from quadrature
  plot     q_EW, posterior and proposal fields as CSV and PGM
  sample   SIR and plain proposal draws, with histogram TV to the posterior
  fit      gradient ascent on the IWAE bound
  verify   run the invariant suite and print PASS/FAIL per check

options:
  --config=PATH          key=value file; flags override it
  --target=NAME          gauss1d, gauss2d, mix2 (default) or ring
  --proposal.mean=a,b    proposal mean (default 0)
  --proposal.log_std=a,b proposal log standard deviation (default 0)
  --k=1,5,10             importance sample sizes
  --samples=S            outer iterations for q_EW fields (default 500)
  --n=N                  draws for VAE and sampling (default 100000)
  --batches=B            IWAE batches (bounds) or batches per step (fit)
  --grid.points=P        cells per dimension; --grid.lo / --grid.hi set the range
  --steps=T --lr=ETA     fit schedule (default 2000 steps, 0.01)
  --single-batch[=N]     plot: also write N single-batch q̃_IW fields (default 3)
  --pgm=false            plot: CSV only
  --seed=SEED            random seed (default $IWPOST_SEED or 0)
  --threads=T            worker threads (default: all cores)
  --out=DIR              output directory (default .)
  --quick                verify: reduced suite
";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Command {
    Bounds,
    Plot,
    Sample,
    Fit,
    Verify,
}

impl Command {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "bounds" => Self::Bounds,
            "plot" => Self::Plot,
            "sample" => Self::Sample,
            "fit" => Self::Fit,
            "verify" => Self::Verify,
            _ => return None,
        })
    }
}

/// Runs the command line `args` (without the program name) and returns the
/// process exit code.
pub fn run(args: &[String], out: &mut dyn Write, err: &mut dyn Write) -> u8 {
    if args.iter().any(|a| a == "--help" || a == "-h") || args.is_empty() {
        let _ = out.write_all(USAGE.as_bytes());
        return if args.is_empty() { EXIT_USAGE } else { EXIT_OK };
    }
    let env_seed = std::env::var("IWPOST_SEED").ok();
    let (command, cfg) = match parse_args(args, env_seed.as_deref()) {
        Ok(v) => v,
        Err(e) => {
            let _ = writeln!(err, "error: {e}\n\n{USAGE}");
            return EXIT_USAGE;
        }
    };
    let result = match cfg.threads {
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            // the pool's closure must be Send, so buffer the report
            Ok(pool) => {
                let mut buf = Vec::new();
                let r = pool.install(|| dispatch(command, &cfg, &mut buf));
                let _ = out.write_all(&buf);
                r
            }
            Err(e) => Err(Error::InvalidArgument(format!("thread pool: {e}"))),
        },
        None => dispatch(command, &cfg, out),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            EXIT_FAILURE
        }
    }
}

fn dispatch(command: Command, cfg: &RunConfig, out: &mut dyn Write) -> Result<u8> {
    match command {
        Command::Bounds => commands::bounds(cfg, out),
        Command::Plot => commands::plot(cfg, out),
        Command::Sample => commands::sample(cfg, out),
        Command::Fit => commands::fit(cfg, out),
        Command::Verify => verify::run(cfg, out),
    }
}

fn parse_args(args: &[String], env_seed: Option<&str>) -> Result<(Command, RunConfig)> {
    let mut command = None;
    let mut flags = KvConfig::new();
    let mut config_file = None;
    for arg in args {
        if let Some(flag) = arg.strip_prefix("--") {
            let (key, value) = flag.split_once('=').unwrap_or((flag, "true"));
            if key.is_empty() {
                return Err(Error::InvalidArgument(format!("malformed flag `{arg}`")));
            }
            if key == "config" {
                config_file = Some(value.to_string());
            } else {
                flags.set(key, value);
            }
        } else if command.is_none() {
            command = Some(
                Command::parse(arg)
                    .ok_or_else(|| Error::InvalidArgument(format!("unknown command `{arg}`")))?,
            );
        } else {
            return Err(Error::InvalidArgument(format!(
                "unexpected argument `{arg}`"
            )));
        }
    }
    let command = command.ok_or_else(|| Error::InvalidArgument("no command given".into()))?;
    let mut cfg = match config_file {
        Some(path) => {
            let text = fs::read_to_string(&path)
                .map_err(|e| Error::Config(format!("cannot read `{path}`: {e}")))?;
            KvConfig::parse(&text)?
        }
        None => KvConfig::new(),
    };
    cfg.merge(&flags);
    Ok((command, RunConfig::from_kv(&cfg, env_seed)?))
}

/// Writes `path` through a temporary file in the same directory and renames
/// it into place, so readers never see a partial file.
pub(crate) fn write_atomic<F>(path: &Path, fill: F) -> Result<()>
where
    F: FnOnce(&mut dyn Write) -> Result<()>,
{
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir)?;
    let mut tmp = NamedTempFile::new_in(dir)?;
    {
        let mut w = BufWriter::new(tmp.as_file_mut());
        fill(&mut w)?;
        w.flush()?;
    }
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    fn run_capture(v: &[&str]) -> (u8, String, String) {
        let (mut out, mut err) = (Vec::new(), Vec::new());
        let code = run(&args(v), &mut out, &mut err);
        (
            code,
            String::from_utf8(out).unwrap(),
            String::from_utf8(err).unwrap(),
        )
    }

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(run_capture(&[]).0, EXIT_USAGE);
        assert_eq!(run_capture(&["frobnicate"]).0, EXIT_USAGE);
        assert_eq!(run_capture(&["bounds", "--target=nope"]).0, EXIT_USAGE);
        assert_eq!(run_capture(&["bounds", "--bogus=1"]).0, EXIT_USAGE);
        assert_eq!(run_capture(&["bounds", "--k=two"]).0, EXIT_USAGE);
        assert_eq!(run_capture(&["bounds", "extra", "words"]).0, EXIT_USAGE);
        assert_eq!(run_capture(&["--help"]).0, EXIT_OK);
    }

    #[test]
    fn flags_override_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        fs::write(&path, "# test\ntarget=ring\nseed=4\nk=3\n").unwrap();
        let conf = format!("--config={}", path.display());
        let (cmd, cfg) = parse_args(&args(&["bounds", &conf, "--seed=9"]), Some("5")).unwrap();
        assert_eq!(cmd, Command::Bounds);
        assert_eq!(cfg.target.name(), "ring");
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.ks.as_deref(), Some(&[3][..]));
    }

    #[test]
    fn seed_falls_back_to_environment_value() {
        let (_, cfg) = parse_args(&args(&["fit"]), Some("17")).unwrap();
        assert_eq!(cfg.seed, 17);
        let (_, cfg) = parse_args(&args(&["fit"]), None).unwrap();
        assert_eq!(cfg.seed, 0);
        assert!(parse_args(&args(&["fit"]), Some("x")).is_err());
    }

    #[test]
    fn atomic_write_leaves_no_temporaries() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub").join("a.csv");
        write_atomic(&path, |w| Ok(writeln!(w, "x,value")?)).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), "x,value\n");
        let failed = write_atomic(&dir.path().join("b.csv"), |w| {
            writeln!(w, "partial")?;
            Err(Error::Numeric("interrupted".into()))
        });
        assert!(failed.is_err());
        let names: Vec<_> = fs::read_dir(dir.path().join("sub"))
            .unwrap()
            .map(|e| e.unwrap().file_name())
            .collect();
        assert_eq!(names, vec!["a.csv"]);
        assert!(!dir.path().join("b.csv").exists());
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
