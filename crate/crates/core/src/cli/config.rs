use std::path::PathBuf;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::kv::KvConfig;
use crate::model::{GaussianProposal, TargetModel};
use crate::oracle::Grid;

const KEYS: &[&str] = &[
    "k",
    "samples",
    "n",
    "batches",
    "grid.points",
    "grid.lo",
    "grid.hi",
    "seed",
    "out",
    "threads",
    "quick",
    "single-batch",
    "steps",
    "lr",
    "pgm",
    // mutation hook for checking that verify notices a broken normalizer
    "inject-divisor-offset",
];

/// Everything a subcommand needs, resolved from flags and config file.
/// Options left `None` fall back to per-command defaults.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub target: TargetModel,
    pub proposal: GaussianProposal,
    pub ks: Option<Vec<usize>>,
    pub samples: usize,
    pub n: usize,
    pub batches: Option<usize>,
    pub grid: Grid,
    pub seed: u64,
    pub out: PathBuf,
    pub threads: Option<usize>,
    pub quick: bool,
    pub single_batch: Option<usize>,
    pub steps: usize,
    pub learning_rate: f64,
    pub pgm: bool,
    pub divisor_offset: i64,
}

fn parse<T: FromStr>(cfg: &KvConfig, key: &str) -> Result<Option<T>> {
    cfg.get(key)
        .map(|v| {
            v.trim()
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("bad value `{v}` for `{key}`")))
        })
        .transpose()
}

fn parse_bool(cfg: &KvConfig, key: &str) -> Result<bool> {
    Ok(parse::<bool>(cfg, key)?.unwrap_or(false))
}

impl RunConfig {
    pub fn from_kv(cfg: &KvConfig, env_seed: Option<&str>) -> Result<Self> {
        if let Some(key) = cfg.keys().find(|k| {
            !KEYS.contains(k)
                && *k != "target"
                && !k.starts_with("target.")
                && !k.starts_with("proposal.")
        }) {
            return Err(Error::InvalidArgument(format!("unknown option `{key}`")));
        }
        let target = if cfg.contains("target") || cfg.contains("target.kind") {
            TargetModel::from_kv(cfg)?
        } else {
            TargetModel::builtin("mix2")?
        };
        let dim = target.dim();
        let proposal = if cfg.contains("proposal.mean") {
            GaussianProposal::from_kv(cfg)?
        } else if let Some(log_std) = cfg.vec("proposal.log_std")? {
            GaussianProposal::new(vec![0.0; dim], log_std)?
        } else {
            GaussianProposal::standard(dim)
        };
        if proposal.dim() != dim {
            return Err(Error::InvalidArgument(format!(
                "proposal has dimension {}, target `{}` has {dim}",
                proposal.dim(),
                target.name()
            )));
        }

        let ks = match cfg.get("k") {
            None => None,
            Some(text) => Some(
                text.split(',')
                    .map(|s| match s.trim().parse::<usize>() {
                        Ok(k) if k >= 1 => Ok(k),
                        _ => Err(Error::InvalidArgument(format!("bad k `{s}`"))),
                    })
                    .collect::<Result<Vec<_>>>()?,
            ),
        };

        let grid = {
            let default = Grid::default_for_dim(dim)?;
            let points = parse(cfg, "grid.points")?.unwrap_or(default.points_per_dim()[0]);
            let lo = parse(cfg, "grid.lo")?.unwrap_or(default.lo()[0]);
            let hi = parse(cfg, "grid.hi")?.unwrap_or(default.hi()[0]);
            Grid::cube(dim, lo, hi, points)?
        };

        let seed = match parse::<u64>(cfg, "seed")? {
            Some(s) => s,
            None => match env_seed {
                Some(s) => s.trim().parse().map_err(|_| {
                    Error::InvalidArgument(format!("IWPOST_SEED `{s}` is not an integer"))
                })?,
                None => 0,
            },
        };

        let single_batch = match cfg.get("single-batch") {
            None | Some("false") => None,
            Some("true") => Some(3),
            Some(_) => Some(parse(cfg, "single-batch")?.unwrap_or(3)),
        };

        let threads = parse::<usize>(cfg, "threads")?;
        if threads == Some(0) {
            return Err(Error::InvalidArgument(
                "--threads must be at least 1".into(),
            ));
        }
        let learning_rate = parse(cfg, "lr")?.unwrap_or(0.01);
        if !(learning_rate > 0.0) {
            return Err(Error::InvalidArgument("--lr must be positive".into()));
        }

        Ok(Self {
            target,
            proposal,
            ks,
            samples: parse(cfg, "samples")?.unwrap_or(500),
            n: parse(cfg, "n")?.unwrap_or(100_000),
            batches: parse(cfg, "batches")?,
            grid,
            seed,
            out: PathBuf::from(cfg.get("out").unwrap_or(".")),
            threads,
            quick: parse_bool(cfg, "quick")?,
            single_batch,
            steps: parse(cfg, "steps")?.unwrap_or(2000),
            learning_rate,
            pgm: parse::<bool>(cfg, "pgm")?.unwrap_or(true),
            divisor_offset: parse(cfg, "inject-divisor-offset")?.unwrap_or(0),
        })
    }

    pub(crate) fn ks_or(&self, default: &[usize]) -> Vec<usize> {
        self.ks.clone().unwrap_or_else(|| default.to_vec())
    }

    /// The single `k` of commands that take one.
    pub(crate) fn single_k(&self, default: usize) -> Result<usize> {
        match self.ks.as_deref() {
            None => Ok(default),
            Some([k]) => Ok(*k),
            Some(_) => Err(Error::InvalidArgument(
                "this command takes a single --k value".into(),
            )),
        }
    }
}
