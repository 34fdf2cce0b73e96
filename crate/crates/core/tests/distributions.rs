//! Distributional checks with Kolmogorov–Smirnov statistics against
//! independently computed CDFs.

use iwpost::implicit::{proposal_samples, qew_density_mc, sir_samples};
use iwpost::model::{GaussianProposal, LatentPoint, TargetModel};
use iwpost::stats::{ks_one_sample, ks_two_sample};
use iwpost::RngStream;
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

fn marginal(points: &[LatentPoint], d: usize) -> Vec<f64> {
    points.iter().map(|p| p[d]).collect()
}

#[test]
fn proposal_draws_follow_their_normal_marginals() {
    let q = GaussianProposal::new(vec![0.5, -1.0], vec![0.3, -0.7]).unwrap();
    let draws = proposal_samples(&q, 100_000, &mut RngStream::from_seed(1));
    for d in 0..2 {
        let n = Normal::new(q.mean()[d], q.std()[d]).unwrap();
        let ks = ks_one_sample(&marginal(&draws, d), |x| n.cdf(x));
        assert!(ks < 0.01, "dimension {d}: KS {ks}");
    }
}

#[test]
fn reparameterized_draws_match_proposal_draws() {
    let q = GaussianProposal::new(vec![0.5], vec![0.2]).unwrap();
    let mut rng = RngStream::from_seed(2);
    let reparam: Vec<f64> = (0..100_000)
        .map(|_| q.reparam(&[rng.standard_normal()]).unwrap()[0])
        .collect();
    let direct = marginal(
        &proposal_samples(&q, 100_000, &mut RngStream::from_seed(3)),
        0,
    );
    let ks = ks_two_sample(&reparam, &direct);
    assert!(ks < 0.01, "KS {ks}");
}

#[test]
fn sir_with_one_sample_is_the_proposal() {
    let t = TargetModel::builtin("mix2").unwrap();
    let q = GaussianProposal::standard(2);
    let sir = sir_samples(&t, &q, 1, 100_000, &mut RngStream::from_seed(4)).unwrap();
    let plain = proposal_samples(&q, 100_000, &mut RngStream::from_seed(5));
    for d in 0..2 {
        let ks = ks_two_sample(&marginal(&sir, d), &marginal(&plain, d));
        assert!(ks < 0.01, "dimension {d}: KS {ks}");
    }
}

/// gauss1d (`p(x, z) = exp(−z²/2)`) with `q = N(1, 1)` at `k = 2`:
/// `q_EW(z) = E_{z₂~q}[p(z) / (½(w(z) + w(z₂)))]`, integrated over `z₂` with
/// a fine midpoint rule.
struct QewK2 {
    q: Normal,
}

impl QewK2 {
    const LO: f64 = -9.0;
    const HI: f64 = 11.0;
    const N: usize = 4000;

    fn new() -> Self {
        Self {
            q: Normal::new(1.0, 1.0).unwrap(),
        }
    }

    fn p(z: f64) -> f64 {
        (-0.5 * z * z).exp()
    }

    fn q_pdf(&self, z: f64) -> f64 {
        self.q.pdf(z)
    }

    fn w(&self, z: f64) -> f64 {
        Self::p(z) / self.q_pdf(z)
    }

    fn nodes() -> impl Iterator<Item = f64> {
        let h = (Self::HI - Self::LO) / Self::N as f64;
        (0..Self::N).map(move |i| Self::LO + (i as f64 + 0.5) * h)
    }

    /// `(E[X], E[X²])` for `X = p(z) / (½(w(z) + w(z₂)))`, `z₂ ~ q`.
    fn moments(&self, z: f64) -> (f64, f64) {
        let h = (Self::HI - Self::LO) / Self::N as f64;
        let wz = self.w(z);
        let (mut m1, mut m2) = (0.0, 0.0);
        for z2 in Self::nodes() {
            let x = Self::p(z) / (0.5 * (wz + self.w(z2)));
            let dq = self.q_pdf(z2) * h;
            m1 += x * dq;
            m2 += x * x * dq;
        }
        (m1, m2)
    }

    fn cdf_table(&self) -> (Vec<f64>, Vec<f64>) {
        let h = (Self::HI - Self::LO) / Self::N as f64;
        let mut acc = 0.0;
        let mut xs = Vec::with_capacity(Self::N);
        let mut cs = Vec::with_capacity(Self::N);
        for z in Self::nodes() {
            acc += self.moments(z).0 * h;
            xs.push(z + 0.5 * h);
            cs.push(acc);
        }
        (xs, cs)
    }
}

#[test]
fn pointwise_qew_matches_quadrature_oracle() {
    let t = TargetModel::builtin("gauss1d").unwrap();
    let q = GaussianProposal::unit(vec![1.0]);
    let oracle = QewK2::new();
    let s = 200_000;
    for (i, z) in [-1.0, 0.0, 0.8, 2.5].into_iter().enumerate() {
        let (m1, m2) = oracle.moments(z);
        let se = ((m2 - m1 * m1) / s as f64).sqrt();
        let est =
            qew_density_mc(&t, &q, &[z], 2, s, &mut RngStream::from_seed(10 + i as u64)).unwrap();
        assert!((est - m1).abs() < 3.0 * se, "z={z}: {est} vs {m1} ± {se}");
    }
}

#[test]
fn sir_draws_follow_the_qew_oracle() {
    let t = TargetModel::builtin("gauss1d").unwrap();
    let q = GaussianProposal::unit(vec![1.0]);
    let (xs, cs) = QewK2::new().cdf_table();
    let total = *cs.last().unwrap();
    assert!((total - 1.0).abs() < 1e-6, "oracle mass {total}");
    let cdf = |x: f64| {
        let i = xs.partition_point(|&v| v < x);
        if i == 0 {
            0.0
        } else if i == xs.len() {
            1.0
        } else {
            // linear between table points
            let (x0, x1) = (xs[i - 1], xs[i]);
            cs[i - 1] + (cs[i] - cs[i - 1]) * (x - x0) / (x1 - x0)
        }
    };
    let draws = sir_samples(&t, &q, 2, 100_000, &mut RngStream::from_seed(20)).unwrap();
    let ks = ks_one_sample(&marginal(&draws, 0), cdf);
    assert!(ks < 0.01, "KS {ks}");
    // and q_EW is neither the proposal nor the posterior
    let n01 = Normal::new(0.0, 1.0).unwrap();
    let n11 = Normal::new(1.0, 1.0).unwrap();
    assert!(ks_one_sample(&marginal(&draws, 0), |x| n01.cdf(x)) > 0.02);
    assert!(ks_one_sample(&marginal(&draws, 0), |x| n11.cdf(x)) > 0.02);
}
