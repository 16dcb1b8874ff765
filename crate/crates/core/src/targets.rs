//! Energies used as endpoints of the interpolations, with exact samplers
//! where one is available.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const GMM_MODES: usize = 40;
pub const GMM_MEAN_RANGE: f64 = 40.0;

/// Name and parameters of a compiled-in target, as written in run configs
/// and checkpoint metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "lowercase", deny_unknown_fields)]
pub enum TargetSpec {
    /// 40-mode 2D Gaussian mixture; means drawn from `seed`.
    Gmm40 { seed: u64 },
    /// 8D product of four 2D double wells.
    Manywell {},
    /// Isotropic Gaussian `N(mean, sigma^2 I)`; `mean` defaults to zero.
    Gaussian {
        dim: usize,
        sigma: f64,
        #[serde(default)]
        mean: Option<Vec<f64>>,
        #[serde(default = "default_true")]
        normalized: bool,
    },
}

fn default_true() -> bool {
    true
}

impl TargetSpec {
    pub fn build(&self) -> Result<EnergyTarget> {
        match self {
            TargetSpec::Gmm40 { seed } => Ok(gmm40(*seed)),
            TargetSpec::Manywell {} => Ok(manywell()),
            TargetSpec::Gaussian { dim, sigma, mean, normalized } => {
                let mean = mean.clone().unwrap_or_else(|| vec![0.0; *dim]);
                if mean.len() != *dim {
                    return Err(Error::Dimension { expected: *dim, got: mean.len() });
                }
                gaussian(mean, *sigma, *normalized)
            }
        }
    }

    pub fn label(&self) -> String {
        match self {
            TargetSpec::Gmm40 { .. } => "gmm40".into(),
            TargetSpec::Manywell {} => "manywell".into(),
            TargetSpec::Gaussian { dim, .. } => format!("gaussian{dim}d"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TargetKind {
    Gaussian { mean: Vec<f64>, sigma: f64 },
    Mixture { means: Vec<Vec<f64>> },
    ManyWell,
    /// `|x|` in 1D.
    Laplace,
    /// `2 min(|x|, |x - m|)` in 1D.
    LaplaceMix { m: f64 },
}

/// An energy `f` with density proportional to `exp(-f)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyTarget {
    pub name: String,
    pub dim: usize,
    pub domain_box: Vec<(f64, f64)>,
    /// True when the energy includes its log-normalizer.
    pub normalized: bool,
    pub kind: TargetKind,
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|&a| (a - m).exp()).sum::<f64>().ln()
}

/// Per-block many-well energy `x^4 - 6 x^2 - x/2 + y^2/2`.
pub fn manywell_block(a: f64, b: f64) -> f64 {
    a.powi(4) - 6.0 * a * a - 0.5 * a + 0.5 * b * b
}

impl EnergyTarget {
    fn check(&self, x: &[f64]) {
        debug_assert_eq!(x.len(), self.dim, "point dimension for target {}", self.name);
    }

    pub fn energy(&self, x: &[f64]) -> f64 {
        self.check(x);
        match &self.kind {
            TargetKind::Gaussian { mean, sigma } => {
                let q: f64 = x.iter().zip(mean).map(|(a, m)| (a - m).powi(2)).sum::<f64>() / (2.0 * sigma * sigma);
                if self.normalized {
                    q + 0.5 * self.dim as f64 * (2.0 * PI * sigma * sigma).ln()
                } else {
                    q
                }
            }
            TargetKind::Mixture { means } => {
                let neg: Vec<f64> = means.iter().map(|mu| -0.5 * sq_dist(x, mu)).collect();
                let base = -log_sum_exp(&neg);
                if self.normalized {
                    base + (means.len() as f64).ln() + 0.5 * self.dim as f64 * (2.0 * PI).ln()
                } else {
                    base
                }
            }
            TargetKind::ManyWell => x.chunks(2).map(|c| manywell_block(c[0], c[1])).sum(),
            TargetKind::Laplace => x[0].abs(),
            TargetKind::LaplaceMix { m } => 2.0 * x[0].abs().min((x[0] - m).abs()),
        }
    }

    /// Analytic gradient; at kinks of the Laplace energies the subgradient
    /// `sign(.)` with `sign(0) = 0` is returned.
    pub fn grad(&self, x: &[f64], out: &mut [f64]) {
        self.check(x);
        match &self.kind {
            TargetKind::Gaussian { mean, sigma } => {
                let s2 = sigma * sigma;
                for ((o, a), m) in out.iter_mut().zip(x).zip(mean) {
                    *o = (a - m) / s2;
                }
            }
            TargetKind::Mixture { means } => {
                let w = mixture_weights(x, means);
                out.iter_mut().for_each(|o| *o = 0.0);
                for (wk, mu) in w.iter().zip(means) {
                    for ((o, a), m) in out.iter_mut().zip(x).zip(mu) {
                        *o += wk * (a - m);
                    }
                }
            }
            TargetKind::ManyWell => {
                for (o, c) in out.chunks_mut(2).zip(x.chunks(2)) {
                    o[0] = 4.0 * c[0].powi(3) - 12.0 * c[0] - 0.5;
                    o[1] = c[1];
                }
            }
            TargetKind::Laplace => out[0] = sign(x[0]),
            TargetKind::LaplaceMix { m } => {
                let (a, b) = (x[0].abs(), (x[0] - m).abs());
                out[0] = if a < b {
                    2.0 * sign(x[0])
                } else if b < a {
                    2.0 * sign(x[0] - m)
                } else {
                    0.0
                };
            }
        }
    }

    pub fn grad_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.dim];
        self.grad(x, &mut g);
        g
    }

    /// Analytic Laplacian (zero almost everywhere for the Laplace energies).
    pub fn laplacian(&self, x: &[f64]) -> f64 {
        self.check(x);
        match &self.kind {
            TargetKind::Gaussian { sigma, .. } => self.dim as f64 / (sigma * sigma),
            TargetKind::Mixture { means } => {
                // sum_k w_k (d - |x - mu_k|^2) + |sum_k w_k (x - mu_k)|^2
                let w = mixture_weights(x, means);
                let d = self.dim as f64;
                let mut mean_grad = vec![0.0; self.dim];
                let mut acc = 0.0;
                for (wk, mu) in w.iter().zip(means) {
                    acc += wk * (d - sq_dist(x, mu));
                    for ((g, a), m) in mean_grad.iter_mut().zip(x).zip(mu) {
                        *g += wk * (a - m);
                    }
                }
                acc + mean_grad.iter().map(|g| g * g).sum::<f64>()
            }
            TargetKind::ManyWell => x.chunks(2).map(|c| 12.0 * c[0] * c[0] - 12.0 + 1.0).sum(),
            TargetKind::Laplace | TargetKind::LaplaceMix { .. } => 0.0,
        }
    }

    pub fn has_sampler(&self) -> bool {
        matches!(self.kind, TargetKind::Gaussian { .. } | TargetKind::Mixture { .. } | TargetKind::ManyWell)
    }

    /// Exact draws, row-major `n x dim`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Result<Vec<f64>> {
        let d = self.dim;
        let mut out = Vec::with_capacity(n * d);
        match &self.kind {
            TargetKind::Gaussian { mean, sigma } => {
                for _ in 0..n {
                    for m in mean {
                        let z: f64 = rng.sample(StandardNormal);
                        out.push(m + sigma * z);
                    }
                }
            }
            TargetKind::Mixture { means } => {
                for _ in 0..n {
                    let mu = &means[rng.gen_range(0..means.len())];
                    for m in mu {
                        let z: f64 = rng.sample(StandardNormal);
                        out.push(m + z);
                    }
                }
            }
            TargetKind::ManyWell => {
                let sampler = DoubleWellSampler::new();
                for _ in 0..n * d / 2 {
                    out.push(sampler.sample(rng));
                    out.push(rng.sample::<f64, _>(StandardNormal));
                }
            }
            _ => return Err(Error::Config(format!("target {} has no exact sampler", self.name))),
        }
        Ok(out)
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

fn mixture_weights(x: &[f64], means: &[Vec<f64>]) -> Vec<f64> {
    let neg: Vec<f64> = means.iter().map(|mu| -0.5 * sq_dist(x, mu)).collect();
    let lse = log_sum_exp(&neg);
    neg.iter().map(|v| (v - lse).exp()).collect()
}

/// Rejection sampler for the density proportional to `exp(-x^4 + 6x^2 + x/2)`
/// against a `N(0, ENVELOPE_SIGMA^2)` envelope.
struct DoubleWellSampler {
    log_bound: f64,
}

const ENVELOPE_SIGMA: f64 = 2.0;

impl DoubleWellSampler {
    fn log_ratio(x: f64) -> f64 {
        -x.powi(4) + 6.0 * x * x + 0.5 * x + x * x / (2.0 * ENVELOPE_SIGMA * ENVELOPE_SIGMA)
    }

    fn new() -> Self {
        // Grid maximum on [-4, 4] plus a margin above the grid error.
        let max = (-40_000..=40_000)
            .map(|i| Self::log_ratio(i as f64 * 1e-4))
            .fold(f64::NEG_INFINITY, f64::max);
        Self { log_bound: max + 1e-3 }
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        loop {
            let x = ENVELOPE_SIGMA * rng.sample::<f64, _>(StandardNormal);
            let u: f64 = rng.gen();
            if u.ln() < Self::log_ratio(x) - self.log_bound {
                return x;
            }
        }
    }
}

/// Uniform means on `[-40, 40]^2` from a ChaCha8 stream seeded with `seed`.
pub fn gmm40_means(seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..GMM_MODES)
        .map(|_| {
            (0..2)
                .map(|_| rng.gen_range(-GMM_MEAN_RANGE..GMM_MEAN_RANGE))
                .collect()
        })
        .collect()
}

/// Normalized mixture of unit-covariance Gaussians with the given means.
pub fn gmm_with_means(means: Vec<Vec<f64>>) -> EnergyTarget {
    let dim = means.first().map_or(2, Vec::len);
    EnergyTarget {
        name: "gmm".into(),
        dim,
        domain_box: vec![(-50.0, 50.0); dim],
        normalized: true,
        kind: TargetKind::Mixture { means },
    }
}

pub fn gmm40(seed: u64) -> EnergyTarget {
    EnergyTarget { name: "gmm40".into(), ..gmm_with_means(gmm40_means(seed)) }
}

/// Energy of the 40-mode mixture at `x`.
pub fn gmm40_energy(x: &[f64], means: &[Vec<f64>]) -> f64 {
    gmm_with_means(means.to_vec()).energy(x)
}

pub fn manywell() -> EnergyTarget {
    EnergyTarget {
        name: "manywell".into(),
        dim: 8,
        domain_box: vec![(-4.0, 4.0); 8],
        normalized: false,
        kind: TargetKind::ManyWell,
    }
}

pub fn manywell_energy(x: &[f64]) -> Result<f64> {
    if x.len() != 8 {
        return Err(Error::Dimension { expected: 8, got: x.len() });
    }
    Ok(manywell().energy(x))
}

pub fn gaussian(mean: Vec<f64>, sigma: f64, normalized: bool) -> Result<EnergyTarget> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Domain(format!("gaussian sigma must be positive, got {sigma}")));
    }
    let dim = mean.len();
    let box_ = mean.iter().map(|m| (m - 8.0 * sigma, m + 8.0 * sigma)).collect();
    Ok(EnergyTarget {
        name: "gaussian".into(),
        dim,
        domain_box: box_,
        normalized,
        kind: TargetKind::Gaussian { mean, sigma },
    })
}

/// Normalized `N(0, sigma^2 I)` latent.
pub fn gaussian_latent(sigma: f64, dim: usize) -> Result<EnergyTarget> {
    if dim == 0 {
        return Err(Error::Config("latent dimension must be positive".into()));
    }
    let mut t = gaussian(vec![0.0; dim], sigma, true)?;
    t.name = "latent".into();
    Ok(t)
}

/// The 1D pair `f_0 = |x|`, `f_1 = 2 min(|x|, |x - m|)`, both unnormalized.
pub fn laplacian_pair(m: f64) -> Result<(EnergyTarget, EnergyTarget)> {
    if !(m >= 0.0 && m.is_finite()) {
        return Err(Error::Domain(format!("mode offset must be nonnegative, got {m}")));
    }
    let span = m + 40.0;
    let f0 = EnergyTarget {
        name: "laplace".into(),
        dim: 1,
        domain_box: vec![(-span, span)],
        normalized: false,
        kind: TargetKind::Laplace,
    };
    let f1 = EnergyTarget { name: "laplace_mix".into(), kind: TargetKind::LaplaceMix { m }, ..f0.clone() };
    Ok((f0, f1))
}
