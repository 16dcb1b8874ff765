//! Sample-quality metrics: importance weights and effective sample size,
//! negative log-likelihood of exact samples under the model, and the
//! energy distance between sample sets.

use ndarray::{Array2, ArrayView1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interpolations::FlowModel;
use crate::odeint::{model_log_density, sampling_span, SolverConfig, VelocityField};
use crate::targets::EnergyTarget;

/// One evaluation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub kind: String,
    pub target: String,
    pub sigma: f64,
    pub seed: u64,
    pub ess: f64,
    pub nll: Option<f64>,
    pub energy_distance: Option<f64>,
    pub n: usize,
    pub resample_rate: f64,
    /// Samples dropped because the target energy was not finite.
    pub excluded: usize,
}

impl MetricsReport {
    pub const CSV_HEADER: [&'static str; 9] =
        ["kind", "target", "sigma", "seed", "ess", "nll", "energy_distance", "n", "resample_rate"];
}

/// Log importance weights `-f_D(x_i) - logq_i`; samples whose energy is
/// not finite are dropped and counted.
pub fn log_weights(target: &EnergyTarget, x: &Array2<f64>, logq: &[f64]) -> Result<(Vec<f64>, usize)> {
    if x.nrows() != target.dim {
        return Err(Error::Dimension { expected: target.dim, got: x.nrows() });
    }
    if x.ncols() != logq.len() {
        return Err(Error::Dimension { expected: x.ncols(), got: logq.len() });
    }
    if let Some(j) = logq.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("model log-density of sample {j}")));
    }
    let energies: Vec<f64> = x
        .columns()
        .into_iter()
        .map(|c| target.energy(&c.to_vec()))
        .collect();
    let mut out = Vec::with_capacity(logq.len());
    let mut excluded = 0;
    for (e, q) in energies.iter().zip(logq) {
        if e.is_finite() {
            out.push(-e - q);
        } else {
            excluded += 1;
        }
    }
    Ok((out, excluded))
}

/// Normalized effective sample size `(sum e^w)^2 / (N sum e^{2w})`.
/// Entries equal to `-inf` are zero weights.
pub fn ess(log_weights: &[f64]) -> Result<f64> {
    if log_weights.is_empty() {
        return Err(Error::Empty("log weights"));
    }
    if log_weights.iter().any(|w| w.is_nan() || *w == f64::INFINITY) {
        return Err(Error::NonFinite("log weight".into()));
    }
    let max = log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::NonFinite("every log weight is -inf".into()));
    }
    let (s1, s2) = log_weights.iter().fold((0.0, 0.0), |(a, b), w| {
        let e = (w - max).exp();
        (a + e, b + e * e)
    });
    Ok(s1 * s1 / (log_weights.len() as f64 * s2))
}

/// `-(1/N) sum log q(x_i)` where `log q` comes from transporting `x` back
/// to the latent. Fails if more than 1% of the points do not integrate.
pub fn nll_with_field<F: VelocityField + ?Sized>(
    field: &F,
    latent_sigma: f64,
    span: (f64, f64),
    x: &Array2<f64>,
    cfg: &SolverConfig,
) -> Result<f64> {
    if x.ncols() == 0 {
        return Err(Error::Empty("samples"));
    }
    let (logq, _) = model_log_density(field, x, latent_sigma, span, cfg)?;
    let finite: Vec<f64> = logq.into_iter().filter(|v| v.is_finite()).collect();
    let failed = x.ncols() - finite.len();
    if failed as f64 > 0.01 * x.ncols() as f64 {
        return Err(Error::NonFinite(format!("{failed} of {} points failed to integrate", x.ncols())));
    }
    Ok(-finite.iter().sum::<f64>() / finite.len() as f64)
}

/// NLL of exact target samples `x` (`d x n`) under the model.
pub fn nll(model: &FlowModel, x: &Array2<f64>, cfg: &SolverConfig) -> Result<f64> {
    nll_with_field(model, model.latent_sigma, sampling_span(model.kind), x, cfg)
}

fn dist(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Sum of `|a_i - b_j|` over all pairs (or `i < j` pairs when `within`),
/// parallel over rows and reduced in a fixed order.
fn pair_sum(a: &Array2<f64>, b: &Array2<f64>, within: bool) -> f64 {
    let rows: Vec<f64> = (0..a.ncols())
        .into_par_iter()
        .map(|i| {
            let ai = a.column(i);
            let start = if within { i + 1 } else { 0 };
            (start..b.ncols()).map(|j| dist(ai, b.column(j))).sum()
        })
        .collect();
    rows.iter().sum()
}

/// Order-independent choice of which set drives the cross sum.
fn canonical<'a>(x: &'a Array2<f64>, y: &'a Array2<f64>) -> (&'a Array2<f64>, &'a Array2<f64>) {
    let key = |a: &Array2<f64>| (a.ncols(), a.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    if key(x) <= key(y) {
        (x, y)
    } else {
        (y, x)
    }
}

fn check_sets(x: &Array2<f64>, y: &Array2<f64>) -> Result<()> {
    if x.nrows() != y.nrows() {
        return Err(Error::Dimension { expected: x.nrows(), got: y.nrows() });
    }
    if x.ncols() == 0 || y.ncols() == 0 {
        return Err(Error::Empty("sample set"));
    }
    Ok(())
}

/// Unbiased energy distance `2E|X-Y| - E|X-X'| - E|Y-Y'|` between the
/// columns of `x` and `y`. Within-set terms of singleton sets are zero.
pub fn energy_distance(x: &Array2<f64>, y: &Array2<f64>) -> Result<f64> {
    check_sets(x, y)?;
    let (a, b) = canonical(x, y);
    let cross = 2.0 * pair_sum(a, b, false) / (a.ncols() as f64 * b.ncols() as f64);
    let within = |s: &Array2<f64>| {
        let n = s.ncols() as f64;
        if s.ncols() < 2 {
            0.0
        } else {
            2.0 * pair_sum(s, s, true) / (n * (n - 1.0))
        }
    };
    Ok(cross - (within(x) + within(y)))
}

/// Biased (V-statistic) energy distance; zero for identical sets.
pub fn energy_distance_v(x: &Array2<f64>, y: &Array2<f64>) -> Result<f64> {
    check_sets(x, y)?;
    let (a, b) = canonical(x, y);
    let cross = 2.0 * pair_sum(a, b, false) / (a.ncols() as f64 * b.ncols() as f64);
    let within = |s: &Array2<f64>| 2.0 * pair_sum(s, s, true) / (s.ncols() as f64).powi(2);
    Ok(cross - (within(x) + within(y)))
}

/// Arithmetic mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 { values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var.sqrt())
}
