//! Particle transport along velocity fields.
//!
//! A batch of particles is held as a `d x n` matrix. Dormand-Prince 4(5)
//! advances a whole chunk with one shared step size, using the RMS of the
//! scaled embedded error over every particle (and its log-determinant) for
//! step acceptance. Chunks are independent and run in parallel.

use ndarray::{s, Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interpolations::{FlowModel, Kind};

/// A time-dependent velocity field evaluated on particle batches.
pub trait VelocityField: Sync {
    fn dim(&self) -> usize;

    /// Velocities (`d x n`) at `(t, x)` and, when `with_div`, the divergence
    /// at each column.
    fn eval(&self, t: f64, x: &Array2<f64>, with_div: bool) -> Result<(Array2<f64>, Vec<f64>)>;
}

impl VelocityField for FlowModel {
    fn dim(&self) -> usize {
        FlowModel::dim(self)
    }

    fn eval(&self, t: f64, x: &Array2<f64>, with_div: bool) -> Result<(Array2<f64>, Vec<f64>)> {
        self.velocity_batch(t, x, with_div)
    }
}

/// Pointwise field from closures: `v(t, x, out)` and `div(t, x)`.
pub struct FnField<V, D> {
    pub dim: usize,
    pub v: V,
    pub div: D,
}

impl<V, D> VelocityField for FnField<V, D>
where
    V: Fn(f64, &[f64], &mut [f64]) + Sync,
    D: Fn(f64, &[f64]) -> f64 + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, t: f64, x: &Array2<f64>, with_div: bool) -> Result<(Array2<f64>, Vec<f64>)> {
        let (d, n) = x.dim();
        let mut out = Array2::zeros((d, n));
        let mut div = Vec::with_capacity(if with_div { n } else { 0 });
        let mut buf = vec![0.0; d];
        for j in 0..n {
            let p = x.column(j).to_vec();
            (self.v)(t, &p, &mut buf);
            out.column_mut(j).assign(&ndarray::ArrayView1::from(&buf[..]));
            if with_div {
                div.push((self.div)(t, &p));
            }
        }
        Ok((out, div))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolverMethod {
    Dopri5,
    Euler,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NanPolicy {
    Error,
    Resample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub method: SolverMethod,
    pub rtol: f64,
    pub atol: f64,
    pub max_steps: usize,
    pub euler_steps: usize,
    pub nan_policy: NanPolicy,
    /// Particles integrated together with one shared step size.
    pub chunk: usize,
    /// Largest tolerated fraction of resampled particles.
    pub max_resample_rate: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            method: SolverMethod::Dopri5,
            rtol: 1e-5,
            atol: 1e-5,
            max_steps: 100_000,
            euler_steps: 200,
            nan_policy: NanPolicy::Error,
            chunk: 512,
            max_resample_rate: 0.1,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rtol > 0.0 && self.atol > 0.0) {
            return Err(Error::Config("rtol and atol must be positive".into()));
        }
        if self.euler_steps == 0 || self.max_steps == 0 || self.chunk == 0 {
            return Err(Error::Config("euler_steps, max_steps and chunk must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.max_resample_rate) {
            return Err(Error::Config("max_resample_rate must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn with_tol(mut self, tol: f64) -> Self {
        self.rtol = tol;
        self.atol = tol;
        self
    }
}

/// Particle positions (`d x n`) and accumulated `int div v dt` per particle.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedState {
    pub x: Array2<f64>,
    pub logdet: Vec<f64>,
}

impl AugmentedState {
    pub fn new(x: Array2<f64>) -> Self {
        let n = x.ncols();
        Self { x, logdet: vec![0.0; n] }
    }

    pub fn len(&self) -> usize {
        self.x.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.x.ncols() == 0
    }
}

// Dormand-Prince 5(4) tableau.
const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const B5: [f64; 7] = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0];
const E: [f64; 7] = [
    35.0 / 384.0 - 5179.0 / 57600.0,
    0.0,
    500.0 / 1113.0 - 7571.0 / 16695.0,
    125.0 / 192.0 - 393.0 / 640.0,
    -2187.0 / 6784.0 + 92097.0 / 339200.0,
    11.0 / 84.0 - 187.0 / 2100.0,
    -1.0 / 40.0,
];

const SAFETY: f64 = 0.9;
const MIN_FACTOR: f64 = 0.2;
const MAX_FACTOR: f64 = 10.0;
const PI_BETA: f64 = 0.04;
const PI_ALPHA: f64 = 0.2 - 0.75 * PI_BETA;

/// Augmented state flattened: `d` position rows plus an optional logdet row.
struct Ode<'a, F: VelocityField + ?Sized> {
    field: &'a F,
    d: usize,
    with_div: bool,
}

impl<F: VelocityField + ?Sized> Ode<'_, F> {
    fn rhs(&self, t: f64, y: &Array2<f64>) -> Result<Array2<f64>> {
        let x = y.slice(s![..self.d, ..]).to_owned();
        let (v, div) = self.field.eval(t, &x, self.with_div)?;
        if !self.with_div {
            return Ok(v);
        }
        let mut out = Array2::zeros(y.dim());
        out.slice_mut(s![..self.d, ..]).assign(&v);
        out.row_mut(self.d).assign(&ndarray::ArrayView1::from(&div[..]));
        Ok(out)
    }
}

fn rms_scaled(v: &Array2<f64>, y0: &Array2<f64>, y1: Option<&Array2<f64>>, rtol: f64, atol: f64) -> f64 {
    let mut acc = 0.0;
    for ((idx, &e), &a) in v.indexed_iter().zip(y0.iter()) {
        let b = y1.map_or(a.abs(), |y1| y1[idx].abs().max(a.abs()));
        let sc = atol + rtol * b.max(a.abs());
        acc += (e / sc).powi(2);
    }
    (acc / v.len().max(1) as f64).sqrt()
}

fn all_finite(a: &Array2<f64>) -> bool {
    a.iter().all(|v| v.is_finite())
}

fn initial_step<F: VelocityField + ?Sized>(
    ode: &Ode<'_, F>,
    t0: f64,
    y0: &Array2<f64>,
    f0: &Array2<f64>,
    dir: f64,
    cfg: &SolverConfig,
) -> Result<f64> {
    let d0 = rms_scaled(y0, y0, None, cfg.rtol, cfg.atol);
    let d1 = rms_scaled(f0, y0, None, cfg.rtol, cfg.atol);
    let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    let y1 = y0 + &(f0 * (dir * h0));
    let f1 = ode.rhs(t0 + dir * h0, &y1)?;
    let d2 = rms_scaled(&(&f1 - f0), y0, None, cfg.rtol, cfg.atol) / h0;
    let h1 = if d1.max(d2) <= 1e-15 { (h0 * 1e-3).max(1e-6) } else { (0.01 / d1.max(d2)).powf(0.2) };
    Ok((100.0 * h0).min(h1))
}

/// One Dormand-Prince step of signed size `hs`: the fifth-order update,
/// the embedded error estimate and the final stage (reused as the next
/// first stage). `None` when a stage is non-finite.
fn dp_step<F: VelocityField + ?Sized>(
    ode: &Ode<'_, F>,
    t: f64,
    y: &Array2<f64>,
    k1: &Array2<f64>,
    hs: f64,
) -> Result<Option<(Array2<f64>, Array2<f64>, Array2<f64>)>> {
    let mut k: Vec<Array2<f64>> = Vec::with_capacity(7);
    k.push(k1.clone());
    for i in 1..7 {
        let mut yi = y.clone();
        for (j, kj) in k.iter().enumerate() {
            if A[i][j] != 0.0 {
                yi.scaled_add(hs * A[i][j], kj);
            }
        }
        let ki = ode.rhs(t + C[i] * hs, &yi)?;
        if !all_finite(&ki) {
            return Ok(None);
        }
        k.push(ki);
    }
    let mut y_new = y.clone();
    for (b, ki) in B5.iter().zip(&k) {
        if *b != 0.0 {
            y_new.scaled_add(hs * b, ki);
        }
    }
    let mut err = Array2::zeros(y.dim());
    for (e, ki) in E.iter().zip(&k) {
        err.scaled_add(hs * e, ki);
    }
    let k7 = k.pop().expect("seven stages");
    Ok(Some((y_new, err, k7)))
}

fn dopri5<F: VelocityField + ?Sized>(ode: &Ode<'_, F>, mut y: Array2<f64>, t0: f64, t1: f64, cfg: &SolverConfig) -> Result<Array2<f64>> {
    let span = t1 - t0;
    if span == 0.0 || y.ncols() == 0 {
        return Ok(y);
    }
    let dir = span.signum();
    let mut t = t0;
    let mut k1 = ode.rhs(t, &y)?;
    if !all_finite(&k1) {
        return Err(Error::NonFinite(format!("velocity at t = {t}")));
    }
    let mut h = initial_step(ode, t, &y, &k1, dir, cfg)?.min(span.abs());
    let mut prev_err: f64 = 1e-4;
    let mut steps = 0usize;
    loop {
        if (t1 - t) * dir <= 0.0 {
            return Ok(y);
        }
        if steps >= cfg.max_steps {
            return Err(Error::MaxSteps(cfg.max_steps));
        }
        steps += 1;
        let last = (t1 - t).abs() <= h * (1.0 + 1e-12);
        let hs = if last { t1 - t } else { dir * h };

        let Some((y_new, err, k7)) = dp_step(ode, t, &y, &k1, hs)? else {
            h *= MIN_FACTOR;
            if h < 1e-14 * span.abs().max(1.0) {
                return Err(Error::NonFinite(format!("step size underflow near t = {t}")));
            }
            continue;
        };
        let err_norm = rms_scaled(&err, &y, Some(&y_new), cfg.rtol, cfg.atol);
        if !err_norm.is_finite() {
            h *= MIN_FACTOR;
            continue;
        }
        if err_norm <= 1.0 {
            t = if last { t1 } else { t + hs };
            y = y_new;
            k1 = k7;
            let factor = if err_norm == 0.0 {
                MAX_FACTOR
            } else {
                (SAFETY * err_norm.powf(-PI_ALPHA) * prev_err.powf(PI_BETA)).clamp(MIN_FACTOR, MAX_FACTOR)
            };
            prev_err = err_norm.max(1e-4);
            h = (h * factor).min((t1 - t).abs().max(f64::MIN_POSITIVE));
            if last {
                return Ok(y);
            }
        } else {
            let factor = (SAFETY * err_norm.powf(-PI_ALPHA)).clamp(MIN_FACTOR, 1.0);
            h *= factor;
        }
    }
}

fn euler<F: VelocityField + ?Sized>(ode: &Ode<'_, F>, mut y: Array2<f64>, t0: f64, t1: f64, steps: usize) -> Result<Array2<f64>> {
    let h = (t1 - t0) / steps as f64;
    for i in 0..steps {
        let t = t0 + i as f64 * h;
        let f = ode.rhs(t, &y)?;
        y.scaled_add(h, &f);
    }
    Ok(y)
}

fn chunks(n: usize, size: usize) -> Vec<std::ops::Range<usize>> {
    (0..n).step_by(size.max(1)).map(|a| a..(a + size).min(n)).collect()
}

fn run<F: VelocityField + ?Sized>(
    field: &F,
    x0: &Array2<f64>,
    t0: f64,
    t1: f64,
    cfg: &SolverConfig,
    with_div: bool,
) -> Result<AugmentedState> {
    cfg.validate()?;
    let d = field.dim();
    if x0.nrows() != d {
        return Err(Error::Dimension { expected: d, got: x0.nrows() });
    }
    let n = x0.ncols();
    let ode = Ode { field, d, with_div };
    let parts: Result<Vec<Array2<f64>>> = chunks(n, cfg.chunk)
        .into_par_iter()
        .map(|r| {
            let rows = if with_div { d + 1 } else { d };
            let mut y = Array2::zeros((rows, r.len()));
            y.slice_mut(s![..d, ..]).assign(&x0.slice(s![.., r]));
            match cfg.method {
                SolverMethod::Dopri5 => dopri5(&ode, y, t0, t1, cfg),
                SolverMethod::Euler => euler(&ode, y, t0, t1, cfg.euler_steps),
            }
        })
        .collect();
    let parts = parts?;
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    let y = if views.is_empty() {
        Array2::zeros((if with_div { d + 1 } else { d }, 0))
    } else {
        ndarray::concatenate(Axis(1), &views).expect("chunks share row count")
    };
    let x = y.slice(s![..d, ..]).to_owned();
    let logdet = if with_div { y.row(d).to_vec() } else { vec![0.0; n] };
    if cfg.nan_policy == NanPolicy::Error && (!all_finite(&x) || logdet.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite(format!("non-finite particle state at t = {t1}")));
    }
    Ok(AugmentedState { x, logdet })
}

/// Transport `x0` (`d x n`) from `t0` to `t1`.
pub fn integrate<F: VelocityField + ?Sized>(field: &F, x0: &Array2<f64>, t0: f64, t1: f64, cfg: &SolverConfig) -> Result<Array2<f64>> {
    Ok(run(field, x0, t0, t1, cfg, false)?.x)
}

/// Transport `x0` jointly with `logdet = int_{t0}^{t1} div v dt`, so that
/// `log rho_{t1}(x(t1)) = log rho_{t0}(x0) - logdet`.
pub fn integrate_with_logdet<F: VelocityField + ?Sized>(
    field: &F,
    x0: &Array2<f64>,
    t0: f64,
    t1: f64,
    cfg: &SolverConfig,
) -> Result<AugmentedState> {
    run(field, x0, t0, t1, cfg, true)
}

/// Start and end times of the sampling direction for a model kind.
pub fn sampling_span(kind: Kind) -> (f64, f64) {
    match kind {
        Kind::Gradflow => (1.0, 0.0),
        Kind::Linear | Kind::Learned => (0.0, 1.0),
    }
}

/// Generated samples with their model log-density.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch {
    /// Latent draws the samples were transported from (`d x n`).
    pub z: Array2<f64>,
    /// Samples (`d x n`).
    pub x: Array2<f64>,
    pub logq: Vec<f64>,
    /// Particles redrawn because their trajectory went non-finite.
    pub resampled: usize,
}

impl SampleBatch {
    pub fn resample_rate(&self) -> f64 {
        let total = self.x.ncols() + self.resampled;
        if total == 0 {
            0.0
        } else {
            self.resampled as f64 / total as f64
        }
    }
}

/// Latent log-density `-|z|^2/(2 s^2) - d/2 log(2 pi s^2)` per column.
pub fn latent_log_density(z: &Array2<f64>, sigma: f64) -> Vec<f64> {
    let d = z.nrows() as f64;
    let norm = 0.5 * d * (2.0 * std::f64::consts::PI * sigma * sigma).ln();
    z.columns()
        .into_iter()
        .map(|c| -c.dot(&c) / (2.0 * sigma * sigma) - norm)
        .collect()
}

/// Draw `n` latent particles `N(0, sigma^2 I)` as a `d x n` matrix.
pub fn draw_latent<R: Rng + ?Sized>(rng: &mut R, d: usize, n: usize, sigma: f64) -> Array2<f64> {
    // column-major draw order: particle by particle
    let mut z = Array2::zeros((d, n));
    for j in 0..n {
        for i in 0..d {
            let e: f64 = rng.sample(StandardNormal);
            z[[i, j]] = sigma * e;
        }
    }
    z
}

fn column_finite(x: &Array2<f64>, logdet: &[f64], j: usize) -> bool {
    logdet[j].is_finite() && x.column(j).iter().all(|v| v.is_finite())
}

/// Transport latent draws `z` through a field in the sampling direction
/// `(t0 -> t1)`; with `NanPolicy::Resample`, failed particles are redrawn
/// until every particle is finite or the resample budget is exhausted.
pub fn push_latent<F: VelocityField + ?Sized, R: Rng + ?Sized>(
    field: &F,
    z: Array2<f64>,
    latent_sigma: f64,
    span: (f64, f64),
    cfg: &SolverConfig,
    rng: &mut R,
) -> Result<SampleBatch> {
    let (t0, t1) = span;
    let n = z.ncols();
    let d = z.nrows();
    let resample = cfg.nan_policy == NanPolicy::Resample;
    let mut z = z;
    let mut state = integrate_with_logdet(field, &z, t0, t1, cfg)?;
    let mut resampled = 0usize;
    loop {
        let bad: Vec<usize> = (0..n).filter(|&j| !column_finite(&state.x, &state.logdet, j)).collect();
        if bad.is_empty() {
            break;
        }
        if !resample {
            return Err(Error::NonFinite(format!("{} particles", bad.len())));
        }
        resampled += bad.len();
        let rate = resampled as f64 / (n + resampled) as f64;
        if rate > cfg.max_resample_rate {
            return Err(Error::ResampleRate { rate, limit: cfg.max_resample_rate });
        }
        let fresh = draw_latent(rng, d, bad.len(), latent_sigma);
        let redo = integrate_with_logdet(field, &fresh, t0, t1, cfg)?;
        for (k, &j) in bad.iter().enumerate() {
            z.column_mut(j).assign(&fresh.column(k));
            state.x.column_mut(j).assign(&redo.x.column(k));
            state.logdet[j] = redo.logdet[k];
        }
    }
    let logq = latent_log_density(&z, latent_sigma)
        .into_iter()
        .zip(&state.logdet)
        .map(|(l, ld)| l - ld)
        .collect();
    Ok(SampleBatch { z, x: state.x, logq, resampled })
}

/// Samples and model log-densities from latent draws `z` (`d x n`):
/// gradflow integrates from `t = 1` down to `0`, linear and learned from
/// `0` to `1`.
pub fn sample_backward<R: Rng + ?Sized>(model: &FlowModel, z: Array2<f64>, cfg: &SolverConfig, rng: &mut R) -> Result<SampleBatch> {
    push_latent(model, z, model.latent_sigma, sampling_span(model.kind), cfg, rng)
}

/// Fixed-step Euler sampling of `n` fresh latent particles with
/// per-particle NaN resampling.
pub fn euler_with_nan_resample<F: VelocityField + ?Sized, R: Rng + ?Sized>(
    field: &F,
    n: usize,
    latent_sigma: f64,
    span: (f64, f64),
    cfg: &SolverConfig,
    rng: &mut R,
) -> Result<SampleBatch> {
    let cfg = SolverConfig { method: SolverMethod::Euler, nan_policy: NanPolicy::Resample, ..cfg.clone() };
    let z = draw_latent(rng, field.dim(), n, latent_sigma);
    push_latent(field, z, latent_sigma, span, &cfg, rng)
}

/// Model log-density at data points `x` (`d x n`), by transporting them to
/// the latent against the sampling direction. Returns the log-densities and
/// the latent images.
pub fn model_log_density<F: VelocityField + ?Sized>(
    field: &F,
    x: &Array2<f64>,
    latent_sigma: f64,
    span: (f64, f64),
    cfg: &SolverConfig,
) -> Result<(Vec<f64>, Array2<f64>)> {
    let (t0, t1) = span;
    let cfg = SolverConfig { nan_policy: NanPolicy::Resample, ..cfg.clone() };
    let state = integrate_with_logdet(field, x, t1, t0, &cfg)?;
    // the reversed run accumulates -int_{t0}^{t1} div v
    let logq = latent_log_density(&state.x, latent_sigma)
        .into_iter()
        .zip(&state.logdet)
        .map(|(l, ld)| l + ld)
        .collect();
    Ok((logq, state.x))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn decay(dim: usize) -> FnField<impl Fn(f64, &[f64], &mut [f64]) + Sync, impl Fn(f64, &[f64]) -> f64 + Sync> {
        FnField {
            dim,
            v: |_t: f64, x: &[f64], out: &mut [f64]| {
                for (o, x) in out.iter_mut().zip(x) {
                    *o = -x;
                }
            },
            div: move |_t: f64, _x: &[f64]| -(dim as f64),
        }
    }

    fn tight(tol: f64) -> SolverConfig {
        SolverConfig::default().with_tol(tol)
    }

    fn col(v: &[f64]) -> Array2<f64> {
        Array2::from_shape_vec((v.len(), 1), v.to_vec()).unwrap()
    }

    #[test]
    fn zero_field_is_identity() {
        let f = FnField { dim: 2, v: |_: f64, _: &[f64], o: &mut [f64]| o.fill(0.0), div: |_: f64, _: &[f64]| 0.0 };
        let x0 = col(&[1.5, -2.0]);
        let s = integrate_with_logdet(&f, &x0, 0.0, 1.0, &SolverConfig::default()).unwrap();
        assert_eq!(s.x, x0);
        assert_eq!(s.logdet, vec![0.0]);
    }

    #[test]
    fn constant_field_is_exact() {
        let f = FnField { dim: 1, v: |_: f64, _: &[f64], o: &mut [f64]| o[0] = 1.0, div: |_: f64, _: &[f64]| 0.0 };
        let x = integrate(&f, &col(&[0.25]), 0.3, 0.9, &SolverConfig::default()).unwrap();
        assert_relative_eq!(x[[0, 0]], 0.25 + 0.6, epsilon = 1e-14);
        let x = integrate(&f, &col(&[0.25]), 0.9, 0.3, &SolverConfig::default()).unwrap();
        assert_relative_eq!(x[[0, 0]], 0.25 - 0.6, epsilon = 1e-14);
    }

    #[test]
    fn exponential_decay_at_tight_tolerance() {
        let x = integrate(&decay(1), &col(&[1.0]), 0.0, 1.0, &tight(1e-8)).unwrap();
        assert!((x[[0, 0]] - (-1.0f64).exp()).abs() < 1e-7);
    }

    #[test]
    fn logdet_of_contraction_is_minus_dimension() {
        for d in [1, 3, 5] {
            let x0 = Array2::from_shape_fn((d, 4), |(i, j)| (i as f64 + 1.0) * (j as f64 - 1.5));
            let s = integrate_with_logdet(&decay(d), &x0, 0.0, 1.0, &tight(1e-8)).unwrap();
            for ld in s.logdet {
                assert!((ld + d as f64).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn logdet_of_linear_system_is_trace() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a: Vec<f64> = (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let trace = a[0] + a[4] + a[8];
        let f = FnField {
            dim: 3,
            v: |_: f64, x: &[f64], o: &mut [f64]| {
                for i in 0..3 {
                    o[i] = (0..3).map(|j| a[3 * i + j] * x[j]).sum();
                }
            },
            div: |_: f64, _: &[f64]| trace,
        };
        let s = integrate_with_logdet(&f, &col(&[0.3, -0.7, 1.1]), 0.2, 0.9, &tight(1e-9)).unwrap();
        assert!((s.logdet[0] - 0.7 * trace).abs() < 1e-7);
    }

    #[test]
    fn observed_order_at_least_four() {
        let f = decay(1);
        let ode = Ode { field: &f, d: 1, with_div: false };
        let exact = (-1.0f64).exp();
        let errs: Vec<f64> = [8usize, 16, 32]
            .iter()
            .map(|&n| {
                let h = 1.0 / n as f64;
                let mut y = col(&[1.0]);
                for i in 0..n {
                    let k1 = ode.rhs(i as f64 * h, &y).unwrap();
                    y = dp_step(&ode, i as f64 * h, &y, &k1, h).unwrap().unwrap().0;
                }
                (y[[0, 0]] - exact).abs()
            })
            .collect();
        for w in errs.windows(2) {
            assert!((w[0] / w[1]).log2() >= 4.0, "{errs:?}");
        }
    }

    #[test]
    fn round_trip_returns_to_start() {
        let f = FnField {
            dim: 2,
            v: |t: f64, x: &[f64], o: &mut [f64]| {
                o[0] = (x[1] + t).sin() - 0.3 * x[0];
                o[1] = (x[0] * 0.5).cos() * (1.0 + t);
            },
            div: |_t: f64, x: &[f64]| -0.3 + 0.0 * x[0],
        };
        let x0 = Array2::from_shape_fn((2, 5), |(i, j)| (i as f64 - 0.5) * j as f64);
        let cfg = tight(1e-8);
        let fwd = integrate_with_logdet(&f, &x0, 0.0, 1.0, &cfg).unwrap();
        let back = integrate_with_logdet(&f, &fwd.x, 1.0, 0.0, &cfg).unwrap();
        for (a, b) in back.x.iter().zip(x0.iter()) {
            assert!((a - b).abs() < 1e-5);
        }
        for (a, b) in fwd.logdet.iter().zip(&back.logdet) {
            assert!((a + b).abs() < 1e-6);
        }
    }

    #[test]
    fn max_steps_is_reported() {
        let cfg = SolverConfig { max_steps: 3, ..tight(1e-12) };
        assert!(matches!(integrate(&decay(1), &col(&[1.0]), 0.0, 10.0, &cfg), Err(Error::MaxSteps(3))));
    }

    #[test]
    fn nan_field_errors_under_error_policy() {
        let f = FnField { dim: 1, v: |_: f64, _: &[f64], o: &mut [f64]| o[0] = f64::NAN, div: |_: f64, _: &[f64]| 0.0 };
        assert!(integrate(&f, &col(&[0.0]), 0.0, 1.0, &SolverConfig::default()).is_err());
        let euler = SolverConfig { method: SolverMethod::Euler, ..Default::default() };
        assert!(integrate(&f, &col(&[0.0]), 0.0, 1.0, &euler).is_err());
    }

    #[test]
    fn euler_resamples_only_faulty_particles() {
        let k = 2.0;
        let f = FnField {
            dim: 1,
            v: move |_: f64, x: &[f64], o: &mut [f64]| o[0] = if x[0] > k { f64::NAN } else { 0.0 },
            div: |_: f64, _: &[f64]| 0.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let out = euler_with_nan_resample(&f, 2000, 1.0, (0.0, 1.0), &SolverConfig::default(), &mut rng).unwrap();
        assert!(out.resampled > 0);
        assert!(out.x.iter().all(|v| v.is_finite() && *v <= k));
        assert_eq!(out.x, out.z);
        assert!(out.resample_rate() < 0.1);
    }

    #[test]
    fn benign_field_has_zero_resample_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let out = euler_with_nan_resample(&decay(2), 100, 1.0, (1.0, 0.0), &SolverConfig::default(), &mut rng).unwrap();
        assert_eq!(out.resampled, 0);
        assert_eq!(out.resample_rate(), 0.0);
    }

    #[test]
    fn excessive_resampling_aborts() {
        let f = FnField {
            dim: 1,
            v: |_: f64, x: &[f64], o: &mut [f64]| o[0] = if x[0] > 0.0 { f64::NAN } else { 0.0 },
            div: |_: f64, _: &[f64]| 0.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let err = euler_with_nan_resample(&f, 500, 1.0, (0.0, 1.0), &SolverConfig::default(), &mut rng).unwrap_err();
        assert!(matches!(err, Error::ResampleRate { .. }));
    }

    #[test]
    fn chunking_does_not_change_results() {
        let x0 = Array2::from_shape_fn((2, 37), |(i, j)| (i as f64 + 1.0) * (j as f64 * 0.1 - 1.0));
        let f = decay(2);
        let a = integrate_with_logdet(&f, &x0, 0.0, 1.0, &SolverConfig { chunk: 37, method: SolverMethod::Euler, ..Default::default() })
            .unwrap();
        let b = integrate_with_logdet(&f, &x0, 0.0, 1.0, &SolverConfig { chunk: 5, method: SolverMethod::Euler, ..Default::default() })
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn latent_log_density_values() {
        let z = col(&[0.0, 0.0]);
        assert_relative_eq!(latent_log_density(&z, 1.0)[0], -(2.0 * std::f64::consts::PI).ln(), epsilon = 1e-14);
        let z = col(&[2.0]);
        assert_relative_eq!(
            latent_log_density(&z, 2.0)[0],
            -0.5 - 0.5 * (8.0 * std::f64::consts::PI).ln(),
            epsilon = 1e-14
        );
    }

    #[test]
    fn pushforward_density_of_linear_map() {
        // dx/dt = a x scales by e^{a}; density of N(0,1) pushed forward is N(0, e^{2a}).
        let a = 0.4;
        let f = FnField { dim: 1, v: move |_: f64, x: &[f64], o: &mut [f64]| o[0] = a * x[0], div: move |_: f64, _: &[f64]| a };
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let z = draw_latent(&mut rng, 1, 20, 1.0);
        let out = push_latent(&f, z, 1.0, (0.0, 1.0), &tight(1e-9), &mut rng).unwrap();
        let s = a.exp();
        for (x, lq) in out.x.iter().zip(&out.logq) {
            let exact = -x * x / (2.0 * s * s) - 0.5 * (2.0 * std::f64::consts::PI * s * s).ln();
            assert!((lq - exact).abs() < 1e-7);
        }
        let (back, latent) = model_log_density(&f, &out.x, 1.0, (0.0, 1.0), &tight(1e-9)).unwrap();
        for (a, b) in back.iter().zip(&out.logq) {
            assert!((a - b).abs() < 1e-7);
        }
        for (a, b) in latent.iter().zip(out.z.iter()) {
            assert!((a - b).abs() < 1e-7);
        }
    }
}
