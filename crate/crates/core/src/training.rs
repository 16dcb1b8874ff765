//! Collocation, optimization and checkpoints.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffengine::Mlp;
use crate::error::{Error, Result};
use crate::interpolations::{Architecture, Collocation, FlowModel, Kind, VpSchedule, TIME_EPS};
use crate::odeint::{draw_latent, integrate, sampling_span, SolverConfig, VelocityField};
use crate::targets::{EnergyTarget, TargetSpec};

/// Where collocation points come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CollocationMode {
    /// States of latent particles transported by the frozen current model.
    Trajectory,
    /// Closed-form OU interpolant between uniform box points and the latent.
    UniformOu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub kind: Kind,
    pub iterations: usize,
    /// Particles per trajectory batch.
    pub batch_size: usize,
    /// Equispaced times on `[0, 1]` at which trajectory states are kept.
    pub time_steps: usize,
    /// Points per uniform-OU batch.
    pub particles: usize,
    pub learning_rate: f64,
    pub final_learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Iterations between trajectory re-simulations.
    pub refresh_interval: usize,
    /// Defaults to uniform-OU for gradflow and trajectories otherwise.
    pub collocation: Option<CollocationMode>,
    pub use_c: bool,
    pub latent_sigma: f64,
    pub architecture: Architecture,
    pub schedule: VpSchedule,
    /// Collocation points per tape evaluation.
    pub chunk: usize,
    /// Solver used to simulate collocation trajectories.
    pub solver: SolverConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            kind: Kind::Gradflow,
            iterations: 50_000,
            batch_size: 256,
            time_steps: 50,
            particles: 4096,
            learning_rate: 1e-3,
            final_learning_rate: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            refresh_interval: 1,
            collocation: None,
            use_c: true,
            latent_sigma: 1.0,
            architecture: Architecture::default(),
            schedule: VpSchedule::default(),
            chunk: 512,
            solver: SolverConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("iterations", self.iterations),
            ("batch_size", self.batch_size),
            ("particles", self.particles),
            ("refresh_interval", self.refresh_interval),
            ("chunk", self.chunk),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.time_steps < 2 {
            return Err(Error::Config("time_steps must be at least 2".into()));
        }
        if !(self.learning_rate > 0.0 && self.final_learning_rate > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(self.latent_sigma > 0.0) {
            return Err(Error::Config("latent_sigma must be positive".into()));
        }
        self.solver.validate()
    }

    pub fn collocation_mode(&self) -> CollocationMode {
        self.collocation.unwrap_or(match self.kind {
            Kind::Gradflow => CollocationMode::UniformOu,
            Kind::Linear | Kind::Learned => CollocationMode::Trajectory,
        })
    }

    /// Cosine decay from `learning_rate` to `final_learning_rate`.
    pub fn learning_rate_at(&self, iteration: usize) -> f64 {
        let frac = if self.iterations <= 1 { 0.0 } else { iteration as f64 / (self.iterations - 1) as f64 };
        self.final_learning_rate
            + 0.5 * (self.learning_rate - self.final_learning_rate) * (1.0 + (std::f64::consts::PI * frac).cos())
    }
}

/// Adam moments for one flat parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(n: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], step: 0, beta1, beta2, eps }
    }

    pub fn update(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

/// Result of [`train`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: FlowModel,
    /// Loss per iteration (NaN where the loss was not finite).
    pub losses: Vec<f64>,
}

/// The equispaced grid `{0, 1/(k-1), ..., 1}`.
pub fn time_grid(k: usize) -> Vec<f64> {
    (0..k).map(|i| i as f64 / (k - 1) as f64).collect()
}

/// States of `n` latent particles transported by `model_prev` on the
/// `time_steps` grid, one batch per time slice (in grid order).
pub fn collocation_trajectory<F: VelocityField + ?Sized, R: Rng + ?Sized>(
    model_prev: &F,
    kind: Kind,
    latent_sigma: f64,
    n: usize,
    time_steps: usize,
    cfg: &SolverConfig,
    rng: &mut R,
) -> Result<Vec<Collocation>> {
    if time_steps < 2 {
        return Err(Error::Config("time_steps must be at least 2".into()));
    }
    let grid = time_grid(time_steps);
    let (t0, _) = sampling_span(kind);
    let mut order: Vec<usize> = (0..time_steps).collect();
    if t0 > 0.5 {
        order.reverse();
    }
    let mut x = draw_latent(rng, model_prev.dim(), n, latent_sigma);
    let mut slices: Vec<Option<Collocation>> = vec![None; time_steps];
    let mut t_prev = grid[order[0]];
    for &k in &order {
        let t = grid[k];
        if t != t_prev {
            x = integrate(model_prev, &x, t_prev, t, cfg)?;
            t_prev = t;
        }
        slices[k] = Some(Collocation::new(vec![t; n], x.clone())?);
    }
    Ok(slices.into_iter().map(|s| s.expect("every slice visited")).collect())
}

/// `n` points `(t, ou_interpolant(t, z, u))` with `t ~ U[eps, 1 - eps]`,
/// `u` uniform on `domain_box` and `z ~ N(0, I)`.
pub fn collocation_uniform_ou<R: Rng + ?Sized>(
    domain_box: &[(f64, f64)],
    n: usize,
    schedule: &VpSchedule,
    rng: &mut R,
) -> Result<Collocation> {
    let d = domain_box.len();
    if let Some((lo, hi)) = domain_box.iter().find(|(lo, hi)| !(lo.is_finite() && hi.is_finite() && lo < hi)) {
        return Err(Error::Domain(format!("domain box side [{lo}, {hi}] is not a finite interval")));
    }
    let mut t = Vec::with_capacity(n);
    let mut x = Array2::zeros((d, n));
    let mut u = vec![0.0; d];
    let mut z = vec![0.0; d];
    for j in 0..n {
        let tj = rng.gen_range(TIME_EPS..1.0 - TIME_EPS);
        for (i, &(lo, hi)) in domain_box.iter().enumerate() {
            u[i] = rng.gen_range(lo..hi);
        }
        for zi in z.iter_mut() {
            *zi = rng.sample(StandardNormal);
        }
        let p = schedule.ou_interpolant(tj, &z, &u)?;
        x.column_mut(j).assign(&ndarray::ArrayView1::from(&p[..]));
        t.push(tj);
    }
    Collocation::new(t, x)
}

/// Mean squared residual over `batches` (weighted by size) and its
/// gradient, evaluated in chunks of `chunk` points. The reduction order is
/// fixed, so results do not depend on the thread count.
pub fn batch_loss(model: &FlowModel, batches: &[Collocation], chunk: usize) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut jobs = Vec::new();
    for b in batches {
        let mut start = 0;
        while start < b.len() {
            let end = (start + chunk).min(b.len());
            jobs.push(b.slice(start..end));
            start = end;
        }
    }
    let total: usize = jobs.iter().map(Collocation::len).sum();
    if total == 0 {
        return Err(Error::Empty("collocation batch"));
    }
    let parts: Vec<Result<(f64, Vec<Vec<f64>>)>> = jobs.par_iter().map(|j| model.loss_and_grad(j)).collect();
    let mut loss = 0.0;
    let mut grad: Vec<Vec<f64>> = model.nets().iter().map(|n| vec![0.0; n.params().len()]).collect();
    for (job, part) in jobs.iter().zip(parts) {
        let (l, g) = part?;
        let w = job.len() as f64 / total as f64;
        loss += w * l;
        for (acc, gi) in grad.iter_mut().zip(g) {
            for (a, v) in acc.iter_mut().zip(gi) {
                *a += w * v;
            }
        }
    }
    Ok((loss, grad))
}

/// Fresh model for `cfg` with networks initialized from `rng`.
pub fn init_model<R: Rng + ?Sized>(target: EnergyTarget, cfg: &TrainConfig, rng: &mut R) -> Result<FlowModel> {
    let mut model = FlowModel::new(cfg.kind, target, cfg.latent_sigma, &cfg.architecture, cfg.use_c, rng)?;
    model.schedule = cfg.schedule;
    Ok(model)
}

/// Train from a fresh initialization seeded by `cfg.seed`.
pub fn train(target: EnergyTarget, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(target, cfg, |_, _| {})
}

/// [`train`] with a callback after every iteration `(iteration, loss)`.
pub fn train_with<C: FnMut(usize, f64)>(target: EnergyTarget, cfg: &TrainConfig, mut on_step: C) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let model = init_model(target, cfg, &mut rng)?;
    continue_training(model, cfg, &mut rng, &mut on_step)
}

/// Optimize an existing model for `cfg.iterations` steps.
pub fn continue_training<R: Rng + ?Sized, C: FnMut(usize, f64)>(
    mut model: FlowModel,
    cfg: &TrainConfig,
    rng: &mut R,
    on_step: &mut C,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mode = cfg.collocation_mode();
    let mut opts: Vec<Adam> =
        model.nets().iter().map(|n| Adam::new(n.params().len(), cfg.beta1, cfg.beta2, cfg.adam_eps)).collect();
    let mut losses = Vec::with_capacity(cfg.iterations);
    let mut slices: Vec<Collocation> = Vec::new();
    let mut bad_streak = 0;
    for it in 0..cfg.iterations {
        let batches = match mode {
            CollocationMode::Trajectory => {
                if it % cfg.refresh_interval == 0 || slices.is_empty() {
                    let frozen = model.clone();
                    slices = collocation_trajectory(
                        &frozen,
                        model.kind,
                        model.latent_sigma,
                        cfg.batch_size,
                        cfg.time_steps,
                        &cfg.solver,
                        rng,
                    )?;
                }
                slices.clone()
            }
            CollocationMode::UniformOu => {
                vec![collocation_uniform_ou(&model.target.domain_box, cfg.particles, &model.schedule, rng)?]
            }
        };
        match batch_loss(&model, &batches, cfg.chunk) {
            Ok((loss, grads)) if loss.is_finite() && grads.iter().flatten().all(|g| g.is_finite()) => {
                bad_streak = 0;
                let lr = cfg.learning_rate_at(it);
                for ((net, opt), g) in model.nets_mut().into_iter().zip(&mut opts).zip(&grads) {
                    opt.update(net.params_mut(), g, lr);
                }
                losses.push(loss);
                on_step(it, loss);
            }
            Ok(_) | Err(Error::NonFinite(_)) => {
                bad_streak += 1;
                losses.push(f64::NAN);
                on_step(it, f64::NAN);
                if bad_streak >= 3 {
                    return Err(Error::TrainingAborted(format!(
                        "non-finite loss on three consecutive iterations (last at {it})"
                    )));
                }
            }
            Err(e) => return Err(e),
        }
    }
    Ok(TrainOutcome { model, losses })
}

pub const MAGIC: &[u8; 4] = b"BCRV";
pub const FORMAT_VERSION: u32 = 1;

/// Layer widths of each network in a checkpoint (absent networks are `None`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetWidths {
    pub psi: Option<Vec<usize>>,
    pub velocity: Option<Vec<usize>>,
    pub c_net: Option<Vec<usize>>,
    pub scheduler: Option<Vec<usize>>,
}

/// JSON metadata stored in a checkpoint header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub kind: Kind,
    pub widths: NetWidths,
    pub schedule: VpSchedule,
    pub latent_sigma: f64,
    pub target: Option<TargetSpec>,
    pub seed: u64,
    pub iterations: usize,
    pub param_count: usize,
}

impl CheckpointMeta {
    pub fn for_model(model: &FlowModel, seed: u64, iterations: usize) -> Self {
        let w = |n: &Option<Mlp>| n.as_ref().map(|n| n.widths().to_vec());
        Self {
            kind: model.kind,
            widths: NetWidths {
                psi: w(&model.psi),
                velocity: w(&model.velocity),
                c_net: w(&model.c_net),
                scheduler: w(&model.scheduler),
            },
            schedule: model.schedule,
            latent_sigma: model.latent_sigma,
            target: model.target_spec.clone(),
            seed,
            iterations,
            param_count: model.param_count(),
        }
    }
}

/// Serialize a model to the checkpoint byte layout.
pub fn encode_checkpoint(model: &FlowModel, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(meta)?;
    let params = model.flat_params();
    let mut payload = Vec::with_capacity(params.len() * 8);
    for p in &params {
        payload.extend_from_slice(&p.to_le_bytes());
    }
    let mut out = Vec::with_capacity(16 + json.len() + payload.len() + 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    Ok(out)
}

pub fn save_checkpoint(model: &FlowModel, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(model, meta)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    Ok(())
}

fn take<'a>(bytes: &'a [u8], at: &mut usize, n: usize, what: &str) -> Result<&'a [u8]> {
    let end = at.checked_add(n).filter(|&e| e <= bytes.len()).ok_or_else(|| Error::Truncated(format!("missing {what}")))?;
    let out = &bytes[*at..end];
    *at = end;
    Ok(out)
}

/// Parse checkpoint bytes into metadata and the flat parameter vector.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<(CheckpointMeta, Vec<f64>)> {
    let mut at = 0;
    let magic = take(bytes, &mut at, 4, "magic")?;
    if magic != MAGIC {
        return Err(Error::VersionMismatch(format!("bad magic {magic:?}")));
    }
    let version = u32::from_le_bytes(take(bytes, &mut at, 4, "version")?.try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch(format!("found version {version}, expected {FORMAT_VERSION}")));
    }
    let meta_len = u64::from_le_bytes(take(bytes, &mut at, 8, "metadata length")?.try_into().expect("8 bytes"));
    let meta_len = usize::try_from(meta_len).map_err(|_| Error::Truncated("metadata length overflows".into()))?;
    let meta: CheckpointMeta = serde_json::from_slice(take(bytes, &mut at, meta_len, "metadata")?)?;
    let payload_len = meta
        .param_count
        .checked_mul(8)
        .ok_or_else(|| Error::Truncated("parameter count overflows".into()))?;
    let payload = take(bytes, &mut at, payload_len, "parameter payload")?;
    let stored = u32::from_le_bytes(take(bytes, &mut at, 4, "checksum")?.try_into().expect("4 bytes"));
    if at != bytes.len() {
        return Err(Error::Truncated(format!("{} trailing bytes", bytes.len() - at)));
    }
    let computed = crc32fast::hash(payload);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    let params = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    Ok((meta, params))
}

/// Rebuild a model from decoded parts, with `target` overriding the spec in
/// the metadata.
pub fn model_from_parts(meta: &CheckpointMeta, params: &[f64], target: Option<EnergyTarget>) -> Result<FlowModel> {
    let target = match (target, &meta.target) {
        (Some(t), _) => t,
        (None, Some(spec)) => spec.build()?,
        (None, None) => return Err(Error::Config("checkpoint names no target and none was supplied".into())),
    };
    let mut off = 0;
    let mut net = |w: &Option<Vec<usize>>| -> Result<Option<Mlp>> {
        match w {
            None => Ok(None),
            Some(w) => {
                let n = Mlp::param_count(w);
                let slice = params.get(off..off + n).ok_or_else(|| Error::Truncated("parameter payload".into()))?;
                off += n;
                Mlp::from_params(w, slice.to_vec()).map(Some)
            }
        }
    };
    let psi = net(&meta.widths.psi)?;
    let velocity = net(&meta.widths.velocity)?;
    let c_net = net(&meta.widths.c_net)?;
    let scheduler = net(&meta.widths.scheduler)?;
    if off != params.len() {
        return Err(Error::Dimension { expected: off, got: params.len() });
    }
    let latent = crate::targets::gaussian_latent(meta.latent_sigma, target.dim)?;
    Ok(FlowModel {
        kind: meta.kind,
        latent,
        latent_sigma: meta.latent_sigma,
        target,
        target_spec: meta.target.clone(),
        schedule: meta.schedule,
        psi,
        velocity,
        c_net,
        scheduler,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<(FlowModel, CheckpointMeta)> {
    load_checkpoint_with(path, None)
}

pub fn load_checkpoint_with(path: &Path, target: Option<EnergyTarget>) -> Result<(FlowModel, CheckpointMeta)> {
    let bytes = fs::read(path)?;
    let (meta, params) = decode_checkpoint(&bytes)?;
    let model = model_from_parts(&meta, &params, target)?;
    Ok((model, meta))
}
