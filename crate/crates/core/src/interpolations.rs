//! Energy curves `f_t`, their velocity fields, and the pointwise residual of
//! the continuity equation for Boltzmann densities,
//!
//! ```text
//! r = d/dt f_t - C_t + <grad f_t, v_t> - div v_t,
//! ```
//!
//! where the spatially constant `C_t` absorbs the unknown `E[d/dt f_t]`.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffengine::{param_grad, JetSpec, Mlp, NetParams, Tape, Var};
use crate::error::{Error, Result};
use crate::targets::{gaussian_latent, EnergyTarget, TargetSpec};

/// Residuals are only evaluated on `[TIME_EPS, 1 - TIME_EPS]`.
pub const TIME_EPS: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    /// `f_t = (1-t) f_0 + t f_1`; learns `v` and `C`.
    Linear,
    /// `f_t = (1-t) f_0 + t f_1 + t(1-t) psi_t`; learns `psi`, `v` and `C`.
    Learned,
    /// `f_t = g(t) f_D + t psi_t` with `v_t = beta(t)/2 grad(f_t - |x|^2/2)`.
    Gradflow,
}

impl Kind {
    pub fn as_str(self) -> &'static str {
        match self {
            Kind::Linear => "linear",
            Kind::Learned => "learned",
            Kind::Gradflow => "gradflow",
        }
    }
}

impl std::str::FromStr for Kind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Kind::Linear),
            "learned" => Ok(Kind::Learned),
            "gradflow" => Ok(Kind::Gradflow),
            other => Err(Error::Config(format!("unknown interpolation kind `{other}`"))),
        }
    }
}

/// Linear variance-preserving noise rate and its integral.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VpSchedule {
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for VpSchedule {
    fn default() -> Self {
        Self { beta_min: 0.1, beta_max: 20.0 }
    }
}

fn check_unit(t: f64) -> Result<()> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(Error::Domain(format!("time {t} outside [0, 1]")))
    }
}

impl VpSchedule {
    pub fn beta(&self, t: f64) -> Result<f64> {
        check_unit(t)?;
        Ok(self.beta_at(t))
    }

    /// `int_0^t beta(s) ds`.
    pub fn g_vp(&self, t: f64) -> Result<f64> {
        check_unit(t)?;
        Ok(self.g_at(t))
    }

    pub(crate) fn beta_at(&self, t: f64) -> f64 {
        self.beta_min + t * (self.beta_max - self.beta_min)
    }

    pub(crate) fn g_at(&self, t: f64) -> f64 {
        // beta_min t + (beta_max - beta_min) t^2 / 2, grouped so g(1) is the rounded endpoint mean
        0.5 * t * (self.beta_min * (2.0 - t) + self.beta_max * t)
    }

    /// Closed-form VP/OU marginal: `sqrt(1 - e^{-g}) z + e^{-g/2} x0`.
    pub fn ou_interpolant(&self, t: f64, z: &[f64], x0: &[f64]) -> Result<Vec<f64>> {
        check_unit(t)?;
        if z.len() != x0.len() {
            return Err(Error::Dimension { expected: x0.len(), got: z.len() });
        }
        let g = self.g_at(t);
        let noise = (-(-g).exp_m1()).sqrt();
        let keep = (-0.5 * g).exp();
        Ok(z.iter().zip(x0).map(|(z, x)| noise * z + keep * x).collect())
    }
}

/// Hidden-layer widths of the networks inside a [`FlowModel`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    /// Hidden widths of the `psi` and velocity networks.
    pub field_hidden: Vec<usize>,
    /// Hidden widths of the `C_t` network.
    pub c_hidden: Vec<usize>,
    /// Hidden widths of the learned scheduler's correction `h(t)`.
    pub scheduler_hidden: Vec<usize>,
}

impl Default for Architecture {
    fn default() -> Self {
        Self { field_hidden: vec![128; 3], c_hidden: vec![64; 2], scheduler_hidden: vec![32; 2] }
    }
}

fn widths(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut w = Vec::with_capacity(hidden.len() + 2);
    w.push(input);
    w.extend_from_slice(hidden);
    w.push(output);
    w
}

/// Evaluated derivative blocks of `f_t` at one point, used by the
/// pointwise residual formulas.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalTerms {
    pub dt_f: f64,
    pub c: f64,
    pub grad_f: Vec<f64>,
}

/// `dt_f - c + <grad f, v> - div v`.
pub fn continuity_residual(terms: &LocalTerms, v: &[f64], div_v: f64) -> f64 {
    let inner: f64 = terms.grad_f.iter().zip(v).map(|(g, v)| g * v).sum();
    terms.dt_f - terms.c + inner - div_v
}

/// Gradient-flow residual with the VP-rescaled velocity
/// `v = beta/2 (grad f - x)`, so `div v = beta/2 (lap f - d)`.
pub fn gradflow_residual_terms(terms: &LocalTerms, lap_f: f64, beta: f64, x: &[f64]) -> f64 {
    let d = x.len() as f64;
    let inner: f64 = terms.grad_f.iter().zip(x).map(|(g, x)| g * (g - x)).sum();
    terms.dt_f - terms.c + 0.5 * beta * (inner - lap_f + d)
}

/// Networks and endpoint energies of one interpolation scheme.
#[derive(Debug, Clone)]
pub struct FlowModel {
    pub kind: Kind,
    /// `f_Z` (and `f_0` for linear/learned).
    pub latent: EnergyTarget,
    pub latent_sigma: f64,
    /// `f_D` (and `f_1` for linear/learned).
    pub target: EnergyTarget,
    pub target_spec: Option<TargetSpec>,
    pub schedule: VpSchedule,
    pub psi: Option<Mlp>,
    pub velocity: Option<Mlp>,
    pub c_net: Option<Mlp>,
    pub scheduler: Option<Mlp>,
}

/// Registered parameters of the model's networks for one tape.
struct Registered {
    psi: Option<NetParams>,
    velocity: Option<NetParams>,
    c_net: Option<NetParams>,
    scheduler: Option<NetParams>,
}

/// A batch of collocation points: times and the matching `d x n` positions.
#[derive(Debug, Clone, PartialEq)]
pub struct Collocation {
    pub t: Vec<f64>,
    pub x: Array2<f64>,
}

impl Collocation {
    pub fn new(t: Vec<f64>, x: Array2<f64>) -> Result<Self> {
        if t.len() != x.ncols() {
            return Err(Error::Dimension { expected: x.ncols(), got: t.len() });
        }
        Ok(Self { t, x })
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn point(&self, j: usize) -> (f64, Vec<f64>) {
        (self.t[j], self.x.column(j).to_vec())
    }

    /// Columns `range` as a new batch.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Self {
        Self {
            t: self.t[range.clone()].to_vec(),
            x: self.x.slice(ndarray::s![.., range]).to_owned(),
        }
    }
}

/// Endpoint-energy blocks evaluated on a batch.
struct EndpointBlocks {
    value: Vec<f64>,
    grad: Array2<f64>,
    lap: Vec<f64>,
}

fn endpoint_blocks(target: &EnergyTarget, x: &Array2<f64>, with_lap: bool) -> EndpointBlocks {
    let (d, n) = x.dim();
    let mut value = Vec::with_capacity(n);
    let mut grad = Array2::zeros((d, n));
    let mut lap = Vec::with_capacity(if with_lap { n } else { 0 });
    let mut g = vec![0.0; d];
    for j in 0..n {
        let p = x.column(j).to_vec();
        value.push(target.energy(&p));
        target.grad(&p, &mut g);
        grad.column_mut(j).assign(&ndarray::ArrayView1::from(&g[..]));
        if with_lap {
            lap.push(target.laplacian(&p));
        }
    }
    EndpointBlocks { value, grad, lap }
}

fn check_finite(values: &[f64], what: &str) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(j) => Err(Error::NonFinite(format!("{what} at column {j}"))),
        None => Ok(()),
    }
}

impl FlowModel {
    /// Fresh networks for `kind`; `use_c = false` drops the `C_t` network
    /// (only valid for normalized targets with learned/gradflow).
    pub fn new<R: Rng + ?Sized>(
        kind: Kind,
        target: EnergyTarget,
        latent_sigma: f64,
        arch: &Architecture,
        use_c: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let d = target.dim;
        if kind == Kind::Gradflow && latent_sigma != 1.0 {
            return Err(Error::Config("gradflow requires a standard normal latent (sigma = 1)".into()));
        }
        if !use_c && (kind == Kind::Linear || !target.normalized) {
            return Err(Error::Config(
                "C_t may only be disabled for normalized targets with learned or gradflow".into(),
            ));
        }
        let latent = gaussian_latent(latent_sigma, d)?;
        let psi = match kind {
            Kind::Learned | Kind::Gradflow => Some(Mlp::new(&widths(d + 1, &arch.field_hidden, 1), rng)?),
            Kind::Linear => None,
        };
        let velocity = match kind {
            Kind::Linear | Kind::Learned => Some(Mlp::new(&widths(d + 1, &arch.field_hidden, d), rng)?),
            Kind::Gradflow => None,
        };
        let c_net = if use_c { Some(Mlp::new(&widths(1, &arch.c_hidden, 1), rng)?) } else { None };
        let scheduler = match kind {
            Kind::Gradflow => Some(Mlp::new(&widths(1, &arch.scheduler_hidden, 1), rng)?),
            _ => None,
        };
        Ok(Self {
            kind,
            latent,
            latent_sigma,
            target,
            target_spec: None,
            schedule: VpSchedule::default(),
            psi,
            velocity,
            c_net,
            scheduler,
        })
    }

    pub fn dim(&self) -> usize {
        self.target.dim
    }

    /// Present networks in canonical order: psi, velocity, C, scheduler.
    pub fn nets(&self) -> Vec<&Mlp> {
        [&self.psi, &self.velocity, &self.c_net, &self.scheduler]
            .into_iter()
            .filter_map(Option::as_ref)
            .collect()
    }

    pub fn nets_mut(&mut self) -> Vec<&mut Mlp> {
        [&mut self.psi, &mut self.velocity, &mut self.c_net, &mut self.scheduler]
            .into_iter()
            .filter_map(Option::as_mut)
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.nets().iter().map(|n| n.params().len()).sum()
    }

    /// All parameters concatenated in canonical order.
    pub fn flat_params(&self) -> Vec<f64> {
        self.nets().iter().flat_map(|n| n.params().iter().copied()).collect()
    }

    fn register(&self, tape: &mut Tape) -> Registered {
        Registered {
            psi: self.psi.as_ref().map(|n| n.register(tape)),
            velocity: self.velocity.as_ref().map(|n| n.register(tape)),
            c_net: self.c_net.as_ref().map(|n| n.register(tape)),
            scheduler: self.scheduler.as_ref().map(|n| n.register(tape)),
        }
    }

    fn registered_from(&self, regs: &[NetParams]) -> Registered {
        let mut it = regs.iter().cloned();
        Registered {
            psi: self.psi.as_ref().and_then(|_| it.next()),
            velocity: self.velocity.as_ref().and_then(|_| it.next()),
            c_net: self.c_net.as_ref().and_then(|_| it.next()),
            scheduler: self.scheduler.as_ref().and_then(|_| it.next()),
        }
    }

    fn require<'a, T>(&self, net: &'a Option<T>, name: &str) -> Result<&'a T> {
        net.as_ref()
            .ok_or_else(|| Error::Config(format!("{} model has no {name} network", self.kind.as_str())))
    }

    /// `g(t) = (1 - t) + t(1 - t) h(t)` and its time derivative; `g(0) = 1`
    /// and `g(1) = 0` for every `h`.
    pub fn scheduler_value(&self, t: f64) -> (f64, f64) {
        match &self.scheduler {
            Some(h) => {
                let hv = h.forward(t, &[]).expect("scheduler input")[0];
                let hd = crate::diffengine::time_partial(h, t, &[]).expect("scheduler input")[0];
                (1.0 - t + t * (1.0 - t) * hv, -1.0 + (1.0 - 2.0 * t) * hv + t * (1.0 - t) * hd)
            }
            None => (1.0 - t, -1.0),
        }
    }

    /// Scheduler value and derivative rows on a tape.
    fn scheduler_rows(&self, tape: &mut Tape, regs: &Registered, t: &[f64], trow: Var) -> (Var, Var) {
        let n = t.len();
        let one_minus_t = tape.row_leaf(&t.iter().map(|t| 1.0 - t).collect::<Vec<_>>());
        match &regs.scheduler {
            Some(h) => {
                let jet = h.jet(tape, trow, &Array2::zeros((0, n)), JetSpec::TIME);
                let tt1 = tape.row_leaf(&t.iter().map(|t| t * (1.0 - t)).collect::<Vec<_>>());
                let lin = tape.row_leaf(&t.iter().map(|t| 1.0 - 2.0 * t).collect::<Vec<_>>());
                let bump = tape.mul(tt1, jet.value);
                let g = tape.add(one_minus_t, bump);
                let neg_one = tape.row_leaf(&vec![-1.0; n]);
                let a = tape.mul(lin, jet.value);
                let b = tape.mul(tt1, jet.dt.expect("time tangent"));
                let s = tape.add(a, b);
                let dg = tape.add(neg_one, s);
                (g, dg)
            }
            None => {
                let dg = tape.row_leaf(&vec![-1.0; n]);
                (one_minus_t, dg)
            }
        }
    }

    fn c_row(&self, tape: &mut Tape, regs: &Registered, trow: Var, n: usize) -> Option<Var> {
        regs.c_net.as_ref().map(|c| c.jet(tape, trow, &Array2::zeros((0, n)), JetSpec::VALUE).value)
    }

    /// Residual row (`1 x n`) on the tape; times are used as given.
    fn residual_on_tape(&self, tape: &mut Tape, regs: &Registered, batch: &Collocation) -> Result<Var> {
        let t = &batch.t;
        let x = &batch.x;
        let (d, n) = x.dim();
        if d != self.dim() {
            return Err(Error::Dimension { expected: self.dim(), got: d });
        }
        let trow = tape.row_leaf(t);
        let tt1: Vec<f64> = t.iter().map(|t| t * (1.0 - t)).collect();

        let mut r = match self.kind {
            Kind::Linear | Kind::Learned => {
                let f0 = endpoint_blocks(&self.latent, x, false);
                let f1 = endpoint_blocks(&self.target, x, false);
                check_finite(&f0.value, "latent energy")?;
                check_finite(&f1.value, "target energy")?;
                let diff: Vec<f64> = f1.value.iter().zip(&f0.value).map(|(a, b)| a - b).collect();
                let mut base_grad = Array2::zeros((d, n));
                for j in 0..n {
                    for i in 0..d {
                        base_grad[[i, j]] = (1.0 - t[j]) * f0.grad[[i, j]] + t[j] * f1.grad[[i, j]];
                    }
                }
                let vnet = regs.velocity.as_ref().ok_or_else(|| Error::Config("missing velocity network".into()))?;
                let vjet = vnet.jet(tape, trow, x, JetSpec::SPACE);

                let mut dt_f = tape.row_leaf(&diff);
                let mut grad_rows: Vec<Var> = (0..d)
                    .map(|i| tape.row_leaf(&base_grad.row(i).to_vec()))
                    .collect();
                if self.kind == Kind::Learned {
                    let psi = regs.psi.as_ref().ok_or_else(|| Error::Config("missing psi network".into()))?;
                    let pj = psi.jet(tape, trow, x, JetSpec::TIME_SPACE);
                    let lin = tape.row_leaf(&t.iter().map(|t| 1.0 - 2.0 * t).collect::<Vec<_>>());
                    let tt1r = tape.row_leaf(&tt1);
                    let a = tape.mul(lin, pj.value);
                    let b = tape.mul(tt1r, pj.dt.expect("time tangent"));
                    let ab = tape.add(a, b);
                    dt_f = tape.add(dt_f, ab);
                    for (i, g) in grad_rows.iter_mut().enumerate() {
                        let corr = tape.mul(tt1r, pj.dx[i]);
                        *g = tape.add(*g, corr);
                    }
                }
                let mut acc = dt_f;
                for (i, &g) in grad_rows.iter().enumerate() {
                    let vi = tape.row(vjet.value, i);
                    let prod = tape.mul(g, vi);
                    acc = tape.add(acc, prod);
                    let dii = tape.row(vjet.dx[i], i);
                    acc = tape.sub(acc, dii);
                }
                acc
            }
            Kind::Gradflow => {
                let fd = endpoint_blocks(&self.target, x, true);
                check_finite(&fd.value, "target energy")?;
                let psi = regs.psi.as_ref().ok_or_else(|| Error::Config("missing psi network".into()))?;
                let pj = psi.jet(tape, trow, x, JetSpec::FULL);
                let (g, dg) = self.scheduler_rows(tape, regs, t, trow);
                let fdv = tape.row_leaf(&fd.value);
                let lapd = tape.row_leaf(&fd.lap);

                // d/dt f = g' f_D + psi + t d/dt psi
                let a = tape.mul(dg, fdv);
                let b = tape.mul(trow, pj.dt.expect("time tangent"));
                let ab = tape.add(a, b);
                let dt_f = tape.add(ab, pj.value);

                let mut inner_minus_lap = {
                    let a = tape.mul(g, lapd);
                    let mut lap_psi = pj.dxx[0];
                    for &v in &pj.dxx[1..] {
                        lap_psi = tape.add(lap_psi, v);
                    }
                    let b = tape.mul(trow, lap_psi);
                    let lap = tape.add(a, b);
                    tape.scale(lap, -1.0)
                };
                for i in 0..d {
                    let gdi = tape.row_leaf(&fd.grad.row(i).to_vec());
                    let a = tape.mul(g, gdi);
                    let b = tape.mul(trow, pj.dx[i]);
                    let gi = tape.add(a, b);
                    let xi = tape.row_leaf(&x.row(i).to_vec());
                    let gmx = tape.sub(gi, xi);
                    let prod = tape.mul(gi, gmx);
                    inner_minus_lap = tape.add(inner_minus_lap, prod);
                }
                let dims = tape.row_leaf(&vec![d as f64; n]);
                let bracket = tape.add(inner_minus_lap, dims);
                let half_beta = tape.row_leaf(&t.iter().map(|&t| 0.5 * self.schedule.beta_at(t)).collect::<Vec<_>>());
                let flow = tape.mul(half_beta, bracket);
                tape.add(dt_f, flow)
            }
        };
        if let Some(c) = self.c_row(tape, regs, trow, n) {
            r = tape.sub(r, c);
        }
        Ok(r)
    }

    fn clamp_batch(batch: &Collocation) -> Collocation {
        Collocation {
            t: batch.t.iter().map(|t| t.clamp(TIME_EPS, 1.0 - TIME_EPS)).collect(),
            x: batch.x.clone(),
        }
    }

    /// Residuals at every collocation point, with times clamped to
    /// `[TIME_EPS, 1 - TIME_EPS]`.
    pub fn residuals(&self, batch: &Collocation) -> Result<Vec<f64>> {
        self.residuals_unclamped(&Self::clamp_batch(batch))
    }

    /// Residuals at the exact given times.
    pub fn residuals_unclamped(&self, batch: &Collocation) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let regs = self.register(&mut tape);
        let r = self.residual_on_tape(&mut tape, &regs, batch)?;
        Ok(tape.value(r).row(0).to_vec())
    }

    /// Mean squared residual over the batch and its gradient with respect
    /// to every network, in canonical order.
    pub fn loss_and_grad(&self, batch: &Collocation) -> Result<(f64, Vec<Vec<f64>>)> {
        let batch = Self::clamp_batch(batch);
        let nets = self.nets();
        let mut failure = None;
        let out = param_grad(&nets, |tape, regs| {
            let regs = self.registered_from(regs);
            match self.residual_on_tape(tape, &regs, &batch) {
                Ok(r) => {
                    let sq = tape.mul(r, r);
                    tape.mean(sq)
                }
                Err(e) => {
                    failure = Some(e);
                    tape.leaf(Array2::from_elem((1, 1), f64::NAN))
                }
            }
        });
        if let Some(e) = failure {
            return Err(e);
        }
        out
    }

    fn single(&self, t: f64, x: &[f64]) -> Result<Collocation> {
        if x.len() != self.dim() {
            return Err(Error::Dimension { expected: self.dim(), got: x.len() });
        }
        Collocation::new(vec![t], Array2::from_shape_vec((x.len(), 1), x.to_vec()).expect("column"))
    }

    fn residual_of_kind(&self, kind: Kind, t: f64, x: &[f64]) -> Result<f64> {
        if self.kind != kind {
            return Err(Error::Config(format!("model is {}, not {}", self.kind.as_str(), kind.as_str())));
        }
        Ok(self.residuals_unclamped(&self.single(t, x)?)?[0])
    }

    pub fn linear_residual(&self, t: f64, x: &[f64]) -> Result<f64> {
        self.residual_of_kind(Kind::Linear, t, x)
    }

    pub fn learned_residual(&self, t: f64, x: &[f64]) -> Result<f64> {
        self.residual_of_kind(Kind::Learned, t, x)
    }

    pub fn gradflow_residual(&self, t: f64, x: &[f64]) -> Result<f64> {
        self.residual_of_kind(Kind::Gradflow, t, x)
    }

    /// The energy curve `f_t(x)`.
    pub fn energy(&self, t: f64, x: &[f64]) -> Result<f64> {
        let psi = |t: f64| -> Result<f64> { Ok(self.require(&self.psi, "psi")?.forward(t, x)?[0]) };
        match self.kind {
            Kind::Linear => Ok((1.0 - t) * self.latent.energy(x) + t * self.target.energy(x)),
            Kind::Learned => {
                Ok((1.0 - t) * self.latent.energy(x) + t * self.target.energy(x) + t * (1.0 - t) * psi(t)?)
            }
            Kind::Gradflow => {
                let (g, _) = self.scheduler_value(t);
                Ok(g * self.target.energy(x) + t * psi(t)?)
            }
        }
    }

    /// `C_t`, or zero when the network is disabled.
    pub fn c_value(&self, t: f64) -> f64 {
        self.c_net.as_ref().map_or(0.0, |c| c.forward(t, &[]).expect("time-only net")[0])
    }

    /// Velocities (`d x n`) and divergences at a shared time `t`.
    pub fn velocity_batch(&self, t: f64, x: &Array2<f64>, with_div: bool) -> Result<(Array2<f64>, Vec<f64>)> {
        let (d, n) = x.dim();
        if d != self.dim() {
            return Err(Error::Dimension { expected: self.dim(), got: d });
        }
        let mut tape = Tape::new();
        let regs = self.register(&mut tape);
        let trow = tape.row_leaf(&vec![t; n]);
        match self.kind {
            Kind::Linear | Kind::Learned => {
                let v = self.require(&regs.velocity, "velocity")?;
                let spec = if with_div { JetSpec::SPACE } else { JetSpec::VALUE };
                let jet = v.jet(&mut tape, trow, x, spec);
                let vel = tape.value(jet.value).clone();
                let div = if with_div {
                    (0..n)
                        .map(|j| (0..d).map(|i| tape.value(jet.dx[i])[[i, j]]).sum())
                        .collect()
                } else {
                    Vec::new()
                };
                Ok((vel, div))
            }
            Kind::Gradflow => {
                let psi = self.require(&regs.psi, "psi")?;
                let spec = if with_div { JetSpec { laplacian: true, ..JetSpec::SPACE } } else { JetSpec::SPACE };
                let jet = psi.jet(&mut tape, trow, x, spec);
                let fd = endpoint_blocks(&self.target, x, with_div);
                let (g, _) = self.scheduler_value(t);
                let half_beta = 0.5 * self.schedule.beta_at(t.clamp(0.0, 1.0));
                let mut vel = Array2::zeros((d, n));
                for i in 0..d {
                    let dpsi = tape.value(jet.dx[i]);
                    for j in 0..n {
                        vel[[i, j]] = half_beta * (g * fd.grad[[i, j]] + t * dpsi[[0, j]] - x[[i, j]]);
                    }
                }
                let div = if with_div {
                    (0..n)
                        .map(|j| {
                            let lap_psi: f64 = (0..d).map(|i| tape.value(jet.dxx[i])[[0, j]]).sum();
                            half_beta * (g * fd.lap[j] + t * lap_psi - d as f64)
                        })
                        .collect()
                } else {
                    Vec::new()
                };
                Ok((vel, div))
            }
        }
    }

    /// Velocity at one point.
    pub fn velocity(&self, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        let col = self.single(t, x)?;
        let (v, _) = self.velocity_batch(t, &col.x, false)?;
        Ok(v.column(0).to_vec())
    }

    /// Local derivative blocks of `f_t` at `(t, x)` via the diffengine
    /// single-point operations; an independent assembly path from the
    /// batched tape residual.
    pub fn local_terms(&self, t: f64, x: &[f64]) -> Result<(LocalTerms, f64)> {
        use crate::diffengine::{laplacian, spatial_grad, time_partial};
        let d = self.dim();
        let c = self.c_value(t);
        match self.kind {
            Kind::Linear | Kind::Learned => {
                let f0 = self.latent.energy(x);
                let f1 = self.target.energy(x);
                let g0 = self.latent.grad_vec(x);
                let g1 = self.target.grad_vec(x);
                let mut grad_f: Vec<f64> = (0..d).map(|i| (1.0 - t) * g0[i] + t * g1[i]).collect();
                let mut dt_f = f1 - f0;
                if self.kind == Kind::Learned {
                    let psi = self.require(&self.psi, "psi")?;
                    let pv = psi.forward(t, x)?[0];
                    let pt = time_partial(psi, t, x)?[0];
                    let px = spatial_grad(psi, t, x)?;
                    dt_f += (1.0 - 2.0 * t) * pv + t * (1.0 - t) * pt;
                    for (g, p) in grad_f.iter_mut().zip(px) {
                        *g += t * (1.0 - t) * p;
                    }
                }
                Ok((LocalTerms { dt_f, c, grad_f }, 0.0))
            }
            Kind::Gradflow => {
                let psi = self.require(&self.psi, "psi")?;
                let (g, dg) = self.scheduler_value(t);
                let pv = psi.forward(t, x)?[0];
                let pt = time_partial(psi, t, x)?[0];
                let px = spatial_grad(psi, t, x)?;
                let lp = laplacian(psi, t, x)?;
                let gd = self.target.grad_vec(x);
                let dt_f = dg * self.target.energy(x) + pv + t * pt;
                let grad_f = (0..d).map(|i| g * gd[i] + t * px[i]).collect();
                let lap_f = g * self.target.laplacian(x) + t * lp;
                Ok((LocalTerms { dt_f, c, grad_f }, lap_f))
            }
        }
    }
}
