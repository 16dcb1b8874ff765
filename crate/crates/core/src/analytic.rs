//! Exact one-dimensional linear interpolation between `f_0(x) = |x|` and
//! `f_1(x) = 2 min(|x|, |x - m|)`.
//!
//! The interpolated density `rho_t ∝ exp(-(1 - t)|x| - 2t min(|x|, |x - m|))`
//! is piecewise exponential with kinks at `0`, `m/2` and `m`, so its CDF and
//! quantile function are closed-form. In one dimension the optimal transport
//! velocity satisfies `|v_t|^2 = int_0^1 (d/dt Q_t(s))^2 ds`, evaluated here
//! by quadrature after changing variables back to `x`.
//!
//! With `a = 1 + t` and `b = 3t - 1`, the density is `exp(a x)` on `x <= 0`,
//! `exp(-a x)` on `[0, m/2]`, `exp(b x - 2tm)` on `[m/2, m]` and
//! `exp(-a x + 2tm)` on `x >= m`. The `b = 0` case (`t = 1/3`) is a removable
//! singularity of the textbook formulas; every `1/b` factor is folded into
//! `expm1(z)/z` or `ln_1p(z)/z`, which are smooth through zero.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `expm1(z) / z`, equal to 1 at `z = 0`.
fn exprel(z: f64) -> f64 {
    if z.abs() < 1e-8 {
        1.0 + 0.5 * z
    } else {
        z.exp_m1() / z
    }
}

/// `ln(1 + z) / z`, equal to 1 at `z = 0`.
fn log1prel(z: f64) -> f64 {
    if z.abs() < 1e-8 {
        1.0 - 0.5 * z
    } else {
        z.ln_1p() / z
    }
}

/// The interpolated law at one `(t, m)`: normalizer and CDF breakpoints.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantilePath {
    pub m: f64,
    pub t: f64,
    /// Normalizer `int exp(-f_t)`.
    pub z: f64,
    /// CDF values at `0`, `m/2` and `m`.
    pub s1: f64,
    pub s2: f64,
    pub s3: f64,
    /// Upper-tail mass beyond `m`, `1 - s3`, kept separately for precision.
    tail: f64,
    a: f64,
    b: f64,
    /// `exp(-a m / 2)`.
    mid: f64,
}

impl QuantilePath {
    pub fn new(t: f64, m: f64) -> Result<Self> {
        if !m.is_finite() || m < 0.0 {
            return Err(Error::Domain(format!("mode offset {m} must be finite and nonnegative")));
        }
        if !t.is_finite() {
            return Err(Error::Domain(format!("time {t} must be finite")));
        }
        Ok(Self::unchecked(t, m))
    }

    /// No range checks on `t`; finite differences step slightly outside
    /// `[0, 1]`, where the formulas remain valid.
    fn unchecked(t: f64, m: f64) -> Self {
        let a = 1.0 + t;
        let b = 3.0 * t - 1.0;
        let mid = (-0.5 * a * m).exp();
        let upper = (-m * (1.0 - t)).exp();
        // mass on [m/2, m] is exp(-a m/2) (m/2) exprel(b m/2)
        let bump = mid * 0.5 * m * exprel(0.5 * b * m);
        let z = (2.0 - mid + upper) / a + bump;
        let tail = upper / (a * z);
        Self {
            m,
            t,
            z,
            s1: 1.0 / (a * z),
            s2: (2.0 - mid) / (a * z),
            s3: 1.0 - tail,
            tail,
            a,
            b,
            mid,
        }
    }

    /// `f_t(x)`.
    pub fn energy(&self, x: f64) -> f64 {
        (1.0 - self.t) * x.abs() + 2.0 * self.t * x.abs().min((x - self.m).abs())
    }

    pub fn density(&self, x: f64) -> f64 {
        (-self.energy(x)).exp() / self.z
    }

    /// CDF formula of piece `k` (0: `x <= 0`, 1: `[0, m/2]`, 2: `[m/2, m]`,
    /// 3: `x >= m`), evaluated at any `x`.
    fn cdf_piece(&self, k: usize, x: f64) -> f64 {
        let (a, b, m, z) = (self.a, self.b, self.m, self.z);
        match k {
            0 => (a * x).exp() / (a * z),
            1 => (2.0 - (-a * x).exp()) / (a * z),
            2 => {
                let y = x - 0.5 * m;
                ((2.0 - self.mid) / a + self.mid * y * exprel(b * y)) / z
            }
            _ => 1.0 - (-a * x + 2.0 * self.t * m).exp() / (a * z),
        }
    }

    pub fn cdf(&self, x: f64) -> f64 {
        let k = if x <= 0.0 {
            0
        } else if x <= 0.5 * self.m {
            1
        } else if x <= self.m {
            2
        } else {
            3
        };
        self.cdf_piece(k, x)
    }

    /// `1 - F(x)`, accurate in the upper tail.
    pub fn survival(&self, x: f64) -> f64 {
        if x >= self.m {
            (-self.a * x + 2.0 * self.t * self.m).exp() / (self.a * self.z)
        } else {
            1.0 - self.cdf(x)
        }
    }

    /// `Q(s)`, with `sc = 1 - s` supplied by the caller so the upper tail
    /// keeps full precision.
    pub fn quantile_with_complement(&self, s: f64, sc: f64) -> f64 {
        let (a, b, m, z, t) = (self.a, self.b, self.m, self.z, self.t);
        if s <= self.s1 {
            (a * z * s).ln() / a
        } else if s <= self.s2 {
            let arg = 2.0 - a * z * s;
            if arg > 0.0 {
                (-arg.ln() / a).min(0.5 * m)
            } else {
                0.5 * m
            }
        } else if sc > self.tail {
            let x = if b <= 0.0 {
                // from m/2 upward: w = (Z s - K2) e^{a m/2}, K2 the mass below m/2
                let w = (z * s - (2.0 - self.mid) / a) / self.mid;
                if b * w <= -1.0 {
                    m
                } else {
                    0.5 * m + w * log1prel(b * w)
                }
            } else {
                // from m downward: r = Z (s3 - s) e^{m(1-t)}
                let r = z * (sc - self.tail) * (m * (1.0 - t)).exp();
                if b * r >= 1.0 {
                    0.5 * m
                } else {
                    m - r * log1prel(-b * r)
                }
            };
            x.clamp(0.5 * m, m)
        } else {
            (2.0 * self.t * m - (a * z * sc).ln()) / a
        }
    }

    pub fn quantile(&self, s: f64) -> Result<f64> {
        if !(s > 0.0 && s < 1.0) {
            return Err(Error::Domain(format!("quantile level {s} outside (0, 1)")));
        }
        Ok(self.quantile_with_complement(s, 1.0 - s))
    }

    /// `[s1, s2, s3]`.
    pub fn breakpoints(&self) -> [f64; 3] {
        [self.s1, self.s2, self.s3]
    }
}

/// Normalizer `Z_t`.
pub fn z_t(t: f64, m: f64) -> Result<f64> {
    Ok(QuantilePath::new(t, m)?.z)
}

pub fn cdf(t: f64, x: f64, m: f64) -> Result<f64> {
    Ok(QuantilePath::new(t, m)?.cdf(x))
}

pub fn quantile(t: f64, s: f64, m: f64) -> Result<f64> {
    QuantilePath::new(t, m)?.quantile(s)
}

pub fn density(t: f64, x: f64, m: f64) -> Result<f64> {
    Ok(QuantilePath::new(t, m)?.density(x))
}

/// Finite-difference step for `d/dt F`.
pub const TIME_STEP: f64 = 1e-5;

/// `d/dt F_t(x)` at fixed `x` by central differences with one Richardson
/// extrapolation; beyond `m` the survival function is differenced instead.
fn dcdf_dt(t: f64, m: f64, x: f64) -> f64 {
    let value = |tt: f64| {
        let p = QuantilePath::unchecked(tt, m);
        if x > m {
            -p.survival(x)
        } else {
            p.cdf(x)
        }
    };
    let central = |h: f64| (value(t + h) - value(t - h)) / (2.0 * h);
    let d1 = central(TIME_STEP);
    let d2 = central(0.5 * TIME_STEP);
    (4.0 * d2 - d1) / 3.0
}

/// `|v_t|^2_{L2(rho_t)} = int_0^1 (d/dt Q_t(s))^2 ds`.
///
/// With `s = F_t(x)` and `d/dt Q = -(d/dt F)/rho` this is
/// `int (d/dt F_t(x))^2 / rho_t(x) dx`, integrated in `x` where the pieces
/// are fixed in time. Levels inside the low-density gap around `m/2` span
/// widths of order `exp(-m)` in `s`, far below double resolution near
/// `s = 1/2`, so the level-space form is not used directly.
pub fn velocity_norm_sq(t: f64, m: f64) -> Result<f64> {
    let path = QuantilePath::new(t, m)?;
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain(format!("time {t} outside [0, 1]")));
    }
    let v = integrate_over_line(&path, |x| {
        let flux = dcdf_dt(t, m, x);
        flux * flux * path.z * path.energy(x).exp()
    });
    if !v.is_finite() {
        return Err(Error::Quadrature(format!("non-finite velocity norm (t = {t}, m = {m})")));
    }
    Ok(v)
}

/// Composite Simpson on `[lo, hi]` with `intervals` (even) sub-intervals.
fn simpson<G: Fn(f64) -> f64>(lo: f64, hi: f64, intervals: usize, g: G) -> f64 {
    let h = (hi - lo) / intervals as f64;
    let mut acc = g(lo) + g(hi);
    for k in 1..intervals {
        acc += if k % 2 == 1 { 4.0 } else { 2.0 } * g(lo + k as f64 * h);
    }
    acc * h / 3.0
}

/// Integral of `h` over the real line: split at the kinks and into panels
/// no wider than a quarter decay length.
fn integrate_over_line<H: Fn(f64) -> f64>(path: &QuantilePath, h: H) -> f64 {
    let reach = 60.0 / path.a;
    let m = path.m;
    let cuts = [-reach, 0.0, 0.5 * m, m, m + reach];
    let width = 0.25;
    let mut total = 0.0;
    for w in cuts.windows(2).filter(|w| w[1] > w[0]) {
        let panels = ((w[1] - w[0]) / width).ceil().max(1.0) as usize;
        let step = (w[1] - w[0]) / panels as f64;
        for k in 0..panels {
            let lo = w[0] + k as f64 * step;
            total += simpson(lo, lo + step, 32, &h);
        }
    }
    total
}

/// Integral of `g(x) exp(-f_t(x))` over the real line.
fn integrate_against_density<G: Fn(f64) -> f64>(path: &QuantilePath, g: G) -> f64 {
    integrate_over_line(path, |x| g(x) * (-path.energy(x)).exp())
}

/// Normalizer by direct quadrature, an independent check on `Z_t`.
pub fn z_t_quadrature(t: f64, m: f64) -> Result<f64> {
    let path = QuantilePath::new(t, m)?;
    Ok(integrate_against_density(&path, |_| 1.0))
}

/// `Var_{rho_t}(f_0 - f_1)`.
pub fn alpha_variance(t: f64, m: f64) -> Result<f64> {
    let path = QuantilePath::new(t, m)?;
    let alpha = |x: f64| x.abs() - 2.0 * x.abs().min((x - m).abs());
    let mean = integrate_against_density(&path, alpha) / path.z;
    Ok(integrate_against_density(&path, |x| (alpha(x) - mean).powi(2)) / path.z)
}

/// Fisher-Rao action `int_0^1 Var_{rho_t}(f_0 - f_1) dt`.
pub fn fisher_rao_action(m: f64) -> Result<f64> {
    let n = 200;
    let mut vals = Vec::with_capacity(n + 1);
    for k in 0..=n {
        let v = alpha_variance(k as f64 / n as f64, m)?;
        if !v.is_finite() {
            return Err(Error::Quadrature(format!("non-finite variance at t = {}", k as f64 / n as f64)));
        }
        vals.push(v);
    }
    let h = 1.0 / n as f64;
    let acc: f64 = vals
        .iter()
        .enumerate()
        .map(|(k, v)| v * if k == 0 || k == n { 1.0 } else if k % 2 == 1 { 4.0 } else { 2.0 })
        .sum();
    Ok(acc * h / 3.0)
}

/// `int_0^1 |v_t|^2 dt` over `[t_lo, t_hi]` by Simpson with `intervals`
/// sub-intervals.
pub fn kinetic_energy(m: f64, t_lo: f64, t_hi: f64, intervals: usize) -> Result<f64> {
    let intervals = intervals + intervals % 2;
    let h = (t_hi - t_lo) / intervals as f64;
    let mut acc = 0.0;
    for k in 0..=intervals {
        let w = if k == 0 || k == intervals { 1.0 } else if k % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * velocity_norm_sq(t_lo + k as f64 * h, m)?;
    }
    Ok(acc * h / 3.0)
}

/// Nodes on `[-margin, m + margin]` for tabulating `rho_t`, including the
/// kinks, spaced so that each trapezoid panel contributes at most about
/// `panel_tol` error (`h^3 r^2 rho / 12` on an exponential piece of rate
/// `r`); no spacing exceeds `h_max`.
pub fn density_grid(path: &QuantilePath, panel_tol: f64, h_max: f64, margin: f64) -> Result<Vec<f64>> {
    if !(panel_tol > 0.0 && h_max > 0.0 && margin >= 0.0 && margin.is_finite()) {
        return Err(Error::Domain(format!(
            "grid needs positive tolerance and spacing and a finite margin (got {panel_tol}, {h_max}, {margin})"
        )));
    }
    let m = path.m;
    let mut ends = vec![-margin, 0.0, 0.5 * m, m, m + margin];
    ends.dedup();
    let rate = |x: f64| if x > 0.5 * m && x < m { path.b.abs() } else { path.a };
    let mut grid = vec![ends[0]];
    for w in ends.windows(2).filter(|w| w[1] > w[0]) {
        let (lo, hi) = (w[0], w[1]);
        let r = rate(0.5 * (lo + hi));
        let step = |rho: f64| {
            let curv = r * r * rho;
            if curv > 0.0 {
                (12.0 * panel_tol / curv).cbrt().min(h_max)
            } else {
                h_max
            }
        };
        let mut x = lo;
        while hi - x > 1e-12 {
            let h = step(path.density(x));
            let h = step(path.density(x).max(path.density((x + h).min(hi))));
            x = if hi - x <= h { hi } else { x + h };
            grid.push(x);
        }
    }
    Ok(grid)
}
