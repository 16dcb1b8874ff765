//! Time-conditioned swish MLPs and the derivatives the residual losses need.
//!
//! Spatial gradients, divergences, Laplacians and time partials are computed
//! exactly by pushing forward jets (value, first-order tangents and diagonal
//! second-order terms) through the network, one tangent per input
//! direction. The jets are built from [`Tape`] operations, so the parameter
//! gradient of anything assembled from them comes from a single reverse
//! sweep.

mod mlp;
mod tape;

pub use mlp::{Mlp, NetParams};
pub use tape::{Grads, Tape, Var};

use crate::error::{Error, Result};

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `order`-th derivative of `swish(z) = z * sigmoid(z)`, for `order <= 3`.
///
/// Uses `swish^(k) = k * sigmoid^(k-1) + z * sigmoid^(k)`.
pub fn swish(z: f64, order: u8) -> f64 {
    let s = sigmoid(z);
    let p = s * (1.0 - s);
    let q = 1.0 - 2.0 * s;
    match order {
        0 => z * s,
        1 => s + z * p,
        2 => 2.0 * p + z * p * q,
        3 => 3.0 * p * q + z * (p * q * q - 2.0 * p * p),
        _ => panic!("swish derivative of order {order} not supported"),
    }
}

/// Which derivative blocks a jet evaluation should carry.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct JetSpec {
    pub time: bool,
    pub space: bool,
    /// Diagonal second derivatives in every spatial direction; implies `space`.
    pub laplacian: bool,
}

impl JetSpec {
    pub const VALUE: JetSpec = JetSpec { time: false, space: false, laplacian: false };
    pub const TIME: JetSpec = JetSpec { time: true, space: false, laplacian: false };
    pub const SPACE: JetSpec = JetSpec { time: false, space: true, laplacian: false };
    pub const TIME_SPACE: JetSpec = JetSpec { time: true, space: true, laplacian: false };
    pub const FULL: JetSpec = JetSpec { time: true, space: true, laplacian: true };
}

/// Network outputs and derivatives over a batch; every block is `out x n`.
#[derive(Debug, Clone)]
pub struct NetJet {
    pub value: Var,
    pub dt: Option<Var>,
    /// `dx[i]` holds the derivative along spatial coordinate `i`.
    pub dx: Vec<Var>,
    /// `dxx[i]` holds the second derivative along spatial coordinate `i`.
    pub dxx: Vec<Var>,
}

fn single_point(tape: &mut Tape, net: &Mlp, t: f64, x: &[f64]) -> Result<(Var, ndarray::Array2<f64>)> {
    if x.len() + 1 != net.input_dim() {
        return Err(Error::Dimension { expected: net.input_dim() - 1, got: x.len() });
    }
    let xs = ndarray::Array2::from_shape_vec((x.len(), 1), x.to_vec()).expect("column");
    let trow = tape.row_leaf(&[t]);
    Ok((trow, xs))
}

/// Plain feed-forward evaluation at `(t, x)`.
pub fn forward(net: &Mlp, t: f64, x: &[f64]) -> Result<Vec<f64>> {
    net.forward(t, x)
}

/// Exact spatial gradient of a scalar-output network.
pub fn spatial_grad(net: &Mlp, t: f64, x: &[f64]) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let (trow, xs) = single_point(&mut tape, net, t, x)?;
    let p = net.register(&mut tape);
    let jet = p.jet(&mut tape, trow, &xs, JetSpec::SPACE);
    Ok(jet.dx.iter().map(|&v| tape.value(v)[[0, 0]]).collect())
}

/// Exact divergence of a vector field network (output dim = spatial dim).
pub fn divergence(field: &Mlp, t: f64, x: &[f64]) -> Result<f64> {
    if field.output_dim() != x.len() {
        return Err(Error::Dimension { expected: x.len(), got: field.output_dim() });
    }
    let mut tape = Tape::new();
    let (trow, xs) = single_point(&mut tape, field, t, x)?;
    let p = field.register(&mut tape);
    let jet = p.jet(&mut tape, trow, &xs, JetSpec::SPACE);
    Ok(jet.dx.iter().enumerate().map(|(i, &v)| tape.value(v)[[i, 0]]).sum())
}

/// Exact Laplacian in `x` of a scalar-output network.
pub fn laplacian(net: &Mlp, t: f64, x: &[f64]) -> Result<f64> {
    let mut tape = Tape::new();
    let (trow, xs) = single_point(&mut tape, net, t, x)?;
    let p = net.register(&mut tape);
    let jet = p.jet(&mut tape, trow, &xs, JetSpec { laplacian: true, ..JetSpec::SPACE });
    Ok(jet.dxx.iter().map(|&v| tape.value(v)[[0, 0]]).sum())
}

/// Exact partial derivative in `t` of every network output.
pub fn time_partial(net: &Mlp, t: f64, x: &[f64]) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let (trow, xs) = single_point(&mut tape, net, t, x)?;
    let p = net.register(&mut tape);
    let jet = p.jet(&mut tape, trow, &xs, JetSpec::TIME);
    let dt = jet.dt.expect("time tangent requested");
    Ok(tape.value(dt).column(0).to_vec())
}

/// Value and parameter gradients of a scalar loss built on a tape.
///
/// `build` receives the registered parameters of each network in `nets`
/// and must return a `1 x 1` node. Gradients come back in the same order
/// as `nets`, each laid out like [`Mlp::params`].
pub fn param_grad<F>(nets: &[&Mlp], build: F) -> Result<(f64, Vec<Vec<f64>>)>
where
    F: FnOnce(&mut Tape, &[NetParams]) -> Var,
{
    let mut tape = Tape::new();
    let registered: Vec<NetParams> = nets.iter().map(|n| n.register(&mut tape)).collect();
    let out = build(&mut tape, &registered);
    let value = tape.value(out)[[0, 0]];
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("loss evaluated to {value}")));
    }
    let grads = tape.backward(out);
    let flat = registered
        .iter()
        .zip(nets)
        .map(|(p, n)| p.gradient(&grads, n))
        .collect();
    Ok((value, flat))
}
