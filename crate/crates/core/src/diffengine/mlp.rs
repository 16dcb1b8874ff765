use ndarray::{Array2, ArrayView2};
use rand::Rng;

use super::tape::{Grads, Tape, Var};
use super::{swish, JetSpec, NetJet};
use crate::error::{Error, Result};

/// Fully connected network with swish hidden activations and a linear head.
///
/// Input layout is `(t, x_1, ..., x_d)`. Parameters are stored flat, layer
/// by layer, each layer as its weight matrix (row-major, `out x in`)
/// followed by its bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    widths: Vec<usize>,
    params: Vec<f64>,
}

impl Mlp {
    pub fn param_count(widths: &[usize]) -> usize {
        widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    fn check_widths(widths: &[usize]) -> Result<()> {
        if widths.len() < 2 || widths.iter().any(|&w| w == 0) {
            return Err(Error::Config(format!("invalid layer widths {widths:?}")));
        }
        Ok(())
    }

    /// Weights uniform in `±1/sqrt(fan_in)`, biases zero.
    pub fn new<R: Rng + ?Sized>(widths: &[usize], rng: &mut R) -> Result<Self> {
        Self::check_widths(widths)?;
        let mut params = Vec::with_capacity(Self::param_count(widths));
        for w in widths.windows(2) {
            let bound = 1.0 / (w[0] as f64).sqrt();
            params.extend((0..w[0] * w[1]).map(|_| rng.gen_range(-bound..bound)));
            params.extend(std::iter::repeat(0.0).take(w[1]));
        }
        Ok(Self { widths: widths.to_vec(), params })
    }

    pub fn zeros(widths: &[usize]) -> Result<Self> {
        Self::check_widths(widths)?;
        Ok(Self { widths: widths.to_vec(), params: vec![0.0; Self::param_count(widths)] })
    }

    pub fn from_params(widths: &[usize], params: Vec<f64>) -> Result<Self> {
        Self::check_widths(widths)?;
        let expected = Self::param_count(widths);
        if params.len() != expected {
            return Err(Error::Dimension { expected, got: params.len() });
        }
        Ok(Self { widths: widths.to_vec(), params })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().expect("non-empty widths")
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// `(weights, bias)` views for every layer.
    pub fn layers(&self) -> Vec<(ArrayView2<'_, f64>, ArrayView2<'_, f64>)> {
        let mut off = 0;
        self.widths
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let weights = ArrayView2::from_shape((fan_out, fan_in), &self.params[off..off + fan_in * fan_out])
                    .expect("weight block");
                off += fan_in * fan_out;
                let bias = ArrayView2::from_shape((fan_out, 1), &self.params[off..off + fan_out]).expect("bias block");
                off += fan_out;
                (weights, bias)
            })
            .collect()
    }

    pub fn forward(&self, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() + 1 != self.input_dim() {
            return Err(Error::Dimension { expected: self.input_dim() - 1, got: x.len() });
        }
        let mut input = Vec::with_capacity(x.len() + 1);
        input.push(t);
        input.extend_from_slice(x);
        let mut a = Array2::from_shape_vec((input.len(), 1), input).expect("column");
        let layers = self.layers();
        let last = layers.len() - 1;
        for (l, (w, b)) in layers.into_iter().enumerate() {
            let z = w.dot(&a) + b;
            a = if l == last { z } else { z.mapv(|v| swish(v, 0)) };
        }
        Ok(a.column(0).to_vec())
    }

    /// Put every weight and bias on `tape` as a leaf.
    pub fn register(&self, tape: &mut Tape) -> NetParams {
        let layers = self
            .layers()
            .into_iter()
            .map(|(w, b)| (tape.leaf(w.to_owned()), tape.leaf(b.to_owned())))
            .collect();
        NetParams { layers, input_dim: self.input_dim() }
    }
}

/// Network parameters registered on a tape.
#[derive(Debug, Clone)]
pub struct NetParams {
    layers: Vec<(Var, Var)>,
    input_dim: usize,
}

impl NetParams {
    /// Evaluate on a batch: `t` is a `1 x n` node, `x` is `d x n` (may have
    /// zero rows for time-only networks).
    pub fn jet(&self, tape: &mut Tape, t: Var, x: &Array2<f64>, spec: JetSpec) -> NetJet {
        let (d, n) = x.dim();
        assert_eq!(d + 1, self.input_dim, "network input width");
        assert_eq!(tape.shape(t), (1, n), "time row shape");
        let mut input = Array2::zeros((d + 1, n));
        input.row_mut(0).assign(&tape.value(t).row(0));
        input.slice_mut(ndarray::s![1.., ..]).assign(x);
        let mut a = tape.leaf(input);

        let space = spec.space || spec.laplacian;
        let basis = |tape: &mut Tape, k: usize| {
            let mut e = Array2::zeros((d + 1, n));
            e.row_mut(k).fill(1.0);
            tape.leaf(e)
        };
        let mut at = spec.time.then(|| basis(tape, 0));
        let mut ax: Vec<Var> = if space { (1..=d).map(|k| basis(tape, k)).collect() } else { Vec::new() };
        let mut axx: Vec<Option<Var>> = if spec.laplacian { vec![None; d] } else { Vec::new() };

        let last = self.layers.len() - 1;
        for (l, &(w, b)) in self.layers.iter().enumerate() {
            let z0 = tape.matmul(w, a);
            let z = tape.add_bias(z0, b);
            let zt = at.map(|v| tape.matmul(w, v));
            let zx: Vec<Var> = ax.iter().map(|&v| tape.matmul(w, v)).collect();
            let zxx: Vec<Option<Var>> = axx.iter().map(|v| v.map(|v| tape.matmul(w, v))).collect();
            if l == last {
                let out = tape.shape(z);
                let dxx = zxx
                    .into_iter()
                    .map(|v| v.unwrap_or_else(|| tape.leaf(Array2::zeros(out))))
                    .collect();
                return NetJet { value: z, dt: zt, dx: zx, dxx };
            }
            let s1 = (spec.time || space).then(|| tape.swish(z, 1));
            let s2 = spec.laplacian.then(|| tape.swish(z, 2));
            a = tape.swish(z, 0);
            at = zt.map(|v| tape.mul(s1.expect("s1"), v));
            if spec.laplacian {
                let s1 = s1.expect("s1");
                let s2 = s2.expect("s2");
                axx = zx
                    .iter()
                    .zip(&zxx)
                    .map(|(&g, h)| {
                        let gg = tape.mul(g, g);
                        let curv = tape.mul(s2, gg);
                        Some(match h {
                            Some(h) => {
                                let lin = tape.mul(s1, *h);
                                tape.add(curv, lin)
                            }
                            None => curv,
                        })
                    })
                    .collect();
            }
            ax = zx.iter().map(|&v| tape.mul(s1.expect("s1"), v)).collect();
        }
        unreachable!("network has at least one layer")
    }

    /// Flatten the gradients of this network's leaves in parameter order.
    pub fn gradient(&self, grads: &Grads, net: &Mlp) -> Vec<f64> {
        let mut out = Vec::with_capacity(net.params.len());
        for (&(w, b), (wv, bv)) in self.layers.iter().zip(net.layers()) {
            match grads.get(w) {
                Some(g) => out.extend(g.iter().copied()),
                None => out.extend(std::iter::repeat(0.0).take(wv.len())),
            }
            match grads.get(b) {
                Some(g) => out.extend(g.iter().copied()),
                None => out.extend(std::iter::repeat(0.0).take(bv.len())),
            }
        }
        out
    }
}
