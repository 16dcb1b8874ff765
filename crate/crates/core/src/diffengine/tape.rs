//! Matrix-valued reverse-mode tape.
//!
//! Every node holds a dense `rows x cols` block; for network evaluation the
//! columns index the batch. Spatial and time derivatives are carried as
//! ordinary nodes (forward jets built from the same primitive ops), so one
//! backward sweep yields parameter gradients of any quantity assembled from
//! them, including mixed second-order terms.

use ndarray::{Array2, Axis, Zip};

use super::swish;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Swish(Var, u8),
    SumRows(Var),
    Row(Var, usize),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar node with respect to every node on the tape.
pub struct Grads {
    grads: Vec<Option<Array2<f64>>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads[v.0].as_ref()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// A `1 x n` leaf.
    pub fn row_leaf(&mut self, values: &[f64]) -> Var {
        let a = Array2::from_shape_vec((1, values.len()), values.to_vec()).expect("row shape");
        self.leaf(a)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// `x + b` with `b` of shape `rows x 1` broadcast over columns.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let v = self.value(x) + self.value(b);
        self.push(v, Op::AddBias(x, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    /// `x * r` with `r` of shape `1 x cols` broadcast over rows.
    pub fn mul_row(&mut self, x: Var, r: Var) -> Var {
        let v = self.value(x) * self.value(r);
        self.push(v, Op::MulRow(x, r))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x) * c;
        self.push(v, Op::Scale(x, c))
    }

    /// Elementwise `order`-th derivative of swish.
    pub fn swish(&mut self, x: Var, order: u8) -> Var {
        let v = self.value(x).mapv(|z| swish(z, order));
        self.push(v, Op::Swish(x, order))
    }

    pub fn sum_rows(&mut self, x: Var) -> Var {
        let v = self.value(x).sum_axis(Axis(0)).insert_axis(Axis(0));
        self.push(v, Op::SumRows(x))
    }

    pub fn row(&mut self, x: Var, i: usize) -> Var {
        let v = self.value(x).row(i).to_owned().insert_axis(Axis(0));
        self.push(v, Op::Row(x, i))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let m = self.value(x).mean().unwrap_or(0.0);
        self.push(Array2::from_elem((1, 1), m), Op::Mean(x))
    }

    /// Reverse sweep seeded with ones at `output`.
    pub fn backward(&self, output: Var) -> Grads {
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Array2::ones(self.value(output).dim()));
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            match self.nodes[i].op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(b).t());
                    let gb = self.value(a).t().dot(&g);
                    accumulate(&mut grads, a, ga);
                    accumulate(&mut grads, b, gb);
                }
                Op::AddBias(x, b) => {
                    let gb = g.sum_axis(Axis(1)).insert_axis(Axis(1));
                    accumulate(&mut grads, b, gb);
                    accumulate(&mut grads, x, g.clone());
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, a, g.clone());
                    accumulate(&mut grads, b, g.clone());
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, b, -&g);
                    accumulate(&mut grads, a, g.clone());
                }
                Op::Mul(a, b) => {
                    let ga = &g * self.value(b);
                    let gb = &g * self.value(a);
                    accumulate(&mut grads, a, ga);
                    accumulate(&mut grads, b, gb);
                }
                Op::MulRow(x, r) => {
                    let gx = &g * self.value(r);
                    let gr = (&g * self.value(x)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads, x, gx);
                    accumulate(&mut grads, r, gr);
                }
                Op::Scale(x, c) => accumulate(&mut grads, x, &g * c),
                Op::Swish(x, order) => {
                    let mut gx = g.clone();
                    Zip::from(&mut gx)
                        .and(self.value(x))
                        .for_each(|gv, &z| *gv *= swish(z, order + 1));
                    accumulate(&mut grads, x, gx);
                }
                Op::SumRows(x) => {
                    let gx = g.broadcast(self.value(x).dim()).expect("row broadcast").to_owned();
                    accumulate(&mut grads, x, gx);
                }
                Op::Row(x, r) => {
                    let mut gx = Array2::zeros(self.value(x).dim());
                    gx.row_mut(r).assign(&g.row(0));
                    accumulate(&mut grads, x, gx);
                }
                Op::Mean(x) => {
                    let n = self.value(x).len().max(1) as f64;
                    let gx = Array2::from_elem(self.value(x).dim(), g[[0, 0]] / n);
                    accumulate(&mut grads, x, gx);
                }
            }
            grads[i] = Some(g);
        }
        Grads { grads }
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
    match &mut grads[v.0] {
        Some(acc) => *acc += &g,
        slot @ None => *slot = Some(g),
    }
}
