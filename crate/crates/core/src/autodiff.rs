//! Reverse-mode automatic differentiation on a flat tape of `f64` arrays.
//!
//! Each training step builds a fresh [`Tape`]: leaves for parameters and
//! batch data, then ops up to a scalar loss. [`Tape::backward`] walks the
//! tape once in reverse and returns a gradient per node. Everything is
//! double precision and single-threaded, so forward values and gradients
//! are bit-reproducible.
//!
//! The op set is deliberately small: dense 2-D linear algebra, elementwise
//! maps, row gathers/concats for ragged batches, and the two 4-D ops the
//! pixel decoder needs (3x3/1x1 convolution and bilinear resize).

use ndarray::{Array2, Array4, ArrayD, ArrayView2, ArrayView4, Axis, Ix2, Ix4, IxDyn};
use std::cell::RefCell;

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Var {
    idx: usize,
}

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    /// a (n x m) plus a row vector (1 x m) broadcast over rows.
    AddRow(usize, usize),
    /// Elementwise product with a constant array (masking, weighting).
    MulConst(usize, ArrayD<f64>),
    Scale(usize, f64),
    AddScalar(usize),
    /// a + k * s, with s a single-element node broadcast over a.
    AddScalarVar(usize, usize, f64),
    /// a / s, with s a single-element node.
    DivScalarVar(usize, usize),
    MatMul(usize, usize),
    Transpose(usize),
    RowSums(usize),
    ColSums(usize),
    SumAll(usize),
    MaxAll(usize),
    RowMaxes(usize),
    BroadcastCol(usize),
    BroadcastRow(usize),
    Relu(usize),
    Sigmoid(usize),
    Exp(usize),
    Ln(usize),
    Sqrt(usize),
    Abs(usize),
    NormalizeRows(usize),
    StopGrad,
    GatherRows(usize, Vec<usize>),
    ConcatRows(Vec<usize>),
    ConcatCols(usize, usize),
    Reshape(usize),
    /// (b*g*g) x d row matrix to a (b, d, g, g) feature grid.
    GridFromRows { src: usize, batch: usize, grid: usize },
    Conv2d { x: usize, w: usize, b: usize, pad: usize },
    BilinearResize { x: usize, dst_h: usize, dst_w: usize },
}

struct Node {
    value: ArrayD<f64>,
    op: Op,
}

/// Gradients of a scalar node with respect to every tape node.
pub struct Gradients {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` if the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&ArrayD<f64>> {
        self.grads[v.idx].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<ArrayD<f64>> {
        self.grads[v.idx].take()
    }
}

pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

fn a2(v: &ArrayD<f64>) -> ArrayView2<'_, f64> {
    v.view().into_dimensionality::<Ix2>().expect("expected 2-d value")
}

fn a4(v: &ArrayD<f64>) -> ArrayView4<'_, f64> {
    v.view().into_dimensionality::<Ix4>().expect("expected 4-d value")
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()) }
    }

    fn push(&self, value: ArrayD<f64>, op: Op) -> Var {
        // Keep every node value in standard (row-major) layout; views like
        // transpose otherwise leak F-layout arrays into slice-based code.
        let value = if value.is_standard_layout() {
            value
        } else {
            value.as_standard_layout().into_owned()
        };
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var { idx: nodes.len() - 1 }
    }

    /// Tracked leaf: parameters and anything gradients are wanted for.
    pub fn var(&self, value: ArrayD<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Untracked input. Mechanically identical to [`Tape::var`]; the name
    /// records intent at call sites.
    pub fn constant(&self, value: ArrayD<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn var2(&self, value: Array2<f64>) -> Var {
        self.var(value.into_dyn())
    }

    pub fn constant2(&self, value: Array2<f64>) -> Var {
        self.constant(value.into_dyn())
    }

    pub fn value(&self, v: Var) -> ArrayD<f64> {
        self.nodes.borrow()[v.idx].value.clone()
    }

    pub fn value2(&self, v: Var) -> Array2<f64> {
        a2(&self.nodes.borrow()[v.idx].value).to_owned()
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        let nodes = self.nodes.borrow();
        let val = &nodes[v.idx].value;
        assert_eq!(val.len(), 1, "scalar() on non-scalar node");
        val.iter().next().copied().unwrap()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.idx].value.shape().to_vec()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn with2<R>(&self, v: Var, f: impl FnOnce(ArrayView2<'_, f64>) -> R) -> R {
        let nodes = self.nodes.borrow();
        f(a2(&nodes[v.idx].value))
    }

    // ---- elementwise and broadcast arithmetic ----

    pub fn add(&self, a: Var, b: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            assert_eq!(nodes[a.idx].value.shape(), nodes[b.idx].value.shape(), "add shape");
            &nodes[a.idx].value + &nodes[b.idx].value
        };
        self.push(value, Op::Add(a.idx, b.idx))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            assert_eq!(nodes[a.idx].value.shape(), nodes[b.idx].value.shape(), "sub shape");
            &nodes[a.idx].value - &nodes[b.idx].value
        };
        self.push(value, Op::Sub(a.idx, b.idx))
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            assert_eq!(nodes[a.idx].value.shape(), nodes[b.idx].value.shape(), "mul shape");
            &nodes[a.idx].value * &nodes[b.idx].value
        };
        self.push(value, Op::Mul(a.idx, b.idx))
    }

    pub fn div(&self, a: Var, b: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            assert_eq!(nodes[a.idx].value.shape(), nodes[b.idx].value.shape(), "div shape");
            &nodes[a.idx].value / &nodes[b.idx].value
        };
        self.push(value, Op::Div(a.idx, b.idx))
    }

    /// `a` (n x m) with row vector `b` (1 x m) added to every row.
    pub fn add_row(&self, a: Var, b: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let av = a2(&nodes[a.idx].value);
            let bv = a2(&nodes[b.idx].value);
            assert_eq!(bv.nrows(), 1, "add_row rhs must be 1 x m");
            assert_eq!(av.ncols(), bv.ncols(), "add_row width");
            (&av + &bv.broadcast((av.nrows(), av.ncols())).unwrap()).into_dyn()
        };
        self.push(value, Op::AddRow(a.idx, b.idx))
    }

    pub fn mul_const(&self, a: Var, c: ArrayD<f64>) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            assert_eq!(nodes[a.idx].value.shape(), c.shape(), "mul_const shape");
            &nodes[a.idx].value * &c
        };
        self.push(value, Op::MulConst(a.idx, c))
    }

    pub fn scale(&self, a: Var, k: f64) -> Var {
        let value = self.nodes.borrow()[a.idx].value.mapv(|x| x * k);
        self.push(value, Op::Scale(a.idx, k))
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Var {
        let value = self.nodes.borrow()[a.idx].value.mapv(|x| x + c);
        self.push(value, Op::AddScalar(a.idx))
    }

    /// a + k * s where s is a single-element node.
    pub fn add_scalar_var(&self, a: Var, s: Var, k: f64) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let sv = nodes[s.idx].value.iter().next().copied().unwrap();
            assert_eq!(nodes[s.idx].value.len(), 1, "add_scalar_var rhs");
            nodes[a.idx].value.mapv(|x| x + k * sv)
        };
        self.push(value, Op::AddScalarVar(a.idx, s.idx, k))
    }

    /// a / s where s is a single-element node.
    pub fn div_scalar_var(&self, a: Var, s: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            assert_eq!(nodes[s.idx].value.len(), 1, "div_scalar_var rhs");
            let sv = nodes[s.idx].value.iter().next().copied().unwrap();
            nodes[a.idx].value.mapv(|x| x / sv)
        };
        self.push(value, Op::DivScalarVar(a.idx, s.idx))
    }

    // ---- linear algebra ----

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let av = a2(&nodes[a.idx].value);
            let bv = a2(&nodes[b.idx].value);
            assert_eq!(av.ncols(), bv.nrows(), "matmul inner dims");
            av.dot(&bv).into_dyn()
        };
        self.push(value, Op::MatMul(a.idx, b.idx))
    }

    pub fn transpose(&self, a: Var) -> Var {
        let value = self.with2(a, |av| av.t().to_owned().into_dyn());
        self.push(value, Op::Transpose(a.idx))
    }

    pub fn row_sums(&self, a: Var) -> Var {
        let value = self.with2(a, |av| {
            av.sum_axis(Axis(1)).insert_axis(Axis(1)).into_dyn()
        });
        self.push(value, Op::RowSums(a.idx))
    }

    pub fn col_sums(&self, a: Var) -> Var {
        let value = self.with2(a, |av| {
            av.sum_axis(Axis(0)).insert_axis(Axis(0)).into_dyn()
        });
        self.push(value, Op::ColSums(a.idx))
    }

    pub fn sum_all(&self, a: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            ArrayD::from_elem(IxDyn(&[1]), nodes[a.idx].value.sum())
        };
        self.push(value, Op::SumAll(a.idx))
    }

    pub fn mean_all(&self, a: Var) -> Var {
        let n = self.nodes.borrow()[a.idx].value.len();
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n as f64)
    }

    pub fn max_all(&self, a: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let m = nodes[a.idx].value.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            ArrayD::from_elem(IxDyn(&[1]), m)
        };
        self.push(value, Op::MaxAll(a.idx))
    }

    pub fn row_maxes(&self, a: Var) -> Var {
        let value = self.with2(a, |av| {
            let maxes: Vec<f64> = av
                .rows()
                .into_iter()
                .map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max))
                .collect();
            Array2::from_shape_vec((av.nrows(), 1), maxes).unwrap().into_dyn()
        });
        self.push(value, Op::RowMaxes(a.idx))
    }

    /// n x 1 column broadcast to n x m.
    pub fn broadcast_col(&self, a: Var, m: usize) -> Var {
        let value = self.with2(a, |av| {
            assert_eq!(av.ncols(), 1, "broadcast_col expects n x 1");
            av.broadcast((av.nrows(), m)).unwrap().to_owned().into_dyn()
        });
        self.push(value, Op::BroadcastCol(a.idx))
    }

    /// 1 x m row broadcast to n x m.
    pub fn broadcast_row(&self, a: Var, n: usize) -> Var {
        let value = self.with2(a, |av| {
            assert_eq!(av.nrows(), 1, "broadcast_row expects 1 x m");
            av.broadcast((n, av.ncols())).unwrap().to_owned().into_dyn()
        });
        self.push(value, Op::BroadcastRow(a.idx))
    }

    // ---- elementwise maps ----

    pub fn relu(&self, a: Var) -> Var {
        let value = self.nodes.borrow()[a.idx].value.mapv(|x| x.max(0.0));
        self.push(value, Op::Relu(a.idx))
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let value = self.nodes.borrow()[a.idx].value.mapv(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(value, Op::Sigmoid(a.idx))
    }

    pub fn exp(&self, a: Var) -> Var {
        let value = self.nodes.borrow()[a.idx].value.mapv(f64::exp);
        debug_assert!(value.iter().all(|x| x.is_finite()), "exp overflow");
        self.push(value, Op::Exp(a.idx))
    }

    pub fn ln(&self, a: Var) -> Var {
        let value = self.nodes.borrow()[a.idx].value.mapv(f64::ln);
        self.push(value, Op::Ln(a.idx))
    }

    pub fn sqrt(&self, a: Var) -> Var {
        let value = self.nodes.borrow()[a.idx].value.mapv(f64::sqrt);
        self.push(value, Op::Sqrt(a.idx))
    }

    pub fn abs(&self, a: Var) -> Var {
        let value = self.nodes.borrow()[a.idx].value.mapv(f64::abs);
        self.push(value, Op::Abs(a.idx))
    }

    /// Rows rescaled to unit L2 norm. Rows must be nonzero; callers validate.
    pub fn normalize_rows(&self, a: Var) -> Var {
        let value = self.with2(a, |av| {
            let mut out = av.to_owned();
            for mut row in out.rows_mut() {
                let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                assert!(norm > 0.0, "normalize_rows: zero-norm row");
                row.mapv_inplace(|x| x / norm);
            }
            out.into_dyn()
        });
        self.push(value, Op::NormalizeRows(a.idx))
    }

    /// Identity forward, zero backward.
    pub fn stop_grad(&self, a: Var) -> Var {
        let value = self.nodes.borrow()[a.idx].value.clone();
        self.push(value, Op::StopGrad)
    }

    // ---- structure ----

    pub fn gather_rows(&self, a: Var, indices: &[usize]) -> Var {
        let value = self.with2(a, |av| {
            let mut out = Array2::zeros((indices.len(), av.ncols()));
            for (i, &src) in indices.iter().enumerate() {
                out.row_mut(i).assign(&av.row(src));
            }
            out.into_dyn()
        });
        self.push(value, Op::GatherRows(a.idx, indices.to_vec()))
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let value = {
            let nodes = self.nodes.borrow();
            let views: Vec<ArrayView2<'_, f64>> =
                parts.iter().map(|v| a2(&nodes[v.idx].value)).collect();
            ndarray::concatenate(
                Axis(0),
                &views.iter().map(|v| v.view()).collect::<Vec<_>>(),
            )
            .expect("concat_rows width")
            .into_dyn()
        };
        self.push(value, Op::ConcatRows(parts.iter().map(|v| v.idx).collect()))
    }

    pub fn concat_cols(&self, a: Var, b: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let av = a2(&nodes[a.idx].value);
            let bv = a2(&nodes[b.idx].value);
            assert_eq!(av.nrows(), bv.nrows(), "concat_cols heights");
            ndarray::concatenate(Axis(1), &[av.view(), bv.view()])
                .unwrap()
                .into_dyn()
        };
        self.push(value, Op::ConcatCols(a.idx, b.idx))
    }

    pub fn reshape(&self, a: Var, dims: &[usize]) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let v = &nodes[a.idx].value;
            assert_eq!(v.len(), dims.iter().product::<usize>(), "reshape numel");
            v.to_owned()
                .into_shape_with_order(IxDyn(dims))
                .expect("reshape layout")
        };
        self.push(value, Op::Reshape(a.idx))
    }

    /// Rows laid out (sample-major, then row-major over the grid) into a
    /// (batch, d, grid, grid) tensor for the decoder.
    pub fn grid_from_rows(&self, a: Var, batch: usize, grid: usize) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let av = a2(&nodes[a.idx].value);
            let d = av.ncols();
            assert_eq!(av.nrows(), batch * grid * grid, "grid_from_rows rows");
            let mut out = Array4::zeros((batch, d, grid, grid));
            for b in 0..batch {
                for y in 0..grid {
                    for x in 0..grid {
                        let row = av.row(b * grid * grid + y * grid + x);
                        for c in 0..d {
                            out[[b, c, y, x]] = row[c];
                        }
                    }
                }
            }
            out.into_dyn()
        };
        self.push(value, Op::GridFromRows { src: a.idx, batch, grid })
    }

    /// Same-stride 2-D convolution, NCHW input, (out, in, kh, kw) weights.
    pub fn conv2d(&self, x: Var, w: Var, b: Var, pad: usize) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let xv = a4(&nodes[x.idx].value);
            let wv = a4(&nodes[w.idx].value);
            let bv = &nodes[b.idx].value;
            conv2d_forward(xv, wv, bv.as_slice().unwrap(), pad).into_dyn()
        };
        self.push(value, Op::Conv2d { x: x.idx, w: w.idx, b: b.idx, pad })
    }

    /// Bilinear resize with half-pixel centers (NCHW).
    pub fn bilinear_resize(&self, x: Var, dst_h: usize, dst_w: usize) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let xv = a4(&nodes[x.idx].value);
            bilinear_forward(xv, dst_h, dst_w).into_dyn()
        };
        self.push(value, Op::BilinearResize { x: x.idx, dst_h, dst_w })
    }

    // ---- composites ----

    /// Row-wise softmax with max-shift stabilization (shift is a constant
    /// under differentiation; softmax is shift-invariant so the gradient is
    /// exact).
    pub fn softmax_rows(&self, a: Var) -> Var {
        let m = self.row_maxes(a);
        let m = self.stop_grad(m);
        let cols = self.shape(a)[1];
        let shifted = self.sub(a, self.broadcast_col(m, cols));
        let e = self.exp(shifted);
        let den = self.row_sums(e);
        self.div(e, self.broadcast_col(den, cols))
    }

    // ---- backward ----

    /// Gradients of the single-element node `loss` w.r.t. every node.
    pub fn backward(&self, loss: Var) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.idx].value.len(), 1, "backward from non-scalar");
        let mut grads: Vec<Option<ArrayD<f64>>> = vec![None; nodes.len()];
        grads[loss.idx] = Some(ArrayD::from_elem(nodes[loss.idx].value.raw_dim(), 1.0));

        for idx in (0..=loss.idx).rev() {
            let Some(g) = grads[idx].clone() else { continue };
            match &nodes[idx].op {
                Op::Leaf => continue,
                Op::Add(a, b) => {
                    acc(&mut grads[*a], g.clone());
                    acc(&mut grads[*b], g.clone());
                }
                Op::Sub(a, b) => {
                    acc(&mut grads[*a], g.clone());
                    acc(&mut grads[*b], g.mapv(|x| -x));
                }
                Op::Mul(a, b) => {
                    acc(&mut grads[*a], &g * &nodes[*b].value);
                    acc(&mut grads[*b], &g * &nodes[*a].value);
                }
                Op::Div(a, b) => {
                    let bv = &nodes[*b].value;
                    acc(&mut grads[*a], &g / bv);
                    let da = &g * &nodes[*a].value;
                    acc(&mut grads[*b], -&da / &(bv * bv));
                }
                Op::AddRow(a, b) => {
                    acc(&mut grads[*a], g.clone());
                    let gv = a2(&g);
                    acc(&mut grads[*b], gv.sum_axis(Axis(0)).insert_axis(Axis(0)).into_dyn());
                }
                Op::MulConst(a, c) => {
                    acc(&mut grads[*a], &g * c);
                }
                Op::Scale(a, k) => {
                    acc(&mut grads[*a], g.mapv(|x| x * k));
                }
                Op::AddScalar(a) => {
                    acc(&mut grads[*a], g.clone());
                }
                Op::AddScalarVar(a, s, k) => {
                    acc(&mut grads[*a], g.clone());
                    let total = g.sum() * k;
                    acc(&mut grads[*s], scalar_like(&nodes[*s].value, total));
                }
                Op::DivScalarVar(a, s) => {
                    let sv = nodes[*s].value.iter().next().copied().unwrap();
                    acc(&mut grads[*a], g.mapv(|x| x / sv));
                    let num = (&g * &nodes[*a].value).sum();
                    acc(&mut grads[*s], scalar_like(&nodes[*s].value, -num / (sv * sv)));
                }
                Op::MatMul(a, b) => {
                    let gv = a2(&g);
                    let av = a2(&nodes[*a].value);
                    let bv = a2(&nodes[*b].value);
                    acc(&mut grads[*a], gv.dot(&bv.t()).into_dyn());
                    acc(&mut grads[*b], av.t().dot(&gv).into_dyn());
                }
                Op::Transpose(a) => {
                    acc(&mut grads[*a], a2(&g).t().to_owned().into_dyn());
                }
                Op::RowSums(a) => {
                    let av = a2(&nodes[*a].value);
                    let gv = a2(&g);
                    acc(
                        &mut grads[*a],
                        gv.broadcast((av.nrows(), av.ncols())).unwrap().to_owned().into_dyn(),
                    );
                }
                Op::ColSums(a) => {
                    let av = a2(&nodes[*a].value);
                    let gv = a2(&g);
                    acc(
                        &mut grads[*a],
                        gv.broadcast((av.nrows(), av.ncols())).unwrap().to_owned().into_dyn(),
                    );
                }
                Op::SumAll(a) => {
                    let gs = g.iter().next().copied().unwrap();
                    acc(&mut grads[*a], nodes[*a].value.mapv(|_| gs));
                }
                Op::MaxAll(a) => {
                    // Subgradient: all mass on the first maximizer.
                    let gs = g.iter().next().copied().unwrap();
                    let av = &nodes[*a].value;
                    let m = av.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let mut out = ArrayD::zeros(av.raw_dim());
                    let pos = av.iter().position(|&x| x == m).unwrap();
                    out.as_slice_mut().unwrap()[pos] = gs;
                    acc(&mut grads[*a], out);
                }
                Op::RowMaxes(a) => {
                    let av = a2(&nodes[*a].value);
                    let gv = a2(&g);
                    let mut out = Array2::zeros((av.nrows(), av.ncols()));
                    for (r, row) in av.rows().into_iter().enumerate() {
                        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        let pos = row.iter().position(|&x| x == m).unwrap();
                        out[[r, pos]] = gv[[r, 0]];
                    }
                    acc(&mut grads[*a], out.into_dyn());
                }
                Op::BroadcastCol(a) => {
                    let gv = a2(&g);
                    acc(&mut grads[*a], gv.sum_axis(Axis(1)).insert_axis(Axis(1)).into_dyn());
                }
                Op::BroadcastRow(a) => {
                    let gv = a2(&g);
                    acc(&mut grads[*a], gv.sum_axis(Axis(0)).insert_axis(Axis(0)).into_dyn());
                }
                Op::Relu(a) => {
                    let mask = nodes[*a].value.mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                    acc(&mut grads[*a], &g * &mask);
                }
                Op::Sigmoid(a) => {
                    let y = &nodes[idx].value;
                    acc(&mut grads[*a], &g * &(y * &y.mapv(|v| 1.0 - v)));
                }
                Op::Exp(a) => {
                    acc(&mut grads[*a], &g * &nodes[idx].value);
                }
                Op::Ln(a) => {
                    acc(&mut grads[*a], &g / &nodes[*a].value);
                }
                Op::Sqrt(a) => {
                    let y = &nodes[idx].value;
                    acc(&mut grads[*a], &g / &y.mapv(|v| 2.0 * v));
                }
                Op::Abs(a) => {
                    let sign = nodes[*a].value.mapv(|x| {
                        if x > 0.0 {
                            1.0
                        } else if x < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    });
                    acc(&mut grads[*a], &g * &sign);
                }
                Op::NormalizeRows(a) => {
                    let av = a2(&nodes[*a].value);
                    let yv = a2(&nodes[idx].value);
                    let gv = a2(&g);
                    let mut out = Array2::zeros((av.nrows(), av.ncols()));
                    for r in 0..av.nrows() {
                        let norm = av.row(r).iter().map(|x| x * x).sum::<f64>().sqrt();
                        let y = yv.row(r);
                        let gr = gv.row(r);
                        let dot = y.iter().zip(gr.iter()).map(|(a, b)| a * b).sum::<f64>();
                        for c in 0..av.ncols() {
                            out[[r, c]] = (gr[c] - y[c] * dot) / norm;
                        }
                    }
                    acc(&mut grads[*a], out.into_dyn());
                }
                Op::StopGrad => {}
                Op::GatherRows(a, indices) => {
                    let av = a2(&nodes[*a].value);
                    let gv = a2(&g);
                    let mut out = Array2::zeros((av.nrows(), av.ncols()));
                    for (i, &src) in indices.iter().enumerate() {
                        let mut row = out.row_mut(src);
                        row += &gv.row(i);
                    }
                    acc(&mut grads[*a], out.into_dyn());
                }
                Op::ConcatRows(parts) => {
                    let gv = a2(&g);
                    let mut offset = 0;
                    for &p in parts {
                        let rows = a2(&nodes[p].value).nrows();
                        let slice = gv.slice(ndarray::s![offset..offset + rows, ..]);
                        acc(&mut grads[p], slice.to_owned().into_dyn());
                        offset += rows;
                    }
                }
                Op::ConcatCols(a, b) => {
                    let gv = a2(&g);
                    let aw = a2(&nodes[*a].value).ncols();
                    acc(&mut grads[*a], gv.slice(ndarray::s![.., ..aw]).to_owned().into_dyn());
                    acc(&mut grads[*b], gv.slice(ndarray::s![.., aw..]).to_owned().into_dyn());
                }
                Op::Reshape(a) => {
                    let dims = nodes[*a].value.shape().to_vec();
                    acc(
                        &mut grads[*a],
                        g.to_owned().into_shape_with_order(IxDyn(&dims)).unwrap(),
                    );
                }
                Op::GridFromRows { src, batch, grid } => {
                    let gv = a4(&g);
                    let d = gv.shape()[1];
                    let mut out = Array2::zeros((batch * grid * grid, d));
                    for b in 0..*batch {
                        for y in 0..*grid {
                            for x in 0..*grid {
                                let row = b * grid * grid + y * grid + x;
                                for c in 0..d {
                                    out[[row, c]] += gv[[b, c, y, x]];
                                }
                            }
                        }
                    }
                    acc(&mut grads[*src], out.into_dyn());
                }
                Op::Conv2d { x, w, b, pad } => {
                    let gv = a4(&g);
                    let xv = a4(&nodes[*x].value);
                    let wv = a4(&nodes[*w].value);
                    let (dx, dw, db) = conv2d_backward(xv, wv, gv, *pad);
                    acc(&mut grads[*x], dx.into_dyn());
                    acc(&mut grads[*w], dw.into_dyn());
                    acc(&mut grads[*b], db);
                }
                Op::BilinearResize { x, dst_h, dst_w } => {
                    let gv = a4(&g);
                    let xv = a4(&nodes[*x].value);
                    let dx = bilinear_backward(xv.shape(), gv, *dst_h, *dst_w);
                    acc(&mut grads[*x], dx.into_dyn());
                }
            }
        }
        Gradients { grads }
    }
}

fn acc(slot: &mut Option<ArrayD<f64>>, g: ArrayD<f64>) {
    match slot {
        Some(existing) => *existing += &g,
        None => {
            *slot = Some(if g.is_standard_layout() {
                g
            } else {
                g.as_standard_layout().into_owned()
            })
        }
    }
}

fn scalar_like(template: &ArrayD<f64>, v: f64) -> ArrayD<f64> {
    ArrayD::from_elem(template.raw_dim(), v)
}

fn conv2d_forward(
    x: ArrayView4<'_, f64>,
    w: ArrayView4<'_, f64>,
    bias: &[f64],
    pad: usize,
) -> Array4<f64> {
    let (bn, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, cin_w, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    assert_eq!(cin, cin_w, "conv2d channel mismatch");
    assert_eq!(bias.len(), cout, "conv2d bias length");
    let oh = h + 2 * pad + 1 - kh;
    let ow = wd + 2 * pad + 1 - kw;
    let mut out = Array4::zeros((bn, cout, oh, ow));
    for b in 0..bn {
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias[co];
                    for ci in 0..cin {
                        for ky in 0..kh {
                            let iy = oy + ky;
                            if iy < pad || iy >= h + pad {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = ox + kx;
                                if ix < pad || ix >= wd + pad {
                                    continue;
                                }
                                acc += w[[co, ci, ky, kx]] * x[[b, ci, iy - pad, ix - pad]];
                            }
                        }
                    }
                    out[[b, co, oy, ox]] = acc;
                }
            }
        }
    }
    out
}

fn conv2d_backward(
    x: ArrayView4<'_, f64>,
    w: ArrayView4<'_, f64>,
    g: ArrayView4<'_, f64>,
    pad: usize,
) -> (Array4<f64>, Array4<f64>, ArrayD<f64>) {
    let (bn, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, _, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let (oh, ow) = (g.shape()[2], g.shape()[3]);
    let mut dx = Array4::zeros((bn, cin, h, wd));
    let mut dw = Array4::zeros(w.raw_dim());
    let mut db = vec![0.0; cout];
    for b in 0..bn {
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let go = g[[b, co, oy, ox]];
                    if go == 0.0 {
                        continue;
                    }
                    db[co] += go;
                    for ci in 0..cin {
                        for ky in 0..kh {
                            let iy = oy + ky;
                            if iy < pad || iy >= h + pad {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = ox + kx;
                                if ix < pad || ix >= wd + pad {
                                    continue;
                                }
                                let xv = x[[b, ci, iy - pad, ix - pad]];
                                dw[[co, ci, ky, kx]] += go * xv;
                                dx[[b, ci, iy - pad, ix - pad]] += go * w[[co, ci, ky, kx]];
                            }
                        }
                    }
                }
            }
        }
    }
    let db = ArrayD::from_shape_vec(IxDyn(&[cout]), db).unwrap();
    (dx, dw, db)
}

/// Source coordinates and weights for one output position, half-pixel
/// convention, edges clamped.
fn bilinear_taps(dst: usize, src: usize, o: usize) -> (usize, usize, f64) {
    let s = (o as f64 + 0.5) * (src as f64 / dst as f64) - 0.5;
    let s = s.clamp(0.0, (src - 1) as f64);
    let lo = s.floor() as usize;
    let hi = (lo + 1).min(src - 1);
    (lo, hi, s - lo as f64)
}

fn bilinear_forward(x: ArrayView4<'_, f64>, dst_h: usize, dst_w: usize) -> Array4<f64> {
    let (bn, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let mut out = Array4::zeros((bn, c, dst_h, dst_w));
    for oy in 0..dst_h {
        let (y0, y1, fy) = bilinear_taps(dst_h, h, oy);
        for ox in 0..dst_w {
            let (x0, x1, fx) = bilinear_taps(dst_w, w, ox);
            for b in 0..bn {
                for ch in 0..c {
                    let v = (1.0 - fy) * (1.0 - fx) * x[[b, ch, y0, x0]]
                        + (1.0 - fy) * fx * x[[b, ch, y0, x1]]
                        + fy * (1.0 - fx) * x[[b, ch, y1, x0]]
                        + fy * fx * x[[b, ch, y1, x1]];
                    out[[b, ch, oy, ox]] = v;
                }
            }
        }
    }
    out
}

fn bilinear_backward(
    src_shape: &[usize],
    g: ArrayView4<'_, f64>,
    dst_h: usize,
    dst_w: usize,
) -> Array4<f64> {
    let (bn, c, h, w) = (src_shape[0], src_shape[1], src_shape[2], src_shape[3]);
    let mut dx = Array4::zeros((bn, c, h, w));
    for oy in 0..dst_h {
        let (y0, y1, fy) = bilinear_taps(dst_h, h, oy);
        for ox in 0..dst_w {
            let (x0, x1, fx) = bilinear_taps(dst_w, w, ox);
            for b in 0..bn {
                for ch in 0..c {
                    let go = g[[b, ch, oy, ox]];
                    dx[[b, ch, y0, x0]] += go * (1.0 - fy) * (1.0 - fx);
                    dx[[b, ch, y0, x1]] += go * (1.0 - fy) * fx;
                    dx[[b, ch, y1, x0]] += go * fy * (1.0 - fx);
                    dx[[b, ch, y1, x1]] += go * fy * fx;
                }
            }
        }
    }
    dx
}
